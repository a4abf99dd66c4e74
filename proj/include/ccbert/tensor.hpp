#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ccbert/error.hpp"
#include "ccbert/rng.hpp"

namespace ccbert {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor. Gradient storage is allocated (zeroed) iff
// requires_grad, and always matches the data shape.
template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<Real>>();
  const int64_t n = shape_numel(shape);
  t->shape = std::move(shape);
  t->data.assign(static_cast<size_t>(n), Real(0));
  t->requires_grad = requires_grad;
  if (requires_grad) t->grad.assign(static_cast<size_t>(n), Real(0));
  return t;
}

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> data, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<Real>>();
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    fail("ShapeMismatch", "tensor data size " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
  }
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  if (requires_grad) t->grad.assign(t->data.size(), Real(0));
  return t;
}

template <typename Real>
void zero_grad(const TensorPtr<Real>& t) {
  std::fill(t->grad.begin(), t->grad.end(), Real(0));
}

namespace detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using EMap = Eigen::Map<EMat<Real>>;
template <typename Real>
using ECMap = Eigen::Map<const EMat<Real>>;
template <typename Real>
using EArrMap = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using ECArrMap = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

// NumPy-style broadcast: align shapes on the right; dims must match or be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail("ShapeMismatch", std::string(op) + ": cannot broadcast " + shape_str(a) +
                                " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` embedded in `out` (right-aligned), with stride 0 on
// broadcast dimensions.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t stride = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    const size_t src = shape.size() - 1 - i;
    const size_t dst = out.size() - 1 - i;
    strides[dst] = shape[src] == 1 ? 0 : stride;
    stride *= shape[src];
  }
  return strides;
}

// Walks every flat index of `out_shape`, handing the callback the matching
// offsets into two broadcast inputs.
template <typename Fn>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t total = shape_numel(out_shape);
  const auto rank = static_cast<int64_t>(out_shape.size());
  if (rank == 0) {
    if (total == 1) fn(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t offa = 0, offb = 0;
  for (int64_t flat = 0; flat < total; ++flat) {
    fn(flat, offa, offb);
    for (int64_t d = rank - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      offa += sa[static_cast<size_t>(d)];
      offb += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      offa -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      offb -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
}

}  // namespace detail

// Records one forward computation; backward() replays the adjoint ops in
// reverse. A Tape instance is confined to a single thread.
template <typename Real>
class Tape {
 public:
  TensorPtr<Real> add(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->shape == b->shape) {
      auto out = result(a->shape, a, b);
      for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
      if (out->requires_grad) {
        record([a, b, out] {
          if (a->requires_grad) {
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
          }
          if (b->requires_grad) {
            for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += out->grad[i];
          }
        });
      }
      return out;
    }
    return broadcast_binary(a, b, "add",
                            [](Real x, Real y) { return x + y; },
                            [](Real, Real, Real g) { return std::pair<Real, Real>(g, g); });
  }

  TensorPtr<Real> mul(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    return broadcast_binary(a, b, "mul",
                            [](Real x, Real y) { return x * y; },
                            [](Real x, Real y, Real g) {
                              return std::pair<Real, Real>(g * y, g * x);
                            });
  }

  TensorPtr<Real> scale(const TensorPtr<Real>& a, Real c) {
    auto out = result(a->shape, a);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * c;
    if (out->requires_grad) {
      record([a, out, c] {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += c * out->grad[i];
      });
    }
    return out;
  }

  // a: [batch..., m, k]. b: rank 2 (shared across the batch) or with batch
  // dims equal to a's. With transpose_b, b stores [..., n, k].
  TensorPtr<Real> matmul(const TensorPtr<Real>& a, const TensorPtr<Real>& b,
                         bool transpose_b = false) {
    if (a->shape.size() < 2 || b->shape.size() < 2) {
      fail("ShapeMismatch", "matmul: need rank >= 2, got " + shape_str(a->shape) +
                                " x " + shape_str(b->shape));
    }
    const int64_t m = a->shape[a->shape.size() - 2];
    const int64_t k = a->shape[a->shape.size() - 1];
    const int64_t bk = transpose_b ? b->shape.back() : b->shape[b->shape.size() - 2];
    const int64_t n = transpose_b ? b->shape[b->shape.size() - 2] : b->shape.back();
    const bool shared_b = b->shape.size() == 2;
    if (bk != k) {
      fail("ShapeMismatch",
           "matmul: inner dims differ, " + shape_str(a->shape) + " x " +
               shape_str(b->shape) + (transpose_b ? " (b transposed)" : ""));
    }
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < a->shape.size(); ++i) batch *= a->shape[i];
    if (!shared_b) {
      if (b->shape.size() != a->shape.size() ||
          !std::equal(a->shape.begin(), a->shape.end() - 2, b->shape.begin())) {
        fail("ShapeMismatch", "matmul: batch dims differ, " + shape_str(a->shape) +
                                  " x " + shape_str(b->shape));
      }
    }

    Shape out_shape(a->shape.begin(), a->shape.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    auto out = result(std::move(out_shape), a, b);

    using detail::ECMap;
    using detail::EMap;
    const int64_t b_rows = transpose_b ? n : k;
    const int64_t b_cols = transpose_b ? k : n;
    for (int64_t s = 0; s < batch; ++s) {
      ECMap<Real> A(a->data.data() + s * m * k, m, k);
      ECMap<Real> B(b->data.data() + (shared_b ? 0 : s * b_rows * b_cols), b_rows, b_cols);
      EMap<Real> C(out->data.data() + s * m * n, m, n);
      if (transpose_b) {
        C.noalias() = A * B.transpose();
      } else {
        C.noalias() = A * B;
      }
    }

    if (out->requires_grad) {
      record([a, b, out, m, k, n, batch, shared_b, transpose_b, b_rows, b_cols] {
        using detail::ECMap;
        using detail::EMap;
        for (int64_t s = 0; s < batch; ++s) {
          ECMap<Real> G(out->grad.data() + s * m * n, m, n);
          ECMap<Real> A(a->data.data() + s * m * k, m, k);
          ECMap<Real> B(b->data.data() + (shared_b ? 0 : s * b_rows * b_cols), b_rows,
                        b_cols);
          if (a->requires_grad) {
            EMap<Real> dA(a->grad.data() + s * m * k, m, k);
            if (transpose_b) {
              dA.noalias() += G * B;
            } else {
              dA.noalias() += G * B.transpose();
            }
          }
          if (b->requires_grad) {
            EMap<Real> dB(b->grad.data() + (shared_b ? 0 : s * b_rows * b_cols), b_rows,
                          b_cols);
            if (transpose_b) {
              dB.noalias() += G.transpose() * A;
            } else {
              dB.noalias() += A.transpose() * G;
            }
          }
        }
      });
    }
    return out;
  }

  // x [rows, k] * w [k, n] + bias [n] in one node. With transpose_w, w stores
  // [n, k].
  TensorPtr<Real> linear(const TensorPtr<Real>& x, const TensorPtr<Real>& w,
                         const TensorPtr<Real>& bias, bool transpose_w = false) {
    using detail::ECMap;
    using detail::EMap;
    if (x->shape.size() != 2 || w->shape.size() != 2 || bias->shape.size() != 1) {
      fail("ShapeMismatch", "linear: x " + shape_str(x->shape) + ", w " +
                                shape_str(w->shape) + ", bias " + shape_str(bias->shape));
    }
    const int64_t rows = x->shape[0], k = x->shape[1];
    const int64_t wk = transpose_w ? w->shape[1] : w->shape[0];
    const int64_t n = transpose_w ? w->shape[0] : w->shape[1];
    if (wk != k || bias->shape[0] != n) {
      fail("ShapeMismatch", "linear: x " + shape_str(x->shape) + ", w " +
                                shape_str(w->shape) + ", bias " + shape_str(bias->shape));
    }
    auto out = result(Shape{rows, n}, x, w, bias);
    {
      ECMap<Real> X(x->data.data(), rows, k);
      ECMap<Real> W(w->data.data(), w->shape[0], w->shape[1]);
      EMap<Real> Y(out->data.data(), rows, n);
      if (transpose_w) {
        Y.noalias() = X * W.transpose();
      } else {
        Y.noalias() = X * W;
      }
      Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> B(bias->data.data(), n);
      Y.rowwise() += B;
    }
    if (out->requires_grad) {
      record([x, w, bias, out, rows, k, n, transpose_w] {
        ECMap<Real> G(out->grad.data(), rows, n);
        ECMap<Real> X(x->data.data(), rows, k);
        ECMap<Real> W(w->data.data(), w->shape[0], w->shape[1]);
        if (x->requires_grad) {
          EMap<Real> dX(x->grad.data(), rows, k);
          if (transpose_w) {
            dX.noalias() += G * W;
          } else {
            dX.noalias() += G * W.transpose();
          }
        }
        if (w->requires_grad) {
          EMap<Real> dW(w->grad.data(), w->shape[0], w->shape[1]);
          if (transpose_w) {
            dW.noalias() += G.transpose() * X;
          } else {
            dW.noalias() += X.transpose() * G;
          }
        }
        if (bias->requires_grad) {
          Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>> dB(bias->grad.data(), n);
          dB += G.colwise().sum();
        }
      });
    }
    return out;
  }

  // [B*L, H*hd] -> [B, H, L, hd]
  TensorPtr<Real> split_heads(const TensorPtr<Real>& a, int64_t bsz, int64_t len,
                              int64_t heads, int64_t head_dim) {
    if (a->shape != Shape{bsz * len, heads * head_dim}) {
      fail("ShapeMismatch", "split_heads: got " + shape_str(a->shape));
    }
    auto out = result(Shape{bsz, heads, len, head_dim}, a);
    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t l = 0; l < len; ++l) {
        const Real* src = a->data.data() + ((b * len + l) * heads) * head_dim;
        for (int64_t h = 0; h < heads; ++h) {
          Real* dst = out->data.data() + (((b * heads + h) * len + l) * head_dim);
          std::copy(src + h * head_dim, src + (h + 1) * head_dim, dst);
        }
      }
    }
    if (out->requires_grad) {
      record([a, out, bsz, len, heads, head_dim] {
        for (int64_t b = 0; b < bsz; ++b) {
          for (int64_t l = 0; l < len; ++l) {
            Real* dst = a->grad.data() + ((b * len + l) * heads) * head_dim;
            for (int64_t h = 0; h < heads; ++h) {
              const Real* src =
                  out->grad.data() + (((b * heads + h) * len + l) * head_dim);
              for (int64_t c = 0; c < head_dim; ++c) dst[h * head_dim + c] += src[c];
            }
          }
        }
      });
    }
    return out;
  }

  // [B, H, L, hd] -> [B*L, H*hd]
  TensorPtr<Real> merge_heads(const TensorPtr<Real>& a) {
    if (a->shape.size() != 4) {
      fail("ShapeMismatch", "merge_heads: expected rank 4, got " + shape_str(a->shape));
    }
    const int64_t bsz = a->shape[0], heads = a->shape[1], len = a->shape[2],
                  head_dim = a->shape[3];
    auto out = result(Shape{bsz * len, heads * head_dim}, a);
    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t l = 0; l < len; ++l) {
          const Real* src = a->data.data() + (((b * heads + h) * len + l) * head_dim);
          Real* dst = out->data.data() + ((b * len + l) * heads + h) * head_dim;
          std::copy(src, src + head_dim, dst);
        }
      }
    }
    if (out->requires_grad) {
      record([a, out, bsz, heads, len, head_dim] {
        for (int64_t b = 0; b < bsz; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            for (int64_t l = 0; l < len; ++l) {
              Real* dst = a->grad.data() + (((b * heads + h) * len + l) * head_dim);
              const Real* src =
                  out->grad.data() + ((b * len + l) * heads + h) * head_dim;
              for (int64_t c = 0; c < head_dim; ++c) dst[c] += src[c];
            }
          }
        }
      });
    }
    return out;
  }

  TensorPtr<Real> reshape(const TensorPtr<Real>& a, Shape shape) {
    if (shape_numel(shape) != a->numel()) {
      fail("ShapeMismatch", "reshape: " + shape_str(a->shape) + " to " + shape_str(shape) +
                                " changes element count");
    }
    auto out = result(std::move(shape), a);
    out->data = a->data;
    if (out->requires_grad) {
      record([a, out] {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
      });
    }
    return out;
  }

  TensorPtr<Real> permute(const TensorPtr<Real>& a, const std::vector<int64_t>& axes) {
    const size_t rank = a->shape.size();
    if (axes.size() != rank) {
      fail("ShapeMismatch", "permute: " + std::to_string(axes.size()) + " axes for " +
                                shape_str(a->shape));
    }
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = a->shape[static_cast<size_t>(axes[i])];

    // out flat index -> in flat index mapping via strides
    std::vector<int64_t> in_strides(rank, 1);
    for (size_t i = rank - 1; i > 0; --i) {
      in_strides[i - 1] = in_strides[i] * a->shape[i];
    }
    std::vector<int64_t> walk(rank);
    for (size_t i = 0; i < rank; ++i) walk[i] = in_strides[static_cast<size_t>(axes[i])];

    auto out = result(out_shape, a);
    const int64_t total = a->numel();
    std::vector<int64_t> idx(rank, 0);
    int64_t off = 0;
    for (int64_t flat = 0; flat < total; ++flat) {
      out->data[static_cast<size_t>(flat)] = a->data[static_cast<size_t>(off)];
      for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
        ++idx[static_cast<size_t>(d)];
        off += walk[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
        idx[static_cast<size_t>(d)] = 0;
        off -= walk[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      }
    }

    if (out->requires_grad) {
      record([a, out, out_shape, walk, rank, total] {
        std::vector<int64_t> idx(rank, 0);
        int64_t off = 0;
        for (int64_t flat = 0; flat < total; ++flat) {
          a->grad[static_cast<size_t>(off)] += out->grad[static_cast<size_t>(flat)];
          for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            ++idx[static_cast<size_t>(d)];
            off += walk[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            off -= walk[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
          }
        }
      });
    }
    return out;
  }

  // Exact (erf-based) gelu.
  TensorPtr<Real> gelu(const TensorPtr<Real>& a) {
    using detail::EArrMap;
    using detail::ECArrMap;
    auto out = result(a->shape, a);
    const int64_t n = a->numel();
    {
      ECArrMap<Real> x(a->data.data(), n);
      EArrMap<Real> y(out->data.data(), n);
      y = Real(0.5) * x * (Real(1) + (x * Real(detail::kInvSqrt2)).erf());
    }
    if (out->requires_grad) {
      record([a, out, n] {
        ECArrMap<Real> x(a->data.data(), n);
        ECArrMap<Real> dy(out->grad.data(), n);
        EArrMap<Real> dx(a->grad.data(), n);
        dx += (Real(0.5) * (Real(1) + (x * Real(detail::kInvSqrt2)).erf()) +
               x * Real(detail::kInvSqrt2Pi) * (Real(-0.5) * x * x).exp()) *
              dy;
      });
    }
    return out;
  }

  TensorPtr<Real> softmax_lastdim(const TensorPtr<Real>& a) {
    if (a->shape.empty()) fail("ShapeMismatch", "softmax: scalar input");
    using detail::EArrMap;
    using detail::ECArrMap;
    const int64_t cols = a->shape.back();
    const int64_t rows = a->numel() / cols;
    auto out = result(a->shape, a);
    for (int64_t r = 0; r < rows; ++r) {
      ECArrMap<Real> x(a->data.data() + r * cols, cols);
      EArrMap<Real> y(out->data.data() + r * cols, cols);
      y = (x - x.maxCoeff()).exp();
      y *= Real(1) / y.sum();
    }
    if (out->requires_grad) {
      record([a, out, rows, cols] {
        for (int64_t r = 0; r < rows; ++r) {
          ECArrMap<Real> y(out->data.data() + r * cols, cols);
          ECArrMap<Real> dy(out->grad.data() + r * cols, cols);
          EArrMap<Real> dx(a->grad.data() + r * cols, cols);
          const Real dot = (dy * y).sum();
          dx += y * (dy - dot);
        }
      });
    }
    return out;
  }

  // softmax(scale * x + key mask) over the last dim of [B, H, L, L] attention
  // scores; keys at PAD positions (non_pad[b*L+j] == 0) get zero weight. The
  // fused form avoids materializing the scaled and masked intermediates.
  TensorPtr<Real> masked_softmax(const TensorPtr<Real>& a, Real scale,
                                 const std::vector<uint8_t>& non_pad) {
    if (a->shape.size() != 4 || a->shape[2] != a->shape[3]) {
      fail("ShapeMismatch", "masked_softmax: expected [B, H, L, L], got " +
                                shape_str(a->shape));
    }
    const int64_t bsz = a->shape[0], heads = a->shape[1], len = a->shape[2];
    if (static_cast<int64_t>(non_pad.size()) != bsz * len) {
      fail("ShapeMismatch", "masked_softmax: mask size " +
                                std::to_string(non_pad.size()) + " vs " +
                                shape_str(a->shape));
    }
    auto out = result(a->shape, a);
    using detail::EArrMap;
    using detail::ECArrMap;
    for (int64_t b = 0; b < bsz; ++b) {
      const uint8_t* allowed = non_pad.data() + b * len;
      // padded batches always mask a suffix; that case vectorizes cleanly
      int64_t prefix = 0;
      while (prefix < len && allowed[prefix]) ++prefix;
      bool is_prefix = true;
      for (int64_t j = prefix; j < len; ++j) is_prefix &= (allowed[j] == 0);

      for (int64_t hq = 0; hq < heads * len; ++hq) {
        const Real* x = a->data.data() + (b * heads * len + hq) * len;
        Real* y = out->data.data() + (b * heads * len + hq) * len;
        if (is_prefix && prefix > 0) {
          ECArrMap<Real> xh(x, prefix);
          EArrMap<Real> yh(y, prefix);
          yh = (scale * (xh - xh.maxCoeff())).exp();
          yh *= Real(1) / yh.sum();
          std::fill(y + prefix, y + len, Real(0));
          continue;
        }
        Real mx = std::numeric_limits<Real>::lowest();
        for (int64_t j = 0; j < len; ++j) {
          if (allowed[j] && x[j] > mx) mx = x[j];
        }
        Real sum = Real(0);
        for (int64_t j = 0; j < len; ++j) {
          y[j] = allowed[j] ? std::exp(scale * x[j] - scale * mx) : Real(0);
          sum += y[j];
        }
        const Real inv = Real(1) / sum;
        for (int64_t j = 0; j < len; ++j) y[j] *= inv;
      }
    }
    if (out->requires_grad) {
      record([a, out, scale, bsz, heads, len] {
        for (int64_t row = 0; row < bsz * heads * len; ++row) {
          using detail::EArrMap;
          using detail::ECArrMap;
          ECArrMap<Real> y(out->data.data() + row * len, len);
          ECArrMap<Real> dy(out->grad.data() + row * len, len);
          EArrMap<Real> dx(a->grad.data() + row * len, len);
          const Real dot = (dy * y).sum();
          dx += scale * y * (dy - dot);  // masked keys have y == 0
        }
      });
    }
    return out;
  }

  // Normalizes the last dimension to zero mean / unit variance (biased
  // variance), then applies gain and bias.
  TensorPtr<Real> layer_norm(const TensorPtr<Real>& x, const TensorPtr<Real>& gain,
                             const TensorPtr<Real>& bias, Real eps) {
    if (x->shape.empty() || gain->shape != Shape{x->shape.back()} ||
        bias->shape != Shape{x->shape.back()}) {
      fail("ShapeMismatch", "layer_norm: x " + shape_str(x->shape) + ", gain " +
                                shape_str(gain->shape) + ", bias " +
                                shape_str(bias->shape));
    }
    const int64_t d = x->shape.back();
    const int64_t rows = x->numel() / d;
    auto out = result(x->shape, x, gain, bias);
    auto xhat = std::make_shared<std::vector<Real>>(x->data.size());
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      const Real* xr = x->data.data() + r * d;
      Real mean = Real(0);
      for (int64_t c = 0; c < d; ++c) mean += xr[c];
      mean /= static_cast<Real>(d);
      Real var = Real(0);
      for (int64_t c = 0; c < d; ++c) {
        const Real diff = xr[c] - mean;
        var += diff * diff;
      }
      var /= static_cast<Real>(d);
      const Real inv = Real(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = inv;
      Real* hr = xhat->data() + r * d;
      Real* yr = out->data.data() + r * d;
      for (int64_t c = 0; c < d; ++c) {
        hr[c] = (xr[c] - mean) * inv;
        yr[c] = hr[c] * gain->data[static_cast<size_t>(c)] +
                bias->data[static_cast<size_t>(c)];
      }
    }
    if (out->requires_grad) {
      record([x, gain, bias, out, xhat, inv_std, rows, d] {
        for (int64_t r = 0; r < rows; ++r) {
          const Real* dy = out->grad.data() + r * d;
          const Real* hr = xhat->data() + r * d;
          if (gain->requires_grad || bias->requires_grad) {
            for (int64_t c = 0; c < d; ++c) {
              if (gain->requires_grad) gain->grad[static_cast<size_t>(c)] += dy[c] * hr[c];
              if (bias->requires_grad) bias->grad[static_cast<size_t>(c)] += dy[c];
            }
          }
          if (x->requires_grad) {
            Real m1 = Real(0), m2 = Real(0);
            for (int64_t c = 0; c < d; ++c) {
              const Real dxhat = dy[c] * gain->data[static_cast<size_t>(c)];
              m1 += dxhat;
              m2 += dxhat * hr[c];
            }
            m1 /= static_cast<Real>(d);
            m2 /= static_cast<Real>(d);
            const Real inv = (*inv_std)[static_cast<size_t>(r)];
            Real* dx = x->grad.data() + r * d;
            for (int64_t c = 0; c < d; ++c) {
              const Real dxhat = dy[c] * gain->data[static_cast<size_t>(c)];
              dx[c] += inv * (dxhat - m1 - hr[c] * m2);
            }
          }
        }
      });
    }
    return out;
  }

  // Gathers rows of `table` ([V, d]); output shape is leading + [d].
  TensorPtr<Real> embedding(const TensorPtr<Real>& table, const std::vector<int32_t>& ids,
                            Shape leading) {
    if (table->shape.size() != 2) {
      fail("ShapeMismatch", "embedding: table must be rank 2, got " +
                                shape_str(table->shape));
    }
    const int64_t v = table->shape[0];
    const int64_t d = table->shape[1];
    if (shape_numel(leading) != static_cast<int64_t>(ids.size())) {
      fail("ShapeMismatch", "embedding: " + std::to_string(ids.size()) + " ids vs shape " +
                                shape_str(leading));
    }
    for (int32_t id : ids) {
      if (id < 0 || id >= v) {
        fail("IdOutOfRange", "embedding: id " + std::to_string(id) + " outside [0, " +
                                 std::to_string(v) + ")");
      }
    }
    Shape out_shape = leading;
    out_shape.push_back(d);
    auto out = result(std::move(out_shape), table);
    for (size_t i = 0; i < ids.size(); ++i) {
      const Real* src = table->data.data() + static_cast<int64_t>(ids[i]) * d;
      std::copy(src, src + d, out->data.data() + static_cast<int64_t>(i) * d);
    }
    if (out->requires_grad) {
      auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
      record([table, out, ids_copy, d] {
        for (size_t i = 0; i < ids_copy->size(); ++i) {
          Real* dst = table->grad.data() + static_cast<int64_t>((*ids_copy)[i]) * d;
          const Real* src = out->grad.data() + static_cast<int64_t>(i) * d;
          for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
        }
      });
    }
    return out;
  }

  // Inverted dropout. In eval mode (or p == 0) this is the identity. One draw
  // from the rng seeds a counter-based per-element mask, which keeps large
  // tensors cheap and the stream deterministic.
  TensorPtr<Real> dropout(const TensorPtr<Real>& a, double p, bool train, Rng* rng) {
    if (!train || p <= 0.0) return a;
    if (p >= 1.0) fail("BadConfig", "dropout: p must be < 1");
    if (rng == nullptr) fail("BadConfig", "dropout: training mode needs an rng");
    auto keep = std::make_shared<std::vector<Real>>(a->data.size());
    const Real scale = static_cast<Real>(1.0 / (1.0 - p));
    const uint64_t base = rng->next();
    auto out = result(a->shape, a);
    for (size_t i = 0; i < a->data.size(); ++i) {
      const Real k =
          unit_from_bits(splitmix64(base + i)) >= p ? scale : Real(0);
      (*keep)[i] = k;
      out->data[i] = a->data[i] * k;
    }
    if (out->requires_grad) {
      record([a, out, keep] {
        for (size_t i = 0; i < a->grad.size(); ++i) {
          a->grad[i] += out->grad[i] * (*keep)[i];
        }
      });
    }
    return out;
  }

  // Mean of x[b, l, :] over positions where keep[b*L + l] is true.
  TensorPtr<Real> masked_mean(const TensorPtr<Real>& x, const std::vector<uint8_t>& keep) {
    if (x->shape.size() != 3) {
      fail("ShapeMismatch", "masked_mean: expected [B, L, d], got " + shape_str(x->shape));
    }
    const int64_t bsz = x->shape[0], len = x->shape[1], d = x->shape[2];
    if (static_cast<int64_t>(keep.size()) != bsz * len) {
      fail("ShapeMismatch", "masked_mean: mask size " + std::to_string(keep.size()) +
                                " vs " + shape_str(x->shape));
    }
    auto counts = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(bsz), 0);
    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t l = 0; l < len; ++l) {
        (*counts)[static_cast<size_t>(b)] += keep[static_cast<size_t>(b * len + l)] != 0;
      }
      if ((*counts)[static_cast<size_t>(b)] == 0) {
        fail("AllPadInstance", "masked_mean: instance " + std::to_string(b) +
                                   " has no non-PAD position");
      }
    }
    auto out = result(Shape{bsz, d}, x);
    auto keep_copy = std::make_shared<std::vector<uint8_t>>(keep);
    for (int64_t b = 0; b < bsz; ++b) {
      Real* dst = out->data.data() + b * d;
      for (int64_t l = 0; l < len; ++l) {
        if (!keep[static_cast<size_t>(b * len + l)]) continue;
        const Real* src = x->data.data() + (b * len + l) * d;
        for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      const Real inv = Real(1) / static_cast<Real>((*counts)[static_cast<size_t>(b)]);
      for (int64_t c = 0; c < d; ++c) dst[c] *= inv;
    }
    if (out->requires_grad) {
      record([x, out, keep_copy, counts, bsz, len, d] {
        for (int64_t b = 0; b < bsz; ++b) {
          const Real inv = Real(1) / static_cast<Real>((*counts)[static_cast<size_t>(b)]);
          const Real* g = out->grad.data() + b * d;
          for (int64_t l = 0; l < len; ++l) {
            if (!(*keep_copy)[static_cast<size_t>(b * len + l)]) continue;
            Real* dst = x->grad.data() + (b * len + l) * d;
            for (int64_t c = 0; c < d; ++c) dst[c] += g[c] * inv;
          }
        }
      });
    }
    return out;
  }

  // Gathers rows of a rank-2 tensor.
  TensorPtr<Real> gather_rows(const TensorPtr<Real>& x, const std::vector<int64_t>& rows) {
    if (x->shape.size() != 2) {
      fail("ShapeMismatch", "gather_rows: expected rank 2, got " + shape_str(x->shape));
    }
    const int64_t r = x->shape[0], d = x->shape[1];
    for (int64_t row : rows) {
      if (row < 0 || row >= r) {
        fail("IdOutOfRange", "gather_rows: row " + std::to_string(row) + " outside [0, " +
                                 std::to_string(r) + ")");
      }
    }
    auto out = result(Shape{static_cast<int64_t>(rows.size()), d}, x);
    for (size_t i = 0; i < rows.size(); ++i) {
      const Real* src = x->data.data() + rows[i] * d;
      std::copy(src, src + d, out->data.data() + static_cast<int64_t>(i) * d);
    }
    if (out->requires_grad) {
      auto rows_copy = std::make_shared<std::vector<int64_t>>(rows);
      record([x, out, rows_copy, d] {
        for (size_t i = 0; i < rows_copy->size(); ++i) {
          Real* dst = x->grad.data() + (*rows_copy)[i] * d;
          const Real* src = out->grad.data() + static_cast<int64_t>(i) * d;
          for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
        }
      });
    }
    return out;
  }

  // Sum over rows (targets[row] != ignore_index) of -log softmax(logits)[target].
  // Rows whose target equals ignore_index contribute zero loss and gradient.
  // If counted is non-null it receives the number of contributing rows.
  TensorPtr<Real> cross_entropy_sum(const TensorPtr<Real>& logits,
                                    const std::vector<int32_t>& targets,
                                    int32_t ignore_index, int64_t* counted = nullptr) {
    if (logits->shape.size() != 2) {
      fail("ShapeMismatch", "cross_entropy: expected [rows, classes], got " +
                                shape_str(logits->shape));
    }
    const int64_t rows = logits->shape[0], classes = logits->shape[1];
    if (static_cast<int64_t>(targets.size()) != rows) {
      fail("ShapeMismatch", "cross_entropy: " + std::to_string(targets.size()) +
                                " targets vs " + shape_str(logits->shape));
    }
    double loss = 0.0;
    int64_t count = 0;
    for (int64_t r = 0; r < rows; ++r) {
      const int32_t t = targets[static_cast<size_t>(r)];
      if (t == ignore_index) continue;
      if (t < 0 || t >= classes) {
        fail("IdOutOfRange", "cross_entropy: target " + std::to_string(t) +
                                 " outside [0, " + std::to_string(classes) + ")");
      }
      const Real* x = logits->data.data() + r * classes;
      Real mx = x[0];
      for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, x[c]);
      double sum = 0.0;
      for (int64_t c = 0; c < classes; ++c) {
        sum += std::exp(static_cast<double>(x[c] - mx));
      }
      loss += std::log(sum) + static_cast<double>(mx) - static_cast<double>(x[t]);
      ++count;
    }
    if (counted != nullptr) *counted = count;

    auto out = result(Shape{1}, logits);
    out->data[0] = static_cast<Real>(loss);
    if (out->requires_grad) {
      auto targets_copy = std::make_shared<std::vector<int32_t>>(targets);
      record([logits, out, targets_copy, ignore_index, rows, classes] {
        const Real g = out->grad[0];
        for (int64_t r = 0; r < rows; ++r) {
          const int32_t t = (*targets_copy)[static_cast<size_t>(r)];
          if (t == ignore_index) continue;
          const Real* x = logits->data.data() + r * classes;
          Real* dx = logits->grad.data() + r * classes;
          Real mx = x[0];
          for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, x[c]);
          double sum = 0.0;
          for (int64_t c = 0; c < classes; ++c) {
            sum += std::exp(static_cast<double>(x[c] - mx));
          }
          const double inv = 1.0 / sum;
          for (int64_t c = 0; c < classes; ++c) {
            const double p = std::exp(static_cast<double>(x[c] - mx)) * inv;
            dx[c] += g * static_cast<Real>(p - (c == t ? 1.0 : 0.0));
          }
        }
      });
    }
    return out;
  }

  TensorPtr<Real> sum_all(const TensorPtr<Real>& a) {
    auto out = result(Shape{1}, a);
    Real s = Real(0);
    for (Real v : a->data) s += v;
    out->data[0] = s;
    if (out->requires_grad) {
      record([a, out] {
        const Real g = out->grad[0];
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
      });
    }
    return out;
  }

  // Runs the adjoint ops in reverse. `loss` must be a scalar (numel 1).
  void backward(const TensorPtr<Real>& loss) {
    if (loss->numel() != 1) {
      fail("ShapeMismatch", "backward: loss must be scalar, got " + shape_str(loss->shape));
    }
    if (!loss->requires_grad) return;
    loss->grad[0] += Real(1);
    for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
  }

  void clear() { back_.clear(); }
  size_t node_count() const { return back_.size(); }

 private:
  template <typename... Inputs>
  TensorPtr<Real> result(Shape shape, const Inputs&... inputs) {
    const bool rg = (inputs->requires_grad || ...);
    return make_tensor<Real>(std::move(shape), rg);
  }

  template <typename Fwd, typename Bwd>
  TensorPtr<Real> broadcast_binary(const TensorPtr<Real>& a, const TensorPtr<Real>& b,
                                   const char* name, Fwd fwd, Bwd bwd) {
    const Shape out_shape = detail::broadcast_shape(a->shape, b->shape, name);
    const std::vector<int64_t> sa = detail::broadcast_strides(a->shape, out_shape);
    const std::vector<int64_t> sb = detail::broadcast_strides(b->shape, out_shape);
    auto out = result(out_shape, a, b);
    detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      out->data[static_cast<size_t>(o)] =
          fwd(a->data[static_cast<size_t>(ia)], b->data[static_cast<size_t>(ib)]);
    });
    if (out->requires_grad) {
      record([a, b, out, out_shape, sa, sb, bwd] {
        detail::for_each_broadcast(out_shape, sa, sb,
                                   [&](int64_t o, int64_t ia, int64_t ib) {
          const auto [ga, gb] =
              bwd(a->data[static_cast<size_t>(ia)], b->data[static_cast<size_t>(ib)],
                  out->grad[static_cast<size_t>(o)]);
          if (a->requires_grad) a->grad[static_cast<size_t>(ia)] += ga;
          if (b->requires_grad) b->grad[static_cast<size_t>(ib)] += gb;
        });
      });
    }
    return out;
  }

  void record(std::function<void()> fn) { back_.push_back(std::move(fn)); }

  std::vector<std::function<void()>> back_;
};

// A named, trainable tensor with its AdamW state.
template <typename Real>
struct Parameter {
  std::string name;
  TensorPtr<Real> value;
  std::vector<Real> adam_m;
  std::vector<Real> adam_v;
  int64_t step = 0;
  // Per-element decay multiplier; empty means decay everywhere. Used to
  // exempt the PAD row of the code embedding.
  std::vector<Real> decay_mask;
};

template <typename Real>
Parameter<Real> make_parameter(std::string name, Shape shape) {
  Parameter<Real> p;
  p.name = std::move(name);
  p.value = make_tensor<Real>(std::move(shape), true);
  return p;
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay: the decay term is applied to the weights directly,
// not folded into the gradient moments.
template <typename Real>
void adamw_step(const std::vector<Parameter<Real>*>& params, const AdamWConfig& cfg) {
  if (cfg.lr < 0) fail("BadConfig", "adamw_step: lr must be >= 0");
  for (Parameter<Real>* p : params) {
    const size_t n = p->value->data.size();
    if (p->adam_m.empty()) {
      p->adam_m.assign(n, Real(0));
      p->adam_v.assign(n, Real(0));
    }
    p->step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step));
    for (size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(p->value->grad[i]);
      const double m = cfg.beta1 * static_cast<double>(p->adam_m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(p->adam_v[i]) + (1.0 - cfg.beta2) * g * g;
      p->adam_m[i] = static_cast<Real>(m);
      p->adam_v[i] = static_cast<Real>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double w = static_cast<double>(p->value->data[i]);
      w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      const double mask = p->decay_mask.empty() ? 1.0 : static_cast<double>(p->decay_mask[i]);
      w -= cfg.lr * cfg.weight_decay * mask * static_cast<double>(p->value->data[i]);
      p->value->data[i] = static_cast<Real>(w);
    }
  }
}

// Compares analytic gradients of a scalar-valued computation against central
// finite differences. `build` must be a deterministic function of the current
// parameter values (rebuildable any number of times). Returns the maximum
// relative error |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
// over up to max_coords_per_param sampled coordinates of each parameter.
template <typename BuildFn>
double grad_check(BuildFn&& build, const std::vector<Parameter<double>*>& params,
                  double fd_eps = 1e-5, int64_t max_coords_per_param = 200,
                  uint64_t seed = 0x90adULL) {
  for (Parameter<double>* p : params) zero_grad(p->value);
  {
    Tape<double> tape;
    TensorPtr<double> loss = build(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter<double>* p : params) analytic.push_back(p->value->grad);

  auto eval = [&]() {
    Tape<double> tape;
    return build(tape)->data[0];
  };

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>* p = params[pi];
    const int64_t n = p->value->numel();
    Rng rng(mix_seed({seed, pi}));
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), int64_t{0});
    } else {
      coords = rng.sample_without_replacement(n, max_coords_per_param);
    }
    for (int64_t c : coords) {
      const double saved = p->value->data[static_cast<size_t>(c)];
      p->value->data[static_cast<size_t>(c)] = saved + fd_eps;
      const double up = eval();
      p->value->data[static_cast<size_t>(c)] = saved - fd_eps;
      const double down = eval();
      p->value->data[static_cast<size_t>(c)] = saved;
      const double numeric = (up - down) / (2.0 * fd_eps);
      const double exact = analytic[pi][static_cast<size_t>(c)];
      const double rel = std::abs(exact - numeric) /
                         std::max(1e-8, std::abs(exact) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ccbert
