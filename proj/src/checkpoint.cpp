#include "ccbert/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace ccbert {

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"d", cfg.d},
              {"layers", cfg.layers},
              {"heads", cfg.heads},
              {"ffn_mult", cfg.ffn_mult},
              {"max_len", cfg.max_len},
              {"vocab_code", cfg.vocab_code},
              {"vocab_edit", cfg.vocab_edit},
              {"dropout", cfg.dropout},
              {"tie_heads", cfg.tie_heads}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<int64_t>();
  cfg.layers = j.at("layers").get<int64_t>();
  cfg.heads = j.at("heads").get<int64_t>();
  cfg.ffn_mult = j.at("ffn_mult").get<int64_t>();
  cfg.max_len = j.at("max_len").get<int64_t>();
  cfg.vocab_code = j.at("vocab_code").get<int64_t>();
  cfg.vocab_edit = j.at("vocab_edit").get<int64_t>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.tie_heads = j.at("tie_heads").get<bool>();
  cfg.validate();
  return cfg;
}

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_tensor(std::ostream& out, const std::string& name, const Shape& shape,
                  const std::vector<float>& data) {
  write_u64(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(out, shape.size());
  for (int64_t d : shape) write_u64(out, static_cast<uint64_t>(d));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

struct Reader {
  std::ifstream in;
  std::string path;

  void read_bytes(void* dst, size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) {
      fail("BadCheckpoint", path + ": truncated while reading " + std::string(what));
    }
  }
  uint32_t read_u32(const char* what) {
    uint32_t v = 0;
    read_bytes(&v, sizeof(v), what);
    return v;
  }
  uint64_t read_u64(const char* what) {
    uint64_t v = 0;
    read_bytes(&v, sizeof(v), what);
    return v;
  }
};

struct RawTensor {
  Shape shape;
  std::vector<float> data;
};

}  // namespace

void save_checkpoint(const std::string& path, ModelParams<float>& params,
                     const CheckpointMeta& meta) {
  AtomicFile file(path);
  std::ostream& out = file.stream();
  out.write(kCheckpointMagic, 10);
  write_u32(out, kCheckpointVersion);

  json config = model_config_to_json(params.config);
  config["kind"] = meta.kind;
  config["step"] = meta.step;
  config["has_adam"] = meta.has_adam;
  const std::string config_str = config.dump();
  write_u64(out, config_str.size());
  out.write(config_str.data(), static_cast<std::streamsize>(config_str.size()));

  for (Parameter<float>* p : params.all_parameters()) {
    write_tensor(out, p->name, p->value->shape, p->value->data);
    if (meta.has_adam) {
      const Shape& s = p->value->shape;
      if (p->adam_m.empty()) {
        const std::vector<float> zeros(p->value->data.size(), 0.0f);
        write_tensor(out, "adam.m." + p->name, s, zeros);
        write_tensor(out, "adam.v." + p->name, s, zeros);
      } else {
        write_tensor(out, "adam.m." + p->name, s, p->adam_m);
        write_tensor(out, "adam.v." + p->name, s, p->adam_v);
      }
    }
  }
  file.commit();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) fail("IoError", "cannot open " + path);

  char magic[10];
  r.read_bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, 10) != 0) {
    fail("BadCheckpoint", path + ": bad magic");
  }
  const uint32_t version = r.read_u32("version");
  if (version != kCheckpointVersion) {
    fail("BadCheckpoint", path + ": unsupported version " + std::to_string(version));
  }
  const uint64_t config_len = r.read_u64("config length");
  std::string config_str(config_len, '\0');
  r.read_bytes(config_str.data(), config_len, "config");
  json config = json::parse(config_str, nullptr, false);
  if (config.is_discarded()) fail("BadCheckpoint", path + ": config block is not JSON");

  LoadedCheckpoint out;
  out.meta.kind = config.value("kind", "pretrain");
  out.meta.step = config.value("step", int64_t{0});
  out.meta.has_adam = config.value("has_adam", false);
  const ModelConfig cfg = model_config_from_json(config);

  std::unordered_map<std::string, RawTensor> tensors;
  while (true) {
    uint64_t name_len = 0;
    r.in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (r.in.gcount() == 0) break;  // clean EOF
    if (static_cast<size_t>(r.in.gcount()) != sizeof(name_len)) {
      fail("BadCheckpoint", path + ": truncated tensor header");
    }
    std::string name(name_len, '\0');
    r.read_bytes(name.data(), name_len, "tensor name");
    const uint64_t rank = r.read_u64("tensor rank");
    RawTensor t;
    uint64_t numel = 1;
    for (uint64_t i = 0; i < rank; ++i) {
      const uint64_t dim = r.read_u64("tensor dim");
      t.shape.push_back(static_cast<int64_t>(dim));
      numel *= dim;
    }
    t.data.resize(numel);
    r.read_bytes(t.data.data(), numel * sizeof(float), name.c_str());
    if (!tensors.emplace(std::move(name), std::move(t)).second) {
      fail("BadCheckpoint", path + ": duplicate tensor");
    }
  }

  // Materialize params from the tensor map, verifying name and shape.
  out.params = init_params<float>(cfg, 0);
  std::unordered_set<std::string> consumed;
  auto take = [&](const std::string& name, const Shape& expect) -> std::vector<float>& {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      fail("BadCheckpoint", path + ": missing tensor '" + name + "'");
    }
    if (it->second.shape != expect) {
      fail("BadCheckpoint", path + ": tensor '" + name + "' has shape " +
                                shape_str(it->second.shape) + ", config requires " +
                                shape_str(expect));
    }
    consumed.insert(name);
    return it->second.data;
  };

  for (Parameter<float>* p : out.params.all_parameters()) {
    p->value->data = take(p->name, p->value->shape);
    if (out.meta.has_adam) {
      p->adam_m = take("adam.m." + p->name, p->value->shape);
      p->adam_v = take("adam.v." + p->name, p->value->shape);
      p->step = out.meta.step;
    }
  }
  for (const auto& [name, tensor] : tensors) {
    if (!consumed.count(name)) {
      fail("BadCheckpoint", path + ": unexpected tensor '" + name + "'");
    }
  }
  return out;
}

}  // namespace ccbert
