#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ccbert {

// All library failures are reported as an Error carrying a short machine
// readable kind ("ShapeMismatch", "MalformedDiff", ...) plus a human message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

[[noreturn]] inline void fail(const std::string& kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace ccbert
