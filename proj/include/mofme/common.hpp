#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mofme {

// Concatenate streamable arguments into a message string.
template <class... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error("shape: " + m) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config: " + m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error("io: " + m) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& m) : std::runtime_error("train: " + m) {}
};

// FNV-1a, used for config digests and per-parameter init streams.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Shortest round-trippable decimal form of a double ("%.17g" tail trimmed).
std::string format_double(double v);

}  // namespace mofme
