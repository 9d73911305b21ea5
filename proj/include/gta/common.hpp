#pragma once

#include <stdexcept>
#include <string>

namespace gta {

inline constexpr const char* version_string = "gta-lab 0.1.0";

// Bad shapes, bad flags, contract violations. CLI exit code 1.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and file-format problems. CLI exit code 2.
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values encountered during numerical work. CLI exit code 3.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gta
