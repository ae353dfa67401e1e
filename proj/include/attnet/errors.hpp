#ifndef ATTNET_ERRORS_HPP_
#define ATTNET_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace attnet {

// Shape/dimension mismatches. Messages name the offending axis.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, divergence, failed numeric preconditions.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad config files, bad CLI usage, invalid network specs.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / filesystem problems.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace attnet

#endif  // ATTNET_ERRORS_HPP_
