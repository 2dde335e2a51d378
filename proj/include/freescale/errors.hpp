#pragma once

#include <stdexcept>
#include <string>

namespace freescale {

/// Invalid configuration (bad key, impossible parameter combination).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A collective operation failed consistently on all participating ranks
/// (size mismatch, inconsistent metadata, torn-down fabric).
class CollectiveError : public std::runtime_error {
 public:
  explicit CollectiveError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A protocol step was invoked out of order or on missing state.
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or truncated on-disk data.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace freescale
