#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freescale/errors.hpp"

namespace freescale::config {

/// key = value file with [section] headers and # comments. Section names
/// prefix their keys ("[balancer] enabled" -> "balancer.enabled"). Flag
/// overrides set() after parsing win over file values.
class KeyValues {
 public:
  static KeyValues parse_file(const std::string& path);
  static KeyValues parse_string(const std::string& text);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_f64(const std::string& key, double fallback) const;
  std::int64_t get_i64(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_list(const std::string& key) const;  // comma separated

  /// Unknown keys are configuration errors, listing the offender.
  void validate_keys(std::span<const std::string> known) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace freescale::config
