#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace spotdiff {

/// Flat key-value configuration.
///
/// File syntax is one `key = value` per line; `#` starts a comment. Every key
/// must be known (see `Config::defaults()`); unknown keys are configuration
/// errors so typos never pass silently. Values are validated when read through
/// the typed getters.
///
/// Precedence when assembled by the CLI: flags > environment > file > defaults.
/// Environment overrides use the prefix `SPOTDIFF_` with the key upper-cased
/// and dots replaced by underscores, e.g. `SPOTDIFF_TRAIN_STEPS=200`.
class Config {
 public:
  /// Defaults for every documented key.
  static Config defaults();
  /// Defaults overlaid with the contents of `path`.
  static Config load(const std::string& path);
  /// Parses `key = value` text (same syntax as files) on top of defaults.
  static Config parse(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void apply_env_overrides();

  std::string get_string(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical text form: sorted `key = value` lines.
  std::string to_string() const;
  /// Hex FNV-1a 64 of the canonical text.
  std::string hash() const;

  static std::string env_name(const std::string& key);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace spotdiff
