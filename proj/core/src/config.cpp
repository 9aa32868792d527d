#include "spotdiff/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "spotdiff/error.hpp"

namespace spotdiff {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Documented keys with their defaults (toy scale).
const std::map<std::string, std::string>& default_table() {
  static const std::map<std::string, std::string> table = {
      {"seed", "0"},
      {"image.size", "32"},

      {"encoder.base_channels", "16"},
      {"encoder.bias", "true"},
      {"encoder.pretrain_steps", "300"},
      {"encoder.pretrain_batch", "16"},
      {"encoder.pretrain_lr", "0.002"},

      {"features.d_enc", "64"},
      {"features.d_main", "64"},
      {"features.d_text", "64"},

      {"mapper.layers", "5"},
      {"mapper.hidden", "128"},
      {"mapper.dropout", "0.1"},
      {"mapper.residual", "true"},
      {"expert.layers", "3"},
      {"expert.hidden", "128"},
      {"expert.dropout", "0.1"},
      {"align.layers", "2"},
      {"align.hidden", "128"},

      {"text.mlp_hidden", "128"},

      {"denoiser.base_channels", "16"},
      {"denoiser.time_dim", "64"},
      {"denoiser.groups", "4"},

      {"codec.kind", "identity"},

      {"schedule.T", "100"},
      {"schedule.kind", "linear"},
      {"schedule.beta_start", "0.0001"},
      {"schedule.beta_end", "0.02"},

      {"sampler.kind", "ddim"},
      {"sampler.steps", "50"},

      {"loss.lambda1", "0.01"},
      {"loss.lambda2", "0.1"},

      {"decouple.mode", "sequential"},
      {"decouple.eps", "1e-12"},
      {"ablate", "none"},

      {"backbone.pretrain_steps", "1500"},
      {"backbone.batch_size", "8"},
      {"backbone.lr", "0.001"},

      {"heads.dim", "32"},
      {"heads.steps", "300"},
      {"heads.lr", "0.01"},

      {"train.steps", "500"},
      {"train.batch_size", "8"},
      {"train.base_lr", "0.0001"},
      {"train.weight_decay", "0.01"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.gradient_flow", "detached"},

      {"corpus.shape_families", "6"},
      {"corpus.identities", "48"},
      {"corpus.heldout_identities", "12"},
      {"corpus.poses", "10"},
      {"corpus.backgrounds", "20"},
      {"corpus.originals", "100"},
      {"corpus.subjects_per_original", "10"},
      {"corpus.backgrounds_per_subject", "10"},
      {"corpus.pose_variants", "3"},

      {"eval.pairs", "200"},
      {"eval.generations", "24"},
      {"eval.sample_steps", "25"},
  };
  return table;
}

}  // namespace

Config Config::defaults() {
  Config c;
  c.values_ = default_table();
  return c;
}

Config Config::parse(const std::string& text) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Config::set(const std::string& key, const std::string& value) {
  if (!default_table().count(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

std::string Config::env_name(const std::string& key) {
  std::string name = "SPOTDIFF_";
  for (char ch : key) name += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return name;
}

void Config::apply_env_overrides() {
  for (const auto& [key, _] : default_table()) {
    if (const char* v = std::getenv(env_name(key).c_str())) values_[key] = v;
  }
}

std::string Config::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

int Config::get_int(const std::string& key) const {
  const std::string s = get_string(key);
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "' is not an integer: " + s);
  }
  return v;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const std::string s = get_string(key);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: " + s);
  }
  return v;
}

double Config::get_double(const std::string& key) const {
  const std::string s = get_string(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("config key '" + key + "' is not a number: " + s);
  }
  return v;
}

bool Config::get_bool(const std::string& key) const {
  const std::string s = get_string(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + s);
}

std::string Config::to_string() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  return os.str();
}

std::string Config::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_string()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace spotdiff
