#include "spotdiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "spotdiff/error.hpp"
#include "spotdiff/rng.hpp"

namespace spotdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, kFillColors> kFill = {{
    {0.90, 0.15, 0.15}, {0.15, 0.75, 0.20}, {0.15, 0.30, 0.90}, {0.95, 0.85, 0.10},
    {0.85, 0.20, 0.85}, {0.10, 0.85, 0.85}, {0.95, 0.55, 0.05}, {0.98, 0.98, 0.98},
}};

constexpr std::array<std::array<Rgb, 2>, kBackgroundPalettes> kPalettes = {{
    {{{0.20, 0.25, 0.35}, {0.55, 0.60, 0.70}}},
    {{{0.45, 0.30, 0.15}, {0.80, 0.70, 0.50}}},
    {{{0.10, 0.35, 0.15}, {0.45, 0.70, 0.40}}},
    {{{0.35, 0.10, 0.30}, {0.75, 0.55, 0.70}}},
    {{{0.05, 0.05, 0.05}, {0.35, 0.35, 0.35}}},
    {{{0.60, 0.35, 0.30}, {0.30, 0.45, 0.55}}},
}};

constexpr Rgb kNeutral = {0.5, 0.5, 0.5};
constexpr int kSuper = 4;

std::uint32_t hash3(std::uint32_t a, std::uint32_t b, std::uint32_t c) {
  std::uint32_t h = a * 0x9E3779B1u ^ (b + 0x7F4A7C15u) * 0x85EBCA77u ^ (c + 0x165667B1u) * 0xC2B2AE3Du;
  h ^= h >> 15;
  h *= 0x2C1B3C6Du;
  h ^= h >> 12;
  h *= 0x297A2D39u;
  h ^= h >> 15;
  return h;
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

Rgb background_at(const Background& bg, double x, double y, int size) {
  const Rgb& c1 = kPalettes[bg.palette][0];
  const Rgb& c2 = kPalettes[bg.palette][1];
  const double cell = size / 4.0;
  switch (bg.pattern) {
    case 0:
      return c1;
    case 1:
      return lerp(c1, c2, std::clamp((x + y) / (2.0 * size), 0.0, 1.0));
    case 2:
      return ((static_cast<int>(std::floor(x / cell)) + static_cast<int>(std::floor(y / cell))) % 2) ? c1 : c2;
    case 3: {
      const auto gx = static_cast<std::uint32_t>(std::floor(x / 4.0));
      const auto gy = static_cast<std::uint32_t>(std::floor(y / 4.0));
      return lerp(c1, c2, (hash3(gx, gy, static_cast<std::uint32_t>(bg.palette)) & 0xFFFF) / 65535.0);
    }
    default:
      return (static_cast<int>(std::floor((x + y) / (size / 5.0))) % 2) ? c1 : c2;
  }
}

bool inside_shape(int shape, double u, double v) {
  switch (shape) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2:
      return v >= -0.8 && v <= 0.9 && std::abs(u) <= 0.6 * (0.9 - v);
    case 3:
      return std::abs(u) + std::abs(v) <= 1.0;
    case 4:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    default: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
  }
}

Rgb subject_color(const Identity& id, double u, double v) {
  const Rgb& fill = kFill[id.color];
  bool dark = false;
  switch (id.texture) {
    case 0:
      break;
    case 1:
      dark = static_cast<int>(std::floor((u + 2.0) * 2.5)) % 2 == 1;
      break;
    case 2: {
      const double fu = (u + 2.0) * 2.5 - std::floor((u + 2.0) * 2.5) - 0.5;
      const double fv = (v + 2.0) * 2.5 - std::floor((v + 2.0) * 2.5) - 0.5;
      dark = fu * fu + fv * fv < 0.09;
      break;
    }
    default:
      dark = (static_cast<int>(std::floor((u + 2.0) * 2.0)) + static_cast<int>(std::floor((v + 2.0) * 2.0))) % 2;
  }
  const double k = dark ? 0.4 : 1.0;
  return {fill[0] * k, fill[1] * k, fill[2] * k};
}

/// Local subject coordinates of a canvas point, in units of the subject radius.
void to_local(const Pose& pose, double px, double py, int size, double& u, double& v) {
  const double c = size / 2.0;
  const double dx = px - c - pose.offset_x, dy = py - c - pose.offset_y;
  const double r = pose.scale * size;
  const double cs = std::cos(pose.rotation), sn = std::sin(pose.rotation);
  u = (cs * dx + sn * dy) / r;
  v = (-sn * dx + cs * dy) / r;
}

template <typename BgFn>
ImageTensor render_impl(const Identity* identity, const Pose& pose, BgFn bg, int size) {
  ImageTensor img(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      Rgb acc{0.0, 0.0, 0.0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
          Rgb c;
          double u = 0.0, v = 0.0;
          if (identity) to_local(pose, px, py, size, u, v);
          if (identity && inside_shape(identity->shape, u, v)) {
            c = subject_color(*identity, u, v);
          } else {
            c = bg(px, py);
          }
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = acc[k] / (kSuper * kSuper);
    }
  quantize8(img);
  return img;
}

void validate_identity(const Identity& id) {
  if (id.shape < 0 || id.shape >= static_cast<int>(kShapeFamilies.size())) {
    throw InputError("unknown shape family " + std::to_string(id.shape));
  }
  if (id.color < 0 || id.color >= kFillColors) throw InputError("unknown fill color " + std::to_string(id.color));
  if (id.texture < 0 || id.texture >= static_cast<int>(kTextures.size())) {
    throw InputError("unknown texture " + std::to_string(id.texture));
  }
}

void validate_pose(const Pose& pose) {
  const bool finite = std::isfinite(pose.rotation) && std::isfinite(pose.offset_x) && std::isfinite(pose.offset_y) &&
                      std::isfinite(pose.scale);
  if (!finite || pose.scale <= 0.0 || pose.scale > 0.5) throw InputError("pose scale must lie in (0, 0.5]");
}

void validate_background(const Background& bg) {
  if (bg.pattern < 0 || bg.pattern >= static_cast<int>(kBackgroundPatterns.size())) {
    throw InputError("unknown background pattern " + std::to_string(bg.pattern));
  }
  if (bg.palette < 0 || bg.palette >= kBackgroundPalettes) {
    throw InputError("unknown background palette " + std::to_string(bg.palette));
  }
}

void check_offsets(const Pose& pose, int size) {
  if (std::abs(pose.offset_x) > size / 2.0 || std::abs(pose.offset_y) > size / 2.0) {
    throw InputError("pose offset places the subject centre off the canvas");
  }
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) std::swap(v[i], v[rng.uniform_int(0, i)]);
}

std::vector<int> choose(const std::vector<int>& pool, int k, Rng& rng) {
  std::vector<int> copy = pool;
  shuffle(copy, rng);
  copy.resize(k);
  return copy;
}

std::string main_path(int index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "images/main/s%06d.png", index);
  return buf;
}

std::string background_path(int id) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "images/background/b%03d.png", id);
  return buf;
}

std::string variant_path(int identity, int pose) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "images/variant/i%03d_p%03d.png", identity, pose);
  return buf;
}

json to_json(const Manifest& m) {
  json j;
  j["schema"] = "spotdiff-corpus";
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["image_size"] = m.image_size;
  j["pose_variants"] = m.pose_variants;
  for (const Identity& id : m.identities) {
    j["identities"].push_back({{"shape", id.shape}, {"color", id.color}, {"texture", id.texture}});
  }
  for (const Pose& p : m.poses) {
    j["poses"].push_back({{"rotation", p.rotation}, {"offset_x", p.offset_x}, {"offset_y", p.offset_y}, {"scale", p.scale}});
  }
  for (const Background& b : m.backgrounds) j["backgrounds"].push_back({{"pattern", b.pattern}, {"palette", b.palette}});
  j["split"] = {{"train", m.train_identities}, {"heldout", m.heldout_identities}};
  j["originals"] = json::array();
  for (const OriginalRecord& o : m.originals) {
    j["originals"].push_back({{"identity", o.identity}, {"pose", o.pose}, {"subjects", o.subjects}, {"samples", o.samples}});
  }
  j["samples"] = json::array();
  for (const SampleRecord& s : m.samples) {
    json variants = json::array();
    for (const VariantRecord& v : s.variants) {
      variants.push_back({{"identity", v.identity}, {"pose", v.pose}, {"image", v.image}});
    }
    j["samples"].push_back({{"index", s.index},
                            {"original", s.original},
                            {"identity", s.identity},
                            {"pose", s.pose},
                            {"background", s.background},
                            {"main", s.main_image},
                            {"background_image", s.background_image},
                            {"variants", variants}});
  }
  return j;
}

Manifest from_json(const json& j) {
  Manifest m;
  m.version = j.at("version").get<int>();
  if (j.at("schema").get<std::string>() != "spotdiff-corpus") throw CorruptCorpusError("not a corpus manifest");
  if (m.version != kManifestVersion) {
    throw VersioningError("corpus manifest version " + std::to_string(m.version) + " (expected " +
                          std::to_string(kManifestVersion) + ")");
  }
  m.seed = j.at("seed").get<std::uint64_t>();
  m.image_size = j.at("image_size").get<int>();
  m.pose_variants = j.at("pose_variants").get<int>();
  for (const json& e : j.at("identities")) {
    m.identities.push_back({e.at("shape").get<int>(), e.at("color").get<int>(), e.at("texture").get<int>()});
  }
  for (const json& e : j.at("poses")) {
    m.poses.push_back({e.at("rotation").get<double>(), e.at("offset_x").get<double>(), e.at("offset_y").get<double>(),
                       e.at("scale").get<double>()});
  }
  for (const json& e : j.at("backgrounds")) m.backgrounds.push_back({e.at("pattern").get<int>(), e.at("palette").get<int>()});
  m.train_identities = j.at("split").at("train").get<std::vector<int>>();
  m.heldout_identities = j.at("split").at("heldout").get<std::vector<int>>();
  for (const json& e : j.at("originals")) {
    m.originals.push_back({e.at("identity").get<int>(), e.at("pose").get<int>(),
                           e.at("subjects").get<std::vector<int>>(), e.at("samples").get<int>()});
  }
  for (const json& e : j.at("samples")) {
    SampleRecord s;
    s.index = e.at("index").get<int>();
    s.original = e.at("original").get<int>();
    s.identity = e.at("identity").get<int>();
    s.pose = e.at("pose").get<int>();
    s.background = e.at("background").get<int>();
    s.main_image = e.at("main").get<std::string>();
    s.background_image = e.at("background_image").get<std::string>();
    for (const json& v : e.at("variants")) {
      s.variants.push_back({v.at("identity").get<int>(), v.at("pose").get<int>(), v.at("image").get<std::string>()});
    }
    m.samples.push_back(std::move(s));
  }
  return m;
}

void check_consistency(const Manifest& m) {
  auto in_range = [](int v, std::size_t n) { return v >= 0 && static_cast<std::size_t>(v) < n; };
  for (const Identity& id : m.identities) validate_identity(id);
  for (const Pose& p : m.poses) validate_pose(p);
  for (const Background& b : m.backgrounds) validate_background(b);
  std::set<int> heldout(m.heldout_identities.begin(), m.heldout_identities.end());
  std::vector<int> counts(m.originals.size(), 0);
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const SampleRecord& s = m.samples[i];
    if (s.index != static_cast<int>(i)) throw CorruptCorpusError("sample indices are not sequential");
    if (!in_range(s.identity, m.identities.size()) || !in_range(s.pose, m.poses.size()) ||
        !in_range(s.background, m.backgrounds.size()) || !in_range(s.original, m.originals.size())) {
      throw CorruptCorpusError("sample " + std::to_string(i) + " references an unknown factor id");
    }
    if (heldout.count(s.identity)) throw CorruptCorpusError("held-out identity appears in training sample " + std::to_string(i));
    ++counts[s.original];
  }
  for (std::size_t o = 0; o < m.originals.size(); ++o) {
    if (counts[o] != m.originals[o].samples) {
      throw CorruptCorpusError("original " + std::to_string(o) + " sample count does not match its records");
    }
  }
}

}  // namespace

void validate_factors(const FactorSpec& factors) {
  validate_identity(factors.identity);
  validate_pose(factors.pose);
  validate_background(factors.background);
}

ImageTensor render(const FactorSpec& factors, bool with_subject, int size) {
  validate_factors(factors);
  check_offsets(factors.pose, size);
  auto bg = [&](double x, double y) { return background_at(factors.background, x, y, size); };
  return render_impl(with_subject ? &factors.identity : nullptr, factors.pose, bg, size);
}

ImageTensor render_on_neutral(const Identity& identity, const Pose& pose, int size) {
  validate_identity(identity);
  validate_pose(pose);
  check_offsets(pose, size);
  return render_impl(&identity, pose, [](double, double) { return kNeutral; }, size);
}

std::vector<bool> subject_mask(const Pose& pose, const Identity& identity, int size) {
  validate_identity(identity);
  validate_pose(pose);
  std::vector<bool> mask(static_cast<std::size_t>(size) * size, false);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          double u, v;
          to_local(pose, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper, size, u, v);
          if (inside_shape(identity.shape, u, v)) mask[static_cast<std::size_t>(y) * size + x] = true;
        }
  return mask;
}

std::string Manifest::token(int identity) const {
  return kShapeFamilies.at(static_cast<std::size_t>(identities.at(static_cast<std::size_t>(identity)).shape));
}

FactorSpec Manifest::factors(int identity, int pose, int background) const {
  return {identities.at(static_cast<std::size_t>(identity)), poses.at(static_cast<std::size_t>(pose)),
          backgrounds.at(static_cast<std::size_t>(background))};
}

FactorSpec Manifest::factors(const SampleRecord& r) const { return factors(r.identity, r.pose, r.background); }

Manifest generate_corpus(const Config& config, std::uint64_t seed, const fs::path& out_dir) {
  const int size = config.get_int("image.size");
  const int families = config.get_int("corpus.shape_families");
  const int n_identities = config.get_int("corpus.identities");
  const int n_heldout = config.get_int("corpus.heldout_identities");
  const int n_poses = config.get_int("corpus.poses");
  const int n_backgrounds = config.get_int("corpus.backgrounds");
  const int n_originals = config.get_int("corpus.originals");
  const int subjects = config.get_int("corpus.subjects_per_original");
  const int bgs_per_subject = config.get_int("corpus.backgrounds_per_subject");
  const int n_variants = config.get_int("corpus.pose_variants");

  if (families < 1 || families > static_cast<int>(kShapeFamilies.size())) {
    throw ConfigError("corpus.shape_families must lie in [1," + std::to_string(kShapeFamilies.size()) + "]");
  }
  const int max_identities = families * kFillColors * static_cast<int>(kTextures.size());
  if (n_identities < 10 || n_identities > max_identities) {
    throw ConfigError("corpus.identities must lie in [10," + std::to_string(max_identities) + "]");
  }
  if (n_heldout < 0 || n_heldout >= n_identities) throw ConfigError("corpus.heldout_identities out of range");
  const int n_train = n_identities - n_heldout;
  const int max_backgrounds = static_cast<int>(kBackgroundPatterns.size()) * kBackgroundPalettes;
  if (n_poses < 1) throw ConfigError("corpus.poses must be >= 1");
  if (n_backgrounds < 10 || n_backgrounds > max_backgrounds) {
    throw ConfigError("corpus.backgrounds must lie in [10," + std::to_string(max_backgrounds) + "]");
  }
  if (n_variants < 1) throw ConfigError("corpus.pose_variants must be >= 1");
  if (subjects < n_variants + 1 || subjects > n_train) {
    throw ConfigError("corpus.subjects_per_original must lie in [pose_variants+1, training identities]");
  }
  if (bgs_per_subject < 1 || bgs_per_subject > n_backgrounds) {
    throw ConfigError("corpus.backgrounds_per_subject must lie in [1, corpus.backgrounds]");
  }
  if (n_originals < 1 || n_originals > n_train * n_poses) {
    throw ConfigError("corpus.originals must lie in [1, training identities x poses]");
  }
  if (size < 8) throw ConfigError("image.size must be >= 8");

  Rng rng(seed);
  Manifest m;
  m.seed = seed;
  m.image_size = size;
  m.pose_variants = n_variants;
  m.root = out_dir;

  // Identities round-robin over shape families, so id k has family k % families.
  std::vector<std::vector<Identity>> by_family(families);
  for (int f = 0; f < families; ++f) {
    for (int c = 0; c < kFillColors; ++c)
      for (int t = 0; t < static_cast<int>(kTextures.size()); ++t) by_family[f].push_back({f, c, t});
    shuffle(by_family[f], rng);
  }
  for (int k = 0; k < n_identities; ++k) m.identities.push_back(by_family[k % families][k / families]);
  for (int k = 0; k < n_identities; ++k) (k < n_train ? m.train_identities : m.heldout_identities).push_back(k);

  for (int p = 0; p < n_poses; ++p) {
    Pose pose;
    pose.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
    pose.offset_x = rng.uniform(-size / 5.0, size / 5.0);
    pose.offset_y = rng.uniform(-size / 5.0, size / 5.0);
    pose.scale = rng.uniform(0.2, 0.34);
    m.poses.push_back(pose);
  }

  std::vector<Background> all_bgs;
  for (int p = 0; p < static_cast<int>(kBackgroundPatterns.size()); ++p)
    for (int c = 0; c < kBackgroundPalettes; ++c) all_bgs.push_back({p, c});
  shuffle(all_bgs, rng);
  m.backgrounds.assign(all_bgs.begin(), all_bgs.begin() + n_backgrounds);

  std::vector<std::pair<int, int>> pairs;
  for (int id : m.train_identities)
    for (int p = 0; p < n_poses; ++p) pairs.emplace_back(id, p);
  shuffle(pairs, rng);
  pairs.resize(n_originals);

  std::vector<int> bg_ids(n_backgrounds);
  for (int i = 0; i < n_backgrounds; ++i) bg_ids[i] = i;

  for (int o = 0; o < n_originals; ++o) {
    const auto [orig_id, pose] = pairs[o];
    std::vector<int> others;
    for (int id : m.train_identities)
      if (id != orig_id) others.push_back(id);
    OriginalRecord rec{orig_id, pose, {orig_id}, 0};
    for (int id : choose(others, subjects - 1, rng)) rec.subjects.push_back(id);
    for (int subject : rec.subjects) {
      std::vector<int> pool;
      for (int id : rec.subjects)
        if (id != subject) pool.push_back(id);
      for (int bg : choose(bg_ids, bgs_per_subject, rng)) {
        SampleRecord s;
        s.index = static_cast<int>(m.samples.size());
        s.original = o;
        s.identity = subject;
        s.pose = pose;
        s.background = bg;
        s.main_image = main_path(s.index);
        s.background_image = background_path(bg);
        for (int v : choose(pool, n_variants, rng)) s.variants.push_back({v, pose, variant_path(v, pose)});
        m.samples.push_back(std::move(s));
        ++rec.samples;
      }
    }
    m.originals.push_back(std::move(rec));
  }

  std::error_code ec;
  for (const char* sub : {"images/main", "images/background", "images/variant"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw PersistenceError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  std::set<int> bgs_written;
  std::set<std::pair<int, int>> variants_written;
  for (const SampleRecord& s : m.samples) {
    const FactorSpec f = m.factors(s);
    write_png((out_dir / s.main_image).string(), render(f, true, size));
    if (bgs_written.insert(s.background).second) {
      write_png((out_dir / s.background_image).string(), render(f, false, size));
    }
    for (const VariantRecord& v : s.variants) {
      if (variants_written.emplace(v.identity, v.pose).second) {
        write_png((out_dir / v.image).string(), render_on_neutral(m.identities[v.identity], m.poses[v.pose], size));
      }
    }
  }
  save_manifest(m, out_dir);
  return m;
}

void save_manifest(const Manifest& manifest, const fs::path& dir) {
  const fs::path final_path = dir / "manifest.json";
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + tmp.string());
    out << to_json(manifest).dump(1) << '\n';
    if (!out) throw PersistenceError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, final_path, ec);
  if (ec) throw PersistenceError("cannot publish " + final_path.string() + ": " + ec.message());
}

Manifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw PersistenceError("corpus not found: " + path.string());
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot read " + path.string());
  Manifest m;
  try {
    m = from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw CorruptCorpusError("malformed manifest " + path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw CorruptCorpusError(std::string("manifest vocabulary invalid: ") + e.what());
  }
  try {
    check_consistency(m);
  } catch (const InputError& e) {
    throw CorruptCorpusError(std::string("manifest vocabulary invalid: ") + e.what());
  }
  m.root = dir;
  return m;
}

CorpusSample load_sample(const Manifest& manifest, int index) {
  if (index < 0 || index >= static_cast<int>(manifest.samples.size())) {
    throw PersistenceError("sample index " + std::to_string(index) + " outside [0," +
                           std::to_string(manifest.samples.size()) + ")");
  }
  const SampleRecord& r = manifest.samples[static_cast<std::size_t>(index)];
  CorpusSample s;
  s.index = index;
  s.identity_id = r.identity;
  s.pose_id = r.pose;
  s.background_id = r.background;
  s.factors = manifest.factors(r);
  s.prompt_subject_token = manifest.token(r.identity);
  s.main_image = read_png((manifest.root / r.main_image).string());
  s.background_image = read_png((manifest.root / r.background_image).string());

  if (static_cast<int>(r.variants.size()) != manifest.pose_variants) {
    throw CorruptCorpusError("sample " + std::to_string(index) + " has " + std::to_string(r.variants.size()) +
                             " pose variants, expected " + std::to_string(manifest.pose_variants));
  }
  std::set<int> seen{r.identity};
  for (const VariantRecord& v : r.variants) {
    if (v.identity < 0 || v.identity >= static_cast<int>(manifest.identities.size()) || v.pose < 0 ||
        v.pose >= static_cast<int>(manifest.poses.size())) {
      throw CorruptCorpusError("sample " + std::to_string(index) + " variant references an unknown id");
    }
    if (!seen.insert(v.identity).second) {
      throw CorruptCorpusError("sample " + std::to_string(index) + " variant identities are not distinct");
    }
    if (!(manifest.poses[v.pose] == s.factors.pose)) {
      throw CorruptCorpusError("sample " + std::to_string(index) + " variant pose differs from the main pose");
    }
    s.variant_identities.push_back(manifest.identities[v.identity]);
    s.pose_variants.push_back(read_png((manifest.root / v.image).string()));
  }
  const int n = manifest.image_size;
  auto check = [&](const ImageTensor& img) {
    if (img.height() != n || img.width() != n || img.channels() != 3) {
      throw CorruptCorpusError("sample " + std::to_string(index) + " image has the wrong size");
    }
  };
  check(s.main_image);
  check(s.background_image);
  for (const ImageTensor& v : s.pose_variants) check(v);
  return s;
}

}  // namespace spotdiff
