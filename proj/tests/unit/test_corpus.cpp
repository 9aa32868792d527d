#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

#include "spotdiff/corpus.hpp"
#include "spotdiff/error.hpp"

using namespace spotdiff;
namespace fs = std::filesystem;

namespace {

Config tiny_corpus_config() {
  Config c = Config::defaults();
  c.set("corpus.identities", "10");
  c.set("corpus.heldout_identities", "0");
  c.set("corpus.poses", "1");
  c.set("corpus.backgrounds", "10");
  c.set("corpus.originals", "1");
  c.set("corpus.subjects_per_original", "10");
  c.set("corpus.backgrounds_per_subject", "10");
  return c;
}

Config split_corpus_config() {
  Config c = Config::defaults();
  c.set("corpus.identities", "16");
  c.set("corpus.heldout_identities", "4");
  c.set("corpus.poses", "3");
  c.set("corpus.backgrounds", "12");
  c.set("corpus.originals", "2");
  c.set("corpus.subjects_per_original", "5");
  c.set("corpus.backgrounds_per_subject", "2");
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path(SPOTDIFF_TEST_TMP) / name;
  fs::remove_all(dir);
  return dir;
}

bool same_pixels(const ImageTensor& a, const ImageTensor& b) {
  return a.height() == b.height() && a.width() == b.width() && std::ranges::equal(a.pixels(), b.pixels());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

FactorSpec example_factors() {
  FactorSpec f;
  f.identity = {1, 2, 3};
  f.pose = {0.7, 3.0, -2.0, 0.28};
  f.background = {3, 4};
  return f;
}

}  // namespace

TEST_CASE("render is deterministic and quantized") {
  const FactorSpec f = example_factors();
  const ImageTensor a = render(f, true), b = render(f, true);
  CHECK(same_pixels(a, b));
  CHECK(a.height() == 32);
  for (double p : a.pixels()) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(std::abs(p * 255.0 - std::round(p * 255.0)) < 1e-9);
  }
}

TEST_CASE("subject-free render depends on the background alone") {
  FactorSpec a = example_factors(), b = example_factors();
  b.identity = {4, 0, 1};
  b.pose = {2.0, -4.0, 1.0, 0.22};
  CHECK(same_pixels(render(a, false), render(b, false)));
  b.background = {1, 1};
  CHECK_FALSE(same_pixels(render(a, false), render(b, false)));
}

TEST_CASE("subject pixels are confined to the subject mask") {
  for (int shape = 0; shape < 6; ++shape) {
    FactorSpec f = example_factors();
    f.identity.shape = shape;
    const ImageTensor with = render(f, true), without = render(f, false);
    const auto mask = subject_mask(f.pose, f.identity);
    int inside = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        bool differs = false;
        for (int c = 0; c < 3; ++c) differs |= with.at(y, x, c) != without.at(y, x, c);
        if (!mask[static_cast<std::size_t>(y) * 32 + x]) CHECK_FALSE(differs);
        inside += mask[static_cast<std::size_t>(y) * 32 + x];
      }
    CHECK(inside > 0);
  }
}

TEST_CASE("pose and identity change the render") {
  const FactorSpec f = example_factors();
  FactorSpec g = f;
  g.pose.rotation += 0.5;
  CHECK_FALSE(same_pixels(render(f, true), render(g, true)));
  g = f;
  g.identity.color = (f.identity.color + 1) % kFillColors;
  CHECK_FALSE(same_pixels(render(f, true), render(g, true)));
}

TEST_CASE("factor validation") {
  FactorSpec f = example_factors();
  f.identity.shape = 6;
  CHECK_THROWS_AS(render(f, true), InputError);
  f = example_factors();
  f.background.pattern = -1;
  CHECK_THROWS_AS(render(f, false), InputError);
  f = example_factors();
  f.pose.scale = 5.0;
  CHECK_THROWS_AS(render(f, true), InputError);
}

TEST_CASE("10 identities x 1 pose x 10 backgrounds x 1 original gives 100 samples") {
  const fs::path dir = fresh_dir("corpus_tiny");
  const Manifest m = generate_corpus(tiny_corpus_config(), 3, dir);
  CHECK(m.samples.size() == 100);
  REQUIRE(m.originals.size() == 1);
  CHECK(m.originals[0].samples == 100);
  CHECK(m.originals[0].subjects.size() == 10);
  std::set<std::pair<int, int>> combos;
  for (const auto& s : m.samples) {
    CHECK(s.variants.size() == 3);
    combos.insert({s.identity, s.background});
  }
  CHECK(combos.size() == 100);
}

TEST_CASE("corpus invariants on every sample") {
  const fs::path dir = fresh_dir("corpus_split");
  const Manifest gen = generate_corpus(split_corpus_config(), 11, dir);
  const Manifest m = load_manifest(dir);
  CHECK(m.samples.size() == 2 * 5 * 2);
  const std::set<int> heldout(m.heldout_identities.begin(), m.heldout_identities.end());
  CHECK(heldout.size() == 4);
  CHECK(m.train_identities.size() == 12);
  for (int i = 0; i < static_cast<int>(m.samples.size()); ++i) {
    const CorpusSample s = load_sample(m, i);
    CHECK(heldout.count(s.identity_id) == 0);
    CHECK(same_pixels(s.main_image, render(s.factors, true)));
    CHECK(same_pixels(s.background_image, render(s.factors, false)));
    REQUIRE(s.pose_variants.size() == 3);
    std::set<int> ids{s.identity_id};
    for (std::size_t k = 0; k < 3; ++k) {
      const VariantRecord& v = m.samples[static_cast<std::size_t>(i)].variants[k];
      CHECK(ids.insert(v.identity).second);
      CHECK(m.poses[static_cast<std::size_t>(v.pose)] == s.factors.pose);
      CHECK(same_pixels(s.pose_variants[k], render_on_neutral(s.variant_identities[k], s.factors.pose)));
    }
    CHECK(s.prompt_subject_token == kShapeFamilies[static_cast<std::size_t>(s.factors.identity.shape)]);
  }
}

TEST_CASE("generation is seed-deterministic down to the bytes") {
  const fs::path a = fresh_dir("corpus_seed_a"), b = fresh_dir("corpus_seed_b"), c = fresh_dir("corpus_seed_c");
  generate_corpus(split_corpus_config(), 5, a);
  generate_corpus(split_corpus_config(), 5, b);
  generate_corpus(split_corpus_config(), 6, c);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  CHECK(files.size() > 20);
  for (const auto& f : files) {
    INFO(f.string());
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "manifest.json") != slurp(c / "manifest.json"));
}

TEST_CASE("manifest round trip") {
  const fs::path dir = fresh_dir("corpus_roundtrip");
  const Manifest m = generate_corpus(split_corpus_config(), 2, dir);
  const Manifest l = load_manifest(dir);
  CHECK(l.seed == m.seed);
  CHECK(l.identities == m.identities);
  CHECK(l.poses == m.poses);
  CHECK(l.backgrounds == m.backgrounds);
  CHECK(l.heldout_identities == m.heldout_identities);
  REQUIRE(l.samples.size() == m.samples.size());
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    CHECK(l.samples[i].main_image == m.samples[i].main_image);
    CHECK(l.samples[i].variants.size() == m.samples[i].variants.size());
  }
  const fs::path copy = fresh_dir("corpus_roundtrip_copy");
  fs::create_directories(copy);
  save_manifest(l, copy);
  CHECK(slurp(copy / "manifest.json") == slurp(dir / "manifest.json"));
}

TEST_CASE("corpus error categories") {
  const fs::path dir = fresh_dir("corpus_errors");
  const Manifest m = generate_corpus(split_corpus_config(), 4, dir);

  CHECK_THROWS_AS(load_manifest(fresh_dir("corpus_nowhere")), PersistenceError);
  CHECK_THROWS_AS(load_sample(m, -1), PersistenceError);
  CHECK_THROWS_AS(load_sample(m, static_cast<int>(m.samples.size())), PersistenceError);

  SUBCASE("truncated image") {
    const fs::path png = dir / m.samples[0].main_image;
    const std::string bytes = slurp(png);
    std::ofstream(png, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_sample(m, 0), CorruptCorpusError);
  }
  SUBCASE("missing image") {
    fs::remove(dir / m.samples[1].background_image);
    CHECK_THROWS_AS(load_sample(m, 1), PersistenceError);
  }
  SUBCASE("manifest version and corruption") {
    auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
    j["version"] = kManifestVersion + 1;
    std::ofstream(dir / "manifest.json", std::ios::trunc) << j.dump();
    CHECK_THROWS_AS(load_manifest(dir), VersioningError);
    std::ofstream(dir / "manifest.json", std::ios::trunc) << "{\"schema\": ";
    CHECK_THROWS_AS(load_manifest(dir), CorruptCorpusError);
  }
  SUBCASE("variant with a different pose") {
    Manifest bad = m;
    bad.samples[0].variants[0].pose = (bad.samples[0].pose + 1) % static_cast<int>(bad.poses.size());
    CHECK_THROWS_AS(load_sample(bad, 0), CorruptCorpusError);
  }
}

TEST_CASE("configuration preconditions") {
  Config c = split_corpus_config();
  c.set("corpus.identities", "9");
  CHECK_THROWS_AS(generate_corpus(c, 1, fresh_dir("corpus_bad")), ConfigError);
  c = split_corpus_config();
  c.set("corpus.subjects_per_original", "3");
  CHECK_THROWS_AS(generate_corpus(c, 1, fresh_dir("corpus_bad")), ConfigError);
  c = split_corpus_config();
  c.set("corpus.poses", "0");
  CHECK_THROWS_AS(generate_corpus(c, 1, fresh_dir("corpus_bad")), ConfigError);
  CHECK_FALSE(fs::exists(fresh_dir("corpus_bad") / "manifest.json"));
}
