// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: spotdiff_acceptance [criterion numbers...]  (default: all ten)

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "spotdiff/evaluation.hpp"
#include "spotdiff/log.hpp"
#include "spotdiff/training.hpp"

using namespace spotdiff;
namespace fs = std::filesystem;
using oracle::Vec;

namespace {

// Bound on decoupled/raw drift; the README records the pilot ratios.
constexpr double kDriftRatioBound = 0.5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path work_dir(const std::string& name) {
  const fs::path p = fs::path(SPOTDIFF_TEST_TMP) / "acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::vector<double>> snapshot(const nn::ParamList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Shared default-config corpus and pretrained stack, built on first use.
struct Fixture {
  std::optional<Manifest> manifest;
  std::optional<ModelStack> pretrained;
  std::optional<ModelStack> trained;
  std::vector<TrainRecord> trained_log;
  double pretrain_seconds = 0, train_seconds = 0;
  bool frozen_unchanged = false;

  const Manifest& corpus() {
    if (!manifest) {
      const fs::path dir = work_dir("corpus");
      generate_corpus(Config::defaults(), 0, dir);
      manifest = load_manifest(dir);
    }
    return *manifest;
  }

  const ModelStack& base() {
    if (!pretrained) {
      const Manifest& m = corpus();
      Stopwatch sw;
      ModelStack stack = ModelStack::create(Config::defaults());
      Rng rng(stack.config.get_u64("seed") ^ 0x7072657472ULL);
      pretrain_encoder(stack, m, rng);
      pretrain_backbone(stack, m, rng);
      train_heads(stack, m, rng);
      pretrain_seconds = sw.seconds();
      pretrained.emplace(std::move(stack));
    }
    return *pretrained;
  }

  const ModelStack& spotdiff() {
    if (!trained) {
      ModelStack stack = base().clone();
      const auto frozen = snapshot(frozen_parameters(stack));
      SpotDiffTrainer trainer(stack, corpus(), TrainConfig::from(stack.config));
      Stopwatch sw;
      trainer.run(500);
      train_seconds = sw.seconds();
      trained_log = trainer.log().records();
      frozen_unchanged = snapshot(frozen_parameters(stack)) == frozen;
      trained.emplace(std::move(stack));
    }
    return *trained;
  }
};

Fixture fixture;

struct RowTriples {
  Tensor main, pose, background;
};

RowTriples random_triples(Rng& rng, int n, int d) {
  auto t = [&] { return Tensor::from({n, d}, rng.normal_vector(static_cast<std::size_t>(n) * d)); };
  RowTriples r;
  r.main = t();
  r.pose = t();
  r.background = t();
  return r;
}

DecoupleOptions mode(DecoupleMode m) {
  DecoupleOptions o;
  o.mode = m;
  return o;
}

Outcome orthogonality() {
  Stopwatch sw;
  Rng rng(101);
  double worst_joint = 0, worst_seq = 0;
  bool passthrough = true;
  for (int d : {8, 64, 768}) {
    const RowTriples r = random_triples(rng, 1000, d);
    const Tensor joint = decouple_rows(r.main, r.pose, r.background, mode(DecoupleMode::kJoint));
    const Tensor seq = decouple_rows(r.main, r.pose, r.background, mode(DecoupleMode::kSequential));
    for (int i = 0; i < 1000; ++i) {
      const Vec p = oracle::row(r.pose, i), b = oracle::row(r.background, i);
      worst_joint = std::max({worst_joint, std::abs(oracle::cosine(oracle::row(joint, i), p)),
                              std::abs(oracle::cosine(oracle::row(joint, i), b))});
      worst_seq = std::max(worst_seq, std::abs(oracle::cosine(oracle::row(seq, i), b)));
    }

    // Zero and below-threshold nuisance directions remove nothing.
    const Tensor zero = Tensor::zeros({1000, d});
    const double tiny = 0.1 * std::sqrt(degenerate_threshold(d) / d);
    const Tensor faint = Tensor::full({1000, d}, tiny);
    for (auto m : {DecoupleMode::kSequential, DecoupleMode::kJoint}) {
      for (const Tensor* u : {&zero, &faint}) {
        const Tensor out = decouple_rows(r.main, *u, *u, mode(m));
        passthrough = passthrough && std::ranges::equal(out.data(), r.main.data());
        const Tensor only_bg = decouple_rows(r.main, *u, r.background, mode(m));
        const Tensor only_pose = decouple_rows(r.main, r.pose, *u, mode(m));
        for (int i = 0; i < 1000; i += 97) {
          const Vec v = oracle::row(r.main, i);
          const Vec want_bg = oracle::project_out(v, oracle::row(r.background, i), 0);
          const Vec want_pose = oracle::project_out(v, oracle::row(r.pose, i), 0);
          const Vec got_bg = oracle::row(only_bg, i), got_pose = oracle::row(only_pose, i);
          for (int j = 0; j < d; ++j) {
            passthrough = passthrough && std::abs(got_bg[j] - want_bg[j]) <= 1e-12 * oracle::norm(v);
            passthrough = passthrough && std::abs(got_pose[j] - want_pose[j]) <= 1e-12 * oracle::norm(v);
          }
        }
      }
    }
  }
  const double secs = sw.seconds();
  return {worst_joint < 1e-6 && worst_seq < 1e-6 && passthrough && secs < 10,
          fmt("max|cos| joint %.2e, sequential vs background %.2e, degenerate passthrough %s, %.2fs", worst_joint,
              worst_seq, passthrough ? "exact" : "BROKEN", secs)};
}

Outcome projection_algebra() {
  Stopwatch sw;
  Rng rng(102);
  const int dims[] = {8, 64, 768};
  double idem = 0, pyth = 0, scale_inv = 0, lin = 0, growth = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = dims[trial % 3];
    const double eps = degenerate_threshold(d);
    const Vec v = oracle::random_vec(rng, d), v2 = oracle::random_vec(rng, d), u = oracle::random_vec(rng, d);
    const Vec p = project_out(v, u, eps);
    const double nv = oracle::norm(v);

    const Vec pp = project_out(p, u, eps);
    for (int j = 0; j < d; ++j) idem = std::max(idem, std::abs(pp[j] - p[j]) / std::max(1.0, nv));

    const Vec removed = oracle::axpy(1.0, v, -1.0, p);
    pyth = std::max(pyth, std::abs(oracle::dot(v, v) - oracle::dot(p, p) - oracle::dot(removed, removed)) /
                              oracle::dot(v, v));

    growth = std::max(growth, oracle::norm(p) - nv);

    double c = rng.uniform(-50.0, 50.0);
    if (std::abs(c) < 1e-3) c = 1.0;
    const Vec pc = project_out(v, oracle::axpy(c, u, 0.0, u), eps);
    scale_inv = std::max(scale_inv, oracle::norm(oracle::axpy(1.0, pc, -1.0, p)) / nv);

    const double a = rng.normal(), b = rng.normal();
    const Vec lhs = project_out(oracle::axpy(a, v, b, v2), u, eps);
    const Vec rhs = oracle::axpy(a, p, b, project_out(v2, u, eps));
    lin = std::max(lin, oracle::norm(oracle::axpy(1.0, lhs, -1.0, rhs)) / std::max(1.0, oracle::norm(rhs)));
  }
  const double secs = sw.seconds();
  const bool ok = idem <= 1e-12 && pyth <= 1e-10 && growth <= 0.0 && scale_inv <= 1e-10 && lin <= 1e-10 && secs < 10;
  return {ok, fmt("idempotence %.1e, pythagoras %.1e, norm growth %.1e, scale %.1e, linearity %.1e, %.2fs", idem, pyth,
                  growth, scale_inv, lin, secs)};
}

// Perturbs the zero-initialized output layer so gradients reach the whole denoiser.
void wake_denoiser(ModelStack& stack, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : stack.denoiser.parameters()) {
    if (p.name.rfind("denoiser.conv_out", 0) != 0) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = 0.2 * rng.normal();
  }
}

Config tiny_config(std::uint64_t seed) {
  Config c = Config::defaults();
  for (const auto& [k, v] : std::map<std::string, std::string>{
           {"image.size", "8"},          {"encoder.base_channels", "4"}, {"features.d_enc", "16"},
           {"features.d_main", "16"},    {"features.d_text", "16"},      {"mapper.hidden", "16"},
           {"expert.hidden", "16"},      {"align.hidden", "16"},         {"text.mlp_hidden", "16"},
           {"denoiser.base_channels", "4"}, {"denoiser.time_dim", "8"},  {"denoiser.groups", "2"},
           {"heads.dim", "8"},           {"train.batch_size", "2"},      {"corpus.identities", "16"},
           {"corpus.heldout_identities", "4"}, {"corpus.poses", "3"},    {"corpus.backgrounds", "12"},
           {"corpus.originals", "2"},    {"corpus.subjects_per_original", "5"},
           {"corpus.backgrounds_per_subject", "2"}, {"train.gradient_flow", "full"}})
    c.set(k, v);
  c.set("seed", std::to_string(seed));
  return c;
}

Outcome gradients() {
  Stopwatch sw;
  double worst_align = 0, worst_decouple = 0, worst_total = 0;
  int coords = 0;
  const fs::path dir = work_dir("gradients_corpus");
  generate_corpus(tiny_config(0), 0, dir);
  const Manifest m = load_manifest(dir);
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    auto leaf = [&](int rows, int d) {
      return Tensor::from({rows, d}, rng.normal_vector(static_cast<std::size_t>(rows) * d), true);
    };
    Tensor pp = leaf(10, 16), pt = leaf(10, 16), bp = leaf(10, 16), bt = leaf(10, 16);
    worst_align = std::max(
        worst_align, oracle::check_gradients([&] { return alignment_loss_rows(pp, pt, bp, bt); }, {pp, pt, bp, bt}).error);

    Tensor mm = leaf(5, 16), p = leaf(5, 16), b = leaf(5, 16);
    const Tensor w = Tensor::from({5, 16}, rng.normal_vector(80));
    for (auto dm : {DecoupleMode::kSequential, DecoupleMode::kJoint}) {
      auto f = [&] { return ops::sum(ops::mul(decouple_rows(mm, p, b, mode(dm)), w)); };
      worst_decouple = std::max(worst_decouple, oracle::check_gradients(f, {mm, p, b}).error);
    }

    ModelStack stack = ModelStack::create(tiny_config(seed));
    wake_denoiser(stack, seed + 10);
    const TrainConfig cfg = TrainConfig::from(stack.config);
    std::vector<Tensor> leaves;
    for (const auto& prm : trainable_parameters(stack)) {
      Tensor t = prm.tensor;
      t.set_requires_grad(true);
      leaves.push_back(t);
    }
    std::vector<CorpusSample> batch{load_sample(m, static_cast<int>(seed)), load_sample(m, static_cast<int>(seed) + 7)};
    const Rng start(seed * 31);
    auto total = [&] {
      Rng r = start;
      return forward_pipeline(batch, stack, cfg, r, false).total;
    };
    const auto g = oracle::check_gradients(total, leaves, 4, 1e-6, seed);
    worst_total = std::max(worst_total, g.error);
    coords += g.checked;
  }
  const double secs = sw.seconds();
  const bool ok = worst_align < 1e-4 && worst_decouple < 1e-4 && worst_total < 1e-4 && secs < 120;
  return {ok, fmt("rel. error alignment %.1e, decouple %.1e, total objective %.1e (%d coords), 3 seeds, %.1fs",
                  worst_align, worst_decouple, worst_total, coords, secs)};
}

Outcome bookkeeping() {
  ModelStack stack = fixture.base().clone();
  const TrainConfig tc = TrainConfig::from(stack.config);
  SpotDiffTrainer trainer(stack, fixture.corpus(), tc);
  trainer.run(100);
  const fs::path csv = work_dir("bookkeeping") / "train_log.csv";
  trainer.log().write_csv(csv);
  const auto records = TrainLog::read_csv(csv).records();
  double worst8 = 0, worst7 = 0;
  for (const auto& r : records) {
    worst8 = std::max(worst8, std::abs(r.total - (r.l2 + tc.lambda2 * r.l1)));
    worst7 = std::max(worst7, std::abs(r.l2 - (r.ldm + tc.lambda1 * r.norm_term)));
  }
  return {records.size() == 100 && worst8 <= 1e-10 && worst7 <= 1e-10,
          fmt("%zu logged steps, max |L - (L2 + l2*L1)| %.1e, max |L2 - (Lldm + l1*|F|)| %.1e", records.size(), worst8,
              worst7)};
}

Outcome corpus_contract() {
  Config c = Config::defaults();
  c.set("corpus.originals", "10");
  const fs::path dir = work_dir("corpus_contract");
  Stopwatch sw;
  generate_corpus(c, 5, dir);
  const Manifest m = load_manifest(dir);
  bool ok = m.originals.size() == 10 && m.samples.size() == 1000;
  std::map<int, int> per_original;
  int bad = 0;
  for (const SampleRecord& s : m.samples) {
    ++per_original[s.original];
    const CorpusSample loaded = load_sample(m, s.index);
    if (s.variants.size() != 3 || loaded.pose_variants.size() != 3) ++bad;
    const ImageTensor bg = render(m.factors(s), false, m.image_size);
    if (!std::ranges::equal(loaded.background_image.pixels(), bg.pixels())) ++bad;
    for (std::size_t k = 0; k < s.variants.size() && k < loaded.pose_variants.size(); ++k) {
      const VariantRecord& v = s.variants[k];
      if (v.pose != s.pose || v.identity == s.identity) ++bad;
      const ImageTensor want = render_on_neutral(m.identities[static_cast<std::size_t>(v.identity)],
                                                 m.poses[static_cast<std::size_t>(v.pose)], m.image_size);
      if (!std::ranges::equal(loaded.pose_variants[k].pixels(), want.pixels())) ++bad;
    }
  }
  for (const auto& [o, n] : per_original) ok = ok && n == 100;
  const double secs = sw.seconds();
  ok = ok && bad == 0 && secs < 60;

  // The shared 100-original default corpus follows the same expansion.
  int off = 0;
  std::map<int, int> full;
  for (const SampleRecord& s : fixture.corpus().samples) ++full[s.original];
  for (const auto& [o, n] : full) off += n != 100;
  ok = ok && off == 0;
  return {ok, fmt("10 originals -> %zu samples, %zu originals x 100, %d violations; default corpus %zu originals all "
                  "100: %s; %.1fs",
                  m.samples.size(), per_original.size(), bad, full.size(), off == 0 ? "yes" : "no", secs)};
}

Outcome training_sanity() {
  fixture.spotdiff();
  const auto& log = fixture.trained_log;
  if (log.size() != 500) return {false, "run did not log 500 steps"};
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) first += log[static_cast<std::size_t>(i)].total / 10;
  for (int i = 450; i < 500; ++i) last += log[static_cast<std::size_t>(i)].total / 50;
  const double drop = 1 - last / first;
  const bool ok = drop >= 0.5 && fixture.frozen_unchanged && fixture.train_seconds < 600;
  return {ok, fmt("first-10 mean %.4f, last-50 mean %.4f, drop %.1f%%, frozen %s, 500 steps %.0fs (pretraining %.0fs)",
                  first, last, 100 * drop, fixture.frozen_unchanged ? "bitwise unchanged" : "CHANGED",
                  fixture.train_seconds, fixture.pretrain_seconds)};
}

Outcome disentanglement() {
  const ModelStack& stack = fixture.spotdiff();
  const Manifest& m = fixture.corpus();
  bool ok = true;
  std::string detail;
  for (NuisanceFactor f : {NuisanceFactor::kBackground, NuisanceFactor::kPose}) {
    const auto pairs = make_pairs(m, f, 200, 7);
    const DriftResult r = invariance_probe(stack, pairs, f, m.image_size);
    const double ratio = r.decoupled / r.raw;
    ok = ok && r.pairs >= 200 && r.decoupled < r.raw && ratio <= kDriftRatioBound;
    detail += fmt("%s drift %.4f vs raw %.4f (ratio %.3f, %d pairs); ", std::string(to_string(f)).c_str(), r.decoupled,
                  r.raw, ratio, r.pairs);
  }
  return {ok, detail + fmt("bound %.2f", kDriftRatioBound)};
}

Outcome ablation_direction() {
  Stopwatch sw;
  const ModelStack& base = fixture.base();
  const auto reports = run_ablation(base, fixture.corpus(), 500, EvalOptions::from(base.config));
  const double secs = sw.seconds();
  if (reports.size() != 4) return {false, "expected four ablation reports"};
  const MetricsReport &full = reports[0], &no_bg = reports[1], &no_pose = reports[2], &none = reports[3];
  auto ordered = [&](auto field) {
    return field(full) >= field(no_bg) && field(full) >= field(no_pose) && field(no_bg) >= field(none) &&
           field(no_pose) >= field(none);
  };
  const bool id_ok = ordered([](const MetricsReport& r) { return r.identity_acc; });
  const bool sim_ok = ordered([](const MetricsReport& r) { return r.image_sim_mean; });
  std::string detail;
  for (const auto& r : reports) detail += fmt("%s id %.3f sim %.4f; ", r.variant.c_str(), r.identity_acc, r.image_sim_mean);
  return {id_ok && sim_ok && secs < 45 * 60,
          detail + fmt("identity order %s, similarity order %s, %.0fs", id_ok ? "ok" : "violated",
                       sim_ok ? "ok" : "violated", secs)};
}

Outcome overfit_one() {
  Config c = Config::defaults();
  c.set("corpus.originals", "1");
  c.set("backbone.pretrain_steps", "600");
  const fs::path dir = work_dir("overfit_corpus");
  generate_corpus(c, 3, dir);
  const Manifest m = load_manifest(dir);
  ModelStack stack = ModelStack::create(c);
  Rng rng(11);
  const std::vector<int> only{0};
  const StageReport fit = pretrain_backbone(stack, m, rng, only);
  const CorpusSample s = load_sample(m, 0);
  const ConditionEmbedding cond = build_text_condition(stack.templates[0], s.prompt_subject_token, stack.text_encoder);
  const ImageTensor out = sample(cond, stack.denoiser, stack.schedule, stack.codec, SamplerKind::kDdim,
                                 stack.config.get_int("sampler.steps"), 99);
  double mse = 0;
  const auto a = out.pixels(), b = s.main_image.pixels();
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]) / static_cast<double>(a.size());
  return {mse <= 0.05, fmt("pixel MSE %.5f after %d steps (final loss %.5f), DDIM %d steps", mse, fit.steps,
                           fit.last_loss, stack.config.get_int("sampler.steps"))};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + SPOTDIFF_CLI + "' " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_smoke() {
  const fs::path root = work_dir("cli");
  Config c = Config::defaults();
  for (const auto& [k, v] : std::map<std::string, std::string>{{"corpus.originals", "8"},
                                                               {"encoder.pretrain_steps", "60"},
                                                               {"backbone.pretrain_steps", "100"},
                                                               {"heads.steps", "60"},
                                                               {"eval.pairs", "40"},
                                                               {"eval.generations", "4"},
                                                               {"eval.sample_steps", "10"}})
    c.set(k, v);
  const fs::path cfg = root / "smoke.cfg";
  std::ofstream(cfg) << c.to_string();

  auto chain = [&](const fs::path& out) {
    const std::string common = " --quiet --seed 3 --config '" + cfg.string() + "'";
    const std::string corpus = (out / "corpus").string(), run = (out / "run").string();
    const std::string ck = " --corpus '" + corpus + "' --checkpoint '" + run + "/checkpoint.bin'";
    int code = run_cli("gen-corpus" + common + " --out '" + corpus + "'");
    if (code == 0) code = run_cli("train" + common + " --steps 200 --corpus '" + corpus + "' --out '" + run + "'");
    if (code == 0) code = run_cli("sample" + common + ck + " --count 4 --out '" + (out / "sample").string() + "'");
    if (code == 0) code = run_cli("eval" + common + ck + " --out '" + (out / "eval").string() + "'");
    return code;
  };
  Stopwatch sw;
  const int a = chain(root / "a");
  const int b = chain(root / "b");
  if (a != 0 || b != 0) return {false, fmt("exit codes %d and %d", a, b)};

  bool complete = false;
  try {
    const auto j = nlohmann::json::parse(slurp(root / "a" / "eval" / "metrics.json"));
    complete = j.size() == 1;
    for (const char* key : {"variant", "config_hash", "checkpoint_id", "image_sim", "text_sim", "probe_accuracy", "drift",
                            "generations", "pairs"})
      complete = complete && j[0].contains(key);
  } catch (const std::exception&) {
    complete = false;
  }

  int files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "timing.csv") continue;
    ++files;
    const fs::path other = root / "b" / fs::relative(e.path(), root / "a");
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differing;
  }
  return {complete && differing == 0 && files > 0,
          fmt("chain exits 0 twice, MetricsReport %s, %d files compared, %d differ, %.0fs",
              complete ? "complete" : "INCOMPLETE", files, differing, sw.seconds())};
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::kWarn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"orthogonality suite", orthogonality},
      {"projection algebra", projection_algebra},
      {"gradient verification", gradients},
      {"loss bookkeeping", bookkeeping},
      {"corpus contract", corpus_contract},
      {"training sanity", training_sanity},
      {"disentanglement trend", disentanglement},
      {"ablation direction", ablation_direction},
      {"overfit one sample", overfit_one},
      {"CLI smoke and rerun", cli_smoke},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
