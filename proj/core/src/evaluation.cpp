#include "spotdiff/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "spotdiff/error.hpp"
#include "spotdiff/log.hpp"

namespace spotdiff {

namespace fs = std::filesystem;

namespace {

constexpr int kChunk = 50;

std::vector<double> top_tap(const ImageTensor& image, const EncoderModel& encoder) {
  NoGradGuard no_grad;
  image.validate();
  const Tensor f = encoder.forward(to_batch(image));
  const int d = f.dim(2);
  auto v = f.data();
  return {v.begin() + static_cast<std::ptrdiff_t>(kNumLayers - 1) * d, v.begin() + static_cast<std::ptrdiff_t>(kNumLayers) * d};
}

/// Decoupled features of many images, chunked, one flattened vector per
/// image with every layer scaled to unit length.
std::vector<std::vector<double>> probe_features(const ModelStack& stack, const std::vector<ImageTensor>& images) {
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min<std::size_t>(kChunk, images.size() - start);
    const Tensor f = decoupled_features(stack, std::span<const ImageTensor>(images.data() + start, n));
    const int d = f.dim(2);
    auto v = f.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(v.begin() + static_cast<std::ptrdiff_t>(i * kNumLayers * d),
                              v.begin() + static_cast<std::ptrdiff_t>((i + 1) * kNumLayers * d));
      for (int l = 0; l < kNumLayers; ++l) {
        double nn = 0.0;
        for (int j = 0; j < d; ++j) nn += row[l * d + j] * row[l * d + j];
        if (nn == 0.0) continue;
        const double inv = 1.0 / std::sqrt(nn);
        for (int j = 0; j < d; ++j) row[l * d + j] *= inv;
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= v.size();
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / v.size())};
}

nlohmann::json report_json(const MetricsReport& r) {
  return {{"variant", r.variant},
          {"config_hash", r.config_hash},
          {"checkpoint_id", r.checkpoint_id},
          {"image_sim", {{"mean", r.image_sim_mean}, {"std", r.image_sim_std}}},
          {"text_sim", {{"mean", r.text_sim_mean}, {"std", r.text_sim_std}}},
          {"probe_accuracy", {{"identity", r.identity_acc}, {"background", r.background_acc}, {"pose", r.pose_acc}}},
          {"drift",
           {{"background", {{"decoupled", r.bg_drift}, {"raw", r.bg_drift_raw}}},
            {"pose", {{"decoupled", r.pose_drift}, {"raw", r.pose_drift_raw}}}}},
          {"generations", r.generations},
          {"pairs", r.pairs}};
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("cosine_similarity: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) {
    log_warn("cosine similarity of a zero-norm embedding defined as 0");
    return 0.0;
  }
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double embedding_similarity(const ImageTensor& a, const ImageTensor& b, const EncoderModel& encoder) {
  return cosine_similarity(top_tap(a, encoder), top_tap(b, encoder));
}

double text_image_similarity(const ImageTensor& image, const PromptTemplate& prompt, const std::string& subject_token,
                             const ModelStack& stack) {
  NoGradGuard no_grad;
  std::vector<std::string> toks = prompt.tokens();
  toks[prompt.placeholder_index()] = subject_token;
  const Tensor text = text_embedding(stack, toks);
  image.validate();
  const Tensor img = image_embedding(stack, std::span<const ImageTensor>(&image, 1));
  return cosine_similarity(img.data(), text.data());
}

double feature_drift(const Tensor& fa, const Tensor& fb) {
  if (fa.shape() != fb.shape() || fa.ndim() != 2) throw InputError("feature_drift: expected two [layers, d] tensors");
  const int layers = fa.dim(0), d = fa.dim(1);
  auto a = fa.data(), b = fb.data();
  double total = 0.0;
  for (int l = 0; l < layers; ++l) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (int j = 0; j < d; ++j) {
      const double x = a[l * d + j], y = b[l * d + j];
      diff += (x - y) * (x - y);
      na += x * x;
      nb += y * y;
    }
    const double scale = 0.5 * (std::sqrt(na) + std::sqrt(nb));
    if (scale > 0.0) total += std::sqrt(diff) / scale;
  }
  return total / layers;
}

std::vector<FactorPair> make_pairs(const Manifest& manifest, NuisanceFactor factor, int count, std::uint64_t seed) {
  if (manifest.heldout_identities.empty()) throw InputError("make_pairs: corpus has no held-out identities");
  if (factor == NuisanceFactor::kPose && manifest.poses.size() < 2) throw InputError("make_pairs: need >= 2 poses");
  if (factor == NuisanceFactor::kBackground && manifest.backgrounds.size() < 2) {
    throw InputError("make_pairs: need >= 2 backgrounds");
  }
  Rng rng(seed);
  const int np = static_cast<int>(manifest.poses.size()), nb = static_cast<int>(manifest.backgrounds.size());
  std::vector<FactorPair> pairs;
  for (int i = 0; i < count; ++i) {
    const int id = manifest.heldout_identities[static_cast<std::size_t>(i) % manifest.heldout_identities.size()];
    int p1 = rng.uniform_int(0, np - 1), b1 = rng.uniform_int(0, nb - 1);
    int p2 = p1, b2 = b1;
    if (factor == NuisanceFactor::kPose) {
      p2 = (p1 + rng.uniform_int(1, np - 1)) % np;
    } else {
      b2 = (b1 + rng.uniform_int(1, nb - 1)) % nb;
    }
    pairs.push_back({manifest.factors(id, p1, b1), manifest.factors(id, p2, b2)});
  }
  return pairs;
}

DriftResult invariance_probe(const ModelStack& stack, std::span<const FactorPair> pairs, NuisanceFactor factor,
                             int image_size) {
  std::vector<ImageTensor> images;
  for (const FactorPair& p : pairs) {
    const bool same_identity = p.a.identity == p.b.identity;
    const bool same_other = factor == NuisanceFactor::kPose ? p.a.background == p.b.background : p.a.pose == p.b.pose;
    if (!same_identity || !same_other) {
      throw InputError("invariance_probe: pair differs in more than the " + std::string(to_string(factor)) + " factor");
    }
    images.push_back(render(p.a, true, image_size));
    images.push_back(render(p.b, true, image_size));
  }
  DriftResult r;
  r.pairs = static_cast<int>(pairs.size());
  if (pairs.empty()) return r;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min<std::size_t>(kChunk, images.size() - start);
    Tensor raw;
    const Tensor dec = decoupled_features(stack, std::span<const ImageTensor>(images.data() + start, n), &raw);
    for (std::size_t i = 0; i + 1 < n; i += 2) {
      const int k = static_cast<int>(i);
      auto layer = [](const Tensor& t, int idx) {
        return ops::slice(t, 0, idx, 1).reshape({t.dim(1), t.dim(2)});
      };
      r.decoupled += feature_drift(layer(dec, k), layer(dec, k + 1));
      r.raw += feature_drift(layer(raw, k), layer(raw, k + 1));
    }
  }
  r.decoupled /= r.pairs;
  r.raw /= r.pairs;
  return r;
}

void CentroidProbe::fit(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) {
  if (features.size() != labels.size() || features.empty()) throw InputError("CentroidProbe: bad training set");
  centroids_.clear();
  std::map<int, int> counts;
  for (std::size_t i = 0; i < features.size(); ++i) {
    auto& c = centroids_[labels[i]];
    if (c.empty()) c.assign(features[i].size(), 0.0);
    if (c.size() != features[i].size()) throw InputError("CentroidProbe: feature width mismatch");
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += features[i][j];
    ++counts[labels[i]];
  }
  for (auto& [label, c] : centroids_)
    for (double& v : c) v /= counts[label];
}

int CentroidProbe::predict(std::span<const double> feature) const {
  if (centroids_.empty()) throw InputError("CentroidProbe: not fitted");
  int best = centroids_.begin()->first;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [label, c] : centroids_) {
    if (c.size() != feature.size()) throw InputError("CentroidProbe: feature width mismatch");
    double d = 0.0;
    for (std::size_t j = 0; j < c.size(); ++j) d += (c[j] - feature[j]) * (c[j] - feature[j]);
    if (d < best_d) {
      best_d = d;
      best = label;
    }
  }
  return best;
}

double CentroidProbe::accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) const {
  if (features.empty()) return 0.0;
  int hits = 0;
  for (std::size_t i = 0; i < features.size(); ++i) hits += predict(features[i]) == labels[i];
  return static_cast<double>(hits) / features.size();
}

ProbeScores run_probes(const ModelStack& stack, const Manifest& manifest, int count, std::uint64_t seed) {
  std::set<int> train(manifest.train_identities.begin(), manifest.train_identities.end());
  for (int id : manifest.heldout_identities) {
    if (train.count(id)) throw InputError("probe leakage: identity " + std::to_string(id) + " is in both splits");
  }
  if (manifest.heldout_identities.empty()) throw InputError("run_probes: corpus has no held-out identities");
  Rng rng(seed);
  const int size = manifest.image_size;
  std::vector<ImageTensor> train_imgs, test_imgs;
  std::vector<int> train_shape, train_bg, train_pose, test_shape, test_bg, test_pose;
  for (int i = 0; i < count; ++i) {
    const auto& r = manifest.samples[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(manifest.samples.size()) - 1))];
    if (!train.count(r.identity)) throw InputError("probe leakage: training sample uses a non-training identity");
    train_imgs.push_back(read_png((manifest.root / r.main_image).string()));
    train_shape.push_back(manifest.identities[r.identity].shape);
    train_bg.push_back(r.background);
    train_pose.push_back(r.pose);
  }
  for (int i = 0; i < count; ++i) {
    const int id = manifest.heldout_identities[static_cast<std::size_t>(i) % manifest.heldout_identities.size()];
    const int p = rng.uniform_int(0, static_cast<int>(manifest.poses.size()) - 1);
    const int b = rng.uniform_int(0, static_cast<int>(manifest.backgrounds.size()) - 1);
    test_imgs.push_back(render(manifest.factors(id, p, b), true, size));
    test_shape.push_back(manifest.identities[id].shape);
    test_bg.push_back(b);
    test_pose.push_back(p);
  }
  const auto ftrain = probe_features(stack, train_imgs);
  const auto ftest = probe_features(stack, test_imgs);
  ProbeScores s;
  s.train_count = count;
  s.test_count = count;
  CentroidProbe probe;
  probe.fit(ftrain, train_shape);
  s.identity = probe.accuracy(ftest, test_shape);
  probe.fit(ftrain, train_bg);
  s.background = probe.accuracy(ftest, test_bg);
  probe.fit(ftrain, train_pose);
  s.pose = probe.accuracy(ftest, test_pose);
  return s;
}

std::string MetricsReport::csv_header() {
  return "variant,config_hash,checkpoint_id,image_sim_mean,image_sim_std,text_sim_mean,text_sim_std,identity_acc,"
         "background_acc,pose_acc,bg_drift,bg_drift_raw,pose_drift,pose_drift_raw,generations,pairs";
}

std::string MetricsReport::csv_row() const {
  char buf[1024];
  std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d",
                variant.c_str(), config_hash.c_str(), checkpoint_id.c_str(), image_sim_mean, image_sim_std,
                text_sim_mean, text_sim_std, identity_acc, background_acc, pose_acc, bg_drift, bg_drift_raw, pose_drift,
                pose_drift_raw, generations, pairs);
  return buf;
}

std::string MetricsReport::to_json() const { return report_json(*this).dump(2); }

EvalOptions EvalOptions::from(const Config& config) {
  EvalOptions o;
  o.pairs = config.get_int("eval.pairs");
  o.generations = config.get_int("eval.generations");
  o.sample_steps = config.get_int("eval.sample_steps");
  o.seed = config.get_u64("seed");
  if (o.pairs < 1 || o.generations < 1 || o.sample_steps < 1) throw ConfigError("eval counts must be positive");
  return o;
}

std::vector<Generation> generate_from_heldout(const ModelStack& stack, const Manifest& manifest, int count, int steps,
                                              std::uint64_t seed) {
  if (manifest.heldout_identities.empty()) throw InputError("generate_from_heldout: corpus has no held-out identities");
  Rng rng(seed);
  std::vector<Generation> gens;
  std::vector<ConditionEmbedding> conds;
  for (int i = 0; i < count; ++i) {
    Generation g;
    const int id = manifest.heldout_identities[static_cast<std::size_t>(i) % manifest.heldout_identities.size()];
    const int p = rng.uniform_int(0, static_cast<int>(manifest.poses.size()) - 1);
    const int b = rng.uniform_int(0, static_cast<int>(manifest.backgrounds.size()) - 1);
    g.reference_factors = manifest.factors(id, p, b);
    g.reference = render(g.reference_factors, true, manifest.image_size);
    const PromptTemplate& prompt = sample_template(stack.templates, rng);
    g.prompt = prompt.text();
    g.token = manifest.token(id);
    conds.push_back(image_condition(stack, g.reference, prompt));
    gens.push_back(std::move(g));
  }
  const SamplerKind kind = parse_sampler_kind(stack.config.get_string("sampler.kind"));
  const std::vector<ImageTensor> images =
      sample(ConditionBatch::stack(conds), stack.denoiser, stack.schedule, stack.codec, kind, steps, rng.next_u64());
  for (std::size_t i = 0; i < gens.size(); ++i) gens[i].generated = images[i];
  return gens;
}

MetricsReport evaluate(const ModelStack& stack, const Manifest& manifest, const EvalOptions& options,
                       const std::string& checkpoint_id) {
  MetricsReport r;
  r.variant = ablation_label(stack.config.get_string("ablate"));
  r.config_hash = stack.config.hash();
  r.checkpoint_id = checkpoint_id;
  r.generations = options.generations;
  r.pairs = options.pairs;

  const auto gens = generate_from_heldout(stack, manifest, options.generations, options.sample_steps, options.seed);
  std::vector<double> image_sims, text_sims;
  for (const Generation& g : gens) {
    image_sims.push_back(embedding_similarity(g.generated, g.reference, stack.encoder));
    text_sims.push_back(text_image_similarity(g.generated, PromptTemplate(g.prompt), g.token, stack));
  }
  std::tie(r.image_sim_mean, r.image_sim_std) = mean_std(image_sims);
  std::tie(r.text_sim_mean, r.text_sim_std) = mean_std(text_sims);

  const ProbeScores probes = run_probes(stack, manifest, options.pairs, options.seed + 1);
  r.identity_acc = probes.identity;
  r.background_acc = probes.background;
  r.pose_acc = probes.pose;

  const auto bg_pairs = make_pairs(manifest, NuisanceFactor::kBackground, options.pairs, options.seed + 2);
  const DriftResult bg = invariance_probe(stack, bg_pairs, NuisanceFactor::kBackground, manifest.image_size);
  r.bg_drift = bg.decoupled;
  r.bg_drift_raw = bg.raw;
  const auto pose_pairs = make_pairs(manifest, NuisanceFactor::kPose, options.pairs, options.seed + 3);
  const DriftResult pose = invariance_probe(stack, pose_pairs, NuisanceFactor::kPose, manifest.image_size);
  r.pose_drift = pose.decoupled;
  r.pose_drift_raw = pose.raw;
  return r;
}

void write_reports_csv(const fs::path& path, std::span<const MetricsReport> reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << MetricsReport::csv_header() << '\n';
  for (const auto& r : reports) out << r.csv_row() << '\n';
}

void write_reports_json(const fs::path& path, std::span<const MetricsReport> reports) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(report_json(r));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string format_table(std::span<const MetricsReport> reports) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %9s %9s %8s %8s %8s %9s %9s\n", "variant", "image_sim", "text_sim", "id_acc",
                "bg_acc", "pose_acc", "bg_drift", "pose_drft");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-22s %9.4f %9.4f %8.3f %8.3f %8.3f %9.4f %9.4f\n", r.variant.c_str(),
                  r.image_sim_mean, r.text_sim_mean, r.identity_acc, r.background_acc, r.pose_acc, r.bg_drift,
                  r.pose_drift);
    out << line;
  }
  return out.str();
}

std::string ablation_label(const std::string& ablate) {
  if (ablate == "none") return "full";
  if (ablate == "bg") return "w/o background expert";
  if (ablate == "pose") return "w/o pose expert";
  if (ablate == "both") return "w/o both";
  throw ConfigError("unknown ablate value '" + ablate + "'");
}

std::vector<MetricsReport> run_ablation(const ModelStack& pretrained, const Manifest& manifest, int steps,
                                        const EvalOptions& options) {
  std::vector<MetricsReport> reports;
  for (const std::string& variant : ablation_variants()) {
    ModelStack stack = pretrained.clone();
    stack.config.set("ablate", variant);
    stack.decouple = DecoupleOptions::from(stack.config);
    TrainConfig tc = TrainConfig::from(stack.config);
    SpotDiffTrainer trainer(stack, manifest, tc);
    trainer.run(steps);
    log_info("ablation " + variant + " trained");
    reports.push_back(evaluate(stack, manifest, options));
  }
  return reports;
}

}  // namespace spotdiff
