#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spotdiff/corpus.hpp"
#include "spotdiff/training.hpp"

namespace spotdiff {

/// Cosine of two vectors; 0 (with a warning) when either has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Cosine of the top-tap encoder features of two images.
double embedding_similarity(const ImageTensor& a, const ImageTensor& b, const EncoderModel& encoder);

/// Cosine in the joint head space between an image and the prompt with its
/// placeholder filled by `subject_token`. Unknown tokens raise InputError.
double text_image_similarity(const ImageTensor& image, const PromptTemplate& prompt, const std::string& subject_token,
                             const ModelStack& stack);

/// Per-layer |fa - fb| / mean(|fa|, |fb|), averaged over layers. Inputs are [5, d].
double feature_drift(const Tensor& fa, const Tensor& fb);

/// Two renders that differ only in one nuisance factor.
struct FactorPair {
  FactorSpec a;
  FactorSpec b;
};

/// Held-out-identity pairs differing only in `factor`, drawn from the corpus
/// vocabularies.
std::vector<FactorPair> make_pairs(const Manifest& manifest, NuisanceFactor factor, int count, std::uint64_t seed);

struct DriftResult {
  double decoupled = 0.0;  // mean drift of decoupled F_main
  double raw = 0.0;        // mean drift of the mapper output before decoupling
  int pairs = 0;
};

/// Throws InputError if a pair differs in anything but `factor`.
DriftResult invariance_probe(const ModelStack& stack, std::span<const FactorPair> pairs, NuisanceFactor factor,
                             int image_size);

/// Nearest-class-centroid classifier.
class CentroidProbe {
 public:
  void fit(const std::vector<std::vector<double>>& features, const std::vector<int>& labels);
  int predict(std::span<const double> feature) const;
  double accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) const;
  const std::map<int, std::vector<double>>& centroids() const { return centroids_; }

 private:
  std::map<int, std::vector<double>> centroids_;
};

struct ProbeScores {
  double identity = 0.0;    // shape family of held-out identities
  double background = 0.0;
  double pose = 0.0;
  int train_count = 0;
  int test_count = 0;
};

/// Fits centroids on training-split samples and scores renders of held-out
/// identities. Throws InputError if the two identity sets overlap.
ProbeScores run_probes(const ModelStack& stack, const Manifest& manifest, int count, std::uint64_t seed);

struct MetricsReport {
  std::string variant = "full";
  std::string config_hash;
  std::string checkpoint_id;
  double image_sim_mean = 0, image_sim_std = 0;
  double text_sim_mean = 0, text_sim_std = 0;
  double identity_acc = 0, background_acc = 0, pose_acc = 0;
  double bg_drift = 0, bg_drift_raw = 0;
  double pose_drift = 0, pose_drift_raw = 0;
  int generations = 0, pairs = 0;

  static std::string csv_header();
  std::string csv_row() const;
  std::string to_json() const;
};

struct EvalOptions {
  int pairs = 200;
  int generations = 24;
  int sample_steps = 25;
  std::uint64_t seed = 0;

  static EvalOptions from(const Config& config);
};

/// Generates from held-out references, then runs probes and drift.
MetricsReport evaluate(const ModelStack& stack, const Manifest& manifest, const EvalOptions& options,
                       const std::string& checkpoint_id = "");

/// Held-out references and DDIM generations used by evaluate().
struct Generation {
  FactorSpec reference_factors;
  ImageTensor reference;
  ImageTensor generated;
  std::string prompt;
  std::string token;
};
std::vector<Generation> generate_from_heldout(const ModelStack& stack, const Manifest& manifest, int count, int steps,
                                              std::uint64_t seed);

void write_reports_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports);
void write_reports_json(const std::filesystem::path& path, std::span<const MetricsReport> reports);
/// Fixed-width grid with one row per variant.
std::string format_table(std::span<const MetricsReport> reports);

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"none", "bg", "pose", "both"};
  return v;
}
std::string ablation_label(const std::string& ablate);

/// Trains one copy of `pretrained` per ablation variant for `steps` SpotDiff
/// steps with a shared seed and corpus, and evaluates each.
std::vector<MetricsReport> run_ablation(const ModelStack& pretrained, const Manifest& manifest, int steps,
                                        const EvalOptions& options);

}  // namespace spotdiff
