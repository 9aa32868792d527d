#pragma once

#include <span>
#include <vector>

#include "spotdiff/config.hpp"
#include "spotdiff/feature_extraction.hpp"
#include "spotdiff/image.hpp"
#include "spotdiff/nn.hpp"

namespace spotdiff {

enum class NuisanceFactor { kPose, kBackground };
enum class FeatureOrigin { kPredicted, kGroundTruth };

/// kSequential subtracts pose then background as written (v ⊖ p ⊖ b);
/// kJoint first orthogonalizes background against pose so the result is
/// orthogonal to both.
enum class DecoupleMode { kSequential, kJoint };

DecoupleMode parse_decouple_mode(const std::string& s);
std::string_view to_string(DecoupleMode mode);
std::string_view to_string(NuisanceFactor factor);

struct NuisanceFeatureSet {
  NuisanceFactor factor;
  FeatureOrigin origin;
  LayerFeatureSet layers;
};

/// v ⊖ u = v - (<v,u>/|u|^2) u. Returns v unchanged when |u|^2 < eps.
std::vector<double> project_out(std::span<const double> v, std::span<const double> u, double eps);

/// Threshold on |u|^2 below which a nuisance direction is treated as absent:
/// `per_dim * dim` (per_dim is the `decouple.eps` config value).
inline double degenerate_threshold(int dim, double per_dim = 1e-12) { return per_dim * dim; }

struct DecoupleOptions {
  DecoupleMode mode = DecoupleMode::kSequential;
  double eps_per_dim = 1e-12;
  bool use_pose = true;        // false bypasses the pose projection (ablation)
  bool use_background = true;  // false bypasses the background projection

  static DecoupleOptions from(const Config& config);
};

/// Fixed linear lift from d_enc into d_main: the rectangular identity
/// (identity when the dimensions agree). Not trainable.
Tensor lift_to_main(const Tensor& nuisance, int d_main);

/// Differentiable decoupling of row-aligned [R, d] tensors.
Tensor decouple_rows(const Tensor& main, const Tensor& pose, const Tensor& background,
                     const DecoupleOptions& options);

LayerFeatureSet decouple(const LayerFeatureSet& main, const NuisanceFeatureSet& pose,
                         const NuisanceFeatureSet& background, const DecoupleOptions& options);

struct ExpertConfig {
  int d_main = 64;
  int d_enc = 64;
  int hidden = 128;
  int layers = 3;
  double dropout = 0.1;

  static ExpertConfig from(const Config& config);
};

/// Perceptron predicting one nuisance factor's encoder-space feature from a
/// main feature vector; shared across the five layers. Input rows are
/// rescaled to unit RMS first, so only their direction matters.
class ExpertModel {
 public:
  ExpertModel() = default;
  ExpertModel(NuisanceFactor factor, const ExpertConfig& config, Rng& rng);

  Tensor forward(const Tensor& main, Rng* dropout_rng, bool training) const;

  NuisanceFactor factor() const { return factor_; }
  const ExpertConfig& config() const { return config_; }
  nn::Mlp& mlp() { return mlp_; }
  nn::ParamList parameters() const;

 private:
  NuisanceFactor factor_ = NuisanceFactor::kPose;
  ExpertConfig config_;
  nn::Mlp mlp_;
};

NuisanceFeatureSet predict_nuisance(const LayerFeatureSet& main, const ExpertModel& expert,
                                    Rng* dropout_rng = nullptr);

/// Frozen-encoder target features. Background takes exactly one
/// subject-free image; pose takes >= 1 pose-matched variants and averages
/// their features per layer.
NuisanceFeatureSet ground_truth_features(NuisanceFactor factor, std::span<const ImageTensor> images,
                                         const EncoderModel& encoder);

/// Expert alignment loss as a differentiable scalar:
///   sum_k (1 - mean over the N*5 rows of cos(predicted_k, truth_k)),
/// which equals (1/N) sum_i sum_k (1 - mean_layers cos). Factors whose
/// tensors are undefined are skipped (ablation). Zero-norm rows count as
/// cosine 0; their number is added to *zero_rows.
Tensor alignment_loss_rows(const Tensor& pose_pred, const Tensor& pose_truth, const Tensor& bg_pred,
                           const Tensor& bg_truth, int* zero_rows = nullptr);

/// Value form over matched batches. Each batch entry pairs a sample's
/// prediction with its truth for that factor; both factors must be present
/// per sample.
double alignment_loss(std::span<const NuisanceFeatureSet> predicted, std::span<const NuisanceFeatureSet> truth);

}  // namespace spotdiff
