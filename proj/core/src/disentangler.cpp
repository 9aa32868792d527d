#include "spotdiff/disentangler.hpp"

#include <cmath>
#include <map>

#include "spotdiff/error.hpp"
#include "spotdiff/log.hpp"

namespace spotdiff {

DecoupleMode parse_decouple_mode(const std::string& s) {
  if (s == "sequential") return DecoupleMode::kSequential;
  if (s == "joint") return DecoupleMode::kJoint;
  throw ConfigError("unknown decouple mode '" + s + "' (expected sequential|joint)");
}

std::string_view to_string(DecoupleMode mode) {
  return mode == DecoupleMode::kSequential ? "sequential" : "joint";
}

std::string_view to_string(NuisanceFactor factor) {
  return factor == NuisanceFactor::kPose ? "pose" : "background";
}

std::vector<double> project_out(std::span<const double> v, std::span<const double> u, double eps) {
  if (v.size() != u.size()) throw InputError("project_out: dimension mismatch");
  if (!(eps > 0.0)) throw InputError("project_out: eps must be positive");
  double vu = 0.0, uu = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]) || !std::isfinite(u[i])) throw InputError("project_out: non-finite entry");
    vu += v[i] * u[i];
    uu += u[i] * u[i];
  }
  std::vector<double> out(v.begin(), v.end());
  if (uu < eps) return out;
  const double c = vu / uu;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] -= c * u[i];
  return out;
}

DecoupleOptions DecoupleOptions::from(const Config& config) {
  DecoupleOptions o;
  o.mode = parse_decouple_mode(config.get_string("decouple.mode"));
  o.eps_per_dim = config.get_double("decouple.eps");
  if (!(o.eps_per_dim > 0.0)) throw ConfigError("decouple.eps must be positive");
  const std::string ablate = config.get_string("ablate");
  if (ablate == "none") {
  } else if (ablate == "bg") {
    o.use_background = false;
  } else if (ablate == "pose") {
    o.use_pose = false;
  } else if (ablate == "both") {
    o.use_pose = o.use_background = false;
  } else {
    throw ConfigError("unknown ablate value '" + ablate + "' (expected none|bg|pose|both)");
  }
  return o;
}

Tensor lift_to_main(const Tensor& nuisance, int d_main) {
  const int d_enc = nuisance.dim(-1);
  if (d_enc == d_main) return nuisance;
  std::vector<double> lift(static_cast<std::size_t>(d_enc) * d_main, 0.0);
  for (int i = 0; i < std::min(d_enc, d_main); ++i) lift[static_cast<std::size_t>(i) * d_main + i] = 1.0;
  return ops::linear(nuisance, Tensor::from({d_enc, d_main}, std::move(lift)), Tensor());
}

Tensor decouple_rows(const Tensor& main, const Tensor& pose, const Tensor& background,
                     const DecoupleOptions& options) {
  if (main.ndim() != 2) throw InputError("decouple: expected [rows, d] features");
  const int d = main.dim(1);
  const double eps = degenerate_threshold(d, options.eps_per_dim);
  Tensor p = options.use_pose ? lift_to_main(pose, d) : Tensor();
  Tensor b = options.use_background ? lift_to_main(background, d) : Tensor();
  for (const Tensor* t : {&p, &b}) {
    if (t->defined() && t->shape() != main.shape()) {
      throw InputError("decouple: nuisance " + shape_str(t->shape()) + " does not match main " +
                       shape_str(main.shape()));
    }
  }
  Tensor out = main;
  if (p.defined()) out = ops::project_out_rows(out, p, eps);
  if (b.defined()) {
    Tensor direction = b;
    if (options.mode == DecoupleMode::kJoint && p.defined()) direction = ops::project_out_rows(b, p, eps);
    out = ops::project_out_rows(out, direction, eps);
  }
  return out;
}

LayerFeatureSet decouple(const LayerFeatureSet& main, const NuisanceFeatureSet& pose,
                         const NuisanceFeatureSet& background, const DecoupleOptions& options) {
  if (pose.factor != NuisanceFactor::kPose || background.factor != NuisanceFactor::kBackground) {
    throw InputError("decouple: nuisance factors passed in the wrong order");
  }
  if (main.tensor().dim(0) != pose.layers.tensor().dim(0) || main.tensor().dim(0) != background.layers.tensor().dim(0)) {
    throw InputError("decouple: layer count mismatch");
  }
  return LayerFeatureSet(decouple_rows(main.tensor(), pose.layers.tensor(), background.layers.tensor(), options));
}

ExpertConfig ExpertConfig::from(const Config& config) {
  ExpertConfig c;
  c.d_main = config.get_int("features.d_main");
  c.d_enc = config.get_int("features.d_enc");
  c.hidden = config.get_int("expert.hidden");
  c.layers = config.get_int("expert.layers");
  c.dropout = config.get_double("expert.dropout");
  if (c.layers < 1) throw ConfigError("expert.layers must be >= 1");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("expert.dropout must lie in [0,1)");
  return c;
}

ExpertModel::ExpertModel(NuisanceFactor factor, const ExpertConfig& config, Rng& rng)
    : factor_(factor), config_(config) {
  std::vector<int> widths{config.d_main};
  for (int i = 0; i + 1 < config.layers; ++i) widths.push_back(config.hidden);
  widths.push_back(config.d_enc);
  mlp_ = nn::Mlp(widths, true, config.dropout, rng);
}

Tensor ExpertModel::forward(const Tensor& main, Rng* dropout_rng, bool training) const {
  if (main.dim(-1) != config_.d_main) {
    throw ConfigError("expert expects vectors of dim " + std::to_string(config_.d_main) + ", got " +
                      shape_str(main.shape()));
  }
  const Shape shape = main.shape();
  const int d = config_.d_main;
  const Tensor rows = main.reshape({static_cast<int>(main.numel() / d), d});
  const Tensor unit_rms = ops::scale(ops::normalize_rows(rows), std::sqrt(static_cast<double>(d)));
  Shape out_shape = shape;
  out_shape.back() = config_.d_enc;
  return mlp_.forward(unit_rms, dropout_rng, training).reshape(out_shape);
}

nn::ParamList ExpertModel::parameters() const {
  nn::ParamList out;
  mlp_.collect(out, std::string("expert.") + std::string(to_string(factor_)), nn::ParamGroup::kExpert);
  return out;
}

NuisanceFeatureSet predict_nuisance(const LayerFeatureSet& main, const ExpertModel& expert, Rng* dropout_rng) {
  return {expert.factor(), FeatureOrigin::kPredicted,
          LayerFeatureSet(expert.forward(main.tensor(), dropout_rng, dropout_rng != nullptr))};
}

NuisanceFeatureSet ground_truth_features(NuisanceFactor factor, std::span<const ImageTensor> images,
                                         const EncoderModel& encoder) {
  if (images.empty()) throw InputError("ground_truth_features: at least one image is required");
  if (factor == NuisanceFactor::kBackground && images.size() != 1) {
    throw InputError("ground_truth_features: background takes exactly one subject-free image");
  }
  NoGradGuard no_grad;
  for (const ImageTensor& img : images) img.validate();
  Tensor feats = encoder.forward(to_batch(images));  // [V, 5, d]
  const int views = feats.dim(0), d = feats.dim(2);
  std::vector<double> mean(static_cast<std::size_t>(kNumLayers) * d, 0.0);
  auto v = feats.data();
  for (int n = 0; n < views; ++n)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[n * mean.size() + i];
  for (double& m : mean) m /= views;
  return {factor, FeatureOrigin::kGroundTruth, LayerFeatureSet(Tensor::from({kNumLayers, d}, std::move(mean)))};
}

Tensor alignment_loss_rows(const Tensor& pose_pred, const Tensor& pose_truth, const Tensor& bg_pred,
                           const Tensor& bg_truth, int* zero_rows) {
  Tensor total;
  int zeros = 0;
  auto add_term = [&](const Tensor& pred, const Tensor& truth) {
    if (!pred.defined()) return;
    Tensor term = ops::add_scalar(ops::scale(ops::mean(ops::cosine_rows(pred, truth, &zeros)), -1.0), 1.0);
    total = total.defined() ? ops::add(total, term) : term;
  };
  add_term(pose_pred, pose_truth);
  add_term(bg_pred, bg_truth);
  if (zeros > 0) log_warn("alignment loss: " + std::to_string(zeros) + " zero-norm feature rows treated as cosine 0");
  if (zero_rows) *zero_rows += zeros;
  return total.defined() ? total : Tensor::scalar(0.0);
}

double alignment_loss(std::span<const NuisanceFeatureSet> predicted, std::span<const NuisanceFeatureSet> truth) {
  if (predicted.empty()) throw InputError("alignment_loss: empty batch");
  if (predicted.size() != truth.size()) throw InputError("alignment_loss: predicted/truth batch sizes differ");
  std::map<NuisanceFactor, std::vector<Tensor>> pred_rows, truth_rows;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].factor != truth[i].factor) throw InputError("alignment_loss: factor mismatch at index " + std::to_string(i));
    pred_rows[predicted[i].factor].push_back(predicted[i].layers.tensor());
    truth_rows[truth[i].factor].push_back(truth[i].layers.tensor());
  }
  const std::size_t n_pose = pred_rows[NuisanceFactor::kPose].size();
  const std::size_t n_bg = pred_rows[NuisanceFactor::kBackground].size();
  if (n_pose != n_bg) throw InputError("alignment_loss: every sample needs both a pose and a background entry");
  NoGradGuard no_grad;
  auto stack = [](const std::vector<Tensor>& xs) { return xs.empty() ? Tensor() : ops::concat(xs, 0); };
  return alignment_loss_rows(stack(pred_rows[NuisanceFactor::kPose]), stack(truth_rows[NuisanceFactor::kPose]),
                             stack(pred_rows[NuisanceFactor::kBackground]),
                             stack(truth_rows[NuisanceFactor::kBackground]))
      .item();
}

}  // namespace spotdiff
