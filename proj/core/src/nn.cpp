#include "spotdiff/nn.hpp"

#include <algorithm>
#include <cmath>

#include "spotdiff/error.hpp"

namespace spotdiff::nn {

namespace {

Tensor random_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(values), true);
}

}  // namespace

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kCrossAttention: return "cross_attention";
    case ParamGroup::kDenoiserOther: return "denoiser_other";
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kMapper: return "mapper";
    case ParamGroup::kExpert: return "expert";
    case ParamGroup::kAligner: return "aligner";
    case ParamGroup::kTextEncoder: return "text_encoder";
    case ParamGroup::kHeads: return "heads";
  }
  return "unknown";
}

Linear::Linear(int in, int out, bool bias, Rng& rng)
    : weight_(random_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)) {
  if (bias) bias_ = Tensor::zeros({out}, true);
}

void Linear::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", weight_, group});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_, group});
}

Mlp::Mlp(const std::vector<int>& widths, bool bias, double dropout, Rng& rng, Activation activation)
    : dropout_(dropout), activation_(activation) {
  if (widths.size() < 2) throw ConfigError("Mlp needs at least an input and an output width");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (widths[i] <= 0 || widths[i + 1] <= 0) throw ConfigError("Mlp widths must be positive");
    layers_.emplace_back(widths[i], widths[i + 1], bias, rng);
  }
}

Tensor Mlp::forward(const Tensor& x, Rng* dropout_rng, bool training) const {
  if (x.dim(-1) != in_features()) {
    throw ConfigError("Mlp input width " + std::to_string(x.dim(-1)) + " != " + std::to_string(in_features()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) {
      if (activation_ == Activation::kSilu) h = ops::silu(h);
      if (training && dropout_ > 0.0) {
        if (dropout_rng == nullptr) throw ConfigError("Mlp dropout in training mode needs an rng");
        h = ops::dropout(h, dropout_, *dropout_rng, true);
      }
    }
  }
  return h;
}

void Mlp::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(out, prefix + ".layers." + std::to_string(i), group);
  }
}

Conv2d::Conv2d(int in, int out, int kernel, int stride, int padding, bool bias, Rng& rng)
    : weight_(random_param({out, in, kernel, kernel}, 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel)), rng)),
      stride_(stride),
      padding_(padding) {
  if (bias) bias_ = Tensor::zeros({out}, true);
}

void Conv2d::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", weight_, group});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_, group});
}

GroupNorm::GroupNorm(int groups, int channels)
    : groups_(groups), gamma_(Tensor::full({channels}, 1.0, true)), beta_(Tensor::zeros({channels}, true)) {
  if (channels % groups != 0) throw ConfigError("GroupNorm: channels not divisible by groups");
}

void GroupNorm::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".gamma", gamma_, group});
  out.push_back({prefix + ".beta", beta_, group});
}

LayerNorm::LayerNorm(int dim) : gamma_(Tensor::full({dim}, 1.0, true)), beta_(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".gamma", gamma_, group});
  out.push_back({prefix + ".beta", beta_, group});
}

int pick_groups(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

void copy_values(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw ConfigError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].tensor.shape() != to[i].tensor.shape()) {
      throw ConfigError("copy_values: shape mismatch for " + from[i].name);
    }
    auto src = from[i].tensor.data();
    Tensor dst = to[i].tensor;
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace spotdiff::nn
