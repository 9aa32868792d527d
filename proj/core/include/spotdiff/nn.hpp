#pragma once

#include <string>
#include <vector>

#include "spotdiff/ops.hpp"
#include "spotdiff/rng.hpp"
#include "spotdiff/tensor.hpp"

namespace spotdiff::nn {

/// Parameter groups. The denoiser tags every tensor as either cross-attention
/// or other; the remaining models use their own group.
enum class ParamGroup { kCrossAttention, kDenoiserOther, kEncoder, kMapper, kExpert, kAligner, kTextEncoder, kHeads };

std::string_view group_name(ParamGroup g);

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

using ParamList = std::vector<NamedParam>;

enum class Activation { kSilu, kIdentity };

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, bool bias, Rng& rng);

  Tensor forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;

  int in_features() const { return weight_.dim(0); }
  int out_features() const { return weight_.dim(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;  // [in, out]
  Tensor bias_;    // [out] or undefined
};

/// Perceptron of `widths.size() - 1` linear layers; activation and dropout
/// follow every layer except the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<int>& widths, bool bias, double dropout, Rng& rng,
      Activation activation = Activation::kSilu);

  Tensor forward(const Tensor& x, Rng* dropout_rng, bool training) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;

  int in_features() const { return layers_.front().in_features(); }
  int out_features() const { return layers_.back().out_features(); }
  std::size_t depth() const { return layers_.size(); }
  double dropout() const { return dropout_; }
  void set_dropout(double p) { dropout_ = p; }
  void set_activation(Activation a) { activation_ = a; }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  double dropout_ = 0.0;
  Activation activation_ = Activation::kSilu;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int padding, bool bias, Rng& rng);

  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight_, bias_, stride_, padding_); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_, bias_;
  int stride_ = 1, padding_ = 0;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int groups, int channels);

  Tensor forward(const Tensor& x) const { return ops::group_norm(x, groups_, gamma_, beta_); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;

 private:
  int groups_ = 1;
  Tensor gamma_, beta_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma_, beta_); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;

 private:
  Tensor gamma_, beta_;
};

/// Largest group count <= preferred that divides channels.
int pick_groups(int channels, int preferred);

/// Copies parameter values between structurally identical lists.
void copy_values(const ParamList& from, const ParamList& to);

}  // namespace spotdiff::nn
