#pragma once

#include <vector>

#include "spotdiff/config.hpp"
#include "spotdiff/image.hpp"
#include "spotdiff/nn.hpp"
#include "spotdiff/rng.hpp"
#include "spotdiff/tensor.hpp"

namespace spotdiff {

/// Number of encoder tap points and therefore feature vectors per image.
inline constexpr int kNumLayers = 5;

/// Exactly kNumLayers feature vectors of a common dimension, held as a
/// [kNumLayers, d] tensor so gradients can flow through it.
class LayerFeatureSet {
 public:
  LayerFeatureSet() = default;
  explicit LayerFeatureSet(Tensor layers);

  const Tensor& tensor() const { return layers_; }
  int dim() const { return layers_.dim(1); }
  int size() const { return kNumLayers; }
  std::vector<double> layer(int i) const;

 private:
  Tensor layers_;
};

struct EncoderConfig {
  int image_size = 32;
  int channels = 3;
  int base_channels = 16;
  int d_enc = 64;
  bool bias = true;

  static EncoderConfig from(const Config& config);
};

/// Convolutional trunk with five tap points: the input stem and four conv
/// blocks (two of them strided). Each tap is global-average-pooled and
/// projected to d_enc.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(const EncoderConfig& config, Rng& rng);

  /// images [B,C,H,W] -> [B, kNumLayers, d_enc].
  Tensor forward(const Tensor& images) const;
  /// Pooled (pre-projection) tap activations, one [B, C_tap] tensor per tap.
  std::vector<Tensor> pooled_taps(const Tensor& images) const;

  const EncoderConfig& config() const { return config_; }
  nn::ParamList parameters() const;

 private:
  EncoderConfig config_;
  nn::Conv2d stem_, down1_, block2_, down3_, block4_;
  nn::GroupNorm norm0_, norm1_, norm2_, norm3_, norm4_;
  std::vector<nn::Linear> tap_proj_;
};

struct MapperConfig {
  int d_enc = 64;
  int d_main = 64;
  int hidden = 128;
  int layers = 5;
  double dropout = 0.1;
  bool residual = true;  // add the raw vector (lifted to d_main) to the perceptron output

  static MapperConfig from(const Config& config);
};

/// Shared perceptron applied independently to every tap vector. In residual
/// form the output stays in the encoder's coordinates, where the nuisance
/// targets live.
class MapperModel {
 public:
  MapperModel() = default;
  MapperModel(const MapperConfig& config, Rng& rng);

  /// [..., d_enc] -> [..., d_main].
  Tensor forward(const Tensor& raw, Rng* dropout_rng, bool training) const;

  const MapperConfig& config() const { return config_; }
  nn::Mlp& mlp() { return mlp_; }
  nn::ParamList parameters() const;

 private:
  MapperConfig config_;
  nn::Mlp mlp_;
};

/// Encodes one image into its five tap vectors (eval mode, no dropout).
LayerFeatureSet encode_image(const ImageTensor& image, const EncoderModel& encoder);

/// Maps raw tap vectors into the main feature space. Eval mode when rng is null.
LayerFeatureSet map_features(const LayerFeatureSet& raw, const MapperModel& mapper, Rng* dropout_rng = nullptr);

}  // namespace spotdiff
