#include "spotdiff/feature_extraction.hpp"

#include <cmath>

#include "spotdiff/disentangler.hpp"
#include "spotdiff/error.hpp"

namespace spotdiff {

LayerFeatureSet::LayerFeatureSet(Tensor layers) : layers_(std::move(layers)) {
  if (layers_.ndim() != 2 || layers_.dim(0) != kNumLayers) {
    throw ConfigError("LayerFeatureSet expects [" + std::to_string(kNumLayers) + ", d], got " +
                      shape_str(layers_.shape()));
  }
  for (double v : layers_.data()) {
    if (!std::isfinite(v)) throw InputError("LayerFeatureSet contains non-finite values");
  }
}

std::vector<double> LayerFeatureSet::layer(int i) const {
  if (i < 0 || i >= kNumLayers) throw InputError("layer index out of range");
  const int d = dim();
  auto v = layers_.data();
  return {v.begin() + static_cast<std::ptrdiff_t>(i) * d, v.begin() + static_cast<std::ptrdiff_t>(i + 1) * d};
}

EncoderConfig EncoderConfig::from(const Config& config) {
  EncoderConfig c;
  c.image_size = config.get_int("image.size");
  c.base_channels = config.get_int("encoder.base_channels");
  c.d_enc = config.get_int("features.d_enc");
  c.bias = config.get_bool("encoder.bias");
  if (c.image_size < 4 || c.image_size % 4 != 0) throw ConfigError("image.size must be a positive multiple of 4");
  if (c.base_channels < 1 || c.d_enc < 1) throw ConfigError("encoder widths must be positive");
  return c;
}

EncoderModel::EncoderModel(const EncoderConfig& config, Rng& rng) : config_(config) {
  const int c0 = config.base_channels, c1 = 2 * c0, c2 = 4 * c0;
  const bool b = config.bias;
  stem_ = nn::Conv2d(config.channels, c0, 3, 1, 1, b, rng);
  down1_ = nn::Conv2d(c0, c1, 3, 2, 1, b, rng);
  block2_ = nn::Conv2d(c1, c1, 3, 1, 1, b, rng);
  down3_ = nn::Conv2d(c1, c2, 3, 2, 1, b, rng);
  block4_ = nn::Conv2d(c2, c2, 3, 1, 1, b, rng);
  norm0_ = nn::GroupNorm(nn::pick_groups(c0, 4), c0);
  norm1_ = nn::GroupNorm(nn::pick_groups(c1, 4), c1);
  norm2_ = nn::GroupNorm(nn::pick_groups(c1, 4), c1);
  norm3_ = nn::GroupNorm(nn::pick_groups(c2, 4), c2);
  norm4_ = nn::GroupNorm(nn::pick_groups(c2, 4), c2);
  for (int width : {c0, c1, c1, c2, c2}) tap_proj_.emplace_back(width, config.d_enc, b, rng);
}

std::vector<Tensor> EncoderModel::pooled_taps(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != config_.channels || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size) {
    throw ConfigError("encoder expects [B," + std::to_string(config_.channels) + "," +
                      std::to_string(config_.image_size) + "," + std::to_string(config_.image_size) +
                      "], got " + shape_str(images.shape()));
  }
  std::vector<Tensor> taps;
  Tensor h = ops::silu(norm0_.forward(stem_.forward(images)));
  taps.push_back(ops::global_avg_pool(h));
  h = ops::silu(norm1_.forward(down1_.forward(h)));
  taps.push_back(ops::global_avg_pool(h));
  h = ops::add(h, ops::silu(norm2_.forward(block2_.forward(h))));
  taps.push_back(ops::global_avg_pool(h));
  h = ops::silu(norm3_.forward(down3_.forward(h)));
  taps.push_back(ops::global_avg_pool(h));
  h = ops::add(h, ops::silu(norm4_.forward(block4_.forward(h))));
  taps.push_back(ops::global_avg_pool(h));
  return taps;
}

Tensor EncoderModel::forward(const Tensor& images) const {
  const std::vector<Tensor> taps = pooled_taps(images);
  const int batch = images.dim(0);
  std::vector<Tensor> projected;
  projected.reserve(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) {
    projected.push_back(tap_proj_[i].forward(taps[i]).reshape({batch, 1, config_.d_enc}));
  }
  return ops::concat(projected, 1);
}

nn::ParamList EncoderModel::parameters() const {
  nn::ParamList out;
  const auto g = nn::ParamGroup::kEncoder;
  stem_.collect(out, "encoder.stem", g);
  norm0_.collect(out, "encoder.norm0", g);
  down1_.collect(out, "encoder.down1", g);
  norm1_.collect(out, "encoder.norm1", g);
  block2_.collect(out, "encoder.block2", g);
  norm2_.collect(out, "encoder.norm2", g);
  down3_.collect(out, "encoder.down3", g);
  norm3_.collect(out, "encoder.norm3", g);
  block4_.collect(out, "encoder.block4", g);
  norm4_.collect(out, "encoder.norm4", g);
  for (std::size_t i = 0; i < tap_proj_.size(); ++i) tap_proj_[i].collect(out, "encoder.tap" + std::to_string(i), g);
  return out;
}

MapperConfig MapperConfig::from(const Config& config) {
  MapperConfig c;
  c.d_enc = config.get_int("features.d_enc");
  c.d_main = config.get_int("features.d_main");
  c.hidden = config.get_int("mapper.hidden");
  c.layers = config.get_int("mapper.layers");
  c.dropout = config.get_double("mapper.dropout");
  c.residual = config.get_bool("mapper.residual");
  if (c.layers < 1) throw ConfigError("mapper.layers must be >= 1");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("mapper.dropout must lie in [0,1)");
  return c;
}

MapperModel::MapperModel(const MapperConfig& config, Rng& rng) : config_(config) {
  std::vector<int> widths{config.d_enc};
  for (int i = 0; i + 1 < config.layers; ++i) widths.push_back(config.hidden);
  widths.push_back(config.d_main);
  mlp_ = nn::Mlp(widths, true, config.dropout, rng);
}

Tensor MapperModel::forward(const Tensor& raw, Rng* dropout_rng, bool training) const {
  if (raw.dim(-1) != config_.d_enc) {
    throw ConfigError("mapper expects vectors of dim " + std::to_string(config_.d_enc) + ", got " +
                      shape_str(raw.shape()));
  }
  const Tensor out = mlp_.forward(raw, dropout_rng, training);
  if (!config_.residual) return out;
  if (config_.d_enc == config_.d_main) return ops::add(out, raw);
  const Shape shape = out.shape();
  const Tensor rows = raw.reshape({static_cast<int>(raw.numel() / config_.d_enc), config_.d_enc});
  return ops::add(out, lift_to_main(rows, config_.d_main).reshape(shape));
}

nn::ParamList MapperModel::parameters() const {
  nn::ParamList out;
  mlp_.collect(out, "mapper", nn::ParamGroup::kMapper);
  return out;
}

LayerFeatureSet encode_image(const ImageTensor& image, const EncoderModel& encoder) {
  const auto& cfg = encoder.config();
  if (image.height() != cfg.image_size || image.width() != cfg.image_size || image.channels() != cfg.channels) {
    throw ConfigError("image shape does not match encoder configuration");
  }
  image.validate();
  Tensor feats = encoder.forward(to_batch(image));
  return LayerFeatureSet(feats.reshape({kNumLayers, cfg.d_enc}));
}

LayerFeatureSet map_features(const LayerFeatureSet& raw, const MapperModel& mapper, Rng* dropout_rng) {
  return LayerFeatureSet(mapper.forward(raw.tensor(), dropout_rng, dropout_rng != nullptr));
}

}  // namespace spotdiff
