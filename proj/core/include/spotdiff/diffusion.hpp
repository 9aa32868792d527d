#pragma once

#include <string>
#include <vector>

#include "spotdiff/conditioning.hpp"
#include "spotdiff/config.hpp"
#include "spotdiff/image.hpp"
#include "spotdiff/nn.hpp"

namespace spotdiff {

enum class ScheduleKind { kLinear, kCosine };
ScheduleKind parse_schedule_kind(const std::string& s);

/// Cumulative signal coefficients for t = 1..T, strictly decreasing.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;      // betas[t-1]
  std::vector<double> alpha_bar;  // alpha_bar[t-1] = prod_{s<=t} (1 - beta_s)

  double alpha_bar_at(int t) const;
};

/// Linear betas over [beta_start, beta_end] scaled by 1000/T (capped at 0.999),
/// or the cosine schedule.
NoiseSchedule build_schedule(int T, ScheduleKind kind, double beta_start = 1e-4, double beta_end = 0.02);
NoiseSchedule build_schedule(int T, const std::string& kind, double beta_start = 1e-4, double beta_end = 0.02);
NoiseSchedule build_schedule(const Config& config);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, for one timestep
/// shared by the whole tensor.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);
/// Per-sample timesteps for a batch z0 [B, ...].
Tensor forward_diffuse(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& schedule);

/// Image <-> latent map. The identity codec is the exact affine rescale
/// x in [0,1] <-> z in [-1,1].
class LatentCodec {
 public:
  static LatentCodec from(const Config& config);
  Tensor encode(const Tensor& images) const;
  Tensor decode(const Tensor& latents) const;
};

/// Weights of one attention head: Q = h W_q, K = E W_k, V = E W_v.
struct CrossAttentionWeights {
  Tensor w_q;  // [d_h, d]
  Tensor w_k;  // [d_c, d]
  Tensor w_v;  // [d_c, d]
};

/// softmax(Q K^T / sqrt(d)) V for a single sequence: h [N, d_h], condition [M, d_c] -> [N, d].
Tensor cross_attention(const Tensor& h, const Tensor& condition, const CrossAttentionWeights& weights);

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  int base_channels = 16;
  int time_dim = 64;
  int groups = 4;
  int d_text = 64;

  static DenoiserConfig from(const Config& config);
};

/// Cross-attention layer inside the U-Net: pre-norm, Q/K/V projections,
/// output projection, residual add.
class CrossAttentionLayer {
 public:
  CrossAttentionLayer() = default;
  CrossAttentionLayer(int channels, int d_text, int groups, Rng& rng);

  Tensor forward(const Tensor& h, const ConditionBatch& condition) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  nn::GroupNorm norm_;
  nn::Linear wq_, wk_, wv_, wo_;
};

class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(int in, int out, int time_dim, int groups, Rng& rng);

  Tensor forward(const Tensor& x, const Tensor& temb) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  nn::GroupNorm norm1_, norm2_;
  nn::Conv2d conv1_, conv2_, skip_;
  nn::Linear time_proj_;
  bool has_skip_ = false;
};

/// Two-resolution U-Net. The mid block and both decoder blocks each carry one
/// cross-attention layer; the output convolution starts at zero.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(const DenoiserConfig& config, Rng& rng);

  /// latents [B,C,H,W], t per sample -> predicted noise [B,C,H,W].
  Tensor forward(const Tensor& latents, const std::vector<int>& t, const ConditionBatch& condition) const;

  const DenoiserConfig& config() const { return config_; }
  /// Every parameter tagged kCrossAttention or kDenoiserOther.
  nn::ParamList parameters() const;

 private:
  DenoiserConfig config_;
  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_, down_, up_conv_, conv_out_;
  ResBlock res0_, res1_, mid_, dec1_, dec0_;
  CrossAttentionLayer attn_mid_, attn_dec1_, attn_dec0_;
  nn::GroupNorm norm_out_;
};

/// Sinusoidal timestep embedding [B, dim].
Tensor timestep_embedding(const std::vector<int>& t, int dim);

struct LatentState {
  Tensor z;  // [C,H,W] or [B,C,H,W]
  int t = 1;
};

/// Noise estimate for a single latent with its condition.
Tensor predict_noise(const LatentState& state, const ConditionEmbedding& condition, const DenoiserModel& model);

/// Mean squared error between eps and the model's prediction at z_t.
Tensor ldm_loss(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const ConditionBatch& condition,
                const DenoiserModel& model, const NoiseSchedule& schedule);

/// L2 = L_ldm + lambda1 * ||F_main||_1, with the norm summed over the five
/// layers and averaged over the batch (f_main is [B, 5, d] or [5, d]).
Tensor l2_objective(const Tensor& ldm, const Tensor& f_main, double lambda1);
/// L = L2 + lambda2 * L1.
Tensor total_objective(const Tensor& l2, const Tensor& l1, double lambda2);

enum class SamplerKind { kDdpm, kDdim };
SamplerKind parse_sampler_kind(const std::string& s);

/// Generates one image per condition. DDIM is deterministic (eta = 0);
/// DDPM adds posterior noise (eta = 1) on an evenly strided subsequence.
std::vector<ImageTensor> sample(const ConditionBatch& condition, const DenoiserModel& model,
                                const NoiseSchedule& schedule, const LatentCodec& codec, SamplerKind kind,
                                int steps, std::uint64_t seed);
ImageTensor sample(const ConditionEmbedding& condition, const DenoiserModel& model, const NoiseSchedule& schedule,
                   const LatentCodec& codec, SamplerKind kind, int steps, std::uint64_t seed);

}  // namespace spotdiff
