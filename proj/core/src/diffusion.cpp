#include "spotdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "spotdiff/error.hpp"

namespace spotdiff {

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown schedule kind '" + s + "' (expected linear|cosine)");
}

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 1 || t > T) throw InputError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule build_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
  if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  if (kind == ScheduleKind::kLinear) {
    if (!(beta_start > 0.0 && beta_end > beta_start && beta_end < 1.0)) {
      throw ConfigError("linear schedule needs 0 < beta_start < beta_end < 1");
    }
    const double rescale = 1000.0 / T;
    for (int i = 0; i < T; ++i) {
      s.betas[i] = std::min(rescale * (beta_start + (beta_end - beta_start) * i / (T - 1)), 0.999);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double x = (t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
      return std::cos(x) * std::cos(x);
    };
    for (int i = 0; i < T; ++i) s.betas[i] = std::min(1.0 - f(i + 1) / f(i), 0.999);
  }
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    prod *= 1.0 - s.betas[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

NoiseSchedule build_schedule(int T, const std::string& kind, double beta_start, double beta_end) {
  return build_schedule(T, parse_schedule_kind(kind), beta_start, beta_end);
}

NoiseSchedule build_schedule(const Config& config) {
  return build_schedule(config.get_int("schedule.T"), config.get_string("schedule.kind"),
                        config.get_double("schedule.beta_start"), config.get_double("schedule.beta_end"));
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape()) throw InputError("forward_diffuse: noise shape differs from latent");
  const double ab = schedule.alpha_bar_at(t);
  return ops::add(ops::scale(z0, std::sqrt(ab)), ops::scale(eps, std::sqrt(1.0 - ab)));
}

Tensor forward_diffuse(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape()) throw InputError("forward_diffuse: noise shape differs from latent");
  if (static_cast<int>(t.size()) != z0.dim(0)) throw InputError("forward_diffuse: one timestep per sample required");
  std::vector<double> signal, noise;
  for (int ti : t) {
    const double ab = schedule.alpha_bar_at(ti);
    signal.push_back(std::sqrt(ab));
    noise.push_back(std::sqrt(1.0 - ab));
  }
  const int b = z0.dim(0);
  return ops::add(ops::mul_broadcast(z0, Tensor::from({b}, std::move(signal)), 0),
                  ops::mul_broadcast(eps, Tensor::from({b}, std::move(noise)), 0));
}

LatentCodec LatentCodec::from(const Config& config) {
  const std::string kind = config.get_string("codec.kind");
  if (kind != "identity") throw ConfigError("unknown codec.kind '" + kind + "' (only identity is available)");
  return {};
}

Tensor LatentCodec::encode(const Tensor& images) const { return ops::add_scalar(ops::scale(images, 2.0), -1.0); }

Tensor LatentCodec::decode(const Tensor& latents) const { return ops::scale(ops::add_scalar(latents, 1.0), 0.5); }

Tensor cross_attention(const Tensor& h, const Tensor& condition, const CrossAttentionWeights& w) {
  if (h.ndim() != 2 || condition.ndim() != 2) throw ConfigError("cross_attention: expected rank-2 inputs");
  if (w.w_q.dim(0) != h.dim(1) || w.w_k.dim(0) != condition.dim(1) || w.w_v.dim(0) != condition.dim(1) ||
      w.w_q.dim(1) != w.w_k.dim(1)) {
    throw ConfigError("cross_attention: projection shapes do not match inputs");
  }
  const int d = w.w_q.dim(1);
  Tensor q = ops::matmul(h, w.w_q);
  Tensor k = ops::matmul(condition, w.w_k);
  Tensor v = ops::matmul(condition, w.w_v);
  const int n = h.dim(0), m = condition.dim(0);
  Tensor scores = ops::bmm(q.reshape({1, n, d}), ops::transpose_last2(k.reshape({1, m, d})));
  Tensor attn = ops::softmax_last(ops::scale(scores, 1.0 / std::sqrt(static_cast<double>(d))));
  return ops::bmm(attn, v.reshape({1, m, v.dim(1)})).reshape({n, v.dim(1)});
}

DenoiserConfig DenoiserConfig::from(const Config& config) {
  DenoiserConfig c;
  c.image_size = config.get_int("image.size");
  c.base_channels = config.get_int("denoiser.base_channels");
  c.time_dim = config.get_int("denoiser.time_dim");
  c.groups = config.get_int("denoiser.groups");
  c.d_text = config.get_int("features.d_text");
  if (c.image_size % 2 != 0) throw ConfigError("image.size must be even for the two-level U-Net");
  if (c.base_channels < 1 || c.time_dim < 2) throw ConfigError("denoiser widths must be positive");
  return c;
}

CrossAttentionLayer::CrossAttentionLayer(int channels, int d_text, int groups, Rng& rng)
    : norm_(nn::pick_groups(channels, groups), channels),
      wq_(channels, channels, false, rng),
      wk_(d_text, channels, false, rng),
      wv_(d_text, channels, false, rng),
      wo_(channels, channels, true, rng) {}

Tensor CrossAttentionLayer::forward(const Tensor& h, const ConditionBatch& condition) const {
  const int b = h.dim(0), c = h.dim(1), hh = h.dim(2), ww = h.dim(3), n = hh * ww;
  if (condition.batch() != b) throw ConfigError("cross-attention: condition batch differs from latent batch");
  const int m = condition.tokens.dim(1);
  Tensor x = ops::swap_axes12(norm_.forward(h).reshape({b, c, n}));  // [B,N,C]
  Tensor q = wq_.forward(x);
  Tensor k = wk_.forward(condition.tokens);
  Tensor v = wv_.forward(condition.tokens);
  Tensor scores = ops::scale(ops::bmm(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(c)));
  bool padded = false;
  for (int len : condition.lengths) padded |= len < m;
  if (padded) {
    std::vector<double> bias(static_cast<std::size_t>(b) * n * m, 0.0);
    for (int i = 0; i < b; ++i)
      for (int r = 0; r < n; ++r)
        for (int j = condition.lengths[i]; j < m; ++j) bias[(static_cast<std::size_t>(i) * n + r) * m + j] = -1e30;
    scores = ops::add(scores, Tensor::from({b, n, m}, std::move(bias)));
  }
  Tensor out = wo_.forward(ops::bmm(ops::softmax_last(scores), v));  // [B,N,C]
  return ops::add(h, ops::swap_axes12(out).reshape({b, c, hh, ww}));
}

void CrossAttentionLayer::collect(nn::ParamList& out, const std::string& prefix) const {
  const auto g = nn::ParamGroup::kCrossAttention;
  norm_.collect(out, prefix + ".norm", g);
  wq_.collect(out, prefix + ".to_q", g);
  wk_.collect(out, prefix + ".to_k", g);
  wv_.collect(out, prefix + ".to_v", g);
  wo_.collect(out, prefix + ".to_out", g);
}

ResBlock::ResBlock(int in, int out, int time_dim, int groups, Rng& rng)
    : norm1_(nn::pick_groups(in, groups), in),
      norm2_(nn::pick_groups(out, groups), out),
      conv1_(in, out, 3, 1, 1, true, rng),
      conv2_(out, out, 3, 1, 1, true, rng),
      time_proj_(time_dim, out, true, rng),
      has_skip_(in != out) {
  if (has_skip_) skip_ = nn::Conv2d(in, out, 1, 1, 0, true, rng);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1_.forward(ops::silu(norm1_.forward(x)));
  h = ops::add_broadcast(h, time_proj_.forward(ops::silu(temb)), 0);
  h = conv2_.forward(ops::silu(norm2_.forward(h)));
  return ops::add(has_skip_ ? skip_.forward(x) : x, h);
}

void ResBlock::collect(nn::ParamList& out, const std::string& prefix) const {
  const auto g = nn::ParamGroup::kDenoiserOther;
  norm1_.collect(out, prefix + ".norm1", g);
  conv1_.collect(out, prefix + ".conv1", g);
  time_proj_.collect(out, prefix + ".time_proj", g);
  norm2_.collect(out, prefix + ".norm2", g);
  conv2_.collect(out, prefix + ".conv2", g);
  if (has_skip_) skip_.collect(out, prefix + ".skip", g);
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  std::vector<double> v(t.size() * static_cast<std::size_t>(dim), 0.0);
  for (std::size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v[b * dim + i] = std::sin(t[b] * freq);
      v[b * dim + half + i] = std::cos(t[b] * freq);
    }
  return Tensor::from({static_cast<int>(t.size()), dim}, std::move(v));
}

DenoiserModel::DenoiserModel(const DenoiserConfig& config, Rng& rng) : config_(config) {
  const int c0 = config.base_channels, c1 = 2 * c0, td = config.time_dim, g = config.groups;
  time1_ = nn::Linear(td, td, true, rng);
  time2_ = nn::Linear(td, td, true, rng);
  conv_in_ = nn::Conv2d(config.channels, c0, 3, 1, 1, true, rng);
  res0_ = ResBlock(c0, c0, td, g, rng);
  down_ = nn::Conv2d(c0, c1, 3, 2, 1, true, rng);
  res1_ = ResBlock(c1, c1, td, g, rng);
  mid_ = ResBlock(c1, c1, td, g, rng);
  attn_mid_ = CrossAttentionLayer(c1, config.d_text, g, rng);
  dec1_ = ResBlock(2 * c1, c1, td, g, rng);
  attn_dec1_ = CrossAttentionLayer(c1, config.d_text, g, rng);
  up_conv_ = nn::Conv2d(c1, c0, 3, 1, 1, true, rng);
  dec0_ = ResBlock(2 * c0, c0, td, g, rng);
  attn_dec0_ = CrossAttentionLayer(c0, config.d_text, g, rng);
  norm_out_ = nn::GroupNorm(nn::pick_groups(c0, g), c0);
  conv_out_ = nn::Conv2d(c0, config.channels, 3, 1, 1, true, rng);
  std::fill(conv_out_.weight().mutable_data().begin(), conv_out_.weight().mutable_data().end(), 0.0);
}

Tensor DenoiserModel::forward(const Tensor& latents, const std::vector<int>& t, const ConditionBatch& condition) const {
  if (latents.ndim() != 4 || latents.dim(1) != config_.channels || latents.dim(2) != config_.image_size ||
      latents.dim(3) != config_.image_size) {
    throw ConfigError("denoiser expects [B," + std::to_string(config_.channels) + "," +
                      std::to_string(config_.image_size) + "," + std::to_string(config_.image_size) + "], got " +
                      shape_str(latents.shape()));
  }
  if (static_cast<int>(t.size()) != latents.dim(0)) throw InputError("denoiser: one timestep per sample required");
  Tensor temb = time2_.forward(ops::silu(time1_.forward(timestep_embedding(t, config_.time_dim))));
  Tensor h0 = res0_.forward(conv_in_.forward(latents), temb);
  Tensor h1 = res1_.forward(down_.forward(h0), temb);
  Tensor m = attn_mid_.forward(mid_.forward(h1, temb), condition);
  Tensor d1 = attn_dec1_.forward(dec1_.forward(ops::concat({m, h1}, 1), temb), condition);
  Tensor u = up_conv_.forward(ops::upsample2x(d1));
  Tensor d0 = attn_dec0_.forward(dec0_.forward(ops::concat({u, h0}, 1), temb), condition);
  return conv_out_.forward(ops::silu(norm_out_.forward(d0)));
}

nn::ParamList DenoiserModel::parameters() const {
  nn::ParamList out;
  const auto g = nn::ParamGroup::kDenoiserOther;
  time1_.collect(out, "denoiser.time1", g);
  time2_.collect(out, "denoiser.time2", g);
  conv_in_.collect(out, "denoiser.conv_in", g);
  res0_.collect(out, "denoiser.res0");
  down_.collect(out, "denoiser.down", g);
  res1_.collect(out, "denoiser.res1");
  mid_.collect(out, "denoiser.mid");
  attn_mid_.collect(out, "denoiser.attn_mid");
  dec1_.collect(out, "denoiser.dec1");
  attn_dec1_.collect(out, "denoiser.attn_dec1");
  up_conv_.collect(out, "denoiser.up_conv", g);
  dec0_.collect(out, "denoiser.dec0");
  attn_dec0_.collect(out, "denoiser.attn_dec0");
  norm_out_.collect(out, "denoiser.norm_out", g);
  conv_out_.collect(out, "denoiser.conv_out", g);
  return out;
}

Tensor predict_noise(const LatentState& state, const ConditionEmbedding& condition, const DenoiserModel& model) {
  for (double v : state.z.data()) {
    if (!std::isfinite(v)) throw InputError("predict_noise: latent contains non-finite values");
  }
  const bool single = state.z.ndim() == 3;
  Tensor z = single ? state.z.reshape({1, state.z.dim(0), state.z.dim(1), state.z.dim(2)}) : state.z;
  std::vector<ConditionEmbedding> conds(static_cast<std::size_t>(z.dim(0)), condition);
  Tensor out = model.forward(z, std::vector<int>(conds.size(), state.t), ConditionBatch::stack(conds));
  return single ? out.reshape(state.z.shape()) : out;
}

Tensor ldm_loss(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const ConditionBatch& condition,
                const DenoiserModel& model, const NoiseSchedule& schedule) {
  Tensor zt = forward_diffuse(z0, t, eps, schedule);
  return ops::mse(model.forward(zt, t, condition), eps);
}

Tensor l2_objective(const Tensor& ldm, const Tensor& f_main, double lambda1) {
  if (lambda1 < 0.0) throw ConfigError("lambda1 must be non-negative");
  const int batch = f_main.ndim() == 3 ? f_main.dim(0) : 1;
  return ops::add(ldm, ops::scale(ops::abs_sum(f_main), lambda1 / batch));
}

Tensor total_objective(const Tensor& l2, const Tensor& l1, double lambda2) {
  if (lambda2 < 0.0) throw ConfigError("lambda2 must be non-negative");
  return ops::add(l2, ops::scale(l1, lambda2));
}

SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddpm") return SamplerKind::kDdpm;
  if (s == "ddim") return SamplerKind::kDdim;
  throw ConfigError("unknown sampler kind '" + s + "' (expected ddpm|ddim)");
}

std::vector<ImageTensor> sample(const ConditionBatch& condition, const DenoiserModel& model,
                                const NoiseSchedule& schedule, const LatentCodec& codec, SamplerKind kind,
                                int steps, std::uint64_t seed) {
  if (steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (steps > schedule.T) throw ConfigError("sampler steps exceed schedule length");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const int b = condition.batch();
  Rng rng(seed);
  Shape shape{b, cfg.channels, cfg.image_size, cfg.image_size};
  std::vector<double> z(static_cast<std::size_t>(numel(shape)));
  for (auto& v : z) v = rng.normal();
  const double eta = kind == SamplerKind::kDdim ? 0.0 : 1.0;

  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) ts.push_back(schedule.T - static_cast<int>(static_cast<long long>(i) * schedule.T / steps));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const double ab = schedule.alpha_bar_at(t);
    const double ab_prev = t_prev > 0 ? schedule.alpha_bar_at(t_prev) : 1.0;
    Tensor eps_hat = model.forward(Tensor::from(shape, z), std::vector<int>(b, t), condition);
    auto e = eps_hat.data();
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(1.0 - ab_prev - sigma * sigma, 0.0));
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double x0 = std::clamp((z[j] - std::sqrt(1.0 - ab) * e[j]) / std::sqrt(ab), -1.0, 1.0);
      z[j] = std::sqrt(ab_prev) * x0 + dir * e[j];
    }
    if (sigma > 0.0) {
      for (auto& v : z) v += sigma * rng.normal();
    }
  }
  Tensor images = codec.decode(Tensor::from(shape, std::move(z)));
  std::vector<ImageTensor> out;
  for (int i = 0; i < b; ++i) out.push_back(from_batch(images, i));
  return out;
}

ImageTensor sample(const ConditionEmbedding& condition, const DenoiserModel& model, const NoiseSchedule& schedule,
                   const LatentCodec& codec, SamplerKind kind, int steps, std::uint64_t seed) {
  ConditionEmbedding c = condition;
  return sample(ConditionBatch::stack(std::span<const ConditionEmbedding>(&c, 1)), model, schedule, codec, kind,
                steps, seed)
      .front();
}

}  // namespace spotdiff
