#include "spotdiff/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "spotdiff/error.hpp"
#include "spotdiff/log.hpp"

namespace spotdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'P', 'D', 'F', 'C', 'K', 'P', 'T'};

bool is_trainable(nn::ParamGroup g) {
  return g == nn::ParamGroup::kCrossAttention || g == nn::ParamGroup::kMapper || g == nn::ParamGroup::kExpert ||
         g == nn::ParamGroup::kAligner;
}

void set_requires_grad(const nn::ParamList& params, bool value) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(value);
  }
}

ImageTensor load_main(const Manifest& manifest, int index) {
  return read_png((manifest.root / manifest.samples.at(static_cast<std::size_t>(index)).main_image).string());
}

Tensor stack_rows(const std::vector<Tensor>& rows) { return ops::concat(rows, 0); }

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t count) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = from; i < v.size() && n < count; ++i, ++n) acc += v[i];
  return n ? acc / n : 0.0;
}

StageReport summarize(const std::string& stage, const std::vector<double>& losses) {
  StageReport r;
  r.stage = stage;
  r.steps = static_cast<int>(losses.size());
  r.first_loss = mean_of(losses, 0, 10);
  r.last_loss = mean_of(losses, losses.size() > 10 ? losses.size() - 10 : 0, 10);
  return r;
}

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, T value) {
  buf.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_doubles(std::string& buf, const std::vector<double>& v) {
  buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

}  // namespace

void TextImageHeads::collect(nn::ParamList& out) const {
  image.collect(out, "heads.image", nn::ParamGroup::kHeads);
  text.collect(out, "heads.text", nn::ParamGroup::kHeads);
}

ModelStack ModelStack::create(const Config& config) {
  ModelStack s;
  s.config = config;
  Rng root(config.get_u64("seed"));
  Rng enc_rng = root.fork(), map_rng = root.fork(), pose_rng = root.fork(), bg_rng = root.fork(),
      align_rng = root.fork(), text_rng = root.fork(), den_rng = root.fork(), head_rng = root.fork();

  s.encoder = EncoderModel(EncoderConfig::from(config), enc_rng);
  s.mapper = MapperModel(MapperConfig::from(config), map_rng);
  const ExpertConfig ec = ExpertConfig::from(config);
  s.pose_expert = ExpertModel(NuisanceFactor::kPose, ec, pose_rng);
  s.background_expert = ExpertModel(NuisanceFactor::kBackground, ec, bg_rng);
  s.aligner = AlignmentModel(AlignmentConfig::from(config), align_rng);

  s.templates = default_template_bank();
  std::vector<std::string> subjects(kShapeFamilies.begin(), kShapeFamilies.end());
  s.text_encoder = TextEncoderModel(Lexicon::build(s.templates, subjects), config.get_int("features.d_text"),
                                    config.get_int("text.mlp_hidden"), text_rng);
  s.denoiser = DenoiserModel(DenoiserConfig::from(config), den_rng);

  const int head_dim = config.get_int("heads.dim");
  if (head_dim < 1) throw ConfigError("heads.dim must be positive");
  s.heads.image = nn::Linear(config.get_int("features.d_enc"), head_dim, true, head_rng);
  s.heads.text = nn::Linear(config.get_int("features.d_text"), head_dim, true, head_rng);

  s.schedule = build_schedule(config);
  s.codec = LatentCodec::from(config);
  s.decouple = DecoupleOptions::from(config);
  if (config.get_int("sampler.steps") > s.schedule.T) throw ConfigError("sampler.steps exceeds schedule.T");
  parse_sampler_kind(config.get_string("sampler.kind"));
  return s;
}

ModelStack ModelStack::clone() const {
  ModelStack copy = create(config);
  const nn::ParamList from = parameters(), to = copy.parameters();
  nn::copy_values(from, to);
  for (std::size_t i = 0; i < from.size(); ++i) {
    Tensor t = to[i].tensor;
    t.set_requires_grad(from[i].tensor.requires_grad());
  }
  copy.decouple = decouple;
  return copy;
}

nn::ParamList ModelStack::parameters() const {
  nn::ParamList out = encoder.parameters();
  auto append = [&](const nn::ParamList& more) { out.insert(out.end(), more.begin(), more.end()); };
  append(mapper.parameters());
  append(pose_expert.parameters());
  append(background_expert.parameters());
  append(aligner.parameters());
  append(text_encoder.parameters());
  append(denoiser.parameters());
  heads.collect(out);
  std::set<std::string> names;
  std::set<const detail::Node*> nodes;
  for (const auto& p : out) {
    if (!names.insert(p.name).second || !nodes.insert(p.tensor.node()).second) {
      throw ConfigError("parameter registered twice: " + p.name);
    }
  }
  return out;
}

nn::ParamList trainable_parameters(const ModelStack& stack) {
  for (const auto& p : stack.denoiser.parameters()) {
    if (p.group != nn::ParamGroup::kCrossAttention && p.group != nn::ParamGroup::kDenoiserOther) {
      throw ConfigError("denoiser parameter " + p.name + " carries no denoiser group tag");
    }
  }
  nn::ParamList out;
  for (const auto& p : stack.parameters())
    if (is_trainable(p.group)) out.push_back(p);
  return out;
}

nn::ParamList frozen_parameters(const ModelStack& stack) {
  nn::ParamList out;
  for (const auto& p : stack.parameters())
    if (!is_trainable(p.group)) out.push_back(p);
  return out;
}

TrainConfig TrainConfig::from(const Config& config) {
  TrainConfig c;
  c.batch_size = config.get_int("train.batch_size");
  c.base_lr = config.get_double("train.base_lr");
  c.weight_decay = config.get_double("train.weight_decay");
  c.beta1 = config.get_double("train.beta1");
  c.beta2 = config.get_double("train.beta2");
  c.lambda1 = config.get_double("loss.lambda1");
  c.lambda2 = config.get_double("loss.lambda2");
  c.steps = config.get_int("train.steps");
  c.seed = config.get_u64("seed");
  const std::string flow = config.get_string("train.gradient_flow");
  if (flow == "detached") {
    c.flow = GradientFlow::kDetached;
  } else if (flow == "full") {
    c.flow = GradientFlow::kFull;
  } else {
    throw ConfigError("unknown train.gradient_flow '" + flow + "' (expected detached|full)");
  }
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.lambda1 < 0.0 || c.lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
  if (!(c.base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
  if (c.steps < 0) throw ConfigError("train.steps must be >= 0");
  return c;
}

AdamW::AdamW(nn::ParamList params, double lr, double beta1, double beta2, double weight_decay, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    const bool has = p.has_grad();
    auto w = p.mutable_data();
    std::span<double> g = has ? p.mutable_grad() : std::span<double>();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      w[j] -= lr_ * ((m[j] / c1) / (std::sqrt(v[j] / c2) + eps_) + weight_decay_ * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double AdamW::grad_norm() const {
  double acc = 0.0;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) acc += g * g;
  }
  return std::sqrt(acc);
}

void AdamW::set_state(int t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw IntegrityError("optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::size_t>(params_[i].tensor.numel());
    if (m[i].size() != n || v[i].size() != n) throw IntegrityError("optimizer moment size mismatch for " + params_[i].name);
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

PipelineLosses forward_pipeline(std::span<const CorpusSample> batch, const ModelStack& stack, const TrainConfig& config,
                                Rng& rng, bool training) {
  if (batch.empty()) throw InputError("forward_pipeline: empty batch");
  const int b = static_cast<int>(batch.size());
  const bool detached = config.flow == GradientFlow::kDetached;
  const DecoupleOptions& dopt = stack.decouple;

  std::vector<ImageTensor> mains;
  for (const CorpusSample& s : batch) mains.push_back(s.main_image);
  const Tensor images = to_batch(mains);

  Tensor raw;
  {
    NoGradGuard no_grad;
    raw = stack.encoder.forward(images);
  }
  Rng* drop = training ? &rng : nullptr;
  const Tensor mapped = stack.mapper.forward(raw, drop, training);
  const int d_main = mapped.dim(2);
  const Tensor rows = mapped.reshape({b * kNumLayers, d_main});
  // Experts read the mapper without dropout; only the decoupled rows carry it.
  const Tensor clean = training ? stack.mapper.forward(raw, nullptr, false).reshape({b * kNumLayers, d_main}) : rows;
  const Tensor expert_in = detached ? clean.detach() : clean;

  PipelineLosses out;
  Tensor pose_pred, bg_pred, pose_truth, bg_truth;
  if (dopt.use_pose) {
    pose_pred = stack.pose_expert.forward(expert_in, drop, training);
    std::vector<Tensor> truth;
    for (const CorpusSample& s : batch) {
      truth.push_back(ground_truth_features(NuisanceFactor::kPose, s.pose_variants, stack.encoder).layers.tensor());
    }
    pose_truth = stack_rows(truth);
  }
  if (dopt.use_background) {
    bg_pred = stack.background_expert.forward(expert_in, drop, training);
    std::vector<Tensor> truth;
    for (const CorpusSample& s : batch) {
      truth.push_back(ground_truth_features(NuisanceFactor::kBackground, std::span<const ImageTensor>(&s.background_image, 1),
                                            stack.encoder)
                          .layers.tensor());
    }
    bg_truth = stack_rows(truth);
  }
  out.l1 = alignment_loss_rows(pose_pred, pose_truth, bg_pred, bg_truth, &out.zero_rows);

  const Tensor pose_dir = pose_pred.defined() && detached ? pose_pred.detach() : pose_pred;
  const Tensor bg_dir = bg_pred.defined() && detached ? bg_pred.detach() : bg_pred;
  const Tensor f_rows = decouple_rows(rows, pose_dir, bg_dir, dopt);
  out.f_main = f_rows.reshape({b, kNumLayers, d_main});

  const Tensor tokens = stack.aligner.forward(f_rows);
  std::vector<ConditionEmbedding> conds;
  for (int i = 0; i < b; ++i) {
    const PromptTemplate& prompt = sample_template(stack.templates, rng);
    conds.push_back(build_condition(prompt, ops::slice(tokens, 0, i * kNumLayers, kNumLayers), stack.text_encoder));
  }
  const ConditionBatch condition = ConditionBatch::stack(conds);

  const Tensor z0 = stack.codec.encode(images);
  std::vector<int> t(static_cast<std::size_t>(b));
  for (int& ti : t) ti = rng.uniform_int(1, stack.schedule.T);
  const Tensor eps = Tensor::from(z0.shape(), rng.normal_vector(static_cast<std::size_t>(z0.numel())));
  out.ldm = ldm_loss(z0, t, eps, condition, stack.denoiser, stack.schedule);

  {
    NoGradGuard no_grad;
    out.norm_term = ops::scale(ops::abs_sum(out.f_main), 1.0 / b);
  }
  out.l2 = l2_objective(out.ldm, out.f_main, config.lambda1);
  out.total = total_objective(out.l2, out.l1, config.lambda2);
  return out;
}

TrainRecord train_step(std::span<const CorpusSample> batch, ModelStack& stack, AdamW& optimizer,
                       const TrainConfig& config, Rng& rng, int step) {
  optimizer.zero_grad();
  PipelineLosses losses = forward_pipeline(batch, stack, config, rng, true);
  TrainRecord rec;
  rec.step = step;
  rec.l1 = losses.l1.item();
  rec.ldm = losses.ldm.item();
  rec.norm_term = losses.norm_term.item();
  rec.l2 = losses.l2.item();
  rec.total = losses.total.item();
  rec.zero_rows = losses.zero_rows;
  if (!std::isfinite(rec.total)) {
    throw NumericalError("non-finite loss; record: " + TrainLog::format(rec));
  }
  losses.total.backward();
  rec.grad_norm = optimizer.grad_norm();
  if (!std::isfinite(rec.grad_norm)) {
    throw NumericalError("non-finite gradient; record: " + TrainLog::format(rec));
  }
  optimizer.step();
  return rec;
}

void TrainLog::append(const TrainRecord& record) {
  if (!records_.empty() && record.step <= records_.back().step) {
    throw InputError("TrainLog is append-only with increasing steps");
  }
  records_.push_back(record);
}

std::string TrainLog::header() { return "step,l1,ldm,norm_l1,l2,total,grad_norm,zero_rows"; }

std::string TrainLog::format(const TrainRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d", r.step, r.l1, r.ldm, r.norm_term, r.l2,
                r.total, r.grad_norm, r.zero_rows);
  return buf;
}

void TrainLog::write_csv(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << header() << '\n';
  for (const auto& r : records_) out << format(r) << '\n';
}

TrainLog TrainLog::read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != header()) throw InputError("unexpected train log header in " + path.string());
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrainRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%d", &r.step, &r.l1, &r.ldm, &r.norm_term, &r.l2,
                    &r.total, &r.grad_norm, &r.zero_rows) != 8) {
      throw InputError("malformed train log line: " + line);
    }
    log.append(r);
  }
  return log;
}

Tensor decoupled_features(const ModelStack& stack, std::span<const ImageTensor> images, Tensor* raw) {
  NoGradGuard no_grad;
  for (const ImageTensor& img : images) img.validate();
  const Tensor mapped = stack.mapper.forward(stack.encoder.forward(to_batch(images)), nullptr, false);
  const int b = mapped.dim(0), d = mapped.dim(2);
  const Tensor rows = mapped.reshape({b * kNumLayers, d});
  const DecoupleOptions& dopt = stack.decouple;
  const Tensor pose = dopt.use_pose ? stack.pose_expert.forward(rows, nullptr, false) : Tensor();
  const Tensor bg = dopt.use_background ? stack.background_expert.forward(rows, nullptr, false) : Tensor();
  if (raw) *raw = mapped;
  return decouple_rows(rows, pose, bg, dopt).reshape({b, kNumLayers, d});
}

ConditionEmbedding image_condition(const ModelStack& stack, const ImageTensor& reference, const PromptTemplate& prompt) {
  NoGradGuard no_grad;
  const Tensor f = decoupled_features(stack, std::span<const ImageTensor>(&reference, 1));
  const Tensor tokens = stack.aligner.forward(f.reshape({kNumLayers, f.dim(2)}));
  return build_condition(prompt, tokens, stack.text_encoder);
}

Tensor text_embedding(const ModelStack& stack, std::span<const std::string> tokens) {
  Tensor rows;
  {
    NoGradGuard no_grad;
    rows = stack.text_encoder.encode(stack.text_encoder.embed(tokens));
  }
  const int m = rows.dim(0);
  const Tensor pooled = ops::matmul(Tensor::full({1, m}, 1.0 / m), rows);
  return stack.heads.text.forward(pooled);
}

Tensor image_embedding(const ModelStack& stack, std::span<const ImageTensor> images) {
  Tensor top;
  {
    NoGradGuard no_grad;
    const Tensor f = stack.encoder.forward(to_batch(images));
    top = ops::slice(f, 1, kNumLayers - 1, 1).reshape({f.dim(0), f.dim(2)});
  }
  return stack.heads.image.forward(top);
}

StageReport pretrain_encoder(ModelStack& stack, const Manifest& manifest, Rng& rng) {
  const Config& cfg = stack.config;
  const int steps = cfg.get_int("encoder.pretrain_steps");
  const int batch = cfg.get_int("encoder.pretrain_batch");
  const double lr = cfg.get_double("encoder.pretrain_lr");
  if (manifest.samples.empty()) throw InputError("pretrain_encoder: corpus has no samples");
  std::map<int, int> id_class;
  for (int id : manifest.train_identities) id_class.emplace(id, static_cast<int>(id_class.size()));
  const int d = stack.encoder.config().d_enc * kNumLayers;
  Rng head_rng = rng.fork();
  nn::Linear id_head(d, static_cast<int>(id_class.size()), true, head_rng);
  nn::Linear bg_head(d, static_cast<int>(manifest.backgrounds.size()), true, head_rng);
  nn::Linear pose_head(d, static_cast<int>(manifest.poses.size()), true, head_rng);

  nn::ParamList params = stack.encoder.parameters();
  set_requires_grad(params, true);
  id_head.collect(params, "tmp.id", nn::ParamGroup::kHeads);
  bg_head.collect(params, "tmp.bg", nn::ParamGroup::kHeads);
  pose_head.collect(params, "tmp.pose", nn::ParamGroup::kHeads);
  AdamW opt(params, lr, 0.9, 0.999, 0.0);

  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    std::vector<ImageTensor> imgs;
    std::vector<int> ids, bgs, poses;
    for (int i = 0; i < batch; ++i) {
      const int idx = rng.uniform_int(0, static_cast<int>(manifest.samples.size()) - 1);
      const SampleRecord& r = manifest.samples[static_cast<std::size_t>(idx)];
      imgs.push_back(load_main(manifest, idx));
      ids.push_back(id_class.at(r.identity));
      bgs.push_back(r.background);
      poses.push_back(r.pose);
    }
    opt.zero_grad();
    const Tensor f = stack.encoder.forward(to_batch(imgs)).reshape({batch, d});
    Tensor loss = ops::add(ops::add(ops::cross_entropy(id_head.forward(f), ids), ops::cross_entropy(bg_head.forward(f), bgs)),
                           ops::cross_entropy(pose_head.forward(f), poses));
    losses.push_back(loss.item());
    if (!std::isfinite(losses.back())) throw NumericalError("encoder pretraining diverged at step " + std::to_string(s + 1));
    loss.backward();
    opt.step();
    if ((s + 1) % 100 == 0) log_info("encoder step " + std::to_string(s + 1) + " loss " + std::to_string(loss.item()));
  }
  set_requires_grad(stack.encoder.parameters(), false);
  return summarize("encoder", losses);
}

StageReport pretrain_backbone(ModelStack& stack, const Manifest& manifest, Rng& rng, std::span<const int> sample_indices) {
  const Config& cfg = stack.config;
  const int steps = cfg.get_int("backbone.pretrain_steps");
  const int batch = cfg.get_int("backbone.batch_size");
  const double lr = cfg.get_double("backbone.lr");
  std::vector<int> pool(sample_indices.begin(), sample_indices.end());
  if (pool.empty()) {
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) pool.push_back(static_cast<int>(i));
  }
  if (pool.empty()) throw InputError("pretrain_backbone: corpus has no samples");
  const nn::ParamList params = stack.denoiser.parameters();
  set_requires_grad(params, true);
  AdamW opt(params, lr, 0.9, 0.999, cfg.get_double("train.weight_decay"));

  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    std::vector<ImageTensor> imgs;
    std::vector<ConditionEmbedding> conds;
    for (int i = 0; i < batch; ++i) {
      const int idx = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      imgs.push_back(load_main(manifest, idx));
      NoGradGuard no_grad;
      const PromptTemplate& prompt = sample_template(stack.templates, rng);
      conds.push_back(build_text_condition(prompt, manifest.token(manifest.samples[static_cast<std::size_t>(idx)].identity),
                                           stack.text_encoder));
    }
    const Tensor z0 = stack.codec.encode(to_batch(imgs));
    std::vector<int> t(static_cast<std::size_t>(batch));
    for (int& ti : t) ti = rng.uniform_int(1, stack.schedule.T);
    const Tensor eps = Tensor::from(z0.shape(), rng.normal_vector(static_cast<std::size_t>(z0.numel())));
    opt.zero_grad();
    Tensor loss = ldm_loss(z0, t, eps, ConditionBatch::stack(conds), stack.denoiser, stack.schedule);
    losses.push_back(loss.item());
    if (!std::isfinite(losses.back())) throw NumericalError("backbone pretraining diverged at step " + std::to_string(s + 1));
    loss.backward();
    opt.step();
    if ((s + 1) % 100 == 0) log_info("backbone step " + std::to_string(s + 1) + " loss " + std::to_string(loss.item()));
  }
  return summarize("backbone", losses);
}

StageReport train_heads(ModelStack& stack, const Manifest& manifest, Rng& rng) {
  const Config& cfg = stack.config;
  const int steps = cfg.get_int("heads.steps");
  const double lr = cfg.get_double("heads.lr");
  constexpr int kBatch = 16;
  constexpr double kTemperature = 10.0;
  if (manifest.samples.empty()) throw InputError("train_heads: corpus has no samples");
  std::set<int> family_set;
  for (const Identity& id : manifest.identities) family_set.insert(id.shape);
  const std::vector<int> families(family_set.begin(), family_set.end());
  std::map<int, int> family_class;
  for (std::size_t i = 0; i < families.size(); ++i) family_class[families[i]] = static_cast<int>(i);

  nn::ParamList params;
  stack.heads.collect(params);
  set_requires_grad(params, true);
  AdamW opt(params, lr, 0.9, 0.999, 0.0);
  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    std::vector<ImageTensor> imgs;
    std::vector<int> labels;
    for (int i = 0; i < kBatch; ++i) {
      const int idx = rng.uniform_int(0, static_cast<int>(manifest.samples.size()) - 1);
      imgs.push_back(load_main(manifest, idx));
      labels.push_back(family_class.at(manifest.identities[manifest.samples[static_cast<std::size_t>(idx)].identity].shape));
    }
    const PromptTemplate& prompt = sample_template(stack.templates, rng);
    opt.zero_grad();
    std::vector<Tensor> text_rows;
    for (int f : families) {
      std::vector<std::string> toks = prompt.tokens();
      toks[prompt.placeholder_index()] = kShapeFamilies[f];
      text_rows.push_back(text_embedding(stack, toks));
    }
    const Tensor text = ops::normalize_rows(ops::concat(text_rows, 0));
    const Tensor image = ops::normalize_rows(image_embedding(stack, imgs));
    const Tensor logits = ops::scale(ops::matmul(image, ops::transpose_last2(text.reshape({1, text.dim(0), text.dim(1)}))
                                                           .reshape({text.dim(1), text.dim(0)})),
                                     kTemperature);
    Tensor loss = ops::cross_entropy(logits, labels);
    losses.push_back(loss.item());
    loss.backward();
    opt.step();
  }
  set_requires_grad(params, false);
  return summarize("heads", losses);
}

void save_checkpoint(const fs::path& path, const ModelStack& stack, const TrainState& state) {
  json header;
  header["config"] = stack.config.to_string();
  header["step"] = state.step;
  header["stage"] = state.stage;
  header["rng"] = state.rng.state();
  std::string payload;
  const nn::ParamList params = stack.parameters();
  for (const auto& p : params) {
    header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    put_doubles(payload, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  }
  header["adam"]["t"] = state.optimizer.t();
  header["adam"]["names"] = json::array();
  for (std::size_t i = 0; i < state.optimizer.params().size(); ++i) {
    header["adam"]["names"].push_back(state.optimizer.params()[i].name);
    put_doubles(payload, state.optimizer.first_moment()[i]);
    put_doubles(payload, state.optimizer.second_moment()[i]);
  }
  const std::string header_text = header.dump();

  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, kCheckpointSchema);
  put<std::uint64_t>(buf, header_text.size());
  buf += header_text;
  buf += payload;
  put<std::uint64_t>(buf, fnv1a(buf.data(), buf.size()));

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw PersistenceError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw PersistenceError("cannot publish checkpoint " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw PersistenceError("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot read checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t kFixed = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (buf.size() < kFixed + sizeof(std::uint64_t) || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError("not a checkpoint file: " + path.string());
  }
  std::uint32_t schema;
  std::memcpy(&schema, buf.data() + sizeof kMagic, sizeof schema);
  if (schema != kCheckpointSchema) {
    throw VersioningError("checkpoint schema " + std::to_string(schema) + " (expected " +
                          std::to_string(kCheckpointSchema) + ")");
  }
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof stored, sizeof stored);
  if (fnv1a(buf.data(), buf.size() - sizeof stored) != stored) {
    throw IntegrityError("checkpoint checksum mismatch: " + path.string());
  }
  std::uint64_t header_len;
  std::memcpy(&header_len, buf.data() + sizeof kMagic + sizeof schema, sizeof header_len);
  if (header_len > buf.size() - kFixed - sizeof stored) throw IntegrityError("checkpoint header overruns the file");

  Checkpoint ck;
  ck.schema = static_cast<int>(schema);
  std::size_t offset = kFixed + header_len;
  const std::size_t end = buf.size() - sizeof stored;
  auto take = [&](std::size_t n) {
    if (offset + n * sizeof(double) > end) throw IntegrityError("checkpoint payload is truncated");
    std::vector<double> v(n);
    std::memcpy(v.data(), buf.data() + offset, n * sizeof(double));
    offset += n * sizeof(double);
    return v;
  };
  try {
    const json header = json::parse(buf.substr(kFixed, header_len));
    ck.config_text = header.at("config").get<std::string>();
    ck.step = header.at("step").get<int>();
    ck.stage = header.at("stage").get<std::string>();
    ck.rng_state = header.at("rng").get<std::string>();
    for (const json& e : header.at("params")) {
      CheckpointEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<Shape>();
      entry.values = take(static_cast<std::size_t>(numel(entry.shape)));
      ck.params.push_back(std::move(entry));
    }
    ck.adam_t = header.at("adam").at("t").get<int>();
    ck.adam_names = header.at("adam").at("names").get<std::vector<std::string>>();
    for (const std::string& name : ck.adam_names) {
      auto it = std::find_if(ck.params.begin(), ck.params.end(), [&](const CheckpointEntry& e) { return e.name == name; });
      if (it == ck.params.end()) throw IntegrityError("optimizer state names an unknown parameter " + name);
      ck.adam_m.push_back(take(it->values.size()));
      ck.adam_v.push_back(take(it->values.size()));
    }
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is malformed: ") + e.what());
  }
  if (offset != end) throw IntegrityError("checkpoint payload has trailing bytes");
  return ck;
}

void restore_checkpoint(const Checkpoint& ck, ModelStack& stack, TrainState* state) {
  const nn::ParamList params = stack.parameters();
  if (params.size() != ck.params.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(ck.params.size()) + " parameters, model has " +
                         std::to_string(params.size()));
  }
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.params) by_name[e.name] = &e;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IntegrityError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) throw IntegrityError("shape mismatch for parameter " + p.name);
    Tensor t = p.tensor;
    std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_data().begin());
  }
  if (!state) return;
  state->step = ck.step;
  state->stage = ck.stage;
  state->rng.set_state(ck.rng_state);
  const nn::ParamList& opt_params = state->optimizer.params();
  if (opt_params.size() != ck.adam_names.size()) throw IntegrityError("optimizer parameter count mismatch");
  for (std::size_t i = 0; i < opt_params.size(); ++i) {
    if (opt_params[i].name != ck.adam_names[i]) throw IntegrityError("optimizer parameter order mismatch");
  }
  state->optimizer.set_state(ck.adam_t, ck.adam_m, ck.adam_v);
}

ModelStack load_stack(const fs::path& path, TrainState* state) {
  const Checkpoint ck = read_checkpoint(path);
  ModelStack stack = ModelStack::create(Config::parse(ck.config_text));
  set_requires_grad(stack.encoder.parameters(), false);
  nn::ParamList heads;
  stack.heads.collect(heads);
  set_requires_grad(heads, false);
  if (state) {
    const TrainConfig tc = TrainConfig::from(stack.config);
    state->optimizer = AdamW(trainable_parameters(stack), tc.lr(), tc.beta1, tc.beta2, tc.weight_decay);
  }
  restore_checkpoint(ck, stack, state);
  return stack;
}

SpotDiffTrainer::SpotDiffTrainer(ModelStack& stack, const Manifest& manifest, const TrainConfig& config)
    : stack_(stack), manifest_(manifest), config_(config) {
  if (manifest.samples.empty()) throw InputError("SpotDiffTrainer: corpus has no samples");
  set_requires_grad(frozen_parameters(stack), false);
  const nn::ParamList trainable = trainable_parameters(stack);
  set_requires_grad(trainable, true);
  state_.rng = Rng(config.seed ^ 0x5350445446ULL);
  state_.optimizer = AdamW(trainable, config.lr(), config.beta1, config.beta2, config.weight_decay);
}

TrainRecord SpotDiffTrainer::step() {
  std::vector<CorpusSample> batch;
  for (int i = 0; i < config_.batch_size; ++i) {
    batch.push_back(load_sample(manifest_, state_.rng.uniform_int(0, static_cast<int>(manifest_.samples.size()) - 1)));
  }
  const auto start = std::chrono::steady_clock::now();
  TrainRecord rec = train_step(batch, stack_, state_.optimizer, config_, state_.rng, state_.step + 1);
  timings_.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  state_.step = rec.step;
  log_.append(rec);
  if (rec.step % 50 == 0) log_info("spotdiff step " + std::to_string(rec.step) + " loss " + std::to_string(rec.total));
  return rec;
}

void SpotDiffTrainer::run(int steps) {
  for (int i = 0; i < steps; ++i) step();
}

void SpotDiffTrainer::resume(const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.stage != state_.stage) throw IntegrityError("checkpoint stage '" + ck.stage + "' cannot resume '" + state_.stage + "'");
  restore_checkpoint(ck, stack_, &state_);
}

}  // namespace spotdiff
