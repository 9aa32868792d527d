#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spotdiff/conditioning.hpp"
#include "spotdiff/config.hpp"
#include "spotdiff/corpus.hpp"
#include "spotdiff/diffusion.hpp"
#include "spotdiff/disentangler.hpp"
#include "spotdiff/feature_extraction.hpp"
#include "spotdiff/nn.hpp"
#include "spotdiff/rng.hpp"

namespace spotdiff {

/// Image and text projection heads into a joint space, fitted once after the
/// encoder is frozen and used only for text-image similarity.
struct TextImageHeads {
  nn::Linear image;  // top encoder tap -> joint
  nn::Linear text;   // pooled text encoding -> joint
  void collect(nn::ParamList& out) const;
};

/// Every model of the pipeline plus the fixed pieces built from the config.
class ModelStack {
 public:
  /// Fresh, seeded stack. The lexicon covers the template bank and every
  /// shape-family token.
  static ModelStack create(const Config& config);
  /// Deep copy with independent parameter storage.
  ModelStack clone() const;

  Config config;
  EncoderModel encoder;
  MapperModel mapper;
  ExpertModel pose_expert;
  ExpertModel background_expert;
  AlignmentModel aligner;
  TextEncoderModel text_encoder;
  DenoiserModel denoiser;
  TextImageHeads heads;
  NoiseSchedule schedule;
  LatentCodec codec;
  DecoupleOptions decouple;
  std::vector<PromptTemplate> templates;

  /// Every parameter exactly once; throws ConfigError on duplicate names.
  nn::ParamList parameters() const;
};

/// Denoiser cross-attention, mapper, both experts and the aligner.
nn::ParamList trainable_parameters(const ModelStack& stack);
/// Complement of trainable_parameters within stack.parameters().
nn::ParamList frozen_parameters(const ModelStack& stack);

enum class GradientFlow { kDetached, kFull };

struct TrainConfig {
  int batch_size = 8;
  double base_lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda1 = 0.01;
  double lambda2 = 0.1;
  int steps = 500;
  std::uint64_t seed = 0;
  /// kDetached: experts read detached main features and the projection uses
  /// detached expert outputs, so L1 trains only the experts. kFull keeps
  /// every path differentiable.
  GradientFlow flow = GradientFlow::kDetached;

  double lr() const { return batch_size * base_lr; }
  static TrainConfig from(const Config& config);
};

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(nn::ParamList params, double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8);

  void step();
  void zero_grad();
  /// Root of the summed squared gradients.
  double grad_norm() const;

  const nn::ParamList& params() const { return params_; }
  int t() const { return t_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }
  void set_state(int t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);
  double lr() const { return lr_; }

 private:
  nn::ParamList params_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, weight_decay_ = 0.0, eps_ = 1e-8;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Loss terms of one pipeline evaluation, still attached to the graph.
struct PipelineLosses {
  Tensor l1;         // alignment loss
  Tensor ldm;        // noise-prediction MSE
  Tensor norm_term;  // |F_main|_1 / B, before the lambda1 weight
  Tensor l2;         // ldm + lambda1 * norm_term
  Tensor total;      // l2 + lambda2 * l1
  Tensor f_main;     // decoupled main features [B, 5, d_main]
  int zero_rows = 0;
};

/// encode -> map -> experts -> decouple -> align -> condition -> diffuse.
/// Templates, timesteps, noise and dropout masks are drawn from rng in a
/// fixed order, so a copied rng replays the same evaluation.
PipelineLosses forward_pipeline(std::span<const CorpusSample> batch, const ModelStack& stack, const TrainConfig& config,
                                Rng& rng, bool training);

struct TrainRecord {
  int step = 0;
  double l1 = 0, ldm = 0, norm_term = 0, l2 = 0, total = 0, grad_norm = 0;
  int zero_rows = 0;
};

/// One AdamW update on `optimizer`'s parameters from the gradient of the total
/// loss. Throws NumericalError (carrying the record) on a non-finite loss.
TrainRecord train_step(std::span<const CorpusSample> batch, ModelStack& stack, AdamW& optimizer,
                       const TrainConfig& config, Rng& rng, int step);

/// Append-only per-step record list, serialized as CSV with full precision.
class TrainLog {
 public:
  void append(const TrainRecord& record);
  const std::vector<TrainRecord>& records() const { return records_; }
  static std::string header();
  static std::string format(const TrainRecord& record);
  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);

 private:
  std::vector<TrainRecord> records_;
};

/// Condition for generating from a reference image (eval mode).
ConditionEmbedding image_condition(const ModelStack& stack, const ImageTensor& reference, const PromptTemplate& prompt);

/// Decoupled main features of a batch of images in eval mode, [B, 5, d_main];
/// `raw` receives the pre-decoupling mapper output when non-null.
Tensor decoupled_features(const ModelStack& stack, std::span<const ImageTensor> images, Tensor* raw = nullptr);

/// Joint-space text embedding of a token sequence, [1, heads.dim].
Tensor text_embedding(const ModelStack& stack, std::span<const std::string> tokens);
/// Joint-space image embeddings, [B, heads.dim].
Tensor image_embedding(const ModelStack& stack, std::span<const ImageTensor> images);

struct StageReport {
  std::string stage;
  int steps = 0;
  double first_loss = 0;
  double last_loss = 0;
};

/// Fits the encoder on training-split samples by classifying identity,
/// background and pose from the top tap, then leaves it frozen.
StageReport pretrain_encoder(ModelStack& stack, const Manifest& manifest, Rng& rng);
/// Fits every denoiser parameter on text-only prompts (the template filled
/// with the subject's shape token).
StageReport pretrain_backbone(ModelStack& stack, const Manifest& manifest, Rng& rng,
                              std::span<const int> sample_indices = {});
/// Contrastive fit of the text/image heads on training identities.
StageReport train_heads(ModelStack& stack, const Manifest& manifest, Rng& rng);

/// Mutable training progress saved alongside the parameters.
struct TrainState {
  int step = 0;
  std::string stage = "spotdiff";
  Rng rng;
  AdamW optimizer;
};

inline constexpr int kCheckpointSchema = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  int schema = kCheckpointSchema;
  std::string config_text;
  int step = 0;
  std::string stage;
  std::string rng_state;
  std::vector<CheckpointEntry> params;
  int adam_t = 0;
  std::vector<std::string> adam_names;
  std::vector<std::vector<double>> adam_m, adam_v;
};

/// Binary layout: magic, schema, JSON header, f64 payloads, FNV-1a checksum.
void save_checkpoint(const std::filesystem::path& path, const ModelStack& stack, const TrainState& state);
/// Missing file -> PersistenceError; schema mismatch -> VersioningError;
/// truncation or checksum mismatch -> IntegrityError.
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies parameters (and optimizer/RNG state when `state` is non-null) into
/// an already constructed stack. Name or shape mismatches -> IntegrityError.
void restore_checkpoint(const Checkpoint& checkpoint, ModelStack& stack, TrainState* state);
/// Stack built from the checkpoint's own config, then restored. A non-null
/// `state` gets an optimizer over the trainable parameters before restoring.
ModelStack load_stack(const std::filesystem::path& path, TrainState* state = nullptr);

/// Drives the SpotDiff stage over a corpus: batch drawing, updates, logging.
class SpotDiffTrainer {
 public:
  SpotDiffTrainer(ModelStack& stack, const Manifest& manifest, const TrainConfig& config);

  TrainRecord step();
  void run(int steps);

  TrainState& state() { return state_; }
  const TrainLog& log() const { return log_; }
  /// Wall time per step in milliseconds (kept apart from the log).
  const std::vector<double>& timings() const { return timings_; }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, stack_, state_); }
  /// Restores parameters, optimizer and RNG from a checkpoint of this stage.
  void resume(const std::filesystem::path& path);

 private:
  ModelStack& stack_;
  const Manifest& manifest_;
  TrainConfig config_;
  TrainState state_;
  TrainLog log_;
  std::vector<double> timings_;
};

}  // namespace spotdiff
