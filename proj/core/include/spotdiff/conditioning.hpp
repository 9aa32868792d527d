#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "spotdiff/config.hpp"
#include "spotdiff/feature_extraction.hpp"
#include "spotdiff/nn.hpp"
#include "spotdiff/rng.hpp"

namespace spotdiff {

/// Token that marks where the subject goes in a prompt template.
inline constexpr const char* kPlaceholder = "S*";

/// Whitespace-tokenized prompt with exactly one subject placeholder.
class PromptTemplate {
 public:
  /// Accepts either `S*` or the template-bank spelling `{}` as placeholder.
  explicit PromptTemplate(const std::string& text);

  const std::vector<std::string>& tokens() const { return tokens_; }
  int placeholder_index() const { return placeholder_; }
  std::string text() const;
  /// The prompt with the placeholder replaced by `word`.
  std::string fill(const std::string& word) const;

 private:
  std::vector<std::string> tokens_;
  int placeholder_ = -1;
};

/// The 25 ImageNet prompt templates (compiled-in copy of data/imagenet_templates.txt).
std::vector<PromptTemplate> default_template_bank();
/// One template per non-empty line; `{}` marks the subject.
std::vector<PromptTemplate> load_template_bank(const std::string& path);

const PromptTemplate& sample_template(std::span<const PromptTemplate> bank, Rng& rng);
const PromptTemplate& sample_template(std::span<const PromptTemplate> bank, std::uint64_t seed);

/// Token -> id map over the prompt vocabulary.
class Lexicon {
 public:
  Lexicon() = default;
  /// Every template word plus the subject tokens, ids assigned in sorted order.
  static Lexicon build(std::span<const PromptTemplate> bank, std::span<const std::string> subject_tokens);
  static Lexicon load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  int size() const { return static_cast<int>(ids_.size()); }
  const std::map<std::string, int>& entries() const { return ids_; }
  bool operator==(const Lexicon&) const = default;

 private:
  std::map<std::string, int> ids_;
};

struct AlignmentConfig {
  int d_main = 64;
  int d_text = 64;
  int hidden = 128;
  int layers = 2;

  static AlignmentConfig from(const Config& config);
};

/// Two-layer perceptron from main-feature width to text-embedding width.
class AlignmentModel {
 public:
  AlignmentModel() = default;
  AlignmentModel(const AlignmentConfig& config, Rng& rng);

  Tensor forward(const Tensor& features) const;
  const AlignmentConfig& config() const { return config_; }
  nn::Mlp& mlp() { return mlp_; }
  nn::ParamList parameters() const;

 private:
  AlignmentConfig config_;
  nn::Mlp mlp_;
};

/// [kNumLayers, d_text] aligned image tokens.
Tensor align_features(const LayerFeatureSet& decoupled, const AlignmentModel& aligner);

/// Frozen token embedding + sinusoidal positions + one pre-norm
/// self-attention block + final layer norm.
class TextEncoderModel {
 public:
  TextEncoderModel() = default;
  TextEncoderModel(Lexicon lexicon, int d_text, int mlp_hidden, Rng& rng);

  /// rows [M, d_text] (token embeddings, possibly containing image tokens) -> [M, d_text].
  Tensor encode(const Tensor& rows) const;
  /// Embedding rows for the given tokens (constant).
  Tensor embed(std::span<const std::string> tokens) const;

  int dim() const { return d_text_; }
  const Lexicon& lexicon() const { return lexicon_; }
  nn::ParamList parameters() const;

 private:
  Lexicon lexicon_;
  int d_text_ = 0;
  Tensor table_;  // [V, d_text]
  nn::LayerNorm norm1_, norm2_, norm_out_;
  nn::Linear wq_, wk_, wv_, wo_;
  nn::Mlp mlp_;
};

/// Condition matrix E(c): one row per prompt token after encoding.
struct ConditionEmbedding {
  Tensor tokens;  // [M, d_text]
  int rows() const { return tokens.dim(0); }
};

/// Places the five image tokens at the placeholder position (in layer order)
/// and encodes the whole sequence. Result has (template tokens - 1) + 5 rows.
ConditionEmbedding build_condition(const PromptTemplate& prompt, const Tensor& image_tokens,
                                   const TextEncoderModel& text_encoder);

/// Text-only condition: the placeholder is filled with a lexicon word.
ConditionEmbedding build_text_condition(const PromptTemplate& prompt, const std::string& subject_token,
                                        const TextEncoderModel& text_encoder);

/// Conditions of possibly different lengths, zero-padded to [B, M_max, d]
/// with the true lengths kept for attention masking.
struct ConditionBatch {
  Tensor tokens;
  std::vector<int> lengths;

  static ConditionBatch stack(std::span<const ConditionEmbedding> conditions);
  int batch() const { return tokens.dim(0); }
};

}  // namespace spotdiff
