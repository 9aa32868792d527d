#include "spotdiff/conditioning.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "spotdiff/error.hpp"

namespace spotdiff {

namespace {

const char* const kTemplateBankText =
#include "imagenet_templates.inc"
    ;

std::vector<PromptTemplate> parse_bank(std::istream& in) {
  std::vector<PromptTemplate> bank;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    bank.emplace_back(line);
  }
  return bank;
}

Tensor sinusoidal_positions(int rows, int dim) {
  std::vector<double> v(static_cast<std::size_t>(rows) * dim);
  for (int p = 0; p < rows; ++p)
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
      v[static_cast<std::size_t>(p) * dim + i] = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  return Tensor::from({rows, dim}, std::move(v));
}

}  // namespace

PromptTemplate::PromptTemplate(const std::string& text) {
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    if (tok == "{}" || tok == kPlaceholder) {
      if (placeholder_ >= 0) throw InputError("prompt template has more than one placeholder: " + text);
      placeholder_ = static_cast<int>(tokens_.size());
      tokens_.push_back(kPlaceholder);
    } else {
      if (tok.find("{}") != std::string::npos || tok.find(kPlaceholder) != std::string::npos) {
        throw InputError("placeholder must be a standalone token: " + text);
      }
      tokens_.push_back(tok);
    }
  }
  if (placeholder_ < 0) throw InputError("prompt template has no placeholder: " + text);
}

std::string PromptTemplate::text() const { return fill(kPlaceholder); }

std::string PromptTemplate::fill(const std::string& word) const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i) out += ' ';
    out += static_cast<int>(i) == placeholder_ ? word : tokens_[i];
  }
  return out;
}

std::vector<PromptTemplate> default_template_bank() {
  std::istringstream in(kTemplateBankText);
  return parse_bank(in);
}

std::vector<PromptTemplate> load_template_bank(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot read template bank " + path);
  return parse_bank(in);
}

const PromptTemplate& sample_template(std::span<const PromptTemplate> bank, Rng& rng) {
  if (bank.empty()) throw ConfigError("template bank is empty");
  return bank[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(bank.size()) - 1))];
}

const PromptTemplate& sample_template(std::span<const PromptTemplate> bank, std::uint64_t seed) {
  Rng rng(seed);
  return sample_template(bank, rng);
}

Lexicon Lexicon::build(std::span<const PromptTemplate> bank, std::span<const std::string> subject_tokens) {
  std::set<std::string> words(subject_tokens.begin(), subject_tokens.end());
  for (const PromptTemplate& t : bank) {
    for (std::size_t i = 0; i < t.tokens().size(); ++i) {
      if (static_cast<int>(i) != t.placeholder_index()) words.insert(t.tokens()[i]);
    }
  }
  Lexicon lex;
  int next = 0;
  for (const std::string& w : words) lex.ids_[w] = next++;
  return lex;
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot read lexicon " + path);
  Lexicon lex;
  std::string token;
  int id = 0;
  std::set<int> seen;
  while (in >> token >> id) {
    if (!seen.insert(id).second || !lex.ids_.emplace(token, id).second) {
      throw InputError("lexicon has duplicate entries: " + token);
    }
  }
  for (int i = 0; i < lex.size(); ++i) {
    if (!seen.count(i)) throw InputError("lexicon ids are not contiguous in " + path);
  }
  return lex;
}

void Lexicon::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw PersistenceError("cannot write lexicon " + path);
  for (const auto& [token, id] : ids_) out << token << ' ' << id << '\n';
}

int Lexicon::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw InputError("token '" + token + "' is not in the lexicon");
  return it->second;
}

AlignmentConfig AlignmentConfig::from(const Config& config) {
  AlignmentConfig c;
  c.d_main = config.get_int("features.d_main");
  c.d_text = config.get_int("features.d_text");
  c.hidden = config.get_int("align.hidden");
  c.layers = config.get_int("align.layers");
  if (c.layers < 1) throw ConfigError("align.layers must be >= 1");
  return c;
}

AlignmentModel::AlignmentModel(const AlignmentConfig& config, Rng& rng) : config_(config) {
  std::vector<int> widths{config.d_main};
  for (int i = 0; i + 1 < config.layers; ++i) widths.push_back(config.hidden);
  widths.push_back(config.d_text);
  mlp_ = nn::Mlp(widths, true, 0.0, rng);
}

Tensor AlignmentModel::forward(const Tensor& features) const {
  if (features.dim(-1) != config_.d_main) {
    throw ConfigError("aligner expects vectors of dim " + std::to_string(config_.d_main) + ", got " +
                      shape_str(features.shape()));
  }
  return mlp_.forward(features, nullptr, false);
}

nn::ParamList AlignmentModel::parameters() const {
  nn::ParamList out;
  mlp_.collect(out, "aligner", nn::ParamGroup::kAligner);
  return out;
}

Tensor align_features(const LayerFeatureSet& decoupled, const AlignmentModel& aligner) {
  return aligner.forward(decoupled.tensor());
}

TextEncoderModel::TextEncoderModel(Lexicon lexicon, int d_text, int mlp_hidden, Rng& rng)
    : lexicon_(std::move(lexicon)), d_text_(d_text) {
  if (lexicon_.size() == 0) throw ConfigError("text encoder needs a non-empty lexicon");
  std::vector<double> table(static_cast<std::size_t>(lexicon_.size()) * d_text);
  for (auto& v : table) v = rng.normal();
  table_ = Tensor::from({lexicon_.size(), d_text}, std::move(table));
  norm1_ = nn::LayerNorm(d_text);
  norm2_ = nn::LayerNorm(d_text);
  norm_out_ = nn::LayerNorm(d_text);
  wq_ = nn::Linear(d_text, d_text, false, rng);
  wk_ = nn::Linear(d_text, d_text, false, rng);
  wv_ = nn::Linear(d_text, d_text, false, rng);
  wo_ = nn::Linear(d_text, d_text, false, rng);
  mlp_ = nn::Mlp({d_text, mlp_hidden, d_text}, true, 0.0, rng);
  for (auto& p : parameters()) {
    Tensor t = p.tensor;
    t.set_requires_grad(false);
  }
}

Tensor TextEncoderModel::embed(std::span<const std::string> tokens) const {
  std::vector<double> rows(tokens.size() * static_cast<std::size_t>(d_text_));
  auto table = table_.data();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = lexicon_.id(tokens[i]);
    std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(id) * d_text_, d_text_,
                rows.begin() + static_cast<std::ptrdiff_t>(i) * d_text_);
  }
  return Tensor::from({static_cast<int>(tokens.size()), d_text_}, std::move(rows));
}

Tensor TextEncoderModel::encode(const Tensor& rows) const {
  if (rows.ndim() != 2 || rows.dim(1) != d_text_) {
    throw ConfigError("text encoder expects [M," + std::to_string(d_text_) + "], got " + shape_str(rows.shape()));
  }
  const int m = rows.dim(0);
  Tensor x = ops::add(rows, sinusoidal_positions(m, d_text_));
  Tensor h = norm1_.forward(x).reshape({1, m, d_text_});
  Tensor q = wq_.forward(h), k = wk_.forward(h), v = wv_.forward(h);
  Tensor scores = ops::scale(ops::bmm(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(d_text_)));
  Tensor attn = wo_.forward(ops::bmm(ops::softmax_last(scores), v)).reshape({m, d_text_});
  x = ops::add(x, attn);
  x = ops::add(x, mlp_.forward(norm2_.forward(x), nullptr, false));
  return norm_out_.forward(x);
}

nn::ParamList TextEncoderModel::parameters() const {
  nn::ParamList out;
  const auto g = nn::ParamGroup::kTextEncoder;
  out.push_back({"text.table", table_, g});
  norm1_.collect(out, "text.norm1", g);
  wq_.collect(out, "text.wq", g);
  wk_.collect(out, "text.wk", g);
  wv_.collect(out, "text.wv", g);
  wo_.collect(out, "text.wo", g);
  norm2_.collect(out, "text.norm2", g);
  mlp_.collect(out, "text.mlp", g);
  norm_out_.collect(out, "text.norm_out", g);
  return out;
}

ConditionEmbedding build_condition(const PromptTemplate& prompt, const Tensor& image_tokens,
                                   const TextEncoderModel& text_encoder) {
  if (image_tokens.ndim() != 2 || image_tokens.dim(0) != kNumLayers || image_tokens.dim(1) != text_encoder.dim()) {
    throw ConfigError("image tokens must be [" + std::to_string(kNumLayers) + "," +
                      std::to_string(text_encoder.dim()) + "], got " + shape_str(image_tokens.shape()));
  }
  const auto& toks = prompt.tokens();
  const int ph = prompt.placeholder_index();
  std::vector<std::string> before(toks.begin(), toks.begin() + ph);
  std::vector<std::string> after(toks.begin() + ph + 1, toks.end());
  std::vector<Tensor> parts;
  if (!before.empty()) parts.push_back(text_encoder.embed(before));
  parts.push_back(image_tokens);
  if (!after.empty()) parts.push_back(text_encoder.embed(after));
  return {text_encoder.encode(ops::concat(parts, 0))};
}

ConditionEmbedding build_text_condition(const PromptTemplate& prompt, const std::string& subject_token,
                                        const TextEncoderModel& text_encoder) {
  std::vector<std::string> toks = prompt.tokens();
  toks[prompt.placeholder_index()] = subject_token;
  return {text_encoder.encode(text_encoder.embed(toks))};
}

ConditionBatch ConditionBatch::stack(std::span<const ConditionEmbedding> conditions) {
  if (conditions.empty()) throw ConfigError("ConditionBatch: no conditions");
  int max_len = 0;
  const int d = conditions[0].tokens.dim(1);
  for (const auto& c : conditions) {
    if (c.tokens.dim(1) != d) throw ConfigError("ConditionBatch: condition widths differ");
    max_len = std::max(max_len, c.rows());
  }
  ConditionBatch out;
  std::vector<Tensor> rows;
  for (const auto& c : conditions) {
    Tensor t = c.tokens;
    if (c.rows() < max_len) t = ops::concat({t, Tensor::zeros({max_len - c.rows(), d})}, 0);
    rows.push_back(t.reshape({1, max_len, d}));
    out.lengths.push_back(c.rows());
  }
  out.tokens = ops::concat(rows, 0);
  return out;
}

}  // namespace spotdiff
