#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mposm/autograd.hpp"
#include "mposm/corpus.hpp"
#include "mposm/nn.hpp"

namespace mposm {

using ad::Expr;
using ad::Graph;
using ad::Matrix;

enum class ContextKind { full, width };
enum class EmissionKind { feedforward, bayes_tied };
enum class ModelVariant { standard, word_variant, mlmp_pretrain };

struct ContextSpec {
  ContextKind kind = ContextKind::full;
  int width = 1;  // used when kind == width

  static ContextSpec parse(const std::string& s);  // "full" or "width:K" / "width=K"
  std::string to_string() const;
  bool operator==(const ContextSpec&) const = default;
};

EmissionKind parse_emission(const std::string& s);
std::string to_string(EmissionKind e);
ModelVariant parse_model_variant(const std::string& s);
std::string to_string(ModelVariant v);

struct ModelConfig {
  int n_tags = 45;
  int word_emb_dim = 100;
  int pos_emb_dim = 200;
  int char_emb_dim = 100;
  int hidden_dim = 128;
  int char_hidden_dim = 0;  // per direction; 0 means hidden_dim / 2
  double mask_rate = 0.15;
  double gumbel_tau = 2.0;
  double dropout = 0.5;
  ContextSpec context;
  EmissionKind emission = EmissionKind::bayes_tied;
  ModelVariant variant = ModelVariant::standard;
  bool use_pretrained_emb = false;
  bool use_feature_file = false;
  int feature_dim = 0;
  int local_predictor_layers = 1;

  int char_hidden() const { return char_hidden_dim > 0 ? char_hidden_dim : hidden_dim / 2; }
  bool tie_output_embeddings() const { return use_pretrained_emb; }
  // Empty when valid; otherwise one message per offending field.
  std::vector<std::string> validate() const;
  void check() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Pretrained-embedding setup: embedding width taken from the file, a
// two-layer local predictor, and a feedforward emission head whose output
// layer is tied to the input embeddings.
ModelConfig with_pretrained_defaults(ModelConfig config, std::size_t embedding_dim);

using MaskPattern = std::vector<unsigned char>;  // per position, 1 = masked

// Each position masked independently with probability `rate`; when none is
// selected one uniform position is forced.
MaskPattern sample_mask(std::size_t length, double rate, Rng& rng);

// Standard Gumbel noise g = -log(-log(u)), u clamped to (eps, 1 - eps).
Matrix sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng);
inline constexpr double kGumbelEps = 1e-10;

enum class TagSource { local_argmax, reconstruction_argmax };

struct TagAssignment {
  std::vector<std::vector<int>> tags;
  TagSource source = TagSource::local_argmax;

  std::vector<int> flat() const;
};

// A corpus mapped onto a model's vocabulary. Word types are the local
// predictor's unit: ids below |V| are vocabulary words; out-of-vocabulary
// strings get their own types (word embedding = unk, characters = raw string).
struct EncodedCorpus {
  std::vector<std::vector<int>> word_ids;
  std::vector<std::vector<int>> type_ids;
  std::vector<std::string> extra_types;  // type id = |V| + 1 + index
  const FeatureFile* features = nullptr;

  std::size_t size() const { return word_ids.size(); }
};

// Stochastic inputs of one optimization step. Gumbel noise is laid out one
// column per real token, sentences concatenated in batch order.
struct StepInputs {
  std::vector<MaskPattern> masks;
  Matrix gumbel_noise;  // empty: plain argmax, no noise
  bool relaxed = false;  // forward with the soft sample (gradient checking)
  bool dropout = false;
  Rng* dropout_rng = nullptr;
};

struct ForwardResult {
  Expr loss;               // mean negative log-likelihood over masked positions
  Expr masked_logprob;     // 1 x M, log P(x_j | C_j)
  Expr tag_logprob;        // n_tags x M, log P(z_j | C_j); invalid for MLMP
  std::vector<std::pair<std::size_t, std::size_t>> masked;  // (batch slot, position)
};

class Model {
 public:
  Model(ModelConfig config, Vocabulary vocab, Rng& init_rng,
        const EmbeddingTable* pretrained = nullptr);
  // Constructs with uninitialized (zero) parameters, for loading.
  Model(ModelConfig config, Vocabulary vocab);
  Model(const Model& other);
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }
  int n_tags() const { return config_.n_tags; }

  EncodedCorpus encode(const Corpus& corpus, const FeatureFile* features = nullptr) const;

  StepInputs sample_step_inputs(const EncodedCorpus& data, std::span<const std::size_t> batch,
                                Rng& rng, bool train) const;

  ForwardResult forward(Graph& g, const EncodedCorpus& data, std::span<const std::size_t> batch,
                        const StepInputs& inputs);

  // Word representations w_i (word embedding or feature vector, then the
  // character encoder's final forward and backward states), no dropout.
  Matrix encode_words(const EncodedCorpus& data, std::size_t sentence);
  Matrix local_logits(const EncodedCorpus& data, std::size_t sentence);
  // P(z | x) over the vocabulary, n_tags x |V|.
  Matrix local_probability_table();
  // P(x | z) over the vocabulary, n_tags x |V| (feedforward adds the unk column).
  Matrix emission_table();
  // P(z_j | C_j) at masked positions for a given tag sequence; n_tags x M.
  Matrix reconstruct_tag_distribution(std::span<const int> tags, const MaskPattern& mask);
  // log P(x_j | C_j) at masked positions, using plain argmax tags.
  Matrix masked_word_logprob(const EncodedCorpus& data, std::size_t sentence,
                             const MaskPattern& mask);

  TagAssignment predict_tags(const EncodedCorpus& data);

  // Number of times Bayes-tied emission needed smoothing.
  std::size_t smoothing_events() const { return smoothing_events_; }

  // Parameter-name prefixes shared between MLMP pretraining and the full model.
  static bool is_shared_parameter(const std::string& name);

 private:
  void build(Rng* init_rng, const EmbeddingTable* pretrained);
  std::vector<int> type_chars(const EncodedCorpus& data, int type) const;
  int type_word_id(int type) const;

  Expr encode_types(Graph& g, const EncodedCorpus& data, std::span<const int> types);
  Expr local_head(Graph& g, Expr w, const StepInputs* inputs);
  // When valid, `tag_selector` ((n_tags+1) x tokens) satisfies
  // token_embeddings == tag_emb * tag_selector.
  Expr dependency(Graph& g, Expr token_embeddings, Expr tag_selector, std::span<const std::size_t> lengths,
                  std::span<const std::size_t> masked_tokens, const StepInputs* inputs);
  Expr emission_logprob(Graph& g, Expr type_logits, std::size_t n_vocab_types);
  Expr feedforward_emission(Graph& g);

  ModelConfig config_;
  Vocabulary vocab_;
  ad::ParameterSet params_;
  std::vector<std::vector<int>> vocab_chars_;
  nn::BiLstm char_lstm_;
  std::vector<nn::Linear> local_layers_;
  nn::BiLstm dep_lstm_;
  nn::Linear dep_ff_;
  nn::Linear rec_out_;
  nn::Linear emit_hidden_;
  nn::Linear emit_out_;
  nn::Linear mlmp_hidden_;
  nn::Linear mlmp_out_;
  nn::Linear word_mlp_;
  std::size_t smoothing_events_ = 0;
};

// Copies every shared tensor of `from` into `to` (names and shapes must match).
// Returns the number of tensors copied.
std::size_t transplant_shared(const Model& from, Model& to);

}  // namespace mposm
