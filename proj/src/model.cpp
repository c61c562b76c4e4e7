#include "mposm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace mposm {

namespace {

constexpr double kBayesDenominatorFloor = 1e-12;
constexpr double kBayesSmoothing = 1e-10;

int argmax_lowest(const Eigen::Ref<const Eigen::VectorXd>& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);  // first maximum, i.e. lowest index on ties
  return static_cast<int>(best);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ContextSpec ContextSpec::parse(const std::string& s) {
  if (s == "full") return {ContextKind::full, 1};
  for (const char* prefix : {"width:", "width=", "width_"}) {
    if (s.rfind(prefix, 0) == 0) {
      int k = 0;
      try {
        k = std::stoi(s.substr(6));
      } catch (const std::exception&) {
        throw std::invalid_argument(fmt::format("bad context '{}'", s));
      }
      return {ContextKind::width, k};
    }
  }
  throw std::invalid_argument(fmt::format("bad context '{}' (expected full or width:K)", s));
}

std::string ContextSpec::to_string() const {
  return kind == ContextKind::full ? "full" : fmt::format("width:{}", width);
}

EmissionKind parse_emission(const std::string& s) {
  if (s == "feedforward") return EmissionKind::feedforward;
  if (s == "bayes_tied") return EmissionKind::bayes_tied;
  throw std::invalid_argument(fmt::format("unknown emission '{}'", s));
}

std::string to_string(EmissionKind e) {
  return e == EmissionKind::feedforward ? "feedforward" : "bayes_tied";
}

ModelVariant parse_model_variant(const std::string& s) {
  if (s == "standard") return ModelVariant::standard;
  if (s == "word_variant") return ModelVariant::word_variant;
  if (s == "mlmp_pretrain") return ModelVariant::mlmp_pretrain;
  throw std::invalid_argument(fmt::format("unknown model variant '{}'", s));
}

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::standard: return "standard";
    case ModelVariant::word_variant: return "word_variant";
    case ModelVariant::mlmp_pretrain: return "mlmp_pretrain";
  }
  return "?";
}

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errors;
  auto positive = [&](const char* name, int v) {
    if (v <= 0) errors.push_back(fmt::format("model.{} must be positive (got {})", name, v));
  };
  positive("n_tags", n_tags);
  positive("word_emb_dim", word_emb_dim);
  positive("pos_emb_dim", pos_emb_dim);
  positive("char_emb_dim", char_emb_dim);
  positive("hidden_dim", hidden_dim);
  if (char_hidden() <= 0) errors.push_back("model.char_hidden_dim must be positive");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
    errors.push_back(fmt::format("model.mask_rate must lie in (0, 1) (got {})", mask_rate));
  }
  if (!(gumbel_tau > 0.0)) {
    errors.push_back(fmt::format("model.gumbel_tau must be positive (got {})", gumbel_tau));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    errors.push_back(fmt::format("model.dropout must lie in [0, 1) (got {})", dropout));
  }
  if (context.kind == ContextKind::width && context.width < 1) {
    errors.push_back(fmt::format("model.context width must be >= 1 (got {})", context.width));
  }
  if (local_predictor_layers != 1 && local_predictor_layers != 2) {
    errors.push_back("model.local_predictor_layers must be 1 or 2");
  }
  if (use_feature_file && feature_dim <= 0) {
    errors.push_back("model.feature_dim must be positive when model.use_feature_file is set");
  }
  if (use_feature_file && use_pretrained_emb) {
    errors.push_back("model.use_feature_file and model.use_pretrained_emb are exclusive");
  }
  if (emission == EmissionKind::bayes_tied && variant == ModelVariant::word_variant) {
    errors.push_back("model.emission=bayes_tied needs P(z|x), which model.variant=word_variant lacks");
  }
  if (emission == EmissionKind::bayes_tied && use_feature_file) {
    errors.push_back("model.emission=bayes_tied needs a per-type P(z|x); use feedforward with features");
  }
  return errors;
}

void ModelConfig::check() const {
  auto errors = validate();
  if (errors.empty()) return;
  std::string msg = "invalid model configuration:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw std::invalid_argument(msg);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_tags", n_tags},
          {"word_emb_dim", word_emb_dim},
          {"pos_emb_dim", pos_emb_dim},
          {"char_emb_dim", char_emb_dim},
          {"hidden_dim", hidden_dim},
          {"char_hidden_dim", char_hidden_dim},
          {"mask_rate", mask_rate},
          {"gumbel_tau", gumbel_tau},
          {"dropout", dropout},
          {"context", context.to_string()},
          {"emission", mposm::to_string(emission)},
          {"variant", mposm::to_string(variant)},
          {"use_pretrained_emb", use_pretrained_emb},
          {"use_feature_file", use_feature_file},
          {"feature_dim", feature_dim},
          {"local_predictor_layers", local_predictor_layers}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_tags = j.at("n_tags").get<int>();
  c.word_emb_dim = j.at("word_emb_dim").get<int>();
  c.pos_emb_dim = j.at("pos_emb_dim").get<int>();
  c.char_emb_dim = j.at("char_emb_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.char_hidden_dim = j.at("char_hidden_dim").get<int>();
  c.mask_rate = j.at("mask_rate").get<double>();
  c.gumbel_tau = j.at("gumbel_tau").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.context = ContextSpec::parse(j.at("context").get<std::string>());
  c.emission = parse_emission(j.at("emission").get<std::string>());
  c.variant = parse_model_variant(j.at("variant").get<std::string>());
  c.use_pretrained_emb = j.at("use_pretrained_emb").get<bool>();
  c.use_feature_file = j.at("use_feature_file").get<bool>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.local_predictor_layers = j.at("local_predictor_layers").get<int>();
  return c;
}

ModelConfig with_pretrained_defaults(ModelConfig config, std::size_t embedding_dim) {
  config.use_pretrained_emb = true;
  config.word_emb_dim = static_cast<int>(embedding_dim);
  config.local_predictor_layers = 2;
  config.emission = EmissionKind::feedforward;
  return config;
}

// ---------------------------------------------------------------------------
// Sampling

MaskPattern sample_mask(std::size_t length, double rate, Rng& rng) {
  if (length == 0) throw std::invalid_argument("sample_mask: empty sentence");
  MaskPattern m(length, 0);
  std::bernoulli_distribution coin(rate);
  bool any = false;
  for (std::size_t i = 0; i < length; ++i) {
    m[i] = coin(rng) ? 1 : 0;
    any = any || m[i];
  }
  if (!any) {
    std::uniform_int_distribution<std::size_t> pos(0, length - 1);
    m[pos(rng)] = 1;
  }
  return m;
}

Matrix sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix g(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      double u = std::clamp(unit(rng), kGumbelEps, 1.0 - kGumbelEps);
      g(i, j) = -std::log(-std::log(u));
    }
  }
  return g;
}

std::vector<int> TagAssignment::flat() const {
  std::vector<int> out;
  for (const auto& s : tags) out.insert(out.end(), s.begin(), s.end());
  return out;
}

// ---------------------------------------------------------------------------
// Construction

Model::Model(ModelConfig config, Vocabulary vocab, Rng& init_rng, const EmbeddingTable* pretrained)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  build(&init_rng, pretrained);
}

Model::Model(ModelConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  build(nullptr, nullptr);
}

Model::Model(const Model& other)
    : config_(other.config_),
      vocab_(other.vocab_),
      vocab_chars_(other.vocab_chars_),
      char_lstm_(other.char_lstm_),
      local_layers_(other.local_layers_),
      dep_lstm_(other.dep_lstm_),
      dep_ff_(other.dep_ff_),
      rec_out_(other.rec_out_),
      emit_hidden_(other.emit_hidden_),
      emit_out_(other.emit_out_),
      mlmp_hidden_(other.mlmp_hidden_),
      mlmp_out_(other.mlmp_out_),
      word_mlp_(other.word_mlp_),
      smoothing_events_(other.smoothing_events_) {
  for (const auto* p : other.params_.all()) {
    auto& q = params_.add(p->name, p->value.rows(), p->value.cols());
    q.value = p->value;
  }
}

void Model::build(Rng* init_rng, const EmbeddingTable* pretrained) {
  config_.check();
  Rng scratch(0);
  Rng& rng = init_rng ? *init_rng : scratch;
  const auto V1 = static_cast<Eigen::Index>(vocab_.size_with_unk());
  const auto ch = config_.char_hidden();

  vocab_chars_.clear();
  for (const auto& w : vocab_.words()) vocab_chars_.push_back(vocab_.encode_chars(w));

  // Word channel.
  if (!config_.use_feature_file) {
    auto& emb = params_.add("word_emb", config_.word_emb_dim, V1);
    if (pretrained) {
      if (pretrained->vectors.rows() != config_.word_emb_dim || pretrained->vectors.cols() != V1) {
        throw std::invalid_argument("pretrained embedding table does not match the model shape");
      }
      emb.value = pretrained->vectors;
    } else {
      nn::init_normal(emb, 1.0, rng);
    }
  }
  nn::init_normal(params_.add("char_emb", config_.char_emb_dim,
                              static_cast<Eigen::Index>(vocab_.char_size())),
                  1.0, rng);
  char_lstm_ = nn::BiLstm::create(params_, "char_lstm", config_.char_emb_dim, ch, rng);

  const Eigen::Index word_dim =
      (config_.use_feature_file ? config_.feature_dim : config_.word_emb_dim) + 2 * ch;

  // Local predictor (also the word-variant MLP's input).
  if (config_.variant != ModelVariant::word_variant) {
    if (config_.local_predictor_layers == 2) {
      local_layers_.push_back(nn::Linear::create(params_, "local.0", word_dim, config_.hidden_dim, rng));
      local_layers_.push_back(nn::Linear::create(params_, "local.1", config_.hidden_dim, config_.n_tags, rng));
    } else {
      local_layers_.push_back(nn::Linear::create(params_, "local.0", word_dim, config_.n_tags, rng));
    }
  } else {
    word_mlp_ = nn::Linear::create(params_, "word_mlp", word_dim, config_.pos_emb_dim, rng);
  }

  // Tag embeddings; the last column is MASK.
  nn::init_normal(params_.add("tag_emb", config_.pos_emb_dim, config_.n_tags + 1), 1.0, rng);

  Eigen::Index dep_dim = 0;
  if (config_.context.kind == ContextKind::full) {
    dep_lstm_ = nn::BiLstm::create(params_, "dep.lstm", config_.pos_emb_dim, config_.hidden_dim, rng);
    dep_dim = dep_lstm_.output_dim();
  } else {
    dep_ff_ = nn::Linear::create(params_, "dep.ff", 2 * config_.context.width * config_.pos_emb_dim,
                                 config_.hidden_dim, rng);
    dep_dim = config_.hidden_dim;
  }

  if (config_.variant == ModelVariant::mlmp_pretrain) {
    mlmp_hidden_ = nn::Linear::create(params_, "mlmp.hidden", dep_dim, config_.word_emb_dim, rng);
    if (config_.tie_output_embeddings()) {
      nn::init_uniform(params_.add("mlmp.out.bias", V1, 1), 1.0 / std::sqrt(config_.word_emb_dim), rng);
      mlmp_out_ = {"mlmp.out", config_.word_emb_dim, V1};
    } else {
      mlmp_out_ = nn::Linear::create(params_, "mlmp.out", config_.word_emb_dim, V1, rng);
    }
    return;
  }

  rec_out_ = nn::Linear::create(params_, "rec.out", dep_dim, config_.n_tags, rng);
  if (config_.emission == EmissionKind::feedforward) {
    emit_hidden_ = nn::Linear::create(params_, "emit.hidden", config_.pos_emb_dim, config_.word_emb_dim, rng);
    if (config_.tie_output_embeddings()) {
      nn::init_uniform(params_.add("emit.out.bias", V1, 1), 1.0 / std::sqrt(config_.word_emb_dim), rng);
      emit_out_ = {"emit.out", config_.word_emb_dim, V1};
    } else {
      emit_out_ = nn::Linear::create(params_, "emit.out", config_.word_emb_dim, V1, rng);
    }
  }
}

bool Model::is_shared_parameter(const std::string& name) {
  for (const char* prefix : {"word_emb", "char_emb", "char_lstm.", "local.", "tag_emb", "dep."}) {
    if (name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

std::size_t transplant_shared(const Model& from, Model& to) {
  std::size_t copied = 0;
  for (auto* p : to.params().all()) {
    if (!Model::is_shared_parameter(p->name)) continue;
    const auto* src = from.params().find(p->name);
    if (!src) continue;
    if (src->value.rows() != p->value.rows() || src->value.cols() != p->value.cols()) {
      throw std::invalid_argument(fmt::format("cannot transplant '{}': shape mismatch", p->name));
    }
    p->value = src->value;
    ++copied;
  }
  return copied;
}

// ---------------------------------------------------------------------------
// Encoding

EncodedCorpus Model::encode(const Corpus& corpus, const FeatureFile* features) const {
  if (config_.use_feature_file && !features) {
    throw std::invalid_argument("model expects a feature file for this corpus");
  }
  if (features && features->dimension != static_cast<std::size_t>(config_.feature_dim)) {
    throw std::invalid_argument("feature dimension does not match model.feature_dim");
  }
  EncodedCorpus out;
  out.features = features;
  std::unordered_map<std::string, int> extra;
  const int V = static_cast<int>(vocab_.size());
  for (const auto& s : corpus.sentences()) {
    std::vector<int> ids, types;
    for (const auto& w : s.words) {
      int id = vocab_.id(w);
      ids.push_back(id);
      if (id != vocab_.unk_id()) {
        types.push_back(id);
      } else {
        auto [it, inserted] = extra.emplace(w, V + 1 + static_cast<int>(out.extra_types.size()));
        if (inserted) out.extra_types.push_back(w);
        types.push_back(it->second);
      }
    }
    out.word_ids.push_back(std::move(ids));
    out.type_ids.push_back(std::move(types));
  }
  return out;
}

std::vector<int> Model::type_chars(const EncodedCorpus& data, int type) const {
  const int V = static_cast<int>(vocab_.size());
  if (type < V) return vocab_chars_[type];
  if (type == V) return {0};
  return vocab_.encode_chars(data.extra_types.at(static_cast<std::size_t>(type - V - 1)));
}

int Model::type_word_id(int type) const {
  return type < static_cast<int>(vocab_.size()) ? type : vocab_.unk_id();
}

// ---------------------------------------------------------------------------
// Building blocks

Expr Model::encode_types(Graph& g, const EncodedCorpus& data, std::span<const int> types) {
  const auto U = static_cast<Eigen::Index>(types.size());
  std::vector<std::vector<int>> chars;
  std::size_t longest = 1;
  for (int t : types) {
    chars.push_back(type_chars(data, t));
    longest = std::max(longest, chars.back().size());
  }
  const auto steps = static_cast<Eigen::Index>(longest);
  std::vector<int> char_ids(static_cast<std::size_t>(steps * U), 0);
  std::vector<unsigned char> valid(char_ids.size(), 0);
  for (Eigen::Index u = 0; u < U; ++u) {
    const auto& cs = chars[static_cast<std::size_t>(u)];
    for (std::size_t t = 0; t < cs.size(); ++t) {
      char_ids[t * U + u] = cs[t];
      valid[t * U + u] = 1;
    }
  }
  Expr ce = g.lookup(params_.at("char_emb"), char_ids);
  Expr fwd = char_lstm_.forward(g, params_, ce, U, valid, false);
  Expr bwd = char_lstm_.backward(g, params_, ce, U, valid, true);
  Expr char_rep[2] = {ad::slice_cols(fwd, (steps - 1) * U, U), ad::slice_cols(bwd, 0, U)};
  if (config_.use_feature_file) return ad::concat_rows(char_rep);

  std::vector<int> word_cols;
  for (int t : types) word_cols.push_back(type_word_id(t));
  Expr parts[3] = {g.lookup(params_.at("word_emb"), word_cols), char_rep[0], char_rep[1]};
  return ad::concat_rows(parts);
}

Expr Model::local_head(Graph& g, Expr w, const StepInputs* inputs) {
  if (inputs && inputs->dropout && config_.dropout > 0) {
    w = ad::cmul(w, nn::dropout_mask(w.rows(), w.cols(), config_.dropout, *inputs->dropout_rng));
  }
  Expr h = local_layers_[0](g, params_, w);
  if (local_layers_.size() == 2) h = local_layers_[1](g, params_, ad::tanh(h));
  return h;
}

Expr Model::dependency(Graph& g, Expr token_embeddings, Expr tag_selector, std::span<const std::size_t> lengths,
                       std::span<const std::size_t> masked_tokens, const StepInputs* inputs) {
  const auto n_tokens = static_cast<int>(token_embeddings.cols());
  Expr mask_col = ad::slice_cols(g.param(params_.at("tag_emb")), config_.n_tags, 1);
  Expr parts_aug[2] = {token_embeddings, mask_col};
  Expr augmented = ad::concat_cols(parts_aug);  // column n_tokens is MASK

  std::vector<std::size_t> offset(lengths.size());
  std::vector<std::size_t> slot_of_token, pos_of_token;
  for (std::size_t b = 0, off = 0; b < lengths.size(); ++b) {
    offset[b] = off;
    for (std::size_t j = 0; j < lengths[b]; ++j) {
      slot_of_token.push_back(b);
      pos_of_token.push_back(j);
    }
    off += lengths[b];
  }

  Expr rep;
  if (config_.context.kind == ContextKind::full) {
    const auto B = static_cast<Eigen::Index>(lengths.size());
    const std::size_t T = *std::max_element(lengths.begin(), lengths.end());
    std::vector<int> layout(T * lengths.size(), n_tokens);
    std::vector<unsigned char> valid(layout.size(), 0);
    for (std::size_t b = 0; b < lengths.size(); ++b) {
      for (std::size_t t = 0; t < lengths[b]; ++t) {
        layout[t * lengths.size() + b] = static_cast<int>(offset[b] + t);
        valid[t * lengths.size() + b] = 1;
      }
    }
    Expr h;
    if (tag_selector.valid()) {
      Matrix mask_indicator = Matrix::Zero(config_.n_tags + 1, 1);
      mask_indicator(config_.n_tags, 0) = 1.0;
      Expr sel_parts[2] = {tag_selector, g.constant(std::move(mask_indicator))};
      Expr selector = ad::gather_cols(ad::concat_cols(sel_parts), layout);
      h = dep_lstm_.factored(g, params_, g.param(params_.at("tag_emb")), selector, B, valid);
    } else {
      h = dep_lstm_(g, params_, ad::gather_cols(augmented, layout), B, valid);
    }
    std::vector<int> picks;
    for (std::size_t k : masked_tokens) {
      picks.push_back(static_cast<int>(pos_of_token[k] * lengths.size() + slot_of_token[k]));
    }
    rep = ad::gather_cols(h, picks);
  } else {
    const int k = config_.context.width;
    std::vector<Expr> windows;
    for (int d = -k; d <= k; ++d) {
      if (d == 0) continue;
      std::vector<int> idx;
      for (std::size_t tok : masked_tokens) {
        const auto b = slot_of_token[tok];
        const auto j = static_cast<long>(pos_of_token[tok]) + d;
        idx.push_back(j >= 0 && j < static_cast<long>(lengths[b]) ? static_cast<int>(offset[b] + j)
                                                                  : n_tokens);
      }
      windows.push_back(ad::gather_cols(augmented, idx));
    }
    rep = ad::tanh(dep_ff_(g, params_, ad::concat_rows(windows)));
  }
  if (inputs && inputs->dropout && config_.dropout > 0) {
    rep = ad::cmul(rep, nn::dropout_mask(rep.rows(), rep.cols(), config_.dropout, *inputs->dropout_rng));
  }
  return rep;
}

Expr Model::emission_logprob(Graph& g, Expr type_logits, std::size_t n_vocab_types) {
  const auto V = static_cast<Eigen::Index>(n_vocab_types);
  Matrix log_px(1, V);
  for (Eigen::Index x = 0; x < V; ++x) log_px(0, x) = std::log(vocab_.probability(static_cast<int>(x)));
  Expr logits = ad::slice_cols(type_logits, 0, V);
  Expr log_pzx = ad::log_softmax_cols(logits);
  Expr joint = ad::add_row(log_pzx, g.constant(log_px));  // log P(z|x) P(x)

  // Denominator sum_x P(z|x) P(x) per tag.
  const Matrix& jv = joint.value();
  bool smooth = false;
  for (Eigen::Index z = 0; z < jv.rows(); ++z) {
    double m = jv.row(z).maxCoeff();
    double lse = m + std::log((jv.row(z).array() - m).exp().sum());
    if (!(lse >= std::log(kBayesDenominatorFloor))) smooth = true;
  }
  if (smooth) {
    ++smoothing_events_;
    spdlog::debug("bayes-tied emission: denominator below {}; smoothing P(z|x)", kBayesDenominatorFloor);
    joint = ad::add_row(ad::log(ad::add_scalar(ad::softmax_cols(logits), kBayesSmoothing)),
                        g.constant(log_px));
  }
  return ad::transpose(ad::log_softmax_cols(ad::transpose(joint)));
}

Expr Model::feedforward_emission(Graph& g) {
  Expr tags = ad::slice_cols(g.param(params_.at("tag_emb")), 0, config_.n_tags);
  Expr h = ad::tanh(emit_hidden_(g, params_, tags));
  Expr logits;
  if (config_.tie_output_embeddings()) {
    logits = ad::add_bias(ad::matmul(ad::transpose(g.param(params_.at("word_emb"))), h),
                          g.param(params_.at("emit.out.bias")));
  } else {
    logits = emit_out_(g, params_, h);
  }
  return ad::transpose(ad::log_softmax_cols(logits));  // n_tags x (V + 1)
}

// ---------------------------------------------------------------------------
// Forward pass

StepInputs Model::sample_step_inputs(const EncodedCorpus& data, std::span<const std::size_t> batch,
                                     Rng& rng, bool train) const {
  StepInputs in;
  Eigen::Index tokens = 0;
  for (std::size_t s : batch) {
    in.masks.push_back(sample_mask(data.word_ids[s].size(), config_.mask_rate, rng));
    tokens += static_cast<Eigen::Index>(data.word_ids[s].size());
  }
  if (train) {
    if (config_.variant != ModelVariant::word_variant) {
      in.gumbel_noise = sample_gumbel(config_.n_tags, tokens, rng);
    }
    in.dropout = config_.dropout > 0;
    in.dropout_rng = &rng;
  }
  return in;
}

ForwardResult Model::forward(Graph& g, const EncodedCorpus& data, std::span<const std::size_t> batch,
                             const StepInputs& inputs) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  if (inputs.masks.size() != batch.size()) throw std::invalid_argument("forward: one mask per sentence");

  std::vector<std::size_t> lengths;
  std::vector<int> token_words;
  std::vector<unsigned char> token_masked;
  std::vector<std::size_t> masked_tokens;
  ForwardResult result;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ids = data.word_ids[batch[b]];
    if (inputs.masks[b].size() != ids.size()) throw std::invalid_argument("forward: mask length");
    lengths.push_back(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (inputs.masks[b][j]) {
        masked_tokens.push_back(token_words.size());
        result.masked.emplace_back(b, j);
      }
      token_words.push_back(ids[j]);
      token_masked.push_back(inputs.masks[b][j]);
    }
  }
  if (masked_tokens.empty()) throw std::invalid_argument("forward: no masked position");
  const auto n_tokens = static_cast<Eigen::Index>(token_words.size());
  const auto V = vocab_.size();

  // Distinct types in the batch; bayes-tied emission needs the whole vocabulary.
  std::vector<int> types;
  std::unordered_map<int, int> column_of;
  if (config_.emission == EmissionKind::bayes_tied) {
    for (std::size_t t = 0; t < V; ++t) {
      column_of.emplace(static_cast<int>(t), static_cast<int>(t));
      types.push_back(static_cast<int>(t));
    }
  }
  std::vector<int> token_column;
  for (std::size_t s : batch) {
    for (int t : data.type_ids[s]) {
      auto [it, inserted] = column_of.emplace(t, static_cast<int>(types.size()));
      if (inserted) types.push_back(t);
      token_column.push_back(it->second);
    }
  }

  Expr type_repr = encode_types(g, data, types);
  Expr type_logits;
  Expr token_embeddings, tag_selector;
  if (config_.variant == ModelVariant::word_variant) {
    Expr h = ad::tanh(word_mlp_(g, params_, type_repr));
    if (data.features) throw std::logic_error("word_variant with feature files is not supported");
    token_embeddings = ad::gather_cols(h, token_column);
    Expr mask_col = ad::slice_cols(g.param(params_.at("tag_emb")), config_.n_tags, 1);
    Expr parts[2] = {token_embeddings, mask_col};
    std::vector<int> pick(token_column.size());
    for (std::size_t i = 0; i < pick.size(); ++i) {
      pick[i] = token_masked[i] ? static_cast<int>(n_tokens) : static_cast<int>(i);
    }
    token_embeddings = ad::gather_cols(ad::concat_cols(parts), pick);
  } else {
    Expr token_logits;
    if (data.features) {
      Matrix feats(config_.feature_dim, n_tokens);
      Eigen::Index col = 0;
      for (std::size_t s : batch) {
        for (std::size_t j = 0; j < data.word_ids[s].size(); ++j, ++col) {
          auto v = data.features->vector(s, j);
          for (int k = 0; k < config_.feature_dim; ++k) feats(k, col) = v[static_cast<std::size_t>(k)];
        }
      }
      Expr parts[2] = {g.constant(std::move(feats)), ad::gather_cols(type_repr, token_column)};
      token_logits = local_head(g, ad::concat_rows(parts), &inputs);
    } else {
      type_logits = local_head(g, type_repr, &inputs);
      token_logits = ad::gather_cols(type_logits, token_column);
    }
    Matrix noise = inputs.gumbel_noise.size() ? inputs.gumbel_noise
                                              : Matrix::Zero(config_.n_tags, n_tokens);
    if (noise.cols() != n_tokens || noise.rows() != config_.n_tags) {
      throw std::invalid_argument("forward: gumbel noise shape");
    }
    Expr onehots = ad::gumbel_straight_through(token_logits, noise, config_.gumbel_tau, inputs.relaxed);
    tag_selector = ad::with_mask_row(onehots, token_masked);
    token_embeddings = ad::matmul(g.param(params_.at("tag_emb")), tag_selector);
  }

  Expr rep = dependency(g, token_embeddings, tag_selector, lengths, masked_tokens, &inputs);

  std::vector<int> masked_words;
  for (std::size_t k : masked_tokens) masked_words.push_back(token_words[k]);

  if (config_.variant == ModelVariant::mlmp_pretrain) {
    Expr h = ad::tanh(mlmp_hidden_(g, params_, rep));
    Expr logits;
    if (config_.tie_output_embeddings()) {
      logits = ad::add_bias(ad::matmul(ad::transpose(g.param(params_.at("word_emb"))), h),
                            g.param(params_.at("mlmp.out.bias")));
    } else {
      logits = mlmp_out_(g, params_, h);
    }
    result.masked_logprob = ad::pick_rows(ad::log_softmax_cols(logits), masked_words);
  } else {
    result.tag_logprob = ad::log_softmax_cols(rec_out_(g, params_, rep));
    Expr emit = config_.emission == EmissionKind::bayes_tied ? emission_logprob(g, type_logits, V)
                                                             : feedforward_emission(g);
    for (int w : masked_words) {
      if (w >= emit.cols()) throw std::invalid_argument("bayes-tied emission cannot score unk tokens");
    }
    result.masked_logprob =
        ad::logsumexp_cols(ad::gather_cols(emit, masked_words) + result.tag_logprob);
  }
  result.loss = ad::scale(ad::sum(result.masked_logprob),
                          -1.0 / static_cast<double>(masked_tokens.size()));
  return result;
}

// ---------------------------------------------------------------------------
// Inspection and inference

Matrix Model::encode_words(const EncodedCorpus& data, std::size_t sentence) {
  Graph g;
  const auto& types = data.type_ids.at(sentence);
  Expr rep = encode_types(g, data, types);
  if (!data.features) return rep.value();
  Matrix feats(config_.feature_dim, static_cast<Eigen::Index>(types.size()));
  for (std::size_t j = 0; j < types.size(); ++j) {
    auto v = data.features->vector(sentence, j);
    for (int k = 0; k < config_.feature_dim; ++k) feats(k, static_cast<Eigen::Index>(j)) = v[static_cast<std::size_t>(k)];
  }
  Matrix out(feats.rows() + rep.rows(), feats.cols());
  out << feats, rep.value();
  return out;
}

Matrix Model::local_logits(const EncodedCorpus& data, std::size_t sentence) {
  if (config_.variant == ModelVariant::word_variant) {
    throw std::logic_error("word_variant has no local predictor");
  }
  Graph g;
  Expr w = g.constant(encode_words(data, sentence));
  return local_head(g, w, nullptr).value();
}

Matrix Model::local_probability_table() {
  if (config_.use_feature_file || config_.variant == ModelVariant::word_variant) {
    throw std::logic_error("P(z|x) table needs a per-type local predictor");
  }
  Graph g;
  EncodedCorpus empty;
  std::vector<int> types(vocab_.size());
  std::iota(types.begin(), types.end(), 0);
  return ad::softmax_cols(local_head(g, encode_types(g, empty, types), nullptr)).value();
}

Matrix Model::emission_table() {
  Graph g;
  if (config_.emission == EmissionKind::feedforward) {
    return feedforward_emission(g).value().array().exp();
  }
  EncodedCorpus empty;
  std::vector<int> types(vocab_.size());
  std::iota(types.begin(), types.end(), 0);
  Expr logits = local_head(g, encode_types(g, empty, types), nullptr);
  return emission_logprob(g, logits, vocab_.size()).value().array().exp();
}

Matrix Model::reconstruct_tag_distribution(std::span<const int> tags, const MaskPattern& mask) {
  if (tags.size() != mask.size() || tags.empty()) {
    throw std::invalid_argument("reconstruct_tag_distribution: tags and mask must align");
  }
  if (config_.variant == ModelVariant::mlmp_pretrain) {
    throw std::logic_error("mlmp_pretrain has no reconstruction head");
  }
  Graph g;
  Matrix onehots = Matrix::Zero(config_.n_tags, static_cast<Eigen::Index>(tags.size()));
  std::vector<std::size_t> masked;
  for (std::size_t j = 0; j < tags.size(); ++j) {
    if (tags[j] < 0 || tags[j] >= config_.n_tags) throw std::out_of_range("tag id");
    onehots(tags[j], static_cast<Eigen::Index>(j)) = 1.0;
    if (mask[j]) masked.push_back(j);
  }
  if (masked.empty()) throw std::invalid_argument("reconstruct_tag_distribution: nothing masked");
  Expr selector = ad::with_mask_row(g.constant(std::move(onehots)), mask);
  Expr emb = ad::matmul(g.param(params_.at("tag_emb")), selector);
  std::size_t len = tags.size();
  Expr rep = dependency(g, emb, selector, std::span<const std::size_t>(&len, 1), masked, nullptr);
  return ad::softmax_cols(rec_out_(g, params_, rep)).value();
}

Matrix Model::masked_word_logprob(const EncodedCorpus& data, std::size_t sentence,
                                  const MaskPattern& mask) {
  Graph g;
  StepInputs in;
  in.masks = {mask};
  std::size_t batch[1] = {sentence};
  return forward(g, data, batch, in).masked_logprob.value();
}

TagAssignment Model::predict_tags(const EncodedCorpus& data) {
  TagAssignment out;
  out.tags.resize(data.size());
  if (config_.variant == ModelVariant::word_variant) {
    out.source = TagSource::reconstruction_argmax;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
      const std::size_t end = std::min(data.size(), start + kChunk);
      std::vector<std::size_t> lengths;
      std::vector<int> token_column, types;
      std::unordered_map<int, int> column_of;
      for (std::size_t s = start; s < end; ++s) {
        lengths.push_back(data.type_ids[s].size());
        for (int t : data.type_ids[s]) {
          auto [it, inserted] = column_of.emplace(t, static_cast<int>(types.size()));
          if (inserted) types.push_back(t);
          token_column.push_back(it->second);
        }
      }
      Graph g;
      Expr h = ad::tanh(word_mlp_(g, params_, encode_types(g, data, types)));
      Expr emb = ad::gather_cols(h, token_column);
      std::vector<std::size_t> all(token_column.size());
      std::iota(all.begin(), all.end(), 0);
      Matrix scores = rec_out_(g, params_, dependency(g, emb, Expr{}, lengths, all, nullptr)).value();
      std::size_t k = 0;
      for (std::size_t s = start; s < end; ++s) {
        for (std::size_t j = 0; j < data.type_ids[s].size(); ++j, ++k) {
          out.tags[s].push_back(argmax_lowest(scores.col(static_cast<Eigen::Index>(k))));
        }
      }
    }
    return out;
  }

  out.source = TagSource::local_argmax;
  if (data.features) {
    for (std::size_t s = 0; s < data.size(); ++s) {
      Matrix logits = local_logits(data, s);
      for (Eigen::Index j = 0; j < logits.cols(); ++j) out.tags[s].push_back(argmax_lowest(logits.col(j)));
    }
    return out;
  }
  // Context-independent: one decision per word type.
  std::vector<int> types;
  std::unordered_map<int, int> column_of;
  for (const auto& sent : data.type_ids) {
    for (int t : sent) {
      if (column_of.emplace(t, static_cast<int>(types.size())).second) types.push_back(t);
    }
  }
  std::vector<int> type_tag(types.size());
  constexpr std::size_t kChunk = 4096;
  for (std::size_t start = 0; start < types.size(); start += kChunk) {
    const std::size_t end = std::min(types.size(), start + kChunk);
    Graph g;
    std::span<const int> chunk(types.data() + start, end - start);
    Matrix logits = local_head(g, encode_types(g, data, chunk), nullptr).value();
    for (std::size_t u = start; u < end; ++u) {
      type_tag[u] = argmax_lowest(logits.col(static_cast<Eigen::Index>(u - start)));
    }
  }
  for (std::size_t s = 0; s < data.size(); ++s) {
    for (int t : data.type_ids[s]) out.tags[s].push_back(type_tag[static_cast<std::size_t>(column_of.at(t))]);
  }
  return out;
}

}  // namespace mposm
