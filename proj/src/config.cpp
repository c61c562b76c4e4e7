#include "mposm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace mposm {

namespace fs = std::filesystem;

ConfigError::ConfigError(std::vector<std::string> errors)
    : std::runtime_error([&] {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        return msg;
      }()),
      errors_(std::move(errors)) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument(fmt::format("'{}' is not a valid number", v));
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(fmt::format("'{}' is not a boolean", v));
}

std::vector<std::uint64_t> parse_seeds(const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    // "a..b" expands to an inclusive range.
    if (auto dots = item.find(".."); dots != std::string::npos) {
      auto a = parse_number<std::uint64_t>(trim(item.substr(0, dots)));
      auto b = parse_number<std::uint64_t>(trim(item.substr(dots + 2)));
      if (b < a) throw std::invalid_argument(fmt::format("empty seed range '{}'", item));
      for (auto s = a; s <= b; ++s) out.push_back(s);
    } else {
      out.push_back(parse_number<std::uint64_t>(item));
    }
  }
  if (out.empty()) throw std::invalid_argument("no seeds given");
  return out;
}

std::string fmt_double(double v) { return fmt::format("{}", v); }
std::string fmt_bool(bool v) { return v ? "true" : "false"; }

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define INT_FIELD(key, member)                                                              \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_number<int>(v); }, \
         [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define U64_FIELD(key, member)                                                                        \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_number<std::uint64_t>(v); }, \
         [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define DOUBLE_FIELD(key, member)                                                              \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_number<double>(v); }, \
         [](const ExperimentConfig& c) { return fmt_double(c.member); }}}
#define BOOL_FIELD(key, member)                                                      \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_bool(v); }, \
         [](const ExperimentConfig& c) { return fmt_bool(c.member); }}}
#define PATH_FIELD(key, member)                                                      \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = fs::path(v); }, \
         [](const ExperimentConfig& c) { return c.member.string(); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      PATH_FIELD("data.corpus", data.corpus),
      {"data.format",
       {[](ExperimentConfig& c, const std::string& v) { c.data.format = parse_corpus_format(v); },
        [](const ExperimentConfig& c) { return to_string(c.data.format); }}},
      PATH_FIELD("data.embeddings", data.embeddings),
      PATH_FIELD("data.features", data.features),
      BOOL_FIELD("data.rechunk", data.rechunk),
      {"data.synthetic",
       {[](ExperimentConfig& c, const std::string& v) {
          if (v.empty() || v == "none") {
            c.data.synthetic.reset();
          } else {
            c.data.synthetic = synth::parse_variant(v);
          }
        },
        [](const ExperimentConfig& c) {
          return c.data.synthetic ? synth::to_string(*c.data.synthetic) : std::string("none");
        }}},
      INT_FIELD("data.synthetic_sentences", data.synthetic_sentences),
      INT_FIELD("data.synthetic_words_per_tag", data.synthetic_words_per_tag),
      U64_FIELD("data.synthetic_seed", data.synthetic_seed),

      INT_FIELD("model.n_tags", model.n_tags),
      INT_FIELD("model.word_emb_dim", model.word_emb_dim),
      INT_FIELD("model.pos_emb_dim", model.pos_emb_dim),
      INT_FIELD("model.char_emb_dim", model.char_emb_dim),
      INT_FIELD("model.hidden_dim", model.hidden_dim),
      INT_FIELD("model.char_hidden_dim", model.char_hidden_dim),
      DOUBLE_FIELD("model.mask_rate", model.mask_rate),
      DOUBLE_FIELD("model.gumbel_tau", model.gumbel_tau),
      DOUBLE_FIELD("model.dropout", model.dropout),
      {"model.context",
       {[](ExperimentConfig& c, const std::string& v) { c.model.context = ContextSpec::parse(v); },
        [](const ExperimentConfig& c) { return c.model.context.to_string(); }}},
      {"model.emission",
       {[](ExperimentConfig& c, const std::string& v) { c.model.emission = parse_emission(v); },
        [](const ExperimentConfig& c) { return to_string(c.model.emission); }}},
      {"model.variant",
       {[](ExperimentConfig& c, const std::string& v) { c.model.variant = parse_model_variant(v); },
        [](const ExperimentConfig& c) { return to_string(c.model.variant); }}},
      BOOL_FIELD("model.use_pretrained_emb", model.use_pretrained_emb),
      BOOL_FIELD("model.use_feature_file", model.use_feature_file),
      INT_FIELD("model.feature_dim", model.feature_dim),
      INT_FIELD("model.local_predictor_layers", model.local_predictor_layers),

      DOUBLE_FIELD("train.learning_rate", train.learning_rate),
      INT_FIELD("train.batch_size", train.batch_size),
      DOUBLE_FIELD("train.lr_decay_factor", train.lr_decay_factor),
      INT_FIELD("train.stagnation_patience", train.stagnation_patience),
      DOUBLE_FIELD("train.stagnation_threshold", train.stagnation_threshold),
      INT_FIELD("train.max_decays", train.max_decays),
      INT_FIELD("train.max_epochs", train.max_epochs),
      U64_FIELD("train.seed", train.seed),
      INT_FIELD("train.pretrain_epochs", train.pretrain_epochs),
      {"train.selection_mode",
       {[](ExperimentConfig& c, const std::string& v) { c.train.selection_mode = parse_selection_mode(v); },
        [](const ExperimentConfig& c) { return to_string(c.train.selection_mode); }}},
      U64_FIELD("train.eval_mask_seed", train.eval_mask_seed),
      BOOL_FIELD("train.keep_all_checkpoints", train.keep_all_checkpoints),

      {"run.seeds",
       {[](ExperimentConfig& c, const std::string& v) { c.seeds = parse_seeds(v); },
        [](const ExperimentConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
          return out;
        }}},
      PATH_FIELD("run.output_dir", output_dir),
  };
  return table;
}

#undef INT_FIELD
#undef U64_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef PATH_FIELD

void apply(ExperimentConfig& config, const std::string& key, const std::string& value,
           const std::string& where, std::vector<std::string>& errors) {
  auto it = fields().find(key);
  if (it == fields().end()) {
    errors.push_back(fmt::format("{}unknown key '{}'", where, key));
    return;
  }
  try {
    it->second.set(config, value);
  } catch (const std::exception& e) {
    errors.push_back(fmt::format("{}{}={}: {}", where, key, value, e.what()));
  }
}

}  // namespace

std::vector<std::string> ExperimentConfig::validate(bool check_paths) const {
  std::vector<std::string> errors = model.validate();
  for (auto& e : train.validate()) errors.push_back(std::move(e));
  if (seeds.empty()) errors.push_back("run.seeds must list at least one seed");
  if (data.synthetic) {
    if (data.synthetic_sentences < 1) {
      errors.push_back(fmt::format("data.synthetic_sentences={} must be >= 1", data.synthetic_sentences));
    }
    if (data.synthetic_words_per_tag < 1) {
      errors.push_back(
          fmt::format("data.synthetic_words_per_tag={} must be >= 1", data.synthetic_words_per_tag));
    }
  } else if (data.corpus.empty()) {
    errors.push_back("data.corpus is required unless data.synthetic is set");
  } else if (check_paths && !fs::exists(data.corpus)) {
    errors.push_back(fmt::format("data.corpus='{}' does not exist", data.corpus.string()));
  }
  if (!data.embeddings.empty() && check_paths && !fs::exists(data.embeddings)) {
    errors.push_back(fmt::format("data.embeddings='{}' does not exist", data.embeddings.string()));
  }
  if (!data.features.empty()) {
    if (check_paths && !fs::exists(data.features)) {
      errors.push_back(fmt::format("data.features='{}' does not exist", data.features.string()));
    }
    if (data.rechunk) errors.push_back("data.rechunk must be false when data.features is set");
  }
  if (model.use_pretrained_emb && data.embeddings.empty()) {
    errors.push_back("model.use_pretrained_emb=true requires data.embeddings");
  }
  if (model.use_feature_file && data.features.empty()) {
    errors.push_back("model.use_feature_file=true requires data.features");
  }
  return errors;
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  std::string section;
  for (const auto& [key, field] : fields()) {
    auto ns = key.substr(0, key.find('.'));
    if (ns != section) {
      if (!section.empty()) out += "\n";
      section = ns;
    }
    out += fmt::format("{} = {}\n", key, field.get(*this));
  }
  return out;
}

ExperimentConfig parse_experiment_config(const std::string& text, ExperimentConfig base) {
  std::vector<std::string> errors;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    const auto where = fmt::format("line {}: ", lineno);
    if (eq == std::string::npos) {
      errors.push_back(where + "expected 'key = value'");
      continue;
    }
    apply(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where, errors);
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return base;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({fmt::format("cannot read config file '{}'", path.string())});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError({fmt::format("override '{}' is not key=value", assignment)});
  std::vector<std::string> errors;
  apply(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), "", errors);
  if (!errors.empty()) throw ConfigError(std::move(errors));
}

Corpus load_experiment_corpus(const DataConfig& data) {
  if (data.synthetic) {
    synth::SyntheticSpec spec;
    spec.variant = *data.synthetic;
    spec.n_sentences = static_cast<std::size_t>(data.synthetic_sentences);
    spec.words_per_tag = static_cast<std::size_t>(data.synthetic_words_per_tag);
    spec.seed = data.synthetic_seed;
    return synth::generate_dataset(spec);
  }
  return load_corpus(data.corpus, data.format);
}

}  // namespace mposm
