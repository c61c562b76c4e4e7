// mposm: command suite for the masked part-of-speech model.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mposm/checkpoint.hpp"
#include "mposm/config.hpp"
#include "mposm/corpus.hpp"
#include "mposm/eval.hpp"
#include "mposm/synthdata.hpp"
#include "mposm/training.hpp"

namespace fs = std::filesystem;
using namespace mposm;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  if (const char* env = std::getenv("MPOSM_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

struct ExperimentArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

void add_experiment_options(CLI::App* cmd, ExperimentArgs& args) {
  cmd->add_option("config", args.config, "Experiment config file (key = value)")->required();
  cmd->add_option("--set", args.overrides, "Override a config key, e.g. --set model.mask_rate=0.2");
  cmd->add_option("-o,--out", args.out, "Run directory (default: run.output_dir or $MPOSM_OUTPUT_ROOT/<config>)");
}

ExperimentConfig resolve_config(const ExperimentArgs& args) {
  auto config = load_experiment_config(args.config);
  for (const auto& o : args.overrides) apply_override(config, o);
  if (!args.out.empty()) config.output_dir = args.out;
  if (config.output_dir.empty()) config.output_dir = output_root() / fs::path(args.config).stem();
  auto errors = config.validate(true);
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return config;
}

// Everything an experiment needs that is loaded from disk.
struct Prepared {
  Corpus corpus;
  std::optional<EmbeddingTable> embeddings;
  std::optional<FeatureFile> features;
  ModelConfig model;

  ExperimentInputs inputs(const ExperimentConfig& c) const {
    ExperimentInputs in;
    in.corpus = &corpus;
    in.rechunk = c.data.rechunk;
    in.embeddings = embeddings ? &*embeddings : nullptr;
    in.features = features ? &*features : nullptr;
    return in;
  }
};

Prepared prepare(const ExperimentConfig& config) {
  Prepared p;
  p.corpus = load_experiment_corpus(config.data);
  p.model = config.model;
  spdlog::info("corpus '{}': {} sentences, {} tokens", p.corpus.name(), p.corpus.size(), p.corpus.token_count());
  if (!config.data.embeddings.empty()) {
    auto vocab = Vocabulary::build(p.corpus);
    Rng rng = derive_rng(config.train.seed, 4);
    p.embeddings = load_pretrained_embeddings(config.data.embeddings, vocab, rng);
    spdlog::info("embeddings: dimension {}, coverage {:.2f}%", p.embeddings->dimension,
                 100.0 * p.embeddings->coverage());
    p.model = with_pretrained_defaults(p.model, p.embeddings->dimension);
  }
  if (!config.data.features.empty()) {
    p.features = load_feature_file(config.data.features, p.corpus);
    p.model.use_feature_file = true;
    p.model.emission = EmissionKind::feedforward;
    p.model.feature_dim = static_cast<int>(p.features->dimension);
  }
  p.model.check();
  return p;
}

void snapshot(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  write_text(config.output_dir / "config.resolved", config.to_text());
}

int cmd_gen_synth(const std::string& variant, std::size_t n, std::uint64_t seed, std::size_t words_per_tag,
                  const std::string& out) {
  synth::SyntheticSpec spec;
  try {
    spec.variant = synth::parse_variant(variant);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  spec.n_sentences = n;
  spec.seed = seed;
  spec.words_per_tag = words_per_tag;
  auto corpus = synth::generate_dataset(spec);
  const fs::path path = out.empty() ? output_root() / (corpus.name() + ".tsv") : fs::path(out);
  write_text(path, format_corpus(corpus, CorpusFormat::two_column_tsv));
  auto sidecar = path;
  sidecar += ".json";
  write_text(sidecar, synth::sidecar_json(spec, synth::make_lexicon(spec)));
  std::cout << fmt::format("wrote {} sentences to {}\n", corpus.size(), path.string());
  return 0;
}

int cmd_pretrain(const ExperimentArgs& args) {
  auto config = resolve_config(args);
  if (config.train.pretrain_epochs < 1) {
    throw ConfigError({"train.pretrain_epochs must be >= 1 for pretrain"});
  }
  snapshot(config);
  auto p = prepare(config);
  ModelConfig mc = p.model;
  mc.variant = ModelVariant::mlmp_pretrain;
  Corpus train_corpus = p.corpus;
  if (config.data.rechunk) {
    Rng rng = derive_rng(config.train.seed, 0);
    train_corpus = combine(p.corpus, rechunk(p.corpus, rng));
  }
  Rng init = derive_rng(config.train.seed, 3);
  Model model(mc, Vocabulary::build(p.corpus), init, p.embeddings ? &*p.embeddings : nullptr);
  RunOptions opts;
  opts.out_dir = config.output_dir / "pretrain";
  opts.features = p.features ? &*p.features : nullptr;
  auto record = pretrain_mlmp(model, train_corpus, p.corpus, config.train, opts);
  std::cout << fmt::format("pretrained {} epochs, final loss {:.4f}; checkpoint {}\n", record.epochs.size(),
                           record.epochs.back().eval_loss, (opts.out_dir / "pretrained.ckpt").string());
  return 0;
}

int cmd_train(const ExperimentArgs& args, bool resume, const std::string& init) {
  auto config = resolve_config(args);
  snapshot(config);
  auto p = prepare(config);
  auto inputs = p.inputs(config);
  inputs.init_checkpoint = init;
  auto record = run_experiment(inputs, p.model, config.train, config.output_dir, resume);
  write_text(config.output_dir / "record.json", record.to_json().dump(2) + "\n");
  const auto& sel = record.epochs[select_model(record, record.epochs.front().m1 ? config.train.selection_mode
                                                                                : SelectionMode::loss)];
  std::cout << fmt::format("trained {} epochs ({}); selected epoch {} loss {:.4f}{}\n", record.epochs.size(),
                           record.stop_reason, sel.epoch, sel.eval_loss,
                           sel.m1 ? fmt::format(" M-1 = {:.2f}", *sel.m1) : "");
  return 0;
}

int cmd_multiseed(const ExperimentArgs& args, int n_seeds) {
  auto config = resolve_config(args);
  if (n_seeds > 0) {
    config.seeds.clear();
    for (int s = 1; s <= n_seeds; ++s) config.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  snapshot(config);
  auto p = prepare(config);
  if (!p.corpus.has_gold()) throw ConfigError({"multiseed reports M-1 and needs a corpus with gold tags"});
  auto report = multi_seed(p.inputs(config), p.model, config.train, config.seeds, config.output_dir);
  std::cout << fmt::format("{} runs, {} selection: mean M-1 = {:.2f} (std {:.2f}), perfect {:.1f}%\n",
                           report.runs.size(), to_string(report.mode), report.mean, report.std,
                           report.percent_perfect);
  return 0;
}

// `target` is a checkpoint file or a run directory holding record.json.
fs::path resolve_checkpoint(const fs::path& target, SelectionMode mode) {
  if (!fs::is_directory(target)) return target;
  for (const auto& candidate : {target / "record.json", target / "train" / "record.json"}) {
    if (!fs::exists(candidate)) continue;
    std::ifstream in(candidate);
    auto record = RunRecord::from_json(nlohmann::json::parse(in));
    const auto& e = record.epochs.at(select_model(record, mode));
    if (e.checkpoint.empty()) throw std::runtime_error("selected checkpoint was not kept");
    return e.checkpoint;
  }
  throw UsageError(fmt::format("'{}' has no record.json", target.string()));
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_path, const std::string& format,
             const std::string& mode_str, const std::string& features_path, const std::string& out,
             std::size_t threshold) {
  SelectionMode mode;
  CorpusFormat fmt_kind;
  try {
    mode = parse_selection_mode(mode_str);
    fmt_kind = parse_corpus_format(format);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  auto corpus = load_corpus(corpus_path, fmt_kind);
  if (mode == SelectionMode::oracle && !corpus.has_gold()) {
    throw UsageError("oracle mode needs gold tags but the corpus has none");
  }
  auto ck = load_checkpoint(resolve_checkpoint(checkpoint, mode));
  std::optional<FeatureFile> features;
  if (!features_path.empty()) features = load_feature_file(features_path, corpus);
  auto data = ck.model->encode(corpus, features ? &*features : nullptr);
  auto tags = ck.model->predict_tags(data);

  const fs::path dir = out.empty() ? output_root() / "eval" : fs::path(out);
  std::string tagged;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    for (std::size_t i = 0; i < corpus[s].size(); ++i) {
      tagged += fmt::format("{}\t{}\n", corpus[s].words[i], tags.tags[s][i]);
    }
    tagged += "\n";
  }
  write_text(dir / "predicted.tsv", tagged);
  if (!corpus.has_gold()) {
    std::cout << fmt::format("tagged {} tokens (no gold tags; M-1 not computed)\n", corpus.token_count());
    return 0;
  }
  auto m1 = eval::many_to_one(tags, corpus);
  auto report = eval::cluster_report(tags, corpus, threshold);
  write_text(dir / "m1.json", m1.to_json().dump(2) + "\n");
  write_text(dir / "clusters.json", report.to_json().dump(2) + "\n");
  write_text(dir / "cluster_sizes.csv", report.histogram_csv());
  std::cout << report.summary();
  std::cout << fmt::format("M-1 = {:.2f}\n", m1.accuracy);
  return 0;
}

int cmd_analyze(const std::string& corpus_path, const std::string& format, const std::string& context,
                double log_base, const std::string& out, bool upper_bound) {
  std::vector<int> offsets;
  CorpusFormat fmt_kind;
  try {
    offsets = eval::parse_offsets(context);
    fmt_kind = parse_corpus_format(format);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  auto corpus = load_corpus(corpus_path, fmt_kind);
  if (!corpus.has_gold()) throw UsageError("analyze needs a corpus with gold tags");
  auto report = eval::tag_mutual_information(corpus, offsets, log_base);
  auto j = report.to_json();
  if (upper_bound) j["m1_upper_bound"] = eval::m1_upper_bound(corpus);
  const fs::path path = out.empty() ? output_root() / "analyze" / "mi.json" : fs::path(out);
  write_text(path, j.dump(2) + "\n");
  std::cout << fmt::format("I(context {}; z) = {:.4f} {} over {} positions", context, report.mi,
                           log_base > 0 ? fmt::format("(log base {})", log_base) : "nats", report.positions);
  if (upper_bound) std::cout << fmt::format("; M-1 upper bound = {:.2f}", eval::m1_upper_bound(corpus));
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked part-of-speech model workbench"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");
  app.footer("Default output root: $MPOSM_OUTPUT_ROOT (else ./runs).");

  std::string variant = "d0", out;
  std::size_t n = 40000, words_per_tag = 5;
  std::uint64_t seed = 1;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic agreement dataset");
  gen->add_option("--variant", variant, "d0, morph or d24")->capture_default_str();
  gen->add_option("--n", n, "Number of sentences")->capture_default_str();
  gen->add_option("--seed", seed, "Random seed")->capture_default_str();
  gen->add_option("--words-per-tag", words_per_tag, "Lexicon size per tag")->capture_default_str();
  gen->add_option("-o,--out", out, "Output TSV path (a .json sidecar is written next to it)");

  ExperimentArgs pre_args, train_args, ms_args;
  auto* pre = app.add_subcommand("pretrain", "MLMP pretraining");
  add_experiment_options(pre, pre_args);

  bool resume = false;
  std::string init;
  auto* tr = app.add_subcommand("train", "Train a model");
  add_experiment_options(tr, train_args);
  tr->add_flag("--resume", resume, "Continue from the run directory's last checkpoint");
  tr->add_option("--init", init, "Initial weights (e.g. an MLMP pretrained.ckpt)");

  int n_seeds = 0;
  auto* ms = app.add_subcommand("multiseed", "Train over several seeds and aggregate M-1");
  add_experiment_options(ms, ms_args);
  ms->add_option("--n-seeds", n_seeds, "Use seeds 1..N instead of run.seeds");

  std::string checkpoint, corpus_path, format = "tsv", mode = "oracle", features, eval_out;
  std::size_t threshold = 3000;
  auto* ev = app.add_subcommand("eval", "Tag a corpus and report M-1 and cluster statistics");
  ev->add_option("checkpoint", checkpoint, "Checkpoint file or run directory")->required();
  ev->add_option("corpus", corpus_path, "Corpus to tag")->required()->check(CLI::ExistingFile);
  ev->add_option("--format", format, "tsv or words")->capture_default_str();
  ev->add_option("--mode", mode, "oracle or loss (epoch selection for run directories)")->capture_default_str();
  ev->add_option("--features", features, "Feature file aligned with the corpus");
  ev->add_option("--small-threshold", threshold, "Cluster size threshold")->capture_default_str();
  ev->add_option("-o,--out", eval_out, "Report directory");

  std::string an_corpus, an_format = "tsv", context = "-1", an_out;
  double log_base = 0.0;
  bool upper = false;
  auto* an = app.add_subcommand("analyze", "Gold tag-context mutual information");
  an->add_option("corpus", an_corpus, "Gold-tagged corpus")->required()->check(CLI::ExistingFile);
  an->add_option("--format", an_format, "tsv or words")->capture_default_str();
  an->add_option("--context", context, "Relative offsets, e.g. -2,-1")->capture_default_str();
  an->add_option("--log-base", log_base, "Logarithm base (default natural log)");
  an->add_flag("--upper-bound", upper, "Also report the per-word-type M-1 upper bound");
  an->add_option("-o,--out", an_out, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*gen) return cmd_gen_synth(variant, n, seed, words_per_tag, out);
    if (*pre) return cmd_pretrain(pre_args);
    if (*tr) return cmd_train(train_args, resume, init);
    if (*ms) return cmd_multiseed(ms_args, n_seeds);
    if (*ev) return cmd_eval(checkpoint, corpus_path, format, mode, features, eval_out, threshold);
    if (*an) return cmd_analyze(an_corpus, an_format, context, log_base, an_out, upper);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
