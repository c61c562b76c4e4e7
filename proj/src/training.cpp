#include "mposm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mposm/checkpoint.hpp"
#include "mposm/eval.hpp"
#include "mposm/optimizer.hpp"

namespace mposm {

namespace fs = std::filesystem;

SelectionMode parse_selection_mode(const std::string& s) {
  if (s == "oracle") return SelectionMode::oracle;
  if (s == "loss") return SelectionMode::loss;
  throw std::invalid_argument(fmt::format("unknown selection mode '{}' (expected oracle or loss)", s));
}

std::string to_string(SelectionMode m) { return m == SelectionMode::oracle ? "oracle" : "loss"; }

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (!(learning_rate > 0)) errors.push_back(fmt::format("train.learning_rate={} must be > 0", learning_rate));
  if (batch_size < 1) errors.push_back(fmt::format("train.batch_size={} must be >= 1", batch_size));
  if (!(lr_decay_factor > 0 && lr_decay_factor < 1)) {
    errors.push_back(fmt::format("train.lr_decay_factor={} must be in (0, 1)", lr_decay_factor));
  }
  if (stagnation_patience < 1) {
    errors.push_back(fmt::format("train.stagnation_patience={} must be >= 1", stagnation_patience));
  }
  if (!(stagnation_threshold >= 0 && stagnation_threshold < 1)) {
    errors.push_back(fmt::format("train.stagnation_threshold={} must be in [0, 1)", stagnation_threshold));
  }
  if (max_decays < 0) errors.push_back(fmt::format("train.max_decays={} must be >= 0", max_decays));
  if (max_epochs < 1) errors.push_back(fmt::format("train.max_epochs={} must be >= 1", max_epochs));
  if (pretrain_epochs < 0) {
    errors.push_back(fmt::format("train.pretrain_epochs={} must be >= 0", pretrain_epochs));
  }
  return errors;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"lr_decay_factor", lr_decay_factor},
          {"stagnation_patience", stagnation_patience},
          {"stagnation_threshold", stagnation_threshold},
          {"max_decays", max_decays},
          {"max_epochs", max_epochs},
          {"seed", seed},
          {"pretrain_epochs", pretrain_epochs},
          {"selection_mode", to_string(selection_mode)},
          {"eval_mask_seed", eval_mask_seed},
          {"keep_all_checkpoints", keep_all_checkpoints}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.stagnation_patience = j.value("stagnation_patience", c.stagnation_patience);
  c.stagnation_threshold = j.value("stagnation_threshold", c.stagnation_threshold);
  c.max_decays = j.value("max_decays", c.max_decays);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
  c.selection_mode = parse_selection_mode(j.value("selection_mode", std::string("oracle")));
  c.eval_mask_seed = j.value("eval_mask_seed", c.eval_mask_seed);
  c.keep_all_checkpoints = j.value("keep_all_checkpoints", c.keep_all_checkpoints);
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch},
                      {"train_loss", train_loss},
                      {"loss", eval_loss},
                      {"lr", learning_rate},
                      {"checkpoint", checkpoint},
                      {"seconds", seconds}};
  j["m1"] = m1 ? nlohmann::json(*m1) : nlohmann::json(nullptr);
  return j;
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.eval_loss = j.at("loss").get<double>();
  r.learning_rate = j.at("lr").get<double>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.seconds = j.at("seconds").get<double>();
  if (!j.at("m1").is_null()) r.m1 = j.at("m1").get<double>();
  return r;
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["wall_seconds"] = wall_seconds;
  j["stop_reason"] = stop_reason;
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : epochs) eps.push_back(e.to_json());
  j["epochs"] = eps;
  if (!epochs.empty()) {
    j["selected"] = nlohmann::json::object();
    j["selected"]["loss"] = epochs[select_model(*this, SelectionMode::loss)].epoch;
    if (epochs.front().m1) j["selected"]["oracle"] = epochs[select_model(*this, SelectionMode::oracle)].epoch;
  }
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.stop_reason = j.value("stop_reason", std::string());
  for (const auto& e : j.at("epochs")) r.epochs.push_back(EpochRecord::from_json(e));
  return r;
}

std::size_t select_model(const RunRecord& record, SelectionMode mode) {
  if (record.epochs.empty()) throw std::invalid_argument("cannot select from an empty run record");
  std::size_t best = 0;
  for (std::size_t i = 0; i < record.epochs.size(); ++i) {
    const auto& e = record.epochs[i];
    if (mode == SelectionMode::oracle) {
      if (!e.m1) throw std::invalid_argument("oracle selection requires gold tags (no M-1 recorded)");
      if (*e.m1 > *record.epochs[best].m1) best = i;
    } else if (e.eval_loss < record.epochs[best].eval_loss) {
      best = i;
    }
  }
  return best;
}

double selected_m1(const RunRecord& record, SelectionMode mode) {
  const auto& e = record.epochs[select_model(record, mode)];
  if (!e.m1) throw std::invalid_argument("run has no M-1 scores (no gold tags)");
  return *e.m1;
}

Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

std::vector<std::vector<std::size_t>> make_batches(const EncodedCorpus& data, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.word_ids[a].size() < data.word_ids[b].size();
  });
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < order.size(); i += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + bs)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::vector<MaskPattern> evaluation_masks(const EncodedCorpus& data, double rate, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<MaskPattern> masks;
  masks.reserve(data.size());
  for (const auto& s : data.word_ids) masks.push_back(sample_mask(s.size(), rate, rng));
  return masks;
}

double evaluation_loss(Model& model, const EncodedCorpus& data, const std::vector<MaskPattern>& masks,
                       int batch_size) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.word_ids[a].size() < data.word_ids[b].size();
  });
  // Larger chunks than training batches: evaluation has no backward pass.
  const std::size_t chunk = static_cast<std::size_t>(std::max(batch_size, 1)) * 4;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < order.size(); i += chunk) {
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(i),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + chunk)));
    StepInputs in;
    for (auto s : batch) in.masks.push_back(masks[s]);
    Graph g;
    auto res = model.forward(g, data, batch, in);
    total += -res.masked_logprob.value().sum();
    count += res.masked.size();
  }
  return total / static_cast<double>(count);
}

namespace {

// Training allocates and frees large temporaries every step; keep them on the
// heap instead of round-tripping through mmap.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
  });
#endif
}

struct Progress {
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  int decays = 0;
  bool done = false;
  std::string stop_reason;
};

nlohmann::json progress_json(const Progress& p, const RunRecord& r) {
  return {{"best_loss", std::isfinite(p.best_loss) ? nlohmann::json(p.best_loss) : nlohmann::json(nullptr)},
          {"stale", p.stale},
          {"decays", p.decays},
          {"done", p.done},
          {"stop_reason", p.stop_reason},
          {"record", r.to_json()}};
}

void write_metrics(const fs::path& path, const RunRecord& r) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& e : r.epochs) out << e.to_json().dump() << "\n";
}

void prune_checkpoints(RunRecord& r) {
  std::vector<bool> keep(r.epochs.size(), false);
  keep[select_model(r, SelectionMode::loss)] = true;
  if (r.epochs.front().m1) keep[select_model(r, SelectionMode::oracle)] = true;
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    if (keep[i] || r.epochs[i].checkpoint.empty()) continue;
    std::error_code ec;
    fs::remove(r.epochs[i].checkpoint, ec);
    r.epochs[i].checkpoint.clear();
  }
}

void copy_parameters(const Model& from, Model& to) {
  for (auto* p : to.params().all()) p->value = from.params().at(p->name).value;
}

}  // namespace

RunRecord train(Model& model, const Corpus& train_corpus, const Corpus& eval_corpus,
                const TrainConfig& config, const RunOptions& options) {
  if (auto errors = config.validate(); !errors.empty()) throw std::invalid_argument(errors.front());
  tune_allocator();
  const auto start = std::chrono::steady_clock::now();
  const bool write = !options.out_dir.empty();
  if (write) fs::create_directories(options.out_dir);
  const fs::path last_path = options.out_dir / "last.ckpt";
  const fs::path metrics_path = options.out_dir / "metrics.jsonl";

  const auto train_data = model.encode(train_corpus, options.features);
  const auto eval_data = model.encode(eval_corpus, options.features);
  const auto eval_masks = evaluation_masks(eval_data, model.config().mask_rate, config.eval_mask_seed);
  const bool has_gold = eval_corpus.has_gold();

  Adam adam(config.learning_rate);
  Rng rng = derive_rng(config.seed, 2);
  RunRecord record;
  record.seed = config.seed;
  Progress progress;
  double prior_seconds = 0.0;

  if (options.resume) {
    if (!write || !fs::exists(last_path)) throw TrainingError("resume requested but no last.ckpt exists");
    auto ck = load_checkpoint(last_path, model.vocab().hash());
    if (!(ck.model->config() == model.config())) throw TrainingError("checkpoint model config differs");
    copy_parameters(*ck.model, model);
    if (ck.optimizer) adam = *ck.optimizer;
    rng = rng_from_state(ck.rng_state);
    const auto& st = ck.train_state;
    record = RunRecord::from_json(st.at("record"));
    prior_seconds = record.wall_seconds;
    if (!st.at("best_loss").is_null()) progress.best_loss = st.at("best_loss").get<double>();
    progress.stale = st.at("stale").get<int>();
    progress.decays = st.at("decays").get<int>();
    progress.done = st.at("done").get<bool>();
    progress.stop_reason = st.at("stop_reason").get<std::string>();
    write_metrics(metrics_path, record);
    spdlog::info("resuming seed {} after epoch {}", config.seed, ck.epoch);
  } else if (write) {
    std::ofstream(metrics_path, std::ios::trunc);
    save_checkpoint(last_path, model, &adam, &rng, 0, progress_json(progress, record));
  }

  std::size_t step = 0;
  for (int epoch = static_cast<int>(record.epochs.size()) + 1; !progress.done && epoch <= config.max_epochs;
       ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    auto batches = make_batches(train_data, config.batch_size, rng);
    double loss_sum = 0.0;
    std::size_t masked_sum = 0;
    for (const auto& batch : batches) {
      ++step;
      auto in = model.sample_step_inputs(train_data, batch, rng, true);
      Graph g;
      auto res = model.forward(g, train_data, batch, in);
      const double loss = res.loss.scalar();
      if (!std::isfinite(loss)) {
        throw TrainingError(fmt::format(
            "non-finite loss at epoch {} step {} (first sentence {}); last good state is {}", epoch,
            step, batch.front(), write ? last_path.string() : std::string("not saved")));
      }
      model.params().zero_grad();
      g.backward(res.loss);
      adam.step(model.params());
      loss_sum += loss * static_cast<double>(res.masked.size());
      masked_sum += res.masked.size();
    }
    if (!model.params().all_finite()) {
      throw TrainingError(fmt::format("non-finite parameters after epoch {}", epoch));
    }

    EpochRecord e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(masked_sum);
    e.eval_loss = evaluation_loss(model, eval_data, eval_masks, config.batch_size);
    if (!std::isfinite(e.eval_loss)) throw TrainingError(fmt::format("non-finite evaluation loss at epoch {}", epoch));
    e.learning_rate = adam.learning_rate();
    if (has_gold) e.m1 = eval::many_to_one(model.predict_tags(eval_data), eval_corpus).accuracy;

    if (e.eval_loss < progress.best_loss * (1.0 - config.stagnation_threshold)) {
      progress.best_loss = e.eval_loss;
      progress.stale = 0;
    } else {
      progress.best_loss = std::min(progress.best_loss, e.eval_loss);
      if (++progress.stale >= config.stagnation_patience) {
        if (progress.decays >= config.max_decays) {
          progress.done = true;
          progress.stop_reason = "stagnated";
        } else {
          ++progress.decays;
          progress.stale = 0;
          adam.set_learning_rate(adam.learning_rate() * config.lr_decay_factor);
        }
      }
    }
    if (!progress.done && epoch == config.max_epochs) {
      progress.done = true;
      progress.stop_reason = "max_epochs";
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    record.wall_seconds = prior_seconds +
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.stop_reason = progress.stop_reason;

    if (write) {
      const auto path = options.out_dir / fmt::format("epoch_{:03d}.ckpt", epoch);
      e.checkpoint = path.string();
      record.epochs.push_back(e);
      auto state = progress_json(progress, record);
      save_checkpoint(path, model, &adam, &rng, static_cast<std::size_t>(epoch), state);
      save_checkpoint(last_path, model, &adam, &rng, static_cast<std::size_t>(epoch), state);
      std::ofstream(metrics_path, std::ios::app) << e.to_json().dump() << "\n";
    } else {
      record.epochs.push_back(e);
    }
    spdlog::debug("seed {} epoch {} loss {:.5f} eval {:.5f} m1 {} lr {:g} ({:.1f}s)", config.seed, epoch,
                  e.train_loss, e.eval_loss, e.m1 ? fmt::format("{:.2f}", *e.m1) : "-", e.learning_rate,
                  e.seconds);
    if (options.on_epoch) options.on_epoch(e);
  }

  if (write && !config.keep_all_checkpoints && !record.epochs.empty()) {
    prune_checkpoints(record);
    std::ofstream(options.out_dir / "record.json") << record.to_json().dump(2) << "\n";
  } else if (write) {
    std::ofstream(options.out_dir / "record.json") << record.to_json().dump(2) << "\n";
  }
  return record;
}

RunRecord pretrain_mlmp(Model& mlmp_model, const Corpus& train_corpus, const Corpus& eval_corpus,
                        const TrainConfig& config, const RunOptions& options) {
  if (mlmp_model.config().variant != ModelVariant::mlmp_pretrain) {
    throw std::invalid_argument("pretrain_mlmp needs a model with variant mlmp_pretrain");
  }
  TrainConfig c = config;
  c.max_epochs = std::max(1, config.pretrain_epochs);
  c.selection_mode = SelectionMode::loss;
  c.keep_all_checkpoints = true;
  auto record = train(mlmp_model, train_corpus, eval_corpus, c, options);
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "pretrained.ckpt", mlmp_model, nullptr, nullptr, record.epochs.size());
  }
  return record;
}

RunRecord run_experiment(const ExperimentInputs& inputs, const ModelConfig& model_config,
                         const TrainConfig& config, const fs::path& out_dir, bool resume) {
  if (!inputs.corpus) throw std::invalid_argument("run_experiment: no corpus");
  model_config.check();
  if (auto errors = config.validate(); !errors.empty()) throw std::invalid_argument(errors.front());
  if (inputs.rechunk && inputs.features) {
    throw std::invalid_argument("rechunking cannot be combined with a feature file");
  }
  const Corpus& original = *inputs.corpus;
  Corpus rechunked_storage;
  const Corpus* train_corpus = &original;
  if (inputs.rechunk) {
    Rng rechunk_rng = derive_rng(config.seed, 0);
    rechunked_storage = combine(original, rechunk(original, rechunk_rng));
    train_corpus = &rechunked_storage;
  }
  auto vocab = Vocabulary::build(original);
  Rng init_rng = derive_rng(config.seed, 1);
  Model model(model_config, vocab, init_rng, inputs.embeddings);

  RunOptions options;
  options.features = inputs.features;
  options.resume = resume;

  if (!inputs.init_checkpoint.empty()) {
    auto ck = load_checkpoint(inputs.init_checkpoint, vocab.hash());
    if (ck.model->config().variant == ModelVariant::mlmp_pretrain &&
        model_config.variant != ModelVariant::mlmp_pretrain) {
      transplant_shared(*ck.model, model);
    } else if (ck.model->config() == model_config) {
      copy_parameters(*ck.model, model);
    } else {
      throw std::invalid_argument("init checkpoint configuration does not match the model");
    }
  } else if (config.pretrain_epochs > 0 && model_config.variant == ModelVariant::standard) {
    ModelConfig mc = model_config;
    mc.variant = ModelVariant::mlmp_pretrain;
    Rng pre_rng = derive_rng(config.seed, 3);
    Model mlmp(mc, vocab, pre_rng, inputs.embeddings);
    const fs::path pre_dir = out_dir.empty() ? fs::path() : out_dir / "pretrain";
    bool reuse = resume && !pre_dir.empty() && fs::exists(pre_dir / "pretrained.ckpt");
    if (reuse) {
      auto ck = load_checkpoint(pre_dir / "pretrained.ckpt", vocab.hash());
      transplant_shared(*ck.model, model);
    } else {
      RunOptions pre_opts;
      pre_opts.features = inputs.features;
      pre_opts.out_dir = pre_dir;
      TrainConfig pc = config;
      pc.seed = config.seed ^ 0x5bd1e995ULL;
      pretrain_mlmp(mlmp, *train_corpus, original, pc, pre_opts);
      transplant_shared(mlmp, model);
    }
  }

  options.out_dir = out_dir.empty() ? fs::path() : out_dir / "train";
  if (resume && !options.out_dir.empty() && !fs::exists(options.out_dir / "last.ckpt")) options.resume = false;
  return train(model, *train_corpus, original, config, options);
}

AggregateReport aggregate(std::vector<SeedSummary> runs, SelectionMode mode) {
  AggregateReport r;
  r.mode = mode;
  r.runs = std::move(runs);
  std::vector<double> scores;
  for (const auto& s : r.runs) scores.push_back(mode == SelectionMode::oracle ? s.oracle_m1 : s.loss_m1);
  if (!scores.empty()) {
    r.mean = eval::mean(scores);
    r.std = eval::sample_std(scores);
    r.percent_perfect = eval::percent_perfect(scores);
  }
  return r;
}

nlohmann::json AggregateReport::to_json() const {
  nlohmann::json j;
  j["selection_mode"] = to_string(mode);
  j["n_runs"] = runs.size();
  j["mean_m1"] = mean;
  j["std_m1"] = std;
  j["percent_perfect"] = percent_perfect;
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& s : runs) {
    rs.push_back({{"seed", s.seed},
                  {"oracle_m1", s.oracle_m1},
                  {"loss_m1", s.loss_m1},
                  {"epochs", s.record.epochs.size()},
                  {"wall_seconds", s.record.wall_seconds}});
  }
  j["runs"] = rs;
  return j;
}

std::string AggregateReport::to_csv() const {
  std::string out = "seed,oracle_m1,loss_m1,epochs,wall_seconds\n";
  for (const auto& s : runs) {
    out += fmt::format("{},{:.6f},{:.6f},{},{:.3f}\n", s.seed, s.oracle_m1, s.loss_m1, s.record.epochs.size(),
                       s.record.wall_seconds);
  }
  return out;
}

AggregateReport multi_seed(const ExperimentInputs& inputs, const ModelConfig& model_config,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds,
                           const fs::path& out_dir) {
  if (seeds.empty()) throw std::invalid_argument("multi_seed needs at least one seed");
  if (!inputs.corpus || !inputs.corpus->has_gold()) {
    throw std::invalid_argument("multi_seed reports M-1 and needs gold tags");
  }
  std::vector<SeedSummary> runs;
  for (auto seed : seeds) {
    TrainConfig c = config;
    c.seed = seed;
    const fs::path dir = out_dir.empty() ? fs::path() : out_dir / fmt::format("seed_{}", seed);
    SeedSummary s;
    s.seed = seed;
    s.record = run_experiment(inputs, model_config, c, dir);
    s.oracle_m1 = selected_m1(s.record, SelectionMode::oracle);
    s.loss_m1 = selected_m1(s.record, SelectionMode::loss);
    spdlog::info("seed {}: oracle M-1 {:.2f}, loss M-1 {:.2f}, {} epochs, {:.0f}s", seed, s.oracle_m1,
                 s.loss_m1, s.record.epochs.size(), s.record.wall_seconds);
    runs.push_back(std::move(s));
  }
  auto report = aggregate(std::move(runs), config.selection_mode);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "aggregate.json") << report.to_json().dump(2) << "\n";
    std::ofstream(out_dir / "aggregate.csv") << report.to_csv();
  }
  return report;
}

}  // namespace mposm
