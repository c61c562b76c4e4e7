#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mposm/corpus.hpp"
#include "mposm/model.hpp"

namespace mposm {

enum class SelectionMode { oracle, loss };
SelectionMode parse_selection_mode(const std::string& s);
std::string to_string(SelectionMode m);

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 80;
  double lr_decay_factor = 0.1;
  int stagnation_patience = 3;
  double stagnation_threshold = 1e-3;  // relative improvement that resets patience
  int max_decays = 2;
  int max_epochs = 30;
  std::uint64_t seed = 1;
  int pretrain_epochs = 0;
  SelectionMode selection_mode = SelectionMode::oracle;
  std::uint64_t eval_mask_seed = 12345;
  bool keep_all_checkpoints = false;

  std::vector<std::string> validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double eval_loss = 0.0;
  std::optional<double> m1;
  double learning_rate = 0.0;
  std::string checkpoint;  // empty when not written or pruned
  double seconds = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::string stop_reason;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

// Index into record.epochs of the selected epoch: highest M-1 (oracle) or
// lowest evaluation loss (loss); ties go to the earliest epoch.
std::size_t select_model(const RunRecord& record, SelectionMode mode);
// M-1 of the selected epoch.
double selected_m1(const RunRecord& record, SelectionMode mode);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool resume = false;
  const FeatureFile* features = nullptr;  // aligned with both training and evaluation corpora
  std::function<void(const EpochRecord&)> on_epoch;
};

// Derives an independent generator for a named stream of a run seed.
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

// Length-bucketed batches: sentences are shuffled, grouped by length, cut
// into batches of at most `batch_size`, and the batch order is shuffled.
std::vector<std::vector<std::size_t>> make_batches(const EncodedCorpus& data, int batch_size, Rng& rng);

// Mean masked-position negative log-likelihood with fixed masks, no noise and
// no dropout.
double evaluation_loss(Model& model, const EncodedCorpus& data, const std::vector<MaskPattern>& masks,
                       int batch_size);
std::vector<MaskPattern> evaluation_masks(const EncodedCorpus& data, double rate, std::uint64_t seed);

// Trains `model` in place on `train_corpus`, evaluating on `eval_corpus` at
// every epoch end. The model is left in its final-epoch state.
RunRecord train(Model& model, const Corpus& train_corpus, const Corpus& eval_corpus,
                const TrainConfig& config, const RunOptions& options = {});

// MLMP stage: trains an mlmp_pretrain model for `config.pretrain_epochs`.
RunRecord pretrain_mlmp(Model& mlmp_model, const Corpus& train_corpus, const Corpus& eval_corpus,
                        const TrainConfig& config, const RunOptions& options = {});

struct ExperimentInputs {
  const Corpus* corpus = nullptr;  // the original corpus; also the evaluation corpus
  bool rechunk = false;
  const EmbeddingTable* embeddings = nullptr;
  const FeatureFile* features = nullptr;
  // Initial weights: an MLMP checkpoint contributes its shared tensors, any
  // other checkpoint must match the model configuration exactly.
  std::filesystem::path init_checkpoint;
};

// One seeded run: optional rechunking, model initialization, optional MLMP
// pretraining, then training. `config.seed` selects every random stream.
RunRecord run_experiment(const ExperimentInputs& inputs, const ModelConfig& model_config,
                         const TrainConfig& config, const std::filesystem::path& out_dir = {},
                         bool resume = false);

struct SeedSummary {
  std::uint64_t seed = 0;
  double oracle_m1 = 0.0;
  double loss_m1 = 0.0;
  RunRecord record;
};

struct AggregateReport {
  SelectionMode mode = SelectionMode::oracle;
  std::vector<SeedSummary> runs;
  double mean = 0.0;
  double std = 0.0;
  double percent_perfect = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

AggregateReport aggregate(std::vector<SeedSummary> runs, SelectionMode mode);

AggregateReport multi_seed(const ExperimentInputs& inputs, const ModelConfig& model_config,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds,
                           const std::filesystem::path& out_dir = {});

}  // namespace mposm
