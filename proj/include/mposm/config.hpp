#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mposm/corpus.hpp"
#include "mposm/model.hpp"
#include "mposm/synthdata.hpp"
#include "mposm/training.hpp"

namespace mposm {

// Carries every problem found, one message per entry.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

struct DataConfig {
  std::filesystem::path corpus;
  CorpusFormat format = CorpusFormat::two_column_tsv;
  std::filesystem::path embeddings;
  std::filesystem::path features;
  bool rechunk = true;
  // Generate a synthetic corpus instead of reading `corpus`.
  std::optional<synth::Variant> synthetic;
  int synthetic_sentences = 40000;
  int synthetic_words_per_tag = 5;
  std::uint64_t synthetic_seed = 1;
};

// Line-oriented "key = value" file with dotted namespaces:
//   data.*   corpus, format, embeddings, features, rechunk, synthetic, ...
//   model.*  every ModelConfig field
//   train.*  every TrainConfig field
//   run.*    seeds (comma separated), output_dir
// '#' starts a comment. Later keys override earlier ones.
struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir;

  // Field-level checks; with `check_paths`, referenced input files must exist.
  std::vector<std::string> validate(bool check_paths) const;
  // Fully resolved configuration in the same key = value format.
  std::string to_text() const;
};

// Applies `key = value` lines on top of `base`. All unknown keys and
// unparsable values are reported together.
ExperimentConfig parse_experiment_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Applies one "key=value" override.
void apply_override(ExperimentConfig& config, const std::string& assignment);

// Loads or generates the configured corpus.
Corpus load_experiment_corpus(const DataConfig& data);

}  // namespace mposm
