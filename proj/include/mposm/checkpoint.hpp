#pragma once

// Checkpoint container (little-endian):
//   "MPOSMCKP" | u32 format version | u64 header length | JSON header | f64 tensor data
// The header records the model configuration, the vocabulary and its hash,
// the tensor index (name, shape, offset), optimizer state, RNG state, the epoch
// counter, and free-form training state.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "mposm/model.hpp"
#include "mposm/optimizer.hpp"

namespace mposm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::unique_ptr<Model> model;
  std::optional<Adam> optimizer;
  std::string rng_state;  // textual std::mt19937_64 state; empty if absent
  std::size_t epoch = 0;
  nlohmann::json train_state = nlohmann::json::object();
};

std::string serialize_checkpoint(const Model& model, const Adam* optimizer, const Rng* rng,
                                 std::size_t epoch, const nlohmann::json& train_state);
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Adam* optimizer,
                     const Rng* rng, std::size_t epoch,
                     const nlohmann::json& train_state = nlohmann::json::object());

// Throws CheckpointError on a corrupt container, an unsupported version, or
// (when `expected_vocab_hash` is given) a vocabulary mismatch.
Checkpoint deserialize_checkpoint(const std::string& bytes,
                                  std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace mposm
