#include "mposm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace mposm {

namespace {

constexpr char kMagic[8] = {'M', 'P', 'O', 'S', 'M', 'C', 'K', 'P'};

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int k = 0; k < bytes; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t off, int bytes) {
  std::uint64_t v = 0;
  for (int k = bytes - 1; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(in[off + k]);
  return v;
}

void append_matrix(std::string& out, const ad::Matrix& m) {
  const auto* p = reinterpret_cast<const char*>(m.data());
  out.append(p, static_cast<std::size_t>(m.size()) * sizeof(double));
}

}  // namespace

std::string rng_state(const Rng& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream ss(state);
  ss >> rng;
  if (!ss) throw CheckpointError("invalid RNG state");
  return rng;
}

std::string serialize_checkpoint(const Model& model, const Adam* optimizer, const Rng* rng,
                                 std::size_t epoch, const nlohmann::json& train_state) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  auto add_tensor = [&](const std::string& name, const ad::Matrix& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
    append_matrix(payload, m);
  };
  for (const auto* p : model.params().all()) add_tensor(p->name, p->value);

  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["model_config"] = model.config().to_json();
  header["vocab"] = {{"words", model.vocab().words()}, {"counts", model.vocab().counts()}};
  header["vocab_hash"] = fmt::format("{:016x}", model.vocab().hash());
  header["epoch"] = epoch;
  header["rng_state"] = rng ? rng_state(*rng) : std::string();
  header["train_state"] = train_state;
  if (optimizer) {
    nlohmann::json opt = {{"kind", "adam"},
                          {"lr", optimizer->learning_rate()},
                          {"beta1", optimizer->beta1()},
                          {"beta2", optimizer->beta2()},
                          {"eps", optimizer->eps()},
                          {"steps", optimizer->steps()}};
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& [name, m] : optimizer->moments()) {
      moments.push_back(name);
      add_tensor("adam.m." + name, m.first);
      add_tensor("adam.v." + name, m.second);
    }
    opt["moments"] = moments;
    header["optimizer"] = opt;
  } else {
    header["optimizer"] = nullptr;
  }
  header["tensors"] = tensors;

  std::string head = header.dump();
  std::string out(kMagic, 8);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, head.size(), 8);
  out += head;
  out += payload;
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Adam* optimizer,
                     const Rng* rng, std::size_t epoch, const nlohmann::json& train_state) {
  std::string bytes = serialize_checkpoint(model, optimizer, rng, epoch, train_state);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(fmt::format("cannot write '{}'", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(fmt::format("write failed for '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint deserialize_checkpoint(const std::string& bytes,
                                  std::optional<std::uint64_t> expected_vocab_hash) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(fmt::format("unsupported checkpoint version {}", version));
  }
  const std::size_t head_len = get_le(bytes, 12, 8);
  if (bytes.size() < 20 + head_len) throw CheckpointError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(20, head_len));
  } catch (const std::exception& e) {
    throw CheckpointError(fmt::format("corrupt checkpoint header: {}", e.what()));
  }
  const std::size_t base = 20 + head_len;

  auto vocab = Vocabulary::from_counts(header.at("vocab").at("words").get<std::vector<std::string>>(),
                                       header.at("vocab").at("counts").get<std::vector<std::uint64_t>>());
  const auto stored_hash = header.at("vocab_hash").get<std::string>();
  if (stored_hash != fmt::format("{:016x}", vocab.hash())) {
    throw CheckpointError("checkpoint vocabulary does not match its recorded hash");
  }
  if (expected_vocab_hash && *expected_vocab_hash != vocab.hash()) {
    throw CheckpointError(fmt::format("vocabulary mismatch: checkpoint {} vs expected {:016x}",
                                      stored_hash, *expected_vocab_hash));
  }

  Checkpoint ck;
  ck.model = std::make_unique<Model>(ModelConfig::from_json(header.at("model_config")), std::move(vocab));
  std::map<std::string, ad::Matrix> tensors;
  for (const auto& t : header.at("tensors")) {
    auto rows = t.at("rows").get<Eigen::Index>();
    auto cols = t.at("cols").get<Eigen::Index>();
    auto off = t.at("offset").get<std::size_t>();
    const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (base + off + n > bytes.size()) throw CheckpointError("truncated tensor data");
    ad::Matrix m(rows, cols);
    std::memcpy(m.data(), bytes.data() + base + off, n);
    tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  for (auto* p : ck.model->params().all()) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw CheckpointError(fmt::format("missing tensor '{}'", p->name));
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw CheckpointError(fmt::format("tensor '{}' has the wrong shape", p->name));
    }
    p->value = it->second;
  }

  const auto& opt = header.at("optimizer");
  if (!opt.is_null()) {
    Adam adam(opt.at("lr").get<double>(), opt.at("beta1").get<double>(), opt.at("beta2").get<double>(),
              opt.at("eps").get<double>());
    adam.restore(opt.at("steps").get<std::uint64_t>(), opt.at("lr").get<double>());
    for (const auto& name : opt.at("moments")) {
      auto n = name.get<std::string>();
      auto& m = adam.moments()[n];
      m.first = tensors.at("adam.m." + n);
      m.second = tensors.at("adam.v." + n);
    }
    ck.optimizer = std::move(adam);
  }
  ck.rng_state = header.at("rng_state").get<std::string>();
  ck.epoch = header.at("epoch").get<std::size_t>();
  ck.train_state = header.at("train_state");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), expected_vocab_hash);
}

}  // namespace mposm
