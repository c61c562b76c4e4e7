#include "mposm/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

namespace mposm {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

bool is_blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

ParseError::ParseError(const std::string& file, std::size_t line, const std::string& what)
    : std::runtime_error(fmt::format("{}:{}: {}", file, line, what)), line_(line) {}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(std::string name, std::vector<Sentence> sentences)
    : name_(std::move(name)), sentences_(std::move(sentences)) {
  for (std::size_t i = 0; i < sentences_.size(); ++i) {
    const auto& s = sentences_[i];
    if (s.words.empty()) throw std::invalid_argument(fmt::format("sentence {} is empty", i));
    if (s.gold_tags && s.gold_tags->size() != s.words.size()) {
      throw std::invalid_argument(fmt::format("sentence {}: {} words but {} tags", i,
                                              s.words.size(), s.gold_tags->size()));
    }
    for (const auto& w : s.words) {
      if (w.empty()) throw std::invalid_argument(fmt::format("sentence {} has an empty word", i));
    }
    token_count_ += s.words.size();
  }
}

bool Corpus::has_gold() const {
  return !sentences_.empty() &&
         std::all_of(sentences_.begin(), sentences_.end(), [](const Sentence& s) { return s.has_gold(); });
}

std::vector<std::string> Corpus::flat_words() const {
  std::vector<std::string> out;
  out.reserve(token_count_);
  for (const auto& s : sentences_) out.insert(out.end(), s.words.begin(), s.words.end());
  return out;
}

std::vector<std::string> Corpus::flat_gold() const {
  std::vector<std::string> out;
  out.reserve(token_count_);
  for (const auto& s : sentences_) {
    if (!s.gold_tags) throw std::logic_error("corpus has no gold tags");
    out.insert(out.end(), s.gold_tags->begin(), s.gold_tags->end());
  }
  return out;
}

CorpusFormat parse_corpus_format(const std::string& s) {
  if (s == "two_column_tsv" || s == "tsv") return CorpusFormat::two_column_tsv;
  if (s == "words_only" || s == "words") return CorpusFormat::words_only;
  throw std::invalid_argument(fmt::format("unknown corpus format '{}'", s));
}

std::string to_string(CorpusFormat f) {
  return f == CorpusFormat::two_column_tsv ? "two_column_tsv" : "words_only";
}

Corpus parse_corpus(const std::string& text, CorpusFormat format, const std::string& name) {
  std::vector<Sentence> sentences;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;

  if (format == CorpusFormat::words_only) {
    while (std::getline(in, line)) {
      ++lineno;
      strip_cr(line);
      auto words = split_ws(line);
      if (words.empty()) continue;
      sentences.push_back(Sentence{std::move(words), std::nullopt});
    }
  } else {
    Sentence cur;
    cur.gold_tags.emplace();
    auto flush = [&] {
      if (!cur.words.empty()) sentences.push_back(std::move(cur));
      cur = Sentence{};
      cur.gold_tags.emplace();
    };
    while (std::getline(in, line)) {
      ++lineno;
      strip_cr(line);
      if (is_blank(line)) {
        flush();
        continue;
      }
      auto tab = line.find('\t');
      if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
        throw ParseError(name, lineno, "expected exactly two tab-separated columns");
      }
      std::string word = line.substr(0, tab), tag = line.substr(tab + 1);
      if (word.empty() || tag.empty()) throw ParseError(name, lineno, "empty word or tag");
      cur.words.push_back(std::move(word));
      cur.gold_tags->push_back(std::move(tag));
    }
    flush();
  }
  if (sentences.empty()) throw ParseError(name, lineno, "corpus is empty");
  return Corpus(name, std::move(sentences));
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  return parse_corpus(read_file(path), format, path.string());
}

std::string format_corpus(const Corpus& corpus, CorpusFormat format) {
  std::string out;
  for (const auto& s : corpus.sentences()) {
    if (format == CorpusFormat::words_only) {
      for (std::size_t i = 0; i < s.words.size(); ++i) {
        if (i) out += ' ';
        out += s.words[i];
      }
      out += '\n';
    } else {
      if (!s.gold_tags) throw std::invalid_argument("two_column_tsv output requires gold tags");
      for (std::size_t i = 0; i < s.words.size(); ++i) {
        out += s.words[i];
        out += '\t';
        out += (*s.gold_tags)[i];
        out += '\n';
      }
      out += '\n';
    }
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << format_corpus(corpus, format);
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<char32_t> utf8_decode(const std::string& s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    int len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    char32_t cp = len == 1 ? c : c & (0xFF >> (len + 1));
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

Vocabulary Vocabulary::build(const Corpus& corpus) {
  Vocabulary v;
  for (const auto& s : corpus.sentences()) {
    for (const auto& w : s.words) {
      auto [it, inserted] = v.word_to_id_.emplace(w, static_cast<int>(v.words_.size()));
      if (inserted) {
        v.words_.push_back(w);
        v.counts_.push_back(0);
        for (char32_t c : utf8_decode(w)) {
          if (v.char_to_id_.emplace(c, static_cast<int>(v.chars_.size()) + 1).second) {
            v.chars_.push_back(c);
          }
        }
      }
      ++v.counts_[it->second];
      ++v.total_tokens_;
    }
  }
  return v;
}

Vocabulary Vocabulary::from_counts(const std::vector<std::string>& words,
                                   const std::vector<std::uint64_t>& counts) {
  if (words.size() != counts.size()) throw std::invalid_argument("vocabulary: words/counts size mismatch");
  Vocabulary v;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!v.word_to_id_.emplace(words[i], static_cast<int>(i)).second) {
      throw std::invalid_argument(fmt::format("vocabulary: duplicate word '{}'", words[i]));
    }
    v.words_.push_back(words[i]);
    v.counts_.push_back(counts[i]);
    v.total_tokens_ += counts[i];
    for (char32_t c : utf8_decode(words[i])) {
      if (v.char_to_id_.emplace(c, static_cast<int>(v.chars_.size()) + 1).second) v.chars_.push_back(c);
    }
  }
  return v;
}

int Vocabulary::id(const std::string& word) const {
  auto it = word_to_id_.find(word);
  return it == word_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::word(int id) const {
  static const std::string unk = kUnk;
  if (id == unk_id()) return unk;
  return words_.at(static_cast<std::size_t>(id));
}

std::uint64_t Vocabulary::count(int id) const {
  if (id == unk_id()) return 0;
  return counts_.at(static_cast<std::size_t>(id));
}

double Vocabulary::probability(int id) const {
  if (total_tokens_ == 0) return 0.0;
  return static_cast<double>(count(id)) / static_cast<double>(total_tokens_);
}

std::vector<double> Vocabulary::probabilities() const {
  std::vector<double> p(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) p[i] = probability(static_cast<int>(i));
  return p;
}

int Vocabulary::char_id(char32_t c) const {
  auto it = char_to_id_.find(c);
  return it == char_to_id_.end() ? 0 : it->second;
}

std::vector<int> Vocabulary::encode_chars(const std::string& word) const {
  std::vector<int> out;
  for (char32_t c : utf8_decode(word)) out.push_back(char_id(c));
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](unsigned char b) {
    h ^= b;
    h *= 1099511628211ULL;
  };
  for (const auto& w : words_) {
    for (char c : w) mix(static_cast<unsigned char>(c));
    mix(0);
  }
  return h;
}

std::vector<int> Vocabulary::encode(const Sentence& s) const {
  std::vector<int> ids;
  ids.reserve(s.words.size());
  for (const auto& w : s.words) ids.push_back(id(w));
  return ids;
}

// ---------------------------------------------------------------------------
// Rechunking

Corpus rechunk_with_lengths(const Corpus& corpus, std::span<const std::size_t> lengths) {
  if (corpus.empty()) throw std::invalid_argument("rechunk: empty corpus");
  if (lengths.empty()) throw std::invalid_argument("rechunk: no chunk lengths");
  const bool gold = corpus.has_gold();
  std::vector<Sentence> out;
  Sentence cur;
  if (gold) cur.gold_tags.emplace();
  std::size_t li = 0;
  std::size_t target = lengths[0];
  for (const auto& s : corpus.sentences()) {
    for (std::size_t i = 0; i < s.words.size(); ++i) {
      cur.words.push_back(s.words[i]);
      if (gold) cur.gold_tags->push_back((*s.gold_tags)[i]);
      if (cur.words.size() == target) {
        out.push_back(std::move(cur));
        cur = Sentence{};
        if (gold) cur.gold_tags.emplace();
        li = (li + 1) % lengths.size();
        target = lengths[li];
        if (target == 0) throw std::invalid_argument("rechunk: zero chunk length");
      }
    }
  }
  if (!cur.words.empty()) out.push_back(std::move(cur));
  return Corpus(corpus.name() + "+rechunked", std::move(out));
}

Corpus rechunk(const Corpus& corpus, Rng& rng) {
  if (corpus.empty()) throw std::invalid_argument("rechunk: empty corpus");
  std::vector<std::size_t> sentence_lengths;
  sentence_lengths.reserve(corpus.size());
  for (const auto& s : corpus.sentences()) sentence_lengths.push_back(s.size());
  // Draw enough lengths to cover the stream; each chunk consumes >= 1 token.
  std::vector<std::size_t> lengths;
  std::size_t covered = 0;
  std::uniform_int_distribution<std::size_t> draw(0, sentence_lengths.size() - 1);
  while (covered < corpus.token_count()) {
    std::size_t pick = draw(rng);
    lengths.push_back(sentence_lengths[pick]);
    covered += sentence_lengths[pick];
  }
  return rechunk_with_lengths(corpus, lengths);
}

Corpus combine(const Corpus& original, const Corpus& rechunked) {
  if (original.empty() || rechunked.empty()) {
    throw std::invalid_argument("combine: both corpora must be non-empty");
  }
  std::vector<Sentence> all = original.sentences();
  all.insert(all.end(), rechunked.sentences().begin(), rechunked.sentences().end());
  return Corpus(original.name(), std::move(all));
}

// ---------------------------------------------------------------------------
// Pretrained embeddings

EmbeddingTable parse_pretrained_embeddings(const std::string& text, const Vocabulary& vocab,
                                           Rng& rng) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  std::vector<std::pair<int, std::vector<double>>> rows;
  std::vector<char> seen(vocab.size(), 0);
  std::size_t duplicates = 0;

  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (lineno == 1 && fields.size() == 2) {
      long long a = 0, b = 0;
      auto r1 = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), a);
      auto r2 = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), b);
      if (r1.ec == std::errc{} && r1.ptr == fields[0].data() + fields[0].size() &&
          r2.ec == std::errc{} && r2.ptr == fields[1].data() + fields[1].size()) {
        continue;  // "V d" header
      }
    }
    if (fields.size() < 2) throw ParseError("embeddings", lineno, "expected a word and a vector");
    std::size_t d = fields.size() - 1;
    if (dim == 0) dim = d;
    if (d != dim) {
      throw ParseError("embeddings", lineno,
                       fmt::format("dimension {} differs from {}", d, dim));
    }
    if (!vocab.contains(fields[0])) continue;
    int id = vocab.id(fields[0]);
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) {
      try {
        v[k] = std::stod(fields[k + 1]);
      } catch (const std::exception&) {
        throw ParseError("embeddings", lineno, fmt::format("bad number '{}'", fields[k + 1]));
      }
    }
    if (seen[id]) {
      ++duplicates;
      spdlog::warn("embedding for '{}' repeated at line {}; keeping the last one", fields[0], lineno);
    }
    seen[id] = 1;
    rows.emplace_back(id, std::move(v));
  }
  if (dim == 0) throw std::runtime_error("embedding file contains no vectors");

  EmbeddingTable t;
  t.dimension = dim;
  t.vocab_size = vocab.size();
  t.duplicates = duplicates;
  t.vectors = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim),
                                    static_cast<Eigen::Index>(vocab.size_with_unk()));
  for (auto& [id, v] : rows) t.vectors.col(id) = Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
  t.covered = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));

  // Uncovered rows: zero-mean uniform with the per-dimension std of covered rows.
  Eigen::VectorXd half_width = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim), std::sqrt(3.0));
  if (t.covered >= 2) {
    Eigen::MatrixXd covered(dim, t.covered);
    std::size_t k = 0;
    for (std::size_t id = 0; id < vocab.size(); ++id) {
      if (seen[id]) covered.col(static_cast<Eigen::Index>(k++)) = t.vectors.col(static_cast<Eigen::Index>(id));
    }
    Eigen::VectorXd mean = covered.rowwise().mean();
    Eigen::VectorXd var =
        (covered.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(t.covered - 1);
    half_width = var.array().sqrt() * std::sqrt(3.0);
  }
  if (t.covered == 0) spdlog::warn("no vocabulary word found in the embedding file");
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t id = 0; id < vocab.size_with_unk(); ++id) {
    if (id < vocab.size() && seen[id]) continue;
    for (std::size_t k = 0; k < dim; ++k) {
      t.vectors(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(id)) = unit(rng) * half_width(static_cast<Eigen::Index>(k));
    }
  }
  spdlog::info("pretrained embeddings: {} / {} words covered (dim {})", t.covered, t.vocab_size, dim);
  return t;
}

EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path,
                                          const Vocabulary& vocab, Rng& rng) {
  return parse_pretrained_embeddings(read_file(path), vocab, rng);
}

// ---------------------------------------------------------------------------
// Feature files

namespace {

constexpr char kFeatureMagic[8] = {'M', 'P', 'O', 'S', 'M', 'F', 'E', 'A'};
constexpr std::uint32_t kFeatureVersion = 1;

}  // namespace

std::span<const float> FeatureFile::vector(std::size_t sentence, std::size_t token) const {
  std::size_t row = sentence_offsets.at(sentence) + token;
  return {data.data() + row * dimension, dimension};
}

void write_feature_file(const std::filesystem::path& path, const Corpus& corpus,
                        std::size_t dimension, std::span<const float> data) {
  if (dimension == 0 || data.size() != corpus.token_count() * dimension) {
    throw std::invalid_argument("feature data does not match corpus token count x dimension");
  }
  nlohmann::json manifest;
  manifest["corpus"] = corpus.name();
  manifest["tokens"] = corpus.token_count();
  manifest["dim"] = dimension;
  std::vector<std::size_t> lengths;
  for (const auto& s : corpus.sentences()) lengths.push_back(s.size());
  manifest["sentence_lengths"] = lengths;
  std::string m = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out.write(kFeatureMagic, 8);
  auto put_u32 = [&out](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(kFeatureVersion);
  put_u32(static_cast<std::uint32_t>(m.size()));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

FeatureFile load_feature_file(const std::filesystem::path& path, const Corpus& corpus) {
  std::string raw = read_file(path);
  auto fail = [&](const std::string& why) {
    return std::runtime_error(fmt::format("feature file '{}': {}", path.string(), why));
  };
  if (raw.size() < 16 || std::memcmp(raw.data(), kFeatureMagic, 8) != 0) throw fail("bad magic");
  auto get_u32 = [&raw](std::size_t off) {
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(raw[off + k]);
    return v;
  };
  if (get_u32(8) != kFeatureVersion) throw fail("unsupported version");
  std::size_t mlen = get_u32(12);
  if (raw.size() < 16 + mlen) throw fail("truncated manifest");
  auto manifest = nlohmann::json::parse(raw.substr(16, mlen));

  FeatureFile f;
  f.corpus_name = manifest.at("corpus").get<std::string>();
  f.dimension = manifest.at("dim").get<std::size_t>();
  auto tokens = manifest.at("tokens").get<std::size_t>();
  auto lengths = manifest.at("sentence_lengths").get<std::vector<std::size_t>>();
  if (f.dimension == 0) throw fail("zero dimension");
  if (std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}) != tokens) {
    throw fail("manifest token count disagrees with its sentence lengths");
  }
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (i >= lengths.size() || lengths[i] != corpus[i].size()) {
      throw fail(fmt::format("misaligned at sentence {} (corpus has {} tokens, file has {})", i,
                             corpus[i].size(), i < lengths.size() ? std::to_string(lengths[i]) : "none"));
    }
  }
  if (lengths.size() != corpus.size()) {
    throw fail(fmt::format("misaligned at sentence {} (file has extra sentences)", corpus.size()));
  }
  if (tokens != corpus.token_count()) throw fail("token count mismatch");
  std::size_t payload = raw.size() - 16 - mlen;
  if (payload != tokens * f.dimension * sizeof(float)) throw fail("payload size mismatch");
  f.data.resize(tokens * f.dimension);
  std::memcpy(f.data.data(), raw.data() + 16 + mlen, payload);
  std::size_t off = 0;
  for (auto len : lengths) {
    f.sentence_offsets.push_back(off);
    off += len;
  }
  return f;
}

}  // namespace mposm
