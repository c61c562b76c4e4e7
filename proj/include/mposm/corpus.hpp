#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mposm {

using Rng = std::mt19937_64;

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Sentence {
  std::vector<std::string> words;
  std::optional<std::vector<std::string>> gold_tags;

  std::size_t size() const { return words.size(); }
  bool has_gold() const { return gold_tags.has_value(); }
  bool operator==(const Sentence&) const = default;
};

// An ordered, non-empty list of sentences. Immutable by convention once built.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::string name, std::vector<Sentence> sentences);

  const std::string& name() const { return name_; }
  const std::vector<Sentence>& sentences() const { return sentences_; }
  const Sentence& operator[](std::size_t i) const { return sentences_[i]; }
  std::size_t size() const { return sentences_.size(); }
  std::size_t token_count() const { return token_count_; }
  bool empty() const { return sentences_.empty(); }
  // True when every sentence carries gold tags.
  bool has_gold() const;

  std::vector<std::string> flat_words() const;
  std::vector<std::string> flat_gold() const;

  bool operator==(const Corpus& other) const { return sentences_ == other.sentences_; }

 private:
  std::string name_;
  std::vector<Sentence> sentences_;
  std::size_t token_count_ = 0;
};

enum class CorpusFormat { two_column_tsv, words_only };

CorpusFormat parse_corpus_format(const std::string& s);
std::string to_string(CorpusFormat f);

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);
Corpus parse_corpus(const std::string& text, CorpusFormat format, const std::string& name);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format);
std::string format_corpus(const Corpus& corpus, CorpusFormat format);

class Vocabulary {
 public:
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kMask = "<mask>";

  Vocabulary() = default;
  static Vocabulary build(const Corpus& corpus);
  // Rebuilds a vocabulary from its id-ordered word list and counts.
  static Vocabulary from_counts(const std::vector<std::string>& words,
                                const std::vector<std::uint64_t>& counts);
  std::vector<std::uint64_t> counts() const { return counts_; }

  // Number of word types excluding unk. Word ids are 0..size()-1; unk_id() == size().
  std::size_t size() const { return words_.size(); }
  std::size_t size_with_unk() const { return words_.size() + 1; }
  int unk_id() const { return static_cast<int>(words_.size()); }
  int id(const std::string& word) const;
  bool contains(const std::string& word) const { return word_to_id_.count(word) > 0; }
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  std::uint64_t count(int id) const;
  std::uint64_t total_tokens() const { return total_tokens_; }
  // Empirical P(x) for the real word types; unk has probability zero.
  double probability(int id) const;
  std::vector<double> probabilities() const;

  // Characters: id 0 is reserved for unseen characters.
  std::size_t char_size() const { return chars_.size() + 1; }
  int char_id(char32_t c) const;
  std::vector<int> encode_chars(const std::string& word) const;

  // FNV-1a over the id-ordered word list; used to guard checkpoint reuse.
  std::uint64_t hash() const;

  std::vector<int> encode(const Sentence& s) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> word_to_id_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_tokens_ = 0;
  std::vector<char32_t> chars_;
  std::unordered_map<char32_t, int> char_to_id_;
};

// Decodes UTF-8 into code points; invalid bytes decode to U+FFFD.
std::vector<char32_t> utf8_decode(const std::string& s);

// Concatenates all sentences and re-splits the token stream at random
// boundaries. Chunk lengths are drawn with replacement from the corpus's
// sentence-length distribution; the final chunk may be shorter.
Corpus rechunk(const Corpus& corpus, Rng& rng);
// Variant with a fixed list of chunk lengths (used cyclically).
Corpus rechunk_with_lengths(const Corpus& corpus, std::span<const std::size_t> lengths);
Corpus combine(const Corpus& original, const Corpus& rechunked);

struct EmbeddingTable {
  Eigen::MatrixXd vectors;  // d x (|vocab| + 1), column unk_id is unk
  std::size_t dimension = 0;
  std::size_t covered = 0;  // vocabulary words found in the file
  std::size_t vocab_size = 0;
  std::size_t duplicates = 0;
  double coverage() const {
    return vocab_size == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(vocab_size);
  }
};

EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path,
                                          const Vocabulary& vocab, Rng& rng);
EmbeddingTable parse_pretrained_embeddings(const std::string& text, const Vocabulary& vocab,
                                           Rng& rng);

// Per-token dense vectors aligned with a corpus.
struct FeatureFile {
  std::string corpus_name;
  std::size_t dimension = 0;
  // Row-major float32 data, one row per corpus token in corpus order.
  std::vector<float> data;
  std::vector<std::size_t> sentence_offsets;  // token offset of each sentence

  std::size_t token_count() const { return dimension == 0 ? 0 : data.size() / dimension; }
  std::span<const float> vector(std::size_t sentence, std::size_t token) const;
};

// Binary container: magic "MPOSMFEA", u32 version, u32 manifest length, JSON
// manifest {corpus, tokens, dim, sentence_lengths}, then float32 LE rows.
FeatureFile load_feature_file(const std::filesystem::path& path, const Corpus& corpus);
void write_feature_file(const std::filesystem::path& path, const Corpus& corpus,
                        std::size_t dimension, std::span<const float> data);

}  // namespace mposm
