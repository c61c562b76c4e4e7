#include "mposm/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

namespace mposm::synth {

Variant parse_variant(const std::string& s) {
  std::string lower;
  for (char c : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "d0") return Variant::D0;
  if (lower == "morph") return Variant::MORPH;
  if (lower == "d24" || lower == "d2-4") return Variant::D24;
  throw std::invalid_argument(fmt::format("unknown synthetic variant '{}'", s));
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::D0: return "d0";
    case Variant::MORPH: return "morph";
    case Variant::D24: return "d24";
  }
  return "?";
}

std::vector<std::string> TagTemplate::expand() const {
  const std::string n = agreement == 1 ? "n1" : "n2";
  const std::string v = agreement == 1 ? "v1" : "v2";
  std::vector<std::string> tags;
  for (std::size_t i = 0; i < leading_pairs; ++i) {
    tags.push_back("o1");
    tags.push_back("o2");
  }
  tags.push_back(n);
  for (std::size_t i = 0; i < inner_pairs; ++i) {
    tags.push_back("o1");
    tags.push_back("o2");
  }
  tags.push_back(v);
  return tags;
}

TagTemplate sample_template(Variant variant, Rng& rng) {
  std::uniform_int_distribution<int> one_or_two(1, 2);
  TagTemplate t;
  t.leading_pairs = static_cast<std::size_t>(one_or_two(rng));
  t.agreement = one_or_two(rng);
  t.inner_pairs = variant == Variant::D24 ? static_cast<std::size_t>(one_or_two(rng)) : 0;
  return t;
}

std::vector<std::string> sample_tag_sequence(Variant variant, Rng& rng) {
  return sample_template(variant, rng).expand();
}

Lexicon make_lexicon(const SyntheticSpec& spec) {
  if (spec.words_per_tag == 0) throw std::invalid_argument("words_per_tag must be >= 1");
  Rng rng(spec.seed);
  std::uniform_int_distribution<int> length(4, 8);
  std::uniform_int_distribution<int> letter(0, 25);
  std::set<std::string> used = {Vocabulary::kUnk, Vocabulary::kMask};
  Lexicon lex;
  for (const auto& tag : tag_inventory()) {
    auto& words = lex[tag];
    while (words.size() < spec.words_per_tag) {
      std::string w;
      int len = length(rng);
      for (int k = 0; k < len; ++k) w += static_cast<char>('a' + letter(rng));
      if (spec.variant == Variant::MORPH) w += "-" + tag;
      if (used.insert(w).second) words.push_back(std::move(w));
    }
  }
  return lex;
}

Corpus generate_dataset(const SyntheticSpec& spec) {
  std::size_t n = spec.n_sentences;
  if (n == 0) throw std::invalid_argument("n_sentences must be positive");
  if (n % 2 == 1) {
    spdlog::warn("n_sentences {} is odd; rounding up to {} for paired symmetry", n, n + 1);
    ++n;
  }
  const Lexicon lex = make_lexicon(spec);
  // Sentence draws use a stream independent of the lexicon draws.
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, spec.words_per_tag - 1);

  auto realize = [&](const TagTemplate& t) {
    Sentence s;
    s.gold_tags = t.expand();
    for (const auto& tag : *s.gold_tags) s.words.push_back(lex.at(tag)[pick(rng)]);
    return s;
  };

  std::vector<Sentence> sentences;
  sentences.reserve(n);
  for (std::size_t i = 0; i < n / 2; ++i) {
    TagTemplate t = sample_template(spec.variant, rng);
    t.agreement = 1;
    sentences.push_back(realize(t));
    t.agreement = 2;
    sentences.push_back(realize(t));
  }
  return Corpus(fmt::format("synthetic-{}-n{}-s{}", to_string(spec.variant), n, spec.seed),
                std::move(sentences));
}

bool matches_variant(Variant variant, const std::vector<std::string>& tags) {
  static const std::map<std::string, char> code = {{"n1", 'a'}, {"n2", 'b'}, {"v1", 'c'},
                                                   {"v2", 'd'}, {"o1", 'e'}, {"o2", 'f'}};
  std::string s;
  for (const auto& t : tags) {
    auto it = code.find(t);
    if (it == code.end()) return false;
    s += it->second;
  }
  static const std::regex d0("(ef){1,2}(ac|bd)");
  static const std::regex d24("(ef){1,2}(a(ef){1,2}c|b(ef){1,2}d)");
  return std::regex_match(s, variant == Variant::D24 ? d24 : d0);
}

std::string sidecar_json(const SyntheticSpec& spec, const Lexicon& lexicon) {
  nlohmann::ordered_json j;
  j["variant"] = to_string(spec.variant);
  j["n_sentences"] = spec.n_sentences + spec.n_sentences % 2;
  j["words_per_tag"] = spec.words_per_tag;
  j["seed"] = spec.seed;
  nlohmann::ordered_json lex;
  for (const auto& tag : tag_inventory()) lex[tag] = lexicon.at(tag);
  j["lexicon"] = lex;
  return j.dump(2) + "\n";
}

}  // namespace mposm::synth
