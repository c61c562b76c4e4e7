#pragma once

// Controlled agreement datasets: six tags, a small lexicon per tag, and tag
// sequences drawn from one of three fixed tag-level regular expressions.

#include <map>
#include <string>
#include <vector>

#include "mposm/corpus.hpp"

namespace mposm::synth {

enum class Variant { D0, MORPH, D24 };

Variant parse_variant(const std::string& s);  // "d0", "morph", "d24" (case-insensitive)
std::string to_string(Variant v);

inline const std::vector<std::string>& tag_inventory() {
  static const std::vector<std::string> tags = {"n1", "n2", "v1", "v2", "o1", "o2"};
  return tags;
}

struct SyntheticSpec {
  Variant variant = Variant::D0;
  std::size_t n_sentences = 40000;
  std::size_t words_per_tag = 5;
  std::uint64_t seed = 0;
};

using Lexicon = std::map<std::string, std::vector<std::string>>;

// One regex expansion. `agreement` selects the (n1 .. v1) or (n2 .. v2) branch.
struct TagTemplate {
  std::size_t leading_pairs = 1;          // (o1 o2){1,2} prefix
  std::size_t inner_pairs = 0;            // (o1 o2){1,2} between n and v, D24 only
  int agreement = 1;                      // 1 or 2
  std::vector<std::string> expand() const;
};

TagTemplate sample_template(Variant variant, Rng& rng);
std::vector<std::string> sample_tag_sequence(Variant variant, Rng& rng);

Lexicon make_lexicon(const SyntheticSpec& spec);
Corpus generate_dataset(const SyntheticSpec& spec);

// Independent matcher for the three tag-level regular expressions.
bool matches_variant(Variant variant, const std::vector<std::string>& tags);

// JSON sidecar with the generating spec and lexicon.
std::string sidecar_json(const SyntheticSpec& spec, const Lexicon& lexicon);

}  // namespace mposm::synth
