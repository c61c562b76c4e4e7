#include "mposm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace mposm::eval {

namespace {

double entropy(const std::map<std::vector<std::string>, std::size_t>& counts, double n) {
  double h = 0.0;
  for (const auto& [k, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

// Majority label with lexicographic tie-break (std::map iterates in order).
std::pair<std::string, std::size_t> majority(const std::map<std::string, std::size_t>& counts) {
  std::pair<std::string, std::size_t> best{"", 0};
  for (const auto& [tag, c] : counts) {
    if (c > best.second) best = {tag, c};
  }
  return best;
}

}  // namespace

nlohmann::json M1Result::to_json() const {
  nlohmann::json j;
  j["accuracy"] = accuracy;
  j["correct"] = correct;
  j["total"] = total;
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [c, t] : mapping) m[std::to_string(c)] = t;
  j["mapping"] = m;
  nlohmann::json conf = nlohmann::json::object();
  for (const auto& [c, row] : confusion) conf[std::to_string(c)] = row;
  j["confusion"] = conf;
  return j;
}

M1Result many_to_one(std::span<const int> pred, std::span<const std::string> gold) {
  if (pred.size() != gold.size()) {
    throw std::invalid_argument(
        fmt::format("prediction has {} tokens but gold has {}", pred.size(), gold.size()));
  }
  if (pred.empty()) throw std::invalid_argument("M-1 needs at least one token");
  M1Result r;
  for (std::size_t i = 0; i < pred.size(); ++i) ++r.confusion[pred[i]][gold[i]];
  for (const auto& [c, row] : r.confusion) {
    auto [tag, count] = majority(row);
    r.mapping[c] = tag;
    r.correct += count;
  }
  r.total = pred.size();
  r.accuracy = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

M1Result many_to_one(const TagAssignment& pred, const Corpus& gold) {
  if (!gold.has_gold()) throw std::invalid_argument("corpus has no gold tags");
  if (pred.tags.size() != gold.size()) {
    throw std::invalid_argument(fmt::format("prediction has {} sentences but corpus has {}",
                                            pred.tags.size(), gold.size()));
  }
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (pred.tags[s].size() != gold[s].size()) {
      throw std::invalid_argument(fmt::format("sentence {} length mismatch", s));
    }
  }
  auto flat = pred.flat();
  auto g = gold.flat_gold();
  return many_to_one(flat, g);
}

double m1_upper_bound(const Corpus& gold) {
  if (!gold.has_gold()) throw std::invalid_argument("corpus has no gold tags");
  std::map<std::string, std::map<std::string, std::size_t>> by_word;
  for (const auto& s : gold.sentences()) {
    for (std::size_t i = 0; i < s.size(); ++i) ++by_word[s.words[i]][(*s.gold_tags)[i]];
  }
  std::size_t correct = 0;
  for (const auto& [w, row] : by_word) correct += majority(row).second;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(gold.token_count());
}

nlohmann::json MIReport::to_json() const {
  nlohmann::json j;
  j["context"] = offsets;
  j["mi"] = mi;
  j["unit"] = log_base == 0.0 ? std::string("nats") : fmt::format("log{}", log_base);
  j["entropy_z"] = entropy_z;
  j["entropy_context"] = entropy_context;
  j["positions"] = positions;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [k, c] : joint) {
    std::vector<std::string> ctx(k.begin(), k.end() - 1);
    rows.push_back({{"context", ctx}, {"tag", k.back()}, {"count", c}});
  }
  j["joint_counts"] = rows;
  return j;
}

std::vector<int> parse_offsets(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) throw std::invalid_argument(fmt::format("bad context spec '{}'", s));
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument(fmt::format("bad context offset '{}'", item));
    }
    if (used != item.size()) throw std::invalid_argument(fmt::format("bad context offset '{}'", item));
    if (v == 0) throw std::invalid_argument("context offset 0 is the tag itself");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty context spec");
  return out;
}

MIReport tag_mutual_information(const std::vector<std::vector<std::string>>& tags,
                                std::span<const int> offsets, double log_base) {
  if (offsets.empty()) throw std::invalid_argument("empty context spec");
  MIReport r;
  r.offsets.assign(offsets.begin(), offsets.end());
  r.log_base = log_base;
  const int lo = std::min(0, *std::min_element(offsets.begin(), offsets.end()));
  const int hi = std::max(0, *std::max_element(offsets.begin(), offsets.end()));
  std::map<std::vector<std::string>, std::size_t> ctx_counts, z_counts;
  for (const auto& sent : tags) {
    const int n = static_cast<int>(sent.size());
    for (int i = -lo; i + hi < n; ++i) {
      std::vector<std::string> key;
      key.reserve(offsets.size() + 1);
      for (int o : offsets) key.push_back(sent[i + o]);
      ++ctx_counts[key];
      ++z_counts[{sent[i]}];
      key.push_back(sent[i]);
      ++r.joint[key];
      ++r.positions;
    }
  }
  if (r.positions == 0) {
    throw std::invalid_argument("no position has a complete context window");
  }
  const double n = static_cast<double>(r.positions);
  r.entropy_z = entropy(z_counts, n);
  r.entropy_context = entropy(ctx_counts, n);
  double mi = 0.0;
  for (const auto& [k, c] : r.joint) {
    std::vector<std::string> ctx(k.begin(), k.end() - 1);
    const double pj = static_cast<double>(c) / n;
    const double pc = static_cast<double>(ctx_counts.at(ctx)) / n;
    const double pz = static_cast<double>(z_counts.at({k.back()})) / n;
    mi += pj * std::log(pj / (pc * pz));
  }
  r.mi = std::max(0.0, mi);
  if (log_base > 0.0) {
    const double d = std::log(log_base);
    r.mi /= d;
    r.entropy_z /= d;
    r.entropy_context /= d;
  }
  return r;
}

MIReport tag_mutual_information(const Corpus& gold, std::span<const int> offsets, double log_base) {
  if (!gold.has_gold()) throw std::invalid_argument("corpus has no gold tags");
  std::vector<std::vector<std::string>> tags;
  tags.reserve(gold.size());
  for (const auto& s : gold.sentences()) tags.push_back(*s.gold_tags);
  return tag_mutual_information(tags, offsets, log_base);
}

nlohmann::json ClusterReport::to_json() const {
  nlohmann::json j;
  j["tokens"] = tokens;
  j["small_threshold"] = small_threshold;
  j["small_predicted"] = small_predicted;
  j["small_gold"] = small_gold;
  nlohmann::json cl = nlohmann::json::array();
  for (const auto& c : clusters) {
    cl.push_back({{"id", c.id}, {"size", c.size}, {"majority", c.majority},
                  {"majority_count", c.majority_count}, {"purity", c.purity}});
  }
  j["clusters"] = cl;
  j["gold_sizes"] = gold_sizes;
  j["unrecovered_gold"] = unrecovered_gold;
  nlohmann::json conf = nlohmann::json::array();
  for (const auto& c : conflicts) {
    conf.push_back({{"word", c.word}, {"predicted", c.predicted}, {"gold_counts", c.gold_counts}});
  }
  j["conflicts"] = conf;
  return j;
}

std::string ClusterReport::histogram_csv() const {
  std::string out = "kind,label,size\n";
  for (const auto& c : clusters) out += fmt::format("predicted,{},{}\n", c.id, c.size);
  for (const auto& [t, n] : gold_sizes) out += fmt::format("gold,{},{}\n", t, n);
  return out;
}

std::string ClusterReport::summary() const {
  std::string out;
  out += fmt::format("{} tokens, {} predicted clusters, {} gold tags\n", tokens, clusters.size(),
                     gold_sizes.size());
  out += fmt::format("clusters below {} tokens: predicted {}/{}, gold {}/{}\n", small_threshold,
                     small_predicted, clusters.size(), small_gold, gold_sizes.size());
  for (const auto& c : clusters) {
    out += fmt::format("  cluster {:>3}  size {:>8}  majority {:<8} purity {:.3f}\n", c.id, c.size,
                       c.majority, c.purity);
  }
  if (!unrecovered_gold.empty()) {
    out += "gold tags with no majority cluster:";
    for (const auto& t : unrecovered_gold) out += " " + t;
    out += "\n";
  }
  out += fmt::format("word types with several gold tags but one predicted tag: {}\n", conflicts.size());
  return out;
}

ClusterReport cluster_report(const TagAssignment& pred, const Corpus& gold, std::size_t small_threshold) {
  auto m1 = many_to_one(pred, gold);
  ClusterReport r;
  r.small_threshold = small_threshold;
  r.tokens = m1.total;
  for (const auto& [id, row] : m1.confusion) {
    ClusterInfo c;
    c.id = id;
    for (const auto& [t, n] : row) c.size += n;
    std::tie(c.majority, c.majority_count) = majority(row);
    c.purity = static_cast<double>(c.majority_count) / static_cast<double>(c.size);
    if (c.size < small_threshold) ++r.small_predicted;
    r.clusters.push_back(c);
  }
  for (const auto& s : gold.sentences()) {
    for (const auto& t : *s.gold_tags) ++r.gold_sizes[t];
  }
  for (const auto& [t, n] : r.gold_sizes) {
    if (n < small_threshold) ++r.small_gold;
    bool found = std::any_of(r.clusters.begin(), r.clusters.end(),
                             [&](const ClusterInfo& c) { return c.majority == t; });
    if (!found) r.unrecovered_gold.push_back(t);
  }

  std::map<std::string, std::map<std::string, std::size_t>> gold_by_word;
  std::map<std::string, std::set<int>> pred_by_word;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    const auto& sent = gold[s];
    for (std::size_t i = 0; i < sent.size(); ++i) {
      ++gold_by_word[sent.words[i]][(*sent.gold_tags)[i]];
      pred_by_word[sent.words[i]].insert(pred.tags[s][i]);
    }
  }
  for (const auto& [w, row] : gold_by_word) {
    const auto& p = pred_by_word[w];
    if (row.size() > 1 && p.size() == 1) r.conflicts.push_back({w, *p.begin(), row});
  }
  return r;
}

double percent_perfect(std::span<const double> m1_scores) {
  if (m1_scores.empty()) throw std::invalid_argument("no scores");
  auto perfect = std::count_if(m1_scores.begin(), m1_scores.end(),
                               [](double s) { return std::abs(s - 100.0) <= 1e-9; });
  return 100.0 * static_cast<double>(perfect) / static_cast<double>(m1_scores.size());
}

double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace mposm::eval
