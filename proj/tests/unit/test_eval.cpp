#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "mposm/eval.hpp"

using namespace mposm;
using namespace mposm::eval;

namespace {

// Best many-to-one accuracy by trying every map from clusters to gold tags.
std::size_t exhaustive_m1(const std::vector<int>& pred, const std::vector<std::string>& gold) {
  const std::set<int> cluster_set(pred.begin(), pred.end());
  const std::set<std::string> tag_set(gold.begin(), gold.end());
  const std::vector<int> clusters(cluster_set.begin(), cluster_set.end());
  const std::vector<std::string> tags(tag_set.begin(), tag_set.end());
  std::vector<std::size_t> choice(clusters.size(), 0);
  std::size_t best = 0;
  while (true) {
    std::map<int, std::string> m;
    for (std::size_t i = 0; i < clusters.size(); ++i) m[clusters[i]] = tags[choice[i]];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += m[pred[i]] == gold[i];
    best = std::max(best, correct);
    std::size_t k = 0;
    while (k < choice.size() && ++choice[k] == tags.size()) choice[k++] = 0;
    if (k == choice.size()) break;
  }
  return best;
}

// I(context; z) from probabilities written out term by term.
double brute_force_mi(const std::vector<std::vector<std::string>>& tags, const std::vector<int>& offsets) {
  std::vector<std::pair<std::string, std::string>> samples;
  for (const auto& s : tags) {
    const int n = static_cast<int>(s.size());
    for (int i = 0; i < n; ++i) {
      std::string ctx;
      bool ok = true;
      for (int o : offsets) {
        if (i + o < 0 || i + o >= n) {
          ok = false;
          break;
        }
        ctx += s[static_cast<std::size_t>(i + o)] + "|";
      }
      if (ok) samples.emplace_back(ctx, s[static_cast<std::size_t>(i)]);
    }
  }
  std::map<std::pair<std::string, std::string>, double> pj;
  std::map<std::string, double> pc, pz;
  const double n = static_cast<double>(samples.size());
  for (const auto& [c, z] : samples) {
    pj[{c, z}] += 1.0 / n;
    pc[c] += 1.0 / n;
    pz[z] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : pj) mi += p * std::log(p / (pc[k.first] * pz[k.second]));
  return mi;
}

std::vector<std::vector<std::string>> random_tags(std::mt19937_64& g, int sentences, int tagset) {
  std::uniform_int_distribution<int> len(1, 8), tag(0, tagset - 1);
  std::vector<std::vector<std::string>> out;
  for (int s = 0; s < sentences; ++s) {
    std::vector<std::string> t;
    int prev = 0;
    for (int i = 0, l = len(g); i < l; ++i) {
      // Some dependence on the previous tag so the information is not trivially zero.
      prev = (g() % 3 == 0) ? (prev + 1) % tagset : tag(g);
      t.push_back("T" + std::to_string(prev));
    }
    out.push_back(t);
  }
  return out;
}

Corpus tagged(std::vector<std::vector<std::string>> words, std::vector<std::vector<std::string>> tags) {
  std::vector<Sentence> s;
  for (std::size_t i = 0; i < words.size(); ++i) s.push_back({words[i], tags[i]});
  return Corpus("g", std::move(s));
}

}  // namespace

TEST_CASE("M-1 on hand examples") {
  std::vector<std::string> gold{"N", "V", "N", "V"};
  std::vector<int> perfect{1, 0, 1, 0};
  CHECK(many_to_one(perfect, gold).accuracy == 100.0);
  std::vector<int> merged{0, 0, 0, 1};
  auto r = many_to_one(merged, gold);
  CHECK(r.accuracy == 75.0);
  CHECK(r.correct == 3);
  CHECK(r.mapping.at(0) == "N");
  CHECK(r.mapping.at(1) == "V");
  CHECK(r.confusion.at(0).at("V") == 1);
}

TEST_CASE("M-1 ties go to the lexicographically smallest tag") {
  std::vector<std::string> gold{"b", "a", "c", "c"};
  std::vector<int> pred{0, 0, 1, 1};
  auto r = many_to_one(pred, gold);
  CHECK(r.mapping.at(0) == "a");
  CHECK(r.accuracy == 75.0);
}

TEST_CASE("M-1 input validation") {
  std::vector<std::string> gold{"a"};
  std::vector<int> pred{0, 1};
  CHECK_THROWS(many_to_one(pred, gold));
  CHECK_THROWS(many_to_one(std::vector<int>{}, std::vector<std::string>{}));
}

TEST_CASE("greedy M-1 equals exhaustive search, is label-invariant and refinement-monotone") {
  std::mt19937_64 g(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(g() % 30);
    const int k = 1 + static_cast<int>(g() % 4);
    const int t = 1 + static_cast<int>(g() % 3);
    std::vector<int> pred;
    std::vector<std::string> gold;
    for (int i = 0; i < n; ++i) {
      pred.push_back(static_cast<int>(g() % k));
      gold.push_back(std::string(1, static_cast<char>('a' + g() % t)));
    }
    auto r = many_to_one(pred, gold);
    CHECK(r.correct == exhaustive_m1(pred, gold));
    CHECK(r.accuracy == doctest::Approx(100.0 * static_cast<double>(r.correct) / n));

    // Relabel clusters with a random permutation.
    std::vector<int> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), g);
    std::vector<int> relabeled;
    for (int p : pred) relabeled.push_back(perm[static_cast<std::size_t>(p)]);
    CHECK(many_to_one(relabeled, gold).correct == r.correct);

    // Splitting a cluster never lowers M-1.
    std::vector<int> refined = pred;
    for (std::size_t i = 0; i < refined.size(); ++i) {
      if (refined[i] == 0 && g() % 2) refined[i] = 10;
    }
    CHECK(many_to_one(refined, gold).correct >= r.correct);
  }
}

TEST_CASE("upper bound uses per-type majority tags") {
  auto c = tagged({{"a", "a", "b"}, {"a", "b"}}, {{"X", "X", "Y"}, {"Y", "Y"}});
  CHECK(m1_upper_bound(c) == doctest::Approx(80.0));
  auto clean = tagged({{"a", "b"}}, {{"X", "Y"}});
  CHECK(m1_upper_bound(clean) == 100.0);
}

TEST_CASE("offset parsing") {
  CHECK(parse_offsets("-2,-1") == std::vector<int>{-2, -1});
  CHECK(parse_offsets(" 1 , -1 ") == std::vector<int>{1, -1});
  CHECK_THROWS(parse_offsets("0"));
  CHECK_THROWS(parse_offsets(""));
  CHECK_THROWS(parse_offsets("x"));
}

TEST_CASE("mutual information equals a brute-force computation") {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto tags = random_tags(g, 300 + trial * 40, 2 + trial % 4);
    for (const std::vector<int>& offsets : {std::vector<int>{-1}, std::vector<int>{-2, -1},
                                            std::vector<int>{1}, std::vector<int>{-1, 1}}) {
      auto r = tag_mutual_information(tags, offsets);
      CHECK(std::abs(r.mi - brute_force_mi(tags, offsets)) < 1e-9);
      CHECK(r.mi >= 0.0);
      CHECK(r.mi <= r.entropy_z + 1e-12);
    }
  }
}

TEST_CASE("mutual information: ln 2 for a deterministic binary pattern") {
  std::vector<std::vector<std::string>> tags;
  for (int i = 0; i < 500; ++i) {
    tags.push_back({"A", "B"});
    tags.push_back({"B", "A"});
  }
  std::vector<int> prev{-1};
  auto r = tag_mutual_information(tags, prev);
  CHECK(std::abs(r.mi - std::log(2.0)) < 1e-6);
  CHECK(r.positions == 1000);
  auto bits = tag_mutual_information(tags, prev, 2.0);
  CHECK(std::abs(bits.mi - 1.0) < 1e-6);
}

TEST_CASE("mutual information is near zero for independent tags") {
  std::mt19937_64 g(1);
  std::vector<std::vector<std::string>> tags;
  for (int s = 0; s < 100000; ++s) {
    std::vector<std::string> t;
    for (int i = 0; i < 10; ++i) t.push_back("T" + std::to_string(g() % 4));
    tags.push_back(std::move(t));
  }
  std::vector<int> prev{-1};
  CHECK(tag_mutual_information(tags, prev).mi <= 0.01);
}

TEST_CASE("adding a context offset never lowers the information") {
  std::mt19937_64 g(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto tags = random_tags(g, 400, 3);
    for (int far : {-2, -3}) {
      std::vector<int> small{far}, big{far, -1};
      CHECK(tag_mutual_information(tags, big).mi >= tag_mutual_information(tags, small).mi - 1e-12);
    }
  }
}

TEST_CASE("mutual information requires gold tags and some positions") {
  std::vector<int> prev{-1};
  CHECK_THROWS(tag_mutual_information(Corpus("w", {Sentence{{"a", "b"}, std::nullopt}}), prev));
  std::vector<std::vector<std::string>> one{{"A"}};
  CHECK_THROWS(tag_mutual_information(one, prev));
}

TEST_CASE("cluster report") {
  auto gold = tagged({{"a", "b", "c", "a"}, {"d", "b"}, {"b"}}, {{"N", "V", "N", "N"}, {"D", "V"}, {"N"}});
  TagAssignment pred;
  pred.tags = {{0, 1, 0, 0}, {1, 1}, {1}};
  auto r = cluster_report(pred, gold, 3);
  CHECK(r.tokens == 7);
  REQUIRE(r.clusters.size() == 2);
  CHECK(r.clusters[0].size == 3);
  CHECK(r.clusters[0].majority == "N");
  CHECK(r.clusters[0].purity == 1.0);
  CHECK(r.clusters[1].size == 4);
  CHECK(r.clusters[1].majority == "V");
  CHECK(r.clusters[1].purity == 0.5);
  CHECK(r.gold_sizes.at("N") == 4);
  CHECK(r.small_gold == 2);
  CHECK(r.small_predicted == 0);
  CHECK(r.unrecovered_gold == std::vector<std::string>{"D"});
  REQUIRE(r.conflicts.size() == 1);
  CHECK(r.conflicts[0].word == "b");
  CHECK(r.conflicts[0].gold_counts.at("V") == 2);
  CHECK(r.histogram_csv().rfind("kind,label,size\n", 0) == 0);
  CHECK(r.to_json().at("tokens") == 7);
  CHECK_FALSE(r.summary().empty());
}

TEST_CASE("aggregate statistics") {
  std::vector<double> xs{100, 100, 100, 100, 90};
  CHECK(mean(xs) == doctest::Approx(98.0));
  CHECK(percent_perfect(xs) == doctest::Approx(80.0));
  CHECK(sample_std(xs) == doctest::Approx(std::sqrt(20.0)));
  std::vector<double> close{100.0 - 1e-10, 99.99};
  CHECK(percent_perfect(close) == 50.0);
  std::vector<double> one{42.0};
  CHECK(sample_std(one) == 0.0);
}
