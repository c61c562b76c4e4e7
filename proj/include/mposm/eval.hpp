#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mposm/corpus.hpp"
#include "mposm/model.hpp"

namespace mposm::eval {

struct M1Result {
  double accuracy = 0.0;  // percent
  std::size_t correct = 0;
  std::size_t total = 0;
  std::map<int, std::string> mapping;
  std::map<int, std::map<std::string, std::size_t>> confusion;

  nlohmann::json to_json() const;
};

// Greedy many-to-one: each predicted cluster maps to its most frequent gold
// tag; ties go to the lexicographically smallest tag.
M1Result many_to_one(std::span<const int> pred, std::span<const std::string> gold);
M1Result many_to_one(const TagAssignment& pred, const Corpus& gold);

// M-1 of the clustering that gives every word type its own cluster.
double m1_upper_bound(const Corpus& gold);

struct MIReport {
  std::vector<int> offsets;
  double mi = 0.0;  // in units of `log_base` (natural log by default)
  double entropy_z = 0.0;
  double entropy_context = 0.0;
  std::size_t positions = 0;
  double log_base = 0.0;  // 0 means natural log
  // (context tags..., tag) -> count
  std::map<std::vector<std::string>, std::size_t> joint;

  nlohmann::json to_json() const;
};

// Parses "-2,-1" style offset lists. Offsets must be non-zero.
std::vector<int> parse_offsets(const std::string& s);

// Plug-in I(context; z_i) from exact counts. Positions whose context window
// leaves the sentence are skipped.
MIReport tag_mutual_information(const std::vector<std::vector<std::string>>& tags,
                                std::span<const int> offsets, double log_base = 0.0);
MIReport tag_mutual_information(const Corpus& gold, std::span<const int> offsets,
                                double log_base = 0.0);

struct ClusterInfo {
  int id = 0;
  std::size_t size = 0;
  std::string majority;
  std::size_t majority_count = 0;
  double purity = 0.0;
};

struct TagConflict {
  std::string word;
  int predicted = 0;
  std::map<std::string, std::size_t> gold_counts;
};

struct ClusterReport {
  std::vector<ClusterInfo> clusters;          // by cluster id
  std::map<std::string, std::size_t> gold_sizes;
  std::size_t small_threshold = 3000;
  std::size_t small_predicted = 0;            // predicted clusters below the threshold
  std::size_t small_gold = 0;                 // gold clusters below the threshold
  std::vector<std::string> unrecovered_gold;  // gold tags that are no cluster's majority
  std::vector<TagConflict> conflicts;
  std::size_t tokens = 0;

  nlohmann::json to_json() const;
  // Rows: kind,label,size (kind is "predicted" or "gold").
  std::string histogram_csv() const;
  std::string summary() const;
};

ClusterReport cluster_report(const TagAssignment& pred, const Corpus& gold,
                             std::size_t small_threshold = 3000);

// Percent of scores equal to 100 (within 1e-9).
double percent_perfect(std::span<const double> m1_scores);
double mean(std::span<const double> xs);
// Sample standard deviation; zero for fewer than two values.
double sample_std(std::span<const double> xs);

}  // namespace mposm::eval
