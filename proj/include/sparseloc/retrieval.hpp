#pragma once

#include <string>
#include <unordered_set>
#include <vector>

#include "sparseloc/common.hpp"

namespace sparseloc::eval {

using Descriptor = std::vector<float>;

/// Squared descriptor distance, accumulated left to right in double so
/// that rankings (and their ties) are reproducible across callers.
double distance_sq(const Descriptor& a, const Descriptor& b);

struct IndexEntry {
  std::string cloud_id;
  Descriptor descriptor;
  double northing = 0, easting = 0;
  std::string run_id;
};

struct RetrievalIndex {
  std::vector<IndexEntry> entries;
  void validate() const;  // unique ids, uniform descriptor length
};

struct EvalConfig {
  double threshold_c = 10.0;          // meters
  std::vector<int> x_values = {1, 5, 10, 25};
  bool exclude_same_run = true;

  void validate() const {
    if (!(threshold_c > 0)) throw config_error("eval: threshold c must be > 0");
    if (x_values.empty()) throw config_error("eval: no X values");
    for (std::size_t i = 0; i < x_values.size(); ++i) {
      if (x_values[i] < 1) throw config_error("eval: X values must be >= 1");
      if (i > 0 && x_values[i] <= x_values[i - 1])
        throw config_error("eval: X values must be sorted ascending");
    }
  }
};

struct Query {
  std::string cloud_id;  // excluded from its own candidate pool
  Descriptor descriptor;
  double northing = 0, easting = 0;
  std::string run_id;
};

/// The X database entries closest to q in descriptor space, ascending,
/// ties broken by cloud_id ascending. Entries whose id is in `excluded`
/// are skipped; fewer than X remaining candidates is an error.
std::vector<std::string> match_query(const Descriptor& q,
                                     const RetrievalIndex& index, int X,
                                     const std::unordered_set<std::string>& excluded);

struct QueryDetail {
  std::string cloud_id;
  std::string rank1_id;
  double rank1_dist_m = 0;  // ground distance to the rank-1 match, meters
  bool success_at_1 = false;
};

struct RecallReport {
  std::vector<std::pair<int, double>> ar_at_x;  // (X, AR@X)
  double ar_at_1pct = 0;
  double mean_effective_db = 0;
  std::vector<QueryDetail> details;
};

/// AR@X over the query set: a query succeeds at X when any of its top-X
/// matches lies within threshold_c meters (inclusive) of its ground-truth
/// position. Each query's candidate pool excludes its own cloud_id and,
/// when exclude_same_run is set, every entry from its run. AR@1% uses
/// X = max(1, ceil(0.01 * pool size)) per query. X values larger than the
/// pool are evaluated over the whole pool.
RecallReport recall_at(const std::vector<Query>& queries,
                       const RetrievalIndex& index, const EvalConfig& cfg);

}  // namespace sparseloc::eval
