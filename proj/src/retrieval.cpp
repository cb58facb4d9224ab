#include "sparseloc/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace sparseloc::eval {

double distance_sq(const Descriptor& a, const Descriptor& b) {
  if (a.size() != b.size()) throw shape_error("descriptor length mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc;
}

void RetrievalIndex::validate() const {
  std::unordered_set<std::string> ids;
  for (const IndexEntry& e : entries) {
    if (!ids.insert(e.cloud_id).second)
      throw config_error("retrieval index: duplicate cloud_id " + e.cloud_id);
    if (e.descriptor.size() != entries.front().descriptor.size())
      throw shape_error("retrieval index: descriptor length mismatch");
  }
}

namespace {

struct Ranked {
  double dist_sq;
  std::size_t entry;
};

// full candidate ranking for one query, (distance, cloud_id) ascending
std::vector<Ranked> rank_candidates(const Descriptor& q,
                                    const RetrievalIndex& index,
                                    const std::unordered_set<std::string>& excluded,
                                    const std::string& self_id,
                                    const std::string& same_run) {
  std::vector<Ranked> ranked;
  ranked.reserve(index.entries.size());
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const IndexEntry& e = index.entries[i];
    if (!self_id.empty() && e.cloud_id == self_id) continue;
    if (!same_run.empty() && e.run_id == same_run) continue;
    if (excluded.count(e.cloud_id)) continue;
    ranked.push_back({distance_sq(q, e.descriptor), i});
  }
  std::sort(ranked.begin(), ranked.end(),
            [&](const Ranked& a, const Ranked& b) {
              if (a.dist_sq != b.dist_sq) return a.dist_sq < b.dist_sq;
              return index.entries[a.entry].cloud_id <
                     index.entries[b.entry].cloud_id;
            });
  return ranked;
}

}  // namespace

std::vector<std::string> match_query(
    const Descriptor& q, const RetrievalIndex& index, int X,
    const std::unordered_set<std::string>& excluded) {
  if (X < 1) throw config_error("match_query: X must be >= 1");
  const std::vector<Ranked> ranked = rank_candidates(q, index, excluded, "", "");
  if (ranked.size() < std::size_t(X))
    throw config_error("match_query: database has fewer than X candidates");
  std::vector<std::string> out;
  out.reserve(std::size_t(X));
  for (int i = 0; i < X; ++i)
    out.push_back(index.entries[ranked[std::size_t(i)].entry].cloud_id);
  return out;
}

RecallReport recall_at(const std::vector<Query>& queries,
                       const RetrievalIndex& index, const EvalConfig& cfg) {
  cfg.validate();
  index.validate();
  if (queries.empty()) throw config_error("recall_at: no queries");
  if (index.entries.empty()) throw config_error("recall_at: empty index");

  RecallReport report;
  std::vector<std::size_t> hits_at_x(cfg.x_values.size(), 0);
  std::size_t hits_1pct = 0;
  double pool_sum = 0;
  const std::unordered_set<std::string> no_extra;

  for (const Query& q : queries) {
    const std::vector<Ranked> ranked =
        rank_candidates(q.descriptor, index, no_extra, q.cloud_id,
                        cfg.exclude_same_run ? q.run_id : std::string());
    if (ranked.empty())
      throw config_error("recall_at: query " + q.cloud_id +
                         " has an empty candidate pool");
    pool_sum += double(ranked.size());

    // success of the top-k prefix is monotone; precompute the first hit rank
    std::size_t first_hit = ranked.size();
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const IndexEntry& e = index.entries[ranked[r].entry];
      const double dn = e.northing - q.northing;
      const double de = e.easting - q.easting;
      if (std::sqrt(dn * dn + de * de) <= cfg.threshold_c) {
        first_hit = r;
        break;
      }
    }
    for (std::size_t xi = 0; xi < cfg.x_values.size(); ++xi) {
      const std::size_t topk =
          std::min(ranked.size(), std::size_t(cfg.x_values[xi]));
      if (first_hit < topk) ++hits_at_x[xi];
    }
    const std::size_t x1pct = std::max<std::size_t>(
        1, std::size_t(std::ceil(0.01 * double(ranked.size()))));
    if (first_hit < x1pct) ++hits_1pct;

    QueryDetail d;
    d.cloud_id = q.cloud_id;
    const IndexEntry& top = index.entries[ranked[0].entry];
    d.rank1_id = top.cloud_id;
    const double dn = top.northing - q.northing;
    const double de = top.easting - q.easting;
    d.rank1_dist_m = std::sqrt(dn * dn + de * de);
    d.success_at_1 = first_hit == 0;
    report.details.push_back(std::move(d));
  }

  const double nq = double(queries.size());
  for (std::size_t xi = 0; xi < cfg.x_values.size(); ++xi)
    report.ar_at_x.push_back({cfg.x_values[xi], double(hits_at_x[xi]) / nq});
  report.ar_at_1pct = double(hits_1pct) / nq;
  report.mean_effective_db = pool_sum / nq;
  return report;
}

}  // namespace sparseloc::eval
