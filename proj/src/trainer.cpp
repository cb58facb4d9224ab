#include "sparseloc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sparseloc::train {

PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  PointCloud out = cloud;

  if (cfg.jitter_sigma > 0) {
    for (Point3& p : out.points) {
      p.x += cfg.jitter_sigma * rng.normal();
      p.y += cfg.jitter_sigma * rng.normal();
      p.z += cfg.jitter_sigma * rng.normal();
    }
  }

  if (cfg.removal_fraction > 0 && !out.empty()) {
    const std::size_t remove =
        static_cast<std::size_t>(std::llround(cfg.removal_fraction * double(out.size())));
    if (remove > 0) {
      const std::size_t keep = out.size() - remove;
      std::vector<std::uint32_t> idx(out.size());
      std::iota(idx.begin(), idx.end(), 0u);
      for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t j = i + std::size_t(rng.uniform_index(idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(keep);
      std::sort(idx.begin(), idx.end());
      PointCloud kept;
      kept.points.reserve(keep);
      kept.intensities.reserve(keep);
      for (const std::uint32_t i : idx) {
        kept.points.push_back(out.points[i]);
        kept.intensities.push_back(out.intensities[i]);
      }
      out = std::move(kept);
    }
  }

  if (cfg.translation_range > 0) {
    const double tx = rng.uniform(-cfg.translation_range, cfg.translation_range);
    const double ty = rng.uniform(-cfg.translation_range, cfg.translation_range);
    const double tz = rng.uniform(-cfg.translation_range, cfg.translation_range);
    for (Point3& p : out.points) {
      p.x += tx;
      p.y += ty;
      p.z += tz;
    }
  }

  if (cfg.flip_prob > 0 && rng.bernoulli(cfg.flip_prob)) {
    for (Point3& p : out.points) p.y = -p.y;
  }
  return out;
}

std::vector<std::vector<std::size_t>> group_by_location(
    const std::vector<TrainSample>& samples, double pos_radius) {
  // single-linkage union-find; datasets are desk-scale so O(n^2) is fine
  std::vector<std::size_t> parent(samples.size());
  std::iota(parent.begin(), parent.end(), std::size_t(0));
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      const double dn = samples[i].northing - samples[j].northing;
      const double de = samples[i].easting - samples[j].easting;
      if (std::sqrt(dn * dn + de * de) <= pos_radius) {
        const std::size_t a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::int64_t> group_of(samples.size(), -1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t root = find(i);
    if (group_of[root] < 0) {
      group_of[root] = std::int64_t(groups.size());
      groups.emplace_back();
    }
    groups[std::size_t(group_of[root])].push_back(i);
  }
  return groups;
}

}  // namespace sparseloc::train
