#include "sparseloc/quantizer.hpp"

#include <algorithm>
#include <unordered_map>

namespace sparseloc::quant {

void QuantConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(step[a] > 0)) throw config_error("quantizer: step must be > 0");
    if (!(bound_min[a] < bound_max[a]))
      throw config_error("quantizer: bound min must be < max");
    if (bins(a) > 0xffff)
      throw config_error("quantizer: more than 65536 bins on one axis "
                         "exceeds the coordinate hash budget");
  }
  if (mode == Mode::spherical) {
    if (bound_min[0] < 0) throw config_error("quantizer: r min must be >= 0");
    if (bound_min[1] < -180.0 || bound_max[1] > 180.0)
      throw config_error("quantizer: theta bounds must lie in [-180, 180]");
    if (bound_min[2] < -90.0 || bound_max[2] > 90.0)
      throw config_error("quantizer: phi bounds must lie in [-90, 90]");
  }
}

namespace {

struct KeyHash {
  std::size_t operator()(std::uint64_t k) const {
    return static_cast<std::size_t>(mix64(k));
  }
};

}  // namespace

template <typename T>
SparseTensor<T> quantize(const PointCloud& cloud, const QuantConfig& cfg,
                         std::int32_t batch, Rng& rng) {
  cfg.validate();
  if (batch < 0 || batch > 0xffff)
    throw config_error("quantize: batch index out of range");
  if (cloud.points.size() != cloud.intensities.size())
    throw shape_error("quantize: points/intensities length mismatch");

  // cuboid -> intensities of the points that fell into it
  std::unordered_map<std::uint64_t, std::vector<double>, KeyHash> cells;
  cells.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::array<double, 3> val;
    if (cfg.mode == Mode::spherical) {
      const Spherical s = to_spherical(cloud.points[i]);
      // +180 is the same azimuth as -180; fold it onto the seam bin.
      val = {s.r, s.theta == 180.0 ? -180.0 : s.theta, s.phi};
    } else {
      val = {cloud.points[i].x, cloud.points[i].y, cloud.points[i].z};
    }
    Coord c;
    c.b = batch;
    const std::int32_t i1 = cuboid_index(val[0], cfg.bound_min[0], cfg.bound_max[0], cfg.step[0]);
    const std::int32_t i2 = cuboid_index(val[1], cfg.bound_min[1], cfg.bound_max[1], cfg.step[1]);
    const std::int32_t i3 = cuboid_index(val[2], cfg.bound_min[2], cfg.bound_max[2], cfg.step[2]);
    if (i1 == kOutOfBounds || i2 == kOutOfBounds || i3 == kOutOfBounds) continue;
    c.i1 = i1;
    c.i2 = i2;
    c.i3 = i3;
    std::uint64_t key;
    if (!pack_coord(c, key)) throw shape_error("quantize: coordinate overflow");
    cells[key].push_back(cfg.intensity_enabled ? cloud.intensities[i] : 1.0);
  }
  if (cells.empty())
    throw data_error("quantize: all points fell outside the configured bounds");

  std::vector<std::uint64_t> keys;
  keys.reserve(cells.size());
  for (const auto& kv : cells) keys.push_back(kv.first);
  std::sort(keys.begin(), keys.end());

  SparseTensor<T> out;
  out.stride = {1, 1, 1};
  out.coords.reserve(keys.size());
  out.feats = FeatMat<T>(keys.size(), 1);
  for (std::size_t row = 0; row < keys.size(); ++row) {
    const std::uint64_t key = keys[row];
    out.coords.push_back({static_cast<std::int32_t>(key >> 48),
                          static_cast<std::int32_t>((key >> 32) & 0xffff),
                          static_cast<std::int32_t>((key >> 16) & 0xffff),
                          static_cast<std::int32_t>(key & 0xffff)});
    std::vector<double>& vals = cells[key];
    double feature;
    if (!cfg.intensity_enabled) {
      feature = 1.0;
    } else if (vals.size() == 1) {
      feature = vals[0];
    } else {
      std::sort(vals.begin(), vals.end());
      if (cfg.dedup == DedupPolicy::average) {
        double acc = 0;
        for (const double v : vals) acc += v;
        feature = acc / static_cast<double>(vals.size());
      } else {
        feature = vals[rng.uniform_index(vals.size())];
      }
    }
    out.feats.at(row, 0) = static_cast<T>(feature);
  }
  return out;
}

template SparseTensor<float> quantize<float>(const PointCloud&, const QuantConfig&,
                                             std::int32_t, Rng&);
template SparseTensor<double> quantize<double>(const PointCloud&, const QuantConfig&,
                                               std::int32_t, Rng&);

PointCloud max_range_filter(const PointCloud& cloud, double max_r) {
  if (!(max_r > 0)) throw config_error("max_range_filter: max_r must be > 0");
  PointCloud out;
  out.points.reserve(cloud.size());
  out.intensities.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3& p = cloud.points[i];
    if (std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z) <= max_r) {
      out.points.push_back(p);
      out.intensities.push_back(cloud.intensities[i]);
    }
  }
  return out;
}

PointCloud random_subsample(const PointCloud& cloud, std::size_t k, Rng& rng) {
  if (k < 1) throw config_error("random_subsample: k must be >= 1");
  if (cloud.size() <= k) return cloud;
  // partial Fisher-Yates over an index vector, then restore input order
  std::vector<std::uint32_t> idx(cloud.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  PointCloud out;
  out.points.reserve(k);
  out.intensities.reserve(k);
  for (const std::uint32_t i : idx) {
    out.points.push_back(cloud.points[i]);
    out.intensities.push_back(cloud.intensities[i]);
  }
  return out;
}

}  // namespace sparseloc::quant
