#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "sparseloc/common.hpp"
#include "sparseloc/rng.hpp"
#include "sparseloc/sparse_tensor.hpp"
#include "sparseloc/types.hpp"

namespace sparseloc::quant {

enum class Mode { cartesian, spherical };
enum class DedupPolicy { random_pick, average };

/// Quantization grid: representation mode, per-axis steps and bounds
/// (meters for x/y/z/r, degrees for theta/phi), intensity switch and the
/// multi-point-per-cuboid resolution policy.
struct QuantConfig {
  Mode mode = Mode::spherical;
  // axis order: (x, y, z) in cartesian mode, (r, theta, phi) in spherical
  std::array<double, 3> step = {2.5, 2.0, 2.0};
  std::array<double, 3> bound_min = {0.0, -180.0, -25.0};
  std::array<double, 3> bound_max = {100.0, 180.0, 25.0};
  bool intensity_enabled = true;
  DedupPolicy dedup = DedupPolicy::random_pick;

  static QuantConfig spherical_default() { return QuantConfig{}; }
  static QuantConfig cartesian_default() {
    QuantConfig c;
    c.mode = Mode::cartesian;
    c.step = {1.0, 1.0, 1.0};
    c.bound_min = {-100.0, -100.0, -30.0};
    c.bound_max = {100.0, 100.0, 30.0};
    return c;
  }

  void validate() const;
  /// Bins along one axis; also checked against the 16-bit coordinate budget.
  std::int64_t bins(int axis) const {
    return static_cast<std::int64_t>(
               std::floor((bound_max[axis] - bound_min[axis]) / step[axis])) +
           1;
  }
};

struct Spherical {
  double r;      // meters
  double theta;  // degrees, atan2(y, x)
  double phi;    // degrees, atan2(z, sqrt(x^2+y^2))
};

/// Range/azimuth/elevation of a point, angles in degrees. atan2(0,0) = 0,
/// so the origin maps to (0, 0, 0).
inline Spherical to_spherical(const Point3& p) {
  const double pi = 3.14159265358979323846;
  const double rho = std::sqrt(p.x * p.x + p.y * p.y);
  return {std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z),
          std::atan2(p.y, p.x) / pi * 180.0, std::atan2(p.z, rho) / pi * 180.0};
}

inline Point3 from_spherical(const Spherical& s) {
  const double pi = 3.14159265358979323846;
  const double th = s.theta / 180.0 * pi;
  const double ph = s.phi / 180.0 * pi;
  return {s.r * std::cos(ph) * std::cos(th), s.r * std::cos(ph) * std::sin(th),
          s.r * std::sin(ph)};
}

inline constexpr std::int32_t kOutOfBounds = std::numeric_limits<std::int32_t>::min();

/// floor((value - axis_min) / step), or kOutOfBounds when value falls
/// outside [axis_min, axis_max). Upper bin boundaries belong to the next
/// bin.
inline std::int32_t cuboid_index(double value, double axis_min, double axis_max,
                                 double step) {
  if (!(value >= axis_min) || !(value < axis_max)) return kOutOfBounds;
  return static_cast<std::int32_t>(std::floor((value - axis_min) / step));
}

/// Converts a cloud to a sparse tensor with one site per occupied cuboid.
/// Feature is the constant 1.0 when intensity is disabled; otherwise the
/// cuboid's intensities are reduced by the dedup policy (uniform random
/// pick for training, arithmetic mean for inference). The rng is consumed
/// only by random_pick and only for cuboids holding more than one point.
/// Intensities within a cuboid are accumulated in sorted order, so the
/// average is bitwise independent of input point order.
template <typename T>
SparseTensor<T> quantize(const PointCloud& cloud, const QuantConfig& cfg,
                         std::int32_t batch, Rng& rng);

/// Keeps points with sqrt(x^2+y^2+z^2) <= max_r.
PointCloud max_range_filter(const PointCloud& cloud, double max_r);

/// Uniform sample without replacement of k points (identity when the cloud
/// has at most k points).
PointCloud random_subsample(const PointCloud& cloud, std::size_t k, Rng& rng);

}  // namespace sparseloc::quant
