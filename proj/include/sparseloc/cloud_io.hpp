#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sparseloc/types.hpp"

namespace sparseloc::io {

/// Loads a headerless binary scan of little-endian float32 quadruples
/// (x, y, z, intensity). Raw intensities are divided by `intensity_scale`
/// and then clamped to [0, 1].
PointCloud load_kitti_bin(const std::string& path, double intensity_scale = 1.0);

/// Writes the float32-quadruple layout. Coordinates are narrowed to
/// float32, so load(write(c)) reproduces c bit-exactly only when c came
/// from a float32 source (which all canonical datasets do).
void write_kitti_bin(const std::string& path, const PointCloud& cloud);

/// Loads little-endian float64 quadruples, or float64 triples when
/// `legacy_triples` is set (intensity then defaults to 1.0).
PointCloud load_quad_f64_bin(const std::string& path, bool legacy_triples = false,
                             double intensity_scale = 1.0);

/// Largest raw intensity in a scan file, before any clamping. Used by the
/// preprocess option that rescales a whole dataset by its maximum.
double scan_max_intensity(const std::string& path, const std::string& format);

/// Pose index CSV with header `cloud_id,run_id,timestamp,northing,easting`.
std::vector<PoseRecord> load_pose_index(const std::string& path);
void write_pose_index(const std::string& path, const std::vector<PoseRecord>& poses);

/// Spatial split. A pose inside any test square (edges inclusive) is test;
/// outside a square but within buffer_width of it (boundary inclusive) is
/// dropped; everything else is train. The three id sets partition the input.
SplitResult split_train_test(const std::vector<PoseRecord>& poses,
                             const SplitSpec& spec);

/// Greedy spacing filter: keeps the first pose, then every pose at least
/// `spacing` meters (ground plane) from the last kept one. Input must be
/// one run ordered by timestamp.
std::vector<PoseRecord> subsample_by_distance(const std::vector<PoseRecord>& poses,
                                              double spacing);

struct SyntheticWorldConfig {
  int n_places = 50;
  int n_runs = 2;
  double noise = 0.5;          // per-run translation perturbation, meters
  int points_per_cloud = 3000;
  double place_spacing = 70.0;  // grid distance between place centers, meters
};

struct SyntheticWorld {
  std::vector<PointCloud> clouds;  // index = run * n_places + place
  std::vector<PoseRecord> poses;   // aligned with clouds
};

/// Deterministic synthetic dataset: each place is a random arrangement of
/// boxes over a ground disc, with a per-surface reflectance; every run
/// observes each place from a pose perturbed by `noise` meters and a random
/// yaw, producing a range-limited single-viewpoint cloud that is denser
/// near the sensor. Pure function of its arguments.
SyntheticWorld generate_synthetic_world(std::uint64_t seed,
                                        const SyntheticWorldConfig& cfg);

}  // namespace sparseloc::io
