#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sparseloc {

struct Point3 {
  double x = 0, y = 0, z = 0;
};

/// One LiDAR scan: Cartesian coordinates in meters plus a normalized
/// reflectance value per point.
struct PointCloud {
  std::vector<Point3> points;
  std::vector<double> intensities;  // in [0, 1], same length as points

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Ground-truth metadata for one scan.
struct PoseRecord {
  std::string cloud_id;
  std::string run_id;
  double timestamp = 0;  // seconds
  double northing = 0;   // meters
  double easting = 0;    // meters
};

/// Axis-aligned square used by the spatial train/test split.
struct TestSquare {
  double center_n = 0;
  double center_e = 0;
  double side = 100.0;
};

struct SplitSpec {
  std::vector<TestSquare> test_squares;
  double buffer_width = 10.0;  // meters around each square, dropped entirely
};

struct SplitResult {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::vector<std::string> dropped_ids;
};

}  // namespace sparseloc
