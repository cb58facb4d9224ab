#include "sparseloc/cloud_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sparseloc/common.hpp"
#include "sparseloc/rng.hpp"

namespace sparseloc::io {
namespace {

std::vector<char> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  const auto size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<std::size_t>(size));
  if (size > 0) f.read(buf.data(), size);
  if (!f) throw data_error("read failed: " + path);
  return buf;
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

PointCloud load_kitti_bin(const std::string& path, double intensity_scale) {
  if (!(intensity_scale > 0)) throw config_error("intensity scale must be > 0");
  const std::vector<char> buf = read_all(path);
  if (buf.size() % 16 != 0)
    throw data_error("malformed scan file (size not a multiple of 16): " + path);
  const std::size_t n = buf.size() / 16;
  PointCloud cloud;
  cloud.points.resize(n);
  cloud.intensities.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float q[4];
    std::memcpy(q, buf.data() + i * 16, 16);
    if (!std::isfinite(q[0]) || !std::isfinite(q[1]) || !std::isfinite(q[2]) ||
        !std::isfinite(q[3]))
      throw data_error("corrupt record (non-finite value) in " + path);
    cloud.points[i] = {q[0], q[1], q[2]};
    cloud.intensities[i] = clamp01(q[3] / intensity_scale);
  }
  return cloud;
}

void write_kitti_bin(const std::string& path, const PointCloud& cloud) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("cannot open file for writing: " + path);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const float q[4] = {static_cast<float>(cloud.points[i].x),
                        static_cast<float>(cloud.points[i].y),
                        static_cast<float>(cloud.points[i].z),
                        static_cast<float>(cloud.intensities[i])};
    f.write(reinterpret_cast<const char*>(q), 16);
  }
  if (!f) throw data_error("write failed: " + path);
}

PointCloud load_quad_f64_bin(const std::string& path, bool legacy_triples,
                             double intensity_scale) {
  if (!(intensity_scale > 0)) throw config_error("intensity scale must be > 0");
  const std::vector<char> buf = read_all(path);
  const std::size_t rec = legacy_triples ? 24 : 32;
  if (buf.size() % rec != 0)
    throw data_error("malformed scan file (size not a multiple of " +
                     std::to_string(rec) + "): " + path);
  const std::size_t n = buf.size() / rec;
  PointCloud cloud;
  cloud.points.resize(n);
  cloud.intensities.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double q[4] = {0, 0, 0, 1.0};
    std::memcpy(q, buf.data() + i * rec, rec);
    if (!std::isfinite(q[0]) || !std::isfinite(q[1]) || !std::isfinite(q[2]) ||
        !std::isfinite(q[3]))
      throw data_error("corrupt record (non-finite value) in " + path);
    cloud.points[i] = {q[0], q[1], q[2]};
    cloud.intensities[i] = legacy_triples ? 1.0 : clamp01(q[3] / intensity_scale);
  }
  return cloud;
}

double scan_max_intensity(const std::string& path, const std::string& format) {
  const std::vector<char> buf = read_all(path);
  double max_i = 0;
  if (format == "kitti") {
    if (buf.size() % 16 != 0)
      throw data_error("malformed scan file (size not a multiple of 16): " + path);
    for (std::size_t i = 0; i < buf.size() / 16; ++i) {
      float q[4];
      std::memcpy(q, buf.data() + i * 16, 16);
      if (std::isfinite(q[3])) max_i = std::max(max_i, double(q[3]));
    }
  } else if (format == "quad_f64") {
    if (buf.size() % 32 != 0)
      throw data_error("malformed scan file (size not a multiple of 32): " + path);
    for (std::size_t i = 0; i < buf.size() / 32; ++i) {
      double q[4];
      std::memcpy(q, buf.data() + i * 32, 32);
      if (std::isfinite(q[3])) max_i = std::max(max_i, q[3]);
    }
  } else {
    throw config_error("intensity scan not supported for format " + format);
  }
  return max_i;
}

std::vector<PoseRecord> load_pose_index(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error("cannot open pose index: " + path);
  std::string line;
  if (!std::getline(f, line)) throw data_error("empty pose index: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "cloud_id,run_id,timestamp,northing,easting")
    throw data_error("pose index header mismatch in " + path + ": " + line);
  std::vector<PoseRecord> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field[5];
    for (int i = 0; i < 5; ++i) {
      if (!std::getline(ss, field[i], ','))
        throw data_error(path + ":" + std::to_string(lineno) +
                         ": expected 5 comma-separated fields");
    }
    PoseRecord r;
    r.cloud_id = field[0];
    r.run_id = field[1];
    try {
      r.timestamp = std::stod(field[2]);
      r.northing = std::stod(field[3]);
      r.easting = std::stod(field[4]);
    } catch (const std::exception&) {
      throw data_error(path + ":" + std::to_string(lineno) + ": bad number");
    }
    if (!std::isfinite(r.northing) || !std::isfinite(r.easting))
      throw data_error(path + ":" + std::to_string(lineno) +
                       ": non-finite position");
    out.push_back(std::move(r));
  }
  return out;
}

void write_pose_index(const std::string& path,
                      const std::vector<PoseRecord>& poses) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw data_error("cannot open file for writing: " + path);
  f << "cloud_id,run_id,timestamp,northing,easting\n";
  char buf[256];
  for (const PoseRecord& p : poses) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f\n",
                  p.cloud_id.c_str(), p.run_id.c_str(), p.timestamp,
                  p.northing, p.easting);
    f << buf;
  }
  if (!f) throw data_error("write failed: " + path);
}

SplitResult split_train_test(const std::vector<PoseRecord>& poses,
                             const SplitSpec& spec) {
  if (poses.empty()) throw config_error("split_train_test: no poses");
  for (const TestSquare& s : spec.test_squares)
    if (!(s.side > 0)) throw config_error("split_train_test: degenerate square");
  if (spec.buffer_width < 0)
    throw config_error("split_train_test: negative buffer width");

  SplitResult result;
  for (const PoseRecord& p : poses) {
    bool in_square = false;
    bool in_buffer = false;
    for (const TestSquare& s : spec.test_squares) {
      const double dn = std::abs(p.northing - s.center_n);
      const double de = std::abs(p.easting - s.center_e);
      const double half = s.side / 2.0;
      if (dn <= half && de <= half) {
        in_square = true;
        break;
      }
      // The buffer is the expanded square minus the test square, boundary
      // inclusive on the outer edge.
      if (dn <= half + spec.buffer_width && de <= half + spec.buffer_width)
        in_buffer = true;
    }
    if (in_square)
      result.test_ids.push_back(p.cloud_id);
    else if (in_buffer)
      result.dropped_ids.push_back(p.cloud_id);
    else
      result.train_ids.push_back(p.cloud_id);
  }
  return result;
}

std::vector<PoseRecord> subsample_by_distance(
    const std::vector<PoseRecord>& poses, double spacing) {
  if (!(spacing > 0)) throw config_error("subsample: spacing must be > 0");
  std::vector<PoseRecord> kept;
  for (const PoseRecord& p : poses) {
    if (kept.empty()) {
      kept.push_back(p);
      continue;
    }
    const double dn = p.northing - kept.back().northing;
    const double de = p.easting - kept.back().easting;
    if (std::sqrt(dn * dn + de * de) >= spacing) kept.push_back(p);
  }
  return kept;
}

namespace {

struct Box {
  double cx, cy;          // center in place-local coordinates
  double hx, hy, h;       // half extents in x/y, full height
  double face_refl[5];    // -x, +x, -y, +y, top
};

struct PlaceGeometry {
  std::vector<Box> boxes;
  double ground_refl;
};

PlaceGeometry make_place(Rng& rng) {
  PlaceGeometry g;
  g.ground_refl = rng.uniform(0.05, 0.40);
  const int n_boxes = 6 + static_cast<int>(rng.uniform_index(9));  // 6..14
  g.boxes.resize(n_boxes);
  for (Box& b : g.boxes) {
    const double ang = rng.uniform(-3.14159265358979323846, 3.14159265358979323846);
    const double dist = rng.uniform(6.0, 45.0);
    b.cx = dist * std::cos(ang);
    b.cy = dist * std::sin(ang);
    b.hx = rng.uniform(0.5, 3.0);
    b.hy = rng.uniform(0.5, 3.0);
    b.h = rng.uniform(2.0, 9.0);
    for (double& r : b.face_refl) r = rng.uniform(0.05, 0.95);
  }
  return g;
}

// Samples one point on the surfaces of a place, local coordinates, with
// acceptance weighting that concentrates points near the place center the
// way a rotating scanner does.
void sample_place_points(const PlaceGeometry& g, int n_points, Rng& rng,
                         std::vector<Point3>& pts, std::vector<double>& refl) {
  const int n_ground = n_points * 2 / 5;
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int i = 0; i < n_ground; ++i) {
    const double u = rng.uniform();
    const double r = 4.0 + 54.0 * u * u;
    const double th = rng.uniform(0.0, two_pi);
    pts.push_back({r * std::cos(th), r * std::sin(th), 0.0});
    refl.push_back(clamp01(g.ground_refl + rng.uniform(-0.03, 0.03)));
  }
  for (int i = n_ground; i < n_points; ++i) {
    for (;;) {
      const Box& b = g.boxes[rng.uniform_index(g.boxes.size())];
      const int face = static_cast<int>(rng.uniform_index(5));
      Point3 p;
      switch (face) {
        case 0: p = {b.cx - b.hx, b.cy + b.hy * rng.uniform(-1.0, 1.0), b.h * rng.uniform()}; break;
        case 1: p = {b.cx + b.hx, b.cy + b.hy * rng.uniform(-1.0, 1.0), b.h * rng.uniform()}; break;
        case 2: p = {b.cx + b.hx * rng.uniform(-1.0, 1.0), b.cy - b.hy, b.h * rng.uniform()}; break;
        case 3: p = {b.cx + b.hx * rng.uniform(-1.0, 1.0), b.cy + b.hy, b.h * rng.uniform()}; break;
        default: p = {b.cx + b.hx * rng.uniform(-1.0, 1.0), b.cy + b.hy * rng.uniform(-1.0, 1.0), b.h}; break;
      }
      const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
      const double accept = std::min(1.0, (18.0 / std::max(r, 1.0)) * (18.0 / std::max(r, 1.0)));
      if (rng.uniform() < accept) {
        pts.push_back(p);
        refl.push_back(clamp01(b.face_refl[face] + rng.uniform(-0.03, 0.03)));
        break;
      }
    }
  }
}

}  // namespace

SyntheticWorld generate_synthetic_world(std::uint64_t seed,
                                        const SyntheticWorldConfig& cfg) {
  if (cfg.n_places < 2 || cfg.n_runs < 2)
    throw config_error("synthetic world needs n_places >= 2 and n_runs >= 2");
  if (cfg.points_per_cloud < 10)
    throw config_error("synthetic world needs >= 10 points per cloud");
  if (cfg.noise < 0) throw config_error("synthetic world: negative noise");

  const int grid_w = static_cast<int>(std::ceil(std::sqrt(double(cfg.n_places))));
  const double sensor_height = 1.8;

  // Canonical per-place point sets; runs re-express them in a perturbed
  // sensor frame, so with zero noise the clouds differ only by yaw.
  std::vector<std::vector<Point3>> place_pts(cfg.n_places);
  std::vector<std::vector<double>> place_refl(cfg.n_places);
  for (int p = 0; p < cfg.n_places; ++p) {
    Rng rng(derive_seed(seed, "place", static_cast<std::uint64_t>(p)));
    const PlaceGeometry geom = make_place(rng);
    sample_place_points(geom, cfg.points_per_cloud, rng, place_pts[p], place_refl[p]);
  }

  SyntheticWorld world;
  world.clouds.reserve(static_cast<std::size_t>(cfg.n_runs) * cfg.n_places);
  world.poses.reserve(world.clouds.capacity());
  char idbuf[64];
  for (int run = 0; run < cfg.n_runs; ++run) {
    for (int p = 0; p < cfg.n_places; ++p) {
      Rng rng(derive_seed(seed, "view",
                          static_cast<std::uint64_t>(run) * 1000003u +
                              static_cast<std::uint64_t>(p)));
      const double place_n = cfg.place_spacing * (p % grid_w);
      const double place_e = cfg.place_spacing * (p / grid_w);
      const double off_n = cfg.noise * rng.uniform(-1.0, 1.0);
      const double off_e = cfg.noise * rng.uniform(-1.0, 1.0);
      const double yaw = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double c = std::cos(yaw), s = std::sin(yaw);

      PointCloud cloud;
      cloud.points.reserve(place_pts[p].size());
      cloud.intensities = place_refl[p];
      for (const Point3& q : place_pts[p]) {
        const double dx = q.x - off_n;
        const double dy = q.y - off_e;
        // rotate world->sensor by -yaw
        cloud.points.push_back(
            {c * dx + s * dy, -s * dx + c * dy, q.z - sensor_height});
      }

      PoseRecord pose;
      std::snprintf(idbuf, sizeof(idbuf), "r%02d_p%04d", run, p);
      pose.cloud_id = idbuf;
      std::snprintf(idbuf, sizeof(idbuf), "run%02d", run);
      pose.run_id = idbuf;
      pose.timestamp = run * 10000.0 + p * 10.0;
      pose.northing = place_n + off_n;
      pose.easting = place_e + off_e;

      world.clouds.push_back(std::move(cloud));
      world.poses.push_back(std::move(pose));
    }
  }
  return world;
}

}  // namespace sparseloc::io
