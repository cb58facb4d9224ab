#include "sparseloc/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>

#include "sparseloc/bench.hpp"
#include "sparseloc/checkpoint.hpp"
#include "sparseloc/cloud_io.hpp"

namespace fs = std::filesystem;

namespace sparseloc::cli {
namespace {

void run_parallel(std::size_t n, const std::function<void(std::size_t)>& fn) {
  unsigned workers = std::min(4u, std::thread::hardware_concurrency());
  if (workers < 2 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::scoped_lock lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Dataset {
  std::vector<PoseRecord> poses;                  // file order
  std::unordered_map<std::string, std::size_t> by_id;
  std::map<std::string, std::string> split;       // cloud_id -> train|test|dropped
  std::string root;

  PointCloud load_cloud(const std::string& cloud_id) const {
    return io::load_kitti_bin((fs::path(root) / "clouds" / (cloud_id + ".bin")).string());
  }
  std::vector<std::string> ids_in(const std::string& which) const {
    std::vector<std::string> out;
    for (const PoseRecord& p : poses) {
      const auto it = split.find(p.cloud_id);
      if (it != split.end() && it->second == which) out.push_back(p.cloud_id);
    }
    return out;
  }
};

void write_split_csv(const std::string& path,
                     const std::vector<PoseRecord>& poses,
                     const std::map<std::string, std::string>& split) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw data_error("cannot write split manifest: " + path);
  f << "cloud_id,split\n";
  for (const PoseRecord& p : poses)
    f << p.cloud_id << "," << split.at(p.cloud_id) << "\n";
}

std::map<std::string, std::string> load_split_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error("cannot open split manifest: " + path);
  std::string line;
  if (!std::getline(f, line)) throw data_error("empty split manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "cloud_id,split")
    throw data_error("split manifest header mismatch: " + path);
  std::map<std::string, std::string> out;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw data_error("bad split manifest row: " + line);
    out[line.substr(0, comma)] = line.substr(comma + 1);
  }
  return out;
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.root.empty())
    throw config_error("dataset.root is required for this command");
  Dataset d;
  d.root = cfg.dataset.root;
  d.poses = io::load_pose_index((fs::path(d.root) / "poses.csv").string());
  d.split = load_split_csv((fs::path(d.root) / "split.csv").string());
  for (std::size_t i = 0; i < d.poses.size(); ++i)
    d.by_id[d.poses[i].cloud_id] = i;
  return d;
}

std::string format_double(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

// ---------------------------------------------------------------------------
// evaluation pools
// ---------------------------------------------------------------------------

struct EvalPools {
  eval::RetrievalIndex index;
  std::vector<eval::Query> queries;
};

EvalPools build_eval_pools(const RunConfig& cfg, const Dataset& data,
                           net::LocNetParams<float>& params) {
  std::vector<std::string> pool_ids = data.ids_in("test");
  if (cfg.eval.database == "train+test") {
    const std::vector<std::string> train_ids = data.ids_in("train");
    pool_ids.insert(pool_ids.end(), train_ids.begin(), train_ids.end());
  }
  if (pool_ids.empty()) throw config_error("eval: no clouds in the evaluation pool");

  std::vector<eval::Descriptor> descs(pool_ids.size());
  run_parallel(pool_ids.size(), [&](std::size_t i) {
    const PointCloud cloud = data.load_cloud(pool_ids[i]);
    descs[i] = describe_cloud(cloud, params, cfg.quant, cfg.eval.max_range,
                              cfg.eval.max_points,
                              derive_seed(cfg.seed, "eval_subsample", i));
  });

  EvalPools pools;
  for (std::size_t i = 0; i < pool_ids.size(); ++i) {
    const PoseRecord& pose = data.poses[data.by_id.at(pool_ids[i])];
    pools.index.entries.push_back(
        {pose.cloud_id, descs[i], pose.northing, pose.easting, pose.run_id});
  }
  for (std::size_t i = 0; i < pool_ids.size(); ++i) {
    const PoseRecord& pose = data.poses[data.by_id.at(pool_ids[i])];
    if (data.split.at(pose.cloud_id) != "test") continue;
    if (!cfg.eval.query_run.empty() && pose.run_id != cfg.eval.query_run) continue;
    pools.queries.push_back(
        {pose.cloud_id, descs[i], pose.northing, pose.easting, pose.run_id});
  }
  if (pools.queries.empty()) throw config_error("eval: no queries selected");
  return pools;
}

eval::RecallReport run_recall(const RunConfig& cfg, const Dataset& data,
                              net::LocNetParams<float>& params) {
  const EvalPools pools = build_eval_pools(cfg, data, params);
  return eval::recall_at(pools.queries, pools.index, cfg.eval.recall);
}

double ar_at_1(const eval::RecallReport& r) {
  for (const auto& [x, ar] : r.ar_at_x)
    if (x == 1) return ar;
  return r.ar_at_x.front().second;  // smallest configured X
}

}  // namespace

eval::Descriptor describe_cloud(const PointCloud& cloud,
                                net::LocNetParams<float>& params,
                                const quant::QuantConfig& qcfg, double max_range,
                                int max_points, std::uint64_t subsample_seed) {
  PointCloud c = cloud;
  if (max_range > 0) c = quant::max_range_filter(c, max_range);
  Rng rng(subsample_seed);
  if (max_points > 0) c = quant::random_subsample(c, std::size_t(max_points), rng);
  quant::QuantConfig q = qcfg;
  q.dedup = quant::DedupPolicy::average;  // repeatable inference features
  SparseTensor<float> t = quant::quantize<float>(c, q, 0, rng);
  net::ForwardResult<float> fwd = net::forward(t, params, net::Mode::eval);
  eval::Descriptor d(fwd.descriptors.cols);
  std::copy(fwd.descriptors.row(0), fwd.descriptors.row(0) + fwd.descriptors.cols,
            d.begin());
  return d;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

void cmd_preprocess(const RunConfig& cfg) {
  const fs::path out(cfg.out_dir);
  fs::create_directories(out / "clouds");

  std::vector<PoseRecord> poses;
  std::vector<PointCloud> clouds;  // aligned with poses

  if (cfg.dataset.format == "synthetic") {
    io::SyntheticWorldConfig sw;
    sw.n_places = cfg.dataset.synthetic_places;
    sw.n_runs = cfg.dataset.synthetic_runs;
    sw.noise = cfg.dataset.synthetic_noise;
    sw.points_per_cloud = cfg.dataset.synthetic_points;
    io::SyntheticWorld world = io::generate_synthetic_world(cfg.seed, sw);
    poses = std::move(world.poses);
    clouds = std::move(world.clouds);
  } else {
    if (cfg.dataset.pose_index.empty() || cfg.dataset.raw_dir.empty())
      throw config_error("preprocess: dataset.pose_index and dataset.raw_dir "
                         "are required for raw datasets");
    poses = io::load_pose_index(cfg.dataset.pose_index);
    const auto scan_path = [&](const PoseRecord& p) {
      return (fs::path(cfg.dataset.raw_dir) / (p.cloud_id + ".bin")).string();
    };
    double scale = 1.0;
    if (cfg.dataset.intensity_scale == "auto") {
      if (cfg.dataset.format == "quad_f64_legacy")
        throw config_error("preprocess: legacy triples carry no intensity to rescale");
      for (const PoseRecord& p : poses)
        scale = std::max(scale, io::scan_max_intensity(scan_path(p), cfg.dataset.format));
    } else if (cfg.dataset.intensity_scale != "none") {
      scale = std::stod(cfg.dataset.intensity_scale);
    }
    for (const PoseRecord& p : poses) {
      if (cfg.dataset.format == "kitti")
        clouds.push_back(io::load_kitti_bin(scan_path(p), scale));
      else
        clouds.push_back(io::load_quad_f64_bin(
            scan_path(p), cfg.dataset.format == "quad_f64_legacy", scale));
    }
  }

  // spacing subsampling per run, runs kept in order of first appearance
  std::vector<std::string> run_order;
  std::map<std::string, std::vector<std::size_t>> runs;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (!runs.count(poses[i].run_id)) run_order.push_back(poses[i].run_id);
    runs[poses[i].run_id].push_back(i);
  }
  std::vector<std::size_t> kept;
  for (const std::string& run : run_order) {
    std::vector<std::size_t>& idx = runs[run];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return poses[a].timestamp < poses[b].timestamp;
    });
    std::vector<PoseRecord> run_poses;
    for (const std::size_t i : idx) run_poses.push_back(poses[i]);
    const std::vector<PoseRecord> thinned =
        io::subsample_by_distance(run_poses, cfg.dataset.spacing);
    std::set<std::string> keep_ids;
    for (const PoseRecord& p : thinned) keep_ids.insert(p.cloud_id);
    for (const std::size_t i : idx)
      if (keep_ids.count(poses[i].cloud_id)) kept.push_back(i);
  }

  std::vector<PoseRecord> kept_poses;
  for (const std::size_t i : kept) kept_poses.push_back(poses[i]);

  // split manifest
  std::map<std::string, std::string> split;
  if (cfg.dataset.split_mode == "by_run") {
    std::set<std::string> test_runs(cfg.dataset.test_runs.begin(),
                                    cfg.dataset.test_runs.end());
    if (test_runs.empty() && !run_order.empty())
      test_runs.insert(run_order.back());  // hold out the last run by default
    for (const PoseRecord& p : kept_poses)
      split[p.cloud_id] = test_runs.count(p.run_id) ? "test" : "train";
  } else {
    if (cfg.dataset.split.test_squares.empty())
      throw config_error("preprocess: spatial split needs dataset.test_squares");
    const SplitResult s = io::split_train_test(kept_poses, cfg.dataset.split);
    for (const std::string& id : s.train_ids) split[id] = "train";
    for (const std::string& id : s.test_ids) split[id] = "test";
    for (const std::string& id : s.dropped_ids) split[id] = "dropped";
  }

  for (const std::size_t i : kept) {
    io::write_kitti_bin((out / "clouds" / (poses[i].cloud_id + ".bin")).string(),
                        clouds[i]);
  }
  io::write_pose_index((out / "poses.csv").string(), kept_poses);
  write_split_csv((out / "split.csv").string(), kept_poses, split);

  std::size_t n_train = 0, n_test = 0, n_dropped = 0;
  for (const auto& [id, s] : split) {
    if (s == "train") ++n_train;
    else if (s == "test") ++n_test;
    else ++n_dropped;
  }
  std::printf("preprocess: %zu locations (%zu train, %zu test, %zu dropped) -> %s\n",
              kept_poses.size(), n_train, n_test, n_dropped, cfg.out_dir.c_str());
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void cmd_train(const RunConfig& cfg) {
  const Dataset data = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);

  std::vector<train::TrainSample> samples;
  for (const std::string& id : data.ids_in("train")) {
    const PoseRecord& pose = data.poses[data.by_id.at(id)];
    samples.push_back({data.load_cloud(id), pose.northing, pose.easting, pose.run_id});
  }
  if (samples.empty()) throw config_error("train: empty train split");

  const std::vector<std::vector<std::size_t>> groups =
      train::group_by_location(samples, cfg.train.trainer.pos_radius);

  net::LocNetParams<float> params;
  train::AdamState<float> state;
  int start_epoch = 0;
  const bool resuming = !cfg.train.resume.empty();
  if (resuming) {
    Checkpoint ck = load_checkpoint(cfg.train.resume, cfg.arch);
    if (!ck.opt)
      throw config_error("train: resume checkpoint lacks optimizer state");
    params = std::move(ck.params);
    state = std::move(*ck.opt);
    start_epoch = int(ck.epoch);
    if (start_epoch > cfg.train.trainer.epochs)
      throw config_error("train: resume checkpoint is already past epoch " +
                         std::to_string(cfg.train.trainer.epochs));
  } else {
    params = net::LocNetParams<float>::make(cfg.arch, derive_seed(cfg.seed, "init"));
    state.init_like(params);
  }

  const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  std::ofstream metrics;
  if (resuming && fs::exists(metrics_path)) {
    metrics.open(metrics_path, std::ios::app);
  } else {
    metrics.open(metrics_path, std::ios::trunc);
    metrics << "epoch,mean_loss,active_ratio,ar1_val\n";
  }
  if (!metrics) throw data_error("cannot open metrics log: " + metrics_path);

  const bool have_val = !data.ids_in("test").empty() && cfg.train.eval_each_epoch;

  for (int epoch = start_epoch + 1; epoch <= cfg.train.trainer.epochs; ++epoch) {
    const train::EpochMetrics em =
        train::train_epoch(samples, groups, params, state, cfg.train.trainer, epoch);

    std::string ar1 = "nan";
    if (have_val) {
      RunConfig val_cfg = cfg;
      val_cfg.eval.recall.x_values = {1};
      val_cfg.eval.write_details = false;
      ar1 = format_double(ar_at_1(run_recall(val_cfg, data, params)), "%.4f");
    }
    metrics << epoch << "," << format_double(em.mean_loss) << ","
            << format_double(em.active_ratio) << "," << ar1 << "\n";
    metrics.flush();
    std::printf("epoch %d: loss=%.6f active=%.3f ar1=%s\n", epoch, em.mean_loss,
                em.active_ratio, ar1.c_str());

    if (cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.bin", epoch);
      save_checkpoint((fs::path(cfg.out_dir) / name).string(), params, &state, epoch);
    }
  }
  save_checkpoint((fs::path(cfg.out_dir) / "ckpt_final.bin").string(), params,
                  &state, cfg.train.trainer.epochs);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void cmd_eval(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw config_error("eval: run.checkpoint is required");
  const Dataset data = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  Checkpoint ck = load_checkpoint(cfg.checkpoint, cfg.arch);

  const EvalPools pools = build_eval_pools(cfg, data, ck.params);
  const eval::RecallReport report =
      eval::recall_at(pools.queries, pools.index, cfg.eval.recall);

  const std::string report_path = (fs::path(cfg.out_dir) / "report.csv").string();
  std::ofstream rf(report_path, std::ios::trunc);
  if (!rf) throw data_error("cannot write report: " + report_path);
  rf << "X,AR\n";
  for (const auto& [x, ar] : report.ar_at_x)
    rf << x << "," << format_double(ar) << "\n";
  rf << "1%," << format_double(report.ar_at_1pct) << "\n";
  rf << "effective_db," << format_double(report.mean_effective_db, "%.2f") << "\n";

  if (cfg.eval.write_details) {
    const std::string details_path = (fs::path(cfg.out_dir) / "details.csv").string();
    std::ofstream df(details_path, std::ios::trunc);
    if (!df) throw data_error("cannot write details: " + details_path);
    df << "cloud_id,rank1_id,rank1_dist_m,success@1\n";
    for (const eval::QueryDetail& d : report.details)
      df << d.cloud_id << "," << d.rank1_id << ","
         << format_double(d.rank1_dist_m, "%.3f") << "," << (d.success_at_1 ? 1 : 0)
         << "\n";
  }
  std::printf("eval: AR@1=%.4f AR@1%%=%.4f over %zu queries\n",
              ar_at_1(report), report.ar_at_1pct, report.details.size());
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

void cmd_ablate(const RunConfig& cfg) {
  if (cfg.ablate.axis.empty()) throw config_error("ablate: ablate.axis is required");
  if (cfg.ablate.values.empty()) throw config_error("ablate: ablate.values is required");
  if (cfg.checkpoint.empty() && !cfg.ablate.train_each)
    throw config_error("ablate: run.checkpoint or ablate.train_each is required");
  const Dataset data = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);

  struct Row {
    double value;
    double ar1, ar1pct;
  };
  std::vector<Row> rows;
  for (const double value : cfg.ablate.values) {
    RunConfig sweep = cfg;
    if (cfg.ablate.axis == "r_step")
      sweep.quant.step[0] = value;
    else if (cfg.ablate.axis == "theta_step")
      sweep.quant.step[1] = value;
    else if (cfg.ablate.axis == "max_range")
      sweep.eval.max_range = value;
    else
      sweep.eval.max_points = int(value);
    sweep.quant.validate();
    if (std::find(sweep.eval.recall.x_values.begin(),
                  sweep.eval.recall.x_values.end(),
                  1) == sweep.eval.recall.x_values.end())
      sweep.eval.recall.x_values.insert(sweep.eval.recall.x_values.begin(), 1);

    net::LocNetParams<float> params;
    if (cfg.ablate.train_each) {
      char sub[64];
      std::snprintf(sub, sizeof(sub), "ablate_%s_%g", cfg.ablate.axis.c_str(), value);
      RunConfig train_cfg = sweep;
      train_cfg.out_dir = (fs::path(cfg.out_dir) / sub).string();
      train_cfg.train.resume.clear();
      cmd_train(train_cfg);
      params = load_checkpoint(
                   (fs::path(train_cfg.out_dir) / "ckpt_final.bin").string(),
                   cfg.arch)
                   .params;
    } else {
      params = load_checkpoint(cfg.checkpoint, cfg.arch).params;
    }
    const eval::RecallReport report = run_recall(sweep, data, params);
    rows.push_back({value, ar_at_1(report), report.ar_at_1pct});
  }

  const std::string base = "sweep_" + cfg.ablate.axis;
  std::ofstream csv((fs::path(cfg.out_dir) / (base + ".csv")).string(), std::ios::trunc);
  std::ofstream dat((fs::path(cfg.out_dir) / (base + ".dat")).string(), std::ios::trunc);
  csv << "axis_value,AR@1,AR@1%\n";
  dat << "# axis_value ar1 ar1pct\n";
  bool monotone = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv << format_double(rows[i].value, "%g") << "," << format_double(rows[i].ar1)
        << "," << format_double(rows[i].ar1pct) << "\n";
    dat << format_double(rows[i].value, "%g") << " " << format_double(rows[i].ar1)
        << " " << format_double(rows[i].ar1pct) << "\n";
    if (i > 0 && rows[i].ar1 < rows[i - 1].ar1) monotone = false;
  }
  std::ofstream summary((fs::path(cfg.out_dir) / (base + "_summary.txt")).string(),
                        std::ios::trunc);
  summary << "axis=" << cfg.ablate.axis << "\n"
          << "values=" << rows.size() << "\n"
          << "monotone_ar1=" << (monotone ? "yes" : "no") << "\n";
  std::printf("ablate: %zu values on axis %s -> %s\n", rows.size(),
              cfg.ablate.axis.c_str(), cfg.out_dir.c_str());
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

void cmd_bench(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw config_error("bench: run.checkpoint is required");
  const Dataset data = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  Checkpoint ck = load_checkpoint(cfg.checkpoint, cfg.arch);

  std::vector<std::string> ids = data.ids_in("test");
  if (ids.empty()) ids = data.ids_in("train");
  if (ids.empty()) throw config_error("bench: dataset has no clouds");

  std::vector<PointCloud> base;
  for (std::size_t i = 0; i < ids.size() && i < 32; ++i)
    base.push_back(data.load_cloud(ids[i]));

  const std::size_t samples = std::max<std::size_t>(10, std::size_t(cfg.bench.repeats));
  std::vector<int> counts = cfg.bench.points;
  if (counts.empty()) counts.push_back(0);

  const std::string path = (fs::path(cfg.out_dir) / "bench.csv").string();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw data_error("cannot write bench report: " + path);
  f << "points,stage,mean_ms,stddev_ms,samples\n";
  for (const int count : counts) {
    std::vector<PointCloud> clouds;
    for (std::size_t i = 0; i < samples; ++i) {
      PointCloud c = base[i % base.size()];
      if (count > 0) {
        Rng rng(derive_seed(cfg.seed, "bench_subsample", i));
        c = quant::random_subsample(c, std::size_t(count), rng);
      }
      clouds.push_back(std::move(c));
    }
    const eval::BenchReport report =
        eval::bench_inference(clouds, ck.params, cfg.quant);
    const std::string label = count > 0 ? std::to_string(count) : "all";
    const auto row = [&](const char* stage, const eval::StageStats& s) {
      f << label << "," << stage << "," << format_double(s.mean(), "%.3f") << ","
        << format_double(s.stddev(), "%.3f") << "," << s.samples_ms.size() << "\n";
    };
    row("quantize", report.quantize);
    row("forward", report.forward);
    row("total", report.total);
  }
  std::printf("bench: wrote %s\n", path.c_str());
}

}  // namespace sparseloc::cli
