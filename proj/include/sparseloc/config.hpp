#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparseloc/locnet.hpp"
#include "sparseloc/quantizer.hpp"
#include "sparseloc/retrieval.hpp"
#include "sparseloc/trainer.hpp"
#include "sparseloc/types.hpp"

namespace sparseloc::cli {

struct DatasetConfig {
  std::string root;              // preprocessed dataset directory
  std::string format = "kitti";  // raw scan format: kitti | quad_f64 | quad_f64_legacy | synthetic
  std::string raw_dir;           // raw scans for preprocess (non-synthetic)
  std::string pose_index;        // raw pose CSV for preprocess
  double spacing = 5.0;          // meters between kept consecutive scans
  // "none" keeps raw intensities (clamped), "auto" divides by the dataset
  // maximum, a number divides by that value
  std::string intensity_scale = "none";

  // synthetic generator
  int synthetic_places = 50;
  int synthetic_runs = 2;
  double synthetic_noise = 0.5;
  int synthetic_points = 3000;

  // split
  std::string split_mode = "spatial";  // spatial | by_run
  SplitSpec split;
  std::vector<std::string> test_runs;  // by_run mode: these runs become test
};

struct EvalRunConfig {
  eval::EvalConfig recall;
  std::string query_run;           // restrict queries to this run ("" = all test)
  std::string database = "test";   // test | train+test
  double max_range = 100.0;        // meters, 0 disables the range filter
  int max_points = 0;              // random subsample before quantize, 0 = all
  bool write_details = true;
};

struct TrainRunConfig {
  train::TrainerConfig trainer;
  int checkpoint_every = 0;  // epochs between periodic checkpoints, 0 = final only
  std::string resume;        // checkpoint path to resume from
  bool eval_each_epoch = true;
};

struct AblateConfig {
  std::string axis;            // r_step | theta_step | max_range | points
  std::vector<double> values;  // for points, 0 means "all"
  bool train_each = false;
};

struct BenchConfig {
  std::vector<int> points;  // per-count sweep; empty = clouds as-is
  int repeats = 20;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  std::string checkpoint;  // input checkpoint for eval/ablate/bench
  DatasetConfig dataset;
  quant::QuantConfig quant;
  net::ArchConfig arch;
  TrainRunConfig train;
  EvalRunConfig eval;
  AblateConfig ablate;
  BenchConfig bench;

  void validate() const;
};

/// Flat key/value view of an INI-style file: `[section]` headers,
/// `key = value` lines, `#` or `;` comments. Keys are `section.key`.
std::map<std::string, std::string> parse_ini(const std::string& path);

/// Loads a run config, applies `--set section.key=value` overrides, and
/// validates every field. Unknown keys are rejected.
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::pair<std::string, std::string>>& overrides);

}  // namespace sparseloc::cli
