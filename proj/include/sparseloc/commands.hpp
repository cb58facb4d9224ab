#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparseloc/config.hpp"
#include "sparseloc/retrieval.hpp"

namespace sparseloc::cli {

/// Writes the canonical dataset (spacing-subsampled float32-quadruple
/// clouds, pose index, split manifest) under run.out_dir.
void cmd_preprocess(const RunConfig& cfg);

/// Trains on the train split, appending per-epoch rows to metrics.csv and
/// writing periodic plus final checkpoints. Resumable.
void cmd_train(const RunConfig& cfg);

/// Computes descriptors for the evaluation pools (average dedup), runs the
/// recall protocol and writes report.csv (and per-query details).
void cmd_eval(const RunConfig& cfg);

/// Sweeps one axis (r_step, theta_step, max_range or points), evaluating
/// each value, and writes sweep CSV/plot files plus a monotonicity note.
void cmd_ablate(const RunConfig& cfg);

/// Per-stage inference timing over the dataset's clouds, optionally swept
/// over point counts.
void cmd_bench(const RunConfig& cfg);

/// Canonical descriptor of one cloud: optional range filter and random
/// subsample, average-dedup quantization, eval-mode forward.
eval::Descriptor describe_cloud(const PointCloud& cloud,
                                net::LocNetParams<float>& params,
                                const quant::QuantConfig& qcfg, double max_range,
                                int max_points, std::uint64_t subsample_seed);

}  // namespace sparseloc::cli
