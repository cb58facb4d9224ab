#pragma once

#include <vector>

#include "sparseloc/locnet.hpp"
#include "sparseloc/quantizer.hpp"
#include "sparseloc/types.hpp"

namespace sparseloc::eval {

struct StageStats {
  std::vector<double> samples_ms;
  double mean() const;
  double stddev() const;
};

struct BenchReport {
  StageStats quantize, forward, total;
};

/// Times quantization and network forward per cloud, single-threaded.
/// The first `warmup` iterations are not recorded.
BenchReport bench_inference(const std::vector<PointCloud>& clouds,
                            net::LocNetParams<float>& params,
                            const quant::QuantConfig& qcfg, int warmup = 2);

}  // namespace sparseloc::eval
