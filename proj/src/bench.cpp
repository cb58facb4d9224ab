#include "sparseloc/bench.hpp"

#include <chrono>
#include <cmath>

namespace sparseloc::eval {

double StageStats::mean() const {
  if (samples_ms.empty()) return 0;
  double acc = 0;
  for (const double s : samples_ms) acc += s;
  return acc / double(samples_ms.size());
}

double StageStats::stddev() const {
  if (samples_ms.size() < 2) return 0;
  const double m = mean();
  double acc = 0;
  for (const double s : samples_ms) acc += (s - m) * (s - m);
  return std::sqrt(acc / double(samples_ms.size() - 1));
}

BenchReport bench_inference(const std::vector<PointCloud>& clouds,
                            net::LocNetParams<float>& params,
                            const quant::QuantConfig& qcfg, int warmup) {
  if (clouds.size() < 10)
    throw config_error("bench: need at least 10 clouds for stable statistics");
  using clock = std::chrono::steady_clock;
  const auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };

  quant::QuantConfig q = qcfg;
  q.dedup = quant::DedupPolicy::average;
  Rng rng(0);  // unused by average dedup

  for (int w = 0; w < warmup; ++w) {
    SparseTensor<float> t = quant::quantize<float>(clouds[0], q, 0, rng);
    (void)net::forward(t, params, net::Mode::eval);
  }

  BenchReport r;
  for (const PointCloud& cloud : clouds) {
    const auto t0 = clock::now();
    SparseTensor<float> t = quant::quantize<float>(cloud, q, 0, rng);
    const auto t1 = clock::now();
    (void)net::forward(t, params, net::Mode::eval);
    const auto t2 = clock::now();
    r.quantize.samples_ms.push_back(ms(t0, t1));
    r.forward.samples_ms.push_back(ms(t1, t2));
    r.total.samples_ms.push_back(ms(t0, t2));
  }
  return r;
}

}  // namespace sparseloc::eval
