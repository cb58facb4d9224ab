#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "sparseloc/locnet.hpp"
#include "test_helpers.hpp"

using namespace sparseloc;
using namespace testutil;

namespace {

net::ArchConfig tiny_arch() {
  net::ArchConfig a;
  a.ch0 = 4;
  a.ch1 = 4;
  a.ch2 = 8;
  a.ch3 = 8;
  a.fpn = 8;
  return a;
}

SparseTensor<double> random_input(Rng& rng, int grid, int sites, int batches = 1,
                                  double lo = 0.05, double hi = 1.0) {
  SparseTensor<double> t = random_tensor(rng, grid, sites, 1, batches);
  for (double& v : t.feats.v) v = rng.uniform(lo, hi);
  return t;
}

FeatMat<double> random_mat(Rng& rng, std::size_t rows, std::size_t cols) {
  FeatMat<double> m(rows, cols);
  for (double& v : m.v) v = rng.uniform(-1.0, 1.0);
  return m;
}

// Distance from the nearest nonsmooth point (ReLU zero crossings and the
// GeM clamp) of a recorded forward pass. Finite differences are only
// meaningful when this margin exceeds the probe step.
double kink_margin(const nn::Tape<double>& tape,
                   const net::LocNetParams<double>& params) {
  const auto& vals = tape.values();
  // value layout: input, conv0, nr0, conv1, nr1, conv2, nr2, conv3, nr3,
  // up, lateral, merged, desc
  const nn::NormParams<double>* norms[4] = {&params.norm0, &params.norm1,
                                            &params.norm2, &params.norm3};
  double margin = 1e9;
  for (int layer = 0; layer < 4; ++layer) {
    const FeatMat<double>& x = vals.at(std::size_t(2 * layer + 1));
    const nn::NormParams<double>& np = *norms[layer];
    const std::size_t M = x.rows, C = x.cols;
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0, sq = 0;
      for (std::size_t j = 0; j < M; ++j) {
        mean += x.at(j, c);
        sq += x.at(j, c) * x.at(j, c);
      }
      mean /= double(M);
      const double var = std::max(0.0, sq / double(M) - mean * mean);
      const double invstd = 1.0 / std::sqrt(var + np.eps);
      for (std::size_t j = 0; j < M; ++j) {
        const double z = np.scale[c] * (x.at(j, c) - mean) * invstd + np.shift[c];
        margin = std::min(margin, std::abs(z));
      }
    }
  }
  const FeatMat<double>& merged = vals.at(11);
  for (const double v : merged.v)
    margin = std::min(margin, std::abs(v - params.arch.gem_floor));
  return margin;
}

}  // namespace

TEST_CASE("gem pool: arithmetic examples") {
  FeatMat<double> f(2, 1);
  f.at(0, 0) = 1.0;
  f.at(1, 0) = 3.0;
  CHECK(net::gem_pool(f, 1.0)[0] == doctest::Approx(2.0).epsilon(1e-12));

  f.at(1, 0) = 2.0;
  // ((1^3 + 2^3)/2)^(1/3) = 4.5^(1/3)
  CHECK(net::gem_pool(f, 3.0)[0] ==
        doctest::Approx(std::cbrt(4.5)).epsilon(1e-12));
  CHECK(net::gem_pool(f, 3.0)[0] == doctest::Approx(1.650964).epsilon(1e-6));

  FeatMat<double> one(1, 3);
  one.at(0, 0) = 0.3;
  one.at(0, 1) = 0.7;
  one.at(0, 2) = 0.11;
  for (const double p : {0.5, 1.0, 3.0, 42.0}) {
    const std::vector<double> g = net::gem_pool(one, p);
    CHECK(g[0] == doctest::Approx(0.3).epsilon(1e-9));
    CHECK(g[1] == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(g[2] == doctest::Approx(0.11).epsilon(1e-9));
  }

  FeatMat<double> empty(0, 3);
  CHECK_THROWS_AS(net::gem_pool(empty, 3.0), shape_error);
}

TEST_CASE("gem pool: limit and monotonicity laws") {
  Rng rng(31);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t m = 1 + rng.uniform_index(64);
    FeatMat<double> f(m, 1);
    for (double& v : f.v) v = rng.uniform(0.1, 1.0);
    double mean = 0, mx = 0;
    for (const double v : f.v) {
      mean += v;
      mx = std::max(mx, v);
    }
    mean /= double(m);

    // p = 1 is the arithmetic mean
    CHECK(std::abs(net::gem_pool(f, 1.0)[0] - mean) < 1e-9);

    // finite-p bound of the max-pooling limit: max*(1/M)^(1/p) <= gem <= max
    const double g100 = net::gem_pool(f, 100.0)[0];
    CHECK(g100 <= mx * (1 + 1e-12));
    CHECK(g100 >= mx * std::pow(1.0 / double(m), 1.0 / 100.0) * (1 - 1e-12));

    // monotone in p (power-mean inequality)
    const double p1 = rng.uniform(0.5, 50.0);
    const double p2 = p1 + rng.uniform(0.1, 50.0);
    CHECK(net::gem_pool(f, p1)[0] <= net::gem_pool(f, p2)[0] * (1 + 1e-12));
  }
}

TEST_CASE("descriptor distance") {
  const std::vector<double> v = {1.0, 2.0, 3.0};
  CHECK(net::descriptor_distance(v, v) == 0.0);
  const std::vector<double> a = {0.0, 0.0};
  const std::vector<double> b = {3.0, 4.0};
  CHECK(net::descriptor_distance(a, b) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK_THROWS_AS(net::descriptor_distance(a, v), shape_error);

  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> x(8), y(8), z(8);
    for (int c = 0; c < 8; ++c) {
      x[std::size_t(c)] = rng.uniform(-1, 1);
      y[std::size_t(c)] = rng.uniform(-1, 1);
      z[std::size_t(c)] = rng.uniform(-1, 1);
    }
    CHECK(net::descriptor_distance(x, z) <=
          net::descriptor_distance(x, y) + net::descriptor_distance(y, z) + 1e-12);
  }
}

TEST_CASE("forward: shape, determinism, permutation invariance") {
  Rng rng(33);
  const net::ArchConfig arch = tiny_arch();
  net::LocNetParams<double> params = net::LocNetParams<double>::make(arch, 99);
  SparseTensor<double> t = random_input(rng, 10, 40);

  net::ForwardResult<double> a = net::forward(t, params, net::Mode::eval);
  CHECK(a.descriptors.rows == 1);
  CHECK(a.descriptors.cols == std::size_t(arch.descriptor_dim()));
  for (const double v : a.descriptors.v) CHECK(std::isfinite(v));

  // twice in eval mode: identical
  net::ForwardResult<double> b = net::forward(t, params, net::Mode::eval);
  for (std::size_t i = 0; i < a.descriptors.v.size(); ++i)
    CHECK(a.descriptors.v[i] == b.descriptors.v[i]);

  // permuted sites quantify as the same set; the engine canonicalizes by
  // requiring sorted input, so feeding a shuffled copy re-sorted must match
  SparseTensor<double> shuffled = t;
  std::vector<std::size_t> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  SparseTensor<double> resorted;
  resorted.stride = t.stride;
  std::vector<std::pair<Coord, double>> rows;
  for (std::size_t i = 0; i < perm.size(); ++i)
    rows.push_back({t.coords[perm[i]], t.feats.at(perm[i], 0)});
  std::sort(rows.begin(), rows.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  resorted.feats = FeatMat<double>(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    resorted.coords.push_back(rows[i].first);
    resorted.feats.at(i, 0) = rows[i].second;
  }
  net::ForwardResult<double> c = net::forward(resorted, params, net::Mode::eval);
  for (std::size_t i = 0; i < a.descriptors.v.size(); ++i)
    CHECK(std::abs(c.descriptors.v[i] - a.descriptors.v[i]) < 1e-6);

  // unsorted input is rejected rather than silently mis-pooled
  SparseTensor<double> unsorted = t;
  std::swap(unsorted.coords[0], unsorted.coords[1]);
  CHECK_THROWS_AS(net::forward(unsorted, params, net::Mode::eval), shape_error);

  SparseTensor<double> empty;
  empty.feats = FeatMat<double>(0, 1);
  CHECK_THROWS_AS(net::forward(empty, params, net::Mode::eval), shape_error);
}

TEST_CASE("forward: eval is invariant to batch composition") {
  Rng rng(34);
  const net::ArchConfig arch = tiny_arch();
  net::LocNetParams<double> params = net::LocNetParams<double>::make(arch, 7);
  SparseTensor<double> a = random_input(rng, 9, 30);
  SparseTensor<double> b = random_input(rng, 9, 25);

  const net::ForwardResult<double> ra = net::forward(a, params, net::Mode::eval);
  const net::ForwardResult<double> rb = net::forward(b, params, net::Mode::eval);
  const SparseTensor<double> both = merge_batch<double>({a, b});
  const net::ForwardResult<double> rboth = net::forward(both, params, net::Mode::eval);
  REQUIRE(rboth.descriptors.rows == 2);
  for (std::size_t c = 0; c < ra.descriptors.cols; ++c) {
    CHECK(rboth.descriptors.at(0, c) ==
          doctest::Approx(ra.descriptors.at(0, c)).epsilon(1e-12));
    CHECK(rboth.descriptors.at(1, c) ==
          doctest::Approx(rb.descriptors.at(0, c)).epsilon(1e-12));
  }
}

TEST_CASE("forward: doubling input intensities changes the descriptor") {
  Rng rng(35);
  const net::ArchConfig arch = tiny_arch();
  net::LocNetParams<double> params = net::LocNetParams<double>::make(arch, 3);
  SparseTensor<double> t = random_input(rng, 10, 48);
  const net::ForwardResult<double> a = net::forward(t, params, net::Mode::eval);
  for (double& v : t.feats.v) v *= 2.0;
  const net::ForwardResult<double> b = net::forward(t, params, net::Mode::eval);
  double diff = 0;
  for (std::size_t i = 0; i < a.descriptors.v.size(); ++i)
    diff = std::max(diff, std::abs(a.descriptors.v[i] - b.descriptors.v[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("forward: concat merge doubles the descriptor width") {
  Rng rng(36);
  net::ArchConfig arch = tiny_arch();
  arch.merge = net::Merge::concat;
  CHECK(arch.descriptor_dim() == 2 * arch.fpn);
  net::LocNetParams<double> params = net::LocNetParams<double>::make(arch, 3);
  SparseTensor<double> t = random_input(rng, 8, 20);
  const net::ForwardResult<double> r = net::forward(t, params, net::Mode::eval);
  CHECK(r.descriptors.cols == std::size_t(2 * arch.fpn));
}

TEST_CASE("gradients: concat merge backward splits correctly") {
  Rng rng(41);
  net::ArchConfig arch = tiny_arch();
  arch.merge = net::Merge::concat;
  int done = 0, attempts = 0;
  while (done < 2 && attempts < 40) {
    ++attempts;
    net::LocNetParams<double> params =
        net::LocNetParams<double>::make(arch, 7000 + std::uint64_t(attempts));
    for (nn::NormParams<double>* np :
         {&params.norm0, &params.norm1, &params.norm2, &params.norm3}) {
      for (double& s : np->scale) s = rng.uniform(0.6, 1.4);
      for (double& s : np->shift) s = rng.uniform(-0.3, 0.3);
    }
    SparseTensor<double> t = random_input(rng, 12, 20);
    net::LocNetGrads<double> grads;
    grads.init_like(params);
    net::ForwardResult<double> fwd =
        net::forward(t, params, net::Mode::train, &grads);
    const FeatMat<double> w =
        random_mat(rng, fwd.descriptors.rows, fwd.descriptors.cols);
    net::backward(fwd, w);
    const FeatMat<double>& gin = fwd.tape.grad(fwd.input_id);

    const auto eval = [&] {
      net::LocNetGrads<double> scratch;
      scratch.init_like(params);
      net::ForwardResult<double> f =
          net::forward(t, params, net::Mode::train, &scratch);
      double acc = 0;
      for (std::size_t i = 0; i < f.descriptors.v.size(); ++i)
        acc += f.descriptors.v[i] * w.v[i];
      return acc;
    };
    FdSlots all;
    for (std::size_t i = 0; i < t.feats.v.size(); ++i) {
      all.x.push_back(&t.feats.v[i]);
      all.analytic.push_back(gin.v[i]);
    }
    net::for_each_param(params, grads,
                        [&](const std::string&, double* p, double* g,
                            std::size_t len) {
                          for (std::size_t i = 0; i < len; ++i) {
                            all.x.push_back(p + i);
                            all.analytic.push_back(g[i]);
                          }
                        });
    FdSlots slots = subsample_slots(all, rng, 200);
    const FdReport report = fd_check_smooth(slots, eval);
    CHECK(report.worst < 1e-4);
    if (report.checked < slots.x.size() * 7 / 10) continue;  // too kinky, redraw
    ++done;
  }
  CHECK(done == 2);
}

TEST_CASE("gradients: full network matches finite differences") {
  Rng rng(37);
  const net::ArchConfig arch = tiny_arch();
  int done = 0, attempts = 0;
  while (done < 5 && attempts < 100) {
    ++attempts;
    net::LocNetParams<double> params =
        net::LocNetParams<double>::make(arch, 1000 + std::uint64_t(attempts));
    // gradients are checked at a generic point: move the norm affine
    // parameters off their (0,1) initialization
    for (nn::NormParams<double>* np :
         {&params.norm0, &params.norm1, &params.norm2, &params.norm3}) {
      for (double& s : np->scale) s = rng.uniform(0.6, 1.4);
      for (double& s : np->shift) s = rng.uniform(-0.3, 0.3);
    }
    SparseTensor<double> t =
        random_input(rng, 12, 8 + int(rng.uniform_index(24)), 1);

    net::LocNetGrads<double> grads;
    grads.init_like(params);
    net::ForwardResult<double> fwd =
        net::forward(t, params, net::Mode::train, &grads);
    if (kink_margin(fwd.tape, params) < 1e-3) continue;  // FD needs smoothness

    const FeatMat<double> w =
        random_mat(rng, fwd.descriptors.rows, fwd.descriptors.cols);
    net::backward(fwd, w);
    const FeatMat<double>& gin = fwd.tape.grad(fwd.input_id);

    net::LocNetGrads<double> dummy;
    dummy.init_like(params);
    const auto eval = [&] {
      net::LocNetGrads<double> scratch;
      scratch.init_like(params);
      net::ForwardResult<double> f =
          net::forward(t, params, net::Mode::train, &scratch);
      double acc = 0;
      for (std::size_t i = 0; i < f.descriptors.v.size(); ++i)
        acc += f.descriptors.v[i] * w.v[i];
      return acc;
    };

    FdSlots all;
    for (std::size_t i = 0; i < t.feats.v.size(); ++i) {
      all.x.push_back(&t.feats.v[i]);
      all.analytic.push_back(gin.v[i]);
    }
    net::for_each_param(params, grads,
                        [&](const std::string&, double* p, double* g,
                            std::size_t len) {
                          for (std::size_t i = 0; i < len; ++i) {
                            all.x.push_back(p + i);
                            all.analytic.push_back(g[i]);
                          }
                        });
    FdSlots slots = subsample_slots(all, rng, 400);
    const FdReport report = fd_check_smooth(slots, eval);
    CHECK(report.worst < 1e-4);
    CHECK(report.checked > slots.x.size() * 9 / 10);
    ++done;
  }
  CHECK(done == 5);
}
