#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "sparseloc/cloud_io.hpp"
#include "sparseloc/trainer.hpp"
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

PointCloud random_cloud(Rng& rng, int n) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    c.points.push_back({rng.uniform(-40, 40), rng.uniform(-40, 40),
                        rng.uniform(-2, 8)});
    c.intensities.push_back(rng.uniform(0, 1));
  }
  return c;
}

// brute-force reference mining: enumerate all (a,p,n) triples
train::MiningResult brute_force_mine(const FeatMat<double>& descs,
                                     const train::MiningLabels& labels,
                                     double margin) {
  const auto dist = [&](std::size_t i, std::size_t j) {
    double acc = 0;
    for (std::size_t c = 0; c < descs.cols; ++c) {
      const double d = descs.at(i, c) - descs.at(j, c);
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  const auto ground = [&](std::size_t i, std::size_t j) {
    const double dn = labels.northing[i] - labels.northing[j];
    const double de = labels.easting[i] - labels.easting[j];
    return std::sqrt(dn * dn + de * de);
  };
  train::MiningResult out;
  for (std::size_t a = 0; a < descs.rows; ++a) {
    double worst_pos = -1, best_neg = 0;
    std::size_t pi = descs.rows, ni = descs.rows;
    for (std::size_t j = 0; j < descs.rows; ++j) {
      if (j == a) continue;
      if (ground(a, j) <= labels.pos_radius) {
        if (dist(a, j) > worst_pos) {
          worst_pos = dist(a, j);
          pi = j;
        }
      } else if (ground(a, j) > labels.neg_radius) {
        if (ni == descs.rows || dist(a, j) < best_neg) {
          best_neg = dist(a, j);
          ni = j;
        }
      }
    }
    if (pi == descs.rows || ni == descs.rows) continue;
    ++out.anchors_with_candidates;
    if (worst_pos - best_neg + margin > 0) out.triplets.push_back({a, pi, ni});
  }
  return out;
}

}  // namespace

TEST_CASE("triplet loss values") {
  CHECK(train::triplet_loss(0.5, 1.0, 0.2) == 0.0);
  CHECK(train::triplet_loss(1.0, 0.5, 0.2) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(train::triplet_loss(0.3, 0.3, 0.0) == 0.0);
}

TEST_CASE("triplet loss properties") {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const double ap = rng.uniform(0, 3), an = rng.uniform(0, 3);
    const double m = rng.uniform(0, 1);
    CHECK(train::triplet_loss(ap, an, m) >= 0.0);
    // non-increasing in d_an
    CHECK(train::triplet_loss(ap, an + 0.5, m) <= train::triplet_loss(ap, an, m));
    // convex in d_ap: midpoint rule
    const double ap2 = rng.uniform(0, 3);
    const double mid = train::triplet_loss((ap + ap2) / 2, an, m);
    const double avg = (train::triplet_loss(ap, an, m) +
                        train::triplet_loss(ap2, an, m)) / 2;
    CHECK(mid <= avg + 1e-12);
  }
}

TEST_CASE("mining: all losses zero gives empty result") {
  FeatMat<double> descs(4, 2);
  // two far-apart well-separated pairs
  descs.at(0, 0) = 0.0;
  descs.at(1, 0) = 0.01;
  descs.at(2, 0) = 10.0;
  descs.at(3, 0) = 10.01;
  train::MiningLabels labels;
  labels.northing = {0, 0, 100, 100};
  labels.easting = {0, 0, 0, 0};
  const train::MiningResult r = train::mine_hard_triplets(descs, labels, 0.2);
  CHECK(r.triplets.empty());
  CHECK(r.anchors_with_candidates == 4);
}

TEST_CASE("mining: hand-placed 3-element batch") {
  // anchor 0 with positive 1 (same spot) and negative 2; descriptor puts
  // the negative closer than the positive, so the triplet is active
  FeatMat<double> descs(3, 2);
  descs.at(0, 0) = 0.0;
  descs.at(1, 0) = 2.0;
  descs.at(2, 0) = 1.0;
  train::MiningLabels labels;
  labels.northing = {0, 1, 200};
  labels.easting = {0, 0, 0};
  const train::MiningResult r = train::mine_hard_triplets(descs, labels, 0.2);
  const train::MiningResult want = brute_force_mine(descs, labels, 0.2);
  REQUIRE(r.triplets.size() == want.triplets.size());
  REQUIRE(r.triplets.size() == 2);  // anchors 0 and 1 are active, 2 has no positive
  CHECK(r.triplets[0].anchor == 0);
  CHECK(r.triplets[0].positive == 1);
  CHECK(r.triplets[0].negative == 2);
}

TEST_CASE("mining: identical anchors mine identical triplets") {
  FeatMat<double> descs(4, 2);
  descs.at(0, 0) = 1.0;
  descs.at(1, 0) = 1.0;  // identical to anchor 0, same place
  descs.at(2, 0) = 5.0;
  descs.at(3, 0) = 1.4;
  train::MiningLabels labels;
  labels.northing = {0, 0, 80, 90};
  labels.easting = {0, 0, 0, 80};
  const train::MiningResult r = train::mine_hard_triplets(descs, labels, 0.5);
  REQUIRE(r.triplets.size() >= 2);
  // anchors 0 and 1 see the same candidate sets up to the index swap
  CHECK(r.triplets[0].negative == r.triplets[1].negative);
}

TEST_CASE("mining agrees with brute force on random batches") {
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(15);
    FeatMat<double> descs(n, 4);
    for (double& v : descs.v) v = rng.uniform(-1, 1);
    train::MiningLabels labels;
    for (std::size_t i = 0; i < n; ++i) {
      // cluster positions on a coarse grid so positives and negatives exist
      labels.northing.push_back(100.0 * double(rng.uniform_index(4)));
      labels.easting.push_back(rng.uniform(0, 5));
    }
    const double m = rng.uniform(0, 0.5);
    const train::MiningResult got = train::mine_hard_triplets(descs, labels, m);
    const train::MiningResult want = brute_force_mine(descs, labels, m);
    REQUIRE(got.triplets.size() == want.triplets.size());
    for (std::size_t i = 0; i < got.triplets.size(); ++i) {
      CHECK(got.triplets[i].anchor == want.triplets[i].anchor);
      CHECK(got.triplets[i].positive == want.triplets[i].positive);
      CHECK(got.triplets[i].negative == want.triplets[i].negative);
    }
    // every mined triplet is active
    for (const train::Triplet& t : got.triplets) {
      double ap = 0, an = 0;
      for (std::size_t c = 0; c < descs.cols; ++c) {
        ap += (descs.at(t.anchor, c) - descs.at(t.positive, c)) *
              (descs.at(t.anchor, c) - descs.at(t.positive, c));
        an += (descs.at(t.anchor, c) - descs.at(t.negative, c)) *
              (descs.at(t.anchor, c) - descs.at(t.negative, c));
      }
      CHECK(std::sqrt(ap) - std::sqrt(an) + m > 0);
    }
  }
}

TEST_CASE("augment") {
  Rng rng(23);
  const PointCloud cloud = random_cloud(rng, 1000);

  SUBCASE("all-zero config is the identity") {
    train::AugmentConfig cfg;
    cfg.jitter_sigma = 0;
    cfg.removal_fraction = 0;
    cfg.translation_range = 0;
    cfg.flip_prob = 0;
    Rng r(1);
    const PointCloud out = train::augment(cloud, cfg, r);
    REQUIRE(out.size() == cloud.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out.points[i].x == cloud.points[i].x);
      CHECK(out.points[i].y == cloud.points[i].y);
      CHECK(out.points[i].z == cloud.points[i].z);
      CHECK(out.intensities[i] == cloud.intensities[i]);
    }
  }

  SUBCASE("flip twice is the identity on coordinates") {
    train::AugmentConfig cfg;
    cfg.jitter_sigma = 0;
    cfg.removal_fraction = 0;
    cfg.translation_range = 0;
    cfg.flip_prob = 1.0;
    Rng r1(1), r2(2);
    const PointCloud once = train::augment(cloud, cfg, r1);
    const PointCloud twice = train::augment(once, cfg, r2);
    for (std::size_t i = 0; i < twice.size(); ++i) {
      CHECK(twice.points[i].y == cloud.points[i].y);
      CHECK(once.points[i].y == -cloud.points[i].y);
    }
  }

  SUBCASE("removal fraction 0.5 on 1000 points keeps 500") {
    train::AugmentConfig cfg;
    cfg.jitter_sigma = 0;
    cfg.removal_fraction = 0.5;
    cfg.translation_range = 0;
    cfg.flip_prob = 0;
    Rng r(1);
    CHECK(train::augment(cloud, cfg, r).size() == 500);
  }

  SUBCASE("intensities are untouched by jitter and translation") {
    train::AugmentConfig cfg;
    cfg.removal_fraction = 0;
    cfg.flip_prob = 0;
    Rng r(1);
    const PointCloud out = train::augment(cloud, cfg, r);
    REQUIRE(out.size() == cloud.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out.intensities[i] == cloud.intensities[i]);
  }

  SUBCASE("deterministic for a fixed rng seed") {
    train::AugmentConfig cfg;
    Rng r1(77), r2(77);
    const PointCloud a = train::augment(cloud, cfg, r1);
    const PointCloud b = train::augment(cloud, cfg, r2);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a.points[i].x == b.points[i].x);
  }
}

TEST_CASE("adam") {
  net::ArchConfig arch = tiny_arch();
  net::LocNetParams<double> params = net::LocNetParams<double>::make(arch, 5);
  train::AdamState<double> state;
  state.init_like(params);

  SUBCASE("first-step delta with grad 0.5 and zero decay") {
    net::LocNetGrads<double> grads;
    grads.init_like(params);
    std::fill(grads.conv0.w.begin(), grads.conv0.w.end(), 0.5);
    const double before = params.conv0.w[0];
    train::AdamConfig cfg;
    cfg.weight_decay = 0;
    train::adam_step(params, grads, state, cfg);
    // m_hat = 0.5, v_hat = 0.25: delta = -lr * 0.5/(0.5 + 1e-8)
    const double want = -1e-3 * 0.5 / (0.5 + 1e-8);
    CHECK(params.conv0.w[0] - before == doctest::Approx(want).epsilon(1e-10));
    CHECK(params.conv0.w[0] - before == doctest::Approx(-9.99999e-4).epsilon(1e-5));
  }

  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    net::LocNetGrads<double> grads;
    grads.init_like(params);
    const std::vector<double> before = params.conv2.w;
    train::AdamConfig cfg;
    cfg.weight_decay = 0;
    train::adam_step(params, grads, state, cfg);
    CHECK(params.conv2.w == before);
  }

  SUBCASE("equal gradients produce equal updates") {
    net::LocNetGrads<double> grads;
    grads.init_like(params);
    grads.conv1.bias[0] = 0.25;
    grads.conv1.bias[1] = 0.25;
    params.conv1.bias[0] = 1.0;
    params.conv1.bias[1] = 1.0;
    train::AdamConfig cfg;
    cfg.weight_decay = 0;
    train::adam_step(params, grads, state, cfg);
    CHECK(params.conv1.bias[0] == params.conv1.bias[1]);
  }

  SUBCASE("decoupled decay shrinks before the step") {
    net::LocNetGrads<double> grads;
    grads.init_like(params);
    params.lateral.bias[0] = 2.0;
    train::AdamConfig cfg;  // lr 1e-3, decay 1e-3
    train::adam_step(params, grads, state, cfg);
    CHECK(params.lateral.bias[0] == doctest::Approx(2.0 * (1 - 1e-6)).epsilon(1e-12));
  }
}

TEST_CASE("gradients: triplet loss through descriptors") {
  Rng rng(29);
  int done = 0, attempts = 0;
  while (done < 20 && attempts < 200) {
    ++attempts;
    const std::size_t n = 4 + rng.uniform_index(6);
    FeatMat<double> descs(n, 6);
    for (double& v : descs.v) v = rng.uniform(-1, 1);
    std::vector<train::Triplet> triplets;
    for (std::size_t a = 0; a + 2 < n && triplets.size() < 3; a += 3)
      triplets.push_back({a, a + 1, a + 2});
    const double margin = 0.3;

    // FD needs smooth hinges: keep every triplet away from its kink
    bool near_kink = false;
    for (const train::Triplet& t : triplets) {
      double ap = 0, an = 0;
      for (std::size_t c = 0; c < descs.cols; ++c) {
        ap += std::pow(descs.at(t.anchor, c) - descs.at(t.positive, c), 2);
        an += std::pow(descs.at(t.anchor, c) - descs.at(t.negative, c), 2);
      }
      if (std::abs(std::sqrt(ap) - std::sqrt(an) + margin) < 1e-2 ||
          std::sqrt(ap) < 1e-2 || std::sqrt(an) < 1e-2)
        near_kink = true;
    }
    if (near_kink) continue;

    FeatMat<double> grad;
    train::triplet_loss_backward(descs, triplets, margin, grad);
    const auto eval = [&] {
      FeatMat<double> g2;
      return train::triplet_loss_backward(descs, triplets, margin, g2);
    };
    FdSlots slots;
    for (std::size_t i = 0; i < descs.v.size(); ++i) {
      slots.x.push_back(&descs.v[i]);
      slots.analytic.push_back(grad.v[i]);
    }
    CHECK(fd_check(slots, eval) < 1e-4);
    ++done;
  }
  CHECK(done == 20);
}

TEST_CASE("gradients: end-to-end with frozen quantizer picks") {
  // intensity -> quantize(random_pick, frozen) -> forward -> triplet loss
  Rng rng(31);
  quant::QuantConfig qcfg = quant::QuantConfig::spherical_default();
  qcfg.dedup = quant::DedupPolicy::random_pick;
  const net::ArchConfig arch = tiny_arch();

  int done = 0, attempts = 0;
  while (done < 3 && attempts < 60) {
    ++attempts;
    net::LocNetParams<double> params =
        net::LocNetParams<double>::make(arch, 400 + std::uint64_t(attempts));
    for (nn::NormParams<double>* np :
         {&params.norm0, &params.norm1, &params.norm2, &params.norm3}) {
      for (double& s : np->scale) s = rng.uniform(0.6, 1.4);
      for (double& s : np->shift) s = rng.uniform(-0.3, 0.3);
    }
    // three tiny clouds: anchor/positive near each other, negative far
    std::vector<PointCloud> clouds;
    for (int k = 0; k < 3; ++k) {
      PointCloud c;
      for (int i = 0; i < 24; ++i) {
        c.points.push_back({rng.uniform(5, 30), rng.uniform(-10, 10),
                            rng.uniform(-1, 4)});
        c.intensities.push_back(rng.uniform(0.1, 0.9));
      }
      clouds.push_back(std::move(c));
    }

    const std::uint64_t pick_seed = 1234 + std::uint64_t(attempts);
    std::vector<SparseTensor<double>> parts;
    for (const PointCloud& c : clouds) {
      Rng qrng(pick_seed);  // frozen choice
      parts.push_back(quant::quantize<double>(c, qcfg, 0, qrng));
    }
    SparseTensor<double> batch = merge_batch(parts);

    const std::vector<train::Triplet> triplets = {{0, 1, 2}};
    const double margin = 0.3;
    const auto eval = [&] {
      net::LocNetGrads<double> scratch;
      scratch.init_like(params);
      net::ForwardResult<double> f =
          net::forward(batch, params, net::Mode::train, &scratch);
      FeatMat<double> g;
      return train::triplet_loss_backward(f.descriptors, triplets, margin, g);
    };

    net::LocNetGrads<double> grads;
    grads.init_like(params);
    net::ForwardResult<double> fwd =
        net::forward(batch, params, net::Mode::train, &grads);
    FeatMat<double> desc_grad;
    const double loss = train::triplet_loss_backward(fwd.descriptors, triplets,
                                                     margin, desc_grad);
    if (loss <= 1e-3) continue;  // hinge inactive, gradient trivially zero
    net::backward(fwd, desc_grad);
    const FeatMat<double>& gin = fwd.tape.grad(fwd.input_id);

    FdSlots all;
    for (std::size_t i = 0; i < batch.feats.v.size(); ++i) {
      all.x.push_back(&batch.feats.v[i]);
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
    FdSlots slots = subsample_slots(all, rng, 150);
    const FdReport report = fd_check_smooth(slots, eval);
    CHECK(report.worst < 1e-4);
    CHECK(report.checked > slots.x.size() * 8 / 10);
    ++done;
  }
  CHECK(done == 3);
}

TEST_CASE("train_epoch on a tiny synthetic world") {
  io::SyntheticWorldConfig sw;
  sw.n_places = 8;
  sw.n_runs = 2;
  sw.noise = 0.3;
  sw.points_per_cloud = 500;
  const io::SyntheticWorld world = io::generate_synthetic_world(5, sw);

  std::vector<train::TrainSample> samples;
  for (int p = 0; p < sw.n_places; ++p) {  // run 0 only
    samples.push_back({world.clouds[std::size_t(p)],
                       world.poses[std::size_t(p)].northing,
                       world.poses[std::size_t(p)].easting,
                       world.poses[std::size_t(p)].run_id});
  }
  const auto groups = train::group_by_location(samples, 10.0);
  CHECK(groups.size() == 8);  // places are 70 m apart

  train::TrainerConfig cfg;
  cfg.batch_groups = 4;
  cfg.master_seed = 99;
  cfg.qcfg = quant::QuantConfig::spherical_default();

  SUBCASE("learning rate 0 leaves parameters unchanged") {
    net::LocNetParams<float> params =
        net::LocNetParams<float>::make(tiny_arch(), 1);
    const net::LocNetParams<float> before = params;
    train::AdamState<float> state;
    state.init_like(params);
    train::TrainerConfig c2 = cfg;
    c2.adam.lr = 0;
    c2.adam.weight_decay = 0;
    train::train_epoch(samples, groups, params, state, c2, 1);
    CHECK(params.conv0.w == before.conv0.w);
    CHECK(params.tconv3.w == before.tconv3.w);
    CHECK(params.log_p == before.log_p);
  }

  SUBCASE("fixed seed reproduces epoch metrics and parameters") {
    net::LocNetParams<float> p1 = net::LocNetParams<float>::make(tiny_arch(), 1);
    net::LocNetParams<float> p2 = net::LocNetParams<float>::make(tiny_arch(), 1);
    train::AdamState<float> s1, s2;
    s1.init_like(p1);
    s2.init_like(p2);
    const train::EpochMetrics m1 = train::train_epoch(samples, groups, p1, s1, cfg, 1);
    const train::EpochMetrics m2 = train::train_epoch(samples, groups, p2, s2, cfg, 1);
    CHECK(m1.mean_loss == m2.mean_loss);
    CHECK(m1.active_ratio == m2.active_ratio);
    CHECK(p1.conv0.w == p2.conv0.w);
    CHECK(p1.norm2.running_mean == p2.norm2.running_mean);
  }

  SUBCASE("loss decreases over a few epochs") {
    net::LocNetParams<float> params =
        net::LocNetParams<float>::make(tiny_arch(), 1);
    train::AdamState<float> state;
    state.init_like(params);
    std::vector<double> losses;
    for (int e = 1; e <= 5; ++e)
      losses.push_back(
          train::train_epoch(samples, groups, params, state, cfg, e).mean_loss);
    CHECK(losses.back() < losses.front());
  }
}
