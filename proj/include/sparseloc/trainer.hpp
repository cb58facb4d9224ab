#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparseloc/locnet.hpp"
#include "sparseloc/quantizer.hpp"
#include "sparseloc/rng.hpp"
#include "sparseloc/types.hpp"

namespace sparseloc::train {

struct AugmentConfig {
  double jitter_sigma = 0.05;      // meters, per-point Gaussian
  double removal_fraction = 0.10;  // fraction of points removed
  double translation_range = 1.0;  // meters, global uniform offset
  double flip_prob = 0.5;          // probability of mirroring y -> -y

  void validate() const {
    if (jitter_sigma < 0 || translation_range < 0)
      throw config_error("augment: negative magnitude");
    if (removal_fraction < 0 || removal_fraction >= 1)
      throw config_error("augment: removal fraction must be in [0, 1)");
    if (flip_prob < 0 || flip_prob > 1)
      throw config_error("augment: flip probability must be in [0, 1]");
  }
};

/// Per-point jitter, random removal, global translation and a mirror flip
/// (y -> -y, which in the spherical representation is a sign flip of the
/// azimuth). Intensities are untouched; deterministic for a fixed rng.
PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng);

/// max(d_ap - d_an + m, 0)
inline double triplet_loss(double d_ap, double d_an, double m) {
  const double l = d_ap - d_an + m;
  return l > 0 ? l : 0;
}

struct Triplet {
  std::size_t anchor, positive, negative;
};

struct MiningResult {
  std::vector<Triplet> triplets;    // only triplets with loss > 0
  std::size_t anchors_with_candidates = 0;
};

struct MiningLabels {
  std::vector<double> northing, easting;
  double pos_radius = 10.0;
  double neg_radius = 50.0;
};

/// Batch-hard mining: per anchor, the positive at maximum descriptor
/// distance and the negative at minimum descriptor distance (ties broken
/// by lowest index); triplets with zero loss are dropped. Positives are
/// other elements within pos_radius of the anchor position, negatives
/// beyond neg_radius.
template <typename T>
MiningResult mine_hard_triplets(const FeatMat<T>& descs,
                                const MiningLabels& labels, double margin) {
  const std::size_t n = descs.rows;
  if (labels.northing.size() != n || labels.easting.size() != n)
    throw shape_error("mining: label count mismatch");
  const auto& K = kern::active<T>();
  MiningResult out;
  for (std::size_t a = 0; a < n; ++a) {
    double worst_pos = -1, best_neg = -1;
    std::size_t pos_idx = n, neg_idx = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const double dn = labels.northing[j] - labels.northing[a];
      const double de = labels.easting[j] - labels.easting[a];
      const double ground = std::sqrt(dn * dn + de * de);
      const double d =
          std::sqrt(double(K.l2dist_sq(descs.cols, descs.row(a), descs.row(j))));
      if (ground <= labels.pos_radius) {
        if (d > worst_pos) {
          worst_pos = d;
          pos_idx = j;
        }
      } else if (ground > labels.neg_radius) {
        if (neg_idx == n || d < best_neg) {
          best_neg = d;
          neg_idx = j;
        }
      }
    }
    if (pos_idx == n || neg_idx == n) continue;
    ++out.anchors_with_candidates;
    if (triplet_loss(worst_pos, best_neg, margin) > 0)
      out.triplets.push_back({a, pos_idx, neg_idx});
  }
  return out;
}

/// Mean triplet loss over the mined triplets plus its gradient with
/// respect to the descriptors.
template <typename T>
double triplet_loss_backward(const FeatMat<T>& descs,
                             const std::vector<Triplet>& triplets, double margin,
                             FeatMat<T>& desc_grad) {
  desc_grad = FeatMat<T>(descs.rows, descs.cols);
  if (triplets.empty()) return 0;
  const auto& K = kern::active<T>();
  double total = 0;
  const double inv = 1.0 / double(triplets.size());
  for (const Triplet& t : triplets) {
    const T* a = descs.row(t.anchor);
    const T* p = descs.row(t.positive);
    const T* nr = descs.row(t.negative);
    const double d_ap = std::sqrt(double(K.l2dist_sq(descs.cols, a, p)));
    const double d_an = std::sqrt(double(K.l2dist_sq(descs.cols, a, nr)));
    const double l = triplet_loss(d_ap, d_an, margin);
    total += l;
    if (l <= 0) continue;
    const double sp = d_ap > 1e-12 ? inv / d_ap : 0;
    const double sn = d_an > 1e-12 ? inv / d_an : 0;
    for (std::size_t c = 0; c < descs.cols; ++c) {
      const double ap = double(a[c]) - double(p[c]);
      const double an = double(a[c]) - double(nr[c]);
      desc_grad.at(t.anchor, c) += static_cast<T>(sp * ap - sn * an);
      desc_grad.at(t.positive, c) += static_cast<T>(-sp * ap);
      desc_grad.at(t.negative, c) += static_cast<T>(sn * an);
    }
  }
  return total * inv;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;  // decoupled: p *= (1 - lr*decay) before the step
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // aligned with for_each_param order

  void init_like(net::LocNetParams<T>& params) {
    net::LocNetGrads<T> dummy;
    dummy.init_like(params);
    m.clear();
    v.clear();
    net::for_each_param(params, dummy,
                        [&](const std::string&, T*, T*, std::size_t len) {
                          m.emplace_back(len, T(0));
                          v.emplace_back(len, T(0));
                        });
    step = 0;
  }
};

/// One Adam update with bias correction over every trainable array.
template <typename T>
void adam_step(net::LocNetParams<T>& params, net::LocNetGrads<T>& grads,
               AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) throw usage_error("adam: state not initialized");
  ++state.step;
  const auto& K = kern::active<T>();
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const T decay_factor = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
  std::size_t slot = 0;
  net::for_each_param(params, grads,
                      [&](const std::string&, T* p, T* g, std::size_t len) {
                        if (state.m.at(slot).size() != len)
                          throw shape_error("adam: state shape mismatch");
                        K.adam(len, p, g, state.m[slot].data(),
                               state.v[slot].data(), static_cast<T>(cfg.lr),
                               static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                               static_cast<T>(cfg.eps), static_cast<T>(1.0 / bc1),
                               static_cast<T>(1.0 / bc2), decay_factor);
                        ++slot;
                      });
}

// ---------------------------------------------------------------------------
// epoch loop
// ---------------------------------------------------------------------------

struct TrainSample {
  PointCloud cloud;
  double northing = 0, easting = 0;
  std::string run_id;
};

struct TrainerConfig {
  double margin = 0.2;
  double pos_radius = 10.0;
  double neg_radius = 50.0;
  int batch_groups = 8;       // location groups per batch
  int clouds_per_group = 2;   // samples drawn per group
  int epochs = 30;
  std::uint64_t master_seed = 0;
  AdamConfig adam;
  AugmentConfig aug;
  quant::QuantConfig qcfg;

  void validate() const {
    if (margin < 0) throw config_error("trainer: margin must be >= 0");
    if (!(pos_radius > 0) || !(neg_radius > pos_radius))
      throw config_error("trainer: need 0 < pos_radius < neg_radius");
    if (batch_groups < 2) throw config_error("trainer: batch_groups must be >= 2");
    if (clouds_per_group < 2)
      throw config_error("trainer: clouds_per_group must be >= 2");
    if (epochs < 0) throw config_error("trainer: epochs must be >= 0");
    aug.validate();
    qcfg.validate();
  }
};

/// Groups sample indices whose positions lie within pos_radius of each
/// other (single-linkage). Every group can seed in-batch positives; a
/// group of one contributes the same cloud twice under different
/// augmentations.
std::vector<std::vector<std::size_t>> group_by_location(
    const std::vector<TrainSample>& samples, double pos_radius);

struct EpochMetrics {
  double mean_loss = 0;
  double active_ratio = 0;
  std::size_t batches = 0, skipped = 0;
};

/// One pass over shuffled location groups: augment -> quantize
/// (random_pick dedup) -> forward(train) -> mine -> loss -> backward ->
/// adam. Batches without active triplets are skipped. All randomness is
/// derived from (master_seed, epoch, element), so resuming at an epoch
/// boundary replays the identical stream.
template <typename T>
EpochMetrics train_epoch(const std::vector<TrainSample>& samples,
                         const std::vector<std::vector<std::size_t>>& groups,
                         net::LocNetParams<T>& params, AdamState<T>& state,
                         const TrainerConfig& cfg, int epoch) {
  cfg.validate();
  if (groups.empty()) throw config_error("trainer: no location groups");

  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(derive_seed(cfg.master_seed, "shuffle", std::uint64_t(epoch)));
  shuffle_rng.shuffle(order);

  EpochMetrics metrics;
  double loss_sum = 0;
  std::size_t active_total = 0, anchor_total = 0;

  const std::size_t per_batch = std::size_t(cfg.batch_groups);
  for (std::size_t start = 0; start < order.size(); start += per_batch) {
    const std::size_t end = std::min(order.size(), start + per_batch);
    if (end - start < 2) break;  // a lone group cannot form negatives
    const std::uint64_t batch_tag =
        (std::uint64_t(epoch) << 24) ^ std::uint64_t(start / per_batch);

    // assemble the batch: clouds_per_group draws per group
    std::vector<SparseTensor<T>> tensors;
    MiningLabels labels;
    labels.pos_radius = cfg.pos_radius;
    labels.neg_radius = cfg.neg_radius;
    Rng pick_rng(derive_seed(cfg.master_seed, "pick", batch_tag));
    std::uint64_t element = 0;
    for (std::size_t gi = start; gi < end; ++gi) {
      const std::vector<std::size_t>& group = groups[order[gi]];
      for (int s = 0; s < cfg.clouds_per_group; ++s, ++element) {
        const std::size_t sample_idx = group[pick_rng.uniform_index(group.size())];
        const TrainSample& sample = samples[sample_idx];
        Rng elem_rng(derive_seed(cfg.master_seed, "elem",
                                 batch_tag * 4096 + element));
        const PointCloud aug_cloud = augment(sample.cloud, cfg.aug, elem_rng);
        quant::QuantConfig q = cfg.qcfg;
        q.dedup = quant::DedupPolicy::random_pick;
        tensors.push_back(quant::quantize<T>(aug_cloud, q, 0, elem_rng));
        labels.northing.push_back(sample.northing);
        labels.easting.push_back(sample.easting);
      }
    }

    SparseTensor<T> batch = merge_batch(tensors);
    net::LocNetGrads<T> grads;
    grads.init_like(params);
    net::ForwardResult<T> fwd = net::forward(batch, params, net::Mode::train, &grads);

    const MiningResult mined =
        mine_hard_triplets(fwd.descriptors, labels, cfg.margin);
    anchor_total += mined.anchors_with_candidates;
    if (mined.triplets.empty()) {
      ++metrics.skipped;
      continue;
    }
    active_total += mined.triplets.size();

    FeatMat<T> desc_grad;
    const double loss =
        triplet_loss_backward(fwd.descriptors, mined.triplets, cfg.margin, desc_grad);
    net::backward(fwd, desc_grad);
    adam_step(params, grads, state, cfg.adam);

    loss_sum += loss;
    ++metrics.batches;
  }

  metrics.mean_loss = metrics.batches > 0 ? loss_sum / double(metrics.batches) : 0;
  metrics.active_ratio =
      anchor_total > 0 ? double(active_total) / double(anchor_total) : 0;
  return metrics;
}

}  // namespace sparseloc::train
