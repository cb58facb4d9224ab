#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sparseloc/sparse_nn.hpp"
#include "sparseloc/sparse_tensor.hpp"

namespace sparseloc::net {

enum class Merge { add, concat };

/// Channel plan of the feature extractor. The descriptor width equals the
/// FPN width under additive merge and twice it under concatenation.
struct ArchConfig {
  int ch0 = 32, ch1 = 32, ch2 = 64, ch3 = 64;
  int fpn = 256;
  Merge merge = Merge::add;
  double gem_floor = 1e-6;
  double gem_p_init = 3.0;

  int descriptor_dim() const { return merge == Merge::add ? fpn : 2 * fpn; }
  void validate() const {
    if (ch0 < 1 || ch1 < 1 || ch2 < 1 || ch3 < 1 || fpn < 1)
      throw config_error("arch: all channel counts must be >= 1");
    if (!(gem_floor > 0)) throw config_error("arch: gem floor must be > 0");
    if (!(gem_p_init > 0)) throw config_error("arch: gem p must be > 0");
  }
};

template <typename T>
struct LocNetParams {
  ArchConfig arch;
  nn::ConvParams<T> conv0, conv1, conv2, conv3, tconv3, lateral;
  nn::NormParams<T> norm0, norm1, norm2, norm3;
  T log_p = T(0);

  static LocNetParams make(const ArchConfig& a, std::uint64_t seed) {
    a.validate();
    Rng rng(seed);
    LocNetParams p;
    p.arch = a;
    p.conv0 = nn::ConvParams<T>::make(3, 1, 1, std::size_t(a.ch0), rng);
    p.conv1 = nn::ConvParams<T>::make(3, 2, std::size_t(a.ch0), std::size_t(a.ch1), rng);
    p.conv2 = nn::ConvParams<T>::make(3, 2, std::size_t(a.ch1), std::size_t(a.ch2), rng);
    p.conv3 = nn::ConvParams<T>::make(3, 2, std::size_t(a.ch2), std::size_t(a.ch3), rng);
    p.tconv3 = nn::ConvParams<T>::make(3, 2, std::size_t(a.ch3), std::size_t(a.fpn), rng);
    p.lateral = nn::ConvParams<T>::make(1, 1, std::size_t(a.ch2), std::size_t(a.fpn), rng);
    p.norm0 = nn::NormParams<T>::make(std::size_t(a.ch0));
    p.norm1 = nn::NormParams<T>::make(std::size_t(a.ch1));
    p.norm2 = nn::NormParams<T>::make(std::size_t(a.ch2));
    p.norm3 = nn::NormParams<T>::make(std::size_t(a.ch3));
    p.log_p = static_cast<T>(std::log(a.gem_p_init));
    return p;
  }
};

template <typename T>
struct LocNetGrads {
  nn::ConvGrad<T> conv0, conv1, conv2, conv3, tconv3, lateral;
  nn::NormGrad<T> norm0, norm1, norm2, norm3;
  T log_p = T(0);

  void init_like(const LocNetParams<T>& p) {
    conv0.init_like(p.conv0);
    conv1.init_like(p.conv1);
    conv2.init_like(p.conv2);
    conv3.init_like(p.conv3);
    tconv3.init_like(p.tconv3);
    lateral.init_like(p.lateral);
    norm0.init_like(p.norm0);
    norm1.init_like(p.norm1);
    norm2.init_like(p.norm2);
    norm3.init_like(p.norm3);
    log_p = T(0);
  }
};

/// Enumerates every trainable array of (params, grads) in a fixed order.
/// f(name, param_ptr, grad_ptr, length).
template <typename T, typename F>
void for_each_param(LocNetParams<T>& p, LocNetGrads<T>& g, F&& f) {
  auto conv = [&](const char* n, nn::ConvParams<T>& cp, nn::ConvGrad<T>& cg) {
    f(std::string(n) + ".w", cp.w.data(), cg.w.data(), cp.w.size());
    f(std::string(n) + ".b", cp.bias.data(), cg.bias.data(), cp.bias.size());
  };
  auto norm = [&](const char* n, nn::NormParams<T>& np, nn::NormGrad<T>& ng) {
    f(std::string(n) + ".scale", np.scale.data(), ng.scale.data(), np.scale.size());
    f(std::string(n) + ".shift", np.shift.data(), ng.shift.data(), np.shift.size());
  };
  conv("conv0", p.conv0, g.conv0);
  norm("norm0", p.norm0, g.norm0);
  conv("conv1", p.conv1, g.conv1);
  norm("norm1", p.norm1, g.norm1);
  conv("conv2", p.conv2, g.conv2);
  norm("norm2", p.norm2, g.norm2);
  conv("conv3", p.conv3, g.conv3);
  norm("norm3", p.norm3, g.norm3);
  conv("tconv3", p.tconv3, g.tconv3);
  conv("lateral", p.lateral, g.lateral);
  f(std::string("gem.log_p"), &p.log_p, &g.log_p, std::size_t(1));
}

enum class Mode { train, eval };

/// One forward pass. In train mode the tape is retained for backward and
/// running norm statistics are updated; eval mode is deterministic and
/// side-effect free.
template <typename T>
struct ForwardResult {
  FeatMat<T> descriptors;  // batch x descriptor_dim
  nn::Tape<T> tape;        // train mode only
  int input_id = -1;       // tape id of the input features
  int desc_id = -1;
};

/// Standalone GeM pool over one feature map (M sites x K channels).
template <typename T>
std::vector<T> gem_pool(const FeatMat<T>& features, double p, double floor = 1e-6) {
  if (features.rows == 0) throw shape_error("gem: empty feature map");
  std::vector<T> out(features.cols);
  for (std::size_t c = 0; c < features.cols; ++c) {
    double acc = 0;
    for (std::size_t j = 0; j < features.rows; ++j)
      acc += std::pow(std::max(double(features.at(j, c)), floor), p);
    out[c] = static_cast<T>(std::pow(acc / double(features.rows), 1.0 / p));
  }
  return out;
}

/// Euclidean distance between two descriptors of equal length.
template <typename T>
double descriptor_distance(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw shape_error("descriptor length mismatch");
  return std::sqrt(double(kern::active<T>().l2dist_sq(a.size(), a.data(), b.data())));
}

namespace detail {

/// Row ranges of consecutive equal batch indices. Coordinates must be
/// sorted; batch indices must be 0..B-1 with no gaps.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_segments(
    const std::vector<Coord>& coords) {
  std::vector<std::pair<std::size_t, std::size_t>> segs;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= coords.size(); ++i) {
    if (i == coords.size() || coords[i].b != coords[start].b) {
      if (coords[start].b != static_cast<std::int32_t>(segs.size()))
        throw shape_error("forward: batch indices must be contiguous from 0");
      segs.push_back({start, i});
      start = i;
    }
  }
  return segs;
}

}  // namespace detail

/// Full network: Conv0..3 bottom-up (each conv + norm + ReLU, Conv1..3
/// stride 2), transposed Conv3 back to the Conv2 coordinate set, lateral
/// 1x1 on the Conv2 activations, elementwise merge, GeM pooling per batch
/// element. In train mode `grads` receives the parameter gradient sinks
/// wired into the tape.
template <typename T>
ForwardResult<T> forward(const SparseTensor<T>& input, LocNetParams<T>& params,
                         Mode mode, LocNetGrads<T>* grads = nullptr) {
  if (input.size() == 0) throw shape_error("forward: empty input tensor");
  if (input.channels() != 1) throw shape_error("forward: input must have 1 channel");
  if (!std::is_sorted(input.coords.begin(), input.coords.end()))
    throw shape_error("forward: input coordinates must be sorted");
  const bool training = mode == Mode::train;
  if (training && grads == nullptr)
    throw usage_error("forward: train mode requires a gradient sink");

  const std::vector<std::pair<std::size_t, std::size_t>> segs =
      detail::batch_segments(input.coords);

  ForwardResult<T> r;
  if (training) {
    // Record the whole pass on the tape.
    nn::Tape<T>& tape = r.tape;
    r.input_id = tape.push_value(input.feats);

    auto conv_block = [&](int in_id, const std::vector<Coord>& in_coords,
                          std::array<int, 3> in_stride, nn::ConvParams<T>& cp,
                          nn::ConvGrad<T>& cg, nn::NormParams<T>& np,
                          nn::NormGrad<T>& ng, std::vector<Coord>& out_coords,
                          std::array<int, 3>& out_stride) {
      if (cp.stride == 1) {
        out_coords = in_coords;
        out_stride = in_stride;
      } else {
        out_stride = {in_stride[0] * cp.stride, in_stride[1] * cp.stride,
                      in_stride[2] * cp.stride};
        out_coords = nn::strided_out_coords(in_coords, out_stride);
      }
      auto km = std::make_shared<nn::KernelMap>(
          nn::build_kernel_map(in_coords, out_coords, cp.kernel_size, in_stride));
      const int cid = tape.record_conv(in_id, &cp, std::move(km),
                                       out_coords.size(), &cg);
      return tape.record_norm_relu(cid, &np, &ng);
    };

    std::vector<Coord> c0, c1, c2, c3;
    std::array<int, 3> s0, s1, s2, s3;
    const int n0 = conv_block(r.input_id, input.coords, input.stride,
                              params.conv0, grads->conv0, params.norm0,
                              grads->norm0, c0, s0);
    const int n1 = conv_block(n0, c0, s0, params.conv1, grads->conv1,
                              params.norm1, grads->norm1, c1, s1);
    const int n2 = conv_block(n1, c1, s1, params.conv2, grads->conv2,
                              params.norm2, grads->norm2, c2, s2);
    const int n3 = conv_block(n2, c2, s2, params.conv3, grads->conv3,
                              params.norm3, grads->norm3, c3, s3);

    // top-down: transposed conv from the Conv3 grid back onto the Conv2
    // coordinate set, plus the 1x1 lateral on the Conv2 activations
    auto km_t = std::make_shared<nn::KernelMap>(
        nn::build_kernel_map(c3, c2, params.tconv3.kernel_size, s2, true));
    const int up = tape.record_conv(n3, &params.tconv3, std::move(km_t),
                                    c2.size(), &grads->tconv3);
    auto km_l = std::make_shared<nn::KernelMap>(
        nn::build_kernel_map(c2, c2, 1, s2));
    const int lat = tape.record_conv(n2, &params.lateral, std::move(km_l),
                                     c2.size(), &grads->lateral);
    const int merged = params.arch.merge == Merge::add
                           ? tape.record_add(up, lat)
                           : tape.record_concat(up, lat);

    const std::vector<std::pair<std::size_t, std::size_t>> pooled_segs =
        detail::batch_segments(c2);
    if (pooled_segs.size() != segs.size())
      throw shape_error("forward: a batch element lost all sites");
    r.desc_id = tape.record_gem(merged, pooled_segs, params.log_p,
                                &grads->log_p, static_cast<T>(params.arch.gem_floor));
    r.descriptors = tape.value(r.desc_id);
    return r;
  }

  // eval path: no tape, running statistics, no updates
  auto conv_block_eval = [&](const FeatMat<T>& in, const std::vector<Coord>& in_coords,
                             std::array<int, 3> in_stride, nn::ConvParams<T>& cp,
                             nn::NormParams<T>& np, std::vector<Coord>& out_coords,
                             std::array<int, 3>& out_stride) {
    if (cp.stride == 1) {
      out_coords = in_coords;
      out_stride = in_stride;
    } else {
      out_stride = {in_stride[0] * cp.stride, in_stride[1] * cp.stride,
                    in_stride[2] * cp.stride};
      out_coords = nn::strided_out_coords(in_coords, out_stride);
    }
    const nn::KernelMap km =
        nn::build_kernel_map(in_coords, out_coords, cp.kernel_size, in_stride);
    FeatMat<T> conv = nn::conv_apply(in, cp, km, out_coords.size());
    return nn::norm_relu_forward(conv, np, false);
  };

  std::vector<Coord> c0, c1, c2, c3;
  std::array<int, 3> s0, s1, s2, s3;
  FeatMat<T> a0 = conv_block_eval(input.feats, input.coords, input.stride,
                                  params.conv0, params.norm0, c0, s0);
  FeatMat<T> a1 = conv_block_eval(a0, c0, s0, params.conv1, params.norm1, c1, s1);
  FeatMat<T> a2 = conv_block_eval(a1, c1, s1, params.conv2, params.norm2, c2, s2);
  FeatMat<T> a3 = conv_block_eval(a2, c2, s2, params.conv3, params.norm3, c3, s3);

  const nn::KernelMap km_t =
      nn::build_kernel_map(c3, c2, params.tconv3.kernel_size, s2, true);
  FeatMat<T> up = nn::conv_apply(a3, params.tconv3, km_t, c2.size());
  const nn::KernelMap km_l = nn::build_kernel_map(c2, c2, 1, s2);
  FeatMat<T> lat = nn::conv_apply(a2, params.lateral, km_l, c2.size());

  FeatMat<T> merged;
  if (params.arch.merge == Merge::add) {
    merged = std::move(up);
    kern::active<T>().add(merged.v.size(), lat.v.data(), merged.v.data());
  } else {
    merged = FeatMat<T>(up.rows, up.cols + lat.cols);
    for (std::size_t j = 0; j < up.rows; ++j) {
      std::copy(up.row(j), up.row(j) + up.cols, merged.row(j));
      std::copy(lat.row(j), lat.row(j) + lat.cols, merged.row(j) + up.cols);
    }
  }

  const std::vector<std::pair<std::size_t, std::size_t>> pooled_segs =
      detail::batch_segments(c2);
  if (pooled_segs.size() != segs.size())
    throw shape_error("forward: a batch element lost all sites");
  const double p = std::exp(double(params.log_p));
  r.descriptors = FeatMat<T>(pooled_segs.size(), merged.cols);
  for (std::size_t b = 0; b < pooled_segs.size(); ++b) {
    const auto [lo, hi] = pooled_segs[b];
    for (std::size_t c = 0; c < merged.cols; ++c) {
      double acc = 0;
      for (std::size_t j = lo; j < hi; ++j)
        acc += std::pow(std::max(double(merged.at(j, c)), params.arch.gem_floor), p);
      r.descriptors.at(b, c) =
          static_cast<T>(std::pow(acc / double(hi - lo), 1.0 / p));
    }
  }
  return r;
}

/// Runs the recorded backward pass, seeding with descriptor gradients.
template <typename T>
void backward(ForwardResult<T>& fwd, const FeatMat<T>& desc_grad) {
  fwd.tape.backward(fwd.desc_id, desc_grad);
}

}  // namespace sparseloc::net
