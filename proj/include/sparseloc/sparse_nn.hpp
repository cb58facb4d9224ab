#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sparseloc/kernels.hpp"
#include "sparseloc/rng.hpp"
#include "sparseloc/sparse_tensor.hpp"

namespace sparseloc::nn {

/// Gather/scatter plan for one convolution: for each kernel offset, the
/// (input row, output row) pairs whose coordinates differ by exactly that
/// offset. Offsets enumerate lexicographically over (k1,k2,k3) in
/// {-1,0,1}^3 (just the zero offset for kernel size 1), scaled per axis by
/// `offset_scale`.
struct KernelMap {
  int kernel_size = 3;
  std::array<int, 3> offset_scale = {1, 1, 1};
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> pairs;

  int volume() const { return kernel_size == 1 ? 1 : 27; }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.size();
    return n;
  }
};

/// Kernel offset for linear index k, before scaling.
std::array<int, 3> kernel_offset(int kernel_size, int k);

/// Output coordinates of a strided convolution: per-axis floor to the
/// coarser lattice, deduplicated, sorted. `step` is the output lattice
/// pitch in base units (input stride times layer stride).
std::vector<Coord> strided_out_coords(std::span<const Coord> in,
                                      std::array<int, 3> step);

/// Builds the pair lists with a hash table over the input coordinates,
/// O(|out| * kernel_volume) expected. For a regular convolution the input
/// site matched to output o at offset k sits at coord(o) + k*scale; a
/// transposed map flips the sign so that its forward is the adjoint of the
/// matching strided convolution.
KernelMap build_kernel_map(std::span<const Coord> in_coords,
                           std::span<const Coord> out_coords, int kernel_size,
                           std::array<int, 3> offset_scale,
                           bool transposed = false);

template <typename T>
struct ConvParams {
  int kernel_size = 3;
  int stride = 1;  // {1, 2}
  std::size_t in_ch = 0, out_ch = 0;
  std::vector<T> w;     // [kernel_volume][in_ch][out_ch]
  std::vector<T> bias;  // [out_ch]

  int volume() const { return kernel_size == 1 ? 1 : 27; }
  const T* wk(int k) const { return w.data() + std::size_t(k) * in_ch * out_ch; }
  T* wk(int k) { return w.data() + std::size_t(k) * in_ch * out_ch; }

  static ConvParams make(int kernel_size, int stride, std::size_t in_ch,
                         std::size_t out_ch, Rng& rng) {
    ConvParams p;
    p.kernel_size = kernel_size;
    p.stride = stride;
    p.in_ch = in_ch;
    p.out_ch = out_ch;
    p.w.resize(std::size_t(p.volume()) * in_ch * out_ch);
    p.bias.resize(out_ch);
    const double bound = 1.0 / std::sqrt(double(in_ch) * p.volume());
    for (T& x : p.w) x = static_cast<T>(rng.uniform(-bound, bound));
    for (T& x : p.bias) x = static_cast<T>(rng.uniform(-bound, bound));
    return p;
  }
};

template <typename T>
struct NormParams {
  std::size_t ch = 0;
  std::vector<T> scale, shift;              // learned
  std::vector<T> running_mean, running_var; // inference statistics
  T eps = T(1e-5);
  T momentum = T(0.1);

  static NormParams make(std::size_t ch) {
    NormParams n;
    n.ch = ch;
    n.scale.assign(ch, T(1));
    n.shift.assign(ch, T(0));
    n.running_mean.assign(ch, T(0));
    n.running_var.assign(ch, T(1));
    return n;
  }
};

template <typename T>
struct ConvGrad {
  std::vector<T> w, bias;
  void init_like(const ConvParams<T>& p) {
    w.assign(p.w.size(), T(0));
    bias.assign(p.bias.size(), T(0));
  }
};

template <typename T>
struct NormGrad {
  std::vector<T> scale, shift;
  void init_like(const NormParams<T>& p) {
    scale.assign(p.ch, T(0));
    shift.assign(p.ch, T(0));
  }
};

// ---------------------------------------------------------------------------
// raw ops (also used standalone in tests)
// ---------------------------------------------------------------------------

/// out[o] = bias + sum over offsets k and pairs (i,o): W[k]^T in[i].
/// Accumulation per output row walks offsets in their fixed enumeration
/// order, so the result is deterministic and independent of site order.
template <typename T>
FeatMat<T> conv_apply(const FeatMat<T>& in, const ConvParams<T>& p,
                      const KernelMap& km, std::size_t out_rows) {
  if (in.cols != p.in_ch) throw shape_error("conv: input channel mismatch");
  if (km.volume() != p.volume()) throw shape_error("conv: kernel map mismatch");
  FeatMat<T> out(out_rows, p.out_ch);
  for (std::size_t o = 0; o < out_rows; ++o)
    std::copy(p.bias.begin(), p.bias.end(), out.row(o));
  const auto& K = kern::active<T>();
  for (int k = 0; k < km.volume(); ++k) {
    const T* Wk = p.wk(k);
    for (const auto& [i, o] : km.pairs[k]) {
      const T* in_row = in.row(std::size_t(i));
      T* out_row = out.row(std::size_t(o));
      for (std::size_t c = 0; c < p.in_ch; ++c)
        K.axpy(p.out_ch, in_row[c], Wk + c * p.out_ch, out_row);
    }
  }
  return out;
}

/// Exact adjoint of conv_apply. Accumulates into the sinks that are
/// non-null: g_in (input gradients), g_w / g_bias (parameter gradients).
template <typename T>
void conv_backward(const FeatMat<T>& in, const FeatMat<T>& g_out,
                   const ConvParams<T>& p, const KernelMap& km,
                   FeatMat<T>* g_in, std::vector<T>* g_w,
                   std::vector<T>* g_bias) {
  if (g_out.cols != p.out_ch) throw shape_error("conv backward: channel mismatch");
  const auto& K = kern::active<T>();
  if (g_bias) {
    for (std::size_t o = 0; o < g_out.rows; ++o)
      K.add(p.out_ch, g_out.row(o), g_bias->data());
  }
  for (int k = 0; k < km.volume(); ++k) {
    const T* Wk = p.wk(k);
    T* GWk = g_w ? g_w->data() + std::size_t(k) * p.in_ch * p.out_ch : nullptr;
    for (const auto& [i, o] : km.pairs[k]) {
      const T* g_row = g_out.row(std::size_t(o));
      if (g_in) {
        T* gi = g_in->row(std::size_t(i));
        for (std::size_t c = 0; c < p.in_ch; ++c)
          gi[c] += K.dot(p.out_ch, Wk + c * p.out_ch, g_row);
      }
      if (GWk) {
        const T* in_row = in.row(std::size_t(i));
        for (std::size_t c = 0; c < p.in_ch; ++c)
          K.axpy(p.out_ch, in_row[c], g_row, GWk + c * p.out_ch);
      }
    }
  }
}

template <typename T>
struct NormReluCtx {
  FeatMat<T> xhat;         // normalized pre-affine activations
  std::vector<T> invstd;   // per channel
  bool valid = false;
};

/// Per-channel normalization over all active sites followed by ReLU.
/// Training mode uses batch statistics (biased variance) and updates the
/// running buffers with `momentum`; eval mode normalizes with the running
/// buffers. `ctx` must be non-null in training mode when a backward pass
/// will follow.
template <typename T>
FeatMat<T> norm_relu_forward(const FeatMat<T>& in, NormParams<T>& p,
                             bool training, NormReluCtx<T>* ctx = nullptr) {
  if (in.cols != p.ch) throw shape_error("norm: channel mismatch");
  if (in.rows == 0) throw shape_error("norm: zero active sites");
  const auto& K = kern::active<T>();
  const std::size_t M = in.rows, C = in.cols;

  std::vector<T> mean(C, T(0)), var(C, T(0));
  if (training) {
    for (std::size_t j = 0; j < M; ++j) K.add(C, in.row(j), mean.data());
    for (std::size_t c = 0; c < C; ++c) mean[c] /= T(M);
    for (std::size_t j = 0; j < M; ++j) K.accum_sq(C, in.row(j), var.data());
    for (std::size_t c = 0; c < C; ++c) {
      var[c] = var[c] / T(M) - mean[c] * mean[c];
      if (var[c] < T(0)) var[c] = T(0);
    }
    for (std::size_t c = 0; c < C; ++c) {
      p.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * mean[c];
      p.running_var[c] = (T(1) - p.momentum) * p.running_var[c] + p.momentum * var[c];
    }
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }

  std::vector<T> invstd(C), a(C), b(C), sa(C), sb(C);
  for (std::size_t c = 0; c < C; ++c) {
    invstd[c] = T(1) / std::sqrt(var[c] + p.eps);
    a[c] = invstd[c];
    b[c] = -mean[c] * invstd[c];
    sa[c] = p.scale[c];
    sb[c] = p.shift[c];
  }

  FeatMat<T> out(M, C);
  FeatMat<T> xhat;
  if (ctx) xhat = FeatMat<T>(M, C);
  std::vector<T> tmp(C);
  for (std::size_t j = 0; j < M; ++j) {
    K.affine(C, a.data(), in.row(j), b.data(), tmp.data());   // xhat
    if (ctx) std::copy(tmp.begin(), tmp.end(), xhat.row(j));
    K.affine(C, sa.data(), tmp.data(), sb.data(), tmp.data()); // scale/shift
    K.relu(C, tmp.data(), out.row(j));
  }
  if (ctx) {
    ctx->xhat = std::move(xhat);
    ctx->invstd = std::move(invstd);
    ctx->valid = true;
  }
  return out;
}

/// Backward of the fused norm+ReLU through the batch-statistics path.
/// `out` is the forward result (its positivity is the ReLU mask).
template <typename T>
void norm_relu_backward(const FeatMat<T>& out, const FeatMat<T>& g_out,
                        const NormParams<T>& p, const NormReluCtx<T>& ctx,
                        FeatMat<T>* g_in, NormGrad<T>* g_param) {
  if (!ctx.valid) throw usage_error("norm backward before forward");
  const auto& K = kern::active<T>();
  const std::size_t M = out.rows, C = out.cols;

  // g_z: gradient at the pre-ReLU activations
  FeatMat<T> g_z(M, C);
  for (std::size_t j = 0; j < M; ++j)
    K.relu_mask(C, out.row(j), g_out.row(j), g_z.row(j));

  std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
  for (std::size_t j = 0; j < M; ++j) {
    K.add(C, g_z.row(j), sum_g.data());
    K.accum_mul(C, g_z.row(j), ctx.xhat.row(j), sum_gx.data());
  }
  if (g_param) {
    K.add(C, sum_gx.data(), g_param->scale.data());
    K.add(C, sum_g.data(), g_param->shift.data());
  }
  if (g_in) {
    std::vector<T> u(C), v(C), w(C), tmp(C);
    for (std::size_t c = 0; c < C; ++c) {
      u[c] = p.scale[c] * ctx.invstd[c];
      v[c] = -u[c] * sum_gx[c] / T(M);
      w[c] = -u[c] * sum_g[c] / T(M);
    }
    // g_in[j] += u*g_z[j] + v*xhat[j] + w  (w folded in via muladd3's b-term)
    std::vector<T> wrow(C);
    for (std::size_t j = 0; j < M; ++j) {
      K.muladd3(C, u.data(), g_z.row(j), v.data(), ctx.xhat.row(j), w.data(),
                tmp.data());
      K.add(C, tmp.data(), g_in->row(j));
    }
  }
}

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

/// Records the forward pass of the fixed architecture and replays it in
/// reverse. Values (feature matrices) are owned by the tape and referenced
/// by id; parameter gradients accumulate into caller-owned sinks wired at
/// record time.
template <typename T>
class Tape {
 public:
  int push_value(FeatMat<T> v) {
    values_.push_back(std::move(v));
    return static_cast<int>(values_.size()) - 1;
  }
  const FeatMat<T>& value(int id) const { return values_.at(std::size_t(id)); }
  const std::vector<FeatMat<T>>& values() const { return values_; }

  int record_conv(int in_id, const ConvParams<T>* layer,
                  std::shared_ptr<const KernelMap> km, std::size_t out_rows,
                  ConvGrad<T>* g) {
    const int out_id = push_value(conv_apply(value(in_id), *layer, *km, out_rows));
    nodes_.push_back(ConvNode{in_id, out_id, layer, std::move(km), g});
    return out_id;
  }

  int record_norm_relu(int in_id, NormParams<T>* layer, NormGrad<T>* g) {
    NormReluCtx<T> ctx;
    const int out_id = push_value(norm_relu_forward(value(in_id), *layer, true, &ctx));
    nodes_.push_back(NormNode{in_id, out_id, layer, g, std::move(ctx)});
    return out_id;
  }

  int record_add(int a_id, int b_id) {
    const FeatMat<T>& a = value(a_id);
    const FeatMat<T>& b = value(b_id);
    if (a.rows != b.rows || a.cols != b.cols)
      throw shape_error("add: shape mismatch");
    FeatMat<T> out = a;
    kern::active<T>().add(out.v.size(), b.v.data(), out.v.data());
    const int out_id = push_value(std::move(out));
    nodes_.push_back(AddNode{a_id, b_id, out_id});
    return out_id;
  }

  int record_concat(int a_id, int b_id) {
    const FeatMat<T>& a = value(a_id);
    const FeatMat<T>& b = value(b_id);
    if (a.rows != b.rows) throw shape_error("concat: row mismatch");
    FeatMat<T> out(a.rows, a.cols + b.cols);
    for (std::size_t j = 0; j < a.rows; ++j) {
      std::copy(a.row(j), a.row(j) + a.cols, out.row(j));
      std::copy(b.row(j), b.row(j) + b.cols, out.row(j) + a.cols);
    }
    const int out_id = push_value(std::move(out));
    nodes_.push_back(ConcatNode{a_id, b_id, out_id});
    return out_id;
  }

  /// Generalized-mean pooling over per-batch row segments. Features are
  /// clamped to `floor` before exponentiation; internal accumulation runs
  /// in double. Output row b holds the descriptor of segment b.
  int record_gem(int in_id, std::vector<std::pair<std::size_t, std::size_t>> segs,
                 T log_p, T* g_log_p, T floor) {
    const FeatMat<T>& in = value(in_id);
    const double p = std::exp(double(log_p));
    FeatMat<T> out(segs.size(), in.cols);
    for (std::size_t b = 0; b < segs.size(); ++b) {
      const auto [lo, hi] = segs[b];
      if (hi <= lo) throw shape_error("gem: empty feature map segment");
      for (std::size_t c = 0; c < in.cols; ++c) {
        double acc = 0;
        for (std::size_t j = lo; j < hi; ++j) {
          const double h = std::max(double(in.at(j, c)), double(floor));
          acc += std::pow(h, p);
        }
        out.at(b, c) = static_cast<T>(std::pow(acc / double(hi - lo), 1.0 / p));
      }
    }
    const int out_id = push_value(std::move(out));
    nodes_.push_back(GemNode{in_id, out_id, log_p, g_log_p, floor, std::move(segs)});
    return out_id;
  }

  FeatMat<T>& grad(int id) {
    if (!backward_ran_) throw usage_error("tape: gradient read before backward");
    return grad_at(id);
  }

  /// Walks the recorded nodes in reverse, seeding the final value's
  /// gradient with `seed`.
  void backward(int final_id, const FeatMat<T>& seed) {
    if (nodes_.empty()) throw usage_error("tape: backward before forward");
    if (backward_ran_) throw usage_error("tape: backward ran twice");
    const FeatMat<T>& fin = value(final_id);
    if (seed.rows != fin.rows || seed.cols != fin.cols)
      throw shape_error("tape: seed gradient shape mismatch");
    grads_.assign(values_.size(), FeatMat<T>{});
    grad_at(final_id) = seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      std::visit([this](auto& n) { this->backward_node(n); }, *it);
    backward_ran_ = true;
  }

 private:
  struct ConvNode {
    int in_id, out_id;
    const ConvParams<T>* layer;
    std::shared_ptr<const KernelMap> km;
    ConvGrad<T>* g;
  };
  struct NormNode {
    int in_id, out_id;
    NormParams<T>* layer;
    NormGrad<T>* g;
    NormReluCtx<T> ctx;
  };
  struct AddNode {
    int a_id, b_id, out_id;
  };
  struct ConcatNode {
    int a_id, b_id, out_id;
  };
  struct GemNode {
    int in_id, out_id;
    T log_p;
    T* g_log_p;
    T floor;
    std::vector<std::pair<std::size_t, std::size_t>> segs;
  };
  using Node = std::variant<ConvNode, NormNode, AddNode, ConcatNode, GemNode>;

  FeatMat<T>& grad_at(int id) {
    FeatMat<T>& g = grads_.at(std::size_t(id));
    const FeatMat<T>& v = values_[std::size_t(id)];
    if (g.rows != v.rows || g.cols != v.cols) g = FeatMat<T>(v.rows, v.cols);
    return g;
  }

  void backward_node(ConvNode& n) {
    conv_backward(value(n.in_id), grad_at(n.out_id), *n.layer, *n.km,
                  &grad_at(n.in_id), n.g ? &n.g->w : nullptr,
                  n.g ? &n.g->bias : nullptr);
  }
  void backward_node(NormNode& n) {
    norm_relu_backward(value(n.out_id), grad_at(n.out_id), *n.layer, n.ctx,
                       &grad_at(n.in_id), n.g);
  }
  void backward_node(AddNode& n) {
    const auto& K = kern::active<T>();
    const FeatMat<T>& g = grad_at(n.out_id);
    K.add(g.v.size(), g.v.data(), grad_at(n.a_id).v.data());
    K.add(g.v.size(), g.v.data(), grad_at(n.b_id).v.data());
  }
  void backward_node(ConcatNode& n) {
    const FeatMat<T>& g = grad_at(n.out_id);
    FeatMat<T>& ga = grad_at(n.a_id);
    FeatMat<T>& gb = grad_at(n.b_id);
    for (std::size_t j = 0; j < g.rows; ++j) {
      for (std::size_t c = 0; c < ga.cols; ++c) ga.at(j, c) += g.at(j, c);
      for (std::size_t c = 0; c < gb.cols; ++c) gb.at(j, c) += g.at(j, ga.cols + c);
    }
  }
  void backward_node(GemNode& n) {
    const FeatMat<T>& in = value(n.in_id);
    const FeatMat<T>& out = value(n.out_id);
    const FeatMat<T>& g_out = grad_at(n.out_id);
    FeatMat<T>& g_in = grad_at(n.in_id);
    const double p = std::exp(double(n.log_p));
    double g_p = 0;
    for (std::size_t b = 0; b < n.segs.size(); ++b) {
      const auto [lo, hi] = n.segs[b];
      const double M = double(hi - lo);
      for (std::size_t c = 0; c < in.cols; ++c) {
        const double g = double(out.at(b, c));
        const double gd = double(g_out.at(b, c));
        if (gd == 0) continue;
        // S = mean of h^p; g = S^(1/p)
        double S = 0, Slog = 0;
        for (std::size_t j = lo; j < hi; ++j) {
          const double h = std::max(double(in.at(j, c)), double(n.floor));
          const double hp = std::pow(h, p);
          S += hp;
          Slog += hp * std::log(h);
        }
        S /= M;
        Slog /= M;
        if (S <= 0) continue;
        // dg/dh_j = g^(1-p) h^(p-1) / M for unclamped h
        const double scale = gd * std::pow(g, 1.0 - p) / M;
        for (std::size_t j = lo; j < hi; ++j) {
          const double f = double(in.at(j, c));
          const double h = std::max(f, double(n.floor));
          if (f > double(n.floor))
            g_in.at(j, c) += static_cast<T>(scale * std::pow(h, p - 1.0));
        }
        // dg/dp = g * (Slog/(p*S) - ln(S)/p^2)
        g_p += gd * g * (Slog / (p * S) - std::log(S) / (p * p));
      }
    }
    if (n.g_log_p) *n.g_log_p += static_cast<T>(g_p * p);  // chain p = exp(log_p)
  }

  std::vector<FeatMat<T>> values_;
  std::vector<FeatMat<T>> grads_;
  std::vector<Node> nodes_;
  bool backward_ran_ = false;
};

}  // namespace sparseloc::nn
