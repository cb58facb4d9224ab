#pragma once

#include <cstddef>

namespace sparseloc::kern {

/// Dispatch table for the data-parallel inner loops of the pipeline:
/// channel accumulation in the sparse convolutions, per-channel statistics
/// in the norm layers, descriptor distances and the optimizer update.
///
/// Every entry has a scalar reference implementation; an AVX2 variant is
/// selected at runtime when the CPU supports it. The two are equivalence-
/// tested against each other (reassociation of sums changes the result by
/// a few ulp, never more).
template <typename T>
struct Table {
  // y[i] += a * x[i]
  void (*axpy)(std::size_t n, T a, const T* x, T* y);
  // sum_i x[i] * y[i]
  T (*dot)(std::size_t n, const T* x, const T* y);
  // y[i] += x[i]
  void (*add)(std::size_t n, const T* x, T* y);
  // sum_i x[i]
  T (*sum)(std::size_t n, const T* x);
  // acc[i] += x[i]^2
  void (*accum_sq)(std::size_t n, const T* x, T* acc);
  // acc[i] += x[i] * y[i]
  void (*accum_mul)(std::size_t n, const T* x, const T* y, T* acc);
  // y[i] = a[i] * x[i] + b[i]
  void (*affine)(std::size_t n, const T* a, const T* x, const T* b, T* y);
  // y[i] = max(x[i], 0)
  void (*relu)(std::size_t n, const T* x, T* y);
  // y[i] = ref[i] > 0 ? g[i] : 0
  void (*relu_mask)(std::size_t n, const T* ref, const T* g, T* y);
  // y[i] = u[i]*g[i] + v[i]*xh[i] + w[i]
  void (*muladd3)(std::size_t n, const T* u, const T* g, const T* v,
                  const T* xh, const T* w, T* y);
  // sum_i (x[i]-y[i])^2
  T (*l2dist_sq)(std::size_t n, const T* x, const T* y);
  // decoupled-decay Adam step:
  //   p *= decay_factor
  //   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
  //   p -= lr * (m*inv_bc1) / (sqrt(v*inv_bc2) + eps)
  void (*adam)(std::size_t n, T* p, const T* g, T* m, T* v, T lr, T b1, T b2,
               T eps, T inv_bc1, T inv_bc2, T decay_factor);
  const char* name;
};

template <typename T>
const Table<T>& scalar_table();

/// AVX2+FMA table, or nullptr when the binary or the CPU lacks support.
template <typename T>
const Table<T>* avx2_table();

/// Best table for this machine, chosen once. Environment variable
/// SPARSELOC_KERNELS=scalar forces the reference path.
template <typename T>
const Table<T>& active();

bool avx2_supported();

}  // namespace sparseloc::kern
