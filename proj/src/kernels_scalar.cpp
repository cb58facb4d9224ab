#include <cmath>

#include "sparseloc/kernels.hpp"

namespace sparseloc::kern {
namespace {

template <typename T>
void axpy_s(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
T dot_s(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void add_s(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

template <typename T>
T sum_s(std::size_t n, const T* x) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void accum_sq_s(std::size_t n, const T* x, T* acc) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += x[i] * x[i];
}

template <typename T>
void accum_mul_s(std::size_t n, const T* x, const T* y, T* acc) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += x[i] * y[i];
}

template <typename T>
void affine_s(std::size_t n, const T* a, const T* x, const T* b, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * x[i] + b[i];
}

template <typename T>
void relu_s(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_mask_s(std::size_t n, const T* ref, const T* g, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = ref[i] > T(0) ? g[i] : T(0);
}

template <typename T>
void muladd3_s(std::size_t n, const T* u, const T* g, const T* v, const T* xh,
               const T* w, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = u[i] * g[i] + v[i] * xh[i] + w[i];
}

template <typename T>
T l2dist_sq_s(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x[i] - y[i];
    acc += d * d;
  }
  return acc;
}

template <typename T>
void adam_s(std::size_t n, T* p, const T* g, T* m, T* v, T lr, T b1, T b2,
            T eps, T inv_bc1, T inv_bc2, T decay_factor) {
  for (std::size_t i = 0; i < n; ++i) {
    p[i] *= decay_factor;
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const T mhat = m[i] * inv_bc1;
    const T vhat = v[i] * inv_bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
Table<T> make_scalar() {
  Table<T> t;
  t.axpy = axpy_s<T>;
  t.dot = dot_s<T>;
  t.add = add_s<T>;
  t.sum = sum_s<T>;
  t.accum_sq = accum_sq_s<T>;
  t.accum_mul = accum_mul_s<T>;
  t.affine = affine_s<T>;
  t.relu = relu_s<T>;
  t.relu_mask = relu_mask_s<T>;
  t.muladd3 = muladd3_s<T>;
  t.l2dist_sq = l2dist_sq_s<T>;
  t.adam = adam_s<T>;
  t.name = "scalar";
  return t;
}

}  // namespace

template <>
const Table<float>& scalar_table<float>() {
  static const Table<float> t = make_scalar<float>();
  return t;
}

template <>
const Table<double>& scalar_table<double>() {
  static const Table<double> t = make_scalar<double>();
  return t;
}

}  // namespace sparseloc::kern
