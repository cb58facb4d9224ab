// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; the dispatcher only installs these tables after a runtime
// CPU check, so nothing here may be called on older hardware.

#include "sparseloc/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define SPARSELOC_HAVE_AVX2_TU 1
#include <immintrin.h>

#include <cmath>
#endif

namespace sparseloc::kern {

#if SPARSELOC_HAVE_AVX2_TU
namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline double hsum4(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

// ---- float, 8 lanes ----

void axpy_f(std::size_t n, float a, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 yv = _mm256_loadu_ps(y + i);
    yv = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), yv);
    _mm256_storeu_ps(y + i, yv);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

float dot_f(std::size_t n, const float* x, const float* y) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc);
  float r = hsum8(acc);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

void add_f(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i),
                                          _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] += x[i];
}

float sum_f(std::size_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float r = hsum8(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

void accum_sq_f(std::size_t n, const float* x, float* acc) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(acc + i, _mm256_fmadd_ps(xv, xv, _mm256_loadu_ps(acc + i)));
  }
  for (; i < n; ++i) acc[i] += x[i] * x[i];
}

void accum_mul_f(std::size_t n, const float* x, const float* y, float* acc) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(acc + i,
                     _mm256_fmadd_ps(_mm256_loadu_ps(x + i),
                                     _mm256_loadu_ps(y + i),
                                     _mm256_loadu_ps(acc + i)));
  for (; i < n; ++i) acc[i] += x[i] * y[i];
}

void affine_f(std::size_t n, const float* a, const float* x, const float* b,
              float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(x + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * x[i] + b[i];
}

void relu_f(std::size_t n, const float* x, float* y) {
  const __m256 z = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), z));
  for (; i < n; ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
}

void relu_mask_f(std::size_t n, const float* ref, const float* g, float* y) {
  const __m256 z = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(ref + i), z, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_and_ps(mask, _mm256_loadu_ps(g + i)));
  }
  for (; i < n; ++i) y[i] = ref[i] > 0.f ? g[i] : 0.f;
}

void muladd3_f(std::size_t n, const float* u, const float* g, const float* v,
               const float* xh, const float* w, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 r = _mm256_fmadd_ps(_mm256_loadu_ps(v + i),
                               _mm256_loadu_ps(xh + i), _mm256_loadu_ps(w + i));
    r = _mm256_fmadd_ps(_mm256_loadu_ps(u + i), _mm256_loadu_ps(g + i), r);
    _mm256_storeu_ps(y + i, r);
  }
  for (; i < n; ++i) y[i] = u[i] * g[i] + v[i] * xh[i] + w[i];
}

float l2dist_sq_f(std::size_t n, const float* x, const float* y) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i));
    acc = _mm256_fmadd_ps(d, d, acc);
  }
  float r = hsum8(acc);
  for (; i < n; ++i) {
    const float d = x[i] - y[i];
    r += d * d;
  }
  return r;
}

void adam_f(std::size_t n, float* p, const float* g, float* m, float* v,
            float lr, float b1, float b2, float eps, float inv_bc1,
            float inv_bc2, float decay_factor) {
  const __m256 b1v = _mm256_set1_ps(b1), c1v = _mm256_set1_ps(1.f - b1);
  const __m256 b2v = _mm256_set1_ps(b2), c2v = _mm256_set1_ps(1.f - b2);
  const __m256 lrv = _mm256_set1_ps(lr), epsv = _mm256_set1_ps(eps);
  const __m256 ibc1 = _mm256_set1_ps(inv_bc1), ibc2 = _mm256_set1_ps(inv_bc2);
  const __m256 dfv = _mm256_set1_ps(decay_factor);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gv = _mm256_loadu_ps(g + i);
    __m256 pv = _mm256_mul_ps(_mm256_loadu_ps(p + i), dfv);
    __m256 mv = _mm256_fmadd_ps(c1v, gv, _mm256_mul_ps(b1v, _mm256_loadu_ps(m + i)));
    __m256 vv = _mm256_fmadd_ps(c2v, _mm256_mul_ps(gv, gv),
                                _mm256_mul_ps(b2v, _mm256_loadu_ps(v + i)));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    const __m256 denom =
        _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vv, ibc2)), epsv);
    const __m256 step =
        _mm256_div_ps(_mm256_mul_ps(lrv, _mm256_mul_ps(mv, ibc1)), denom);
    _mm256_storeu_ps(p + i, _mm256_sub_ps(pv, step));
  }
  for (; i < n; ++i) {
    p[i] *= decay_factor;
    m[i] = b1 * m[i] + (1.f - b1) * g[i];
    v[i] = b2 * v[i] + (1.f - b2) * g[i] * g[i];
    p[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
  }
}

// ---- double, 4 lanes ----

void axpy_d(std::size_t n, double a, const double* x, double* y) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    yv = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv);
    _mm256_storeu_pd(y + i, yv);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

double dot_d(std::size_t n, const double* x, const double* y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc);
  double r = hsum4(acc);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

void add_d(std::size_t n, const double* x, double* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i),
                                          _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] += x[i];
}

double sum_d(std::size_t n, const double* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double r = hsum4(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

void accum_sq_d(std::size_t n, const double* x, double* acc) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d xv = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(acc + i, _mm256_fmadd_pd(xv, xv, _mm256_loadu_pd(acc + i)));
  }
  for (; i < n; ++i) acc[i] += x[i] * x[i];
}

void accum_mul_d(std::size_t n, const double* x, const double* y, double* acc) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(acc + i,
                     _mm256_fmadd_pd(_mm256_loadu_pd(x + i),
                                     _mm256_loadu_pd(y + i),
                                     _mm256_loadu_pd(acc + i)));
  for (; i < n; ++i) acc[i] += x[i] * y[i];
}

void affine_d(std::size_t n, const double* a, const double* x, const double* b,
              double* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * x[i] + b[i];
}

void relu_d(std::size_t n, const double* x, double* y) {
  const __m256d z = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), z));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask_d(std::size_t n, const double* ref, const double* g, double* y) {
  const __m256d z = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(ref + i), z, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
  }
  for (; i < n; ++i) y[i] = ref[i] > 0.0 ? g[i] : 0.0;
}

void muladd3_d(std::size_t n, const double* u, const double* g, const double* v,
               const double* xh, const double* w, double* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d r = _mm256_fmadd_pd(_mm256_loadu_pd(v + i),
                                _mm256_loadu_pd(xh + i), _mm256_loadu_pd(w + i));
    r = _mm256_fmadd_pd(_mm256_loadu_pd(u + i), _mm256_loadu_pd(g + i), r);
    _mm256_storeu_pd(y + i, r);
  }
  for (; i < n; ++i) y[i] = u[i] * g[i] + v[i] * xh[i] + w[i];
}

double l2dist_sq_d(std::size_t n, const double* x, const double* y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    acc = _mm256_fmadd_pd(d, d, acc);
  }
  double r = hsum4(acc);
  for (; i < n; ++i) {
    const double d = x[i] - y[i];
    r += d * d;
  }
  return r;
}

void adam_d(std::size_t n, double* p, const double* g, double* m, double* v,
            double lr, double b1, double b2, double eps, double inv_bc1,
            double inv_bc2, double decay_factor) {
  const __m256d b1v = _mm256_set1_pd(b1), c1v = _mm256_set1_pd(1.0 - b1);
  const __m256d b2v = _mm256_set1_pd(b2), c2v = _mm256_set1_pd(1.0 - b2);
  const __m256d lrv = _mm256_set1_pd(lr), epsv = _mm256_set1_pd(eps);
  const __m256d ibc1 = _mm256_set1_pd(inv_bc1), ibc2 = _mm256_set1_pd(inv_bc2);
  const __m256d dfv = _mm256_set1_pd(decay_factor);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d gv = _mm256_loadu_pd(g + i);
    __m256d pv = _mm256_mul_pd(_mm256_loadu_pd(p + i), dfv);
    __m256d mv = _mm256_fmadd_pd(c1v, gv, _mm256_mul_pd(b1v, _mm256_loadu_pd(m + i)));
    __m256d vv = _mm256_fmadd_pd(c2v, _mm256_mul_pd(gv, gv),
                                 _mm256_mul_pd(b2v, _mm256_loadu_pd(v + i)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    const __m256d denom =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(vv, ibc2)), epsv);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(lrv, _mm256_mul_pd(mv, ibc1)), denom);
    _mm256_storeu_pd(p + i, _mm256_sub_pd(pv, step));
  }
  for (; i < n; ++i) {
    p[i] *= decay_factor;
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    p[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
  }
}

}  // namespace

const Table<float>* avx2_table_float_impl() {
  static const Table<float> t = [] {
    Table<float> k;
    k.axpy = axpy_f;
    k.dot = dot_f;
    k.add = add_f;
    k.sum = sum_f;
    k.accum_sq = accum_sq_f;
    k.accum_mul = accum_mul_f;
    k.affine = affine_f;
    k.relu = relu_f;
    k.relu_mask = relu_mask_f;
    k.muladd3 = muladd3_f;
    k.l2dist_sq = l2dist_sq_f;
    k.adam = adam_f;
    k.name = "avx2";
    return k;
  }();
  return &t;
}

const Table<double>* avx2_table_double_impl() {
  static const Table<double> t = [] {
    Table<double> k;
    k.axpy = axpy_d;
    k.dot = dot_d;
    k.add = add_d;
    k.sum = sum_d;
    k.accum_sq = accum_sq_d;
    k.accum_mul = accum_mul_d;
    k.affine = affine_d;
    k.relu = relu_d;
    k.relu_mask = relu_mask_d;
    k.muladd3 = muladd3_d;
    k.l2dist_sq = l2dist_sq_d;
    k.adam = adam_d;
    k.name = "avx2";
    return k;
  }();
  return &t;
}

#else

const Table<float>* avx2_table_float_impl() { return nullptr; }
const Table<double>* avx2_table_double_impl() { return nullptr; }

#endif  // SPARSELOC_HAVE_AVX2_TU

}  // namespace sparseloc::kern
