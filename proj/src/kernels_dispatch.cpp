#include <cstdlib>
#include <cstring>

#include "sparseloc/kernels.hpp"

namespace sparseloc::kern {

// defined in kernels_avx2.cpp (compiled with -mavx2 -mfma)
const Table<float>* avx2_table_float_impl();
const Table<double>* avx2_table_double_impl();

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

template <>
const Table<float>* avx2_table<float>() {
  return avx2_supported() ? avx2_table_float_impl() : nullptr;
}

template <>
const Table<double>* avx2_table<double>() {
  return avx2_supported() ? avx2_table_double_impl() : nullptr;
}

namespace {

bool force_scalar() {
  const char* env = std::getenv("SPARSELOC_KERNELS");
  return env != nullptr && std::strcmp(env, "scalar") == 0;
}

template <typename T>
const Table<T>& pick() {
  if (!force_scalar()) {
    if (const Table<T>* t = avx2_table<T>()) return *t;
  }
  return scalar_table<T>();
}

}  // namespace

template <>
const Table<float>& active<float>() {
  static const Table<float>& t = pick<float>();
  return t;
}

template <>
const Table<double>& active<double>() {
  static const Table<double>& t = pick<double>();
  return t;
}

}  // namespace sparseloc::kern
