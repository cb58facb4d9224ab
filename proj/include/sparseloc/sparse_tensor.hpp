#pragma once

#include <array>
#include <cstdint>
#include <tuple>
#include <vector>

#include "sparseloc/common.hpp"

namespace sparseloc {

/// Integer site coordinate of a sparse tensor: batch index plus three
/// cuboid indices on the base lattice.
struct Coord {
  std::int32_t b = 0, i1 = 0, i2 = 0, i3 = 0;

  friend bool operator==(const Coord&, const Coord&) = default;
  friend auto operator<=>(const Coord& a, const Coord& c) {
    return std::tie(a.b, a.i1, a.i2, a.i3) <=> std::tie(c.b, c.i1, c.i2, c.i3);
  }
};

/// Packs a coordinate into a 64-bit hash key, 16 bits per component.
/// Returns false when any component is outside [0, 65535]; callers treat
/// that as "no such site" during kernel-map lookups.
inline bool pack_coord(const Coord& c, std::uint64_t& key) {
  if ((c.b | c.i1 | c.i2 | c.i3) < 0) return false;
  if (c.b > 0xffff || c.i1 > 0xffff || c.i2 > 0xffff || c.i3 > 0xffff)
    return false;
  key = (std::uint64_t(c.b) << 48) | (std::uint64_t(c.i1) << 32) |
        (std::uint64_t(c.i2) << 16) | std::uint64_t(c.i3);
  return true;
}

/// Dense row-major matrix of per-site features (rows = sites).
template <typename T>
struct FeatMat {
  std::size_t rows = 0, cols = 0;
  std::vector<T> v;

  FeatMat() = default;
  FeatMat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, T(0)) {}

  T* row(std::size_t i) { return v.data() + i * cols; }
  const T* row(std::size_t i) const { return v.data() + i * cols; }
  T& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  const T& at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  void zero() { v.assign(v.size(), T(0)); }
};

/// Batched sparse tensor: one feature row per occupied cuboid. Sites are
/// kept sorted by (batch, i1, i2, i3) and unique, which makes every
/// downstream computation independent of input point order.
template <typename T>
struct SparseTensor {
  std::vector<Coord> coords;
  FeatMat<T> feats;
  std::array<int, 3> stride = {1, 1, 1};

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return feats.cols; }
};

/// Concatenates single-batch tensors into one batched tensor, assigning
/// batch indices by position. Inputs must share channel count and stride.
template <typename T>
SparseTensor<T> merge_batch(const std::vector<SparseTensor<T>>& parts) {
  if (parts.empty()) throw shape_error("merge_batch: no tensors");
  SparseTensor<T> out;
  out.stride = parts[0].stride;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.channels() != parts[0].channels())
      throw shape_error("merge_batch: channel mismatch");
    if (p.stride != parts[0].stride)
      throw shape_error("merge_batch: stride mismatch");
    total += p.size();
  }
  out.coords.reserve(total);
  out.feats = FeatMat<T>(total, parts[0].channels());
  std::size_t row = 0;
  for (std::size_t b = 0; b < parts.size(); ++b) {
    for (std::size_t i = 0; i < parts[b].size(); ++i, ++row) {
      Coord c = parts[b].coords[i];
      c.b = static_cast<std::int32_t>(b);
      out.coords.push_back(c);
      for (std::size_t k = 0; k < out.feats.cols; ++k)
        out.feats.at(row, k) = parts[b].feats.at(i, k);
    }
  }
  return out;
}

}  // namespace sparseloc
