#include "sparseloc/sparse_nn.hpp"

#include <algorithm>
#include <unordered_map>

#include "sparseloc/rng.hpp"

namespace sparseloc::nn {
namespace {

struct KeyHash {
  std::size_t operator()(std::uint64_t k) const {
    return static_cast<std::size_t>(mix64(k));
  }
};

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

std::array<int, 3> kernel_offset(int kernel_size, int k) {
  if (kernel_size == 1) return {0, 0, 0};
  return {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1};
}

std::vector<Coord> strided_out_coords(std::span<const Coord> in,
                                      std::array<int, 3> step) {
  std::vector<Coord> out;
  out.reserve(in.size());
  for (const Coord& c : in) {
    out.push_back({c.b, floor_div(c.i1, step[0]) * step[0],
                   floor_div(c.i2, step[1]) * step[1],
                   floor_div(c.i3, step[2]) * step[2]});
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

KernelMap build_kernel_map(std::span<const Coord> in_coords,
                           std::span<const Coord> out_coords, int kernel_size,
                           std::array<int, 3> offset_scale, bool transposed) {
  if (kernel_size != 1 && kernel_size != 3)
    throw shape_error("kernel map: kernel size must be 1 or 3");
  KernelMap km;
  km.kernel_size = kernel_size;
  km.offset_scale = offset_scale;
  km.pairs.resize(std::size_t(km.volume()));

  std::unordered_map<std::uint64_t, std::int32_t, KeyHash> lut;
  lut.reserve(in_coords.size() * 2);
  for (std::size_t i = 0; i < in_coords.size(); ++i) {
    std::uint64_t key;
    if (!pack_coord(in_coords[i], key))
      throw shape_error("kernel map: input coordinate outside hash budget");
    lut.emplace(key, static_cast<std::int32_t>(i));
  }

  const int sign = transposed ? -1 : 1;
  for (std::size_t o = 0; o < out_coords.size(); ++o) {
    for (int k = 0; k < km.volume(); ++k) {
      const std::array<int, 3> off = kernel_offset(kernel_size, k);
      const Coord cand{out_coords[o].b,
                       out_coords[o].i1 + sign * off[0] * offset_scale[0],
                       out_coords[o].i2 + sign * off[1] * offset_scale[1],
                       out_coords[o].i3 + sign * off[2] * offset_scale[2]};
      std::uint64_t key;
      if (!pack_coord(cand, key)) continue;  // off-lattice probes just miss
      const auto it = lut.find(key);
      if (it != lut.end())
        km.pairs[std::size_t(k)].push_back({it->second, static_cast<std::int32_t>(o)});
    }
  }
  return km;
}

}  // namespace sparseloc::nn
