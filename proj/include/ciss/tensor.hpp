#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ciss/error.hpp"

namespace ciss {

/// Dense channel-last (h, w, c) tensor of doubles.
struct Tensor3 {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  int positions() const noexcept { return h * w; }
  std::size_t size() const noexcept { return data.size(); }

  double& operator()(int y, int x, int k) { return data[(static_cast<std::size_t>(y) * w + x) * c + k]; }
  double operator()(int y, int x, int k) const { return data[(static_cast<std::size_t>(y) * w + x) * c + k]; }

  /// Channel vector at flat position p = y*w + x.
  std::span<double> at(int p) { return {data.data() + static_cast<std::size_t>(p) * c, static_cast<std::size_t>(c)}; }
  std::span<const double> at(int p) const {
    return {data.data() + static_cast<std::size_t>(p) * c, static_cast<std::size_t>(c)};
  }

  bool operator==(const Tensor3&) const = default;
};

/// Integer class map (0 = background).
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(int h_, int w_, int fill = 0) : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, fill) {}

  int positions() const noexcept { return h * w; }
  int& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  int operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
  int& operator[](int p) { return data[static_cast<std::size_t>(p)]; }
  int operator[](int p) const { return data[static_cast<std::size_t>(p)]; }

  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour downsampling by an integer factor; samples the centre
/// pixel (s*y + s/2, s*x + s/2) of each cell.
inline LabelMap downsample_nearest(const LabelMap& in, int factor) {
  CISS_REQUIRE(factor >= 1, "downsample factor must be >= 1");
  CISS_REQUIRE(in.h % factor == 0 && in.w % factor == 0, "label map not divisible by downsample factor");
  LabelMap out(in.h / factor, in.w / factor);
  const int off = factor / 2;
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) out(y, x) = in(y * factor + off, x * factor + off);
  return out;
}

inline LabelMap upsample_nearest(const LabelMap& in, int factor) {
  CISS_REQUIRE(factor >= 1, "upsample factor must be >= 1");
  LabelMap out(in.h * factor, in.w * factor);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) out(y, x) = in(y / factor, x / factor);
  return out;
}

}  // namespace ciss
