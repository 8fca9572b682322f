#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace cmrseg {

/// Spatial extents in (depth, height, width) order; width is contiguous.
using Dims3 = std::array<int, 3>;

inline std::size_t product(const Dims3& d) {
  return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) * static_cast<std::size_t>(d[2]);
}

inline std::string to_string(const Dims3& d, char sep) {
  return std::to_string(d[0]) + sep + std::to_string(d[1]) + sep + std::to_string(d[2]);
}

/// Dense float tensor laid out as (batch, channels, depth, height, width).
/// 2D networks use depth 1.
struct Tensor {
  int n = 0;
  int c = 0;
  Dims3 spatial{0, 0, 0};
  std::vector<float> data;

  Tensor() = default;
  Tensor(int batch, int channels, const Dims3& dims, float fill = 0.0f)
      : n(batch), c(channels), spatial(dims), data(static_cast<std::size_t>(batch) * channels * product(dims), fill) {}

  std::size_t plane() const { return product(spatial); }
  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && spatial == o.spatial; }

  float* sample(int i) { return data.data() + static_cast<std::size_t>(i) * c * plane(); }
  const float* sample(int i) const { return data.data() + static_cast<std::size_t>(i) * c * plane(); }
  float* channel(int i, int ch) { return sample(i) + static_cast<std::size_t>(ch) * plane(); }
  const float* channel(int i, int ch) const { return sample(i) + static_cast<std::size_t>(ch) * plane(); }

  std::string shape_string() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + to_string(spatial, 'x');
  }
};

}  // namespace cmrseg
