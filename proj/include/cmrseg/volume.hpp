#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmrseg {

/// Voxel counts along (x, y, z). x is the fastest-varying axis in memory,
/// z is the through-plane (slice) axis.
using Shape3 = std::array<int, 3>;

/// Physical voxel size in millimetres along (x, y, z).
using Spacing3 = std::array<double, 3>;

inline std::size_t voxel_count(const Shape3& s) {
  return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]) *
         static_cast<std::size_t>(s[2]);
}

inline std::string to_string(const Shape3& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

inline void check_shape(const Shape3& s) {
  for (int n : s) {
    if (n < 1) throw std::invalid_argument("volume dimensions must be >= 1, got " + to_string(s));
  }
}

inline void check_spacing(const Spacing3& sp) {
  for (double v : sp) {
    if (!(v > 0.0)) throw std::invalid_argument("voxel spacing must be positive");
  }
}

/// Dense 3D grid with physical spacing.
template <typename T>
struct Volume {
  Shape3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<T> voxels;

  Volume() : voxels(1, T{}) {}
  Volume(const Shape3& s, const Spacing3& sp, T fill = T{}) : shape(s), spacing(sp) {
    check_shape(s);
    check_spacing(sp);
    voxels.assign(voxel_count(s), fill);
  }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * shape[1] + y) * shape[0] + x;
  }
  T& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
  std::size_t size() const { return voxels.size(); }
  std::size_t slice_size() const { return static_cast<std::size_t>(shape[0]) * shape[1]; }
};

using ScanVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;

/// Label coding shared by every module: background, right ventricle,
/// myocardium, left ventricle.
enum class Structure : std::uint8_t { Background = 0, RV = 1, Myo = 2, LV = 3 };

inline constexpr int kNumClasses = 4;

inline const char* structure_name(Structure s) {
  switch (s) {
    case Structure::Background: return "BG";
    case Structure::RV: return "RV";
    case Structure::Myo: return "Myo";
    case Structure::LV: return "LV";
  }
  return "?";
}

/// K probability channels over one 3D grid, channel-major.
struct SoftmaxVolume {
  Shape3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  int channels = 0;
  std::vector<float> values;

  SoftmaxVolume() = default;
  SoftmaxVolume(const Shape3& s, const Spacing3& sp, int k, float fill = 0.0f)
      : shape(s), spacing(sp), channels(k) {
    check_shape(s);
    check_spacing(sp);
    if (k < 1) throw std::invalid_argument("softmax volume needs at least one channel");
    values.assign(voxel_count(s) * static_cast<std::size_t>(k), fill);
  }

  std::size_t voxels() const { return voxel_count(shape); }
  float* channel(int k) { return values.data() + static_cast<std::size_t>(k) * voxels(); }
  const float* channel(int k) const { return values.data() + static_cast<std::size_t>(k) * voxels(); }
};

}  // namespace cmrseg
