#include "cmrseg/postprocess.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

namespace cmrseg {

SoftmaxVolume assemble_volume(std::vector<SliceProbabilities> slices, const GeometryRecord& record) {
  const int depth = record.canvas_shape[2];
  if (static_cast<int>(slices.size()) != depth)
    throw std::invalid_argument("expected " + std::to_string(depth) + " slice maps, got " +
                                std::to_string(slices.size()));
  std::sort(slices.begin(), slices.end(),
            [](const SliceProbabilities& a, const SliceProbabilities& b) { return a.slice_index < b.slice_index; });
  const int k_count = slices.front().probabilities.channels;
  const Shape3 plane_shape{record.canvas_shape[0], record.canvas_shape[1], 1};
  SoftmaxVolume out(record.canvas_shape, record.working_spacing, k_count);
  const std::size_t plane = static_cast<std::size_t>(plane_shape[0]) * plane_shape[1];
  for (int z = 0; z < depth; ++z) {
    const auto& s = slices[static_cast<std::size_t>(z)];
    if (s.slice_index != z) throw std::invalid_argument("slice indices must cover 0.." + std::to_string(depth - 1));
    if (s.probabilities.shape[2] != 1 || s.probabilities.channels != k_count)
      throw std::invalid_argument("inconsistent slice map at index " + std::to_string(z));
    const SoftmaxVolume placed = s.probabilities.shape == plane_shape
                                     ? s.probabilities
                                     : register_in_canvas(s.probabilities, plane_shape);
    for (int k = 0; k < k_count; ++k) {
      std::copy_n(placed.channel(k), plane, out.channel(k) + static_cast<std::size_t>(z) * plane);
    }
  }
  return out;
}

LabelVolume to_labels(const SoftmaxVolume& probabilities) {
  LabelVolume out(probabilities.shape, probabilities.spacing, 0);
  const std::size_t n = probabilities.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    float best_v = probabilities.channel(0)[i];
    for (int k = 1; k < probabilities.channels; ++k) {
      const float v = probabilities.channel(k)[i];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out.voxels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

LabelVolume largest_connected_component(const LabelVolume& labels) {
  LabelVolume out = labels;
  const auto& s = labels.shape;
  const std::size_t n = labels.size();
  std::uint8_t max_label = 0;
  for (auto v : labels.voxels) max_label = std::max(max_label, v);

  std::vector<int> component(n, -1);
  std::vector<std::size_t> queue;
  for (int cls = 1; cls <= max_label; ++cls) {
    std::fill(component.begin(), component.end(), -1);
    struct Info {
      std::size_t size = 0;
      std::array<int, 3> min_xyz{};
    };
    std::vector<Info> comps;
    for (std::size_t seed = 0; seed < n; ++seed) {
      if (labels.voxels[seed] != cls || component[seed] >= 0) continue;
      const int id = static_cast<int>(comps.size());
      Info info;
      info.min_xyz = {s[0], s[1], s[2]};
      queue.clear();
      queue.push_back(seed);
      component[seed] = id;
      for (std::size_t head = 0; head < queue.size(); ++head) {
        const std::size_t v = queue[head];
        const int x = static_cast<int>(v % s[0]);
        const int y = static_cast<int>((v / s[0]) % s[1]);
        const int z = static_cast<int>(v / (static_cast<std::size_t>(s[0]) * s[1]));
        info.min_xyz = std::min(info.min_xyz, std::array<int, 3>{x, y, z});
        for (int dz = -1; dz <= 1; ++dz) {
          const int zz = z + dz;
          if (zz < 0 || zz >= s[2]) continue;
          for (int dy = -1; dy <= 1; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= s[1]) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= s[0]) continue;
              const std::size_t u = labels.index(xx, yy, zz);
              if (labels.voxels[u] == cls && component[u] < 0) {
                component[u] = id;
                queue.push_back(u);
              }
            }
          }
        }
      }
      info.size = queue.size();
      comps.push_back(info);
    }
    if (comps.size() <= 1) continue;
    int keep = 0;
    for (int c = 1; c < static_cast<int>(comps.size()); ++c) {
      const auto& a = comps[static_cast<std::size_t>(c)];
      const auto& b = comps[static_cast<std::size_t>(keep)];
      if (a.size > b.size || (a.size == b.size && a.min_xyz < b.min_xyz)) keep = c;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (component[i] >= 0 && component[i] != keep) out.voxels[i] = 0;
    }
  }
  return out;
}

}  // namespace cmrseg
