#pragma once

#include <vector>

#include "cmrseg/geometry.hpp"
#include "cmrseg/volume.hpp"

namespace cmrseg {

/// Network probabilities for one slice of the working stack. The map is
/// either canvas-sized or smaller (valid-convolution outputs), in which case
/// it is registered concentrically within the canvas.
struct SliceProbabilities {
  int slice_index = 0;
  SoftmaxVolume probabilities;  // z extent 1
};

/// Stacks per-slice maps (any order, each index exactly once) into a
/// canvas-shaped volume at working spacing.
SoftmaxVolume assemble_volume(std::vector<SliceProbabilities> slices, const GeometryRecord& record);

/// Per-voxel argmax; ties go to the lowest class index.
LabelVolume to_labels(const SoftmaxVolume& probabilities);

/// Keeps, for every foreground label independently, only its largest
/// 26-connected component; the rest becomes background. Equal-sized
/// components are resolved in favour of the one containing the
/// lexicographically smallest (x, y, z) voxel.
LabelVolume largest_connected_component(const LabelVolume& labels);

}  // namespace cmrseg
