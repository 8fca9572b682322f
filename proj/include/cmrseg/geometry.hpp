#pragma once

#include <array>
#include <string>
#include <utility>

#include "cmrseg/volume.hpp"

namespace cmrseg {

enum class Interpolation { Linear, Nearest };

/// Everything needed to map a canvas-space array back onto the native grid:
/// native -> (resample) -> working -> (center pad/crop) -> canvas.
///
/// offsets[a] > 0 means the working volume was padded by that many voxels
/// before its first element along axis a; offsets[a] < 0 means that many
/// leading voxels were cropped away. In both cases
/// canvas_index = working_index + offsets[a].
struct GeometryRecord {
  Shape3 native_shape{1, 1, 1};
  Spacing3 native_spacing{1.0, 1.0, 1.0};
  Spacing3 working_spacing{1.0, 1.0, 1.0};
  Shape3 working_shape{1, 1, 1};
  Shape3 canvas_shape{1, 1, 1};
  std::array<int, 3> offsets{0, 0, 0};

  bool operator==(const GeometryRecord&) const = default;
};

/// round(native_shape * native_spacing / target_spacing) per axis, minimum 1.
Shape3 resampled_shape(const Shape3& native_shape, const Spacing3& native_spacing, const Spacing3& target_spacing);

/// Centered placement offsets of `shape` inside `canvas` (see GeometryRecord).
std::array<int, 3> centering_offsets(const Shape3& shape, const Shape3& canvas);

GeometryRecord make_geometry_record(const Shape3& native_shape, const Spacing3& native_spacing,
                                    const Spacing3& working_spacing, const Shape3& canvas_shape);

/// Axis-aligned resampling on voxel centers with the output grid centered on
/// the input grid. Samples beyond the outermost input centers clamp to the
/// edge voxel.
ScanVolume resample(const ScanVolume& volume, const Spacing3& target_spacing, Interpolation interpolation);

/// Label maps always use nearest-neighbour sampling.
LabelVolume resample(const LabelVolume& labels, const Spacing3& target_spacing);

/// Resampling onto an explicitly sized grid (used when returning to native
/// geometry, where the shape is known and must not be re-derived by rounding).
ScanVolume resample_to(const ScanVolume& volume, const Shape3& out_shape, const Spacing3& out_spacing,
                       Interpolation interpolation);
LabelVolume resample_to(const LabelVolume& labels, const Shape3& out_shape, const Spacing3& out_spacing);

/// Center the volume in a zero-filled canvas, center-cropping oversized axes.
/// The returned record treats the input as both native and working volume.
template <typename T>
std::pair<Volume<T>, GeometryRecord> fit_to_canvas(const Volume<T>& volume, const Shape3& canvas_shape);

/// Inverse of fit_to_canvas on the retained region; voxels that were cropped
/// away come back as `fill`.
template <typename T>
Volume<T> extract_from_canvas(const Volume<T>& canvas, const GeometryRecord& record, T fill = T{});

/// Zero mean, unit (population) variance over all voxels. A constant input
/// maps to zeros through the max(std, 1e-8) guard.
ScanVolume normalize_intensity(const ScanVolume& volume);

/// Places a network output grid concentrically inside the canvas; voxels
/// outside the output field get background probability 1.
SoftmaxVolume register_in_canvas(const SoftmaxVolume& output, const Shape3& canvas_shape);

/// Canvas-space probabilities back to native shape and spacing. Every channel
/// uses the same interpolation weights, so per-voxel channel sums survive.
SoftmaxVolume invert_geometry(const SoftmaxVolume& probabilities, const GeometryRecord& record,
                              Interpolation interpolation = Interpolation::Linear);

/// Key-value text ("key = v0 v1 v2" lines).
std::string to_text(const GeometryRecord& record);
GeometryRecord geometry_from_text(const std::string& text);

}  // namespace cmrseg
