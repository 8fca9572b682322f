#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cmrseg/dataset.hpp"
#include "cmrseg/geometry.hpp"
#include "cmrseg/networks.hpp"
#include "cmrseg/volume.hpp"

namespace cmrseg {

/// Working resolution of the preprocessing chain. A non-positive
/// through-plane spacing keeps the native slice spacing (2D networks).
struct PreprocessSettings {
  double inplane_spacing_mm = 1.37;
  double through_plane_spacing_mm = 0.0;

  static PreprocessSettings defaults(Architecture a);
  bool operator==(const PreprocessSettings&) const = default;
};

Spacing3 working_spacing(const PreprocessSettings& settings, const Spacing3& native_spacing);

/// Canvas for a working volume: the network input in-plane; through-plane it
/// is the network input depth for 3D networks and the working depth for 2D.
Shape3 canvas_shape(const NetworkSpec& spec, const Shape3& working_shape);

/// One (patient, phase) after resampling, canvas fitting and normalization.
struct PreparedCase {
  std::string patient_id;
  Phase phase = Phase::ED;
  ScanVolume image;     // canvas-shaped, normalized
  LabelVolume labels;   // canvas-shaped; meaningful only when has_labels
  bool has_labels = false;
  GeometryRecord record;
};

PreparedCase prepare_case(const ScanVolume& scan, const LabelVolume* labels, const NetworkSpec& spec,
                          const PreprocessSettings& settings);

/// Reads image and labels of one phase from the cohort and prepares them.
PreparedCase prepare_patient_phase(const PatientRecord& patient, Phase phase, const NetworkSpec& spec,
                                   const PreprocessSettings& settings);

// Cache entries: <dir>/<id>_<PHASE>_image.nii, _label.nii, .geom
std::filesystem::path cache_stem(const std::filesystem::path& dir, const std::string& patient_id, Phase phase);
void write_cache_entry(const std::filesystem::path& dir, const PreparedCase& c);
PreparedCase read_cache_entry(const std::filesystem::path& dir, const std::string& patient_id, Phase phase);

/// Center crop of a canvas-sized plane/volume to the network output extent.
LabelVolume crop_to_output(const LabelVolume& canvas_labels, const Shape3& output_shape);

/// Softmax probabilities on the canvas grid of `prepared` (working spacing).
/// 2D networks run slice by slice; outputs smaller than the canvas are
/// registered concentrically with background elsewhere.
SoftmaxVolume predict_canvas(SegmentationModel& model, const ScanVolume& canvas_image);

struct Prediction {
  SoftmaxVolume native_probabilities;
  LabelVolume labels;  // argmax + largest component, native geometry
};

Prediction predict_case(SegmentationModel& model, const PreparedCase& prepared);

}  // namespace cmrseg
