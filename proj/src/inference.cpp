#include "cmrseg/inference.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cmrseg/nifti.hpp"
#include "cmrseg/postprocess.hpp"

namespace cmrseg {

PreprocessSettings PreprocessSettings::defaults(Architecture a) {
  if (is_3d(a)) return {2.5, 5.0};
  return {1.37, 0.0};
}

Spacing3 working_spacing(const PreprocessSettings& settings, const Spacing3& native_spacing) {
  const double z = settings.through_plane_spacing_mm > 0.0 ? settings.through_plane_spacing_mm : native_spacing[2];
  return {settings.inplane_spacing_mm, settings.inplane_spacing_mm, z};
}

Shape3 canvas_shape(const NetworkSpec& spec, const Shape3& working_shape) {
  if (is_3d(spec.architecture)) return spec.input_shape;
  return {spec.input_shape[0], spec.input_shape[1], working_shape[2]};
}

PreparedCase prepare_case(const ScanVolume& scan, const LabelVolume* labels, const NetworkSpec& spec,
                          const PreprocessSettings& settings) {
  if (labels && (labels->shape != scan.shape))
    throw std::invalid_argument("label shape " + to_string(labels->shape) + " does not match image " +
                                to_string(scan.shape));
  const Spacing3 ws = working_spacing(settings, scan.spacing);
  const ScanVolume resampled = resample(scan, ws, Interpolation::Linear);
  PreparedCase out;
  out.record = make_geometry_record(scan.shape, scan.spacing, ws, canvas_shape(spec, resampled.shape));
  auto fitted = fit_to_canvas(resampled, out.record.canvas_shape);
  out.image = normalize_intensity(fitted.first);
  if (labels) {
    out.labels = fit_to_canvas(resample(*labels, ws), out.record.canvas_shape).first;
    out.has_labels = true;
  } else {
    out.labels = LabelVolume(out.record.canvas_shape, ws, 0);
  }
  return out;
}

PreparedCase prepare_patient_phase(const PatientRecord& patient, Phase phase, const NetworkSpec& spec,
                                   const PreprocessSettings& settings) {
  const ScanVolume scan = read_scan(patient.image(phase));
  PreparedCase c;
  if (!patient.label(phase).empty() && std::filesystem::exists(patient.label(phase))) {
    const LabelVolume labels = read_labels(patient.label(phase));
    c = prepare_case(scan, &labels, spec, settings);
  } else {
    c = prepare_case(scan, nullptr, spec, settings);
  }
  c.patient_id = patient.patient_id;
  c.phase = phase;
  return c;
}

std::filesystem::path cache_stem(const std::filesystem::path& dir, const std::string& patient_id, Phase phase) {
  return dir / (patient_id + "_" + phase_name(phase));
}

void write_cache_entry(const std::filesystem::path& dir, const PreparedCase& c) {
  std::filesystem::create_directories(dir);
  const auto stem = cache_stem(dir, c.patient_id, c.phase).string();
  write_scan(stem + "_image.nii", c.image);
  if (c.has_labels) write_labels(stem + "_label.nii", c.labels);
  std::ofstream geom(stem + ".geom");
  if (!geom) throw std::runtime_error("cannot write " + stem + ".geom");
  geom << to_text(c.record);
}

PreparedCase read_cache_entry(const std::filesystem::path& dir, const std::string& patient_id, Phase phase) {
  const auto stem = cache_stem(dir, patient_id, phase).string();
  std::ifstream geom(stem + ".geom");
  if (!geom) throw std::runtime_error("missing cache entry " + stem + ".geom");
  std::stringstream text;
  text << geom.rdbuf();
  PreparedCase c;
  c.patient_id = patient_id;
  c.phase = phase;
  c.record = geometry_from_text(text.str());
  c.image = read_scan(stem + "_image.nii");
  c.image.spacing = c.record.working_spacing;
  if (std::filesystem::exists(stem + "_label.nii")) {
    c.labels = read_labels(stem + "_label.nii");
    c.labels.spacing = c.record.working_spacing;
    c.has_labels = true;
  } else {
    c.labels = LabelVolume(c.record.canvas_shape, c.record.working_spacing, 0);
  }
  if (c.image.shape != c.record.canvas_shape)
    throw std::runtime_error("cache entry " + stem + " has shape " + to_string(c.image.shape) +
                             " but its record says " + to_string(c.record.canvas_shape));
  return c;
}

LabelVolume crop_to_output(const LabelVolume& canvas_labels, const Shape3& output_shape) {
  const Shape3 out_shape{output_shape[0], output_shape[1],
                         output_shape[2] == 1 ? canvas_labels.shape[2] : output_shape[2]};
  const auto off = centering_offsets(out_shape, canvas_labels.shape);
  for (int a = 0; a < 3; ++a) {
    if (off[a] < 0)
      throw std::invalid_argument("output " + to_string(out_shape) + " exceeds canvas " +
                                  to_string(canvas_labels.shape));
  }
  LabelVolume out(out_shape, canvas_labels.spacing, 0);
  for (int z = 0; z < out_shape[2]; ++z)
    for (int y = 0; y < out_shape[1]; ++y)
      std::copy_n(&canvas_labels.at(off[0], y + off[1], z + off[2]), out_shape[0], &out.at(0, y, z));
  return out;
}

SoftmaxVolume predict_canvas(SegmentationModel& model, const ScanVolume& canvas_image) {
  const NetworkSpec& spec = model.spec();
  const int k_count = spec.num_classes;
  const Shape3& in = spec.input_shape;
  const Shape3& out = spec.output_shape;

  if (is_3d(spec.architecture)) {
    if (canvas_image.shape != in)
      throw std::invalid_argument("canvas " + to_string(canvas_image.shape) + " does not match network input " +
                                  to_string(in));
    Tensor x(1, 1, model.input_dims());
    std::copy(canvas_image.voxels.begin(), canvas_image.voxels.end(), x.data.begin());
    const Tensor p = softmax(model.forward(x, Mode::Infer));
    model.release_activations();
    SoftmaxVolume field(out, canvas_image.spacing, k_count);
    std::copy(p.data.begin(), p.data.end(), field.values.begin());
    return register_in_canvas(field, canvas_image.shape);
  }

  if (canvas_image.shape[0] != in[0] || canvas_image.shape[1] != in[1])
    throw std::invalid_argument("canvas " + to_string(canvas_image.shape) + " does not match network input " +
                                to_string(in));
  const std::size_t in_plane = canvas_image.slice_size();
  const std::size_t out_plane = static_cast<std::size_t>(out[0]) * out[1];
  std::vector<SliceProbabilities> slices;
  for (int z = 0; z < canvas_image.shape[2]; ++z) {
    Tensor x(1, 1, model.input_dims());
    std::copy_n(canvas_image.voxels.data() + z * in_plane, in_plane, x.data.begin());
    const Tensor p = softmax(model.forward(x, Mode::Infer));
    model.release_activations();
    SliceProbabilities s;
    s.slice_index = z;
    s.probabilities = SoftmaxVolume({out[0], out[1], 1}, canvas_image.spacing, k_count);
    for (int k = 0; k < k_count; ++k) std::copy_n(p.channel(0, k), out_plane, s.probabilities.channel(k));
    slices.push_back(std::move(s));
  }
  GeometryRecord placement;
  placement.canvas_shape = canvas_image.shape;
  placement.working_spacing = canvas_image.spacing;
  return assemble_volume(std::move(slices), placement);
}

Prediction predict_case(SegmentationModel& model, const PreparedCase& prepared) {
  Prediction out;
  out.native_probabilities = invert_geometry(predict_canvas(model, prepared.image), prepared.record);
  out.labels = largest_connected_component(to_labels(out.native_probabilities));
  return out;
}

}  // namespace cmrseg
