#include "cmrseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace cmrseg {
namespace {

struct Tap {
  int lo = 0;
  int hi = 0;
  double w = 0.0;  // weight of `hi`
};

// Voxel-center mapping with both grids centered on each other.
std::vector<Tap> axis_taps(int n_in, double s_in, int n_out, double s_out, Interpolation interp) {
  std::vector<Tap> taps(static_cast<std::size_t>(n_out));
  const double c_in = 0.5 * (n_in - 1);
  const double c_out = 0.5 * (n_out - 1);
  const double ratio = s_out / s_in;
  for (int o = 0; o < n_out; ++o) {
    double x = (o - c_out) * ratio + c_in;
    x = std::clamp(x, 0.0, static_cast<double>(n_in - 1));
    Tap t;
    if (interp == Interpolation::Nearest) {
      t.lo = t.hi = std::min(n_in - 1, static_cast<int>(std::floor(x + 0.5)));
    } else {
      t.lo = static_cast<int>(std::floor(x));
      t.hi = std::min(t.lo + 1, n_in - 1);
      t.w = x - t.lo;
      if (t.hi == t.lo) t.w = 0.0;
    }
    taps[static_cast<std::size_t>(o)] = t;
  }
  return taps;
}

// Separable linear resampling of one float channel: x, then y, then z.
void resample_linear(const float* in, const Shape3& si, const Spacing3& spi, float* out, const Shape3& so,
                     const Spacing3& spo) {
  const auto tx = axis_taps(si[0], spi[0], so[0], spo[0], Interpolation::Linear);
  const auto ty = axis_taps(si[1], spi[1], so[1], spo[1], Interpolation::Linear);
  const auto tz = axis_taps(si[2], spi[2], so[2], spo[2], Interpolation::Linear);

  std::vector<float> a(static_cast<std::size_t>(so[0]) * si[1] * si[2]);
  for (int z = 0; z < si[2]; ++z) {
    for (int y = 0; y < si[1]; ++y) {
      const float* row = in + (static_cast<std::size_t>(z) * si[1] + y) * si[0];
      float* dst = a.data() + (static_cast<std::size_t>(z) * si[1] + y) * so[0];
      for (int x = 0; x < so[0]; ++x) {
        const Tap& t = tx[x];
        dst[x] = static_cast<float>((1.0 - t.w) * row[t.lo] + t.w * row[t.hi]);
      }
    }
  }
  std::vector<float> b(static_cast<std::size_t>(so[0]) * so[1] * si[2]);
  for (int z = 0; z < si[2]; ++z) {
    for (int y = 0; y < so[1]; ++y) {
      const Tap& t = ty[y];
      const float* r0 = a.data() + (static_cast<std::size_t>(z) * si[1] + t.lo) * so[0];
      const float* r1 = a.data() + (static_cast<std::size_t>(z) * si[1] + t.hi) * so[0];
      float* dst = b.data() + (static_cast<std::size_t>(z) * so[1] + y) * so[0];
      for (int x = 0; x < so[0]; ++x) dst[x] = static_cast<float>((1.0 - t.w) * r0[x] + t.w * r1[x]);
    }
  }
  const std::size_t plane = static_cast<std::size_t>(so[0]) * so[1];
  for (int z = 0; z < so[2]; ++z) {
    const Tap& t = tz[z];
    const float* p0 = b.data() + static_cast<std::size_t>(t.lo) * plane;
    const float* p1 = b.data() + static_cast<std::size_t>(t.hi) * plane;
    float* dst = out + static_cast<std::size_t>(z) * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>((1.0 - t.w) * p0[i] + t.w * p1[i]);
  }
}

template <typename T>
void resample_nearest(const T* in, const Shape3& si, const Spacing3& spi, T* out, const Shape3& so,
                      const Spacing3& spo) {
  const auto tx = axis_taps(si[0], spi[0], so[0], spo[0], Interpolation::Nearest);
  const auto ty = axis_taps(si[1], spi[1], so[1], spo[1], Interpolation::Nearest);
  const auto tz = axis_taps(si[2], spi[2], so[2], spo[2], Interpolation::Nearest);
  for (int z = 0; z < so[2]; ++z) {
    for (int y = 0; y < so[1]; ++y) {
      const T* row = in + (static_cast<std::size_t>(tz[z].lo) * si[1] + ty[y].lo) * si[0];
      T* dst = out + (static_cast<std::size_t>(z) * so[1] + y) * so[0];
      for (int x = 0; x < so[0]; ++x) dst[x] = row[tx[x].lo];
    }
  }
}

// Copies the overlap between a working-space grid and a canvas-space grid.
template <typename T>
void copy_overlap(const T* src, const Shape3& src_shape, T* dst, const Shape3& dst_shape,
                  const std::array<int, 3>& dst_minus_src) {
  int lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, -dst_minus_src[a]);
    hi[a] = std::min(src_shape[a], dst_shape[a] - dst_minus_src[a]);
    if (hi[a] <= lo[a]) return;
  }
  const int run = hi[0] - lo[0];
  for (int z = lo[2]; z < hi[2]; ++z) {
    for (int y = lo[1]; y < hi[1]; ++y) {
      const T* s = src + (static_cast<std::size_t>(z) * src_shape[1] + y) * src_shape[0] + lo[0];
      T* d = dst + (static_cast<std::size_t>(z + dst_minus_src[2]) * dst_shape[1] + y + dst_minus_src[1]) *
                       dst_shape[0] +
             lo[0] + dst_minus_src[0];
      std::copy_n(s, run, d);
    }
  }
}

std::array<int, 3> negate(const std::array<int, 3>& v) { return {-v[0], -v[1], -v[2]}; }

}  // namespace

Shape3 resampled_shape(const Shape3& native_shape, const Spacing3& native_spacing, const Spacing3& target_spacing) {
  check_shape(native_shape);
  check_spacing(native_spacing);
  check_spacing(target_spacing);
  Shape3 out;
  for (int a = 0; a < 3; ++a) {
    const double n = std::round(native_shape[a] * native_spacing[a] / target_spacing[a]);
    out[a] = std::max(1, static_cast<int>(n));
  }
  return out;
}

std::array<int, 3> centering_offsets(const Shape3& shape, const Shape3& canvas) {
  std::array<int, 3> off{};
  for (int a = 0; a < 3; ++a) {
    off[a] = canvas[a] >= shape[a] ? (canvas[a] - shape[a]) / 2 : -((shape[a] - canvas[a]) / 2);
  }
  return off;
}

GeometryRecord make_geometry_record(const Shape3& native_shape, const Spacing3& native_spacing,
                                    const Spacing3& working_spacing, const Shape3& canvas_shape) {
  check_shape(canvas_shape);
  GeometryRecord r;
  r.native_shape = native_shape;
  r.native_spacing = native_spacing;
  r.working_spacing = working_spacing;
  r.working_shape = resampled_shape(native_shape, native_spacing, working_spacing);
  r.canvas_shape = canvas_shape;
  r.offsets = centering_offsets(r.working_shape, canvas_shape);
  return r;
}

ScanVolume resample_to(const ScanVolume& volume, const Shape3& out_shape, const Spacing3& out_spacing,
                       Interpolation interpolation) {
  ScanVolume out(out_shape, out_spacing);
  if (interpolation == Interpolation::Linear) {
    resample_linear(volume.voxels.data(), volume.shape, volume.spacing, out.voxels.data(), out_shape, out_spacing);
  } else {
    resample_nearest(volume.voxels.data(), volume.shape, volume.spacing, out.voxels.data(), out_shape, out_spacing);
  }
  return out;
}

LabelVolume resample_to(const LabelVolume& labels, const Shape3& out_shape, const Spacing3& out_spacing) {
  LabelVolume out(out_shape, out_spacing);
  resample_nearest(labels.voxels.data(), labels.shape, labels.spacing, out.voxels.data(), out_shape, out_spacing);
  return out;
}

ScanVolume resample(const ScanVolume& volume, const Spacing3& target_spacing, Interpolation interpolation) {
  return resample_to(volume, resampled_shape(volume.shape, volume.spacing, target_spacing), target_spacing,
                     interpolation);
}

LabelVolume resample(const LabelVolume& labels, const Spacing3& target_spacing) {
  return resample_to(labels, resampled_shape(labels.shape, labels.spacing, target_spacing), target_spacing);
}

template <typename T>
std::pair<Volume<T>, GeometryRecord> fit_to_canvas(const Volume<T>& volume, const Shape3& canvas_shape) {
  GeometryRecord r = make_geometry_record(volume.shape, volume.spacing, volume.spacing, canvas_shape);
  Volume<T> out(canvas_shape, volume.spacing, T{});
  copy_overlap(volume.voxels.data(), volume.shape, out.voxels.data(), canvas_shape, r.offsets);
  return {std::move(out), r};
}

template <typename T>
Volume<T> extract_from_canvas(const Volume<T>& canvas, const GeometryRecord& record, T fill) {
  if (canvas.shape != record.canvas_shape)
    throw std::invalid_argument("canvas shape " + to_string(canvas.shape) + " does not match record canvas " +
                                to_string(record.canvas_shape));
  Volume<T> out(record.working_shape, record.working_spacing, fill);
  copy_overlap(canvas.voxels.data(), canvas.shape, out.voxels.data(), out.shape, negate(record.offsets));
  return out;
}

template std::pair<Volume<float>, GeometryRecord> fit_to_canvas(const Volume<float>&, const Shape3&);
template std::pair<Volume<std::uint8_t>, GeometryRecord> fit_to_canvas(const Volume<std::uint8_t>&, const Shape3&);
template Volume<float> extract_from_canvas(const Volume<float>&, const GeometryRecord&, float);
template Volume<std::uint8_t> extract_from_canvas(const Volume<std::uint8_t>&, const GeometryRecord&, std::uint8_t);

ScanVolume normalize_intensity(const ScanVolume& volume) {
  const double n = static_cast<double>(volume.size());
  double mean = 0.0;
  for (float v : volume.voxels) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : volume.voxels) var += (v - mean) * (v - mean);
  var /= n;
  const double denom = std::max(std::sqrt(var), 1e-8);
  ScanVolume out = volume;
  for (float& v : out.voxels) v = static_cast<float>((v - mean) / denom);
  return out;
}

SoftmaxVolume register_in_canvas(const SoftmaxVolume& output, const Shape3& canvas_shape) {
  for (int a = 0; a < 3; ++a) {
    if (output.shape[a] > canvas_shape[a])
      throw std::invalid_argument("network output " + to_string(output.shape) + " exceeds canvas " +
                                  to_string(canvas_shape));
  }
  SoftmaxVolume out(canvas_shape, output.spacing, output.channels, 0.0f);
  std::fill_n(out.channel(0), out.voxels(), 1.0f);
  const auto off = centering_offsets(output.shape, canvas_shape);
  for (int k = 0; k < output.channels; ++k) {
    copy_overlap(output.channel(k), output.shape, out.channel(k), canvas_shape, off);
  }
  return out;
}

SoftmaxVolume invert_geometry(const SoftmaxVolume& probabilities, const GeometryRecord& record,
                              Interpolation interpolation) {
  if (probabilities.shape != record.canvas_shape)
    throw std::invalid_argument("probability grid " + to_string(probabilities.shape) +
                                " does not match record canvas " + to_string(record.canvas_shape));
  const int k_count = probabilities.channels;
  SoftmaxVolume working(record.working_shape, record.working_spacing, k_count, 0.0f);
  std::fill_n(working.channel(0), working.voxels(), 1.0f);
  for (int k = 0; k < k_count; ++k) {
    copy_overlap(probabilities.channel(k), probabilities.shape, working.channel(k), working.shape,
                 negate(record.offsets));
  }
  SoftmaxVolume out(record.native_shape, record.native_spacing, k_count, 0.0f);
  for (int k = 0; k < k_count; ++k) {
    if (interpolation == Interpolation::Linear) {
      resample_linear(working.channel(k), working.shape, working.spacing, out.channel(k), out.shape, out.spacing);
    } else {
      resample_nearest(working.channel(k), working.shape, working.spacing, out.channel(k), out.shape, out.spacing);
    }
  }
  return out;
}

std::string to_text(const GeometryRecord& r) {
  std::ostringstream os;
  os.precision(17);
  auto triple = [&](const char* key, const auto& v) { os << key << " = " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n'; };
  triple("native_shape", r.native_shape);
  triple("native_spacing", r.native_spacing);
  triple("working_spacing", r.working_spacing);
  triple("working_shape", r.working_shape);
  triple("canvas_shape", r.canvas_shape);
  triple("offsets", r.offsets);
  return os.str();
}

GeometryRecord geometry_from_text(const std::string& text) {
  GeometryRecord r;
  std::istringstream in(text);
  std::string line;
  int seen = 0;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    key.erase(key.find_last_not_of(" \t") + 1);
    std::istringstream vs(line.substr(eq + 1));
    auto read3 = [&](auto& v) {
      if (!(vs >> v[0] >> v[1] >> v[2])) throw std::runtime_error("malformed geometry value for " + key);
      ++seen;
    };
    if (key == "native_shape") read3(r.native_shape);
    else if (key == "native_spacing") read3(r.native_spacing);
    else if (key == "working_spacing") read3(r.working_spacing);
    else if (key == "working_shape") read3(r.working_shape);
    else if (key == "canvas_shape") read3(r.canvas_shape);
    else if (key == "offsets") read3(r.offsets);
  }
  if (seen != 6) throw std::runtime_error("incomplete geometry record");
  return r;
}

}  // namespace cmrseg
