#pragma once

#include <array>
#include <filesystem>
#include <optional>

#include "cmrseg/volume.hpp"

namespace cmrseg {

/// Raw NIfTI-1 header (348 bytes, host byte order after reading).
/// Kept verbatim so outputs can reuse the input's orientation fields.
struct NiftiHeader {
  std::array<unsigned char, 348> bytes{};

  static NiftiHeader make(const Shape3& shape, const Spacing3& spacing);

  std::array<short, 8> dim() const;
  std::array<float, 8> pixdim() const;
  short datatype() const;
  short bitpix() const;
  float vox_offset() const;
  float scl_slope() const;
  float scl_inter() const;

  void set_dim(const std::array<short, 8>& d);
  void set_pixdim(const std::array<float, 8>& p);
  void set_datatype(short code, short bits);
  void set_vox_offset(float v);
  void set_scaling(float slope, float inter);
};

struct NiftiImage {
  NiftiHeader header;
  Shape3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  int frames = 1;
  std::vector<float> data;  // scaled intensities, frame-major
};

/// Reads .nii or .nii.gz (detected from content, not the extension).
NiftiImage read_nifti(const std::filesystem::path& path);

/// One 3D frame as an intensity volume.
ScanVolume read_scan(const std::filesystem::path& path, int frame = 0);

/// Integer label map; every value must lie in {0,1,2,3}.
LabelVolume read_labels(const std::filesystem::path& path);

/// Writes float32 voxels. The template header, when given, contributes its
/// orientation fields; dimensions, spacing and datatype always come from the
/// volume. A ".gz" suffix selects gzip compression.
void write_scan(const std::filesystem::path& path, const ScanVolume& volume,
                const std::optional<NiftiHeader>& header_template = std::nullopt);

void write_labels(const std::filesystem::path& path, const LabelVolume& labels,
                  const std::optional<NiftiHeader>& header_template = std::nullopt);

}  // namespace cmrseg
