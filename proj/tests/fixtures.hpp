#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cmrseg/dataset.hpp"
#include "cmrseg/volume.hpp"

namespace fixtures {

using namespace cmrseg;

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

LabelVolume random_mask(const Shape3& shape, std::mt19937_64& rng, double density);

/// Concentric toy heart in every slice: LV disk, myocardial ring around it
/// and an RV disk to one side. Radii in mm; `scale` shrinks it (ES).
LabelVolume toy_heart(const Shape3& shape, const Spacing3& spacing, double scale = 1.0);

/// Piecewise-constant intensities per label plus Gaussian noise.
ScanVolume toy_scan(const LabelVolume& labels, std::uint64_t seed, double noise = 5.0);

struct CohortSpec {
  int patients_per_group = 1;
  Shape3 shape{48, 44, 3};
  Spacing3 spacing{2.0, 2.0, 8.0};
};

/// Writes <root>/<id>/{Info.cfg, <id>_frame01*.nii.gz, <id>_frame07*.nii.gz}
/// with ids patient001.. cycling over all diagnosis groups.
std::vector<std::string> write_cohort(const std::filesystem::path& root, const CohortSpec& spec);

/// Brute-force surface distances for the metric oracles.
std::vector<std::array<double, 3>> surface_points(const LabelVolume& mask, const Spacing3& spacing);
double brute_hausdorff(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing);
double brute_assd(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing);

}  // namespace fixtures
