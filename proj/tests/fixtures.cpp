#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cmrseg/nifti.hpp"

namespace fixtures {

namespace fs = std::filesystem;

TempDir::TempDir() {
  std::random_device rd;
  for (int attempt = 0; attempt < 100; ++attempt) {
    path_ = fs::temp_directory_path() / ("cmrseg_test_" + std::to_string(rd()));
    if (fs::create_directory(path_)) return;
  }
  throw std::runtime_error("cannot create a temporary directory");
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

LabelVolume random_mask(const Shape3& shape, std::mt19937_64& rng, double density) {
  LabelVolume m(shape, {1.0, 1.0, 1.0}, 0);
  std::bernoulli_distribution b(density);
  for (auto& v : m.voxels) v = b(rng) ? 1 : 0;
  return m;
}

LabelVolume toy_heart(const Shape3& shape, const Spacing3& spacing, double scale) {
  LabelVolume labels(shape, spacing, 0);
  const double cx = (shape[0] - 1) / 2.0 * spacing[0];
  const double cy = (shape[1] - 1) / 2.0 * spacing[1];
  const double r_lv = 14.0 * scale, r_myo = 21.0 * scale, r_rv = 13.0 * scale;
  const double rv_cx = cx - 30.0 * std::sqrt(scale), rv_cy = cy;
  for (int z = 0; z < shape[2]; ++z) {
    const double taper = 1.0 - 0.15 * z / std::max(1, shape[2] - 1);
    for (int y = 0; y < shape[1]; ++y) {
      for (int x = 0; x < shape[0]; ++x) {
        const double px = x * spacing[0], py = y * spacing[1];
        const double d = std::hypot(px - cx, py - cy);
        const double d_rv = std::hypot(px - rv_cx, py - rv_cy);
        std::uint8_t v = 0;
        if (d < r_lv * taper) v = 3;
        else if (d < r_myo * taper) v = 2;
        else if (d_rv < r_rv * taper) v = 1;
        labels.at(x, y, z) = v;
      }
    }
  }
  return labels;
}

ScanVolume toy_scan(const LabelVolume& labels, std::uint64_t seed, double noise) {
  static constexpr float kLevel[4] = {40.0f, 300.0f, 120.0f, 420.0f};
  ScanVolume scan(labels.shape, labels.spacing, 0.0f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, noise);
  for (std::size_t i = 0; i < labels.size(); ++i)
    scan.voxels[i] = kLevel[labels.voxels[i]] + static_cast<float>(n(rng));
  return scan;
}

std::vector<std::string> write_cohort(const fs::path& root, const CohortSpec& spec) {
  std::vector<std::string> ids;
  int counter = 0;
  for (int k = 0; k < spec.patients_per_group; ++k) {
    for (Diagnosis d : kAllDiagnoses) {
      ++counter;
      char id[32];
      std::snprintf(id, sizeof id, "patient%03d", counter);
      const fs::path dir = root / id;
      fs::create_directories(dir);
      std::ofstream(dir / "Info.cfg") << "ED: 1\nES: 7\nGroup: " << diagnosis_code(d) << "\nHeight: 170\n";
      const double es_scale = 0.75 + 0.02 * (counter % 5);
      for (auto [frame, scale] : {std::pair{1, 1.0}, std::pair{7, es_scale}}) {
        const LabelVolume labels = toy_heart(spec.shape, spec.spacing, scale);
        const ScanVolume scan = toy_scan(labels, static_cast<std::uint64_t>(counter * 10 + frame));
        char stem[64];
        std::snprintf(stem, sizeof stem, "%s_frame%02d", id, frame);
        write_scan(dir / (std::string(stem) + ".nii.gz"), scan);
        write_labels(dir / (std::string(stem) + "_gt.nii.gz"), labels);
      }
      ids.push_back(id);
    }
  }
  return ids;
}

std::vector<std::array<double, 3>> surface_points(const LabelVolume& mask, const Spacing3& spacing) {
  std::vector<std::array<double, 3>> pts;
  const auto& s = mask.shape;
  auto inside = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= s[0] || y >= s[1] || z >= s[2]) return false;
    return mask.at(x, y, z) != 0;
  };
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[0]; ++x) {
        if (!inside(x, y, z)) continue;
        const bool border = x == 0 || y == 0 || z == 0 || x == s[0] - 1 || y == s[1] - 1 || z == s[2] - 1;
        if (border || !inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) ||
            !inside(x, y + 1, z) || !inside(x, y, z - 1) || !inside(x, y, z + 1))
          pts.push_back({x * spacing[0], y * spacing[1], z * spacing[2]});
      }
  return pts;
}

namespace {

std::vector<double> directed(const std::vector<std::array<double, 3>>& from,
                             const std::vector<std::array<double, 3>>& to) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    d.push_back(std::sqrt(best));
  }
  return d;
}

}  // namespace

double brute_hausdorff(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing) {
  const auto pa = surface_points(a, spacing), pb = surface_points(b, spacing);
  double m = 0.0;
  for (double d : directed(pa, pb)) m = std::max(m, d);
  for (double d : directed(pb, pa)) m = std::max(m, d);
  return m;
}

double brute_assd(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing) {
  const auto pa = surface_points(a, spacing), pb = surface_points(b, spacing);
  double sum = 0.0;
  for (double d : directed(pa, pb)) sum += d;
  for (double d : directed(pb, pa)) sum += d;
  return sum / static_cast<double>(pa.size() + pb.size());
}

}  // namespace fixtures
