#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmrseg/dataset.hpp"
#include "cmrseg/volume.hpp"

namespace cmrseg {

/// Binary mask of one structure (1 inside, 0 elsewhere).
LabelVolume structure_mask(const LabelVolume& labels, Structure s);

/// 2|A∩B| / (|A|+|B|) over nonzero voxels; 1 when both masks are empty.
double dice(const LabelVolume& a, const LabelVolume& b);

/// Mask voxels with at least one of their six face neighbours outside the
/// mask. Voxels on the volume border count as surface.
LabelVolume surface_of(const LabelVolume& mask);

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// nonzero voxel of `features`, honouring anisotropic spacing. Infinity
/// everywhere when `features` is empty.
std::vector<double> squared_distance_transform(const LabelVolume& features, const Spacing3& spacing);

struct SurfaceDistances {
  double hausdorff_mm = 0.0;  // max of the two directed maxima
  double assd_mm = 0.0;       // mean over the union of both surface point sets
};

/// Both distances between the surfaces of two masks on the same grid.
/// Empty when either mask is empty.
std::optional<SurfaceDistances> surface_distances(const LabelVolume& a, const LabelVolume& b,
                                                   const Spacing3& spacing);
std::optional<double> hausdorff_distance(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing);
std::optional<double> average_symmetric_surface_distance(const LabelVolume& a, const LabelVolume& b,
                                                         const Spacing3& spacing);

inline constexpr std::array<Structure, 3> kForeground{Structure::LV, Structure::RV, Structure::Myo};

struct CaseMetrics {
  std::string case_id;
  Phase phase = Phase::ED;
  Structure structure = Structure::LV;
  double dice = 0.0;
  std::optional<double> hausdorff_mm;
  std::optional<double> assd_mm;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  int count = 0;     // cases contributing
  int excluded = 0;  // cases skipped because the metric was undefined
};

Summary summarize(const std::vector<std::optional<double>>& values);

struct StructureSummary {
  Structure structure = Structure::LV;
  std::optional<Phase> phase;  // empty: both phases pooled
  Summary dice;
  Summary hausdorff_mm;
  Summary assd_mm;
};

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  std::vector<StructureSummary> per_phase;  // structure x phase
  std::vector<StructureSummary> pooled;     // one row per structure, both phases
};

struct EvaluationCase {
  std::string case_id;
  Phase phase = Phase::ED;
  LabelVolume prediction;
  LabelVolume reference;  // its spacing is used for distances
};

CaseMetrics evaluate_structure(const LabelVolume& prediction, const LabelVolume& reference, Structure s);
MetricsReport evaluate_cohort(const std::vector<EvaluationCase>& cases);

/// Per-case rows followed by nothing else; undefined distances are left blank.
void write_case_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);
/// Rows LV/RV/Myo with "mean (std)" cells for Dice and ASSD, phases pooled.
void write_summary_csv(const std::filesystem::path& path, const MetricsReport& report);
void write_metrics_json(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace cmrseg
