#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmrseg/volume.hpp"

namespace cmrseg {

/// Voxel count of `structure` times voxel volume, in millilitres.
double structure_volume(const LabelVolume& labels, Structure structure, const Spacing3& spacing);

/// 100 (EDV - ESV) / EDV; empty when EDV is zero.
std::optional<double> ejection_fraction(double volume_ed, double volume_es);

/// Pearson correlation plus Bland-Altman bias and 95% limits of agreement,
/// with differences taken as predicted - reference.
struct AgreementStats {
  int n = 0;
  std::optional<double> correlation;  // needs n >= 2 and non-constant inputs
  double bias = 0.0;
  std::optional<double> loa_low;  // needs n >= 2
  std::optional<double> loa_high;
};

AgreementStats agreement(std::span<const double> predicted, std::span<const double> reference);

struct ClinicalCase {
  std::string patient_id;
  LabelVolume predicted_ed, predicted_es;
  LabelVolume reference_ed, reference_es;
};

struct ClinicalMeasures {
  std::string patient_id;
  Structure structure = Structure::LV;
  double predicted_ed_ml = 0.0, predicted_es_ml = 0.0;
  double reference_ed_ml = 0.0, reference_es_ml = 0.0;
  std::optional<double> predicted_ef, reference_ef;
};

struct ClinicalRow {
  Structure structure = Structure::LV;
  std::optional<AgreementStats> ef;  // absent for the myocardium
  AgreementStats volume_ed;
  AgreementStats volume_es;
};

struct ClinicalReport {
  std::vector<ClinicalMeasures> cases;
  std::vector<ClinicalRow> rows;  // LV, RV, Myo
};

ClinicalReport clinical_report(const std::vector<ClinicalCase>& cases);

/// Table with one row per structure: correlations, then "bias [low ; high]".
void write_clinical_csv(const std::filesystem::path& path, const ClinicalReport& report);
void write_clinical_cases_csv(const std::filesystem::path& path, const ClinicalReport& report);
void write_clinical_json(const std::filesystem::path& path, const ClinicalReport& report);

}  // namespace cmrseg
