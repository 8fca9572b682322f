#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cmrseg {

enum class Diagnosis { Normal, MyocardialInfarction, DilatedCardiomyopathy, HypertrophicCardiomyopathy,
                       AbnormalRightVentricle };

inline constexpr std::array<Diagnosis, 5> kAllDiagnoses{
    Diagnosis::Normal, Diagnosis::MyocardialInfarction, Diagnosis::DilatedCardiomyopathy,
    Diagnosis::HypertrophicCardiomyopathy, Diagnosis::AbnormalRightVentricle};

/// Parses the cohort's group codes (NOR, MINF, DCM, HCM, RV).
Diagnosis parse_diagnosis(const std::string& code);
const char* diagnosis_code(Diagnosis d);

enum class Phase { ED = 0, ES = 1 };
inline constexpr std::array<Phase, 2> kPhases{Phase::ED, Phase::ES};
inline const char* phase_name(Phase p) { return p == Phase::ED ? "ED" : "ES"; }

struct PatientRecord {
  std::string patient_id;
  Diagnosis diagnosis = Diagnosis::Normal;
  int ed_frame = 0;
  int es_frame = 0;
  std::array<std::filesystem::path, 2> image_paths;  // indexed by Phase
  std::array<std::filesystem::path, 2> label_paths;

  int frame(Phase p) const { return p == Phase::ED ? ed_frame : es_frame; }
  const std::filesystem::path& image(Phase p) const { return image_paths[static_cast<int>(p)]; }
  const std::filesystem::path& label(Phase p) const { return label_paths[static_cast<int>(p)]; }
};

/// Loads every patient folder below `root`.
///
/// Layout (one folder per patient, folder name = patient id):
///   <root>/<id>/Info.cfg                  "ED: n", "ES: m", "Group: NOR|MINF|DCM|HCM|RV"
///   <root>/<id>/<id>_frameNN.nii[.gz]     image of frame NN (two digits)
///   <root>/<id>/<id>_frameNN_gt.nii[.gz]  reference labels of that frame
///
/// With `validate_volumes` every image/label pair is read and checked for
/// matching shape and spacing and for label values in {0,1,2,3}.
std::vector<PatientRecord> load_cohort(const std::filesystem::path& root, bool validate_volumes = true);

struct CohortSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::uint64_t seed = 0;
};

/// Per-diagnosis shuffled split; round(fraction * class size) patients of
/// each class go to training.
CohortSplit stratified_split(const std::vector<PatientRecord>& cohort, double fraction, std::uint64_t seed);

/// `patient_id<TAB>train|validation`, one line per patient, after a single
/// `# seed <n>` comment line.
void write_split_manifest(const std::filesystem::path& path, const CohortSplit& split);
CohortSplit read_split_manifest(const std::filesystem::path& path);

/// Records whose ids appear in `ids`, in the order of `ids`.
std::vector<PatientRecord> select_patients(const std::vector<PatientRecord>& cohort,
                                           const std::vector<std::string>& ids);

}  // namespace cmrseg
