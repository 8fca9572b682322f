#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmrseg/clinical.hpp"
#include "cmrseg/inference.hpp"
#include "cmrseg/metrics.hpp"
#include "cmrseg/training.hpp"

namespace cmrseg {

inline constexpr const char* kPipelineVersion = "0.1.0";

/// Record of one command invocation, written next to its outputs.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> parameters;  // flag -> value
  std::string config_path;
  std::string split_path;
  std::string checkpoint_path;
  std::string output_path;
  std::vector<std::string> artifacts;
  std::string started_utc;
  std::string finished_utc;

  /// Sets finished_utc, checks every artifact exists, writes JSON.
  void finalize(const std::filesystem::path& path);
};

std::string utc_timestamp();

struct PreprocessResult {
  std::filesystem::path cache_dir;  // <out>/<ARCH>
  int entries = 0;
};

/// Caches every (patient, phase) of the cohort below <out_dir>/<ARCH>.
PreprocessResult cmd_preprocess(const std::filesystem::path& data_root, const NetworkSpec& spec,
                                const PreprocessSettings& settings, const std::filesystem::path& out_dir);

struct PredictInput {
  std::string case_id;  // output name stem
  std::filesystem::path image;
  int frame = 0;
};

/// Both phases of every patient in a cohort, named <id>_ED / <id>_ES.
std::vector<PredictInput> cohort_predict_inputs(const std::filesystem::path& data_root,
                                                const std::vector<std::string>& only_ids = {});

struct PredictTiming {
  std::string case_id;
  double seconds = 0.0;
};

/// Writes <out_dir>/<case_id>.nii.gz for each input using the input's header
/// as template, and timings.csv with per-volume wall time.
std::vector<PredictTiming> cmd_predict(SegmentationModel& model, const PreprocessSettings& settings,
                                       const std::vector<PredictInput>& inputs, const std::filesystem::path& out_dir);

/// Loads a model from either a best-model file or a training checkpoint.
SegmentationModel load_any_model(const std::filesystem::path& path);

/// Pairs <pred_dir>/<id>_<PHASE>.nii[.gz] with references from either a
/// cohort root or a flat directory of <id>_<PHASE>[_gt].nii[.gz] files.
/// Every reference needs a prediction unless `subset` is set; every
/// prediction needs a reference. Unmatched ids are listed in the error.
struct CasePair {
  std::string patient_id;
  Phase phase = Phase::ED;
  std::filesystem::path prediction;
  std::filesystem::path reference;
};
std::vector<CasePair> match_cases(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                                  bool subset = false);

/// Writes <out> (per-case rows plus summary), <out stem>_summary.csv and
/// <out stem>.json.
MetricsReport cmd_evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                           const std::filesystem::path& out_csv, bool subset = false);

/// Writes <out> (structure table), <out stem>_cases.csv and <out stem>.json.
ClinicalReport cmd_report(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                          const std::filesystem::path& out_csv, bool subset = false);

}  // namespace cmrseg
