#include "cmrseg/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include "cmrseg/nifti.hpp"

namespace cmrseg {
namespace fs = std::filesystem;

namespace {

bool has_nifti_suffix(const std::string& name, std::string& stem) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    const std::string e = ext;
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      stem = name.substr(0, name.size() - e.size());
      return true;
    }
  }
  return false;
}

// "<id>_ED" / "<id>_ES" (optionally followed by "_gt").
bool parse_case_stem(std::string stem, std::string& id, Phase& phase) {
  if (stem.size() > 3 && stem.compare(stem.size() - 3, 3, "_gt") == 0) stem.resize(stem.size() - 3);
  if (stem.size() < 4) return false;
  const std::string tail = stem.substr(stem.size() - 3);
  if (tail == "_ED") phase = Phase::ED;
  else if (tail == "_ES") phase = Phase::ES;
  else return false;
  id = stem.substr(0, stem.size() - 3);
  return true;
}

using CaseKey = std::pair<std::string, int>;

std::map<CaseKey, fs::path> scan_flat_dir(const fs::path& dir) {
  std::map<CaseKey, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string stem, id;
    Phase phase;
    if (!has_nifti_suffix(entry.path().filename().string(), stem) || !parse_case_stem(stem, id, phase)) continue;
    const CaseKey key{id, static_cast<int>(phase)};
    if (out.count(key))
      throw std::runtime_error("two files for case " + id + "_" + phase_name(phase) + " in " + dir.string());
    out[key] = entry.path();
  }
  return out;
}

bool looks_like_cohort(const fs::path& dir) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "Info.cfg")) return true;
  }
  return false;
}

std::string case_name(const CaseKey& k) { return k.first + "_" + phase_name(static_cast<Phase>(k.second)); }

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : ", ") + i;
  return s;
}

fs::path sibling(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.stem().string() + suffix);
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::finalize(const fs::path& path) {
  finished_utc = utc_timestamp();
  for (const auto& a : artifacts) {
    if (!fs::exists(a)) throw std::runtime_error("manifest artifact missing: " + a);
  }
  nlohmann::json j{{"command", command},
                   {"pipeline_version", kPipelineVersion},
                   {"parameters", parameters},
                   {"config_path", config_path},
                   {"split_path", split_path},
                   {"checkpoint_path", checkpoint_path},
                   {"output_path", output_path},
                   {"artifacts", artifacts},
                   {"started_utc", started_utc},
                   {"finished_utc", finished_utc}};
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

PreprocessResult cmd_preprocess(const fs::path& data_root, const NetworkSpec& spec,
                                const PreprocessSettings& settings, const fs::path& out_dir) {
  const auto cohort = load_cohort(data_root, true);
  PreprocessResult r;
  r.cache_dir = out_dir / architecture_name(spec.architecture);
  fs::create_directories(r.cache_dir);
  for (const auto& p : cohort) {
    for (Phase ph : kPhases) {
      write_cache_entry(r.cache_dir, prepare_patient_phase(p, ph, spec, settings));
      ++r.entries;
    }
  }
  return r;
}

std::vector<PredictInput> cohort_predict_inputs(const fs::path& data_root, const std::vector<std::string>& only_ids) {
  auto cohort = load_cohort(data_root, false);
  if (!only_ids.empty()) cohort = select_patients(cohort, only_ids);
  std::vector<PredictInput> out;
  for (const auto& p : cohort)
    for (Phase ph : kPhases) out.push_back({p.patient_id + "_" + phase_name(ph), p.image(ph), 0});
  return out;
}

SegmentationModel load_any_model(const fs::path& path) {
  std::string meta_text;
  read_array_file(path, meta_text);
  const auto meta = nlohmann::json::parse(meta_text);
  if (meta.contains("iteration")) {
    // Training checkpoint: use the retained best state.
    const Checkpoint ck = load_checkpoint(path);
    SegmentationModel m(ck.best_model.spec);
    m.load_state(ck.best_model);
    return m;
  }
  return load_model(path);
}

std::vector<PredictTiming> cmd_predict(SegmentationModel& model, const PreprocessSettings& settings,
                                       const std::vector<PredictInput>& inputs, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<PredictTiming> timings;
  for (const auto& in : inputs) {
    const auto t0 = std::chrono::steady_clock::now();
    const NiftiImage source = read_nifti(in.image);
    const ScanVolume scan = read_scan(in.image, in.frame);
    PreparedCase prepared = prepare_case(scan, nullptr, model.spec(), settings);
    prepared.patient_id = in.case_id;
    const Prediction p = predict_case(model, prepared);
    if (p.labels.shape != scan.shape)
      throw std::logic_error("prediction shape " + to_string(p.labels.shape) + " differs from input " +
                             to_string(scan.shape));
    write_labels(out_dir / (in.case_id + ".nii.gz"), p.labels, source.header);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings.push_back({in.case_id, secs});
    std::fprintf(stderr, "predicted %s in %.2f s\n", in.case_id.c_str(), secs);
  }
  std::ofstream t(out_dir / "timings.csv");
  t << "case,seconds\n";
  for (const auto& e : timings) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", e.seconds);
    t << e.case_id << ',' << buf << '\n';
  }
  return timings;
}

std::vector<CasePair> match_cases(const fs::path& pred_dir, const fs::path& ref_dir, bool subset) {
  if (!fs::is_directory(pred_dir)) throw std::runtime_error("prediction directory " + pred_dir.string() + " not found");
  if (!fs::is_directory(ref_dir)) throw std::runtime_error("reference directory " + ref_dir.string() + " not found");
  const auto preds = scan_flat_dir(pred_dir);
  std::map<CaseKey, fs::path> refs;
  if (looks_like_cohort(ref_dir)) {
    for (const auto& p : load_cohort(ref_dir, false))
      for (Phase ph : kPhases) refs[{p.patient_id, static_cast<int>(ph)}] = p.label(ph);
  } else {
    refs = scan_flat_dir(ref_dir);
  }
  std::vector<std::string> no_ref, no_pred;
  for (const auto& [k, _] : preds)
    if (!refs.count(k)) no_ref.push_back(case_name(k));
  if (!subset)
    for (const auto& [k, _] : refs)
      if (!preds.count(k)) no_pred.push_back(case_name(k));
  if (!no_ref.empty() || !no_pred.empty()) {
    std::string msg = "unmatched cases:";
    if (!no_pred.empty()) msg += " missing prediction for " + join(no_pred) + ";";
    if (!no_ref.empty()) msg += " missing reference for " + join(no_ref) + ";";
    throw std::runtime_error(msg);
  }
  if (preds.empty()) throw std::runtime_error("no predictions found in " + pred_dir.string());
  std::vector<CasePair> out;
  for (const auto& [k, path] : preds)
    out.push_back({k.first, static_cast<Phase>(k.second), path, refs.at(k)});
  return out;
}

MetricsReport cmd_evaluate(const fs::path& pred_dir, const fs::path& ref_dir, const fs::path& out_csv, bool subset) {
  std::vector<EvaluationCase> cases;
  for (const auto& c : match_cases(pred_dir, ref_dir, subset)) {
    EvaluationCase e;
    e.case_id = c.patient_id;
    e.phase = c.phase;
    e.prediction = read_labels(c.prediction);
    e.reference = read_labels(c.reference);
    cases.push_back(std::move(e));
  }
  const MetricsReport report = evaluate_cohort(cases);
  if (!out_csv.parent_path().empty()) fs::create_directories(out_csv.parent_path());
  write_case_metrics_csv(out_csv, report);
  write_summary_csv(sibling(out_csv, "_summary.csv"), report);
  write_metrics_json(sibling(out_csv, ".json"), report);
  return report;
}

ClinicalReport cmd_report(const fs::path& pred_dir, const fs::path& ref_dir, const fs::path& out_csv, bool subset) {
  const auto pairs = match_cases(pred_dir, ref_dir, subset);
  std::map<std::string, std::array<const CasePair*, 2>> by_patient;
  for (const auto& c : pairs) by_patient[c.patient_id][static_cast<int>(c.phase)] = &c;
  std::vector<ClinicalCase> cases;
  std::vector<std::string> incomplete;
  for (const auto& [id, phases] : by_patient) {
    if (!phases[0] || !phases[1]) {
      incomplete.push_back(id);
      continue;
    }
    ClinicalCase c;
    c.patient_id = id;
    c.predicted_ed = read_labels(phases[0]->prediction);
    c.predicted_es = read_labels(phases[1]->prediction);
    c.reference_ed = read_labels(phases[0]->reference);
    c.reference_es = read_labels(phases[1]->reference);
    cases.push_back(std::move(c));
  }
  if (!incomplete.empty())
    throw std::runtime_error("clinical report needs both ED and ES for every patient; incomplete: " +
                             join(incomplete));
  const ClinicalReport report = clinical_report(cases);
  if (!out_csv.parent_path().empty()) fs::create_directories(out_csv.parent_path());
  write_clinical_csv(out_csv, report);
  write_clinical_cases_csv(sibling(out_csv, "_cases.csv"), report);
  write_clinical_json(sibling(out_csv, ".json"), report);
  return report;
}

}  // namespace cmrseg
