#include "cmrseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cmrseg/nifti.hpp"

namespace cmrseg {
namespace fs = std::filesystem;

Diagnosis parse_diagnosis(const std::string& code) {
  if (code == "NOR") return Diagnosis::Normal;
  if (code == "MINF") return Diagnosis::MyocardialInfarction;
  if (code == "DCM") return Diagnosis::DilatedCardiomyopathy;
  if (code == "HCM") return Diagnosis::HypertrophicCardiomyopathy;
  if (code == "RV") return Diagnosis::AbnormalRightVentricle;
  throw std::invalid_argument("unknown diagnosis group '" + code + "'");
}

const char* diagnosis_code(Diagnosis d) {
  switch (d) {
    case Diagnosis::Normal: return "NOR";
    case Diagnosis::MyocardialInfarction: return "MINF";
    case Diagnosis::DilatedCardiomyopathy: return "DCM";
    case Diagnosis::HypertrophicCardiomyopathy: return "HCM";
    case Diagnosis::AbnormalRightVentricle: return "RV";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::map<std::string, std::string> read_info(const fs::path& path, const std::string& patient) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("patient " + patient + ": missing metadata file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    kv[trim(line.substr(0, colon))] = trim(line.substr(colon + 1));
  }
  for (const char* key : {"ED", "ES", "Group"}) {
    if (!kv.count(key))
      throw std::runtime_error("patient " + patient + ": metadata " + path.string() + " lacks key '" + key + "'");
  }
  return kv;
}

int parse_frame(const std::string& value, const std::string& patient, const char* key) {
  try {
    std::size_t used = 0;
    const int f = std::stoi(value, &used);
    if (used != value.size() || f < 0) throw std::invalid_argument(value);
    return f;
  } catch (const std::exception&) {
    throw std::runtime_error("patient " + patient + ": unreadable " + key + " frame '" + value + "'");
  }
}

fs::path frame_file(const fs::path& dir, const std::string& patient, int frame, bool gt) {
  char name[64];
  std::snprintf(name, sizeof(name), "_frame%02d%s", frame, gt ? "_gt" : "");
  const std::string stem = patient + name;
  for (const char* ext : {".nii.gz", ".nii"}) {
    fs::path p = dir / (stem + ext);
    if (fs::exists(p)) return p;
  }
  throw std::runtime_error("patient " + patient + ": missing file " + (dir / (stem + ".nii.gz")).string());
}

void validate_record(const PatientRecord& r) {
  for (Phase ph : kPhases) {
    const auto img = read_nifti(r.image(ph));
    const auto lab = read_labels(r.label(ph));
    if (img.shape != lab.shape)
      throw std::runtime_error("patient " + r.patient_id + " " + phase_name(ph) + ": image shape " +
                               to_string(img.shape) + " differs from label shape " + to_string(lab.shape));
    for (int a = 0; a < 3; ++a) {
      if (std::fabs(img.spacing[a] - lab.spacing[a]) > 1e-4 * img.spacing[a])
        throw std::runtime_error("patient " + r.patient_id + " " + phase_name(ph) +
                                 ": image and label spacing differ");
    }
  }
}

}  // namespace

std::vector<PatientRecord> load_cohort(const fs::path& root, bool validate_volumes) {
  if (!fs::is_directory(root)) throw std::runtime_error("cohort root is not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());

  std::vector<PatientRecord> out;
  out.reserve(dirs.size());
  for (const auto& dir : dirs) {
    PatientRecord r;
    r.patient_id = dir.filename().string();
    const auto kv = read_info(dir / "Info.cfg", r.patient_id);
    r.ed_frame = parse_frame(kv.at("ED"), r.patient_id, "ED");
    r.es_frame = parse_frame(kv.at("ES"), r.patient_id, "ES");
    try {
      r.diagnosis = parse_diagnosis(kv.at("Group"));
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("patient " + r.patient_id + ": " + e.what());
    }
    if (r.ed_frame == r.es_frame)
      throw std::runtime_error("patient " + r.patient_id + ": ED and ES frames coincide");
    for (Phase ph : kPhases) {
      r.image_paths[static_cast<int>(ph)] = frame_file(dir, r.patient_id, r.frame(ph), false);
      r.label_paths[static_cast<int>(ph)] = frame_file(dir, r.patient_id, r.frame(ph), true);
    }
    if (validate_volumes) validate_record(r);
    out.push_back(std::move(r));
  }
  return out;
}

CohortSplit stratified_split(const std::vector<PatientRecord>& cohort, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split fraction must lie in (0,1)");
  std::set<std::string> seen;
  for (const auto& r : cohort) {
    if (!seen.insert(r.patient_id).second) throw std::invalid_argument("duplicate patient id " + r.patient_id);
  }

  CohortSplit split;
  split.seed = seed;
  std::mt19937_64 rng(seed);
  for (Diagnosis d : kAllDiagnoses) {
    std::vector<std::string> ids;
    for (const auto& r : cohort) {
      if (r.diagnosis == d) ids.push_back(r.patient_id);
    }
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ids.size())));
    split.train_ids.insert(split.train_ids.end(), ids.begin(), ids.begin() + n_train);
    split.validation_ids.insert(split.validation_ids.end(), ids.begin() + n_train, ids.end());
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.validation_ids.begin(), split.validation_ids.end());
  return split;
}

void write_split_manifest(const fs::path& path, const CohortSplit& split) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write split manifest " + path.string());
  out << "# seed " << split.seed << '\n';
  for (const auto& id : split.train_ids) out << id << "\ttrain\n";
  for (const auto& id : split.validation_ids) out << id << "\tvalidation\n";
}

CohortSplit read_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read split manifest " + path.string());
  CohortSplit split;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string key;
      if (ss >> key && key == "seed") ss >> split.seed;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected id<TAB>partition");
    const std::string id = line.substr(0, tab);
    const std::string part = line.substr(tab + 1);
    if (part == "train") {
      split.train_ids.push_back(id);
    } else if (part == "validation") {
      split.validation_ids.push_back(id);
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": unknown partition '" + part + "'");
    }
  }
  return split;
}

std::vector<PatientRecord> select_patients(const std::vector<PatientRecord>& cohort,
                                           const std::vector<std::string>& ids) {
  std::vector<PatientRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = std::find_if(cohort.begin(), cohort.end(), [&](const PatientRecord& r) { return r.patient_id == id; });
    if (it == cohort.end()) throw std::runtime_error("patient " + id + " not found in cohort");
    out.push_back(*it);
  }
  return out;
}

}  // namespace cmrseg
