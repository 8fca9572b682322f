#include "cmrseg/clinical.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "cmrseg/metrics.hpp"

namespace cmrseg {
namespace {

std::string number(double v, const char* fmt = "%.3f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string correlation_cell(const AgreementStats& a) { return a.correlation ? number(*a.correlation) : "undefined"; }

std::string bias_cell(const AgreementStats& a) {
  if (a.n == 0) return "undefined";
  if (!a.loa_low) return number(a.bias, "%.2f");
  return number(a.bias, "%.2f") + " [" + number(*a.loa_low, "%.2f") + " ; " + number(*a.loa_high, "%.2f") + "]";
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json agreement_json(const AgreementStats& a) {
  return {{"n", a.n},
          {"correlation", opt(a.correlation)},
          {"bias", a.n ? nlohmann::json(a.bias) : nlohmann::json(nullptr)},
          {"loa_low", opt(a.loa_low)},
          {"loa_high", opt(a.loa_high)}};
}

}  // namespace

double structure_volume(const LabelVolume& labels, Structure structure, const Spacing3& spacing) {
  check_spacing(spacing);
  const auto code = static_cast<std::uint8_t>(structure);
  std::size_t count = 0;
  for (auto v : labels.voxels) count += v == code;
  return static_cast<double>(count) * spacing[0] * spacing[1] * spacing[2] / 1000.0;
}

std::optional<double> ejection_fraction(double volume_ed, double volume_es) {
  if (volume_ed == 0.0) return std::nullopt;
  return 100.0 * (volume_ed - volume_es) / volume_ed;
}

AgreementStats agreement(std::span<const double> predicted, std::span<const double> reference) {
  if (predicted.size() != reference.size())
    throw std::invalid_argument("agreement needs equal-length inputs, got " + std::to_string(predicted.size()) +
                                " and " + std::to_string(reference.size()));
  AgreementStats a;
  a.n = static_cast<int>(predicted.size());
  if (a.n == 0) return a;
  double mean_p = 0.0, mean_r = 0.0;
  for (int i = 0; i < a.n; ++i) {
    mean_p += predicted[i];
    mean_r += reference[i];
    a.bias += predicted[i] - reference[i];
  }
  mean_p /= a.n;
  mean_r /= a.n;
  a.bias /= a.n;
  if (a.n < 2) return a;

  double ss_d = 0.0, ss_p = 0.0, ss_r = 0.0, cross = 0.0;
  for (int i = 0; i < a.n; ++i) {
    const double d = predicted[i] - reference[i] - a.bias;
    const double dp = predicted[i] - mean_p;
    const double dr = reference[i] - mean_r;
    ss_d += d * d;
    ss_p += dp * dp;
    ss_r += dr * dr;
    cross += dp * dr;
  }
  const double sd = std::sqrt(ss_d / (a.n - 1));
  a.loa_low = a.bias - 1.96 * sd;
  a.loa_high = a.bias + 1.96 * sd;
  if (ss_p > 0.0 && ss_r > 0.0) a.correlation = std::clamp(cross / std::sqrt(ss_p * ss_r), -1.0, 1.0);
  return a;
}

ClinicalReport clinical_report(const std::vector<ClinicalCase>& cases) {
  ClinicalReport report;
  for (Structure s : kForeground) {
    std::vector<double> ef_p, ef_r, ed_p, ed_r, es_p, es_r;
    for (const auto& c : cases) {
      ClinicalMeasures m;
      m.patient_id = c.patient_id;
      m.structure = s;
      m.predicted_ed_ml = structure_volume(c.predicted_ed, s, c.reference_ed.spacing);
      m.predicted_es_ml = structure_volume(c.predicted_es, s, c.reference_es.spacing);
      m.reference_ed_ml = structure_volume(c.reference_ed, s, c.reference_ed.spacing);
      m.reference_es_ml = structure_volume(c.reference_es, s, c.reference_es.spacing);
      if (s != Structure::Myo) {
        m.predicted_ef = ejection_fraction(m.predicted_ed_ml, m.predicted_es_ml);
        m.reference_ef = ejection_fraction(m.reference_ed_ml, m.reference_es_ml);
        if (m.predicted_ef && m.reference_ef) {
          ef_p.push_back(*m.predicted_ef);
          ef_r.push_back(*m.reference_ef);
        }
      }
      ed_p.push_back(m.predicted_ed_ml);
      ed_r.push_back(m.reference_ed_ml);
      es_p.push_back(m.predicted_es_ml);
      es_r.push_back(m.reference_es_ml);
      report.cases.push_back(m);
    }
    ClinicalRow row;
    row.structure = s;
    if (s != Structure::Myo) row.ef = agreement(ef_p, ef_r);
    row.volume_ed = agreement(ed_p, ed_r);
    row.volume_es = agreement(es_p, es_r);
    report.rows.push_back(row);
  }
  return report;
}

void write_clinical_csv(const std::filesystem::path& path, const ClinicalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "structure,ef_correlation,vol_ed_correlation,vol_es_correlation,ef_bias_loa,vol_ed_bias_loa,"
         "vol_es_bias_loa\n";
  for (const auto& r : report.rows) {
    out << structure_name(r.structure) << ',' << (r.ef ? correlation_cell(*r.ef) : "") << ','
        << correlation_cell(r.volume_ed) << ',' << correlation_cell(r.volume_es) << ",\""
        << (r.ef ? bias_cell(*r.ef) : "") << "\",\"" << bias_cell(r.volume_ed) << "\",\"" << bias_cell(r.volume_es)
        << "\"\n";
  }
}

void write_clinical_cases_csv(const std::filesystem::path& path, const ClinicalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "patient,structure,pred_ed_ml,pred_es_ml,ref_ed_ml,ref_es_ml,pred_ef,ref_ef\n";
  auto cell = [](const std::optional<double>& v) { return v ? number(*v, "%.4f") : std::string(); };
  for (const auto& m : report.cases) {
    out << m.patient_id << ',' << structure_name(m.structure) << ',' << number(m.predicted_ed_ml, "%.4f") << ','
        << number(m.predicted_es_ml, "%.4f") << ',' << number(m.reference_ed_ml, "%.4f") << ','
        << number(m.reference_es_ml, "%.4f") << ',' << cell(m.predicted_ef) << ',' << cell(m.reference_ef) << '\n';
  }
}

void write_clinical_json(const std::filesystem::path& path, const ClinicalReport& report) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    j["rows"].push_back({{"structure", structure_name(r.structure)},
                         {"ef", r.ef ? agreement_json(*r.ef) : nlohmann::json(nullptr)},
                         {"volume_ed", agreement_json(r.volume_ed)},
                         {"volume_es", agreement_json(r.volume_es)}});
  }
  j["cases"] = nlohmann::json::array();
  for (const auto& m : report.cases) {
    j["cases"].push_back({{"patient", m.patient_id},
                          {"structure", structure_name(m.structure)},
                          {"predicted_ed_ml", m.predicted_ed_ml},
                          {"predicted_es_ml", m.predicted_es_ml},
                          {"reference_ed_ml", m.reference_ed_ml},
                          {"reference_es_ml", m.reference_es_ml},
                          {"predicted_ef", opt(m.predicted_ef)},
                          {"reference_ef", opt(m.reference_ef)}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace cmrseg
