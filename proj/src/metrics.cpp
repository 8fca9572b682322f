#include "cmrseg/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace cmrseg {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const LabelVolume& a, const LabelVolume& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mask shape mismatch: " + to_string(a.shape) + " vs " + to_string(b.shape));
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line.
// f and out are strided views; positions are sample index times spacing.
struct Envelope {
  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> f;

  void run(double* data, int n, std::size_t stride, double s) {
    v.resize(static_cast<std::size_t>(n));
    z.resize(static_cast<std::size_t>(n) + 1);
    f.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) f[i] = data[static_cast<std::size_t>(i) * stride];
    int k = -1;
    for (int q = 0; q < n; ++q) {
      if (f[q] == kInf) continue;
      const double pq = q * s;
      double sq = -kInf;
      while (k >= 0) {
        const double pv = v[k] * s;
        sq = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
        if (sq <= z[k]) {
          --k;
        } else {
          break;
        }
      }
      ++k;
      v[k] = q;
      z[k] = k == 0 ? -kInf : sq;
      z[k + 1] = kInf;
    }
    if (k < 0) return;  // line stays at infinity
    int j = 0;
    for (int p = 0; p < n; ++p) {
      const double pp = p * s;
      while (z[j + 1] < pp) ++j;
      const double d = pp - v[j] * s;
      data[static_cast<std::size_t>(p) * stride] = d * d + f[v[j]];
    }
  }
};

std::string mean_std_cell(const Summary& s) {
  if (s.count == 0) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (%.3f)", s.mean, s.std);
  return buf;
}

std::string optional_cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

nlohmann::json summary_json(const Summary& s) {
  nlohmann::json j;
  j["mean"] = s.count ? nlohmann::json(s.mean) : nlohmann::json(nullptr);
  j["std"] = s.count ? nlohmann::json(s.std) : nlohmann::json(nullptr);
  j["count"] = s.count;
  j["excluded"] = s.excluded;
  return j;
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

LabelVolume structure_mask(const LabelVolume& labels, Structure s) {
  LabelVolume m(labels.shape, labels.spacing, 0);
  const auto code = static_cast<std::uint8_t>(s);
  for (std::size_t i = 0; i < labels.size(); ++i) m.voxels[i] = labels.voxels[i] == code ? 1 : 0;
  return m;
}

double dice(const LabelVolume& a, const LabelVolume& b) {
  require_same_shape(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a.voxels[i] != 0;
    const bool ib = b.voxels[i] != 0;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

LabelVolume surface_of(const LabelVolume& mask) {
  const auto& s = mask.shape;
  LabelVolume out(s, mask.spacing, 0);
  for (int z = 0; z < s[2]; ++z) {
    for (int y = 0; y < s[1]; ++y) {
      for (int x = 0; x < s[0]; ++x) {
        if (!mask.at(x, y, z)) continue;
        const bool border = x == 0 || y == 0 || z == 0 || x == s[0] - 1 || y == s[1] - 1 || z == s[2] - 1;
        const bool edge = border || !mask.at(x - 1, y, z) || !mask.at(x + 1, y, z) || !mask.at(x, y - 1, z) ||
                          !mask.at(x, y + 1, z) || !mask.at(x, y, z - 1) || !mask.at(x, y, z + 1);
        out.at(x, y, z) = edge ? 1 : 0;
      }
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(const LabelVolume& features, const Spacing3& spacing) {
  const auto& s = features.shape;
  std::vector<double> d(features.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = features.voxels[i] ? 0.0 : kInf;
  Envelope env;
  const std::size_t sx = 1, sy = static_cast<std::size_t>(s[0]), sz = sy * static_cast<std::size_t>(s[1]);
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y) env.run(d.data() + z * sz + y * sy, s[0], sx, spacing[0]);
  for (int z = 0; z < s[2]; ++z)
    for (int x = 0; x < s[0]; ++x) env.run(d.data() + z * sz + x, s[1], sy, spacing[1]);
  for (int y = 0; y < s[1]; ++y)
    for (int x = 0; x < s[0]; ++x) env.run(d.data() + y * sy + x, s[2], sz, spacing[2]);
  return d;
}

std::optional<SurfaceDistances> surface_distances(const LabelVolume& a, const LabelVolume& b,
                                                   const Spacing3& spacing) {
  require_same_shape(a, b);
  check_spacing(spacing);
  const LabelVolume sa = surface_of(a);
  const LabelVolume sb = surface_of(b);
  const bool a_empty = std::none_of(sa.voxels.begin(), sa.voxels.end(), [](auto v) { return v != 0; });
  const bool b_empty = std::none_of(sb.voxels.begin(), sb.voxels.end(), [](auto v) { return v != 0; });
  if (a_empty || b_empty) return std::nullopt;

  const std::vector<double> to_b = squared_distance_transform(sb, spacing);
  const std::vector<double> to_a = squared_distance_transform(sa, spacing);
  double max_sq = 0.0, sum = 0.0;
  std::size_t points = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa.voxels[i]) {
      max_sq = std::max(max_sq, to_b[i]);
      sum += std::sqrt(to_b[i]);
      ++points;
    }
    if (sb.voxels[i]) {
      max_sq = std::max(max_sq, to_a[i]);
      sum += std::sqrt(to_a[i]);
      ++points;
    }
  }
  return SurfaceDistances{std::sqrt(max_sq), sum / static_cast<double>(points)};
}

std::optional<double> hausdorff_distance(const LabelVolume& a, const LabelVolume& b, const Spacing3& spacing) {
  const auto d = surface_distances(a, b, spacing);
  if (!d) return std::nullopt;
  return d->hausdorff_mm;
}

std::optional<double> average_symmetric_surface_distance(const LabelVolume& a, const LabelVolume& b,
                                                         const Spacing3& spacing) {
  const auto d = surface_distances(a, b, spacing);
  if (!d) return std::nullopt;
  return d->assd_mm;
}

Summary summarize(const std::vector<std::optional<double>>& values) {
  Summary s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++s.count;
    } else {
      ++s.excluded;
    }
  }
  if (s.count == 0) return s;
  s.mean = sum / s.count;
  double ss = 0.0;
  for (const auto& v : values)
    if (v) ss += (*v - s.mean) * (*v - s.mean);
  s.std = std::sqrt(ss / s.count);
  return s;
}

CaseMetrics evaluate_structure(const LabelVolume& prediction, const LabelVolume& reference, Structure s) {
  require_same_shape(prediction, reference);
  const LabelVolume p = structure_mask(prediction, s);
  const LabelVolume r = structure_mask(reference, s);
  CaseMetrics m;
  m.structure = s;
  m.dice = dice(p, r);
  if (const auto d = surface_distances(p, r, reference.spacing)) {
    m.hausdorff_mm = d->hausdorff_mm;
    m.assd_mm = d->assd_mm;
  }
  return m;
}

MetricsReport evaluate_cohort(const std::vector<EvaluationCase>& cases) {
  MetricsReport report;
  for (const auto& c : cases) {
    if (c.prediction.shape != c.reference.shape)
      throw std::invalid_argument("case " + c.case_id + " " + phase_name(c.phase) + ": prediction shape " +
                                  to_string(c.prediction.shape) + " does not match reference " +
                                  to_string(c.reference.shape));
    for (Structure s : kForeground) {
      CaseMetrics m = evaluate_structure(c.prediction, c.reference, s);
      m.case_id = c.case_id;
      m.phase = c.phase;
      report.cases.push_back(std::move(m));
    }
  }
  auto collect = [&](Structure s, std::optional<Phase> phase) {
    std::vector<std::optional<double>> d, h, a;
    for (const auto& m : report.cases) {
      if (m.structure != s || (phase && m.phase != *phase)) continue;
      d.emplace_back(m.dice);
      h.push_back(m.hausdorff_mm);
      a.push_back(m.assd_mm);
    }
    StructureSummary row;
    row.structure = s;
    row.phase = phase;
    row.dice = summarize(d);
    row.hausdorff_mm = summarize(h);
    row.assd_mm = summarize(a);
    return row;
  };
  for (Structure s : kForeground) {
    for (Phase p : kPhases) report.per_phase.push_back(collect(s, p));
    report.pooled.push_back(collect(s, std::nullopt));
  }
  return report;
}

void write_case_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "case,phase,structure,dice,hausdorff_mm,assd_mm\n";
  char buf[32];
  for (const auto& m : report.cases) {
    std::snprintf(buf, sizeof buf, "%.6f", m.dice);
    out << m.case_id << ',' << phase_name(m.phase) << ',' << structure_name(m.structure) << ',' << buf << ','
        << optional_cell(m.hausdorff_mm) << ',' << optional_cell(m.assd_mm) << '\n';
  }
  out << "\n# summary: mean (std) per structure and phase; n = cases used, excluded = undefined distances\n";
  out << "structure,phase,dice,hausdorff_mm,assd_mm,n,excluded\n";
  auto row = [&](const StructureSummary& r) {
    out << structure_name(r.structure) << ',' << (r.phase ? phase_name(*r.phase) : "ED+ES") << ",\""
        << mean_std_cell(r.dice) << "\",\"" << mean_std_cell(r.hausdorff_mm) << "\",\"" << mean_std_cell(r.assd_mm)
        << "\"," << r.dice.count << ',' << r.hausdorff_mm.excluded << '\n';
  };
  for (const auto& r : report.per_phase) row(r);
  for (const auto& r : report.pooled) row(r);
}

void write_summary_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "structure,dice,assd_mm,hausdorff_mm,n,excluded\n";
  for (const auto& r : report.pooled) {
    out << structure_name(r.structure) << ",\"" << mean_std_cell(r.dice) << "\",\"" << mean_std_cell(r.assd_mm)
        << "\",\"" << mean_std_cell(r.hausdorff_mm) << "\"," << r.dice.count << ',' << r.assd_mm.excluded << '\n';
  }
}

void write_metrics_json(const std::filesystem::path& path, const MetricsReport& report) {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& m : report.cases) {
    j["cases"].push_back({{"case", m.case_id},
                          {"phase", phase_name(m.phase)},
                          {"structure", structure_name(m.structure)},
                          {"dice", m.dice},
                          {"hausdorff_mm", optional_json(m.hausdorff_mm)},
                          {"assd_mm", optional_json(m.assd_mm)}});
  }
  auto rows = [](const std::vector<StructureSummary>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : v) {
      a.push_back({{"structure", structure_name(r.structure)},
                   {"phase", r.phase ? phase_name(*r.phase) : "ED+ES"},
                   {"dice", summary_json(r.dice)},
                   {"hausdorff_mm", summary_json(r.hausdorff_mm)},
                   {"assd_mm", summary_json(r.assd_mm)}});
    }
    return a;
  };
  j["per_phase"] = rows(report.per_phase);
  j["pooled"] = rows(report.pooled);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace cmrseg
