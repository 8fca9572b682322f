#include <doctest.h>

#include <cmath>
#include <fstream>

#include "cmrseg/clinical.hpp"
#include "fixtures.hpp"

using namespace cmrseg;

TEST_CASE("structure volumes in millilitres") {
  LabelVolume l({10, 10, 10}, {1.0, 1.0, 1.0}, 0);
  CHECK(structure_volume(l, Structure::LV, l.spacing) == 0.0);
  std::fill(l.voxels.begin(), l.voxels.end(), 3);
  CHECK(structure_volume(l, Structure::LV, {1.0, 1.0, 1.0}) == 1.0);
  LabelVolume small({10, 1, 1}, {1.37, 1.37, 5.0}, 2);
  CHECK(structure_volume(small, Structure::Myo, small.spacing) == doctest::Approx(10 * 1.37 * 1.37 * 5.0 / 1000.0));
  // additivity over disjoint masks of one label
  LabelVolume a({4, 4, 1}, {1.0, 1.0, 1.0}, 0), b = a, u = a;
  a.voxels[0] = a.voxels[1] = 1;
  b.voxels[5] = 1;
  u.voxels[0] = u.voxels[1] = u.voxels[5] = 1;
  CHECK(structure_volume(u, Structure::RV, u.spacing) ==
        structure_volume(a, Structure::RV, a.spacing) + structure_volume(b, Structure::RV, b.spacing));
}

TEST_CASE("ejection fraction") {
  CHECK(*ejection_fraction(100.0, 40.0) == 60.0);
  CHECK(*ejection_fraction(80.0, 80.0) == 0.0);
  CHECK(*ejection_fraction(55.0, 0.0) == 100.0);
  CHECK_FALSE(ejection_fraction(0.0, 10.0).has_value());
  CHECK(*ejection_fraction(3.7 * 100.0, 3.7 * 40.0) == doctest::Approx(60.0).epsilon(1e-14));
}

TEST_CASE("agreement statistics") {
  const std::vector<double> ref{10.0, 20.0, 35.0, 50.0};
  SUBCASE("identical") {
    const AgreementStats a = agreement(ref, ref);
    CHECK(*a.correlation == doctest::Approx(1.0));
    CHECK(a.bias == 0.0);
    CHECK(*a.loa_low == 0.0);
    CHECK(*a.loa_high == 0.0);
  }
  SUBCASE("shifted") {
    std::vector<double> pred = ref;
    for (auto& v : pred) v += 5.0;
    const AgreementStats a = agreement(pred, ref);
    CHECK(*a.correlation == doctest::Approx(1.0));
    CHECK(a.bias == doctest::Approx(5.0));
    CHECK(*a.loa_low == doctest::Approx(5.0));
    CHECK(*a.loa_high == doctest::Approx(5.0));
  }
  SUBCASE("two differences of -1 and +1") {
    const AgreementStats a = agreement(std::vector<double>{0.0, 3.0}, std::vector<double>{1.0, 2.0});
    CHECK(a.bias == 0.0);
    CHECK(*a.loa_high == doctest::Approx(1.96 * std::sqrt(2.0)));
    CHECK(*a.loa_low == doctest::Approx(-1.96 * std::sqrt(2.0)));
  }
  SUBCASE("swapping arguments negates the bias and mirrors the limits") {
    const std::vector<double> pred{12.0, 18.0, 39.0, 47.0};
    const AgreementStats a = agreement(pred, ref), b = agreement(ref, pred);
    CHECK(b.bias == doctest::Approx(-a.bias));
    CHECK(*b.loa_low == doctest::Approx(-*a.loa_high));
    CHECK(*b.correlation == doctest::Approx(*a.correlation));
  }
  SUBCASE("degenerate inputs") {
    const AgreementStats one = agreement(std::vector<double>{3.0}, std::vector<double>{1.0});
    CHECK_FALSE(one.correlation.has_value());
    CHECK_FALSE(one.loa_low.has_value());
    CHECK(one.bias == 2.0);
    const AgreementStats flat = agreement(std::vector<double>{1.0, 2.0}, std::vector<double>{4.0, 4.0});
    CHECK_FALSE(flat.correlation.has_value());
    CHECK(flat.loa_low.has_value());
    CHECK_THROWS(agreement(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}));
  }
}

TEST_CASE("clinical report table") {
  fixtures::TempDir tmp;
  std::vector<ClinicalCase> cases;
  for (int i = 0; i < 3; ++i) {
    const double s = 0.7 + 0.05 * i;
    ClinicalCase c;
    c.patient_id = "p" + std::to_string(i);
    c.reference_ed = fixtures::toy_heart({48, 44, 3}, {2.0, 2.0, 8.0}, 1.0);
    c.reference_es = fixtures::toy_heart({48, 44, 3}, {2.0, 2.0, 8.0}, s);
    c.predicted_ed = c.reference_ed;
    c.predicted_es = c.reference_es;
    cases.push_back(c);
  }
  const ClinicalReport r = clinical_report(cases);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].structure == Structure::LV);
  CHECK(r.rows[0].ef->bias == 0.0);
  CHECK(*r.rows[0].ef->correlation == doctest::Approx(1.0));
  CHECK_FALSE(r.rows[2].ef.has_value());
  write_clinical_csv(tmp / "c.csv", r);
  std::ifstream in(tmp / "c.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "structure,ef_correlation,vol_ed_correlation,vol_es_correlation,ef_bias_loa,vol_ed_bias_loa,"
                "vol_es_bias_loa");
  std::getline(in, line);
  CHECK(line.rfind("LV,1.000,", 0) == 0);
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line.rfind("Myo,,", 0) == 0);
}
