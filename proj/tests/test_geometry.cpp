#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "cmrseg/geometry.hpp"

using namespace cmrseg;

namespace {

ScanVolume random_scan(const Shape3& s, const Spacing3& sp, std::uint64_t seed) {
  ScanVolume v(s, sp);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-50.0f, 200.0f);
  for (auto& x : v.voxels) x = u(rng);
  return v;
}

SoftmaxVolume random_softmax(const Shape3& s, const Spacing3& sp, int k, std::uint64_t seed) {
  SoftmaxVolume p(s, sp, k);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < p.voxels(); ++i) {
    float sum = 0.0f;
    for (int c = 0; c < k; ++c) sum += (p.channel(c)[i] = u(rng));
    for (int c = 0; c < k; ++c) p.channel(c)[i] /= sum;
  }
  return p;
}

}  // namespace

TEST_CASE("resampled shape rounds and clamps to one") {
  CHECK(resampled_shape({100, 80, 10}, {1.0, 1.0, 10.0}, {1.37, 1.37, 10.0}) == Shape3{73, 58, 10});
  CHECK(resampled_shape({3, 3, 1}, {1.0, 1.0, 1.0}, {10.0, 10.0, 10.0}) == Shape3{1, 1, 1});
}

TEST_CASE("resampling to the native spacing is the identity") {
  const ScanVolume v = random_scan({17, 13, 5}, {1.37, 1.37, 5.0}, 1);
  const ScanVolume lin = resample(v, v.spacing, Interpolation::Linear);
  const ScanVolume nn = resample(v, v.spacing, Interpolation::Nearest);
  CHECK(lin.shape == v.shape);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(lin.voxels[i] == doctest::Approx(v.voxels[i]).epsilon(1e-6));
  CHECK(nn.voxels == v.voxels);
}

TEST_CASE("constant volumes stay constant under linear resampling") {
  ScanVolume v({9, 7, 3}, {1.9, 1.9, 10.0}, 42.5f);
  const ScanVolume r = resample(v, {1.37, 1.37, 10.0}, Interpolation::Linear);
  CHECK(r.shape == Shape3{12, 10, 3});
  for (float x : r.voxels) CHECK(x == doctest::Approx(42.5f));
}

TEST_CASE("linear ramp is upsampled onto the analytic ramp") {
  ScanVolume v({8, 1, 1}, {2.0, 1.0, 1.0});
  for (int x = 0; x < 8; ++x) v.at(x, 0, 0) = static_cast<float>(x * 2.0);  // f = position in mm
  const ScanVolume r = resample(v, {1.0, 1.0, 1.0}, Interpolation::Linear);
  REQUIRE(r.shape[0] == 16);
  // output voxel o sits at input coordinate (o - 7.5) / 2 + 3.5
  for (int o = 1; o < 15; ++o) {
    const double xin = (o - 7.5) / 2.0 + 3.5;
    CHECK(r.at(o, 0, 0) == doctest::Approx(2.0 * xin).epsilon(1e-6));
  }
}

TEST_CASE("label resampling only produces input values") {
  LabelVolume l({20, 20, 2}, {1.0, 1.0, 5.0}, 0);
  std::mt19937_64 rng(5);
  for (auto& v : l.voxels) v = static_cast<std::uint8_t>(rng() % 3 == 0 ? 2 : 0);
  const LabelVolume r = resample(l, {0.7, 1.6, 5.0});
  std::set<int> seen(r.voxels.begin(), r.voxels.end());
  for (int v : seen) CHECK((v == 0 || v == 2));
}

TEST_CASE("non-positive spacing is rejected") {
  const ScanVolume v = random_scan({4, 4, 2}, {1.0, 1.0, 1.0}, 2);
  CHECK_THROWS_AS(resample(v, {0.0, 1.0, 1.0}, Interpolation::Linear), std::invalid_argument);
  CHECK_THROWS_AS(resample(v, {1.0, -1.0, 1.0}, Interpolation::Linear), std::invalid_argument);
}

TEST_CASE("fit_to_canvas centers, pads with zeros and crops") {
  SUBCASE("identity canvas") {
    const ScanVolume v = random_scan({10, 10, 5}, {1.0, 1.0, 1.0}, 3);
    auto [out, rec] = fit_to_canvas(v, {10, 10, 5});
    CHECK(out.voxels == v.voxels);
    CHECK(rec.offsets == std::array<int, 3>{0, 0, 0});
  }
  SUBCASE("padding") {
    ScanVolume v({4, 4, 1}, {1.0, 1.0, 1.0}, 1.0f);
    auto [out, rec] = fit_to_canvas(v, {8, 8, 1});
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const bool inside = x >= 2 && x <= 5 && y >= 2 && y <= 5;
        CHECK(out.at(x, y, 0) == (inside ? 1.0f : 0.0f));
      }
  }
  SUBCASE("cropping and exact inverse on the retained region") {
    const ScanVolume v = random_scan({13, 6, 4}, {1.0, 1.0, 1.0}, 4);
    auto [out, rec] = fit_to_canvas(v, {9, 10, 4});
    CHECK(rec.offsets == std::array<int, 3>{-2, 2, 0});
    const ScanVolume back = extract_from_canvas(out, rec, -1.0f);
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 13; ++x) {
          if (x >= 2 && x < 11) CHECK(back.at(x, y, z) == v.at(x, y, z));
          else CHECK(back.at(x, y, z) == -1.0f);
        }
  }
}

TEST_CASE("normalization gives zero mean and unit variance") {
  SUBCASE("two values") {
    ScanVolume v({2, 1, 1}, {1.0, 1.0, 1.0});
    v.voxels = {0.0f, 2.0f};
    const ScanVolume n = normalize_intensity(v);
    CHECK(n.voxels[0] == doctest::Approx(-1.0));
    CHECK(n.voxels[1] == doctest::Approx(1.0));
  }
  SUBCASE("constant input maps to zeros") {
    ScanVolume v({3, 3, 3}, {1.0, 1.0, 1.0}, 7.0f);
    for (float x : normalize_intensity(v).voxels) CHECK(x == 0.0f);
  }
  SUBCASE("random volumes and idempotence") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ScanVolume n = normalize_intensity(random_scan({11, 9, 4}, {1.0, 1.0, 1.0}, seed));
      double mean = 0.0, sq = 0.0;
      for (float x : n.voxels) mean += x;
      mean /= static_cast<double>(n.size());
      for (float x : n.voxels) sq += (x - mean) * (x - mean);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(std::sqrt(sq / static_cast<double>(n.size())) - 1.0) < 1e-6);
      const ScanVolume twice = normalize_intensity(n);
      for (std::size_t i = 0; i < n.size(); ++i) CHECK(twice.voxels[i] == doctest::Approx(n.voxels[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("register_in_canvas places the field concentrically with background elsewhere") {
  const SoftmaxVolume field = random_softmax({4, 4, 1}, {1.0, 1.0, 1.0}, 3, 9);
  const SoftmaxVolume c = register_in_canvas(field, {8, 6, 1});
  CHECK(c.channel(0)[0] == 1.0f);
  CHECK(c.channel(1)[0] == 0.0f);
  const std::size_t inside = (1 * 8) + 2;  // (x=2, y=1)
  for (int k = 0; k < 3; ++k) CHECK(c.channel(k)[inside] == field.channel(k)[0]);
  CHECK_THROWS(register_in_canvas(field, {3, 8, 1}));
}

TEST_CASE("invert_geometry") {
  SUBCASE("identity record leaves probabilities unchanged") {
    const SoftmaxVolume p = random_softmax({6, 5, 3}, {1.5, 1.5, 6.0}, 4, 1);
    const GeometryRecord rec = make_geometry_record(p.shape, p.spacing, p.spacing, p.shape);
    const SoftmaxVolume q = invert_geometry(p, rec);
    for (std::size_t i = 0; i < p.values.size(); ++i) CHECK(q.values[i] == doctest::Approx(p.values[i]));
  }
  SUBCASE("constant class probabilities survive") {
    const GeometryRecord rec = make_geometry_record({30, 25, 4}, {0.9, 0.9, 8.0}, {1.37, 1.37, 8.0}, {24, 24, 4});
    SoftmaxVolume p(rec.canvas_shape, rec.working_spacing, 4);
    const float vals[4] = {0.1f, 0.2f, 0.3f, 0.4f};
    for (int k = 0; k < 4; ++k) std::fill_n(p.channel(k), p.voxels(), vals[k]);
    const SoftmaxVolume q = invert_geometry(p, rec);
    CHECK(q.shape == rec.native_shape);
    // working volume 20x16 fits inside the canvas, so every native voxel sees the constant field
    for (int k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < q.voxels(); ++i) CHECK(q.channel(k)[i] == doctest::Approx(vals[k]));
  }
  SUBCASE("channel sums are preserved on random fields") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const GeometryRecord rec =
          make_geometry_record({37, 29, 5}, {1.1, 1.1, 7.0}, {1.37, 1.37, 7.0}, {24, 28, 5});
      const SoftmaxVolume p = random_softmax(rec.canvas_shape, rec.working_spacing, 4, seed);
      const SoftmaxVolume q = invert_geometry(p, rec);
      CHECK(q.shape == rec.native_shape);
      for (std::size_t i = 0; i < q.voxels(); ++i) {
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
          const float v = q.channel(k)[i];
          CHECK(v >= -1e-6f);
          CHECK(v <= 1.0f + 1e-6f);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("shape mismatch is an error") {
    const GeometryRecord rec = make_geometry_record({8, 8, 2}, {1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}, {10, 10, 2});
    CHECK_THROWS_AS(invert_geometry(SoftmaxVolume({9, 10, 2}, {1.0, 1.0, 1.0}, 2), rec), std::invalid_argument);
  }
}

TEST_CASE("geometry record text round trip") {
  const GeometryRecord rec = make_geometry_record({37, 29, 5}, {1.1, 1.3, 7.5}, {1.37, 1.37, 7.5}, {24, 28, 5});
  CHECK(geometry_from_text(to_text(rec)) == rec);
}
