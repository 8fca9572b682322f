#include <doctest.h>

#include <algorithm>
#include <random>

#include "cmrseg/metrics.hpp"
#include "cmrseg/postprocess.hpp"

using namespace cmrseg;

namespace {

SoftmaxVolume random_slice(const Shape3& s, int k, std::mt19937_64& rng) {
  SoftmaxVolume p(s, {1.0, 1.0, 1.0}, k);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < p.voxels(); ++i) {
    float sum = 0.0f;
    for (int c = 0; c < k; ++c) sum += (p.channel(c)[i] = u(rng));
    for (int c = 0; c < k; ++c) p.channel(c)[i] /= sum;
  }
  return p;
}

void paint_box(LabelVolume& l, std::uint8_t v, int x0, int y0, int z0, int x1, int y1, int z1) {
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) l.at(x, y, z) = v;
}

std::size_t count(const LabelVolume& l, std::uint8_t v) { return std::count(l.voxels.begin(), l.voxels.end(), v); }

}  // namespace

TEST_CASE("assemble_volume stacks slices in index order") {
  std::mt19937_64 rng(1);
  GeometryRecord rec;
  rec.canvas_shape = {8, 8, 5};
  std::vector<SliceProbabilities> slices;
  for (int z = 0; z < 5; ++z) slices.push_back({z, random_slice({8, 8, 1}, 3, rng)});
  const SoftmaxVolume ordered = assemble_volume(slices, rec);
  for (int z = 0; z < 5; ++z)
    for (int k = 0; k < 3; ++k)
      CHECK(std::equal(slices[z].probabilities.channel(k), slices[z].probabilities.channel(k) + 64,
                       ordered.channel(k) + z * 64));
  auto shuffled = slices;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(assemble_volume(shuffled, rec).values == ordered.values);

  SUBCASE("count mismatch") {
    slices.pop_back();
    CHECK_THROWS_AS(assemble_volume(slices, rec), std::invalid_argument);
  }
  SUBCASE("duplicate index") {
    slices[4].slice_index = 3;
    CHECK_THROWS_AS(assemble_volume(slices, rec), std::invalid_argument);
  }
}

TEST_CASE("assemble_volume registers smaller maps concentrically") {
  std::mt19937_64 rng(2);
  GeometryRecord rec;
  rec.canvas_shape = {10, 10, 1};
  const SoftmaxVolume v = assemble_volume({{0, random_slice({4, 4, 1}, 2, rng)}}, rec);
  CHECK(v.channel(0)[0] == 1.0f);
  CHECK(v.channel(1)[0] == 0.0f);
  GeometryRecord single;
  single.canvas_shape = {6, 6, 1};
  const SoftmaxVolume one = random_slice({6, 6, 1}, 3, rng);
  CHECK(assemble_volume({{0, one}}, single).values == one.values);
}

TEST_CASE("to_labels") {
  std::mt19937_64 rng(3);
  SUBCASE("one-hot inverts") {
    LabelVolume l({7, 5, 3}, {1.0, 1.0, 1.0});
    for (auto& v : l.voxels) v = static_cast<std::uint8_t>(rng() % 4);
    SoftmaxVolume p(l.shape, l.spacing, 4, 0.0f);
    for (std::size_t i = 0; i < l.size(); ++i) p.channel(l.voxels[i])[i] = 1.0f;
    CHECK(to_labels(p).voxels == l.voxels);
  }
  SUBCASE("ties go to the lowest index") {
    SoftmaxVolume p({3, 3, 1}, {1.0, 1.0, 1.0}, 4, 0.25f);
    for (auto v : to_labels(p).voxels) CHECK(v == 0);
    p.channel(2)[4] = 0.4f;
    p.channel(3)[4] = 0.4f;
    CHECK(to_labels(p).voxels[4] == 2);
  }
  SUBCASE("random fields match a per-voxel scan") {
    SoftmaxVolume p = random_slice({9, 9, 1}, 4, rng);
    const LabelVolume l = to_labels(p);
    for (std::size_t i = 0; i < p.voxels(); ++i) {
      int best = 0;
      for (int k = 1; k < 4; ++k)
        if (p.channel(k)[i] > p.channel(best)[i]) best = k;
      CHECK(l.voxels[i] == best);
    }
  }
}

TEST_CASE("largest connected component") {
  LabelVolume l({20, 20, 6}, {1.0, 1.0, 1.0}, 0);
  paint_box(l, 3, 2, 2, 1, 6, 6, 4);        // 100 voxels of class 3
  paint_box(l, 3, 15, 15, 2, 15, 16, 3);    // 4 voxels, detached
  paint_box(l, 1, 9, 2, 0, 11, 4, 0);       // class 1, single component
  paint_box(l, 2, 12, 12, 1, 12, 12, 1);    // class 2: 1 voxel
  paint_box(l, 2, 13, 13, 2, 13, 13, 2);    // diagonal neighbour (26-connected)
  const LabelVolume out = largest_connected_component(l);
  CHECK(count(out, 3) == 100);
  CHECK(out.at(15, 15, 2) == 0);
  CHECK(count(out, 1) == count(l, 1));
  CHECK(count(out, 2) == 2);
  CHECK(largest_connected_component(out).voxels == out.voxels);

  SUBCASE("single components are untouched") {
    LabelVolume single({8, 8, 2}, {1.0, 1.0, 1.0}, 0);
    paint_box(single, 1, 1, 1, 0, 3, 3, 1);
    paint_box(single, 2, 5, 5, 0, 6, 6, 0);
    CHECK(largest_connected_component(single).voxels == single.voxels);
  }
  SUBCASE("equal sizes keep the component holding the smallest (x, y, z)") {
    LabelVolume tie({10, 10, 1}, {1.0, 1.0, 1.0}, 0);
    paint_box(tie, 1, 6, 0, 0, 7, 1, 0);  // starts at x = 6 but y = 0
    paint_box(tie, 1, 1, 6, 0, 2, 7, 0);  // starts at x = 1
    const LabelVolume kept = largest_connected_component(tie);
    CHECK(kept.at(1, 6, 0) == 1);
    CHECK(kept.at(6, 0, 0) == 0);
  }
}

TEST_CASE("component cleanup never grows a class or touches others") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    LabelVolume l({12, 12, 4}, {1.0, 1.0, 1.0});
    for (auto& v : l.voxels) v = static_cast<std::uint8_t>(rng() % 7 < 4 ? 0 : 1 + rng() % 3);
    const LabelVolume out = largest_connected_component(l);
    for (std::size_t i = 0; i < l.size(); ++i) CHECK((out.voxels[i] == l.voxels[i] || out.voxels[i] == 0));
    CHECK(largest_connected_component(out).voxels == out.voxels);
  }
}

TEST_CASE("removing a distant blob lowers the Hausdorff distance") {
  LabelVolume ref({40, 40, 4}, {1.5, 1.5, 5.0}, 0);
  paint_box(ref, 3, 5, 5, 0, 14, 14, 3);
  LabelVolume pred = ref;
  paint_box(pred, 3, 34, 34, 1, 35, 35, 2);
  const auto before = hausdorff_distance(structure_mask(pred, Structure::LV), structure_mask(ref, Structure::LV),
                                         ref.spacing);
  const LabelVolume clean = largest_connected_component(pred);
  const auto after = hausdorff_distance(structure_mask(clean, Structure::LV), structure_mask(ref, Structure::LV),
                                        ref.spacing);
  CHECK(*after < *before);
  CHECK(*after == 0.0);
}
