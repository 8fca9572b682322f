#include <doctest.h>

#include <cmath>
#include <random>

#include "cmrseg/layers.hpp"

using namespace cmrseg;

namespace {

Tensor random_tensor(int n, int c, const Dims3& d, std::mt19937_64& rng) {
  Tensor t(n, c, d);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (auto& v : t.data) v = g(rng);
  return t;
}

std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::vector<float> v(n);
  std::normal_distribution<float> g(0.0f, 0.5f);
  for (auto& x : v) x = g(rng);
  return v;
}

std::size_t weight_count(int a, int b, const Dims3& k) { return static_cast<std::size_t>(a) * b * product(k); }

// Direct definitions used as oracles.
Tensor naive_conv(const Tensor& x, const std::vector<float>& w, int co, const ConvGeometry& g) {
  const Dims3 od = conv_output_dims(x.spatial, g);
  Tensor y(x.n, co, od);
  const auto& k = g.kernel;
  for (int n = 0; n < x.n; ++n)
    for (int o = 0; o < co; ++o)
      for (int z = 0; z < od[0]; ++z)
        for (int r = 0; r < od[1]; ++r)
          for (int q = 0; q < od[2]; ++q) {
            double acc = 0.0;
            for (int i = 0; i < x.c; ++i)
              for (int a = 0; a < k[0]; ++a)
                for (int b = 0; b < k[1]; ++b)
                  for (int c = 0; c < k[2]; ++c) {
                    const int iz = z * g.stride[0] - g.pad[0] + a;
                    const int iy = r * g.stride[1] - g.pad[1] + b;
                    const int ix = q * g.stride[2] - g.pad[2] + c;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= x.spatial[0] || iy >= x.spatial[1] ||
                        ix >= x.spatial[2])
                      continue;
                    const float xv = x.channel(n, i)[(static_cast<std::size_t>(iz) * x.spatial[1] + iy) *
                                                         x.spatial[2] + ix];
                    acc += xv * w[(((static_cast<std::size_t>(o) * x.c + i) * k[0] + a) * k[1] + b) * k[2] + c];
                  }
            y.channel(n, o)[(static_cast<std::size_t>(z) * od[1] + r) * od[2] + q] = static_cast<float>(acc);
          }
  return y;
}

Tensor naive_conv_transpose(const Tensor& x, const std::vector<float>& w, int co, const ConvGeometry& g) {
  const Dims3 od = conv_transpose_output_dims(x.spatial, g);
  Tensor y(x.n, co, od);
  const auto& k = g.kernel;
  for (int n = 0; n < x.n; ++n)
    for (int i = 0; i < x.c; ++i)
      for (int z = 0; z < x.spatial[0]; ++z)
        for (int r = 0; r < x.spatial[1]; ++r)
          for (int q = 0; q < x.spatial[2]; ++q) {
            const float xv = x.channel(n, i)[(static_cast<std::size_t>(z) * x.spatial[1] + r) * x.spatial[2] + q];
            for (int o = 0; o < co; ++o)
              for (int a = 0; a < k[0]; ++a)
                for (int b = 0; b < k[1]; ++b)
                  for (int c = 0; c < k[2]; ++c) {
                    const int oz = z * g.stride[0] - g.pad[0] + a;
                    const int oy = r * g.stride[1] - g.pad[1] + b;
                    const int ox = q * g.stride[2] - g.pad[2] + c;
                    if (oz < 0 || oy < 0 || ox < 0 || oz >= od[0] || oy >= od[1] || ox >= od[2]) continue;
                    y.channel(n, o)[(static_cast<std::size_t>(oz) * od[1] + oy) * od[2] + ox] +=
                        xv * w[(((static_cast<std::size_t>(i) * co + o) * k[0] + a) * k[1] + b) * k[2] + c];
                  }
          }
  return y;
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.same_shape(b));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(tol).scale(1.0));
}

const ConvGeometry kGeometries[] = {
    {{1, 3, 3}, {1, 1, 1}, {0, 0, 0}},  // valid 2D
    {{1, 3, 3}, {1, 1, 1}, {0, 1, 1}},  // same 2D
    {{3, 3, 3}, {1, 1, 1}, {0, 0, 0}},  // valid 3D
    {{1, 7, 7}, {1, 1, 1}, {0, 3, 3}},  // large kernel, wide padding
    {{1, 3, 3}, {1, 2, 2}, {0, 1, 1}},  // strided
    {{1, 1, 1}, {1, 1, 1}, {0, 0, 0}},  // pointwise
};

const ConvGeometry kTransposeGeometries[] = {
    {{1, 2, 2}, {1, 2, 2}, {0, 0, 0}},
    {{2, 2, 2}, {2, 2, 2}, {0, 0, 0}},
    {{1, 4, 4}, {1, 2, 2}, {0, 1, 1}},
    {{1, 16, 16}, {1, 8, 8}, {0, 4, 4}},
};

}  // namespace

TEST_CASE("output extents") {
  CHECK(conv_output_dims({1, 396, 396}, kGeometries[0]) == Dims3{1, 394, 394});
  CHECK(conv_output_dims({1, 224, 224}, kGeometries[1]) == Dims3{1, 224, 224});
  CHECK(conv_output_dims({1, 9, 9}, kGeometries[4]) == Dims3{1, 5, 5});
  CHECK(conv_transpose_output_dims({1, 7, 7}, kTransposeGeometries[2]) == Dims3{1, 14, 14});
  CHECK(conv_transpose_output_dims({1, 7, 7}, kTransposeGeometries[3]) == Dims3{1, 56, 56});
  CHECK_THROWS(conv_output_dims({1, 2, 2}, kGeometries[0]));
}

TEST_CASE("convolution forward matches the direct sum") {
  std::mt19937_64 rng(1);
  for (const auto& g : kGeometries) {
    const Dims3 in{g.kernel[0] == 3 ? 5 : 1, 9, 8};
    const Tensor x = random_tensor(2, 3, in, rng);
    const auto w = random_vector(weight_count(4, 3, g.kernel), rng);
    Tensor y;
    conv_forward(x, w, 4, g, y);
    check_close(y, naive_conv(x, w, 4, g), 1e-5);
  }
}

TEST_CASE("convolution forward in the chunked regime") {
  std::mt19937_64 rng(2);
  const ConvGeometry g = kGeometries[1];
  const Tensor x = random_tensor(1, 64, {1, 128, 128}, rng);
  const auto w = random_vector(weight_count(2, 64, g.kernel), rng);
  Tensor y;
  conv_forward(x, w, 2, g, y);
  check_close(y, naive_conv(x, w, 2, g), 1e-4);
}

TEST_CASE("transposed convolution forward matches the scatter definition") {
  std::mt19937_64 rng(3);
  for (const auto& g : kTransposeGeometries) {
    const Dims3 in{g.kernel[0] == 2 ? 3 : 1, 5, 4};
    const Tensor x = random_tensor(2, 3, in, rng);
    const auto w = random_vector(weight_count(3, 2, g.kernel), rng);
    Tensor y;
    conv_transpose_forward(x, w, 2, g, y);
    check_close(y, naive_conv_transpose(x, w, 2, g), 1e-5);
  }
}

TEST_CASE("convolution backward is the adjoint of forward") {
  std::mt19937_64 rng(4);
  for (const auto& g : kGeometries) {
    const Dims3 in{g.kernel[0] == 3 ? 5 : 1, 9, 8};
    const Tensor x = random_tensor(2, 3, in, rng);
    const auto w = random_vector(weight_count(4, 3, g.kernel), rng);
    Tensor y;
    conv_forward(x, w, 4, g, y);
    const Tensor dy = random_tensor(2, 4, y.spatial, rng);
    Tensor dx(x.n, x.c, x.spatial);
    std::vector<float> dw(w.size(), 0.0f);
    conv_backward(x, w, g, dy, &dx, dw);
    const double lhs = dot(y.data, dy.data);
    // <y, dy> is linear in both x and w: it equals <x, dx> and <w, dw>.
    CHECK(dot(x.data, dx.data) == doctest::Approx(lhs).epsilon(1e-4));
    CHECK(dot(w, dw) == doctest::Approx(lhs).epsilon(1e-4));
  }
}

TEST_CASE("transposed convolution backward is the adjoint of forward") {
  std::mt19937_64 rng(5);
  for (const auto& g : kTransposeGeometries) {
    const Dims3 in{g.kernel[0] == 2 ? 3 : 1, 5, 4};
    const Tensor x = random_tensor(2, 3, in, rng);
    const auto w = random_vector(weight_count(3, 2, g.kernel), rng);
    Tensor y;
    conv_transpose_forward(x, w, 2, g, y);
    const Tensor dy = random_tensor(2, 2, y.spatial, rng);
    Tensor dx(x.n, x.c, x.spatial);
    std::vector<float> dw(w.size(), 0.0f);
    conv_transpose_backward(x, w, g, dy, &dx, dw);
    const double lhs = dot(y.data, dy.data);
    CHECK(dot(x.data, dx.data) == doctest::Approx(lhs).epsilon(1e-4));
    CHECK(dot(w, dw) == doctest::Approx(lhs).epsilon(1e-4));
  }
}

TEST_CASE("backward accumulates rather than overwrites") {
  std::mt19937_64 rng(6);
  const ConvGeometry g = kGeometries[0];
  const Tensor x = random_tensor(1, 2, {1, 6, 6}, rng);
  const auto w = random_vector(weight_count(2, 2, g.kernel), rng);
  Tensor y;
  conv_forward(x, w, 2, g, y);
  const Tensor dy = random_tensor(1, 2, y.spatial, rng);
  std::vector<float> once(w.size(), 0.0f), twice(w.size(), 0.0f);
  conv_backward(x, w, g, dy, nullptr, once);
  conv_backward(x, w, g, dy, nullptr, twice);
  conv_backward(x, w, g, dy, nullptr, twice);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(twice[i] == doctest::Approx(2.0f * once[i]));
}

// ---------------------------------------------------------------------------
// Graph-level finite differences: L = sum(r * output) for a fixed random r.

namespace {

double projected(Graph& g, const Tensor& x, const Tensor& r) {
  const Tensor y = g.forward(x, Mode::Train);
  g.clear();
  return dot(y.data, r.data);
}

void finite_difference_check(Graph& g, const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  g.initialize(seed);
  const Tensor y0 = g.forward(x, Mode::Train);
  const Tensor r = random_tensor(y0.n, y0.c, y0.spatial, rng);
  g.zero_grad();
  g.backward(r);
  g.clear();
  const double mid = projected(g, x, r);
  int checked = 0, kinked = 0;
  for (Parameter* p : g.parameters()) {
    std::uniform_int_distribution<std::size_t> pick(0, p->size() - 1);
    for (int t = 0; t < 6; ++t) {
      const std::size_t i = pick(rng);
      const float keep = p->value[i];
      const float h = 1e-2f;
      p->value[i] = keep + h;
      const double up = projected(g, x, r);
      p->value[i] = keep - h;
      const double down = projected(g, x, r);
      p->value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double scale = std::max(1.0, std::abs(fd));
      // A ReLU or pooling switch inside [-h, h] makes the one-sided slopes disagree.
      if (std::abs((up - mid) / h - (mid - down) / h) > 0.1 * scale) {
        ++kinked;
        continue;
      }
      ++checked;
      INFO(p->name << "[" << i << "]");
      CHECK(p->grad[i] == doctest::Approx(fd).epsilon(2e-2).scale(scale));
    }
  }
  CHECK(checked >= 3 * kinked);
}

}  // namespace

TEST_CASE("graph gradients match finite differences") {
  std::mt19937_64 rng(7);
  const ConvGeometry same{{1, 3, 3}, {1, 1, 1}, {0, 1, 1}};
  const ConvGeometry valid{{1, 3, 3}, {1, 1, 1}, {0, 0, 0}};

  SUBCASE("conv -> conv") {
    Graph g;
    int n = g.input(2);
    n = g.conv(n, 3, same, "a");
    n = g.conv(n, 2, {{1, 3, 3}, {1, 2, 2}, {0, 1, 1}}, "b");
    g.set_output(n);
    finite_difference_check(g, random_tensor(2, 2, {1, 8, 8}, rng), 11);
  }
  SUBCASE("conv -> batch norm") {
    Graph g;
    int n = g.input(1);
    n = g.conv(n, 3, same, "a");
    n = g.batch_norm(n, "bn", 0.99f, 1e-5f);
    n = g.conv(n, 2, valid, "b");
    g.set_output(n);
    finite_difference_check(g, random_tensor(3, 1, {1, 7, 7}, rng), 12);
  }
  SUBCASE("conv -> relu -> max pool -> transposed conv") {
    Graph g;
    int n = g.input(1);
    n = g.conv(n, 3, same, "a");
    n = g.relu(n);
    n = g.max_pool(n, {1, 2, 2});
    n = g.conv_transpose(n, 2, {{1, 2, 2}, {1, 2, 2}, {0, 0, 0}}, "up");
    g.set_output(n);
    finite_difference_check(g, random_tensor(2, 1, {1, 8, 8}, rng), 13);
  }
  SUBCASE("volumetric pooling and upsampling") {
    Graph g;
    int n = g.input(1);
    n = g.conv(n, 2, {{3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, "a");
    n = g.max_pool(n, {2, 2, 2});
    n = g.conv_transpose(n, 2, {{2, 2, 2}, {2, 2, 2}, {0, 0, 0}}, "up");
    g.set_output(n);
    finite_difference_check(g, random_tensor(1, 1, {4, 6, 6}, rng), 14);
  }
  SUBCASE("crop-concat and add skips") {
    Graph g;
    const int in = g.input(1);
    const int a = g.conv(in, 2, valid, "a");
    const int b = g.conv(in, 3, {{1, 1, 1}, {1, 1, 1}, {0, 0, 0}}, "b");
    const int cat = g.crop_concat(b, a);
    const int c = g.conv(cat, 2, same, "c");
    const int d = g.conv(a, 2, same, "d");
    g.set_output(g.add(c, d));
    finite_difference_check(g, random_tensor(2, 1, {1, 9, 9}, rng), 15);
  }
  SUBCASE("upsampling with overlapping kernels") {
    Graph g;
    int n = g.input(1);
    n = g.conv(n, 2, same, "a");
    n = g.conv_transpose(n, 2, {{1, 4, 4}, {1, 2, 2}, {0, 1, 1}}, "up");
    g.set_output(n);
    finite_difference_check(g, random_tensor(1, 1, {1, 5, 5}, rng), 16);
  }
}

TEST_CASE("batch norm uses batch statistics in training and running statistics in inference") {
  Graph g;
  const int in = g.input(1);
  g.set_output(g.batch_norm(in, "bn", 0.9f, 1e-5f));
  g.initialize(1);
  Tensor x(4, 1, {1, 1, 1});
  x.data = {1.0f, 2.0f, 3.0f, 4.0f};
  const Tensor y = g.forward(x, Mode::Train);
  g.clear();
  double mean = 0.0;
  for (float v : y.data) mean += v;
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-6).scale(1.0));
  // running mean 0.9*0 + 0.1*2.5, running variance 0.9*1 + 0.1*(5/3)
  const auto buffers = g.buffers();
  REQUIRE(buffers.size() == 2);
  CHECK(buffers[0]->value[0] == doctest::Approx(0.25f));
  CHECK(buffers[1]->value[0] == doctest::Approx(0.9f + 0.1f * 5.0f / 3.0f));
  const Tensor yi = g.forward(x, Mode::Infer);
  CHECK(yi.data[0] == doctest::Approx((1.0f - 0.25f) / std::sqrt(buffers[1]->value[0] + 1e-5f)));
}

TEST_CASE("initialization is deterministic and He-scaled") {
  auto make = [] {
    Graph g;
    g.set_output(g.conv(g.input(64), 64, {{1, 3, 3}, {1, 1, 1}, {0, 1, 1}}, "c"));
    return g;
  };
  Graph a = make(), b = make();
  a.initialize(7);
  b.initialize(7);
  CHECK(a.parameters()[0]->value == b.parameters()[0]->value);
  const auto& w = a.parameters()[0]->value;
  double sq = 0.0;
  for (float v : w) sq += v * v;
  const double var = sq / static_cast<double>(w.size());
  CHECK(var == doctest::Approx(2.0 / (3 * 3 * 64)).epsilon(0.2));
}
