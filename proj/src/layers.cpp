#include "cmrseg/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cmrseg {
namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedRM = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStridedRM = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

// Upper bound on the im2col scratch buffer, in floats.
constexpr std::size_t kColBudget = std::size_t{1} << 23;

std::size_t kernel_volume(const ConvGeometry& g) { return product(g.kernel); }

// `img` is the large grid (conv input / transposed-conv output), `out` the
// grid the kernel is swept over. Columns cover whole output lines (d, h).
struct ColGeometry {
  int channels;
  Dims3 img;
  Dims3 out;
  ConvGeometry g;

  std::size_t rows() const { return static_cast<std::size_t>(channels) * kernel_volume(g); }
  int lines() const { return out[0] * out[1]; }
  int lines_per_chunk() const {
    const std::size_t per_line = rows() * static_cast<std::size_t>(out[2]);
    return static_cast<int>(std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(per_line, 1), 1,
                                                    static_cast<std::size_t>(lines())));
  }
};

template <bool Accumulate>
void col_transfer(float* img, float* col, const ColGeometry& G, int l0, int l1) {
  const int D = G.img[0], H = G.img[1], W = G.img[2];
  const int Ho = G.out[1], Wo = G.out[2];
  const auto& k = G.g.kernel;
  const auto& s = G.g.stride;
  const auto& p = G.g.pad;
  const std::size_t ncols = static_cast<std::size_t>(l1 - l0) * Wo;
  std::size_t row = 0;
  for (int c = 0; c < G.channels; ++c) {
    for (int kd = 0; kd < k[0]; ++kd) {
      for (int kh = 0; kh < k[1]; ++kh) {
        for (int kw = 0; kw < k[2]; ++kw, ++row) {
          float* r = col + row * ncols;
          for (int l = l0; l < l1; ++l) {
            const int od = l / Ho, oh = l % Ho;
            const int id = od * s[0] - p[0] + kd;
            const int ih = oh * s[1] - p[1] + kh;
            float* dst = r + static_cast<std::size_t>(l - l0) * Wo;
            if (id < 0 || id >= D || ih < 0 || ih >= H) {
              if constexpr (!Accumulate) std::fill_n(dst, Wo, 0.0f);
              continue;
            }
            float* src = img + ((static_cast<std::size_t>(c) * D + id) * H + ih) * W;
            if (s[2] == 1) {
              const int iw0 = kw - p[2];
              const int lo = std::clamp(-iw0, 0, Wo);
              const int hi = std::clamp(W - iw0, lo, Wo);
              if constexpr (Accumulate) {
                for (int ow = lo; ow < hi; ++ow) src[ow + iw0] += dst[ow];
              } else {
                std::fill(dst, dst + lo, 0.0f);
                if (hi > lo) std::copy(src + lo + iw0, src + hi + iw0, dst + lo);
                std::fill(dst + hi, dst + Wo, 0.0f);
              }
            } else {
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * s[2] - p[2] + kw;
                const bool inside = iw >= 0 && iw < W;
                if constexpr (Accumulate) {
                  if (inside) src[iw] += dst[ow];
                } else {
                  dst[ow] = inside ? src[iw] : 0.0f;
                }
              }
            }
          }
        }
      }
    }
  }
}

void im2col(const float* img, float* col, const ColGeometry& G, int l0, int l1) {
  col_transfer<false>(const_cast<float*>(img), col, G, l0, l1);
}

void col2im(float* img, const float* col, const ColGeometry& G, int l0, int l1) {
  col_transfer<true>(img, const_cast<float*>(col), G, l0, l1);
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == Dims3{1, 1, 1} && g.stride == Dims3{1, 1, 1} && g.pad == Dims3{0, 0, 0};
}

}  // namespace

Dims3 conv_output_dims(const Dims3& in, const ConvGeometry& g) {
  Dims3 out;
  for (int a = 0; a < 3; ++a) {
    const int span = in[a] + 2 * g.pad[a] - g.kernel[a];
    if (span < 0) {
      throw std::invalid_argument("input extent " + to_string(in, 'x') + " too small for kernel " +
                                  to_string(g.kernel, 'x'));
    }
    out[a] = span / g.stride[a] + 1;
  }
  return out;
}

Dims3 conv_transpose_output_dims(const Dims3& in, const ConvGeometry& g) {
  Dims3 out;
  for (int a = 0; a < 3; ++a) {
    out[a] = (in[a] - 1) * g.stride[a] + g.kernel[a] - 2 * g.pad[a];
    if (out[a] < 1) throw std::invalid_argument("transposed convolution output would be empty");
  }
  return out;
}

void conv_forward(const Tensor& x, const std::vector<float>& w, int out_channels, const ConvGeometry& g, Tensor& y) {
  const Dims3 od = conv_output_dims(x.spatial, g);
  const ColGeometry G{x.c, x.spatial, od, g};
  if (w.size() != static_cast<std::size_t>(out_channels) * G.rows())
    throw std::invalid_argument("convolution weight size mismatch");
  y = Tensor(x.n, out_channels, od);
  const auto R = static_cast<Eigen::Index>(G.rows());
  const auto P = static_cast<Eigen::Index>(product(od));
  CMapRM wm(w.data(), out_channels, R);
  if (is_pointwise(g)) {
    for (int i = 0; i < x.n; ++i) {
      MapRM(y.sample(i), out_channels, P).noalias() = wm * CMapRM(x.sample(i), x.c, P);
    }
    return;
  }
  const int chunk = G.lines_per_chunk();
  std::vector<float> col(G.rows() * static_cast<std::size_t>(chunk) * od[2]);
  for (int i = 0; i < x.n; ++i) {
    for (int l0 = 0; l0 < G.lines(); l0 += chunk) {
      const int l1 = std::min(G.lines(), l0 + chunk);
      const auto cols = static_cast<Eigen::Index>(l1 - l0) * od[2];
      im2col(x.sample(i), col.data(), G, l0, l1);
      StridedRM ym(y.sample(i) + static_cast<std::size_t>(l0) * od[2], out_channels, cols, Eigen::OuterStride<>(P));
      ym.noalias() = wm * CMapRM(col.data(), R, cols);
    }
  }
}

void conv_backward(const Tensor& x, const std::vector<float>& w, const ConvGeometry& g, const Tensor& dy,
                   Tensor* dx, std::vector<float>& dw) {
  const Dims3 od = conv_output_dims(x.spatial, g);
  if (dy.spatial != od || dy.n != x.n) throw std::invalid_argument("conv_backward: gradient shape mismatch");
  const int co = dy.c;
  const ColGeometry G{x.c, x.spatial, od, g};
  const auto R = static_cast<Eigen::Index>(G.rows());
  const auto P = static_cast<Eigen::Index>(product(od));
  CMapRM wm(w.data(), co, R);
  MapRM dwm(dw.data(), co, R);
  if (is_pointwise(g)) {
    for (int i = 0; i < x.n; ++i) {
      CMapRM dym(dy.sample(i), co, P);
      dwm.noalias() += dym * CMapRM(x.sample(i), x.c, P).transpose();
      if (dx) MapRM(dx->sample(i), x.c, P).noalias() += wm.transpose() * dym;
    }
    return;
  }
  const int chunk = G.lines_per_chunk();
  std::vector<float> col(G.rows() * static_cast<std::size_t>(chunk) * od[2]);
  for (int i = 0; i < x.n; ++i) {
    for (int l0 = 0; l0 < G.lines(); l0 += chunk) {
      const int l1 = std::min(G.lines(), l0 + chunk);
      const auto cols = static_cast<Eigen::Index>(l1 - l0) * od[2];
      CStridedRM dym(dy.sample(i) + static_cast<std::size_t>(l0) * od[2], co, cols, Eigen::OuterStride<>(P));
      im2col(x.sample(i), col.data(), G, l0, l1);
      MapRM colm(col.data(), R, cols);
      dwm.noalias() += dym * colm.transpose();
      if (dx) {
        colm.noalias() = wm.transpose() * dym;
        col2im(dx->sample(i), col.data(), G, l0, l1);
      }
    }
  }
}

void conv_transpose_forward(const Tensor& x, const std::vector<float>& w, int out_channels, const ConvGeometry& g,
                            Tensor& y) {
  const Dims3 od = conv_transpose_output_dims(x.spatial, g);
  const ColGeometry G{out_channels, od, x.spatial, g};
  if (w.size() != static_cast<std::size_t>(x.c) * G.rows())
    throw std::invalid_argument("transposed convolution weight size mismatch");
  y = Tensor(x.n, out_channels, od);
  const auto R = static_cast<Eigen::Index>(G.rows());
  const auto Pin = static_cast<Eigen::Index>(x.plane());
  CMapRM wm(w.data(), x.c, R);
  const int chunk = G.lines_per_chunk();
  std::vector<float> col(G.rows() * static_cast<std::size_t>(chunk) * x.spatial[2]);
  for (int i = 0; i < x.n; ++i) {
    for (int l0 = 0; l0 < G.lines(); l0 += chunk) {
      const int l1 = std::min(G.lines(), l0 + chunk);
      const auto cols = static_cast<Eigen::Index>(l1 - l0) * x.spatial[2];
      CStridedRM xm(x.sample(i) + static_cast<std::size_t>(l0) * x.spatial[2], x.c, cols, Eigen::OuterStride<>(Pin));
      MapRM(col.data(), R, cols).noalias() = wm.transpose() * xm;
      col2im(y.sample(i), col.data(), G, l0, l1);
    }
  }
}

void conv_transpose_backward(const Tensor& x, const std::vector<float>& w, const ConvGeometry& g, const Tensor& dy,
                             Tensor* dx, std::vector<float>& dw) {
  const Dims3 od = conv_transpose_output_dims(x.spatial, g);
  if (dy.spatial != od || dy.n != x.n) throw std::invalid_argument("conv_transpose_backward: gradient shape mismatch");
  const ColGeometry G{dy.c, od, x.spatial, g};
  const auto R = static_cast<Eigen::Index>(G.rows());
  const auto Pin = static_cast<Eigen::Index>(x.plane());
  CMapRM wm(w.data(), x.c, R);
  MapRM dwm(dw.data(), x.c, R);
  const int chunk = G.lines_per_chunk();
  std::vector<float> col(G.rows() * static_cast<std::size_t>(chunk) * x.spatial[2]);
  for (int i = 0; i < x.n; ++i) {
    for (int l0 = 0; l0 < G.lines(); l0 += chunk) {
      const int l1 = std::min(G.lines(), l0 + chunk);
      const auto cols = static_cast<Eigen::Index>(l1 - l0) * x.spatial[2];
      im2col(dy.sample(i), col.data(), G, l0, l1);
      CMapRM colm(col.data(), R, cols);
      CStridedRM xm(x.sample(i) + static_cast<std::size_t>(l0) * x.spatial[2], x.c, cols, Eigen::OuterStride<>(Pin));
      dwm.noalias() += xm * colm.transpose();
      if (dx) {
        StridedRM dxm(dx->sample(i) + static_cast<std::size_t>(l0) * x.spatial[2], x.c, cols,
                      Eigen::OuterStride<>(Pin));
        dxm.noalias() += wm * colm;
      }
    }
  }
}

namespace {

Parameter make_parameter(std::string name, std::vector<int> shape, float fill) {
  Parameter p;
  p.name = std::move(name);
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  p.shape = std::move(shape);
  p.value.assign(n, fill);
  p.grad.assign(n, 0.0f);
  return p;
}

void he_normal(Parameter& p, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (float& v : p.value) v = static_cast<float>(dist(rng));
}

class ConvLayer final : public Layer {
 public:
  ConvLayer(int in_channels, int out_channels, const ConvGeometry& g, const std::string& name)
      : out_channels_(out_channels), g_(g),
        weight_(make_parameter(name + ".weight", {out_channels, in_channels, g.kernel[0], g.kernel[1], g.kernel[2]},
                               0.0f)),
        fan_in_(static_cast<double>(in_channels) * static_cast<double>(product(g.kernel))) {}

  const char* kind() const override { return "conv"; }
  Tensor forward(const std::vector<const Tensor*>& in, Mode) override {
    Tensor y;
    conv_forward(*in[0], weight_.value, out_channels_, g_, y);
    return y;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    conv_backward(*in[0], weight_.value, g_, dout, din[0], weight_.grad);
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override { return conv_output_dims(in[0], g_); }
  void initialize(std::mt19937_64& rng) override { he_normal(weight_, fan_in_, rng); }
  std::vector<Parameter*> parameters() override { return {&weight_}; }

 private:
  int out_channels_;
  ConvGeometry g_;
  Parameter weight_;
  double fan_in_;
};

class ConvTransposeLayer final : public Layer {
 public:
  ConvTransposeLayer(int in_channels, int out_channels, const ConvGeometry& g, const std::string& name)
      : out_channels_(out_channels), g_(g),
        weight_(make_parameter(name + ".weight", {in_channels, out_channels, g.kernel[0], g.kernel[1], g.kernel[2]},
                               0.0f)) {
    // Each output voxel receives in_channels * kernel / stride contributions.
    fan_in_ = static_cast<double>(in_channels) * static_cast<double>(product(g.kernel)) /
              static_cast<double>(product(g.stride));
  }

  const char* kind() const override { return "conv_transpose"; }
  Tensor forward(const std::vector<const Tensor*>& in, Mode) override {
    Tensor y;
    conv_transpose_forward(*in[0], weight_.value, out_channels_, g_, y);
    return y;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    conv_transpose_backward(*in[0], weight_.value, g_, dout, din[0], weight_.grad);
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override { return conv_transpose_output_dims(in[0], g_); }
  void initialize(std::mt19937_64& rng) override { he_normal(weight_, fan_in_, rng); }
  std::vector<Parameter*> parameters() override { return {&weight_}; }

 private:
  int out_channels_;
  ConvGeometry g_;
  Parameter weight_;
  double fan_in_ = 1.0;
};

class BatchNormLayer final : public Layer {
 public:
  BatchNormLayer(int channels, const std::string& name, float momentum, float epsilon)
      : channels_(channels), momentum_(momentum), epsilon_(epsilon),
        gamma_(make_parameter(name + ".gamma", {channels}, 1.0f)),
        beta_(make_parameter(name + ".beta", {channels}, 0.0f)),
        running_mean_{name + ".running_mean", std::vector<float>(static_cast<std::size_t>(channels), 0.0f)},
        running_var_{name + ".running_var", std::vector<float>(static_cast<std::size_t>(channels), 1.0f)} {}

  const char* kind() const override { return "batch_norm"; }

  Tensor forward(const std::vector<const Tensor*>& in, Mode mode) override {
    const Tensor& x = *in[0];
    if (mode == Mode::Infer) {
      Tensor y = x;
      apply_inplace(y);
      return y;
    }
    const std::size_t plane = x.plane();
    const double m = static_cast<double>(plane) * x.n;
    xhat_ = Tensor(x.n, x.c, x.spatial);
    inv_std_.assign(static_cast<std::size_t>(x.c), 0.0);
    Tensor y(x.n, x.c, x.spatial);
    for (int c = 0; c < x.c; ++c) {
      double sum = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const float* p = x.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) sum += p[j];
      }
      const double mean = sum / m;
      double sq = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const float* p = x.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
      }
      const double var = sq / m;
      const double inv = 1.0 / std::sqrt(var + epsilon_);
      inv_std_[static_cast<std::size_t>(c)] = inv;
      const float g = gamma_.value[static_cast<std::size_t>(c)];
      const float b = beta_.value[static_cast<std::size_t>(c)];
      for (int i = 0; i < x.n; ++i) {
        const float* p = x.channel(i, c);
        float* h = xhat_.channel(i, c);
        float* o = y.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          h[j] = static_cast<float>((p[j] - mean) * inv);
          o[j] = g * h[j] + b;
        }
      }
      const double unbiased = m > 1.0 ? sq / (m - 1.0) : var;
      auto& rm = running_mean_.value[static_cast<std::size_t>(c)];
      auto& rv = running_var_.value[static_cast<std::size_t>(c)];
      rm = static_cast<float>(momentum_ * rm + (1.0 - momentum_) * mean);
      rv = static_cast<float>(momentum_ * rv + (1.0 - momentum_) * unbiased);
    }
    return y;
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    const Tensor& x = *in[0];
    const std::size_t plane = x.plane();
    const double m = static_cast<double>(plane) * x.n;
    for (int c = 0; c < x.c; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const float* d = dout.channel(i, c);
        const float* h = xhat_.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          sum_dy += d[j];
          sum_dy_xhat += static_cast<double>(d[j]) * h[j];
        }
      }
      gamma_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
      beta_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
      if (!din[0]) continue;
      const double g = gamma_.value[static_cast<std::size_t>(c)];
      const double k = g * inv_std_[static_cast<std::size_t>(c)];
      const double mean_dy = sum_dy / m;
      const double mean_dy_xhat = sum_dy_xhat / m;
      for (int i = 0; i < x.n; ++i) {
        const float* d = dout.channel(i, c);
        const float* h = xhat_.channel(i, c);
        float* dx = din[0]->channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          dx[j] += static_cast<float>(k * (d[j] - mean_dy - h[j] * mean_dy_xhat));
        }
      }
    }
  }

  Dims3 output_dims(const std::vector<Dims3>& in) const override { return in[0]; }
  void initialize(std::mt19937_64&) override {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
    std::fill(beta_.value.begin(), beta_.value.end(), 0.0f);
    std::fill(running_mean_.value.begin(), running_mean_.value.end(), 0.0f);
    std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0f);
  }
  bool elementwise() const override { return true; }
  void apply_inplace(Tensor& t) override {
    const std::size_t plane = t.plane();
    for (int c = 0; c < t.c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_.value[ci]) + epsilon_);
      const auto scale = static_cast<float>(gamma_.value[ci] * inv);
      const auto shift = static_cast<float>(beta_.value[ci] - running_mean_.value[ci] * gamma_.value[ci] * inv);
      for (int i = 0; i < t.n; ++i) {
        float* p = t.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) p[j] = p[j] * scale + shift;
      }
    }
  }
  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<Buffer*> buffers() override { return {&running_mean_, &running_var_}; }
  void clear_cache() override {
    xhat_ = Tensor();
    inv_std_.clear();
  }

 private:
  int channels_;
  double momentum_;
  double epsilon_;
  Parameter gamma_, beta_;
  Buffer running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReluLayer final : public Layer {
 public:
  const char* kind() const override { return "relu"; }
  Tensor forward(const std::vector<const Tensor*>& in, Mode) override {
    Tensor y = *in[0];
    apply_inplace(y);
    return y;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor& out, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    float* dx = din[0]->data.data();
    for (std::size_t j = 0; j < out.numel(); ++j) {
      if (out.data[j] > 0.0f) dx[j] += dout.data[j];
    }
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override { return in[0]; }
  bool elementwise() const override { return true; }
  void apply_inplace(Tensor& t) override {
    for (float& v : t.data) v = v > 0.0f ? v : 0.0f;
  }
};

class MaxPoolLayer final : public Layer {
 public:
  explicit MaxPoolLayer(const Dims3& window) : window_(window) {}
  const char* kind() const override { return "max_pool"; }

  Tensor forward(const std::vector<const Tensor*>& in, Mode mode) override {
    const Tensor& x = *in[0];
    const Dims3 od = output_dims({x.spatial});
    Tensor y(x.n, x.c, od);
    const bool keep = mode == Mode::Train;
    if (keep) argmax_.assign(y.numel(), 0);
    const int H = x.spatial[1], W = x.spatial[2];
    std::size_t o = 0;
    for (int i = 0; i < x.n; ++i) {
      for (int c = 0; c < x.c; ++c) {
        const float* src = x.channel(i, c);
        for (int d = 0; d < od[0]; ++d) {
          for (int h = 0; h < od[1]; ++h) {
            for (int w = 0; w < od[2]; ++w, ++o) {
              float best = -INFINITY;
              std::uint32_t best_idx = 0;
              for (int a = 0; a < window_[0]; ++a) {
                for (int b = 0; b < window_[1]; ++b) {
                  const std::size_t base =
                      (static_cast<std::size_t>(d * window_[0] + a) * H + (h * window_[1] + b)) * W +
                      static_cast<std::size_t>(w) * window_[2];
                  for (int e = 0; e < window_[2]; ++e) {
                    if (src[base + e] > best) {
                      best = src[base + e];
                      best_idx = static_cast<std::uint32_t>(base + e);
                    }
                  }
                }
              }
              y.data[o] = best;
              if (keep) argmax_[o] = best_idx;
            }
          }
        }
      }
    }
    return y;
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor& out, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    if (!din[0]) return;
    const std::size_t plane_out = out.plane();
    const std::size_t plane_in = in[0]->plane();
    for (std::size_t o = 0; o < dout.numel(); ++o) {
      const std::size_t map = o / plane_out;
      din[0]->data[map * plane_in + argmax_[o]] += dout.data[o];
    }
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override {
    Dims3 out;
    for (int a = 0; a < 3; ++a) {
      out[a] = in[0][a] / window_[a];
      if (out[a] < 1) throw std::invalid_argument("max pooling window exceeds input extent");
    }
    return out;
  }
  void clear_cache() override { argmax_.clear(); }

 private:
  Dims3 window_;
  std::vector<std::uint32_t> argmax_;
};

Dims3 centered_start(const Dims3& big, const Dims3& small) {
  Dims3 s;
  for (int a = 0; a < 3; ++a) {
    if (small[a] > big[a]) throw std::invalid_argument("skip connection smaller than upsampled path");
    s[a] = (big[a] - small[a]) / 2;
  }
  return s;
}

// Copies (or accumulates back) a centered window of `big` to/from `small`.
template <bool Back>
void window_copy(float* big, const Dims3& bd, float* small, const Dims3& sd) {
  const Dims3 s = centered_start(bd, sd);
  for (int d = 0; d < sd[0]; ++d) {
    for (int h = 0; h < sd[1]; ++h) {
      float* b = big + (static_cast<std::size_t>(d + s[0]) * bd[1] + h + s[1]) * bd[2] + s[2];
      float* m = small + (static_cast<std::size_t>(d) * sd[1] + h) * sd[2];
      if constexpr (Back) {
        for (int w = 0; w < sd[2]; ++w) b[w] += m[w];
      } else {
        std::copy_n(b, sd[2], m);
      }
    }
  }
}

class CropConcatLayer final : public Layer {
 public:
  const char* kind() const override { return "crop_concat"; }
  Tensor forward(const std::vector<const Tensor*>& in, Mode) override {
    const Tensor& skip = *in[0];
    const Tensor& up = *in[1];
    if (skip.n != up.n) throw std::invalid_argument("crop_concat: batch mismatch");
    Tensor y(up.n, skip.c + up.c, up.spatial);
    for (int i = 0; i < up.n; ++i) {
      for (int c = 0; c < skip.c; ++c) {
        window_copy<false>(const_cast<float*>(skip.channel(i, c)), skip.spatial, y.channel(i, c), up.spatial);
      }
      std::copy_n(up.sample(i), static_cast<std::size_t>(up.c) * up.plane(), y.channel(i, skip.c));
    }
    return y;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    const Tensor& skip = *in[0];
    const Tensor& up = *in[1];
    for (int i = 0; i < up.n; ++i) {
      if (din[0]) {
        for (int c = 0; c < skip.c; ++c) {
          window_copy<true>(din[0]->channel(i, c), skip.spatial, const_cast<float*>(dout.channel(i, c)), up.spatial);
        }
      }
      if (din[1]) {
        const float* src = dout.channel(i, skip.c);
        float* dst = din[1]->sample(i);
        for (std::size_t j = 0; j < static_cast<std::size_t>(up.c) * up.plane(); ++j) dst[j] += src[j];
      }
    }
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override {
    centered_start(in[0], in[1]);
    return in[1];
  }
};

class AddLayer final : public Layer {
 public:
  const char* kind() const override { return "add"; }
  Tensor forward(const std::vector<const Tensor*>& in, Mode) override {
    if (!in[0]->same_shape(*in[1]))
      throw std::invalid_argument("add: shape mismatch " + in[0]->shape_string() + " vs " + in[1]->shape_string());
    Tensor y = *in[0];
    for (std::size_t j = 0; j < y.numel(); ++j) y.data[j] += in[1]->data[j];
    return y;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) override {
    for (Tensor* d : din) {
      if (!d) continue;
      for (std::size_t j = 0; j < dout.numel(); ++j) d->data[j] += dout.data[j];
    }
  }
  Dims3 output_dims(const std::vector<Dims3>& in) const override {
    if (in[0] != in[1]) throw std::invalid_argument("add: spatial mismatch");
    return in[0];
  }
};

}  // namespace

int Graph::push(std::unique_ptr<Layer> layer, std::vector<int> inputs, int channels, std::string name) {
  for (int i : inputs) {
    if (i < 0 || static_cast<std::size_t>(i) >= nodes_.size()) throw std::invalid_argument("graph: bad input node");
  }
  nodes_.push_back(Node{std::move(layer), std::move(inputs), channels, std::move(name)});
  output_ = static_cast<int>(nodes_.size()) - 1;
  return output_;
}

int Graph::input(int channels) {
  if (!nodes_.empty()) throw std::logic_error("graph input must be the first node");
  return push(nullptr, {}, channels, "input");
}

int Graph::conv(int in, int out_channels, const ConvGeometry& g, const std::string& name) {
  return push(std::make_unique<ConvLayer>(channels(in), out_channels, g, name), {in}, out_channels, name);
}

int Graph::conv_transpose(int in, int out_channels, const ConvGeometry& g, const std::string& name) {
  return push(std::make_unique<ConvTransposeLayer>(channels(in), out_channels, g, name), {in}, out_channels, name);
}

int Graph::batch_norm(int in, const std::string& name, float momentum, float epsilon) {
  return push(std::make_unique<BatchNormLayer>(channels(in), name, momentum, epsilon), {in}, channels(in), name);
}

int Graph::relu(int in) { return push(std::make_unique<ReluLayer>(), {in}, channels(in), "relu"); }

int Graph::max_pool(int in, const Dims3& window) {
  return push(std::make_unique<MaxPoolLayer>(window), {in}, channels(in), "max_pool");
}

int Graph::crop_concat(int skip, int up) {
  return push(std::make_unique<CropConcatLayer>(), {skip, up}, channels(skip) + channels(up), "crop_concat");
}

int Graph::add(int a, int b) {
  if (channels(a) != channels(b)) throw std::invalid_argument("add: channel mismatch");
  return push(std::make_unique<AddLayer>(), {a, b}, channels(a), "add");
}

void Graph::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& n : nodes_) {
    if (n.layer) n.layer->initialize(rng);
  }
}

Tensor Graph::forward(const Tensor& x, Mode mode) {
  if (nodes_.empty() || output_ < 0) throw std::logic_error("graph has no nodes");
  if (x.c != nodes_[0].channels) {
    throw std::invalid_argument("graph expects " + std::to_string(nodes_[0].channels) + " input channels, got " +
                                std::to_string(x.c));
  }
  activations_.assign(nodes_.size(), Tensor());
  activations_[0] = x;

  std::vector<int> remaining(nodes_.size(), 0);
  for (const auto& n : nodes_) {
    for (int i : n.inputs) ++remaining[static_cast<std::size_t>(i)];
  }
  const bool infer = mode == Mode::Infer;
  for (std::size_t k = 1; k < nodes_.size(); ++k) {
    Node& node = nodes_[k];
    if (infer && node.layer->elementwise() && node.inputs.size() == 1 &&
        remaining[static_cast<std::size_t>(node.inputs[0])] == 1 && node.inputs[0] != output_) {
      const auto src = static_cast<std::size_t>(node.inputs[0]);
      activations_[k] = std::move(activations_[src]);
      activations_[src] = Tensor();
      node.layer->apply_inplace(activations_[k]);
      remaining[src] = 0;
      continue;
    }
    std::vector<const Tensor*> ins;
    for (int i : node.inputs) ins.push_back(&activations_[static_cast<std::size_t>(i)]);
    activations_[k] = node.layer->forward(ins, mode);
    if (infer) {
      for (int i : node.inputs) {
        const auto src = static_cast<std::size_t>(i);
        if (--remaining[src] == 0 && i != output_) activations_[src] = Tensor();
      }
    }
  }
  Tensor out = activations_[static_cast<std::size_t>(output_)];
  if (infer) activations_.clear();
  return out;
}

void Graph::backward(const Tensor& d_output) {
  if (activations_.size() != nodes_.size()) throw std::logic_error("backward requires a train-mode forward pass");
  const auto out_idx = static_cast<std::size_t>(output_);
  if (!d_output.same_shape(activations_[out_idx]))
    throw std::invalid_argument("output gradient shape " + d_output.shape_string() + " != output shape " +
                                activations_[out_idx].shape_string());
  std::vector<Tensor> grads(nodes_.size());
  grads[out_idx] = d_output;
  for (std::size_t k = out_idx; k >= 1; --k) {
    if (grads[k].empty()) continue;
    Node& node = nodes_[k];
    std::vector<const Tensor*> ins;
    std::vector<Tensor*> dins;
    for (int i : node.inputs) {
      const auto src = static_cast<std::size_t>(i);
      ins.push_back(&activations_[src]);
      if (src == 0) {
        dins.push_back(nullptr);
      } else {
        if (grads[src].empty()) {
          const Tensor& a = activations_[src];
          grads[src] = Tensor(a.n, a.c, a.spatial);
        }
        dins.push_back(&grads[src]);
      }
    }
    node.layer->backward(ins, activations_[k], grads[k], dins);
    grads[k] = Tensor();
  }
}

void Graph::zero_grad() {
  for (Parameter* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Graph::clear() {
  activations_.clear();
  for (auto& n : nodes_) {
    if (n.layer) n.layer->clear_cache();
  }
}

std::vector<Parameter*> Graph::parameters() {
  std::vector<Parameter*> out;
  for (auto& n : nodes_) {
    if (!n.layer) continue;
    for (Parameter* p : n.layer->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<Buffer*> Graph::buffers() {
  std::vector<Buffer*> out;
  for (auto& n : nodes_) {
    if (!n.layer) continue;
    for (Buffer* b : n.layer->buffers()) out.push_back(b);
  }
  return out;
}

std::vector<Dims3> Graph::trace_dims(const Dims3& input) const {
  std::vector<Dims3> dims(nodes_.size());
  if (nodes_.empty()) return dims;
  dims[0] = input;
  for (std::size_t k = 1; k < nodes_.size(); ++k) {
    std::vector<Dims3> ins;
    for (int i : nodes_[k].inputs) ins.push_back(dims[static_cast<std::size_t>(i)]);
    dims[k] = nodes_[k].layer->output_dims(ins);
  }
  return dims;
}

}  // namespace cmrseg
