#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cmrseg/tensor.hpp"

namespace cmrseg {

struct ConvGeometry {
  Dims3 kernel{1, 1, 1};
  Dims3 stride{1, 1, 1};
  Dims3 pad{0, 0, 0};
};

/// Output extent of a convolution; throws when the input is too small.
Dims3 conv_output_dims(const Dims3& in, const ConvGeometry& g);
/// Output extent of the transposed convolution with the same geometry.
Dims3 conv_transpose_output_dims(const Dims3& in, const ConvGeometry& g);

// Kernel-level routines. Weight layouts follow the usual conventions:
// convolution (out, in, kd, kh, kw); transposed convolution (in, out, kd, kh, kw).

void conv_forward(const Tensor& x, const std::vector<float>& w, int out_channels, const ConvGeometry& g, Tensor& y);
/// Accumulates into dw and, when non-null, into dx.
void conv_backward(const Tensor& x, const std::vector<float>& w, const ConvGeometry& g, const Tensor& dy,
                   Tensor* dx, std::vector<float>& dw);

void conv_transpose_forward(const Tensor& x, const std::vector<float>& w, int out_channels, const ConvGeometry& g,
                            Tensor& y);
void conv_transpose_backward(const Tensor& x, const std::vector<float>& w, const ConvGeometry& g, const Tensor& dy,
                             Tensor* dx, std::vector<float>& dw);

/// Trainable array with its gradient accumulator.
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;

  std::size_t size() const { return value.size(); }
};

/// Non-trainable state (batch-norm running statistics).
struct Buffer {
  std::string name;
  std::vector<float> value;
};

enum class Mode { Train, Infer };

class Layer {
 public:
  virtual ~Layer() = default;
  virtual const char* kind() const = 0;
  virtual Tensor forward(const std::vector<const Tensor*>& in, Mode mode) = 0;
  /// dinputs entries may be null (no gradient wanted) and are accumulated into.
  virtual void backward(const std::vector<const Tensor*>& in, const Tensor& out, const Tensor& dout,
                        const std::vector<Tensor*>& dinputs) = 0;
  virtual Dims3 output_dims(const std::vector<Dims3>& in) const = 0;
  virtual void initialize(std::mt19937_64&) {}
  virtual bool elementwise() const { return false; }
  /// In-place variant for inference; only called when elementwise() is true.
  virtual void apply_inplace(Tensor&) {}
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::vector<Buffer*> buffers() { return {}; }
  /// Releases per-forward caches.
  virtual void clear_cache() {}
};

/// Directed acyclic layer graph with one input and one output. Nodes are
/// appended in topological order; backward walks them in reverse.
class Graph {
 public:
  int input(int channels);
  int conv(int in, int out_channels, const ConvGeometry& g, const std::string& name);
  int conv_transpose(int in, int out_channels, const ConvGeometry& g, const std::string& name);
  int batch_norm(int in, const std::string& name, float momentum, float epsilon);
  int relu(int in);
  int max_pool(int in, const Dims3& window);
  /// Center-crops `skip` to the spatial size of `up`, then concatenates
  /// channels as [skip, up].
  int crop_concat(int skip, int up);
  int add(int a, int b);
  void set_output(int node) { output_ = node; }

  int channels(int node) const { return nodes_.at(static_cast<std::size_t>(node)).channels; }
  std::size_t size() const { return nodes_.size(); }

  /// He-normal initialization of every convolution weight (variance 2/fan_in).
  void initialize(std::uint64_t seed);

  /// Train mode keeps every activation for backward; infer mode frees
  /// activations as soon as their last consumer has run.
  Tensor forward(const Tensor& x, Mode mode);
  /// Requires a preceding train-mode forward. Gradients accumulate.
  void backward(const Tensor& d_output);
  void zero_grad();
  void clear();

  std::vector<Parameter*> parameters();
  std::vector<Buffer*> buffers();

  /// Per-node spatial extents for an input of the given size.
  std::vector<Dims3> trace_dims(const Dims3& input) const;

 private:
  struct Node {
    std::unique_ptr<Layer> layer;  // null for the input node
    std::vector<int> inputs;
    int channels = 0;
    std::string name;
  };
  int push(std::unique_ptr<Layer> layer, std::vector<int> inputs, int channels, std::string name);

  std::vector<Node> nodes_;
  std::vector<Tensor> activations_;
  int output_ = -1;
};

}  // namespace cmrseg
