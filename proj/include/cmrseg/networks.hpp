#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmrseg/layers.hpp"
#include "cmrseg/volume.hpp"

namespace cmrseg {

enum class Architecture { FCN8, UNet2D, UNet2DMod, UNet3DMod };

const char* architecture_name(Architecture a);  // "FCN8", "UNET2D", "UNET2D_MOD", "UNET3D_MOD"
Architecture parse_architecture(const std::string& name);
bool is_3d(Architecture a);

/// Architecture selection with its fixed canvas contract. Shapes are (x, y, z);
/// 2D architectures use z = 1 and run slice by slice.
struct NetworkSpec {
  Architecture architecture = Architecture::UNet2DMod;
  int num_classes = kNumClasses;
  Shape3 input_shape{396, 396, 1};
  Shape3 output_shape{212, 212, 1};
  int through_plane_pooling_steps = 0;
  /// Width of the first stage; deeper stages double it. 64 for the 2D
  /// networks, 32 for the 3D network.
  int base_channels = 64;
  float bn_momentum = 0.99f;
  float bn_epsilon = 1e-5f;

  bool operator==(const NetworkSpec&) const = default;
};

/// The canonical spec for an architecture. base_channels <= 0 selects the
/// architecture's default width.
NetworkSpec default_spec(Architecture a, int num_classes = kNumClasses, int base_channels = 0);

/// Throws std::invalid_argument for (architecture, shape) pairings outside
/// the supported contracts.
void validate(const NetworkSpec& spec);

/// Tensor extents (d, h, w) of a spec shape (x, y, z).
inline Dims3 to_dims(const Shape3& s) { return {s[2], s[1], s[0]}; }

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

/// Parameters plus running statistics, detached from the graph.
struct ModelState {
  NetworkSpec spec;
  std::vector<NamedArray> parameters;
  std::vector<NamedArray> buffers;
};

class SegmentationModel {
 public:
  /// Builds the graph with all weights zero; use build() for initialized models.
  explicit SegmentationModel(const NetworkSpec& spec);

  const NetworkSpec& spec() const { return spec_; }
  Dims3 input_dims() const { return to_dims(spec_.input_shape); }
  Dims3 output_dims() const { return to_dims(spec_.output_shape); }

  /// batch: (n, 1, input dims) -> scores (n, K, output dims).
  Tensor forward(const Tensor& batch, Mode mode);
  void backward(const Tensor& d_scores);
  void zero_grad() { graph_.zero_grad(); }
  void release_activations() { graph_.clear(); }

  std::vector<Parameter*> parameters() { return graph_.parameters(); }
  std::vector<Buffer*> buffers() { return graph_.buffers(); }
  std::size_t parameter_count();

  ModelState state();
  void load_state(const ModelState& state);

  Graph& graph() { return graph_; }

 private:
  NetworkSpec spec_;
  Graph graph_;
};

/// Builds and He-initializes a model; identical seeds give identical weights.
SegmentationModel build(const NetworkSpec& spec, std::uint64_t seed);

/// Channel-wise softmax of (n, K, ...) scores with max subtraction.
Tensor softmax(const Tensor& scores);

// Array container shared by model and training checkpoints:
//   "CMRSEG01" | u64 header length | JSON header | float32 little-endian data
// The JSON header holds {"meta": <caller text as JSON>, "arrays": [{name, shape, offset, count}]}.
void write_array_file(const std::filesystem::path& path, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_array_file(const std::filesystem::path& path, std::string& meta_json);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& json);

void save_model(const std::filesystem::path& path, SegmentationModel& model);
SegmentationModel load_model(const std::filesystem::path& path);

}  // namespace cmrseg
