#include "cmrseg/networks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cmrseg {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'M', 'R', 'S', 'E', 'G', '0', '1'};

ConvGeometry geometry(const Dims3& kernel, const Dims3& stride = {1, 1, 1}, const Dims3& pad = {0, 0, 0}) {
  return ConvGeometry{kernel, stride, pad};
}

struct Builder {
  Graph& g;
  const NetworkSpec& spec;

  int conv_bn(int in, int out, const ConvGeometry& geo, const std::string& name, bool relu) {
    int x = g.conv(in, out, geo, name);
    x = g.batch_norm(x, name + ".bn", spec.bn_momentum, spec.bn_epsilon);
    return relu ? g.relu(x) : x;
  }
  int up_bn(int in, int out, const ConvGeometry& geo, const std::string& name, bool relu) {
    int x = g.conv_transpose(in, out, geo, name);
    x = g.batch_norm(x, name + ".bn", spec.bn_momentum, spec.bn_epsilon);
    return relu ? g.relu(x) : x;
  }
};

// VGG-16 encoder with 'same' convolutions, FCN-8s score fusion from pool3
// and pool4, and x2, x2, x8 transposed-convolution upsampling.
void build_fcn8(Graph& g, const NetworkSpec& spec) {
  Builder b{g, spec};
  const int w = spec.base_channels;
  const int k = spec.num_classes;
  const auto c3 = geometry({1, 3, 3}, {1, 1, 1}, {0, 1, 1});
  const Dims3 pool{1, 2, 2};
  int x = g.input(1);
  const int widths[5] = {w, 2 * w, 4 * w, 8 * w, 8 * w};
  const int convs[5] = {2, 2, 3, 3, 3};
  int pool3 = -1, pool4 = -1;
  for (int stage = 0; stage < 5; ++stage) {
    for (int i = 0; i < convs[stage]; ++i) {
      x = b.conv_bn(x, widths[stage], c3, "conv" + std::to_string(stage + 1) + "_" + std::to_string(i + 1), true);
    }
    x = g.max_pool(x, pool);
    if (stage == 2) pool3 = x;
    if (stage == 3) pool4 = x;
  }
  x = b.conv_bn(x, 64 * w, geometry({1, 7, 7}, {1, 1, 1}, {0, 3, 3}), "fc6", true);
  x = b.conv_bn(x, 64 * w, geometry({1, 1, 1}), "fc7", true);
  int score = b.conv_bn(x, k, geometry({1, 1, 1}), "score_fr", false);
  const auto up2 = geometry({1, 4, 4}, {1, 2, 2}, {0, 1, 1});
  int up = b.up_bn(score, k, up2, "upscore2", false);
  int s4 = b.conv_bn(pool4, k, geometry({1, 1, 1}), "score_pool4", false);
  int fuse = g.add(up, s4);
  up = b.up_bn(fuse, k, up2, "upscore_pool4", false);
  int s3 = b.conv_bn(pool3, k, geometry({1, 1, 1}), "score_pool3", false);
  fuse = g.add(up, s3);
  int out = b.up_bn(fuse, k, geometry({1, 16, 16}, {1, 8, 8}, {0, 4, 4}), "upscore8", false);
  g.set_output(out);
}

// Five-level U-Net with valid 3x3 convolutions. The modified variant gives
// every transposed convolution num_classes output maps.
void build_unet2d(Graph& g, const NetworkSpec& spec, bool modified) {
  Builder b{g, spec};
  const int w = spec.base_channels;
  const int k = spec.num_classes;
  const auto c3 = geometry({1, 3, 3});
  int x = g.input(1);
  std::vector<int> skips;
  for (int level = 0; level < 5; ++level) {
    const int width = w << level;
    const std::string p = "conv" + std::to_string(level + 1) + "_";
    x = b.conv_bn(x, width, c3, p + "1", true);
    x = b.conv_bn(x, width, c3, p + "2", true);
    if (level < 4) {
      skips.push_back(x);
      x = g.max_pool(x, {1, 2, 2});
    }
  }
  for (int level = 3; level >= 0; --level) {
    const int width = w << level;
    const int id = 9 - level;  // conv6 .. conv9 mirror conv4 .. conv1
    x = b.up_bn(x, modified ? k : width, geometry({1, 2, 2}, {1, 2, 2}), "upconv" + std::to_string(level + 1), true);
    x = g.crop_concat(skips[static_cast<std::size_t>(level)], x);
    x = b.conv_bn(x, width, c3, "conv" + std::to_string(id) + "_1", true);
    x = b.conv_bn(x, width, c3, "conv" + std::to_string(id) + "_2", true);
  }
  g.set_output(b.conv_bn(x, k, geometry({1, 1, 1}), "pred", false));
}

// Four-level 3D U-Net with valid 3x3x3 convolutions; only the deepest
// pooling step (and the matching first upsampling) acts through-plane.
void build_unet3d_mod(Graph& g, const NetworkSpec& spec) {
  Builder b{g, spec};
  const int w = spec.base_channels;
  const int k = spec.num_classes;
  const auto c3 = geometry({3, 3, 3});
  const Dims3 windows[3] = {{1, 2, 2}, {1, 2, 2}, {2, 2, 2}};
  int x = g.input(1);
  std::vector<int> skips;
  for (int level = 0; level < 4; ++level) {
    const int width = w << level;
    const std::string p = "conv" + std::to_string(level + 1) + "_";
    x = b.conv_bn(x, width, c3, p + "1", true);
    x = b.conv_bn(x, width, c3, p + "2", true);
    if (level < 3) {
      skips.push_back(x);
      x = g.max_pool(x, windows[level]);
    }
  }
  for (int level = 2; level >= 0; --level) {
    const int width = w << level;
    const Dims3 win = windows[level];
    x = b.up_bn(x, width, geometry(win, win), "upconv" + std::to_string(level + 1), true);
    x = g.crop_concat(skips[static_cast<std::size_t>(level)], x);
    const int id = 7 - level;  // conv5 .. conv7 mirror conv3 .. conv1
    x = b.conv_bn(x, width, c3, "conv" + std::to_string(id) + "_1", true);
    x = b.conv_bn(x, width, c3, "conv" + std::to_string(id) + "_2", true);
  }
  g.set_output(b.conv_bn(x, k, geometry({1, 1, 1}), "pred", false));
}

json shape_json(const Shape3& s) { return json::array({s[0], s[1], s[2]}); }
Shape3 shape_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

}  // namespace

const char* architecture_name(Architecture a) {
  switch (a) {
    case Architecture::FCN8: return "FCN8";
    case Architecture::UNet2D: return "UNET2D";
    case Architecture::UNet2DMod: return "UNET2D_MOD";
    case Architecture::UNet3DMod: return "UNET3D_MOD";
  }
  return "?";
}

Architecture parse_architecture(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (Architecture a : {Architecture::FCN8, Architecture::UNet2D, Architecture::UNet2DMod, Architecture::UNet3DMod}) {
    if (n == architecture_name(a)) return a;
  }
  throw std::invalid_argument("unknown architecture '" + name + "' (expected FCN8, UNET2D, UNET2D_MOD, UNET3D_MOD)");
}

bool is_3d(Architecture a) { return a == Architecture::UNet3DMod; }

NetworkSpec default_spec(Architecture a, int num_classes, int base_channels) {
  NetworkSpec s;
  s.architecture = a;
  s.num_classes = num_classes;
  switch (a) {
    case Architecture::FCN8:
      s.input_shape = {224, 224, 1};
      s.output_shape = {224, 224, 1};
      s.base_channels = 64;
      break;
    case Architecture::UNet2D:
    case Architecture::UNet2DMod:
      s.input_shape = {396, 396, 1};
      s.output_shape = {212, 212, 1};
      s.base_channels = 64;
      break;
    case Architecture::UNet3DMod:
      s.input_shape = {204, 204, 60};
      s.output_shape = {116, 116, 28};
      s.through_plane_pooling_steps = 1;
      s.base_channels = 32;
      break;
  }
  if (base_channels > 0) s.base_channels = base_channels;
  return s;
}

void validate(const NetworkSpec& spec) {
  const NetworkSpec ref = default_spec(spec.architecture, spec.num_classes, spec.base_channels);
  const std::string arch = architecture_name(spec.architecture);
  if (spec.input_shape != ref.input_shape || spec.output_shape != ref.output_shape) {
    throw std::invalid_argument("unsupported shapes for " + arch + ": input " + to_string(spec.input_shape) +
                                ", output " + to_string(spec.output_shape) + " (expected " +
                                to_string(ref.input_shape) + " -> " + to_string(ref.output_shape) + ")");
  }
  if (spec.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (spec.base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
  if (spec.through_plane_pooling_steps != ref.through_plane_pooling_steps) {
    throw std::invalid_argument(arch + " requires through_plane_pooling_steps = " +
                                std::to_string(ref.through_plane_pooling_steps));
  }
  if (!(spec.bn_momentum >= 0.0f && spec.bn_momentum < 1.0f) || !(spec.bn_epsilon > 0.0f))
    throw std::invalid_argument("invalid batch-norm settings");
}

SegmentationModel::SegmentationModel(const NetworkSpec& spec) : spec_(spec) {
  validate(spec_);
  switch (spec_.architecture) {
    case Architecture::FCN8: build_fcn8(graph_, spec_); break;
    case Architecture::UNet2D: build_unet2d(graph_, spec_, false); break;
    case Architecture::UNet2DMod: build_unet2d(graph_, spec_, true); break;
    case Architecture::UNet3DMod: build_unet3d_mod(graph_, spec_); break;
  }
  const Dims3 traced = graph_.trace_dims(input_dims()).back();
  if (traced != output_dims()) {
    throw std::logic_error(std::string(architecture_name(spec_.architecture)) + " graph produces " +
                           to_string(traced, 'x') + " instead of " + to_string(output_dims(), 'x'));
  }
}

Tensor SegmentationModel::forward(const Tensor& batch, Mode mode) {
  if (batch.c != 1 || batch.spatial != input_dims()) {
    throw std::invalid_argument(std::string(architecture_name(spec_.architecture)) + " expects input (n,1," +
                                to_string(input_dims(), ',') + "), got " + batch.shape_string());
  }
  return graph_.forward(batch, mode);
}

void SegmentationModel::backward(const Tensor& d_scores) { graph_.backward(d_scores); }

std::size_t SegmentationModel::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->size();
  return n;
}

ModelState SegmentationModel::state() {
  ModelState s;
  s.spec = spec_;
  for (Parameter* p : parameters()) s.parameters.push_back({p->name, p->shape, p->value});
  for (Buffer* b : buffers()) s.buffers.push_back({b->name, {static_cast<int>(b->value.size())}, b->value});
  return s;
}

void SegmentationModel::load_state(const ModelState& state) {
  if (!(state.spec == spec_)) throw std::invalid_argument("model state was saved for a different network spec");
  auto params = parameters();
  auto bufs = buffers();
  if (params.size() != state.parameters.size() || bufs.size() != state.buffers.size())
    throw std::invalid_argument("model state does not match the network layout");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = state.parameters[i];
    if (src.name != params[i]->name || src.values.size() != params[i]->size())
      throw std::invalid_argument("parameter mismatch at " + params[i]->name);
    params[i]->value = src.values;
  }
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    const auto& src = state.buffers[i];
    if (src.name != bufs[i]->name || src.values.size() != bufs[i]->value.size())
      throw std::invalid_argument("buffer mismatch at " + bufs[i]->name);
    bufs[i]->value = src.values;
  }
}

SegmentationModel build(const NetworkSpec& spec, std::uint64_t seed) {
  SegmentationModel m(spec);
  m.graph().initialize(seed);
  return m;
}

Tensor softmax(const Tensor& scores) {
  Tensor out(scores.n, scores.c, scores.spatial);
  const std::size_t plane = scores.plane();
  std::vector<double> e(static_cast<std::size_t>(scores.c));
  for (int i = 0; i < scores.n; ++i) {
    for (std::size_t j = 0; j < plane; ++j) {
      double mx = -INFINITY;
      for (int k = 0; k < scores.c; ++k) mx = std::max(mx, static_cast<double>(scores.channel(i, k)[j]));
      double sum = 0.0;
      for (int k = 0; k < scores.c; ++k) {
        e[static_cast<std::size_t>(k)] = std::exp(scores.channel(i, k)[j] - mx);
        sum += e[static_cast<std::size_t>(k)];
      }
      for (int k = 0; k < scores.c; ++k) out.channel(i, k)[j] = static_cast<float>(e[static_cast<std::size_t>(k)] / sum);
    }
  }
  return out;
}

void write_array_file(const std::filesystem::path& path, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays) {
  json header;
  header["meta"] = json::parse(meta_json);
  header["arrays"] = json::array();
  std::size_t offset = 0;
  for (const auto& a : arrays) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : arrays) {
      out.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedArray> read_array_file(const std::filesystem::path& path, std::string& meta_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const json header = json::parse(text);
  meta_json = header.at("meta").dump();
  std::vector<NamedArray> arrays;
  for (const auto& e : header.at("arrays")) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.shape = e.at("shape").get<std::vector<int>>();
    a.values.resize(e.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint data for " + a.name);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

std::string spec_to_json(const NetworkSpec& spec) {
  json j{{"architecture", architecture_name(spec.architecture)},
         {"num_classes", spec.num_classes},
         {"input_shape", shape_json(spec.input_shape)},
         {"output_shape", shape_json(spec.output_shape)},
         {"through_plane_pooling_steps", spec.through_plane_pooling_steps},
         {"base_channels", spec.base_channels},
         {"bn_momentum", spec.bn_momentum},
         {"bn_epsilon", spec.bn_epsilon}};
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  const json j = json::parse(text);
  NetworkSpec s;
  s.architecture = parse_architecture(j.at("architecture").get<std::string>());
  s.num_classes = j.at("num_classes").get<int>();
  s.input_shape = shape_from(j.at("input_shape"));
  s.output_shape = shape_from(j.at("output_shape"));
  s.through_plane_pooling_steps = j.at("through_plane_pooling_steps").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.bn_momentum = j.at("bn_momentum").get<float>();
  s.bn_epsilon = j.at("bn_epsilon").get<float>();
  return s;
}

void save_model(const std::filesystem::path& path, SegmentationModel& model) {
  const ModelState st = model.state();
  std::vector<NamedArray> arrays;
  for (const auto& p : st.parameters) arrays.push_back({"param/" + p.name, p.shape, p.values});
  for (const auto& b : st.buffers) arrays.push_back({"buffer/" + b.name, b.shape, b.values});
  const json meta{{"spec", json::parse(spec_to_json(st.spec))}};
  write_array_file(path, meta.dump(), arrays);
}

SegmentationModel load_model(const std::filesystem::path& path) {
  std::string meta_text;
  auto arrays = read_array_file(path, meta_text);
  const json meta = json::parse(meta_text);
  ModelState st;
  st.spec = spec_from_json(meta.at("spec").dump());
  for (auto& a : arrays) {
    if (a.name.rfind("param/", 0) == 0) {
      st.parameters.push_back({a.name.substr(6), a.shape, std::move(a.values)});
    } else if (a.name.rfind("buffer/", 0) == 0) {
      st.buffers.push_back({a.name.substr(7), a.shape, std::move(a.values)});
    }
  }
  SegmentationModel m(st.spec);
  m.load_state(st);
  return m;
}

}  // namespace cmrseg
