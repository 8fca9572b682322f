#include "cmrseg/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cmrseg/metrics.hpp"
#include "cmrseg/nifti.hpp"

namespace cmrseg {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a number");
  }
}

long long to_integer(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an integer");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_finite_gradients(const std::vector<Parameter*>& parameters) {
  for (const Parameter* p : parameters) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad[i]))
        throw std::runtime_error("non-finite gradient in parameter '" + p->name + "' at element " +
                                 std::to_string(i));
    }
  }
}

std::vector<NamedArray> state_arrays(const ModelState& st, const std::string& prefix) {
  std::vector<NamedArray> out;
  for (const auto& p : st.parameters) out.push_back({prefix + "param/" + p.name, p.shape, p.values});
  for (const auto& b : st.buffers) out.push_back({prefix + "buffer/" + b.name, b.shape, b.values});
  return out;
}

bool take_prefix(std::string& name, const std::string& prefix) {
  if (name.rfind(prefix, 0) != 0) return false;
  name.erase(0, prefix.size());
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

int TrainConfig::effective_batch_size() const {
  if (batch_size > 0) return batch_size;
  return is_3d(architecture) ? 1 : 10;
}

NetworkSpec TrainConfig::network_spec() const { return default_spec(architecture, kNumClasses, base_channels); }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  if (batch_size < 0) throw std::invalid_argument("batch_size must be >= 1 (or 0 for the default)");
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be >= 0");
  if (validation_interval < 0) throw std::invalid_argument("validation_interval must be >= 0");
  if (base_channels < 0) throw std::invalid_argument("base_channels must be >= 0");
  if (!(preprocess.inplane_spacing_mm > 0.0)) throw std::invalid_argument("inplane_spacing_mm must be > 0");
  class_weights.validate(kNumClasses);
}

TrainConfig parse_train_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (kv.count(key)) throw std::invalid_argument("config key '" + key + "' given twice");
    kv[key] = trim(line.substr(eq + 1));
  }

  TrainConfig c;
  if (auto it = kv.find("architecture"); it != kv.end()) {
    c.architecture = parse_architecture(it->second);
    c.preprocess = PreprocessSettings::defaults(c.architecture);
    kv.erase(it);
  }
  for (const auto& [key, v] : kv) {
    if (key == "base_channels") c.base_channels = static_cast<int>(to_integer(key, v));
    else if (key == "loss") c.loss = parse_loss(v);
    else if (key == "learning_rate") c.learning_rate = to_double(key, v);
    else if (key == "beta1") c.beta1 = to_double(key, v);
    else if (key == "beta2") c.beta2 = to_double(key, v);
    else if (key == "epsilon") c.epsilon = to_double(key, v);
    else if (key == "batch_size") c.batch_size = static_cast<int>(to_integer(key, v));
    else if (key == "max_iterations") c.max_iterations = static_cast<int>(to_integer(key, v));
    else if (key == "validation_interval") c.validation_interval = static_cast<int>(to_integer(key, v));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_integer(key, v));
    else if (key == "class_weights") {
      std::string list = v;
      std::replace(list.begin(), list.end(), ',', ' ');
      std::istringstream ws(list);
      c.class_weights.weights.clear();
      std::string tok;
      while (ws >> tok) c.class_weights.weights.push_back(to_double(key, tok));
    } else if (key == "inplane_spacing_mm") c.preprocess.inplane_spacing_mm = to_double(key, v);
    else if (key == "through_plane_spacing_mm") c.preprocess.through_plane_spacing_mm = to_double(key, v);
    else if (key == "deterministic") c.deterministic = to_bool(key, v);
    else if (key == "data_root") c.data_root = v;
    else if (key == "cache_dir") c.cache_dir = v;
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_train_config(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "architecture = " << architecture_name(c.architecture) << '\n'
    << "base_channels = " << c.base_channels << '\n'
    << "loss = " << loss_name(c.loss) << '\n'
    << "learning_rate = " << format_double(c.learning_rate) << '\n'
    << "beta1 = " << format_double(c.beta1) << '\n'
    << "beta2 = " << format_double(c.beta2) << '\n'
    << "epsilon = " << format_double(c.epsilon) << '\n'
    << "batch_size = " << c.batch_size << '\n'
    << "max_iterations = " << c.max_iterations << '\n'
    << "validation_interval = " << c.validation_interval << '\n'
    << "seed = " << c.seed << '\n'
    << "class_weights =";
  for (double w : c.class_weights.weights) o << ' ' << format_double(w);
  o << '\n'
    << "inplane_spacing_mm = " << format_double(c.preprocess.inplane_spacing_mm) << '\n'
    << "through_plane_spacing_mm = " << format_double(c.preprocess.through_plane_spacing_mm) << '\n'
    << "deterministic = " << (c.deterministic ? "true" : "false") << '\n';
  if (!c.data_root.empty()) o << "data_root = " << c.data_root << '\n';
  if (!c.cache_dir.empty()) o << "cache_dir = " << c.cache_dir << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                 const AdamSettings& s) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size())
    throw std::invalid_argument("adam_update: parameter, gradient and moment sizes differ");
  if (t < 1) throw std::invalid_argument("adam_update: step must be >= 1");
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    const double mi = s.beta1 * static_cast<double>(m[i]) + (1.0 - s.beta1) * g;
    const double vi = s.beta2 * static_cast<double>(v[i]) + (1.0 - s.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / c1;
    const double v_hat = vi / c2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon));
  }
}

template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                 std::int64_t, const AdamSettings&);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                  std::int64_t, const AdamSettings&);

void adam_step(const std::vector<Parameter*>& parameters, AdamState& state, const AdamSettings& settings) {
  check_finite_gradients(parameters);
  if (state.m.empty()) {
    for (const Parameter* p : parameters) {
      state.m.emplace_back(p->size(), 0.0f);
      state.v.emplace_back(p->size(), 0.0f);
    }
  }
  if (state.m.size() != parameters.size())
    throw std::invalid_argument("optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                                std::to_string(parameters.size()) + " parameters");
  ++state.step;
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    Parameter& p = *parameters[i];
    if (state.m[i].size() != p.size())
      throw std::invalid_argument("optimizer state size mismatch for parameter '" + p.name + "'");
    adam_update<float>(p.value, p.grad, state.m[i], state.v[i], state.step, settings);
  }
}

// ---------------------------------------------------------------------------
// Data

std::vector<Sample> make_samples(const std::vector<PreparedCase>& cases, const NetworkSpec& spec) {
  std::vector<Sample> out;
  const bool volumetric = is_3d(spec.architecture);
  for (const auto& c : cases) {
    if (!c.has_labels)
      throw std::invalid_argument("training case " + c.patient_id + " " + phase_name(c.phase) + " has no labels");
    const LabelVolume target = crop_to_output(c.labels, spec.output_shape);
    if (volumetric) {
      if (c.image.shape != spec.input_shape)
        throw std::invalid_argument("case " + c.patient_id + " canvas " + to_string(c.image.shape) +
                                    " does not match network input " + to_string(spec.input_shape));
      out.push_back({c.image.voxels, target.voxels});
      continue;
    }
    if (c.image.shape[0] != spec.input_shape[0] || c.image.shape[1] != spec.input_shape[1])
      throw std::invalid_argument("case " + c.patient_id + " canvas " + to_string(c.image.shape) +
                                  " does not match network input " + to_string(spec.input_shape));
    const std::size_t in_plane = c.image.slice_size();
    const std::size_t out_plane = target.slice_size();
    for (int z = 0; z < c.image.shape[2]; ++z) {
      Sample s;
      s.image.assign(c.image.voxels.begin() + z * in_plane, c.image.voxels.begin() + (z + 1) * in_plane);
      s.target.assign(target.voxels.begin() + z * out_plane, target.voxels.begin() + (z + 1) * out_plane);
      out.push_back(std::move(s));
    }
  }
  return out;
}

BatchStream::BatchStream(const std::vector<Sample>& samples, const NetworkSpec& spec, int batch_size,
                         std::uint64_t seed)
    : samples_(&samples), in_dims_(to_dims(spec.input_shape)), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

std::vector<int> BatchStream::epoch_order(std::int64_t epoch) const {
  std::vector<int> order(samples_->size());
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Batch BatchStream::batch(std::int64_t iteration) const {
  if (samples_->empty()) throw std::invalid_argument("no training samples");
  const auto n = static_cast<std::int64_t>(samples_->size());
  Batch b;
  b.input = Tensor(batch_size_, 1, in_dims_);
  const std::size_t in_size = product(in_dims_);
  std::int64_t cached_epoch = -1;
  std::vector<int> order;
  for (int i = 0; i < batch_size_; ++i) {
    const std::int64_t g = iteration * batch_size_ + i;
    const std::int64_t epoch = g / n;
    if (epoch != cached_epoch) {
      order = epoch_order(epoch);
      cached_epoch = epoch;
    }
    const int idx = order[static_cast<std::size_t>(g % n)];
    const Sample& s = (*samples_)[static_cast<std::size_t>(idx)];
    if (s.image.size() != in_size) throw std::invalid_argument("sample image does not match the network input");
    std::copy(s.image.begin(), s.image.end(), b.input.sample(i));
    b.target.insert(b.target.end(), s.target.begin(), s.target.end());
    b.indices.push_back(idx);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Validation, checkpoints, log

std::array<double, 3> validation_dice(SegmentationModel& model, const std::vector<ValidationCase>& cases) {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  if (cases.empty()) return sum;
  for (const auto& c : cases) {
    const Prediction p = predict_case(model, c.prepared);
    for (std::size_t s = 0; s < kForeground.size(); ++s)
      sum[s] += dice(structure_mask(p.labels, kForeground[s]), structure_mask(c.reference, kForeground[s]));
  }
  for (double& v : sum) v /= static_cast<double>(cases.size());
  return sum;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck, const std::string& config_text) {
  std::vector<NamedArray> arrays = state_arrays(ck.model, "");
  for (auto& a : state_arrays(ck.best_model, "best/")) arrays.push_back(std::move(a));
  if (ck.optimizer.m.size() != ck.model.parameters.size() && !ck.optimizer.m.empty())
    throw std::invalid_argument("optimizer state does not match the model parameters");
  for (std::size_t i = 0; i < ck.optimizer.m.size(); ++i) {
    const auto& p = ck.model.parameters[i];
    arrays.push_back({"adam_m/" + p.name, p.shape, ck.optimizer.m[i]});
    arrays.push_back({"adam_v/" + p.name, p.shape, ck.optimizer.v[i]});
  }
  json log = json::array();
  for (const auto& e : ck.log) {
    json row = {e.iteration, e.loss};
    if (e.val_dice) row.push_back({(*e.val_dice)[0], (*e.val_dice)[1], (*e.val_dice)[2]});
    log.push_back(row);
  }
  const json meta{{"spec", json::parse(spec_to_json(ck.model.spec))},
                  {"iteration", ck.iteration},
                  {"adam_step", ck.optimizer.step},
                  {"best_dice", ck.best_dice ? json(*ck.best_dice) : json(nullptr)},
                  {"best_iteration", ck.best_iteration},
                  {"config", config_text},
                  {"log", log}};
  write_array_file(path, meta.dump(), arrays);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string meta_text;
  auto arrays = read_array_file(path, meta_text);
  const json meta = json::parse(meta_text);
  Checkpoint ck;
  ck.model.spec = spec_from_json(meta.at("spec").dump());
  ck.best_model.spec = ck.model.spec;
  ck.iteration = meta.at("iteration").get<std::int64_t>();
  ck.optimizer.step = meta.value("adam_step", std::int64_t{0});
  if (meta.contains("best_dice") && !meta.at("best_dice").is_null()) ck.best_dice = meta.at("best_dice").get<double>();
  ck.best_iteration = meta.value("best_iteration", std::int64_t{0});
  if (meta.contains("log")) {
    for (const auto& row : meta.at("log")) {
      LogEntry e;
      e.iteration = row.at(0).get<std::int64_t>();
      e.loss = row.at(1).get<double>();
      if (row.size() > 2) e.val_dice = row.at(2).get<std::array<double, 3>>();
      ck.log.push_back(e);
    }
  }
  std::map<std::string, std::vector<float>> m, v;
  for (auto& a : arrays) {
    std::string name = a.name;
    if (take_prefix(name, "best/param/")) ck.best_model.parameters.push_back({name, a.shape, std::move(a.values)});
    else if (take_prefix(name, "best/buffer/")) ck.best_model.buffers.push_back({name, a.shape, std::move(a.values)});
    else if (take_prefix(name, "param/")) ck.model.parameters.push_back({name, a.shape, std::move(a.values)});
    else if (take_prefix(name, "buffer/")) ck.model.buffers.push_back({name, a.shape, std::move(a.values)});
    else if (take_prefix(name, "adam_m/")) m[name] = std::move(a.values);
    else if (take_prefix(name, "adam_v/")) v[name] = std::move(a.values);
  }
  if (!m.empty()) {
    for (const auto& p : ck.model.parameters) {
      auto im = m.find(p.name);
      auto iv = v.find(p.name);
      if (im == m.end() || iv == v.end())
        throw std::runtime_error(path.string() + ": optimizer moments missing for parameter '" + p.name + "'");
      ck.optimizer.m.push_back(std::move(im->second));
      ck.optimizer.v.push_back(std::move(iv->second));
    }
  }
  if (ck.best_model.parameters.empty()) ck.best_model = ck.model;
  return ck;
}

void write_training_log(const std::filesystem::path& path, const std::vector<LogEntry>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,loss,val_dice_lv,val_dice_rv,val_dice_myo\n";
  for (const auto& e : log) {
    out << e.iteration << ',' << format_double(e.loss);
    if (e.val_dice) {
      for (double d : *e.val_dice) out << ',' << format_double(d);
    } else {
      out << ",,,";
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& config, std::vector<Sample> samples, std::vector<ValidationCase> validation)
    : config_(config),
      spec_(config.network_spec()),
      model_(build(spec_, config.seed)),
      samples_(std::move(samples)),
      validation_(std::move(validation)),
      stream_(samples_, spec_, config.effective_batch_size(), config.seed) {
  config_.validate();
  best_state_ = model_.state();
}

double Trainer::step() {
  const Batch b = stream_.batch(iteration_);
  model_.zero_grad();
  const Tensor scores = model_.forward(b.input, Mode::Train);
  Tensor d_scores;
  const double loss = tensor_loss(config_.loss, scores, b.target, config_.class_weights, &d_scores);
  if (!std::isfinite(loss)) {
    model_.release_activations();
    throw std::runtime_error("non-finite loss at iteration " + std::to_string(iteration_ + 1));
  }
  model_.backward(d_scores);
  model_.release_activations();
  adam_step(model_.parameters(), adam_,
            {config_.learning_rate, config_.beta1, config_.beta2, config_.epsilon});
  ++iteration_;
  log_.push_back({iteration_, loss, std::nullopt});
  return loss;
}

void Trainer::validate_now() {
  if (validation_.empty()) return;
  const auto d = validation_dice(model_, validation_);
  if (log_.empty() || log_.back().iteration != iteration_) log_.push_back({iteration_, 0.0, std::nullopt});
  log_.back().val_dice = d;
  const double mean = log_.back().mean_dice();
  if (!best_dice_ || mean > *best_dice_) {
    best_dice_ = mean;
    best_iteration_ = iteration_;
    best_state_ = model_.state();
  }
}

void Trainer::run(const std::function<void(Trainer&)>& on_validation) {
  while (iteration_ < config_.max_iterations) {
    step();
    if (config_.validation_interval > 0 && iteration_ % config_.validation_interval == 0) {
      validate_now();
      if (on_validation) on_validation(*this);
    }
  }
  if (!best_dice_) best_state_ = model_.state();
}

Checkpoint Trainer::checkpoint() {
  Checkpoint ck;
  ck.model = model_.state();
  ck.optimizer = adam_;
  ck.iteration = iteration_;
  ck.log = log_;
  ck.best_dice = best_dice_;
  ck.best_iteration = best_iteration_;
  ck.best_model = best_dice_ ? best_state_ : ck.model;
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  if (!(ck.model.spec == spec_))
    throw std::invalid_argument("checkpoint network (" + std::string(architecture_name(ck.model.spec.architecture)) +
                                ", base " + std::to_string(ck.model.spec.base_channels) +
                                ") does not match the configured network (" + architecture_name(spec_.architecture) +
                                ", base " + std::to_string(spec_.base_channels) + ")");
  model_.load_state(ck.model);
  adam_ = ck.optimizer;
  iteration_ = ck.iteration;
  log_ = ck.log;
  best_dice_ = ck.best_dice;
  best_iteration_ = ck.best_iteration;
  best_state_ = ck.best_model;
}

// ---------------------------------------------------------------------------

TrainOutputs train(const TrainConfig& config, const CohortSplit& split, const std::filesystem::path& out_dir,
                   const std::optional<std::filesystem::path>& resume) {
  config.validate();
  if (config.data_root.empty()) throw std::invalid_argument("config must set data_root");
  const NetworkSpec spec = config.network_spec();
  const auto cohort = load_cohort(config.data_root, false);
  const std::filesystem::path cache =
      config.cache_dir.empty() ? std::filesystem::path() : std::filesystem::path(config.cache_dir) /
                                                               architecture_name(spec.architecture);
  auto prepare = [&](const PatientRecord& p, Phase ph) {
    return cache.empty() ? prepare_patient_phase(p, ph, spec, config.preprocess)
                         : read_cache_entry(cache, p.patient_id, ph);
  };

  std::vector<PreparedCase> train_cases;
  for (const auto& p : select_patients(cohort, split.train_ids))
    for (Phase ph : kPhases) train_cases.push_back(prepare(p, ph));
  std::vector<ValidationCase> validation;
  for (const auto& p : select_patients(cohort, split.validation_ids)) {
    for (Phase ph : kPhases) {
      ValidationCase v;
      v.prepared = prepare(p, ph);
      v.reference = read_labels(p.label(ph));
      validation.push_back(std::move(v));
    }
  }
  std::vector<Sample> samples = make_samples(train_cases, spec);
  train_cases.clear();

  Trainer trainer(config, std::move(samples), std::move(validation));
  if (resume) trainer.restore(load_checkpoint(*resume));

  std::filesystem::create_directories(out_dir);
  TrainOutputs out;
  out.best_model = out_dir / "best_model.bin";
  out.last_checkpoint = out_dir / "checkpoint.bin";
  out.log = out_dir / "train_log.csv";
  const std::string config_text = to_text(config);

  auto persist = [&](Trainer& t) {
    const Checkpoint ck = t.checkpoint();
    save_checkpoint(out.last_checkpoint, ck, config_text);
    SegmentationModel best(ck.best_model.spec);
    best.load_state(ck.best_model);
    save_model(out.best_model, best);
    write_training_log(out.log, t.log());
  };

  try {
    trainer.run(persist);
  } catch (const std::runtime_error&) {
    write_training_log(out.log, trainer.log());
    throw;
  }
  persist(trainer);
  out.best_dice = trainer.best_dice();
  out.iterations = trainer.iteration();
  return out;
}

}  // namespace cmrseg
