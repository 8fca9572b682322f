#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmrseg/dataset.hpp"
#include "cmrseg/inference.hpp"
#include "cmrseg/losses.hpp"
#include "cmrseg/networks.hpp"

namespace cmrseg {

struct TrainConfig {
  Architecture architecture = Architecture::UNet2DMod;
  int base_channels = 0;  // 0: architecture default
  LossKind loss = LossKind::WeightedCrossEntropy;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 0;  // 0: 10 slices (2D) or 1 volume (3D)
  int max_iterations = 20000;
  int validation_interval = 100;  // 0 disables validation
  std::uint64_t seed = 0;
  ClassWeights class_weights = ClassWeights::defaults();
  PreprocessSettings preprocess = PreprocessSettings::defaults(Architecture::UNet2DMod);
  bool deterministic = true;
  std::string data_root;  // cohort with native images and references
  std::string cache_dir;  // optional output of `preprocess`

  int effective_batch_size() const;
  NetworkSpec network_spec() const;
  void validate() const;
};

/// Flat "key = value" text; '#' starts a comment. Unknown keys are errors.
/// Setting `architecture` resets the preprocessing spacings to that
/// architecture's defaults unless they are given explicitly.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_text(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamSettings {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update on a flat array at step t (1-based).
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                 const AdamSettings& s);

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// Applies Adam to every parameter from its accumulated gradient. Throws
/// naming the parameter when a gradient entry is not finite; in that case no
/// parameter has been modified.
void adam_step(const std::vector<Parameter*>& parameters, AdamState& state, const AdamSettings& settings);

// ---------------------------------------------------------------------------
// Data

/// One network sample: canvas input and target cropped to the output extent.
struct Sample {
  std::vector<float> image;
  std::vector<std::uint8_t> target;
};

/// 2D: one sample per canvas slice; 3D: the whole canvas.
std::vector<Sample> make_samples(const std::vector<PreparedCase>& cases, const NetworkSpec& spec);

struct Batch {
  Tensor input;
  std::vector<std::uint8_t> target;
  std::vector<int> indices;  // sample indices, for inspection
};

/// Endless seeded stream. Epoch e visits every sample once in an order
/// derived from (seed, e); consecutive batches read consecutive positions of
/// that concatenated order, so batch i depends only on (seed, i).
class BatchStream {
 public:
  BatchStream(const std::vector<Sample>& samples, const NetworkSpec& spec, int batch_size, std::uint64_t seed);

  Batch batch(std::int64_t iteration) const;
  std::vector<int> epoch_order(std::int64_t epoch) const;
  std::size_t samples_per_epoch() const { return samples_->size(); }

 private:
  const std::vector<Sample>* samples_;
  Dims3 in_dims_;
  int batch_size_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Training loop

struct ValidationCase {
  PreparedCase prepared;
  LabelVolume reference;  // native geometry
};

struct LogEntry {
  std::int64_t iteration = 0;
  double loss = 0.0;
  std::optional<std::array<double, 3>> val_dice;  // LV, RV, Myo

  double mean_dice() const { return val_dice ? ((*val_dice)[0] + (*val_dice)[1] + (*val_dice)[2]) / 3.0 : 0.0; }
};

/// Per-structure Dice (LV, RV, Myo) of the full inference path, averaged over
/// the cases.
std::array<double, 3> validation_dice(SegmentationModel& model, const std::vector<ValidationCase>& cases);

struct Checkpoint {
  ModelState model;
  AdamState optimizer;
  std::int64_t iteration = 0;
  std::vector<LogEntry> log;
  std::optional<double> best_dice;
  std::int64_t best_iteration = 0;
  ModelState best_model;  // state at best_iteration (or the current state)
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint, const std::string& config_text);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_training_log(const std::filesystem::path& path, const std::vector<LogEntry>& log);

class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<Sample> samples, std::vector<ValidationCase> validation);

  SegmentationModel& model() { return model_; }
  std::int64_t iteration() const { return iteration_; }
  const std::vector<LogEntry>& log() const { return log_; }
  std::optional<double> best_dice() const { return best_dice_; }
  const ModelState& best_state() const { return best_state_; }

  /// One forward/backward/update. Returns the batch loss.
  double step();
  /// Steps until `max_iterations`, validating on schedule. `on_validation`
  /// runs after every validation pass (e.g. to write files).
  void run(const std::function<void(Trainer&)>& on_validation = {});

  Checkpoint checkpoint();
  void restore(const Checkpoint& checkpoint);

 private:
  void validate_now();

  TrainConfig config_;
  NetworkSpec spec_;
  SegmentationModel model_;
  std::vector<Sample> samples_;
  std::vector<ValidationCase> validation_;
  BatchStream stream_;
  AdamState adam_;
  std::int64_t iteration_ = 0;
  std::vector<LogEntry> log_;
  std::optional<double> best_dice_;
  std::int64_t best_iteration_ = 0;
  ModelState best_state_;
};

struct TrainOutputs {
  std::filesystem::path best_model;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log;
  std::optional<double> best_dice;
  std::int64_t iterations = 0;
};

/// Full procedure over a split: prepares data, trains, and writes
/// best_model.bin, checkpoint.bin and train_log.csv into `out_dir`.
TrainOutputs train(const TrainConfig& config, const CohortSplit& split, const std::filesystem::path& out_dir,
                   const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace cmrseg
