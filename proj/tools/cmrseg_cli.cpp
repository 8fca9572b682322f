#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cmrseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cmrseg;

namespace {

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--config", s.config, "Key-value configuration file");
  cmd->add_option("--seed", s.seed, "Override the configured seed");
  cmd->add_flag("--deterministic", s.deterministic, "Single-threaded, bitwise reproducible execution");
}

TrainConfig config_or_default(const Shared& s, std::optional<Architecture> arch = std::nullopt) {
  TrainConfig c;
  if (!s.config.empty()) c = load_train_config(s.config);
  if (arch && (s.config.empty() || *arch != c.architecture)) {
    c.architecture = *arch;
    c.preprocess = PreprocessSettings::defaults(*arch);
  }
  if (s.seed) c.seed = *s.seed;
  if (s.deterministic) c.deterministic = true;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cardiac MR short-axis segmentation pipeline"};
  app.require_subcommand(1);
  Shared shared;

  // split
  auto* split_cmd = app.add_subcommand("split", "Write a stratified train/validation split manifest");
  std::string split_root, split_out;
  double split_fraction = 0.8;
  split_cmd->add_option("--data-root", split_root, "Cohort root")->required();
  split_cmd->add_option("--fraction", split_fraction, "Training fraction per diagnosis group");
  split_cmd->add_option("--out", split_out, "Manifest path")->required();
  add_shared(split_cmd, shared);

  // preprocess
  auto* pre_cmd = app.add_subcommand("preprocess", "Resample, pad and normalize a cohort into a cache");
  std::string pre_root, pre_arch, pre_out;
  pre_cmd->add_option("--data-root", pre_root, "Cohort root")->required();
  pre_cmd->add_option("--arch", pre_arch, "FCN8, UNET2D, UNET2D_MOD or UNET3D_MOD");
  pre_cmd->add_option("--out", pre_out, "Cache directory")->required();
  add_shared(pre_cmd, shared);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network on a split");
  std::string train_split, train_out, train_resume;
  train_cmd->add_option("--split", train_split, "Split manifest")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--resume", train_resume, "Continue from a training checkpoint");
  std::string train_loss;
  std::vector<double> train_weights;
  train_cmd->add_option("--loss", train_loss, "ce, wce or dice (overrides the config)");
  train_cmd->add_option("--class-weights", train_weights, "Four class weights for wce (overrides the config)")
      ->expected(4)
      ->delimiter(',');
  add_shared(train_cmd, shared);

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "Segment volumes in native geometry");
  std::string pred_ckpt, pred_root, pred_out, pred_split;
  std::vector<std::string> pred_images;
  pred_cmd->add_option("--checkpoint", pred_ckpt, "Model or training checkpoint")->required();
  pred_cmd->add_option("--data-root", pred_root, "Cohort root (both phases of every patient)");
  pred_cmd->add_option("--split", pred_split, "Only the validation patients of this split manifest");
  pred_cmd->add_option("--image", pred_images, "Individual NIfTI volumes");
  pred_cmd->add_option("--out", pred_out, "Output directory")->required();
  add_shared(pred_cmd, shared);

  // evaluate / report
  std::string ev_pred, ev_ref, ev_out;
  bool ev_subset = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "Dice, Hausdorff and ASSD against references");
  auto* report_cmd = app.add_subcommand("report", "Volumes, ejection fractions and agreement statistics");
  for (auto* cmd : {eval_cmd, report_cmd}) {
    cmd->add_option("--pred-dir", ev_pred, "Predictions named <id>_<ED|ES>.nii.gz")->required();
    cmd->add_option("--ref-dir", ev_ref, "Cohort root or flat reference directory")->required();
    cmd->add_option("--out", ev_out, "Output CSV")->required();
    cmd->add_flag("--subset", ev_subset, "Allow references without predictions");
    add_shared(cmd, shared);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (shared.deterministic) Eigen::setNbThreads(1);
    RunManifest manifest;
    manifest.started_utc = utc_timestamp();
    manifest.config_path = shared.config;
    if (shared.seed) manifest.parameters["seed"] = std::to_string(*shared.seed);
    manifest.parameters["deterministic"] = shared.deterministic ? "true" : "false";

    if (*split_cmd) {
      const TrainConfig cfg = config_or_default(shared);
      const auto cohort = load_cohort(split_root, false);
      const CohortSplit split = stratified_split(cohort, split_fraction, cfg.seed);
      write_split_manifest(split_out, split);
      std::printf("%zu training, %zu validation patients -> %s\n", split.train_ids.size(),
                  split.validation_ids.size(), split_out.c_str());
      manifest.command = "split";
      manifest.parameters["data_root"] = split_root;
      manifest.parameters["fraction"] = std::to_string(split_fraction);
      manifest.split_path = manifest.output_path = split_out;
      manifest.artifacts = {split_out};
      manifest.finalize(fs::path(split_out).parent_path() / (fs::path(split_out).filename().string() + ".manifest.json"));
    } else if (*pre_cmd) {
      std::optional<Architecture> arch;
      if (!pre_arch.empty()) arch = parse_architecture(pre_arch);
      const TrainConfig cfg = config_or_default(shared, arch);
      const NetworkSpec spec = cfg.network_spec();
      const PreprocessResult r = cmd_preprocess(pre_root, spec, cfg.preprocess, pre_out);
      std::printf("%d cache entries in %s\n", r.entries, r.cache_dir.string().c_str());
      manifest.command = "preprocess";
      manifest.parameters["data_root"] = pre_root;
      manifest.parameters["architecture"] = architecture_name(spec.architecture);
      manifest.output_path = r.cache_dir.string();
      manifest.artifacts = {r.cache_dir.string()};
      manifest.finalize(r.cache_dir / "run_manifest.json");
    } else if (*train_cmd) {
      if (shared.config.empty()) throw std::invalid_argument("train requires --config");
      TrainConfig cfg = config_or_default(shared);
      if (!train_loss.empty()) {
        cfg.loss = parse_loss(train_loss);
        manifest.parameters["loss"] = train_loss;
      }
      if (!train_weights.empty()) {
        cfg.class_weights.weights = train_weights;
        cfg.class_weights.validate(kNumClasses);
        std::string joined;
        for (double w : train_weights) joined += (joined.empty() ? "" : ",") + std::to_string(w);
        manifest.parameters["class_weights"] = joined;
      }
      const CohortSplit split = read_split_manifest(train_split);
      std::optional<fs::path> resume;
      if (!train_resume.empty()) resume = fs::path(train_resume);
      const TrainOutputs out = train(cfg, split, train_out, resume);
      std::printf("trained %lld iterations; best validation Dice %s\n", static_cast<long long>(out.iterations),
                  out.best_dice ? std::to_string(*out.best_dice).c_str() : "n/a");
      manifest.command = "train";
      manifest.split_path = train_split;
      manifest.checkpoint_path = out.last_checkpoint.string();
      manifest.output_path = train_out;
      if (resume) manifest.parameters["resume"] = train_resume;
      manifest.artifacts = {out.best_model.string(), out.last_checkpoint.string(), out.log.string()};
      manifest.finalize(fs::path(train_out) / "run_manifest.json");
    } else if (*pred_cmd) {
      SegmentationModel model = load_any_model(pred_ckpt);
      TrainConfig cfg = config_or_default(shared, model.spec().architecture);
      std::vector<PredictInput> inputs;
      if (!pred_root.empty()) {
        std::vector<std::string> ids;
        if (!pred_split.empty()) ids = read_split_manifest(pred_split).validation_ids;
        inputs = cohort_predict_inputs(pred_root, ids);
      }
      for (const auto& img : pred_images) {
        std::string stem = fs::path(img).filename().string();
        for (const char* ext : {".nii.gz", ".nii"}) {
          const std::string e = ext;
          if (stem.size() > e.size() && stem.compare(stem.size() - e.size(), e.size(), e) == 0) {
            stem.resize(stem.size() - e.size());
            break;
          }
        }
        inputs.push_back({stem + "_pred", img, 0});
      }
      if (inputs.empty()) throw std::invalid_argument("predict needs --data-root or --image");
      const auto timings = cmd_predict(model, cfg.preprocess, inputs, pred_out);
      double total = 0.0;
      for (const auto& t : timings) total += t.seconds;
      std::printf("%zu volumes, mean %.2f s per volume\n", timings.size(), total / timings.size());
      manifest.command = "predict";
      manifest.checkpoint_path = pred_ckpt;
      manifest.split_path = pred_split;
      manifest.parameters["data_root"] = pred_root;
      manifest.output_path = pred_out;
      for (const auto& in : inputs) manifest.artifacts.push_back((fs::path(pred_out) / (in.case_id + ".nii.gz")).string());
      manifest.finalize(fs::path(pred_out) / "run_manifest.json");
    } else if (*eval_cmd || *report_cmd) {
      const bool evaluate = eval_cmd->parsed();
      fs::path out = ev_out;
      if (evaluate) {
        const MetricsReport r = cmd_evaluate(ev_pred, ev_ref, out, ev_subset);
        for (const auto& row : r.pooled)
          std::printf("%-4s dice %.3f (%.3f)  assd %.2f mm  hd %.2f mm  [%d cases, %d undefined]\n",
                      structure_name(row.structure), row.dice.mean, row.dice.std, row.assd_mm.mean,
                      row.hausdorff_mm.mean, row.dice.count, row.assd_mm.excluded);
      } else {
        cmd_report(ev_pred, ev_ref, out, ev_subset);
        std::printf("clinical table -> %s\n", out.string().c_str());
      }
      manifest.command = evaluate ? "evaluate" : "report";
      manifest.parameters["pred_dir"] = ev_pred;
      manifest.parameters["ref_dir"] = ev_ref;
      manifest.output_path = ev_out;
      manifest.artifacts = {ev_out};
      manifest.finalize(out.parent_path() / (out.stem().string() + ".manifest.json"));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
