#pragma once

// Training and evaluation loops: run configuration, checkpoints, loss
// traces and evaluation reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "volagg/bodymodel.hpp"
#include "volagg/json_util.hpp"
#include "volagg/loss.hpp"
#include "volagg/metrics.hpp"
#include "volagg/net.hpp"
#include "volagg/synth.hpp"

namespace volagg::train {

struct RunConfig {
  net::NetConfig net;
  loss::LossWeights loss_weights;
  double lr_backbone = 1e-5;
  double lr_rest = 1e-4;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  std::string model = "builtin:toy";
  std::string prior = "builtin:toy";
  std::filesystem::path train_data;
  std::optional<std::filesystem::path> eval_data;
  std::size_t checkpoint_every = 500;  // 0 writes only the final checkpoint
};

// Throws Config naming the offending field.
void validate(const RunConfig& config);

io::Json run_config_to_json(const RunConfig& config);
// Relative dataset paths are resolved against `base_dir`.
RunConfig run_config_from_json(const io::Json& json, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct Checkpoint {
  std::size_t step = 0;
  std::string model;
  std::size_t model_joints = 0;
  std::size_t model_shape = 0;
  std::size_t model_keypoints = 0;
  net::NetConfig net;
  net::NetWeights weights;
};

io::Json checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const io::Json& json);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ConfigMismatch naming the differing dimension pair.
void check_model_dims(const Checkpoint& checkpoint, const body::BodyModelDef& model);
void check_dataset_dims(const Checkpoint& checkpoint, const synth::Dataset& dataset);

// Weighted loss terms per step; total is their sum.
struct TraceRow {
  std::size_t step = 0;
  double l3d = 0.0, l2d = 0.0, ltheta = 0.0, lprior_pose = 0.0, lprior_shape = 0.0, total = 0.0;
};

std::string trace_header();
std::string trace_line(const TraceRow& row);

net::PipelineInput pipeline_input(const synth::Sample& sample);
loss::LossTarget loss_target(const synth::Sample& sample, const body::BodyModelDef& model);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> dir;  // loss_trace.csv and checkpoint.json
  std::function<void(const TraceRow&)> on_step;
};

// Seeded shuffling, batch forward, total loss, backward, two-group Adam step.
// A NaN anywhere in the step aborts with NumericalFailure naming the first
// NaN tensor; the weights from before that step are written as the
// checkpoint when an output directory is set.
TrainResult train(const RunConfig& config, const synth::Dataset& data, const body::BodyModelDef& model,
                  const loss::GmmPrior& prior, const TrainOutputs& outputs = {});

// Loads datasets, model and prior named by the config and trains into `out_dir`.
TrainResult run_training(const RunConfig& config, const std::filesystem::path& out_dir);

// Mean total loss over the dataset under the current weights (no gradients).
double dataset_loss(const Checkpoint& checkpoint, const synth::Dataset& data, const body::BodyModelDef& model,
                    const loss::GmmPrior& prior, const loss::LossWeights& weights);

struct EvalSettings {
  metrics::EvalOptions metrics;
  // Scores the ground truth against itself instead of running the network.
  bool oracle = false;
};

metrics::EvalReport evaluate(const Checkpoint& checkpoint, const synth::Dataset& data, const body::BodyModelDef& model,
                             const EvalSettings& settings = {});

struct Inference {
  std::string sample_id;
  body::BodyParams params;
  Eigen::MatrixXd keypoints3d;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> keypoints2d;
  Eigen::Vector3d center;
};

Inference infer(const Checkpoint& checkpoint, const synth::Sample& sample, const body::BodyModelDef& model);
io::Json inference_to_json(const Inference& inference);

}  // namespace volagg::train
