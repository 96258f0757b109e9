#include "volagg/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/optim.hpp"
#include "volagg/rng.hpp"

namespace volagg::train {

namespace {

constexpr char kCheckpointFormat[] = "volagg-checkpoint";
constexpr int kCheckpointVersion = 1;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Eigen::MatrixXd to_matrix(const ad::Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  const auto d = t.data();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = d[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

bool has_nan(std::span<const double> v) {
  return std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); });
}

// Finds the first NaN among the step's tensors, in pipeline order.
std::optional<std::string> first_nan(const std::vector<std::pair<std::string, ad::Tensor>>& forward,
                                     const ad::NamedTensors& params, bool check_grads) {
  for (const auto& [name, t] : forward) {
    if (has_nan(t.data())) return name;
  }
  for (const auto& [name, t] : params) {
    if (has_nan(t.data())) return "weight " + name;
  }
  if (check_grads) {
    for (const auto& [name, t] : params) {
      if (has_nan(t.grad())) return "gradient of " + name;
    }
  }
  return std::nullopt;
}

Checkpoint make_checkpoint(const RunConfig& cfg, const body::BodyModelDef& model, const net::NetWeights& w,
                           std::size_t step) {
  Checkpoint ck;
  ck.step = step;
  ck.model = cfg.model;
  ck.model_joints = model.num_joints();
  ck.model_shape = model.num_shape();
  ck.model_keypoints = model.num_keypoints();
  ck.net = cfg.net;
  ad::NamedTensors copy;
  for (const auto& [n, t] : w.named()) copy.emplace_back(n, t.detach());
  ck.weights = net::NetWeights(std::move(copy));
  return ck;
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  return (p.is_relative() && !base.empty()) ? base / p : p;
}

}  // namespace

void validate(const RunConfig& c) {
  net::validate(c.net);
  loss::validate(c.loss_weights);
  if (!(c.lr_backbone > 0.0) || !std::isfinite(c.lr_backbone)) fail(ErrorKind::Config, "lr_backbone must be positive");
  if (!(c.lr_rest > 0.0) || !std::isfinite(c.lr_rest)) fail(ErrorKind::Config, "lr_rest must be positive");
  if (c.batch < 1) fail(ErrorKind::Config, "batch must be >= 1");
}

io::Json run_config_to_json(const RunConfig& c) {
  io::Json j;
  j["net"] = net::config_to_json(c.net);
  j["loss_weights"] = loss::weights_to_json(c.loss_weights);
  j["lr_backbone"] = c.lr_backbone;
  j["lr_rest"] = c.lr_rest;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["model"] = c.model;
  j["prior"] = c.prior;
  j["train_data"] = c.train_data.string();
  if (c.eval_data) j["eval_data"] = c.eval_data->string();
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

RunConfig run_config_from_json(const io::Json& j, const std::filesystem::path& base) {
  if (!j.is_object()) fail(ErrorKind::Config, "run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "net") c.net = net::config_from_json(value);
      else if (key == "loss_weights") c.loss_weights = loss::weights_from_json(value);
      else if (key == "lr_backbone") c.lr_backbone = value.get<double>();
      else if (key == "lr_rest") c.lr_rest = value.get<double>();
      else if (key == "steps") c.steps = value.get<std::size_t>();
      else if (key == "batch") c.batch = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "model") c.model = value.get<std::string>();
      else if (key == "prior") c.prior = value.get<std::string>();
      else if (key == "train_data") c.train_data = resolve(value.get<std::string>(), base);
      else if (key == "eval_data") c.eval_data = resolve(value.get<std::string>(), base);
      else if (key == "checkpoint_every") c.checkpoint_every = value.get<std::size_t>();
      else fail(ErrorKind::Config, "run config: unknown key \"" + key + "\"");
    }
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Config, std::string("run config: ") + e.what());
  }
  if (c.train_data.empty()) fail(ErrorKind::Config, "run config: train_data is required");
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(io::read_json_file(path), path.parent_path());
}

io::Json checkpoint_to_json(const Checkpoint& ck) {
  io::Json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["step"] = ck.step;
  j["model"] = ck.model;
  j["model_dims"] = {{"joints", ck.model_joints}, {"shape", ck.model_shape}, {"keypoints", ck.model_keypoints}};
  j["net"] = net::config_to_json(ck.net);
  j["params"] = ad::tensors_to_json(ck.weights.named());
  return j;
}

Checkpoint checkpoint_from_json(const io::Json& j) {
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) fail(ErrorKind::Parse, "not a checkpoint file");
  if (j.value("version", 0) != kCheckpointVersion) fail(ErrorKind::Parse, "unsupported checkpoint version");
  Checkpoint ck;
  try {
    ck.step = j.at("step").get<std::size_t>();
    ck.model = j.at("model").get<std::string>();
    ck.model_joints = j.at("model_dims").at("joints").get<std::size_t>();
    ck.model_shape = j.at("model_dims").at("shape").get<std::size_t>();
    ck.model_keypoints = j.at("model_dims").at("keypoints").get<std::size_t>();
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Parse, std::string("checkpoint: ") + e.what());
  }
  ck.net = net::config_from_json(j.at("net"));
  auto tensors = ad::tensors_from_json(j.at("params"));
  for (auto& [n, t] : tensors) t.set_requires_grad(true);
  ck.weights = net::NetWeights(std::move(tensors));
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_json_file(path, checkpoint_to_json(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(io::read_json_file(path)); }

void check_model_dims(const Checkpoint& ck, const body::BodyModelDef& model) {
  auto mismatch = [&](const char* what, std::size_t a, std::size_t b) {
    if (a != b) {
      fail(ErrorKind::ConfigMismatch, std::string("model ") + what + " mismatch: checkpoint has " + std::to_string(a) +
                                          ", model has " + std::to_string(b));
    }
  };
  mismatch("joint count", ck.model_joints, model.num_joints());
  mismatch("shape dimension", ck.model_shape, model.num_shape());
  mismatch("keypoint count", ck.model_keypoints, model.num_keypoints());
  net::check_compatible(ck.weights, ck.net, model);
}

void check_dataset_dims(const Checkpoint& ck, const synth::Dataset& data) {
  for (const auto& s : data.samples) {
    const auto kp = static_cast<std::size_t>(s.gt_keypoints3d.rows());
    const auto joints = static_cast<std::size_t>(s.gt_params.pose.rows());
    const auto shape = static_cast<std::size_t>(s.gt_params.shape.size());
    if (kp != ck.model_keypoints || joints != ck.model_joints || shape != ck.model_shape) {
      fail(ErrorKind::ConfigMismatch,
           "model dimension mismatch: checkpoint (joints=" + std::to_string(ck.model_joints) +
               ", shape=" + std::to_string(ck.model_shape) + ", keypoints=" + std::to_string(ck.model_keypoints) +
               ") vs dataset sample '" + s.id + "' (joints=" + std::to_string(joints) + ", shape=" +
               std::to_string(shape) + ", keypoints=" + std::to_string(kp) + ")");
    }
    for (const auto& img : s.input_blobs) {
      if (img.dim(0) != ck.net.input_channels) {
        fail(ErrorKind::ConfigMismatch, "input channel mismatch: checkpoint expects " +
                                            std::to_string(ck.net.input_channels) + ", dataset sample '" + s.id +
                                            "' has " + std::to_string(img.dim(0)));
      }
    }
  }
}

std::string trace_header() { return "step,l3d,l2d,ltheta,lprior_pose,lprior_shape,total"; }

std::string trace_line(const TraceRow& r) {
  return std::to_string(r.step) + "," + fmt(r.l3d) + "," + fmt(r.l2d) + "," + fmt(r.ltheta) + "," +
         fmt(r.lprior_pose) + "," + fmt(r.lprior_shape) + "," + fmt(r.total);
}

net::PipelineInput pipeline_input(const synth::Sample& s) {
  return {s.calibs, s.input_blobs, s.pelvis_detections, std::nullopt};
}

loss::LossTarget loss_target(const synth::Sample& s, const body::BodyModelDef& model) {
  loss::LossTarget t;
  t.keypoints3d = s.gt_keypoints3d;
  for (std::size_t c = 0; c < s.calibs.size(); ++c) {
    t.keypoints2d.push_back({s.calibs[c].id, s.gt_keypoints2d[c], s.calibs[c].width, s.calibs[c].height});
  }
  if (s.gt_params_available) t.params = s.gt_params;
  t.root_keypoint = static_cast<std::size_t>(model.root_keypoint);
  return t;
}

TrainResult train(const RunConfig& cfg, const synth::Dataset& data, const body::BodyModelDef& model,
                  const loss::GmmPrior& prior, const TrainOutputs& outputs) {
  validate(cfg);
  if (data.samples.empty()) fail(ErrorKind::InvalidInput, "train: empty dataset");
  net::NetWeights weights = net::init_weights(cfg.net, model, derive_seed(cfg.seed, 0));

  TrainResult result;
  std::ofstream trace_file;
  if (outputs.dir) {
    std::filesystem::create_directories(*outputs.dir);
    trace_file.open(*outputs.dir / "loss_trace.csv", std::ios::binary | std::ios::trunc);
    if (!trace_file) fail(ErrorKind::Io, "cannot write " + (*outputs.dir / "loss_trace.csv").string());
    trace_file << trace_header() << "\n";
  }
  auto write_checkpoint = [&](std::size_t step) {
    if (outputs.dir) save_checkpoint(make_checkpoint(cfg, model, weights, step), *outputs.dir / "checkpoint.json");
  };

  std::vector<ad::Tensor> backbone = weights.backbone(), rest = weights.rest();
  ad::AdamState adam_backbone = ad::make_adam_state(backbone, {cfg.lr_backbone});
  ad::AdamState adam_rest = ad::make_adam_state(rest, {cfg.lr_rest});

  std::vector<loss::LossTarget> targets;
  for (const auto& s : data.samples) targets.push_back(loss_target(s, model));

  const std::size_t n = data.samples.size();
  std::vector<std::size_t> order(n);
  std::size_t cursor = n, epoch = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    ad::Tape tape;
    std::vector<std::pair<std::string, ad::Tensor>> watched;
    TraceRow row;
    row.step = step;
    ad::Tensor total;
    try {
      ad::TapeScope scope(tape);
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        if (cursor == n) {
          // Fisher-Yates with the library RNG so the order is toolchain independent.
          std::iota(order.begin(), order.end(), 0);
          Rng rng(derive_seed(cfg.seed, 1000 + epoch++));
          for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
          cursor = 0;
        }
        const std::size_t idx = order[cursor++];
        const std::string tag = "sample '" + data.samples[idx].id + "' ";
        net::PipelineOutput out;
        try {
          out = net::forward_pipeline(model, weights, cfg.net, pipeline_input(data.samples[idx]));
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::NumericalFailure) throw;
          // "NaN in <stage>" -> "NaN in sample '<id>' <stage>"
          std::string what = e.what();
          const std::string prefix = "NaN in ";
          if (what.starts_with(prefix)) what = what.substr(prefix.size());
          fail(ErrorKind::NumericalFailure, prefix + tag + what);
        }
        const auto terms = loss::total_loss(out.as_prediction(), targets[idx], cfg.loss_weights, prior);
        watched.emplace_back(tag + "total loss", terms.total);
        const auto w = terms.weighted_values();
        row.l3d += w[0];
        row.l2d += w[1];
        row.ltheta += w[2];
        row.lprior_pose += w[3];
        row.lprior_shape += w[4];
        total = b == 0 ? terms.total : ad::add(total, terms.total);
      }
      total = ad::scale(total, 1.0 / static_cast<double>(cfg.batch));
      tape.backward(total);
      if (auto bad = first_nan(watched, weights.named(), true)) fail(ErrorKind::NumericalFailure, "NaN in " + *bad);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NumericalFailure) throw;
      // Weights are untouched until the optimizer step, so they are the last good ones.
      write_checkpoint(step - 1);
      fail(ErrorKind::NumericalFailure, "step " + std::to_string(step) + ": " + e.what());
    }
    const double inv = 1.0 / static_cast<double>(cfg.batch);
    row.l3d *= inv;
    row.l2d *= inv;
    row.ltheta *= inv;
    row.lprior_pose *= inv;
    row.lprior_shape *= inv;
    row.total = total.item();

    ad::adam_step(backbone, adam_backbone);
    ad::adam_step(rest, adam_rest);
    for (auto& p : weights.named()) p.second.zero_grad();

    result.trace.push_back(row);
    if (trace_file) trace_file << trace_line(row) << "\n";
    if (outputs.on_step) outputs.on_step(row);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps) write_checkpoint(step);
  }
  write_checkpoint(cfg.steps);
  result.checkpoint = make_checkpoint(cfg, model, weights, cfg.steps);
  return result;
}

TrainResult run_training(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  validate(cfg);
  const auto model = body::resolve_model(cfg.model);
  const auto prior = loss::resolve_prior(cfg.prior, model);
  const auto data = synth::load_dataset(cfg.train_data);
  Checkpoint probe = make_checkpoint(cfg, model, net::zero_weights(cfg.net, model), 0);
  check_dataset_dims(probe, data);
  std::filesystem::create_directories(out_dir);
  io::write_json_file(out_dir / "run_config.json", run_config_to_json(cfg));
  auto result = train(cfg, data, model, prior, {out_dir, {}});
  if (cfg.eval_data) {
    const auto eval_set = synth::load_dataset(*cfg.eval_data);
    check_dataset_dims(result.checkpoint, eval_set);
    metrics::write_report(evaluate(result.checkpoint, eval_set, model), out_dir / "eval_report.json",
                          out_dir / "eval_report.csv");
  }
  return result;
}

double dataset_loss(const Checkpoint& ck, const synth::Dataset& data, const body::BodyModelDef& model,
                    const loss::GmmPrior& prior, const loss::LossWeights& w) {
  ad::NoGradScope no_grad;
  double total = 0.0;
  for (const auto& s : data.samples) {
    const auto out = net::forward_pipeline(model, ck.weights, ck.net, pipeline_input(s));
    total += loss::total_loss(out.as_prediction(), loss_target(s, model), w, prior).total.item();
  }
  return total / static_cast<double>(data.samples.size());
}

metrics::EvalReport evaluate(const Checkpoint& ck, const synth::Dataset& data, const body::BodyModelDef& model,
                             const EvalSettings& settings) {
  check_model_dims(ck, model);
  check_dataset_dims(ck, data);
  ad::NoGradScope no_grad;
  auto opts = settings.metrics;
  opts.root_index = static_cast<std::size_t>(model.root_keypoint);
  std::vector<metrics::FrameResult> frames;
  for (const auto& s : data.samples) {
    Eigen::MatrixXd pred = s.gt_keypoints3d;
    if (!settings.oracle) {
      pred = to_matrix(net::forward_pipeline(model, ck.weights, ck.net, pipeline_input(s)).keypoints3d);
    }
    frames.push_back(metrics::evaluate_frame(s.id, pred, s.gt_keypoints3d, opts));
  }
  return metrics::summarize(std::move(frames), model.num_keypoints(), opts);
}

Inference infer(const Checkpoint& ck, const synth::Sample& s, const body::BodyModelDef& model) {
  check_model_dims(ck, model);
  ad::NoGradScope no_grad;
  const auto out = net::forward_pipeline(model, ck.weights, ck.net, pipeline_input(s));
  Inference inf;
  inf.sample_id = s.id;
  inf.params.pose = to_matrix(out.pose);
  inf.params.shape = Eigen::Map<const Eigen::VectorXd>(out.shape.data().data(), static_cast<Eigen::Index>(out.shape.size()));
  inf.keypoints3d = to_matrix(out.keypoints3d);
  for (const auto& v : out.keypoints2d) inf.keypoints2d.emplace_back(v.camera_id, to_matrix(v.pixels));
  inf.center = out.center;
  return inf;
}

io::Json inference_to_json(const Inference& inf) {
  io::Json j;
  j["sample_id"] = inf.sample_id;
  j["params"] = body::params_to_json(inf.params);
  j["pelvis_center"] = io::vector_to_json(inf.center);
  j["keypoints3d"] = io::matrix_to_json(inf.keypoints3d);
  io::Json views = io::Json::object();
  for (const auto& [id, px] : inf.keypoints2d) views[id] = io::matrix_to_json(px);
  j["keypoints2d"] = std::move(views);
  return j;
}

}  // namespace volagg::train
