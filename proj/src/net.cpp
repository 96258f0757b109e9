#include "volagg/net.hpp"

#include <algorithm>
#include <cmath>

#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/rng.hpp"

namespace volagg::net {

namespace {

std::string conv_name(std::size_t i) { return "encoder2d.conv" + std::to_string(i); }
std::string block_name(std::size_t b) { return "encoder3d.block" + std::to_string(b); }

std::size_t feature_length(const NetConfig& c) { return c.volume.channels * 8; }

body::BodyParams initial_params(const NetConfig& c, const body::BodyModelDef& model) {
  if (c.init_params) return *c.init_params;
  return body::BodyParams::zeros(model.num_joints(), model.num_shape());
}

// (name, shape, fan_in) for every parameter in canonical order; fan_in 0
// marks zero-initialized entries.
struct ParamSpec {
  std::string name;
  ad::Shape shape;
  std::size_t fan_in;
};

std::vector<ParamSpec> param_specs(const NetConfig& c, const body::BodyModelDef& model) {
  std::vector<ParamSpec> specs;
  std::size_t in = c.input_channels;
  const auto& ch = c.encoder2d_channels;
  for (std::size_t i = 0; i + 1 < ch.size(); ++i) {
    specs.push_back({conv_name(i) + ".weight", {ch[i], in, 3, 3}, in * 9});
    specs.push_back({conv_name(i) + ".bias", {ch[i]}, 0});
    in = ch[i];
  }
  const std::size_t K = c.volume.channels;
  specs.push_back({"reducer.weight", {K, in, 1, 1}, in});
  specs.push_back({"reducer.bias", {K}, 0});
  const auto per_stage = blocks_per_stage(c);
  std::size_t b = 0;
  for (std::size_t n : per_stage) {
    for (std::size_t k = 0; k < n; ++k, ++b) {
      specs.push_back({block_name(b) + ".conv1.weight", {K, K, 3, 3, 3}, K * 27});
      specs.push_back({block_name(b) + ".conv2.weight", {K, K, 3, 3, 3}, K * 27});
    }
  }
  const std::size_t P = model.num_params();
  specs.push_back({"regressor.fc1.weight", {c.regressor_hidden, feature_length(c) + P}, feature_length(c) + P});
  specs.push_back({"regressor.fc1.bias", {c.regressor_hidden}, 0});
  specs.push_back({"regressor.fc2.weight", {P, c.regressor_hidden}, 0});
  specs.push_back({"regressor.fc2.bias", {P}, 0});
  return specs;
}

ad::Tensor residual_block(const ad::Tensor& x, const NetWeights& w, const NetConfig& c, std::size_t b) {
  const std::string n = block_name(b);
  ad::Tensor h = ad::conv3d(x, w.get(n + ".conv1.weight"));
  h = ad::relu(ad::group_norm(h, c.group_norm_groups));
  h = ad::conv3d(h, w.get(n + ".conv2.weight"));
  h = ad::group_norm(h, c.group_norm_groups);
  return ad::relu(ad::add(h, x));
}

}  // namespace

void validate(const NetConfig& c) {
  volume::validate(c.volume);
  if (c.input_channels < 1) fail(ErrorKind::Config, "net.input_channels must be >= 1");
  if (c.encoder2d_channels.empty()) fail(ErrorKind::Config, "net.encoder2d_channels must not be empty");
  for (std::size_t v : c.encoder2d_channels) {
    if (v < 1) fail(ErrorKind::Config, "net.encoder2d_channels entries must be >= 1");
  }
  if (c.encoder2d_channels.back() != c.volume.channels) {
    fail(ErrorKind::Config, "net.encoder2d_channels must end with the volume channel count " +
                                std::to_string(c.volume.channels));
  }
  pooling_stages(c.volume.resolution);
  if (c.group_norm_groups < 1 || c.volume.channels % c.group_norm_groups != 0) {
    fail(ErrorKind::Config, "net.group_norm_groups must divide the volume channel count");
  }
  if (c.regressor_hidden < 1) fail(ErrorKind::Config, "net.regressor_hidden must be >= 1");
  if (c.regress_iterations < 1) fail(ErrorKind::Config, "net.regress_iterations must be >= 1");
}

std::size_t pooling_stages(std::size_t L) {
  if (L < 2 || (L & (L - 1)) != 0) {
    fail(ErrorKind::Config, "volume resolution " + std::to_string(L) + " is not a power of two >= 2");
  }
  std::size_t stages = 0;
  while (L > 2) {
    L /= 2;
    ++stages;
  }
  return stages;
}

std::vector<std::size_t> blocks_per_stage(const NetConfig& c) {
  // Blocks are spread evenly over the resolutions visited before each pooling
  // step (plus the final 2^3 stage when there is no pooling at all).
  const std::size_t stages = std::max<std::size_t>(1, pooling_stages(c.volume.resolution));
  std::vector<std::size_t> out(stages, 0);
  for (std::size_t s = 0; s < stages; ++s) {
    out[s] = c.encoder3d_blocks * (s + 1) / stages - c.encoder3d_blocks * s / stages;
  }
  return out;
}

io::Json config_to_json(const NetConfig& c) {
  io::Json j;
  j["input_channels"] = c.input_channels;
  j["encoder2d_channels"] = c.encoder2d_channels;
  j["volume"] = {{"side_length", c.volume.side_length}, {"resolution", c.volume.resolution}, {"channels", c.volume.channels}};
  j["encoder3d_blocks"] = c.encoder3d_blocks;
  j["group_norm_groups"] = c.group_norm_groups;
  j["regressor_hidden"] = c.regressor_hidden;
  j["regress_iterations"] = c.regress_iterations;
  if (c.init_params) j["init_params"] = body::params_to_json(*c.init_params);
  return j;
}

NetConfig config_from_json(const io::Json& j) {
  if (!j.is_object()) fail(ErrorKind::Config, "net config must be an object");
  NetConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "input_channels") c.input_channels = value.get<std::size_t>();
      else if (key == "encoder2d_channels") c.encoder2d_channels = value.get<std::vector<std::size_t>>();
      else if (key == "volume") {
        for (const auto& [vk, vv] : value.items()) {
          if (vk == "side_length") c.volume.side_length = vv.get<double>();
          else if (vk == "resolution") c.volume.resolution = vv.get<std::size_t>();
          else if (vk == "channels") c.volume.channels = vv.get<std::size_t>();
          else fail(ErrorKind::Config, "net.volume: unknown key \"" + vk + "\"");
        }
      } else if (key == "encoder3d_blocks") c.encoder3d_blocks = value.get<std::size_t>();
      else if (key == "group_norm_groups") c.group_norm_groups = value.get<std::size_t>();
      else if (key == "regressor_hidden") c.regressor_hidden = value.get<std::size_t>();
      else if (key == "regress_iterations") c.regress_iterations = value.get<std::size_t>();
      else if (key == "init_params") c.init_params = body::params_from_json(value);
      else fail(ErrorKind::Config, "net: unknown key \"" + key + "\"");
    }
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Config, std::string("net config: ") + e.what());
  }
  validate(c);
  return c;
}

NetWeights::NetWeights(ad::NamedTensors tensors) : tensors_(std::move(tensors)) {}

const ad::Tensor& NetWeights::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_) {
    if (n == name) return t;
  }
  fail(ErrorKind::InvalidInput, "weights: no tensor named \"" + name + "\"");
}

bool NetWeights::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const auto& p) { return p.first == name; });
}

std::size_t NetWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : tensors_) n += p.second.size();
  return n;
}

std::vector<ad::Tensor> NetWeights::backbone() const {
  std::vector<ad::Tensor> out;
  for (const auto& [n, t] : tensors_) {
    if (n.rfind("encoder2d.", 0) == 0) out.push_back(t);
  }
  return out;
}

std::vector<ad::Tensor> NetWeights::rest() const {
  std::vector<ad::Tensor> out;
  for (const auto& [n, t] : tensors_) {
    if (n.rfind("encoder2d.", 0) != 0) out.push_back(t);
  }
  return out;
}

std::vector<ad::Tensor> NetWeights::all() const {
  std::vector<ad::Tensor> out;
  for (const auto& p : tensors_) out.push_back(p.second);
  return out;
}

NetWeights init_weights(const NetConfig& config, const body::BodyModelDef& model, std::uint64_t seed) {
  validate(config);
  ad::NamedTensors tensors;
  std::uint64_t stream = 0;
  for (const auto& spec : param_specs(config, model)) {
    std::vector<double> data(ad::numel(spec.shape), 0.0);
    if (spec.fan_in > 0) {
      Rng rng(derive_seed(seed, stream));
      const double stddev = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
      for (double& v : data) v = stddev * rng.normal();
    }
    ++stream;
    tensors.emplace_back(spec.name, ad::Tensor(spec.shape, std::move(data), true));
  }
  return NetWeights(std::move(tensors));
}

NetWeights zero_weights(const NetConfig& config, const body::BodyModelDef& model) {
  validate(config);
  ad::NamedTensors tensors;
  for (const auto& spec : param_specs(config, model)) {
    tensors.emplace_back(spec.name, ad::Tensor::zeros(spec.shape, true));
  }
  return NetWeights(std::move(tensors));
}

void check_compatible(const NetWeights& weights, const NetConfig& config, const body::BodyModelDef& model) {
  const auto specs = param_specs(config, model);
  const auto& named = weights.named();
  if (named.size() != specs.size()) {
    fail(ErrorKind::ConfigMismatch, "weights hold " + std::to_string(named.size()) + " tensors, config expects " +
                                        std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (named[i].first != specs[i].name) {
      fail(ErrorKind::ConfigMismatch, "weights tensor #" + std::to_string(i) + " is \"" + named[i].first +
                                          "\", config expects \"" + specs[i].name + "\"");
    }
    if (named[i].second.shape() != specs[i].shape) {
      fail(ErrorKind::ConfigMismatch, "weights tensor \"" + specs[i].name + "\" has shape " +
                                          ad::shape_str(named[i].second.shape()) + ", expected " +
                                          ad::shape_str(specs[i].shape));
    }
  }
}

calib::FeatureMap encode2d(const ad::Tensor& image, const NetWeights& w, const NetConfig& c) {
  if (image.rank() != 3 || image.dim(0) != c.input_channels) {
    fail(ErrorKind::DimensionMismatch, "encode2d: expected [" + std::to_string(c.input_channels) + ",H,W] input, got " +
                                           ad::shape_str(image.shape()));
  }
  ad::Tensor x = image;
  double scale = 1.0;
  for (std::size_t i = 0; i + 1 < c.encoder2d_channels.size(); ++i) {
    x = ad::relu(ad::conv2d(x, w.get(conv_name(i) + ".weight"), w.get(conv_name(i) + ".bias"), 2));
    scale *= 0.5;
  }
  x = ad::conv2d(x, w.get("reducer.weight"), w.get("reducer.bias"), 1);
  return calib::FeatureMap{x, scale};
}

ad::Tensor encode3d(const ad::Tensor& volume, const NetWeights& w, const NetConfig& c) {
  const std::size_t K = c.volume.channels, L = c.volume.resolution;
  if (volume.shape() != ad::Shape{K, L, L, L}) {
    fail(ErrorKind::DimensionMismatch, "encode3d: expected " + ad::shape_str({K, L, L, L}) + ", got " +
                                           ad::shape_str(volume.shape()));
  }
  const auto per_stage = blocks_per_stage(c);
  const std::size_t pools = pooling_stages(L);
  ad::Tensor x = volume;
  std::size_t b = 0;
  for (std::size_t s = 0; s < per_stage.size(); ++s) {
    for (std::size_t k = 0; k < per_stage[s]; ++k) x = residual_block(x, w, c, b++);
    if (s < pools) x = ad::avg_pool3d(x, 2);
  }
  return ad::flatten(x);
}

Regressed regress_params(const ad::Tensor& features, const NetWeights& w, const NetConfig& c,
                         const body::BodyModelDef& model) {
  if (features.rank() != 1 || features.size() != feature_length(c)) {
    fail(ErrorKind::DimensionMismatch, "regress_params: expected " + std::to_string(feature_length(c)) +
                                           " features, got " + ad::shape_str(features.shape()));
  }
  const body::BodyParams init = initial_params(c, model);
  const std::size_t J = model.num_joints(), B = model.num_shape();
  if (static_cast<std::size_t>(init.pose.rows()) != J || init.pose.cols() != 3 ||
      static_cast<std::size_t>(init.shape.size()) != B) {
    fail(ErrorKind::ConfigMismatch, "init_params dimensions do not match the body model");
  }
  std::vector<double> theta0;
  for (Eigen::Index r = 0; r < init.pose.rows(); ++r)
    for (Eigen::Index k = 0; k < 3; ++k) theta0.push_back(init.pose(r, k));
  for (Eigen::Index b = 0; b < init.shape.size(); ++b) theta0.push_back(init.shape[b]);
  ad::Tensor theta = ad::Tensor::vector(std::move(theta0));
  for (std::size_t it = 0; it < c.regress_iterations; ++it) {
    const std::vector<ad::Tensor> parts{features, theta};
    const ad::Tensor x = ad::concat(parts, 0);
    const ad::Tensor h = ad::relu(ad::linear(x, w.get("regressor.fc1.weight"), w.get("regressor.fc1.bias")));
    theta = ad::add(theta, ad::linear(h, w.get("regressor.fc2.weight"), w.get("regressor.fc2.bias")));
  }
  return {ad::reshape(ad::slice(theta, 0, 0, 3 * J), {J, 3}), ad::slice(theta, 0, 3 * J, B)};
}

PipelineOutput forward_pipeline(const body::BodyModelDef& model, const NetWeights& weights, const NetConfig& config,
                                const PipelineInput& input) {
  if (input.calibs.empty()) fail(ErrorKind::InvalidInput, "forward_pipeline: at least one camera required");
  if (input.images.size() != input.calibs.size()) {
    fail(ErrorKind::DimensionMismatch, "forward_pipeline: " + std::to_string(input.images.size()) + " images for " +
                                           std::to_string(input.calibs.size()) + " cameras");
  }
  std::vector<calib::ProjectionMatrix> Ps;
  for (const auto& c : input.calibs) Ps.push_back(calib::projection_matrix(c));

  PipelineOutput out;
  out.center = input.center ? *input.center : geom::triangulate_dlt(input.pelvis_detections, Ps);

  // Stops at the first stage whose output holds a NaN, naming it.
  auto check = [](const ad::Tensor& t, const std::string& what) {
    const auto d = t.data();
    if (std::any_of(d.begin(), d.end(), [](double v) { return std::isnan(v); })) {
      fail(ErrorKind::NumericalFailure, "NaN in " + what);
    }
  };
  if (!out.center.allFinite()) fail(ErrorKind::NumericalFailure, "NaN in pelvis center");

  const ad::Tensor grid = volume::make_grid(out.center, config.volume);
  std::vector<calib::FeatureMap> maps;
  for (std::size_t c = 0; c < input.images.size(); ++c) {
    maps.push_back(encode2d(input.images[c], weights, config));
    check(maps.back().data, "2D features of camera '" + input.calibs[c].id + "'");
  }
  const auto views = volume::backproject_views(maps, Ps, grid, out.center, config.volume);
  const auto aggregated = volume::aggregate_softmax(views);
  check(aggregated.data, "aggregated volume");
  const ad::Tensor features = encode3d(aggregated.data, weights, config);
  check(features, "volume features");
  const auto params = regress_params(features, weights, config, model);
  out.pose = params.pose;
  out.shape = params.shape;
  check(out.pose, "predicted pose");
  check(out.shape, "predicted shape");

  const auto body = body::forward(model, out.pose, out.shape);
  const ad::Tensor kp = body::regress_keypoints(model, body.vertices);
  check(kp, "predicted keypoints3d");
  // Anchor: subtract the model's pelvis keypoint, add the triangulated center.
  const ad::Tensor root = ad::slice(kp, 0, static_cast<std::size_t>(model.root_keypoint), 1);
  const ad::Tensor center = ad::Tensor::vector({out.center.x(), out.center.y(), out.center.z()});
  auto anchor = [&](const ad::Tensor& pts) {
    const ad::Tensor ones = ad::Tensor::full({pts.dim(0), 1}, 1.0);
    return ad::add(ad::sub(pts, ad::matmul(ones, root)), center);
  };
  out.keypoints3d = anchor(kp);
  out.vertices = anchor(body.vertices);
  for (std::size_t c = 0; c < Ps.size(); ++c) {
    out.keypoints2d.push_back({input.calibs[c].id, calib::project_points(out.keypoints3d, Ps[c])});
  }
  return out;
}

}  // namespace volagg::net
