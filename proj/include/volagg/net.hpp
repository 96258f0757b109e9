#pragma once

// The learned pipeline: per-view 2D encoder with a 1x1 reducer g, the
// volumetric encoder, the iterative parameter regressor and the full
// multi-view forward pass.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/bodymodel.hpp"
#include "volagg/calib.hpp"
#include "volagg/geom.hpp"
#include "volagg/json_util.hpp"
#include "volagg/loss.hpp"
#include "volagg/tensor.hpp"
#include "volagg/volume.hpp"

namespace volagg::net {

struct NetConfig {
  std::size_t input_channels = 4;
  // Strided 3x3 conv widths followed by the reducer output width, which must
  // equal volume.channels.
  std::vector<std::size_t> encoder2d_channels{8, 8};
  volume::VolumeConfig volume{2500.0, 8, 8};
  std::size_t encoder3d_blocks = 2;
  std::size_t group_norm_groups = 4;
  std::size_t regressor_hidden = 256;
  std::size_t regress_iterations = 4;
  // Theta_0; zero pose and shape when absent.
  std::optional<body::BodyParams> init_params;
};

// Throws Config naming the offending field.
void validate(const NetConfig& config);

io::Json config_to_json(const NetConfig& config);
NetConfig config_from_json(const io::Json& json);

// Number of 2x average-pooling stages from L down to 2.
std::size_t pooling_stages(std::size_t resolution);
// Residual blocks placed before each pooling stage.
std::vector<std::size_t> blocks_per_stage(const NetConfig& config);

// Named parameters. Insertion order is fixed by the config.
class NetWeights {
 public:
  NetWeights() = default;
  explicit NetWeights(ad::NamedTensors tensors);

  const ad::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const ad::NamedTensors& named() const { return tensors_; }
  ad::NamedTensors& named() { return tensors_; }
  std::size_t parameter_count() const;

  // Parameters of the 2D backbone (names starting with "encoder2d.") and
  // everything else, the two learning-rate groups.
  std::vector<ad::Tensor> backbone() const;
  std::vector<ad::Tensor> rest() const;
  std::vector<ad::Tensor> all() const;

 private:
  ad::NamedTensors tensors_;
};

// He-normal convolution and hidden-layer weights, zero biases and a
// zero-initialized final regressor layer. Deterministic in the seed.
NetWeights init_weights(const NetConfig& config, const body::BodyModelDef& model, std::uint64_t seed);

// Same names and shapes as init_weights, every entry zero.
NetWeights zero_weights(const NetConfig& config, const body::BodyModelDef& model);

// Checks names and shapes against the config and model; throws ConfigMismatch
// naming the first differing tensor.
void check_compatible(const NetWeights& weights, const NetConfig& config, const body::BodyModelDef& model);

// image: [C,H,W] -> feature map [K, ceil(H/s), ceil(W/s)] with s the total stride.
calib::FeatureMap encode2d(const ad::Tensor& image, const NetWeights& weights, const NetConfig& config);

// Aggregated volume -> flattened [K*8] features.
ad::Tensor encode3d(const ad::Tensor& volume, const NetWeights& weights, const NetConfig& config);

struct Regressed {
  ad::Tensor pose;   // [J,3]
  ad::Tensor shape;  // [B]
};

// T iterations of theta += fc2(relu(fc1(concat(features, theta)))).
Regressed regress_params(const ad::Tensor& features, const NetWeights& weights, const NetConfig& config,
                         const body::BodyModelDef& model);

struct PipelineInput {
  std::vector<calib::CameraCalib> calibs;
  std::vector<ad::Tensor> images;  // per camera [C,H,W]
  std::vector<geom::Detection2D> pelvis_detections;
  std::optional<Eigen::Vector3d> center;  // overrides triangulation
};

struct PipelineOutput {
  ad::Tensor pose;         // [J,3]
  ad::Tensor shape;        // [B]
  ad::Tensor vertices;     // [V,3] world mm
  ad::Tensor keypoints3d;  // [J',3] world mm
  std::vector<loss::ViewKeypoints> keypoints2d;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();

  loss::LossPrediction as_prediction() const { return {pose, shape, keypoints3d, keypoints2d}; }
};

// Triangulate the pelvis, back-project each view's features into the cuboid
// around it, aggregate, encode, regress, skin and anchor the model's pelvis
// keypoint on the center. Differentiable with respect to the weights.
PipelineOutput forward_pipeline(const body::BodyModelDef& model, const NetWeights& weights, const NetConfig& config,
                                const PipelineInput& input);

}  // namespace volagg::net
