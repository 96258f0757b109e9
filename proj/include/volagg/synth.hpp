#pragma once

// Deterministic synthetic scenes: camera rigs, posed bodies, keypoints,
// noisy pelvis detections and Gaussian-blob encoder inputs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/bodymodel.hpp"
#include "volagg/calib.hpp"
#include "volagg/geom.hpp"
#include "volagg/json_util.hpp"
#include "volagg/tensor.hpp"

namespace volagg::synth {

struct RigOptions {
  std::size_t cameras = 4;
  double radius_mm = 3500.0;
  double height_mm = 300.0;
  double focal_px = 100.0;
  int width = 96;
  int height = 96;
};

// Cameras evenly spaced on a circle of the given radius at the given height,
// each looking at the origin with z up. The seed jitters the azimuths.
std::vector<calib::CameraCalib> generate_rig(const RigOptions& options, std::uint64_t seed);

struct SampleOptions {
  double pose_scale = 0.5;        // max axis-angle norm per joint row, radians
  double pixel_noise = 1.0;       // pelvis detection noise sigma, px
  double pelvis_range_mm = 300.0;  // pelvis uniform in [-range, range]^3
  double blob_sigma = 4.0;        // px
  std::size_t blob_channels = 4;
  bool gt_params_available = true;
  int max_attempts = 100;
};

struct Sample {
  std::string id;
  std::vector<calib::CameraCalib> calibs;
  body::BodyParams gt_params;
  bool gt_params_available = true;
  Eigen::MatrixXd gt_keypoints3d;               // [J',3] world mm
  std::vector<Eigen::MatrixXd> gt_keypoints2d;  // per camera [J',2] px
  std::vector<geom::Detection2D> pelvis_detections;
  std::vector<ad::Tensor> input_blobs;          // per camera [C,H,W]
};

// Draws shape, pose and pelvis position, projects into every camera and
// renders the blob images. Draws are repeated with derived seeds until every
// keypoint lands inside every image; throws RetryExhausted after
// options.max_attempts draws.
Sample generate_sample(const body::BodyModelDef& model, const std::vector<calib::CameraCalib>& rig,
                       const SampleOptions& options, std::uint64_t seed, const std::string& id = "sample");

// Channel k sums unit-peak isotropic Gaussians centered at keypoints
// j with j % channels == k, evaluated at pixel centers.
ad::Tensor render_feature_blobs(const Eigen::MatrixXd& keypoints2d, int width, int height, double sigma,
                                std::size_t channels);

struct DatasetOptions {
  std::size_t count = 16;
  RigOptions rig;
  SampleOptions sample;
  std::string model = "builtin:toy";
  std::uint64_t seed = 0;
};

struct Dataset {
  std::filesystem::path root;
  DatasetOptions options;
  std::vector<calib::CameraCalib> rig;
  std::vector<Sample> samples;
};

io::Json dataset_options_to_json(const DatasetOptions& options);
DatasetOptions dataset_options_from_json(const io::Json& json);

// Writes rig.json, manifest.json and per sample sample_NNNN.json plus
// sample_NNNN.blobs.bin into `dir` (created if missing).
Dataset generate_dataset(const DatasetOptions& options, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Loads one sample file; its rig and blob files resolve next to it.
Sample load_sample(const std::filesystem::path& file);

io::Json sample_to_json(const Sample& sample, const std::string& rig_file, const std::string& blob_file);

}  // namespace volagg::synth
