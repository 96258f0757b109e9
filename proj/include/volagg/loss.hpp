#pragma once

// Training objective: 3D and 2D keypoint terms, direct parameter supervision,
// the Gaussian-mixture pose prior and the shape regularizer.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/bodymodel.hpp"
#include "volagg/json_util.hpp"
#include "volagg/tensor.hpp"

namespace volagg::loss {

struct GmmPrior {
  std::vector<double> weights;              // g_j, sum to 1
  std::vector<Eigen::VectorXd> means;       // mu_j [d]
  std::vector<Eigen::MatrixXd> covariances; // Sigma_j [d,d]
  std::vector<Eigen::MatrixXd> cholesky;    // lower-triangular L_j, Sigma_j = L_j L_j^T
  std::vector<double> log_det;              // log det Sigma_j
  double c = 1.0;

  std::size_t count() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : static_cast<std::size_t>(means.front().size()); }
};

// Validates (weights positive and summing to 1 within 1e-9, SPD covariances,
// c > 0) and precomputes the factorizations. Throws InvalidInput.
GmmPrior make_gmm_prior(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
                        std::vector<Eigen::MatrixXd> covariances, double c = 1.0);

// Deterministic synthetic 8-component prior over `dim` pose coordinates,
// with c set so the minimum energy over all theta is 0.
GmmPrior toy_gmm_prior(std::size_t dim);

// Negative log of c * g_j * N(theta; mu_j, Sigma_j).
double component_energy(const GmmPrior& prior, std::size_t j, const Eigen::VectorXd& theta);

io::Json prior_to_json(const GmmPrior& prior);
GmmPrior prior_from_json(const io::Json& json);
GmmPrior load_prior(const std::filesystem::path& path);
// "builtin:toy" (sized for the model's non-root pose) or a prior file path.
GmmPrior resolve_prior(const std::string& spec, const body::BodyModelDef& model);

// theta: any shape with dim() entries. Minimum component energy; the gradient
// flows through the arg-min component.
ad::Tensor pose_prior_gmm(const ad::Tensor& theta, const GmmPrior& prior);

// Non-root pose rows of a [J,3] pose, flattened to [3(J-1)].
ad::Tensor prior_pose_coordinates(const ad::Tensor& pose);

// ||beta||^2
ad::Tensor shape_prior(const ad::Tensor& beta);

// Root-relative mean squared error over all coordinates of [J',3] sets.
// Throws NumericalFailure on NaN inputs.
ad::Tensor loss_3d(const ad::Tensor& pred, const Eigen::MatrixXd& gt, std::size_t root_index);

struct ViewKeypoints {
  std::string camera_id;
  ad::Tensor pixels;  // [J',2]
};

struct ViewTarget {
  std::string camera_id;
  Eigen::MatrixXd pixels;  // [J',2]
  int width = 1;
  int height = 1;
};

// Sum over cameras of the MSE of image coordinates normalized to [-1,1].
// Throws InvalidInput when the camera id sets differ.
ad::Tensor loss_2d(const std::vector<ViewKeypoints>& pred, const std::vector<ViewTarget>& gt);

// MSE over the concatenated (pose, shape) vector.
ad::Tensor loss_smpl_params(const ad::Tensor& pose, const ad::Tensor& shape, const body::BodyParams& gt);
// Without ground truth there is nothing to compare against.
ad::Tensor loss_smpl_params(const ad::Tensor& pose, const ad::Tensor& shape, const std::optional<body::BodyParams>& gt);

struct LossWeights {
  double l3d = 1.0;
  double l2d = 1.0;
  double ltheta = 1.0;
  double lprior_pose = 1e-3;
  double lprior_shape = 1e-3;
};

void validate(const LossWeights& weights);
io::Json weights_to_json(const LossWeights& weights);
LossWeights weights_from_json(const io::Json& json);

struct LossPrediction {
  ad::Tensor pose;         // [J,3]
  ad::Tensor shape;        // [B]
  ad::Tensor keypoints3d;  // [J',3] world mm
  std::vector<ViewKeypoints> keypoints2d;
};

struct LossTarget {
  Eigen::MatrixXd keypoints3d;  // [J',3]
  std::vector<ViewTarget> keypoints2d;
  std::optional<body::BodyParams> params;
  std::size_t root_keypoint = 0;
};

// Unweighted terms; the branch that does not apply holds a constant zero.
struct LossTerms {
  ad::Tensor l3d, l2d, ltheta, lprior_pose, lprior_shape;
  ad::Tensor total;  // weighted sum
  LossWeights weights;

  // {l3d, l2d, ltheta, lprior_pose, lprior_shape} each multiplied by its weight.
  std::vector<double> weighted_values() const;
};

// l3d*L3D + l2d*L2D + (params present ? ltheta*LTheta : lprior_pose*Lpose + lprior_shape*Lshape)
LossTerms total_loss(const LossPrediction& pred, const LossTarget& target, const LossWeights& weights,
                     const GmmPrior& prior);

}  // namespace volagg::loss
