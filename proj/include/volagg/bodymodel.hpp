#pragma once

// SMPL-style parametric body: shape blendshapes, optional pose correctives,
// axis-angle kinematic tree and linear blend skinning.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/jet.hpp"
#include "volagg/json_util.hpp"
#include "volagg/tensor.hpp"

namespace volagg::body {

// Dimensions of the full-scale SMPL model with the HMR keypoint regressor.
inline constexpr std::size_t kFullScaleVertices = 6890;
inline constexpr std::size_t kFullScaleJoints = 24;
inline constexpr std::size_t kFullScaleShape = 10;
inline constexpr std::size_t kFullScaleKeypoints = 49;

struct BodyModelDef {
  Eigen::MatrixXd template_vertices;         // [V,3] mm
  Eigen::MatrixXd shape_dirs;                // [3V,B], row 3*v + axis
  std::optional<Eigen::MatrixXd> pose_dirs;  // [3V, 9(J-1)], row-major (R_k - I) per non-root joint
  Eigen::MatrixXd skin_weights;              // [V,J]
  std::vector<int> parents;                  // parents[0] = -1, parents[k] < k
  Eigen::MatrixXd joint_regressor;           // [J,V]
  Eigen::MatrixXd keypoint_regressor;        // [J',V]
  int root_keypoint = 0;                     // keypoint pinned to the triangulated pelvis

  std::size_t num_vertices() const { return static_cast<std::size_t>(template_vertices.rows()); }
  std::size_t num_joints() const { return parents.size(); }
  std::size_t num_shape() const { return static_cast<std::size_t>(shape_dirs.cols()); }
  std::size_t num_keypoints() const { return static_cast<std::size_t>(keypoint_regressor.rows()); }
  // Length of one regression delta: J*3 pose entries plus B shape entries.
  std::size_t num_params() const { return num_joints() * 3 + num_shape(); }
};

// Throws InvalidInput naming the first failed check.
void validate(const BodyModelDef& model);

struct BodyParams {
  Eigen::MatrixXd pose;   // [J,3] axis-angle radians, row 0 = global orientation
  Eigen::VectorXd shape;  // [B]

  static BodyParams zeros(std::size_t joints, std::size_t shape_dims);
};

inline constexpr double kSmallAngle = 1e-8;

// Row-major 3x3 rotation from an axis-angle vector. Below kSmallAngle the
// second-order Taylor expansion I + W + W^2/2 is used.
template <class T>
std::array<T, 9> rodrigues_generic(const T& x, const T& y, const T& z) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T theta2 = x * x + y * y + z * z;
  if (ad::value_of(theta2) < kSmallAngle * kSmallAngle) {
    // W = [[0,-z,y],[z,0,-x],[-y,x,0]]; W^2 = a a^T - |a|^2 I
    const T h = T(0.5);
    return {T(1.0) + h * (x * x - theta2), -z + h * (x * y),              y + h * (x * z),
            z + h * (y * x),               T(1.0) + h * (y * y - theta2), -x + h * (y * z),
            -y + h * (z * x),              x + h * (z * y),               T(1.0) + h * (z * z - theta2)};
  }
  const T theta = sqrt(theta2);
  const T kx = x / theta, ky = y / theta, kz = z / theta;
  const T c = cos(theta), s = sin(theta);
  const T C = T(1.0) - c;
  return {c + kx * kx * C,      kx * ky * C - kz * s, kx * kz * C + ky * s,
          ky * kx * C + kz * s, c + ky * ky * C,      ky * kz * C - kx * s,
          kz * kx * C - ky * s, kz * ky * C + kx * s, c + kz * kz * C};
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);
// d R(r,c) / d aa_i for i = 0..2.
std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& axis_angle);

struct BodyOutput {
  ad::Tensor vertices;  // [V,3] mm, model root frame
  ad::Tensor joints;    // [J,3] mm
};

// pose: [J,3], shape: [B]. Differentiable with respect to both.
BodyOutput forward(const BodyModelDef& model, const ad::Tensor& pose, const ad::Tensor& shape);

struct BodyMesh {
  Eigen::MatrixXd vertices;  // [V,3]
  Eigen::MatrixXd joints;    // [J,3]
};
BodyMesh forward(const BodyModelDef& model, const BodyParams& params);

// X = W * vertices; vertices [V,3] -> [J',3].
ad::Tensor regress_keypoints(const BodyModelDef& model, const ad::Tensor& vertices);
Eigen::MatrixXd regress_keypoints(const BodyModelDef& model, const Eigen::MatrixXd& vertices);

// Deterministic stick-figure model: 64 vertices, 8 joints, 4 shape
// directions, 12 keypoints, about 1700 mm tall, z up, pelvis at the origin.
BodyModelDef builtin_toy_model();

io::Json model_to_json(const BodyModelDef& model);
BodyModelDef model_from_json(const io::Json& json);
BodyModelDef load_model(const std::filesystem::path& path);
void save_model(const BodyModelDef& model, const std::filesystem::path& path);

// "builtin:toy" or a model file path.
BodyModelDef resolve_model(const std::string& spec);

io::Json params_to_json(const BodyParams& params);
BodyParams params_from_json(const io::Json& json);

}  // namespace volagg::body
