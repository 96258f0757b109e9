#pragma once

// Pinhole cameras, projection, and bilinear feature-map sampling.
//
// World coordinates are millimeters. Pixel coordinates are continuous with
// pixel (i, j) covering [i, i+1) x [j, j+1); its center is (i+0.5, j+0.5).
// Feature maps use the same convention in cell units.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/json_util.hpp"
#include "volagg/tensor.hpp"

namespace volagg::calib {

struct CameraCalib {
  std::string id;
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();     // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();      // mm, world -> camera
  int width = 1;
  int height = 1;
};

// Throws InvalidInput naming the camera when an invariant fails.
void validate(const CameraCalib& calib, double rotation_tolerance = 1e-9);

struct ProjectionMatrix {
  Eigen::Matrix<double, 3, 4> matrix;
  std::string source_id;
};

ProjectionMatrix projection_matrix(const CameraCalib& calib);

// Camera at `eye` looking at `target` with image y pointing away from `up`,
// square pixels of focal length `focal` and the principal point at the image
// center. Throws InvalidInput when the view direction is parallel to `up`.
CameraCalib look_at_camera(const std::string& id, const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                           const Eigen::Vector3d& up, double focal, int width, int height);

inline constexpr double kMinDepth = 1e-6;

struct Projection {
  Eigen::Vector2d pixel;
  double depth;
};

// Throws PointBehindCamera when depth <= kMinDepth.
Projection project_point(const ProjectionMatrix& P, const Eigen::Vector3d& X);
std::optional<Projection> try_project(const ProjectionMatrix& P, const Eigen::Vector3d& X);
// d(pixel)/dX at X; requires depth != 0.
Eigen::Matrix<double, 2, 3> project_jacobian(const ProjectionMatrix& P, const Eigen::Vector3d& X);

// points: [n,3] -> pixels [n,2]. Throws PointBehindCamera for any point at or
// behind the camera plane.
ad::Tensor project_points(const ad::Tensor& points, const ProjectionMatrix& P);

struct FeatureMap {
  ad::Tensor data;                      // [K, h, w]
  double image_to_feature_scale = 1.0;  // feature cells per image pixel

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

// Four-corner interpolation stencil for one sample position.
struct BilinearStencil {
  bool visible = false;
  std::size_t row0 = 0, row1 = 0, col0 = 0, col1 = 0;
  double frac_row = 0.0, frac_col = 0.0;
  double scale = 1.0;

  double w00() const { return (1.0 - frac_row) * (1.0 - frac_col); }
  double w01() const { return (1.0 - frac_row) * frac_col; }
  double w10() const { return frac_row * (1.0 - frac_col); }
  double w11() const { return frac_row * frac_col; }

  // Interpolated value of one channel plane with row stride `width`, as
  // nested lerps a + f (b - a) so constant neighborhoods are reproduced exactly.
  double sample(const double* plane, std::size_t width) const {
    const double a = plane[row0 * width + col0], b = plane[row0 * width + col1];
    const double c = plane[row1 * width + col0], d = plane[row1 * width + col1];
    const double top = a + frac_col * (b - a);
    const double bottom = c + frac_col * (d - c);
    return top + frac_row * (bottom - top);
  }
};

BilinearStencil bilinear_stencil(std::size_t height, std::size_t width, double scale, const Eigen::Vector2d& pixel);

struct Sampled {
  Eigen::VectorXd features;
  bool visible = false;
};

// Out-of-hull positions return visible=false and zero features.
Sampled bilinear_sample(const FeatureMap& map, const Eigen::Vector2d& pixel);

io::Json calibration_to_json(const std::vector<CameraCalib>& cameras);
std::vector<CameraCalib> calibration_from_json(const io::Json& json);
std::vector<CameraCalib> load_calibration(const std::filesystem::path& path);
void save_calibration(const std::vector<CameraCalib>& cameras, const std::filesystem::path& path);

}  // namespace volagg::calib
