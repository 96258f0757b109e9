#pragma once

// Algebraic triangulation and similarity (Procrustes) alignment.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/calib.hpp"

namespace volagg::geom {

struct Detection2D {
  std::string camera_id;
  Eigen::Vector2d point;  // pixels
  double confidence = 1.0;
};

// Homogeneous DLT. Each view contributes the two cross-product rows
// u*p3 - p1 and v*p3 - p2, normalized to unit length and then multiplied by
// the view's confidence. Detections are matched to projections by id.
//
// Throws InsufficientViews with fewer than two views of positive confidence,
// DegenerateGeometry when the two smallest singular values coincide within
// 1e-9 relative to the largest, InvalidInput for unknown ids or bad
// confidences.
Eigen::Vector3d triangulate_dlt(const std::vector<Detection2D>& detections,
                                const std::vector<calib::ProjectionMatrix>& projections);

struct Alignment {
  Eigen::MatrixXd aligned;  // [n,3] = scale * R * pred + t
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

// Least-squares similarity transform from pred onto gt (Umeyama), with the
// determinant-sign correction so rotation is never a reflection.
// Throws DegenerateAlignment for n < 3 or zero-variance pred or gt.
Alignment procrustes_align(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt);

}  // namespace volagg::geom
