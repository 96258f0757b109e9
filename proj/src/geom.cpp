#include "volagg/geom.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "volagg/error.hpp"

namespace volagg::geom {

Eigen::Vector3d triangulate_dlt(const std::vector<Detection2D>& detections,
                                const std::vector<calib::ProjectionMatrix>& projections) {
  std::map<std::string, const calib::ProjectionMatrix*> by_id;
  for (const auto& P : projections) by_id[P.source_id] = &P;

  std::vector<const calib::ProjectionMatrix*> used;
  for (const auto& d : detections) {
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0) || !d.point.allFinite()) {
      fail(ErrorKind::InvalidInput, "triangulate: detection for camera '" + d.camera_id + "' is not finite or has confidence outside [0,1]");
    }
    auto it = by_id.find(d.camera_id);
    if (it == by_id.end()) fail(ErrorKind::InvalidInput, "triangulate: no projection for camera '" + d.camera_id + "'");
    used.push_back(d.confidence > 0.0 ? it->second : nullptr);
  }

  // Precondition the world frame: X = origin + scale * Y with the origin at
  // the centroid of the camera centers and the scale their RMS spread, so the
  // unknown point has roughly unit magnitude. Without this, millimetre
  // coordinates let the unit-norm homogeneous solution drift toward infinity
  // under pixel noise. The system is projectively equivalent, so noiseless
  // solutions are unchanged.
  std::vector<Eigen::Vector3d> centers;
  for (const auto* P : used) {
    if (P == nullptr) continue;
    const Eigen::Matrix3d M = P->matrix.leftCols<3>();
    Eigen::FullPivLU<Eigen::Matrix3d> lu(M);
    if (lu.isInvertible()) centers.push_back(-lu.solve(Eigen::Vector3d(P->matrix.col(3))));
  }
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  double scale = 1.0;
  if (!centers.empty()) {
    for (const auto& c : centers) origin += c;
    origin /= static_cast<double>(centers.size());
    double spread = 0.0;
    for (const auto& c : centers) spread += (c - origin).squaredNorm();
    spread = std::sqrt(spread / static_cast<double>(centers.size()));
    if (spread > 0.0 && std::isfinite(spread)) scale = spread;
    if (!origin.allFinite()) origin.setZero();
  }
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  T.topLeftCorner<3, 3>() *= scale;
  T.topRightCorner<3, 1>() = origin;

  std::vector<Eigen::RowVector4d> rows;
  std::size_t usable = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (used[i] == nullptr) continue;
    const auto& d = detections[i];
    ++usable;
    const Eigen::Matrix<double, 3, 4> M = used[i]->matrix * T;
    const Eigen::RowVector4d r1 = d.point.x() * M.row(2) - M.row(0);
    const Eigen::RowVector4d r2 = d.point.y() * M.row(2) - M.row(1);
    for (const auto& r : {r1, r2}) {
      const double n = r.norm();
      rows.push_back(n > 0.0 ? Eigen::RowVector4d(r / n * d.confidence) : Eigen::RowVector4d::Zero());
    }
  }
  if (usable < 2) {
    fail(ErrorKind::InsufficientViews, "triangulate: need at least 2 views with positive confidence, got " + std::to_string(usable));
  }
  Eigen::MatrixXd A(static_cast<Eigen::Index>(rows.size()), 4);
  for (std::size_t i = 0; i < rows.size(); ++i) A.row(static_cast<Eigen::Index>(i)) = rows[i];

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd s = svd.singularValues();  // descending, length 4 when rows >= 4
  if (std::abs(s[2] - s[3]) <= 1e-9 * s[0]) {
    std::ostringstream os;
    os << "triangulate: degenerate view geometry (singular values " << s[2] << ", " << s[3] << ")";
    fail(ErrorKind::DegenerateGeometry, os.str());
  }
  const Eigen::Vector4d Y = svd.matrixV().col(3);
  if (std::abs(Y[3]) <= 1e-12 * Y.head<3>().norm()) {
    fail(ErrorKind::DegenerateGeometry, "triangulate: solution lies at infinity");
  }
  return origin + scale * (Y.head<3>() / Y[3]);
}

Alignment procrustes_align(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt) {
  if (pred.cols() != 3 || gt.cols() != 3 || pred.rows() != gt.rows()) {
    fail(ErrorKind::DimensionMismatch, "procrustes: expected matching [n,3] point sets");
  }
  const auto n = pred.rows();
  if (n < 3) fail(ErrorKind::DegenerateAlignment, "procrustes: need at least 3 points, got " + std::to_string(n));
  const Eigen::RowVector3d mu_p = pred.colwise().mean();
  const Eigen::RowVector3d mu_g = gt.colwise().mean();
  const Eigen::MatrixXd P = pred.rowwise() - mu_p;
  const Eigen::MatrixXd G = gt.rowwise() - mu_g;
  const double var_p = P.squaredNorm() / static_cast<double>(n);
  const double var_g = G.squaredNorm() / static_cast<double>(n);
  if (!(var_p > 0.0) || !(var_g > 0.0)) {
    fail(ErrorKind::DegenerateAlignment, "procrustes: point set has zero variance");
  }
  // Cross-covariance gt^T pred; R = U S V^T maps pred directions onto gt.
  const Eigen::Matrix3d cov = G.transpose() * P / static_cast<double>(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;

  Alignment a;
  a.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  a.scale = (svd.singularValues().asDiagonal() * S).trace() / var_p;
  a.translation = mu_g.transpose() - a.scale * a.rotation * mu_p.transpose();
  a.aligned = ((a.scale * a.rotation * pred.transpose()).colwise() + a.translation).transpose();
  return a;
}

}  // namespace volagg::geom
