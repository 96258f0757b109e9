#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "doctest.h"
#include "volagg/error.hpp"
#include "volagg/geom.hpp"
#include "volagg/rng.hpp"

using namespace volagg;
using namespace volagg::geom;

namespace {

std::vector<calib::ProjectionMatrix> ring_rig(std::size_t n, double radius, double focal) {
  std::vector<calib::ProjectionMatrix> out;
  for (std::size_t c = 0; c < n; ++c) {
    const double az = 2.0 * std::numbers::pi * (static_cast<double>(c) + 0.25) / static_cast<double>(n);
    const Eigen::Vector3d eye(radius * std::cos(az), radius * std::sin(az), 300.0 + 150.0 * static_cast<double>(c));
    out.push_back(calib::projection_matrix(calib::look_at_camera("cam" + std::to_string(c), eye, Eigen::Vector3d::Zero(),
                                                                 Eigen::Vector3d::UnitZ(), focal, 1000, 1000)));
  }
  return out;
}

std::vector<Detection2D> observe(const std::vector<calib::ProjectionMatrix>& Ps, const Eigen::Vector3d& X) {
  std::vector<Detection2D> d;
  for (const auto& P : Ps) d.push_back({P.source_id, calib::project_point(P, X).pixel, 1.0});
  return d;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

Eigen::MatrixXd random_cloud(Rng& rng, Eigen::Index n, double spread) {
  Eigen::MatrixXd m(n, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-spread, spread);
  return m;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::InvalidInput;
}

double objective(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double s, const Eigen::Matrix3d& R,
                 const Eigen::Vector3d& t) {
  return ((s * R * pred.transpose()).colwise() + t - gt.transpose()).squaredNorm();
}

Eigen::Matrix3d exp_so3(const Eigen::Vector3d& w) {
  const double a = w.norm();
  if (a == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(a, w / a).toRotationMatrix();
}

// Levenberg-Marquardt on (log s, rotation increment, t) with forward-difference
// Jacobians, restarted from several rotations; returns the best objective.
double numerical_minimum(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Rng& rng) {
  const auto n = pred.rows();
  double best = std::numeric_limits<double>::infinity();
  for (int start = 0; start < 8; ++start) {
    double log_s = 0.0;
    Eigen::Matrix3d R = start == 0 ? Eigen::Matrix3d::Identity() : random_rotation(rng);
    Eigen::Vector3d t = gt.colwise().mean().transpose() - R * pred.colwise().mean().transpose();
    auto residual = [&](double ls, const Eigen::Matrix3d& Rr, const Eigen::Vector3d& tt) {
      Eigen::MatrixXd r = (std::exp(ls) * Rr * pred.transpose()).colwise() + tt - gt.transpose();
      return Eigen::Map<Eigen::VectorXd>(r.data(), 3 * n).eval();
    };
    double lambda = 1e-3;
    Eigen::VectorXd r = residual(log_s, R, t);
    for (int it = 0; it < 300; ++it) {
      Eigen::MatrixXd Jm(3 * n, 7);
      const double h = 1e-7;
      for (int p = 0; p < 7; ++p) {
        double ls = log_s;
        Eigen::Matrix3d Rp = R;
        Eigen::Vector3d tp = t;
        if (p == 0) ls += h;
        else if (p < 4) { Eigen::Vector3d w = Eigen::Vector3d::Zero(); w[p - 1] = h; Rp = exp_so3(w) * R; }
        else tp[p - 4] += h;
        Jm.col(p) = (residual(ls, Rp, tp) - r) / h;
      }
      const Eigen::MatrixXd A = Jm.transpose() * Jm;
      const Eigen::VectorXd g = Jm.transpose() * r;
      Eigen::MatrixXd damped = A;
      damped.diagonal() *= (1.0 + lambda);
      const Eigen::VectorXd step = -damped.ldlt().solve(g);
      const double cand_ls = log_s + step[0];
      const Eigen::Matrix3d cand_R = exp_so3(step.segment<3>(1)) * R;
      const Eigen::Vector3d cand_t = t + step.tail<3>();
      const Eigen::VectorXd cand_r = residual(cand_ls, cand_R, cand_t);
      if (cand_r.squaredNorm() < r.squaredNorm()) {
        log_s = cand_ls;
        R = cand_R;
        t = cand_t;
        r = cand_r;
        lambda = std::max(lambda * 0.3, 1e-12);
      } else {
        lambda *= 10.0;
        if (lambda > 1e12) break;
      }
    }
    best = std::min(best, r.squaredNorm());
  }
  return best;
}

}  // namespace

TEST_CASE("triangulation of an exactly projected point") {
  const auto Ps = ring_rig(4, 3000.0, 1150.0);
  for (const auto& X : {Eigen::Vector3d(100, 200, 3000), Eigen::Vector3d(100, 200, 300), Eigen::Vector3d(-250, 40, -600)}) {
    const auto est = triangulate_dlt(observe(Ps, X), Ps);
    CHECK((est - X).norm() <= 1e-6);
  }
}

TEST_CASE("triangulation is invariant to per-view scaling of P") {
  Rng rng(3);
  auto Ps = ring_rig(4, 3200.0, 1100.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector3d X(rng.uniform(-400, 400), rng.uniform(-400, 400), rng.uniform(-600, 600));
    auto det = observe(Ps, X);
    for (auto& d : det) d.point += Eigen::Vector2d(rng.normal(), rng.normal());
    const auto a = triangulate_dlt(det, Ps);
    auto scaled = Ps;
    for (auto& P : scaled) P.matrix *= rng.uniform(0.001, 1000.0);
    const auto b = triangulate_dlt(det, scaled);
    CHECK((a - b).norm() <= 1e-9 * (1.0 + a.norm()));
  }
}

TEST_CASE("triangulation error paths") {
  const auto Ps = ring_rig(3, 3000.0, 1150.0);
  const Eigen::Vector3d X(10, 20, 30);
  auto det = observe(Ps, X);
  CHECK(kind_of([&] { triangulate_dlt({det[0]}, Ps); }) == ErrorKind::InsufficientViews);
  auto zeroed = det;
  zeroed[1].confidence = 0.0;
  zeroed[2].confidence = 0.0;
  CHECK(kind_of([&] { triangulate_dlt(zeroed, Ps); }) == ErrorKind::InsufficientViews);
  zeroed[2].confidence = 0.5;
  CHECK((triangulate_dlt(zeroed, Ps) - X).norm() <= 1e-6);

  std::vector<calib::ProjectionMatrix> twins{Ps[0], Ps[0]};
  twins[1].source_id = "twin";
  std::vector<Detection2D> twin_det{{Ps[0].source_id, det[0].point, 1.0}, {"twin", det[0].point, 1.0}};
  CHECK(kind_of([&] { triangulate_dlt(twin_det, twins); }) == ErrorKind::DegenerateGeometry);

  auto unknown = det;
  unknown[0].camera_id = "nobody";
  CHECK(kind_of([&] { triangulate_dlt(unknown, Ps); }) == ErrorKind::InvalidInput);
  auto bad_conf = det;
  bad_conf[0].confidence = 1.5;
  CHECK(kind_of([&] { triangulate_dlt(bad_conf, Ps); }) == ErrorKind::InvalidInput);
}

TEST_CASE("low-confidence outlier views matter less") {
  Rng rng(4);
  const auto Ps = ring_rig(4, 3000.0, 1150.0);
  const Eigen::Vector3d X(50, -80, 100);
  auto det = observe(Ps, X);
  det[3].point += Eigen::Vector2d(40.0, -30.0);
  const double err_full = (triangulate_dlt(det, Ps) - X).norm();
  det[3].confidence = 0.05;
  const double err_down = (triangulate_dlt(det, Ps) - X).norm();
  CHECK(err_down < err_full);
}

TEST_CASE("procrustes recovers an exact similarity") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd pred = random_cloud(rng, 12, 500.0);
    const Eigen::Matrix3d R0 = random_rotation(rng);
    const Eigen::Vector3d t0(rng.uniform(-900, 900), rng.uniform(-900, 900), rng.uniform(-900, 900));
    const Eigen::MatrixXd gt = ((2.0 * R0 * pred.transpose()).colwise() + t0).transpose();
    const auto a = procrustes_align(pred, gt);
    CHECK(std::abs(a.scale - 2.0) <= 1e-9);
    CHECK((a.rotation - R0).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((a.translation - t0).norm() <= 1e-9 * 1000.0);
    CHECK((a.aligned - gt).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("procrustes of identical clouds is the identity") {
  Rng rng(6);
  const Eigen::MatrixXd gt = random_cloud(rng, 17, 800.0);
  const auto a = procrustes_align(gt, gt);
  CHECK(std::abs(a.scale - 1.0) <= 1e-12);
  CHECK((a.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((a.aligned - gt).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("procrustes never reflects") {
  Rng rng(7);
  const Eigen::MatrixXd pred = random_cloud(rng, 10, 300.0);
  Eigen::MatrixXd mirrored = pred;
  mirrored.col(0) *= -1.0;
  const auto a = procrustes_align(pred, mirrored);
  CHECK(a.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("procrustes matches a numerical minimizer on noisy clouds") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd pred = random_cloud(rng, 12, 400.0);
    const Eigen::Matrix3d R0 = random_rotation(rng);
    Eigen::MatrixXd gt = ((1.3 * R0 * pred.transpose()).colwise() + Eigen::Vector3d(100, -50, 20)).transpose();
    for (Eigen::Index i = 0; i < gt.size(); ++i) gt.data()[i] += 40.0 * rng.normal();
    const auto a = procrustes_align(pred, gt);
    const double closed = objective(pred, gt, a.scale, a.rotation, a.translation);
    const double numeric = numerical_minimum(pred, gt, rng);
    MESSAGE("closed form " << closed << " numerical " << numeric);
    CHECK(closed <= numeric * (1.0 + 1e-6));
    CHECK(std::abs(closed - numeric) <= 1e-6 * numeric);
  }
}

TEST_CASE("alignment never increases the error over centering alone") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd pred = random_cloud(rng, 12, 500.0);
    const Eigen::MatrixXd gt = random_cloud(rng, 12, 500.0);
    const auto a = procrustes_align(pred, gt);
    const Eigen::MatrixXd centered = pred.rowwise() + (gt.colwise().mean() - pred.colwise().mean());
    CHECK((a.aligned - gt).squaredNorm() <= (centered - gt).squaredNorm() * (1.0 + 1e-12));
  }
}

TEST_CASE("procrustes degenerate inputs") {
  Rng rng(10);
  const Eigen::MatrixXd two = random_cloud(rng, 2, 100.0);
  CHECK(kind_of([&] { procrustes_align(two, two); }) == ErrorKind::DegenerateAlignment);
  const Eigen::MatrixXd gt = random_cloud(rng, 5, 100.0);
  const Eigen::MatrixXd coincident = Eigen::MatrixXd::Ones(5, 3);
  CHECK(kind_of([&] { procrustes_align(coincident, gt); }) == ErrorKind::DegenerateAlignment);
  CHECK(kind_of([&] { procrustes_align(gt, coincident); }) == ErrorKind::DegenerateAlignment);
  CHECK(kind_of([&] { procrustes_align(gt, random_cloud(rng, 4, 1.0)); }) == ErrorKind::DimensionMismatch);
}
