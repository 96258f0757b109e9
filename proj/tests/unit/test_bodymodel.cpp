#include <cmath>
#include <filesystem>
#include <numbers>

#include <Eigen/Geometry>

#include "doctest.h"
#include "volagg/bodymodel.hpp"
#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/optim.hpp"
#include "volagg/rng.hpp"

using namespace volagg;
using namespace volagg::body;

namespace {

// Rotation matrix from an axis-angle vector via an explicit unit quaternion.
Eigen::Matrix3d quaternion_oracle(const Eigen::Vector3d& aa) {
  const double theta = aa.norm();
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
  if (theta > 0.0) {
    const double s = std::sin(theta / 2.0) / theta;
    w = std::cos(theta / 2.0);
    x = aa.x() * s;
    y = aa.y() * s;
    z = aa.z() * s;
  }
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

Eigen::Vector3d random_aa(Rng& rng, double max_angle) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  return axis.normalized() * rng.uniform(0.0, max_angle);
}

BodyParams random_params(Rng& rng, const BodyModelDef& m, double pose_scale) {
  auto p = BodyParams::zeros(m.num_joints(), m.num_shape());
  for (std::size_t j = 0; j < m.num_joints(); ++j) p.pose.row(static_cast<Eigen::Index>(j)) = random_aa(rng, pose_scale).transpose();
  for (Eigen::Index b = 0; b < p.shape.size(); ++b) p.shape[b] = rng.uniform(-1.0, 1.0);
  return p;
}

BodyModelDef toy_with_pose_dirs() {
  auto m = builtin_toy_model();
  Rng rng(77);
  Eigen::MatrixXd pd(3 * m.num_vertices(), 9 * (m.num_joints() - 1));
  for (Eigen::Index i = 0; i < pd.size(); ++i) pd.data()[i] = rng.uniform(-5.0, 5.0);
  m.pose_dirs = pd;
  return m;
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  FAIL("expected an error");
  return {};
}

}  // namespace

TEST_CASE("rodrigues special cases") {
  CHECK(rodrigues(Eigen::Vector3d::Zero()) == Eigen::Matrix3d::Identity());
  Eigen::Matrix3d expected;
  expected << 1, 0, 0, 0, 0, -1, 0, 1, 0;
  CHECK((rodrigues(Eigen::Vector3d(std::numbers::pi / 2, 0, 0)) - expected).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("rodrigues matches a quaternion oracle") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    // include tiny angles that exercise the Taylor branch
    const Eigen::Vector3d aa = random_aa(rng, i % 10 == 0 ? 1e-9 : std::numbers::pi);
    const Eigen::Matrix3d R = rodrigues(aa);
    CHECK((R - quaternion_oracle(aa)).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::abs(R.determinant() - 1.0) <= 1e-12);
  }
}

TEST_CASE("rodrigues jacobian matches central differences on both branches") {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector3d aa = random_aa(rng, i < 5 ? 0.0 : 3.0);
    const auto J = rodrigues_jacobian(aa);
    const double eps = aa.norm() < 1e-3 ? 1e-10 : 1e-6;
    for (int k = 0; k < 3; ++k) {
      Eigen::Vector3d hi = aa, lo = aa;
      hi[k] += eps;
      lo[k] -= eps;
      const Eigen::Matrix3d fd = (rodrigues(hi) - rodrigues(lo)) / (2.0 * eps);
      CHECK((fd - J[static_cast<std::size_t>(k)]).cwiseAbs().maxCoeff() <= 1e-5);
    }
  }
}

TEST_CASE("toy model dimensions and determinism") {
  const auto a = builtin_toy_model();
  const auto b = builtin_toy_model();
  CHECK(a.num_joints() == 8);
  CHECK(a.num_shape() == 4);
  CHECK(a.num_keypoints() == 12);
  CHECK(a.num_vertices() >= 48);
  CHECK(a.num_vertices() <= 80);
  CHECK_FALSE(a.pose_dirs.has_value());
  CHECK(a.template_vertices == b.template_vertices);
  CHECK(a.shape_dirs == b.shape_dirs);
  CHECK(a.skin_weights == b.skin_weights);
  CHECK(a.joint_regressor == b.joint_regressor);
  CHECK(a.keypoint_regressor == b.keypoint_regressor);
  CHECK(a.parents == b.parents);
  const double height = a.template_vertices.col(2).maxCoeff() - a.template_vertices.col(2).minCoeff();
  MESSAGE("toy template height " << height << " mm");
  CHECK(height > 1500.0);
  CHECK(height < 1900.0);
  CHECK_NOTHROW(validate(a));
}

TEST_CASE("full-scale dimensions") {
  CHECK(kFullScaleKeypoints == 49);
  CHECK(kFullScaleJoints == 24);
  CHECK(kFullScaleVertices == 6890);
  CHECK(kFullScaleShape == 10);
}

TEST_CASE("rest pose reproduces the template") {
  const auto m = builtin_toy_model();
  const auto out = forward(m, BodyParams::zeros(m.num_joints(), m.num_shape()));
  CHECK((out.vertices - m.template_vertices).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((out.joints - m.joint_regressor * m.template_vertices).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("unit shape coefficient adds one blendshape") {
  const auto m = builtin_toy_model();
  for (std::size_t b = 0; b < m.num_shape(); ++b) {
    auto p = BodyParams::zeros(m.num_joints(), m.num_shape());
    p.shape[static_cast<Eigen::Index>(b)] = 1.0;
    const auto out = forward(m, p);
    for (Eigen::Index v = 0; v < out.vertices.rows(); ++v)
      for (int a = 0; a < 3; ++a)
        CHECK(std::abs(out.vertices(v, a) - (m.template_vertices(v, a) + m.shape_dirs(3 * v + a, static_cast<Eigen::Index>(b)))) <=
              1e-9);
  }
}

TEST_CASE("shape is linear at zero pose") {
  const auto m = builtin_toy_model();
  Rng rng(4);
  auto p1 = BodyParams::zeros(m.num_joints(), m.num_shape()), p2 = p1, p12 = p1;
  for (Eigen::Index b = 0; b < p1.shape.size(); ++b) {
    p1.shape[b] = rng.uniform(-1, 1);
    p2.shape[b] = rng.uniform(-1, 1);
  }
  p12.shape = p1.shape + p2.shape;
  const auto T = m.template_vertices;
  const Eigen::MatrixXd lhs = forward(m, p12).vertices - T;
  const Eigen::MatrixXd rhs = (forward(m, p1).vertices - T) + (forward(m, p2).vertices - T);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("root-only rotation rigidly rotates the rest joints") {
  const auto m = builtin_toy_model();
  Rng rng(5);
  const auto rest = forward(m, BodyParams::zeros(m.num_joints(), m.num_shape()));
  for (int trial = 0; trial < 10; ++trial) {
    auto p = BodyParams::zeros(m.num_joints(), m.num_shape());
    const Eigen::Vector3d aa = random_aa(rng, 3.0);
    p.pose.row(0) = aa.transpose();
    const Eigen::Matrix3d R = quaternion_oracle(aa);
    const auto out = forward(m, p);
    const Eigen::Vector3d root = rest.joints.row(0).transpose();
    for (Eigen::Index j = 0; j < out.joints.rows(); ++j) {
      const Eigen::Vector3d expect = R * (rest.joints.row(j).transpose() - root) + root;
      CHECK((out.joints.row(j).transpose() - expect).norm() <= 1e-9);
    }
  }
}

TEST_CASE("forward is equivariant under an extra root rotation") {
  for (bool with_pose_dirs : {false, true}) {
    const auto m = with_pose_dirs ? toy_with_pose_dirs() : builtin_toy_model();
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      auto p = random_params(rng, m, 1.0);
      const Eigen::Matrix3d Q = quaternion_oracle(random_aa(rng, 2.0));
      auto q = p;
      const Eigen::AngleAxisd composed(Q * rodrigues(p.pose.row(0).transpose()));
      q.pose.row(0) = (composed.angle() * composed.axis()).transpose();
      const auto a = forward(m, p), b = forward(m, q);
      const Eigen::RowVector3d root = a.joints.row(0);
      for (Eigen::Index v = 0; v < a.vertices.rows(); ++v) {
        const Eigen::Vector3d expect = Q * (a.vertices.row(v) - root).transpose() + root.transpose();
        CHECK((b.vertices.row(v).transpose() - expect).norm() <= 1e-9 * 2000.0);
      }
      for (Eigen::Index j = 0; j < a.joints.rows(); ++j) {
        const Eigen::Vector3d expect = Q * (a.joints.row(j) - root).transpose() + root.transpose();
        CHECK((b.joints.row(j).transpose() - expect).norm() <= 1e-9 * 2000.0);
      }
    }
  }
}

TEST_CASE("tensor and matrix forward agree") {
  const auto m = toy_with_pose_dirs();
  Rng rng(7);
  const auto p = random_params(rng, m, 1.2);
  std::vector<double> pose(p.pose.rows() * 3), shape(p.shape.data(), p.shape.data() + p.shape.size());
  for (Eigen::Index j = 0; j < p.pose.rows(); ++j)
    for (int a = 0; a < 3; ++a) pose[static_cast<std::size_t>(3 * j + a)] = p.pose(j, a);
  const auto t = forward(m, ad::Tensor({m.num_joints(), 3}, pose), ad::Tensor({m.num_shape()}, shape));
  const auto e = forward(m, p);
  for (Eigen::Index v = 0; v < e.vertices.rows(); ++v)
    for (int a = 0; a < 3; ++a) CHECK(t.vertices.at(static_cast<std::size_t>(3 * v + a)) == e.vertices(v, a));
}

TEST_CASE("forward jacobians match central differences") {
  for (bool with_pose_dirs : {false, true}) {
    const auto m = with_pose_dirs ? toy_with_pose_dirs() : builtin_toy_model();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(derive_seed(100, seed));
      const auto p = random_params(rng, m, 1.5);
      std::vector<double> pose, shape(p.shape.data(), p.shape.data() + p.shape.size()), wv(m.num_vertices() * 3),
          wj(m.num_joints() * 3);
      for (Eigen::Index j = 0; j < p.pose.rows(); ++j)
        for (int a = 0; a < 3; ++a) pose.push_back(p.pose(j, a));
      for (auto& w : wv) w = rng.uniform(-1, 1) * 1e-3;
      for (auto& w : wj) w = rng.uniform(-1, 1) * 1e-3;
      ad::Tensor pose_t({m.num_joints(), 3}, pose, true), shape_t({m.num_shape()}, shape, true);
      ad::Tensor wv_t({m.num_vertices(), 3}, wv), wj_t({m.num_joints(), 3}, wj);
      auto r = ad::grad_check(
          [&](const std::vector<ad::Tensor>& in) {
            const auto out = forward(m, in[0], in[1]);
            return ad::add(ad::sum(ad::mul(out.vertices, wv_t)), ad::sum(ad::mul(out.joints, wj_t)));
          },
          {pose_t, shape_t});
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("gradient through the small-angle branch") {
  const auto m = builtin_toy_model();
  ad::Tensor pose = ad::Tensor::zeros({m.num_joints(), 3});
  pose.set_requires_grad(true);
  ad::Tensor shape = ad::Tensor::zeros({m.num_shape()});
  shape.set_requires_grad(true);
  Rng rng(8);
  std::vector<double> wv(m.num_vertices() * 3);
  for (auto& w : wv) w = rng.uniform(-1, 1);
  ad::Tensor wv_t({m.num_vertices(), 3}, wv);
  auto f = [&](const ad::Tensor& p) { return ad::sum(ad::mul(forward(m, p, shape).vertices, wv_t)).item(); };
  ad::Tape tape;
  ad::Tensor loss;
  {
    ad::TapeScope scope(tape);
    loss = ad::sum(ad::mul(forward(m, pose, shape).vertices, wv_t));
  }
  tape.backward(loss);
  // Steps of 1e-6 leave the Taylor region on both sides; the map is smooth
  // across the switch, so the central difference still measures dR/dθ at 0.
  const double eps = 1e-6;
  for (std::size_t i = 0; i < pose.size(); ++i) {
    ad::Tensor hi = pose.detach(), lo = pose.detach();
    hi.mutable_data()[i] += eps;
    lo.mutable_data()[i] -= eps;
    const double fd = (f(hi) - f(lo)) / (2.0 * eps);
    const double an = pose.grad()[i];
    CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) <= 1e-4);
  }
}

TEST_CASE("forward rejects mismatched parameter shapes") {
  const auto m = builtin_toy_model();
  CHECK_THROWS_AS(forward(m, ad::Tensor::zeros({7, 3}), ad::Tensor::zeros({4})), Error);
  CHECK_THROWS_AS(forward(m, ad::Tensor::zeros({8, 3}), ad::Tensor::zeros({5})), Error);
  CHECK_THROWS_AS(forward(m, BodyParams::zeros(8, 3)), Error);
}

TEST_CASE("keypoint regression rows") {
  auto m = builtin_toy_model();
  Rng rng(9);
  Eigen::MatrixXd verts(m.num_vertices(), 3);
  for (Eigen::Index i = 0; i < verts.size(); ++i) verts.data()[i] = rng.uniform(-900, 900);
  m.keypoint_regressor.setZero();
  m.keypoint_regressor(0, 17) = 1.0;
  m.keypoint_regressor.row(1).setConstant(1.0 / static_cast<double>(m.num_vertices()));
  const auto X = regress_keypoints(m, verts);
  CHECK(X.row(0) == verts.row(17));
  CHECK((X.row(1) - verts.colwise().mean()).cwiseAbs().maxCoeff() <= 1e-9);
  std::vector<double> flat;
  for (Eigen::Index v = 0; v < verts.rows(); ++v)
    for (int a = 0; a < 3; ++a) flat.push_back(verts(v, a));
  const auto Xt = regress_keypoints(m, ad::Tensor({m.num_vertices(), 3}, flat));
  for (int a = 0; a < 3; ++a) CHECK(Xt.at(static_cast<std::size_t>(a)) == verts(17, a));
}

TEST_CASE("model file round-trips") {
  const auto dir = std::filesystem::temp_directory_path() / "volagg_test_body";
  std::filesystem::create_directories(dir);
  for (bool with_pose_dirs : {false, true}) {
    const auto m = with_pose_dirs ? toy_with_pose_dirs() : builtin_toy_model();
    save_model(m, dir / "model.json");
    const auto back = load_model(dir / "model.json");
    CHECK((back.template_vertices - m.template_vertices).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((back.shape_dirs - m.shape_dirs).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((back.skin_weights - m.skin_weights).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((back.joint_regressor - m.joint_regressor).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((back.keypoint_regressor - m.keypoint_regressor).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(back.parents == m.parents);
    CHECK(back.pose_dirs.has_value() == with_pose_dirs);
    if (with_pose_dirs) CHECK((*back.pose_dirs - *m.pose_dirs).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("invalid model files name the failed check") {
  auto j = model_to_json(builtin_toy_model());
  const double w = j["skin_weights"][3][0].get<double>();
  j["skin_weights"][3][0] = w - 0.1;
  CHECK(error_text([&] { model_from_json(j); }) == "skin weights row 3 sums to 0.9");

  auto cyc = model_to_json(builtin_toy_model());
  cyc["parents"][2] = 5;
  CHECK(error_text([&] { model_from_json(cyc); }).find("parents[2]") != std::string::npos);

  auto jr = model_to_json(builtin_toy_model());
  jr["joint_regressor"][1][0] = jr["joint_regressor"][1][0].get<double>() + 0.01;
  CHECK(error_text([&] { model_from_json(jr); }).find("joint regressor row 1") != std::string::npos);

  auto missing = model_to_json(builtin_toy_model());
  missing.erase("parents");
  CHECK(error_text([&] { model_from_json(missing); }).find("parents") != std::string::npos);
}

TEST_CASE("resolve_model accepts the builtin name") {
  const auto m = resolve_model("builtin:toy");
  CHECK(m.num_joints() == 8);
  CHECK_THROWS_AS(resolve_model("/nonexistent/model.json"), Error);
}
