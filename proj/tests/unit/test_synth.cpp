#include <algorithm>
#include <cmath>
#include <filesystem>

#include <Eigen/LU>

#include "doctest.h"
#include "volagg/error.hpp"
#include "volagg/rng.hpp"
#include "volagg/synth.hpp"

using namespace volagg;
using namespace volagg::synth;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("volagg_test_synth_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("rig geometry") {
  const auto rig = generate_rig(RigOptions{}, 7);
  REQUIRE(rig.size() == 4);
  for (const auto& c : rig) {
    CHECK((c.rotation.transpose() * c.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::abs(c.rotation.determinant() - 1.0) <= 1e-12);
    // Optical axis passes through the origin: its camera-frame position lies on +z.
    const Eigen::Vector3d origin_cam = c.translation;
    CHECK(std::hypot(origin_cam.x(), origin_cam.y()) <= 1.0);
    CHECK(origin_cam.z() > 0.0);
    const Eigen::Vector3d eye = -c.rotation.transpose() * c.translation;
    CHECK(std::hypot(eye.x(), eye.y()) == doctest::Approx(3500.0).epsilon(1e-12));
  }
  const auto again = generate_rig(RigOptions{}, 7);
  for (std::size_t i = 0; i < rig.size(); ++i) {
    CHECK(rig[i].rotation == again[i].rotation);
    CHECK(rig[i].translation == again[i].translation);
  }
  RigOptions one;
  one.cameras = 1;
  CHECK(generate_rig(one, 1).size() == 1);
}

TEST_CASE("blob rendering") {
  Eigen::MatrixXd kp(1, 2);
  kp << 10.5, 20.5;
  const auto img = render_feature_blobs(kp, 32, 32, 1.0, 2);
  CHECK(img.shape() == ad::Shape{2, 32, 32});
  double best = -1.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < 32 * 32; ++i) {
    if (img.data()[i] > best) {
      best = img.data()[i];
      arg = i;
    }
  }
  CHECK(arg == 20 * 32 + 10);
  CHECK(best == 1.0);
  // Channel 1 has no keypoints assigned.
  for (std::size_t i = 32 * 32; i < 2 * 32 * 32; ++i) CHECK(img.data()[i] == 0.0);

  kp << 10.5, 20.5;
  const auto wide = render_feature_blobs(kp, 32, 32, 3.0, 1);
  CHECK(std::abs(wide.at(20 * 32 + 13) - std::exp(-0.5)) <= 1e-15);

  Eigen::MatrixXd off(1, 2);
  off << -3.0, 16.0;
  const auto tail = render_feature_blobs(off, 32, 32, 2.0, 1);
  CHECK(std::abs(tail.at(15 * 32) - std::exp(-(3.5 * 3.5 + 0.25) / 8.0)) <= 1e-15);

  CHECK_THROWS_AS(render_feature_blobs(kp, 32, 32, 1.0, 0), Error);
}

TEST_CASE("samples are self-consistent") {
  const auto model = body::builtin_toy_model();
  const auto rig = generate_rig(RigOptions{}, 3);
  SampleOptions opts;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = generate_sample(model, rig, opts, seed);
    REQUIRE(s.gt_keypoints2d.size() == rig.size());
    CHECK(s.gt_keypoints3d.rows() == static_cast<Eigen::Index>(model.num_keypoints()));
    for (std::size_t c = 0; c < rig.size(); ++c) {
      const auto P = calib::projection_matrix(rig[c]);
      for (Eigen::Index k = 0; k < s.gt_keypoints3d.rows(); ++k) {
        const auto p = calib::project_point(P, s.gt_keypoints3d.row(k).transpose());
        CHECK((p.pixel - s.gt_keypoints2d[c].row(k).transpose()).norm() <= 1e-9);
      }
    }
    const Eigen::Vector3d pelvis = s.gt_keypoints3d.row(model.root_keypoint).transpose();
    CHECK(pelvis.cwiseAbs().maxCoeff() <= 300.0 + 1e-9);
    for (Eigen::Index j = 0; j < s.gt_params.pose.rows(); ++j) CHECK(s.gt_params.pose.row(j).norm() <= 0.5 + 1e-12);
    CHECK(s.gt_params.shape.cwiseAbs().maxCoeff() <= 1.0);
  }
}

TEST_CASE("sample special cases") {
  const auto model = body::builtin_toy_model();
  const auto rig = generate_rig(RigOptions{}, 3);
  SampleOptions exact;
  exact.pixel_noise = 0.0;
  const auto s = generate_sample(model, rig, exact, 5);
  for (std::size_t c = 0; c < rig.size(); ++c) {
    CHECK(s.pelvis_detections[c].point == Eigen::Vector2d(s.gt_keypoints2d[c].row(model.root_keypoint).transpose()));
    CHECK(s.pelvis_detections[c].confidence == 1.0);
  }

  SampleOptions rest = exact;
  rest.pose_scale = 0.0;
  const auto r = generate_sample(model, rig, rest, 9);
  CHECK(r.gt_params.pose.cwiseAbs().maxCoeff() == 0.0);
  body::BodyParams zero_pose = r.gt_params;
  const auto mesh = body::forward(model, zero_pose);
  const Eigen::MatrixXd local = body::regress_keypoints(model, mesh.vertices);
  const Eigen::MatrixXd rel = r.gt_keypoints3d.rowwise() - r.gt_keypoints3d.row(model.root_keypoint);
  const Eigen::MatrixXd expect = local.rowwise() - local.row(model.root_keypoint);
  CHECK((rel - expect).cwiseAbs().maxCoeff() <= 1e-9);

  // A camera that cannot see the scene exhausts the retries.
  auto blind = rig;
  blind[0] = calib::look_at_camera("blind", Eigen::Vector3d(0, 0, 10000), Eigen::Vector3d(0, 0, 20000),
                                   Eigen::Vector3d::UnitX(), 80.0, 96, 96);
  try {
    generate_sample(model, blind, exact, 1);
    FAIL("expected RetryExhausted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::RetryExhausted);
  }
}

TEST_CASE("default settings rarely need a reseed") {
  const auto model = body::builtin_toy_model();
  const auto rig = generate_rig(RigOptions{}, 3);
  SampleOptions once;
  once.max_attempts = 1;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    try {
      generate_sample(model, rig, once, seed);
      ++ok;
    } catch (const Error&) {
    }
  }
  MESSAGE("first-draw acceptance: " << ok << "/200");
  CHECK(ok >= 150);
}

TEST_CASE("generation is deterministic and datasets round trip") {
  DatasetOptions o;
  o.count = 3;
  o.seed = 42;
  const auto dir = scratch("roundtrip");
  const auto made = generate_dataset(o, dir);
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.samples.size() == 3);
  CHECK(loaded.options.seed == 42);
  CHECK(loaded.options.sample.blob_channels == o.sample.blob_channels);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = made.samples[i];
    const auto& b = loaded.samples[i];
    CHECK(a.id == b.id);
    CHECK(a.gt_keypoints3d == b.gt_keypoints3d);
    CHECK(a.gt_params.pose == b.gt_params.pose);
    CHECK(a.gt_params.shape == b.gt_params.shape);
    for (std::size_t c = 0; c < a.calibs.size(); ++c) {
      CHECK(a.gt_keypoints2d[c] == b.gt_keypoints2d[c]);
      CHECK(a.pelvis_detections[c].point == b.pelvis_detections[c].point);
      CHECK(std::ranges::equal(a.input_blobs[c].data(), b.input_blobs[c].data()));
      CHECK(a.calibs[c].rotation == b.calibs[c].rotation);
    }
  }
  const auto again = generate_dataset(o, scratch("roundtrip2"));
  CHECK(again.samples[2].gt_keypoints3d == made.samples[2].gt_keypoints3d);
  CHECK(std::ranges::equal(again.samples[2].input_blobs[1].data(), made.samples[2].input_blobs[1].data()));

  CHECK_THROWS_AS(load_dataset(scratch("missing")), Error);
}
