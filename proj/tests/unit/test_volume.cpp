#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/optim.hpp"
#include "volagg/rng.hpp"
#include "volagg/volume.hpp"

using namespace volagg;
using namespace volagg::volume;

namespace {

calib::CameraCalib ring_camera(std::size_t c, std::size_t n, double radius, double focal, int size) {
  const double az = 2.0 * std::numbers::pi * (static_cast<double>(c) + 0.3) / static_cast<double>(n);
  const Eigen::Vector3d eye(radius * std::cos(az), radius * std::sin(az), 400.0);
  return calib::look_at_camera("cam" + std::to_string(c), eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), focal,
                               size, size);
}

calib::FeatureMap random_map(Rng& rng, std::size_t K, std::size_t h, std::size_t w, double scale) {
  std::vector<double> d(K * h * w);
  for (auto& v : d) v = rng.uniform(-2.0, 2.0);
  return {ad::Tensor({K, h, w}, d), scale};
}

FeatureVolume random_volume(Rng& rng, const VolumeConfig& cfg, const std::string& id, double visible_fraction) {
  FeatureVolume v;
  v.config = cfg;
  v.source_id = id;
  v.mask.resize(cfg.voxels());
  std::vector<double> d(cfg.channels * cfg.voxels(), 0.0);
  for (std::size_t n = 0; n < cfg.voxels(); ++n) {
    v.mask[n] = rng.uniform() < visible_fraction;
    if (!v.mask[n]) continue;
    for (std::size_t k = 0; k < cfg.channels; ++k) d[k * cfg.voxels() + n] = rng.uniform(-3.0, 3.0);
  }
  const auto L = cfg.resolution;
  v.data = ad::Tensor({cfg.channels, L, L, L}, d);
  return v;
}

}  // namespace

TEST_CASE("grid coordinates") {
  VolumeConfig one{2500.0, 1, 2};
  const auto g1 = make_grid(Eigen::Vector3d(10, -20, 30), one);
  CHECK(g1.at(0) == 10.0);
  CHECK(g1.at(1) == -20.0);
  CHECK(g1.at(2) == 30.0);

  VolumeConfig two{2000.0, 2, 1};
  const auto g2 = make_grid(Eigen::Vector3d::Zero(), two);
  CHECK(g2.at(0) == -500.0);
  CHECK(g2.at(3 * 7) == 500.0);

  VolumeConfig full{2500.0, 16, 1};
  const Eigen::Vector3d c(100, 200, 300);
  const auto g = make_grid(c, full);
  for (int a = 0; a < 3; ++a) {
    CHECK(g.at(static_cast<std::size_t>(a)) == doctest::Approx(c[a] - 1171.875).epsilon(1e-15));
    CHECK(g.at(g.size() - 3 + static_cast<std::size_t>(a)) == doctest::Approx(c[a] + 1171.875).epsilon(1e-15));
  }
  CHECK_THROWS_AS(make_grid(c, VolumeConfig{0.0, 4, 1}), Error);
  CHECK_THROWS_AS(make_grid(c, VolumeConfig{100.0, 0, 1}), Error);
}

TEST_CASE("constant map back-projects to a constant in-view volume") {
  calib::CameraCalib cam;
  cam.id = "front";
  cam.intrinsics << 300, 0, 64, 0, 300, 64, 0, 0, 1;
  cam.translation = Eigen::Vector3d(0, 0, 3000);  // grid sits 3 m in front of the camera
  const auto P = calib::projection_matrix(cam);
  VolumeConfig cfg{2500.0, 8, 2};
  const auto grid = make_grid(Eigen::Vector3d::Zero(), cfg);
  calib::FeatureMap map{ad::Tensor::full({2, 32, 32}, 3.0), 0.25};
  const auto vol = backproject(map, P, grid, Eigen::Vector3d::Zero(), cfg);
  std::size_t visible = 0;
  for (std::size_t n = 0; n < cfg.voxels(); ++n) {
    if (vol.mask[n]) {
      ++visible;
      for (std::size_t k = 0; k < 2; ++k) CHECK(vol.data.at(k * cfg.voxels() + n) == 3.0);
    } else {
      for (std::size_t k = 0; k < 2; ++k) CHECK(vol.data.at(k * cfg.voxels() + n) == 0.0);
    }
  }
  CHECK(visible > 0);
  CHECK(visible < cfg.voxels());
  CHECK(vol.source_id == "front");
}

TEST_CASE("voxels behind the camera are masked") {
  calib::CameraCalib cam;
  cam.id = "inside";
  cam.intrinsics << 50, 0, 64, 0, 50, 64, 0, 0, 1;  // wide view, camera inside the grid
  const auto P = calib::projection_matrix(cam);
  VolumeConfig cfg{2000.0, 4, 1};
  const auto grid = make_grid(Eigen::Vector3d::Zero(), cfg);
  calib::FeatureMap map{ad::Tensor::full({1, 128, 128}, 1.0), 1.0};
  const auto vol = backproject(map, P, grid, Eigen::Vector3d::Zero(), cfg);
  const auto gd = grid.data();
  for (std::size_t n = 0; n < cfg.voxels(); ++n) {
    if (gd[3 * n + 2] < 0.0) {
      CHECK_FALSE(vol.mask[n]);
      CHECK(vol.data.at(n) == 0.0);
    }
  }
}

TEST_CASE("back-projection equals a per-voxel loop") {
  Rng rng(1);
  VolumeConfig cfg{2500.0, 8, 4};
  const Eigen::Vector3d center(50, -30, 10);
  const auto grid = make_grid(center, cfg);
  for (std::size_t c = 0; c < 4; ++c) {
    const auto P = calib::projection_matrix(ring_camera(c, 4, 3500.0, 135.0, 96));
    const auto map = random_map(rng, 4, 24, 24, 0.25);
    const auto vol = backproject(map, P, grid, center, cfg);
    const std::size_t L = cfg.resolution, N = cfg.voxels();
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t n = (i * L + j) * L + l;
          const Eigen::Vector3d X(voxel_coordinate(center.x(), i, cfg), voxel_coordinate(center.y(), j, cfg),
                                  voxel_coordinate(center.z(), l, cfg));
          auto proj = calib::try_project(P, X);
          calib::Sampled s;
          s.features = Eigen::VectorXd::Zero(4);
          if (proj) s = calib::bilinear_sample(map, proj->pixel);
          CHECK(static_cast<bool>(vol.mask[n]) == s.visible);
          for (std::size_t k = 0; k < 4; ++k) CHECK(vol.data.at(k * N + n) == s.features[static_cast<Eigen::Index>(k)]);
        }
  }
}

TEST_CASE("back-projection rejects mismatched channels") {
  VolumeConfig cfg{2500.0, 4, 3};
  const auto grid = make_grid(Eigen::Vector3d::Zero(), cfg);
  calib::FeatureMap map{ad::Tensor::zeros({2, 8, 8}), 1.0};
  CHECK_THROWS_AS(backproject(map, calib::projection_matrix(ring_camera(0, 4, 3000, 100, 64)), grid,
                              Eigen::Vector3d::Zero(), cfg),
                  Error);
}

TEST_CASE("parallel back-projection matches serial") {
  Rng rng(2);
  VolumeConfig cfg{2500.0, 8, 3};
  const auto grid = make_grid(Eigen::Vector3d::Zero(), cfg);
  std::vector<calib::FeatureMap> maps;
  std::vector<calib::ProjectionMatrix> Ps;
  for (std::size_t c = 0; c < 4; ++c) {
    maps.push_back(random_map(rng, 3, 24, 24, 0.25));
    Ps.push_back(calib::projection_matrix(ring_camera(c, 4, 3500.0, 135.0, 96)));
  }
  const auto serial = backproject_views(maps, Ps, grid, Eigen::Vector3d::Zero(), cfg, false);
  const auto parallel = backproject_views(maps, Ps, grid, Eigen::Vector3d::Zero(), cfg, true);
  const auto a = aggregate_softmax(serial), b = aggregate_softmax(parallel);
  CHECK(std::equal(a.data.data().begin(), a.data.data().end(), b.data.data().begin()));
}

TEST_CASE("aggregating one view returns it verbatim") {
  Rng rng(3);
  VolumeConfig cfg{2500.0, 4, 3};
  const auto v = random_volume(rng, cfg, "a", 0.7);
  const auto out = aggregate_softmax({v});
  for (std::size_t i = 0; i < v.data.size(); ++i) CHECK(out.data.at(i) == v.data.at(i));
  CHECK(out.mask == v.mask);
}

TEST_CASE("hand-computed two-view softmax") {
  VolumeConfig cfg{1000.0, 1, 2};
  FeatureVolume a{ad::Tensor({2, 1, 1, 1}, {0.0, 1.7}), Eigen::Vector3d::Zero(), cfg, {1}, "a"};
  FeatureVolume b{ad::Tensor({2, 1, 1, 1}, {std::log(3.0), 1.7}), Eigen::Vector3d::Zero(), cfg, {1}, "b"};
  const auto out = aggregate_softmax({a, b});
  CHECK(out.data.at(0) == doctest::Approx(0.75 * std::log(3.0)).epsilon(1e-15));
  CHECK(std::abs(out.data.at(0) - 0.8240) <= 1e-4);
  CHECK(out.data.at(1) == doctest::Approx(1.7).epsilon(1e-15));
  const auto w0 = softmax_weights({a, b}, 0, 0);
  CHECK(w0[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(w0[1] == doctest::Approx(0.75).epsilon(1e-15));
  const auto w1 = softmax_weights({a, b}, 1, 0);
  CHECK(w1[0] == 0.5);
  CHECK(w1[1] == 0.5);
}

TEST_CASE("aggregation properties on random volumes") {
  Rng rng(4);
  VolumeConfig cfg{2500.0, 6, 3};
  std::vector<FeatureVolume> views;
  for (int c = 0; c < 5; ++c) views.push_back(random_volume(rng, cfg, "v" + std::to_string(c), 0.6));
  const auto out = aggregate_softmax(views);
  const std::size_t N = cfg.voxels();

  // weights positive and normalized; output inside the visible range
  for (std::size_t k = 0; k < cfg.channels; ++k)
    for (std::size_t n = 0; n < N; ++n) {
      const auto w = softmax_weights(views, k, n);
      double lo = INFINITY, hi = -INFINITY, total = 0.0;
      bool any = false;
      for (std::size_t c = 0; c < views.size(); ++c) {
        if (!views[c].mask[n]) {
          CHECK(w[c] == 0.0);
          continue;
        }
        any = true;
        CHECK(w[c] > 0.0);
        total += w[c];
        lo = std::min(lo, views[c].data.at(k * N + n));
        hi = std::max(hi, views[c].data.at(k * N + n));
      }
      const double y = out.data.at(k * N + n);
      if (any) {
        CHECK(std::abs(total - 1.0) <= 1e-6);
        CHECK(y >= lo - 1e-12);
        CHECK(y <= hi + 1e-12);
        CHECK(out.mask[n]);
      } else {
        CHECK(y == 0.0);
        CHECK_FALSE(out.mask[n]);
      }
    }

  // permutation invariance, bit-exact
  auto shuffled = views;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[0], shuffled[2]);
  const auto perm = aggregate_softmax(shuffled);
  CHECK(std::equal(out.data.data().begin(), out.data.data().end(), perm.data.data().begin()));

  // a fully masked view changes nothing
  auto extra = views;
  auto blind = random_volume(rng, cfg, "blind", 0.0);
  blind.data.mutable_data()[0] = 0.0;
  extra.insert(extra.begin() + 2, blind);
  const auto with_blind = aggregate_softmax(extra);
  CHECK(std::equal(out.data.data().begin(), out.data.data().end(), with_blind.data.data().begin()));
}

TEST_CASE("aggregation rejects mismatched volumes") {
  Rng rng(5);
  VolumeConfig cfg{2500.0, 4, 2};
  auto a = random_volume(rng, cfg, "a", 1.0), b = random_volume(rng, cfg, "b", 1.0);
  b.center = Eigen::Vector3d(1, 0, 0);
  try {
    aggregate_softmax({a, b});
    FAIL("expected ConfigMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigMismatch);
  }
  auto c = random_volume(rng, VolumeConfig{2000.0, 4, 2}, "c", 1.0);
  CHECK_THROWS_AS(aggregate_softmax({a, c}), Error);
  CHECK_THROWS_AS(aggregate_softmax({}), Error);
}

TEST_CASE("aggregation gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(6, seed));
    VolumeConfig cfg{2500.0, 3, 2};
    std::vector<ad::Tensor> inputs;
    std::vector<FeatureVolume> views;
    for (int c = 0; c < 3; ++c) {
      views.push_back(random_volume(rng, cfg, "v" + std::to_string(c), 0.7));
      views.back().data.set_requires_grad(true);
      inputs.push_back(views.back().data);
    }
    std::vector<double> wd(cfg.channels * cfg.voxels());
    for (auto& w : wd) w = rng.uniform(-1, 1);
    ad::Tensor weight({cfg.channels, 3, 3, 3}, wd);
    auto r = ad::grad_check(
        [&](const std::vector<ad::Tensor>& in) {
          auto vs = views;
          for (std::size_t c = 0; c < vs.size(); ++c) vs[c].data = in[c];
          return ad::sum(ad::mul(aggregate_softmax(vs).data, weight));
        },
        inputs);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("back-projection gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(7, seed));
    VolumeConfig cfg{2500.0, 4, 2};
    const Eigen::Vector3d center(rng.uniform(-100, 100), rng.uniform(-100, 100), 0.0);
    auto grid = make_grid(center, cfg);
    grid.set_requires_grad(true);
    auto map = random_map(rng, 2, 12, 12, 0.125);
    map.data.set_requires_grad(true);
    const auto P = calib::projection_matrix(ring_camera(seed % 4, 4, 3500.0, 135.0, 96));
    std::vector<double> wd(cfg.channels * cfg.voxels());
    for (auto& w : wd) w = rng.uniform(-1, 1);
    ad::Tensor weight({cfg.channels, 4, 4, 4}, wd);
    ad::GradCheckOptions opts;
    opts.eps = 1e-4;  // grid coordinates are in mm
    auto r = ad::grad_check(
        [&](const std::vector<ad::Tensor>& in) {
          calib::FeatureMap m{in[0], map.image_to_feature_scale};
          return ad::sum(ad::mul(backproject(m, P, in[1], center, cfg).data, weight));
        },
        {map.data, grid}, opts);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("debug dump writes header and payload") {
  Rng rng(8);
  VolumeConfig cfg{2500.0, 3, 2};
  auto v = random_volume(rng, cfg, "cam0", 0.5);
  const auto dir = std::filesystem::temp_directory_path() / "volagg_test_volume";
  std::filesystem::create_directories(dir);
  dump_volume(v, dir / "vol");
  const auto header = io::read_json_file(dir / "vol.json");
  CHECK(header["source_id"] == "cam0");
  CHECK(header["resolution"] == 3);
  ad::Shape shape;
  const auto data = io::read_blob_file(dir / "vol.bin", shape);
  CHECK(shape == v.data.shape());
  CHECK(std::equal(data.begin(), data.end(), v.data.data().begin()));
}
