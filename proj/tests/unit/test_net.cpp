#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "volagg/error.hpp"
#include "volagg/net.hpp"
#include "volagg/ops.hpp"
#include "volagg/optim.hpp"
#include "volagg/rng.hpp"
#include "volagg/synth.hpp"
#include "volagg/train.hpp"

using namespace volagg;
using namespace volagg::net;

namespace {

ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double spread, bool rg = false) {
  std::vector<double> d(ad::numel(shape));
  for (double& v : d) v = rng.uniform(-spread, spread);
  return ad::Tensor(std::move(shape), std::move(d), rg);
}

bool bits_equal(const ad::Tensor& a, const ad::Tensor& b) { return std::ranges::equal(a.data(), b.data()); }

NetWeights without_biases(NetWeights w) {
  for (auto& [name, t] : w.named()) {
    if (name.ends_with(".bias")) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
  return w;
}

NetConfig small_config() {
  NetConfig c;
  c.input_channels = 2;
  c.encoder2d_channels = {3, 4};
  c.volume = {2500.0, 4, 4};
  c.encoder3d_blocks = 1;
  c.group_norm_groups = 2;
  c.regressor_hidden = 16;
  c.regress_iterations = 2;
  return c;
}

}  // namespace

TEST_CASE("encode2d shapes, zeros and determinism") {
  const auto model = body::builtin_toy_model();
  NetConfig c;
  const auto zero = zero_weights(c, model);
  const auto map = encode2d(ad::Tensor::zeros({4, 96, 96}), zero, c);
  CHECK(map.data.shape() == ad::Shape{8, 48, 48});
  CHECK(map.image_to_feature_scale == 0.5);
  CHECK(std::all_of(map.data.data().begin(), map.data.data().end(), [](double v) { return v == 0.0; }));

  const auto w = init_weights(c, model, 3);
  Rng rng(1);
  const auto img = random_tensor(rng, {4, 96, 96}, 1.0);
  CHECK(bits_equal(encode2d(img, w, c).data, encode2d(img, w, c).data));
  CHECK_THROWS_AS(encode2d(ad::Tensor::zeros({3, 96, 96}), w, c), Error);

  NetConfig full;
  full.input_channels = 3;
  full.encoder2d_channels = {16, 256};
  full.volume = {2500.0, 16, 256};
  full.group_norm_groups = 32;
  const auto fw = zero_weights(full, model);
  CHECK(encode2d(ad::Tensor::zeros({3, 8, 8}), fw, full).channels() == 256);
}

TEST_CASE("encode3d pooling schedule and zero input") {
  CHECK(pooling_stages(16) == 3);
  CHECK(pooling_stages(8) == 2);
  CHECK(pooling_stages(2) == 0);
  CHECK_THROWS_AS(pooling_stages(6), Error);
  CHECK_THROWS_AS(pooling_stages(1), Error);
  NetConfig bad;
  bad.volume.resolution = 12;
  CHECK_THROWS_AS(validate(bad), Error);

  const auto model = body::builtin_toy_model();
  NetConfig c;
  c.volume = {2500.0, 16, 8};
  c.encoder3d_blocks = 2;
  CHECK(blocks_per_stage(c) == std::vector<std::size_t>{0, 1, 1});
  const auto w = without_biases(init_weights(c, model, 5));
  const auto f = encode3d(ad::Tensor::zeros({8, 16, 16, 16}), w, c);
  CHECK(f.shape() == ad::Shape{8 * 8});
  CHECK(std::all_of(f.data().begin(), f.data().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("encode3d gradient matches central differences") {
  const auto model = body::builtin_toy_model();
  const NetConfig c = small_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(derive_seed(21, seed));
    const auto w = init_weights(c, model, seed);
    auto vol = random_tensor(rng, {4, 4, 4, 4}, 1.0, true);
    const auto probe = random_tensor(rng, {32}, 1.0);
    auto r = ad::grad_check(
        [&](const std::vector<ad::Tensor>& in) { return ad::sum(ad::mul(encode3d(in[0], w, c), probe)); }, {vol});
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("regressor iterations") {
  const auto model = body::builtin_toy_model();
  NetConfig c;
  Rng rng(2);
  const auto features = random_tensor(rng, {64}, 1.0);
  body::BodyParams init = body::BodyParams::zeros(8, 4);
  init.pose(3, 1) = 0.25;
  init.shape[2] = -0.5;
  c.init_params = init;
  const auto zero = zero_weights(c, model);
  for (std::size_t T : {1u, 3u, 6u}) {
    c.regress_iterations = T;
    const auto r = regress_params(features, zero, c, model);
    CHECK(r.pose.shape() == ad::Shape{8, 3});
    CHECK(r.shape.shape() == ad::Shape{4});
    CHECK(r.pose.at(3 * 3 + 1) == 0.25);
    CHECK(r.shape.at(2) == -0.5);
    CHECK(r.pose.size() + r.shape.size() == 28);
  }

  // T=1 against a hand-unrolled update.
  c.regress_iterations = 1;
  auto w = init_weights(c, model, 4);
  for (auto& [name, t] : w.named()) {
    if (name.starts_with("regressor.fc2")) {
      for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
    }
  }
  const auto r = regress_params(features, w, c, model);
  std::vector<double> theta;
  for (Eigen::Index i = 0; i < 8; ++i)
    for (int k = 0; k < 3; ++k) theta.push_back(init.pose(i, k));
  for (int b = 0; b < 4; ++b) theta.push_back(init.shape[b]);
  std::vector<double> x(features.data().begin(), features.data().end());
  x.insert(x.end(), theta.begin(), theta.end());
  const auto& W1 = w.get("regressor.fc1.weight");
  const auto& b1 = w.get("regressor.fc1.bias");
  const auto& W2 = w.get("regressor.fc2.weight");
  const auto& b2 = w.get("regressor.fc2.bias");
  std::vector<double> h(256);
  for (std::size_t o = 0; o < 256; ++o) {
    double s = b1.at(o);
    for (std::size_t i = 0; i < x.size(); ++i) s += W1.at(o * x.size() + i) * x[i];
    h[o] = std::max(0.0, s);
  }
  for (std::size_t o = 0; o < 28; ++o) {
    double s = b2.at(o);
    for (std::size_t i = 0; i < 256; ++i) s += W2.at(o * 256 + i) * h[i];
    const double got = o < 24 ? r.pose.at(o) : r.shape.at(o - 24);
    CHECK(got == doctest::Approx(theta[o] + s).epsilon(1e-13));
  }
}

TEST_CASE("pipeline anchoring, determinism and degenerate inputs") {
  const auto model = body::builtin_toy_model();
  const auto rig = synth::generate_rig({}, 1);
  const auto sample = synth::generate_sample(model, rig, {}, 17);
  NetConfig c;
  const auto w = init_weights(c, model, 9);
  const auto input = train::pipeline_input(sample);
  const auto a = forward_pipeline(model, w, c, input);
  const auto b = forward_pipeline(model, w, c, input);
  CHECK(bits_equal(a.keypoints3d, b.keypoints3d));
  for (int k = 0; k < 3; ++k) CHECK(a.keypoints3d.at(3 * model.root_keypoint + k) == a.center[k]);
  const Eigen::Vector3d truth = sample.gt_keypoints3d.row(model.root_keypoint).transpose();
  std::vector<calib::ProjectionMatrix> projections;
  for (const auto& cal : sample.calibs) projections.push_back(calib::projection_matrix(cal));
  CHECK((a.center - geom::triangulate_dlt(sample.pelvis_detections, projections)).norm() == 0.0);
  CHECK((a.center - truth).norm() < 150.0);
  CHECK(a.keypoints2d.size() == 4);
  CHECK(a.vertices.shape() == ad::Shape{model.num_vertices(), 3});

  // Increasing T with the zero-initialized final layer changes nothing.
  NetConfig deeper = c;
  deeper.regress_iterations = 7;
  CHECK(bits_equal(forward_pipeline(model, w, deeper, input).keypoints3d, a.keypoints3d));

  PipelineInput single;
  single.calibs = {sample.calibs[0]};
  single.images = {sample.input_blobs[0]};
  single.pelvis_detections = {sample.pelvis_detections[0]};
  CHECK_THROWS_AS(forward_pipeline(model, w, c, single), Error);
  single.center = truth;
  const auto one = forward_pipeline(model, w, c, single);
  CHECK(one.keypoints2d.size() == 1);
  for (int k = 0; k < 3; ++k) CHECK(one.keypoints3d.at(3 * model.root_keypoint + k) == truth[k]);
}

TEST_CASE("total loss gradient with respect to sampled weights") {
  const auto model = body::builtin_toy_model();
  const auto prior = loss::resolve_prior("builtin:toy", model);
  const auto rig = synth::generate_rig({}, 2);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    synth::SampleOptions so;
    so.gt_params_available = seed % 2 == 0;
    const auto sample = synth::generate_sample(model, rig, so, 100 + seed);
    NetConfig c = small_config();
    c.input_channels = 4;
    auto w = init_weights(c, model, seed);
    // A nonzero final layer so every weight influences the loss.
    Rng rng(seed);
    for (auto& [name, t] : w.named()) {
      if (name.starts_with("regressor.fc2")) {
        for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
      }
    }
    const auto target = train::loss_target(sample, model);
    const auto input = train::pipeline_input(sample);
    ad::GradCheckOptions opts;
    opts.max_coords = 20;
    opts.seed = seed;
    opts.eps = 1e-6;
    auto r = ad::grad_check(
        [&](const std::vector<ad::Tensor>&) {
          const auto out = forward_pipeline(model, w, c, input);
          return loss::total_loss(out.as_prediction(), target, loss::LossWeights{}, prior).total;
        },
        w.all(), opts);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.checked + r.excluded.size() == 20);
  }
}

TEST_CASE("weights compatibility and config JSON") {
  const auto model = body::builtin_toy_model();
  NetConfig c;
  const auto w = init_weights(c, model, 1);
  CHECK_NOTHROW(check_compatible(w, c, model));
  NetConfig other = c;
  other.regressor_hidden = 128;
  CHECK_THROWS_AS(check_compatible(w, other, model), Error);
  CHECK(w.backbone().size() == 2);
  CHECK(w.rest().size() + w.backbone().size() == w.named().size());
  CHECK(w.contains("reducer.weight"));

  const auto back = config_from_json(io::Json::parse(config_to_json(c).dump()));
  CHECK(back.volume == c.volume);
  CHECK(back.encoder2d_channels == c.encoder2d_channels);
  CHECK_THROWS_AS(config_from_json(io::Json::parse(R"({"encoder2d_channels": [8, 5]})")), Error);
  CHECK_THROWS_AS(config_from_json(io::Json::parse(R"({"regress_iterations": 0})")), Error);
  CHECK_THROWS_AS(config_from_json(io::Json::parse(R"({"bogus": 1})")), Error);
}
