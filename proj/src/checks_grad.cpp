#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "volagg/checks.hpp"
#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/rng.hpp"
#include "volagg/synth.hpp"
#include "volagg/volume.hpp"

namespace volagg::checks {

namespace {

using ad::Shape;
using ad::Tensor;
using Inputs = std::vector<Tensor>;

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi, bool requires_grad = false) {
  std::vector<double> d(ad::numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

// Reduces an op output to a scalar with fixed random weights so every output
// coordinate influences the checked gradient.
Tensor contract(const Tensor& y, const Tensor& probe) { return ad::sum(ad::mul(y, probe)); }

ad::GradCheckResult check(const std::function<Tensor(const Inputs&)>& f, const Inputs& inputs, double eps = 1e-5,
                          std::size_t max_coords = 0, std::uint64_t seed = 0) {
  ad::GradCheckOptions o;
  o.eps = eps;
  o.max_coords = max_coords;
  o.seed = seed;
  return ad::grad_check(f, inputs, o);
}

// One op applied to freshly drawn inputs in [-2, 2]; the output is contracted
// against a random probe of its own shape.
GradCase elementwise_case(std::string name, std::vector<Shape> shapes,
                          std::function<Tensor(const Inputs&)> op, double lo = -2.0, double hi = 2.0) {
  return {std::move(name), "op", [shapes, op, lo, hi](std::uint64_t seed) {
            Rng rng(seed);
            Inputs in;
            for (const auto& s : shapes) in.push_back(random_tensor(rng, s, lo, hi, true));
            Tensor probe;
            {
              ad::NoGradScope no_grad;
              const Tensor y = op(in);
              probe = random_tensor(rng, y.shape(), -1.0, 1.0);
            }
            return check([&](const Inputs& x) { return contract(op(x), probe); }, in);
          }};
}

calib::CameraCalib ring_camera(std::size_t c, double radius, double focal, int size) {
  const double az = 2.0 * std::numbers::pi * (static_cast<double>(c) + 0.3) / 4.0;
  const Eigen::Vector3d eye(radius * std::cos(az), radius * std::sin(az), 400.0);
  return calib::look_at_camera("cam" + std::to_string(c), eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(),
                               focal, size, size);
}

volume::FeatureVolume random_volume(Rng& rng, const volume::VolumeConfig& cfg, const std::string& id,
                                    double visible_fraction) {
  volume::FeatureVolume v;
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
  v.data = Tensor({cfg.channels, L, L, L}, d, true);
  return v;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

body::BodyParams random_params(Rng& rng, const body::BodyModelDef& m, double pose_scale) {
  auto p = body::BodyParams::zeros(m.num_joints(), m.num_shape());
  for (Eigen::Index i = 0; i < p.pose.size(); ++i) p.pose.data()[i] = rng.uniform(-pose_scale, pose_scale);
  for (Eigen::Index b = 0; b < p.shape.size(); ++b) p.shape[b] = rng.uniform(-1.0, 1.0);
  return p;
}

Tensor pose_tensor(const body::BodyParams& p, bool requires_grad) {
  std::vector<double> d;
  for (Eigen::Index j = 0; j < p.pose.rows(); ++j)
    for (int a = 0; a < 3; ++a) d.push_back(p.pose(j, a));
  return Tensor({static_cast<std::size_t>(p.pose.rows()), 3}, d, requires_grad);
}

Tensor shape_tensor(const body::BodyParams& p, bool requires_grad) {
  return Tensor({static_cast<std::size_t>(p.shape.size())}, std::vector<double>(p.shape.data(), p.shape.data() + p.shape.size()),
                requires_grad);
}

net::NetConfig tiny_net() {
  net::NetConfig c;
  c.input_channels = 4;
  c.encoder2d_channels = {3, 4};
  c.volume = {2500.0, 4, 4};
  c.encoder3d_blocks = 1;
  c.group_norm_groups = 2;
  c.regressor_hidden = 16;
  c.regress_iterations = 2;
  return c;
}

// Total loss of the full pipeline with respect to 20 sampled weights.
ad::GradCheckResult end_to_end(std::uint64_t seed, bool with_params) {
  const auto model = body::builtin_toy_model();
  const auto prior = loss::resolve_prior("builtin:toy", model);
  const auto rig = synth::generate_rig({}, derive_seed(seed, 0));
  synth::SampleOptions so;
  so.gt_params_available = with_params;
  const auto sample = synth::generate_sample(model, rig, so, derive_seed(seed, 1));
  const auto cfg = tiny_net();
  auto w = net::init_weights(cfg, model, derive_seed(seed, 2));
  // A nonzero final layer so every weight influences the loss.
  Rng rng(derive_seed(seed, 3));
  for (auto& [name, t] : w.named()) {
    if (name.starts_with("regressor.fc2")) {
      for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
    }
  }
  const auto target = train::loss_target(sample, model);
  const auto input = train::pipeline_input(sample);
  return check(
      [&](const Inputs&) {
        const auto out = net::forward_pipeline(model, w, cfg, input);
        return loss::total_loss(out.as_prediction(), target, loss::LossWeights{}, prior).total;
      },
      w.all(), 1e-6, 20, seed);
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;

  // Elementwise and structural ops.
  cases.push_back(elementwise_case("add", {{3, 4}, {3, 4}}, [](const Inputs& x) { return ad::add(x[0], x[1]); }));
  cases.push_back(elementwise_case("add_broadcast", {{3, 4}, {4}}, [](const Inputs& x) { return ad::add(x[0], x[1]); }));
  cases.push_back(elementwise_case("sub", {{2, 5}, {5}}, [](const Inputs& x) { return ad::sub(x[0], x[1]); }));
  cases.push_back(elementwise_case("mul", {{3, 4}, {3, 4}}, [](const Inputs& x) { return ad::mul(x[0], x[1]); }));
  cases.push_back(elementwise_case("mul_broadcast", {{2, 3, 2}, {3, 2}}, [](const Inputs& x) { return ad::mul(x[0], x[1]); }));
  cases.push_back(elementwise_case("scale", {{6}}, [](const Inputs& x) { return ad::scale(x[0], -1.7); }));
  cases.push_back(elementwise_case("matmul", {{3, 4}, {4, 2}}, [](const Inputs& x) { return ad::matmul(x[0], x[1]); }));
  cases.push_back(elementwise_case("linear", {{2, 5}, {3, 5}, {3}},
                                   [](const Inputs& x) { return ad::linear(x[0], x[1], x[2]); }));
  cases.push_back(elementwise_case("linear_vector", {{5}, {3, 5}}, [](const Inputs& x) { return ad::linear(x[0], x[1]); }));
  cases.push_back(elementwise_case("reshape", {{2, 6}}, [](const Inputs& x) { return ad::reshape(x[0], {3, 4}); }));
  cases.push_back(elementwise_case("flatten", {{2, 3, 2}}, [](const Inputs& x) { return ad::flatten(x[0]); }));
  cases.push_back(elementwise_case("concat_axis0", {{2, 3}, {1, 3}}, [](const Inputs& x) {
    return ad::concat(std::vector<Tensor>{x[0], x[1]}, 0);
  }));
  cases.push_back(elementwise_case("concat_axis1", {{2, 3}, {2, 2}}, [](const Inputs& x) {
    return ad::concat(std::vector<Tensor>{x[0], x[1]}, 1);
  }));
  cases.push_back(elementwise_case("slice", {{5, 3}}, [](const Inputs& x) { return ad::slice(x[0], 0, 1, 3); }));
  cases.push_back(elementwise_case("slice_axis1", {{2, 6}}, [](const Inputs& x) { return ad::slice(x[0], 1, 2, 3); }));
  cases.push_back(elementwise_case("relu", {{4, 5}}, [](const Inputs& x) { return ad::relu(x[0]); }));
  cases.push_back(elementwise_case("square", {{7}}, [](const Inputs& x) { return ad::square(x[0]); }));
  cases.push_back(elementwise_case("sum", {{3, 3}}, [](const Inputs& x) { return ad::sum(x[0]); }));
  cases.push_back(elementwise_case("mean", {{3, 3}}, [](const Inputs& x) { return ad::mean(x[0]); }));
  cases.push_back(elementwise_case("softmax_axis0", {{3, 4}}, [](const Inputs& x) { return ad::softmax(x[0], 0); }));
  cases.push_back(elementwise_case("softmax_axis1", {{3, 4}}, [](const Inputs& x) { return ad::softmax(x[0], 1); }));

  // Convolutional blocks.
  cases.push_back(elementwise_case("conv2d", {{2, 6, 5}, {3, 2, 3, 3}, {3}},
                                   [](const Inputs& x) { return ad::conv2d(x[0], x[1], x[2]); }));
  cases.push_back(elementwise_case("conv2d_stride2", {{2, 7, 6}, {3, 2, 3, 3}, {3}},
                                   [](const Inputs& x) { return ad::conv2d(x[0], x[1], x[2], 2); }));
  cases.push_back(elementwise_case("conv2d_1x1", {{4, 3, 3}, {2, 4, 1, 1}, {2}},
                                   [](const Inputs& x) { return ad::conv2d(x[0], x[1], x[2]); }));
  cases.push_back(elementwise_case("conv3d", {{2, 4, 4, 4}, {2, 2, 3, 3, 3}, {2}},
                                   [](const Inputs& x) { return ad::conv3d(x[0], x[1], x[2]); }));
  cases.push_back(elementwise_case("avg_pool3d", {{2, 4, 4, 4}}, [](const Inputs& x) { return ad::avg_pool3d(x[0]); }));
  cases.push_back(elementwise_case("group_norm", {{4, 2, 3, 3}}, [](const Inputs& x) { return ad::group_norm(x[0], 2); }));

  // Geometry and the body model.
  cases.push_back({"project_points", "op", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto P = calib::projection_matrix(ring_camera(seed % 4, rng.uniform(2500, 4000), 1000.0, 224));
                     Tensor x = random_tensor(rng, {4, 3}, -800.0, 800.0, true);
                     const Tensor probe = random_tensor(rng, {4, 2}, -1.0, 1.0);
                     return check([&](const Inputs& in) { return contract(calib::project_points(in[0], P), probe); },
                                  {x}, 1e-4);
                   }});
  cases.push_back({"backproject", "op", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const volume::VolumeConfig cfg{2500.0, 4, 2};
                     const Eigen::Vector3d center(rng.uniform(-100, 100), rng.uniform(-100, 100), 0.0);
                     Tensor grid = volume::make_grid(center, cfg);
                     grid.set_requires_grad(true);
                     Tensor map = random_tensor(rng, {2, 12, 12}, -2.0, 2.0, true);
                     const auto P = calib::projection_matrix(ring_camera(seed % 4, 3500.0, 135.0, 96));
                     const Tensor probe = random_tensor(rng, {2, 4, 4, 4}, -1.0, 1.0);
                     // Grid coordinates are in mm, hence the larger step.
                     return check(
                         [&](const Inputs& in) {
                           const calib::FeatureMap m{in[0], 0.125};
                           return contract(volume::backproject(m, P, in[1], center, cfg).data, probe);
                         },
                         {map, grid}, 1e-4);
                   }});
  cases.push_back({"aggregate_softmax", "op", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const volume::VolumeConfig cfg{2500.0, 3, 2};
                     std::vector<volume::FeatureVolume> views;
                     Inputs inputs;
                     for (int c = 0; c < 3; ++c) {
                       views.push_back(random_volume(rng, cfg, "v" + std::to_string(c), 0.7));
                       inputs.push_back(views.back().data);
                     }
                     const Tensor probe = random_tensor(rng, {2, 3, 3, 3}, -1.0, 1.0);
                     return check(
                         [&](const Inputs& in) {
                           auto vs = views;
                           for (std::size_t c = 0; c < vs.size(); ++c) vs[c].data = in[c];
                           return contract(volume::aggregate_softmax(vs).data, probe);
                         },
                         inputs);
                   }});
  cases.push_back({"body_forward", "op", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto m = body::builtin_toy_model();
                     const auto p = random_params(rng, m, 1.5);
                     const Tensor pose = pose_tensor(p, true), shape = shape_tensor(p, true);
                     const Tensor pv = random_tensor(rng, {m.num_vertices(), 3}, -1e-3, 1e-3);
                     const Tensor pj = random_tensor(rng, {m.num_joints(), 3}, -1e-3, 1e-3);
                     return check(
                         [&](const Inputs& in) {
                           const auto out = body::forward(m, in[0], in[1]);
                           return ad::add(contract(out.vertices, pv), contract(out.joints, pj));
                         },
                         {pose, shape});
                   }});
  cases.push_back({"regress_keypoints", "op", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto m = body::builtin_toy_model();
                     Tensor v = random_tensor(rng, {m.num_vertices(), 3}, -500.0, 500.0, true);
                     const Tensor probe = random_tensor(rng, {m.num_keypoints(), 3}, -1.0, 1.0);
                     return check([&](const Inputs& in) { return contract(body::regress_keypoints(m, in[0]), probe); },
                                  {v}, 1e-4);
                   }});

  // Loss terms.
  cases.push_back({"loss_3d", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor pred = random_tensor(rng, {12, 3}, -500.0, 500.0, true);
                     const Eigen::MatrixXd gt = random_matrix(rng, 12, 3, -500.0, 500.0);
                     return check([&](const Inputs& in) { return loss::loss_3d(in[0], gt, 2); }, {pred}, 1e-4);
                   }});
  cases.push_back({"loss_2d", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor a = random_tensor(rng, {6, 2}, 0.0, 224.0, true);
                     Tensor b = random_tensor(rng, {6, 2}, 0.0, 96.0, true);
                     const std::vector<loss::ViewTarget> gt{{"a", random_matrix(rng, 6, 2, 0.0, 224.0), 224, 200},
                                                            {"b", random_matrix(rng, 6, 2, 0.0, 96.0), 96, 96}};
                     return check([&](const Inputs& in) { return loss::loss_2d({{"a", in[0]}, {"b", in[1]}}, gt); },
                                  {a, b}, 1e-4);
                   }});
  cases.push_back({"loss_smpl_params", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto m = body::builtin_toy_model();
                     const auto p = random_params(rng, m, 1.0), gt = random_params(rng, m, 1.0);
                     return check([&](const Inputs& in) { return loss::loss_smpl_params(in[0], in[1], gt); },
                                  {pose_tensor(p, true), shape_tensor(p, true)});
                   }});
  cases.push_back({"pose_prior_gmm", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto prior = loss::toy_gmm_prior(21);
                     Tensor theta = random_tensor(rng, {21}, -0.6, 0.6, true);
                     return check([&](const Inputs& in) { return loss::pose_prior_gmm(in[0], prior); }, {theta});
                   }});
  cases.push_back({"prior_pose_coordinates", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto prior = loss::toy_gmm_prior(21);
                     Tensor pose = random_tensor(rng, {8, 3}, -0.6, 0.6, true);
                     return check(
                         [&](const Inputs& in) { return loss::pose_prior_gmm(loss::prior_pose_coordinates(in[0]), prior); },
                         {pose});
                   }});
  cases.push_back({"shape_prior", "loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor beta = random_tensor(rng, {4}, -2.0, 2.0, true);
                     return check([&](const Inputs& in) { return loss::shape_prior(in[0]); }, {beta});
                   }});
  for (bool with_params : {true, false}) {
    cases.push_back({with_params ? "total_loss_with_params" : "total_loss_without_params", "loss",
                     [with_params](std::uint64_t seed) {
                       Rng rng(seed);
                       const auto m = body::builtin_toy_model();
                       const auto prior = loss::toy_gmm_prior(21);
                       const auto p = random_params(rng, m, 0.5);
                       Tensor pose = pose_tensor(p, true), shape = shape_tensor(p, true);
                       Tensor kp = random_tensor(rng, {m.num_keypoints(), 3}, -500.0, 500.0, true);
                       Tensor px = random_tensor(rng, {m.num_keypoints(), 2}, 0.0, 96.0, true);
                       loss::LossTarget target;
                       target.keypoints3d = random_matrix(rng, static_cast<Eigen::Index>(m.num_keypoints()), 3, -500, 500);
                       target.keypoints2d = {{"cam0", random_matrix(rng, static_cast<Eigen::Index>(m.num_keypoints()), 2, 0, 96), 96, 96}};
                       if (with_params) target.params = random_params(rng, m, 0.5);
                       target.root_keypoint = static_cast<std::size_t>(m.root_keypoint);
                       return check(
                           [&](const Inputs& in) {
                             const loss::LossPrediction pred{in[0], in[1], in[2], {{"cam0", in[3]}}};
                             return loss::total_loss(pred, target, {}, prior).total;
                           },
                           {pose, shape, kp, px}, 1e-5);
                     }});
  }

  // The whole pipeline.
  cases.push_back({"pipeline_total_loss_with_params", "end-to-end",
                   [](std::uint64_t seed) { return end_to_end(seed, true); }});
  cases.push_back({"pipeline_total_loss_without_params", "end-to-end",
                   [](std::uint64_t seed) { return end_to_end(seed, false); }});
  return cases;
}

std::vector<GradSummary> run_gradient_suite(std::uint64_t seed, std::size_t seeds_per_case, double tolerance,
                                            const std::function<void(const GradSummary&)>& on_case) {
  if (seeds_per_case == 0) fail(ErrorKind::InvalidInput, "gradient suite: at least one seed per case required");
  const auto cases = gradient_cases();
  std::vector<GradSummary> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradSummary s;
    s.name = cases[c].name;
    s.group = cases[c].group;
    s.passed = true;
    for (std::size_t k = 0; k < seeds_per_case; ++k) {
      const auto r = cases[c].run(derive_seed(derive_seed(seed, c), k));
      s.max_rel_error = std::max(s.max_rel_error, r.max_rel_error);
      s.checked += r.checked;
      s.excluded += r.excluded.size();
      if (!(r.max_rel_error <= tolerance)) s.passed = false;
      ++s.seeds;
    }
    if (s.checked == 0) s.passed = false;
    if (on_case) on_case(s);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace volagg::checks
