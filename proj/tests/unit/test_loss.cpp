#include <cmath>
#include <numbers>

#include <Eigen/LU>

#include "doctest.h"
#include "volagg/error.hpp"
#include "volagg/loss.hpp"
#include "volagg/ops.hpp"
#include "volagg/optim.hpp"
#include "volagg/rng.hpp"

using namespace volagg;
using namespace volagg::loss;

namespace {

ad::Tensor to_tensor(const Eigen::MatrixXd& m, bool rg = false) {
  std::vector<double> d;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) d.push_back(m(r, c));
  return ad::Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, d, rg);
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double spread) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-spread, spread);
  return m;
}

GmmPrior random_prior(Rng& rng, Eigen::Index d, int n) {
  std::vector<double> w;
  std::vector<Eigen::VectorXd> mu;
  std::vector<Eigen::MatrixXd> cov;
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    w.push_back(rng.uniform(0.1, 1.0));
    total += w.back();
    mu.push_back(random_matrix(rng, d, 1, 0.5));
    const Eigen::MatrixXd A = random_matrix(rng, d, d, 1.0);
    Eigen::MatrixXd S = 0.1 * A * A.transpose() + 0.05 * Eigen::MatrixXd::Identity(d, d);
    cov.push_back(0.5 * (S + S.transpose()));
  }
  for (double& g : w) g /= total;
  return make_gmm_prior(w, mu, cov, rng.uniform(0.5, 2.0));
}

// Independent evaluation: explicit inverse and LU determinant.
double brute_force_prior(const GmmPrior& p, const Eigen::VectorXd& theta) {
  double best = std::numeric_limits<double>::infinity();
  const double d = static_cast<double>(theta.size());
  for (std::size_t j = 0; j < p.count(); ++j) {
    const Eigen::VectorXd r = theta - p.means[j];
    const double maha = r.dot(p.covariances[j].inverse() * r);
    const double density = p.c * p.weights[j] * std::exp(-0.5 * maha) /
                           std::sqrt(std::pow(2.0 * std::numbers::pi, d) * p.covariances[j].determinant());
    best = std::min(best, -std::log(density));
  }
  return best;
}

Eigen::MatrixXd keypoints(Rng& rng) { return random_matrix(rng, 12, 3, 800.0); }

LossTarget make_target(Rng& rng, bool with_params) {
  LossTarget t;
  t.keypoints3d = keypoints(rng);
  for (int c = 0; c < 3; ++c) {
    ViewTarget v;
    v.camera_id = "cam" + std::to_string(c);
    v.pixels = random_matrix(rng, 12, 2, 40.0).array() + 48.0;
    v.width = 96;
    v.height = 96;
    t.keypoints2d.push_back(v);
  }
  if (with_params) {
    body::BodyParams p;
    p.pose = random_matrix(rng, 8, 3, 0.4);
    p.shape = random_matrix(rng, 4, 1, 1.0);
    t.params = p;
  }
  return t;
}

LossPrediction perturbed(Rng& rng, const LossTarget& t, double noise) {
  LossPrediction p;
  p.keypoints3d = to_tensor(t.keypoints3d + random_matrix(rng, 12, 3, 30.0 * noise), true);
  for (const auto& v : t.keypoints2d) p.keypoints2d.push_back({v.camera_id, to_tensor(v.pixels + random_matrix(rng, 12, 2, 3.0 * noise), true)});
  const Eigen::MatrixXd pose = t.params ? t.params->pose : Eigen::MatrixXd::Zero(8, 3);
  const Eigen::MatrixXd shape = t.params ? Eigen::MatrixXd(t.params->shape) : Eigen::MatrixXd::Zero(4, 1);
  p.pose = to_tensor(pose + random_matrix(rng, 8, 3, 0.2 * noise), true);
  const Eigen::MatrixXd beta = shape + random_matrix(rng, 4, 1, 0.5 * noise);
  p.shape = ad::Tensor({4}, std::vector<double>(beta.data(), beta.data() + 4), true);
  return p;
}

}  // namespace

TEST_CASE("loss_3d examples") {
  Rng rng(1);
  const Eigen::MatrixXd gt = keypoints(rng);
  CHECK(loss_3d(to_tensor(gt), gt, 0).item() == 0.0);
  Eigen::MatrixXd shifted = gt.rowwise() + Eigen::RowVector3d(50.0, -20.0, 7.0);
  CHECK(loss_3d(to_tensor(shifted), gt, 0).item() == doctest::Approx(0.0).epsilon(1e-12));
  Eigen::MatrixXd one = gt;
  one(5, 1) += 10.0;
  CHECK(std::abs(loss_3d(to_tensor(one), gt, 0).item() - 100.0 / 36.0) <= 1e-10);
  Eigen::MatrixXd bad = gt;
  bad(2, 2) = std::nan("");
  CHECK_THROWS_AS(loss_3d(to_tensor(bad), gt, 0), Error);
  CHECK_THROWS_AS(loss_3d(to_tensor(gt.topRows(5)), gt, 0), Error);
}

TEST_CASE("loss_2d examples") {
  Rng rng(2);
  std::vector<ViewTarget> gt;
  for (int c = 0; c < 4; ++c) {
    gt.push_back({"cam" + std::to_string(c), random_matrix(rng, 12, 2, 100.0).array() + 112.0, 224, 224});
  }
  std::vector<ViewKeypoints> exact;
  for (const auto& v : gt) exact.push_back({v.camera_id, to_tensor(v.pixels)});
  CHECK(loss_2d(exact, gt).item() == 0.0);

  // 1 px error on every coordinate of camera 2 only.
  auto off = exact;
  off[2].pixels = to_tensor(gt[2].pixels.array() + 1.0);
  const double expected = (2.0 / 224.0) * (2.0 / 224.0);
  CHECK(std::abs(loss_2d(off, gt).item() - expected) <= 1e-15);
  const std::vector<ViewKeypoints> single{off[2]};
  const std::vector<ViewTarget> single_gt{gt[2]};
  CHECK(std::abs(loss_2d(off, gt).item() - loss_2d(single, single_gt).item()) <= 1e-15);

  auto renamed = exact;
  renamed[1].camera_id = "elsewhere";
  CHECK_THROWS_AS(loss_2d(renamed, gt), Error);
  CHECK_THROWS_AS(loss_2d(single, gt), Error);
}

TEST_CASE("loss_smpl_params examples") {
  body::BodyParams gt = body::BodyParams::zeros(8, 4);
  const ad::Tensor pose = ad::Tensor::zeros({8, 3});
  ad::Tensor shape = ad::Tensor::zeros({4});
  CHECK(loss_smpl_params(pose, shape, gt).item() == 0.0);
  shape = ad::Tensor::vector({1.0, 0.0, 0.0, 0.0});
  CHECK(loss_smpl_params(pose, shape, gt).item() == doctest::Approx(1.0 / 28.0).epsilon(1e-15));

  Rng rng(3);
  body::BodyParams a{random_matrix(rng, 8, 3, 1.0), random_matrix(rng, 4, 1, 1.0)};
  body::BodyParams b{random_matrix(rng, 8, 3, 1.0), random_matrix(rng, 4, 1, 1.0)};
  auto as_tensors = [](const body::BodyParams& p) {
    return std::pair{to_tensor(p.pose), ad::reshape(to_tensor(p.shape), {4})};
  };
  auto [pa, sa] = as_tensors(a);
  auto [pb, sb] = as_tensors(b);
  CHECK(loss_smpl_params(pa, sa, b).item() == loss_smpl_params(pb, sb, a).item());
  CHECK_THROWS_AS(loss_smpl_params(pa, sa, std::optional<body::BodyParams>{}), Error);
}

TEST_CASE("shape prior examples") {
  CHECK(shape_prior(ad::Tensor::zeros({4})).item() == 0.0);
  CHECK(shape_prior(ad::Tensor::vector({1.0, 0.0, 0.0, 0.0})).item() == 1.0);
  CHECK(shape_prior(ad::Tensor::vector({1.0, 2.0})).item() == 5.0);
}

TEST_CASE("single standard Gaussian at its mean gives the normalizing constant") {
  const auto p = make_gmm_prior({1.0}, {Eigen::VectorXd::Zero(4)}, {Eigen::MatrixXd::Identity(4, 4)});
  const double v = pose_prior_gmm(ad::Tensor::zeros({4}), p).item();
  CHECK(std::abs(v - 0.5 * 4.0 * std::log(2.0 * std::numbers::pi)) <= 1e-12);
  CHECK(std::abs(v - 3.6757541328186907) <= 1e-12);
}

TEST_CASE("prior equals the exhaustive minimum over components") {
  Rng rng(4);
  const auto p = random_prior(rng, 6, 8);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::VectorXd theta = random_matrix(rng, 6, 1, 1.5);
    const double got = pose_prior_gmm(to_tensor(theta), p).item();
    const double want = brute_force_prior(p, theta);
    CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("prior minimum is attained by the densest component at its own mean") {
  Rng rng(5);
  const auto p = random_prior(rng, 5, 8);
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t j = 0; j < p.count(); ++j) {
    const double score = p.weights[j] / std::sqrt(p.covariances[j].determinant());
    if (score > best_score) {
      best_score = score;
      best = j;
    }
  }
  const double v = pose_prior_gmm(to_tensor(p.means[best]), p).item();
  CHECK(v == doctest::Approx(component_energy(p, best, p.means[best])).epsilon(1e-14));
}

TEST_CASE("prior validation") {
  const Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(make_gmm_prior({0.5, 0.4}, {mu, mu}, {I, I}), Error);
  Eigen::MatrixXd indefinite = I;
  indefinite(1, 1) = -1.0;
  CHECK_THROWS_AS(make_gmm_prior({1.0}, {mu}, {indefinite}), Error);
  Eigen::MatrixXd asym = I;
  asym(0, 1) = 0.3;
  CHECK_THROWS_AS(make_gmm_prior({1.0}, {mu}, {asym}), Error);
  CHECK_THROWS_AS(make_gmm_prior({1.0}, {mu}, {I}, 0.0), Error);
  const auto p = make_gmm_prior({1.0}, {mu}, {I});
  CHECK_THROWS_AS(pose_prior_gmm(ad::Tensor::zeros({3}), p), Error);
}

TEST_CASE("toy prior is deterministic and round trips through JSON") {
  const auto a = toy_gmm_prior(21);
  const auto b = toy_gmm_prior(21);
  CHECK(a.count() == 8);
  CHECK(a.dim() == 21);
  double total = 0.0;
  for (std::size_t j = 0; j < a.count(); ++j) {
    total += a.weights[j];
    CHECK(a.means[j] == b.means[j]);
    CHECK((a.cholesky[j].diagonal().array() > 0.0).all());
  }
  CHECK(std::abs(total - 1.0) <= 1e-9);
  const auto c = prior_from_json(io::Json::parse(prior_to_json(a).dump()));
  for (std::size_t j = 0; j < a.count(); ++j) {
    CHECK(c.weights[j] == a.weights[j]);
    CHECK(c.covariances[j] == a.covariances[j]);
    CHECK(c.log_det[j] == a.log_det[j]);
  }
  // Nonnegative everywhere, zero at the densest mode.
  Rng rng(11);
  double lowest = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < a.count(); ++j) {
    lowest = std::min(lowest, pose_prior_gmm(to_tensor(a.means[j]), a).item());
  }
  CHECK(std::abs(lowest) <= 1e-12);
  for (int i = 0; i < 200; ++i) CHECK(pose_prior_gmm(to_tensor(random_matrix(rng, 21, 1, 1.0)), a).item() >= 0.0);
  const auto model = body::builtin_toy_model();
  CHECK(resolve_prior("builtin:toy", model).dim() == 3 * (model.num_joints() - 1));
}

TEST_CASE("loss gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(9, seed));
    const auto prior = random_prior(rng, 21, 8);
    for (bool with_params : {true, false}) {
      const auto target = make_target(rng, with_params);
      const auto pred = perturbed(rng, target, 1.0);
      std::vector<ad::Tensor> inputs{pred.keypoints3d, pred.pose, pred.shape};
      for (const auto& v : pred.keypoints2d) inputs.push_back(v.pixels);
      ad::GradCheckOptions opts;
      opts.eps = 1e-6;
      auto r = ad::grad_check(
          [&](const std::vector<ad::Tensor>& in) {
            LossPrediction p = pred;
            p.keypoints3d = in[0];
            p.pose = in[1];
            p.shape = in[2];
            for (std::size_t c = 0; c < p.keypoints2d.size(); ++c) p.keypoints2d[c].pixels = in[3 + c];
            // Scale the 3D term down so all terms share a magnitude.
            LossWeights w;
            w.l3d = 1e-4;
            w.lprior_pose = 0.5;
            w.lprior_shape = 0.5;
            return total_loss(p, target, w, prior).total;
          },
          inputs, opts);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("total loss composition and exclusive branch") {
  Rng rng(10);
  const auto prior = toy_gmm_prior(21);
  SUBCASE("perfect prediction with parameters gives zero") {
    const auto target = make_target(rng, true);
    const auto pred = perturbed(rng, target, 0.0);
    CHECK(std::abs(total_loss(pred, target, LossWeights{}, prior).total.item()) <= 1e-12);
  }
  SUBCASE("hand-summed terms with unit weights") {
    for (bool with_params : {true, false}) {
      const auto target = make_target(rng, with_params);
      const auto pred = perturbed(rng, target, 1.0);
      LossWeights ones{1.0, 1.0, 1.0, 1.0, 1.0};
      const auto t = total_loss(pred, target, ones, prior);
      double manual = loss_3d(pred.keypoints3d, target.keypoints3d, 0).item() + loss_2d(pred.keypoints2d, target.keypoints2d).item();
      if (with_params) {
        manual += loss_smpl_params(pred.pose, pred.shape, *target.params).item();
      } else {
        manual += pose_prior_gmm(prior_pose_coordinates(pred.pose), prior).item() + shape_prior(pred.shape).item();
      }
      CHECK(std::abs(t.total.item() - manual) <= 1e-9 * std::max(1.0, manual));
      double sum = 0.0;
      for (double v : t.weighted_values()) sum += v;
      CHECK(std::abs(t.total.item() - sum) <= 1e-9 * std::max(1.0, sum));
    }
  }
  SUBCASE("weight-zeroing equivalence") {
    const auto with = make_target(rng, true);
    const auto pred_with = perturbed(rng, with, 1.0);
    LossWeights w;
    LossWeights no_prior = w;
    no_prior.lprior_pose = 0.0;
    no_prior.lprior_shape = 0.0;
    CHECK(total_loss(pred_with, with, w, prior).total.item() == total_loss(pred_with, with, no_prior, prior).total.item());

    const auto without = make_target(rng, false);
    const auto pred_without = perturbed(rng, without, 1.0);
    LossWeights no_theta = w;
    no_theta.ltheta = 0.0;
    const auto a = total_loss(pred_without, without, w, prior);
    CHECK(a.total.item() == total_loss(pred_without, without, no_theta, prior).total.item());
    CHECK(a.lprior_pose.item() > 0.0);
    CHECK(a.ltheta.item() == 0.0);
  }
  SUBCASE("monotone in each weight") {
    const auto target = make_target(rng, false);
    const auto pred = perturbed(rng, target, 1.0);
    const LossWeights base;
    const double t0 = total_loss(pred, target, base, prior).total.item();
    for (int k = 0; k < 5; ++k) {
      LossWeights w = base;
      double* field[] = {&w.l3d, &w.l2d, &w.ltheta, &w.lprior_pose, &w.lprior_shape};
      *field[k] += 0.5;
      CHECK(total_loss(pred, target, w, prior).total.item() >= t0);
    }
  }
}

TEST_CASE("loss weights JSON validation") {
  CHECK_THROWS_AS(weights_from_json(io::Json::parse(R"({"l3d": -1})")), Error);
  CHECK_THROWS_AS(weights_from_json(io::Json::parse(R"({"lfoo": 1})")), Error);
  const auto w = weights_from_json(io::Json::parse(R"({"l2d": 0.5})"));
  CHECK(w.l2d == 0.5);
  CHECK(w.lprior_pose == 1e-3);
}
