#include "volagg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include <Eigen/Cholesky>

#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/rng.hpp"

namespace volagg::loss {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void require_finite(const ad::Tensor& t, const std::string& what) {
  for (double v : t.data()) {
    if (std::isnan(v)) fail(ErrorKind::NumericalFailure, what + ": NaN in input " + ad::shape_str(t.shape()));
  }
}

ad::Tensor constant_like(const Eigen::MatrixXd& m) {
  std::vector<double> d(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) d[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return ad::Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(d));
}

}  // namespace

GmmPrior make_gmm_prior(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
                        std::vector<Eigen::MatrixXd> covariances, double c) {
  const std::size_t n = weights.size();
  if (n == 0) fail(ErrorKind::InvalidInput, "prior: at least one component required");
  if (means.size() != n || covariances.size() != n) {
    fail(ErrorKind::InvalidInput, "prior: weights, means and covariances must have the same count");
  }
  if (!(c > 0.0) || !std::isfinite(c)) fail(ErrorKind::InvalidInput, "prior: constant c must be positive");
  double total = 0.0;
  for (double g : weights) {
    if (!(g > 0.0)) fail(ErrorKind::InvalidInput, "prior: weights must be positive");
    total += g;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    std::ostringstream os;
    os << "prior: weights sum to " << total << ", expected 1";
    fail(ErrorKind::InvalidInput, os.str());
  }
  const auto d = means.front().size();
  GmmPrior p;
  p.c = c;
  for (std::size_t j = 0; j < n; ++j) {
    if (means[j].size() != d || covariances[j].rows() != d || covariances[j].cols() != d) {
      fail(ErrorKind::InvalidInput, "prior: component " + std::to_string(j) + " has inconsistent dimension");
    }
    if (!means[j].allFinite() || !covariances[j].allFinite()) {
      fail(ErrorKind::InvalidInput, "prior: component " + std::to_string(j) + " is not finite");
    }
    if ((covariances[j] - covariances[j].transpose()).cwiseAbs().maxCoeff() > 1e-9 * covariances[j].cwiseAbs().maxCoeff()) {
      fail(ErrorKind::InvalidInput, "prior: covariance " + std::to_string(j) + " is not symmetric");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(covariances[j]);
    Eigen::MatrixXd L = llt.matrixL();
    if (llt.info() != Eigen::Success || !(L.diagonal().array() > 0.0).all()) {
      fail(ErrorKind::InvalidInput, "prior: covariance " + std::to_string(j) + " is not positive definite");
    }
    p.cholesky.push_back(L);
    p.log_det.push_back(2.0 * L.diagonal().array().log().sum());
  }
  p.weights = std::move(weights);
  p.means = std::move(means);
  p.covariances = std::move(covariances);
  return p;
}

GmmPrior toy_gmm_prior(std::size_t dim) {
  Rng rng(0x6d6d7072696f72ull);
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covs;
  const auto d = static_cast<Eigen::Index>(dim);
  for (int j = 0; j < 8; ++j) {
    weights.push_back(0.5 + rng.uniform());
    Eigen::VectorXd mu(d);
    for (Eigen::Index i = 0; i < d; ++i) mu[i] = 0.25 * rng.normal();
    Eigen::MatrixXd A(d, d);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.normal();
    Eigen::MatrixXd S = 0.02 * (A * A.transpose()) / static_cast<double>(dim) + 0.02 * Eigen::MatrixXd::Identity(d, d);
    S = 0.5 * (S + S.transpose());
    means.push_back(mu);
    covs.push_back(S);
  }
  double total = 0.0;
  for (double g : weights) total += g;
  for (double& g : weights) g /= total;
  // c is chosen so the densest mode has energy exactly 0 and the prior is
  // nonnegative everywhere, like the other loss terms.
  GmmPrior p = make_gmm_prior(std::move(weights), std::move(means), std::move(covs), 1.0);
  double floor = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < p.count(); ++j) floor = std::min(floor, component_energy(p, j, p.means[j]));
  p.c = std::exp(floor);
  return p;
}

double component_energy(const GmmPrior& prior, std::size_t j, const Eigen::VectorXd& theta) {
  const Eigen::VectorXd z = prior.cholesky[j].triangularView<Eigen::Lower>().solve(theta - prior.means[j]);
  const double d = static_cast<double>(theta.size());
  return 0.5 * z.squaredNorm() + 0.5 * prior.log_det[j] + 0.5 * d * kLog2Pi - std::log(prior.weights[j]) -
         std::log(prior.c);
}

io::Json prior_to_json(const GmmPrior& prior) {
  io::Json j;
  j["weights"] = prior.weights;
  io::Json means = io::Json::array(), covs = io::Json::array();
  for (std::size_t k = 0; k < prior.count(); ++k) {
    means.push_back(io::vector_to_json(prior.means[k]));
    covs.push_back(io::matrix_to_json(prior.covariances[k]));
  }
  j["means"] = std::move(means);
  j["covariances"] = std::move(covs);
  j["c"] = prior.c;
  return j;
}

GmmPrior prior_from_json(const io::Json& j) {
  for (const char* key : {"weights", "means", "covariances"}) {
    if (!j.contains(key) || !j[key].is_array()) fail(ErrorKind::Parse, std::string("prior: missing array \"") + key + "\"");
  }
  std::vector<double> weights;
  for (const auto& w : j["weights"]) {
    if (!w.is_number()) fail(ErrorKind::Parse, "prior: weights must be numbers");
    weights.push_back(w.get<double>());
  }
  std::vector<Eigen::VectorXd> means;
  for (const auto& m : j["means"]) means.push_back(io::vector_from_json(m, "prior mean"));
  std::vector<Eigen::MatrixXd> covs;
  for (const auto& s : j["covariances"]) covs.push_back(io::matrix_from_json(s, "prior covariance"));
  const double c = j.contains("c") ? j["c"].get<double>() : 1.0;
  return make_gmm_prior(std::move(weights), std::move(means), std::move(covs), c);
}

GmmPrior load_prior(const std::filesystem::path& path) { return prior_from_json(io::read_json_file(path)); }

GmmPrior resolve_prior(const std::string& spec, const body::BodyModelDef& model) {
  const std::size_t dim = 3 * (model.num_joints() - 1);
  GmmPrior p = (spec.empty() || spec == "builtin:toy") ? toy_gmm_prior(dim) : load_prior(spec);
  if (p.dim() != dim) {
    fail(ErrorKind::ConfigMismatch, "prior dimension " + std::to_string(p.dim()) + " does not match model pose dimension " +
                                        std::to_string(dim));
  }
  return p;
}

ad::Tensor pose_prior_gmm(const ad::Tensor& theta, const GmmPrior& prior) {
  if (theta.size() != prior.dim()) {
    fail(ErrorKind::DimensionMismatch, "pose_prior_gmm: theta has " + std::to_string(theta.size()) +
                                           " entries, prior dimension is " + std::to_string(prior.dim()));
  }
  const auto td = theta.data();
  const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(td.data(), static_cast<Eigen::Index>(td.size()));
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t j = 0; j < prior.count(); ++j) {
    const double e = component_energy(prior, j, x);
    if (e < best) {
      best = e;
      arg = j;
    }
  }
  if (ad::branch::recording()) ad::branch::note(0x6a00 + arg);
  const bool rec = ad::should_record({&theta});
  ad::Tensor y = ad::make_result({}, {best}, rec);
  if (rec) {
    const Eigen::MatrixXd& L = prior.cholesky[arg];
    const Eigen::VectorXd z = L.triangularView<Eigen::Lower>().solve(x - prior.means[arg]);
    // d/dtheta 0.5 |L^{-1}(theta - mu)|^2 = Sigma^{-1}(theta - mu) = L^{-T} z
    const Eigen::VectorXd grad = L.transpose().triangularView<Eigen::Upper>().solve(z);
    ad::record("pose_prior_gmm", {&y}, [y, theta, grad]() {
      const double up = ad::upstream(y.impl())[0];
      double* g = ad::grad_target(theta);
      for (Eigen::Index i = 0; i < grad.size(); ++i) g[i] += up * grad[i];
    });
  }
  return y;
}

ad::Tensor prior_pose_coordinates(const ad::Tensor& pose) {
  if (pose.rank() != 2 || pose.dim(1) != 3 || pose.dim(0) < 2) {
    fail(ErrorKind::DimensionMismatch, "prior_pose_coordinates: expected [J,3] with J >= 2, got " + ad::shape_str(pose.shape()));
  }
  return ad::flatten(ad::slice(pose, 0, 1, pose.dim(0) - 1));
}

ad::Tensor shape_prior(const ad::Tensor& beta) { return ad::sum(ad::square(beta)); }

ad::Tensor loss_3d(const ad::Tensor& pred, const Eigen::MatrixXd& gt, std::size_t root_index) {
  if (pred.rank() != 2 || pred.dim(1) != 3 || static_cast<Eigen::Index>(pred.dim(0)) != gt.rows() || gt.cols() != 3) {
    fail(ErrorKind::DimensionMismatch, "loss_3d: prediction " + ad::shape_str(pred.shape()) + " vs ground truth [" +
                                           std::to_string(gt.rows()) + "," + std::to_string(gt.cols()) + "]");
  }
  if (root_index >= pred.dim(0)) fail(ErrorKind::InvalidInput, "loss_3d: root index out of range");
  require_finite(pred, "loss_3d prediction");
  if (gt.hasNaN()) fail(ErrorKind::NumericalFailure, "loss_3d: NaN in ground truth");
  const Eigen::MatrixXd gt_rel = gt.rowwise() - gt.row(static_cast<Eigen::Index>(root_index));
  const ad::Tensor root = ad::slice(pred, 0, root_index, 1);  // [1,3]
  const ad::Tensor ones = ad::Tensor::full({pred.dim(0), 1}, 1.0);
  const ad::Tensor pred_rel = ad::sub(pred, ad::matmul(ones, root));
  return ad::mean(ad::square(ad::sub(pred_rel, constant_like(gt_rel))));
}

ad::Tensor loss_2d(const std::vector<ViewKeypoints>& pred, const std::vector<ViewTarget>& gt) {
  std::map<std::string, const ViewTarget*> by_id;
  for (const auto& g : gt) by_id[g.camera_id] = &g;
  if (by_id.size() != gt.size() || pred.size() != gt.size()) {
    fail(ErrorKind::InvalidInput, "loss_2d: prediction has " + std::to_string(pred.size()) + " cameras, target has " +
                                      std::to_string(gt.size()));
  }
  ad::Tensor total = ad::Tensor::scalar(0.0);
  bool first = true;
  for (const auto& p : pred) {
    auto it = by_id.find(p.camera_id);
    if (it == by_id.end()) fail(ErrorKind::InvalidInput, "loss_2d: no target for camera '" + p.camera_id + "'");
    const ViewTarget& t = *it->second;
    if (p.pixels.rank() != 2 || p.pixels.dim(1) != 2 || static_cast<Eigen::Index>(p.pixels.dim(0)) != t.pixels.rows() ||
        t.pixels.cols() != 2) {
      fail(ErrorKind::DimensionMismatch, "loss_2d: camera '" + p.camera_id + "' prediction " +
                                             ad::shape_str(p.pixels.shape()) + " does not match target");
    }
    require_finite(p.pixels, "loss_2d prediction");
    // u -> 2u/w - 1, v -> 2v/h - 1; the offset cancels in the difference.
    const ad::Tensor norm = ad::Tensor::vector({2.0 / t.width, 2.0 / t.height});
    Eigen::MatrixXd gt_scaled = t.pixels;
    gt_scaled.col(0) *= 2.0 / t.width;
    gt_scaled.col(1) *= 2.0 / t.height;
    const ad::Tensor term = ad::mean(ad::square(ad::sub(ad::mul(p.pixels, norm), constant_like(gt_scaled))));
    total = first ? term : ad::add(total, term);
    first = false;
  }
  return total;
}

ad::Tensor loss_smpl_params(const ad::Tensor& pose, const ad::Tensor& shape, const body::BodyParams& gt) {
  if (static_cast<Eigen::Index>(pose.size()) != gt.pose.size() || static_cast<Eigen::Index>(shape.size()) != gt.shape.size()) {
    fail(ErrorKind::DimensionMismatch, "loss_smpl_params: predicted pose/shape " + ad::shape_str(pose.shape()) + "/" +
                                           ad::shape_str(shape.shape()) + " vs ground truth " +
                                           std::to_string(gt.pose.size()) + "/" + std::to_string(gt.shape.size()));
  }
  std::vector<double> target;
  for (Eigen::Index r = 0; r < gt.pose.rows(); ++r)
    for (Eigen::Index c = 0; c < gt.pose.cols(); ++c) target.push_back(gt.pose(r, c));
  for (Eigen::Index b = 0; b < gt.shape.size(); ++b) target.push_back(gt.shape[b]);
  const std::vector<ad::Tensor> parts{ad::flatten(pose), ad::flatten(shape)};
  const ad::Tensor theta = ad::concat(parts, 0);
  return ad::mean(ad::square(ad::sub(theta, ad::Tensor::vector(std::move(target)))));
}

ad::Tensor loss_smpl_params(const ad::Tensor& pose, const ad::Tensor& shape, const std::optional<body::BodyParams>& gt) {
  if (!gt) fail(ErrorKind::InvalidInput, "loss_smpl_params: ground-truth parameters unavailable; use the prior terms");
  return loss_smpl_params(pose, shape, *gt);
}

void validate(const LossWeights& w) {
  for (double v : {w.l3d, w.l2d, w.ltheta, w.lprior_pose, w.lprior_shape}) {
    if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::Config, "loss weights must be finite and >= 0");
  }
}

io::Json weights_to_json(const LossWeights& w) {
  io::Json j;
  j["l3d"] = w.l3d;
  j["l2d"] = w.l2d;
  j["ltheta"] = w.ltheta;
  j["lprior_pose"] = w.lprior_pose;
  j["lprior_shape"] = w.lprior_shape;
  return j;
}

LossWeights weights_from_json(const io::Json& j) {
  LossWeights w;
  if (!j.is_object()) fail(ErrorKind::Config, "loss_weights must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) fail(ErrorKind::Config, "loss_weights." + key + " must be a number");
    const double v = value.get<double>();
    if (key == "l3d") w.l3d = v;
    else if (key == "l2d") w.l2d = v;
    else if (key == "ltheta") w.ltheta = v;
    else if (key == "lprior_pose") w.lprior_pose = v;
    else if (key == "lprior_shape") w.lprior_shape = v;
    else fail(ErrorKind::Config, "loss_weights: unknown key \"" + key + "\"");
  }
  validate(w);
  return w;
}

std::vector<double> LossTerms::weighted_values() const {
  return {weights.l3d * l3d.item(), weights.l2d * l2d.item(), weights.ltheta * ltheta.item(),
          weights.lprior_pose * lprior_pose.item(), weights.lprior_shape * lprior_shape.item()};
}

LossTerms total_loss(const LossPrediction& pred, const LossTarget& target, const LossWeights& weights,
                     const GmmPrior& prior) {
  validate(weights);
  LossTerms t;
  t.weights = weights;
  t.l3d = loss_3d(pred.keypoints3d, target.keypoints3d, target.root_keypoint);
  t.l2d = loss_2d(pred.keypoints2d, target.keypoints2d);
  const ad::Tensor zero = ad::Tensor::scalar(0.0);
  if (target.params) {
    t.ltheta = loss_smpl_params(pred.pose, pred.shape, *target.params);
    t.lprior_pose = zero;
    t.lprior_shape = zero;
    t.total = ad::add(ad::add(ad::scale(t.l3d, weights.l3d), ad::scale(t.l2d, weights.l2d)),
                      ad::scale(t.ltheta, weights.ltheta));
  } else {
    t.ltheta = zero;
    t.lprior_pose = pose_prior_gmm(prior_pose_coordinates(pred.pose), prior);
    t.lprior_shape = shape_prior(pred.shape);
    t.total = ad::add(ad::add(ad::add(ad::scale(t.l3d, weights.l3d), ad::scale(t.l2d, weights.l2d)),
                              ad::scale(t.lprior_pose, weights.lprior_pose)),
                      ad::scale(t.lprior_shape, weights.lprior_shape));
  }
  return t;
}

}  // namespace volagg::loss
