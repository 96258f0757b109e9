#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>

#include <Eigen/Geometry>
#include <Eigen/LU>

#include "volagg/checks.hpp"
#include "volagg/error.hpp"
#include "volagg/geom.hpp"
#include "volagg/ops.hpp"
#include "volagg/rng.hpp"
#include "volagg/synth.hpp"
#include "volagg/volume.hpp"

namespace volagg::checks {

namespace {

using ad::Tensor;

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

Outcome pass_if(bool ok, const std::string& detail = {}) { return {ok, detail}; }

Outcome close_to(double got, double want, double tol) {
  const double err = std::abs(got - want);
  return {err <= tol, "got " + num(got) + ", expected " + num(want) + " (|diff| " + num(err) + ", tol " + num(tol) + ")"};
}

Outcome at_most(double got, double bound, const std::string& what) {
  return {got <= bound, what + " " + num(got) + " (bound " + num(bound) + ")"};
}

struct Caught {
  ErrorKind kind;
  std::string message;
};

std::optional<Caught> caught(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return Caught{e.kind(), e.what()};
  }
  return std::nullopt;
}

Outcome raises(const std::function<void()>& fn, ErrorKind kind, const std::string& fragment = {}) {
  const auto c = caught(fn);
  if (!c) return {false, "no error raised"};
  const bool ok = c->kind == kind && c->message.find(fragment) != std::string::npos;
  return {ok, std::string(to_string(c->kind)) + ": " + c->message};
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double spread) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-spread, spread);
  return m;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

Tensor to_tensor(const Eigen::MatrixXd& m, bool requires_grad = false) {
  std::vector<double> d;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) d.push_back(m(r, c));
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, d, requires_grad);
}

Tensor to_vector(const Eigen::VectorXd& v, bool requires_grad = false) {
  return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()), requires_grad);
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data());
}

calib::CameraCalib random_calib(Rng& rng, const std::string& id) {
  calib::CameraCalib c;
  c.id = id;
  c.intrinsics << rng.uniform(500, 1500), rng.uniform(-2, 2), rng.uniform(50, 200), 0, rng.uniform(500, 1500),
      rng.uniform(50, 200), 0, 0, 1;
  c.rotation = random_rotation(rng);
  c.translation = Eigen::Vector3d(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(2000, 5000));
  c.width = 224;
  c.height = 200;
  return c;
}

std::vector<calib::ProjectionMatrix> ring(std::size_t n, double radius, double focal, int size) {
  std::vector<calib::ProjectionMatrix> out;
  for (std::size_t c = 0; c < n; ++c) {
    const double az = 2.0 * std::numbers::pi * (static_cast<double>(c) + 0.25) / static_cast<double>(n);
    const Eigen::Vector3d eye(radius * std::cos(az), radius * std::sin(az), 300.0 + 150.0 * static_cast<double>(c));
    out.push_back(calib::projection_matrix(calib::look_at_camera("cam" + std::to_string(c), eye, Eigen::Vector3d::Zero(),
                                                                 Eigen::Vector3d::UnitZ(), focal, size, size)));
  }
  return out;
}

// Rotation matrix from an axis-angle vector via an explicit unit quaternion.
Eigen::Matrix3d quaternion_rotation(const Eigen::Vector3d& aa) {
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

Eigen::Matrix3d exp_so3(const Eigen::Vector3d& w) {
  const double a = w.norm();
  if (a == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(a, w / a).toRotationMatrix();
}

// Levenberg-Marquardt over (log s, rotation increment, t) with forward
// differences, restarted from several rotations. Returns the best
// sum of squared residuals of s*R*pred + t against gt.
double similarity_search(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Rng& rng) {
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
      Eigen::MatrixXd J(3 * n, 7);
      const double h = 1e-7;
      for (int p = 0; p < 7; ++p) {
        double ls = log_s;
        Eigen::Matrix3d Rp = R;
        Eigen::Vector3d tp = t;
        if (p == 0) {
          ls += h;
        } else if (p < 4) {
          Eigen::Vector3d w = Eigen::Vector3d::Zero();
          w[p - 1] = h;
          Rp = exp_so3(w) * R;
        } else {
          tp[p - 4] += h;
        }
        J.col(p) = (residual(ls, Rp, tp) - r) / h;
      }
      Eigen::MatrixXd A = J.transpose() * J;
      A.diagonal() *= (1.0 + lambda);
      const Eigen::VectorXd step = -A.ldlt().solve(J.transpose() * r);
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

loss::GmmPrior random_prior(Rng& rng, Eigen::Index d, int n) {
  std::vector<double> w;
  std::vector<Eigen::VectorXd> mu;
  std::vector<Eigen::MatrixXd> cov;
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    w.push_back(rng.uniform(0.1, 1.0));
    total += w.back();
    mu.push_back(random_matrix(rng, d, 1, 0.5));
    const Eigen::MatrixXd A = random_matrix(rng, d, d, 1.0);
    const Eigen::MatrixXd S = 0.1 * A * A.transpose() + 0.05 * Eigen::MatrixXd::Identity(d, d);
    cov.push_back(0.5 * (S + S.transpose()));
  }
  for (double& g : w) g /= total;
  return loss::make_gmm_prior(w, mu, cov, rng.uniform(0.5, 2.0));
}

// Explicit inverse and LU determinant, independent of the Cholesky path.
double exhaustive_prior(const loss::GmmPrior& p, const Eigen::VectorXd& theta) {
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

net::NetWeights without_biases(net::NetWeights w) {
  for (auto& [name, t] : w.named()) {
    if (name.ends_with(".bias")) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
  return w;
}

Eigen::MatrixXd grid_points(Eigen::Index n) {
  Eigen::MatrixXd m(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) << 100.0 * i, -40.0 * (i % 3), 25.0 * (i % 5);
  return m;
}

std::string read_bytes(const std::filesystem::path& p) { return io::read_text_file(p); }

class Registry {
 public:
  void add(const std::string& module, const std::string& name, std::function<Outcome()> run, bool slow = false) {
    fixtures_.push_back({module, name, slow, std::move(run)});
  }
  std::vector<Fixture> take() { return std::move(fixtures_); }

 private:
  std::vector<Fixture> fixtures_;
};

void calib_fixtures(Registry& r, const std::filesystem::path& work) {
  r.add("calib", "identity camera gives [I | 0]", [] {
    calib::CameraCalib c;
    c.id = "id";
    Eigen::Matrix<double, 3, 4> want = Eigen::Matrix<double, 3, 4>::Zero();
    want.leftCols<3>().setIdentity();
    return pass_if(calib::projection_matrix(c).matrix == want);
  });
  r.add("calib", "fourth column is K t", [] {
    calib::CameraCalib c;
    c.intrinsics << 800, 0, 100, 0, 820, 90, 0, 0, 1;
    c.translation = {0, 0, 1000};
    const Eigen::Vector3d col = calib::projection_matrix(c).matrix.col(3);
    return pass_if(col == c.intrinsics * Eigen::Vector3d(0, 0, 1000));
  });
  r.add("calib", "projection matrix matches an explicit triple loop", [] {
    Rng rng(11);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const auto c = random_calib(rng, "c");
      Eigen::Matrix<double, 3, 4> Rt;
      Rt << c.rotation, c.translation;
      Eigen::Matrix<double, 3, 4> want = Eigen::Matrix<double, 3, 4>::Zero();
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 4; ++b)
          for (int k = 0; k < 3; ++k) want(a, b) += c.intrinsics(a, k) * Rt(k, b);
      const auto got = calib::projection_matrix(c).matrix;
      worst = std::max(worst, ((got - want).cwiseAbs().array() / (1.0 + want.cwiseAbs().array())).maxCoeff());
    }
    return at_most(worst, 1e-12, "max relative difference");
  });
  r.add("calib", "pinhole arithmetic u = f x / z + cx", [] {
    calib::CameraCalib c;
    c.intrinsics << 1000, 0, 112, 0, 1000, 112, 0, 0, 1;
    const auto p = calib::project_point(calib::projection_matrix(c), {100, 0, 1000});
    return pass_if(p.pixel == Eigen::Vector2d(212, 112) && p.depth == 1000.0,
                   "pixel (" + num(p.pixel.x()) + ", " + num(p.pixel.y()) + "), depth " + num(p.depth));
  });
  r.add("calib", "point on the optical axis lands on the principal point", [] {
    calib::CameraCalib c;
    c.intrinsics << 900, 0, 57.5, 0, 950, 61.25, 0, 0, 1;
    const auto p = calib::project_point(calib::projection_matrix(c), {0, 0, 2345});
    return pass_if(p.pixel == Eigen::Vector2d(57.5, 61.25));
  });
  r.add("calib", "point behind the camera is signalled", [] {
    calib::CameraCalib c;
    c.id = "front";
    return raises([&] { calib::project_point(calib::projection_matrix(c), {0, 0, -500}); },
                  ErrorKind::PointBehindCamera);
  });
  r.add("calib", "bilinear sample at a cell center is verbatim", [] {
    Rng rng(12);
    const calib::FeatureMap m{Tensor({3, 4, 5}, [&] {
                                std::vector<double> d(60);
                                for (auto& v : d) v = rng.uniform(-1, 1);
                                return d;
                              }()),
                              1.0};
    const auto s = calib::bilinear_sample(m, {2.5, 1.5});
    bool ok = s.visible;
    for (int k = 0; k < 3; ++k) ok = ok && s.features[k] == m.data.at(static_cast<std::size_t>(k) * 20 + 1 * 5 + 2);
    return pass_if(ok);
  });
  r.add("calib", "bilinear midpoint of 0, 0, 4, 4 is 2", [] {
    const calib::FeatureMap m{Tensor({1, 2, 2}, {0, 0, 4, 4}), 1.0};
    const auto s = calib::bilinear_sample(m, {1.0, 1.0});
    return pass_if(s.visible && s.features[0] == 2.0, "got " + num(s.features[0]));
  });
  r.add("calib", "bilinear sampling matches a four-corner weighted sum", [] {
    Rng rng(13);
    const std::size_t K = 2, h = 9, w = 11;
    std::vector<double> d(K * h * w);
    for (auto& v : d) v = rng.uniform(-3, 3);
    const calib::FeatureMap m{Tensor({K, h, w}, d), 0.5};
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      // Image pixel -> feature coordinates; cell centers sit at integer + 0.5.
      const Eigen::Vector2d px(rng.uniform(1.0, 2.0 * (w - 0.5) - 0.01), rng.uniform(1.0, 2.0 * (h - 0.5) - 0.01));
      const double fx = px.x() * 0.5 - 0.5, fy = px.y() * 0.5 - 0.5;
      const auto x0 = static_cast<std::size_t>(std::floor(fx)), y0 = static_cast<std::size_t>(std::floor(fy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
      const auto s = calib::bilinear_sample(m, px);
      if (!s.visible) return Outcome{false, "in-bounds pixel reported invisible"};
      for (std::size_t k = 0; k < K; ++k) {
        auto at = [&](std::size_t y, std::size_t x) { return d[k * h * w + y * w + x]; };
        const double want = (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x1) + (1 - ax) * ay * at(y1, x0) +
                            ax * ay * at(y1, x1);
        worst = std::max(worst, std::abs(s.features[static_cast<Eigen::Index>(k)] - want));
      }
    }
    return at_most(worst, 1e-12, "max difference");
  });
  r.add("calib", "calibration file round trip keeps order and ids", [work] {
    const auto rig = synth::generate_rig({}, 3);
    const auto path = work / "calib_roundtrip.json";
    calib::save_calibration(rig, path);
    const auto back = calib::load_calibration(path);
    bool ok = back.size() == 4;
    for (std::size_t i = 0; ok && i < back.size(); ++i) {
      ok = back[i].id == rig[i].id && back[i].rotation == rig[i].rotation && back[i].translation == rig[i].translation &&
           back[i].intrinsics == rig[i].intrinsics;
    }
    return pass_if(ok);
  });
  r.add("calib", "reflected rotation is rejected", [] {
    Rng rng(14);
    auto c = random_calib(rng, "mirror");
    c.rotation.col(0) *= -1.0;
    const auto j = calib::calibration_to_json({c});
    return raises([&] { calib::calibration_from_json(j); }, ErrorKind::Parse, "rotation not special orthogonal");
  });
  r.add("calib", "empty camera list is rejected", [] {
    io::Json j;
    j["cameras"] = io::Json::array();
    return raises([&] { calib::calibration_from_json(j); }, ErrorKind::Parse, "at least one camera required");
  });
}

void body_fixtures(Registry& r, const std::filesystem::path& work) {
  r.add("bodymodel", "rodrigues of zero is the identity",
        [] { return pass_if(body::rodrigues(Eigen::Vector3d::Zero()) == Eigen::Matrix3d::Identity()); });
  r.add("bodymodel", "quarter turn about x", [] {
    Eigen::Matrix3d want;
    want << 1, 0, 0, 0, 0, -1, 0, 1, 0;
    return at_most((body::rodrigues({std::numbers::pi / 2, 0, 0}) - want).cwiseAbs().maxCoeff(), 1e-15, "max difference");
  });
  r.add("bodymodel", "rodrigues matches a quaternion oracle on 1000 draws", [] {
    Rng rng(21);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
      const Eigen::Vector3d aa = axis.normalized() * rng.uniform(0.0, i % 10 == 0 ? 1e-9 : std::numbers::pi);
      worst = std::max(worst, (body::rodrigues(aa) - quaternion_rotation(aa)).cwiseAbs().maxCoeff());
    }
    return at_most(worst, 1e-9, "max difference");
  });
  r.add("bodymodel", "rest pose reproduces the template", [] {
    const auto m = body::builtin_toy_model();
    const auto mesh = body::forward(m, body::BodyParams::zeros(m.num_joints(), m.num_shape()));
    const Eigen::MatrixXd joints = m.joint_regressor * m.template_vertices;
    return pass_if((mesh.vertices - m.template_vertices).cwiseAbs().maxCoeff() <= 1e-9 &&
                   (mesh.joints - joints).cwiseAbs().maxCoeff() <= 1e-12);
  });
  r.add("bodymodel", "unit shape coefficient adds one blendshape", [] {
    const auto m = body::builtin_toy_model();
    auto p = body::BodyParams::zeros(m.num_joints(), m.num_shape());
    p.shape[0] = 1.0;
    const auto mesh = body::forward(m, p);
    Eigen::MatrixXd want = m.template_vertices;
    for (Eigen::Index v = 0; v < want.rows(); ++v)
      for (int a = 0; a < 3; ++a) want(v, a) += m.shape_dirs(3 * v + a, 0);
    return at_most((mesh.vertices - want).cwiseAbs().maxCoeff(), 1e-12, "max difference");
  });
  r.add("bodymodel", "root-only rotation rigidly rotates the rest joints", [] {
    const auto m = body::builtin_toy_model();
    Rng rng(22);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      auto p = body::BodyParams::zeros(m.num_joints(), m.num_shape());
      p.pose.row(0) = Eigen::RowVector3d(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
      const Eigen::Matrix3d R = body::rodrigues(p.pose.row(0).transpose());
      const auto rest = body::forward(m, body::BodyParams::zeros(m.num_joints(), m.num_shape()));
      const auto posed = body::forward(m, p);
      const Eigen::RowVector3d root = rest.joints.row(0);
      const Eigen::MatrixXd want = ((rest.joints.rowwise() - root) * R.transpose()).rowwise() + root;
      worst = std::max(worst, (posed.joints - want).cwiseAbs().maxCoeff());
    }
    return at_most(worst, 1e-9, "max difference (mm)");
  });
  r.add("bodymodel", "one-hot keypoint row selects a vertex", [] {
    auto m = body::builtin_toy_model();
    m.keypoint_regressor.setZero();
    m.keypoint_regressor(0, 5) = 1.0;
    const Eigen::MatrixXd kp = body::regress_keypoints(m, m.template_vertices);
    return pass_if(kp.row(0) == m.template_vertices.row(5));
  });
  r.add("bodymodel", "uniform keypoint row gives the centroid", [] {
    auto m = body::builtin_toy_model();
    const auto V = static_cast<double>(m.num_vertices());
    m.keypoint_regressor.row(0).setConstant(1.0 / V);
    const Eigen::MatrixXd kp = body::regress_keypoints(m, m.template_vertices);
    const Eigen::RowVector3d centroid = m.template_vertices.colwise().mean();
    return at_most((kp.row(0) - centroid).cwiseAbs().maxCoeff(), 1e-9, "max difference");
  });
  r.add("bodymodel", "full-scale model has 49 keypoints", [] { return pass_if(body::kFullScaleKeypoints == 49); });
  r.add("bodymodel", "toy model is deterministic", [] {
    const auto a = body::builtin_toy_model(), b = body::builtin_toy_model();
    return pass_if(a.template_vertices == b.template_vertices && a.shape_dirs == b.shape_dirs &&
                   a.skin_weights == b.skin_weights && a.joint_regressor == b.joint_regressor &&
                   a.keypoint_regressor == b.keypoint_regressor && a.parents == b.parents);
  });
  r.add("bodymodel", "model file round trip within 1e-12", [work] {
    const auto m = body::builtin_toy_model();
    body::save_model(m, work / "model.json");
    const auto b = body::load_model(work / "model.json");
    const double worst = std::max({(b.template_vertices - m.template_vertices).cwiseAbs().maxCoeff(),
                                   (b.shape_dirs - m.shape_dirs).cwiseAbs().maxCoeff(),
                                   (b.skin_weights - m.skin_weights).cwiseAbs().maxCoeff(),
                                   (b.joint_regressor - m.joint_regressor).cwiseAbs().maxCoeff(),
                                   (b.keypoint_regressor - m.keypoint_regressor).cwiseAbs().maxCoeff()});
    return at_most(worst, 1e-12, "max difference");
  });
  r.add("bodymodel", "skin weights row summing to 0.9 is rejected", [] {
    auto j = body::model_to_json(body::builtin_toy_model());
    j["skin_weights"][3][0] = j["skin_weights"][3][0].get<double>() - 0.1;
    return raises([&] { body::model_from_json(j); }, ErrorKind::InvalidInput, "skin weights row 3 sums to 0.9");
  });
}

void geom_fixtures(Registry& r, const Reference& ref) {
  r.add("geom", "noiseless 4-view triangulation within 1e-6 mm", [] {
    const auto Ps = ring(4, 3000.0, 1150.0, 1000);
    const Eigen::Vector3d X(100, 200, 3000);
    std::vector<geom::Detection2D> det;
    for (const auto& P : Ps) det.push_back({P.source_id, calib::project_point(P, X).pixel, 1.0});
    return at_most((geom::triangulate_dlt(det, Ps) - X).norm(), 1e-6, "error (mm)");
  });
  r.add("geom", "duplicate cameras are degenerate", [] {
    const auto Ps = ring(1, 3000.0, 1150.0, 1000);
    std::vector<calib::ProjectionMatrix> twins{Ps[0], Ps[0]};
    twins[1].source_id = "twin";
    const Eigen::Vector2d px = calib::project_point(Ps[0], {10, 20, 30}).pixel;
    return raises([&] { geom::triangulate_dlt({{Ps[0].source_id, px, 1.0}, {"twin", px, 1.0}}, twins); },
                  ErrorKind::DegenerateGeometry);
  });
  r.add("geom", "1 px Monte-Carlo median matches the recorded value", [ref] {
    const auto s = triangulation_monte_carlo(ref.triangulation_seed, ref.triangulation_trials, ref.triangulation_noise_px);
    const double rel = std::abs(s.median_mm - ref.triangulation_median_mm) / ref.triangulation_median_mm;
    return pass_if(s.median_mm < 15.0 && rel <= 0.05,
                   "median " + num(s.median_mm) + " mm, recorded " + num(ref.triangulation_median_mm) + " mm");
  });
  r.add("geom", "exact similarity is recovered", [] {
    Rng rng(31);
    const Eigen::MatrixXd pred = random_matrix(rng, 12, 3, 500.0);
    const Eigen::Matrix3d R0 = random_rotation(rng);
    const Eigen::Vector3d t0(120, -80, 40);
    const Eigen::MatrixXd gt = ((2.0 * R0 * pred.transpose()).colwise() + t0).transpose();
    const auto a = geom::procrustes_align(pred, gt);
    const double worst = std::max({std::abs(a.scale - 2.0), (a.rotation - R0).cwiseAbs().maxCoeff(),
                                   (a.translation - t0).norm() / 1000.0, (a.aligned - gt).cwiseAbs().maxCoeff() / 1000.0});
    return at_most(worst, 1e-9, "max error");
  });
  r.add("geom", "identical clouds align with the identity", [] {
    Rng rng(32);
    const Eigen::MatrixXd gt = random_matrix(rng, 17, 3, 800.0);
    const auto a = geom::procrustes_align(gt, gt);
    const double worst = std::max({std::abs(a.scale - 1.0), (a.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(),
                                   a.translation.norm() / 1000.0});
    return at_most(worst, 1e-9, "max deviation");
  });
  r.add("geom", "closed form matches a numerical minimizer on noisy clouds", [] {
    Rng rng(33);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      const Eigen::MatrixXd pred = random_matrix(rng, 12, 3, 400.0);
      Eigen::MatrixXd gt = ((1.3 * random_rotation(rng) * pred.transpose()).colwise() + Eigen::Vector3d(100, -50, 20)).transpose();
      for (Eigen::Index i = 0; i < gt.size(); ++i) gt.data()[i] += 40.0 * rng.normal();
      const auto a = geom::procrustes_align(pred, gt);
      const double closed = (a.aligned - gt).squaredNorm();
      const double numeric = similarity_search(pred, gt, rng);
      worst = std::max(worst, std::abs(closed - numeric) / numeric);
    }
    return at_most(worst, 1e-6, "relative objective difference");
  });
}

void volume_fixtures(Registry& r) {
  r.add("volume", "L = 1 grid is the center", [] {
    const auto g = volume::make_grid({10, -20, 30}, {2500.0, 1, 1});
    return pass_if(g.shape() == ad::Shape{1, 1, 1, 3} && g.at(0) == 10 && g.at(1) == -20 && g.at(2) == 30);
  });
  r.add("volume", "L = 2, side 2000 gives offsets of 500", [] {
    const volume::VolumeConfig cfg{2000.0, 2, 1};
    return pass_if(volume::voxel_coordinate(0.0, 0, cfg) == -500.0 && volume::voxel_coordinate(0.0, 1, cfg) == 500.0);
  });
  r.add("volume", "L = 16, side 2500 extremes at 1171.875", [] {
    const volume::VolumeConfig cfg{2500.0, 16, 1};
    return pass_if(volume::voxel_coordinate(7.0, 0, cfg) == 7.0 - 1171.875 &&
                   volume::voxel_coordinate(7.0, 15, cfg) == 7.0 + 1171.875);
  });
  r.add("volume", "constant map back-projects to a constant", [] {
    const volume::VolumeConfig cfg{1000.0, 4, 2};
    const auto cam = calib::look_at_camera("top", {0, 0, 5000}, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), 500.0, 400, 400);
    const calib::FeatureMap map{Tensor::full({2, 50, 50}, 3.0), 0.125};
    const auto v = volume::backproject(map, calib::projection_matrix(cam), volume::make_grid(Eigen::Vector3d::Zero(), cfg),
                                       Eigen::Vector3d::Zero(), cfg);
    const bool all_visible = std::all_of(v.mask.begin(), v.mask.end(), [](std::uint8_t m) { return m == 1; });
    const bool all_three = std::all_of(v.data.data().begin(), v.data.data().end(), [](double x) { return x == 3.0; });
    return pass_if(all_visible && all_three);
  });
  r.add("volume", "voxels behind the camera are masked zeros", [] {
    const volume::VolumeConfig cfg{1000.0, 2, 1};
    // The camera sits inside the cuboid looking along +x: voxels with x < 0 are behind it.
    const auto cam = calib::look_at_camera("inside", {0, 0, 0}, {1000, 0, 0}, Eigen::Vector3d::UnitZ(), 100.0, 2000, 2000);
    const calib::FeatureMap map{Tensor::full({1, 250, 250}, 1.0), 0.125};
    const auto v = volume::backproject(map, calib::projection_matrix(cam), volume::make_grid(Eigen::Vector3d::Zero(), cfg),
                                       Eigen::Vector3d::Zero(), cfg);
    bool ok = true;
    for (std::size_t n = 0; n < cfg.voxels(); ++n) {
      const bool behind = n / 4 == 0;  // x index is the slowest axis
      ok = ok && (behind ? v.mask[n] == 0 && v.data.at(n) == 0.0 : v.mask[n] == 1);
    }
    return pass_if(ok);
  });
  r.add("volume", "8^3 back-projection equals a per-voxel loop exactly", [] {
    Rng rng(41);
    const volume::VolumeConfig cfg{2500.0, 8, 4};
    const Eigen::Vector3d center(30, -40, 10);
    const auto grid = volume::make_grid(center, cfg);
    std::size_t mismatches = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      const double az = 2.0 * std::numbers::pi * (static_cast<double>(c) + 0.3) / 4.0;
      const auto cam = calib::look_at_camera("cam" + std::to_string(c), {3500 * std::cos(az), 3500 * std::sin(az), 400},
                                             Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), 135.0, 96, 96);
      const auto P = calib::projection_matrix(cam);
      std::vector<double> d(4 * 12 * 12);
      for (auto& x : d) x = rng.uniform(-2, 2);
      const calib::FeatureMap map{Tensor({4, 12, 12}, d), 0.125};
      const auto v = volume::backproject(map, P, grid, center, cfg);
      for (std::size_t n = 0; n < cfg.voxels(); ++n) {
        const Eigen::Vector3d X(grid.at(3 * n), grid.at(3 * n + 1), grid.at(3 * n + 2));
        const auto proj = calib::try_project(P, X);
        calib::Sampled s;
        if (proj) s = calib::bilinear_sample(map, proj->pixel);
        const bool visible = proj.has_value() && s.visible;
        if ((v.mask[n] != 0) != visible) ++mismatches;
        for (std::size_t k = 0; k < 4; ++k) {
          const double want = visible ? s.features[static_cast<Eigen::Index>(k)] : 0.0;
          if (v.data.at(k * cfg.voxels() + n) != want) ++mismatches;
        }
      }
    }
    return pass_if(mismatches == 0, std::to_string(mismatches) + " mismatching entries");
  });
  auto single = [](std::vector<double> values) {
    std::vector<volume::FeatureVolume> views;
    for (std::size_t c = 0; c < values.size(); ++c) {
      volume::FeatureVolume v;
      v.config = {1000.0, 1, 1};
      v.source_id = "v" + std::to_string(c);
      v.mask = {1};
      v.data = Tensor({1, 1, 1, 1}, {values[c]});
      views.push_back(v);
    }
    return views;
  };
  r.add("volume", "one view aggregates to itself", [] {
    Rng rng(42);
    volume::FeatureVolume v;
    v.config = {1000.0, 3, 2};
    v.source_id = "only";
    v.mask.assign(27, 1);
    v.mask[4] = 0;
    std::vector<double> d(54);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (i % 27 == 4) ? 0.0 : rng.uniform(-3, 3);
    v.data = Tensor({2, 3, 3, 3}, d);
    const auto out = volume::aggregate_softmax({v});
    return pass_if(bits_equal(out.data, v.data) && out.mask == v.mask);
  });
  r.add("volume", "equal values split the weight evenly", [single] {
    const auto views = single({1.7, 1.7});
    const auto w = volume::softmax_weights(views, 0, 0);
    const double out = volume::aggregate_softmax(views).data.at(0);
    return pass_if(w[0] == 0.5 && w[1] == 0.5 && out == 1.7, "output " + num(out));
  });
  r.add("volume", "values 0 and ln 3 give weights 1/4 and 3/4", [single] {
    const auto views = single({0.0, std::log(3.0)});
    const auto w = volume::softmax_weights(views, 0, 0);
    const double out = volume::aggregate_softmax(views).data.at(0);
    return pass_if(std::abs(w[0] - 0.25) <= 1e-15 && std::abs(w[1] - 0.75) <= 1e-15 &&
                       std::abs(out - 0.75 * std::log(3.0)) <= 1e-15,
                   "output " + num(out));
  });
}

void tensor_fixtures(Registry& r) {
  r.add("tensor", "relu backward is piecewise", [] {
    Tensor x = Tensor::vector({-1.0, 2.0}, true);
    ad::Tape tape;
    Tensor y;
    {
      ad::TapeScope s(tape);
      y = ad::sum(ad::mul(ad::relu(x), Tensor::vector({5.0, 7.0})));
    }
    tape.backward(y);
    return pass_if(x.grad()[0] == 0.0 && x.grad()[1] == 7.0);
  });
  r.add("tensor", "softmax of [0, ln 3] is [1/4, 3/4]", [] {
    const auto s = ad::softmax(Tensor::vector({0.0, std::log(3.0)}), 0);
    return pass_if(std::abs(s.at(0) - 0.25) <= 1e-15 && std::abs(s.at(1) - 0.75) <= 1e-15);
  });
  r.add("tensor", "delta-kernel conv3d reproduces its input", [] {
    Rng rng(51);
    std::vector<double> d(2 * 4 * 4 * 4);
    for (auto& v : d) v = rng.uniform(-1, 1);
    const Tensor x({2, 4, 4, 4}, d);
    std::vector<double> w(2 * 2 * 27, 0.0);
    w[0 * 54 + 0 * 27 + 13] = 1.0;
    w[1 * 54 + 1 * 27 + 13] = 1.0;
    return pass_if(bits_equal(ad::conv3d(x, Tensor({2, 2, 3, 3, 3}, w)), x));
  });
  r.add("tensor", "gradient of a sum is all ones", [] {
    Tensor x = Tensor::full({3, 2}, 0.3, true);
    ad::Tape tape;
    Tensor y;
    {
      ad::TapeScope s(tape);
      y = ad::sum(x);
    }
    tape.backward(y);
    return pass_if(std::all_of(x.grad().begin(), x.grad().end(), [](double g) { return g == 1.0; }));
  });
  r.add("tensor", "product rule for scalars", [] {
    Tensor x = Tensor::scalar(3.0, true), y = Tensor::scalar(-2.5, true);
    ad::Tape tape;
    Tensor z;
    {
      ad::TapeScope s(tape);
      z = ad::mul(x, y);
    }
    tape.backward(z);
    return pass_if(x.grad()[0] == -2.5 && y.grad()[0] == 3.0);
  });
  r.add("tensor", "random three-op composite matches central differences", [] {
    Rng rng(52);
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
      std::vector<double> a(12), b(12);
      for (auto& v : a) v = rng.uniform(-2, 2);
      for (auto& v : b) v = rng.uniform(-2, 2);
      Tensor x({3, 4}, a, true), y({4, 3}, b, true);
      const auto res = ad::grad_check(
          [](const std::vector<Tensor>& in) { return ad::sum(ad::square(ad::matmul(in[0], in[1]))); }, {x, y});
      worst = std::max(worst, res.max_rel_error);
    }
    return at_most(worst, 1e-4, "max relative error");
  });
  r.add("tensor", "grad_check of a sum of squares is within 1e-8", [] {
    Rng rng(53);
    std::vector<double> a(20);
    for (auto& v : a) v = rng.uniform(-3, 3);
    const auto res = ad::grad_check([](const std::vector<Tensor>& in) { return ad::sum(ad::square(in[0])); },
                                    {Tensor({20}, a, true)});
    return at_most(res.max_rel_error, 1e-8, "max relative error");
  });
  r.add("tensor", "relu kinks are excluded, not failed", [] {
    const auto res = ad::grad_check([](const std::vector<Tensor>& in) { return ad::sum(ad::relu(in[0])); },
                                    {Tensor::vector({0.0, 1.0, -1.0, 0.0}, true)});
    return pass_if(res.excluded.size() == 2 && res.checked == 2 && res.max_rel_error <= 1e-8,
                   std::to_string(res.excluded.size()) + " excluded, " + std::to_string(res.checked) + " checked");
  });
  r.add("tensor", "full pipeline loss with respect to encoder weights", [] {
    const auto model = body::builtin_toy_model();
    const auto prior = loss::resolve_prior("builtin:toy", model);
    const auto sample = synth::generate_sample(model, synth::generate_rig({}, 4), {}, 5);
    const auto cfg = tiny_net();
    auto w = net::init_weights(cfg, model, 6);
    Rng rng(7);
    for (auto& [name, t] : w.named()) {
      if (name.starts_with("regressor.fc2")) {
        for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
      }
    }
    ad::GradCheckOptions o;
    o.eps = 1e-6;
    o.max_coords = 20;
    const auto res = ad::grad_check(
        [&](const std::vector<Tensor>&) {
          const auto out = net::forward_pipeline(model, w, cfg, train::pipeline_input(sample));
          return loss::total_loss(out.as_prediction(), train::loss_target(sample, model), {}, prior).total;
        },
        w.backbone(), o);
    return at_most(res.max_rel_error, 1e-4, "max relative error");
  });
  r.add("tensor", "adam leaves parameters alone under zero gradients", [] {
    std::vector<Tensor> p{Tensor::vector({1.0, -2.0}, true)};
    auto st = ad::make_adam_state(p, {0.1});
    p[0].zero_grad();
    ad::adam_step(p, st);
    return pass_if(p[0].at(0) == 1.0 && p[0].at(1) == -2.0);
  });
  r.add("tensor", "one adam step on x^2 moves downhill by at most lr", [] {
    std::vector<Tensor> p{Tensor::scalar(1.0, true)};
    auto st = ad::make_adam_state(p, {0.1});
    ad::Tape tape;
    Tensor y;
    {
      ad::TapeScope s(tape);
      y = ad::square(p[0]);
    }
    tape.backward(y);
    ad::adam_step(p, st);
    const double update = p[0].item() - 1.0;
    return pass_if(update < 0.0 && std::abs(update) <= 0.1 * (1.0 + 1e-9), "update " + num(update));
  });
  r.add("tensor", "adam reduces a 5-dim quadratic at least 100-fold", [] {
    std::vector<Tensor> p{Tensor::vector({1.0, -2.0, 0.5, 3.0, -1.5}, true)};
    const Tensor scales = Tensor::vector({1.0, 2.0, 0.5, 3.0, 1.5});
    auto f = [&] { return ad::sum(ad::mul(ad::square(p[0]), scales)); };
    const double initial = f().item();
    auto st = ad::make_adam_state(p, {0.1});
    for (int i = 0; i < 100; ++i) {
      ad::Tape tape;
      Tensor y;
      {
        ad::TapeScope s(tape);
        y = f();
      }
      tape.backward(y);
      ad::adam_step(p, st);
      p[0].zero_grad();
    }
    const double final_value = f().item();
    return pass_if(final_value * 100.0 <= initial, "initial " + num(initial) + ", final " + num(final_value));
  });
}

void net_fixtures(Registry& r) {
  r.add("net", "zero input and bias-free weights give a zero map", [] {
    const auto model = body::builtin_toy_model();
    const net::NetConfig c;
    const auto w = without_biases(net::init_weights(c, model, 1));
    const auto m = net::encode2d(Tensor::zeros({4, 32, 32}), w, c);
    return pass_if(std::all_of(m.data.data().begin(), m.data.data().end(), [](double v) { return v == 0.0; }));
  });
  r.add("net", "full-scale encoder outputs K = 256 channels", [] {
    net::NetConfig full;
    full.input_channels = 3;
    full.encoder2d_channels = {16, 256};
    full.volume = {2500.0, 16, 256};
    full.group_norm_groups = 32;
    const auto w = net::zero_weights(full, body::builtin_toy_model());
    return pass_if(net::encode2d(Tensor::zeros({3, 8, 8}), w, full).channels() == 256);
  });
  r.add("net", "encode2d is deterministic", [] {
    const auto model = body::builtin_toy_model();
    const net::NetConfig c;
    const auto w = net::init_weights(c, model, 2);
    Rng rng(3);
    std::vector<double> d(4 * 24 * 24);
    for (auto& v : d) v = rng.uniform(0, 1);
    const Tensor img({4, 24, 24}, d);
    return pass_if(bits_equal(net::encode2d(img, w, c).data, net::encode2d(img, w, c).data));
  });
  r.add("net", "L = 16 pools down to 2 x 2 x 2", [] {
    const auto model = body::builtin_toy_model();
    net::NetConfig c;
    c.volume = {2500.0, 16, 8};
    const auto w = net::init_weights(c, model, 4);
    Rng rng(5);
    std::vector<double> d(8 * 16 * 16 * 16);
    for (auto& v : d) v = rng.uniform(-1, 1);
    const auto f = net::encode3d(Tensor({8, 16, 16, 16}, d), w, c);
    return pass_if(net::pooling_stages(16) == 3 && f.shape() == ad::Shape{8 * 8});
  });
  r.add("net", "zero volume and bias-free weights give zero features", [] {
    const auto model = body::builtin_toy_model();
    const net::NetConfig c;
    const auto w = without_biases(net::init_weights(c, model, 6));
    const auto f = net::encode3d(Tensor::zeros({8, 8, 8, 8}), w, c);
    return pass_if(std::all_of(f.data().begin(), f.data().end(), [](double v) { return v == 0.0; }));
  });
  r.add("net", "encode3d gradient matches central differences", [] {
    const auto model = body::builtin_toy_model();
    const auto c = tiny_net();
    const auto w = net::init_weights(c, model, 7);
    Rng rng(8);
    std::vector<double> d(4 * 64), pd(32);
    for (auto& v : d) v = rng.uniform(-1, 1);
    for (auto& v : pd) v = rng.uniform(-1, 1);
    const Tensor probe({32}, pd);
    const auto res = ad::grad_check(
        [&](const std::vector<Tensor>& in) { return ad::sum(ad::mul(net::encode3d(in[0], w, c), probe)); },
        {Tensor({4, 4, 4, 4}, d, true)});
    return at_most(res.max_rel_error, 1e-4, "max relative error");
  });
  r.add("net", "zero weights keep the initial parameters", [] {
    const auto model = body::builtin_toy_model();
    net::NetConfig c;
    auto init = body::BodyParams::zeros(8, 4);
    init.pose(2, 0) = 0.3;
    init.shape[1] = -0.7;
    c.init_params = init;
    const auto w = net::zero_weights(c, model);
    bool ok = true;
    for (std::size_t T : {1u, 4u, 9u}) {
      c.regress_iterations = T;
      const auto out = net::regress_params(Tensor::full({64}, 0.5), w, c, model);
      ok = ok && out.pose.at(6) == 0.3 && out.shape.at(1) == -0.7;
    }
    return pass_if(ok);
  });
  r.add("net", "one iteration equals a hand-unrolled update", [] {
    const auto model = body::builtin_toy_model();
    net::NetConfig c;
    c.regress_iterations = 1;
    auto w = net::init_weights(c, model, 9);
    Rng rng(10);
    for (auto& [name, t] : w.named()) {
      if (name.starts_with("regressor.fc2")) {
        for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
      }
    }
    std::vector<double> fd(64);
    for (auto& v : fd) v = rng.uniform(-1, 1);
    const Tensor features({64}, fd);
    const auto out = net::regress_params(features, w, c, model);
    std::vector<double> x = fd;
    x.resize(64 + 28, 0.0);
    const auto &W1 = w.get("regressor.fc1.weight"), &b1 = w.get("regressor.fc1.bias");
    const auto &W2 = w.get("regressor.fc2.weight"), &b2 = w.get("regressor.fc2.bias");
    const std::size_t H = c.regressor_hidden;
    std::vector<double> h(H);
    for (std::size_t o = 0; o < H; ++o) {
      double s = b1.at(o);
      for (std::size_t i = 0; i < x.size(); ++i) s += W1.at(o * x.size() + i) * x[i];
      h[o] = std::max(0.0, s);
    }
    double worst = 0.0;
    for (std::size_t o = 0; o < 28; ++o) {
      double s = b2.at(o);
      for (std::size_t i = 0; i < H; ++i) s += W2.at(o * H + i) * h[i];
      const double got = o < 24 ? out.pose.at(o) : out.shape.at(o - 24);
      worst = std::max(worst, std::abs(got - s));
    }
    return at_most(worst, 1e-13, "max difference");
  });
  r.add("net", "per-iteration update has J*3 + B = 28 entries", [] {
    const auto model = body::builtin_toy_model();
    const net::NetConfig c;
    const auto w = net::zero_weights(c, model);
    return pass_if(w.get("regressor.fc2.bias").size() == 28 && model.num_params() == 28);
  });
  r.add("net", "predicted pelvis sits on the triangulated center", [] {
    const auto model = body::builtin_toy_model();
    const auto sample = synth::generate_sample(model, synth::generate_rig({}, 1), {}, 17);
    const net::NetConfig c;
    const auto out = net::forward_pipeline(model, net::init_weights(c, model, 9), c, train::pipeline_input(sample));
    std::vector<calib::ProjectionMatrix> Ps;
    for (const auto& cal : sample.calibs) Ps.push_back(calib::projection_matrix(cal));
    const Eigen::Vector3d tri = geom::triangulate_dlt(sample.pelvis_detections, Ps);
    bool ok = out.center == tri;
    for (int k = 0; k < 3; ++k) ok = ok && out.keypoints3d.at(3 * static_cast<std::size_t>(model.root_keypoint) + k) == tri[k];
    return pass_if(ok);
  });
  r.add("net", "single camera with an explicit center", [] {
    const auto model = body::builtin_toy_model();
    const auto sample = synth::generate_sample(model, synth::generate_rig({}, 1), {}, 18);
    const net::NetConfig c;
    net::PipelineInput in;
    in.calibs = {sample.calibs[0]};
    in.images = {sample.input_blobs[0]};
    in.center = sample.gt_keypoints3d.row(model.root_keypoint).transpose();
    const auto out = net::forward_pipeline(model, net::init_weights(c, model, 2), c, in);
    return pass_if(out.keypoints2d.size() == 1 && out.center == *in.center);
  });
  r.add("net", "total loss gradient on 20 sampled weights", [] {
    const auto model = body::builtin_toy_model();
    const auto prior = loss::resolve_prior("builtin:toy", model);
    const auto sample = synth::generate_sample(model, synth::generate_rig({}, 2), {}, 100);
    const auto cfg = tiny_net();
    auto w = net::init_weights(cfg, model, 3);
    Rng rng(4);
    for (auto& [name, t] : w.named()) {
      if (name.starts_with("regressor.fc2")) {
        for (double& v : t.mutable_data()) v = rng.uniform(-0.01, 0.01);
      }
    }
    ad::GradCheckOptions o;
    o.eps = 1e-6;
    o.max_coords = 20;
    const auto res = ad::grad_check(
        [&](const std::vector<Tensor>&) {
          const auto out = net::forward_pipeline(model, w, cfg, train::pipeline_input(sample));
          return loss::total_loss(out.as_prediction(), train::loss_target(sample, model), {}, prior).total;
        },
        w.all(), o);
    return at_most(res.max_rel_error, 1e-4, "max relative error");
  });
}

void loss_fixtures(Registry& r) {
  r.add("loss", "3D loss of a perfect prediction is 0", [] {
    Rng rng(61);
    const Eigen::MatrixXd gt = random_matrix(rng, 12, 3, 800);
    return pass_if(loss::loss_3d(to_tensor(gt), gt, 0).item() == 0.0);
  });
  r.add("loss", "3D loss ignores a common offset", [] {
    const Eigen::MatrixXd gt = grid_points(12);
    const Eigen::MatrixXd pred = gt.rowwise() + Eigen::RowVector3d(64, -32, 16);
    return pass_if(loss::loss_3d(to_tensor(pred), gt, 0).item() == 0.0);
  });
  r.add("loss", "3D loss of one joint off by 10 mm is 100/36", [] {
    const Eigen::MatrixXd gt = grid_points(12);
    Eigen::MatrixXd pred = gt;
    pred(5, 1) += 10.0;
    return close_to(loss::loss_3d(to_tensor(pred), gt, 0).item(), 100.0 / 36.0, 1e-12);
  });
  auto view = [](const std::string& id, const Eigen::MatrixXd& px, int w, int h) { return loss::ViewTarget{id, px, w, h}; };
  r.add("loss", "2D loss of exact reprojections is 0", [view] {
    Rng rng(62);
    const Eigen::MatrixXd a = random_matrix(rng, 6, 2, 90), b = random_matrix(rng, 6, 2, 90);
    return pass_if(loss::loss_2d({{"a", to_tensor(a)}, {"b", to_tensor(b)}}, {view("a", a, 224, 224), view("b", b, 224, 224)}).item() == 0.0);
  });
  r.add("loss", "2D loss sums over cameras", [view] {
    Rng rng(63);
    std::vector<loss::ViewTarget> gt;
    std::vector<loss::ViewKeypoints> pred;
    for (int c = 0; c < 4; ++c) {
      const Eigen::MatrixXd px = random_matrix(rng, 6, 2, 90).array() + 100.0;
      gt.push_back(view("cam" + std::to_string(c), px, 224, 224));
      pred.push_back({"cam" + std::to_string(c), to_tensor(c == 2 ? Eigen::MatrixXd(px.array() + 3.0) : px)});
    }
    const double all = loss::loss_2d(pred, gt).item();
    const double one = loss::loss_2d({pred[2]}, {gt[2]}).item();
    return close_to(all, one, 1e-15);
  });
  r.add("loss", "1 px error on a 224-wide image costs (2/224)^2", [view] {
    const Eigen::MatrixXd gt = grid_points(5).leftCols(2).array().abs() / 4.0;
    return close_to(loss::loss_2d({{"c", to_tensor(gt.array() + 1.0)}}, {view("c", gt, 224, 224)}).item(),
                    std::pow(2.0 / 224.0, 2), 1e-18);
  });
  r.add("loss", "parameter loss of a perfect prediction is 0", [] {
    auto p = body::BodyParams::zeros(8, 4);
    p.pose(3, 2) = 0.4;
    p.shape[0] = 0.2;
    return pass_if(loss::loss_smpl_params(to_tensor(p.pose), to_vector(p.shape), p).item() == 0.0);
  });
  r.add("loss", "unit shape difference costs 1/28", [] {
    const auto gt = body::BodyParams::zeros(8, 4);
    auto p = gt;
    p.shape[0] = 1.0;
    return close_to(loss::loss_smpl_params(to_tensor(p.pose), to_vector(p.shape), gt).item(), 1.0 / 28.0, 1e-15);
  });
  r.add("loss", "parameter loss is symmetric", [] {
    Rng rng(64);
    body::BodyParams a, b;
    a.pose = random_matrix(rng, 8, 3, 1);
    a.shape = random_matrix(rng, 4, 1, 1);
    b.pose = random_matrix(rng, 8, 3, 1);
    b.shape = random_matrix(rng, 4, 1, 1);
    const double ab = loss::loss_smpl_params(to_tensor(a.pose), to_vector(a.shape), b).item();
    const double ba = loss::loss_smpl_params(to_tensor(b.pose), to_vector(b.shape), a).item();
    return close_to(ab, ba, 1e-15);
  });
  r.add("loss", "standard 4-d Gaussian at its mean gives 0.5*4*log(2 pi)", [] {
    const auto p = loss::make_gmm_prior({1.0}, {Eigen::VectorXd::Zero(4)}, {Eigen::MatrixXd::Identity(4, 4)});
    return close_to(loss::pose_prior_gmm(Tensor::zeros({4}), p).item(), 0.5 * 4.0 * std::log(2.0 * std::numbers::pi), 1e-12);
  });
  r.add("loss", "prior equals the exhaustive minimum on 1000 draws", [] {
    Rng rng(65);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const auto p = random_prior(rng, 6, 8);
      const Eigen::VectorXd theta = random_matrix(rng, 6, 1, 1.5);
      const double want = exhaustive_prior(p, theta);
      worst = std::max(worst, std::abs(loss::pose_prior_gmm(to_vector(theta), p).item() - want) / std::max(1.0, std::abs(want)));
    }
    return at_most(worst, 1e-12, "max relative difference");
  });
  r.add("loss", "densest component attains the minimum at its mean", [] {
    Rng rng(66);
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
    return close_to(loss::pose_prior_gmm(to_vector(p.means[best]), p).item(),
                    loss::component_energy(p, best, p.means[best]), 1e-12);
  });
  r.add("loss", "shape prior of 0, e1 and (1, 2)", [] {
    return pass_if(loss::shape_prior(Tensor::zeros({4})).item() == 0.0 &&
                   loss::shape_prior(Tensor::vector({1, 0, 0, 0})).item() == 1.0 &&
                   loss::shape_prior(Tensor::vector({1, 2})).item() == 5.0);
  });
  auto sample_pair = [](std::uint64_t seed, bool with_params, double noise) {
    Rng rng(seed);
    loss::LossTarget t;
    t.keypoints3d = random_matrix(rng, 12, 3, 800);
    for (int c = 0; c < 3; ++c) {
      t.keypoints2d.push_back({"cam" + std::to_string(c), Eigen::MatrixXd(random_matrix(rng, 12, 2, 40).array() + 48.0), 96, 96});
    }
    if (with_params) {
      body::BodyParams p;
      p.pose = random_matrix(rng, 8, 3, 0.4);
      p.shape = random_matrix(rng, 4, 1, 1.0);
      t.params = p;
    }
    loss::LossPrediction p;
    p.keypoints3d = to_tensor(t.keypoints3d + random_matrix(rng, 12, 3, 30 * noise));
    for (const auto& v : t.keypoints2d) p.keypoints2d.push_back({v.camera_id, to_tensor(v.pixels + random_matrix(rng, 12, 2, 3 * noise))});
    const Eigen::MatrixXd pose = t.params ? t.params->pose : Eigen::MatrixXd::Zero(8, 3);
    const Eigen::VectorXd shape = t.params ? t.params->shape : Eigen::VectorXd::Zero(4);
    p.pose = to_tensor(pose + random_matrix(rng, 8, 3, 0.2 * noise));
    p.shape = to_vector(shape + Eigen::VectorXd(random_matrix(rng, 4, 1, 0.5 * noise)));
    return std::make_pair(p, t);
  };
  r.add("loss", "perfect prediction with parameters costs 0", [sample_pair] {
    const auto [p, t] = sample_pair(67, true, 0.0);
    return pass_if(loss::total_loss(p, t, {}, loss::toy_gmm_prior(21)).total.item() == 0.0);
  });
  r.add("loss", "branch rule by weight zeroing", [sample_pair] {
    const auto prior = loss::toy_gmm_prior(21);
    const auto [pw, tw] = sample_pair(68, true, 1.0);
    loss::LossWeights no_prior;
    no_prior.lprior_pose = no_prior.lprior_shape = 0.0;
    const bool with_ok = loss::total_loss(pw, tw, {}, prior).total.item() == loss::total_loss(pw, tw, no_prior, prior).total.item();
    const auto [po, to] = sample_pair(69, false, 1.0);
    loss::LossWeights no_theta;
    no_theta.ltheta = 0.0;
    const auto a = loss::total_loss(po, to, {}, prior);
    const bool without_ok = a.total.item() == loss::total_loss(po, to, no_theta, prior).total.item() && a.lprior_pose.item() > 0.0;
    return pass_if(with_ok && without_ok);
  });
  r.add("loss", "unit weights equal the hand-summed terms", [sample_pair] {
    const auto prior = loss::toy_gmm_prior(21);
    double worst = 0.0;
    for (bool with_params : {true, false}) {
      const auto [p, t] = sample_pair(with_params ? 70 : 71, with_params, 1.0);
      const loss::LossWeights ones{1, 1, 1, 1, 1};
      double manual = loss::loss_3d(p.keypoints3d, t.keypoints3d, 0).item() + loss::loss_2d(p.keypoints2d, t.keypoints2d).item();
      manual += with_params ? loss::loss_smpl_params(p.pose, p.shape, *t.params).item()
                            : loss::pose_prior_gmm(loss::prior_pose_coordinates(p.pose), prior).item() +
                                  loss::shape_prior(p.shape).item();
      worst = std::max(worst, std::abs(loss::total_loss(p, t, ones, prior).total.item() - manual) / std::max(1.0, manual));
    }
    return at_most(worst, 1e-12, "max relative difference");
  });
}

void metrics_fixtures(Registry& r) {
  r.add("metrics", "MPJPE of a perfect prediction is 0", [] {
    const auto gt = grid_points(10);
    return pass_if(metrics::mpjpe(gt, gt, 0) == 0.0);
  });
  r.add("metrics", "MPJPE ignores a common offset", [] {
    const auto gt = grid_points(10);
    return pass_if(metrics::mpjpe(gt.rowwise() + Eigen::RowVector3d(50, 0, 0), gt, 0) == 0.0);
  });
  r.add("metrics", "one of 10 joints off by 10 mm gives 1 mm", [] {
    const auto gt = grid_points(10);
    Eigen::MatrixXd pred = gt;
    pred(4, 2) += 10.0;
    return close_to(metrics::mpjpe(pred, gt, 0), 1.0, 1e-12);
  });
  r.add("metrics", "PA-MPJPE of a similarity copy is 0", [] {
    Rng rng(81);
    const Eigen::MatrixXd gt = random_matrix(rng, 12, 3, 800);
    const Eigen::MatrixXd pred = ((1.7 * gt * random_rotation(rng).transpose()).rowwise() + Eigen::RowVector3d(300, -20, 5)).eval();
    return at_most(metrics::pa_mpjpe(pred, gt), 1e-9, "PA-MPJPE (mm)");
  });
  r.add("metrics", "post-alignment RMSE never exceeds centered RMSE on 500 pairs", [] {
    Rng rng(82);
    std::size_t violations = 0;
    for (int i = 0; i < 500; ++i) {
      const Eigen::MatrixXd gt = random_matrix(rng, 12, 3, 800);
      const Eigen::MatrixXd pred = gt * random_rotation(rng).transpose() * rng.uniform(0.7, 1.3) + random_matrix(rng, 12, 3, 150);
      const Eigen::VectorXd pa = metrics::joint_distances(pred, gt, metrics::Align::Procrustes);
      const Eigen::MatrixXd pc = pred.rowwise() - pred.colwise().mean(), gc = gt.rowwise() - gt.colwise().mean();
      const double centered = std::sqrt((pc - gc).rowwise().squaredNorm().mean());
      const double aligned = std::sqrt(pa.squaredNorm() / static_cast<double>(pa.size()));
      if (aligned > centered * (1.0 + 1e-12)) ++violations;
    }
    return pass_if(violations == 0, std::to_string(violations) + " violations");
  });
  r.add("metrics", "4-point PA residual matches a brute-force similarity search", [] {
    Eigen::MatrixXd pred(4, 3), gt(4, 3);
    pred << 0, 0, 0, 100, 0, 0, 0, 100, 0, 0, 0, 100;
    gt << 10, 5, -3, 205, 12, 1, 8, 198, 4, -6, 2, 210;
    Rng rng(83);
    const double closed = metrics::joint_distances(pred, gt, metrics::Align::Procrustes).squaredNorm();
    const double search = similarity_search(pred, gt, rng);
    return pass_if(std::abs(closed - search) <= 1e-6 * std::max(1.0, search),
                   "closed form " + num(closed) + ", search " + num(search));
  });
  const auto gt12 = grid_points(12);
  r.add("metrics", "PCK of a perfect prediction is 1", [gt12] { return pass_if(metrics::pck(gt12, gt12) == 1.0); });
  r.add("metrics", "PCK at threshold 0 with every joint off is 0", [gt12] {
    return pass_if(metrics::pck(Eigen::MatrixXd(gt12.array() + 1.0), gt12, 0.0, metrics::Align::None) == 0.0);
  });
  r.add("metrics", "3 of 12 joints beyond the threshold gives 0.75", [gt12] {
    Eigen::MatrixXd pred = gt12;
    for (int j : {2, 5, 9}) pred(j, 1) += 151.0;
    return pass_if(metrics::pck(pred, gt12, 150.0, metrics::Align::None) == 0.75);
  });
  r.add("metrics", "AUC of a perfect prediction is 1", [gt12] { return pass_if(metrics::auc(gt12, gt12) == 1.0); });
  r.add("metrics", "AUC with every joint 151 mm off is 0", [gt12] {
    return pass_if(metrics::auc(gt12.rowwise() + Eigen::RowVector3d(0, 0, 151), gt12, metrics::Align::None) == 0.0);
  });
  r.add("metrics", "AUC with every joint 50 mm off is 21/31", [gt12] {
    const double a = metrics::auc(gt12.rowwise() + Eigen::RowVector3d(0, 50, 0), gt12, metrics::Align::None);
    return pass_if(a == 21.0 / 31.0, "got " + num(a));
  });
}

void synth_fixtures(Registry& r) {
  r.add("synth", "rig cameras are rotations aimed at the origin", [] {
    const auto rig = synth::generate_rig({}, 7);
    bool ok = rig.size() == 4;
    for (const auto& c : rig) {
      ok = ok && (c.rotation.transpose() * c.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12 &&
           std::abs(c.rotation.determinant() - 1.0) <= 1e-12 && std::hypot(c.translation.x(), c.translation.y()) <= 1.0 &&
           c.translation.z() > 0.0;
    }
    return pass_if(ok);
  });
  r.add("synth", "single-camera rig runs with an explicit center", [] {
    synth::RigOptions one;
    one.cameras = 1;
    const auto model = body::builtin_toy_model();
    const auto rig = synth::generate_rig(one, 1);
    const auto s = synth::generate_sample(model, rig, {}, 2);
    const net::NetConfig c;
    auto in = train::pipeline_input(s);
    in.center = s.gt_keypoints3d.row(model.root_keypoint).transpose();
    const auto out = net::forward_pipeline(model, net::init_weights(c, model, 1), c, in);
    return pass_if(rig.size() == 1 && out.keypoints2d.size() == 1);
  });
  r.add("synth", "rig generation is deterministic", [] {
    const auto a = synth::generate_rig({}, 9), b = synth::generate_rig({}, 9);
    bool ok = true;
    for (std::size_t i = 0; i < a.size(); ++i) ok = ok && a[i].rotation == b[i].rotation && a[i].translation == b[i].translation;
    return pass_if(ok);
  });
  r.add("synth", "noise-free pelvis detections sit on the projection", [] {
    const auto model = body::builtin_toy_model();
    synth::SampleOptions o;
    o.pixel_noise = 0.0;
    const auto s = synth::generate_sample(model, synth::generate_rig({}, 3), o, 5);
    bool ok = true;
    for (std::size_t c = 0; c < s.calibs.size(); ++c) {
      ok = ok && s.pelvis_detections[c].point == Eigen::Vector2d(s.gt_keypoints2d[c].row(model.root_keypoint).transpose());
    }
    return pass_if(ok);
  });
  r.add("synth", "100 samples are self-consistent", [] {
    const auto model = body::builtin_toy_model();
    const auto rig = synth::generate_rig({}, 3);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto s = synth::generate_sample(model, rig, {}, seed);
      for (std::size_t c = 0; c < rig.size(); ++c) {
        const auto P = calib::projection_matrix(rig[c]);
        for (Eigen::Index k = 0; k < s.gt_keypoints3d.rows(); ++k) {
          const auto p = calib::project_point(P, s.gt_keypoints3d.row(k).transpose());
          worst = std::max(worst, (p.pixel - s.gt_keypoints2d[c].row(k).transpose()).norm());
        }
      }
    }
    return at_most(worst, 1e-9, "max reprojection difference (px)");
  });
  r.add("synth", "zero pose scale gives the translated rest pose", [] {
    const auto model = body::builtin_toy_model();
    synth::SampleOptions o;
    o.pose_scale = 0.0;
    const auto s = synth::generate_sample(model, synth::generate_rig({}, 3), o, 9);
    auto p = s.gt_params;
    const Eigen::MatrixXd local = body::regress_keypoints(model, body::forward(model, p).vertices);
    const Eigen::MatrixXd rel = s.gt_keypoints3d.rowwise() - s.gt_keypoints3d.row(model.root_keypoint);
    const Eigen::MatrixXd want = local.rowwise() - local.row(model.root_keypoint);
    return pass_if(s.gt_params.pose.cwiseAbs().maxCoeff() == 0.0 && (rel - want).cwiseAbs().maxCoeff() <= 1e-9);
  });
  r.add("synth", "blob peak sits at the keypoint's pixel", [] {
    Eigen::MatrixXd kp(1, 2);
    kp << 10.5, 20.5;
    const auto img = synth::render_feature_blobs(kp, 32, 32, 1.0, 1);
    const auto d = img.data();
    const auto arg = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    return pass_if(arg == 20 * 32 + 10 && d[arg] == 1.0);
  });
  r.add("synth", "blob value one sigma away is exp(-1/2)", [] {
    Eigen::MatrixXd kp(1, 2);
    kp << 10.5, 20.5;
    const auto img = synth::render_feature_blobs(kp, 32, 32, 3.0, 1);
    return close_to(img.at(20 * 32 + 13), std::exp(-0.5), 1e-15);
  });
  r.add("synth", "off-image keypoint leaves only its tail", [] {
    Eigen::MatrixXd kp(1, 2);
    kp << -3.0, 16.0;
    const auto img = synth::render_feature_blobs(kp, 32, 32, 2.0, 1);
    return close_to(img.at(15 * 32), std::exp(-(3.5 * 3.5 + 0.25) / 8.0), 1e-15);
  });
}

void train_fixtures(Registry& r, const Reference& ref, const std::filesystem::path& work) {
  auto dataset = [work](const std::string& name, std::size_t count) {
    synth::DatasetOptions o;
    o.count = count;
    o.seed = 13;
    return synth::generate_dataset(o, work / name);
  };
  auto small_run = [](std::size_t steps) {
    train::RunConfig c;
    c.steps = steps;
    c.batch = 2;
    c.seed = 3;
    c.train_data = "unused";
    return c;
  };
  r.add("train", "zero steps return the initialization", [dataset, small_run] {
    const auto model = body::builtin_toy_model();
    const auto data = dataset("train_zero", 2);
    const auto cfg = small_run(0);
    const auto res = train::train(cfg, data, model, loss::resolve_prior("builtin:toy", model));
    const auto init = net::init_weights(cfg.net, model, derive_seed(cfg.seed, 0));
    bool ok = res.trace.empty();
    for (std::size_t i = 0; ok && i < init.named().size(); ++i) {
      ok = bits_equal(init.named()[i].second, res.checkpoint.weights.named()[i].second);
    }
    return pass_if(ok);
  });
  r.add("train", "identical runs give byte-identical traces", [dataset, small_run, work] {
    const auto model = body::builtin_toy_model();
    const auto prior = loss::resolve_prior("builtin:toy", model);
    const auto data = dataset("train_det", 3);
    const auto cfg = small_run(3);
    train::train(cfg, data, model, prior, {work / "train_det_a", {}});
    train::train(cfg, data, model, prior, {work / "train_det_b", {}});
    return pass_if(read_bytes(work / "train_det_a" / "loss_trace.csv") == read_bytes(work / "train_det_b" / "loss_trace.csv") &&
                   read_bytes(work / "train_det_a" / "checkpoint.json") == read_bytes(work / "train_det_b" / "checkpoint.json"));
  });
  r.add(
      "train", "toy overfit reaches a tenth of the early loss and the recorded MPJPE",
      [ref, work] {
        const auto s = toy_overfit(ref.overfit_seed, work / "overfit", ref.overfit_steps);
        const bool loss_ok = s.final_total <= s.step10_average / 10.0;
        const bool mpjpe_ok = s.mpjpe_mm <= ref.overfit_mpjpe_mm * 1.2;
        return pass_if(loss_ok && mpjpe_ok, "step-10 average " + num(s.step10_average) + ", final " + num(s.final_total) +
                                                ", MPJPE " + num(s.mpjpe_mm) + " mm (recorded " +
                                                num(ref.overfit_mpjpe_mm) + " mm)");
      },
      true);
  r.add("train", "oracle evaluation scores zero error", [dataset] {
    const auto model = body::builtin_toy_model();
    const auto data = dataset("train_oracle", 3);
    train::Checkpoint ck;
    ck.model = "builtin:toy";
    ck.model_joints = model.num_joints();
    ck.model_shape = model.num_shape();
    ck.model_keypoints = model.num_keypoints();
    ck.weights = net::init_weights(ck.net, model, 1);
    const auto rep = train::evaluate(ck, data, model, {{}, true});
    return pass_if(rep.mpjpe_mm == 0.0 && rep.pa_mpjpe_mm == 0.0 && rep.pck == 1.0 && rep.auc == 1.0);
  });
  r.add("train", "report joint count and determinism", [dataset] {
    const auto model = body::builtin_toy_model();
    const auto data = dataset("train_report", 2);
    train::Checkpoint ck;
    ck.model = "builtin:toy";
    ck.model_joints = model.num_joints();
    ck.model_shape = model.num_shape();
    ck.model_keypoints = model.num_keypoints();
    ck.weights = net::init_weights(ck.net, model, 2);
    const auto a = train::evaluate(ck, data, model), b = train::evaluate(ck, data, model);
    return pass_if(a.joint_count == model.num_keypoints() &&
                   metrics::report_to_json(a).dump() == metrics::report_to_json(b).dump());
  });
}

void gradient_fixture(Registry& r) {
  r.add(
      "cli", "gradient suite passes",
      [] {
        std::string failed;
        for (const auto& s : run_gradient_suite(0)) {
          if (!s.passed) failed += (failed.empty() ? "" : ", ") + s.name;
        }
        return pass_if(failed.empty(), failed.empty() ? "all cases within 1e-4" : "failing: " + failed);
      },
      true);
}

}  // namespace

std::vector<Fixture> selftest_fixtures(const Reference& reference, const std::filesystem::path& work_dir) {
  std::filesystem::create_directories(work_dir);
  Registry r;
  calib_fixtures(r, work_dir);
  body_fixtures(r, work_dir);
  geom_fixtures(r, reference);
  volume_fixtures(r);
  tensor_fixtures(r);
  net_fixtures(r);
  loss_fixtures(r);
  metrics_fixtures(r);
  synth_fixtures(r);
  train_fixtures(r, reference, work_dir);
  gradient_fixture(r);
  return r.take();
}

Outcome run_fixture(const Fixture& fixture) {
  try {
    return fixture.run();
  } catch (const Error& e) {
    return {false, std::string("unexpected ") + std::string(to_string(e.kind())) + ": " + e.what()};
  } catch (const std::exception& e) {
    return {false, std::string("unexpected exception: ") + e.what()};
  }
}

}  // namespace volagg::checks
