#include "volagg/bodymodel.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "volagg/error.hpp"
#include "volagg/ops.hpp"
#include "volagg/rng.hpp"

namespace volagg::body {

namespace {

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

void check_rows_sum(const Eigen::MatrixXd& m, const std::string& what, double tol) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double s = m.row(r).sum();
    if (std::abs(s - 1.0) > tol) {
      fail(ErrorKind::InvalidInput, what + " row " + std::to_string(r) + " sums to " + fmt_g(s));
    }
  }
}

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

// Forward intermediates kept for the backward rule.
struct Kinematics {
  Eigen::MatrixXd shaped;  // [V,3]
  Eigen::MatrixXd posed;   // [V,3]
  Eigen::MatrixXd rest_joints;  // [J,3]
  std::vector<Mat3> local;
  std::vector<Mat3> world_rot;
  std::vector<Vec3> world_trans;
  Eigen::MatrixXd vertices;  // [V,3]
};

Kinematics run_forward(const BodyModelDef& m, std::span<const double> pose, std::span<const double> shape) {
  const auto V = static_cast<Eigen::Index>(m.num_vertices());
  const std::size_t J = m.num_joints();
  Kinematics k;
  Eigen::Map<const Eigen::VectorXd> beta(shape.data(), static_cast<Eigen::Index>(shape.size()));
  const Eigen::VectorXd offsets = m.shape_dirs * beta;
  k.shaped = m.template_vertices;
  for (Eigen::Index v = 0; v < V; ++v)
    for (int a = 0; a < 3; ++a) k.shaped(v, a) += offsets[3 * v + a];
  k.rest_joints = m.joint_regressor * k.shaped;

  k.local.resize(J);
  for (std::size_t j = 0; j < J; ++j) {
    k.local[j] = rodrigues(Vec3(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]));
  }

  k.posed = k.shaped;
  if (m.pose_dirs) {
    Eigen::VectorXd feat(static_cast<Eigen::Index>(9 * (J - 1)));
    for (std::size_t j = 1; j < J; ++j)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) feat[static_cast<Eigen::Index>(9 * (j - 1) + 3 * r + c)] = k.local[j](r, c) - (r == c);
    const Eigen::VectorXd corr = *m.pose_dirs * feat;
    for (Eigen::Index v = 0; v < V; ++v)
      for (int a = 0; a < 3; ++a) k.posed(v, a) += corr[3 * v + a];
  }

  k.world_rot.resize(J);
  k.world_trans.resize(J);
  k.world_rot[0] = k.local[0];
  k.world_trans[0] = k.rest_joints.row(0).transpose();
  for (std::size_t j = 1; j < J; ++j) {
    const auto p = static_cast<std::size_t>(m.parents[j]);
    const Vec3 bone = (k.rest_joints.row(static_cast<Eigen::Index>(j)) - k.rest_joints.row(static_cast<Eigen::Index>(p))).transpose();
    k.world_rot[j] = k.world_rot[p] * k.local[j];
    k.world_trans[j] = k.world_rot[p] * bone + k.world_trans[p];
  }

  k.vertices = Eigen::MatrixXd::Zero(V, 3);
  for (std::size_t j = 0; j < J; ++j) {
    const Vec3 offset = k.world_trans[j] - k.world_rot[j] * k.rest_joints.row(static_cast<Eigen::Index>(j)).transpose();
    for (Eigen::Index v = 0; v < V; ++v) {
      const double w = m.skin_weights(v, static_cast<Eigen::Index>(j));
      if (w == 0.0) continue;
      k.vertices.row(v) += w * (k.world_rot[j] * k.posed.row(v).transpose() + offset).transpose();
    }
  }
  return k;
}

}  // namespace

BodyParams BodyParams::zeros(std::size_t joints, std::size_t shape_dims) {
  return {Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(joints), 3),
          Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape_dims))};
}

void validate(const BodyModelDef& m) {
  const auto V = m.template_vertices.rows();
  const auto J = static_cast<Eigen::Index>(m.parents.size());
  if (V < 1 || m.template_vertices.cols() != 3) fail(ErrorKind::InvalidInput, "template must be [V,3] with V >= 1");
  if (J < 1) fail(ErrorKind::InvalidInput, "parents must name at least one joint");
  if (m.shape_dirs.rows() != 3 * V) fail(ErrorKind::InvalidInput, "shape_dirs must be [V,3,B]");
  if (m.pose_dirs && (m.pose_dirs->rows() != 3 * V || m.pose_dirs->cols() != 9 * (J - 1))) {
    fail(ErrorKind::InvalidInput, "pose_dirs must be [V,3,9(J-1)]");
  }
  if (m.skin_weights.rows() != V || m.skin_weights.cols() != J) fail(ErrorKind::InvalidInput, "skin_weights must be [V,J]");
  if (m.joint_regressor.rows() != J || m.joint_regressor.cols() != V) {
    fail(ErrorKind::InvalidInput, "joint_regressor must be [J,V]");
  }
  if (m.keypoint_regressor.rows() < 1 || m.keypoint_regressor.cols() != V) {
    fail(ErrorKind::InvalidInput, "keypoint_regressor must be [J',V]");
  }
  if (m.root_keypoint < 0 || m.root_keypoint >= m.keypoint_regressor.rows()) {
    fail(ErrorKind::InvalidInput, "root_keypoint out of range");
  }
  const bool finite = m.template_vertices.allFinite() && m.shape_dirs.allFinite() && m.skin_weights.allFinite() &&
                      m.joint_regressor.allFinite() && m.keypoint_regressor.allFinite() &&
                      (!m.pose_dirs || m.pose_dirs->allFinite());
  if (!finite) fail(ErrorKind::InvalidInput, "model tensors must be finite");
  if (m.parents[0] != -1) fail(ErrorKind::InvalidInput, "parents[0] must be -1");
  for (Eigen::Index k = 1; k < J; ++k) {
    const int p = m.parents[static_cast<std::size_t>(k)];
    if (p < 0 || p >= k) {
      fail(ErrorKind::InvalidInput, "parents[" + std::to_string(k) + "] = " + std::to_string(p) + " must lie in [0, " +
                                        std::to_string(k) + ")");
    }
  }
  for (Eigen::Index v = 0; v < V; ++v) {
    if ((m.skin_weights.row(v).array() < 0.0).any()) {
      fail(ErrorKind::InvalidInput, "skin weights row " + std::to_string(v) + " has a negative entry");
    }
  }
  check_rows_sum(m.skin_weights, "skin weights", 1e-6);
  check_rows_sum(m.joint_regressor, "joint regressor", 1e-4);
  check_rows_sum(m.keypoint_regressor, "keypoint regressor", 1e-4);
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& aa) {
  if (ad::branch::recording()) ad::branch::note(aa.squaredNorm() < kSmallAngle * kSmallAngle ? 1 : 2);
  const auto r = rodrigues_generic<double>(aa.x(), aa.y(), aa.z());
  Eigen::Matrix3d R;
  R << r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8];
  return R;
}

std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& aa) {
  using J3 = ad::Jet<3>;
  const auto r = rodrigues_generic<J3>(J3(aa.x(), 0), J3(aa.y(), 1), J3(aa.z(), 2));
  std::array<Eigen::Matrix3d, 3> d;
  for (int i = 0; i < 3; ++i)
    for (int e = 0; e < 9; ++e) d[static_cast<std::size_t>(i)](e / 3, e % 3) = r[static_cast<std::size_t>(e)].v[static_cast<std::size_t>(i)];
  return d;
}

BodyOutput forward(const BodyModelDef& m, const ad::Tensor& pose, const ad::Tensor& shape) {
  const std::size_t J = m.num_joints(), B = m.num_shape(), V = m.num_vertices();
  if (pose.rank() != 2 || pose.dim(0) != J || pose.dim(1) != 3) {
    fail(ErrorKind::DimensionMismatch, "body forward: pose shape " + ad::shape_str(pose.shape()) + " but model has " +
                                           std::to_string(J) + " joints");
  }
  if (shape.size() != B) {
    fail(ErrorKind::DimensionMismatch, "body forward: shape has " + std::to_string(shape.size()) + " coefficients but model has " +
                                           std::to_string(B));
  }
  Kinematics k = run_forward(m, pose.data(), shape.data());

  std::vector<double> vdata(V * 3), jdata(J * 3);
  for (std::size_t v = 0; v < V; ++v)
    for (int a = 0; a < 3; ++a) vdata[3 * v + a] = k.vertices(static_cast<Eigen::Index>(v), a);
  for (std::size_t j = 0; j < J; ++j)
    for (int a = 0; a < 3; ++a) jdata[3 * j + a] = k.world_trans[j][a];

  const bool rec = ad::should_record({&pose, &shape});
  BodyOutput out{ad::make_result({V, 3}, std::move(vdata), rec), ad::make_result({J, 3}, std::move(jdata), rec)};
  if (!rec) return out;

  auto kin = std::make_shared<Kinematics>(std::move(k));
  const ad::Tensor vt = out.vertices, jt = out.joints;
  ad::record("body_forward", {&vt, &jt}, [&m, pose, shape, vt, jt, kin, J, V]() {
    const auto gv = ad::upstream(vt.impl());
    const auto gj = ad::upstream(jt.impl());
    auto vgrad = [&](std::size_t v) {
      return gv.empty() ? Vec3::Zero().eval() : Vec3(gv[3 * v], gv[3 * v + 1], gv[3 * v + 2]);
    };
    std::vector<Mat3> g_rot(J, Mat3::Zero());
    std::vector<Vec3> g_trans(J, Vec3::Zero());
    Eigen::MatrixXd g_rest = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(J), 3);
    Eigen::MatrixXd g_posed = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(V), 3);

    // Skinning: v = sum_j w_vj (M_j p_v + t_j - M_j r_j)
    for (std::size_t j = 0; j < J; ++j) {
      const Vec3 rj = kin->rest_joints.row(static_cast<Eigen::Index>(j)).transpose();
      Vec3 g_offset = Vec3::Zero();
      for (std::size_t v = 0; v < V; ++v) {
        const double w = m.skin_weights(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
        if (w == 0.0) continue;
        const Vec3 gvv = w * vgrad(v);
        const Vec3 pv = kin->posed.row(static_cast<Eigen::Index>(v)).transpose();
        g_rot[j] += gvv * pv.transpose();
        g_offset += gvv;
        g_posed.row(static_cast<Eigen::Index>(v)) += (kin->world_rot[j].transpose() * gvv).transpose();
      }
      g_trans[j] += g_offset;
      g_rot[j] -= g_offset * rj.transpose();
      g_rest.row(static_cast<Eigen::Index>(j)) -= (kin->world_rot[j].transpose() * g_offset).transpose();
      if (!gj.empty()) g_trans[j] += Vec3(gj[3 * j], gj[3 * j + 1], gj[3 * j + 2]);
    }

    // Kinematic chain, leaves first.
    std::vector<Mat3> g_local(J, Mat3::Zero());
    for (std::size_t j = J; j-- > 1;) {
      const auto p = static_cast<std::size_t>(m.parents[j]);
      const Vec3 bone = (kin->rest_joints.row(static_cast<Eigen::Index>(j)) - kin->rest_joints.row(static_cast<Eigen::Index>(p))).transpose();
      g_rot[p] += g_rot[j] * kin->local[j].transpose() + g_trans[j] * bone.transpose();
      g_local[j] += kin->world_rot[p].transpose() * g_rot[j];
      g_trans[p] += g_trans[j];
      const Vec3 g_bone = kin->world_rot[p].transpose() * g_trans[j];
      g_rest.row(static_cast<Eigen::Index>(j)) += g_bone.transpose();
      g_rest.row(static_cast<Eigen::Index>(p)) -= g_bone.transpose();
    }
    g_local[0] += g_rot[0];
    g_rest.row(0) += g_trans[0].transpose();

    Eigen::MatrixXd g_shaped = g_posed;
    if (m.pose_dirs) {
      Eigen::VectorXd flat(static_cast<Eigen::Index>(3 * V));
      for (std::size_t v = 0; v < V; ++v)
        for (int a = 0; a < 3; ++a) flat[static_cast<Eigen::Index>(3 * v + a)] = g_posed(static_cast<Eigen::Index>(v), a);
      const Eigen::VectorXd g_feat = m.pose_dirs->transpose() * flat;
      for (std::size_t j = 1; j < J; ++j)
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) g_local[j](r, c) += g_feat[static_cast<Eigen::Index>(9 * (j - 1) + 3 * r + c)];
    }
    g_shaped += m.joint_regressor.transpose() * g_rest;

    if (double* gp = ad::grad_target(pose)) {
      const auto pd = pose.data();
      for (std::size_t j = 0; j < J; ++j) {
        const auto dR = rodrigues_jacobian(Vec3(pd[3 * j], pd[3 * j + 1], pd[3 * j + 2]));
        for (int i = 0; i < 3; ++i) gp[3 * j + i] += (g_local[j].array() * dR[static_cast<std::size_t>(i)].array()).sum();
      }
    }
    if (double* gs = ad::grad_target(shape)) {
      Eigen::VectorXd flat(static_cast<Eigen::Index>(3 * V));
      for (std::size_t v = 0; v < V; ++v)
        for (int a = 0; a < 3; ++a) flat[static_cast<Eigen::Index>(3 * v + a)] = g_shaped(static_cast<Eigen::Index>(v), a);
      const Eigen::VectorXd g_beta = m.shape_dirs.transpose() * flat;
      for (Eigen::Index b = 0; b < g_beta.size(); ++b) gs[b] += g_beta[b];
    }
  });
  return out;
}

BodyMesh forward(const BodyModelDef& model, const BodyParams& params) {
  ad::NoGradScope no_grad;
  std::vector<double> pose(static_cast<std::size_t>(params.pose.size()));
  for (Eigen::Index j = 0; j < params.pose.rows(); ++j)
    for (Eigen::Index a = 0; a < params.pose.cols(); ++a) pose[static_cast<std::size_t>(j * params.pose.cols() + a)] = params.pose(j, a);
  std::vector<double> shape(params.shape.data(), params.shape.data() + params.shape.size());
  auto out = forward(model, ad::Tensor({static_cast<std::size_t>(params.pose.rows()), static_cast<std::size_t>(params.pose.cols())}, pose),
                     ad::Tensor::vector(shape));
  BodyMesh mesh;
  mesh.vertices = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(
      out.vertices.data().data(), static_cast<Eigen::Index>(model.num_vertices()), 3);
  mesh.joints = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(
      out.joints.data().data(), static_cast<Eigen::Index>(model.num_joints()), 3);
  return mesh;
}

ad::Tensor regress_keypoints(const BodyModelDef& model, const ad::Tensor& vertices) {
  const auto& W = model.keypoint_regressor;
  ad::Tensor w({static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols())},
               std::vector<double>(static_cast<std::size_t>(W.size())));
  auto wd = w.mutable_data();
  for (Eigen::Index r = 0; r < W.rows(); ++r)
    for (Eigen::Index c = 0; c < W.cols(); ++c) wd[static_cast<std::size_t>(r * W.cols() + c)] = W(r, c);
  if (vertices.rank() != 2 || vertices.dim(0) != static_cast<std::size_t>(W.cols()) || vertices.dim(1) != 3) {
    fail(ErrorKind::DimensionMismatch, "regress_keypoints: vertices " + ad::shape_str(vertices.shape()) + " vs regressor [" +
                                           std::to_string(W.rows()) + "," + std::to_string(W.cols()) + "]");
  }
  return ad::matmul(w, vertices);
}

Eigen::MatrixXd regress_keypoints(const BodyModelDef& model, const Eigen::MatrixXd& vertices) {
  return model.keypoint_regressor * vertices;
}

BodyModelDef builtin_toy_model() {
  // Joint layout: pelvis, l_hip, r_hip, spine, l_knee, r_knee, l_shoulder, r_shoulder.
  const std::vector<int> parents{-1, 0, 0, 0, 1, 2, 3, 3};
  const std::vector<Vec3> joints{{0, 0, 0},      {100, 0, -70}, {-100, 0, -70}, {0, 0, 250},
                                 {110, 0, -480}, {-110, 0, -480}, {190, 0, 470}, {-190, 0, 470}};
  struct Anchor {
    Vec3 at;
    int owner;
  };
  // Extremities: l_ankle, r_ankle, head, l_hand, r_hand.
  const std::vector<Anchor> ends{{{115, 0, -880}, 4}, {{-115, 0, -880}, 5}, {{0, 0, 760}, 3}, {{700, 0, 470}, 6}, {{-700, 0, 470}, 7}};
  const std::vector<Anchor> mids{{{105, 0, -275}, 1},  {{-105, 0, -275}, 2}, {{112, 0, -680}, 4}, {{-112, 0, -680}, 5},
                                 {{360, 0, 470}, 6},   {{-360, 0, 470}, 7},  {{530, 0, 470}, 6},  {{-530, 0, 470}, 7},
                                 {{0, 80, 380}, 3},    {{0, -80, 380}, 3},   {{0, 50, 560}, 3},   {{0, -50, 560}, 3}};
  const std::vector<Vec3> ring{{40, 0, 0}, {-40, 0, 0}, {0, 40, 0}, {0, -40, 0}};

  const Eigen::Index J = 8, V = 64, B = 4, K = 12;
  Rng rng(20200614);
  BodyModelDef m;
  m.parents = parents;
  m.template_vertices = Eigen::MatrixXd::Zero(V, 3);
  m.skin_weights = Eigen::MatrixXd::Zero(V, J);
  m.joint_regressor = Eigen::MatrixXd::Zero(J, V);
  m.keypoint_regressor = Eigen::MatrixXd::Zero(K, V);

  auto jitter = [&rng]() { return Vec3(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)); };
  Eigen::Index v = 0;
  std::vector<Eigen::Index> joint_ring_start(J), end_start(ends.size());
  for (Eigen::Index j = 0; j < J; ++j) {
    joint_ring_start[static_cast<std::size_t>(j)] = v;
    for (const auto& off : ring) {
      m.template_vertices.row(v) = (joints[static_cast<std::size_t>(j)] + off + jitter()).transpose();
      if (j == 0) {
        m.skin_weights(v, 0) = 1.0;
      } else {
        m.skin_weights(v, j) = 0.7;
        m.skin_weights(v, parents[static_cast<std::size_t>(j)]) = 0.3;
      }
      m.joint_regressor(j, v) = 0.25;
      ++v;
    }
  }
  for (std::size_t e = 0; e < ends.size(); ++e) {
    end_start[e] = v;
    for (const auto& off : ring) {
      m.template_vertices.row(v) = (ends[e].at + 0.75 * off + jitter()).transpose();
      m.skin_weights(v, ends[e].owner) = 1.0;
      ++v;
    }
  }
  for (const auto& mid : mids) {
    m.template_vertices.row(v) = (mid.at + jitter()).transpose();
    m.skin_weights(v, mid.owner) = 1.0;
    ++v;
  }

  // Keypoints: pelvis, l_hip, r_hip, l_knee, r_knee, l_ankle, r_ankle, head,
  // l_shoulder, r_shoulder, l_hand, r_hand.
  const std::vector<Eigen::Index> kp_start{joint_ring_start[0], joint_ring_start[1], joint_ring_start[2],
                                           joint_ring_start[4], joint_ring_start[5], end_start[0],
                                           end_start[1],        end_start[2],        joint_ring_start[6],
                                           joint_ring_start[7], end_start[3],        end_start[4]};
  for (Eigen::Index k = 0; k < K; ++k)
    for (int i = 0; i < 4; ++i) m.keypoint_regressor(k, kp_start[static_cast<std::size_t>(k)] + i) = 0.25;
  m.root_keypoint = 0;

  m.shape_dirs = Eigen::MatrixXd::Zero(3 * V, B);
  for (Eigen::Index i = 0; i < V; ++i) {
    const Vec3 p = m.template_vertices.row(i).transpose();
    m.shape_dirs(3 * i + 2, 0) = 0.06 * p.z();  // stature
    m.shape_dirs(3 * i + 0, 1) = 0.08 * p.x();  // breadth
    if (std::abs(p.x()) > 190.0) m.shape_dirs(3 * i + 0, 2) = (p.x() > 0 ? 0.1 : -0.1) * (std::abs(p.x()) - 190.0);
    if (p.z() < -70.0) m.shape_dirs(3 * i + 2, 2) = 0.05 * (p.z() + 70.0);  // limb length
    for (int a = 0; a < 3; ++a) m.shape_dirs(3 * i + a, 3) = 10.0 * rng.normal();
  }
  validate(m);
  return m;
}

io::Json params_to_json(const BodyParams& params) {
  io::Json j;
  j["pose"] = io::matrix_to_json(params.pose);
  j["shape"] = io::vector_to_json(params.shape);
  return j;
}

BodyParams params_from_json(const io::Json& json) {
  if (!json.is_object() || !json.contains("pose") || !json.contains("shape")) {
    fail(ErrorKind::Parse, "body params: expected {\"pose\", \"shape\"}");
  }
  return {io::matrix_from_json(json["pose"], "pose", -1, 3), io::vector_from_json(json["shape"], "shape")};
}

io::Json model_to_json(const BodyModelDef& m) {
  const auto V = m.template_vertices.rows();
  auto stacked = [V](const Eigen::MatrixXd& dirs) {
    io::Json out = io::Json::array();
    for (Eigen::Index v = 0; v < V; ++v) {
      io::Json axes = io::Json::array();
      for (int a = 0; a < 3; ++a) {
        io::Json row = io::Json::array();
        for (Eigen::Index b = 0; b < dirs.cols(); ++b) row.push_back(dirs(3 * v + a, b));
        axes.push_back(std::move(row));
      }
      out.push_back(std::move(axes));
    }
    return out;
  };
  io::Json j;
  j["template"] = io::matrix_to_json(m.template_vertices);
  j["shape_dirs"] = stacked(m.shape_dirs);
  j["pose_dirs"] = m.pose_dirs ? stacked(*m.pose_dirs) : io::Json(nullptr);
  j["skin_weights"] = io::matrix_to_json(m.skin_weights);
  j["parents"] = m.parents;
  j["joint_regressor"] = io::matrix_to_json(m.joint_regressor);
  j["keypoint_regressor"] = io::matrix_to_json(m.keypoint_regressor);
  j["root_keypoint"] = m.root_keypoint;
  return j;
}

BodyModelDef model_from_json(const io::Json& j) {
  for (const char* key : {"template", "shape_dirs", "pose_dirs", "skin_weights", "parents", "joint_regressor", "keypoint_regressor"}) {
    if (!j.contains(key)) fail(ErrorKind::Parse, std::string("model: missing key \"") + key + "\"");
  }
  BodyModelDef m;
  m.template_vertices = io::matrix_from_json(j["template"], "template", -1, 3);
  const auto V = m.template_vertices.rows();
  auto unstack = [V](const io::Json& arr, const std::string& what) {
    if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != V) {
      fail(ErrorKind::Parse, what + ": expected " + std::to_string(V) + " vertex entries");
    }
    Eigen::MatrixXd out;
    for (Eigen::Index v = 0; v < V; ++v) {
      const Eigen::MatrixXd block = io::matrix_from_json(arr[static_cast<std::size_t>(v)], what, 3, -1);
      if (v == 0) out = Eigen::MatrixXd::Zero(3 * V, block.cols());
      if (block.cols() != out.cols()) fail(ErrorKind::Parse, what + ": inconsistent basis size");
      out.middleRows(3 * v, 3) = block;
    }
    return out;
  };
  m.shape_dirs = unstack(j["shape_dirs"], "shape_dirs");
  if (!j["pose_dirs"].is_null()) m.pose_dirs = unstack(j["pose_dirs"], "pose_dirs");
  m.skin_weights = io::matrix_from_json(j["skin_weights"], "skin_weights", V, -1);
  try {
    m.parents = j["parents"].get<std::vector<int>>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Parse, "parents: expected an integer array");
  }
  m.joint_regressor = io::matrix_from_json(j["joint_regressor"], "joint_regressor", -1, V);
  m.keypoint_regressor = io::matrix_from_json(j["keypoint_regressor"], "keypoint_regressor", -1, V);
  if (j.contains("root_keypoint")) m.root_keypoint = j["root_keypoint"].get<int>();
  validate(m);
  return m;
}

BodyModelDef load_model(const std::filesystem::path& path) { return model_from_json(io::read_json_file(path)); }

void save_model(const BodyModelDef& model, const std::filesystem::path& path) {
  io::write_json_file(path, model_to_json(model));
}

BodyModelDef resolve_model(const std::string& spec) {
  if (spec.empty() || spec == "builtin:toy") return builtin_toy_model();
  return load_model(spec);
}

}  // namespace volagg::body
