#include "volagg/calib.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Geometry>
#include <Eigen/LU>

#include "volagg/error.hpp"

namespace volagg::calib {

namespace {

std::string describe(const CameraCalib& c, std::size_t index) {
  return c.id.empty() ? "camera #" + std::to_string(index) : "camera '" + c.id + "'";
}

void validate_named(const CameraCalib& c, const std::string& name, double tol) {
  const Eigen::Matrix3d& K = c.intrinsics;
  if (!K.allFinite() || !c.rotation.allFinite() || !c.translation.allFinite()) {
    fail(ErrorKind::InvalidInput, name + ": non-finite calibration value");
  }
  if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(0, 0) <= 0.0 || K(1, 1) <= 0.0 || K(2, 2) <= 0.0) {
    fail(ErrorKind::InvalidInput, name + ": intrinsics must be upper-triangular with positive diagonal");
  }
  const double orth = (c.rotation.transpose() * c.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  const double det = c.rotation.determinant();
  if (det < 0.0) {
    std::ostringstream os;
    os << name << ": rotation not special orthogonal (det=" << det << ")";
    fail(ErrorKind::InvalidInput, os.str());
  }
  if (orth > tol || std::abs(det - 1.0) > 3.0 * tol) {
    std::ostringstream os;
    os << name << ": rotation not special orthogonal (|R^T R - I|=" << orth << ")";
    fail(ErrorKind::InvalidInput, os.str());
  }
  if (c.width < 1 || c.height < 1) fail(ErrorKind::InvalidInput, name + ": image_size components must be >= 1");
}

}  // namespace

void validate(const CameraCalib& calib, double rotation_tolerance) {
  validate_named(calib, describe(calib, 0), rotation_tolerance);
}

ProjectionMatrix projection_matrix(const CameraCalib& calib) {
  ProjectionMatrix P;
  Eigen::Matrix<double, 3, 4> extrinsic;
  extrinsic.leftCols<3>() = calib.rotation;
  extrinsic.col(3) = calib.translation;
  P.matrix = calib.intrinsics * extrinsic;
  P.source_id = calib.id;
  return P;
}

CameraCalib look_at_camera(const std::string& id, const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                           const Eigen::Vector3d& up, double focal, int width, int height) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d side = forward.cross(up);
  if (!(side.norm() > 1e-9 * up.norm())) fail(ErrorKind::InvalidInput, "look_at: view direction parallel to up");
  const Eigen::Vector3d x = side.normalized();
  const Eigen::Vector3d y = forward.cross(x);
  CameraCalib c;
  c.id = id;
  c.rotation.row(0) = x.transpose();
  c.rotation.row(1) = y.transpose();
  c.rotation.row(2) = forward.transpose();
  c.translation = -c.rotation * eye;
  c.intrinsics << focal, 0.0, 0.5 * width, 0.0, focal, 0.5 * height, 0.0, 0.0, 1.0;
  c.width = width;
  c.height = height;
  return c;
}

std::optional<Projection> try_project(const ProjectionMatrix& P, const Eigen::Vector3d& X) {
  const Eigen::Vector3d p = P.matrix.leftCols<3>() * X + P.matrix.col(3);
  if (!(p.z() > kMinDepth)) return std::nullopt;
  return Projection{Eigen::Vector2d(p.x() / p.z(), p.y() / p.z()), p.z()};
}

Projection project_point(const ProjectionMatrix& P, const Eigen::Vector3d& X) {
  auto r = try_project(P, X);
  if (!r) {
    std::ostringstream os;
    os << "point (" << X.x() << ", " << X.y() << ", " << X.z() << ") is behind camera '" << P.source_id << "'";
    fail(ErrorKind::PointBehindCamera, os.str());
  }
  return *r;
}

Eigen::Matrix<double, 2, 3> project_jacobian(const ProjectionMatrix& P, const Eigen::Vector3d& X) {
  const Eigen::Vector3d p = P.matrix.leftCols<3>() * X + P.matrix.col(3);
  const double inv = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> J;
  for (int k = 0; k < 3; ++k) {
    J(0, k) = (P.matrix(0, k) - p.x() * inv * P.matrix(2, k)) * inv;
    J(1, k) = (P.matrix(1, k) - p.y() * inv * P.matrix(2, k)) * inv;
  }
  return J;
}

ad::Tensor project_points(const ad::Tensor& points, const ProjectionMatrix& P) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    fail(ErrorKind::DimensionMismatch, "project_points: expected [n,3], got " + ad::shape_str(points.shape()));
  }
  const std::size_t n = points.dim(0);
  const auto xd = points.data();
  std::vector<double> out(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto proj = project_point(P, Eigen::Vector3d(xd[3 * i], xd[3 * i + 1], xd[3 * i + 2]));
    out[2 * i] = proj.pixel.x();
    out[2 * i + 1] = proj.pixel.y();
  }
  bool rec = ad::should_record({&points});
  ad::Tensor y = ad::make_result({n, 2}, std::move(out), rec);
  if (rec) {
    ad::record("project_points", {&y}, [points, y, P, n]() {
      auto g = ad::upstream(y.impl());
      const auto xd = points.data();
      double* gx = ad::grad_target(points);
      for (std::size_t i = 0; i < n; ++i) {
        const auto J = project_jacobian(P, Eigen::Vector3d(xd[3 * i], xd[3 * i + 1], xd[3 * i + 2]));
        const Eigen::Vector3d gi = J.transpose() * Eigen::Vector2d(g[2 * i], g[2 * i + 1]);
        for (int k = 0; k < 3; ++k) gx[3 * i + k] += gi[k];
      }
    });
  }
  return y;
}

namespace {

// Resolves one axis; returns false when outside [0, n-1].
bool axis_stencil(double coord, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac) {
  const double max_coord = static_cast<double>(n - 1);
  if (!(coord >= 0.0 && coord <= max_coord)) return false;
  if (n == 1) {
    lo = hi = 0;
    frac = 0.0;
    return true;
  }
  std::size_t base = static_cast<std::size_t>(std::floor(coord));
  if (base > n - 2) base = n - 2;
  lo = base;
  hi = base + 1;
  frac = coord - static_cast<double>(base);
  return true;
}

}  // namespace

BilinearStencil bilinear_stencil(std::size_t height, std::size_t width, double scale, const Eigen::Vector2d& pixel) {
  BilinearStencil s;
  s.scale = scale;
  const double col = pixel.x() * scale - 0.5;
  const double row = pixel.y() * scale - 0.5;
  s.visible = axis_stencil(col, width, s.col0, s.col1, s.frac_col) &&
              axis_stencil(row, height, s.row0, s.row1, s.frac_row);
  if (ad::branch::recording()) {
    ad::branch::note(s.visible ? (s.row0 * 1000003ull + s.col0) : ~0ull);
  }
  return s;
}

Sampled bilinear_sample(const FeatureMap& map, const Eigen::Vector2d& pixel) {
  const std::size_t K = map.channels(), h = map.height(), w = map.width();
  Sampled out;
  out.features = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
  const auto s = bilinear_stencil(h, w, map.image_to_feature_scale, pixel);
  if (!s.visible) return out;
  out.visible = true;
  const auto d = map.data.data();
  for (std::size_t k = 0; k < K; ++k) {
    out.features[static_cast<Eigen::Index>(k)] = s.sample(d.data() + k * h * w, w);
  }
  return out;
}

io::Json calibration_to_json(const std::vector<CameraCalib>& cameras) {
  io::Json root;
  io::Json list = io::Json::array();
  for (const auto& c : cameras) {
    io::Json cam;
    cam["id"] = c.id;
    cam["K"] = io::matrix_to_json(c.intrinsics);
    cam["R"] = io::matrix_to_json(c.rotation);
    cam["t"] = io::vector_to_json(c.translation);
    cam["image_size"] = {c.width, c.height};
    list.push_back(std::move(cam));
  }
  root["cameras"] = std::move(list);
  return root;
}

std::vector<CameraCalib> calibration_from_json(const io::Json& json) {
  if (!json.is_object() || !json.contains("cameras") || !json["cameras"].is_array()) {
    fail(ErrorKind::Parse, "calibration: missing \"cameras\" array");
  }
  const auto& list = json["cameras"];
  if (list.empty()) fail(ErrorKind::Parse, "calibration: at least one camera required");
  std::vector<CameraCalib> cameras;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& cam = list[i];
    CameraCalib c;
    std::string name = "camera #" + std::to_string(i);
    if (!cam.is_object() || !cam.contains("id") || !cam["id"].is_string() || cam["id"].get<std::string>().empty()) {
      fail(ErrorKind::Parse, "calibration: " + name + ": missing camera id");
    }
    c.id = cam["id"].get<std::string>();
    name = "camera '" + c.id + "'";
    try {
      for (const char* key : {"K", "R", "t", "image_size"}) {
        if (!cam.contains(key)) fail(ErrorKind::Parse, std::string("missing field ") + key);
      }
      c.intrinsics = io::matrix_from_json(cam["K"], "K", 3, 3);
      c.rotation = io::matrix_from_json(cam["R"], "R", 3, 3);
      c.translation = io::vector_from_json(cam["t"], "t", 3);
      const auto& size = cam["image_size"];
      if (!size.is_array() || size.size() != 2 || !size[0].is_number_integer() || !size[1].is_number_integer()) {
        fail(ErrorKind::Parse, "image_size must be [width, height] integers");
      }
      c.width = size[0].get<int>();
      c.height = size[1].get<int>();
      validate_named(c, name, 1e-6);
    } catch (const Error& e) {
      const std::string msg = e.what();
      fail(ErrorKind::Parse, "calibration: " + (msg.rfind(name, 0) == 0 ? msg : name + ": " + msg));
    }
    cameras.push_back(std::move(c));
  }
  return cameras;
}

std::vector<CameraCalib> load_calibration(const std::filesystem::path& path) {
  return calibration_from_json(io::read_json_file(path));
}

void save_calibration(const std::vector<CameraCalib>& cameras, const std::filesystem::path& path) {
  io::write_json_file(path, calibration_to_json(cameras));
}

}  // namespace volagg::calib
