#include "volagg/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "volagg/error.hpp"
#include "volagg/rng.hpp"

namespace volagg::synth {

namespace {

constexpr char kManifestFormat[] = "volagg-dataset";
constexpr int kManifestVersion = 1;

std::string sample_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu", index);
  return buf;
}

Eigen::Vector3d random_unit(Rng& rng) {
  while (true) {
    const Eigen::Vector3d v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double n = v.norm();
    if (n > 1e-3 && n <= 1.0) return v / n;
  }
}

bool inside(const Eigen::Vector2d& p, const calib::CameraCalib& c) {
  return p.x() >= 0.0 && p.x() <= c.width && p.y() >= 0.0 && p.y() <= c.height;
}

// One draw; returns nullopt when a keypoint leaves an image or the body
// reaches behind a camera.
std::optional<Sample> draw(const body::BodyModelDef& model, const std::vector<calib::CameraCalib>& rig,
                           const SampleOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.calibs = rig;
  s.gt_params_available = o.gt_params_available;
  s.gt_params = body::BodyParams::zeros(model.num_joints(), model.num_shape());
  for (Eigen::Index b = 0; b < s.gt_params.shape.size(); ++b) s.gt_params.shape[b] = rng.uniform(-1.0, 1.0);
  for (Eigen::Index j = 0; j < s.gt_params.pose.rows(); ++j) {
    const Eigen::Vector3d axis = random_unit(rng);
    s.gt_params.pose.row(j) = (rng.uniform() * o.pose_scale * axis).transpose();
  }
  const Eigen::Vector3d pelvis(rng.uniform(-o.pelvis_range_mm, o.pelvis_range_mm),
                               rng.uniform(-o.pelvis_range_mm, o.pelvis_range_mm),
                               rng.uniform(-o.pelvis_range_mm, o.pelvis_range_mm));

  const auto mesh = body::forward(model, s.gt_params);
  const Eigen::MatrixXd local = body::regress_keypoints(model, mesh.vertices);
  const Eigen::RowVector3d shift = pelvis.transpose() - local.row(model.root_keypoint);
  s.gt_keypoints3d = local.rowwise() + shift;

  for (const auto& cam : rig) {
    const auto P = calib::projection_matrix(cam);
    Eigen::MatrixXd px(s.gt_keypoints3d.rows(), 2);
    for (Eigen::Index k = 0; k < px.rows(); ++k) {
      const auto proj = calib::try_project(P, s.gt_keypoints3d.row(k).transpose());
      if (!proj || !inside(proj->pixel, cam)) return std::nullopt;
      px.row(k) = proj->pixel.transpose();
    }
    s.gt_keypoints2d.push_back(px);
  }
  for (std::size_t c = 0; c < rig.size(); ++c) {
    const Eigen::Vector2d root = s.gt_keypoints2d[c].row(model.root_keypoint).transpose();
    Eigen::Vector2d noisy = root;
    if (o.pixel_noise > 0.0) noisy += o.pixel_noise * Eigen::Vector2d(rng.normal(), rng.normal());
    s.pelvis_detections.push_back({rig[c].id, noisy, 1.0});
    s.input_blobs.push_back(
        render_feature_blobs(s.gt_keypoints2d[c], rig[c].width, rig[c].height, o.blob_sigma, o.blob_channels));
  }
  return s;
}

Eigen::MatrixXd rows_from_json(const io::Json& j, const std::string& what, Eigen::Index cols) {
  return io::matrix_from_json(j, what, -1, static_cast<int>(cols));
}

}  // namespace

std::vector<calib::CameraCalib> generate_rig(const RigOptions& o, std::uint64_t seed) {
  if (o.cameras < 1) fail(ErrorKind::InvalidInput, "generate_rig: at least one camera required");
  if (!(o.radius_mm > 0.0) || !(o.focal_px > 0.0) || o.width < 1 || o.height < 1) {
    fail(ErrorKind::InvalidInput, "generate_rig: radius, focal length and image size must be positive");
  }
  Rng rng(seed);
  std::vector<calib::CameraCalib> rig;
  const double step = 2.0 * std::numbers::pi / static_cast<double>(o.cameras);
  for (std::size_t c = 0; c < o.cameras; ++c) {
    const double az = step * static_cast<double>(c) + rng.uniform(-0.15, 0.15) * step;
    const Eigen::Vector3d eye(o.radius_mm * std::cos(az), o.radius_mm * std::sin(az), o.height_mm);
    rig.push_back(calib::look_at_camera("cam" + std::to_string(c), eye, Eigen::Vector3d::Zero(),
                                        Eigen::Vector3d::UnitZ(), o.focal_px, o.width, o.height));
  }
  return rig;
}

ad::Tensor render_feature_blobs(const Eigen::MatrixXd& kp, int width, int height, double sigma,
                                std::size_t channels) {
  if (channels < 1) fail(ErrorKind::InvalidInput, "render_feature_blobs: at least one channel required");
  if (!(sigma > 0.0) || width < 1 || height < 1 || kp.cols() != 2) {
    fail(ErrorKind::InvalidInput, "render_feature_blobs: need sigma > 0, positive image size and [J',2] keypoints");
  }
  const auto W = static_cast<std::size_t>(width), H = static_cast<std::size_t>(height);
  std::vector<double> out(channels * H * W, 0.0);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Eigen::Index j = 0; j < kp.rows(); ++j) {
    double* plane = out.data() + (static_cast<std::size_t>(j) % channels) * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      const double dy = static_cast<double>(y) + 0.5 - kp(j, 1);
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - kp(j, 0);
        plane[y * W + x] += std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
  }
  return ad::Tensor({channels, H, W}, std::move(out));
}

Sample generate_sample(const body::BodyModelDef& model, const std::vector<calib::CameraCalib>& rig,
                       const SampleOptions& options, std::uint64_t seed, const std::string& id) {
  if (rig.empty()) fail(ErrorKind::InvalidInput, "generate_sample: empty rig");
  for (const auto& c : rig) calib::validate(c, 1e-9);
  if (options.pose_scale < 0.0 || options.pixel_noise < 0.0 || options.pelvis_range_mm < 0.0) {
    fail(ErrorKind::InvalidInput, "generate_sample: pose scale, noise and pelvis range must be >= 0");
  }
  for (int attempt = 0; attempt < options.max_attempts; ++attempt) {
    auto s = draw(model, rig, options, attempt == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    if (s) {
      s->id = id;
      return std::move(*s);
    }
  }
  fail(ErrorKind::RetryExhausted, "generate_sample: keypoints left the images in " +
                                      std::to_string(options.max_attempts) + " consecutive draws");
}

io::Json dataset_options_to_json(const DatasetOptions& o) {
  io::Json j;
  j["count"] = o.count;
  j["seed"] = o.seed;
  j["model"] = o.model;
  j["cameras"] = o.rig.cameras;
  j["radius_mm"] = o.rig.radius_mm;
  j["height_mm"] = o.rig.height_mm;
  j["focal_px"] = o.rig.focal_px;
  j["image_size"] = {o.rig.width, o.rig.height};
  j["pose_scale"] = o.sample.pose_scale;
  j["pixel_noise"] = o.sample.pixel_noise;
  j["pelvis_range_mm"] = o.sample.pelvis_range_mm;
  j["blob_sigma"] = o.sample.blob_sigma;
  j["blob_channels"] = o.sample.blob_channels;
  j["gt_params_available"] = o.sample.gt_params_available;
  return j;
}

DatasetOptions dataset_options_from_json(const io::Json& j) {
  try {
    DatasetOptions o;
    o.count = j.at("count").get<std::size_t>();
    o.seed = j.at("seed").get<std::uint64_t>();
    o.model = j.at("model").get<std::string>();
    o.rig.cameras = j.at("cameras").get<std::size_t>();
    o.rig.radius_mm = j.at("radius_mm").get<double>();
    o.rig.height_mm = j.at("height_mm").get<double>();
    o.rig.focal_px = j.at("focal_px").get<double>();
    o.rig.width = j.at("image_size").at(0).get<int>();
    o.rig.height = j.at("image_size").at(1).get<int>();
    o.sample.pose_scale = j.at("pose_scale").get<double>();
    o.sample.pixel_noise = j.at("pixel_noise").get<double>();
    o.sample.pelvis_range_mm = j.at("pelvis_range_mm").get<double>();
    o.sample.blob_sigma = j.at("blob_sigma").get<double>();
    o.sample.blob_channels = j.at("blob_channels").get<std::size_t>();
    o.sample.gt_params_available = j.at("gt_params_available").get<bool>();
    return o;
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Parse, std::string("dataset manifest: ") + e.what());
  }
}

io::Json sample_to_json(const Sample& s, const std::string& rig_file, const std::string& blob_file) {
  io::Json j;
  j["id"] = s.id;
  j["rig"] = rig_file;
  j["gt_params_available"] = s.gt_params_available;
  j["gt_params"] = body::params_to_json(s.gt_params);
  j["gt_keypoints3d"] = io::matrix_to_json(s.gt_keypoints3d);
  io::Json kp2d = io::Json::object();
  for (std::size_t c = 0; c < s.calibs.size(); ++c) kp2d[s.calibs[c].id] = io::matrix_to_json(s.gt_keypoints2d[c]);
  j["gt_keypoints2d"] = std::move(kp2d);
  io::Json dets = io::Json::array();
  for (const auto& d : s.pelvis_detections) {
    dets.push_back({{"camera_id", d.camera_id}, {"point", io::vector_to_json(d.point)}, {"confidence", d.confidence}});
  }
  j["pelvis_detections"] = std::move(dets);
  j["blobs"] = blob_file;
  return j;
}

Dataset generate_dataset(const DatasetOptions& o, const std::filesystem::path& dir) {
  if (o.count < 1) fail(ErrorKind::InvalidInput, "dataset: count must be >= 1");
  const auto model = body::resolve_model(o.model);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());

  Dataset ds;
  ds.root = dir;
  ds.options = o;
  ds.rig = generate_rig(o.rig, derive_seed(o.seed, 0));
  calib::save_calibration(ds.rig, dir / "rig.json");
  io::Json files = io::Json::array();
  for (std::size_t i = 0; i < o.count; ++i) {
    const std::string stem = sample_stem(i);
    Sample s = generate_sample(model, ds.rig, o.sample, derive_seed(o.seed, 1 + i), stem);
    std::vector<double> flat;
    for (const auto& b : s.input_blobs) flat.insert(flat.end(), b.data().begin(), b.data().end());
    const auto& b0 = s.input_blobs.front();
    io::write_blob_file(dir / (stem + ".blobs.bin"), {s.input_blobs.size(), b0.dim(0), b0.dim(1), b0.dim(2)}, flat);
    io::write_json_file(dir / (stem + ".json"), sample_to_json(s, "rig.json", stem + ".blobs.bin"));
    files.push_back(stem + ".json");
    ds.samples.push_back(std::move(s));
  }
  io::Json manifest;
  manifest["format"] = kManifestFormat;
  manifest["version"] = kManifestVersion;
  manifest["rig"] = "rig.json";
  manifest["options"] = dataset_options_to_json(o);
  manifest["samples"] = std::move(files);
  io::write_json_file(dir / "manifest.json", manifest);
  return ds;
}

namespace {

Sample parse_sample(const std::filesystem::path& file, const std::string& shared_rig_file,
                    const std::vector<calib::CameraCalib>& shared_rig) {
  const auto dir = file.parent_path();
  const auto j = io::read_json_file(file);
  const std::string name = file.filename().string();
  try {
    Sample s;
    s.id = j.at("id").get<std::string>();
    const auto rig_file = j.at("rig").get<std::string>();
    s.calibs = rig_file == shared_rig_file ? shared_rig : calib::load_calibration(dir / rig_file);
    s.gt_params_available = j.at("gt_params_available").get<bool>();
    s.gt_params = body::params_from_json(j.at("gt_params"));
    s.gt_keypoints3d = rows_from_json(j.at("gt_keypoints3d"), "gt_keypoints3d", 3);
    for (const auto& cam : s.calibs) {
      if (!j.at("gt_keypoints2d").contains(cam.id)) fail(ErrorKind::Parse, "missing gt_keypoints2d for camera '" + cam.id + "'");
      s.gt_keypoints2d.push_back(rows_from_json(j["gt_keypoints2d"][cam.id], "gt_keypoints2d", 2));
    }
    for (const auto& d : j.at("pelvis_detections")) {
      s.pelvis_detections.push_back({d.at("camera_id").get<std::string>(), io::vector_from_json(d.at("point"), "point", 2),
                                     d.at("confidence").get<double>()});
    }
    ad::Shape shape;
    const auto blobs = io::read_blob_file(dir / j.at("blobs").get<std::string>(), shape);
    if (shape.size() != 4 || shape[0] != s.calibs.size()) {
      fail(ErrorKind::Parse, "blob tensor shape " + ad::shape_str(shape) + " does not match the camera count");
    }
    const std::size_t per = shape[1] * shape[2] * shape[3];
    for (std::size_t c = 0; c < shape[0]; ++c) {
      s.input_blobs.emplace_back(ad::Shape{shape[1], shape[2], shape[3]},
                                 std::vector<double>(blobs.begin() + static_cast<std::ptrdiff_t>(c * per),
                                                     blobs.begin() + static_cast<std::ptrdiff_t>((c + 1) * per)));
    }
    return s;
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Parse, "dataset: " + name + ": " + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Io) throw;
    fail(ErrorKind::Parse, "dataset: " + name + ": " + e.what());
  }
}

}  // namespace

Sample load_sample(const std::filesystem::path& file) { return parse_sample(file, {}, {}); }

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = io::read_json_file(dir / "manifest.json");
  if (!manifest.contains("format") || manifest["format"] != kManifestFormat) {
    fail(ErrorKind::Parse, "dataset: " + (dir / "manifest.json").string() + " is not a dataset manifest");
  }
  if (manifest.value("version", 0) != kManifestVersion) fail(ErrorKind::Parse, "dataset: unsupported manifest version");
  Dataset ds;
  ds.root = dir;
  ds.options = dataset_options_from_json(manifest.at("options"));
  const auto rig_file = manifest.at("rig").get<std::string>();
  ds.rig = calib::load_calibration(dir / rig_file);
  if (!manifest.contains("samples") || !manifest["samples"].is_array()) fail(ErrorKind::Parse, "dataset: missing samples list");
  for (const auto& entry : manifest["samples"]) ds.samples.push_back(parse_sample(dir / entry.get<std::string>(), rig_file, ds.rig));
  return ds;
}

}  // namespace volagg::synth
