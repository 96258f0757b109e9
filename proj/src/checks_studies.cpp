#include <algorithm>
#include <cmath>

#include "volagg/checks.hpp"
#include "volagg/error.hpp"
#include "volagg/geom.hpp"
#include "volagg/rng.hpp"
#include "volagg/synth.hpp"

namespace volagg::checks {

TriangulationStudy triangulation_monte_carlo(std::uint64_t seed, std::size_t trials, double noise_px) {
  if (trials == 0) fail(ErrorKind::InvalidInput, "triangulation study: trials must be positive");
  synth::RigOptions ro;
  ro.cameras = 4;
  ro.radius_mm = 3000.0;
  ro.height_mm = 300.0;
  ro.focal_px = 1150.0;
  ro.width = 1000;
  ro.height = 1000;
  const auto rig = synth::generate_rig(ro, derive_seed(seed, 0));
  std::vector<calib::ProjectionMatrix> Ps;
  for (const auto& c : rig) Ps.push_back(calib::projection_matrix(c));

  Rng rng(derive_seed(seed, 1));
  std::vector<double> errors;
  errors.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    const Eigen::Vector3d X(rng.uniform(-300, 300), rng.uniform(-300, 300), rng.uniform(-300, 300));
    std::vector<geom::Detection2D> det;
    for (const auto& P : Ps) {
      Eigen::Vector2d px = calib::project_point(P, X).pixel;
      px.x() += noise_px * rng.normal();
      px.y() += noise_px * rng.normal();
      det.push_back({P.source_id, px, 1.0});
    }
    errors.push_back((geom::triangulate_dlt(det, Ps) - X).norm());
  }
  std::sort(errors.begin(), errors.end());
  const std::size_t n = errors.size();
  TriangulationStudy s;
  s.trials = n;
  s.noise_px = noise_px;
  s.median_mm = n % 2 == 1 ? errors[n / 2] : 0.5 * (errors[n / 2 - 1] + errors[n / 2]);
  s.p90_mm = errors[std::min(n - 1, (9 * n) / 10)];
  s.max_mm = errors.back();
  return s;
}

OverfitStudy toy_overfit(std::uint64_t seed, const std::filesystem::path& work_dir, std::size_t steps) {
  synth::DatasetOptions dopts;
  dopts.count = 16;
  dopts.seed = seed;
  const auto data = synth::generate_dataset(dopts, work_dir / "data");
  const auto model = body::resolve_model(dopts.model);
  const auto prior = loss::resolve_prior("builtin:toy", model);

  train::RunConfig cfg;
  cfg.net.volume = {2500.0, 8, 8};
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.train_data = work_dir / "data";

  OverfitStudy s;
  s.steps = steps;
  train::Checkpoint init;
  init.model = cfg.model;
  init.model_joints = model.num_joints();
  init.model_shape = model.num_shape();
  init.model_keypoints = model.num_keypoints();
  init.net = cfg.net;
  init.weights = net::init_weights(cfg.net, model, derive_seed(cfg.seed, 0));
  s.initial_mpjpe_mm = train::evaluate(init, data, model).mpjpe_mm;

  auto result = train::train(cfg, data, model, prior, {work_dir / "run", {}});
  s.trace = std::move(result.trace);
  const std::size_t head = std::min<std::size_t>(10, s.trace.size());
  for (std::size_t i = 0; i < head; ++i) s.step10_average += s.trace[i].total / static_cast<double>(head);
  if (!s.trace.empty()) s.final_total = s.trace.back().total;
  s.mpjpe_mm = train::evaluate(result.checkpoint, data, model).mpjpe_mm;
  return s;
}

io::Json reference_to_json(const Reference& r) {
  io::Json j;
  j["triangulation"] = {{"seed", r.triangulation_seed},
                        {"trials", r.triangulation_trials},
                        {"noise_px", r.triangulation_noise_px},
                        {"median_mm", r.triangulation_median_mm}};
  j["overfit"] = {{"seed", r.overfit_seed},
                  {"steps", r.overfit_steps},
                  {"mpjpe_mm", r.overfit_mpjpe_mm},
                  {"step10_average", r.overfit_step10_average},
                  {"final_total", r.overfit_final_total}};
  return j;
}

Reference reference_from_json(const io::Json& j) {
  Reference r;
  try {
    const auto& t = j.at("triangulation");
    r.triangulation_seed = t.at("seed").get<std::uint64_t>();
    r.triangulation_trials = t.at("trials").get<std::size_t>();
    r.triangulation_noise_px = t.at("noise_px").get<double>();
    r.triangulation_median_mm = t.at("median_mm").get<double>();
    const auto& o = j.at("overfit");
    r.overfit_seed = o.at("seed").get<std::uint64_t>();
    r.overfit_steps = o.at("steps").get<std::size_t>();
    r.overfit_mpjpe_mm = o.at("mpjpe_mm").get<double>();
    r.overfit_step10_average = o.at("step10_average").get<double>();
    r.overfit_final_total = o.at("final_total").get<double>();
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Parse, std::string("reference values: ") + e.what());
  }
  return r;
}

Reference load_reference(const std::filesystem::path& path) { return reference_from_json(io::read_json_file(path)); }

}  // namespace volagg::checks
