#include "volagg/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "volagg/error.hpp"
#include "volagg/geom.hpp"

namespace volagg::metrics {

namespace {

constexpr double kAlignmentRoundoffMm = 1e-9;

void check_shapes(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const char* op) {
  if (pred.rows() != gt.rows() || pred.cols() != 3 || gt.cols() != 3 || pred.rows() == 0) {
    std::ostringstream os;
    os << op << ": prediction [" << pred.rows() << "," << pred.cols() << "] vs ground truth [" << gt.rows() << ","
       << gt.cols() << "]";
    fail(ErrorKind::DimensionMismatch, os.str());
  }
}

void check_root(const Eigen::MatrixXd& pred, std::size_t root_index) {
  if (static_cast<Eigen::Index>(root_index) >= pred.rows()) {
    fail(ErrorKind::InvalidInput, "root index " + std::to_string(root_index) + " out of range");
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(Align align) {
  switch (align) {
    case Align::None: return "none";
    case Align::Root: return "root";
    case Align::Procrustes: return "procrustes";
  }
  return "procrustes";
}

Align align_from_string(const std::string& name) {
  if (name == "none") return Align::None;
  if (name == "root") return Align::Root;
  if (name == "procrustes") return Align::Procrustes;
  fail(ErrorKind::InvalidInput, "unknown alignment \"" + name + "\" (expected none, root or procrustes)");
}

Eigen::VectorXd joint_distances(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Align align,
                                std::size_t root_index) {
  check_shapes(pred, gt, "joint_distances");
  switch (align) {
    case Align::None:
      return (pred - gt).rowwise().norm();
    case Align::Root: {
      check_root(pred, root_index);
      const auto r = static_cast<Eigen::Index>(root_index);
      const Eigen::MatrixXd p = pred.rowwise() - pred.row(r);
      const Eigen::MatrixXd g = gt.rowwise() - gt.row(r);
      return (p - g).rowwise().norm();
    }
    case Align::Procrustes: {
      const auto a = geom::procrustes_align(pred, gt);
      Eigen::VectorXd d = (a.aligned - gt).rowwise().norm();
      // Alignment round-off on an exact match would otherwise fail the
      // zero-millimeter PCK threshold.
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (d[i] <= kAlignmentRoundoffMm) d[i] = 0.0;
      }
      return d;
    }
  }
  return {};
}

double mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, std::size_t root_index) {
  check_shapes(pred, gt, "mpjpe");
  return joint_distances(pred, gt, Align::Root, root_index).mean();
}

double pa_mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt) {
  check_shapes(pred, gt, "pa_mpjpe");
  return joint_distances(pred, gt, Align::Procrustes).mean();
}

double pck_from_distances(const Eigen::VectorXd& distances, double threshold_mm) {
  if (distances.size() == 0) return 0.0;
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < distances.size(); ++i) {
    if (distances[i] <= threshold_mm) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(distances.size());
}

double auc_from_distances(const Eigen::VectorXd& distances, const std::vector<double>& thresholds_mm) {
  if (thresholds_mm.empty()) fail(ErrorKind::InvalidInput, "auc: empty threshold grid");
  double total = 0.0;
  for (double t : thresholds_mm) total += pck_from_distances(distances, t);
  return total / static_cast<double>(thresholds_mm.size());
}

double pck(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double threshold_mm, Align align,
           std::size_t root_index) {
  return pck_from_distances(joint_distances(pred, gt, align, root_index), threshold_mm);
}

double auc(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Align align, std::size_t root_index) {
  return auc_from_distances(joint_distances(pred, gt, align, root_index), threshold_grid());
}

std::vector<double> threshold_grid(double max_mm, double step_mm) {
  if (!(step_mm > 0.0) || !(max_mm >= 0.0)) fail(ErrorKind::InvalidInput, "threshold grid needs step > 0 and max >= 0");
  std::vector<double> grid;
  // Integer multiples avoid accumulated drift: 150/5 gives exactly 31 points.
  const auto n = static_cast<long>(max_mm / step_mm + 1e-9);
  for (long i = 0; i <= n; ++i) grid.push_back(static_cast<double>(i) * step_mm);
  return grid;
}

FrameResult evaluate_frame(const std::string& sample_id, const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt,
                           const EvalOptions& options) {
  check_shapes(pred, gt, "evaluate_frame");
  FrameResult r;
  r.sample_id = sample_id;
  r.mpjpe_mm = mpjpe(pred, gt, options.root_index);
  const Eigen::VectorXd pa = joint_distances(pred, gt, Align::Procrustes);
  r.pa_mpjpe_mm = pa.mean();
  const Eigen::VectorXd d =
      options.align == Align::Procrustes ? pa : joint_distances(pred, gt, options.align, options.root_index);
  r.pck = pck_from_distances(d, options.pck_threshold_mm);
  r.auc = auc_from_distances(d, options.thresholds_mm);
  return r;
}

EvalReport summarize(std::vector<FrameResult> frames, std::size_t joint_count, const EvalOptions& options) {
  EvalReport rep;
  rep.joint_count = joint_count;
  rep.pck_threshold_mm = options.pck_threshold_mm;
  rep.thresholds_mm = options.thresholds_mm;
  rep.align = options.align;
  if (!frames.empty()) {
    for (const auto& f : frames) {
      rep.mpjpe_mm += f.mpjpe_mm;
      rep.pa_mpjpe_mm += f.pa_mpjpe_mm;
      rep.pck += f.pck;
      rep.auc += f.auc;
    }
    const double n = static_cast<double>(frames.size());
    rep.mpjpe_mm /= n;
    rep.pa_mpjpe_mm /= n;
    rep.pck /= n;
    rep.auc /= n;
  }
  rep.per_frame = std::move(frames);
  return rep;
}

io::Json report_to_json(const EvalReport& r) {
  io::Json j;
  j["mpjpe_mm"] = r.mpjpe_mm;
  j["pa_mpjpe_mm"] = r.pa_mpjpe_mm;
  j["pck"] = r.pck;
  j["auc"] = r.auc;
  j["joint_count"] = r.joint_count;
  j["frame_count"] = r.per_frame.size();
  j["alignment"] = to_string(r.align);
  j["pck_threshold_mm"] = r.pck_threshold_mm;
  j["thresholds_mm"] = r.thresholds_mm;
  io::Json frames = io::Json::array();
  for (const auto& f : r.per_frame) {
    io::Json fj;
    fj["sample_id"] = f.sample_id;
    fj["mpjpe_mm"] = f.mpjpe_mm;
    fj["pa_mpjpe_mm"] = f.pa_mpjpe_mm;
    fj["pck"] = f.pck;
    fj["auc"] = f.auc;
    frames.push_back(std::move(fj));
  }
  j["per_frame"] = std::move(frames);
  return j;
}

EvalReport report_from_json(const io::Json& j) {
  try {
    EvalReport r;
    r.mpjpe_mm = j.at("mpjpe_mm").get<double>();
    r.pa_mpjpe_mm = j.at("pa_mpjpe_mm").get<double>();
    r.pck = j.at("pck").get<double>();
    r.auc = j.at("auc").get<double>();
    r.joint_count = j.at("joint_count").get<std::size_t>();
    r.align = align_from_string(j.at("alignment").get<std::string>());
    r.pck_threshold_mm = j.at("pck_threshold_mm").get<double>();
    r.thresholds_mm = j.at("thresholds_mm").get<std::vector<double>>();
    for (const auto& fj : j.at("per_frame")) {
      FrameResult f;
      f.sample_id = fj.at("sample_id").get<std::string>();
      f.mpjpe_mm = fj.at("mpjpe_mm").get<double>();
      f.pa_mpjpe_mm = fj.at("pa_mpjpe_mm").get<double>();
      f.pck = fj.at("pck").get<double>();
      f.auc = fj.at("auc").get<double>();
      r.per_frame.push_back(std::move(f));
    }
    return r;
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::Parse, std::string("eval report: ") + e.what());
  }
}

std::string report_to_csv(const EvalReport& r) {
  std::string out = "sample_id,mpjpe_mm,pa_mpjpe_mm,pck,auc\n";
  for (const auto& f : r.per_frame) {
    out += f.sample_id + "," + fmt(f.mpjpe_mm) + "," + fmt(f.pa_mpjpe_mm) + "," + fmt(f.pck) + "," + fmt(f.auc) + "\n";
  }
  return out;
}

void write_report(const EvalReport& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path) {
  io::write_json_file(json_path, report_to_json(report));
  io::write_text_file(csv_path, report_to_csv(report));
}

}  // namespace volagg::metrics
