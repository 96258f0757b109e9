#pragma once

// Evaluation metrics: MPJPE, Procrustes-aligned MPJPE, PCK and AUC.

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/json_util.hpp"

namespace volagg::metrics {

// Alignment applied before PCK/AUC distances are measured.
enum class Align { None, Root, Procrustes };

std::string to_string(Align align);
Align align_from_string(const std::string& name);

// Root-relative mean joint distance.
double mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, std::size_t root_index);

// Mean joint distance after the least-squares similarity alignment of pred
// onto gt. Throws DegenerateAlignment.
double pa_mpjpe(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt);

// Per-joint distances after alignment.
Eigen::VectorXd joint_distances(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Align align,
                                std::size_t root_index = 0);

// Fraction of distances <= threshold.
double pck_from_distances(const Eigen::VectorXd& distances, double threshold_mm);
double auc_from_distances(const Eigen::VectorXd& distances, const std::vector<double>& thresholds_mm);

double pck(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double threshold_mm = 150.0,
           Align align = Align::Procrustes, std::size_t root_index = 0);
double auc(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, Align align = Align::Procrustes,
           std::size_t root_index = 0);

// 0, step, 2*step, ..., max (inclusive): 31 points for the defaults.
std::vector<double> threshold_grid(double max_mm = 150.0, double step_mm = 5.0);

struct EvalOptions {
  std::size_t root_index = 0;
  double pck_threshold_mm = 150.0;
  std::vector<double> thresholds_mm = threshold_grid();
  Align align = Align::Procrustes;
};

struct FrameResult {
  std::string sample_id;
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pck = 0.0;
  double auc = 0.0;
};

struct EvalReport {
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  std::size_t joint_count = 0;
  double pck_threshold_mm = 150.0;
  std::vector<double> thresholds_mm;
  Align align = Align::Procrustes;
  std::vector<FrameResult> per_frame;
};

FrameResult evaluate_frame(const std::string& sample_id, const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt,
                           const EvalOptions& options);

// Dataset aggregates are means of the per-frame values, in input order.
EvalReport summarize(std::vector<FrameResult> frames, std::size_t joint_count, const EvalOptions& options);

io::Json report_to_json(const EvalReport& report);
EvalReport report_from_json(const io::Json& json);
// sample_id,mpjpe_mm,pa_mpjpe_mm,pck,auc
std::string report_to_csv(const EvalReport& report);
void write_report(const EvalReport& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path);

}  // namespace volagg::metrics
