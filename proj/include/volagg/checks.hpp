#pragma once

// Registries shared by the `gradcheck` and `selftest` commands and the
// acceptance runner: gradient cases for every differentiable op, each loss
// term and the end-to-end loss; worked-example fixtures for every module; and
// the two recorded studies (triangulation Monte-Carlo and the toy overfit).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "volagg/json_util.hpp"
#include "volagg/optim.hpp"
#include "volagg/train.hpp"

namespace volagg::checks {

struct GradCase {
  std::string name;
  std::string group;  // "op", "loss" or "end-to-end"
  std::function<ad::GradCheckResult(std::uint64_t seed)> run;
};

std::vector<GradCase> gradient_cases();

struct GradSummary {
  std::string name;
  std::string group;
  std::size_t seeds = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Runs every case for `seeds_per_case` seeds derived from `seed`. A case passes
// when every seed stays within `tolerance` and at least one coordinate was
// checked.
std::vector<GradSummary> run_gradient_suite(std::uint64_t seed, std::size_t seeds_per_case = 20,
                                            double tolerance = 1e-4,
                                            const std::function<void(const GradSummary&)>& on_case = {});

// Triangulation noise study: 4 cameras on a 3 m ring at f = 1150 px, the point
// drawn uniformly within +-300 mm of the origin, Gaussian pixel noise.
struct TriangulationStudy {
  std::size_t trials = 0;
  double noise_px = 0.0;
  double median_mm = 0.0;
  double p90_mm = 0.0;
  double max_mm = 0.0;
};

TriangulationStudy triangulation_monte_carlo(std::uint64_t seed, std::size_t trials = 500, double noise_px = 1.0);

// Toy overfit: 16 synthetic frames, 4 cameras, L = 8, K = 8, default run
// config, trained from `seed`. The dataset is written under `work_dir`.
struct OverfitStudy {
  std::size_t steps = 0;
  double step10_average = 0.0;  // mean total over steps 1..10
  double final_total = 0.0;     // total at the last step
  double initial_mpjpe_mm = 0.0;
  double mpjpe_mm = 0.0;        // training set, through the full pipeline
  std::vector<train::TraceRow> trace;
};

OverfitStudy toy_overfit(std::uint64_t seed, const std::filesystem::path& work_dir, std::size_t steps = 2000);

// Reference values recorded from committed-seed runs (reference.json).
struct Reference {
  std::uint64_t triangulation_seed = 0;
  std::size_t triangulation_trials = 0;
  double triangulation_noise_px = 0.0;
  double triangulation_median_mm = 0.0;
  std::uint64_t overfit_seed = 0;
  std::size_t overfit_steps = 0;
  double overfit_mpjpe_mm = 0.0;
  double overfit_step10_average = 0.0;
  double overfit_final_total = 0.0;
};

io::Json reference_to_json(const Reference& reference);
Reference reference_from_json(const io::Json& json);
Reference load_reference(const std::filesystem::path& path);

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Fixture {
  std::string module;
  std::string name;
  bool slow = false;
  std::function<Outcome()> run;
};

// Worked examples and oracle comparisons for every module. Fixtures that
// compare against recorded values read them from `reference`; scratch files
// go under `work_dir`.
std::vector<Fixture> selftest_fixtures(const Reference& reference, const std::filesystem::path& work_dir);

// Runs one fixture, turning exceptions into failures.
Outcome run_fixture(const Fixture& fixture);

}  // namespace volagg::checks
