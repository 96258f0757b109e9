#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "volagg/checks.hpp"
#include "volagg/error.hpp"

using namespace volagg;
using namespace volagg::checks;

namespace {

Reference sample_reference() {
  Reference r;
  r.triangulation_seed = 3;
  r.triangulation_trials = 40;
  r.triangulation_noise_px = 1.0;
  r.triangulation_median_mm = 2.5;
  r.overfit_seed = 1;
  r.overfit_steps = 2000;
  r.overfit_mpjpe_mm = 3.5;
  r.overfit_step10_average = 11000.0;
  r.overfit_final_total = 9.0;
  return r;
}

}  // namespace

TEST_CASE("gradient registry covers ops, loss terms and the end-to-end loss") {
  std::set<std::string> names, groups;
  for (const auto& c : gradient_cases()) {
    CHECK(names.insert(c.name).second);
    groups.insert(c.group);
  }
  CHECK(groups == std::set<std::string>{"op", "loss", "end-to-end"});
  for (const char* required : {"backproject", "aggregate_softmax", "conv3d", "group_norm", "project_points",
                               "body_forward", "pose_prior_gmm", "shape_prior", "loss_smpl_params",
                               "pipeline_total_loss_with_params", "pipeline_total_loss_without_params"}) {
    CHECK_MESSAGE(names.count(required) == 1, required);
  }
}

TEST_CASE("gradient suite passes on a few seeds and is deterministic") {
  std::size_t reported = 0;
  const auto a = run_gradient_suite(99, 2, 1e-4, [&](const GradSummary&) { ++reported; });
  const auto b = run_gradient_suite(99, 2);
  REQUIRE(a.size() == gradient_cases().size());
  CHECK(reported == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK_MESSAGE(a[i].passed, a[i].name);
    CHECK(a[i].seeds == 2);
    CHECK(a[i].checked > 0);
    CHECK(a[i].max_rel_error == b[i].max_rel_error);
  }
}

TEST_CASE("a tolerance of zero fails the suite") {
  const auto s = run_gradient_suite(1, 1, 0.0);
  CHECK(std::any_of(s.begin(), s.end(), [](const GradSummary& g) { return !g.passed; }));
}

TEST_CASE("triangulation study is seeded and millimetre-accurate at 1 px") {
  const auto a = triangulation_monte_carlo(5, 200, 1.0);
  const auto b = triangulation_monte_carlo(5, 200, 1.0);
  CHECK(a.median_mm == b.median_mm);
  CHECK(a.trials == 200);
  CHECK(a.median_mm > 0.0);
  CHECK(a.median_mm < 15.0);
  CHECK(a.median_mm <= a.p90_mm);
  CHECK(a.p90_mm <= a.max_mm);
  // Without noise the recovery is exact to rounding.
  CHECK(triangulation_monte_carlo(5, 50, 0.0).max_mm < 1e-6);
  CHECK_THROWS_AS(triangulation_monte_carlo(5, 0, 1.0), Error);
}

TEST_CASE("reference values round-trip through JSON") {
  const auto r = sample_reference();
  const auto back = reference_from_json(reference_to_json(r));
  CHECK(reference_to_json(back) == reference_to_json(r));
  auto j = reference_to_json(r);
  j["overfit"].erase("mpjpe_mm");
  try {
    reference_from_json(j);
    FAIL("missing key accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    CHECK(std::string(e.what()).find("reference values") == 0);
  }
}

TEST_CASE("committed reference file loads") {
  const auto r = load_reference(std::filesystem::path(VOLAGG_SOURCE_DIR) / "tests" / "fixtures" / "reference.json");
  CHECK(r.triangulation_trials == 500);
  CHECK(r.triangulation_noise_px == 1.0);
  CHECK(r.overfit_steps == 2000);
  CHECK(r.overfit_mpjpe_mm > 0.0);
  CHECK(r.overfit_final_total <= r.overfit_step10_average / 10.0);
}

TEST_CASE("fast fixtures all pass and every module is covered") {
  const auto work = std::filesystem::temp_directory_path() / "volagg_test_checks";
  std::filesystem::remove_all(work);
  auto ref = sample_reference();
  // Recompute the triangulation value so the fixture compares like with like.
  ref.triangulation_median_mm = triangulation_monte_carlo(ref.triangulation_seed, ref.triangulation_trials, 1.0).median_mm;
  const auto fixtures = selftest_fixtures(ref, work);
  std::set<std::string> modules, names;
  std::size_t slow = 0;
  for (const auto& f : fixtures) {
    modules.insert(f.module);
    CHECK_MESSAGE(names.insert(f.module + "/" + f.name).second, f.name);
    if (f.slow) {
      ++slow;
      continue;
    }
    const auto o = run_fixture(f);
    CHECK_MESSAGE(o.passed, std::string(f.module + ": " + f.name + ": " + o.detail));
  }
  CHECK(slow == 2);
  for (const char* m : {"calib", "bodymodel", "geom", "volume", "tensor", "net", "loss", "metrics", "synth", "train"}) {
    CHECK_MESSAGE(modules.count(m) == 1, m);
  }
}

TEST_CASE("run_fixture turns exceptions into failures") {
  const Fixture throwing{"x", "throws", false, []() -> Outcome { fail(ErrorKind::Config, "bad setting"); }};
  const auto o = run_fixture(throwing);
  CHECK_FALSE(o.passed);
  CHECK(o.detail == "unexpected ConfigError: bad setting");
}
