// Re-records tests/fixtures/reference.json from the committed seeds:
//   record_reference <out.json> [work_dir]
// Run it only when the triangulation or training code changes on purpose.

#include <cstdio>
#include <filesystem>

#include "volagg/checks.hpp"
#include "volagg/error.hpp"

using namespace volagg;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: record_reference <out.json> [work_dir]\n");
    return 2;
  }
  const std::filesystem::path out = argv[1];
  const std::filesystem::path work =
      argc > 2 ? std::filesystem::path(argv[2]) : std::filesystem::temp_directory_path() / "volagg_record";
  try {
    checks::Reference r;
    r.triangulation_seed = 2024;
    r.triangulation_trials = 500;
    r.triangulation_noise_px = 1.0;
    const auto tri = checks::triangulation_monte_carlo(r.triangulation_seed, r.triangulation_trials, r.triangulation_noise_px);
    r.triangulation_median_mm = tri.median_mm;
    std::printf("triangulation: median %.4f mm, p90 %.4f mm, max %.4f mm\n", tri.median_mm, tri.p90_mm, tri.max_mm);

    r.overfit_seed = 1;
    r.overfit_steps = 2000;
    std::filesystem::remove_all(work);
    const auto fit = checks::toy_overfit(r.overfit_seed, work, r.overfit_steps);
    r.overfit_mpjpe_mm = fit.mpjpe_mm;
    r.overfit_step10_average = fit.step10_average;
    r.overfit_final_total = fit.final_total;
    std::printf("overfit: step-10 average %.4f, final %.4f, MPJPE %.4f mm (initial %.4f mm)\n", fit.step10_average,
                fit.final_total, fit.mpjpe_mm, fit.initial_mpjpe_mm);

    io::write_json_file(out, checks::reference_to_json(r));
    std::printf("wrote %s\n", out.string().c_str());
  } catch (const Error& e) {
    std::fprintf(stderr, "error: kind=%s message=\"%s\"\n", std::string(to_string(e.kind())).c_str(), e.what());
    return 1;
  }
  return 0;
}
