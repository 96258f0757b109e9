// volagg: command-line entry point (synth, train, eval, infer, gradcheck,
// selftest). Exit codes: 0 ok, 1 runtime failure, 2 invalid input or config.
// Failures print one line to stderr:  error: kind=<Kind> message="<text>"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "volagg/checks.hpp"
#include "volagg/error.hpp"
#include "volagg/synth.hpp"
#include "volagg/train.hpp"

#ifndef VOLAGG_REFERENCE_FILE
#define VOLAGG_REFERENCE_FILE "tests/fixtures/reference.json"
#endif

namespace fs = std::filesystem;
using namespace volagg;

namespace {

std::string quoted(const std::string& text) {
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

int report_error(std::string_view kind, const std::string& message, int code) {
  std::cerr << "error: kind=" << kind << " message=" << quoted(message) << "\n";
  return code;
}

struct SynthArgs {
  fs::path out;
  std::size_t samples = 16;
  std::size_t cameras = 4;
  std::uint64_t seed = 0;
  double noise_px = 1.0;
  bool with_theta_gt = true;
};

int run_synth(const SynthArgs& a) {
  synth::DatasetOptions o;
  o.count = a.samples;
  o.rig.cameras = a.cameras;
  o.seed = a.seed;
  o.sample.pixel_noise = a.noise_px;
  o.sample.gt_params_available = a.with_theta_gt;
  const auto ds = synth::generate_dataset(o, a.out);
  std::cout << "wrote " << ds.samples.size() << " samples with " << ds.rig.size() << " cameras to " << a.out.string()
            << "\n";
  return 0;
}

struct TrainArgs {
  fs::path config;
  fs::path out;
};

int run_train(const TrainArgs& a) {
  const auto cfg = train::load_run_config(a.config);
  const auto res = train::run_training(cfg, a.out);
  if (!res.trace.empty()) {
    const auto& last = res.trace.back();
    std::cout << "step " << last.step << " total " << last.total << "\n";
  }
  std::cout << "wrote " << (a.out / "checkpoint.json").string() << " and " << (a.out / "loss_trace.csv").string() << "\n";
  return 0;
}

train::Checkpoint load_checked_checkpoint(const fs::path& path, body::BodyModelDef& model) {
  auto ck = train::load_checkpoint(path);
  model = body::resolve_model(ck.model);
  train::check_model_dims(ck, model);
  return ck;
}

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  double pck_threshold_mm = 150.0;
  bool oracle = false;
};

int run_eval(const EvalArgs& a) {
  body::BodyModelDef model;
  const auto ck = load_checked_checkpoint(a.checkpoint, model);
  const auto data = synth::load_dataset(a.data);
  train::EvalSettings s;
  s.metrics.pck_threshold_mm = a.pck_threshold_mm;
  s.oracle = a.oracle;
  const auto rep = train::evaluate(ck, data, model, s);
  fs::path csv = a.out;
  csv.replace_extension(".csv");
  metrics::write_report(rep, a.out, csv);
  std::printf("MPJPE %.3f mm  PA-MPJPE %.3f mm  PCK %.4f  AUC %.4f  (%zu frames)\n", rep.mpjpe_mm, rep.pa_mpjpe_mm, rep.pck,
              rep.auc, rep.per_frame.size());
  return 0;
}

struct InferArgs {
  fs::path checkpoint;
  fs::path sample;
  fs::path out;
};

int run_infer(const InferArgs& a) {
  body::BodyModelDef model;
  const auto ck = load_checked_checkpoint(a.checkpoint, model);
  const auto sample = synth::load_sample(a.sample);
  io::write_json_file(a.out, train::inference_to_json(train::infer(ck, sample, model)));
  std::cout << "wrote " << a.out.string() << "\n";
  return 0;
}

struct GradArgs {
  std::uint64_t seed = 0;
  std::size_t seeds_per_case = 20;
};

int run_gradcheck(const GradArgs& a) {
  std::size_t failed = 0;
  std::printf("%-34s %-10s %6s %8s %9s %12s  %s\n", "case", "group", "seeds", "checked", "excluded", "max_rel_err",
              "result");
  checks::run_gradient_suite(a.seed, a.seeds_per_case, 1e-4, [&](const checks::GradSummary& s) {
    if (!s.passed) ++failed;
    std::printf("%-34s %-10s %6zu %8zu %9zu %12.3e  %s\n", s.name.c_str(), s.group.c_str(), s.seeds, s.checked,
                s.excluded, s.max_rel_error, s.passed ? "PASS" : "FAIL");
    std::fflush(stdout);
  });
  if (failed != 0) fail(ErrorKind::NumericalFailure, std::to_string(failed) + " gradient case(s) exceed 1e-4");
  std::printf("all gradient cases within 1e-4\n");
  return 0;
}

struct SelftestArgs {
  fs::path reference = VOLAGG_REFERENCE_FILE;
  fs::path work;
  bool quick = false;
  std::string module;
};

int run_selftest(const SelftestArgs& a) {
  const auto ref = checks::load_reference(a.reference);
  const fs::path work = a.work.empty() ? fs::temp_directory_path() / "volagg_selftest" : a.work;
  fs::remove_all(work);
  std::size_t passed = 0, failed = 0, skipped = 0;
  std::printf("%-10s %-66s %-6s %s\n", "module", "fixture", "result", "detail");
  for (const auto& f : checks::selftest_fixtures(ref, work)) {
    if ((a.quick && f.slow) || (!a.module.empty() && f.module != a.module)) {
      ++skipped;
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto o = checks::run_fixture(f);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (o.passed ? passed : failed) += 1;
    std::printf("%-10s %-66s %-6s %s%s(%.2fs)\n", f.module.c_str(), f.name.c_str(), o.passed ? "PASS" : "FAIL",
                o.detail.c_str(), o.detail.empty() ? "" : " ", secs);
    std::fflush(stdout);
  }
  std::printf("%zu passed, %zu failed, %zu skipped\n", passed, failed, skipped);
  if (failed != 0) fail(ErrorKind::NumericalFailure, std::to_string(failed) + " selftest fixture(s) failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volagg: learnable volumetric aggregation for multi-view body pose and shape"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic multi-view dataset");
  synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();
  synth_cmd->add_option("--samples", synth_args.samples, "Number of samples")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--cameras", synth_args.cameras, "Number of cameras")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth_args.seed, "Random seed");
  synth_cmd->add_option("--noise-px", synth_args.noise_px, "Pelvis detection noise sigma in pixels")
      ->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--with-theta-gt", synth_args.with_theta_gt, "Store ground-truth body parameters as labels");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train from a JSON run configuration");
  train_cmd->add_option("--config", train_args.config, "Run configuration file")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory for the checkpoint and loss trace")->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "Dataset directory")->required();
  eval_cmd->add_option("--out", eval_args.out, "Report JSON file; a .csv with per-frame rows is written next to it")
      ->required();
  eval_cmd->add_option("--pck-threshold", eval_args.pck_threshold_mm, "PCK threshold in mm")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_flag("--oracle", eval_args.oracle, "Score the ground truth against itself");

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "Predict body parameters and keypoints for one sample");
  infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--sample", infer_args.sample, "Sample JSON file inside a dataset directory")->required();
  infer_cmd->add_option("--out", infer_args.out, "Output JSON file")->required();

  GradArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and central-difference gradients");
  grad_cmd->add_option("--seed", grad_args.seed, "Base random seed");
  grad_cmd->add_option("--seeds-per-case", grad_args.seeds_per_case, "Random draws per case")
      ->check(CLI::PositiveNumber);

  SelftestArgs self_args;
  auto* self_cmd = app.add_subcommand("selftest", "Run the worked-example fixtures and print a pass/fail table");
  self_cmd->add_option("--reference", self_args.reference, "Recorded reference values");
  self_cmd->add_option("--work", self_args.work, "Scratch directory (default: a temporary directory)");
  self_cmd->add_flag("--quick", self_args.quick, "Skip the slow fixtures (gradient suite, toy overfit)");
  self_cmd->add_option("--module", self_args.module, "Run only the fixtures of one module");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    return report_error(to_string(ErrorKind::InvalidInput), e.what(), 2);
  }

  try {
    if (*synth_cmd) return run_synth(synth_args);
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*infer_cmd) return run_infer(infer_args);
    if (*grad_cmd) return run_gradcheck(grad_args);
    if (*self_cmd) return run_selftest(self_args);
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), e.what(), is_input_error(e.kind()) ? 2 : 1);
  } catch (const std::exception& e) {
    return report_error("Internal", e.what(), 1);
  }
  return 1;
}
