#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volagg/tensor.hpp"

namespace volagg::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

AdamState make_adam_state(std::span<const Tensor> params, const AdamConfig& config);

// Bias-corrected Adam update using each parameter's accumulated gradient.
void adam_step(std::span<Tensor> params, AdamState& state);

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise a seeded uniform sample of this many
  // coordinates drawn across all inputs.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckCoord {
  std::size_t input = 0;
  std::size_t index = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  GradCheckCoord worst;
  // Coordinates whose +-eps perturbation crossed a nondifferentiable branch.
  std::vector<GradCheckCoord> excluded;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a scalar function against central
// differences. The relative error of each coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
// Inputs are perturbed in place and restored; they must require gradients.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});

// Checkpoint encoding: {"name": {"shape": [...], "data": [...]}, ...} in insertion order.
nlohmann::ordered_json tensors_to_json(const NamedTensors& tensors);
NamedTensors tensors_from_json(const nlohmann::ordered_json& json);

}  // namespace volagg::ad
