#include "volagg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "volagg/error.hpp"

namespace volagg::ad {

AdamState make_adam_state(std::span<const Tensor> params, const AdamConfig& config) {
  AdamState state;
  state.config = config;
  for (auto& p : params) {
    state.m.emplace_back(p.size(), 0.0);
    state.v.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (params.size() != state.m.size()) {
    fail(ErrorKind::DimensionMismatch, "adam: " + std::to_string(params.size()) + " parameters but state holds " +
                                           std::to_string(state.m.size()));
  }
  const auto& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].mutable_data();
    auto grad = params[p].grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != data.size()) {
      fail(ErrorKind::DimensionMismatch, "adam: parameter " + std::to_string(p) + " changed size");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

namespace {

struct Evaluation {
  double value;
  std::uint64_t fingerprint;
};

Evaluation evaluate_plain(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  NoGradScope no_grad;
  branch::Recorder recorder;
  Tensor y = f(inputs);
  return {y.item(), recorder.fingerprint()};
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) fail(ErrorKind::Autodiff, "grad_check: every input must require gradients");
  }
  std::vector<Tensor> work = inputs;
  for (auto& t : work) t.zero_grad();
  {
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = f(work);
    }
    if (y.size() != 1) fail(ErrorKind::Autodiff, "grad_check: function must be scalar-valued");
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : work) analytic.emplace_back(t.grad().begin(), t.grad().end());

  std::vector<GradCheckCoord> coords;
  for (std::size_t i = 0; i < work.size(); ++i)
    for (std::size_t j = 0; j < work[i].size(); ++j) coords.push_back({i, j});
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end(), [](const GradCheckCoord& a, const GradCheckCoord& b) {
      return a.input != b.input ? a.input < b.input : a.index < b.index;
    });
  }

  const std::uint64_t base_fp = evaluate_plain(f, work).fingerprint;
  GradCheckResult result;
  for (const auto& c : coords) {
    auto data = work[c.input].mutable_data();
    const double original = data[c.index];
    data[c.index] = original + options.eps;
    const Evaluation plus = evaluate_plain(f, work);
    data[c.index] = original - options.eps;
    const Evaluation minus = evaluate_plain(f, work);
    data[c.index] = original;
    if (plus.fingerprint != base_fp || minus.fingerprint != base_fp) {
      result.excluded.push_back(c);
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
    const double a = analytic[c.input][c.index];
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    const double err = std::abs(a - numeric) / denom;
    ++result.checked;
    if (err > result.max_rel_error || std::isnan(err)) {
      result.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      result.worst = c;
    }
  }
  return result;
}

nlohmann::ordered_json tensors_to_json(const NamedTensors& tensors) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json entry;
    entry["shape"] = t.shape();
    entry["data"] = std::vector<double>(t.data().begin(), t.data().end());
    out[name] = std::move(entry);
  }
  return out;
}

NamedTensors tensors_from_json(const nlohmann::ordered_json& json) {
  if (!json.is_object()) fail(ErrorKind::Parse, "checkpoint: parameter table must be an object");
  NamedTensors out;
  for (auto it = json.begin(); it != json.end(); ++it) {
    try {
      auto shape = it.value().at("shape").get<Shape>();
      auto data = it.value().at("data").get<std::vector<double>>();
      out.emplace_back(it.key(), Tensor(std::move(shape), std::move(data)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Parse, "checkpoint: parameter '" + it.key() + "': " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::Parse, "checkpoint: parameter '" + it.key() + "': " + e.what());
    }
  }
  return out;
}

}  // namespace volagg::ad
