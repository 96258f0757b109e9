#include "volagg/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "volagg/error.hpp"

namespace volagg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::Parse: return "ParseError";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::PointBehindCamera: return "PointBehindCamera";
    case ErrorKind::InsufficientViews: return "InsufficientViews";
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::DegenerateAlignment: return "DegenerateAlignment";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::RetryExhausted: return "RetryExhausted";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::Autodiff: return "AutodiffError";
    case ErrorKind::Io: return "IoError";
  }
  return "Unknown";
}

bool is_input_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput:
    case ErrorKind::Parse:
    case ErrorKind::DimensionMismatch:
    case ErrorKind::ConfigMismatch:
    case ErrorKind::Config:
      return true;
    default:
      return false;
  }
}

}  // namespace volagg

namespace volagg::ad {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_branch_active = false;
thread_local std::uint64_t g_branch_hash = 0;
constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    fail(ErrorKind::DimensionMismatch, "tensor: shape " + shape_str(shape) + " holds " +
                                           std::to_string(numel(shape)) + " values, got " +
                                           std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty{0};
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    fail(ErrorKind::DimensionMismatch,
         "tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::size() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::DimensionMismatch, "tensor: item() on shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= size()) fail(ErrorKind::DimensionMismatch, "tensor: index out of range");
  return impl_->data[i];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (impl_) impl_->requires_grad = value;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data, false);
}

void Tape::record(std::string_view op, std::vector<detail::ImplPtr> outputs, BackwardFn backward) {
  if (consumed_) fail(ErrorKind::Autodiff, "tape: record after backward without reset");
  entries_.push_back(Entry{std::string(op), std::move(outputs), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) fail(ErrorKind::Autodiff, "tape: backward called twice without reset");
  if (!loss.defined() || loss.size() != 1) {
    fail(ErrorKind::Autodiff, "tape: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) fail(ErrorKind::Autodiff, "tape: loss is not on the tape");
  consumed_ = true;

  for (auto& e : entries_) {
    for (auto& out : e.outputs) out->grad.assign(out->data.size(), 0.0);
  }
  loss.impl()->ensure_grad()[0] = 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    bool reached = false;
    for (auto& out : it->outputs) {
      if (std::any_of(out->grad.begin(), out->grad.end(), [](double g) { return g != 0.0; })) {
        reached = true;
        break;
      }
    }
    if (reached) it->backward();
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (auto& e : entries_) names.push_back(e.op);
  return names;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (auto* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(std::span<const Tensor> inputs) {
  if (!g_active_tape) return false;
  for (auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data, bool recorded) {
  return Tensor(std::move(shape), std::move(data), recorded);
}

void record(std::string_view op, std::initializer_list<const Tensor*> outputs, Tape::BackwardFn fn) {
  std::vector<detail::ImplPtr> impls;
  for (auto* t : outputs) impls.push_back(t->impl());
  g_active_tape->record(op, std::move(impls), std::move(fn));
}

std::span<const double> upstream(const detail::ImplPtr& output) { return output->grad; }

double* grad_target(const Tensor& input) {
  if (!input.requires_grad()) return nullptr;
  return input.impl()->ensure_grad().data();
}

namespace branch {

bool recording() { return g_branch_active; }

void note(std::uint64_t decision) {
  if (!g_branch_active) return;
  g_branch_hash = (g_branch_hash ^ (decision + 0x9e3779b97f4a7c15ull)) * kFnvPrime;
}

Recorder::Recorder() : previous_active_(g_branch_active), previous_hash_(g_branch_hash) {
  g_branch_active = true;
  g_branch_hash = kFnvOffset;
}

Recorder::~Recorder() {
  g_branch_active = previous_active_;
  g_branch_hash = previous_hash_;
}

std::uint64_t Recorder::fingerprint() const { return g_branch_hash; }

}  // namespace branch

}  // namespace volagg::ad
