#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// A Tape becomes active for the current thread through TapeScope. While a
// tape is active, every op whose inputs require gradients appends a backward
// rule to it; with no active tape ops run in plain evaluation mode and their
// results never require gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace volagg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Direct write access. Only meant for leaves (optimizers, finite differences).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // Gradient accumulated by the last backward pass; all zeros if untouched.
  std::span<const double> grad() const;
  void zero_grad();

  Tensor detach() const;

  const detail::ImplPtr& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view op, std::vector<detail::ImplPtr> outputs, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays recorded rules in reverse order.
  // Throws Autodiff for a non-scalar loss, a loss that is not on the tape, or
  // a second call without reset().
  void backward(const Tensor& loss);

  void reset();
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  std::vector<std::string> op_names() const;

 private:
  struct Entry {
    std::string op;
    std::vector<detail::ImplPtr> outputs;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the current thread within its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Helpers for op implementers.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);
Tensor make_result(Shape shape, std::vector<double> data, bool recorded);
void record(std::string_view op, std::initializer_list<const Tensor*> outputs, Tape::BackwardFn fn);

// Gradient of a recorded output, or an empty span when nothing flowed into it.
std::span<const double> upstream(const detail::ImplPtr& output);
// Accumulation target for an input, or nullptr when the input takes no gradient.
double* grad_target(const Tensor& input);

// Branch fingerprints: ops with a nondifferentiable decision (relu sign,
// argmin, ...) report it here. Finite-difference checks compare fingerprints
// to spot perturbations that cross a kink.
namespace branch {
bool recording();
void note(std::uint64_t decision);

class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;
  std::uint64_t fingerprint() const;

 private:
  bool previous_active_;
  std::uint64_t previous_hash_;
};
}  // namespace branch

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

}  // namespace volagg::ad
