#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ttd/errors.hpp"

namespace ttd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of `Real` with optional gradient storage.
///
/// A Tensor is a shared handle: copies alias the same buffer, which is what
/// lets the tape write gradients back into parameters. Use clone() for a
/// deep copy. The shape is fixed at construction.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>(std::move(shape), std::move(data), requires_grad)) {
    for (auto d : impl_->shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(impl_->shape));
    }
    if (shape_numel(impl_->shape) != impl_->data.size()) {
      throw DimensionError("shape " + shape_str(impl_->shape) + " does not match " +
                           std::to_string(impl_->data.size()) + " elements");
    }
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real{0}), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  static Tensor scalar(Real value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  [[nodiscard]] std::size_t numel() const { return impl_->data.size(); }

  [[nodiscard]] std::span<const Real> data() const { return impl_->data; }
  // Tensors are handles: constness applies to the handle, not the storage,
  // so backward closures can accumulate into captured copies.
  [[nodiscard]] std::span<Real> mutable_data() const { return impl_->data; }
  [[nodiscard]] Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  Real operator[](std::size_t i) const { return impl_->data[i]; }

  [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  [[nodiscard]] bool has_grad() const { return !impl_->grad.empty(); }
  [[nodiscard]] std::span<const Real> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access.
  [[nodiscard]] std::span<Real> mutable_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), Real{0});
    return impl_->grad;
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), Real{0}); }
  void drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  [[nodiscard]] Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  /// True when both handles share one buffer.
  [[nodiscard]] bool aliases(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Impl(Shape s, std::vector<Real> d, bool rg) : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {}
    const Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad;
  };
  std::shared_ptr<Impl> impl_;
};

/// Records differentiable operations in execution order and replays their
/// backward rules in reverse. One tape belongs to one training step and is
/// not thread-safe. A non-recording tape turns every op into a plain forward
/// computation.
template <class Real>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  [[nodiscard]] bool recording() const noexcept { return recording_; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// True when an op over `inputs` must be recorded.
  template <class... Ts>
  [[nodiscard]] bool wants(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  /// Registers `output` as produced from `inputs`. The backward rule reads
  /// output.grad() and accumulates into the inputs' gradients.
  void record(std::vector<Tensor<Real>> inputs, Tensor<Real>& output, std::function<void()> backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
  }

  void backward(Tensor<Real> loss) {
    if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (nodes_.empty()) throw ContractError("backward() on an empty tape");
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor requiring grad");
    loss.mutable_grad()[0] += Real{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor<Real>> inputs;
    Tensor<Real> output;
    std::function<void()> backward;
  };
  bool recording_;
  std::vector<Node> nodes_;
};

}  // namespace ttd
