#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dhn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Buffer = Eigen::ArrayXd;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  Buffer values;
  Buffer grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::int64_t node_id = -1;
};
}  // namespace detail

/// Gradient slots handed to a backward rule: one per op input, null when that
/// input does not require a gradient.
using GradSlots = std::span<Buffer* const>;

struct BackwardFn {
  std::function<void(const Buffer& grad_out, GradSlots grad_in)> fn;
};

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage; a Tensor is a handle. Parameters are leaf tensors with
/// requires_grad set, and every op recorded on the active Tape produces a new
/// tensor whose gradient is filled in by backward().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, Buffer values, bool requires_grad = false);

  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Index dim(int axis) const;
  Index numel() const { return impl_->values.size(); }

  const Buffer& values() const { return impl_->values; }
  /// Mutable access for initialisation and optimiser updates. Never mutate a
  /// tensor that is still referenced by a recorded op.
  Buffer& mutable_values() { return impl_->values; }
  double item() const;
  double operator[](Index flat) const { return impl_->values[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return impl_->grad.size() == impl_->values.size(); }
  const Buffer& grad() const { return impl_->grad; }
  /// Gradient buffer, zero-allocated on first access.
  Buffer& grad_buffer();
  void zero_grad();

  std::int64_t node_id() const { return impl_->node_id; }

  /// Value copy that is not connected to any tape.
  Tensor detach() const;
  /// Same storage, different shape (no tape entry). Used for leaves only.
  Tensor view_as(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
  friend Tensor record_op(std::string, Shape, Buffer, std::vector<Tensor>, BackwardFn);
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  BackwardFn backward;
};

/// Define-by-run record of differentiable ops for one training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { clear(); }

  std::int64_t append(TapeNode node);
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear();

 private:
  std::vector<TapeNode> nodes_;
};

/// Makes `tape` the recording target for ops issued on this thread until the
/// scope ends. Without an active tape ops run in inference mode.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Creates the output of an op. The op is recorded on the active tape when one
/// exists and at least one input requires a gradient.
Tensor record_op(std::string op, Shape shape, Buffer values, std::vector<Tensor> inputs,
                 BackwardFn backward);

/// Reverse sweep from a scalar loss. Gradients accumulate into every reachable
/// tensor with requires_grad; the tape is cleared afterwards.
void backward(Tape& tape, const Tensor& loss);

}  // namespace dhn
