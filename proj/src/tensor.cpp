#include "dhn/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace dhn {

namespace {
thread_local Tape* g_active_tape = nullptr;

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
  for (Index extent : shape) {
    if (extent < 1) throw std::invalid_argument("tensor extents must be >= 1, got " + shape_str(shape));
  }
}
}  // namespace

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  validate_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->values = Buffer::Constant(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Buffer values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor of shape " + shape_str(shape) + " cannot hold " +
                                std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Buffer buf(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) buf[i++] = v;
  return Tensor(std::move(shape), std::move(buf), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, value, requires_grad); }

Index Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw std::out_of_range("axis out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->values[0];
}

Buffer& Tensor::grad_buffer() {
  if (!has_grad()) impl_->grad = Buffer::Zero(impl_->values.size());
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) impl_->grad.setZero();
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

Tensor Tensor::view_as(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("view_as: cannot view " + shape_str(this->shape()) + " as " + shape_str(shape));
  }
  validate_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>(*impl_);
  impl->shape = std::move(shape);
  impl->node_id = -1;
  return Tensor(std::move(impl));
}

std::int64_t Tape::append(TapeNode node) {
  const auto id = static_cast<std::int64_t>(nodes_.size());
  node.output->node_id = id;
  nodes_.push_back(std::move(node));
  return id;
}

void Tape::clear() {
  for (auto& node : nodes_) node.output->node_id = -1;
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tensor record_op(std::string op, Shape shape, Buffer values, std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values), false);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;

  out.set_requires_grad(true);
  TapeNode node;
  node.op = std::move(op);
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.impl());
  node.output = out.impl();
  node.backward = std::move(backward);
  tape->append(std::move(node));
  return out;
}

void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto id = loss.node_id();
  if (id < 0 || static_cast<std::size_t>(id) >= tape.size() || tape.nodes()[static_cast<std::size_t>(id)].output != loss.impl()) {
    throw std::invalid_argument("backward: loss was not recorded on this tape");
  }
  auto& loss_impl = *loss.impl();
  if (loss_impl.grad.size() != 1) loss_impl.grad = Buffer::Zero(1);
  loss_impl.grad[0] += 1.0;

  std::vector<Buffer*> slots;
  const auto& nodes = tape.nodes();
  for (auto i = static_cast<std::int64_t>(id); i >= 0; --i) {
    const TapeNode& node = nodes[static_cast<std::size_t>(i)];
    if (node.output->grad.size() == 0) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k];
      if (!in.requires_grad) continue;
      if (in.grad.size() != in.values.size()) in.grad = Buffer::Zero(in.values.size());
      slots[k] = &in.grad;
    }
    node.backward.fn(node.output->grad, GradSlots(slots.data(), slots.size()));
  }
  tape.clear();
}

}  // namespace dhn
