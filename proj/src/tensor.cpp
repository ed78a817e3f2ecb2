// SPDX-License-Identifier: Apache-2.0

#include "letlab/tensor.hpp"

#include <atomic>
#include <cstring>
#include <sstream>

namespace letlab {

namespace {

std::atomic<NodeId> next_node_id{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad) {
  if (letlab::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(Shape shape, const std::vector<double>& data, bool requires_grad)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = letlab::numel(shape);
  return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = letlab::numel(shape);
  return Tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, Buffer{value}, requires_grad); }

Tensor Tensor::of(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return Tensor(std::move(shape), Buffer(values), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("tensor: access to undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return data().size(); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw Error("tensor: access to undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw Error("tensor: access to undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw Error("tensor: access to undefined tensor");
  impl_->requires_grad = value;
}

NodeId Tensor::id() const { return impl_ ? impl_->id : 0; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward) {
  index_.emplace(output.id(), entries_.size());
  entries_.push_back(Entry{op, std::move(inputs), output, std::move(backward)});
}

void Tape::clear() {
  entries_.clear();
  index_.clear();
}

GradientMap Tape::backward(const Tensor& loss) const {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!contains(loss.id())) {
    throw Error("backward: loss was not recorded on this tape (detached or from another tape)");
  }
  GradientMap grads;
  grads.buffer(loss.id(), 1)[0] = 1.0;
  std::size_t last = index_.at(loss.id());
  for (std::size_t i = last + 1; i-- > 0;) {
    const Entry& e = entries_[i];
    const auto* gout = grads.find(e.output.id());
    if (gout == nullptr) continue;
    std::vector<std::span<double>> gin;
    gin.reserve(e.inputs.size());
    for (const auto& in : e.inputs) {
      if (in.requires_grad()) {
        gin.push_back(grads.buffer(in.id(), in.numel()));
      } else {
        gin.emplace_back();
      }
    }
    e.backward(BackwardContext(e.inputs, e.output, *gout, std::move(gin)));
  }
  return grads;
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }

TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

Tensor GradientMap::of(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), it->second);
}

std::span<double> GradientMap::buffer(NodeId id, std::size_t size) {
  auto [it, inserted] = grads_.try_emplace(id);
  if (inserted) it->second.assign(size, 0.0);
  return it->second;
}

const Buffer* GradientMap::find(NodeId id) const {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

GradientMap backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw Error("backward: no active tape");
  return tape->backward(loss);
}

bool all_finite(std::span<const double> values) {
  // Exponent-field test so the scan vectorizes.
  std::uint64_t bad = 0;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    bad |= static_cast<std::uint64_t>(((bits >> 52) & 0x7ffu) == 0x7ffu);
  }
  return bad == 0;
}

Tensor emit(std::string_view op, Shape shape, Buffer values, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!all_finite(values)) {
    throw NumericalError(std::string(op) + ": non-finite output for shape " + shape_str(shape));
  }
  Tape* tape = active_tape();
  bool track = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  Tensor out(std::move(shape), std::move(values), track);
  if (track) tape->record(op, std::move(inputs), out, std::move(fn));
  return out;
}

}  // namespace letlab
