// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode tape.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace letlab {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

template <typename T, std::size_t Alignment = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Alignment>;
  };

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Alignment>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Alignment})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Alignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U, Alignment>&) const noexcept {
    return true;
  }
};

/// Tensor and gradient storage. Every buffer starts on a 64-byte boundary,
/// so vectorized reductions see the same layout on every run.
using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a forward op or a loss produces NaN/Inf.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor of(Shape shape, std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access. Only the optimizer and test fixtures write through this,
  /// and only between forward passes.
  std::span<double> mutable_data();

  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  /// Marks a leaf as trainable (or frozen). Not meaningful for op outputs.
  void set_requires_grad(bool value);
  NodeId id() const;

  /// Same values, new identity, never tracked.
  Tensor detach() const;

 private:
  struct Impl {
    Shape shape;
    Buffer data;
    bool requires_grad = false;
    NodeId id = 0;
  };
  std::shared_ptr<Impl> impl_;
};

class GradientMap;

/// Handed to a backward closure: the upstream gradient plus lazily
/// allocated accumulation buffers for each input that needs a gradient.
class BackwardContext {
 public:
  BackwardContext(const std::vector<Tensor>& inputs, const Tensor& output, std::span<const double> grad_out,
                  std::vector<std::span<double>> grad_in)
      : inputs_(inputs), output_(output), grad_out_(grad_out), grad_in_(std::move(grad_in)) {}

  const Tensor& input(std::size_t i) const { return inputs_[i]; }
  const Tensor& output() const { return output_; }
  std::span<const double> grad_out() const { return grad_out_; }
  bool needs(std::size_t input) const { return !grad_in_[input].empty(); }
  std::span<double> grad_in(std::size_t input) const { return grad_in_[input]; }

 private:
  const std::vector<Tensor>& inputs_;
  const Tensor& output_;
  std::span<const double> grad_out_;
  std::vector<std::span<double>> grad_in_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Ordered record of primitive operations. Entries are appended in execution
/// order, so inputs always precede the ops that consume them.
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward);
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool contains(NodeId id) const { return index_.contains(id); }
  void clear();

  /// Reverse sweep from a scalar recorded on this tape. The tape is left
  /// untouched, so repeated calls give identical results.
  GradientMap backward(const Tensor& loss) const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<NodeId, std::size_t> index_;
};

/// Installs a tape as the thread's active tape for its lifetime.
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

class GradientMap {
 public:
  /// Gradient for `t`; zeros when `t` never influenced the loss.
  Tensor of(const Tensor& t) const;
  bool contains(const Tensor& t) const { return grads_.contains(t.id()); }
  std::span<double> buffer(NodeId id, std::size_t size);
  const Buffer* find(NodeId id) const;

 private:
  std::unordered_map<NodeId, Buffer> grads_;
};

/// Backward through the active tape.
GradientMap backward(const Tensor& loss);

/// Wraps freshly computed values as the result of primitive `op`: rejects
/// non-finite values, then records `fn` on the active tape if any input
/// requires a gradient. Building block for every differentiable op.
Tensor emit(std::string_view op, Shape shape, Buffer values, std::vector<Tensor> inputs, BackwardFn fn);

bool all_finite(std::span<const double> values);

}  // namespace letlab
