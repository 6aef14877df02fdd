#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fambav/memory.hpp"

namespace fambav {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
/// Resolves a possibly negative axis against a rank; throws DimensionError when out of range.
std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

/// Dense row-major array with optional participation in the active gradient tape.
///
/// Copies share storage. Values are treated as immutable once an op has consumed
/// them; only leaves (parameters, inputs) are written through `mutable_data`.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  static Tensor from_vector(Shape shape, std::vector<T> values);
  static Tensor from_buffer(Shape shape, Buffer<T> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::ptrdiff_t axis) const;
  std::size_t numel() const { return node_ ? node_->value.size() : 0; }
  std::size_t nbytes() const { return numel() * sizeof(T); }

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  /// Element access by full multi-index (tests and diagnostics).
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Copy of the values without tape history.
  Tensor detach() const;

  const detail::NodePtr<T>& node() const noexcept { return node_; }
  explicit Tensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

 private:
  detail::NodePtr<T> node_;
};

/// Ordered record of differentiable operations executed while the tape is active.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<detail::NodePtr<T>> inputs;
    detail::NodePtr<T> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<detail::NodePtr<T>> inputs,
              detail::NodePtr<T> output, std::function<void()> backward);

  /// Propagates d(loss)/d(node) to every grad-enabled node in exact reverse
  /// recording order, then clears the tape. Leaf grads accumulate.
  void backward(const Tensor<T>& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <typename T>
class GradScope {
 public:
  explicit GradScope(Tape<T>& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (evaluation passes).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape() noexcept;

/// Backward pass on the active tape; throws ContractError when none is active.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

/// True when there is an active tape and at least one input wants a gradient.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(Shape shape) {
  return Tensor<T>::zeros(std::move(shape));
}

}  // namespace detail

}  // namespace fambav
