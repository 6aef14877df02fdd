#include "fambav/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "fambav/errors.hpp"

namespace fambav {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
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

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return full(Shape{}, value);
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_vector: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  Buffer<T> buf(values.begin(), values.end());
  return from_buffer(std::move(shape), std::move(buf));
}

template <typename T>
Tensor<T> Tensor<T>::from_buffer(Shape shape, Buffer<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_buffer: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::size(std::ptrdiff_t axis) const {
  const Shape& s = shape();
  return s[normalize_axis(axis, s.size())];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw IndexError("at(): expected " + std::to_string(s.size()) + " indices");
  }
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) {
      throw IndexError("at(): index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of " + shape_str(s));
    }
    offset = offset * s[axis] + i;
    ++axis;
  }
  return node_->value[offset];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return {node_->grad.data(), node_->grad.size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  auto& g = node_->ensure_grad();
  return {g.data(), g.size()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) Buffer<T>().swap(node_->grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape();
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<detail::NodePtr<T>> inputs,
                     detail::NodePtr<T> output, std::function<void()> backward) {
  output->requires_grad = true;
  entries_.push_back(Entry{std::string(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& root = loss.node();
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == root; });
  if (!on_tape && !root->requires_grad) {
    throw ContractError("backward: loss is not on the tape");
  }
  root->ensure_grad()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
    // Interior gradients are dead once propagated.
    if (it->output != root) Buffer<T>().swap(it->output->grad);
  }
  entries_.clear();
}

namespace {

template <typename T>
Tape<T>*& tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() noexcept {
  return tape_slot<T>();
}

template <typename T>
GradScope<T>::GradScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
GradScope<T>::~GradScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(tape_slot<T>()) {
  tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

#define FAMBAV_INSTANTIATE(T)                          \
  template class Tensor<T>;                            \
  template class Tape<T>;                              \
  template class GradScope<T>;                         \
  template class NoGradScope<T>;                       \
  template Tape<T>* active_tape<T>() noexcept;         \
  template void backward<T>(const Tensor<T>&);

FAMBAV_INSTANTIATE(float)
FAMBAV_INSTANTIATE(double)

#undef FAMBAV_INSTANTIATE

}  // namespace fambav
