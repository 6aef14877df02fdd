#pragma once

#include <string>
#include <vector>

#include "fambav/rng.hpp"
#include "fambav/tensor.hpp"

namespace fambav {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // decoupled weight decay applies
};

/// Parameters in declaration order; checkpoints serialize in this order.
template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  t.set_requires_grad();
  return t;
}

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(stddev * rng.normal());
  t.set_requires_grad();
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t = Tensor<T>::full(std::move(shape), value);
  t.set_requires_grad();
  return t;
}

}  // namespace fambav
