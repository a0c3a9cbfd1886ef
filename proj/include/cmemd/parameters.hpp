#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace cmemd {

// Non-owning view of a named, checkpointed array (column-major storage).
struct StateRef {
  std::string name;
  double* value = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
};

// A trainable array with its gradient accumulator of the same shape.
struct ParamRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  StateRef state() const { return {name, value, rows, cols}; }
};

template <class A, class B>
ParamRef param_ref(std::string name, Eigen::PlainObjectBase<A>& value, Eigen::PlainObjectBase<B>& grad) {
  return {std::move(name), value.data(), grad.data(), value.rows(), value.cols()};
}

template <class A>
StateRef state_ref(std::string name, Eigen::PlainObjectBase<A>& value) {
  return {std::move(name), value.data(), value.rows(), value.cols()};
}

void zero_grads(const std::vector<ParamRef>& params);

// Uniform in [-s, s] with s = sqrt(6 / (fan_in + fan_out)); fan_in = cols.
Eigen::MatrixXd glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);

}  // namespace cmemd
