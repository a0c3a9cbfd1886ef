#include "cmemd/parameters.hpp"

#include <algorithm>
#include <cmath>

namespace cmemd {

void zero_grads(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) std::fill(p.grad, p.grad + p.size(), 0.0);
}

Eigen::MatrixXd glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-s, s);
  Eigen::MatrixXd m(rows, cols);
  // Row-major fill order keeps the draw sequence independent of storage order.
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

}  // namespace cmemd
