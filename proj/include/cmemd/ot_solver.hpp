#pragma once

#include "cmemd/core_math.hpp"

#include <optional>
#include <vector>

namespace cmemd {

// A point of the probability simplex: strictly positive entries summing to 1.
class MarginalWeights {
 public:
  static MarginalWeights uniform(Eigen::Index n);
  // Validates positivity and unit mass (within 1e-9).
  static MarginalWeights from(Vector weights);

  const Vector& weights() const { return weights_; }
  Eigen::Index size() const { return weights_.size(); }

 private:
  explicit MarginalWeights(Vector w) : weights_(std::move(w)) {}
  Vector weights_;
};

struct SinkhornConfig {
  double epsilon = 0.1;
  int max_iterations = 1000;
  double tolerance = 1e-6;
  // Divide the cost by its largest entry before solving, so epsilon is
  // relative to the cost range.
  bool normalize_cost = true;

  void validate() const;
};

// Dual potentials in raw cost units: plan(i, j) = exp((f_i + g_j - C_ij) / eps_eff)
// where eps_eff = epsilon * cost normalizer.
struct DualPotentials {
  Vector row;
  Vector col;
  double effective_epsilon = 0.0;
};

struct TransportPlan {
  Matrix plan;
  bool converged = false;
  int iterations = 0;
  double marginal_violation = 0.0;
  std::optional<DualPotentials> potentials;
};

// Entropic OT via log-domain Sinkhorn. Never throws on non-convergence; the
// last iterate is returned with converged = false.
TransportPlan sinkhorn(const CostMatrix& cost, const MarginalWeights& v, const MarginalWeights& t,
                       const SinkhornConfig& cfg = {});

// Exact minimizer of the transportation problem. Uniform square instances up
// to 64 x 64 go through the Hungarian method (ties resolved to the
// lexicographically smallest optimal permutation); other instances up to
// 6 x 6 use the transportation simplex.
TransportPlan exact_transport(const CostMatrix& cost, const MarginalWeights& v,
                              const MarginalWeights& t);

inline constexpr Eigen::Index kMaxAssignmentSize = 64;
inline constexpr Eigen::Index kMaxGeneralSize = 6;

// Optimal assignment for a square cost matrix: result[i] is the column of
// row i. Lexicographically smallest among optimal permutations.
std::vector<int> solve_assignment(const Matrix& cost);

double transport_cost(const TransportPlan& plan, const CostMatrix& cost);

double max_marginal_violation(const Matrix& plan, const MarginalWeights& v,
                              const MarginalWeights& t);

// Within each row, plan entries must strictly decrease as cost(i, j) - g_j
// increases. Pairs whose adjusted costs differ by at most `tol` count as ties.
// Throws InvalidState when the plan carries no potentials.
bool adjusted_cost_monotonicity_check(const TransportPlan& plan, const CostMatrix& cost,
                                      double tol = 1e-9);

}  // namespace cmemd
