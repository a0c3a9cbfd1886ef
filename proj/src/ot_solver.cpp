#include "cmemd/ot_solver.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <string>
#include <utility>

namespace cmemd {

MarginalWeights MarginalWeights::uniform(Eigen::Index n) {
  if (n < 1) throw InvalidArgument("marginal weights: empty support");
  return MarginalWeights(Vector::Constant(n, 1.0 / static_cast<double>(n)));
}

MarginalWeights MarginalWeights::from(Vector weights) {
  if (weights.size() < 1) throw InvalidArgument("marginal weights: empty support");
  if (!weights.allFinite() || (weights.array() <= 0.0).any()) {
    throw InvalidArgument("marginal weights: entries must be finite and > 0");
  }
  if (std::abs(weights.sum() - 1.0) > 1e-9) {
    throw InvalidArgument("marginal weights: entries must sum to 1");
  }
  return MarginalWeights(std::move(weights));
}

void SinkhornConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw InvalidArgument("sinkhorn: epsilon must be > 0");
  }
  if (!(tolerance > 0.0)) throw InvalidArgument("sinkhorn: tolerance must be > 0");
  if (max_iterations < 1) throw InvalidArgument("sinkhorn: max_iterations must be >= 1");
}

namespace {

void check_problem(const CostMatrix& cost, const MarginalWeights& v, const MarginalWeights& t) {
  if (cost.rows() != v.size() || cost.cols() != t.size()) {
    throw InvalidArgument("transport: cost is " + std::to_string(cost.rows()) + "x" +
                          std::to_string(cost.cols()) + " but marginals have sizes " +
                          std::to_string(v.size()) + " and " + std::to_string(t.size()));
  }
  if (!cost.data.allFinite()) throw InvalidArgument("transport: non-finite cost entry");
  if ((cost.data.array() < 0.0).any()) throw InvalidArgument("transport: negative cost entry");
}

// Row-wise log-sum-exp of `work`, written into `out`.
void rowwise_lse(const Matrix& work, Vector& out) {
  const Vector mx = work.rowwise().maxCoeff();
  out = mx.array() + (work.colwise() - mx).array().exp().rowwise().sum().log();
}

void colwise_lse(const Matrix& work, Vector& out) {
  const Eigen::RowVectorXd mx = work.colwise().maxCoeff();
  out = (mx.array() + (work.rowwise() - mx).array().exp().colwise().sum().log()).transpose();
}

// Sinkhorn on a fixed epsilon, warm-started from (f, g). Scalings u, v act on
// the stabilized kernel exp((f + g - C) / eps) and are absorbed into the
// potentials once they leave [e^-30, e^30], or when the kernel underflows
// a whole row. Returns the number of passes run and whether the row-marginal
// error fell below `tol` (columns are exact after every pass).
std::pair<int, bool> sinkhorn_stage(const Matrix& C, const Vector& log_a, const Vector& log_b,
                                    double eps, int max_passes, double tol, Vector& f, Vector& g) {
  constexpr double kAbsorbAt = 30.0;
  const Vector a = log_a.array().exp();
  const Vector b = log_b.array().exp();
  Matrix work(C.rows(), C.cols());
  Vector lse;

  Matrix kernel;
  Vector u = Vector::Ones(C.rows());
  Vector v = Vector::Ones(C.cols());
  auto absorb = [&] {
    f.array() += eps * u.array().log();
    g.array() += eps * v.array().log();
    u.setOnes();
    v.setOnes();
  };
  // Exact log-domain column update for the current f, then a fresh kernel.
  auto rebuild = [&] {
    work = ((-C).colwise() + f) / eps;
    colwise_lse(work, lse);
    g = eps * (log_b - lse);
    kernel = ((((-C).colwise() + f).rowwise() + g.transpose()) / eps).array().exp();
  };
  rebuild();

  int passes = 0;
  while (true) {
    const Vector kv = kernel * v;
    const double violation = (u.array() * kv.array() - a.array()).abs().maxCoeff();
    if (violation <= tol) {
      absorb();
      return {passes, true};
    }
    if (passes >= max_passes) {
      absorb();
      return {passes, false};
    }
    if ((kv.array() > 0.0).all()) {
      u = a.array() / kv.array();
      v = b.array() / (kernel.transpose() * u).array();
    } else {
      // Underflowed row: fall back to one exact log-domain row update.
      absorb();
      work = ((-C).rowwise() + g.transpose()) / eps;
      rowwise_lse(work, lse);
      f = eps * (log_a - lse);
      rebuild();
    }
    ++passes;
    const double spread = std::max(u.array().log().abs().maxCoeff(), v.array().log().abs().maxCoeff());
    if (!(spread <= kAbsorbAt)) {
      absorb();
      rebuild();
    }
  }
}

}  // namespace

double max_marginal_violation(const Matrix& plan, const MarginalWeights& v,
                              const MarginalWeights& t) {
  const double rows = (plan.rowwise().sum() - v.weights()).cwiseAbs().maxCoeff();
  const double cols = (plan.colwise().sum().transpose() - t.weights()).cwiseAbs().maxCoeff();
  return std::max(rows, cols);
}

TransportPlan sinkhorn(const CostMatrix& cost, const MarginalWeights& v, const MarginalWeights& t,
                       const SinkhornConfig& cfg) {
  cfg.validate();
  check_problem(cost, v, t);

  double normalizer = 1.0;
  if (cfg.normalize_cost) {
    const double mx = cost.data.maxCoeff();
    if (mx > 0.0) normalizer = mx;
  }
  const Matrix C = cost.data / normalizer;
  const Vector log_a = v.weights().array().log();
  const Vector log_b = t.weights().array().log();

  Vector f = Vector::Zero(C.rows());
  Vector g = Vector::Zero(C.cols());

  // Epsilon scaling: solve a coarse problem first and warm-start finer ones.
  // Intermediate stages only need to land near the next stage's potentials.
  const double range = std::max(C.maxCoeff(), cfg.epsilon);
  int used = 0;
  for (double eps = range; eps > cfg.epsilon * 4.0 && used < cfg.max_iterations; eps *= 0.25) {
    const int budget = std::min(50, cfg.max_iterations - used);
    used += sinkhorn_stage(C, log_a, log_b, eps, budget, std::max(cfg.tolerance, 1e-3), f, g).first;
  }
  // Stop a little inside the tolerance so rebuilding the plan from the
  // potentials cannot push it back over.
  const auto [passes, hit_tol] = sinkhorn_stage(C, log_a, log_b, cfg.epsilon,
                                                std::max(0, cfg.max_iterations - used),
                                                0.5 * cfg.tolerance, f, g);
  used += passes;

  TransportPlan out;
  out.plan = (((-C).colwise() + f).rowwise() + g.transpose()).array() / cfg.epsilon;
  out.plan = out.plan.array().exp();
  out.iterations = used;
  out.marginal_violation = max_marginal_violation(out.plan, v, t);
  out.converged = hit_tol && out.marginal_violation <= cfg.tolerance;
  out.potentials = DualPotentials{f * normalizer, g * normalizer, cfg.epsilon * normalizer};
  return out;
}

namespace {

// Hungarian method with potentials (row-by-row augmentation). Returns the
// row -> column assignment and fills the optimal duals.
std::vector<int> hungarian(const Matrix& a, Vector& u_out, Vector& v_out) {
  const int n = static_cast<int>(a.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  u_out.resize(n);
  v_out.resize(n);
  for (int i = 0; i < n; ++i) {
    u_out[i] = u[i + 1];
    v_out[i] = v[i + 1];
  }
  return assignment;
}

// Kuhn augmenting-path matching restricted to `allowed` edges, over rows
// [first_row, n) and columns not in `taken`.
bool has_perfect_matching(const std::vector<std::vector<int>>& allowed, int first_row,
                          const std::vector<char>& taken) {
  const int n = static_cast<int>(allowed.size());
  std::vector<int> match_col(n, -1);
  std::vector<char> seen(n);
  auto augment = [&](auto&& self, int row) -> bool {
    for (int col : allowed[row]) {
      if (taken[col] || seen[col]) continue;
      seen[col] = 1;
      if (match_col[col] < 0 || self(self, match_col[col])) {
        match_col[col] = row;
        return true;
      }
    }
    return false;
  };
  for (int row = first_row; row < n; ++row) {
    std::fill(seen.begin(), seen.end(), 0);
    if (!augment(augment, row)) return false;
  }
  return true;
}

}  // namespace

std::vector<int> solve_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw InvalidArgument("assignment: cost must be square");
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};
  Vector u, v;
  const std::vector<int> hung = hungarian(cost, u, v);

  // Every optimal assignment lives on the zero-reduced-cost edges of an
  // optimal dual, so the lexicographic minimum is found greedily there.
  const double tol = 1e-9 * std::max(1.0, cost.cwiseAbs().maxCoeff());
  std::vector<std::vector<int>> tight(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (cost(i, j) - u[i] - v[j] <= tol || j == hung[i]) tight[i].push_back(j);
    }
  }
  std::vector<int> result(n, -1);
  std::vector<char> taken(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j : tight[i]) {
      if (taken[j]) continue;
      taken[j] = 1;
      if (has_perfect_matching(tight, i + 1, taken)) {
        result[i] = j;
        break;
      }
      taken[j] = 0;
    }
    if (result[i] < 0) throw NumericalError("assignment: tight graph lost its perfect matching");
  }
  return result;
}

namespace {

// Transportation simplex (MODI) with Bland's rule, started from the
// north-west corner solution.
Matrix transportation_simplex(const Matrix& c, const Vector& supply, const Vector& demand,
                              int& pivots) {
  const int n = static_cast<int>(c.rows());
  const int m = static_cast<int>(c.cols());
  const double tol = 1e-12;
  Matrix x = Matrix::Zero(n, m);
  std::vector<std::vector<char>> basic(n, std::vector<char>(m, 0));

  {
    Vector s = supply;
    Vector d = demand;
    int i = 0, j = 0;
    while (true) {
      const double q = std::min(s[i], d[j]);
      x(i, j) = q;
      basic[i][j] = 1;
      s[i] -= q;
      d[j] -= q;
      if (i == n - 1 && j == m - 1) break;
      if ((s[i] <= tol && i < n - 1) || j == m - 1) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  // Nodes 0..n-1 are rows, n..n+m-1 are columns.
  auto tree_path = [&](int from, int to) {
    std::vector<int> parent(n + m, -2);
    std::queue<int> q;
    q.push(from);
    parent[from] = -1;
    while (!q.empty()) {
      const int node = q.front();
      q.pop();
      if (node == to) break;
      if (node < n) {
        for (int j = 0; j < m; ++j) {
          if (basic[node][j] && parent[n + j] == -2) {
            parent[n + j] = node;
            q.push(n + j);
          }
        }
      } else {
        const int j = node - n;
        for (int i = 0; i < n; ++i) {
          if (basic[i][j] && parent[i] == -2) {
            parent[i] = node;
            q.push(i);
          }
        }
      }
    }
    std::vector<int> path;
    for (int node = to; node != -1; node = parent[node]) path.push_back(node);
    std::reverse(path.begin(), path.end());
    return path;
  };

  pivots = 0;
  const int max_pivots = 10000;
  while (true) {
    // Duals: u_i + v_j = c_ij on basic cells, u_0 = 0.
    std::vector<double> u(n, 0.0), v(m, 0.0);
    std::vector<char> u_set(n, 0), v_set(m, 0);
    u_set[0] = 1;
    for (bool changed = true; changed;) {
      changed = false;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          if (!basic[i][j]) continue;
          if (u_set[i] && !v_set[j]) {
            v[j] = c(i, j) - u[i];
            v_set[j] = 1;
            changed = true;
          } else if (!u_set[i] && v_set[j]) {
            u[i] = c(i, j) - v[j];
            u_set[i] = 1;
            changed = true;
          }
        }
      }
    }

    int ei = -1, ej = -1;
    const double rtol = 1e-12 * std::max(1.0, c.cwiseAbs().maxCoeff());
    for (int i = 0; i < n && ei < 0; ++i) {
      for (int j = 0; j < m; ++j) {
        if (!basic[i][j] && c(i, j) - u[i] - v[j] < -rtol) {
          ei = i;
          ej = j;
          break;
        }
      }
    }
    if (ei < 0) return x;
    if (++pivots > max_pivots) throw NumericalError("transportation simplex did not terminate");

    // Cycle: entering cell (+), then the tree path from column ej back to row ei
    // with alternating signs starting at (-).
    const std::vector<int> path = tree_path(n + ej, ei);
    std::vector<std::pair<int, int>> minus, plus;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      const int a = path[k], b = path[k + 1];
      const std::pair<int, int> cell = a < n ? std::pair{a, b - n} : std::pair{b, a - n};
      (k % 2 == 0 ? minus : plus).push_back(cell);
    }
    double theta = std::numeric_limits<double>::infinity();
    for (auto [i, j] : minus) theta = std::min(theta, x(i, j));
    std::pair<int, int> leaving{n, m};
    for (auto cell : minus) {
      if (x(cell.first, cell.second) <= theta + tol && cell < leaving) leaving = cell;
    }
    x(ei, ej) += theta;
    for (auto [i, j] : plus) x(i, j) += theta;
    for (auto [i, j] : minus) x(i, j) = std::max(0.0, x(i, j) - theta);
    basic[ei][ej] = 1;
    basic[leaving.first][leaving.second] = 0;
    x(leaving.first, leaving.second) = 0.0;
  }
}

bool is_uniform(const MarginalWeights& w) {
  const double target = 1.0 / static_cast<double>(w.size());
  return (w.weights().array() - target).abs().maxCoeff() <= 1e-12;
}

}  // namespace

TransportPlan exact_transport(const CostMatrix& cost, const MarginalWeights& v,
                              const MarginalWeights& t) {
  check_problem(cost, v, t);
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  TransportPlan out;
  out.converged = true;

  if (n == m && is_uniform(v) && is_uniform(t)) {
    if (n > kMaxAssignmentSize) {
      throw UnsupportedSize("exact_transport: assignment instances are limited to 64 x 64");
    }
    const std::vector<int> perm = solve_assignment(cost.data);
    out.plan = Matrix::Zero(n, m);
    for (Eigen::Index i = 0; i < n; ++i) out.plan(i, perm[i]) = 1.0 / static_cast<double>(n);
  } else {
    if (n > kMaxGeneralSize || m > kMaxGeneralSize) {
      throw UnsupportedSize("exact_transport: general-marginal instances are limited to 6 x 6");
    }
    out.plan = transportation_simplex(cost.data, v.weights(), t.weights(), out.iterations);
  }
  out.marginal_violation = max_marginal_violation(out.plan, v, t);
  return out;
}

double transport_cost(const TransportPlan& plan, const CostMatrix& cost) {
  if (plan.plan.rows() != cost.rows() || plan.plan.cols() != cost.cols()) {
    throw InvalidArgument("transport_cost: plan and cost shapes differ");
  }
  return plan.plan.cwiseProduct(cost.data).sum();
}

bool adjusted_cost_monotonicity_check(const TransportPlan& plan, const CostMatrix& cost,
                                      double tol) {
  if (!plan.potentials) {
    throw InvalidState("monotonicity check needs the dual potentials recorded by sinkhorn");
  }
  const Vector& g = plan.potentials->col;
  if (plan.plan.rows() != cost.rows() || plan.plan.cols() != cost.cols() ||
      g.size() != cost.cols()) {
    throw InvalidArgument("monotonicity check: shape mismatch");
  }
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      for (Eigen::Index k = 0; k < cost.cols(); ++k) {
        const double aj = cost.data(i, j) - g[j];
        const double ak = cost.data(i, k) - g[k];
        if (aj + tol >= ak) continue;
        const double pj = plan.plan(i, j);
        const double pk = plan.plan(i, k);
        // Both underflowed to zero: order is unobservable, not violated.
        if (pj == 0.0 && pk == 0.0) continue;
        if (!(pj > pk)) return false;
      }
    }
  }
  return true;
}

}  // namespace cmemd
