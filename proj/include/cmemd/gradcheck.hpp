#pragma once

#include "cmemd/run_config.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cmemd {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

// |a - n| / max(|a|, |n|, 1e-5)
double relative_error(double analytic, double numeric);

// Central difference of `loss` w.r.t. *x; restores *x afterwards.
double central_difference(const std::function<double()>& loss, double* x, double step = kGradcheckStep);

struct ComponentCheck {
  std::string name;
  int probes = 0;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<ComponentCheck> components;
  bool passed = true;
  std::string warning;
};

// Component names accepted by `corrupt`.
std::vector<std::string> gradcheck_components();

// Probes `num_probes` random coordinates per component. `corrupt` names a
// component whose analytic gradient is deliberately perturbed, for testing
// that the check can fail.
GradcheckReport run_gradcheck(const RunConfig& cfg, int num_probes,
                              const std::optional<std::string>& corrupt = std::nullopt);

}  // namespace cmemd
