#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>

namespace spatconf {

/// Objective to minimise. Infeasible points should return +inf or NaN.
using Objective = std::function<double(const Eigen::VectorXd&)>;

struct OptimizeOptions {
  int starts = 5;
  int max_evals = 4000;
  /// Simplex size at which a local search stops.
  double tol = 1e-7;
  double initial_step = 0.5;
  /// Standard deviation of the random perturbation applied to later starts.
  double start_spread = 1.0;
  int polish_rounds = 2;
  std::uint64_t seed = 0;
};

struct OptimizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int evaluations = 0;
  bool converged = false;
};

/// Simplex search from one starting point.
OptimizeResult nelder_mead(const Objective& f, const Eigen::VectorXd& x0, double step,
                           int max_evals, double tol);

/// One sweep of bracketed one-dimensional minimisations along the axes.
OptimizeResult coordinate_polish(const Objective& f, const Eigen::VectorXd& x0, double half_width);

/// Multi-start simplex search, each start refined by coordinate sweeps and a
/// restarted simplex. Returns the best start.
OptimizeResult minimize(const Objective& f, const Eigen::VectorXd& x0, const OptimizeOptions& opt);

}  // namespace spatconf
