#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/joint_gmrf.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spatconf {

/// Joint (U, Z, Y) model on the ring of n sites with zero exposure mean and
/// E[Y | Z, U] = beta_z Z + U.
struct RingParams {
  int n = 400;
  double tau_u = 1.0;
  double phi_u = 0.5;
  double tau_z = 1.0;
  double phi_z = 0.2;
  double rho = 0.3;
  double tau_eps = 1.0;
  double beta_z = 1.0;

  VarianceParams variance() const { return {tau_u, phi_u, tau_z, phi_z, rho, tau_eps}; }
  /// Throws ConfigError when n < 3, a dependence parameter is outside (-1, 1),
  /// a precision is not positive or the joint precision is not PD.
  void validate() const;
};

/// Determinant of the n x n tridiagonal matrix with 2 on the diagonal and
/// -phi beside it.
double stdc_determinant(int n, double phi);
/// Determinant of the unscaled ring CAR precision (2 on the diagonal, -phi
/// between ring neighbours).
double car_ring_determinant(int n, double phi);
/// Large-n limit of an entry of the inverse unscaled ring CAR precision at the given lag.
double ring_inverse_limit_entry(int lag, double phi);
/// Exact entry of the inverse unscaled ring CAR precision of size n at the given lag.
double ring_inverse_entry(int n, int lag, double phi);
/// Large-n limit of Prec[Z] at the given lag.
double limit_prec_z_entry(int lag, const RingParams& p);
/// Large-n limit of Var[Y | Z] at lag >= 1.
double limit_var_y_given_z_entry(int lag, const RingParams& p);

/// Lag profiles (entries (i, i + lag), lag = 0..max_lag) of the identified
/// moments of (Y, Z) on a ring.
struct RingMoments {
  int n = 0;
  Eigen::VectorXd prec_z;
  Eigen::VectorXd var_y_given_z;
  /// E[Y | Z] = M Z; lag profile of M.
  Eigen::VectorXd mean_map;
};

/// Exact population moments from dense matrices.
RingMoments population_moments(const RingParams& p, int max_lag = 8);
/// Moments estimated from `reps` independent draws of (Y, Z) through the
/// empirical circular auto- and cross-covariances.
RingMoments sampled_moments(const RingParams& p, int reps, Rng& rng, int max_lag = 8);

struct IdentificationReport {
  /// From Z alone: "rho*phi_u != 0", "rho*phi_u = 0" or "indeterminate".
  std::string z_verdict;
  /// From (Y, Z): "identifiable", "non-identifiable" or "indeterminate".
  std::string verdict;
  double z_signal = 0.0;
  double y_signal = 0.0;
  double threshold = 1e-6;
  double tolerance = 1e-3;
  RingParams truth;
  std::map<std::string, double> recovered;
  std::map<std::string, double> abs_error;
  bool within_tolerance = false;
  std::vector<std::string> notes;
};

struct IdentificationOptions {
  /// Off-tridiagonal signal relative to the diagonal above which a spatial
  /// dependence is declared present.
  double threshold = 1e-6;
  /// Signals below this are treated as exact zeros; between the two the
  /// verdict is "indeterminate".
  double noise_floor = 1e-12;
  /// Tolerance used to score recovered against true parameters.
  double tolerance = 1e-3;
};

/// Recovers the model parameters from the moments by back-substitution:
/// phi_u from lag ratios, then |rho|, tau_z and phi_z from Prec[Z], then
/// beta_z, sign(rho), tau_u and tau_eps from E[Y | Z] and Var[Y | Z].
IdentificationReport identification_report(const RingMoments& m, const RingParams& truth,
                                           const IdentificationOptions& opt = {});
IdentificationReport identification_report(const RingParams& p, int n, double tol = 1e-3);

struct FlatnessReport {
  double max_deviation = 0.0;
  /// (n - p)^{-1} Y'(I - P_X)Y and (n - k) / Z'(I - P_Xe)Z.
  double closed_form_sigma2 = 0.0;
  double closed_form_phi = 0.0;
  /// Numerical maximisers of the restricted likelihood.
  double sigma2_hat = 0.0;
  double phi_hat = 0.0;
};

/// Non-spatial model (G = tau_u I, H = tau_z I): evaluates the restricted
/// likelihood along the curve holding sigma2 = 1/tau_u + 1/tau_eps and
/// phi = tau_z (1 - rho^2) at their maximisers. With `sigma2_drift` the
/// curve instead moves sigma2 by that relative amount from start to end.
FlatnessReport nonspatial_flatness_check(const Dataset& data, int curve_points,
                                         double sigma2_drift = 0.0);

}  // namespace spatconf
