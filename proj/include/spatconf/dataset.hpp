#pragma once

#include "spatconf/joint_gmrf.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace spatconf {

/// Observed data. The outcome design is [z | x_minus_z], so beta_z is coefficient 0.
struct Dataset {
  Eigen::VectorXd y;
  Eigen::VectorXd z;
  /// Covariates other than the exposure, including the intercept column.
  Eigen::MatrixXd x_minus_z;
  /// Design of the exposure mean. Defaults to x_minus_z; zero columns means
  /// the exposure residual is modelled with mean zero.
  std::optional<Eigen::MatrixXd> exposure_design;
  /// Log expected counts for count outcomes.
  std::optional<Eigen::VectorXd> offset;
  /// Per-unit censoring flags (empty when nothing is censored). Censored
  /// counts are known only to lie in {0, ..., censor_threshold - 1}.
  std::vector<std::uint8_t> censored;
  int censor_threshold = 10;
  std::vector<std::string> covariate_names;
  std::vector<std::string> ids;

  Eigen::Index n() const { return y.size(); }
  Eigen::MatrixXd outcome_design() const;
  Eigen::MatrixXd exposure_x() const;
  std::vector<std::string> coefficient_names() const;
  std::vector<std::string> exposure_coefficient_names() const;
  bool any_censored() const;
  /// Throws DimensionMismatch or RankDeficient.
  void validate() const;
};

enum class Estimator { nonspatial, spatial, spatial_rs, affine, affine_rs };

Estimator parse_estimator(const std::string& name);
/// CLI spelling: nonspatial, spatial, spatial-rs, affine, affine-rs.
std::string to_string(Estimator e);
/// Table label. Likelihood fits read OLS / GLS / GLS-RS, Bayesian fits
/// Non-spatial / Spatial / Spatial-RS; both use Affine / Affine-RS.
std::string display_name(Estimator e, bool bayesian);
bool restricts_scales(Estimator e);
bool is_affine(Estimator e);
bool is_spatial(Estimator e);

struct FitResult {
  Estimator estimator = Estimator::nonspatial;
  std::vector<std::string> coef_names;
  Eigen::VectorXd beta;
  std::vector<std::string> gamma_names;
  Eigen::VectorXd gamma;
  VarianceParams variance;
  Eigen::VectorXd se;
  Eigen::VectorXd ci_lower;
  Eigen::VectorXd ci_upper;
  double ci_level = 0.95;
  double log_restricted_likelihood = 0.0;
  /// Objective at the optimum (restricted likelihood plus log prior for MAP).
  double objective = 0.0;
  bool converged = true;
  bool boundary = false;
  int evaluations = 0;
  std::string diagnostics;

  double beta_z() const { return beta(0); }
  double se_z() const { return se(0); }
};

/// Fills ci_lower/ci_upper from beta and se with normal quantiles.
void set_wald_intervals(FitResult& fit, double level);
/// Two-sided normal quantile for a central interval of the given level.
double normal_quantile_two_sided(double level);

}  // namespace spatconf
