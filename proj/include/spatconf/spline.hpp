#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/linear_estimators.hpp"

#include <Eigen/Dense>

#include <optional>

namespace spatconf {

/// Radial-basis penalised spline f(z) = sum_a beta_a z^a + sum_k l_k |z - knot_k|^degree.
struct SplineSpec {
  int degree = 3;
  Eigen::VectorXd knots;
  /// Precision of the knot coefficients; estimated when unset.
  std::optional<double> psi;

  Eigen::Index knot_count() const { return knots.size(); }
  /// Throws ConfigError for a non-positive degree, unsorted knots or knots
  /// outside the range of `z`.
  void validate(const Eigen::VectorXd& z) const;
};

/// min(floor(n / 4), 20).
int default_knot_count(Eigen::Index n);
/// Empirical quantiles of z at k / (count + 1), k = 1..count (linear interpolation).
Eigen::VectorXd quantile_knots(const Eigen::VectorXd& z, int count);
SplineSpec default_spline(const Eigen::VectorXd& z, int degree = 3);

struct SplineDesign {
  /// Columns 1, z, ..., z^degree.
  Eigen::MatrixXd poly;
  /// Entries |z_i - knot_k|^degree.
  Eigen::MatrixXd radial;
};

SplineDesign spline_design(const Eigen::VectorXd& z, const SplineSpec& spec);

/// Row of the curve basis anchored so that the curve is zero at z = 0:
/// [z, ..., z^degree, |z - knot_k|^degree - |knot_k|^degree].
Eigen::RowVectorXd anchored_basis(double z, const SplineSpec& spec);

struct CurveFit {
  FitResult fit;
  SplineSpec spec;
  double psi = 0.0;
  /// beta_1..beta_degree followed by the knot coefficients.
  Eigen::VectorXd curve_coef;
  Eigen::MatrixXd curve_cov;

  /// f(z) - f(0).
  double evaluate(double z) const;
  Eigen::VectorXd evaluate(const Eigen::VectorXd& grid) const;
  double standard_error(double z) const;
};

/// Penalised-spline exposure-response fit. Spatial estimators leave the
/// outcome unadjusted; affine estimators subtract the fitted E[U | Z] before
/// the penalised solve.
CurveFit semiparametric_fit(const Dataset& data, const AdjacencyGraph& graph,
                            const SplineSpec& spec, Estimator estimator,
                            const RemlOptions& options = {});

}  // namespace spatconf
