#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/joint_gmrf.hpp"
#include "spatconf/optimize.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <optional>

namespace spatconf {

/// Matrices entering the restricted likelihood of (Y, Z).
struct RemlDesign {
  Eigen::VectorXd y;
  Eigen::VectorXd z;
  /// Unpenalised outcome design.
  Eigen::MatrixXd x;
  /// Exposure-mean design; may have zero columns.
  Eigen::MatrixXd xe;
  /// Penalised outcome design with iid N(0, 1/psi) coefficients; may have zero columns.
  Eigen::MatrixXd l;

  static RemlDesign from_dataset(const Dataset& d);
};

struct MeanEstimate {
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  /// Inverse of the generalised-least-squares information C' M^{-1} C.
  Eigen::MatrixXd cov;
};

/// Restricted likelihood of the factored model
///   Y | Z ~ N(X beta - G^{-1} Q (Z - Xe gamma), G^{-1} + I / tau_eps [+ L L' / psi])
///   Z     ~ N(Xe gamma, (H - Q G^{-1} Q)^{-1}).
///
/// The dense backend factorises n x n matrices at every evaluation. On graphs
/// where every node has the same degree all blocks share the eigenvectors of
/// W, and the spectral backend reduces an evaluation to O(n) work after a
/// one-off eigendecomposition.
class RestrictedLikelihood {
 public:
  enum class Backend { automatic, dense, spectral };

  RestrictedLikelihood(RemlDesign design, const AdjacencyGraph& graph,
                       Backend backend = Backend::automatic);
  /// Unstructured random effects: G = tau_u I, H = tau_z I.
  static RestrictedLikelihood independent(RemlDesign design, Backend backend = Backend::automatic);

  Backend backend() const { return backend_; }
  const GraphSpectrum& spectrum() const { return spectrum_; }
  const RemlDesign& design() const { return design_; }
  Eigen::Index n() const { return design_.y.size(); }

  /// Full restricted log-likelihood; -inf outside the PD region. `psi` is
  /// ignored when the design has no penalised columns.
  double log_likelihood(const VarianceParams& v, double psi = 1.0) const;
  /// Restricted log-likelihood of Y alone under rho = 0.
  double outcome_log_likelihood(const VarianceParams& v, double psi = 1.0) const;
  /// Restricted log-likelihood of Z alone under rho = 0.
  double exposure_log_likelihood(const VarianceParams& v) const;

  /// (beta, gamma) = (C' M^{-1} C)^{-1} C' M^{-1} nu.
  MeanEstimate estimate(const VarianceParams& v, double psi = 1.0) const;
  /// beta = (X' V^{-1} X)^{-1} X' V^{-1} y; gamma is left empty.
  MeanEstimate outcome_estimate(const VarianceParams& v, double psi = 1.0) const;

  /// G^{-1} x in original coordinates.
  Eigen::VectorXd g_inverse_apply(const VarianceParams& v, const Eigen::VectorXd& x) const;
  /// E[U | Z] = -G^{-1} Q r for the exposure residual r.
  Eigen::VectorXd correction(const VarianceParams& v, const Eigen::VectorXd& r) const;
  /// -G^{-1} Q* r with Q* = -diag(sqrt(g_ii h_ii)), the derivative of the correction in rho.
  Eigen::VectorXd rho_direction(const VarianceParams& v, const Eigen::VectorXd& r) const;
  /// (D' V^{-1} D)^{-1} for D = [X | extra], with V the outcome covariance.
  Eigen::MatrixXd augmented_covariance(const VarianceParams& v, const Eigen::MatrixXd& extra,
                                       double psi = 1.0) const;
  /// Penalised solve (T' V0^{-1} T + psi A)^{-1} T' V0^{-1} y_adj with T = [X | L],
  /// V0 = G^{-1} + I / tau_eps and A the identity on the L block. Returns the
  /// coefficients and the inverse of the penalised information.
  std::pair<Eigen::VectorXd, Eigen::MatrixXd> penalized_solve(const VarianceParams& v, double psi,
                                                              const Eigen::VectorXd& y_adj) const;

 private:
  struct Ops;
  enum class Part { full, outcome, exposure };

  RestrictedLikelihood(RemlDesign design, GraphSpectrum spectrum, Eigen::SparseMatrix<double> w,
                       Backend backend);
  void prepare();
  Ops operators(const VarianceParams& v, double psi, bool need_v, bool need_s, bool with_l) const;
  Eigen::MatrixXd to_working(const Eigen::MatrixXd& a) const;
  Eigen::MatrixXd from_working(const Eigen::MatrixXd& a) const;
  double evaluate(const VarianceParams& v, double psi, Part part, MeanEstimate* out) const;

  RemlDesign design_;
  GraphSpectrum spectrum_;
  Eigen::SparseMatrix<double> w_;
  Backend backend_;
  double common_degree_ = 1.0;
  Eigen::MatrixXd w_dense_;
  // design in the working basis
  Eigen::VectorXd y_w_, z_w_;
  Eigen::MatrixXd x_w_, xe_w_, l_w_;
};

struct RemlOptions {
  bool restrict_scales = false;
  /// Hold rho at zero. The likelihood then factors into outcome and exposure
  /// parts which are maximised separately.
  bool fix_rho_zero = false;
  /// Multiply the restricted likelihood by the condition-number prior (MAP).
  std::optional<KappaPrior> kappa_prior;
  OptimizeOptions optimizer;
  double ci_level = 0.95;
  RestrictedLikelihood::Backend backend = RestrictedLikelihood::Backend::automatic;
};

/// Classical least squares on [z | X] with homoskedastic standard errors.
FitResult ols_fit(const Dataset& data, double ci_level = 0.95);

/// Generalised least squares with a known outcome covariance.
FitResult gls_fixed_covariance(const Dataset& data, const Eigen::MatrixXd& cov,
                               double ci_level = 0.95);

/// Spatial random-effect fit with rho = 0. With restrict_scales the exposure
/// CAR is fitted jointly under phi_z <= phi_u.
FitResult gls_fit(const Dataset& data, const AdjacencyGraph& graph, bool restrict_scales,
                  const RemlOptions& options = {});
FitResult gls_fit(const RestrictedLikelihood& rl, const Dataset& data, const RemlOptions& options);

double restricted_log_likelihood(const VarianceParams& v, const Dataset& data,
                                 const AdjacencyGraph& graph);

/// Affine estimator: maximises the restricted likelihood (optionally times
/// the condition-number prior) over all six variance parameters.
FitResult affine_fit_reml(const Dataset& data, const AdjacencyGraph& graph, bool restrict_scales,
                          const std::optional<KappaPrior>& prior = std::nullopt,
                          RemlOptions options = {});
FitResult affine_fit_reml(const RestrictedLikelihood& rl, const Dataset& data,
                          const RemlOptions& options);

/// Standard errors of beta from (D' V^{-1} D)^{-1}, D = [X | -G^{-1} Q* (z - Xe gamma)].
/// Throws DegenerateStandardError when D is numerically rank deficient.
Eigen::VectorXd affine_standard_errors(const FitResult& fit, const Dataset& data,
                                       const AdjacencyGraph& graph);
Eigen::VectorXd affine_standard_errors(const FitResult& fit, const RestrictedLikelihood& rl);
/// sqrt(diag((X' V^{-1} X)^{-1})) at the fitted variance parameters.
Eigen::VectorXd naive_standard_errors(const FitResult& fit, const RestrictedLikelihood& rl);

namespace detail {

/// Unconstrained coordinates <-> variance parameters for the likelihood fits.
class ParamMap {
 public:
  enum class Mode { outcome, exposure, outcome_exposure, joint };

  ParamMap(Mode mode, bool restrict_scales, bool with_psi, const GraphSpectrum& spectrum);

  Eigen::Index dim() const;
  /// std::nullopt when the coordinates fall outside the admissible box.
  std::optional<std::pair<VarianceParams, double>> decode(const Eigen::VectorXd& x) const;
  Eigen::VectorXd encode(const VarianceParams& v, double psi) const;
  Mode mode() const { return mode_; }

 private:
  Mode mode_;
  bool restrict_;
  bool psi_;
  const GraphSpectrum* spectrum_;
};

struct VarianceFit {
  VarianceParams v;
  double psi = 1.0;
  OptimizeResult opt;
  bool boundary = false;
};

/// Deterministic starting point from least-squares residual variances.
VarianceParams default_start(const RestrictedLikelihood& rl);

/// Maximises the selected likelihood part (plus the log prior in joint mode).
VarianceFit fit_variance(const RestrictedLikelihood& rl, ParamMap::Mode mode, bool restrict_scales,
                         bool with_psi, const std::optional<KappaPrior>& prior,
                         const OptimizeOptions& opt, const VarianceParams& start, double psi0);

std::string describe_fit(const VarianceFit& vf);

}  // namespace detail

}  // namespace spatconf
