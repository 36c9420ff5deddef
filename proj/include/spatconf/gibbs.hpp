#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/joint_gmrf.hpp"
#include "spatconf/spline.hpp"

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spatconf {

enum class OutcomeFamily { gaussian, poisson };
/// Exposure entering the joint (U, Z) field; the outcome model always uses raw z.
enum class ExposureTransform { identity, log };
enum class TauPrior { gamma, flat };
/// Whether the condition-number prior is applied. `automatic` uses it for
/// the estimators that model the exposure field (spatial-rs and the affine variants).
enum class KappaUse { automatic, on, off };

OutcomeFamily parse_family(const std::string& s);
std::string to_string(OutcomeFamily f);
ExposureTransform parse_transform(const std::string& s);
std::string to_string(ExposureTransform t);
TauPrior parse_tau_prior(const std::string& s);
std::string to_string(TauPrior t);
KappaUse parse_kappa_use(const std::string& s);
std::string to_string(KappaUse k);

struct PriorConfig {
  /// Regression coefficients ~ N(0, beta_sd^2).
  double beta_sd = 10.0;
  /// Prior on tau_u, tau_z and tau_eps. `flat` is uniform on the variance
  /// 1 / tau; a prior uniform on tau itself leaves the posterior improper.
  TauPrior tau_kind = TauPrior::gamma;
  double tau_shape = 5.0;
  double tau_rate = 5.0;
  double kappa_rate = 0.1;
  Surrogate surrogate = Surrogate::ring4;
  KappaUse kappa = KappaUse::automatic;
  /// Gamma prior on the precision of the spline knot coefficients.
  double psi_shape = 5.0;
  double psi_rate = 5.0;

  void validate() const;
  bool kappa_active(Estimator e) const;
};

struct ChainConfig {
  /// Total iterations including burn-in.
  int iterations = 11000;
  int burn_in = 1000;
  int thin = 1;
  std::uint64_t seed = 0;
  /// Store U every this many retained draws (0 = never).
  int store_u_every = 0;
  /// Variance-block MH steps per sweep.
  int variance_steps = 1;
  /// Drop every data and latent-field term from the variance update so the
  /// chain targets the prior (used to check the sampler).
  bool prior_only = false;

  int retained() const { return (iterations - burn_in) / thin; }
  void validate() const;
};

struct ModelConfig {
  OutcomeFamily family = OutcomeFamily::poisson;
  Estimator estimator = Estimator::affine_rs;
  ExposureTransform exposure_transform = ExposureTransform::identity;
  std::optional<SplineSpec> spline;
  PriorConfig priors;
  ChainConfig chain;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

struct PosteriorSamples {
  Estimator estimator = Estimator::nonspatial;
  OutcomeFamily family = OutcomeFamily::poisson;
  std::vector<std::string> beta_names;
  /// Fixed-effect draws (retained x p). For spline fits the first columns are
  /// z, ..., z^degree.
  Eigen::MatrixXd beta;
  std::optional<SplineSpec> spline;
  /// Knot-coefficient draws (retained x K) and their precision.
  Eigen::MatrixXd knots;
  Eigen::VectorXd psi;
  std::vector<std::string> gamma_names;
  Eigen::MatrixXd gamma;
  /// Columns tau_u, phi_u, tau_z, phi_z, rho, tau_eps.
  Eigen::MatrixXd variance;
  /// Stored latent fields (one row per stored draw).
  Eigen::MatrixXd u;
  std::vector<int> censored_index;
  Eigen::MatrixXd imputed;
  /// Acceptance rates over the retained iterations.
  std::map<std::string, double> acceptance;
  std::vector<std::string> warnings;
  double runtime_seconds = 0.0;
  std::uint64_t seed = 0;

  Eigen::Index draws() const { return beta.rows(); }
  Eigen::VectorXd beta_z() const { return beta.col(0); }
  VarianceParams variance_at(Eigen::Index i) const;
  /// Anchored curve f(z) - f(0) for every draw (spline fits only).
  Eigen::VectorXd curve_draws(double z) const;
};

/// Runs one chain. Throws ConfigError / DataError on inconsistent inputs and
/// NotPositiveDefinite when the initial state is infeasible.
PosteriorSamples run_chain(const ModelConfig& config, const Dataset& data,
                           const AdjacencyGraph& graph);

/// Draws a count from Poisson(mu) truncated to {0, ..., threshold - 1}. When the
/// truncated mass underflows, returns the mode of the truncated law and sets
/// `underflow`.
int draw_truncated_poisson(double mu, int threshold, Rng& rng, bool* underflow = nullptr);

/// Redraws every censored entry of `y` given the mean vector `mu`. Returns the
/// number of underflow fallbacks.
int impute_censored(Eigen::VectorXd& y, const std::vector<std::uint8_t>& censored,
                    const Eigen::VectorXd& mu, int threshold, Rng& rng);

/// Random-walk proposal whose covariance is learned from the chain history
/// and whose scale follows a Robbins-Monro recursion towards a target
/// acceptance rate. Adaptation stops at freeze().
class AdaptiveProposal {
 public:
  AdaptiveProposal(Eigen::Index dim, double initial_scale, double target_accept);

  /// Replaces the proposal shape with a scaled Cholesky factor of `cov`.
  void set_covariance(const Eigen::MatrixXd& cov);
  Eigen::VectorXd propose(const Eigen::VectorXd& x, Rng& rng) const;
  void record(const Eigen::VectorXd& x, bool accepted);
  void freeze() { frozen_ = true; }
  double scale() const { return std::exp(log_scale_); }

 private:
  void refresh();

  Eigen::Index dim_;
  double log_scale_;
  double target_;
  bool frozen_ = false;
  bool empirical_ = false;
  long count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
  Eigen::MatrixXd chol_;
};

struct PaercRow {
  double z = 0.0;
  double log_mean = 0.0;
  /// exp of the posterior mean of the log curve.
  double geometric_mean = 1.0;
  double lower = 1.0;
  double upper = 1.0;
};

struct PaercSummary {
  enum class Mode { coefficient, curve };
  Mode mode = Mode::coefficient;
  double level = 0.95;
  std::vector<PaercRow> rows;
};

/// Coefficient mode: exp(beta_z), the relative standardised rate per unit of
/// exposure. Curve mode: exp(f(z) - f(0)) on `grid`. Equal-tail intervals.
PaercSummary paerc_summary(const PosteriorSamples& s, PaercSummary::Mode mode,
                           const std::vector<double>& grid = {}, double level = 0.95);

/// Equal-tail quantile (type 7) of a sample.
double sample_quantile(Eigen::VectorXd x, double p);
/// Batch-means Monte Carlo standard error of the mean of a chain.
double monte_carlo_se(const Eigen::VectorXd& chain);
/// Largest gap between the empirical CDF of `x` and `cdf`.
double ks_statistic(Eigen::VectorXd x, const std::function<double(double)>& cdf);
/// Asymptotic Kolmogorov p-value for statistic d on n observations.
double ks_p_value(double d, Eigen::Index n);

}  // namespace spatconf
