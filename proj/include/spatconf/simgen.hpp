#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/gibbs.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/joint_gmrf.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace spatconf {

/// Generative mechanisms of the simulation study. gm1..gm4 draw (U, Z) from the
/// joint GMRF; gm5 draws U from a marginal CAR and Z | U ~ N(U + X, I); gm6
/// draws a joint GMRF latent W and uses U = atan(W), so tan(U) is the Gaussian
/// field; nonlinear uses the gm2 field with a sigmoid exposure effect.
enum class Mechanism { gm1, gm2, gm3, gm4, gm5, gm6, nonlinear };

/// Accepts "GM2", "gm2", "2", "nonlinear".
Mechanism parse_mechanism(const std::string& s);
/// "GM1".."GM6", "nonlinear".
std::string to_string(Mechanism m);
std::string mechanism_description(Mechanism m);

struct GenerativeConfig {
  Mechanism mechanism = Mechanism::gm2;
  int n = 300;
  /// Defaults to the ring on n sites.
  std::optional<AdjacencyGraph> graph;
  /// tau_eps is only used for Gaussian outcomes.
  VarianceParams params{1.0, 0.5, 1.0, 0.2, 0.3, 1.0};
  double beta_z = 1.0;
  OutcomeFamily family = OutcomeFamily::poisson;
  /// Shift the mean of U by X (confounder correlated with the covariate).
  bool u_mean_x = false;
  /// Poisson log expected counts; zero when unset. Must have n entries.
  std::optional<Eigen::VectorXd> offset;
  /// Poisson counts below this are flagged censored (0 disables).
  int censor_below = 0;
  std::uint64_t seed = 0;

  AdjacencyGraph resolved_graph() const;
  /// Exposure effect on the linear predictor: beta_z z, or the sigmoid.
  double effect(double z) const;
  bool nonlinear() const { return mechanism == Mechanism::nonlinear; }
  /// Throws ConfigError for bad sizes and NotPositiveDefinite for infeasible parameters.
  void validate() const;
};

/// GM1..GM6 then the nonlinear mechanism, all on the 300-site ring.
std::vector<GenerativeConfig> gm_catalog();
GenerativeConfig gm_config(Mechanism m);

/// 2 / (1 + exp(-6 z)) - 1.
double nonlinear_truth(double z);

/// What the estimators must never see.
struct TruthRecord {
  Mechanism mechanism = Mechanism::gm2;
  VarianceParams params;
  double beta_z = 1.0;
  /// Confounder entering the outcome.
  Eigen::VectorXd u;
  /// Gaussian latent field (equal to u except for gm6).
  Eigen::VectorXd latent;
  std::uint64_t seed = 0;
};

struct GeneratedData;
/// Draws X ~ U(-1/2, 1/2), then (U, Z) | X, then Y | Z, X, U. Poisson outcomes
/// get a zero offset.
GeneratedData generate_dataset(const GenerativeConfig& config);

/// Truth held apart from the observable data. Only TruthScorer can open it;
/// every fit entry point takes a Dataset, which has no truth fields.
class SealedTruth {
 public:
  SealedTruth() = default;
  Mechanism mechanism() const { return record_.mechanism; }

 private:
  explicit SealedTruth(TruthRecord r) : record_(std::move(r)) {}
  TruthRecord record_;
  friend class TruthScorer;
  friend GeneratedData generate_dataset(const GenerativeConfig& config);
};

class TruthScorer {
 public:
  static const TruthRecord& unseal(const SealedTruth& s) { return s.record_; }
};

struct GeneratedData {
  Dataset data;
  AdjacencyGraph graph;
  SealedTruth truth;
};

/// Irregular county-like layout: sites uniform on [0, 2] x [0, 1], a
/// symmetrised k-nearest-neighbour graph and log-normal populations.
struct CountyLayout {
  AdjacencyGraph graph;
  Eigen::MatrixXd coords;
  Eigen::VectorXd population;
  std::vector<std::string> ids;
};
CountyLayout county_layout(int n, std::uint64_t seed, int k = 5);

enum class FitMethod { bayesian, likelihood };
FitMethod parse_fit_method(const std::string& s);
std::string to_string(FitMethod m);

struct StudyConfig {
  GenerativeConfig generator;
  std::vector<Estimator> estimators{Estimator::nonspatial, Estimator::spatial, Estimator::spatial_rs,
                                    Estimator::affine, Estimator::affine_rs};
  int reps = 100;
  FitMethod method = FitMethod::bayesian;
  /// Chain and prior settings; estimator, family and seed are set per fit.
  ModelConfig model;
  /// Estimators without the condition-number prior (nonspatial, spatial by
  /// default) use flat precision priors.
  bool flat_priors_without_kappa = true;
  double ci_level = 0.95;
  int threads = 1;
  std::uint64_t master_seed = 0;
  /// Curve studies: spline degree and evaluation points.
  int spline_degree = 3;
  std::vector<double> curve_grid;
  std::vector<double> extra_points{-0.5, 0.5};
  double mad_lower = -0.75;
  double mad_upper = 0.75;

  /// Curve studies use the nonlinear mechanism.
  bool curve_study() const { return generator.nonlinear(); }
  void validate() const;
};

/// 101 equally spaced points on [-1.5, 1.5].
std::vector<double> default_curve_grid();
/// Seed of replicate `rep` derived from the master seed.
std::uint64_t replicate_seed(std::uint64_t master, int rep);
/// Seed of one fit within a replicate.
std::uint64_t fit_seed(std::uint64_t replicate, int estimator_index);

struct ReplicateResult {
  int rep = 0;
  std::uint64_t seed = 0;
  Estimator estimator = Estimator::nonspatial;
  bool ok = false;
  std::string error;
  /// Linear studies: estimate of beta_z and its interval.
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool covered = false;
  /// Curve studies: anchored curve and band on the study points.
  Eigen::VectorXd curve;
  Eigen::VectorXd curve_lower;
  Eigen::VectorXd curve_upper;
  double runtime_seconds = 0.0;
  std::vector<std::string> warnings;
};

struct StudyRow {
  Estimator estimator = Estimator::nonspatial;
  int successes = 0;
  int failures = 0;
  /// NaN when undefined (SE needs two successes; curve studies have no scalar rows).
  double bias = 0.0;
  double se = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
  /// Curve studies: mean of the per-replicate curves and their 2.5% / 97.5%
  /// sampling quantiles, pointwise band coverage, and mean absolute
  /// deviations from the truth over [mad_lower, mad_upper].
  Eigen::VectorXd mean_curve;
  Eigen::VectorXd curve_q_lo;
  Eigen::VectorXd curve_q_hi;
  Eigen::VectorXd pointwise_coverage;
  double mean_curve_mad = 0.0;
  double replicate_mad = 0.0;
};

struct SimulationSummary {
  StudyConfig config;
  std::vector<double> points;
  Eigen::VectorXd truth_curve;
  std::vector<StudyRow> rows;
  std::vector<ReplicateResult> replicates;
  double runtime_seconds = 0.0;

  const StudyRow& row(Estimator e) const;
  /// Index of `z` among the curve points; throws when absent.
  Eigen::Index point_index(double z) const;
};

/// REML / least-squares fit of a linear-predictor model for one estimator.
FitResult likelihood_fit(const Dataset& data, const AdjacencyGraph& graph, Estimator estimator,
                         const PriorConfig& priors, double ci_level = 0.95);

/// Fits one replicate dataset with one estimator and scores it against the
/// truth. The estimator sees only `data` and `graph`.
ReplicateResult fit_replicate(const StudyConfig& config, const Dataset& data,
                              const AdjacencyGraph& graph, Estimator estimator,
                              std::uint64_t seed, const std::vector<double>& points);

/// Generates config.reps datasets, fits every estimator and aggregates.
/// Deterministic given the master seed for any thread count.
SimulationSummary run_study(const StudyConfig& config);

/// Aggregates scored replicates (exposed for tests).
StudyRow aggregate(Estimator e, const std::vector<ReplicateResult>& results, double truth,
                   const std::vector<double>& points, const Eigen::VectorXd& truth_curve,
                   double mad_lower, double mad_upper);

}  // namespace spatconf
