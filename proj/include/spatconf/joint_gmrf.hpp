#pragma once

#include "spatconf/graph.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <limits>
#include <optional>
#include <random>
#include <string>

namespace spatconf {

using Rng = std::mt19937_64;

/// The six variance parameters of the joint (U, Z) model plus the outcome noise.
struct VarianceParams {
  double tau_u = 1.0;
  double phi_u = 0.0;
  double tau_z = 1.0;
  double phi_z = 0.0;
  double rho = 0.0;
  double tau_eps = 1.0;

  CarParams u() const { return {tau_u, phi_u}; }
  CarParams z() const { return {tau_z, phi_z}; }
  std::string describe() const;
};

/// Block precision [[G, Q], [Q, H]] of (U, Z) given the covariates.
class JointPrecision {
 public:
  JointPrecision(SparseSymMatrix g, SparseSymMatrix h, Eigen::VectorXd q_diag, CarParams g_params,
                 CarParams h_params, double rho);

  std::size_t n() const { return g_.dim(); }
  const SparseSymMatrix& g() const { return g_; }
  const SparseSymMatrix& h() const { return h_; }
  /// Diagonal of Q.
  const Eigen::VectorXd& q() const { return q_; }
  const CarParams& g_params() const { return g_params_; }
  const CarParams& h_params() const { return h_params_; }
  double rho() const { return rho_; }

  /// The full 2n x 2n matrix, U block first.
  SparseSymMatrix full() const;

 private:
  SparseSymMatrix g_;
  SparseSymMatrix h_;
  Eigen::VectorXd q_;
  CarParams g_params_;
  CarParams h_params_;
  double rho_;
};

struct GaussianLaw {
  enum class Kind { precision, covariance };
  Eigen::VectorXd mean;
  SparseSymMatrix matrix;
  Kind kind = Kind::precision;
};

/// Throws NotPositiveDefinite naming the parameters when the joint matrix is not PD.
JointPrecision build_joint_precision(const AdjacencyGraph& graph, const CarParams& g_params,
                                     const CarParams& h_params, double rho);

/// U | Z: mean -G^{-1} Q (z - X gamma), precision G.
GaussianLaw conditional_u_given_z(const JointPrecision& jp, const Eigen::VectorXd& z,
                                  const Eigen::MatrixXd& x, const Eigen::VectorXd& gamma);

/// Z with U integrated out: mean X gamma, precision H - Q G^{-1} Q.
GaussianLaw marginal_z_law(const JointPrecision& jp, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& gamma);

/// Dense H - Q G^{-1} Q.
Eigen::MatrixXd marginal_z_precision_dense(const JointPrecision& jp);

/// Conservative sufficient bound on |rho|: min(lambda_min(G), lambda_min(H)) / sqrt(max g_ii h_ii).
double rho_bound(const SparseSymMatrix& g, const SparseSymMatrix& h);

/// Log density of an Exponential(rate) truncated to kappa >= 1; -inf below 1.
double condition_number_log_prior(double kappa, double rate);

enum class Surrogate { ring4, grid4x4 };

AdjacencyGraph surrogate_graph(Surrogate s);
/// ring4 when every node has degree 2, otherwise the 4x4 grid.
Surrogate default_surrogate(const AdjacencyGraph& g);
Surrogate parse_surrogate(const std::string& name);
std::string to_string(Surrogate s);

/// lambda_max / lambda_min of the joint precision built on the surrogate graph.
double surrogate_condition_number(const CarParams& g_params, const CarParams& h_params, double rho,
                                  const AdjacencyGraph& surrogate);

/// Truncated-exponential prior on the surrogate condition number.
class KappaPrior {
 public:
  explicit KappaPrior(double rate = 0.1, Surrogate surrogate = Surrogate::ring4);

  double rate() const { return rate_; }
  Surrogate surrogate() const { return surrogate_; }
  /// -inf when the surrogate joint precision is not PD.
  double log_density(const VarianceParams& v) const;

 private:
  double rate_;
  Surrogate surrogate_;
  AdjacencyGraph graph_;
};

/// Spectrum of D^{-1/2} W D^{-1/2}. Every CAR-type determinant and the exact
/// positive-definiteness region of the joint precision reduce to these
/// eigenvalues because G, H and Q are all congruent to functions of it.
class GraphSpectrum {
 public:
  /// Eigenvectors are kept only when `with_vectors` is set.
  static GraphSpectrum compute(const AdjacencyGraph& g, bool with_vectors = false);
  /// D = I, W = 0: the structure of an unstructured (non-spatial) random effect.
  static GraphSpectrum independent(std::size_t n, bool with_vectors = false);

  std::size_t n() const { return static_cast<std::size_t>(lambda_.size()); }
  const Eigen::VectorXd& lambda() const { return lambda_; }
  const Eigen::VectorXd& degrees() const { return degrees_; }
  double sum_log_degree() const { return sum_log_degree_; }
  bool has_vectors() const { return vectors_.size() > 0; }
  /// Columns are orthonormal eigenvectors of D^{-1/2} W D^{-1/2}.
  const Eigen::MatrixXd& vectors() const { return vectors_; }
  double lambda_min() const { return lambda_min_; }
  double lambda_max() const { return lambda_max_; }

  /// log |tau (D - phi W)|.
  double car_log_det(const CarParams& p) const;
  /// log |P| of the joint precision; -inf outside the PD region.
  double joint_log_det(const VarianceParams& v) const;
  /// Exact supremum of |rho| keeping the joint matrix PD (scale free).
  double exact_rho_bound(double phi_u, double phi_z) const;
  bool joint_is_pd(const VarianceParams& v) const;

 private:
  Eigen::VectorXd lambda_;
  Eigen::VectorXd degrees_;
  Eigen::MatrixXd vectors_;
  double sum_log_degree_ = 0.0;
  double lambda_min_ = -1.0;
  double lambda_max_ = 1.0;
};

/// Quadratic-form statistics of (u, r) sufficient for the joint log density.
struct QuadStats {
  double du2 = 0.0;  // sum d_i u_i^2
  double uwu = 0.0;  // u' W u
  double dr2 = 0.0;
  double rwr = 0.0;
  double dur = 0.0;  // sum d_i u_i r_i
};

QuadStats quad_stats(const AdjacencyGraph& g, const Eigen::VectorXd& u, const Eigen::VectorXd& r);
/// x' W x on the graph.
double adjacency_quad(const AdjacencyGraph& g, const Eigen::VectorXd& x);

/// log p(u, r) under the joint GMRF, up to the 2 pi constant.
double joint_log_density(const GraphSpectrum& spec, const VarianceParams& v, const QuadStats& s);

/// Draws from N(P^{-1} b, P^{-1}) through a sparse Cholesky factorisation.
/// The symbolic analysis is reused across `factorize` calls with the same pattern.
class PrecisionSampler {
 public:
  PrecisionSampler() = default;
  explicit PrecisionSampler(const Eigen::SparseMatrix<double>& p);

  void factorize(const Eigen::SparseMatrix<double>& p);
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  Eigen::VectorXd draw(const Eigen::VectorXd& b, Rng& rng) const;
  double log_det() const;

 private:
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
  bool analyzed_ = false;
};

/// Standard normal vector of length n.
Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng);

}  // namespace spatconf
