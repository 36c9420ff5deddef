#include "spatconf/joint_gmrf.hpp"

#include "spatconf/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <sstream>

namespace spatconf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool is_ring(const AdjacencyGraph& g) {
  const int n = static_cast<int>(g.size());
  if (n < 3) return false;
  for (int i = 0; i < n; ++i) {
    const auto& nb = g.neighbors(static_cast<std::size_t>(i));
    if (nb.size() != 2) return false;
    const int a = (i + n - 1) % n;
    const int b = (i + 1) % n;
    if (!((nb[0] == std::min(a, b) && nb[1] == std::max(a, b)))) return false;
  }
  return true;
}

Eigen::MatrixXd dense_joint(const AdjacencyGraph& g, const CarParams& gp, const CarParams& hp,
                            double rho) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  const double qscale = -rho * std::sqrt(gp.tau * hp.tau);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = double(g.degree(static_cast<std::size_t>(i)));
    p(i, i) = gp.tau * d;
    p(n + i, n + i) = hp.tau * d;
    p(i, n + i) = p(n + i, i) = qscale * d;
    for (int j : g.neighbors(static_cast<std::size_t>(i))) {
      p(i, j) = -gp.tau * gp.phi;
      p(n + i, n + j) = -hp.tau * hp.phi;
    }
  }
  return p;
}

}  // namespace

std::string VarianceParams::describe() const {
  std::ostringstream os;
  os.precision(6);
  os << "(tau_u=" << tau_u << ", phi_u=" << phi_u << ", tau_z=" << tau_z << ", phi_z=" << phi_z
     << ", rho=" << rho << ", tau_eps=" << tau_eps << ")";
  return os.str();
}

JointPrecision::JointPrecision(SparseSymMatrix g, SparseSymMatrix h, Eigen::VectorXd q_diag,
                               CarParams g_params, CarParams h_params, double rho)
    : g_(std::move(g)),
      h_(std::move(h)),
      q_(std::move(q_diag)),
      g_params_(g_params),
      h_params_(h_params),
      rho_(rho) {
  if (g_.dim() != h_.dim() || static_cast<std::size_t>(q_.size()) != g_.dim()) {
    throw DimensionMismatch("joint precision blocks have inconsistent dimensions");
  }
}

SparseSymMatrix JointPrecision::full() const {
  const int n = static_cast<int>(this->n());
  std::vector<SparseSymMatrix::Entry> e;
  e.reserve(g_.entries().size() + h_.entries().size() + std::size_t(n));
  for (const auto& x : g_.entries()) e.push_back(x);
  for (const auto& x : h_.entries()) e.push_back({x.row + n, x.col + n, x.value});
  for (int i = 0; i < n; ++i) {
    if (q_(i) != 0.0) e.push_back({i, i + n, q_(i)});
  }
  return SparseSymMatrix(2 * this->n(), std::move(e));
}

JointPrecision build_joint_precision(const AdjacencyGraph& graph, const CarParams& g_params,
                                     const CarParams& h_params, double rho) {
  if (!(std::abs(rho) < 1.0)) {
    throw std::invalid_argument("rho must lie in (-1, 1), got " + std::to_string(rho));
  }
  auto g = car_precision(graph, g_params);
  auto h = car_precision(graph, h_params);
  Eigen::VectorXd q = -rho * std::sqrt(g_params.tau * h_params.tau) * graph.degrees();
  JointPrecision jp(std::move(g), std::move(h), std::move(q), g_params, h_params, rho);
  if (!is_positive_definite(jp.full())) {
    VarianceParams v{g_params.tau, g_params.phi, h_params.tau, h_params.phi, rho, 0.0};
    throw NotPositiveDefinite("joint precision is not positive definite at " + v.describe());
  }
  return jp;
}

GaussianLaw conditional_u_given_z(const JointPrecision& jp, const Eigen::VectorXd& z,
                                  const Eigen::MatrixXd& x, const Eigen::VectorXd& gamma) {
  const auto n = static_cast<Eigen::Index>(jp.n());
  if (z.size() != n || x.rows() != n || x.cols() != gamma.size()) {
    throw DimensionMismatch("conditional_u_given_z: z, X and gamma do not conform");
  }
  const Eigen::VectorXd rhs = -(jp.q().array() * (z - x * gamma).array()).matrix();
  Eigen::VectorXd mean;
  if (jp.rho() == 0.0) {
    mean = Eigen::VectorXd::Zero(n);
  } else if (jp.n() <= kDenseThreshold) {
    mean = jp.g().to_dense().llt().solve(rhs);
  } else {
    PrecisionSampler s(jp.g().to_sparse());
    mean = s.solve(rhs);
  }
  return {std::move(mean), jp.g(), GaussianLaw::Kind::precision};
}

Eigen::MatrixXd marginal_z_precision_dense(const JointPrecision& jp) {
  Eigen::MatrixXd h = jp.h().to_dense();
  if (jp.rho() == 0.0) return h;
  Eigen::LLT<Eigen::MatrixXd> llt(jp.g().to_dense());
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("G block is not positive definite");
  Eigen::MatrixXd ginv_q = llt.solve(Eigen::MatrixXd(jp.q().asDiagonal()));
  h.noalias() -= jp.q().asDiagonal() * ginv_q;
  return 0.5 * (h + h.transpose());
}

GaussianLaw marginal_z_law(const JointPrecision& jp, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& gamma) {
  if (x.rows() != static_cast<Eigen::Index>(jp.n()) || x.cols() != gamma.size()) {
    throw DimensionMismatch("marginal_z_law: X and gamma do not conform");
  }
  if (jp.rho() == 0.0) return {x * gamma, jp.h(), GaussianLaw::Kind::precision};
  return {x * gamma, SparseSymMatrix::from_dense(marginal_z_precision_dense(jp)),
          GaussianLaw::Kind::precision};
}

double rho_bound(const SparseSymMatrix& g, const SparseSymMatrix& h) {
  if (g.dim() != h.dim()) throw DimensionMismatch("rho_bound: G and H differ in dimension");
  auto min_eig = [](const SparseSymMatrix& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.to_dense(), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
  };
  const double lg = min_eig(g);
  const double lh = min_eig(h);
  if (!(lg > 0.0) || !(lh > 0.0)) throw NotPositiveDefinite("rho_bound: G or H is not PD");
  const Eigen::VectorXd gd = g.diagonal_values();
  const Eigen::VectorXd hd = h.diagonal_values();
  const double max_prod = (gd.array() * hd.array()).maxCoeff();
  return std::min(lg, lh) / std::sqrt(max_prod);
}

double condition_number_log_prior(double kappa, double rate) {
  if (!(rate > 0.0)) throw std::invalid_argument("kappa prior rate must be positive");
  // Eigen solvers return kappa slightly below 1 for perfectly conditioned matrices.
  if (std::isnan(kappa) || kappa < 1.0 - 1e-12) return kNegInf;
  return std::log(rate) - rate * (std::max(kappa, 1.0) - 1.0);
}

AdjacencyGraph surrogate_graph(Surrogate s) {
  return s == Surrogate::ring4 ? ring(4) : grid(4, 4);
}

Surrogate default_surrogate(const AdjacencyGraph& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.degree(i) != 2) return Surrogate::grid4x4;
  }
  return Surrogate::ring4;
}

Surrogate parse_surrogate(const std::string& name) {
  if (name == "ring4") return Surrogate::ring4;
  if (name == "grid4x4") return Surrogate::grid4x4;
  throw ConfigError("unknown surrogate graph '" + name + "' (expected ring4 or grid4x4)");
}

std::string to_string(Surrogate s) { return s == Surrogate::ring4 ? "ring4" : "grid4x4"; }

double surrogate_condition_number(const CarParams& g_params, const CarParams& h_params, double rho,
                                  const AdjacencyGraph& surrogate) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      dense_joint(surrogate, g_params, h_params, rho), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  const double hi = es.eigenvalues()(es.eigenvalues().size() - 1);
  if (!(lo > 0.0)) {
    VarianceParams v{g_params.tau, g_params.phi, h_params.tau, h_params.phi, rho, 0.0};
    throw NotPositiveDefinite("surrogate joint precision is not PD at " + v.describe());
  }
  return hi / lo;
}

KappaPrior::KappaPrior(double rate, Surrogate surrogate)
    : rate_(rate), surrogate_(surrogate), graph_(surrogate_graph(surrogate)) {
  if (!(rate > 0.0)) throw ConfigError("kappa prior rate must be positive");
}

double KappaPrior::log_density(const VarianceParams& v) const {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense_joint(graph_, v.u(), v.z(), v.rho),
                                                    Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  if (!(lo > 0.0)) return kNegInf;
  return condition_number_log_prior(es.eigenvalues()(es.eigenvalues().size() - 1) / lo, rate_);
}

// ---------------------------------------------------------------------------

GraphSpectrum GraphSpectrum::compute(const AdjacencyGraph& g, bool with_vectors) {
  if (g.has_isolated_node()) {
    throw DegeneratePrecision("graph spectrum requires every node to have a neighbour");
  }
  GraphSpectrum s;
  const auto n = static_cast<Eigen::Index>(g.size());
  s.degrees_ = g.degrees();
  s.sum_log_degree_ = s.degrees_.array().log().sum();
  if (is_ring(g) && !with_vectors) {
    s.lambda_.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      s.lambda_(k) = std::cos(2.0 * std::numbers::pi * double(k) / double(n));
    }
    std::sort(s.lambda_.data(), s.lambda_.data() + n);
  } else {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd isd = s.degrees_.array().rsqrt();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j : g.neighbors(static_cast<std::size_t>(i))) m(i, j) = isd(i) * isd(j);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
        m, with_vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
    s.lambda_ = es.eigenvalues();
    if (with_vectors) s.vectors_ = es.eigenvectors();
  }
  s.lambda_min_ = s.lambda_.minCoeff();
  s.lambda_max_ = s.lambda_.maxCoeff();
  return s;
}

GraphSpectrum GraphSpectrum::independent(std::size_t n, bool with_vectors) {
  GraphSpectrum s;
  const auto nn = static_cast<Eigen::Index>(n);
  s.lambda_ = Eigen::VectorXd::Zero(nn);
  s.degrees_ = Eigen::VectorXd::Ones(nn);
  if (with_vectors) s.vectors_ = Eigen::MatrixXd::Identity(nn, nn);
  s.lambda_min_ = s.lambda_max_ = 0.0;
  return s;
}

double GraphSpectrum::car_log_det(const CarParams& p) const {
  const double nn = double(n());
  double acc = sum_log_degree_ + nn * std::log(p.tau);
  for (Eigen::Index k = 0; k < lambda_.size(); ++k) {
    const double f = 1.0 - p.phi * lambda_(k);
    if (!(f > 0.0)) return kNegInf;
    acc += std::log(f);
  }
  return acc;
}

double GraphSpectrum::joint_log_det(const VarianceParams& v) const {
  const double nn = double(n());
  const double r2 = v.rho * v.rho;
  double acc = 2.0 * sum_log_degree_ + nn * (std::log(v.tau_u) + std::log(v.tau_z));
  for (Eigen::Index k = 0; k < lambda_.size(); ++k) {
    const double a = 1.0 - v.phi_u * lambda_(k);
    const double b = 1.0 - v.phi_z * lambda_(k);
    const double f = a * b - r2;
    if (!(a > 0.0) || !(f > 0.0)) return kNegInf;
    acc += std::log(f);
  }
  return acc;
}

double GraphSpectrum::exact_rho_bound(double phi_u, double phi_z) const {
  double m = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < lambda_.size(); ++k) {
    m = std::min(m, (1.0 - phi_u * lambda_(k)) * (1.0 - phi_z * lambda_(k)));
  }
  return m > 0.0 ? std::sqrt(m) : 0.0;
}

bool GraphSpectrum::joint_is_pd(const VarianceParams& v) const {
  if (!(v.tau_u > 0.0) || !(v.tau_z > 0.0)) return false;
  if (!(std::abs(v.phi_u) < 1.0) || !(std::abs(v.phi_z) < 1.0)) return false;
  return std::abs(v.rho) < exact_rho_bound(v.phi_u, v.phi_z);
}

double adjacency_quad(const AdjacencyGraph& g, const Eigen::VectorXd& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s = 0.0;
    for (int j : g.neighbors(i)) s += x(j);
    acc += x(static_cast<Eigen::Index>(i)) * s;
  }
  return acc;
}

QuadStats quad_stats(const AdjacencyGraph& g, const Eigen::VectorXd& u, const Eigen::VectorXd& r) {
  const Eigen::VectorXd d = g.degrees();
  QuadStats s;
  s.du2 = (d.array() * u.array().square()).sum();
  s.dr2 = (d.array() * r.array().square()).sum();
  s.dur = (d.array() * u.array() * r.array()).sum();
  s.uwu = adjacency_quad(g, u);
  s.rwr = adjacency_quad(g, r);
  return s;
}

double joint_log_density(const GraphSpectrum& spec, const VarianceParams& v, const QuadStats& s) {
  const double ld = spec.joint_log_det(v);
  if (!std::isfinite(ld)) return kNegInf;
  const double ugu = v.tau_u * (s.du2 - v.phi_u * s.uwu);
  const double rhr = v.tau_z * (s.dr2 - v.phi_z * s.rwr);
  const double uqr = -v.rho * std::sqrt(v.tau_u * v.tau_z) * s.dur;
  return 0.5 * ld - 0.5 * (ugu + 2.0 * uqr + rhr);
}

// ---------------------------------------------------------------------------

PrecisionSampler::PrecisionSampler(const Eigen::SparseMatrix<double>& p) { factorize(p); }

void PrecisionSampler::factorize(const Eigen::SparseMatrix<double>& p) {
  if (!analyzed_) {
    llt_.analyzePattern(p);
    analyzed_ = true;
  }
  llt_.factorize(p);
  if (llt_.info() != Eigen::Success) {
    throw NotPositiveDefinite("sparse Cholesky factorisation failed");
  }
}

Eigen::VectorXd PrecisionSampler::solve(const Eigen::VectorXd& b) const { return llt_.solve(b); }

Eigen::VectorXd PrecisionSampler::draw(const Eigen::VectorXd& b, Rng& rng) const {
  Eigen::VectorXd mean = llt_.solve(b);
  Eigen::VectorXd e = standard_normal(b.size(), rng);
  Eigen::VectorXd w = llt_.matrixU().solve(e);
  return mean + llt_.permutationPinv() * w;
}

double PrecisionSampler::log_det() const {
  const Eigen::SparseMatrix<double>& l = llt_.matrixL().nestedExpression();
  return 2.0 * l.diagonal().array().log().sum();
}

Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd e(n);
  for (Eigen::Index i = 0; i < n; ++i) e(i) = nd(rng);
  return e;
}

}  // namespace spatconf
