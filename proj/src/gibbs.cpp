#include "spatconf/gibbs.hpp"

#include "spatconf/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace spatconf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kCoordLimit = 15.0;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

/// x' (D - phi W) x on the graph, without forming the matrix.
Eigen::VectorXd car_apply(const AdjacencyGraph& g, double tau, double phi, const Eigen::VectorXd& x) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& nb = g.neighbors(std::size_t(i));
    double s = 0.0;
    for (int j : nb) s += x(j);
    out(i) = tau * (double(nb.size()) * x(i) - phi * s);
  }
  return out;
}

Eigen::VectorXd mvn_from_precision(const Eigen::MatrixXd& prec, const Eigen::VectorXd& lin, Rng& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("conditional precision is not PD");
  const Eigen::VectorXd mean = llt.solve(lin);
  const Eigen::VectorXd e = standard_normal(prec.rows(), rng);
  return mean + llt.matrixU().solve(e);
}

double log_gamma_on_log_scale(double tau, TauPrior kind, double shape, double rate) {
  // density of log(tau); `flat` is uniform on the variance 1 / tau
  if (kind == TauPrior::flat) return -std::log(tau);
  return shape * std::log(tau) - rate * tau;
}

double draw_gamma(double shape, double rate, Rng& rng) {
  std::gamma_distribution<double> gd(shape, 1.0 / rate);
  return gd(rng);
}

struct Flags {
  bool has_u = false;
  bool exposure = false;
  bool rho_free = false;
  bool rs = false;
  bool kappa = false;
  Eigen::Index dim = 0;
};

Flags flags_for(const ModelConfig& c) {
  Flags f;
  const Estimator e = c.estimator;
  f.has_u = e != Estimator::nonspatial;
  f.exposure = e == Estimator::spatial_rs || is_affine(e);
  f.rho_free = is_affine(e);
  f.rs = restricts_scales(e);
  f.kappa = c.priors.kappa_active(e);
  f.dim = !f.has_u ? 0 : (f.rho_free ? 5 : (f.exposure ? 4 : 2));
  return f;
}

/// Maps unconstrained variance coordinates to parameters.
class VarianceCoords {
 public:
  VarianceCoords(const Flags& f, const GraphSpectrum& spec) : f_(f), spec_(&spec) {}

  std::optional<VarianceParams> decode(const Eigen::VectorXd& x, VarianceParams base) const {
    if (!x.allFinite() || (x.size() > 0 && x.cwiseAbs().maxCoeff() > kCoordLimit)) return std::nullopt;
    base.tau_u = std::exp(x(0));
    base.phi_u = std::tanh(x(1));
    if (f_.exposure) {
      base.tau_z = std::exp(x(2));
      base.phi_z = std::tanh(x(3));
    }
    if (f_.rho_free) base.rho = spec_->exact_rho_bound(base.phi_u, base.phi_z) * std::tanh(x(4));
    if (!(std::abs(base.phi_u) < 1.0) || !(std::abs(base.phi_z) < 1.0)) return std::nullopt;
    return base;
  }

  Eigen::VectorXd encode(const VarianceParams& v) const {
    Eigen::VectorXd x(f_.dim);
    x(0) = std::log(v.tau_u);
    x(1) = std::atanh(v.phi_u);
    if (f_.exposure) {
      x(2) = std::log(v.tau_z);
      x(3) = std::atanh(v.phi_z);
    }
    if (f_.rho_free) {
      const double b = spec_->exact_rho_bound(v.phi_u, v.phi_z);
      x(4) = std::atanh(std::clamp(v.rho / b, -0.999999, 0.999999));
    }
    return x;
  }

 private:
  Flags f_;
  const GraphSpectrum* spec_;
};

}  // namespace

// ---------------------------------------------------------------------------

OutcomeFamily parse_family(const std::string& s) {
  const auto t = lower(s);
  if (t == "gaussian" || t == "normal") return OutcomeFamily::gaussian;
  if (t == "poisson" || t == "poisson-log") return OutcomeFamily::poisson;
  throw ConfigError("unknown outcome family '" + s + "'");
}

std::string to_string(OutcomeFamily f) { return f == OutcomeFamily::gaussian ? "gaussian" : "poisson-log"; }

ExposureTransform parse_transform(const std::string& s) {
  const auto t = lower(s);
  if (t == "identity" || t == "none") return ExposureTransform::identity;
  if (t == "log") return ExposureTransform::log;
  throw ConfigError("unknown exposure transform '" + s + "'");
}

std::string to_string(ExposureTransform t) { return t == ExposureTransform::log ? "log" : "identity"; }

TauPrior parse_tau_prior(const std::string& s) {
  const auto t = lower(s);
  if (t == "gamma") return TauPrior::gamma;
  if (t == "flat") return TauPrior::flat;
  throw ConfigError("unknown precision prior '" + s + "'");
}

std::string to_string(TauPrior t) { return t == TauPrior::gamma ? "gamma" : "flat"; }

KappaUse parse_kappa_use(const std::string& s) {
  const auto t = lower(s);
  if (t == "automatic" || t == "auto") return KappaUse::automatic;
  if (t == "on" || t == "true") return KappaUse::on;
  if (t == "off" || t == "false") return KappaUse::off;
  throw ConfigError("unknown condition-number prior setting '" + s + "'");
}

std::string to_string(KappaUse k) {
  switch (k) {
    case KappaUse::automatic: return "automatic";
    case KappaUse::on: return "on";
    case KappaUse::off: return "off";
  }
  return "automatic";
}

void PriorConfig::validate() const {
  if (!(beta_sd > 0.0)) throw ConfigError("beta prior sd must be positive");
  if (tau_kind == TauPrior::gamma && !(tau_shape > 0.0 && tau_rate > 0.0)) {
    throw ConfigError("gamma prior shape and rate must be positive");
  }
  if (!(kappa_rate > 0.0)) throw ConfigError("condition-number prior rate must be positive");
  if (!(psi_shape > 0.0 && psi_rate > 0.0)) throw ConfigError("spline precision prior must be proper");
}

bool PriorConfig::kappa_active(Estimator e) const {
  switch (kappa) {
    case KappaUse::on: return is_spatial(e);
    case KappaUse::off: return false;
    case KappaUse::automatic: return e == Estimator::spatial_rs || is_affine(e);
  }
  return false;
}

void ChainConfig::validate() const {
  if (iterations < 1 || burn_in < 0 || burn_in >= iterations) {
    throw ConfigError("chain needs 0 <= burn_in < iterations");
  }
  if (thin < 1) throw ConfigError("thinning must be at least 1");
  if (store_u_every < 0) throw ConfigError("store_u_every must be non-negative");
  if (variance_steps < 1) throw ConfigError("variance_steps must be at least 1");
  if (retained() < 1) throw ConfigError("chain retains no draws");
}

void ModelConfig::validate() const {
  priors.validate();
  chain.validate();
  if (spline) {
    if (spline->degree < 1) throw ConfigError("spline degree must be positive");
    if (spline->psi && !(*spline->psi > 0.0)) throw ConfigError("spline psi must be positive");
  }
  if (exposure_transform == ExposureTransform::log &&
      !(estimator == Estimator::spatial_rs || is_affine(estimator))) {
    throw ConfigError("the exposure transform only applies to estimators with an exposure field");
  }
}

VarianceParams PosteriorSamples::variance_at(Eigen::Index i) const {
  return {variance(i, 0), variance(i, 1), variance(i, 2), variance(i, 3), variance(i, 4), variance(i, 5)};
}

Eigen::VectorXd PosteriorSamples::curve_draws(double z) const {
  if (!spline) throw ConfigError("curve draws need a spline fit");
  const Eigen::RowVectorXd b = anchored_basis(z, *spline);
  const int deg = spline->degree;
  Eigen::MatrixXd coef(draws(), b.size());
  coef << beta.leftCols(deg), knots;
  return coef * b.transpose();
}

// ---------------------------------------------------------------------------

int draw_truncated_poisson(double mu, int threshold, Rng& rng, bool* underflow) {
  if (threshold < 1) throw ConfigError("censoring threshold must be positive");
  if (underflow) *underflow = false;
  if (!(mu > 0.0)) return 0;
  // log pmf up to the common factor exp(-mu)
  std::vector<double> lw(static_cast<std::size_t>(threshold));
  double top = kNegInf;
  for (int k = 0; k < threshold; ++k) {
    lw[std::size_t(k)] = double(k) * std::log(mu) - std::lgamma(double(k) + 1.0);
    top = std::max(top, lw[std::size_t(k)]);
  }
  // total truncated mass relative to the full Poisson law
  const double log_mass = top - mu + std::log(double(threshold));
  if (!std::isfinite(top) || log_mass < -700.0) {
    if (underflow) *underflow = true;
    return threshold - 1;  // the pmf is increasing on {0..threshold-1} when mu >= threshold
  }
  double total = 0.0;
  for (auto& w : lw) total += (w = std::exp(w - top));
  std::uniform_real_distribution<double> unif(0.0, total);
  double u = unif(rng);
  for (int k = 0; k < threshold; ++k) {
    u -= lw[std::size_t(k)];
    if (u <= 0.0) return k;
  }
  return threshold - 1;
}

int impute_censored(Eigen::VectorXd& y, const std::vector<std::uint8_t>& censored,
                    const Eigen::VectorXd& mu, int threshold, Rng& rng) {
  int fallbacks = 0;
  for (std::size_t i = 0; i < censored.size(); ++i) {
    if (!censored[i]) continue;
    bool uf = false;
    y(Eigen::Index(i)) = draw_truncated_poisson(mu(Eigen::Index(i)), threshold, rng, &uf);
    fallbacks += uf ? 1 : 0;
  }
  return fallbacks;
}

// ---------------------------------------------------------------------------

AdaptiveProposal::AdaptiveProposal(Eigen::Index dim, double initial_scale, double target_accept)
    : dim_(dim), log_scale_(0.0), target_(target_accept), mean_(Eigen::VectorXd::Zero(dim)),
      m2_(Eigen::MatrixXd::Zero(dim, dim)), chol_(initial_scale * Eigen::MatrixXd::Identity(dim, dim)) {}

void AdaptiveProposal::set_covariance(const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return;
  chol_ = llt.matrixL();
  chol_ *= 2.38 / std::sqrt(double(dim_));
}

Eigen::VectorXd AdaptiveProposal::propose(const Eigen::VectorXd& x, Rng& rng) const {
  return x + std::exp(log_scale_) * (chol_ * standard_normal(dim_, rng));
}

void AdaptiveProposal::record(const Eigen::VectorXd& x, bool accepted) {
  if (frozen_) return;
  ++count_;
  const Eigen::VectorXd delta = x - mean_;
  mean_ += delta / double(count_);
  m2_ += delta * (x - mean_).transpose();
  const double step = std::min(1.0, 3.0 * std::pow(double(count_), -0.6));
  log_scale_ += step * ((accepted ? 1.0 : 0.0) - target_);
  log_scale_ = std::clamp(log_scale_, -12.0, 6.0);
  if (count_ >= std::max<long>(100, 20 * dim_) && count_ % 50 == 0) refresh();
}

void AdaptiveProposal::refresh() {
  Eigen::MatrixXd cov = m2_ / double(count_ - 1);
  cov.diagonal().array() += 1e-10 + 1e-6 * cov.diagonal().array();
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return;
  chol_ = llt.matrixL();
  chol_ *= 2.38 / std::sqrt(double(dim_));
  if (!empirical_) {
    empirical_ = true;
    log_scale_ = 0.0;
  }
}

// ---------------------------------------------------------------------------

namespace {

/// Mutable state of one chain.
class Chain {
 public:
  Chain(const ModelConfig& cfg, const Dataset& data, const AdjacencyGraph& graph)
      : cfg_(cfg), data_(data), graph_(graph), flags_(flags_for(cfg)), rng_(cfg.chain.seed) {
    setup();
  }

  PosteriorSamples run();

 private:
  void setup();
  void initialise();
  double poisson_loglik(const Eigen::VectorXd& eta) const;
  void update_coefficients();
  void update_gamma();
  void update_u();
  void update_variance();
  double variance_log_target(const VarianceParams& v, const Eigen::VectorXd& x,
                             const QuadStats* stats) const;
  void update_tau_eps();
  void update_psi();
  void refresh_eta();
  Eigen::VectorXd exposure_residual() const { return zj_ - xe_ * gamma_; }

  const ModelConfig& cfg_;
  const Dataset& data_;
  const AdjacencyGraph& graph_;
  Flags flags_;
  Rng rng_;
  Eigen::Index n_ = 0;

  // design
  Eigen::MatrixXd t_;  // [fixed | knots]
  Eigen::Index p_fixed_ = 0, k_knots_ = 0;
  Eigen::MatrixXd tt_;  // t' t
  Eigen::VectorXd offset_;
  Eigen::VectorXd zj_;  // exposure entering the joint field
  Eigen::MatrixXd xe_;
  Eigen::VectorXd degrees_;
  std::optional<GraphSpectrum> spectrum_;
  std::optional<KappaPrior> kappa_;
  std::optional<VarianceCoords> coords_;
  std::vector<int> censored_index_;

  // state
  Eigen::VectorXd theta_;  // fixed then knot coefficients
  Eigen::VectorXd gamma_;
  Eigen::VectorXd u_;
  Eigen::VectorXd y_;
  Eigen::VectorXd eta_fixed_;  // offset + t theta
  VarianceParams v_;
  Eigen::VectorXd vx_;
  double vlp_ = 0.0;
  double psi_ = 1.0;

  // samplers and adaptation
  std::optional<AdaptiveProposal> beta_prop_;
  std::optional<AdaptiveProposal> var_prop_;
  Eigen::VectorXd u_log_scale_;
  PrecisionSampler u_sampler_;
  bool adapting_ = true;
  long iter_ = 0;
  std::map<std::string, std::pair<double, double>> accept_;  // accepted, attempts over retained
  int underflows_ = 0;
};

void Chain::setup() {
  cfg_.validate();
  data_.validate();
  n_ = data_.n();
  if (static_cast<Eigen::Index>(graph_.size()) != n_) {
    throw DimensionMismatch("graph has " + std::to_string(graph_.size()) + " nodes but data has " +
                            std::to_string(n_) + " rows");
  }
  if (cfg_.family == OutcomeFamily::poisson) {
    if (!data_.offset) throw DataError("Poisson outcomes need an offset");
    for (Eigen::Index i = 0; i < n_; ++i) {
      if (data_.y(i) < 0.0 || data_.y(i) != std::floor(data_.y(i))) {
        throw DataError("Poisson outcome at row " + std::to_string(i) + " is not a count");
      }
    }
    offset_ = *data_.offset;
  } else {
    if (data_.any_censored()) throw DataError("censoring is only supported for count outcomes");
    offset_ = Eigen::VectorXd::Zero(n_);
  }
  if (flags_.has_u && graph_.has_isolated_node()) {
    throw DataError("every unit needs at least one neighbour for a CAR field");
  }

  // outcome design
  if (cfg_.spline) {
    const SplineDesign sd = spline_design(data_.z, *cfg_.spline);
    const int deg = cfg_.spline->degree;
    bool has_intercept = false;
    for (Eigen::Index j = 0; j < data_.x_minus_z.cols(); ++j) {
      has_intercept = has_intercept || (data_.x_minus_z.col(j).array() == 1.0).all();
    }
    const Eigen::Index extra = has_intercept ? 0 : 1;
    p_fixed_ = deg + extra + data_.x_minus_z.cols();
    k_knots_ = sd.radial.cols();
    t_.resize(n_, p_fixed_ + k_knots_);
    t_.leftCols(deg) = sd.poly.middleCols(1, deg);
    if (!has_intercept) t_.col(deg) = sd.poly.col(0);
    t_.middleCols(deg + extra, data_.x_minus_z.cols()) = data_.x_minus_z;
    t_.rightCols(k_knots_) = sd.radial;
  } else {
    t_ = data_.outcome_design();
    p_fixed_ = t_.cols();
  }
  tt_ = t_.transpose() * t_;

  xe_ = data_.exposure_x();
  if (cfg_.exposure_transform == ExposureTransform::log) {
    if ((data_.z.array() <= 0.0).any()) throw DataError("log exposure transform needs positive exposures");
    zj_ = data_.z.array().log();
  } else {
    zj_ = data_.z;
  }
  degrees_ = graph_.degrees();
  if (flags_.has_u) {
    spectrum_ = GraphSpectrum::compute(graph_);
    coords_.emplace(flags_, *spectrum_);
  }
  if (flags_.kappa) kappa_.emplace(cfg_.priors.kappa_rate, cfg_.priors.surrogate);
  for (std::size_t i = 0; i < data_.censored.size(); ++i) {
    if (data_.censored[i]) censored_index_.push_back(int(i));
  }
}

double Chain::poisson_loglik(const Eigen::VectorXd& eta) const {
  double s = 0.0;
  for (Eigen::Index i = 0; i < n_; ++i) s += y_(i) * eta(i) - std::exp(eta(i));
  return s;
}

void Chain::refresh_eta() { eta_fixed_ = offset_ + t_ * theta_; }

void Chain::initialise() {
  y_ = data_.y;
  for (int i : censored_index_) y_(i) = std::floor(0.5 * (data_.censor_threshold - 1));
  // least-squares start on the link scale
  Eigen::VectorXd target = y_;
  if (cfg_.family == OutcomeFamily::poisson) target = (y_.array() + 0.5).log().matrix() - offset_;
  const Eigen::MatrixXd tf = t_.leftCols(p_fixed_);
  theta_ = Eigen::VectorXd::Zero(p_fixed_ + k_knots_);
  theta_.head(p_fixed_) = tf.colPivHouseholderQr().solve(target);
  gamma_ = xe_.cols() > 0 ? Eigen::VectorXd(xe_.colPivHouseholderQr().solve(zj_))
                          : Eigen::VectorXd(Eigen::VectorXd::Zero(0));
  u_ = Eigen::VectorXd::Zero(n_);
  psi_ = cfg_.spline && cfg_.spline->psi ? *cfg_.spline->psi : 1.0;
  refresh_eta();

  const double nan = std::numeric_limits<double>::quiet_NaN();
  v_ = VarianceParams{1.0, 0.1, 1.0, 0.05, 0.0, nan};
  if (!flags_.exposure) {
    v_.tau_z = nan;
    v_.phi_z = 0.0;
  }
  if (cfg_.family == OutcomeFamily::gaussian) {
    const double rv = (target - tf * theta_.head(p_fixed_)).squaredNorm() / double(std::max<Eigen::Index>(1, n_ - p_fixed_));
    v_.tau_eps = 1.0 / std::max(rv, 1e-8);
  }
  if (!flags_.has_u) {
    v_.tau_u = nan;
    v_.phi_u = 0.0;
  }

  if (flags_.has_u) {
    vx_ = coords_->encode(v_);
    const Eigen::VectorXd r = exposure_residual();
    const QuadStats qs = quad_stats(graph_, u_, flags_.exposure ? r : Eigen::VectorXd::Zero(n_));
    vlp_ = variance_log_target(v_, vx_, cfg_.chain.prior_only ? nullptr : &qs);
    if (!std::isfinite(vlp_)) {
      throw NotPositiveDefinite("initial variance parameters are infeasible: " + v_.describe());
    }
    var_prop_.emplace(flags_.dim, 0.15, 0.234);
    u_log_scale_ = Eigen::VectorXd::Constant(n_, std::log(0.5));
  }
  if (cfg_.family == OutcomeFamily::poisson) {
    beta_prop_.emplace(theta_.size(), 0.05, 0.234);
    // Fisher information at the start as the initial proposal shape
    const Eigen::VectorXd mu = (eta_fixed_ + u_).array().exp();
    Eigen::MatrixXd info = t_.transpose() * mu.asDiagonal() * t_;
    info.diagonal().head(p_fixed_).array() += 1.0 / (cfg_.priors.beta_sd * cfg_.priors.beta_sd);
    info.diagonal().tail(k_knots_).array() += psi_;
    info.diagonal().array() += 1e-8;
    beta_prop_->set_covariance(info.llt().solve(Eigen::MatrixXd::Identity(info.rows(), info.cols())));
  }
}

void Chain::update_coefficients() {
  const double prior_prec = 1.0 / (cfg_.priors.beta_sd * cfg_.priors.beta_sd);
  Eigen::VectorXd lam(theta_.size());
  lam.head(p_fixed_).setConstant(prior_prec);
  lam.tail(k_knots_).setConstant(psi_);
  if (cfg_.family == OutcomeFamily::gaussian) {
    Eigen::MatrixXd prec = v_.tau_eps * tt_;
    prec.diagonal() += lam;
    const Eigen::VectorXd lin = v_.tau_eps * (t_.transpose() * (y_ - u_));
    theta_ = mvn_from_precision(prec, lin, rng_);
    refresh_eta();
    return;
  }
  auto log_post = [&](const Eigen::VectorXd& th, const Eigen::VectorXd& eta) {
    return poisson_loglik(eta) - 0.5 * (lam.array() * th.array().square()).sum();
  };
  const Eigen::VectorXd cur_eta = eta_fixed_ + u_;
  const double cur = log_post(theta_, cur_eta);
  const Eigen::VectorXd prop = beta_prop_->propose(theta_, rng_);
  const Eigen::VectorXd prop_fixed = offset_ + t_ * prop;
  const double next = log_post(prop, prop_fixed + u_);
  std::uniform_real_distribution<double> unif;
  const bool ok = std::log(unif(rng_)) < next - cur;
  if (ok) {
    theta_ = prop;
    eta_fixed_ = prop_fixed;
  }
  if (adapting_) beta_prop_->record(theta_, ok);
  else {
    accept_["beta"].first += ok ? 1.0 : 0.0;
    accept_["beta"].second += 1.0;
  }
}

void Chain::update_gamma() {
  const auto k = xe_.cols();
  if (k == 0) return;
  // z | u ~ N(Xe gamma - H^{-1} Q u, H^{-1})
  Eigen::MatrixXd hx(n_, k);
  for (Eigen::Index j = 0; j < k; ++j) hx.col(j) = car_apply(graph_, v_.tau_z, v_.phi_z, xe_.col(j));
  Eigen::MatrixXd prec = xe_.transpose() * hx;
  prec.diagonal().array() += 1.0 / (cfg_.priors.beta_sd * cfg_.priors.beta_sd);
  const double qs = -v_.rho * std::sqrt(v_.tau_u * v_.tau_z);
  const Eigen::VectorXd qu = qs * degrees_.cwiseProduct(u_);
  const Eigen::VectorXd lin = hx.transpose() * zj_ + xe_.transpose() * qu;
  gamma_ = mvn_from_precision(0.5 * (prec + prec.transpose()), lin, rng_);
}

void Chain::update_u() {
  const double qs = flags_.rho_free ? -v_.rho * std::sqrt(v_.tau_u * v_.tau_z) : 0.0;
  const Eigen::VectorXd r = flags_.rho_free ? exposure_residual() : Eigen::VectorXd::Zero(n_);
  if (cfg_.family == OutcomeFamily::gaussian) {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(std::size_t(n_) + 2 * graph_.edge_count());
    for (Eigen::Index i = 0; i < n_; ++i) {
      trip.emplace_back(int(i), int(i), v_.tau_u * degrees_(i) + v_.tau_eps);
      for (int j : graph_.neighbors(std::size_t(i))) trip.emplace_back(int(i), j, -v_.tau_u * v_.phi_u);
    }
    Eigen::SparseMatrix<double> prec(n_, n_);
    prec.setFromTriplets(trip.begin(), trip.end());
    const Eigen::VectorXd lin =
        v_.tau_eps * (y_ - eta_fixed_) - qs * degrees_.cwiseProduct(r);
    u_sampler_.factorize(prec);
    u_ = u_sampler_.draw(lin, rng_);
    return;
  }
  // single-site random-walk Metropolis
  std::uniform_real_distribution<double> unif;
  std::normal_distribution<double> nd;
  const double step = std::min(1.0, 3.0 * std::pow(double(iter_ + 1), -0.6));
  double accepted = 0.0;
  for (Eigen::Index i = 0; i < n_; ++i) {
    const auto& nb = graph_.neighbors(std::size_t(i));
    double s = 0.0;
    for (int j : nb) s += u_(j);
    const double gii = v_.tau_u * degrees_(i);
    const double m = (v_.tau_u * v_.phi_u * s - qs * degrees_(i) * r(i)) / gii;
    const double cur = u_(i);
    const double prop = cur + std::exp(u_log_scale_(i)) * nd(rng_);
    const double base = std::exp(eta_fixed_(i));
    const double lr = y_(i) * (prop - cur) - base * (std::exp(prop) - std::exp(cur)) -
                      0.5 * gii * ((prop - m) * (prop - m) - (cur - m) * (cur - m));
    const bool ok = std::log(unif(rng_)) < lr;
    if (ok) u_(i) = prop;
    accepted += ok ? 1.0 : 0.0;
    if (adapting_) u_log_scale_(i) = std::clamp(u_log_scale_(i) + step * ((ok ? 1.0 : 0.0) - 0.44), -10.0, 3.0);
  }
  if (!adapting_) {
    accept_["u"].first += accepted / double(n_);
    accept_["u"].second += 1.0;
  }
}

double Chain::variance_log_target(const VarianceParams& v, const Eigen::VectorXd& x,
                                  const QuadStats* stats) const {
  if (flags_.rs && flags_.exposure && v.phi_z > v.phi_u) return kNegInf;
  const auto& pr = cfg_.priors;
  double lp = log_gamma_on_log_scale(v.tau_u, pr.tau_kind, pr.tau_shape, pr.tau_rate) +
              std::log1p(-v.phi_u * v.phi_u);
  if (flags_.exposure) {
    lp += log_gamma_on_log_scale(v.tau_z, pr.tau_kind, pr.tau_shape, pr.tau_rate) +
          std::log1p(-v.phi_z * v.phi_z);
  }
  if (flags_.rho_free) {
    // rho uniform on its feasible range given (phi_u, phi_z); sech^2 is the Jacobian of tanh
    const double th = std::tanh(x(4));
    lp += std::log1p(-th * th);
  }
  if (kappa_) {
    VarianceParams kv = v;
    if (!flags_.exposure) {
      kv.tau_z = 1.0;
      kv.phi_z = 0.0;
    }
    const double lk = kappa_->log_density(kv);
    if (!std::isfinite(lk)) return kNegInf;
    lp += lk;
  }
  if (!stats) return lp;
  if (flags_.exposure) {
    VarianceParams jv = v;
    if (!flags_.rho_free) jv.rho = 0.0;
    return lp + joint_log_density(*spectrum_, jv, *stats);
  }
  const double ld = spectrum_->car_log_det(v.u());
  return lp + 0.5 * ld - 0.5 * v.tau_u * (stats->du2 - v.phi_u * stats->uwu);
}

void Chain::update_variance() {
  const bool prior_only = cfg_.chain.prior_only;
  QuadStats qs;
  if (!prior_only) {
    qs = quad_stats(graph_, u_, flags_.exposure ? exposure_residual() : Eigen::VectorXd::Zero(n_));
    vlp_ = variance_log_target(v_, vx_, &qs);
  }
  std::uniform_real_distribution<double> unif;
  for (int step = 0; step < cfg_.chain.variance_steps; ++step) {
    const Eigen::VectorXd prop = var_prop_->propose(vx_, rng_);
    bool ok = false;
    if (auto pv = coords_->decode(prop, v_)) {
      const double lp = variance_log_target(*pv, prop, prior_only ? nullptr : &qs);
      if (std::isfinite(lp) && std::log(unif(rng_)) < lp - vlp_) {
        ok = true;
        v_ = *pv;
        vx_ = prop;
        vlp_ = lp;
      }
    }
    if (adapting_) var_prop_->record(vx_, ok);
    else {
      accept_["variance"].first += ok ? 1.0 : 0.0;
      accept_["variance"].second += 1.0;
    }
  }
}

void Chain::update_tau_eps() {
  const Eigen::VectorXd res = y_ - eta_fixed_ - u_;
  const auto& pr = cfg_.priors;
  double shape = 0.5 * double(n_), rate = 0.5 * res.squaredNorm();
  if (pr.tau_kind == TauPrior::gamma) {
    shape += pr.tau_shape;
    rate += pr.tau_rate;
  } else {
    shape -= 1.0;
  }
  v_.tau_eps = draw_gamma(shape, rate, rng_);
}

void Chain::update_psi() {
  if (k_knots_ == 0 || (cfg_.spline && cfg_.spline->psi)) return;
  const double ss = theta_.tail(k_knots_).squaredNorm();
  psi_ = draw_gamma(cfg_.priors.psi_shape + 0.5 * double(k_knots_), cfg_.priors.psi_rate + 0.5 * ss, rng_);
}

PosteriorSamples Chain::run() {
  const auto start = std::chrono::steady_clock::now();
  initialise();
  const auto& ch = cfg_.chain;
  const int keep = ch.retained();
  PosteriorSamples s;
  s.estimator = cfg_.estimator;
  s.family = cfg_.family;
  s.seed = ch.seed;
  s.spline = cfg_.spline;
  if (cfg_.spline) {
    const int deg = cfg_.spline->degree;
    for (int a = 1; a <= deg; ++a) s.beta_names.push_back(a == 1 ? "z" : "z^" + std::to_string(a));
    if (p_fixed_ - deg - data_.x_minus_z.cols() == 1) s.beta_names.push_back("intercept");
    for (const auto& nm : data_.coefficient_names()) {
      if (nm != "z") s.beta_names.push_back(nm);
    }
  } else {
    s.beta_names = data_.coefficient_names();
  }
  if (flags_.exposure) s.gamma_names = data_.exposure_coefficient_names();
  s.beta.resize(keep, p_fixed_);
  s.knots.resize(keep, k_knots_);
  s.psi.resize(k_knots_ > 0 ? keep : 0);
  s.gamma.resize(keep, flags_.exposure ? xe_.cols() : 0);
  s.variance.resize(keep, 6);
  s.censored_index = censored_index_;
  s.imputed.resize(keep, Eigen::Index(censored_index_.size()));
  const int u_rows = ch.store_u_every > 0 ? (keep + ch.store_u_every - 1) / ch.store_u_every : 0;
  s.u.resize(u_rows, flags_.has_u ? n_ : 0);

  int stored = 0;
  for (iter_ = 0; iter_ < ch.iterations; ++iter_) {
    if (iter_ == ch.burn_in) {
      adapting_ = false;
      if (beta_prop_) beta_prop_->freeze();
      if (var_prop_) var_prop_->freeze();
    }
    if (!ch.prior_only) {
      update_coefficients();
      if (flags_.exposure) update_gamma();
      if (flags_.has_u) update_u();
      if (cfg_.family == OutcomeFamily::gaussian) update_tau_eps();
      update_psi();
    }
    if (flags_.has_u) update_variance();
    if (!ch.prior_only && !censored_index_.empty()) {
      const Eigen::VectorXd mu = (eta_fixed_ + u_).array().exp();
      underflows_ += impute_censored(y_, data_.censored, mu, data_.censor_threshold, rng_);
    }

    if (iter_ >= ch.burn_in && (iter_ - ch.burn_in + 1) % ch.thin == 0 && stored < keep) {
      s.beta.row(stored) = theta_.head(p_fixed_);
      s.knots.row(stored) = theta_.tail(k_knots_);
      if (k_knots_ > 0) s.psi(stored) = psi_;
      if (flags_.exposure) s.gamma.row(stored) = gamma_;
      s.variance.row(stored) << v_.tau_u, v_.phi_u, v_.tau_z, v_.phi_z, v_.rho, v_.tau_eps;
      for (std::size_t c = 0; c < censored_index_.size(); ++c) {
        s.imputed(stored, Eigen::Index(c)) = y_(censored_index_[c]);
      }
      if (u_rows > 0 && stored % ch.store_u_every == 0) s.u.row(stored / ch.store_u_every) = u_;
      ++stored;
    }
  }

  for (const auto& [name, c] : accept_) {
    const double rate = c.second > 0 ? c.first / c.second : 0.0;
    s.acceptance[name] = rate;
    if (rate < 0.01) {
      std::ostringstream w;
      w << "acceptance collapse in the " << name << " block (rate " << rate << ")";
      s.warnings.push_back(w.str());
    }
  }
  if (underflows_ > 0) {
    s.warnings.push_back("censored-count imputation fell back to the truncated mode " +
                         std::to_string(underflows_) + " times");
  }
  s.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

}  // namespace

PosteriorSamples run_chain(const ModelConfig& config, const Dataset& data, const AdjacencyGraph& graph) {
  Chain c(config, data, graph);
  return c.run();
}

// ---------------------------------------------------------------------------

double sample_quantile(Eigen::VectorXd x, double p) {
  if (x.size() == 0) throw DimensionMismatch("quantile of an empty sample");
  std::sort(x.data(), x.data() + x.size());
  const double h = (double(x.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<Eigen::Index>(std::floor(h));
  const auto hi = std::min(lo + 1, x.size() - 1);
  return x(lo) + (h - double(lo)) * (x(hi) - x(lo));
}

double monte_carlo_se(const Eigen::VectorXd& chain) {
  const auto m = chain.size();
  if (m < 4) throw DimensionMismatch("Monte Carlo error needs at least four draws");
  const auto b = static_cast<Eigen::Index>(std::floor(std::sqrt(double(m))));
  const auto len = m / b;
  Eigen::VectorXd means(b);
  for (Eigen::Index k = 0; k < b; ++k) means(k) = chain.segment(k * len, len).mean();
  const double var = (means.array() - means.mean()).square().sum() / double(b - 1);
  return std::sqrt(var / double(b));
}

double ks_statistic(Eigen::VectorXd x, const std::function<double(double)>& cdf) {
  const auto n = x.size();
  if (n == 0) throw DimensionMismatch("KS statistic of an empty sample");
  std::sort(x.data(), x.data() + n);
  double d = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = cdf(x(i));
    d = std::max({d, double(i + 1) / double(n) - f, f - double(i) / double(n)});
  }
  return d;
}

double ks_p_value(double d, Eigen::Index n) {
  const double sn = std::sqrt(double(n));
  const double lam = (sn + 0.12 + 0.11 / sn) * d;
  if (lam < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * double(k * k) * lam * lam);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

PaercSummary paerc_summary(const PosteriorSamples& s, PaercSummary::Mode mode,
                           const std::vector<double>& grid, double level) {
  if (s.draws() == 0) throw DimensionMismatch("no posterior draws to summarise");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("interval level must lie in (0, 1)");
  PaercSummary out;
  out.mode = mode;
  out.level = level;
  const double a = 0.5 * (1.0 - level);
  auto row = [&](double z, const Eigen::VectorXd& draws) {
    PaercRow r;
    r.z = z;
    r.log_mean = draws.mean();
    r.geometric_mean = std::exp(r.log_mean);
    r.lower = std::exp(sample_quantile(draws, a));
    r.upper = std::exp(sample_quantile(draws, 1.0 - a));
    return r;
  };
  if (mode == PaercSummary::Mode::coefficient) {
    out.rows.push_back(row(1.0, s.beta_z()));
    return out;
  }
  if (!s.spline) throw ConfigError("curve summaries need a spline fit");
  for (double z : grid) out.rows.push_back(row(z, s.curve_draws(z)));
  return out;
}

}  // namespace spatconf
