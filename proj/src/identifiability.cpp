#include "spatconf/identifiability.hpp"

#include "spatconf/errors.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/linear_estimators.hpp"

#include <boost/math/tools/minima.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

namespace spatconf {

namespace {

void check_phi(double phi) {
  if (!(std::abs(phi) < 1.0)) throw ConfigError("dependence parameter must lie in (-1, 1)");
}

double root(double phi) { return std::sqrt(1.0 - phi * phi); }

/// phi / (1 + sqrt(1 - phi^2)), the per-lag decay of the limiting inverse.
double decay(double phi) { return phi / (1.0 + root(phi)); }

/// Inverse of decay(): phi = 2t / (1 + t^2).
double phi_from_decay(double t) { return 2.0 * t / (1.0 + t * t); }

/// Least-squares ratio x_{l+1} / x_l over l = from..x.size() - 2.
double lag_ratio(const Eigen::VectorXd& x, int from) {
  double num = 0.0, den = 0.0;
  for (Eigen::Index l = from; l + 1 < x.size(); ++l) {
    num += x(l) * x(l + 1);
    den += x(l) * x(l);
  }
  return den > 0.0 ? num / den : 0.0;
}

std::string verdict_for(double signal, const IdentificationOptions& opt, const char* present,
                        const char* absent) {
  if (signal > opt.threshold) return present;
  if (signal <= opt.noise_floor) return absent;
  return "indeterminate";
}

/// Lag profile (entry (0, l), l = 0..n-1) of the circulant matrix with eigenvalues s(k).
Eigen::VectorXd circulant_row(const Eigen::VectorXd& s) {
  const auto n = s.size();
  Eigen::VectorXd row = Eigen::VectorXd::Zero(n);
  for (Eigen::Index l = 0; l < n; ++l) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      acc += s(k) * std::cos(2.0 * std::numbers::pi * double(k * l % n) / double(n));
    }
    row(l) = acc / double(n);
  }
  return row;
}

Eigen::VectorXd circulant_spectrum(const Eigen::VectorXd& row) {
  // symmetric rows give real eigenvalues; circulant_row is its own inverse up to 1/n
  return circulant_row(row) * double(row.size());
}

}  // namespace

void RingParams::validate() const {
  if (n < 3) throw ConfigError("the ring needs at least three sites");
  check_phi(phi_u);
  check_phi(phi_z);
  if (!(tau_u > 0.0 && tau_z > 0.0 && tau_eps > 0.0)) {
    throw ConfigError("precisions must be positive");
  }
  double floor = 1.0;
  for (int k = 0; k < n; ++k) {
    const double lam = std::cos(2.0 * std::numbers::pi * double(k) / double(n));
    floor = std::min(floor, (1.0 - phi_u * lam) * (1.0 - phi_z * lam));
  }
  const double exact = std::sqrt(floor);
  if (!(std::abs(rho) < exact)) {
    throw ConfigError("|rho| must stay below " + std::to_string(exact) + " for a PD joint precision");
  }
}

double stdc_determinant(int n, double phi) {
  check_phi(phi);
  if (n < 0) throw ConfigError("matrix order must be non-negative");
  const double s = root(phi);
  return (std::pow(1.0 + s, n + 1) - std::pow(1.0 - s, n + 1)) / (2.0 * s);
}

double car_ring_determinant(int n, double phi) {
  check_phi(phi);
  if (n < 3) throw ConfigError("ring determinant needs n >= 3");
  const double s = root(phi);
  const double first = (std::pow(1.0 + s, n) - std::pow(1.0 - s, n)) / s;
  const double second =
      phi * phi / (2.0 * s) * (std::pow(1.0 + s, n - 1) - std::pow(1.0 - s, n - 1)) + std::pow(phi, n);
  return first - 2.0 * second;
}

double ring_inverse_limit_entry(int lag, double phi) {
  check_phi(phi);
  if (lag < 0) throw ConfigError("lag must be non-negative");
  if (lag == 0) return 1.0 / (2.0 * root(phi));
  return std::pow(decay(phi), lag) / (2.0 * root(phi));
}

double ring_inverse_entry(int n, int lag, double phi) {
  check_phi(phi);
  if (n < 3) throw ConfigError("ring needs n >= 3");
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const double w = 2.0 * std::numbers::pi * double(k) / double(n);
    acc += std::cos(w * double(lag)) / (2.0 - 2.0 * phi * std::cos(w));
  }
  return acc / double(n);
}

double limit_prec_z_entry(int lag, const RingParams& p) {
  if (lag < 0) throw ConfigError("lag must be non-negative");
  check_phi(p.phi_u);
  const double leak = 4.0 * p.rho * p.rho * ring_inverse_limit_entry(lag, p.phi_u);
  const double own = lag == 0 ? 2.0 : (lag == 1 ? -p.phi_z : 0.0);
  return p.tau_z * (own - leak);
}

double limit_var_y_given_z_entry(int lag, const RingParams& p) {
  if (lag < 1) throw ConfigError("off-diagonal entries need lag >= 1");
  return ring_inverse_limit_entry(lag, p.phi_u) / p.tau_u;
}

RingMoments population_moments(const RingParams& p, int max_lag) {
  p.validate();
  const int n = p.n;
  const int lags = std::min(max_lag, n / 2);
  const auto g = ring(n);
  const auto jp = build_joint_precision(g, {p.tau_u, p.phi_u}, {p.tau_z, p.phi_z}, p.rho);
  const Eigen::MatrixXd prec = marginal_z_precision_dense(jp);
  const Eigen::MatrixXd gd = jp.g().to_dense();
  const Eigen::MatrixXd ginv = gd.llt().solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd vy = ginv + Eigen::MatrixXd::Identity(n, n) / p.tau_eps;
  Eigen::MatrixXd mean = -ginv * jp.q().asDiagonal();
  mean.diagonal().array() += p.beta_z;

  RingMoments m;
  m.n = n;
  m.prec_z.resize(lags + 1);
  m.var_y_given_z.resize(lags + 1);
  m.mean_map.resize(lags + 1);
  const int i = n / 2;
  for (int l = 0; l <= lags; ++l) {
    m.prec_z(l) = prec(i, (i + l) % n);
    m.var_y_given_z(l) = vy(i, (i + l) % n);
    m.mean_map(l) = mean(i, (i + l) % n);
  }
  return m;
}

RingMoments sampled_moments(const RingParams& p, int reps, Rng& rng, int max_lag) {
  p.validate();
  if (reps < 1) throw ConfigError("sampled moments need at least one replicate");
  const int n = p.n;
  const int lags = std::min(max_lag, n / 2);
  const auto g = ring(n);
  const auto jp = build_joint_precision(g, {p.tau_u, p.phi_u}, {p.tau_z, p.phi_z}, p.rho);
  PrecisionSampler sampler(jp.full().to_sparse());
  std::normal_distribution<double> nd;

  Eigen::VectorXd czz = Eigen::VectorXd::Zero(n), cyz = Eigen::VectorXd::Zero(n),
                  cyy = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2 * n);
  for (int r = 0; r < reps; ++r) {
    const Eigen::VectorXd x = sampler.draw(zero, rng);
    const Eigen::VectorXd z = x.tail(n);
    Eigen::VectorXd y = p.beta_z * z + x.head(n);
    for (int i = 0; i < n; ++i) y(i) += nd(rng) / std::sqrt(p.tau_eps);
    for (int l = 0; l < n; ++l) {
      double zz = 0.0, yz = 0.0, yy = 0.0;
      for (int i = 0; i < n; ++i) {
        const int j = (i + l) % n;
        zz += z(i) * z(j);
        yz += 0.5 * (y(i) * z(j) + z(i) * y(j));
        yy += y(i) * y(j);
      }
      czz(l) += zz;
      cyz(l) += yz;
      cyy(l) += yy;
    }
  }
  const double scale = 1.0 / (double(reps) * double(n));
  // reflect so the rows are exactly symmetric
  auto symmetrise = [n, scale](const Eigen::VectorXd& c) {
    Eigen::VectorXd s(n);
    for (int l = 0; l < n; ++l) s(l) = 0.5 * scale * (c(l) + c((n - l) % n));
    return s;
  };
  const Eigen::VectorXd szz = circulant_spectrum(symmetrise(czz));
  const Eigen::VectorXd syz = circulant_spectrum(symmetrise(cyz));
  const Eigen::VectorXd syy = circulant_spectrum(symmetrise(cyy));
  const Eigen::VectorXd prec = circulant_row(szz.cwiseInverse());
  const Eigen::VectorXd mean = circulant_row(syz.cwiseQuotient(szz));
  const Eigen::VectorXd vy = circulant_row(syy - syz.cwiseProduct(syz).cwiseQuotient(szz));

  RingMoments m;
  m.n = n;
  m.prec_z = prec.head(lags + 1);
  m.var_y_given_z = vy.head(lags + 1);
  m.mean_map = mean.head(lags + 1);
  return m;
}

IdentificationReport identification_report(const RingMoments& m, const RingParams& truth,
                                           const IdentificationOptions& opt) {
  const auto lags = m.prec_z.size() - 1;
  if (lags < 3) throw ConfigError("identification needs moment profiles up to lag 3");
  IdentificationReport rep;
  rep.truth = truth;
  rep.threshold = opt.threshold;
  rep.tolerance = opt.tolerance;
  auto& out = rep.recovered;

  // Z alone: Prec[Z] vanishes beyond lag 1 iff rho * phi_u = 0.
  const double p0 = m.prec_z(0);
  rep.z_signal = m.prec_z.tail(lags - 1).cwiseAbs().maxCoeff() / std::abs(p0);
  rep.z_verdict = verdict_for(rep.z_signal, opt, "rho*phi_u != 0", "rho*phi_u = 0");

  // Var[Y | Z] is G^{-1} plus white noise; its off-diagonal part vanishes iff phi_u = 0.
  rep.y_signal = m.var_y_given_z.tail(lags).cwiseAbs().maxCoeff() / std::abs(m.var_y_given_z(0));
  const std::string y_state = verdict_for(rep.y_signal, opt, "spatial", "flat");
  if (rep.z_verdict == "indeterminate" || y_state == "indeterminate") {
    rep.verdict = "indeterminate";
    rep.notes.push_back("off-tridiagonal signal lies between the noise floor and the threshold");
    return rep;
  }
  const int n = m.n;

  if (rep.z_verdict == "rho*phi_u != 0") {
    const double phi_u = phi_from_decay(lag_ratio(m.prec_z, 2));
    const double leak = -m.prec_z(2) / ring_inverse_entry(n, 2, phi_u);  // 4 tau_z rho^2
    const double tau_z = 0.5 * (p0 + leak * ring_inverse_entry(n, 0, phi_u));
    out["phi_u"] = phi_u;
    out["tau_z"] = tau_z;
    out["abs_rho"] = std::sqrt(leak / (4.0 * tau_z));
    out["phi_z"] = -(m.prec_z(1) + leak * ring_inverse_entry(n, 1, phi_u)) / tau_z;
  }

  if (y_state == "flat") {
    rep.verdict = "non-identifiable";
    rep.notes.push_back("phi_u = 0: tau_u and tau_eps enter only through their sum and beta_z "
                        "is confounded with the exposure-driven part of U");
    out["total_variance"] = m.var_y_given_z(0);
    out["combined_coefficient"] = m.mean_map(0);
  } else {
    rep.verdict = "identifiable";
    const double phi_u_y = phi_from_decay(lag_ratio(m.var_y_given_z, 1));
    if (!out.contains("phi_u")) out["phi_u"] = phi_u_y;
    const double phi_u = out["phi_u"];
    // E[Y | Z] = beta_z I + c A(phi_u)^{-1}, c = 2 rho sqrt(tau_z / tau_u)
    Eigen::MatrixXd design(lags + 1, 2);
    for (Eigen::Index l = 0; l <= lags; ++l) {
      design(l, 0) = l == 0 ? 1.0 : 0.0;
      design(l, 1) = ring_inverse_entry(n, int(l), phi_u);
    }
    const Eigen::Vector2d coef = design.colPivHouseholderQr().solve(m.mean_map);
    out["beta_z"] = coef(0);
    double num = 0.0, den = 0.0;
    for (Eigen::Index l = 1; l <= lags; ++l) {
      num += m.var_y_given_z(l) * design(l, 1);
      den += design(l, 1) * design(l, 1);
    }
    const double tau_u_from_var = den / num;
    if (rep.z_verdict == "rho*phi_u = 0") {
      // phi_u != 0 here, so rho = 0 and Prec[Z] = tau_z A(phi_z)
      out["rho"] = 0.0;
      out["tau_z"] = 0.5 * p0;
      out["phi_z"] = -m.prec_z(1) / out["tau_z"];
      out["tau_u"] = tau_u_from_var;
    } else {
      const double sign = coef(1) >= 0.0 ? 1.0 : -1.0;
      const double rho = sign * out["abs_rho"];
      out["rho"] = rho;
      out["tau_u"] = 4.0 * rho * rho * out["tau_z"] / (coef(1) * coef(1));
      std::ostringstream note;
      note << "tau_u from Var[Y | Z] off-diagonals: " << tau_u_from_var;
      rep.notes.push_back(note.str());
    }
    out["tau_eps"] = 1.0 / (m.var_y_given_z(0) - design(0, 1) / out["tau_u"]);
  }

  const std::map<std::string, double> truth_values{
      {"phi_u", truth.phi_u}, {"phi_z", truth.phi_z},    {"tau_z", truth.tau_z},
      {"abs_rho", std::abs(truth.rho)}, {"rho", truth.rho}, {"beta_z", truth.beta_z},
      {"tau_u", truth.tau_u}, {"tau_eps", truth.tau_eps}};
  rep.within_tolerance = true;
  for (const auto& [name, value] : out) {
    auto it = truth_values.find(name);
    if (it == truth_values.end()) continue;
    const double err = std::abs(value - it->second);
    rep.abs_error[name] = err;
    if (!(err <= opt.tolerance)) rep.within_tolerance = false;
  }
  return rep;
}

IdentificationReport identification_report(const RingParams& p, int n, double tol) {
  RingParams q = p;
  q.n = n;
  IdentificationOptions opt;
  opt.tolerance = tol;
  return identification_report(population_moments(q), q, opt);
}

FlatnessReport nonspatial_flatness_check(const Dataset& data, int curve_points,
                                         double sigma2_drift) {
  data.validate();
  if (curve_points < 1) throw ConfigError("the flatness curve needs at least one point");
  const RemlDesign des = RemlDesign::from_dataset(data);
  const auto rl = RestrictedLikelihood::independent(des);
  const auto n = des.y.size();

  FlatnessReport rep;
  auto residual_ss = [](const Eigen::MatrixXd& x, const Eigen::VectorXd& v) {
    if (x.cols() == 0) return v.squaredNorm();
    const Eigen::VectorXd fit = x * x.colPivHouseholderQr().solve(v);
    return (v - fit).squaredNorm();
  };
  rep.closed_form_sigma2 = residual_ss(des.x, des.y) / double(n - des.x.cols());
  rep.closed_form_phi = double(n - des.xe.cols()) / residual_ss(des.xe, des.z);

  // the restricted likelihood separates into a sigma2 part and a phi part
  auto at = [](double sigma2, double phi, double share, double rho) {
    VarianceParams v;
    v.tau_u = 1.0 / (share * sigma2);
    v.tau_eps = 1.0 / ((1.0 - share) * sigma2);
    v.tau_z = phi / (1.0 - rho * rho);
    v.rho = rho;
    return v;
  };
  const int bits = std::numeric_limits<double>::digits / 2;
  const double s0 = std::log(std::max(1e-12, (des.y.array() - des.y.mean()).square().mean()));
  auto out_obj = [&](double ls) { return -rl.outcome_log_likelihood(at(std::exp(ls), 1.0, 0.5, 0.0)); };
  rep.sigma2_hat = std::exp(boost::math::tools::brent_find_minima(out_obj, s0 - 8.0, s0 + 8.0, bits).first);
  const double z0 = -std::log(std::max(1e-12, des.z.squaredNorm() / double(n)));
  auto exp_obj = [&](double lp) { return -rl.exposure_log_likelihood(at(1.0, std::exp(lp), 0.5, 0.0)); };
  rep.phi_hat = std::exp(boost::math::tools::brent_find_minima(exp_obj, z0 - 8.0, z0 + 8.0, bits).first);

  double ref = 0.0;
  for (int k = 0; k < curve_points; ++k) {
    const double t = curve_points == 1 ? 0.0 : double(k) / double(curve_points - 1);
    const double sigma2 = rep.sigma2_hat * (1.0 + sigma2_drift * t);
    const double val = rl.log_likelihood(at(sigma2, rep.phi_hat, 0.05 + 0.9 * t, -0.9 + 1.8 * t));
    if (k == 0) ref = val;
    rep.max_deviation = std::max(rep.max_deviation, std::abs(val - ref));
  }
  return rep;
}

}  // namespace spatconf
