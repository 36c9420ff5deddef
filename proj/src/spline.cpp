#include "spatconf/spline.hpp"

#include "spatconf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace spatconf {

namespace {

bool is_constant_one(const Eigen::VectorXd& c) {
  return c.size() > 0 && (c.array() == 1.0).all();
}

}  // namespace

void SplineSpec::validate(const Eigen::VectorXd& z) const {
  if (degree < 1) throw ConfigError("spline degree must be positive");
  if (psi && !(*psi > 0.0)) throw ConfigError("spline roughness psi must be positive");
  for (Eigen::Index k = 1; k < knots.size(); ++k) {
    if (!(knots(k) > knots(k - 1))) throw ConfigError("spline knots must be strictly increasing");
  }
  if (knots.size() > 0 && z.size() > 0) {
    if (knots.minCoeff() < z.minCoeff() || knots.maxCoeff() > z.maxCoeff()) {
      throw ConfigError("spline knots must lie within the observed exposure range");
    }
  }
}

int default_knot_count(Eigen::Index n) { return static_cast<int>(std::min<Eigen::Index>(n / 4, 20)); }

Eigen::VectorXd quantile_knots(const Eigen::VectorXd& z, int count) {
  if (count < 0) throw ConfigError("knot count must be non-negative");
  if (z.size() == 0) throw DimensionMismatch("cannot place knots on an empty exposure vector");
  std::vector<double> s(z.data(), z.data() + z.size());
  std::sort(s.begin(), s.end());
  Eigen::VectorXd knots(count);
  const double m = double(s.size() - 1);
  for (int k = 1; k <= count; ++k) {
    const double h = m * double(k) / double(count + 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, s.size() - 1);
    knots(k - 1) = s[lo] + (h - double(lo)) * (s[hi] - s[lo]);
  }
  return knots;
}

SplineSpec default_spline(const Eigen::VectorXd& z, int degree) {
  SplineSpec spec;
  spec.degree = degree;
  spec.knots = quantile_knots(z, default_knot_count(z.size()));
  return spec;
}

SplineDesign spline_design(const Eigen::VectorXd& z, const SplineSpec& spec) {
  spec.validate(z);
  const auto n = z.size();
  SplineDesign d;
  d.poly.resize(n, spec.degree + 1);
  d.radial.resize(n, spec.knot_count());
  for (Eigen::Index i = 0; i < n; ++i) {
    double p = 1.0;
    for (int a = 0; a <= spec.degree; ++a) {
      d.poly(i, a) = p;
      p *= z(i);
    }
    for (Eigen::Index k = 0; k < spec.knot_count(); ++k) {
      d.radial(i, k) = std::pow(std::abs(z(i) - spec.knots(k)), spec.degree);
    }
  }
  return d;
}

Eigen::RowVectorXd anchored_basis(double z, const SplineSpec& spec) {
  Eigen::RowVectorXd b(spec.degree + spec.knot_count());
  double p = z;
  for (int a = 0; a < spec.degree; ++a) {
    b(a) = p;
    p *= z;
  }
  for (Eigen::Index k = 0; k < spec.knot_count(); ++k) {
    b(spec.degree + k) = std::pow(std::abs(z - spec.knots(k)), spec.degree) -
                         std::pow(std::abs(spec.knots(k)), spec.degree);
  }
  return b;
}

double CurveFit::evaluate(double z) const { return anchored_basis(z, spec).dot(curve_coef); }

Eigen::VectorXd CurveFit::evaluate(const Eigen::VectorXd& grid) const {
  Eigen::VectorXd out(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i) out(i) = evaluate(grid(i));
  return out;
}

double CurveFit::standard_error(double z) const {
  const Eigen::RowVectorXd b = anchored_basis(z, spec);
  return std::sqrt(std::max(0.0, double(b * curve_cov * b.transpose())));
}

CurveFit semiparametric_fit(const Dataset& data, const AdjacencyGraph& graph,
                            const SplineSpec& spec, Estimator estimator,
                            const RemlOptions& options) {
  data.validate();
  if (estimator == Estimator::nonspatial) {
    throw ConfigError("semiparametric fits need a spatial or affine estimator");
  }
  const SplineDesign sd = spline_design(data.z, spec);
  const int deg = spec.degree;
  const auto kn = spec.knot_count();
  const bool has_intercept =
      std::any_of(data.x_minus_z.colwise().begin(), data.x_minus_z.colwise().end(),
                  [](const auto& c) { return is_constant_one(c); });

  RemlDesign des;
  des.y = data.y;
  des.z = data.z;
  const auto extra = has_intercept ? 0 : 1;
  des.x.resize(data.n(), extra + deg + data.x_minus_z.cols());
  des.x.leftCols(deg) = sd.poly.middleCols(1, deg);
  if (!has_intercept) des.x.col(deg) = sd.poly.col(0);
  des.x.rightCols(data.x_minus_z.cols()) = data.x_minus_z;
  des.xe = data.exposure_x();
  des.l = sd.radial;
  RestrictedLikelihood rl(std::move(des), graph, options.backend);

  const bool estimate_psi = kn > 0 && !spec.psi;
  const double psi0 = spec.psi.value_or(1.0);
  using Mode = detail::ParamMap::Mode;
  const bool rs = restricts_scales(estimator);
  const Mode mode = is_affine(estimator) ? Mode::joint : (rs ? Mode::outcome_exposure : Mode::outcome);
  std::optional<KappaPrior> prior = is_affine(estimator) ? options.kappa_prior : std::nullopt;
  auto vf = detail::fit_variance(rl, mode, rs, estimate_psi, prior, options.optimizer,
                                 detail::default_start(rl), psi0);
  if (!estimate_psi) vf.psi = psi0;
  if (!is_affine(estimator)) vf.v.rho = 0.0;

  CurveFit out;
  out.spec = spec;
  out.psi = vf.psi;
  FitResult& f = out.fit;
  f.estimator = estimator;
  f.variance = vf.v;
  f.ci_level = options.ci_level;
  f.converged = vf.opt.converged;
  f.boundary = vf.boundary;
  f.evaluations = vf.opt.evaluations;
  f.diagnostics = detail::describe_fit(vf);
  f.objective = -vf.opt.value;

  Eigen::VectorXd y_adj = data.y;
  if (is_affine(estimator)) {
    const MeanEstimate m = rl.estimate(vf.v, vf.psi);
    f.gamma = m.gamma;
    y_adj -= rl.correction(vf.v, data.z - data.exposure_x() * m.gamma);
  }
  f.log_restricted_likelihood = rl.log_likelihood(vf.v, vf.psi);
  auto [theta, cov] = rl.penalized_solve(vf.v, vf.psi, y_adj);

  // theta = [poly (deg) | intercept? | covariates | knots]
  const auto p = rl.design().x.cols();
  std::vector<Eigen::Index> idx;
  for (int a = 0; a < deg; ++a) idx.push_back(a);
  for (Eigen::Index k = 0; k < kn; ++k) idx.push_back(p + k);
  const auto m = static_cast<Eigen::Index>(idx.size());
  out.curve_coef.resize(m);
  out.curve_cov.resize(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    out.curve_coef(a) = theta(idx[std::size_t(a)]);
    for (Eigen::Index b = 0; b < m; ++b) out.curve_cov(a, b) = cov(idx[std::size_t(a)], idx[std::size_t(b)]);
  }
  f.beta = theta.head(p);
  f.se = cov.diagonal().head(p).cwiseMax(0.0).cwiseSqrt();
  for (int a = 1; a <= deg; ++a) f.coef_names.push_back(a == 1 ? "z" : "z^" + std::to_string(a));
  if (!has_intercept) f.coef_names.push_back("intercept");
  for (const auto& name : data.coefficient_names()) {
    if (name != "z") f.coef_names.push_back(name);
  }
  f.gamma_names = data.exposure_coefficient_names();
  set_wald_intervals(f, options.ci_level);
  return out;
}

}  // namespace spatconf
