#include "spatconf/linear_estimators.hpp"

#include "spatconf/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <sstream>

namespace spatconf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kInf = std::numeric_limits<double>::infinity();
// Unconstrained coordinates are confined to this box; beyond it precisions
// and correlations are numerically indistinguishable from their limits.
constexpr double kCoordLimit = 25.0;

Eigen::SparseMatrix<double> adjacency_matrix(const AdjacencyGraph& g) {
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(2 * g.edge_count());
  for (auto [i, j] : g.edges()) {
    t.emplace_back(i, j, 1.0);
    t.emplace_back(j, i, 1.0);
  }
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::SparseMatrix<double> w(n, n);
  w.setFromTriplets(t.begin(), t.end());
  return w;
}

bool valid_car(double tau, double phi) {
  return tau > 0.0 && std::isfinite(tau) && std::abs(phi) < 1.0;
}

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

double residual_variance(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const auto n = y.size();
  if (x.cols() == 0) return y.squaredNorm() / double(n);
  Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
  const double dof = std::max<double>(1.0, double(n - x.cols()));
  return std::max((y - x * beta).squaredNorm() / dof, 1e-8);
}

}  // namespace

RemlDesign RemlDesign::from_dataset(const Dataset& d) {
  d.validate();
  RemlDesign r;
  r.y = d.y;
  r.z = d.z;
  r.x = d.outcome_design();
  r.xe = d.exposure_x();
  r.l = Eigen::MatrixXd(d.n(), 0);
  return r;
}

// ---------------------------------------------------------------------------

struct RestrictedLikelihood::Ops {
  bool ok = true;
  bool spectral = false;
  double logdet_v = 0.0;
  double logdet_s = 0.0;
  // spectral backend: diagonal operators in the eigenbasis
  Eigen::VectorXd vdiag, sdiag, bdiag;
  bool woodbury = false;
  Eigen::MatrixXd vinv_l;
  Eigen::LLT<Eigen::MatrixXd> cap;
  // dense backend
  Eigen::LLT<Eigen::MatrixXd> v_llt;
  Eigen::MatrixXd s_mat;
  Eigen::MatrixXd ginv;
  Eigen::VectorXd q;

  Eigen::MatrixXd vinv(const Eigen::MatrixXd& a) const {
    if (!spectral) return v_llt.solve(a);
    Eigen::MatrixXd out = vdiag.cwiseInverse().asDiagonal() * a;
    if (woodbury) out -= vinv_l * cap.solve(vinv_l.transpose() * a);
    return out;
  }
  Eigen::MatrixXd smul(const Eigen::MatrixXd& a) const {
    if (spectral) return sdiag.asDiagonal() * a;
    return s_mat * a;
  }
  Eigen::MatrixXd bmul(const Eigen::MatrixXd& a) const {
    if (spectral) return bdiag.asDiagonal() * a;
    return ginv * (q.asDiagonal() * a);
  }
};

RestrictedLikelihood::RestrictedLikelihood(RemlDesign design, GraphSpectrum spectrum,
                                           Eigen::SparseMatrix<double> w, Backend backend)
    : design_(std::move(design)), spectrum_(std::move(spectrum)), w_(std::move(w)), backend_(backend) {
  prepare();
}

RestrictedLikelihood::RestrictedLikelihood(RemlDesign design, const AdjacencyGraph& graph,
                                           Backend backend)
    : design_(std::move(design)), backend_(backend) {
  if (backend_ == Backend::automatic) {
    backend_ = graph.is_regular() ? Backend::spectral : Backend::dense;
  }
  if (backend_ == Backend::spectral && !graph.is_regular()) {
    throw ConfigError("spectral likelihood backend needs a graph with constant degree");
  }
  if (static_cast<std::size_t>(design_.y.size()) != graph.size()) {
    throw DimensionMismatch("dataset has " + std::to_string(design_.y.size()) +
                            " rows but the graph has " + std::to_string(graph.size()) + " nodes");
  }
  spectrum_ = GraphSpectrum::compute(graph, backend_ == Backend::spectral);
  w_ = adjacency_matrix(graph);
  prepare();
}

RestrictedLikelihood RestrictedLikelihood::independent(RemlDesign design, Backend backend) {
  const auto n = design.y.size();
  if (backend == Backend::automatic) backend = Backend::spectral;
  // identity eigenbasis; the working-basis transforms are skipped for it
  GraphSpectrum spec = GraphSpectrum::independent(static_cast<std::size_t>(n), false);
  Eigen::SparseMatrix<double> w(n, n);
  return RestrictedLikelihood(std::move(design), std::move(spec), std::move(w), backend);
}

void RestrictedLikelihood::prepare() {
  const auto n = design_.y.size();
  if (design_.z.size() != n || design_.x.rows() != n || design_.xe.rows() != n ||
      (design_.l.size() > 0 && design_.l.rows() != n)) {
    throw DimensionMismatch("restricted likelihood design blocks do not conform");
  }
  if (design_.l.rows() != n) design_.l = Eigen::MatrixXd(n, 0);
  common_degree_ = spectrum_.degrees().size() > 0 ? spectrum_.degrees()(0) : 1.0;
  if (backend_ == Backend::dense) w_dense_ = Eigen::MatrixXd(w_);
  y_w_ = to_working(design_.y);
  z_w_ = to_working(design_.z);
  x_w_ = to_working(design_.x);
  xe_w_ = to_working(design_.xe);
  l_w_ = to_working(design_.l);
}

Eigen::MatrixXd RestrictedLikelihood::to_working(const Eigen::MatrixXd& a) const {
  if (backend_ == Backend::spectral && spectrum_.has_vectors()) {
    return spectrum_.vectors().transpose() * a;
  }
  return a;
}

Eigen::MatrixXd RestrictedLikelihood::from_working(const Eigen::MatrixXd& a) const {
  if (backend_ == Backend::spectral && spectrum_.has_vectors()) return spectrum_.vectors() * a;
  return a;
}


RestrictedLikelihood::Ops RestrictedLikelihood::operators(const VarianceParams& v, double psi,
                                                          bool need_v, bool need_s,
                                                          bool with_l) const {
  Ops ops;
  ops.spectral = backend_ == Backend::spectral;
  const auto n = this->n();
  const bool use_l = with_l && l_w_.cols() > 0;
  if (use_l && !(psi > 0.0 && std::isfinite(psi))) {
    ops.ok = false;
    return ops;
  }

  if (ops.spectral) {
    const double d0 = common_degree_;
    const Eigen::ArrayXd lam = spectrum_.lambda().array();
    const Eigen::ArrayXd g = v.tau_u * d0 * (1.0 - v.phi_u * lam);
    if (!(g > 0.0).all()) {
      ops.ok = false;
      return ops;
    }
    if (need_v) {
      ops.vdiag = (g.inverse() + 1.0 / v.tau_eps).matrix();
      ops.logdet_v = ops.vdiag.array().log().sum();
      if (use_l) {
        ops.woodbury = true;
        ops.vinv_l = ops.vdiag.cwiseInverse().asDiagonal() * l_w_;
        Eigen::MatrixXd cap = l_w_.transpose() * ops.vinv_l;
        cap.diagonal().array() += psi;
        ops.cap.compute(cap);
        if (ops.cap.info() != Eigen::Success) {
          ops.ok = false;
          return ops;
        }
        const Eigen::MatrixXd lc = ops.cap.matrixL();
        ops.logdet_v += 2.0 * lc.diagonal().array().log().sum() - double(l_w_.cols()) * std::log(psi);
      }
    }
    if (need_s) {
      const Eigen::ArrayXd h = v.tau_z * d0 * (1.0 - v.phi_z * lam);
      const double q = -v.rho * std::sqrt(v.tau_u * v.tau_z) * d0;
      const Eigen::ArrayXd s = h - q * q / g;
      if (!(s > 0.0).all()) {
        ops.ok = false;
        return ops;
      }
      ops.sdiag = s.matrix();
      ops.bdiag = (q / g).matrix();
      ops.logdet_s = s.log().sum();
    }
    return ops;
  }

  const Eigen::VectorXd& d = spectrum_.degrees();
  const bool need_g = need_v || (need_s && v.rho != 0.0);
  if (need_g) {
    Eigen::MatrixXd gm = -v.tau_u * v.phi_u * w_dense_;
    gm.diagonal() += v.tau_u * d;
    Eigen::LLT<Eigen::MatrixXd> gl(gm);
    if (gl.info() != Eigen::Success) {
      ops.ok = false;
      return ops;
    }
    ops.ginv = gl.solve(Eigen::MatrixXd::Identity(n, n));
  }
  if (need_v) {
    Eigen::MatrixXd vm = ops.ginv;
    vm.diagonal().array() += 1.0 / v.tau_eps;
    if (use_l) vm.noalias() += (1.0 / psi) * l_w_ * l_w_.transpose();
    ops.v_llt.compute(vm);
    if (ops.v_llt.info() != Eigen::Success) {
      ops.ok = false;
      return ops;
    }
    const Eigen::MatrixXd lv = ops.v_llt.matrixL();
    ops.logdet_v = 2.0 * lv.diagonal().array().log().sum();
  }
  if (need_s) {
    ops.s_mat = -v.tau_z * v.phi_z * w_dense_;
    ops.s_mat.diagonal() += v.tau_z * d;
    ops.q = -v.rho * std::sqrt(v.tau_u * v.tau_z) * d;
    if (v.rho != 0.0) {
      ops.s_mat.noalias() -= ops.q.asDiagonal() * ops.ginv * ops.q.asDiagonal();
    } else if (!need_g) {
      ops.ginv = Eigen::MatrixXd::Zero(n, n);
    }
    Eigen::LLT<Eigen::MatrixXd> sl(ops.s_mat);
    if (sl.info() != Eigen::Success) {
      ops.ok = false;
      return ops;
    }
    const Eigen::MatrixXd ls = sl.matrixL();
    if (!(ls.diagonal().array() > 0.0).all()) {
      ops.ok = false;
      return ops;
    }
    ops.logdet_s = 2.0 * ls.diagonal().array().log().sum();
  }
  return ops;
}

double RestrictedLikelihood::evaluate(const VarianceParams& v_in, double psi, Part part,
                                      MeanEstimate* out) const {
  VarianceParams v = v_in;
  if (part != Part::full) v.rho = 0.0;
  if (part != Part::exposure && !(valid_car(v.tau_u, v.phi_u) && v.tau_eps > 0.0 &&
                                  std::isfinite(v.tau_eps))) {
    return kNegInf;
  }
  if (part != Part::outcome && !valid_car(v.tau_z, v.phi_z)) return kNegInf;
  if (part == Part::full && !(std::abs(v.rho) < spectrum_.exact_rho_bound(v.phi_u, v.phi_z))) {
    return kNegInf;
  }

  const bool need_v = part != Part::exposure;
  const bool need_s = part != Part::outcome;
  const Ops ops = operators(v, psi, need_v, need_s, need_v);
  if (!ops.ok) return kNegInf;

  const auto p = x_w_.cols();
  const auto qn = xe_w_.cols();
  Eigen::MatrixXd ctmc;
  Eigen::VectorXd ctmn;
  double nmn = 0.0;
  double logdet_m = 0.0;

  if (part == Part::outcome) {
    Eigen::MatrixXd rhs(n(), p + 1);
    rhs << x_w_, y_w_;
    const Eigen::MatrixXd vr = ops.vinv(rhs);
    ctmc = x_w_.transpose() * vr.leftCols(p);
    ctmn = x_w_.transpose() * vr.col(p);
    nmn = y_w_.dot(vr.col(p));
    logdet_m = ops.logdet_v;
  } else if (part == Part::exposure) {
    Eigen::MatrixXd rhs(n(), qn + 1);
    rhs << xe_w_, z_w_;
    const Eigen::MatrixXd sr = ops.smul(rhs);
    ctmc = xe_w_.transpose() * sr.leftCols(qn);
    ctmn = xe_w_.transpose() * sr.col(qn);
    nmn = z_w_.dot(sr.col(qn));
    logdet_m = -ops.logdet_s;
  } else {
    Eigen::MatrixXd bx(n(), qn + 1);
    bx << xe_w_, z_w_;
    const Eigen::MatrixXd b = ops.bmul(bx);
    const Eigen::VectorXd nu_y = y_w_ + b.col(qn);
    Eigen::MatrixXd top(n(), p + qn + 1);
    top << x_w_, b.leftCols(qn), nu_y;
    const Eigen::MatrixXd vt = ops.vinv(top);
    const Eigen::MatrixXd sr = ops.smul(bx);
    const auto k = p + qn;
    ctmc = top.leftCols(k).transpose() * vt.leftCols(k);
    ctmn = top.leftCols(k).transpose() * vt.col(k);
    ctmc.bottomRightCorner(qn, qn) += xe_w_.transpose() * sr.leftCols(qn);
    ctmn.tail(qn) += xe_w_.transpose() * sr.col(qn);
    nmn = nu_y.dot(vt.col(k)) + z_w_.dot(sr.col(qn));
    logdet_m = ops.logdet_v - ops.logdet_s;
  }

  double logdet_c = 0.0;
  double quad = nmn;
  const auto k = ctmc.rows();
  Eigen::VectorXd theta(k);
  Eigen::MatrixXd cov(k, k);
  if (k > 0) {
    ctmc = 0.5 * (ctmc + ctmc.transpose());
    Eigen::LLT<Eigen::MatrixXd> cl(ctmc);
    if (cl.info() != Eigen::Success) return kNegInf;
    const Eigen::MatrixXd lc = cl.matrixL();
    if (!(lc.diagonal().array() > 0.0).all()) return kNegInf;
    logdet_c = 2.0 * lc.diagonal().array().log().sum();
    theta = cl.solve(ctmn);
    quad -= ctmn.dot(theta);
    if (out) cov = cl.solve(Eigen::MatrixXd::Identity(k, k));
  }
  if (out) {
    if (part == Part::exposure) {
      out->beta = Eigen::VectorXd(0);
      out->gamma = theta;
    } else {
      out->beta = theta.head(p);
      out->gamma = theta.tail(k - p);
    }
    out->cov = cov;
  }
  const double value = -0.5 * (logdet_m + logdet_c + quad);
  return std::isfinite(value) ? value : kNegInf;
}

double RestrictedLikelihood::log_likelihood(const VarianceParams& v, double psi) const {
  return evaluate(v, psi, Part::full, nullptr);
}

double RestrictedLikelihood::outcome_log_likelihood(const VarianceParams& v, double psi) const {
  return evaluate(v, psi, Part::outcome, nullptr);
}

double RestrictedLikelihood::exposure_log_likelihood(const VarianceParams& v) const {
  return evaluate(v, 1.0, Part::exposure, nullptr);
}

MeanEstimate RestrictedLikelihood::estimate(const VarianceParams& v, double psi) const {
  MeanEstimate m;
  if (!std::isfinite(evaluate(v, psi, Part::full, &m))) {
    throw NotPositiveDefinite("restricted likelihood undefined at " + v.describe());
  }
  return m;
}

MeanEstimate RestrictedLikelihood::outcome_estimate(const VarianceParams& v, double psi) const {
  MeanEstimate m;
  if (!std::isfinite(evaluate(v, psi, Part::outcome, &m))) {
    throw NotPositiveDefinite("outcome likelihood undefined at " + v.describe());
  }
  return m;
}

Eigen::VectorXd RestrictedLikelihood::g_inverse_apply(const VarianceParams& v,
                                                      const Eigen::VectorXd& x) const {
  if (!valid_car(v.tau_u, v.phi_u)) throw std::invalid_argument("invalid outcome CAR parameters");
  if (backend_ == Backend::spectral) {
    const Eigen::ArrayXd g =
        v.tau_u * common_degree_ * (1.0 - v.phi_u * spectrum_.lambda().array());
    return from_working((to_working(x).array().col(0) / g).matrix());
  }
  Eigen::MatrixXd gm = -v.tau_u * v.phi_u * w_dense_;
  gm.diagonal() += v.tau_u * spectrum_.degrees();
  return gm.llt().solve(x);
}

Eigen::VectorXd RestrictedLikelihood::correction(const VarianceParams& v,
                                                 const Eigen::VectorXd& r) const {
  const Eigen::VectorXd q = -v.rho * std::sqrt(v.tau_u * v.tau_z) * spectrum_.degrees();
  return -g_inverse_apply(v, (q.array() * r.array()).matrix());
}

Eigen::VectorXd RestrictedLikelihood::rho_direction(const VarianceParams& v,
                                                    const Eigen::VectorXd& r) const {
  const Eigen::VectorXd qstar = -std::sqrt(v.tau_u * v.tau_z) * spectrum_.degrees();
  return -g_inverse_apply(v, (qstar.array() * r.array()).matrix());
}

Eigen::MatrixXd RestrictedLikelihood::augmented_covariance(const VarianceParams& v,
                                                           const Eigen::MatrixXd& extra,
                                                           double psi) const {
  if (extra.rows() != n()) throw DimensionMismatch("augmented column length differs from n");
  const Ops ops = operators(v, psi, true, false, true);
  if (!ops.ok) throw NotPositiveDefinite("outcome covariance undefined at " + v.describe());
  Eigen::MatrixXd dw(n(), x_w_.cols() + extra.cols());
  dw << x_w_, to_working(extra);
  Eigen::MatrixXd info = dw.transpose() * ops.vinv(dw);
  info = 0.5 * (info + info.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 1e-12 * hi)) {
    throw DegenerateStandardError(
        "augmented design is numerically rank deficient; the correction direction lies in the "
        "column space of the outcome design");
  }
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> RestrictedLikelihood::penalized_solve(
    const VarianceParams& v, double psi, const Eigen::VectorXd& y_adj) const {
  const Ops ops = operators(v, psi, true, false, false);
  if (!ops.ok) throw NotPositiveDefinite("outcome covariance undefined at " + v.describe());
  const auto p = x_w_.cols();
  const auto k = l_w_.cols();
  Eigen::MatrixXd t(n(), p + k);
  t << x_w_, l_w_;
  const Eigen::MatrixXd vt = ops.vinv(t);
  Eigen::MatrixXd info = t.transpose() * vt;
  info.bottomRightCorner(k, k).diagonal().array() += psi;
  info = 0.5 * (info + info.transpose());
  const Eigen::VectorXd rhs = vt.transpose() * to_working(y_adj);
  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) throw RankDeficient("penalised spline system is singular");
  return {llt.solve(rhs), llt.solve(Eigen::MatrixXd::Identity(p + k, p + k))};
}

// ---------------------------------------------------------------------------

namespace detail {

ParamMap::ParamMap(Mode mode, bool restrict_scales, bool with_psi, const GraphSpectrum& spectrum)
    : mode_(mode), restrict_(restrict_scales), psi_(with_psi), spectrum_(&spectrum) {}

Eigen::Index ParamMap::dim() const {
  Eigen::Index d = 0;
  switch (mode_) {
    case Mode::outcome: d = 3; break;
    case Mode::exposure: d = 2; break;
    case Mode::outcome_exposure: d = 5; break;
    case Mode::joint: d = 6; break;
  }
  return d + (psi_ ? 1 : 0);
}

std::optional<std::pair<VarianceParams, double>> ParamMap::decode(const Eigen::VectorXd& x) const {
  if (x.size() != dim()) throw DimensionMismatch("parameter vector has the wrong length");
  if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kCoordLimit) return std::nullopt;
  VarianceParams v;
  v.phi_z = 0.0;
  double psi = 1.0;
  Eigen::Index k = 0;
  if (mode_ == Mode::exposure) {
    v.tau_z = std::exp(x(k++));
    v.phi_z = std::tanh(x(k++));
  } else {
    v.tau_u = std::exp(x(k++));
    v.phi_u = std::tanh(x(k++));
    v.tau_eps = std::exp(x(k++));
    if (mode_ != Mode::outcome) {
      v.tau_z = std::exp(x(k++));
      const double c = x(k++);
      v.phi_z = restrict_ ? -1.0 + (1.0 + v.phi_u) * sigmoid(c) : std::tanh(c);
    }
    if (mode_ == Mode::joint) {
      v.rho = spectrum_->exact_rho_bound(v.phi_u, v.phi_z) * std::tanh(x(k++));
    }
  }
  if (psi_) psi = std::exp(x(k++));
  if (std::abs(v.phi_u) >= 1.0 || std::abs(v.phi_z) >= 1.0) return std::nullopt;
  return std::pair{v, psi};
}

Eigen::VectorXd ParamMap::encode(const VarianceParams& v, double psi) const {
  Eigen::VectorXd x(dim());
  Eigen::Index k = 0;
  auto clamp = [](double a) { return std::clamp(a, -kCoordLimit + 1.0, kCoordLimit - 1.0); };
  if (mode_ == Mode::exposure) {
    x(k++) = clamp(std::log(v.tau_z));
    x(k++) = clamp(std::atanh(v.phi_z));
  } else {
    x(k++) = clamp(std::log(v.tau_u));
    x(k++) = clamp(std::atanh(v.phi_u));
    x(k++) = clamp(std::log(v.tau_eps));
    if (mode_ != Mode::outcome) {
      x(k++) = clamp(std::log(v.tau_z));
      if (restrict_) {
        const double frac = (v.phi_z + 1.0) / (1.0 + v.phi_u);
        x(k++) = clamp(std::log(frac / (1.0 - frac)));
      } else {
        x(k++) = clamp(std::atanh(v.phi_z));
      }
    }
    if (mode_ == Mode::joint) {
      const double b = spectrum_->exact_rho_bound(v.phi_u, v.phi_z);
      x(k++) = clamp(std::atanh(std::clamp(v.rho / b, -0.999999, 0.999999)));
    }
  }
  if (psi_) x(k++) = clamp(std::log(psi));
  return x;
}

}  // namespace detail

// ---------------------------------------------------------------------------

namespace detail {

VarianceParams default_start(const RestrictedLikelihood& rl) {
  const auto& d = rl.design();
  const double s2 = residual_variance(d.x, d.y);
  const double sz2 = residual_variance(d.xe, d.z);
  const double dbar = rl.spectrum().degrees().mean();
  VarianceParams v;
  v.tau_u = 2.0 / (s2 * dbar);
  v.phi_u = 0.5;
  v.tau_eps = 2.0 / s2;
  v.tau_z = 1.0 / (sz2 * dbar);
  v.phi_z = 0.2;
  v.rho = 0.0;
  return v;
}

bool on_boundary(const VarianceParams& v, ParamMap::Mode mode, const GraphSpectrum& spec) {
  auto far = [](double tau) { return std::abs(std::log(tau)) > 12.0; };
  bool b = false;
  if (mode != ParamMap::Mode::exposure) {
    b = b || far(v.tau_u) || far(v.tau_eps) || std::abs(v.phi_u) > 0.999;
  }
  if (mode != ParamMap::Mode::outcome) b = b || far(v.tau_z) || std::abs(v.phi_z) > 0.999;
  if (mode == ParamMap::Mode::joint) {
    b = b || std::abs(v.rho) > 0.999 * spec.exact_rho_bound(v.phi_u, v.phi_z);
  }
  return b;
}

VarianceFit fit_variance(const RestrictedLikelihood& rl, ParamMap::Mode mode, bool restrict_scales,
                         bool with_psi, const std::optional<KappaPrior>& prior,
                         const OptimizeOptions& opt, const VarianceParams& start, double psi0) {
  ParamMap map(mode, restrict_scales, with_psi, rl.spectrum());
  Objective f = [&](const Eigen::VectorXd& x) {
    auto dec = map.decode(x);
    if (!dec) return kInf;
    const auto& [v, psi] = *dec;
    double val = 0.0;
    switch (mode) {
      case ParamMap::Mode::outcome: val = rl.outcome_log_likelihood(v, psi); break;
      case ParamMap::Mode::exposure: val = rl.exposure_log_likelihood(v); break;
      case ParamMap::Mode::outcome_exposure:
        val = rl.outcome_log_likelihood(v, psi) + rl.exposure_log_likelihood(v);
        break;
      case ParamMap::Mode::joint: val = rl.log_likelihood(v, psi); break;
    }
    if (prior && mode == ParamMap::Mode::joint && std::isfinite(val)) val += prior->log_density(v);
    return std::isfinite(val) ? -val : kInf;
  };
  VarianceFit out;
  out.opt = minimize(f, map.encode(start, psi0), opt);
  auto dec = map.decode(out.opt.x);
  if (!dec) throw NotPositiveDefinite("optimiser finished outside the admissible region");
  out.v = dec->first;
  out.psi = dec->second;
  if (mode == ParamMap::Mode::exposure) {
    out.v.tau_u = start.tau_u;
    out.v.phi_u = start.phi_u;
    out.v.tau_eps = start.tau_eps;
  }
  out.boundary = on_boundary(out.v, mode, rl.spectrum());
  return out;
}

std::string describe_fit(const VarianceFit& vf) {
  std::ostringstream os;
  os << "evaluations=" << vf.opt.evaluations << " objective=" << vf.opt.value;
  if (!vf.opt.converged) os << " (optimizer did not converge)";
  if (vf.boundary) os << " (maximum on the parameter boundary)";
  return os.str();
}

}  // namespace detail

namespace {

using detail::ParamMap;
using detail::VarianceFit;
using detail::default_start;
using detail::describe_fit;
using detail::fit_variance;

Eigen::VectorXd sqrt_diag(const Eigen::MatrixXd& cov) {
  return cov.diagonal().cwiseMax(0.0).cwiseSqrt();
}

FitResult base_result(const Dataset& data, Estimator e, double level) {
  FitResult f;
  f.estimator = e;
  f.coef_names = data.coefficient_names();
  f.gamma_names = data.exposure_coefficient_names();
  f.ci_level = level;
  return f;
}

/// Outcome-only (and, with restrict_scales, exposure) fit under rho = 0.
VarianceFit fit_rho_zero(const RestrictedLikelihood& rl, const RemlOptions& options) {
  const VarianceParams start = default_start(rl);
  if (options.restrict_scales) {
    return fit_variance(rl, ParamMap::Mode::outcome_exposure, true, false, std::nullopt,
                        options.optimizer, start, 1.0);
  }
  VarianceFit out = fit_variance(rl, ParamMap::Mode::outcome, false, false, std::nullopt,
                                 options.optimizer, start, 1.0);
  VarianceParams with_outcome = start;
  with_outcome.tau_u = out.v.tau_u;
  with_outcome.phi_u = out.v.phi_u;
  with_outcome.tau_eps = out.v.tau_eps;
  VarianceFit ex = fit_variance(rl, ParamMap::Mode::exposure, false, false, std::nullopt,
                                options.optimizer, with_outcome, 1.0);
  out.v.tau_z = ex.v.tau_z;
  out.v.phi_z = ex.v.phi_z;
  out.opt.evaluations += ex.opt.evaluations;
  out.opt.converged = out.opt.converged && ex.opt.converged;
  out.boundary = out.boundary || ex.boundary;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

FitResult ols_fit(const Dataset& data, double ci_level) {
  data.validate();
  FitResult f = base_result(data, Estimator::nonspatial, ci_level);
  const Eigen::MatrixXd x = data.outcome_design();
  const auto n = x.rows();
  const auto p = x.cols();
  if (n <= p) throw RankDeficient("OLS needs more observations than coefficients");
  Eigen::LLT<Eigen::MatrixXd> llt(x.transpose() * x);
  f.beta = llt.solve(x.transpose() * data.y);
  const double rss = (data.y - x * f.beta).squaredNorm();
  const double s2 = rss / double(n - p);
  f.se = sqrt_diag(s2 * llt.solve(Eigen::MatrixXd::Identity(p, p)));
  f.variance.tau_eps = 1.0 / s2;
  f.variance.tau_u = std::numeric_limits<double>::quiet_NaN();
  f.variance.phi_u = 0.0;
  f.variance.tau_z = std::numeric_limits<double>::quiet_NaN();
  f.variance.rho = 0.0;
  set_wald_intervals(f, ci_level);
  return f;
}

FitResult gls_fixed_covariance(const Dataset& data, const Eigen::MatrixXd& cov, double ci_level) {
  data.validate();
  if (cov.rows() != data.n() || cov.cols() != data.n()) {
    throw DimensionMismatch("covariance dimension differs from n");
  }
  FitResult f = base_result(data, Estimator::spatial, ci_level);
  const Eigen::MatrixXd x = data.outcome_design();
  Eigen::LLT<Eigen::MatrixXd> vl(cov);
  if (vl.info() != Eigen::Success) throw NotPositiveDefinite("outcome covariance is not PD");
  const Eigen::MatrixXd vx = vl.solve(x);
  Eigen::LLT<Eigen::MatrixXd> il(x.transpose() * vx);
  f.beta = il.solve(vx.transpose() * data.y);
  f.se = sqrt_diag(il.solve(Eigen::MatrixXd::Identity(x.cols(), x.cols())));
  set_wald_intervals(f, ci_level);
  return f;
}

double restricted_log_likelihood(const VarianceParams& v, const Dataset& data,
                                 const AdjacencyGraph& graph) {
  RestrictedLikelihood rl(RemlDesign::from_dataset(data), graph);
  return rl.log_likelihood(v);
}

FitResult gls_fit(const Dataset& data, const AdjacencyGraph& graph, bool restrict_scales,
                  const RemlOptions& options) {
  RemlOptions opt = options;
  opt.restrict_scales = restrict_scales;
  RestrictedLikelihood rl(RemlDesign::from_dataset(data), graph, options.backend);
  return gls_fit(rl, data, opt);
}

FitResult gls_fit(const RestrictedLikelihood& rl, const Dataset& data, const RemlOptions& options) {
  FitResult f = base_result(data, options.restrict_scales ? Estimator::spatial_rs : Estimator::spatial,
                            options.ci_level);
  VarianceFit vf = fit_rho_zero(rl, options);
  vf.v.rho = 0.0;
  const MeanEstimate m = rl.outcome_estimate(vf.v);
  f.beta = m.beta;
  f.se = sqrt_diag(m.cov);
  f.gamma = rl.estimate(vf.v).gamma;
  f.variance = vf.v;
  f.log_restricted_likelihood = rl.log_likelihood(vf.v);
  f.objective = -vf.opt.value;
  f.converged = vf.opt.converged;
  f.boundary = vf.boundary;
  f.evaluations = vf.opt.evaluations;
  f.diagnostics = describe_fit(vf);
  set_wald_intervals(f, options.ci_level);
  return f;
}

FitResult affine_fit_reml(const Dataset& data, const AdjacencyGraph& graph, bool restrict_scales,
                          const std::optional<KappaPrior>& prior, RemlOptions options) {
  options.restrict_scales = restrict_scales;
  if (prior) options.kappa_prior = prior;
  RestrictedLikelihood rl(RemlDesign::from_dataset(data), graph, options.backend);
  return affine_fit_reml(rl, data, options);
}

FitResult affine_fit_reml(const RestrictedLikelihood& rl, const Dataset& data,
                          const RemlOptions& options) {
  FitResult f = base_result(data, options.restrict_scales ? Estimator::affine_rs : Estimator::affine,
                            options.ci_level);
  VarianceFit vf;
  if (options.fix_rho_zero) {
    vf = fit_rho_zero(rl, options);
    vf.v.rho = 0.0;
  } else {
    vf = fit_variance(rl, ParamMap::Mode::joint, options.restrict_scales, false,
                      options.kappa_prior, options.optimizer, default_start(rl), 1.0);
  }
  const MeanEstimate m = rl.estimate(vf.v);
  f.beta = m.beta;
  f.gamma = m.gamma;
  f.variance = vf.v;
  f.log_restricted_likelihood = rl.log_likelihood(vf.v);
  f.objective = -vf.opt.value;
  f.converged = vf.opt.converged;
  f.boundary = vf.boundary;
  f.evaluations = vf.opt.evaluations;
  f.diagnostics = describe_fit(vf);
  try {
    f.se = affine_standard_errors(f, rl);
  } catch (const DegenerateStandardError& e) {
    f.se = Eigen::VectorXd::Constant(f.beta.size(), std::numeric_limits<double>::quiet_NaN());
    f.diagnostics += std::string("; ") + e.what();
  }
  set_wald_intervals(f, options.ci_level);
  return f;
}

Eigen::VectorXd affine_standard_errors(const FitResult& fit, const RestrictedLikelihood& rl) {
  const auto& d = rl.design();
  if (fit.gamma.size() != d.xe.cols()) {
    throw DimensionMismatch("fit carries no exposure coefficients matching the design");
  }
  const Eigen::VectorXd r = d.z - d.xe * fit.gamma;
  const Eigen::MatrixXd col = rl.rho_direction(fit.variance, r);
  const Eigen::MatrixXd cov = rl.augmented_covariance(fit.variance, col);
  return sqrt_diag(cov).head(d.x.cols());
}

Eigen::VectorXd affine_standard_errors(const FitResult& fit, const Dataset& data,
                                       const AdjacencyGraph& graph) {
  RestrictedLikelihood rl(RemlDesign::from_dataset(data), graph);
  return affine_standard_errors(fit, rl);
}

Eigen::VectorXd naive_standard_errors(const FitResult& fit, const RestrictedLikelihood& rl) {
  return sqrt_diag(rl.outcome_estimate(fit.variance).cov);
}

}  // namespace spatconf
