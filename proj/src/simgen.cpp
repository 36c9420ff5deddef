#include "spatconf/simgen.hpp"

#include "spatconf/errors.hpp"
#include "spatconf/linear_estimators.hpp"
#include "spatconf/spline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <thread>

namespace spatconf {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// |U| bound for the atan-warped mechanism; latent sites beyond it are redrawn.
constexpr double kWarpBound = 1.4;

bool joint_mechanism(Mechanism m) { return m != Mechanism::gm5; }

Eigen::VectorXd draw_field(const SparseSymMatrix& prec, Rng& rng) {
  PrecisionSampler s(prec.to_sparse());
  return s.draw(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(prec.dim())), rng);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint32_t tag) {
  std::seed_seq seq{std::uint32_t(a), std::uint32_t(a >> 32), std::uint32_t(b), std::uint32_t(b >> 32), tag};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

}  // namespace

Mechanism parse_mechanism(const std::string& s) {
  std::string t;
  for (char c : s) {
    if (c != ' ' && c != '_' && c != '-') t += char(std::tolower(static_cast<unsigned char>(c)));
  }
  if (t.rfind("gm", 0) == 0) t = t.substr(2);
  if (t == "1") return Mechanism::gm1;
  if (t == "2") return Mechanism::gm2;
  if (t == "3") return Mechanism::gm3;
  if (t == "4") return Mechanism::gm4;
  if (t == "5") return Mechanism::gm5;
  if (t == "6") return Mechanism::gm6;
  if (t == "nonlinear" || t == "sigmoid") return Mechanism::nonlinear;
  throw ConfigError("unknown generative mechanism '" + s + "'");
}

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::gm1: return "GM1";
    case Mechanism::gm2: return "GM2";
    case Mechanism::gm3: return "GM3";
    case Mechanism::gm4: return "GM4";
    case Mechanism::gm5: return "GM5";
    case Mechanism::gm6: return "GM6";
    case Mechanism::nonlinear: return "nonlinear";
  }
  return "GM2";
}

std::string mechanism_description(Mechanism m) {
  switch (m) {
    case Mechanism::gm1: return "Unconfounded";
    case Mechanism::gm2: return "Confounder at larger scale";
    case Mechanism::gm3: return "Confounder at smaller scale";
    case Mechanism::gm4: return "Same scales";
    case Mechanism::gm5: return "Non-constant conditional correlation";
    case Mechanism::gm6: return "Non-normal joint distribution";
    case Mechanism::nonlinear: return "Sigmoid exposure effect";
  }
  return "";
}

double nonlinear_truth(double z) { return 2.0 / (1.0 + std::exp(-6.0 * z)) - 1.0; }

AdjacencyGraph GenerativeConfig::resolved_graph() const { return graph ? *graph : ring(n); }

double GenerativeConfig::effect(double z) const { return nonlinear() ? nonlinear_truth(z) : beta_z * z; }

void GenerativeConfig::validate() const {
  if (graph) {
    if (static_cast<int>(graph->size()) != n) throw ConfigError("graph size does not match n");
    if (graph->has_isolated_node()) throw ConfigError("generative graph has an isolated node");
  } else if (n < 3) {
    throw ConfigError("the ring needs at least 3 sites");
  }
  if (!(params.tau_u > 0.0) || !(std::abs(params.phi_u) < 1.0)) {
    throw ConfigError("confounder CAR parameters out of range");
  }
  if (family == OutcomeFamily::gaussian && !(params.tau_eps > 0.0)) {
    throw ConfigError("Gaussian outcomes need tau_eps > 0");
  }
  if (!std::isfinite(beta_z)) throw ConfigError("beta_z must be finite");
  if (offset && (offset->size() != n || !offset->allFinite())) throw ConfigError("offset must have n finite entries");
  if (censor_below < 0) throw ConfigError("censoring threshold must be non-negative");
  if (joint_mechanism(mechanism)) {
    if (!(params.tau_z > 0.0) || !(std::abs(params.phi_z) < 1.0)) {
      throw ConfigError("exposure CAR parameters out of range");
    }
    build_joint_precision(resolved_graph(), params.u(), params.z(), params.rho);
  }
}

GenerativeConfig gm_config(Mechanism m) {
  GenerativeConfig c;
  c.mechanism = m;
  switch (m) {
    case Mechanism::gm1: c.params = {1.0, 0.5, 1.0, 0.2, 0.0, 1.0}; break;
    case Mechanism::gm2: c.params = {1.0, 0.5, 1.0, 0.2, 0.3, 1.0}; break;
    case Mechanism::gm3: c.params = {1.0, 0.2, 1.0, 0.5, 0.3, 1.0}; break;
    case Mechanism::gm4: c.params = {1.0, 0.35, 1.0, 0.35, 0.3, 1.0}; break;
    case Mechanism::gm5: c.params = {1.0, 0.5, 1.0, 0.0, 0.0, 1.0}; break;
    case Mechanism::gm6: c.params = {1.0, 0.5, 1.0, 0.2, 0.3, 1.0}; break;
    case Mechanism::nonlinear: c.params = {1.0, 0.5, 1.0, 0.2, 0.3, 1.0}; break;
  }
  return c;
}

std::vector<GenerativeConfig> gm_catalog() {
  std::vector<GenerativeConfig> out;
  for (auto m : {Mechanism::gm1, Mechanism::gm2, Mechanism::gm3, Mechanism::gm4, Mechanism::gm5,
                 Mechanism::gm6, Mechanism::nonlinear}) {
    out.push_back(gm_config(m));
  }
  return out;
}

GeneratedData generate_dataset(const GenerativeConfig& config) {
  config.validate();
  const AdjacencyGraph g = config.resolved_graph();
  const auto n = static_cast<Eigen::Index>(config.n);
  const auto& p = config.params;
  Rng rng(config.seed);
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  std::normal_distribution<double> nd;

  Eigen::VectorXd x(n);
  for (auto& v : x) v = unif(rng);

  Eigen::VectorXd latent, u, z;
  if (config.mechanism == Mechanism::gm5) {
    latent = draw_field(car_precision(g, p.u()), rng);
    u = latent;
    z.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = u(i) + x(i) + nd(rng);
  } else {
    const JointPrecision jp = build_joint_precision(g, p.u(), p.z(), p.rho);
    const Eigen::VectorXd draw = draw_field(jp.full(), rng);
    latent = draw.head(n);
    const Eigen::VectorXd r = draw.tail(n);
    if (config.mechanism == Mechanism::gm6) {
      // resample offending sites from their full conditional until every
      // atan(latent) is inside the bound
      const double wmax = std::tan(kWarpBound);
      const Eigen::VectorXd qd = jp.q();
      for (bool clean = false; !clean;) {
        clean = true;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (std::abs(latent(i)) <= wmax) continue;
          clean = false;
          const auto& nb = g.neighbors(std::size_t(i));
          double s = 0.0;
          for (int j : nb) s += latent(j);
          const double gii = p.tau_u * double(nb.size());
          const double mean = (p.tau_u * p.phi_u * s - qd(i) * r(i)) / gii;
          do {
            latent(i) = mean + nd(rng) / std::sqrt(gii);
          } while (std::abs(latent(i)) > wmax);
        }
      }
      u = latent.array().atan();
    } else {
      u = latent;
    }
    z = x + r;
  }
  if (config.u_mean_x) u += x;

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double eta = config.effect(z(i)) + x(i) + u(i) + (config.offset ? (*config.offset)(i) : 0.0);
    if (config.family == OutcomeFamily::poisson) {
      std::poisson_distribution<long long> pd(std::exp(eta));
      y(i) = double(pd(rng));
    } else {
      y(i) = eta + nd(rng) / std::sqrt(p.tau_eps);
    }
  }

  Dataset d;
  d.y = y;
  d.z = z;
  d.x_minus_z.resize(n, 2);
  d.x_minus_z.col(0).setOnes();
  d.x_minus_z.col(1) = x;
  d.covariate_names = {"intercept", "x"};
  if (config.family == OutcomeFamily::poisson) {
    d.offset = config.offset ? *config.offset : Eigen::VectorXd::Zero(n);
    if (config.censor_below > 0) {
      d.censor_threshold = config.censor_below;
      d.censored.assign(std::size_t(n), 0);
      for (Eigen::Index i = 0; i < n; ++i) d.censored[std::size_t(i)] = y(i) < config.censor_below ? 1 : 0;
      if (!d.any_censored()) d.censored.clear();
    }
  }
  d.ids.reserve(std::size_t(n));
  for (Eigen::Index i = 0; i < n; ++i) d.ids.push_back(std::to_string(i + 1));

  TruthRecord rec;
  rec.mechanism = config.mechanism;
  rec.params = p;
  rec.beta_z = config.beta_z;
  rec.u = u;
  rec.latent = latent;
  rec.seed = config.seed;
  return GeneratedData{std::move(d), g, SealedTruth(std::move(rec))};
}

// ---------------------------------------------------------------------------

CountyLayout county_layout(int n, std::uint64_t seed, int k) {
  if (n < 10) throw ConfigError("county layout needs at least 10 sites");
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::lognormal_distribution<double> pop(std::log(6000.0), 1.1);
  Eigen::MatrixXd coords(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    coords(i, 0) = 2.0 * unif(rng);
    coords(i, 1) = unif(rng);
  }
  Eigen::VectorXd population(n);
  for (auto& v : population) v = std::max(50.0, std::round(pop(rng)));
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "C%05d", i + 1);
    ids.emplace_back(buf);
  }
  return CountyLayout{knn_graph(coords, k), coords, population, ids};
}

FitMethod parse_fit_method(const std::string& s) {
  if (s == "bayesian" || s == "bayes" || s == "gibbs") return FitMethod::bayesian;
  if (s == "likelihood" || s == "reml") return FitMethod::likelihood;
  throw ConfigError("unknown fit method '" + s + "'");
}

std::string to_string(FitMethod m) { return m == FitMethod::bayesian ? "bayesian" : "likelihood"; }

void StudyConfig::validate() const {
  if (reps < 1) throw ConfigError("a study needs at least one replicate");
  if (estimators.empty()) throw ConfigError("a study needs at least one estimator");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("interval level must lie in (0, 1)");
  if (spline_degree < 1) throw ConfigError("spline degree must be positive");
  if (method == FitMethod::likelihood && generator.family == OutcomeFamily::poisson) {
    throw ConfigError("likelihood fits need Gaussian outcomes; use Bayesian fits for counts");
  }
  generator.validate();
  if (method == FitMethod::bayesian) {
    ModelConfig m = model;
    m.family = generator.family;
    m.spline.reset();
    m.validate();
  }
}

std::vector<double> default_curve_grid() {
  std::vector<double> g(101);
  for (int i = 0; i <= 100; ++i) g[std::size_t(i)] = -1.5 + 0.03 * i;
  return g;
}

std::uint64_t replicate_seed(std::uint64_t master, int rep) { return mix_seed(master, std::uint64_t(rep), 0x52u); }

std::uint64_t fit_seed(std::uint64_t replicate, int estimator_index) {
  return mix_seed(replicate, std::uint64_t(estimator_index), 0x46u);
}

const StudyRow& SimulationSummary::row(Estimator e) const {
  for (const auto& r : rows) {
    if (r.estimator == e) return r;
  }
  throw ConfigError("estimator " + to_string(e) + " was not part of the study");
}

Eigen::Index SimulationSummary::point_index(double z) const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (std::abs(points[i] - z) < 1e-9) return Eigen::Index(i);
  }
  throw ConfigError("z = " + std::to_string(z) + " is not a study point");
}

FitResult likelihood_fit(const Dataset& data, const AdjacencyGraph& graph, Estimator estimator,
                         const PriorConfig& priors, double ci_level) {
  RemlOptions opt;
  opt.ci_level = ci_level;
  switch (estimator) {
    case Estimator::nonspatial: return ols_fit(data, ci_level);
    case Estimator::spatial: return gls_fit(data, graph, false, opt);
    case Estimator::spatial_rs: return gls_fit(data, graph, true, opt);
    case Estimator::affine:
    case Estimator::affine_rs: break;
  }
  std::optional<KappaPrior> kappa;
  if (priors.kappa_active(estimator)) kappa.emplace(priors.kappa_rate, priors.surrogate);
  return affine_fit_reml(data, graph, restricts_scales(estimator), kappa, opt);
}

ReplicateResult fit_replicate(const StudyConfig& config, const Dataset& data, const AdjacencyGraph& graph,
                              Estimator estimator, std::uint64_t seed, const std::vector<double>& points) {
  const auto start = std::chrono::steady_clock::now();
  ReplicateResult r;
  r.estimator = estimator;
  r.seed = seed;
  const bool curve = config.curve_study();
  const auto np = static_cast<Eigen::Index>(points.size());
  const double truth = config.generator.beta_z;
  try {
    if (config.method == FitMethod::bayesian) {
      ModelConfig m = config.model;
      m.family = config.generator.family;
      m.estimator = estimator;
      m.chain.seed = seed;
      if (config.flat_priors_without_kappa && !m.priors.kappa_active(estimator)) m.priors.tau_kind = TauPrior::flat;
      if (curve) m.spline = default_spline(data.z, config.spline_degree);
      const PosteriorSamples s = run_chain(m, data, graph);
      const double a = 0.5 * (1.0 - config.ci_level);
      if (curve) {
        r.curve.resize(np);
        r.curve_lower.resize(np);
        r.curve_upper.resize(np);
        for (Eigen::Index k = 0; k < np; ++k) {
          const Eigen::VectorXd d = s.curve_draws(points[std::size_t(k)]);
          r.curve(k) = d.mean();
          r.curve_lower(k) = sample_quantile(d, a);
          r.curve_upper(k) = sample_quantile(d, 1.0 - a);
        }
      } else {
        const Eigen::VectorXd b = s.beta_z();
        r.estimate = b.mean();
        r.lower = sample_quantile(b, a);
        r.upper = sample_quantile(b, 1.0 - a);
      }
      r.warnings = s.warnings;
    } else {
      RemlOptions opt;
      opt.ci_level = config.ci_level;
      const double zq = normal_quantile_two_sided(config.ci_level);
      if (curve) {
        const SplineSpec spec = default_spline(data.z, config.spline_degree);
        const CurveFit cf = semiparametric_fit(data, graph, spec, estimator, opt);
        r.curve.resize(np);
        r.curve_lower.resize(np);
        r.curve_upper.resize(np);
        for (Eigen::Index k = 0; k < np; ++k) {
          const double z = points[std::size_t(k)];
          r.curve(k) = cf.evaluate(z);
          const double se = cf.standard_error(z);
          r.curve_lower(k) = r.curve(k) - zq * se;
          r.curve_upper(k) = r.curve(k) + zq * se;
        }
      } else {
        const FitResult f = likelihood_fit(data, graph, estimator, config.model.priors, config.ci_level);
        r.estimate = f.beta_z();
        r.lower = f.ci_lower(0);
        r.upper = f.ci_upper(0);
        if (!f.diagnostics.empty()) r.warnings.push_back(f.diagnostics);
      }
    }
    if (!curve) r.covered = r.lower <= truth && truth <= r.upper;
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

StudyRow aggregate(Estimator e, const std::vector<ReplicateResult>& results, double truth,
                   const std::vector<double>& points, const Eigen::VectorXd& truth_curve, double mad_lower,
                   double mad_upper) {
  StudyRow row;
  row.estimator = e;
  std::vector<const ReplicateResult*> ok;
  for (const auto& r : results) {
    if (r.estimator != e) continue;
    if (r.ok) ok.push_back(&r);
    else ++row.failures;
  }
  row.successes = int(ok.size());
  const auto k = static_cast<Eigen::Index>(ok.size());
  const bool curve = truth_curve.size() > 0;
  if (curve) {
    row.bias = row.se = row.rmse = row.coverage = kNaN;
    const auto np = static_cast<Eigen::Index>(points.size());
    row.mean_curve = Eigen::VectorXd::Constant(np, kNaN);
    row.curve_q_lo = row.mean_curve;
    row.curve_q_hi = row.mean_curve;
    row.pointwise_coverage = row.mean_curve;
    row.mean_curve_mad = row.replicate_mad = kNaN;
    if (k == 0) return row;
    Eigen::MatrixXd curves(k, np);
    Eigen::MatrixXd cover(k, np);
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto& r = *ok[std::size_t(i)];
      curves.row(i) = r.curve;
      for (Eigen::Index j = 0; j < np; ++j) {
        cover(i, j) = r.curve_lower(j) <= truth_curve(j) && truth_curve(j) <= r.curve_upper(j) ? 1.0 : 0.0;
      }
    }
    row.mean_curve = curves.colwise().mean();
    row.pointwise_coverage = cover.colwise().mean();
    for (Eigen::Index j = 0; j < np; ++j) {
      row.curve_q_lo(j) = sample_quantile(curves.col(j), 0.025);
      row.curve_q_hi(j) = sample_quantile(curves.col(j), 0.975);
    }
    double mad = 0.0, rep_mad = 0.0;
    int in_range = 0;
    for (Eigen::Index j = 0; j < np; ++j) {
      const double z = points[std::size_t(j)];
      if (z < mad_lower - 1e-12 || z > mad_upper + 1e-12) continue;
      ++in_range;
      mad += std::abs(row.mean_curve(j) - truth_curve(j));
      rep_mad += (curves.col(j).array() - truth_curve(j)).abs().mean();
    }
    if (in_range > 0) {
      row.mean_curve_mad = mad / in_range;
      row.replicate_mad = rep_mad / in_range;
    }
    return row;
  }
  if (k == 0) {
    row.bias = row.se = row.rmse = row.coverage = kNaN;
    return row;
  }
  Eigen::VectorXd err(k);
  double covered = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    err(i) = ok[std::size_t(i)]->estimate - truth;
    covered += ok[std::size_t(i)]->covered ? 1.0 : 0.0;
  }
  row.bias = err.mean();
  row.se = k > 1 ? std::sqrt((err.array() - row.bias).square().sum() / double(k - 1)) : kNaN;
  row.rmse = std::sqrt(err.squaredNorm() / double(k));
  row.coverage = covered / double(k);
  return row;
}

SimulationSummary run_study(const StudyConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  config.validate();
  SimulationSummary out;
  out.config = config;
  const bool curve = config.curve_study();
  if (curve) {
    std::vector<double> pts = config.curve_grid.empty() ? default_curve_grid() : config.curve_grid;
    pts.insert(pts.end(), config.extra_points.begin(), config.extra_points.end());
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end(), [](double a, double b) { return std::abs(a - b) < 1e-9; }),
              pts.end());
    out.points = pts;
    out.truth_curve.resize(Eigen::Index(pts.size()));
    const double f0 = config.generator.effect(0.0);
    for (std::size_t j = 0; j < pts.size(); ++j) out.truth_curve(Eigen::Index(j)) = config.generator.effect(pts[j]) - f0;
  }

  const std::size_t ne = config.estimators.size();
  std::vector<ReplicateResult> results(std::size_t(config.reps) * ne);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int rep = next++; rep < config.reps; rep = next++) {
      const std::uint64_t rs = replicate_seed(config.master_seed, rep);
      GenerativeConfig gc = config.generator;
      gc.seed = rs;
      std::optional<GeneratedData> gd;
      std::string gen_error;
      try {
        gd.emplace(generate_dataset(gc));
      } catch (const std::exception& e) {
        gen_error = std::string("data generation failed: ") + e.what();
      }
      for (std::size_t k = 0; k < ne; ++k) {
        ReplicateResult r;
        const std::uint64_t fs = fit_seed(rs, int(k));
        if (gd) {
          r = fit_replicate(config, gd->data, gd->graph, config.estimators[k], fs, out.points);
        } else {
          r.estimator = config.estimators[k];
          r.seed = fs;
          r.error = gen_error;
        }
        r.rep = rep;
        results[std::size_t(rep) * ne + k] = std::move(r);
      }
    }
  };
  if (config.threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < config.threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (Estimator e : config.estimators) {
    out.rows.push_back(aggregate(e, results, config.generator.beta_z, out.points, out.truth_curve,
                                 config.mad_lower, config.mad_upper));
  }
  out.replicates = std::move(results);
  out.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace spatconf
