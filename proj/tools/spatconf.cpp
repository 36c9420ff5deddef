// spatconf: fit, simulate, identify and generate from the command line.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// failure (a diagnostics.json is written to the output directory).

#include "spatconf/errors.hpp"
#include "spatconf/io.hpp"
#include "spatconf/linear_estimators.hpp"
#include "spatconf/spline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace spatconf;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

int verbosity = 0;

void note(const std::string& msg) {
  if (verbosity > 0) std::cerr << "[spatconf] " << msg << '\n';
}

std::string out_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
}

json provenance(const std::string& command, const json& config, std::uint64_t seed) {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = config;
  return j;
}

/// State shared with the error handler so failures can be documented.
struct RunContext {
  std::string command;
  std::string out_dir = ".";
  json config;
  std::uint64_t seed = 0;
};

int fail(const RunContext& ctx, int code, const std::string& kind, const std::string& what) {
  std::cerr << "spatconf " << ctx.command << ": " << kind << ": " << what << '\n';
  if (code == kExitNumerical) {
    try {
      ensure_dir(ctx.out_dir);
      json d = provenance(ctx.command, ctx.config, ctx.seed);
      d["error"] = {{"kind", kind}, {"message", what}};
      write_json(out_path(ctx.out_dir, "diagnostics.json"), d);
      std::cerr << "diagnostics written to " << out_path(ctx.out_dir, "diagnostics.json") << '\n';
    } catch (const std::exception& e) {
      std::cerr << "could not write diagnostics: " << e.what() << '\n';
    }
  }
  return code;
}

template <typename F>
int guarded(RunContext& ctx, F&& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    return fail(ctx, kExitConfig, "configuration error", e.what());
  } catch (const DataError& e) {
    return fail(ctx, kExitData, "data error", e.what());
  } catch (const InvalidGraph& e) {
    return fail(ctx, kExitData, "invalid graph", e.what());
  } catch (const DimensionMismatch& e) {
    return fail(ctx, kExitData, "dimension mismatch", e.what());
  } catch (const NotPositiveDefinite& e) {
    return fail(ctx, kExitNumerical, "not positive definite", e.what());
  } catch (const DegeneratePrecision& e) {
    return fail(ctx, kExitNumerical, "degenerate precision", e.what());
  } catch (const RankDeficient& e) {
    return fail(ctx, kExitNumerical, "rank deficient design", e.what());
  } catch (const DegenerateStandardError& e) {
    return fail(ctx, kExitNumerical, "degenerate standard error", e.what());
  } catch (const std::exception& e) {
    return fail(ctx, kExitNumerical, "numerical failure", e.what());
  }
}

std::string fixed(double v, int digits = 4) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  std::string data, adjacency, config, out = ".";
  std::optional<std::string> model, family, method, transform, tau_prior, kappa;
  std::optional<int> iterations, burn_in, thin, spline_degree, knots;
  std::optional<std::uint64_t> seed;
  std::optional<double> deaths_total, population_total, ci_level;
  bool spline = false;
};

std::vector<double> default_grid(const Eigen::VectorXd& z) {
  const double lo = z.minCoeff(), hi = z.maxCoeff();
  std::vector<double> g;
  for (int k = 0; k <= 40; ++k) g.push_back(lo + (hi - lo) * k / 40.0);
  return g;
}

void run_fit(const FitArgs& a, RunContext& ctx) {
  FitConfig cfg;
  if (!a.config.empty()) cfg = fit_config_from_json(read_json(a.config));
  if (a.model) cfg.model.estimator = parse_estimator(*a.model);
  if (a.family) cfg.model.family = parse_family(*a.family);
  if (a.method) cfg.method = parse_fit_method(*a.method);
  if (a.transform) cfg.model.exposure_transform = parse_transform(*a.transform);
  if (a.tau_prior) cfg.model.priors.tau_kind = parse_tau_prior(*a.tau_prior);
  if (a.kappa) cfg.model.priors.kappa = parse_kappa_use(*a.kappa);
  if (a.iterations) cfg.model.chain.iterations = *a.iterations;
  if (a.burn_in) cfg.model.chain.burn_in = *a.burn_in;
  if (a.thin) cfg.model.chain.thin = *a.thin;
  if (a.seed) cfg.model.chain.seed = *a.seed;
  if (a.deaths_total) cfg.deaths_total = *a.deaths_total;
  if (a.population_total) cfg.population_total = *a.population_total;
  if (a.ci_level) cfg.ci_level = *a.ci_level;
  if (a.spline || a.spline_degree || a.knots) {
    if (!cfg.spline) cfg.spline = SplineRequest{};
    if (a.spline_degree) cfg.spline->degree = *a.spline_degree;
    if (a.knots) cfg.spline->knot_count = *a.knots;
  }
  ctx.out_dir = a.out;
  ctx.seed = cfg.model.chain.seed;
  ctx.config = to_json(cfg);
  cfg.model.validate();

  IngestedData in = ingest_dataset(a.data, cfg.schema);
  Dataset& d = in.data;
  const AdjacencyGraph graph = read_adjacency(a.adjacency, in.index);
  note("read " + std::to_string(d.n()) + " units and " + std::to_string(graph.edge_count()) + " edges");

  json offset_info;
  if (cfg.model.family == OutcomeFamily::poisson) {
    if (d.offset) {
      offset_info["source"] = "offset column";
    } else if (in.population) {
      double observed = 0.0;
      for (Eigen::Index i = 0; i < d.n(); ++i) {
        if (d.censored.empty() || !d.censored[std::size_t(i)]) observed += d.y(i);
      }
      const double deaths = cfg.deaths_total.value_or(observed);
      const double pop = cfg.population_total.value_or(in.population->sum());
      d.offset = compute_offset(*in.population, deaths, pop, d.ids);
      offset_info = {{"source", "internal standardisation"}, {"deaths_total", deaths}, {"population_total", pop}};
    } else {
      d.offset = Eigen::VectorXd::Zero(d.n());
      offset_info["source"] = "none (zero offset)";
      std::cerr << "warning: no offset or population column; using a zero offset\n";
    }
  }

  Eigen::VectorXd z_model = d.z;
  if (cfg.model.exposure_transform == ExposureTransform::log) {
    if ((d.z.array() <= 0.0).any()) throw DataError("log exposure transform needs positive exposures");
    z_model = d.z.array().log();
  }
  std::optional<SplineSpec> spec;
  if (cfg.spline) spec = cfg.spline->resolve(z_model);
  const std::vector<double> grid = cfg.curve_grid.empty() ? default_grid(z_model) : cfg.curve_grid;

  ensure_dir(a.out);
  json report = provenance("fit", ctx.config, ctx.seed);
  report["inputs"] = {{"data", a.data}, {"adjacency", a.adjacency}, {"n", d.n()}, {"edges", graph.edge_count()}};
  if (!offset_info.is_null()) report["offset"] = offset_info;

  if (cfg.method == FitMethod::bayesian) {
    ModelConfig model = cfg.model;
    model.spline = spec;
    note("running " + std::to_string(model.chain.iterations) + " iterations of the " + to_string(model.estimator) +
         " sampler");
    const PosteriorSamples s = run_chain(model, d, graph);
    report["resolved_model"] = to_json(model);
    report["result"] = posterior_report(s, cfg.ci_level, grid);
    write_samples_csv(out_path(a.out, "samples.csv"), s, d.ids);
    write_json(out_path(a.out, "fit.json"), report);
    const auto& rr = spec ? report["result"]["curve"]["rows"].back() : report["result"]["relative_rate"];
    std::cout << (spec ? "relative rate at z = " + fixed(rr["z"].get<double>(), 3) : std::string("exp(beta_z)")) << ": "
              << fixed(rr["geometric_mean"].get<double>()) << " (" << fixed(rr["lower"].get<double>()) << ", "
              << fixed(rr["upper"].get<double>()) << ")\n";
    for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
  } else {
    if (cfg.model.exposure_transform == ExposureTransform::log) d.z = z_model;
    if (spec) {
      RemlOptions opt;
      opt.ci_level = cfg.ci_level;
      const CurveFit cf = semiparametric_fit(d, graph, *spec, cfg.model.estimator, opt);
      report["result"] = curve_report(cf, grid);
      std::cout << "curve fitted with " << spec->knot_count() << " knots, psi = " << fixed(cf.psi) << '\n';
    } else {
      const FitResult f = likelihood_fit(d, graph, cfg.model.estimator, cfg.model.priors, cfg.ci_level);
      report["result"] = fit_report(f);
      std::cout << "beta_z: " << fixed(f.beta_z()) << " (" << fixed(f.ci_lower(0)) << ", " << fixed(f.ci_upper(0))
                << ")\n";
      if (!f.diagnostics.empty()) std::cerr << "note: " << f.diagnostics << '\n';
    }
    write_json(out_path(a.out, "fit.json"), report);
  }
  note("wrote " + out_path(a.out, "fit.json"));
}

// ---------------------------------------------------------------------------
// simulate

struct SimArgs {
  std::string config, out = ".";
  std::optional<std::string> gm, method, family;
  std::vector<std::string> estimators;
  std::optional<int> reps, n, iterations, burn_in, threads;
  std::optional<std::uint64_t> seed;
};

void run_simulate(const SimArgs& a, RunContext& ctx) {
  StudyConfig cfg;
  if (!a.config.empty()) cfg = study_config_from_json(read_json(a.config));
  if (a.gm) {
    const int n = cfg.generator.n;
    cfg.generator = gm_config(parse_mechanism(*a.gm));
    cfg.generator.n = n;
  }
  if (a.n) cfg.generator.n = *a.n;
  if (a.family) cfg.generator.family = parse_family(*a.family);
  if (a.method) cfg.method = parse_fit_method(*a.method);
  if (!a.estimators.empty()) {
    cfg.estimators.clear();
    for (const auto& e : a.estimators) cfg.estimators.push_back(parse_estimator(e));
  }
  if (a.reps) cfg.reps = *a.reps;
  if (a.iterations) cfg.model.chain.iterations = *a.iterations;
  if (a.burn_in) cfg.model.chain.burn_in = *a.burn_in;
  if (a.threads) cfg.threads = *a.threads;
  if (a.seed) cfg.master_seed = *a.seed;
  ctx.out_dir = a.out;
  ctx.seed = cfg.master_seed;
  ctx.config = to_json(cfg);
  cfg.validate();
  ensure_dir(a.out);

  note("running " + std::to_string(cfg.reps) + " replicates of " + to_string(cfg.generator.mechanism));
  const SimulationSummary s = run_study(cfg);
  const std::string header = "spatconf simulate, seed " + std::to_string(cfg.master_seed) + "\nconfig " + ctx.config.dump();

  json report = provenance("simulate", ctx.config, ctx.seed);
  report["study"] = study_json(s);
  write_json(out_path(a.out, "study.json"), report);
  write_study_csv(out_path(a.out, "study.csv"), s, header);
  if (cfg.curve_study()) write_curve_csv(out_path(a.out, "curve.csv"), s, header);

  const bool bayes = cfg.method == FitMethod::bayesian;
  std::cout << std::left << std::setw(12) << "Estimator";
  if (cfg.curve_study()) {
    std::cout << std::right << std::setw(12) << "MAD(mean)" << std::setw(12) << "MAD(reps)" << '\n';
  } else {
    std::cout << std::right << std::setw(10) << "Bias" << std::setw(10) << "SE" << std::setw(10) << "RMSE"
              << std::setw(10) << "Coverage" << '\n';
  }
  for (const auto& r : s.rows) {
    std::cout << std::left << std::setw(12) << display_name(r.estimator, bayes) << std::right;
    if (cfg.curve_study()) {
      std::cout << std::setw(12) << fixed(r.mean_curve_mad) << std::setw(12) << fixed(r.replicate_mad);
    } else {
      std::cout << std::setw(10) << fixed(r.bias, 3) << std::setw(10) << fixed(r.se, 3) << std::setw(10)
                << fixed(r.rmse, 3) << std::setw(10) << fixed(r.coverage, 2);
    }
    if (r.failures > 0) std::cout << "  (" << r.failures << " failed)";
    std::cout << '\n';
  }
  note("finished in " + fixed(s.runtime_seconds, 1) + " s");
}

// ---------------------------------------------------------------------------
// identify

struct IdentifyArgs {
  RingParams p;
  double tol = 1e-3;
  std::string out = ".";
};

void run_identify(const IdentifyArgs& a, RunContext& ctx) {
  ctx.out_dir = a.out;
  ctx.config = to_json(a.p);
  ctx.config["tolerance"] = a.tol;
  const IdentificationReport r = identification_report(a.p, a.p.n, a.tol);
  ensure_dir(a.out);
  json report = provenance("identify", ctx.config, 0);
  report["report"] = identification_json(r);
  write_json(out_path(a.out, "identify.json"), report);
  std::cout << r.verdict << '\n';
  for (const auto& n : r.notes) note(n);
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string gm = "GM2", layout = "ring", family = "poisson", out = ".", stem = "synthetic";
  int n = 300;
  std::uint64_t seed = 0;
  std::optional<int> censor_below;
  double base_rate = 0.002;
};

void run_generate(const GenerateArgs& a, RunContext& ctx) {
  GenerativeConfig cfg = gm_config(parse_mechanism(a.gm));
  cfg.n = a.n;
  cfg.seed = a.seed;
  cfg.family = parse_family(a.family);
  ctx.out_dir = a.out;
  ctx.seed = a.seed;

  std::optional<CountyLayout> county;
  if (a.layout == "county") {
    county = county_layout(a.n, a.seed ^ 0x9e3779b97f4a7c15ULL);
    cfg.graph = county->graph;
    if (cfg.family == OutcomeFamily::poisson) {
      if (!(a.base_rate > 0.0)) throw ConfigError("base rate must be positive");
      cfg.offset = (county->population.array() * a.base_rate).log().matrix();
    }
  } else if (a.layout != "ring") {
    throw ConfigError("unknown layout '" + a.layout + "' (expected ring or county)");
  }
  if (cfg.family == OutcomeFamily::poisson) cfg.censor_below = a.censor_below.value_or(county ? 10 : 0);

  json config = to_json(cfg);
  config["graph"] = a.layout;
  config["censor_below"] = cfg.censor_below;
  if (county) config["base_rate"] = a.base_rate;
  ctx.config = config;

  GeneratedData gen = generate_dataset(cfg);
  std::optional<Eigen::VectorXd> population;
  if (county) {
    gen.data.ids = county->ids;
    population = county->population;
    gen.data.offset.reset();  // recomputed from population on ingestion
  }
  ensure_dir(a.out);
  const std::string data_file = out_path(a.out, a.stem + ".csv");
  const std::string adj_file = out_path(a.out, a.stem + "_adjacency.csv");
  const std::string truth_file = sealed_truth_path(out_path(a.out, a.stem));
  write_dataset_csv(data_file, gen.data, population);
  write_edge_list_csv(gen.graph, gen.data.ids, adj_file);
  write_json(truth_file, sealed_truth_json(gen.truth, cfg));

  json report = provenance("generate", config, a.seed);
  report["files"] = {{"data", data_file}, {"adjacency", adj_file}, {"sealed_truth", truth_file}};
  std::size_t censored = 0;
  for (auto c : gen.data.censored) censored += c;
  report["summary"] = {{"n", gen.data.n()}, {"edges", gen.graph.edge_count()}, {"censored", censored}};
  write_json(out_path(a.out, a.stem + ".generate.json"), report);
  std::cout << "wrote " << data_file << " (" << gen.data.n() << " units, " << censored << " censored), " << adj_file
            << " and " << truth_file << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial confounding adjustment: fits, simulation studies and identification checks"};
  app.require_subcommand(1);
  app.add_flag("-v,--verbose", verbosity, "Progress messages on stderr");
  RunContext ctx;
  int code = 0;

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit one estimator to a dataset and adjacency");
  fit->add_option("--data", fa.data, "Dataset CSV (id,y,z,population?,censored?,x1..xp)")->required();
  fit->add_option("--adjacency", fa.adjacency, "Adjacency CSV (src,dst)")->required();
  fit->add_option("--config", fa.config, "Fit config JSON; flags below override it");
  fit->add_option("--model", fa.model, "nonspatial | spatial | spatial-rs | affine | affine-rs");
  fit->add_option("--family", fa.family, "poisson | gaussian");
  fit->add_option("--method", fa.method, "bayesian | likelihood");
  fit->add_option("--transform", fa.transform, "Exposure transform: identity | log");
  fit->add_option("--tau-prior", fa.tau_prior, "gamma | flat");
  fit->add_option("--kappa", fa.kappa, "Condition-number prior: automatic | on | off");
  fit->add_option("--iterations", fa.iterations, "Total sampler iterations");
  fit->add_option("--burn-in", fa.burn_in, "Discarded iterations");
  fit->add_option("--thin", fa.thin, "Keep every k-th draw");
  fit->add_option("--seed", fa.seed, "Sampler seed");
  fit->add_flag("--spline", fa.spline, "Penalised-spline exposure effect");
  fit->add_option("--spline-degree", fa.spline_degree, "Spline polynomial degree");
  fit->add_option("--knots", fa.knots, "Number of quantile knots");
  fit->add_option("--deaths-total", fa.deaths_total, "Total deaths for the internal standardisation");
  fit->add_option("--population-total", fa.population_total, "Total population for the internal standardisation");
  fit->add_option("--ci-level", fa.ci_level, "Interval level");
  fit->add_option("--out", fa.out, "Output directory")->capture_default_str();
  fit->callback([&] {
    ctx.command = "fit";
    code = guarded(ctx, [&] { run_fit(fa, ctx); });
  });

  SimArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run a simulation study and write the summary table");
  sim->add_option("--config", sa.config, "Study config JSON; flags below override it");
  sim->add_option("--gm", sa.gm, "Mechanism: GM1..GM6 | nonlinear");
  sim->add_option("--reps", sa.reps, "Replicates");
  sim->add_option("--estimators", sa.estimators, "Comma-separated estimators")->delimiter(',');
  sim->add_option("--method", sa.method, "bayesian | likelihood");
  sim->add_option("--family", sa.family, "poisson | gaussian");
  sim->add_option("--n", sa.n, "Sites on the ring");
  sim->add_option("--iterations", sa.iterations, "Sampler iterations per fit");
  sim->add_option("--burn-in", sa.burn_in, "Burn-in per fit");
  sim->add_option("--threads", sa.threads, "Worker threads (0 = hardware concurrency)");
  sim->add_option("--seed", sa.seed, "Master seed");
  sim->add_option("--out", sa.out, "Output directory")->capture_default_str();
  sim->callback([&] {
    ctx.command = "simulate";
    if (sa.threads && *sa.threads == 0) sa.threads = int(std::max(1u, std::thread::hardware_concurrency()));
    code = guarded(ctx, [&] { run_simulate(sa, ctx); });
  });

  IdentifyArgs ia;
  auto* idf = app.add_subcommand("identify", "Check identification of the ring model from population moments");
  idf->add_option("--phiU", ia.p.phi_u, "Confounder dependence")->capture_default_str();
  idf->add_option("--phiZ", ia.p.phi_z, "Exposure dependence")->capture_default_str();
  idf->add_option("--rho", ia.p.rho, "Cross correlation")->capture_default_str();
  idf->add_option("--tauU", ia.p.tau_u, "Confounder precision")->capture_default_str();
  idf->add_option("--tauZ", ia.p.tau_z, "Exposure precision")->capture_default_str();
  idf->add_option("--tauEps", ia.p.tau_eps, "Noise precision")->capture_default_str();
  idf->add_option("--betaZ", ia.p.beta_z, "Exposure effect")->capture_default_str();
  idf->add_option("--n", ia.p.n, "Ring size")->capture_default_str();
  idf->add_option("--tol", ia.tol, "Recovery tolerance")->capture_default_str();
  idf->add_option("--out", ia.out, "Output directory")->capture_default_str();
  idf->callback([&] {
    ctx.command = "identify";
    code = guarded(ctx, [&] { run_identify(ia, ctx); });
  });

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset, its adjacency and a sealed truth file");
  gen->add_option("--gm", ga.gm, "Mechanism: GM1..GM6 | nonlinear")->capture_default_str();
  gen->add_option("--n", ga.n, "Number of units")->capture_default_str();
  gen->add_option("--seed", ga.seed, "Seed")->capture_default_str();
  gen->add_option("--family", ga.family, "poisson | gaussian")->capture_default_str();
  gen->add_option("--layout", ga.layout, "ring | county")->capture_default_str();
  gen->add_option("--censor-below", ga.censor_below, "Flag counts below this as censored (county default 10)");
  gen->add_option("--base-rate", ga.base_rate, "County layout: crude rate per person")->capture_default_str();
  gen->add_option("--stem", ga.stem, "Output file stem")->capture_default_str();
  gen->add_option("--out", ga.out, "Output directory")->capture_default_str();
  gen->callback([&] {
    ctx.command = "generate";
    code = guarded(ctx, [&] { run_generate(ga, ctx); });
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  return code;
}
