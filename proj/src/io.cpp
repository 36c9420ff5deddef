#include "spatconf/io.hpp"

#include "csv.hpp"
#include "spatconf/errors.hpp"
#include "spatconf/spline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace spatconf {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
const std::string kSealedSuffix = ".sealed_truth.json";

std::optional<double> parse_number(const std::string& cell) {
  const std::string t = csv::trim(cell);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

bool parse_flag(const std::string& cell, const std::string& where) {
  std::string t = csv::trim(cell);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (t == "1" || t == "true" || t == "t" || t == "yes" || t == "y") return true;
  if (t.empty() || t == "0" || t == "false" || t == "f" || t == "no" || t == "n") return false;
  throw DataError(where + ": '" + cell + "' is not a censoring flag");
}

std::string list_some(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size() && i < 20; ++i) s += (i ? ", " : "") + items[i];
  if (items.size() > 20) s += ", ... (" + std::to_string(items.size()) + " in total)";
  return s;
}

double num(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num_or_null(v(i)));
  return a;
}

json summary_json(const Eigen::VectorXd& draws, double level) {
  const double a = 0.5 * (1.0 - level);
  json o;
  o["mean"] = draws.mean();
  o["sd"] = std::sqrt((draws.array() - draws.mean()).square().sum() / double(std::max<Eigen::Index>(1, draws.size() - 1)));
  o["lower"] = sample_quantile(draws, a);
  o["upper"] = sample_quantile(draws, 1.0 - a);
  o["mcse"] = draws.size() >= 4 ? json(monte_carlo_se(draws)) : json(nullptr);
  return o;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

void write_comment(std::ofstream& out, const std::string& comment) {
  if (comment.empty()) return;
  std::istringstream in(comment);
  std::string line;
  while (std::getline(in, line)) out << "# " << line << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

std::string sealed_truth_path(const std::string& stem) { return stem + kSealedSuffix; }

bool is_sealed_truth_path(const std::string& path) {
  return path.size() >= kSealedSuffix.size() &&
         path.compare(path.size() - kSealedSuffix.size(), kSealedSuffix.size(), kSealedSuffix) == 0;
}

void refuse_sealed_truth(const std::string& path) {
  if (is_sealed_truth_path(path)) throw ConfigError("refusing to read sealed truth file " + path);
}

json read_json(const std::string& path) {
  refuse_sealed_truth(path);
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

IngestedData ingest_dataset(const std::string& path, const IngestSchema& schema) {
  refuse_sealed_truth(path);
  const csv::Table t = csv::read(path);
  auto require = [&](const std::string& name) {
    const int c = t.column(name);
    if (c < 0) throw DataError(path + ": missing required column '" + name + "'");
    return std::size_t(c);
  };
  const std::size_t cid = require(schema.id), cy = require(schema.outcome), cz = require(schema.exposure);
  const int cpop = t.column(schema.population), ccen = t.column(schema.censored), coff = t.column(schema.offset);

  std::vector<std::size_t> ccov;
  std::vector<std::string> cov_names;
  if (schema.covariates.empty()) {
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      if (c == cid || c == cy || c == cz || int(c) == cpop || int(c) == ccen || int(c) == coff) continue;
      ccov.push_back(c);
      cov_names.push_back(t.header[c]);
    }
  } else {
    for (const auto& name : schema.covariates) {
      ccov.push_back(require(name));
      cov_names.push_back(name);
    }
  }

  const auto n = static_cast<Eigen::Index>(t.rows.size());
  if (n == 0) throw DataError(path + ": no data rows");
  IngestedData out;
  Dataset& d = out.data;
  d.y.resize(n);
  d.z.resize(n);
  const Eigen::Index p = Eigen::Index(ccov.size()) + (schema.intercept ? 1 : 0);
  d.x_minus_z.resize(n, p);
  Eigen::VectorXd pop(n), off(n);
  d.censor_threshold = schema.censor_threshold;
  if (ccen >= 0) d.censored.assign(std::size_t(n), 0);

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = t.rows[std::size_t(i)];
    const std::string id = row[cid];
    const std::string where = path + " row " + std::to_string(i + 1) + " (id " + id + ")";
    if (id.empty()) throw DataError(where + ": empty id");
    if (!out.index.emplace(id, int(i)).second) throw DataError(where + ": duplicate id");
    d.ids.push_back(id);
    auto number = [&](std::size_t c) {
      const auto v = parse_number(row[c]);
      if (!v) throw DataError(where + ": column '" + t.header[c] + "' value '" + row[c] + "' is not numeric");
      return *v;
    };
    const bool censored = ccen >= 0 && parse_flag(row[std::size_t(ccen)], where);
    if (censored) {
      d.censored[std::size_t(i)] = 1;
      d.y(i) = 0.0;  // latent; imputed by the sampler
    } else {
      d.y(i) = number(cy);
    }
    d.z(i) = number(cz);
    Eigen::Index col = 0;
    if (schema.intercept) d.x_minus_z(i, col++) = 1.0;
    for (std::size_t c : ccov) d.x_minus_z(i, col++) = number(c);
    if (cpop >= 0) pop(i) = number(std::size_t(cpop));
    if (coff >= 0) off(i) = number(std::size_t(coff));
  }
  if (schema.intercept) cov_names.insert(cov_names.begin(), "intercept");
  d.covariate_names = cov_names;
  if (cpop >= 0) out.population = pop;
  if (coff >= 0) d.offset = off;
  if (ccen >= 0 && !d.any_censored()) d.censored.clear();
  d.validate();
  return out;
}

AdjacencyGraph align_adjacency(const std::vector<std::pair<std::string, std::string>>& edges,
                               const std::map<std::string, int>& index) {
  std::set<std::string> unknown;
  std::vector<char> touched(index.size(), 0);
  std::set<std::pair<int, int>> pairs;
  for (const auto& [a, b] : edges) {
    const auto ia = index.find(a), ib = index.find(b);
    if (ia == index.end()) unknown.insert(a);
    if (ib == index.end()) unknown.insert(b);
    if (ia == index.end() || ib == index.end()) continue;
    if (ia->second == ib->second) throw DataError("adjacency lists a self-loop at id " + a);
    touched[std::size_t(ia->second)] = touched[std::size_t(ib->second)] = 1;
    pairs.emplace(std::min(ia->second, ib->second), std::max(ia->second, ib->second));
  }
  std::vector<std::string> absent;
  for (const auto& [id, i] : index) {
    if (!touched[std::size_t(i)]) absent.push_back(id);
  }
  if (!unknown.empty()) {
    throw DataError("adjacency ids missing from the dataset: " +
                    list_some(std::vector<std::string>(unknown.begin(), unknown.end())));
  }
  if (!absent.empty()) throw DataError("dataset ids absent from the adjacency: " + list_some(absent));
  return from_edge_list(int(index.size()), std::vector<std::pair<int, int>>(pairs.begin(), pairs.end()));
}

AdjacencyGraph read_adjacency(const std::string& path, const std::map<std::string, int>& index) {
  refuse_sealed_truth(path);
  return align_adjacency(read_edge_list_csv(path), index);
}

Eigen::VectorXd compute_offset(const Eigen::VectorXd& population, double deaths_total, double population_total,
                               const std::vector<std::string>& ids) {
  if (!(deaths_total > 0.0)) throw DataError("total death count must be positive");
  if (!(population_total > 0.0)) throw DataError("total population must be positive");
  Eigen::VectorXd out(population.size());
  for (Eigen::Index i = 0; i < population.size(); ++i) {
    if (!(population(i) > 0.0)) {
      const std::string who = std::size_t(i) < ids.size() ? "id " + ids[std::size_t(i)] : "row " + std::to_string(i + 1);
      throw DataError("population of " + who + " must be positive");
    }
    out(i) = std::log(population(i) * deaths_total / population_total);
  }
  return out;
}

// ---------------------------------------------------------------------------

SplineSpec SplineRequest::resolve(const Eigen::VectorXd& z) const {
  SplineSpec s;
  s.degree = degree;
  if (knots) {
    s.knots = Eigen::Map<const Eigen::VectorXd>(knots->data(), Eigen::Index(knots->size()));
  } else {
    s.knots = quantile_knots(z, knot_count ? *knot_count : default_knot_count(int(z.size())));
  }
  s.psi = psi;
  s.validate(z);
  return s;
}

json to_json(const VarianceParams& v) {
  return json{{"tau_u", num_or_null(v.tau_u)}, {"phi_u", num_or_null(v.phi_u)}, {"tau_z", num_or_null(v.tau_z)},
              {"phi_z", num_or_null(v.phi_z)}, {"rho", num_or_null(v.rho)}, {"tau_eps", num_or_null(v.tau_eps)}};
}

namespace {

VarianceParams variance_from_json(const json& j, VarianceParams v) {
  check_keys(j, {"tau_u", "phi_u", "tau_z", "phi_z", "rho", "tau_eps"}, "params");
  if (j.contains("tau_u")) v.tau_u = num(j["tau_u"]);
  if (j.contains("phi_u")) v.phi_u = num(j["phi_u"]);
  if (j.contains("tau_z")) v.tau_z = num(j["tau_z"]);
  if (j.contains("phi_z")) v.phi_z = num(j["phi_z"]);
  if (j.contains("rho")) v.rho = num(j["rho"]);
  if (j.contains("tau_eps")) v.tau_eps = num(j["tau_eps"]);
  return v;
}

template <typename F>
auto config_guard(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  json j;
  j["family"] = to_string(c.family);
  j["estimator"] = to_string(c.estimator);
  j["exposure_transform"] = to_string(c.exposure_transform);
  if (c.spline) {
    json s;
    s["degree"] = c.spline->degree;
    s["knots"] = std::vector<double>(c.spline->knots.data(), c.spline->knots.data() + c.spline->knots.size());
    s["psi"] = c.spline->psi ? json(*c.spline->psi) : json(nullptr);
    j["spline"] = s;
  } else {
    j["spline"] = nullptr;
  }
  const auto& p = c.priors;
  j["priors"] = {{"beta_sd", p.beta_sd},       {"tau_prior", to_string(p.tau_kind)}, {"tau_shape", p.tau_shape},
                 {"tau_rate", p.tau_rate},     {"kappa_rate", p.kappa_rate},        {"surrogate", to_string(p.surrogate)},
                 {"kappa", to_string(p.kappa)}, {"psi_shape", p.psi_shape},          {"psi_rate", p.psi_rate}};
  const auto& ch = c.chain;
  j["chain"] = {{"iterations", ch.iterations}, {"burn_in", ch.burn_in},
                {"thin", ch.thin},             {"seed", ch.seed},
                {"store_u_every", ch.store_u_every}, {"variance_steps", ch.variance_steps},
                {"prior_only", ch.prior_only}};
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  return config_guard("model config", [&] {
    check_keys(j, {"family", "estimator", "exposure_transform", "spline", "priors", "chain"}, "model config");
    ModelConfig c;
    if (j.contains("family")) c.family = parse_family(j["family"].get<std::string>());
    if (j.contains("estimator")) c.estimator = parse_estimator(j["estimator"].get<std::string>());
    if (j.contains("exposure_transform")) c.exposure_transform = parse_transform(j["exposure_transform"].get<std::string>());
    if (j.contains("spline") && !j["spline"].is_null()) {
      const auto& s = j["spline"];
      check_keys(s, {"degree", "knots", "psi"}, "spline");
      SplineSpec spec;
      read_if(s, "degree", spec.degree);
      if (s.contains("knots")) {
        const auto k = s["knots"].get<std::vector<double>>();
        spec.knots = Eigen::Map<const Eigen::VectorXd>(k.data(), Eigen::Index(k.size()));
      }
      if (s.contains("psi") && !s["psi"].is_null()) spec.psi = s["psi"].get<double>();
      c.spline = spec;
    }
    if (j.contains("priors")) {
      const auto& p = j["priors"];
      check_keys(p, {"beta_sd", "tau_prior", "tau_shape", "tau_rate", "kappa_rate", "surrogate", "kappa", "psi_shape", "psi_rate"},
                 "priors");
      read_if(p, "beta_sd", c.priors.beta_sd);
      if (p.contains("tau_prior")) c.priors.tau_kind = parse_tau_prior(p["tau_prior"].get<std::string>());
      read_if(p, "tau_shape", c.priors.tau_shape);
      read_if(p, "tau_rate", c.priors.tau_rate);
      read_if(p, "kappa_rate", c.priors.kappa_rate);
      if (p.contains("surrogate")) c.priors.surrogate = parse_surrogate(p["surrogate"].get<std::string>());
      if (p.contains("kappa")) c.priors.kappa = parse_kappa_use(p["kappa"].get<std::string>());
      read_if(p, "psi_shape", c.priors.psi_shape);
      read_if(p, "psi_rate", c.priors.psi_rate);
    }
    if (j.contains("chain")) {
      const auto& ch = j["chain"];
      check_keys(ch, {"iterations", "burn_in", "thin", "seed", "store_u_every", "variance_steps", "prior_only"}, "chain");
      read_if(ch, "iterations", c.chain.iterations);
      read_if(ch, "burn_in", c.chain.burn_in);
      read_if(ch, "thin", c.chain.thin);
      read_if(ch, "seed", c.chain.seed);
      read_if(ch, "store_u_every", c.chain.store_u_every);
      read_if(ch, "variance_steps", c.chain.variance_steps);
      read_if(ch, "prior_only", c.chain.prior_only);
    }
    c.validate();
    return c;
  });
}

json to_json(const SplineRequest& s) {
  json j;
  j["degree"] = s.degree;
  j["knots"] = s.knots ? json(*s.knots) : json(nullptr);
  j["knot_count"] = s.knot_count ? json(*s.knot_count) : json(nullptr);
  j["psi"] = s.psi ? json(*s.psi) : json(nullptr);
  return j;
}

SplineRequest spline_request_from_json(const json& j) {
  return config_guard("spline", [&] {
    check_keys(j, {"degree", "knots", "knot_count", "psi"}, "spline");
    SplineRequest s;
    read_if(j, "degree", s.degree);
    if (j.contains("knots") && !j["knots"].is_null()) s.knots = j["knots"].get<std::vector<double>>();
    if (j.contains("knot_count") && !j["knot_count"].is_null()) s.knot_count = j["knot_count"].get<int>();
    if (j.contains("psi") && !j["psi"].is_null()) s.psi = j["psi"].get<double>();
    if (s.degree < 1) throw ConfigError("spline degree must be positive");
    if (s.knot_count && *s.knot_count < 0) throw ConfigError("knot count must be non-negative");
    return s;
  });
}

json to_json(const IngestSchema& s) {
  return json{{"id", s.id},
              {"outcome", s.outcome},
              {"exposure", s.exposure},
              {"population", s.population},
              {"censored", s.censored},
              {"offset", s.offset},
              {"covariates", s.covariates},
              {"intercept", s.intercept},
              {"censor_threshold", s.censor_threshold}};
}

IngestSchema ingest_schema_from_json(const json& j) {
  return config_guard("schema", [&] {
    check_keys(j, {"id", "outcome", "exposure", "population", "censored", "offset", "covariates", "intercept", "censor_threshold"},
               "schema");
    IngestSchema s;
    read_if(j, "id", s.id);
    read_if(j, "outcome", s.outcome);
    read_if(j, "exposure", s.exposure);
    read_if(j, "population", s.population);
    read_if(j, "censored", s.censored);
    read_if(j, "offset", s.offset);
    read_if(j, "covariates", s.covariates);
    read_if(j, "intercept", s.intercept);
    read_if(j, "censor_threshold", s.censor_threshold);
    if (s.censor_threshold < 1) throw ConfigError("censor threshold must be positive");
    return s;
  });
}

json to_json(const FitConfig& c) {
  json j;
  j["method"] = to_string(c.method);
  j["model"] = to_json(c.model);
  j["spline"] = c.spline ? to_json(*c.spline) : json(nullptr);
  j["schema"] = to_json(c.schema);
  j["deaths_total"] = c.deaths_total ? json(*c.deaths_total) : json(nullptr);
  j["population_total"] = c.population_total ? json(*c.population_total) : json(nullptr);
  j["ci_level"] = c.ci_level;
  j["curve_grid"] = c.curve_grid;
  return j;
}

FitConfig fit_config_from_json(const json& j) {
  return config_guard("fit config", [&] {
    check_keys(j, {"method", "model", "spline", "schema", "deaths_total", "population_total", "ci_level", "curve_grid"},
               "fit config");
    FitConfig c;
    if (j.contains("method")) c.method = parse_fit_method(j["method"].get<std::string>());
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("spline") && !j["spline"].is_null()) c.spline = spline_request_from_json(j["spline"]);
    if (j.contains("schema")) c.schema = ingest_schema_from_json(j["schema"]);
    if (j.contains("deaths_total") && !j["deaths_total"].is_null()) c.deaths_total = j["deaths_total"].get<double>();
    if (j.contains("population_total") && !j["population_total"].is_null()) {
      c.population_total = j["population_total"].get<double>();
    }
    read_if(j, "ci_level", c.ci_level);
    read_if(j, "curve_grid", c.curve_grid);
    if (!(c.ci_level > 0.0 && c.ci_level < 1.0)) throw ConfigError("ci_level must lie in (0, 1)");
    return c;
  });
}

json to_json(const GenerativeConfig& c) {
  json j;
  j["mechanism"] = to_string(c.mechanism);
  j["n"] = c.n;
  j["graph"] = c.graph ? "custom" : "ring";
  j["params"] = to_json(c.params);
  j["beta_z"] = c.beta_z;
  j["family"] = to_string(c.family);
  j["u_mean_x"] = c.u_mean_x;
  j["seed"] = c.seed;
  return j;
}

GenerativeConfig generative_config_from_json(const json& j) {
  return config_guard("generator", [&] {
    check_keys(j, {"mechanism", "n", "graph", "params", "beta_z", "family", "u_mean_x", "seed"}, "generator");
    GenerativeConfig c;
    if (j.contains("mechanism")) c = gm_config(parse_mechanism(j["mechanism"].get<std::string>()));
    read_if(j, "n", c.n);
    if (j.contains("graph") && j["graph"].get<std::string>() != "ring") {
      throw ConfigError("generator configs only describe ring graphs");
    }
    if (j.contains("params")) c.params = variance_from_json(j["params"], c.params);
    read_if(j, "beta_z", c.beta_z);
    if (j.contains("family")) c.family = parse_family(j["family"].get<std::string>());
    read_if(j, "u_mean_x", c.u_mean_x);
    read_if(j, "seed", c.seed);
    return c;
  });
}

json to_json(const StudyConfig& c) {
  json j;
  j["generator"] = to_json(c.generator);
  json est = json::array();
  for (auto e : c.estimators) est.push_back(to_string(e));
  j["estimators"] = est;
  j["reps"] = c.reps;
  j["method"] = to_string(c.method);
  j["model"] = to_json(c.model);
  j["flat_priors_without_kappa"] = c.flat_priors_without_kappa;
  j["ci_level"] = c.ci_level;
  j["threads"] = c.threads;
  j["master_seed"] = c.master_seed;
  j["spline_degree"] = c.spline_degree;
  j["curve_grid"] = c.curve_grid;
  j["extra_points"] = c.extra_points;
  j["mad_lower"] = c.mad_lower;
  j["mad_upper"] = c.mad_upper;
  return j;
}

StudyConfig study_config_from_json(const json& j) {
  return config_guard("study config", [&] {
    check_keys(j, {"generator", "estimators", "reps", "method", "model", "flat_priors_without_kappa", "ci_level", "threads",
                   "master_seed", "spline_degree", "curve_grid", "extra_points", "mad_lower", "mad_upper"},
               "study config");
    StudyConfig c;
    if (j.contains("generator")) c.generator = generative_config_from_json(j["generator"]);
    if (j.contains("estimators")) {
      c.estimators.clear();
      for (const auto& e : j["estimators"]) c.estimators.push_back(parse_estimator(e.get<std::string>()));
    }
    read_if(j, "reps", c.reps);
    if (j.contains("method")) c.method = parse_fit_method(j["method"].get<std::string>());
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    read_if(j, "flat_priors_without_kappa", c.flat_priors_without_kappa);
    read_if(j, "ci_level", c.ci_level);
    read_if(j, "threads", c.threads);
    read_if(j, "master_seed", c.master_seed);
    read_if(j, "spline_degree", c.spline_degree);
    read_if(j, "curve_grid", c.curve_grid);
    read_if(j, "extra_points", c.extra_points);
    read_if(j, "mad_lower", c.mad_lower);
    read_if(j, "mad_upper", c.mad_upper);
    return c;
  });
}

json to_json(const RingParams& p) {
  return json{{"n", p.n},         {"tau_u", p.tau_u}, {"phi_u", p.phi_u},     {"tau_z", p.tau_z},
              {"phi_z", p.phi_z}, {"rho", p.rho},     {"tau_eps", p.tau_eps}, {"beta_z", p.beta_z}};
}

// ---------------------------------------------------------------------------

json posterior_report(const PosteriorSamples& s, double ci_level, const std::vector<double>& curve_grid) {
  json j;
  j["estimator"] = to_string(s.estimator);
  j["family"] = to_string(s.family);
  j["draws"] = s.draws();
  j["seed"] = s.seed;
  j["runtime_seconds"] = s.runtime_seconds;
  json coef = json::array();
  for (Eigen::Index k = 0; k < s.beta.cols(); ++k) {
    json c = summary_json(s.beta.col(k), ci_level);
    c["name"] = s.beta_names[std::size_t(k)];
    coef.push_back(c);
  }
  j["coefficients"] = coef;
  if (s.gamma.cols() > 0) {
    json g = json::array();
    for (Eigen::Index k = 0; k < s.gamma.cols(); ++k) {
      json c = summary_json(s.gamma.col(k), ci_level);
      c["name"] = s.gamma_names[std::size_t(k)];
      g.push_back(c);
    }
    j["exposure_coefficients"] = g;
  }
  const char* names[] = {"tau_u", "phi_u", "tau_z", "phi_z", "rho", "tau_eps"};
  json var;
  for (int k = 0; k < 6; ++k) {
    const Eigen::VectorXd col = s.variance.col(k);
    if (!col.allFinite()) continue;
    if (k == 4 && !is_affine(s.estimator)) continue;
    var[names[k]] = summary_json(col, ci_level);
  }
  j["variance"] = var;
  if (s.psi.size() > 0) j["spline_precision"] = summary_json(s.psi, ci_level);
  if (s.spline) {
    std::vector<double> grid = curve_grid;
    if (grid.empty()) grid = {0.0};
    const auto p = paerc_summary(s, PaercSummary::Mode::curve, grid, ci_level);
    json rows = json::array();
    for (const auto& r : p.rows) {
      rows.push_back({{"z", r.z}, {"log_mean", r.log_mean}, {"geometric_mean", r.geometric_mean},
                      {"lower", r.lower}, {"upper", r.upper}});
    }
    j["curve"] = {{"level", ci_level},
                  {"description", "exp(f(z) - f(0)): relative rate at exposure z versus exposure 0"},
                  {"rows", rows}};
  } else {
    const auto p = paerc_summary(s, PaercSummary::Mode::coefficient, {}, ci_level);
    j["relative_rate"] = {{"geometric_mean", p.rows[0].geometric_mean},
                          {"lower", p.rows[0].lower},
                          {"upper", p.rows[0].upper},
                          {"level", ci_level},
                          {"description", s.family == OutcomeFamily::poisson
                                              ? "exp(beta_z): relative standardised rate per unit of exposure"
                                              : "exp(beta_z)"}};
  }
  j["acceptance"] = s.acceptance;
  j["warnings"] = s.warnings;
  return j;
}

json fit_report(const FitResult& f) {
  json j;
  j["estimator"] = to_string(f.estimator);
  j["label"] = display_name(f.estimator, false);
  json coef = json::array();
  for (Eigen::Index k = 0; k < f.beta.size(); ++k) {
    coef.push_back({{"name", f.coef_names[std::size_t(k)]},
                    {"estimate", f.beta(k)},
                    {"se", num_or_null(f.se.size() > k ? f.se(k) : kNaN)},
                    {"lower", num_or_null(f.ci_lower.size() > k ? f.ci_lower(k) : kNaN)},
                    {"upper", num_or_null(f.ci_upper.size() > k ? f.ci_upper(k) : kNaN)}});
  }
  j["coefficients"] = coef;
  if (f.gamma.size() > 0) {
    json g = json::array();
    for (Eigen::Index k = 0; k < f.gamma.size(); ++k) g.push_back({{"name", f.gamma_names[std::size_t(k)]}, {"estimate", f.gamma(k)}});
    j["exposure_coefficients"] = g;
  }
  j["ci_level"] = f.ci_level;
  j["variance"] = to_json(f.variance);
  j["log_restricted_likelihood"] = num_or_null(f.log_restricted_likelihood);
  j["objective"] = num_or_null(f.objective);
  j["converged"] = f.converged;
  j["boundary"] = f.boundary;
  j["evaluations"] = f.evaluations;
  j["diagnostics"] = f.diagnostics;
  return j;
}

json curve_report(const CurveFit& f, const std::vector<double>& grid) {
  json j = fit_report(f.fit);
  j["spline"] = {{"degree", f.spec.degree},
                 {"knots", std::vector<double>(f.spec.knots.data(), f.spec.knots.data() + f.spec.knots.size())},
                 {"psi", f.psi}};
  json rows = json::array();
  for (double z : grid) rows.push_back({{"z", z}, {"value", f.evaluate(z)}, {"se", f.standard_error(z)}});
  j["curve"] = rows;
  return j;
}

json identification_json(const IdentificationReport& r) {
  json j;
  j["verdict"] = r.verdict;
  j["z_verdict"] = r.z_verdict;
  j["z_signal"] = r.z_signal;
  j["y_signal"] = r.y_signal;
  j["threshold"] = r.threshold;
  j["tolerance"] = r.tolerance;
  j["truth"] = to_json(r.truth);
  json rec, err;
  for (const auto& [k, v] : r.recovered) rec[k] = num_or_null(v);
  for (const auto& [k, v] : r.abs_error) err[k] = num_or_null(v);
  j["recovered"] = rec;
  j["abs_error"] = err;
  j["within_tolerance"] = r.within_tolerance;
  j["notes"] = r.notes;
  return j;
}

json study_json(const SimulationSummary& s) {
  json j;
  j["config"] = to_json(s.config);
  j["mechanism"] = to_string(s.config.generator.mechanism);
  j["runtime_seconds"] = s.runtime_seconds;
  const bool curve = s.config.curve_study();
  if (curve) {
    j["points"] = s.points;
    j["truth_curve"] = vec_json(s.truth_curve);
  }
  json rows = json::array();
  for (const auto& r : s.rows) {
    json o{{"estimator", to_string(r.estimator)},
           {"label", display_name(r.estimator, s.config.method == FitMethod::bayesian)},
           {"successes", r.successes},
           {"failures", r.failures}};
    if (curve) {
      o["mean_curve"] = vec_json(r.mean_curve);
      o["curve_q_lo"] = vec_json(r.curve_q_lo);
      o["curve_q_hi"] = vec_json(r.curve_q_hi);
      o["pointwise_coverage"] = vec_json(r.pointwise_coverage);
      o["mean_curve_mad"] = num_or_null(r.mean_curve_mad);
      o["replicate_mad"] = num_or_null(r.replicate_mad);
    } else {
      o["bias"] = num_or_null(r.bias);
      o["se"] = num_or_null(r.se);
      o["rmse"] = num_or_null(r.rmse);
      o["coverage"] = num_or_null(r.coverage);
    }
    rows.push_back(o);
  }
  j["rows"] = rows;
  json reps = json::array();
  for (const auto& r : s.replicates) {
    json o{{"rep", r.rep}, {"estimator", to_string(r.estimator)}, {"seed", r.seed}, {"ok", r.ok}};
    if (!r.ok) o["error"] = r.error;
    if (r.ok && !curve) {
      o["estimate"] = r.estimate;
      o["error_vs_truth"] = r.estimate - s.config.generator.beta_z;
      o["lower"] = r.lower;
      o["upper"] = r.upper;
      o["covered"] = r.covered;
    }
    if (r.ok && curve) o["curve"] = vec_json(r.curve);
    o["runtime_seconds"] = r.runtime_seconds;
    if (!r.warnings.empty()) o["warnings"] = r.warnings;
    reps.push_back(o);
  }
  j["replicates"] = reps;
  return j;
}

json sealed_truth_json(const SealedTruth& t, const GenerativeConfig& c) {
  const auto& r = TruthScorer::unseal(t);
  json j;
  j["sealed"] = true;
  j["generator"] = to_json(c);
  j["mechanism"] = to_string(r.mechanism);
  j["params"] = to_json(r.params);
  j["beta_z"] = r.beta_z;
  j["seed"] = r.seed;
  j["u"] = vec_json(r.u);
  j["latent"] = vec_json(r.latent);
  return j;
}

// ---------------------------------------------------------------------------

void write_samples_csv(const std::string& path, const PosteriorSamples& s, const std::vector<std::string>& ids) {
  auto out = open_out(path);
  std::vector<std::string> head;
  for (const auto& n : s.beta_names) head.push_back("beta." + n);
  for (Eigen::Index k = 0; k < s.knots.cols(); ++k) head.push_back("knot." + std::to_string(k + 1));
  if (s.psi.size() > 0) head.push_back("psi");
  for (const auto& n : s.gamma_names) head.push_back("gamma." + n);
  for (const char* n : {"tau_u", "phi_u", "tau_z", "phi_z", "rho", "tau_eps"}) head.push_back(n);
  for (int i : s.censored_index) {
    head.push_back("imputed." + (std::size_t(i) < ids.size() ? ids[std::size_t(i)] : std::to_string(i + 1)));
  }
  for (std::size_t k = 0; k < head.size(); ++k) out << (k ? "," : "") << head[k];
  out << '\n';
  for (Eigen::Index r = 0; r < s.draws(); ++r) {
    std::vector<double> row;
    for (Eigen::Index k = 0; k < s.beta.cols(); ++k) row.push_back(s.beta(r, k));
    for (Eigen::Index k = 0; k < s.knots.cols(); ++k) row.push_back(s.knots(r, k));
    if (s.psi.size() > 0) row.push_back(s.psi(r));
    for (Eigen::Index k = 0; k < s.gamma.cols(); ++k) row.push_back(s.gamma(r, k));
    for (int k = 0; k < 6; ++k) row.push_back(s.variance(r, k));
    for (Eigen::Index k = 0; k < s.imputed.cols(); ++k) row.push_back(s.imputed(r, k));
    for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << fmt(row[k]);
    out << '\n';
  }
}

void write_study_csv(const std::string& path, const SimulationSummary& s, const std::string& header_comment) {
  auto out = open_out(path);
  write_comment(out, header_comment);
  out << "Mechanism,Estimator,Bias,Std. Err.,RMSE,95% CI Coverage,Successes,Failures\n";
  const bool bayes = s.config.method == FitMethod::bayesian;
  for (const auto& r : s.rows) {
    out << to_string(s.config.generator.mechanism) << ',' << display_name(r.estimator, bayes) << ',' << fmt(r.bias) << ','
        << fmt(r.se) << ',' << fmt(r.rmse) << ',' << fmt(r.coverage) << ',' << r.successes << ',' << r.failures << '\n';
  }
}

void write_curve_csv(const std::string& path, const SimulationSummary& s, const std::string& header_comment) {
  auto out = open_out(path);
  write_comment(out, header_comment);
  out << "z,truth";
  const bool bayes = s.config.method == FitMethod::bayesian;
  for (const auto& r : s.rows) {
    const auto e = display_name(r.estimator, bayes);
    out << ',' << e << " mean," << e << " q2.5," << e << " q97.5," << e << " coverage";
  }
  out << '\n';
  for (std::size_t k = 0; k < s.points.size(); ++k) {
    const auto i = Eigen::Index(k);
    out << fmt(s.points[k]) << ',' << fmt(s.truth_curve(i));
    for (const auto& r : s.rows) {
      out << ',' << fmt(r.mean_curve(i)) << ',' << fmt(r.curve_q_lo(i)) << ',' << fmt(r.curve_q_hi(i)) << ','
          << fmt(r.pointwise_coverage(i));
    }
    out << '\n';
  }
}

void write_dataset_csv(const std::string& path, const Dataset& d, const std::optional<Eigen::VectorXd>& population) {
  auto out = open_out(path);
  const bool censored = d.any_censored();
  out << "id,y,z";
  if (population) out << ",population";
  if (d.offset) out << ",offset";
  if (censored) out << ",censored";
  std::vector<Eigen::Index> cols;
  for (Eigen::Index c = 0; c < d.x_minus_z.cols(); ++c) {
    if ((d.x_minus_z.col(c).array() == 1.0).all()) continue;  // intercept is added on ingestion
    cols.push_back(c);
    const std::string name = std::size_t(c) < d.covariate_names.size() ? d.covariate_names[std::size_t(c)]
                                                                        : "x" + std::to_string(c);
    out << ',' << name;
  }
  out << '\n';
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    const bool cen = censored && d.censored[std::size_t(i)];
    out << (std::size_t(i) < d.ids.size() ? d.ids[std::size_t(i)] : std::to_string(i + 1)) << ','
        << (cen ? std::string("NA") : fmt(d.y(i))) << ',' << fmt(d.z(i));
    if (population) out << ',' << fmt((*population)(i));
    if (d.offset) out << ',' << fmt((*d.offset)(i));
    if (censored) out << ',' << (cen ? 1 : 0);
    for (auto c : cols) out << ',' << fmt(d.x_minus_z(i, c));
    out << '\n';
  }
}

}  // namespace spatconf
