#pragma once

#include "spatconf/dataset.hpp"
#include "spatconf/gibbs.hpp"
#include "spatconf/graph.hpp"
#include "spatconf/identifiability.hpp"
#include "spatconf/simgen.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spatconf {

using json = nlohmann::ordered_json;

/// Column roles of a dataset CSV (`id,y,z,population?,censored?,x1..xp`).
struct IngestSchema {
  std::string id = "id";
  std::string outcome = "y";
  std::string exposure = "z";
  /// Optional columns; ignored when absent from the file.
  std::string population = "population";
  std::string censored = "censored";
  std::string offset = "offset";
  /// Covariate columns; empty means every column without another role.
  std::vector<std::string> covariates;
  /// Prepend an intercept column.
  bool intercept = true;
  int censor_threshold = 10;
};

struct IngestedData {
  Dataset data;
  /// String id -> row index.
  std::map<std::string, int> index;
  std::optional<Eigen::VectorXd> population;
};

/// Reads a dataset CSV. Censored rows keep a placeholder outcome of 0 and are
/// imputed by the sampler. Throws DataError on missing columns, duplicate ids
/// and non-numeric cells, and refuses sealed-truth files.
IngestedData ingest_dataset(const std::string& path, const IngestSchema& schema = {});

/// Builds the graph from string-id edges. Throws DataError listing ids that
/// appear in only one of the two sources.
AdjacencyGraph align_adjacency(const std::vector<std::pair<std::string, std::string>>& edges,
                               const std::map<std::string, int>& index);
AdjacencyGraph read_adjacency(const std::string& path, const std::map<std::string, int>& index);

/// Internal standardisation: log(population_i * deaths_total / population_total).
Eigen::VectorXd compute_offset(const Eigen::VectorXd& population, double deaths_total,
                               double population_total, const std::vector<std::string>& ids = {});

/// Sealed-truth files are named `<stem>.sealed_truth.json`.
std::string sealed_truth_path(const std::string& stem);
bool is_sealed_truth_path(const std::string& path);
/// Throws ConfigError when `path` is a sealed-truth file.
void refuse_sealed_truth(const std::string& path);

/// Reads a JSON file (never a sealed-truth file).
json read_json(const std::string& path);
void write_json(const std::string& path, const json& j);

/// Spline request resolved against the data at fit time.
struct SplineRequest {
  int degree = 3;
  /// Explicit knots; otherwise `knot_count` quantile knots (default count when unset).
  std::optional<std::vector<double>> knots;
  std::optional<int> knot_count;
  std::optional<double> psi;

  SplineSpec resolve(const Eigen::VectorXd& z) const;
};

/// Everything `fit` needs besides the input files.
struct FitConfig {
  FitMethod method = FitMethod::bayesian;
  ModelConfig model;
  std::optional<SplineRequest> spline;
  IngestSchema schema;
  /// Totals for the internal standardisation; computed from the data when unset.
  std::optional<double> deaths_total;
  std::optional<double> population_total;
  double ci_level = 0.95;
  /// Curve summary grid; 41 points over the observed exposure range when empty.
  std::vector<double> curve_grid;
};

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);
json to_json(const SplineRequest& s);
SplineRequest spline_request_from_json(const json& j);
json to_json(const IngestSchema& s);
IngestSchema ingest_schema_from_json(const json& j);
json to_json(const FitConfig& c);
FitConfig fit_config_from_json(const json& j);
json to_json(const GenerativeConfig& c);
GenerativeConfig generative_config_from_json(const json& j);
json to_json(const StudyConfig& c);
StudyConfig study_config_from_json(const json& j);
json to_json(const VarianceParams& v);
json to_json(const RingParams& p);

/// Posterior summary: coefficients, exp(beta_z) with its interval, variance
/// parameters, acceptance rates and warnings.
json posterior_report(const PosteriorSamples& s, double ci_level,
                      const std::vector<double>& curve_grid = {});
json fit_report(const FitResult& f);
json curve_report(const CurveFit& f, const std::vector<double>& grid);
json identification_json(const IdentificationReport& r);
json study_json(const SimulationSummary& s);
json sealed_truth_json(const SealedTruth& t, const GenerativeConfig& c);

/// One row per retained iteration with named columns.
void write_samples_csv(const std::string& path, const PosteriorSamples& s, const std::vector<std::string>& ids = {});
/// Table-2 style rows: Mechanism, Estimator, Bias, Std. Err., RMSE, 95% CI Coverage.
/// `header_comment` lines are written first, each prefixed by '#'.
void write_study_csv(const std::string& path, const SimulationSummary& s, const std::string& header_comment = {});
/// Curve studies: one row per study point.
void write_curve_csv(const std::string& path, const SimulationSummary& s, const std::string& header_comment = {});
/// Dataset CSV in the ingestion schema (offset and population columns when present).
void write_dataset_csv(const std::string& path, const Dataset& d,
                       const std::optional<Eigen::VectorXd>& population = std::nullopt);

}  // namespace spatconf
