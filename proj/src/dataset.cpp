#include "spatconf/dataset.hpp"

#include "spatconf/errors.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>

namespace spatconf {

Eigen::MatrixXd Dataset::outcome_design() const {
  Eigen::MatrixXd x(n(), 1 + x_minus_z.cols());
  x.col(0) = z;
  x.rightCols(x_minus_z.cols()) = x_minus_z;
  return x;
}

Eigen::MatrixXd Dataset::exposure_x() const {
  return exposure_design ? *exposure_design : x_minus_z;
}

std::vector<std::string> Dataset::coefficient_names() const {
  std::vector<std::string> out{"z"};
  for (Eigen::Index j = 0; j < x_minus_z.cols(); ++j) {
    out.push_back(static_cast<std::size_t>(j) < covariate_names.size()
                      ? covariate_names[static_cast<std::size_t>(j)]
                      : "x" + std::to_string(j));
  }
  return out;
}

std::vector<std::string> Dataset::exposure_coefficient_names() const {
  if (!exposure_design) {
    auto names = coefficient_names();
    names.erase(names.begin());
    return names;
  }
  std::vector<std::string> out;
  for (Eigen::Index j = 0; j < exposure_design->cols(); ++j) out.push_back("w" + std::to_string(j));
  return out;
}

bool Dataset::any_censored() const {
  return std::any_of(censored.begin(), censored.end(), [](std::uint8_t c) { return c != 0; });
}

void Dataset::validate() const {
  const auto nn = n();
  if (nn == 0) throw DimensionMismatch("dataset is empty");
  if (z.size() != nn) throw DimensionMismatch("exposure length differs from outcome length");
  if (x_minus_z.rows() != nn) throw DimensionMismatch("covariate rows differ from outcome length");
  if (exposure_design && exposure_design->rows() != nn) {
    throw DimensionMismatch("exposure design rows differ from outcome length");
  }
  if (offset && offset->size() != nn) throw DimensionMismatch("offset length differs");
  if (!censored.empty() && static_cast<Eigen::Index>(censored.size()) != nn) {
    throw DimensionMismatch("censoring mask length differs");
  }
  if (!y.allFinite() || !z.allFinite() || !x_minus_z.allFinite()) {
    throw DataError("dataset contains non-finite values");
  }
  auto check_rank = [](const Eigen::MatrixXd& m, const char* what) {
    if (m.cols() == 0) return;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
    qr.setThreshold(1e-10);
    if (qr.rank() < m.cols()) {
      throw RankDeficient(std::string(what) + " has rank " + std::to_string(qr.rank()) + " < " +
                          std::to_string(m.cols()) + " columns");
    }
  };
  check_rank(outcome_design(), "outcome design [z | X]");
  if (exposure_design) check_rank(*exposure_design, "exposure design");
}

// ---------------------------------------------------------------------------

Estimator parse_estimator(const std::string& name) {
  if (name == "nonspatial" || name == "ols") return Estimator::nonspatial;
  if (name == "spatial" || name == "gls") return Estimator::spatial;
  if (name == "spatial-rs" || name == "gls-rs") return Estimator::spatial_rs;
  if (name == "affine") return Estimator::affine;
  if (name == "affine-rs") return Estimator::affine_rs;
  throw ConfigError("unknown estimator '" + name +
                    "' (expected nonspatial, spatial, spatial-rs, affine or affine-rs)");
}

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::nonspatial: return "nonspatial";
    case Estimator::spatial: return "spatial";
    case Estimator::spatial_rs: return "spatial-rs";
    case Estimator::affine: return "affine";
    case Estimator::affine_rs: return "affine-rs";
  }
  return "?";
}

std::string display_name(Estimator e, bool bayesian) {
  switch (e) {
    case Estimator::nonspatial: return bayesian ? "Non-spatial" : "OLS";
    case Estimator::spatial: return bayesian ? "Spatial" : "GLS";
    case Estimator::spatial_rs: return bayesian ? "Spatial-RS" : "GLS-RS";
    case Estimator::affine: return "Affine";
    case Estimator::affine_rs: return "Affine-RS";
  }
  return "?";
}

bool restricts_scales(Estimator e) {
  return e == Estimator::spatial_rs || e == Estimator::affine_rs;
}
bool is_affine(Estimator e) { return e == Estimator::affine || e == Estimator::affine_rs; }
bool is_spatial(Estimator e) { return e != Estimator::nonspatial; }

double normal_quantile_two_sided(double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("interval level must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
}

void set_wald_intervals(FitResult& fit, double level) {
  const double q = normal_quantile_two_sided(level);
  fit.ci_level = level;
  fit.ci_lower = fit.beta - q * fit.se;
  fit.ci_upper = fit.beta + q * fit.se;
}

}  // namespace spatconf
