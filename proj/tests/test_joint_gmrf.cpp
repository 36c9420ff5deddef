#include "doctest.h"

#include "spatconf/errors.hpp"
#include "spatconf/joint_gmrf.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

using namespace spatconf;

namespace {

// Independent dense assembly of [[G, Q], [Q, H]].
Eigen::MatrixXd oracle_joint(const AdjacencyGraph& g, double tu, double pu, double tz, double pz,
                             double rho) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  for (auto [i, j] : g.edges()) w(i, j) = w(j, i) = 1.0;
  Eigen::MatrixXd d = w.rowwise().sum().asDiagonal();
  Eigen::MatrixXd p(2 * n, 2 * n);
  p.topLeftCorner(n, n) = tu * (d - pu * w);
  p.bottomRightCorner(n, n) = tz * (d - pz * w);
  p.topRightCorner(n, n) = -rho * std::sqrt(tu * tz) * d;
  p.bottomLeftCorner(n, n) = p.topRightCorner(n, n);
  return p;
}

double min_eig(const Eigen::MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues()(0);
}

AdjacencyGraph random_graph(Rng& rng, int n) {
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i) e.emplace_back(i, (i + 1) % n);
  for (int k = 0; k < n; ++k) {
    int a = pick(rng), b = pick(rng);
    if (a != b) e.emplace_back(a, b);
  }
  return from_edge_list(n, e);
}

}  // namespace

TEST_CASE("joint precision assembly") {
  auto g = ring(4);
  auto jp0 = build_joint_precision(g, {1.0, 0.5}, {1.0, 0.2}, 0.0);
  CHECK(jp0.q().cwiseAbs().maxCoeff() == 0.0);

  auto jp = build_joint_precision(g, {1.0, 0.5}, {1.0, 0.2}, 0.3);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(jp.q()(i) == doctest::Approx(-0.6).epsilon(1e-15));
  Eigen::MatrixXd oracle = oracle_joint(g, 1.0, 0.5, 1.0, 0.2, 0.3);
  CHECK((jp.full().to_dense() - oracle).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(min_eig(oracle) > 0.0);

  CHECK_THROWS_AS(build_joint_precision(g, {1.0, 0.9}, {1.0, 0.9}, 0.5), NotPositiveDefinite);
  CHECK_THROWS_AS(build_joint_precision(g, {1.0, 0.5}, {1.0, 0.2}, 1.0), std::invalid_argument);
}

TEST_CASE("constant conditional correlation across random parameters") {
  Rng rng(11);
  std::uniform_real_distribution<double> uf(-0.95, 0.95), ut(0.2, 5.0);
  auto g = grid(3, 5);
  for (int rep = 0; rep < 50; ++rep) {
    CarParams gp{ut(rng), uf(rng)}, hp{ut(rng), uf(rng)};
    auto spec = GraphSpectrum::compute(g);
    double rho = 0.9 * spec.exact_rho_bound(gp.phi, hp.phi) * uf(rng);
    auto jp = build_joint_precision(g, gp, hp, rho);
    for (Eigen::Index i = 0; i < 15; ++i) {
      double gi = jp.g().at(int(i), int(i));
      double hi = jp.h().at(int(i), int(i));
      CHECK(jp.q()(i) / std::sqrt(gi * hi) == doctest::Approx(-rho).epsilon(1e-12));
    }
    // Schur complements of a PD matrix are PD
    CHECK(is_positive_definite(jp.g()));
    CHECK(is_positive_definite(jp.h()));
    CHECK(min_eig(marginal_z_precision_dense(jp)) > 0.0);
  }
}

TEST_CASE("conditional U given Z") {
  auto g = ring(4);
  Eigen::MatrixXd x(4, 2);
  x << 1, 0.1, 1, -0.3, 1, 0.7, 1, 0.2;
  Eigen::Vector2d gamma(0.5, -1.0);
  Eigen::Vector4d z(0.3, -1.2, 2.0, 0.4);

  auto jp0 = build_joint_precision(g, {1.0, 0.5}, {1.0, 0.2}, 0.0);
  CHECK(conditional_u_given_z(jp0, z, x, gamma).mean.cwiseAbs().maxCoeff() == 0.0);

  auto jp = build_joint_precision(g, {1.4, 0.5}, {0.7, 0.2}, 0.3);
  auto law = conditional_u_given_z(jp, z, x, gamma);
  Eigen::MatrixXd p = oracle_joint(g, 1.4, 0.5, 0.7, 0.2, 0.3);
  Eigen::VectorXd r = z - x * gamma;
  Eigen::VectorXd m = p.topLeftCorner(4, 4).lu().solve(-p.topRightCorner(4, 4) * r);
  CHECK((law.mean - m).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(law.kind == GaussianLaw::Kind::precision);

  // linear in the residual
  Eigen::VectorXd z2 = x * gamma + 2.0 * r;
  auto law2 = conditional_u_given_z(jp, z2, x, gamma);
  CHECK((law2.mean - 2.0 * law.mean).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(conditional_u_given_z(jp, Eigen::VectorXd::Zero(3), x, gamma), DimensionMismatch);
}

TEST_CASE("scalar conditional mean") {
  // A single node cannot carry a CAR field, so assemble the 1x1 blocks directly.
  const double tu = 2.0, tz = 0.5, rho = 0.4, d = 3.0;
  SparseSymMatrix g = SparseSymMatrix::identity(1, tu * d);
  SparseSymMatrix h = SparseSymMatrix::identity(1, tz * d);
  Eigen::VectorXd q = Eigen::VectorXd::Constant(1, -rho * std::sqrt(tu * tz) * d);
  JointPrecision jp(g, h, q, {tu, 0.0}, {tz, 0.0}, rho);
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(1, 1, 1.5);
  Eigen::VectorXd gamma = Eigen::VectorXd::Constant(1, 0.2);
  Eigen::VectorXd z = Eigen::VectorXd::Constant(1, 1.0);
  auto law = conditional_u_given_z(jp, z, x, gamma);
  CHECK(law.mean(0) == doctest::Approx(rho * std::sqrt(tz / tu) * (1.0 - 0.3)).epsilon(1e-14));

  auto mz = marginal_z_precision_dense(jp);
  CHECK(mz(0, 0) == doctest::Approx(tz * (1.0 - rho * rho) * d).epsilon(1e-14));
}

TEST_CASE("marginal Z law") {
  auto g = ring(6);
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(6, 1);
  Eigen::VectorXd gamma = Eigen::VectorXd::Constant(1, 0.3);
  auto jp0 = build_joint_precision(g, {1.0, 0.5}, {1.0, 0.2}, 0.0);
  CHECK((marginal_z_law(jp0, x, gamma).matrix.to_dense() - jp0.h().to_dense()).norm() == 0.0);

  auto jp = build_joint_precision(g, {1.0, 0.5}, {2.0, 0.2}, 0.3);
  Eigen::MatrixXd p = oracle_joint(g, 1.0, 0.5, 2.0, 0.2, 0.3);
  // marginal precision is the inverse of the Z block of the joint covariance
  Eigen::MatrixXd cov = p.inverse();
  Eigen::MatrixXd oracle = cov.bottomRightCorner(6, 6).inverse();
  auto law = marginal_z_law(jp, x, gamma);
  CHECK((law.matrix.to_dense() - oracle).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((law.mean.array() == 0.3).all());
}

TEST_CASE("conservative rho bound") {
  CHECK(rho_bound(SparseSymMatrix::identity(3, 2.0), SparseSymMatrix::identity(3, 2.0)) ==
        doctest::Approx(1.0));
  CHECK(rho_bound(SparseSymMatrix::identity(3, 1.0), SparseSymMatrix::identity(3, 4.0)) ==
        doctest::Approx(0.5));
  Eigen::Vector2d bad(1.0, -1.0);
  CHECK_THROWS_AS(rho_bound(SparseSymMatrix::diagonal(bad), SparseSymMatrix::identity(2)),
                  NotPositiveDefinite);

  auto g6 = ring(6);
  auto gm = car_precision(g6, {1.0, 0.5});
  auto hm = car_precision(g6, {1.0, 0.2});
  double b = rho_bound(gm, hm);
  double lg = min_eig(gm.to_dense()), lh = min_eig(hm.to_dense());
  CHECK(b == doctest::Approx(std::min(lg, lh) / 2.0).epsilon(1e-12));
  CHECK(min_eig(oracle_joint(g6, 1.0, 0.5, 1.0, 0.2, 0.999 * b)) > 0.0);
  auto spec = GraphSpectrum::compute(g6);
  double exact = spec.exact_rho_bound(0.5, 0.2);
  CHECK(exact >= b);
  CHECK(min_eig(oracle_joint(g6, 1.0, 0.5, 1.0, 0.2, 0.999 * exact)) > 0.0);
  CHECK(min_eig(oracle_joint(g6, 1.0, 0.5, 1.0, 0.2, 1.001 * exact)) < 0.0);
}

TEST_CASE("conservative bound has no violations on random draws") {
  Rng rng(2024);
  std::uniform_real_distribution<double> uf(-0.99, 0.99), ut(0.1, 10.0), u01(0.0, 1.0);
  std::uniform_int_distribution<int> size(4, 14);
  int violations = 0;
  for (int rep = 0; rep < 200; ++rep) {
    auto g = random_graph(rng, size(rng));
    double tu = ut(rng), pu = uf(rng), tz = ut(rng), pz = uf(rng);
    double b = rho_bound(car_precision(g, {tu, pu}), car_precision(g, {tz, pz}));
    double rho = (2.0 * u01(rng) - 1.0) * b * (1.0 - 1e-9);
    if (!(min_eig(oracle_joint(g, tu, pu, tz, pz, rho)) > 0.0)) ++violations;
    // the exact spectral bound agrees with the dense eigen-solver on either side
    auto spec = GraphSpectrum::compute(g);
    double ex = spec.exact_rho_bound(pu, pz);
    if (ex < 0.999) {
      CHECK(min_eig(oracle_joint(g, tu, pu, tz, pz, 0.999 * ex)) > 0.0);
      CHECK(min_eig(oracle_joint(g, tu, pu, tz, pz, std::min(0.99999, 1.001 * ex))) < 0.0);
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("condition number prior") {
  const double d = condition_number_log_prior(1.0, 0.1) - condition_number_log_prior(100.0, 0.1);
  CHECK(d == doctest::Approx(9.9).epsilon(1e-12));
  CHECK(std::isinf(condition_number_log_prior(0.5, 0.1)));
  CHECK(condition_number_log_prior(11.0, 0.1) - condition_number_log_prior(1.0, 0.1) ==
        doctest::Approx(-1.0));
  CHECK(std::isfinite(condition_number_log_prior(1.0, 0.1)));
  CHECK_THROWS(condition_number_log_prior(2.0, 0.0));
}

TEST_CASE("surrogate condition number") {
  auto r4 = ring(4);
  CHECK(surrogate_condition_number({1.0, 0.0}, {1.0, 0.0}, 0.0, r4) == doctest::Approx(1.0));

  double k = surrogate_condition_number({1.0, 0.5}, {1.0, 0.2}, 0.3, r4);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(oracle_joint(r4, 1.0, 0.5, 1.0, 0.2, 0.3));
  CHECK(k == doctest::Approx(es.eigenvalues()(7) / es.eigenvalues()(0)).epsilon(1e-12));
  CHECK(k > 1.0);

  auto spec = GraphSpectrum::compute(r4);
  double bound = spec.exact_rho_bound(0.5, 0.2);
  double prev = 0.0;
  for (double f : {0.0, 0.2, 0.5, 0.8, 0.9, 0.99, 0.999}) {
    double kk = surrogate_condition_number({1.0, 0.5}, {1.0, 0.2}, f * bound, r4);
    CHECK(kk > prev);
    prev = kk;
  }
  CHECK_THROWS_AS(surrogate_condition_number({1.0, 0.5}, {1.0, 0.2}, 1.01 * bound, r4),
                  NotPositiveDefinite);

  CHECK(default_surrogate(ring(300)) == Surrogate::ring4);
  CHECK(default_surrogate(grid(10, 10)) == Surrogate::grid4x4);
  CHECK(surrogate_graph(Surrogate::grid4x4).size() == 16);
  CHECK(parse_surrogate(to_string(Surrogate::grid4x4)) == Surrogate::grid4x4);
  CHECK_THROWS_AS(parse_surrogate("hex"), ConfigError);
}

TEST_CASE("spectral log determinants match dense factorisations") {
  Rng rng(5);
  std::uniform_real_distribution<double> uf(-0.9, 0.9), ut(0.3, 3.0);
  for (auto g : {ring(9), grid(4, 5), random_graph(rng, 12)}) {
    auto spec = GraphSpectrum::compute(g);
    auto spec_v = GraphSpectrum::compute(g, true);
    CHECK((spec.lambda() - spec_v.lambda()).cwiseAbs().maxCoeff() < 1e-12);
    for (int rep = 0; rep < 10; ++rep) {
      VarianceParams v{ut(rng), uf(rng), ut(rng), uf(rng), 0.0, 1.0};
      v.rho = 0.95 * spec.exact_rho_bound(v.phi_u, v.phi_z) * uf(rng);
      Eigen::MatrixXd p = oracle_joint(g, v.tau_u, v.phi_u, v.tau_z, v.phi_z, v.rho);
      CHECK(spec.joint_log_det(v) ==
            doctest::Approx(std::log(p.determinant())).epsilon(1e-10));
      CHECK(spec.car_log_det(v.u()) ==
            doctest::Approx(std::log(car_precision(g, v.u()).to_dense().determinant()))
                .epsilon(1e-10));
      CHECK(spec.joint_is_pd(v));
    }
  }
}

TEST_CASE("joint log density from sufficient statistics") {
  Rng rng(8);
  auto g = grid(3, 4);
  auto spec = GraphSpectrum::compute(g);
  VarianceParams v{1.3, 0.4, 0.8, -0.2, 0.35, 1.0};
  Eigen::VectorXd u = standard_normal(12, rng), r = standard_normal(12, rng);
  Eigen::MatrixXd p = oracle_joint(g, v.tau_u, v.phi_u, v.tau_z, v.phi_z, v.rho);
  Eigen::VectorXd ur(24);
  ur << u, r;
  double oracle = 0.5 * std::log(p.determinant()) - 0.5 * ur.dot(p * ur);
  CHECK(joint_log_density(spec, v, quad_stats(g, u, r)) == doctest::Approx(oracle).epsilon(1e-12));
  v.rho = 0.999;
  CHECK(std::isinf(joint_log_density(spec, v, quad_stats(g, u, r))));
}

TEST_CASE("precision sampler moments") {
  auto g = ring(5);
  Eigen::SparseMatrix<double> p = car_precision(g, {2.0, 0.7}).to_sparse();
  Eigen::MatrixXd pd = Eigen::MatrixXd(p);
  Eigen::VectorXd b(5);
  b << 1, -2, 0.5, 0, 3;
  PrecisionSampler s(p);
  CHECK(s.log_det() == doctest::Approx(std::log(pd.determinant())).epsilon(1e-12));
  Eigen::VectorXd mu = pd.ldlt().solve(b);
  Eigen::MatrixXd cov = pd.inverse();
  Rng rng(3);
  const int draws = 40000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(5);
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(5, 5);
  for (int k = 0; k < draws; ++k) {
    Eigen::VectorXd x = s.draw(b, rng);
    sum += x;
    sq += (x - mu) * (x - mu).transpose();
  }
  Eigen::VectorXd mean = sum / draws;
  Eigen::MatrixXd emp = sq / draws;
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(std::abs(mean(i) - mu(i)) < 4.0 * std::sqrt(cov(i, i) / draws));
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(std::abs(emp(i, j) - cov(i, j)) < 0.02);
  }
}
