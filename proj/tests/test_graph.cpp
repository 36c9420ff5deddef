#include "doctest.h"

#include "spatconf/errors.hpp"
#include "spatconf/graph.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace spatconf;

TEST_CASE("ring construction") {
  auto g3 = ring(3);
  CHECK(g3.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g3.degree(i) == 2);

  auto g4 = ring(4);
  CHECK(g4.neighbors(0) == std::vector<int>{1, 3});

  auto g300 = ring(300);
  CHECK((g300.degrees().array() == 2.0).all());
  CHECK(g300.is_regular());
  CHECK(g300.edge_count() == 300);

  CHECK_THROWS_AS(ring(2), InvalidGraph);
  CHECK_THROWS_AS(ring(-1), InvalidGraph);
}

TEST_CASE("grid construction") {
  auto g12 = grid(1, 2);
  CHECK(g12.edge_count() == 1);
  CHECK(g12.adjacent(0, 1));

  for (auto [r, c] : {std::pair{4, 4}, std::pair{3, 7}, std::pair{1, 5}}) {
    auto g = grid(r, c);
    CHECK(g.size() == std::size_t(r * c));
    CHECK(g.edge_count() == std::size_t(r * (c - 1) + c * (r - 1)));
  }
  auto g22 = grid(2, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g22.degree(i) == 2);
  auto g44 = grid(4, 4);
  CHECK(g44.degree(0) == 2);
  CHECK(g44.degree(15) == 2);
  CHECK(g44.degree(5) == 4);
  CHECK_FALSE(g44.is_regular());

  CHECK(grid(1, 1).has_isolated_node());
  CHECK_THROWS_AS(grid(0, 3), InvalidGraph);
  CHECK_THROWS_AS(grid(3, 0), InvalidGraph);
}

TEST_CASE("from_edge_list") {
  auto g = from_edge_list(2, {{0, 1}});
  CHECK(g.neighbors(1) == std::vector<int>{0});

  auto dup = from_edge_list(2, {{0, 1}, {1, 0}});
  CHECK(dup.edge_count() == 1);
  CHECK(dup.neighbors(0).size() == 1);

  CHECK_THROWS_AS(from_edge_list(3, {{0, 3}}), InvalidGraph);
  CHECK_THROWS_AS(from_edge_list(3, {{1, 1}}), InvalidGraph);
  CHECK_THROWS_AS(from_edge_list(3, {{-1, 1}}), InvalidGraph);
}

TEST_CASE("adjacency constructor rejects malformed lists") {
  CHECK_THROWS_AS(AdjacencyGraph(2, {{1}, {}}), InvalidGraph);
  CHECK_THROWS_AS(AdjacencyGraph(3, {{1}, {0}}), InvalidGraph);
  CHECK_THROWS_AS(AdjacencyGraph(2, {{0}, {}}), InvalidGraph);
}

TEST_CASE("car_precision values") {
  auto m = car_precision(ring(3), {1.0, 0.5}).to_dense();
  Eigen::Matrix3d expect;
  expect << 2, -0.5, -0.5, -0.5, 2, -0.5, -0.5, -0.5, 2;
  CHECK((m - expect).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m.determinant() == doctest::Approx(6.25).epsilon(1e-12));

  auto g = grid(3, 4);
  auto diag = car_precision(g, {2.5, 0.0}).to_dense();
  Eigen::MatrixXd d = 2.5 * g.degrees().asDiagonal().toDenseMatrix();
  CHECK((diag - d).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(car_precision(grid(1, 1), {1.0, 0.1}), DegeneratePrecision);
  CHECK_THROWS_AS(car_precision(ring(4), {0.0, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS(car_precision(ring(4), {1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("car_precision row sums on regular graphs") {
  for (double tau : {0.3, 1.0, 4.0}) {
    for (double phi : {-0.9, -0.2, 0.0, 0.5, 0.95}) {
      auto m = car_precision(ring(9), {tau, phi}).to_dense();
      Eigen::VectorXd rs = m.rowwise().sum();
      for (Eigen::Index i = 0; i < rs.size(); ++i) {
        CHECK(rs(i) == doctest::Approx(tau * 2.0 * (1.0 - phi)).epsilon(1e-14));
      }
      CHECK((m - m.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("positive definiteness") {
  CHECK(is_positive_definite(SparseSymMatrix::identity(5)));
  Eigen::Vector2d d(1.0, -1.0);
  CHECK_FALSE(is_positive_definite(SparseSymMatrix::diagonal(d)));

  for (int n : {3, 4, 7, 20, 600}) {
    for (double phi : {-0.99, -0.5, 0.0, 0.5, 0.99}) {
      CHECK(is_positive_definite(car_precision(ring(n), {1.3, phi})));
    }
  }

  // eigenvalues of the ring CAR are tau * (2 - 2 phi cos(2 pi k / n))
  const int n = 7;
  const double tau = 1.7;
  const double phi = 0.6;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(car_precision(ring(n), {tau, phi}).to_dense());
  std::vector<double> expect;
  for (int k = 0; k < n; ++k) {
    expect.push_back(tau * (2.0 - 2.0 * phi * std::cos(2.0 * std::numbers::pi * k / n)));
  }
  std::sort(expect.begin(), expect.end());
  for (int k = 0; k < n; ++k) CHECK(es.eigenvalues()(k) == doctest::Approx(expect[k]).epsilon(1e-12));

  // dense and sparse paths agree past the threshold
  Eigen::VectorXd big = Eigen::VectorXd::Ones(700);
  big(650) = -1e-3;
  CHECK_FALSE(is_positive_definite(SparseSymMatrix::diagonal(big)));
}

TEST_CASE("sparse symmetric matrix") {
  SparseSymMatrix m(3, {{0, 1, 1.0}, {1, 0, 2.0}, {2, 2, 4.0}});
  CHECK(m.at(0, 1) == 3.0);
  CHECK(m.at(1, 0) == 3.0);
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.entries().size() == 2);
  Eigen::Vector3d x(1.0, 2.0, 3.0);
  Eigen::Vector3d y = m.multiply(x);
  Eigen::Vector3d yd = m.to_dense() * x;
  CHECK((y - yd).norm() == 0.0);
  CHECK((Eigen::MatrixXd(m.to_sparse()) - m.to_dense()).norm() == 0.0);
  CHECK_THROWS_AS(SparseSymMatrix(2, {{0, 2, 1.0}}), DimensionMismatch);
  auto back = SparseSymMatrix::from_dense(m.to_dense());
  CHECK(back.entries().size() == m.entries().size());
}

TEST_CASE("edge list csv round trip") {
  std::mt19937_64 rng(7);
  const int n = 40;
  std::vector<std::pair<int, int>> edges;
  std::uniform_int_distribution<int> pick(0, n - 1);
  for (int i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
  for (int k = 0; k < 60; ++k) {
    int a = pick(rng), b = pick(rng);
    if (a != b) edges.emplace_back(a, b);
  }
  auto g = from_edge_list(n, edges);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));

  auto path = std::filesystem::temp_directory_path() / "spatconf_edges_rt.csv";
  write_edge_list_csv(g, ids, path.string());
  auto raw = read_edge_list_csv(path.string());
  std::vector<std::pair<int, int>> parsed;
  for (auto& [a, b] : raw) parsed.emplace_back(std::stoi(a.substr(1)), std::stoi(b.substr(1)));
  CHECK(from_edge_list(n, parsed) == g);
  std::filesystem::remove(path);
}

TEST_CASE("k-nearest-neighbour graph") {
  Eigen::MatrixXd pts(5, 2);
  pts << 0.0, 0.0, 1.0, 0.0, 2.1, 0.0, 10.0, 0.0, 11.0, 0.0;
  const auto g = knn_graph(pts, 1);
  CHECK(g.adjacent(0, 1));
  CHECK(g.adjacent(3, 4));
  CHECK(g.adjacent(1, 2));
  // the two clusters are joined through their closest pair (2, 3)
  CHECK(g.adjacent(2, 3));
  CHECK(g.edge_count() == 4);
  CHECK(!g.has_isolated_node());
  CHECK_THROWS_AS(knn_graph(pts, 5), InvalidGraph);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unif;
  Eigen::MatrixXd cloud(200, 2);
  for (auto& v : cloud.reshaped()) v = unif(rng);
  const auto h = knn_graph(cloud, 4);
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(h.degree(i) >= 4);
    for (int j : h.neighbors(i)) CHECK(h.adjacent(j, int(i)));
  }
}
