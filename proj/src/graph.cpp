#include "spatconf/graph.hpp"

#include "csv.hpp"
#include "spatconf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace spatconf {

AdjacencyGraph::AdjacencyGraph(std::size_t n, std::vector<std::vector<int>> neighbors)
    : neighbors_(std::move(neighbors)) {
  if (n == 0) throw InvalidGraph("graph must have at least one node");
  if (neighbors_.size() != n) {
    throw InvalidGraph("neighbour list count " + std::to_string(neighbors_.size()) +
                       " does not match n = " + std::to_string(n));
  }
  std::size_t half_edges = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& nb = neighbors_[i];
    std::sort(nb.begin(), nb.end());
    if (std::adjacent_find(nb.begin(), nb.end()) != nb.end()) {
      throw InvalidGraph("duplicate neighbour of node " + std::to_string(i));
    }
    for (int j : nb) {
      if (j < 0 || static_cast<std::size_t>(j) >= n) {
        throw InvalidGraph("neighbour index " + std::to_string(j) + " out of range");
      }
      if (static_cast<std::size_t>(j) == i) {
        throw InvalidGraph("self-loop at node " + std::to_string(i));
      }
    }
    half_edges += nb.size();
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (int j : neighbors_[i]) {
      const auto& back = neighbors_[static_cast<std::size_t>(j)];
      if (!std::binary_search(back.begin(), back.end(), static_cast<int>(i))) {
        throw InvalidGraph("asymmetric adjacency between " + std::to_string(i) + " and " +
                           std::to_string(j));
      }
    }
  }
  edge_count_ = half_edges / 2;
}

bool AdjacencyGraph::adjacent(int i, int j) const {
  const auto& nb = neighbors_.at(static_cast<std::size_t>(i));
  return std::binary_search(nb.begin(), nb.end(), j);
}

std::vector<std::pair<int, int>> AdjacencyGraph::edges() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(edge_count_);
  for (std::size_t i = 0; i < neighbors_.size(); ++i) {
    for (int j : neighbors_[i]) {
      if (static_cast<std::size_t>(j) > i) out.emplace_back(static_cast<int>(i), j);
    }
  }
  return out;
}

Eigen::VectorXd AdjacencyGraph::degrees() const {
  Eigen::VectorXd d(static_cast<Eigen::Index>(size()));
  for (std::size_t i = 0; i < size(); ++i) d(static_cast<Eigen::Index>(i)) = double(degree(i));
  return d;
}

bool AdjacencyGraph::is_regular() const {
  const auto d0 = degree(0);
  return std::all_of(neighbors_.begin(), neighbors_.end(),
                     [d0](const auto& nb) { return nb.size() == d0; });
}

bool AdjacencyGraph::has_isolated_node() const {
  return std::any_of(neighbors_.begin(), neighbors_.end(),
                     [](const auto& nb) { return nb.empty(); });
}

void CarParams::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw std::invalid_argument("CAR precision tau must be positive, got " + std::to_string(tau));
  }
  if (!(std::abs(phi) < 1.0)) {
    throw std::invalid_argument("CAR dependence phi must lie in (-1, 1), got " +
                                std::to_string(phi));
  }
}

// ---------------------------------------------------------------------------

SparseSymMatrix::SparseSymMatrix(std::size_t dim, std::vector<Entry> entries) : dim_(dim) {
  std::map<std::pair<int, int>, double> acc;
  for (const auto& e : entries) {
    if (e.row < 0 || e.col < 0 || static_cast<std::size_t>(e.row) >= dim ||
        static_cast<std::size_t>(e.col) >= dim) {
      throw DimensionMismatch("sparse entry (" + std::to_string(e.row) + ", " +
                              std::to_string(e.col) + ") outside dimension " +
                              std::to_string(dim));
    }
    acc[{std::min(e.row, e.col), std::max(e.row, e.col)}] += e.value;
  }
  entries_.reserve(acc.size());
  for (const auto& [key, v] : acc) entries_.push_back({key.first, key.second, v});
}

SparseSymMatrix SparseSymMatrix::identity(std::size_t dim, double scale) {
  std::vector<Entry> e;
  e.reserve(dim);
  for (std::size_t i = 0; i < dim; ++i) e.push_back({int(i), int(i), scale});
  return SparseSymMatrix(dim, std::move(e));
}

SparseSymMatrix SparseSymMatrix::diagonal(const Eigen::VectorXd& diag) {
  std::vector<Entry> e;
  e.reserve(static_cast<std::size_t>(diag.size()));
  for (Eigen::Index i = 0; i < diag.size(); ++i) e.push_back({int(i), int(i), diag(i)});
  return SparseSymMatrix(static_cast<std::size_t>(diag.size()), std::move(e));
}

SparseSymMatrix SparseSymMatrix::from_dense(const Eigen::MatrixXd& m, double drop_tol) {
  if (m.rows() != m.cols()) throw DimensionMismatch("from_dense: matrix is not square");
  std::vector<Entry> e;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i <= j; ++i) {
      if (std::abs(m(i, j)) > drop_tol || (i == j && m(i, j) != 0.0)) {
        e.push_back({int(i), int(j), m(i, j)});
      }
    }
  }
  return SparseSymMatrix(static_cast<std::size_t>(m.rows()), std::move(e));
}

double SparseSymMatrix::at(int i, int j) const {
  const int r = std::min(i, j);
  const int c = std::max(i, j);
  auto it = std::lower_bound(entries_.begin(), entries_.end(), std::pair{r, c},
                             [](const Entry& e, const std::pair<int, int>& k) {
                               return std::pair{e.row, e.col} < k;
                             });
  if (it != entries_.end() && it->row == r && it->col == c) return it->value;
  return 0.0;
}

Eigen::VectorXd SparseSymMatrix::diagonal_values() const {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
  for (const auto& e : entries_) {
    if (e.row == e.col) d(e.row) = e.value;
  }
  return d;
}

Eigen::MatrixXd SparseSymMatrix::to_dense() const {
  const auto n = static_cast<Eigen::Index>(dim_);
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (const auto& e : entries_) {
    m(e.row, e.col) = e.value;
    m(e.col, e.row) = e.value;
  }
  return m;
}

Eigen::SparseMatrix<double> SparseSymMatrix::to_sparse() const {
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(entries_.size() * 2);
  for (const auto& e : entries_) {
    t.emplace_back(e.row, e.col, e.value);
    if (e.row != e.col) t.emplace_back(e.col, e.row, e.value);
  }
  const auto n = static_cast<Eigen::Index>(dim_);
  Eigen::SparseMatrix<double> s(n, n);
  s.setFromTriplets(t.begin(), t.end());
  return s;
}

Eigen::VectorXd SparseSymMatrix::multiply(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != dim_) {
    throw DimensionMismatch("multiply: vector length does not match matrix dimension");
  }
  Eigen::VectorXd y = Eigen::VectorXd::Zero(x.size());
  for (const auto& e : entries_) {
    y(e.row) += e.value * x(e.col);
    if (e.row != e.col) y(e.col) += e.value * x(e.row);
  }
  return y;
}

// ---------------------------------------------------------------------------

AdjacencyGraph ring(int n) {
  if (n < 3) throw InvalidGraph("ring requires n >= 3, got " + std::to_string(n));
  std::vector<std::vector<int>> nb(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    nb[static_cast<std::size_t>(i)] = {(i + n - 1) % n, (i + 1) % n};
  }
  return AdjacencyGraph(static_cast<std::size_t>(n), std::move(nb));
}

AdjacencyGraph grid(int rows, int cols) {
  if (rows < 1 || cols < 1) {
    throw InvalidGraph("grid dimensions must be positive, got " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }
  const auto n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  std::vector<std::vector<int>> nb(n);
  auto id = [cols](int r, int c) { return r * cols + c; };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      auto& v = nb[static_cast<std::size_t>(id(r, c))];
      if (r > 0) v.push_back(id(r - 1, c));
      if (r + 1 < rows) v.push_back(id(r + 1, c));
      if (c > 0) v.push_back(id(r, c - 1));
      if (c + 1 < cols) v.push_back(id(r, c + 1));
    }
  }
  return AdjacencyGraph(n, std::move(nb));
}

AdjacencyGraph knn_graph(const Eigen::MatrixXd& points, int k) {
  const auto n = static_cast<int>(points.rows());
  if (n < 2 || k < 1 || k >= n) throw InvalidGraph("knn graph needs 1 <= k < n");
  auto dist2 = [&](int i, int j) { return (points.row(i) - points.row(j)).squaredNorm(); };
  std::vector<std::vector<int>> nb(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k + 1, order.end(),
                      [&](int a, int b) { return dist2(i, a) < dist2(i, b); });
    for (int m = 0, added = 0; added < k; ++m) {
      const int j = order[static_cast<std::size_t>(m)];
      if (j == i) continue;
      nb[static_cast<std::size_t>(i)].push_back(j);
      nb[static_cast<std::size_t>(j)].push_back(i);
      ++added;
    }
  }
  // label components, then link each stray component to the first one
  for (;;) {
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    int ncomp = 0;
    for (int s = 0; s < n; ++s) {
      if (comp[static_cast<std::size_t>(s)] >= 0) continue;
      std::vector<int> stack{s};
      comp[static_cast<std::size_t>(s)] = ncomp;
      while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        for (int w : nb[static_cast<std::size_t>(v)]) {
          if (comp[static_cast<std::size_t>(w)] < 0) {
            comp[static_cast<std::size_t>(w)] = ncomp;
            stack.push_back(w);
          }
        }
      }
      ++ncomp;
    }
    if (ncomp == 1) break;
    double best = std::numeric_limits<double>::infinity();
    int bi = -1, bj = -1;
    for (int i = 0; i < n; ++i) {
      if (comp[static_cast<std::size_t>(i)] != 1) continue;
      for (int j = 0; j < n; ++j) {
        if (comp[static_cast<std::size_t>(j)] == 1) continue;
        if (const double d = dist2(i, j); d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    nb[static_cast<std::size_t>(bi)].push_back(bj);
    nb[static_cast<std::size_t>(bj)].push_back(bi);
  }
  for (auto& v : nb) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return AdjacencyGraph(static_cast<std::size_t>(n), std::move(nb));
}

AdjacencyGraph from_edge_list(int n, const std::vector<std::pair<int, int>>& edges) {
  if (n < 1) throw InvalidGraph("graph must have at least one node");
  std::vector<std::vector<int>> nb(static_cast<std::size_t>(n));
  for (const auto& [i, j] : edges) {
    if (i < 0 || j < 0 || i >= n || j >= n) {
      throw InvalidGraph("edge (" + std::to_string(i) + ", " + std::to_string(j) +
                         ") references a node outside [0, " + std::to_string(n) + ")");
    }
    if (i == j) throw InvalidGraph("self-loop at node " + std::to_string(i));
    nb[static_cast<std::size_t>(i)].push_back(j);
    nb[static_cast<std::size_t>(j)].push_back(i);
  }
  for (auto& v : nb) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return AdjacencyGraph(static_cast<std::size_t>(n), std::move(nb));
}

SparseSymMatrix car_precision(const AdjacencyGraph& g, const CarParams& p) {
  p.validate();
  std::vector<SparseSymMatrix::Entry> e;
  e.reserve(g.size() + g.edge_count());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.degree(i) == 0) {
      throw DegeneratePrecision("node " + std::to_string(i) +
                                " has no neighbours; CAR precision is undefined");
    }
    e.push_back({int(i), int(i), p.tau * double(g.degree(i))});
    for (int j : g.neighbors(i)) {
      if (static_cast<std::size_t>(j) > i) e.push_back({int(i), j, -p.tau * p.phi});
    }
  }
  return SparseSymMatrix(g.size(), std::move(e));
}

bool is_positive_definite(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) return false;
  return (llt.matrixLLT().diagonal().array() > 0.0).all();
}

bool is_positive_definite(const SparseSymMatrix& m) {
  if (m.dim() == 0) return false;
  if (m.dim() <= kDenseThreshold) return is_positive_definite(m.to_dense());
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(m.to_sparse());
  if (llt.info() != Eigen::Success) return false;
  Eigen::SparseMatrix<double> l = llt.matrixL();
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!(l.coeff(i, i) > 0.0)) return false;
  }
  return true;
}

std::vector<std::pair<std::string, std::string>> read_edge_list_csv(const std::string& path) {
  const auto table = csv::read(path);
  const int src = table.column("src");
  const int dst = table.column("dst");
  if (src < 0 || dst < 0) throw DataError(path + ": adjacency CSV needs `src,dst` header");
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    out.emplace_back(row[static_cast<std::size_t>(src)], row[static_cast<std::size_t>(dst)]);
  }
  return out;
}

void write_edge_list_csv(const AdjacencyGraph& g, const std::vector<std::string>& ids,
                         const std::string& path) {
  if (ids.size() != g.size()) throw DimensionMismatch("id list length does not match graph");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "src,dst\n";
  for (const auto& [i, j] : g.edges()) {
    out << ids[static_cast<std::size_t>(i)] << ',' << ids[static_cast<std::size_t>(j)] << '\n';
  }
}

}  // namespace spatconf
