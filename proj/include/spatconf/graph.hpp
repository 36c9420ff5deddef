#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace spatconf {

/// Undirected adjacency structure over nodes 0..n-1.
///
/// Neighbour lists are sorted, duplicate free, symmetric and contain no
/// self-loops; the constructor enforces all of this. Isolated nodes are
/// representable, but a CAR precision cannot be built on them.
class AdjacencyGraph {
 public:
  AdjacencyGraph(std::size_t n, std::vector<std::vector<int>> neighbors);

  std::size_t size() const { return neighbors_.size(); }
  const std::vector<int>& neighbors(std::size_t i) const { return neighbors_.at(i); }
  std::size_t degree(std::size_t i) const { return neighbors_.at(i).size(); }
  std::size_t edge_count() const { return edge_count_; }
  bool adjacent(int i, int j) const;

  /// Undirected edges as (i, j) with i < j, in lexicographic order.
  std::vector<std::pair<int, int>> edges() const;
  Eigen::VectorXd degrees() const;
  /// True when every node has the same degree (D is a scalar matrix).
  bool is_regular() const;
  bool has_isolated_node() const;

  friend bool operator==(const AdjacencyGraph& a, const AdjacencyGraph& b) {
    return a.neighbors_ == b.neighbors_;
  }

 private:
  std::vector<std::vector<int>> neighbors_;
  std::size_t edge_count_ = 0;
};

/// Precision scale and spatial dependence of a proper CAR field.
struct CarParams {
  double tau = 1.0;
  double phi = 0.0;

  void validate() const;
};

/// Symmetric sparse matrix holding each off-diagonal pair once (row <= col).
class SparseSymMatrix {
 public:
  struct Entry {
    int row;
    int col;
    double value;
  };

  SparseSymMatrix() = default;
  /// Entries may reference either triangle; duplicates are summed.
  SparseSymMatrix(std::size_t dim, std::vector<Entry> entries);

  static SparseSymMatrix identity(std::size_t dim, double scale = 1.0);
  static SparseSymMatrix diagonal(const Eigen::VectorXd& diag);
  /// Keeps entries with |value| > drop_tol from the upper triangle of `m`.
  static SparseSymMatrix from_dense(const Eigen::MatrixXd& m, double drop_tol = 0.0);

  std::size_t dim() const { return dim_; }
  const std::vector<Entry>& entries() const { return entries_; }
  double at(int i, int j) const;
  Eigen::VectorXd diagonal_values() const;

  Eigen::MatrixXd to_dense() const;
  /// Both triangles, column major.
  Eigen::SparseMatrix<double> to_sparse() const;
  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const;

 private:
  std::size_t dim_ = 0;
  std::vector<Entry> entries_;  // sorted by (row, col), row <= col
};

AdjacencyGraph ring(int n);
AdjacencyGraph grid(int rows, int cols);
AdjacencyGraph from_edge_list(int n, const std::vector<std::pair<int, int>>& edges);
/// Symmetrised k-nearest-neighbour graph of the rows of `points` (n x 2).
/// Components are then joined through their closest pair of points, so the
/// result is connected.
AdjacencyGraph knn_graph(const Eigen::MatrixXd& points, int k);

/// tau * (D - phi * W) on the graph.
SparseSymMatrix car_precision(const AdjacencyGraph& g, const CarParams& p);

/// Dense factorisations are used up to this dimension, sparse ones above.
inline constexpr std::size_t kDenseThreshold = 512;

bool is_positive_definite(const SparseSymMatrix& m);
bool is_positive_definite(const Eigen::MatrixXd& m);

/// Edge-list CSV with a `src,dst` header and string node IDs.
std::vector<std::pair<std::string, std::string>> read_edge_list_csv(const std::string& path);
void write_edge_list_csv(const AdjacencyGraph& g, const std::vector<std::string>& ids,
                         const std::string& path);

}  // namespace spatconf
