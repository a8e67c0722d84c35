// Copyright 2026 The LPSFed Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace lpsfed {

using Edge = std::pair<int, int>;  // (user_index, item_index)

/// Sparse user-item interaction graph. Edges are binary (implicit feedback),
/// deduplicated, and kept in CSR form for both orientations.
class BipartiteGraph {
 public:
  BipartiteGraph() = default;

  /// Builds from an edge list. Duplicates collapse to a single edge; indices
  /// are validated against [0, num_users) x [0, num_items).
  static BipartiteGraph from_edges(int num_users, int num_items,
                                   std::vector<Edge> edges) {
    if (num_users < 0 || num_items < 0)
      throw std::invalid_argument("negative node count");
    for (const auto& [u, i] : edges) {
      if (u < 0 || u >= num_users)
        throw std::invalid_argument("user index " + std::to_string(u) +
                                    " out of range");
      if (i < 0 || i >= num_items)
        throw std::invalid_argument("item index " + std::to_string(i) +
                                    " out of range");
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    BipartiteGraph g;
    g.num_users_ = num_users;
    g.num_items_ = num_items;
    g.edges_ = std::move(edges);
    g.build_csr();
    return g;
  }

  int num_users() const { return num_users_; }
  int num_items() const { return num_items_; }
  int num_nodes() const { return num_users_ + num_items_; }
  std::int64_t num_edges() const {
    return static_cast<std::int64_t>(edges_.size());
  }
  const std::vector<Edge>& edges() const { return edges_; }

  /// Items of a user, ascending.
  std::pair<const int*, const int*> items_of(int u) const {
    return {user_adj_.data() + user_ptr_[u],
            user_adj_.data() + user_ptr_[u + 1]};
  }
  /// Users of an item, ascending.
  std::pair<const int*, const int*> users_of(int i) const {
    return {item_adj_.data() + item_ptr_[i],
            item_adj_.data() + item_ptr_[i + 1]};
  }

  int user_degree(int u) const { return user_ptr_[u + 1] - user_ptr_[u]; }
  int item_degree(int i) const { return item_ptr_[i + 1] - item_ptr_[i]; }

  bool has_edge(int u, int i) const {
    auto [b, e] = items_of(u);
    return std::binary_search(b, e, i);
  }

  /// FNV-1a over (M, N, sorted edge list). Keys the spectrum cache.
  std::uint64_t content_hash() const {
    std::uint64_t h = 14695981039346656037ULL;
    auto eat = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xffULL;
        h *= 1099511628211ULL;
      }
    };
    eat(static_cast<std::uint64_t>(num_users_));
    eat(static_cast<std::uint64_t>(num_items_));
    for (const auto& [u, i] : edges_) {
      eat(static_cast<std::uint64_t>(u));
      eat(static_cast<std::uint64_t>(i));
    }
    return h;
  }

 private:
  void build_csr() {
    user_ptr_.assign(num_users_ + 1, 0);
    item_ptr_.assign(num_items_ + 1, 0);
    for (const auto& [u, i] : edges_) {
      ++user_ptr_[u + 1];
      ++item_ptr_[i + 1];
    }
    for (int u = 0; u < num_users_; ++u) user_ptr_[u + 1] += user_ptr_[u];
    for (int i = 0; i < num_items_; ++i) item_ptr_[i + 1] += item_ptr_[i];
    user_adj_.resize(edges_.size());
    item_adj_.resize(edges_.size());
    std::vector<int> ucur(user_ptr_.begin(), user_ptr_.end() - 1);
    std::vector<int> icur(item_ptr_.begin(), item_ptr_.end() - 1);
    for (const auto& [u, i] : edges_) {
      user_adj_[ucur[u]++] = i;
      item_adj_[icur[i]++] = u;
    }
  }

  int num_users_ = 0;
  int num_items_ = 0;
  std::vector<Edge> edges_;
  std::vector<int> user_ptr_, user_adj_;
  std::vector<int> item_ptr_, item_adj_;
};

/// Symmetric sparse matrix in compressed column storage. Graph-derived
/// matrices (adjacency, Laplacian) have dimension M+N.
class SparseSymmetricMatrix {
 public:
  SparseSymmetricMatrix() = default;
  explicit SparseSymmetricMatrix(Eigen::SparseMatrix<double> m)
      : m_(std::move(m)) {
    if (m_.rows() != m_.cols())
      throw std::invalid_argument("matrix not square");
    m_.makeCompressed();
  }

  static SparseSymmetricMatrix from_triplets(
      int dim, const std::vector<Eigen::Triplet<double>>& triplets) {
    Eigen::SparseMatrix<double> m(dim, dim);
    m.setFromTriplets(triplets.begin(), triplets.end());
    return SparseSymmetricMatrix(std::move(m));
  }

  int dim() const { return static_cast<int>(m_.rows()); }
  std::int64_t nonzeros() const { return m_.nonZeros(); }
  const Eigen::SparseMatrix<double>& matrix() const { return m_; }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return m_ * x; }

  bool is_symmetric(double tol = 1e-12) const {
    Eigen::SparseMatrix<double> d = m_ - Eigen::SparseMatrix<double>(m_.transpose());
    for (int k = 0; k < d.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(d, k); it; ++it)
        if (std::abs(it.value()) > tol) return false;
    return true;
  }

  /// Row sums; for 0/1 adjacency these are node degrees.
  Eigen::VectorXd row_sums() const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(dim());
    for (int k = 0; k < m_.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(m_, k); it; ++it)
        s[it.row()] += it.value();
    return s;
  }

 private:
  Eigen::SparseMatrix<double> m_;
};

/// Per-side degree-based popularity, normalized by the max degree on that
/// side so all scores land in [0, 1].
struct PopularityScores {
  Eigen::VectorXd user_pop;  // length M
  Eigen::VectorXd item_pop;  // length N
  double user_max_degree = 0;
  double item_max_degree = 0;
};

/// (M+N)x(M+N) block adjacency [0 R; R^T 0] with R the binary interaction
/// matrix; users occupy rows 0..M-1, items rows M..M+N-1.
inline SparseSymmetricMatrix build_adjacency(const BipartiteGraph& g) {
  if (g.num_edges() == 0) throw std::invalid_argument("empty graph");
  const int m = g.num_users();
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(2 * g.num_edges());
  for (const auto& [u, i] : g.edges()) {
    t.emplace_back(u, m + i, 1.0);
    t.emplace_back(m + i, u, 1.0);
  }
  return SparseSymmetricMatrix::from_triplets(g.num_nodes(), t);
}

/// L = I - D^{-1/2} A D^{-1/2}. Every node must have positive degree;
/// isolated nodes are supposed to be dropped upstream.
inline SparseSymmetricMatrix normalized_laplacian(
    const SparseSymmetricMatrix& a) {
  const int n = a.dim();
  Eigen::VectorXd deg = a.row_sums();
  for (int v = 0; v < n; ++v)
    if (deg[v] <= 0.0)
      throw std::invalid_argument("isolated node at index " +
                                  std::to_string(v));
  Eigen::VectorXd inv_sqrt = deg.array().rsqrt();

  std::vector<Eigen::Triplet<double>> t;
  t.reserve(a.nonzeros() + n);
  for (int v = 0; v < n; ++v) t.emplace_back(v, v, 1.0);
  const auto& m = a.matrix();
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
      t.emplace_back(it.row(), it.col(),
                     -it.value() * inv_sqrt[it.row()] * inv_sqrt[it.col()]);
  return SparseSymmetricMatrix::from_triplets(n, t);
}

/// Popularity p_u, p_i: train-set degree over max train-set degree per side.
inline PopularityScores compute_popularity(const BipartiteGraph& g) {
  if (g.num_edges() == 0) throw std::invalid_argument("empty graph");
  PopularityScores p;
  p.user_pop.resize(g.num_users());
  p.item_pop.resize(g.num_items());
  for (int u = 0; u < g.num_users(); ++u) p.user_pop[u] = g.user_degree(u);
  for (int i = 0; i < g.num_items(); ++i) p.item_pop[i] = g.item_degree(i);
  p.user_max_degree = p.user_pop.maxCoeff();
  p.item_max_degree = p.item_pop.maxCoeff();
  if (p.user_max_degree > 0) p.user_pop /= p.user_max_degree;
  if (p.item_max_degree > 0) p.item_pop /= p.item_max_degree;
  return p;
}

}  // namespace lpsfed
