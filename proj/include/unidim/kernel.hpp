/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// RBF similarity with the median-distance bandwidth heuristic.

#pragma once

#include "unidim/error.hpp"
#include "unidim/types.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace unidim {

struct KernelOptions {
  bool zscore = false;  // standardize feature columns before computing distances
  Index block = 256;    // tile edge for the blocked gram computation
};

/// Columns shifted to zero mean and scaled to unit SD; constant columns are only centered.
inline Matrix zscore_columns(const Matrix& X) {
  Matrix Z = X.rowwise() - X.colwise().mean();
  if (X.rows() < 2) return Z;
  for (Index j = 0; j < Z.cols(); ++j) {
    double sd = std::sqrt(Z.col(j).squaredNorm() / static_cast<double>(Z.rows() - 1));
    if (sd > 0) Z.col(j) /= sd;
  }
  return Z;
}

/// Median of the N(N-1)/2 distinct pairwise Euclidean distances between rows.
inline double median_pairwise_distance(const Matrix& X) {
  const Index n = X.rows();
  require(n >= 2, ErrorKind::input, "median distance needs at least two rows");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d.push_back((X.row(i) - X.row(j)).norm());
  const std::size_t m = d.size();
  const std::size_t hi = m / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(hi), d.end());
  double med = d[hi];
  if (m % 2 == 0) {
    double lo = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(hi));
    med = 0.5 * (lo + med);
  }
  require(med > 0, ErrorKind::degenerate, "median pairwise distance is zero; bandwidth is degenerate");
  return med;
}

inline double median_pairwise_distance(const FeatureMatrix& f) { return median_pairwise_distance(f.values); }

namespace detail {

inline void check_finite(const Matrix& X, const std::string& what) {
  for (Index j = 0; j < X.cols(); ++j)
    for (Index i = 0; i < X.rows(); ++i)
      require(std::isfinite(X(i, j)), ErrorKind::data,
              what + ": non-finite feature at row " + std::to_string(i) + ", column " + std::to_string(j));
}

// S = exp(-|x_i - x_j|^2 / (2 sigma^2)) over upper-triangular tiles, mirrored.
inline Matrix rbf_gram(const Matrix& X, double sigma, Index block) {
  const Index n = X.rows();
  const Vector sq = X.rowwise().squaredNorm();
  const double scale = 1.0 / (2.0 * sigma * sigma);
  Matrix S(n, n);
  block = std::max<Index>(block, 1);
  for (Index bi = 0; bi < n; bi += block) {
    const Index ni = std::min(block, n - bi);
    for (Index bj = bi; bj < n; bj += block) {
      const Index nj = std::min(block, n - bj);
      Matrix G = X.middleRows(bi, ni) * X.middleRows(bj, nj).transpose();
      for (Index j = 0; j < nj; ++j) {
        for (Index i = 0; i < ni; ++i) {
          double d2 = std::max(0.0, sq(bi + i) + sq(bj + j) - 2.0 * G(i, j));
          double v = std::exp(-d2 * scale);
          S(bi + i, bj + j) = v;
          S(bj + j, bi + i) = v;
        }
      }
    }
  }
  S.diagonal().setOnes();
  return S;
}

}  // namespace detail

inline SimilarityMatrix rbf_similarity(const FeatureMatrix& f, double alpha, const KernelOptions& opts = {}) {
  require(alpha > 0 && std::isfinite(alpha), ErrorKind::input, "alpha must be positive");
  detail::check_finite(f.values, f.model_id);
  const Matrix X = opts.zscore ? zscore_columns(f.values) : f.values;
  SimilarityMatrix s;
  s.model_id = f.model_id;
  s.alpha = alpha;
  s.median_distance = median_pairwise_distance(X);
  s.sigma = alpha * s.median_distance;
  s.values = detail::rbf_gram(X, s.sigma, opts.block);
  return s;
}

/// One similarity matrix per multiplier; the median distance is computed once.
inline std::vector<SimilarityMatrix> kernel_grid(const FeatureMatrix& f, std::span<const double> alpha_grid,
                                                 const KernelOptions& opts = {}) {
  require(!alpha_grid.empty(), ErrorKind::input, "alpha grid is empty");
  for (std::size_t i = 0; i < alpha_grid.size(); ++i) {
    require(alpha_grid[i] > 0, ErrorKind::input, "alpha grid entries must be positive");
    require(i == 0 || alpha_grid[i] > alpha_grid[i - 1], ErrorKind::input, "alpha grid must be strictly ascending");
  }
  detail::check_finite(f.values, f.model_id);
  const Matrix X = opts.zscore ? zscore_columns(f.values) : f.values;
  const double med = median_pairwise_distance(X);
  std::vector<SimilarityMatrix> out;
  out.reserve(alpha_grid.size());
  for (double a : alpha_grid) {
    SimilarityMatrix s;
    s.model_id = f.model_id;
    s.alpha = a;
    s.median_distance = med;
    s.sigma = a * med;
    s.values = detail::rbf_gram(X, s.sigma, opts.block);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace unidim
