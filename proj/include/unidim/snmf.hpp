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

// Symmetric NMF, min_{W >= 0} 1/2 |S - W W^T|_F^2, by block successive upper-bound
// minimization. Blocks are the columns of W, visited cyclically; inside a column
// each entry is set to the exact nonnegative minimizer of the objective restricted
// to that entry (a univariate quartic), so every update is a tight upper bound
// step and the objective never increases.

#pragma once

#include "unidim/assignment.hpp"
#include "unidim/error.hpp"
#include "unidim/rng.hpp"
#include "unidim/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace unidim {

struct SnmfOptions {
  double tol = 1e-6;  // relative objective decrease that counts as converged
  int max_iters = 500;
  bool check_psd = true;        // eigen-check S before fitting (O(N^3))
  double psd_tolerance = 1e-6;  // relative to the largest eigenvalue
};

namespace detail {

// argmin over x >= 0 of x^4/4 + a x^2/2 + b x; `current` is always a candidate.
inline double min_quartic_nonneg(double a, double b, double current) {
  auto q = [&](double x) { return x * x * (0.25 * x * x + 0.5 * a) + b * x; };
  double best = current, qbest = q(current);
  auto consider = [&](double x) {
    if (!std::isfinite(x)) return;
    // Newton polish on the cubic x^3 + a x + b.
    for (int it = 0; it < 2; ++it) {
      double d = 3 * x * x + a;
      if (d == 0) break;
      x -= (x * x * x + a * x + b) / d;
    }
    if (!(x >= 0)) return;
    double qx = q(x);
    if (qx < qbest) {
      qbest = qx;
      best = x;
    }
  };
  if (q(0.0) < qbest) {
    qbest = q(0.0);
    best = 0.0;
  }
  const double disc = 0.25 * b * b + a * a * a / 27.0;
  if (disc >= 0) {
    const double s = std::sqrt(disc);
    consider(std::cbrt(-0.5 * b + s) + std::cbrt(-0.5 * b - s));
  } else {
    const double m = 2.0 * std::sqrt(-a / 3.0);
    const double theta = std::acos(std::clamp(3.0 * b / (a * m), -1.0, 1.0)) / 3.0;
    for (int k = 0; k < 3; ++k) consider(m * std::cos(theta - 2.0 * std::numbers::pi * k / 3.0));
  }
  return best;
}

inline void check_similarity_input(const Matrix& S, const SnmfOptions& opts) {
  require(S.rows() == S.cols() && S.rows() >= 2, ErrorKind::input, "similarity matrix must be square with N >= 2");
  const double scale = std::max(S.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  for (Index j = 0; j < S.cols(); ++j) {
    for (Index i = 0; i < S.rows(); ++i) {
      require(std::isfinite(S(i, j)), ErrorKind::input, "similarity matrix has non-finite entries");
      require(S(i, j) >= 0, ErrorKind::input, "similarity matrix has negative entries");
      require(std::abs(S(i, j) - S(j, i)) <= 1e-6 * scale, ErrorKind::input, "similarity matrix is not symmetric");
    }
  }
  if (opts.check_psd) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().maxCoeff(), lmin = es.eigenvalues().minCoeff();
    require(lmin >= -opts.psd_tolerance * std::max(lmax, 0.0), ErrorKind::input,
            "similarity matrix is not PSD within tolerance (min eigenvalue " + std::to_string(lmin) + ")");
  }
}

}  // namespace detail

/// Smallest eigenvalue relative to the largest; used for PSD checks.
inline double min_relative_eigenvalue(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() / es.eigenvalues().maxCoeff();
}

/// Entries i.i.d. uniform on (0, sqrt(mean(S)/r)].
inline Matrix snmf_initialize(const Matrix& S, Index r, std::uint64_t seed) {
  const double upper = std::sqrt(std::max(S.mean(), 0.0) / static_cast<double>(r));
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix W(S.rows(), r);
  for (Index i = 0; i < W.rows(); ++i)
    for (Index k = 0; k < r; ++k) W(i, k) = upper * (1.0 - unif(rng));
  return W;
}

/// 1/2 |S - W W^T|_F^2 computed directly over column blocks.
inline double snmf_objective(const Matrix& S, const Matrix& W) {
  const Index n = S.rows(), block = 256;
  double acc = 0.0;
  for (Index j = 0; j < n; j += block) {
    const Index nj = std::min(block, n - j);
    acc += (S.middleCols(j, nj) - W * W.middleRows(j, nj).transpose()).squaredNorm();
  }
  return 0.5 * acc;
}

/// 1 - |S - W W^T|^2 / |S|^2, without clamping.
inline double explained_variance_unclamped(const Matrix& S, const Matrix& W) {
  require(S.rows() == S.cols() && W.rows() == S.rows(), ErrorKind::input, "explained variance: shapes do not conform");
  const double total = S.squaredNorm();
  require(total > 0, ErrorKind::degenerate, "explained variance of an all-zero similarity matrix");
  return 1.0 - 2.0 * snmf_objective(S, W) / total;
}

/// Explained variance clamped to [0,1] for reporting.
inline double explained_variance(const Matrix& S, const Matrix& W) {
  return std::clamp(explained_variance_unclamped(S, W), 0.0, 1.0);
}

inline Embedding snmf_fit(const Matrix& S, Index r, std::uint64_t seed, const SnmfOptions& opts = {},
                          std::optional<Matrix> W0 = std::nullopt) {
  require(r >= 1 && r < S.rows(), ErrorKind::input, "rank must satisfy 1 <= r < N");
  require(opts.max_iters >= 1 && opts.tol > 0, ErrorKind::input, "invalid solver tolerances");
  detail::check_similarity_input(S, opts);

  const Index n = S.rows();
  Embedding out;
  out.seed = seed;
  Matrix W = W0 ? *W0 : snmf_initialize(S, r, seed);
  require(W.rows() == n && W.cols() == r && (W.array() >= 0).all(), ErrorKind::input, "invalid initial factor");

  const double s_norm2 = S.squaredNorm();
  Matrix SW(n, r), G(r, r), W_prev;
  double prev = std::numeric_limits<double>::infinity();
  int sweeps = 0;
  for (;;) {
    SW.noalias() = S * W;
    G.noalias() = W.transpose() * W;
    double obj = std::max(0.0, 0.5 * (s_norm2 - 2.0 * W.cwiseProduct(SW).sum() + G.squaredNorm()));
    if (sweeps > 0) {
      if (obj > prev) {
        // Round-off pushed the last sweep uphill: keep the previous iterate.
        W = W_prev;
        --sweeps;
        out.converged = true;
        break;
      }
      const double rel = (prev - obj) / std::max(prev, std::numeric_limits<double>::min());
      out.trace.push_back(obj);
      if (rel < opts.tol) {
        out.converged = true;
        prev = obj;
        break;
      }
    } else {
      out.trace.push_back(obj);
    }
    prev = obj;
    if (obj <= 1e-30 * s_norm2) {
      out.converged = true;
      break;
    }
    if (sweeps == opts.max_iters) break;

    W_prev = W;
    for (Index k = 0; k < r; ++k) {
      Vector Sw = SW.col(k);
      for (Index i = 0; i < n; ++i) {
        const double wi = W(i, k);
        const double colnorm2 = G(k, k);
        const double rowdot = W.row(i).dot(G.col(k));
        const double g = rowdot - Sw(i);
        const double rii = W.row(i).squaredNorm() - S(i, i);
        const double p = colnorm2 + wi * wi + rii;
        const double a = p - 3.0 * wi * wi;
        const double b = 2.0 * wi * wi * wi - p * wi + g;
        const double x = detail::min_quartic_nonneg(a, b, wi);
        const double delta = x - wi;
        if (delta == 0.0) continue;
        for (Index l = 0; l < r; ++l) {
          if (l == k) continue;
          G(l, k) += delta * W(i, l);
          G(k, l) = G(l, k);
        }
        G(k, k) += 2.0 * delta * wi + delta * delta;
        W(i, k) = x;
        Sw.noalias() += delta * S.col(i);
      }
    }
    ++sweeps;
  }
  out.W = std::move(W);
  out.iterations = sweeps;
  out.objective = prev;
  out.explained_variance = std::clamp(1.0 - 2.0 * prev / s_norm2, 0.0, 1.0);
  return out;
}

inline Embedding snmf_fit(const SimilarityMatrix& S, Index r, std::uint64_t seed, const SnmfOptions& opts = {}) {
  Embedding e = snmf_fit(S.values, r, seed, opts);
  e.model_id = S.model_id;
  e.alpha = S.alpha;
  return e;
}

// ---------------------------------------------------------------------------
// Cross-seed alignment and bandwidth selection

/// Pearson correlation between columns of A and columns of B. Zero-variance
/// columns correlate 0 with everything.
inline Matrix column_correlations(const Matrix& A, const Matrix& B, std::vector<bool>* zero_a = nullptr,
                                  std::vector<bool>* zero_b = nullptr) {
  require(A.rows() == B.rows(), ErrorKind::input, "column correlation: row counts differ");
  auto standardize = [](const Matrix& X, std::vector<bool>* zero) {
    Matrix Z = X.rowwise() - X.colwise().mean();
    if (zero) zero->assign(static_cast<std::size_t>(X.cols()), false);
    for (Index j = 0; j < Z.cols(); ++j) {
      double norm = Z.col(j).norm();
      if (norm > 0) {
        Z.col(j) /= norm;
      } else {
        Z.col(j).setZero();
        if (zero) (*zero)[static_cast<std::size_t>(j)] = true;
      }
    }
    return Z;
  };
  return standardize(A, zero_a).transpose() * standardize(B, zero_b);
}

struct EmbeddingAlignment {
  std::vector<Index> permutation;  // column k of A is matched to column permutation[k] of B
  std::vector<double> correlations;
  std::vector<bool> zero_variance;  // A's column k or its partner had zero variance

  double mean() const {
    double s = 0;
    for (double c : correlations) s += c;
    return correlations.empty() ? 0.0 : s / static_cast<double>(correlations.size());
  }
};

inline EmbeddingAlignment align_embeddings(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows() && A.cols() == B.cols(), ErrorKind::input, "align_embeddings: shapes differ");
  std::vector<bool> za, zb;
  const Matrix C = column_correlations(A, B, &za, &zb);
  const Assignment asg = solve_max_profit(C);
  EmbeddingAlignment out;
  out.permutation = asg.col_of_row;
  for (Index k = 0; k < A.cols(); ++k) {
    const Index j = asg.col_of_row[static_cast<std::size_t>(k)];
    out.correlations.push_back(C(k, j));
    out.zero_variance.push_back(za[static_cast<std::size_t>(k)] || zb[static_cast<std::size_t>(j)]);
  }
  return out;
}

inline EmbeddingAlignment align_embeddings(const Embedding& a, const Embedding& b) { return align_embeddings(a.W, b.W); }

/// Symmetric B x B matrix of mean matched correlations (diagonal 1).
inline Matrix pairwise_matched_correlation(std::span<const Embedding> fits) {
  const Index b = static_cast<Index>(fits.size());
  Matrix M = Matrix::Identity(b, b);
  for (Index i = 0; i < b; ++i)
    for (Index j = i + 1; j < b; ++j) {
      M(i, j) = align_embeddings(fits[static_cast<std::size_t>(i)], fits[static_cast<std::size_t>(j)]).mean();
      M(j, i) = M(i, j);
    }
  return M;
}

/// Mean over seed pairs of the mean matched correlation.
inline double stability(std::span<const Embedding> fits) {
  require(fits.size() >= 2, ErrorKind::input, "stability needs at least two fits");
  for (const auto& f : fits)
    require(f.W.rows() == fits.front().W.rows() && f.W.cols() == fits.front().W.cols(), ErrorKind::input,
            "stability: fits differ in shape");
  const Matrix M = pairwise_matched_correlation(fits);
  double s = 0;
  const Index b = M.rows();
  for (Index i = 0; i < b; ++i)
    for (Index j = i + 1; j < b; ++j) s += M(i, j);
  return s / static_cast<double>(b * (b - 1) / 2);
}

inline double harmonic_mean(double stab, double ev) {
  stab = std::max(stab, 0.0);
  if (!(stab > 0) || !(ev > 0)) return 0.0;
  return 2.0 * stab * ev / (stab + ev);
}

struct AlphaSummary {
  double alpha = 0.0;
  double stability = 0.0;
  double explained_variance = 0.0;  // mean over seeds
  std::vector<std::uint64_t> seeds;
  std::vector<double> centrality;  // per seed: mean matched correlation to the other seeds
};

inline AlphaSummary summarize_alpha(std::span<const Embedding> fits) {
  require(!fits.empty(), ErrorKind::input, "no fits to summarize");
  AlphaSummary s;
  s.alpha = fits.front().alpha;
  double ev = 0;
  for (const auto& f : fits) {
    ev += f.explained_variance;
    s.seeds.push_back(f.seed);
  }
  s.explained_variance = ev / static_cast<double>(fits.size());
  if (fits.size() < 2) {
    s.stability = std::nan("");
    s.centrality.assign(1, 1.0);
    return s;
  }
  const Matrix M = pairwise_matched_correlation(fits);
  const Index b = M.rows();
  double total = 0;
  for (Index i = 0; i < b; ++i) {
    double row = 0;
    for (Index j = 0; j < b; ++j)
      if (j != i) row += M(i, j);
    s.centrality.push_back(row / static_cast<double>(b - 1));
    total += row;
  }
  s.stability = total / static_cast<double>(b * (b - 1));
  return s;
}

struct FitSelection {
  struct Row {
    double alpha, stability, explained_variance, harmonic_mean;
  };
  double chosen_alpha = 0.0;
  std::size_t chosen_index = 0;
  std::vector<Row> per_alpha;
  std::uint64_t central_seed = 0;
  std::size_t central_index = 0;
};

/// Harmonic-mean argmax over the grid (ties toward smaller alpha), then the most
/// central seed within the winner.
inline FitSelection select_bandwidth(std::span<const AlphaSummary> grid) {
  require(!grid.empty(), ErrorKind::input, "empty bandwidth grid");
  FitSelection sel;
  std::optional<std::size_t> best;
  double best_h = -1.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& g = grid[i];
    const bool valid = std::isfinite(g.stability) && std::isfinite(g.explained_variance);
    const double h = valid ? harmonic_mean(g.stability, g.explained_variance) : std::nan("");
    sel.per_alpha.push_back({g.alpha, g.stability, g.explained_variance, h});
    if (!valid) continue;
    if (!best || h > best_h || (h == best_h && g.alpha < grid[*best].alpha)) {
      best = i;
      best_h = h;
    }
  }
  require(best.has_value(), ErrorKind::degenerate, "every bandwidth grid point is degenerate");
  sel.chosen_index = *best;
  sel.chosen_alpha = grid[*best].alpha;
  const auto& c = grid[*best].centrality;
  require(!c.empty() && c.size() == grid[*best].seeds.size(), ErrorKind::input, "centrality missing for chosen alpha");
  sel.central_index = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
  sel.central_seed = grid[*best].seeds[sel.central_index];
  return sel;
}

/// Fits one solution per seed.
inline std::vector<Embedding> fit_seeds(const SimilarityMatrix& S, Index r, std::span<const std::uint64_t> seeds,
                                        const SnmfOptions& opts = {}) {
  SnmfOptions o = opts;
  if (o.check_psd) {
    detail::check_similarity_input(S.values, o);
    o.check_psd = false;
  }
  std::vector<Embedding> fits;
  for (auto s : seeds) fits.push_back(snmf_fit(S, r, s, o));
  return fits;
}

struct RankFit {
  Index rank = 0;
  std::vector<Embedding> fits;  // one per seed
  std::size_t best = 0;         // lowest objective

  const Embedding& best_fit() const { return fits[best]; }
};

/// Full multi-seed fit per rank with shared seeds.
inline std::vector<RankFit> rank_sweep(const SimilarityMatrix& S, std::span<const Index> ranks,
                                       std::span<const std::uint64_t> seeds, const SnmfOptions& opts = {}) {
  require(!ranks.empty() && !seeds.empty(), ErrorKind::input, "rank sweep needs ranks and seeds");
  SnmfOptions o = opts;
  if (o.check_psd) {
    detail::check_similarity_input(S.values, o);
    o.check_psd = false;
  }
  std::vector<RankFit> out;
  for (Index r : ranks) {
    RankFit rf;
    rf.rank = r;
    rf.fits = fit_seeds(S, r, seeds, o);
    for (std::size_t i = 1; i < rf.fits.size(); ++i)
      if (rf.fits[i].objective < rf.fits[rf.best].objective) rf.best = i;
    out.push_back(std::move(rf));
  }
  return out;
}

}  // namespace unidim
