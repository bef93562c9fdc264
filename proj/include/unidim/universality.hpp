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

// Cross-model recurrence of embedding dimensions: squared-cosine agreement,
// one-to-one matching, row-shuffle null calibration, the within-model ceiling,
// model-level summaries and model-set resampling.

#pragma once

#include "unidim/assignment.hpp"
#include "unidim/error.hpp"
#include "unidim/parallel.hpp"
#include "unidim/rng.hpp"
#include "unidim/stats.hpp"
#include "unidim/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace unidim {

// ---------------------------------------------------------------------------
// Agreement and matching

/// (u.v)^2 / (|u|^2 |v|^2).
inline double cos2(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) {
  require(u.size() == v.size(), ErrorKind::input, "cos2: length mismatch");
  const double nu = u.squaredNorm(), nv = v.squaredNorm();
  require(nu > 0 && nv > 0, ErrorKind::undefined, "cos2 is undefined for a zero vector");
  const double d = u.dot(v);
  return std::clamp(d * d / (nu * nv), 0.0, 1.0);
}

/// Columns scaled to unit norm; zero columns stay zero and are flagged.
inline Matrix normalized_columns(const Matrix& W, std::vector<bool>* zero = nullptr) {
  Matrix out = W;
  if (zero) zero->assign(static_cast<std::size_t>(W.cols()), false);
  for (Index k = 0; k < W.cols(); ++k) {
    const double n = W.col(k).norm();
    if (n > 0) {
      out.col(k) /= n;
    } else if (zero) {
      (*zero)[static_cast<std::size_t>(k)] = true;
    }
  }
  return out;
}

/// r x r matrix of cos2 between columns of A (rows) and B (columns); zero columns score 0.
inline Matrix cos2_matrix(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows(), ErrorKind::input, "cos2_matrix: row counts differ");
  return (normalized_columns(A).transpose() * normalized_columns(B)).array().square().min(1.0).matrix();
}

struct MatchResult {
  std::string source_model;
  std::string target_model;
  std::vector<Index> permutation;  // source column k -> target column permutation[k]
  std::vector<double> scores;      // cos2 of each matched pair

  double total() const {
    double s = 0;
    for (double v : scores) s += v;
    return s;
  }
};

inline MatchResult match_matrices(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows() && A.cols() == B.cols(), ErrorKind::input, "match_models: embedding shapes differ");
  const Matrix P = cos2_matrix(A, B);
  const Assignment asg = solve_max_profit(P);
  MatchResult m;
  m.permutation = asg.col_of_row;
  for (Index k = 0; k < P.rows(); ++k) m.scores.push_back(P(k, asg.col_of_row[static_cast<std::size_t>(k)]));
  return m;
}

inline MatchResult match_models(const Embedding& a, const Embedding& b) {
  MatchResult m = match_matrices(a.W, b.W);
  m.source_model = a.model_id;
  m.target_model = b.model_id;
  return m;
}

struct GreedyDiagnostic {
  std::vector<Index> source_of_target;  // best source column for each target column
  double unselected_fraction = 0.0;     // source columns never chosen
};

/// Each target column takes its single best source column (first index on ties).
inline GreedyDiagnostic greedy_match_diagnostic(const Matrix& source, const Matrix& target) {
  require(source.rows() == target.rows(), ErrorKind::input, "greedy match: row counts differ");
  const Matrix P = cos2_matrix(source, target);
  GreedyDiagnostic g;
  std::vector<bool> chosen(static_cast<std::size_t>(P.rows()), false);
  for (Index j = 0; j < P.cols(); ++j) {
    Index best = 0;
    for (Index k = 1; k < P.rows(); ++k)
      if (P(k, j) > P(best, j)) best = k;
    g.source_of_target.push_back(best);
    chosen[static_cast<std::size_t>(best)] = true;
  }
  const auto unselected = std::count(chosen.begin(), chosen.end(), false);
  g.unselected_fraction = static_cast<double>(unselected) / static_cast<double>(P.rows());
  return g;
}

inline GreedyDiagnostic greedy_match_diagnostic(const Embedding& a, const Embedding& b) {
  return greedy_match_diagnostic(a.W, b.W);
}

// ---------------------------------------------------------------------------
// Pairwise scores and the row-shuffle null

enum class CalibrationMode {
  mean,      // adjust the partner-mean score with one threshold per dimension
  per_pair,  // adjust each partner's score, then average
};

struct NullOptions {
  int permutations = 1000;
  double percentile = 0.95;
  std::uint64_t rng_seed = 0;
  CalibrationMode mode = CalibrationMode::mean;
};

inline std::uint64_t stream_key(const std::string& id) { return fnv1a64(id.data(), id.size()); }

/// Matched scores of `source` against one partner, plus `permutations` null
/// draws in which the partner's rows are shuffled. Draw b uses the stream
/// (seed, source_key, partner_key, b), so nulls are reproducible per pair.
struct PairScores {
  std::vector<double> raw;
  Matrix null;  // permutations x r
};

inline PairScores pair_scores(const Matrix& source, const Matrix& partner, int permutations, std::uint64_t seed,
                              std::uint64_t source_key, std::uint64_t partner_key) {
  require(source.rows() == partner.rows() && source.cols() == partner.cols(), ErrorKind::input,
          "pair scores: embedding shapes differ");
  PairScores ps;
  ps.raw = match_matrices(source, partner).scores;
  const Index n = source.rows(), r = source.cols();
  const Matrix A = normalized_columns(source);
  const Matrix B = normalized_columns(partner);
  ps.null.resize(std::max(permutations, 0), r);
  Matrix Bp(n, r);
  for (int b = 0; b < permutations; ++b) {
    Rng rng = make_stream(seed, {source_key, partner_key, static_cast<std::uint64_t>(b)});
    const auto perm = random_permutation(static_cast<std::size_t>(n), rng);
    for (Index i = 0; i < n; ++i) Bp.row(i) = B.row(static_cast<Index>(perm[static_cast<std::size_t>(i)]));
    const Matrix P = (A.transpose() * Bp).array().square().min(1.0).matrix();
    const Assignment asg = solve_max_profit(P);
    for (Index k = 0; k < r; ++k) ps.null(b, k) = P(k, asg.col_of_row[static_cast<std::size_t>(k)]);
  }
  return ps;
}

/// Per-dimension threshold: the percentile over draws of the partner-mean null score.
inline std::vector<double> thresholds_from_nulls(std::span<const Matrix* const> nulls, double percentile) {
  require(!nulls.empty(), ErrorKind::input, "thresholds need at least one partner");
  const Index draws = nulls.front()->rows(), r = nulls.front()->cols();
  require(draws >= 2, ErrorKind::input, "null calibration needs at least two permutations");
  Matrix mean = Matrix::Zero(draws, r);
  for (const Matrix* m : nulls) {
    require(m->rows() == draws && m->cols() == r, ErrorKind::input, "null draws disagree in shape");
    mean += *m;
  }
  mean /= static_cast<double>(nulls.size());
  std::vector<double> th(static_cast<std::size_t>(r));
  std::vector<double> col(static_cast<std::size_t>(draws));
  for (Index k = 0; k < r; ++k) {
    for (Index b = 0; b < draws; ++b) col[static_cast<std::size_t>(b)] = mean(b, k);
    th[static_cast<std::size_t>(k)] = stats::percentile(col, percentile);
  }
  return th;
}

/// Mean matched cos2 of each of m's dimensions over all other models.
inline std::vector<double> raw_universality(const Embedding& m, std::span<const Embedding> others) {
  require(!others.empty(), ErrorKind::input, "raw universality needs at least one other model");
  std::vector<double> u(static_cast<std::size_t>(m.rank()), 0.0);
  for (const auto& o : others) {
    auto s = match_models(m, o).scores;
    for (std::size_t k = 0; k < u.size(); ++k) u[k] += s[k];
  }
  for (auto& v : u) v /= static_cast<double>(others.size());
  return u;
}

inline std::vector<double> null_thresholds(const Embedding& m, std::span<const Embedding> others, int permutations,
                                           double percentile, std::uint64_t rng_seed) {
  require(permutations >= 2, ErrorKind::input, "null calibration needs at least two permutations");
  require(!others.empty(), ErrorKind::input, "null thresholds need at least one other model");
  std::vector<Matrix> nulls;
  for (const auto& o : others)
    nulls.push_back(pair_scores(m.W, o.W, permutations, rng_seed, stream_key(m.model_id), stream_key(o.model_id)).null);
  std::vector<const Matrix*> ptrs;
  for (const auto& n : nulls) ptrs.push_back(&n);
  return thresholds_from_nulls(ptrs, percentile);
}

struct Calibration {
  std::vector<double> calibrated;
  std::vector<double> pre_clamp;  // (mean - a) / (1 - a) per dimension, mean mode only
  double model_mean = 0.0;
};

/// s_adj = clamp((s - a) / (1 - a), 0, 1). `pairwise` holds one row per partner.
inline Calibration calibrate(const Matrix& pairwise, std::span<const double> thresholds,
                             CalibrationMode mode = CalibrationMode::mean) {
  const Index r = pairwise.cols();
  require(pairwise.rows() >= 1, ErrorKind::input, "calibration needs at least one partner");
  require(static_cast<Index>(thresholds.size()) == r, ErrorKind::input, "one threshold per dimension required");
  for (double a : thresholds) require(a >= 0 && a < 1, ErrorKind::input, "thresholds must lie in [0,1)");
  auto adjust = [](double s, double a) { return (s - a) / (1.0 - a); };
  Calibration c;
  c.calibrated.resize(static_cast<std::size_t>(r));
  for (Index k = 0; k < r; ++k) {
    const double a = thresholds[static_cast<std::size_t>(k)];
    if (mode == CalibrationMode::mean) {
      const double pre = adjust(pairwise.col(k).mean(), a);
      c.pre_clamp.push_back(pre);
      c.calibrated[static_cast<std::size_t>(k)] = std::clamp(pre, 0.0, 1.0);
    } else {
      double s = 0;
      for (Index p = 0; p < pairwise.rows(); ++p) s += std::clamp(adjust(pairwise(p, k), a), 0.0, 1.0);
      c.calibrated[static_cast<std::size_t>(k)] = s / static_cast<double>(pairwise.rows());
    }
  }
  double s = 0;
  for (double v : c.calibrated) s += v;
  c.model_mean = r > 0 ? s / static_cast<double>(r) : 0.0;
  return c;
}

namespace detail {

inline UniversalityReport assemble_report(const std::string& model_id, const Matrix& W,
                                          const std::vector<const PairScores*>& pairs, const NullOptions& opts) {
  const Index r = W.cols();
  Matrix pairwise(static_cast<Index>(pairs.size()), r);
  std::vector<const Matrix*> nulls;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    for (Index k = 0; k < r; ++k) pairwise(static_cast<Index>(p), k) = pairs[p]->raw[static_cast<std::size_t>(k)];
    nulls.push_back(&pairs[p]->null);
  }
  UniversalityReport rep;
  rep.model_id = model_id;
  rep.thresholds = thresholds_from_nulls(nulls, opts.percentile);
  for (auto& a : rep.thresholds) a = std::min(a, std::nextafter(1.0, 0.0));
  for (Index k = 0; k < r; ++k) rep.raw.push_back(pairwise.col(k).mean());
  auto cal = calibrate(pairwise, rep.thresholds, opts.mode);
  rep.calibrated = cal.calibrated;
  rep.model_mean = cal.model_mean;
  normalized_columns(W, &rep.zero_column);
  return rep;
}

}  // namespace detail

/// Raw scores, thresholds and calibrated scores of m against `others`.
inline UniversalityReport universality_report(const Embedding& m, std::span<const Embedding> others,
                                              const NullOptions& opts = {}) {
  require(!others.empty(), ErrorKind::input, "universality needs at least one other model");
  std::vector<PairScores> pairs;
  for (const auto& o : others)
    pairs.push_back(pair_scores(m.W, o.W, opts.permutations, opts.rng_seed, stream_key(m.model_id), stream_key(o.model_id)));
  std::vector<const PairScores*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  return detail::assemble_report(m.model_id, m.W, ptrs, opts);
}

/// All ordered pair scores of a model set, from which universality for any
/// partner subset follows exactly (nulls are per pair and per draw).
class UniversalityEnsemble {
 public:
  UniversalityEnsemble(std::vector<Embedding> models, NullOptions opts, int jobs = 1)
      : models_(std::move(models)), opts_(opts) {
    const std::size_t M = models_.size();
    require(M >= 2, ErrorKind::input, "an ensemble needs at least two models");
    for (const auto& m : models_)
      require(m.W.rows() == models_.front().W.rows() && m.W.cols() == models_.front().W.cols(), ErrorKind::consistency,
              "ensemble embeddings must share N and r");
    pairs_.resize(M * M);
    parallel_for(M * M, jobs, [&](std::size_t idx) {
      const std::size_t a = idx / M, b = idx % M;
      if (a == b) return;
      pairs_[idx] = pair_scores(models_[a].W, models_[b].W, opts_.permutations, opts_.rng_seed,
                                stream_key(models_[a].model_id), stream_key(models_[b].model_id));
    });
  }

  std::size_t size() const { return models_.size(); }
  const Embedding& model(std::size_t i) const { return models_[i]; }
  const NullOptions& options() const { return opts_; }
  const PairScores& pair(std::size_t a, std::size_t b) const { return pairs_[a * models_.size() + b]; }

  UniversalityReport report(std::size_t m, std::span<const std::size_t> partners) const {
    std::vector<const PairScores*> ptrs;
    for (auto p : partners) {
      require(p != m && p < models_.size(), ErrorKind::input, "invalid partner index");
      ptrs.push_back(&pair(m, p));
    }
    require(!ptrs.empty(), ErrorKind::input, "universality needs at least one partner");
    return detail::assemble_report(models_[m].model_id, models_[m].W, ptrs, opts_);
  }

  UniversalityReport report(std::size_t m) const {
    std::vector<std::size_t> partners;
    for (std::size_t p = 0; p < models_.size(); ++p)
      if (p != m) partners.push_back(p);
    return report(m, partners);
  }

  std::vector<UniversalityReport> reports() const {
    std::vector<UniversalityReport> out;
    for (std::size_t m = 0; m < models_.size(); ++m) out.push_back(report(m));
    return out;
  }

 private:
  std::vector<Embedding> models_;
  NullOptions opts_;
  std::vector<PairScores> pairs_;
};

// ---------------------------------------------------------------------------
// Within-model stability ceiling

struct StabilityCeiling {
  std::vector<double> raw;  // per reference dimension, mean over seed pairs
  std::vector<double> thresholds;
  std::vector<double> calibrated;
};

/// Agreement of a model's seed refits with each other. Dimensions are those of
/// seeds[reference]; each other seed's columns are mapped onto them by
/// matching, every seed pair is matched, and scores are averaged per
/// dimension, then calibrated with the row-shuffle null of the reference
/// against the other seeds.
inline StabilityCeiling stability_ceiling(std::span<const Embedding> seeds, std::size_t reference,
                                          const NullOptions& opts = {}) {
  require(seeds.size() >= 2, ErrorKind::input, "stability ceiling needs at least two seeds");
  require(reference < seeds.size(), ErrorKind::input, "reference seed out of range");
  const Index r = seeds[reference].rank();
  const std::size_t B = seeds.size();
  // owner[s][c]: reference dimension owning column c of seed s.
  std::vector<std::vector<Index>> owner(B, std::vector<Index>(static_cast<std::size_t>(r)));
  for (std::size_t s = 0; s < B; ++s) {
    if (s == reference) {
      for (Index k = 0; k < r; ++k) owner[s][static_cast<std::size_t>(k)] = k;
      continue;
    }
    auto m = match_matrices(seeds[reference].W, seeds[s].W);
    for (Index k = 0; k < r; ++k) owner[s][static_cast<std::size_t>(m.permutation[static_cast<std::size_t>(k)])] = k;
  }
  StabilityCeiling out;
  out.raw.assign(static_cast<std::size_t>(r), 0.0);
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < B; ++a) {
    for (std::size_t b = a + 1; b < B; ++b) {
      auto m = match_matrices(seeds[a].W, seeds[b].W);
      for (Index c = 0; c < r; ++c) out.raw[static_cast<std::size_t>(owner[a][static_cast<std::size_t>(c)])] += m.scores[static_cast<std::size_t>(c)];
      ++pairs;
    }
  }
  for (auto& v : out.raw) v /= static_cast<double>(pairs);

  const std::uint64_t base = stream_key(seeds[reference].model_id) ^ 0xce111e6ULL;
  std::vector<Matrix> nulls;
  for (std::size_t s = 0; s < B; ++s) {
    if (s == reference) continue;
    nulls.push_back(pair_scores(seeds[reference].W, seeds[s].W, opts.permutations, opts.rng_seed, base,
                                static_cast<std::uint64_t>(s))
                        .null);
  }
  std::vector<const Matrix*> ptrs;
  for (const auto& n : nulls) ptrs.push_back(&n);
  out.thresholds = thresholds_from_nulls(ptrs, opts.percentile);
  for (auto& a : out.thresholds) a = std::min(a, std::nextafter(1.0, 0.0));
  Matrix mean_row(1, r);
  for (Index k = 0; k < r; ++k) mean_row(0, k) = out.raw[static_cast<std::size_t>(k)];
  out.calibrated = calibrate(mean_row, out.thresholds, CalibrationMode::mean).calibrated;
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics and convergent validity

/// Lawson-Hanson active-set solution of min_{x >= 0} |A x - b|.
inline Vector nnls(const Matrix& A, const Vector& b) {
  require(A.rows() == b.size(), ErrorKind::input, "nnls: shape mismatch");
  const Index n = A.cols();
  Vector x = Vector::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * A.cwiseAbs().colwise().sum().maxCoeff() *
                     static_cast<double>(std::max(A.rows(), n));
  auto solve_passive = [&](Vector& z) {
    std::vector<Index> idx;
    for (Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    Matrix Ap(A.rows(), static_cast<Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) Ap.col(static_cast<Index>(c)) = A.col(idx[c]);
    const Vector zp = Ap.colPivHouseholderQr().solve(b);
    z.setZero(n);
    for (std::size_t c = 0; c < idx.size(); ++c) z(idx[c]) = zp(static_cast<Index>(c));
  };
  Vector w = A.transpose() * (b - A * x);
  for (int outer = 0; outer < 3 * n + 10; ++outer) {
    Index t = -1;
    double best = tol;
    for (Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best) {
        best = w(j);
        t = j;
      }
    if (t < 0) break;
    passive[static_cast<std::size_t>(t)] = true;
    Vector z;
    for (int inner = 0; inner < 3 * n + 10; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) feasible = false;
      if (feasible) break;
      double step = 1.0;
      for (Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) step = std::min(step, x(j) / (x(j) - z(j)));
      x += step * (z - x);
      for (Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && x(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0;
        }
    }
    x = z;
    for (Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)]) x(j) = 0;
    w = A.transpose() * (b - A * x);
  }
  return x.cwiseMax(0.0);
}

/// Fraction of |w|^2 captured by the nonnegative cone of W_target's columns.
inline double cone_projection_score(const Vector& w, const Matrix& W_target) {
  require(w.size() == W_target.rows(), ErrorKind::input, "cone projection: length mismatch");
  const double nw = w.squaredNorm();
  require(nw > 0, ErrorKind::undefined, "cone projection of a zero vector");
  const Vector a = nnls(W_target, w);
  return std::clamp(1.0 - (w - W_target * a).squaredNorm() / nw, 0.0, 1.0);
}

/// Linear CKA of two N x N gram matrices after double centering.
inline double cka_linear_gram(const Matrix& K, const Matrix& L) {
  require(K.rows() == K.cols() && L.rows() == L.cols() && K.rows() == L.rows(), ErrorKind::input,
          "CKA: gram matrices must be N x N");
  auto center = [](const Matrix& G) {
    Matrix C = G;
    const Vector rm = G.rowwise().mean(), cm = G.colwise().mean().transpose();
    const double gm = G.mean();
    C.colwise() -= rm;
    C.rowwise() -= cm.transpose();
    C.array() += gm;
    return C;
  };
  const Matrix Kc = center(K), Lc = center(L);
  const double den = Kc.norm() * Lc.norm();
  require(den > 0, ErrorKind::undefined, "CKA is undefined for a constant representation");
  return std::clamp(Kc.cwiseProduct(Lc).sum() / den, 0.0, 1.0);
}

/// Linear CKA of two feature matrices over the same rows (d may differ).
inline double cka_linear(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows(), ErrorKind::input, "CKA: row counts differ");
  const Matrix Ac = A.rowwise() - A.colwise().mean();
  const Matrix Bc = B.rowwise() - B.colwise().mean();
  const double num = (Ac.transpose() * Bc).squaredNorm();
  const double den = (Ac.transpose() * Ac).norm() * (Bc.transpose() * Bc).norm();
  require(den > 0, ErrorKind::undefined, "CKA is undefined for a constant representation");
  return std::clamp(num / den, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Model-set resampling

enum class ResampleMode { bootstrap_subsample, leave_family_out };

struct ResampleOptions {
  ResampleMode mode = ResampleMode::bootstrap_subsample;
  double fraction = 0.2;
  int iterations = 1000;
  std::uint64_t seed = 0;
};

struct ResampleResult {
  std::vector<double> rhos;  // Spearman rho per resample (one for leave-family-out)
  double median = stats::kNaN;
  double low = stats::kNaN;   // 2.5th percentile
  double high = stats::kNaN;  // 97.5th percentile
  std::vector<double> resampled_means;  // leave-family-out: U_m per model
};

/// Spearman agreement between full-set model-level universality and the same
/// quantity recomputed on resampled model sets. `families` is aligned with
/// the ensemble's model order.
inline ResampleResult resample_universality(const UniversalityEnsemble& ens, std::span<const std::string> families,
                                            const ResampleOptions& opts) {
  const std::size_t M = ens.size();
  require(M >= 3, ErrorKind::input, "resampling needs at least three models");
  std::vector<double> full(M);
  for (std::size_t m = 0; m < M; ++m) full[m] = ens.report(m).model_mean;
  ResampleResult res;

  auto rho_or_nan = [](const std::vector<double>& a, const std::vector<double>& b) {
    try {
      return stats::spearman(a, b).coefficient;
    } catch (const Error&) {
      return stats::kNaN;
    }
  };

  if (opts.mode == ResampleMode::bootstrap_subsample) {
    require(opts.fraction > 0 && opts.fraction <= 1, ErrorKind::input, "subsample fraction must lie in (0,1]");
    require(opts.iterations >= 1, ErrorKind::input, "subsampling needs at least one iteration");
    const auto k = static_cast<std::size_t>(std::llround(opts.fraction * static_cast<double>(M)));
    require(k >= 3, ErrorKind::input, "subsample must contain at least three models");
    for (int it = 0; it < opts.iterations; ++it) {
      Rng rng = make_stream(opts.seed, {0x5b5bULL, static_cast<std::uint64_t>(it)});
      auto perm = random_permutation(M, rng);
      std::vector<std::size_t> subset(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(subset.begin(), subset.end());
      std::vector<double> a, b;
      for (auto m : subset) {
        std::vector<std::size_t> partners;
        for (auto p : subset)
          if (p != m) partners.push_back(p);
        a.push_back(full[m]);
        b.push_back(ens.report(m, partners).model_mean);
      }
      res.rhos.push_back(rho_or_nan(a, b));
    }
  } else {
    require(families.size() == M, ErrorKind::input, "leave-family-out needs one family label per model");
    std::vector<double> a, b;
    res.resampled_means.assign(M, stats::kNaN);
    for (std::size_t m = 0; m < M; ++m) {
      require(!families[m].empty(), ErrorKind::input, "leave-family-out needs family labels for every model");
      std::vector<std::size_t> partners;
      for (std::size_t p = 0; p < M; ++p)
        if (p != m && families[p] != families[m]) partners.push_back(p);
      if (partners.empty()) continue;
      res.resampled_means[m] = ens.report(m, partners).model_mean;
      a.push_back(full[m]);
      b.push_back(res.resampled_means[m]);
    }
    require(a.size() >= 3, ErrorKind::input, "leave-family-out leaves fewer than three models with partners");
    res.rhos.push_back(rho_or_nan(a, b));
  }
  std::vector<double> finite;
  for (double r : res.rhos)
    if (std::isfinite(r)) finite.push_back(r);
  if (!finite.empty()) {
    res.median = stats::median(finite);
    res.low = stats::percentile(finite, 0.025);
    res.high = stats::percentile(finite, 0.975);
  }
  return res;
}

}  // namespace unidim
