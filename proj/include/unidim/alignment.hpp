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

// Agreement of embeddings with reference data: cross-validated ridge encoding
// of recorded responses and triplet odd-one-out accuracy, optionally on the
// universal and specific halves of an embedding.

#pragma once

#include "unidim/csv.hpp"
#include "unidim/error.hpp"
#include "unidim/npy.hpp"
#include "unidim/rng.hpp"
#include "unidim/stats.hpp"
#include "unidim/tensor_io.hpp"
#include "unidim/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace unidim {

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeModel {
  Vector beta;
  double intercept = 0.0;

  Vector predict(const Matrix& X) const { return (X * beta).array() + intercept; }
};

/// Closed-form ridge. With `center` the intercept is unpenalized and handled
/// by centering; without it the fit is (X^T X + lambda I)^-1 X^T y.
inline RidgeModel ridge_fit(const Matrix& X, const Vector& y, double lambda, bool center = true) {
  require(X.rows() == y.size() && X.rows() >= 1, ErrorKind::input, "ridge: shapes do not conform");
  require(lambda >= 0, ErrorKind::input, "ridge penalty must be nonnegative");
  RidgeModel m;
  if (center) {
    const Eigen::RowVectorXd xm = X.colwise().mean();
    const double ym = y.mean();
    const Matrix Xc = X.rowwise() - xm;
    Matrix A = Xc.transpose() * Xc;
    A.diagonal().array() += lambda;
    m.beta = A.ldlt().solve(Xc.transpose() * (y.array() - ym).matrix());
    m.intercept = ym - xm.dot(m.beta);
  } else {
    Matrix A = X.transpose() * X;
    A.diagonal().array() += lambda;
    m.beta = A.ldlt().solve(X.transpose() * y);
  }
  require(m.beta.allFinite(), ErrorKind::numerical, "ridge solve produced non-finite coefficients");
  return m;
}

/// Ridge solutions for many penalties and targets sharing one design: the
/// centered gram matrix is diagonalized once.
class RidgePath {
 public:
  explicit RidgePath(const Matrix& X) : xm_(X.colwise().mean()) {
    const Matrix Xc = X.rowwise() - xm_;
    Eigen::SelfAdjointEigenSolver<Matrix> es(Xc.transpose() * Xc);
    require(es.info() == Eigen::Success, ErrorKind::numerical, "ridge: eigendecomposition failed");
    V_ = es.eigenvectors();
    d_ = es.eigenvalues().cwiseMax(0.0);
    XcV_ = Xc * V_;
  }

  /// Coefficients for every column of Y at penalty lambda, plus intercepts.
  std::pair<Matrix, Eigen::RowVectorXd> solve(const Matrix& Y, double lambda) const {
    const Eigen::RowVectorXd ym = Y.colwise().mean();
    const Matrix Yc = Y.rowwise() - ym;
    Matrix proj = XcV_.transpose() * Yc;
    for (Index i = 0; i < proj.rows(); ++i) {
      const double den = d_(i) + lambda;
      proj.row(i) = den > 0 ? (proj.row(i) / den).eval() : Eigen::RowVectorXd::Zero(proj.cols());
    }
    Matrix B = V_ * proj;
    Eigen::RowVectorXd b0 = ym - xm_ * B;
    return {B, b0};
  }

 private:
  Eigen::RowVectorXd xm_;
  Matrix V_;
  Vector d_;
  Matrix XcV_;
};

/// Fold of each row: rows are shuffled with the seed and dealt round-robin.
inline std::vector<int> assign_folds(Index n, int folds, std::uint64_t seed) {
  require(folds >= 2 && n >= 2 * folds, ErrorKind::input, "cross-validation needs N >= 2 * folds");
  Rng rng = make_stream(seed, {0xf01dULL});
  const auto perm = random_permutation(static_cast<std::size_t>(n), rng);
  std::vector<int> f(static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < perm.size(); ++p) f[perm[p]] = static_cast<int>(p % static_cast<std::size_t>(folds));
  return f;
}

/// Pearson r, or 0 when the predictions are constant.
inline double prediction_correlation(const Vector& pred, const Vector& obs) {
  const double vp = (pred.array() - pred.mean()).square().sum();
  if (!(vp > 0)) return 0.0;
  return stats::pearson_coefficient(std::span<const double>(pred.data(), static_cast<std::size_t>(pred.size())),
                                    std::span<const double>(obs.data(), static_cast<std::size_t>(obs.size())));
}

struct RidgeOptions {
  int folds = 5;
  std::vector<double> grid;
  std::uint64_t seed = 0;
};

struct RidgeEncoding {
  Vector r;                                  // held-out Pearson r per target
  std::vector<std::vector<double>> lambdas;  // [fold][target] chosen penalty
  Matrix predictions;                        // held-out predictions, N x targets
};

/// Cross-validated ridge for each column of Y. Within each training fold a
/// single 80/20 split of the training rows picks the penalty with the lowest
/// validation MSE (first on ties); the model is then refit on the whole
/// training fold and scored on the held-out rows.
inline RidgeEncoding ridge_encode(const Matrix& W, const Matrix& Y, const RidgeOptions& opts) {
  require(W.rows() == Y.rows(), ErrorKind::consistency, "ridge: embedding and responses differ in rows");
  require(!opts.grid.empty(), ErrorKind::input, "ridge grid is empty");
  for (double l : opts.grid) require(l >= 0 && std::isfinite(l), ErrorKind::input, "ridge penalties must be finite and nonnegative");
  const Index n = W.rows(), P = Y.cols();
  for (Index j = 0; j < P; ++j) {
    const double v = (Y.col(j).array() - Y.col(j).mean()).square().sum();
    require(v > 0, ErrorKind::undefined, "encoding score is undefined for a zero-variance response");
  }
  const auto fold = assign_folds(n, opts.folds, opts.seed);
  RidgeEncoding out;
  out.predictions.resize(n, P);
  out.lambdas.assign(static_cast<std::size_t>(opts.folds), std::vector<double>(static_cast<std::size_t>(P)));

  auto take = [](const Matrix& M, const std::vector<Index>& rows) {
    Matrix o(static_cast<Index>(rows.size()), M.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) o.row(static_cast<Index>(i)) = M.row(rows[i]);
    return o;
  };

  for (int f = 0; f < opts.folds; ++f) {
    std::vector<Index> train, test;
    for (Index i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    Rng rng = make_stream(opts.seed, {0x1a5eULL, static_cast<std::uint64_t>(f)});
    const auto perm = random_permutation(train.size(), rng);
    const auto n_fit = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(train.size()))));
    require(n_fit < train.size(), ErrorKind::input, "training fold too small for penalty selection");
    std::vector<Index> inner_fit, inner_val;
    for (std::size_t p = 0; p < perm.size(); ++p) (p < n_fit ? inner_fit : inner_val).push_back(train[perm[p]]);

    const Matrix Xf = take(W, inner_fit), Yf = take(Y, inner_fit);
    const Matrix Xv = take(W, inner_val), Yv = take(Y, inner_val);
    const RidgePath inner(Xf);
    Eigen::RowVectorXd best_mse = Eigen::RowVectorXd::Constant(P, std::numeric_limits<double>::infinity());
    for (double l : opts.grid) {
      auto [B, b0] = inner.solve(Yf, l);
      const Matrix pred = (Xv * B).rowwise() + b0;
      const Eigen::RowVectorXd mse = (pred - Yv).array().square().colwise().mean();
      for (Index j = 0; j < P; ++j)
        if (mse(j) < best_mse(j)) {
          best_mse(j) = mse(j);
          out.lambdas[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)] = l;
        }
    }

    const Matrix Xt = take(W, train), Yt = take(Y, train), Xh = take(W, test);
    const RidgePath full(Xt);
    std::map<double, std::vector<Index>> by_lambda;
    for (Index j = 0; j < P; ++j) by_lambda[out.lambdas[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)]].push_back(j);
    for (const auto& [l, cols] : by_lambda) {
      Matrix Ysub(Yt.rows(), static_cast<Index>(cols.size()));
      for (std::size_t c = 0; c < cols.size(); ++c) Ysub.col(static_cast<Index>(c)) = Yt.col(cols[c]);
      auto [B, b0] = full.solve(Ysub, l);
      const Matrix pred = (Xh * B).rowwise() + b0;
      for (std::size_t c = 0; c < cols.size(); ++c)
        for (std::size_t i = 0; i < test.size(); ++i)
          out.predictions(test[i], cols[c]) = pred(static_cast<Index>(i), static_cast<Index>(c));
    }
  }
  out.r.resize(P);
  for (Index j = 0; j < P; ++j) out.r(j) = prediction_correlation(out.predictions.col(j), Y.col(j));
  return out;
}

/// Held-out Pearson r for one response vector.
inline double ridge_encode(const Matrix& W, const Vector& y, const RidgeOptions& opts) {
  return ridge_encode(W, Matrix(y), opts).r(0);
}

// ---------------------------------------------------------------------------
// Neural encoding

struct NeuralDataset {
  Matrix responses;  // N x P
  std::vector<std::string> channel_ids;
  std::vector<double> reliabilities;
  std::vector<std::string> subjects;  // per channel

  Index channels() const { return responses.cols(); }

  /// Channels whose reliability exceeds the threshold.
  NeuralDataset filtered(double threshold) const {
    NeuralDataset out;
    std::vector<Index> keep;
    for (Index j = 0; j < channels(); ++j)
      if (reliabilities[static_cast<std::size_t>(j)] > threshold) keep.push_back(j);
    out.responses.resize(responses.rows(), static_cast<Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c) {
      out.responses.col(static_cast<Index>(c)) = responses.col(keep[c]);
      out.channel_ids.push_back(channel_ids[static_cast<std::size_t>(keep[c])]);
      out.reliabilities.push_back(reliabilities[static_cast<std::size_t>(keep[c])]);
      out.subjects.push_back(subjects[static_cast<std::size_t>(keep[c])]);
    }
    return out;
  }
};

/// Responses NPY (N x P) plus a channel CSV with columns channel_id,reliability,subject in column order.
inline NeuralDataset load_neural_dataset(const std::filesystem::path& responses, const std::filesystem::path& channels,
                                         Index expected_rows = -1) {
  NeuralDataset d;
  d.responses = npy::read_matrix(responses);
  require(d.responses.allFinite(), ErrorKind::data, "neural responses contain non-finite values");
  require(expected_rows < 0 || d.responses.rows() == expected_rows, ErrorKind::consistency,
          "neural responses have " + std::to_string(d.responses.rows()) + " rows but the manifest lists " +
              std::to_string(expected_rows) + " images");
  const Table t = read_csv(channels);
  for (const char* c : {"channel_id", "reliability", "subject"})
    require(t.has_column(c), ErrorKind::format, std::string("channel CSV is missing column ") + c);
  require(static_cast<Index>(t.rows.size()) == d.responses.cols(), ErrorKind::consistency,
          "channel CSV rows do not match response columns");
  const auto ci = t.column("channel_id"), cr = t.column("reliability"), cs = t.column("subject");
  for (const auto& row : t.rows) {
    d.channel_ids.push_back(row[ci]);
    const double rel = parse_double(row[cr]);
    require(rel >= -1 && rel <= 1, ErrorKind::data, "reliability must lie in [-1,1]");
    d.reliabilities.push_back(rel);
    d.subjects.push_back(row[cs]);
  }
  return d;
}

struct EncodingOptions {
  RidgeOptions ridge;
  double reliability_threshold = 0.3;
};

struct EncodingResult {
  double score = stats::kNaN;                   // mean over subjects of per-subject mean r
  std::map<std::string, double> subject_means;
  Table neurons;  // channel_id, subject, reliability, r, noise_ceiling, lambda_fold1..
};

inline EncodingResult encoding_score(const Matrix& W, const NeuralDataset& data, const EncodingOptions& opts) {
  const NeuralDataset kept = data.filtered(opts.reliability_threshold);
  require(kept.channels() >= 1, ErrorKind::input, "no channel passes the reliability threshold");
  const auto enc = ridge_encode(W, kept.responses, opts.ridge);
  EncodingResult res;
  res.neurons.columns = {"channel_id", "subject", "reliability", "r", "noise_ceiling"};
  std::map<std::string, std::pair<double, int>> acc;
  for (Index j = 0; j < kept.channels(); ++j) {
    const auto s = static_cast<std::size_t>(j);
    const double rel = kept.reliabilities[s];
    res.neurons.add_row({kept.channel_ids[s], kept.subjects[s], format_double(rel), format_double(enc.r(j)),
                         format_double(std::sqrt(std::max(rel, 0.0)))});
    auto& a = acc[kept.subjects[s]];
    a.first += enc.r(j);
    ++a.second;
  }
  double total = 0;
  for (const auto& [subject, a] : acc) {
    res.subject_means[subject] = a.first / a.second;
    total += a.first / a.second;
  }
  res.score = total / static_cast<double>(acc.size());
  return res;
}

// ---------------------------------------------------------------------------
// Triplet odd-one-out

struct Triplet {
  int i = 0, j = 0, k = 0;  // 0-based category rows; k is the human odd-one-out
};

/// CSV of 1-based (i, j, k_odd_one_out).
inline std::vector<Triplet> load_triplets(const std::filesystem::path& path, std::size_t categories) {
  const Table t = read_csv(path);
  for (const char* c : {"i", "j", "k_odd_one_out"})
    require(t.has_column(c), ErrorKind::format, std::string("triplet CSV is missing column ") + c);
  const auto ci = t.column("i"), cj = t.column("j"), ck = t.column("k_odd_one_out");
  std::vector<Triplet> out;
  for (const auto& row : t.rows) {
    Triplet tr{static_cast<int>(parse_int(row[ci])) - 1, static_cast<int>(parse_int(row[cj])) - 1,
               static_cast<int>(parse_int(row[ck])) - 1};
    for (int v : {tr.i, tr.j, tr.k})
      require(v >= 0 && static_cast<std::size_t>(v) < categories, ErrorKind::data, "triplet index out of range");
    require(tr.i != tr.j && tr.i != tr.k && tr.j != tr.k, ErrorKind::data, "triplet indices must be distinct");
    out.push_back(tr);
  }
  return out;
}

/// Rows of W at each category's designated image.
inline Matrix category_embedding(const Matrix& W, const CategoryIndex& cats) {
  require(static_cast<std::size_t>(W.rows()) == cats.image_count(), ErrorKind::consistency,
          "category embedding: embedding rows and category labels differ");
  Matrix E(static_cast<Index>(cats.category_count()), W.cols());
  for (std::size_t c = 0; c < cats.category_count(); ++c) {
    require(cats.designated[c] < cats.image_count(), ErrorKind::data, "category without a designated image");
    E.row(static_cast<Index>(c)) = W.row(static_cast<Index>(cats.designated[c]));
  }
  return E;
}

struct TripletResult {
  double accuracy = stats::kNaN;
  std::size_t correct = 0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // a referenced row is all zero
  std::size_t ties = 0;     // the largest similarity is shared by two pairs
};

/// The predicted similar pair has the largest row cosine; ties resolve in the
/// order (i,j), (i,k), (j,k).
inline TripletResult triplet_accuracy(const Matrix& E, std::span<const Triplet> triplets) {
  Vector norms = E.rowwise().norm();
  TripletResult res;
  auto cosine = [&](int a, int b) { return E.row(a).dot(E.row(b)) / (norms(a) * norms(b)); };
  for (const auto& t : triplets) {
    for (int v : {t.i, t.j, t.k})
      require(v >= 0 && v < E.rows(), ErrorKind::input, "triplet index out of range");
    if (norms(t.i) == 0 || norms(t.j) == 0 || norms(t.k) == 0) {
      ++res.skipped;
      continue;
    }
    const std::array<double, 3> s{cosine(t.i, t.j), cosine(t.i, t.k), cosine(t.j, t.k)};
    std::size_t best = 0;
    for (std::size_t p = 1; p < 3; ++p)
      if (s[p] > s[best]) best = p;
    for (std::size_t p = 0; p < 3; ++p)
      if (p != best && s[p] == s[best]) {
        ++res.ties;
        break;
      }
    ++res.evaluated;
    if (best == 0) ++res.correct;
  }
  if (res.evaluated > 0) res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.evaluated);
  return res;
}

// ---------------------------------------------------------------------------
// Universal and specific halves

struct HalfMask {
  std::vector<Index> universal_half;  // ascending indices
  std::vector<Index> specific_half;
};

/// The ceil(r/2) highest calibrated scores form the universal half; equal
/// scores are ordered by index, so dimensions tied at the median fall into
/// the universal half first.
inline HalfMask make_half_mask(std::span<const double> calibrated) {
  require(!calibrated.empty(), ErrorKind::input, "half mask needs at least one dimension");
  for (double v : calibrated) require(std::isfinite(v), ErrorKind::input, "half mask needs finite scores");
  std::vector<Index> order(calibrated.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return calibrated[static_cast<std::size_t>(a)] > calibrated[static_cast<std::size_t>(b)];
  });
  const std::size_t half = (calibrated.size() + 1) / 2;
  HalfMask m;
  m.universal_half.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
  m.specific_half.assign(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());
  std::sort(m.universal_half.begin(), m.universal_half.end());
  std::sort(m.specific_half.begin(), m.specific_half.end());
  return m;
}

/// W with every column outside `keep` set to zero.
inline Matrix mask_columns(const Matrix& W, std::span<const Index> keep) {
  Matrix out = Matrix::Zero(W.rows(), W.cols());
  for (Index k : keep) {
    require(k >= 0 && k < W.cols(), ErrorKind::input, "mask index out of range");
    out.col(k) = W.col(k);
  }
  return out;
}

struct HalfScores {
  double universal_half_score = stats::kNaN;
  double specific_half_score = stats::kNaN;
  HalfMask mask;
};

/// Runs `evaluator(masked W) -> double` on each half of W.
template <class Evaluator>
HalfScores half_masked_evaluation(const Matrix& W, const UniversalityReport& report, Evaluator&& evaluator) {
  require(static_cast<Index>(report.calibrated.size()) == W.cols(), ErrorKind::consistency,
          "universality report rank differs from the embedding");
  HalfScores h;
  h.mask = make_half_mask(report.calibrated);
  h.universal_half_score = evaluator(mask_columns(W, h.mask.universal_half));
  h.specific_half_score = evaluator(mask_columns(W, h.mask.specific_half));
  return h;
}

/// Pearson r (two-sided p) between per-model alignment scores and model-level universality.
inline stats::CorrelationResult alignment_universality_correlation(std::span<const double> scores,
                                                                   std::span<const double> universality) {
  require(scores.size() == universality.size(), ErrorKind::input, "one alignment score per model required");
  require(scores.size() >= 3, ErrorKind::input, "alignment correlation needs at least three models");
  return stats::pearson(scores, universality);
}

}  // namespace unidim
