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

// Planted generators: embeddings with known factors, ensembles with a known
// shared/private split, and reference data driven by the shared part.

#pragma once

#include "unidim/alignment.hpp"
#include "unidim/error.hpp"
#include "unidim/rng.hpp"
#include "unidim/tensor_io.hpp"
#include "unidim/types.hpp"
#include "unidim/universality.hpp"

#include <random>
#include <string>
#include <vector>

namespace unidim::synthetic {

/// Largest squared cosine between two distinct columns.
inline double max_column_overlap(const Matrix& W) {
  const Matrix P = cos2_matrix(W, W);
  double m = 0;
  for (Index a = 0; a < P.rows(); ++a)
    for (Index b = 0; b < P.cols(); ++b)
      if (a != b) m = std::max(m, P(a, b));
  return m;
}

/// Nonnegative N x r factors, each row loading mainly on one column with an
/// occasional weak secondary loading, so columns overlap below `max_overlap`.
inline Matrix planted_factors(Index n, Index r, std::uint64_t seed, double max_overlap = 0.1) {
  require(n >= 2 && r >= 1 && n >= r, ErrorKind::input, "planted factors need N >= r >= 1");
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    Rng rng = make_stream(seed, {0xfac7ULL, attempt});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix W = Matrix::Zero(n, r);
    for (Index i = 0; i < n; ++i) {
      const Index primary = i % r;
      W(i, primary) = 0.5 + u(rng);
      if (r > 1 && u(rng) < 0.15) {
        const Index other = (primary + 1 + static_cast<Index>(u(rng) * static_cast<double>(r - 1))) % r;
        W(i, other) += 0.3 * u(rng);
      }
    }
    if (max_column_overlap(W) < max_overlap) return W;
  }
  throw Error(ErrorKind::input, "could not plant factors below the requested overlap");
}

inline Matrix random_embedding(Index n, Index r, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix W(n, r);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < r; ++k) W(i, k) = u(rng);
  return W;
}

struct EnsembleOptions {
  int models = 10;
  Index categories = 50;
  Index exemplars = 10;
  Index shared = 4;
  Index private_dims = 4;
  double model_noise = 0.1;       // multiplicative jitter of shared loadings per model
  double category_density = 0.3;  // fraction of categories loading on each shared dimension
  double image_jitter = 0.2;      // within-category spread of shared loadings, common to all models
  std::uint64_t seed = 0;
};

struct PlantedEnsemble {
  std::vector<Embedding> models;
  CategoryIndex categories;
  Matrix shared_basis;                       // N x shared, before per-model noise
  Matrix category_profiles;                  // C x shared
  std::vector<std::vector<Index>> shared_column;  // [model][s] -> column holding shared dim s
  std::vector<std::vector<bool>> is_shared;       // [model][column]

  Index rank() const { return models.front().rank(); }
};

/// Models whose embeddings share `shared` category-aligned dimensions and add
/// `private_dims` i.i.d. uniform columns of their own; column order is
/// shuffled per model.
inline PlantedEnsemble planted_ensemble(const EnsembleOptions& o) {
  require(o.models >= 2 && o.categories >= 2 && o.exemplars >= 1 && o.shared + o.private_dims >= 1, ErrorKind::input,
          "invalid planted ensemble options");
  const Index C = o.categories, N = o.categories * o.exemplars, r = o.shared + o.private_dims;
  PlantedEnsemble pe;
  std::vector<int> labels(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i / o.exemplars);
  pe.categories = CategoryIndex::from_labels(labels);

  Rng base = make_stream(o.seed, {0xba5eULL});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  pe.category_profiles = Matrix::Zero(C, o.shared);
  for (Index s = 0; s < o.shared; ++s) {
    const auto perm = random_permutation(static_cast<std::size_t>(C), base);
    const auto loaded = std::max<Index>(1, static_cast<Index>(std::llround(o.category_density * static_cast<double>(C))));
    for (Index c = 0; c < C; ++c) pe.category_profiles(c, s) = 0.02 * u(base);
    for (Index c = 0; c < loaded; ++c) pe.category_profiles(static_cast<Index>(perm[static_cast<std::size_t>(c)]), s) = 0.5 + u(base);
  }
  pe.shared_basis.resize(N, o.shared);
  for (Index i = 0; i < N; ++i)
    for (Index s = 0; s < o.shared; ++s)
      pe.shared_basis(i, s) = pe.category_profiles(labels[static_cast<std::size_t>(i)], s) *
                              std::max(0.0, 1.0 + o.image_jitter * g(base));

  for (int m = 0; m < o.models; ++m) {
    Rng rng = make_stream(o.seed, {0x30d3ULL, static_cast<std::uint64_t>(m)});
    Matrix block(N, r);
    for (Index i = 0; i < N; ++i)
      for (Index s = 0; s < o.shared; ++s)
        block(i, s) = pe.shared_basis(i, s) * std::max(0.0, 1.0 + o.model_noise * g(rng));
    for (Index i = 0; i < N; ++i)
      for (Index k = o.shared; k < r; ++k) block(i, k) = u(rng);
    const auto order = random_permutation(static_cast<std::size_t>(r), rng);
    Embedding e;
    e.model_id = "model_" + std::to_string(m < 10 ? 0 : m / 10) + std::to_string(m % 10);
    e.W.resize(N, r);
    pe.shared_column.emplace_back(static_cast<std::size_t>(o.shared));
    pe.is_shared.emplace_back(static_cast<std::size_t>(r), false);
    for (Index k = 0; k < r; ++k) {
      const auto src = static_cast<Index>(order[static_cast<std::size_t>(k)]);
      e.W.col(k) = block.col(src);
      if (src < o.shared) {
        pe.shared_column.back()[static_cast<std::size_t>(src)] = k;
        pe.is_shared.back()[static_cast<std::size_t>(k)] = true;
      }
    }
    e.seed = static_cast<std::uint64_t>(m);
    pe.models.push_back(std::move(e));
  }
  return pe;
}

/// Features whose geometry follows W: Z = W Q + noise, Q Gaussian r x d.
inline Matrix features_from_embedding(const Matrix& W, Index d, double noise, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix Q(W.cols(), d);
  for (Index a = 0; a < Q.rows(); ++a)
    for (Index b = 0; b < d; ++b) Q(a, b) = g(rng);
  Matrix Z = W * Q;
  for (Index i = 0; i < Z.rows(); ++i)
    for (Index b = 0; b < d; ++b) Z(i, b) += noise * g(rng);
  return Z;
}

/// Triplets whose similar pair is the most cosine-similar pair of rows of
/// `truth`; a fraction `flip` of answers is replaced by a random pair.
inline std::vector<Triplet> planted_triplets(const Matrix& truth, std::size_t count, double flip, Rng& rng) {
  const auto C = static_cast<int>(truth.rows());
  require(C >= 3, ErrorKind::input, "triplets need at least three categories");
  std::uniform_int_distribution<int> pick(0, C - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vector norms = truth.rowwise().norm();
  auto cosine = [&](int a, int b) {
    const double d = norms(a) * norms(b);
    return d > 0 ? truth.row(a).dot(truth.row(b)) / d : 0.0;
  };
  std::vector<Triplet> out;
  out.reserve(count);
  while (out.size() < count) {
    const int a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || a == c || b == c) continue;
    const std::array<std::array<int, 3>, 3> pairs{{{a, b, c}, {a, c, b}, {b, c, a}}};
    std::size_t best = 0;
    const std::array<double, 3> s{cosine(a, b), cosine(a, c), cosine(b, c)};
    for (std::size_t p = 1; p < 3; ++p)
      if (s[p] > s[best]) best = p;
    if (u(rng) < flip) best = static_cast<std::size_t>(pick(rng) % 3);
    out.push_back({pairs[best][0], pairs[best][1], pairs[best][2]});
  }
  return out;
}

/// Uniformly random triplets (any answer).
inline std::vector<Triplet> random_triplets(int categories, std::size_t count, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, categories - 1);
  std::vector<Triplet> out;
  while (out.size() < count) {
    const int a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || a == c || b == c) continue;
    out.push_back({a, b, c});
  }
  return out;
}

/// Channels responding linearly to the shared basis plus noise; reliabilities
/// spread over [0.1, 0.9] and channels split between two subjects.
inline NeuralDataset planted_neural(const Matrix& basis, Index channels, double noise, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  NeuralDataset d;
  d.responses.resize(basis.rows(), channels);
  for (Index j = 0; j < channels; ++j) {
    Vector beta(basis.cols());
    for (Index s = 0; s < beta.size(); ++s) beta(s) = g(rng);
    Vector y = basis * beta;
    for (Index i = 0; i < y.size(); ++i) y(i) += noise * g(rng);
    y = (y.array() - y.mean()) / std::sqrt((y.array() - y.mean()).square().mean());
    d.responses.col(j) = y;
    d.channel_ids.push_back("ch" + std::to_string(j + 1));
    d.reliabilities.push_back(0.1 + 0.8 * u(rng));
    d.subjects.push_back(j % 2 == 0 ? "F" : "M");
  }
  return d;
}

}  // namespace unidim::synthetic
