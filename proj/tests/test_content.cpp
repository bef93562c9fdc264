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

#include "test_support.hpp"
#include "unidim/content.hpp"
#include "unidim/snmf.hpp"

using namespace unidim;

namespace {

CategoryIndex blocks(int categories, int exemplars) {
  std::vector<int> labels;
  for (int c = 0; c < categories; ++c)
    for (int j = 0; j < exemplars; ++j) labels.push_back(c);
  return CategoryIndex::from_labels(labels);
}

// R^2 of regressing w on category indicators.
double eta2_regression_oracle(const Vector& w, const CategoryIndex& cats) {
  const auto n = static_cast<Index>(cats.labels.size());
  const auto C = static_cast<Index>(cats.category_count());
  Matrix X = Matrix::Zero(n, C);
  for (Index i = 0; i < n; ++i) X(i, cats.labels[static_cast<std::size_t>(i)]) = 1.0;
  const Vector beta = (X.transpose() * X).fullPivLu().solve(X.transpose() * w);
  const Vector c = w.array() - w.mean();
  return 1.0 - (w - X * beta).squaredNorm() / c.squaredNorm();
}

DimensionContent dim(const std::string& model, Index k, double u, double sb, double sw) {
  DimensionContent d;
  d.model_id = model;
  d.dim = k;
  d.universality_calibrated = u;
  d.ss_between = sb;
  d.ss_within = sw;
  d.ss_total = sb + sw;
  d.eta2 = sb / (sb + sw);
  return d;
}

}  // namespace

TEST(EtaSquared, HandExample) {
  Vector w(6);
  w << 1, 2, 3, 4, 5, 6;
  const auto d = eta_squared(w, blocks(2, 3));
  EXPECT_NEAR(d.ss_between, 13.5, 1e-12);
  EXPECT_NEAR(d.ss_within, 4.0, 1e-12);
  EXPECT_NEAR(d.ss_total, 17.5, 1e-12);
  EXPECT_NEAR(d.eta2, 13.5 / 17.5, 1e-12);
  EXPECT_FALSE(d.degenerate);
}

TEST(EtaSquared, CategoryConstantLoadingsGiveOne) {
  Vector w(6);
  w << 2, 2, 2, 7, 7, 7;
  EXPECT_NEAR(eta_squared(w, blocks(2, 3)).eta2, 1.0, 1e-15);
}

TEST(EtaSquared, ConstantVectorIsDegenerate) {
  const auto d = eta_squared(Vector::Constant(6, 0.3), blocks(2, 3));
  EXPECT_TRUE(d.degenerate);
  EXPECT_TRUE(std::isnan(d.eta2));
}

TEST(EtaSquared, MatchesRegressionOracleAndPartitions) {
  std::mt19937_64 rng(3);
  std::vector<int> labels{0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 0, 3};
  const auto cats = CategoryIndex::from_labels(labels);
  for (int rep = 0; rep < 20; ++rep) {
    const Vector w = testing_support::uniform(12, 1, rng).col(0);
    const auto d = eta_squared(w, cats);
    EXPECT_NEAR(d.eta2, eta2_regression_oracle(w, cats), 1e-12);
    EXPECT_NEAR(d.ss_between + d.ss_within, d.ss_total, 1e-12 * d.ss_total);
    EXPECT_GE(d.eta2, 0.0);
    EXPECT_LE(d.eta2, 1.0);
  }
  EXPECT_ERROR_KIND(eta_squared(Vector::Ones(12), cats, true), ErrorKind::input);
  EXPECT_ERROR_KIND(eta_squared(Vector::Ones(11), cats), ErrorKind::consistency);
}

TEST(EtaSquared, InvariantToAffineRescaling) {
  std::mt19937_64 rng(4);
  const auto cats = blocks(5, 4);
  const Vector w = testing_support::uniform(20, 1, rng).col(0);
  EXPECT_NEAR(eta_squared(w, cats).eta2, eta_squared((3.0 * w).array() + 2.0, cats).eta2, 1e-12);
}

TEST(EtaSquared, IidLoadingsSitAtChanceLevel) {
  std::mt19937_64 rng(5);
  const auto cats = blocks(50, 12);
  double sum = 0;
  const int draws = 60;
  for (int rep = 0; rep < draws; ++rep) sum += eta_squared(testing_support::uniform(600, 1, rng).col(0), cats).eta2;
  EXPECT_NEAR(sum / draws, 49.0 / 599.0, 0.02);
}

TEST(ReconstructionImportance, MatchesZeroedColumnRefit) {
  std::mt19937_64 rng(6);
  const Matrix A = testing_support::uniform(15, 4, rng);
  const Matrix S = A * A.transpose();
  const Matrix W = testing_support::uniform(15, 3, rng) * 0.8;
  const auto dr2 = reconstruction_importance(S, W);
  const double base = explained_variance_unclamped(S, W);
  for (Index k = 0; k < 3; ++k) {
    Matrix Wk = W;
    Wk.col(k).setZero();
    EXPECT_NEAR(dr2[static_cast<std::size_t>(k)], base - explained_variance_unclamped(S, Wk), 1e-12);
    EXPECT_NEAR(reconstruction_importance(S, W, k), dr2[static_cast<std::size_t>(k)], 1e-15);
  }
  EXPECT_ERROR_KIND(reconstruction_importance(S, W, 3), ErrorKind::input);
}

TEST(AnalyzeContent, CarriesIdsAndScores) {
  std::mt19937_64 rng(7);
  Embedding e;
  e.model_id = "m1";
  e.W = testing_support::uniform(6, 2, rng);
  e.W.col(1).setConstant(1.0);
  UniversalityReport rep;
  rep.calibrated = {0.3, 0.6};
  const Matrix S = e.W * e.W.transpose();
  const auto c = analyze_content(e, blocks(2, 3), &S, &rep);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].model_id, "m1");
  EXPECT_EQ(c[1].dim, 1);
  EXPECT_TRUE(c[1].degenerate);
  EXPECT_EQ(c[0].universality_calibrated, 0.3);
  EXPECT_TRUE(std::isfinite(c[0].delta_r2));
  rep.calibrated = {0.3};
  EXPECT_ERROR_KIND(analyze_content(e, blocks(2, 3), nullptr, &rep), ErrorKind::consistency);
}

TEST(Deciles, EqualCountBinsWithPooledFractions) {
  std::vector<DimensionContent> dims;
  // 20 dimensions, universality descending in k so sorting reverses them.
  for (Index k = 0; k < 20; ++k) dims.push_back(dim("m", k, 1.0 - 0.05 * static_cast<double>(k), 1.0 + static_cast<double>(k), 1.0));
  DimensionContent deg;
  deg.degenerate = true;
  dims.push_back(deg);
  const auto rows = variance_fraction_by_decile(dims);
  ASSERT_EQ(rows.size(), 10u);
  for (const auto& r : rows) EXPECT_EQ(r.dimensions, 2u);
  // Decile 1 holds k = 19, 18: between SS 20 + 19, within 2.
  EXPECT_NEAR(rows[0].between_fraction, 39.0 / 41.0, 1e-15);
  EXPECT_NEAR(rows[0].within_fraction, 2.0 / 41.0, 1e-15);
  EXPECT_NEAR(rows[0].universality_low, 0.05, 1e-15);
  EXPECT_NEAR(rows[9].universality_high, 1.0, 1e-15);
  const auto mean_rows = variance_fraction_by_decile(dims, true);
  EXPECT_NEAR(mean_rows[0].between_fraction, 0.5 * (20.0 / 21.0 + 19.0 / 20.0), 1e-15);
  for (const auto& r : rows) EXPECT_NEAR(r.between_fraction + r.within_fraction, 1.0, 1e-12);
}

TEST(Deciles, UnevenCountsAndMinimum) {
  std::vector<DimensionContent> dims;
  for (Index k = 0; k < 13; ++k) dims.push_back(dim("m", k, 0.01 * static_cast<double>(k), 1, 1));
  std::size_t total = 0;
  for (const auto& r : variance_fraction_by_decile(dims)) {
    EXPECT_GE(r.dimensions, 1u);
    EXPECT_LE(r.dimensions, 2u);
    total += r.dimensions;
  }
  EXPECT_EQ(total, 13u);
  dims.resize(9);
  EXPECT_ERROR_KIND(variance_fraction_by_decile(dims), ErrorKind::input);
}

TEST(ContentCorrelations, MonotoneRelationGivesRhoOne) {
  std::vector<DimensionContent> dims;
  for (Index k = 0; k < 8; ++k) {
    auto d = dim(k < 4 ? "a" : "b", k % 4, 0.1 * static_cast<double>(k), 1.0 + static_cast<double>(k * k), 1.0);
    d.delta_r2 = std::exp(0.1 * static_cast<double>(k));
    dims.push_back(d);
  }
  DimensionContent deg;
  deg.degenerate = true;
  dims.push_back(deg);
  const auto c = content_universality_correlations(dims);
  EXPECT_NEAR(c.rho_eta2, 1.0, 1e-12);
  EXPECT_NEAR(c.rho_delta_r2, 1.0, 1e-12);
  EXPECT_NEAR(c.median_within_model_rho_delta_r2, 1.0, 1e-12);
  EXPECT_EQ(c.dimensions_used, 8u);
  EXPECT_EQ(c.degenerate_excluded, 1u);
}

TEST(ContentTable, UsesOneBasedDimensions) {
  std::vector<DimensionContent> dims{dim("m", 0, 0.5, 1, 1)};
  const auto t = content_table(dims);
  EXPECT_EQ(t.rows[0][t.column("dim")], "1");
  EXPECT_EQ(t.rows[0][t.column("degenerate")], "0");
}

TEST(Labels, ParseLoadAndCrossTab) {
  EXPECT_EQ(dimension_id("vit_b", 0), "vit_b/1");
  EXPECT_ERROR_KIND(parse_dimension_label("color"), ErrorKind::data);
  testing_support::TempDir dir("labels");
  write_text(dir / "labels.csv", "dimension_id,label\nm/1,semantic\nm/2,visual\nm/3,both\nm/4,semantic\n");
  const auto labels = load_dimension_labels(dir / "labels.csv");
  ASSERT_EQ(labels.size(), 4u);
  EXPECT_EQ(labels.at("m/2"), DimensionLabel::visual);
  std::vector<DimensionContent> dims;
  for (Index k = 0; k < 5; ++k) dims.push_back(dim("m", k, 0.1 * static_cast<double>(k), 1, 1));
  const auto t = label_crosstab(dims, labels, 2);
  ASSERT_EQ(t.rows.size(), 2u);
  // Sorted by universality: m/1 semantic, m/2 visual | m/3 both, m/4 semantic.
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"1", "1", "1", "0", "0"}));
  EXPECT_EQ(t.rows[1], (std::vector<std::string>{"2", "1", "0", "1", "0"}));
  write_text(dir / "dup.csv", "dimension_id,label\nm/1,semantic\nm/1,visual\n");
  EXPECT_ERROR_KIND(load_dimension_labels(dir / "dup.csv"), ErrorKind::data);
  write_text(dir / "bad.csv", "dim,label\nm/1,semantic\n");
  EXPECT_ERROR_KIND(load_dimension_labels(dir / "bad.csv"), ErrorKind::format);
}
