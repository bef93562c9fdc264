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

#include "oracles.hpp"
#include "test_support.hpp"
#include "unidim/stats.hpp"

using namespace unidim;
using namespace unidim::stats;

namespace {

// Reference values below were computed once with SciPy 1.15 and frozen.

std::vector<double> standardized(std::vector<double> z) {
  const double m = mean(z), s = sd(z);
  for (auto& v : z) v = (v - m) / s;
  return z;
}

ModelEntry entry(const std::string& id, ArchitectureClass arch, const std::string& objective,
                 const std::string& data = "imagenet") {
  ModelEntry e;
  e.model_id = id;
  e.architecture_class = arch;
  e.objective = objective;
  e.training_data = data;
  e.family = id.substr(0, 1);
  return e;
}

}  // namespace

TEST(Descriptives, Basics) {
  const std::vector<double> x{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean(x), 5.0);
  EXPECT_NEAR(variance(x), 32.0 / 7.0, 1e-15);
  EXPECT_DOUBLE_EQ(median(x), 4.5);
  EXPECT_DOUBLE_EQ(percentile(x, 0.0), 2.0);
  EXPECT_DOUBLE_EQ(percentile(x, 1.0), 9.0);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.95), 4.8);
}

TEST(Distributions, IncompleteBetaMatchesReference) {
  EXPECT_NEAR(incomplete_beta(2.5, 3.5, 0.3), 0.29675298929566646, 1e-8);
  EXPECT_NEAR(incomplete_beta(0.5, 7, 0.05), 0.5948684952530259, 1e-8);
  EXPECT_NEAR(incomplete_beta(30, 40, 0.45), 0.6447480085585666, 1e-8);
}

TEST(Distributions, TailProbabilitiesMatchReference) {
  EXPECT_NEAR(t_two_sided_p(2.1, 7.5), 0.07123707145807805, 1e-8);
  EXPECT_NEAR(t_two_sided_p(-0.3, 3), 0.783763292039919, 1e-8);
  EXPECT_NEAR(t_two_sided_p(5.0, 60), 5.2880242106742615e-06, 1e-8);
  EXPECT_NEAR(f_upper_p(2.54, 3, 60), 0.06485007076373249, 1e-8);
  EXPECT_NEAR(f_upper_p(3.80, 2, 6), 0.08586912273559942, 1e-8);
  EXPECT_NEAR(f_upper_p(0.5, 4, 10), 0.736775548696845, 1e-8);
  EXPECT_NEAR(binomial_upper_half(9, 10), 0.0107421875, 1e-15);
  EXPECT_NEAR(binomial_upper_half(10, 10), 0.0009765625, 1e-15);
  EXPECT_NEAR(kolmogorov_upper(1.0), 0.26999967167735456, 1e-8);
  EXPECT_NEAR(kolmogorov_upper(0.5), 0.9639452436648751, 1e-8);
}

TEST(Welch, MatchesReference) {
  const std::vector<double> a{0.61, 0.55, 0.72, 0.48, 0.66, 0.59, 0.70}, b{0.31, 0.42, 0.38};
  const auto w = welch_t(a, b);
  EXPECT_NEAR(w.t, 5.405883452061011, 1e-10);
  EXPECT_NEAR(w.df, 5.998024366364935, 1e-10);
  EXPECT_NEAR(w.p, 0.0016564152911822622, 1e-8);
  EXPECT_LE(w.g_ci_low, w.hedges_g);
  EXPECT_GE(w.g_ci_high, w.hedges_g);
  const auto s = student_t(a, b);
  EXPECT_NEAR(s.t, 4.523445168891234, 1e-10);
  EXPECT_NEAR(s.p, 0.0019410675888302362, 1e-8);
}

TEST(Welch, IdenticalGroupsGiveZero) {
  const std::vector<double> a{1, 2, 3, 4};
  const auto w = welch_t(a, a);
  EXPECT_EQ(w.t, 0.0);
  EXPECT_EQ(w.hedges_g, 0.0);
  EXPECT_NEAR(w.p, 1.0, 1e-12);
}

TEST(Welch, ShiftedGroupsMatchTextbookFormula) {
  const std::vector<double> a{11, 12, 13}, b{1, 2, 3};
  const auto w = welch_t(a, b);
  // Means differ by 10, both variances 1, n = 3.
  EXPECT_NEAR(w.t, 10.0 / std::sqrt(1.0 / 3 + 1.0 / 3), 1e-10);
  EXPECT_NEAR(w.df, 4.0, 1e-10);
  EXPECT_NEAR(w.hedges_g, (1.0 - 3.0 / 15.0) * 10.0, 1e-10);
}

TEST(Welch, PublishedSummaryShape) {
  // Seven versus three models; spreads and mean gap solved so that the
  // summaries land on t = 3.21 and g = 1.76.
  const auto za = standardized({0.3, -1.2, 0.8, 1.9, -0.4, -0.9, 0.1});
  const auto zb = standardized({-1.0, 0.2, 0.9});
  const double sb = 0.7439697212554393, gap = 1.8365972989303239;
  std::vector<double> a, b;
  for (double z : za) a.push_back(5.0 + z);
  for (double z : zb) b.push_back(5.0 - gap + sb * z);
  const auto w = welch_t(a, b);
  EXPECT_NEAR(w.t, 3.21, 0.005);
  EXPECT_NEAR(w.hedges_g, 1.76, 0.005);
}

TEST(Welch, ReducesToStudentForEqualSizesAndVariances) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const auto z = standardized({0.4, -1.1, 0.3, 1.5, -0.2, -0.9});
    std::vector<double> a, b;
    std::normal_distribution<double> g(0, 1);
    const double shift = g(rng), scale = 0.5 + std::abs(g(rng));
    for (double v : z) a.push_back(scale * v + shift);
    for (std::size_t i = 0; i < z.size(); ++i) b.push_back(scale * z[(i + 2) % z.size()]);
    const auto w = welch_t(a, b);
    const auto s = student_t(a, b);
    EXPECT_NEAR(w.t, s.t, 1e-10);
    EXPECT_NEAR(w.df, s.df, 1e-10);
    EXPECT_NEAR(w.p, s.p, 1e-10);
  }
}

TEST(Welch, NeedsTwoPerGroup) {
  const std::vector<double> one{1}, two{1, 2};
  EXPECT_ERROR_KIND(welch_t(one, two), ErrorKind::input);
}

TEST(PairedAndSign, Values) {
  const std::vector<double> a{3, 5, 4, 6, 7}, b{2, 4, 4, 3, 5};
  const auto p = paired_t(a, b);
  // Differences 1,1,0,3,2: mean 1.4, sd sqrt(1.3).
  EXPECT_NEAR(p.t, 1.4 / std::sqrt(1.3 / 5), 1e-12);
  EXPECT_EQ(p.df, 4.0);
  // Four positive, one tie dropped: P(X >= 4 | n = 4) = 1/16.
  EXPECT_NEAR(sign_test_greater(a, b), 1.0 / 16.0, 1e-15);
}

TEST(Anova, MatchesReference) {
  const std::vector<std::vector<double>> g{{1.2, 1.9, 1.4, 1.7}, {2.2, 2.5, 2.1}, {1.0, 0.8, 1.3, 1.1, 0.9}};
  const auto a = oneway_anova(g, 500, 3);
  EXPECT_NEAR(a.F, 25.08306861499367, 1e-10);
  EXPECT_NEAR(a.p, 0.0002088150604625392, 1e-8);
  EXPECT_EQ(a.df_between, 2.0);
  EXPECT_EQ(a.df_within, 9.0);
  EXPECT_LE(a.omega2_ci_low, a.omega2);
  EXPECT_GE(a.omega2_ci_high, a.omega2);
  const auto b = oneway_anova(g, 500, 3);
  EXPECT_EQ(a.omega2_ci_low, b.omega2_ci_low);
}

TEST(Anova, OmegaSquaredFormula) {
  const std::vector<std::vector<double>> g{{1, 2, 3}, {4, 5, 6}};
  // SSB 13.5, SSW 4, MSW 1, df_b 1.
  EXPECT_NEAR(oneway_anova(g, 0).omega2, (13.5 - 1.0) / (17.5 + 1.0), 1e-15);
}

TEST(Anova, FEqualsStudentTSquared) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0, 1);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> a(5), b(8);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng) + 0.5;
    const auto t = student_t(a, b);
    const auto f = oneway_anova({a, b}, 0);
    EXPECT_NEAR(f.F, t.t * t.t, 1e-10 * f.F);
    EXPECT_NEAR(f.p, t.p, 1e-10);
  }
}

TEST(Anova, NullDrawsCenterOnOne) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 1);
  double F = 0, w = 0;
  const int draws = 200;
  for (int rep = 0; rep < draws; ++rep) {
    std::vector<std::vector<double>> groups(4, std::vector<double>(16));
    for (auto& grp : groups)
      for (auto& v : grp) v = g(rng);
    const auto a = oneway_anova(groups, 0);
    F += a.F;
    w += a.omega2;
  }
  // E[F] = df_w / (df_w - 2) = 60/58.
  EXPECT_NEAR(F / draws, 60.0 / 58.0, 0.15);
  EXPECT_NEAR(w / draws, 0.0, 0.02);
}

TEST(Anova, PlantedClustersRecoverOmegaSquared) {
  // Four groups with spread 1 and group means chosen for a large effect.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 1);
  const double means[] = {0, 2, 4, 6};
  std::vector<std::vector<double>> groups(4);
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 40; ++i) groups[static_cast<std::size_t>(k)].push_back(means[k] + g(rng));
  // Population omega^2 = var(means) / (var(means) + 1) with var(means) = 5.
  const auto a = oneway_anova(groups, 200, 1);
  EXPECT_NEAR(a.omega2, 5.0 / 6.0, 0.05);
  EXPECT_LT(a.p, 1e-10);
}

TEST(Anova, IntervalContainsEstimate) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0, 1);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::vector<double>> groups{std::vector<double>(3), std::vector<double>(5), std::vector<double>(2)};
    for (std::size_t k = 0; k < groups.size(); ++k)
      for (auto& v : groups[k]) v = g(rng) + 0.2 * static_cast<double>(rep % 4) * static_cast<double>(k);
    const auto a = oneway_anova(groups, 300, static_cast<std::uint64_t>(rep));
    EXPECT_LE(a.omega2_ci_low, a.omega2);
    EXPECT_GE(a.omega2_ci_high, a.omega2);
  }
}

TEST(Anova, Errors) {
  EXPECT_ERROR_KIND(oneway_anova({{1, 1}, {1, 1}}, 0), ErrorKind::undefined);
  EXPECT_ERROR_KIND(oneway_anova({{1, 2}, {3}}, 0), ErrorKind::input);
  EXPECT_ERROR_KIND(oneway_anova({{1, 2}}, 0), ErrorKind::input);
}

TEST(Bonferroni, ExamplesAndMonotonicity) {
  EXPECT_NEAR(bonferroni(0.01, 5), 0.05, 1e-15);
  EXPECT_EQ(bonferroni(0.5, 5), 1.0);
  EXPECT_TRUE(std::isnan(bonferroni(kNaN, 5)));
  EXPECT_ERROR_KIND(bonferroni(0.1, 0), ErrorKind::input);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 1000; ++rep) {
    const double p = u(rng);
    const int m = 1 + rep % 9;
    const double c = bonferroni(p, m);
    EXPECT_GE(c, p);
    EXPECT_LE(c, 1.0);
  }
  // Raw p of F(2, 6) = 3.80 corrected over five contrasts keeps its ordering.
  const double raw = f_upper_p(3.80, 2, 6);
  EXPECT_NEAR(bonferroni(raw, 5), std::min(1.0, 5 * 0.08586912273559942), 1e-8);
}

TEST(SdBootstrap, TightGroupGetsSmallP) {
  std::vector<double> pop;
  for (int i = 0; i < 100; ++i) pop.push_back(static_cast<double>(i));
  const std::vector<double> tight{50, 51, 52, 53, 54, 55, 56};
  EXPECT_LT(sd_bootstrap_test(tight, pop, 2000, 1), 0.001);
  EXPECT_EQ(sd_bootstrap_test(tight, pop, 2000, 1), sd_bootstrap_test(tight, pop, 2000, 1));
  EXPECT_ERROR_KIND(sd_bootstrap_test(pop, tight, 10, 1), ErrorKind::input);
}

TEST(SdBootstrap, NullPValuesAreUniform) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> ps;
  for (int exp = 0; exp < 200; ++exp) {
    std::vector<double> pop(60);
    for (auto& v : pop) v = g(rng);
    std::vector<double> group(pop.begin(), pop.begin() + 7);
    ps.push_back(sd_bootstrap_test(group, pop, 1000, static_cast<std::uint64_t>(exp) + 100));
  }
  EXPECT_GT(ks_uniform(ps).p, 0.10);
  EXPECT_NEAR(mean(ps), 0.5, 0.06);
}

TEST(KsUniform, StatisticMatchesReference) {
  const auto r = ks_uniform({0.1, 0.25, 0.33, 0.5, 0.52, 0.71, 0.9});
  EXPECT_NEAR(r.statistic, 0.19428571428571428, 1e-15);
  EXPECT_GT(r.p, 0.5);
}

TEST(Correlation, ReferenceValuesWithTies) {
  const std::vector<double> u{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4};
  const std::vector<double> v{2, 7, 1, 8, 2, 8, 1, 8, 2, 8, 4, 5, 9, 0, 4, 5, 2, 3, 5, 3};
  const auto s = spearman(u, v);
  EXPECT_NEAR(s.coefficient, 0.19073187020980284, 1e-12);
  EXPECT_NEAR(s.p, 0.420536244226812, 1e-8);
  EXPECT_NEAR(s.coefficient, oracle::pearson(oracle::tie_ranks(u), oracle::tie_ranks(v)), 1e-12);
  const auto p = pearson(u, v);
  EXPECT_NEAR(p.coefficient, 0.18036990753894186, 1e-12);
  EXPECT_NEAR(p.p, 0.4466726985399422, 1e-8);
  EXPECT_EQ(average_ranks(u), oracle::tie_ranks(u));
}

TEST(Correlation, LinearAndMonotone) {
  std::vector<double> x, lin, cube;
  for (int i = 0; i < 12; ++i) {
    const double t = -3.0 + 0.5 * i;
    x.push_back(t);
    lin.push_back(2 * t + 1);
    cube.push_back(t * t * t);
  }
  EXPECT_NEAR(pearson(x, lin).coefficient, 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, cube).coefficient, 1.0, 1e-15);
  EXPECT_LT(pearson(x, cube).coefficient, 1.0 - 1e-3);
  const std::vector<double> c{1, 1, 1};
  EXPECT_ERROR_KIND(pearson(c, std::vector<double>{1, 2, 3}), ErrorKind::undefined);
  EXPECT_ERROR_KIND(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ErrorKind::input);
}

TEST(Correlation, SpearmanInvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0, 1);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> x(15), y(15), fx, fy;
    for (auto& v : x) v = g(rng);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + g(rng);
    for (double v : x) fx.push_back(std::exp(3 * v));
    for (double v : y) fy.push_back(v * v * v - 10);
    EXPECT_EQ(spearman(x, y).coefficient, spearman(fx, fy).coefficient);
  }
}

TEST(Contrasts, DispatchByGroupShape) {
  ModelManifest man;
  man.entries = {entry("a1", ArchitectureClass::convolutional, "supervised"),
                 entry("a2", ArchitectureClass::convolutional, "supervised"),
                 entry("a3", ArchitectureClass::convolutional, "contrastive"),
                 entry("b1", ArchitectureClass::transformer, "contrastive"),
                 entry("b2", ArchitectureClass::transformer, "supervised"),
                 entry("b3", ArchitectureClass::transformer, "masked"),
                 entry("c1", ArchitectureClass::hybrid, "masked"),
                 entry("c2", ArchitectureClass::hybrid, "masked"),
                 entry("d1", ArchitectureClass::mlp_mixer, "masked", "web"),
                 entry("d2", ArchitectureClass::mlp_mixer, "supervised", "web")};
  std::map<std::string, double> u;
  double v = 0.1;
  for (const auto& e : man.entries) u[e.model_id] = (v += 0.037);
  const auto specs = parse_contrast_specs(json::parse(R"([
    {"name": "two", "filter": {"architecture_class": ["convolutional", "transformer"]}, "group_by": "architecture_class"},
    {"name": "four", "group_by": "architecture_class"},
    {"name": "singles", "filter": {"training_data": "web"}, "group_by": "model_id"},
    {"name": "spread", "filter": {"objective": "masked"}, "group_by": "objective", "test": "sd_bootstrap"}
  ])"));
  ContrastOptions opts;
  opts.anova_bootstrap = 100;
  opts.sd_bootstrap_iters = 1000;
  const auto res = run_contrasts(man, u, specs, opts);
  ASSERT_EQ(res.size(), 5u);
  EXPECT_EQ(res[0].test, ContrastTest::welch_t);
  EXPECT_EQ(res[0].groups.size(), 2u);
  EXPECT_EQ(res[1].test, ContrastTest::anova_f);
  EXPECT_EQ(res[1].df1, 3.0);
  EXPECT_EQ(res[2].test, ContrastTest::descriptive);
  EXPECT_TRUE(std::isnan(res[2].statistic));
  EXPECT_EQ(res[3].test, ContrastTest::sd_bootstrap);
  EXPECT_EQ(res[4].test, ContrastTest::sd_bootstrap);
  for (const auto& r : res) {
    if (std::isnan(r.p_raw)) continue;
    EXPECT_NEAR(r.p_corrected, std::min(1.0, 4 * r.p_raw), 1e-15);
    if (std::isfinite(r.effect_size)) {
      EXPECT_LE(r.effect_ci_low, r.effect_size);
      EXPECT_GE(r.effect_ci_high, r.effect_size);
    }
  }
}

TEST(Contrasts, SpecErrors) {
  EXPECT_ERROR_KIND(parse_contrast_specs(json::parse(R"({"name": "x"})")), ErrorKind::config);
  EXPECT_ERROR_KIND(parse_contrast_specs(json::parse(R"([{"name": "x"}])")), ErrorKind::config);
  EXPECT_ERROR_KIND(parse_contrast_specs(json::parse(R"([{"name": "x", "group_by": "family", "test": "chi2"}])")),
                    ErrorKind::config);
  ModelManifest man;
  man.entries = {entry("a1", ArchitectureClass::convolutional, "supervised")};
  const std::map<std::string, double> u{{"a1", 0.3}};
  const auto specs = parse_contrast_specs(json::parse(R"([{"name": "x", "group_by": "no_such_field"}])"));
  EXPECT_ERROR_KIND(run_contrasts(man, u, specs), ErrorKind::config);
}
