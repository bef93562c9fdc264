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

// Statistics used by the contrast suite and the analyses: distribution
// functions from the regularized incomplete beta, two-group and multi-group
// tests, effect sizes, correlations and resampling tests.

#pragma once

#include "unidim/error.hpp"
#include "unidim/rng.hpp"
#include "unidim/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace unidim::stats {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Descriptives

inline double mean(std::span<const double> x) {
  require(!x.empty(), ErrorKind::input, "mean of an empty sample");
  double s = 0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

/// Unbiased sample variance.
inline double variance(std::span<const double> x) {
  require(x.size() >= 2, ErrorKind::input, "variance needs at least two values");
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double sd(std::span<const double> x) { return std::sqrt(variance(x)); }

inline double median(std::vector<double> x) {
  require(!x.empty(), ErrorKind::input, "median of an empty sample");
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

/// Empirical quantile with linear interpolation between order statistics
/// (position q * (n - 1) in the sorted sample).
inline double percentile(std::vector<double> x, double q) {
  require(!x.empty(), ErrorKind::input, "percentile of an empty sample");
  require(q >= 0 && q <= 1, ErrorKind::input, "percentile must lie in [0,1]");
  std::sort(x.begin(), x.end());
  const double pos = q * static_cast<double>(x.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return x[lo] + frac * (x[hi] - x[lo]);
}

// ---------------------------------------------------------------------------
// Distribution functions

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 1000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw Error(ErrorKind::numerical, "incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  require(a > 0 && b > 0, ErrorKind::input, "incomplete beta needs positive shape parameters");
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1) / (a + b + 2)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
inline double t_two_sided_p(double t, double df) {
  if (std::isnan(t)) return kNaN;
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

/// Upper tail P(T > t).
inline double t_upper_p(double t, double df) {
  const double two = t_two_sided_p(t, df);
  return t >= 0 ? 0.5 * two : 1.0 - 0.5 * two;
}

/// Upper-tail p-value of the F distribution.
inline double f_upper_p(double f, double df1, double df2) {
  if (std::isnan(f)) return kNaN;
  if (std::isinf(f)) return 0.0;
  if (f <= 0) return 1.0;
  return incomplete_beta(0.5 * df2, 0.5 * df1, df2 / (df2 + df1 * f));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// P(X >= k) for X ~ Binomial(n, 1/2).
inline double binomial_upper_half(int k, int n) {
  double p = 0;
  for (int i = std::max(k, 0); i <= n; ++i)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  return std::min(1.0, p);
}

/// Asymptotic Kolmogorov distribution tail, P(K > lambda).
inline double kolmogorov_upper(double lambda) {
  if (lambda <= 0) return 1.0;
  double p = 0;
  for (int k = 1; k <= 200; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    p += term;
    if (std::abs(term) < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

struct KsResult {
  double statistic;
  double p;
};

/// One-sample Kolmogorov-Smirnov test against Uniform(0,1).
inline KsResult ks_uniform(std::vector<double> x) {
  require(!x.empty(), ErrorKind::input, "KS test of an empty sample");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std::clamp(x[i], 0.0, 1.0);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_upper((sn + 0.12 + 0.11 / sn) * d)};
}

// ---------------------------------------------------------------------------
// Two-group tests

struct GroupSummary {
  std::string label;
  std::size_t n = 0;
  double mean = kNaN;
  double sd = kNaN;
};

inline GroupSummary summarize(std::string label, std::span<const double> x) {
  GroupSummary g;
  g.label = std::move(label);
  g.n = x.size();
  if (!x.empty()) g.mean = mean(x);
  if (x.size() >= 2) g.sd = sd(x);
  return g;
}

struct TTestResult {
  double t = kNaN;
  double df = kNaN;
  double p = kNaN;  // two-sided
};

struct WelchResult : TTestResult {
  double hedges_g = kNaN;
  double g_se = kNaN;
  double g_ci_low = kNaN;
  double g_ci_high = kNaN;
};

inline double hedges_correction(double n_total) { return 1.0 - 3.0 / (4.0 * n_total - 9.0); }

inline WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::input, "Welch's t needs at least two values per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean(a), mb = mean(b), va = variance(a), vb = variance(b);
  require(va > 0 || vb > 0, ErrorKind::undefined, "Welch's t is undefined when both groups have zero variance");
  WelchResult r;
  const double qa = va / na, qb = vb / nb;
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1) + qb * qb / (nb - 1));
  r.p = t_two_sided_p(r.t, r.df);
  const double sp = std::sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2));
  r.hedges_g = hedges_correction(na + nb) * (ma - mb) / sp;
  r.g_se = std::sqrt((na + nb) / (na * nb) + r.hedges_g * r.hedges_g / (2.0 * (na + nb)));
  r.g_ci_low = r.hedges_g - 1.96 * r.g_se;
  r.g_ci_high = r.hedges_g + 1.96 * r.g_se;
  return r;
}

/// Pooled-variance Student's t.
inline TTestResult student_t(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::input, "Student's t needs at least two values per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sp2 = ((na - 1) * variance(a) + (nb - 1) * variance(b)) / (na + nb - 2);
  require(sp2 > 0, ErrorKind::undefined, "Student's t is undefined for zero pooled variance");
  TTestResult r;
  r.t = (mean(a) - mean(b)) / std::sqrt(sp2 * (1 / na + 1 / nb));
  r.df = na + nb - 2;
  r.p = t_two_sided_p(r.t, r.df);
  return r;
}

/// Paired t-test on a[i] - b[i].
inline TTestResult paired_t(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorKind::input, "paired t needs two equal-length samples, n >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double v = variance(d);
  require(v > 0, ErrorKind::undefined, "paired t is undefined for constant differences");
  TTestResult r;
  r.t = mean(d) / std::sqrt(v / static_cast<double>(d.size()));
  r.df = static_cast<double>(d.size() - 1);
  r.p = t_two_sided_p(r.t, r.df);
  return r;
}

/// One-sided sign test for a[i] > b[i]; ties are dropped.
inline double sign_test_greater(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::input, "sign test needs equal-length samples");
  int pos = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++n;
    if (a[i] > b[i]) ++pos;
  }
  if (n == 0) return 1.0;
  return binomial_upper_half(pos, n);
}

// ---------------------------------------------------------------------------
// One-way ANOVA

struct AnovaResult {
  double F = kNaN;
  double df_between = kNaN;
  double df_within = kNaN;
  double p = kNaN;
  double omega2 = kNaN;
  double omega2_ci_low = kNaN;
  double omega2_ci_high = kNaN;
  int bootstrap_used = 0;  // resamples with a defined omega^2
};

namespace detail {

struct AnovaSums {
  double ss_between = 0, ss_within = 0, df_between = 0, df_within = 0;
};

inline AnovaSums anova_sums(const std::vector<std::vector<double>>& groups) {
  AnovaSums s;
  double total = 0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (double v : g) total += v;
    n += g.size();
  }
  const double grand = total / static_cast<double>(n);
  for (const auto& g : groups) {
    const double m = mean(g);
    s.ss_between += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double v : g) s.ss_within += (v - m) * (v - m);
  }
  s.df_between = static_cast<double>(groups.size() - 1);
  s.df_within = static_cast<double>(n - groups.size());
  return s;
}

inline double omega_squared(const AnovaSums& s) {
  const double ms_within = s.ss_within / s.df_within;
  return (s.ss_between - s.df_between * ms_within) / (s.ss_between + s.ss_within + ms_within);
}

}  // namespace detail

/// Standard one-way F test with omega^2 and a seeded percentile-bootstrap CI
/// (members resampled with replacement within each group).
inline AnovaResult oneway_anova(const std::vector<std::vector<double>>& groups, int bootstrap_iters = 2000,
                                std::uint64_t seed = 0) {
  require(groups.size() >= 2, ErrorKind::input, "ANOVA needs at least two groups");
  int multi = 0;
  for (const auto& g : groups) {
    require(!g.empty(), ErrorKind::input, "ANOVA groups must be nonempty");
    if (g.size() >= 2) ++multi;
  }
  require(multi >= 2, ErrorKind::input, "ANOVA needs at least two groups with n >= 2");
  const auto s = detail::anova_sums(groups);
  require(s.ss_between + s.ss_within > 0, ErrorKind::undefined, "ANOVA F is undefined when all values are identical");
  AnovaResult r;
  r.df_between = s.df_between;
  r.df_within = s.df_within;
  r.F = s.ss_within > 0 ? (s.ss_between / s.df_between) / (s.ss_within / s.df_within)
                        : std::numeric_limits<double>::infinity();
  r.p = f_upper_p(r.F, r.df_between, r.df_within);
  r.omega2 = detail::omega_squared(s);

  if (bootstrap_iters > 0) {
    std::vector<double> boot;
    boot.reserve(static_cast<std::size_t>(bootstrap_iters));
    std::vector<std::vector<double>> resampled(groups.size());
    for (int it = 0; it < bootstrap_iters; ++it) {
      Rng rng = make_stream(seed, {0xa0a0ULL, static_cast<std::uint64_t>(it)});
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
        resampled[gi].resize(g.size());
        for (auto& v : resampled[gi]) v = g[pick(rng)];
      }
      const auto bs = detail::anova_sums(resampled);
      const double w = detail::omega_squared(bs);
      if (std::isfinite(w)) boot.push_back(w);
    }
    r.bootstrap_used = static_cast<int>(boot.size());
    if (!boot.empty()) {
      // Resampling within small groups shifts the bootstrap distribution, so the
      // percentile interval is extended to contain the point estimate.
      r.omega2_ci_low = std::min(percentile(boot, 0.025), r.omega2);
      r.omega2_ci_high = std::max(percentile(boot, 0.975), r.omega2);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Multiple comparisons and resampling

inline double bonferroni(double p, int m_contrasts) {
  require(m_contrasts >= 1, ErrorKind::input, "Bonferroni needs m >= 1");
  if (std::isnan(p)) return p;
  return std::min(1.0, p * static_cast<double>(m_contrasts));
}

inline std::vector<double> bonferroni(std::span<const double> p, int m_contrasts) {
  std::vector<double> out;
  out.reserve(p.size());
  for (double v : p) out.push_back(bonferroni(v, m_contrasts));
  return out;
}

/// One-sided test that a group's SD is smaller than that of random equal-size
/// subsets of the population: p = fraction of null SDs <= observed SD.
inline double sd_bootstrap_test(std::span<const double> group, std::span<const double> population, int iters,
                                std::uint64_t seed) {
  const std::size_t g = group.size();
  require(g >= 2, ErrorKind::input, "SD bootstrap needs a group of at least two");
  require(g <= population.size(), ErrorKind::input, "group is larger than the population");
  require(iters >= 1, ErrorKind::input, "SD bootstrap needs at least one resample");
  const double observed = sd(group);
  std::vector<double> pool(population.begin(), population.end()), draw(g);
  int at_or_below = 0;
  for (int it = 0; it < iters; ++it) {
    Rng rng = make_stream(seed, {0x5dULL, static_cast<std::uint64_t>(it)});
    // Partial Fisher-Yates: the first g slots become a uniform subset.
    for (std::size_t i = 0; i < g; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      draw[i] = pool[i];
    }
    if (sd(draw) <= observed) ++at_or_below;
  }
  return static_cast<double>(at_or_below) / static_cast<double>(iters);
}

// ---------------------------------------------------------------------------
// Correlation

/// Ranks 1..n with ties assigned their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

enum class CorrelationMethod { pearson, spearman };

struct CorrelationResult {
  double coefficient = kNaN;
  double p = kNaN;  // two-sided, t approximation with n - 2 df
  std::size_t n = 0;
};

inline double pearson_coefficient(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::input, "correlation needs equal-length samples");
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0 && syy > 0, ErrorKind::undefined, "correlation is undefined for a constant variable");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline CorrelationResult correlation(std::span<const double> x, std::span<const double> y,
                                     CorrelationMethod method = CorrelationMethod::pearson) {
  require(x.size() == y.size(), ErrorKind::input, "correlation needs equal-length samples");
  require(x.size() >= 3, ErrorKind::input, "correlation needs n >= 3");
  for (std::size_t i = 0; i < x.size(); ++i)
    require(std::isfinite(x[i]) && std::isfinite(y[i]), ErrorKind::data, "correlation inputs must be finite");
  CorrelationResult r;
  r.n = x.size();
  if (method == CorrelationMethod::pearson) {
    r.coefficient = pearson_coefficient(x, y);
  } else {
    const auto rx = average_ranks(x), ry = average_ranks(y);
    r.coefficient = pearson_coefficient(rx, ry);
  }
  const double df = static_cast<double>(r.n - 2);
  const double c = r.coefficient;
  r.p = (std::abs(c) >= 1.0) ? 0.0 : t_two_sided_p(c * std::sqrt(df / (1.0 - c * c)), df);
  return r;
}

inline CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
  return correlation(x, y, CorrelationMethod::pearson);
}

inline CorrelationResult spearman(std::span<const double> x, std::span<const double> y) {
  return correlation(x, y, CorrelationMethod::spearman);
}

// ---------------------------------------------------------------------------
// Pre-specified contrasts over the model manifest

enum class ContrastTest { welch_t, anova_f, descriptive, sd_bootstrap };

inline const char* to_string(ContrastTest t) {
  switch (t) {
    case ContrastTest::welch_t: return "welch_t";
    case ContrastTest::anova_f: return "anova_f";
    case ContrastTest::descriptive: return "descriptive";
    case ContrastTest::sd_bootstrap: return "sd_bootstrap";
  }
  return "?";
}

inline ContrastTest parse_contrast_test(const std::string& s) {
  if (s == "welch_t") return ContrastTest::welch_t;
  if (s == "anova_f") return ContrastTest::anova_f;
  if (s == "descriptive") return ContrastTest::descriptive;
  if (s == "sd_bootstrap") return ContrastTest::sd_bootstrap;
  throw Error(ErrorKind::config, "unknown contrast test '" + s + "'");
}

/// {name, filter: {field: value | [values]}, group_by: field, test?: override,
///  min_group_size?: drop smaller groups}
struct ContrastSpec {
  std::string name;
  std::map<std::string, std::vector<std::string>> filter;
  std::string group_by;
  std::optional<ContrastTest> test;
  std::size_t min_group_size = 1;
};

inline std::vector<ContrastSpec> parse_contrast_specs(const json& doc) {
  require(doc.is_array(), ErrorKind::config, "contrast specs must be a JSON list");
  std::vector<ContrastSpec> specs;
  try {
    for (const auto& j : doc) {
      ContrastSpec s;
      s.name = j.at("name").get<std::string>();
      s.group_by = j.at("group_by").get<std::string>();
      if (j.contains("filter")) {
        for (auto it = j.at("filter").begin(); it != j.at("filter").end(); ++it) {
          if (it.value().is_array()) s.filter[it.key()] = it.value().get<std::vector<std::string>>();
          else s.filter[it.key()] = {it.value().get<std::string>()};
        }
      }
      if (j.contains("test")) s.test = parse_contrast_test(j.at("test").get<std::string>());
      if (j.contains("min_group_size")) s.min_group_size = j.at("min_group_size").get<std::size_t>();
      specs.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("contrast spec: ") + e.what());
  }
  return specs;
}

struct ContrastResult {
  std::string contrast_name;
  ContrastTest test = ContrastTest::descriptive;
  double statistic = kNaN;
  double df1 = kNaN, df2 = kNaN;
  double p_raw = kNaN;
  double p_corrected = kNaN;
  double effect_size = kNaN;  // Hedges' g or omega^2
  double effect_ci_low = kNaN, effect_ci_high = kNaN;
  std::string ci_method;
  std::vector<GroupSummary> groups;
};

struct ContrastOptions {
  int anova_bootstrap = 2000;
  int sd_bootstrap_iters = 10000;
  std::uint64_t seed = 0;
};

/// Groups models per spec, dispatches the matching test and applies Bonferroni
/// across the whole spec set.
inline std::vector<ContrastResult> run_contrasts(const ModelManifest& manifest,
                                                 const std::map<std::string, double>& universality,
                                                 std::span<const ContrastSpec> specs, const ContrastOptions& opts = {}) {
  std::vector<double> population;
  for (const auto& e : manifest.entries) {
    auto it = universality.find(e.model_id);
    if (it != universality.end()) population.push_back(it->second);
  }
  std::vector<ContrastResult> out;
  for (std::size_t si = 0; si < specs.size(); ++si) {
    const auto& spec = specs[si];
    std::map<std::string, std::vector<double>> grouped;
    for (const auto& e : manifest.entries) {
      auto u = universality.find(e.model_id);
      if (u == universality.end()) continue;
      bool keep = true;
      for (const auto& [field, allowed] : spec.filter) {
        auto v = e.field(field);
        if (!v || std::find(allowed.begin(), allowed.end(), *v) == allowed.end()) {
          keep = false;
          break;
        }
      }
      if (!keep) continue;
      auto key = e.field(spec.group_by);
      require(key.has_value(), ErrorKind::config,
              "contrast '" + spec.name + "': model '" + e.model_id + "' has no field '" + spec.group_by + "'");
      grouped[*key].push_back(u->second);
    }
    std::vector<std::string> labels;
    std::vector<std::vector<double>> groups;
    for (auto& [label, values] : grouped) {
      if (values.size() < spec.min_group_size) continue;
      labels.push_back(label);
      groups.push_back(values);
    }
    require(!groups.empty(), ErrorKind::input, "contrast '" + spec.name + "' selects no models");

    ContrastResult base;
    base.contrast_name = spec.name;
    for (std::size_t g = 0; g < groups.size(); ++g) base.groups.push_back(summarize(labels[g], groups[g]));
    const bool all_singleton =
        std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.size() == 1; });
    ContrastTest test = spec.test ? *spec.test
                        : all_singleton       ? ContrastTest::descriptive
                        : groups.size() == 2  ? ContrastTest::welch_t
                        : groups.size() > 2   ? ContrastTest::anova_f
                                              : ContrastTest::descriptive;

    auto sd_row = [&](const std::vector<double>& members) {
      ContrastResult r = base;
      r.test = ContrastTest::sd_bootstrap;
      r.statistic = sd(members);
      r.p_raw = sd_bootstrap_test(members, population, opts.sd_bootstrap_iters, derive_seed(opts.seed, {si, 1}));
      r.ci_method = "one-sided; null = SDs of random equal-size subsets of all models";
      return r;
    };
    std::vector<double> pooled;
    for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());

    switch (test) {
      case ContrastTest::welch_t: {
        require(groups.size() == 2, ErrorKind::input, "contrast '" + spec.name + "': Welch's t needs exactly two groups");
        auto w = welch_t(groups[0], groups[1]);
        ContrastResult r = base;
        r.test = test;
        r.statistic = w.t;
        r.df1 = w.df;
        r.p_raw = w.p;
        r.effect_size = w.hedges_g;
        r.effect_ci_low = w.g_ci_low;
        r.effect_ci_high = w.g_ci_high;
        r.ci_method = "hedges_g +/- 1.96 SE (large-sample)";
        out.push_back(std::move(r));
        break;
      }
      case ContrastTest::anova_f: {
        auto a = oneway_anova(groups, opts.anova_bootstrap, derive_seed(opts.seed, {si, 0}));
        ContrastResult r = base;
        r.test = test;
        r.statistic = a.F;
        r.df1 = a.df_between;
        r.df2 = a.df_within;
        r.p_raw = a.p;
        r.effect_size = a.omega2;
        r.effect_ci_low = a.omega2_ci_low;
        r.effect_ci_high = a.omega2_ci_high;
        r.ci_method = "omega^2 percentile bootstrap, " + std::to_string(opts.anova_bootstrap) +
                      " resamples, extended to contain the estimate";
        out.push_back(std::move(r));
        break;
      }
      case ContrastTest::descriptive: {
        ContrastResult r = base;
        r.test = test;
        out.push_back(r);
        if (all_singleton && pooled.size() >= 2) out.push_back(sd_row(pooled));
        break;
      }
      case ContrastTest::sd_bootstrap:
        out.push_back(sd_row(pooled));
        break;
    }
  }
  const int m = static_cast<int>(std::max<std::size_t>(specs.size(), 1));
  for (auto& r : out) r.p_corrected = bonferroni(r.p_raw, m);
  return out;
}

}  // namespace unidim::stats
