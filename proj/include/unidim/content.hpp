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

// What each dimension encodes: category consistency, its variance
// decomposition across universality deciles, and reconstruction importance.

#pragma once

#include "unidim/csv.hpp"
#include "unidim/error.hpp"
#include "unidim/stats.hpp"
#include "unidim/tensor_io.hpp"
#include "unidim/types.hpp"

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

struct DimensionContent {
  std::string model_id;
  Index dim = 0;  // 0-based
  double eta2 = stats::kNaN;
  double ss_between = 0.0;
  double ss_within = 0.0;
  double ss_total = 0.0;
  double delta_r2 = stats::kNaN;
  double universality_calibrated = stats::kNaN;
  bool degenerate = false;  // constant loadings, eta2 undefined
};

/// One-way decomposition of a loading vector by category. Unbalanced designs
/// use the general formulas; `require_balanced` rejects them instead.
inline DimensionContent eta_squared(const Eigen::Ref<const Vector>& w, const CategoryIndex& cats,
                                    bool require_balanced = false) {
  const auto n = static_cast<std::size_t>(w.size());
  require(n == cats.image_count(), ErrorKind::consistency, "eta squared: loadings and category labels differ in length");
  require(!require_balanced || cats.balanced(), ErrorKind::input, "eta squared: categories are not balanced");
  const std::size_t C = cats.category_count();
  std::vector<double> sum(C, 0.0);
  std::vector<std::size_t> count(C, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(cats.labels[i]);
    sum[c] += w(static_cast<Index>(i));
    ++count[c];
  }
  const double grand = w.mean();
  DimensionContent d;
  for (std::size_t c = 0; c < C; ++c) {
    if (count[c] == 0) continue;
    const double mc = sum[c] / static_cast<double>(count[c]);
    d.ss_between += static_cast<double>(count[c]) * (mc - grand) * (mc - grand);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double x = w(static_cast<Index>(i));
    const auto c = static_cast<std::size_t>(cats.labels[i]);
    const double mc = sum[c] / static_cast<double>(count[c]);
    d.ss_within += (x - mc) * (x - mc);
    d.ss_total += (x - grand) * (x - grand);
  }
  d.degenerate = w.maxCoeff() == w.minCoeff() || d.ss_total <= 0.0;
  if (d.degenerate) {
    d.ss_between = d.ss_within = d.ss_total = 0.0;
  } else {
    d.eta2 = std::clamp(d.ss_between / d.ss_total, 0.0, 1.0);
  }
  return d;
}

/// Drop in unclamped explained variance of S when column k of W is zeroed.
/// With residual R = S - W W^T and w = W[:,k], removal adds 2 w^T R w + |w|^4
/// to the squared residual.
inline std::vector<double> reconstruction_importance(const Matrix& S, const Matrix& W) {
  require(S.rows() == S.cols() && W.rows() == S.rows(), ErrorKind::input, "reconstruction importance: shapes do not conform");
  const double total = S.squaredNorm();
  require(total > 0, ErrorKind::degenerate, "reconstruction importance of an all-zero similarity matrix");
  const Matrix SW = S * W;
  const Matrix G = W.transpose() * W;
  std::vector<double> out(static_cast<std::size_t>(W.cols()));
  for (Index k = 0; k < W.cols(); ++k) {
    const double wSw = W.col(k).dot(SW.col(k));
    const double wRw = wSw - G.col(k).squaredNorm();
    const double w2 = G(k, k);
    out[static_cast<std::size_t>(k)] = (2.0 * wRw + w2 * w2) / total;
  }
  return out;
}

inline double reconstruction_importance(const Matrix& S, const Matrix& W, Index k) {
  require(k >= 0 && k < W.cols(), ErrorKind::input, "reconstruction importance: dimension out of range");
  return reconstruction_importance(S, W)[static_cast<std::size_t>(k)];
}

/// Per-dimension content of one model. S and the report are optional.
inline std::vector<DimensionContent> analyze_content(const Embedding& e, const CategoryIndex& cats,
                                                     const Matrix* S = nullptr,
                                                     const UniversalityReport* report = nullptr) {
  std::vector<double> dr2;
  if (S) dr2 = reconstruction_importance(*S, e.W);
  if (report)
    require(static_cast<Index>(report->calibrated.size()) == e.rank(), ErrorKind::consistency,
            "universality report rank differs from the embedding");
  std::vector<DimensionContent> out;
  for (Index k = 0; k < e.rank(); ++k) {
    DimensionContent d = eta_squared(e.W.col(k), cats);
    d.model_id = e.model_id;
    d.dim = k;
    if (S) d.delta_r2 = dr2[static_cast<std::size_t>(k)];
    if (report) d.universality_calibrated = report->calibrated[static_cast<std::size_t>(k)];
    out.push_back(d);
  }
  return out;
}

struct DecileRow {
  int decile = 0;  // 1 = least universal, 10 = most universal
  std::size_t dimensions = 0;
  double universality_low = stats::kNaN;
  double universality_high = stats::kNaN;
  double between_fraction = stats::kNaN;
  double within_fraction = stats::kNaN;
};

/// Non-degenerate dimensions sorted by universality (stable), cut into ten
/// equal-count bins. Fractions pool summed SS per bin, or average the
/// per-dimension fractions when `per_dimension_mean` is set.
inline std::vector<DecileRow> variance_fraction_by_decile(std::span<const DimensionContent> contents,
                                                          bool per_dimension_mean = false) {
  std::vector<const DimensionContent*> dims;
  for (const auto& d : contents) {
    if (d.degenerate) continue;
    require(std::isfinite(d.universality_calibrated), ErrorKind::input, "decile table needs universality for every dimension");
    dims.push_back(&d);
  }
  require(dims.size() >= 10, ErrorKind::input, "decile table needs at least ten non-degenerate dimensions");
  std::stable_sort(dims.begin(), dims.end(), [](auto* a, auto* b) {
    return a->universality_calibrated < b->universality_calibrated;
  });
  std::vector<DecileRow> rows(10);
  std::vector<double> sb(10, 0), sw(10, 0), st(10, 0), fb(10, 0), fw(10, 0);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const std::size_t b = i * 10 / dims.size();
    const auto* d = dims[i];
    auto& row = rows[b];
    if (row.dimensions == 0) row.universality_low = d->universality_calibrated;
    row.universality_high = d->universality_calibrated;
    ++row.dimensions;
    sb[b] += d->ss_between;
    sw[b] += d->ss_within;
    st[b] += d->ss_total;
    fb[b] += d->ss_between / d->ss_total;
    fw[b] += d->ss_within / d->ss_total;
  }
  for (std::size_t b = 0; b < 10; ++b) {
    auto& row = rows[b];
    row.decile = static_cast<int>(b) + 1;
    if (per_dimension_mean) {
      row.between_fraction = fb[b] / static_cast<double>(row.dimensions);
      row.within_fraction = fw[b] / static_cast<double>(row.dimensions);
    } else {
      row.between_fraction = sb[b] / st[b];
      row.within_fraction = sw[b] / st[b];
    }
  }
  return rows;
}

struct ContentCorrelations {
  double rho_eta2 = stats::kNaN;
  double p_eta2 = stats::kNaN;
  double rho_delta_r2 = stats::kNaN;  // pooled over all dimensions
  double p_delta_r2 = stats::kNaN;
  double median_within_model_rho_delta_r2 = stats::kNaN;
  std::size_t dimensions_used = 0;
  std::size_t degenerate_excluded = 0;
};

/// Spearman correlations of eta2 and delta R2 with calibrated universality.
inline ContentCorrelations content_universality_correlations(std::span<const DimensionContent> contents) {
  ContentCorrelations c;
  std::vector<double> u, eta, ur, dr;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per_model;
  for (const auto& d : contents) {
    if (d.degenerate) {
      ++c.degenerate_excluded;
      continue;
    }
    require(std::isfinite(d.universality_calibrated), ErrorKind::input, "content correlations need universality scores");
    u.push_back(d.universality_calibrated);
    eta.push_back(d.eta2);
    if (std::isfinite(d.delta_r2)) {
      ur.push_back(d.universality_calibrated);
      dr.push_back(d.delta_r2);
      auto& pm = per_model[d.model_id];
      pm.first.push_back(d.universality_calibrated);
      pm.second.push_back(d.delta_r2);
    }
  }
  c.dimensions_used = u.size();
  require(u.size() >= 3, ErrorKind::input, "content correlations need at least three non-degenerate dimensions");
  auto r = stats::spearman(u, eta);
  c.rho_eta2 = r.coefficient;
  c.p_eta2 = r.p;
  if (ur.size() >= 3) {
    r = stats::spearman(ur, dr);
    c.rho_delta_r2 = r.coefficient;
    c.p_delta_r2 = r.p;
    std::vector<double> within;
    for (const auto& [id, v] : per_model) {
      if (v.first.size() < 3) continue;
      try {
        within.push_back(stats::spearman(v.first, v.second).coefficient);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::undefined) throw;
      }
    }
    if (!within.empty()) c.median_within_model_rho_delta_r2 = stats::median(within);
  }
  return c;
}

inline Table content_table(std::span<const DimensionContent> contents) {
  Table t;
  t.columns = {"model_id", "dim", "eta2", "ss_between", "ss_within", "ss_total", "delta_r2", "universality_calibrated",
               "degenerate"};
  for (const auto& d : contents)
    t.add_row({d.model_id, std::to_string(d.dim + 1), format_double(d.eta2), format_double(d.ss_between),
               format_double(d.ss_within), format_double(d.ss_total), format_double(d.delta_r2),
               format_double(d.universality_calibrated), d.degenerate ? "1" : "0"});
  return t;
}

inline Table decile_table(std::span<const DecileRow> rows, bool per_dimension_mean = false) {
  Table t;
  t.columns = {"decile", "dimensions", "universality_low", "universality_high", "between_fraction", "within_fraction",
               "weighting"};
  for (const auto& r : rows)
    t.add_row({std::to_string(r.decile), std::to_string(r.dimensions), format_double(r.universality_low),
               format_double(r.universality_high), format_double(r.between_fraction), format_double(r.within_fraction),
               per_dimension_mean ? "per_dimension_mean" : "pooled_ss"});
  return t;
}

// ---------------------------------------------------------------------------
// Optional human labels, cross-tabulated against universality bins

enum class DimensionLabel { semantic, visual, both, neither };

inline DimensionLabel parse_dimension_label(const std::string& s) {
  if (s == "semantic") return DimensionLabel::semantic;
  if (s == "visual") return DimensionLabel::visual;
  if (s == "both") return DimensionLabel::both;
  if (s == "neither") return DimensionLabel::neither;
  throw Error(ErrorKind::data, "unknown dimension label '" + s + "'");
}

inline const char* to_string(DimensionLabel l) {
  switch (l) {
    case DimensionLabel::semantic: return "semantic";
    case DimensionLabel::visual: return "visual";
    case DimensionLabel::both: return "both";
    case DimensionLabel::neither: return "neither";
  }
  return "neither";
}

/// dimension_id is "<model_id>/<k>" with k 1-based.
inline std::string dimension_id(const std::string& model_id, Index dim) {
  return model_id + "/" + std::to_string(dim + 1);
}

inline std::map<std::string, DimensionLabel> load_dimension_labels(const std::filesystem::path& path) {
  const Table t = read_csv(path);
  require(t.has_column("dimension_id") && t.has_column("label"), ErrorKind::format,
          "labels CSV needs columns dimension_id,label");
  const auto ci = t.column("dimension_id"), cl = t.column("label");
  std::map<std::string, DimensionLabel> out;
  for (const auto& row : t.rows) {
    require(out.emplace(row[ci], parse_dimension_label(row[cl])).second, ErrorKind::data,
            "duplicate dimension_id '" + row[ci] + "' in labels CSV");
  }
  return out;
}

/// Counts of each label within `bins` equal-count universality bins of the labelled dimensions.
inline Table label_crosstab(std::span<const DimensionContent> contents,
                            const std::map<std::string, DimensionLabel>& labels, int bins = 10) {
  require(bins >= 1, ErrorKind::input, "cross-tab needs at least one bin");
  std::vector<std::pair<double, DimensionLabel>> items;
  for (const auto& d : contents) {
    auto it = labels.find(dimension_id(d.model_id, d.dim));
    if (it == labels.end() || !std::isfinite(d.universality_calibrated)) continue;
    items.emplace_back(d.universality_calibrated, it->second);
  }
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::array<std::size_t, 4>> counts(static_cast<std::size_t>(bins), {0, 0, 0, 0});
  for (std::size_t i = 0; i < items.size(); ++i)
    ++counts[i * static_cast<std::size_t>(bins) / items.size()][static_cast<std::size_t>(items[i].second)];
  Table t;
  t.columns = {"bin", "semantic", "visual", "both", "neither"};
  for (int b = 0; b < bins; ++b) {
    const auto& c = counts[static_cast<std::size_t>(b)];
    t.add_row({std::to_string(b + 1), std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2]),
               std::to_string(c[3])});
  }
  return t;
}

}  // namespace unidim
