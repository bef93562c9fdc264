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

// Loading of feature matrices, the model manifest and category index, run
// configuration, and deterministic persistence of every pipeline artifact.
// Matrices are stored as NPY; metadata goes into a "<file>.meta.json" sidecar
// carrying a schema version that is checked on reload.

#pragma once

#include "unidim/csv.hpp"
#include "unidim/error.hpp"
#include "unidim/npy.hpp"
#include "unidim/types.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace unidim {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "1";

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  int rank = 50;
  int seeds = 5;
  std::vector<double> alpha_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0};
  int permutations = 1000;
  double null_percentile = 0.95;
  int cv_folds = 5;
  std::vector<double> ridge_grid = default_ridge_grid();
  std::uint64_t rng_seed = 0;
  int float_width = 32;
  double tol = 1e-6;
  int max_iters = 500;
  bool zscore = false;

  /// 20 log-spaced penalties from 1e-2 to 1e6.
  static std::vector<double> default_ridge_grid() {
    std::vector<double> g(20);
    for (int i = 0; i < 20; ++i) g[static_cast<std::size_t>(i)] = std::pow(10.0, -2.0 + 8.0 * i / 19.0);
    return g;
  }

  void validate() const {
    require(rank >= 1, ErrorKind::config, "rank must be positive");
    require(seeds >= 1, ErrorKind::config, "seeds must be positive");
    require(!alpha_grid.empty(), ErrorKind::config, "alpha_grid must be nonempty");
    for (std::size_t i = 0; i < alpha_grid.size(); ++i) {
      require(alpha_grid[i] > 0, ErrorKind::config, "alpha_grid entries must be positive");
      require(i == 0 || alpha_grid[i] > alpha_grid[i - 1], ErrorKind::config, "alpha_grid must be strictly ascending");
    }
    require(permutations >= 1, ErrorKind::config, "permutations must be positive");
    require(null_percentile > 0 && null_percentile < 1, ErrorKind::config, "null_percentile must lie in (0,1)");
    require(cv_folds >= 2, ErrorKind::config, "cv_folds must be at least 2");
    require(!ridge_grid.empty(), ErrorKind::config, "ridge_grid must be nonempty");
    for (double l : ridge_grid) require(l > 0, ErrorKind::config, "ridge_grid entries must be positive");
    require(float_width == 32 || float_width == 64, ErrorKind::config, "float_width must be 32 or 64");
    require(tol > 0, ErrorKind::config, "tol must be positive");
    require(max_iters >= 1, ErrorKind::config, "max_iters must be positive");
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"rank", c.rank},           {"seeds", c.seeds},       {"alpha_grid", c.alpha_grid},
           {"permutations", c.permutations}, {"null_percentile", c.null_percentile},
           {"cv_folds", c.cv_folds},   {"ridge_grid", c.ridge_grid}, {"rng_seed", c.rng_seed},
           {"float_width", c.float_width}, {"tol", c.tol},       {"max_iters", c.max_iters},
           {"zscore", c.zscore}};
}

inline void from_json(const json& j, RunConfig& c) {
  static const std::set<std::string> known{"rank", "seeds", "alpha_grid", "permutations", "null_percentile", "cv_folds",
                                           "ridge_grid", "rng_seed", "float_width", "tol", "max_iters", "zscore"};
  try {
    for (auto it = j.begin(); it != j.end(); ++it)
      require(known.count(it.key()) > 0, ErrorKind::config, "unknown run option '" + it.key() + "'");
    if (j.contains("rank")) c.rank = j.at("rank").get<int>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<int>();
    if (j.contains("alpha_grid")) c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    if (j.contains("permutations")) c.permutations = j.at("permutations").get<int>();
    if (j.contains("null_percentile")) c.null_percentile = j.at("null_percentile").get<double>();
    if (j.contains("cv_folds")) c.cv_folds = j.at("cv_folds").get<int>();
    if (j.contains("ridge_grid")) c.ridge_grid = j.at("ridge_grid").get<std::vector<double>>();
    if (j.contains("rng_seed")) c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    if (j.contains("float_width")) c.float_width = j.at("float_width").get<int>();
    if (j.contains("tol")) c.tol = j.at("tol").get<double>();
    if (j.contains("max_iters")) c.max_iters = j.at("max_iters").get<int>();
    if (j.contains("zscore")) c.zscore = j.at("zscore").get<bool>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, e.what());
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Manifest

enum class ArchitectureClass { convolutional, transformer, mlp_mixer, hybrid };

inline const char* to_string(ArchitectureClass a) {
  switch (a) {
    case ArchitectureClass::convolutional: return "convolutional";
    case ArchitectureClass::transformer: return "transformer";
    case ArchitectureClass::mlp_mixer: return "mlp-mixer";
    case ArchitectureClass::hybrid: return "hybrid";
  }
  return "?";
}

inline ArchitectureClass parse_architecture(const std::string& s) {
  if (s == "convolutional") return ArchitectureClass::convolutional;
  if (s == "transformer") return ArchitectureClass::transformer;
  if (s == "mlp-mixer") return ArchitectureClass::mlp_mixer;
  if (s == "hybrid") return ArchitectureClass::hybrid;
  throw Error(ErrorKind::format, "unknown architecture_class '" + s + "'");
}

struct ModelEntry {
  std::string model_id;
  ArchitectureClass architecture_class = ArchitectureClass::convolutional;
  std::string family;
  std::string objective;
  std::string training_data;
  std::optional<double> imagenet_top1;
  std::optional<std::int64_t> parameter_count;
  fs::path features;                         // resolved against the manifest directory
  std::map<std::string, std::string> extra;  // any further string attributes

  /// String-valued attribute lookup used by contrast grouping and filters.
  std::optional<std::string> field(const std::string& name) const {
    if (name == "model_id") return model_id;
    if (name == "architecture_class") return to_string(architecture_class);
    if (name == "family") return family;
    if (name == "objective") return objective;
    if (name == "training_data") return training_data;
    auto it = extra.find(name);
    if (it != extra.end()) return it->second;
    return std::nullopt;
  }
};

struct ModelManifest {
  std::vector<ModelEntry> entries;
  std::vector<std::string> image_ids;  // empty when the manifest does not name images
  fs::path directory;

  std::size_t size() const { return entries.size(); }
  const ModelEntry& at(const std::string& id) const {
    for (const auto& e : entries)
      if (e.model_id == id) return e;
    throw Error(ErrorKind::consistency, "model '" + id + "' is not in the manifest");
  }
  bool contains(const std::string& id) const {
    for (const auto& e : entries)
      if (e.model_id == id) return true;
    return false;
  }
};

inline void check_schema_version(const json& j, const std::string& origin, bool required) {
  if (!j.contains("schema_version")) {
    require(!required, ErrorKind::version, origin + ": missing schema_version");
    return;
  }
  const auto& v = j.at("schema_version");
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  require(s == kSchemaVersion, ErrorKind::version,
          origin + ": schema_version '" + s + "' is not supported (expected '" + kSchemaVersion + "')");
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

inline ModelManifest parse_manifest(const json& doc, const fs::path& directory, bool check_files = true,
                                    const std::string& origin = "<manifest>") {
  ModelManifest m;
  m.directory = directory;
  require(doc.is_object() && doc.contains("models") && doc.at("models").is_array(), ErrorKind::format,
          origin + ": manifest needs a \"models\" array");
  check_schema_version(doc, origin, false);
  try {
    if (doc.contains("image_ids")) m.image_ids = doc.at("image_ids").get<std::vector<std::string>>();
    if (doc.contains("image_ids_file")) {
      std::string text = read_text(directory / doc.at("image_ids_file").get<std::string>());
      std::size_t start = 0;
      while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) m.image_ids.push_back(line);
        start = end + 1;
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, origin + ": " + e.what());
  }
  std::set<std::string> seen_images(m.image_ids.begin(), m.image_ids.end());
  require(seen_images.size() == m.image_ids.size(), ErrorKind::consistency, origin + ": duplicate image ids");

  static const std::set<std::string> reserved{"model_id",      "architecture_class", "family",   "objective",
                                              "training_data", "imagenet_top1",      "parameter_count", "features"};
  std::set<std::string> ids;
  for (const auto& e : doc.at("models")) {
    require(e.is_object(), ErrorKind::format, origin + ": manifest entries must be objects");
    ModelEntry entry;
    try {
      entry.model_id = e.at("model_id").get<std::string>();
      entry.architecture_class = parse_architecture(e.at("architecture_class").get<std::string>());
      entry.family = e.value("family", "");
      entry.objective = e.value("objective", "");
      entry.training_data = e.value("training_data", "");
      if (e.contains("imagenet_top1") && !e.at("imagenet_top1").is_null()) {
        double acc = e.at("imagenet_top1").get<double>();
        require(acc >= 0 && acc <= 1, ErrorKind::data, origin + ": imagenet_top1 of " + entry.model_id + " outside [0,1]");
        entry.imagenet_top1 = acc;
      }
      if (e.contains("parameter_count") && !e.at("parameter_count").is_null()) {
        auto pc = e.at("parameter_count").get<std::int64_t>();
        require(pc > 0, ErrorKind::data, origin + ": parameter_count of " + entry.model_id + " must be positive");
        entry.parameter_count = pc;
      }
      entry.features = directory / e.value("features", entry.model_id + ".npy");
      for (auto it = e.begin(); it != e.end(); ++it)
        if (!reserved.count(it.key()) && it.value().is_string()) entry.extra[it.key()] = it.value().get<std::string>();
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::format, origin + ": " + ex.what());
    }
    require(ids.insert(entry.model_id).second, ErrorKind::consistency,
            origin + ": duplicate model_id '" + entry.model_id + "'");
    if (check_files)
      require(fs::exists(entry.features), ErrorKind::consistency,
              origin + ": feature file for '" + entry.model_id + "' not found: " + entry.features.string());
    m.entries.push_back(std::move(entry));
  }
  return m;
}

inline ModelManifest load_manifest(const fs::path& path, bool check_files = true) {
  return parse_manifest(read_json(path), path.parent_path(), check_files, path.string());
}

// ---------------------------------------------------------------------------
// Feature matrices

struct FeatureLoadOptions {
  std::string model_id;
  std::vector<std::string> image_ids;  // when nonempty, N must match
  int float_width = 64;
};

inline FeatureMatrix load_feature_matrix(const fs::path& path, const FeatureLoadOptions& opts = {}) {
  npy::Array a = npy::read(path);
  require(a.shape.size() == 2, ErrorKind::format,
          path.string() + ": feature matrix must be 2-D, got " + std::to_string(a.shape.size()) + "-D");
  FeatureMatrix f;
  f.model_id = opts.model_id.empty() ? path.stem().string() : opts.model_id;
  f.source_width = a.width;
  const Index n = static_cast<Index>(a.shape[0]), d = static_cast<Index>(a.shape[1]);
  require(n >= 2 && d >= 1, ErrorKind::consistency, path.string() + ": feature matrix needs N >= 2 and d >= 1");
  if (!opts.image_ids.empty())
    require(static_cast<std::size_t>(n) == opts.image_ids.size(), ErrorKind::consistency,
            path.string() + ": " + std::to_string(n) + " rows but the manifest lists " +
                std::to_string(opts.image_ids.size()) + " images");
  f.values.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      double v = a.data[static_cast<std::size_t>(i * d + j)];
      require(std::isfinite(v), ErrorKind::data,
              path.string() + ": non-finite value at row " + std::to_string(i) + ", column " + std::to_string(j));
      f.values(i, j) = opts.float_width == 32 ? static_cast<double>(static_cast<float>(v)) : v;
    }
  }
  if (opts.image_ids.empty()) {
    f.image_ids.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) f.image_ids.push_back(std::to_string(i));
  } else {
    f.image_ids = opts.image_ids;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Category index

struct CategoryIndex {
  std::vector<std::string> categories;  // category ids in first-appearance order
  std::vector<int> labels;              // per image, index into categories
  std::vector<std::size_t> designated;  // per category, the image row carrying behavioral ratings

  std::size_t category_count() const { return categories.size(); }
  std::size_t image_count() const { return labels.size(); }

  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c(categories.size(), 0);
    for (int l : labels) ++c[static_cast<std::size_t>(l)];
    return c;
  }
  /// Exemplars per category when balanced, otherwise 0.
  std::size_t exemplars_per_category() const {
    auto c = counts();
    if (c.empty()) return 0;
    for (auto x : c)
      if (x != c.front()) return 0;
    return c.front();
  }
  bool balanced() const { return exemplars_per_category() > 0; }

  static CategoryIndex from_labels(const std::vector<int>& labels) {
    CategoryIndex ci;
    int max_label = -1;
    for (int l : labels) {
      require(l >= 0, ErrorKind::input, "category labels must be nonnegative");
      max_label = std::max(max_label, l);
    }
    for (int c = 0; c <= max_label; ++c) ci.categories.push_back(std::to_string(c));
    ci.labels = labels;
    ci.designated.assign(ci.categories.size(), labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& d = ci.designated[static_cast<std::size_t>(labels[i])];
      if (d == labels.size()) d = i;
    }
    for (auto d : ci.designated) require(d < labels.size(), ErrorKind::input, "category labels must be contiguous");
    return ci;
  }
};

/// CSV with columns image_id, category_id and an optional 0/1 designated column.
inline CategoryIndex load_category_index(const fs::path& path, const std::vector<std::string>& image_ids) {
  Table t = read_csv(path);
  const auto ci = t.column("image_id"), cc = t.column("category_id");
  const bool has_designated = t.has_column("designated");
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < image_ids.size(); ++i) row_of[image_ids[i]] = i;

  CategoryIndex idx;
  idx.labels.assign(image_ids.size(), -1);
  std::unordered_map<std::string, int> cat_of;
  std::vector<std::size_t> flagged;
  for (const auto& r : t.rows) {
    auto it = row_of.find(r[ci]);
    require(it != row_of.end(), ErrorKind::consistency, path.string() + ": unknown image '" + r[ci] + "'");
    require(idx.labels[it->second] < 0, ErrorKind::consistency, path.string() + ": image '" + r[ci] + "' listed twice");
    auto [cit, inserted] = cat_of.emplace(r[cc], static_cast<int>(idx.categories.size()));
    if (inserted) {
      idx.categories.push_back(r[cc]);
      flagged.push_back(image_ids.size());
    }
    idx.labels[it->second] = cit->second;
    if (has_designated && r[t.column("designated")] == "1") {
      auto& f = flagged[static_cast<std::size_t>(cit->second)];
      require(f == image_ids.size(), ErrorKind::consistency,
              path.string() + ": category '" + r[cc] + "' has more than one designated image");
      f = it->second;
    }
  }
  for (std::size_t i = 0; i < idx.labels.size(); ++i)
    require(idx.labels[i] >= 0, ErrorKind::consistency, path.string() + ": image '" + image_ids[i] + "' has no category");
  idx.designated = flagged;
  for (std::size_t i = 0; i < idx.labels.size(); ++i) {
    auto& d = idx.designated[static_cast<std::size_t>(idx.labels[i])];
    if (d == image_ids.size()) d = i;
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Persistence

inline fs::path sidecar_path(const fs::path& p) { return fs::path(p.string() + ".meta.json"); }

namespace detail {

inline void write_sidecar(const fs::path& p, json meta) {
  meta["schema_version"] = kSchemaVersion;
  write_text(sidecar_path(p), meta.dump(2) + "\n");
}

inline json read_sidecar(const fs::path& p, const std::string& kind) {
  const fs::path sc = sidecar_path(p);
  require(fs::exists(sc), ErrorKind::version, p.string() + ": metadata sidecar missing");
  json meta = read_json(sc);
  check_schema_version(meta, sc.string(), true);
  require(meta.value("kind", "") == kind, ErrorKind::format,
          sc.string() + ": expected kind '" + kind + "', found '" + meta.value("kind", "") + "'");
  return meta;
}

inline void prepare(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

}  // namespace detail

inline void persist_artifact(const SimilarityMatrix& s, const fs::path& path, int float_width = 64) {
  detail::prepare(path);
  npy::write(path, s.values, float_width);
  detail::write_sidecar(path, {{"kind", "similarity"},
                               {"model_id", s.model_id},
                               {"alpha", s.alpha},
                               {"sigma", s.sigma},
                               {"median_distance", s.median_distance},
                               {"float_width", float_width}});
}

inline SimilarityMatrix load_similarity(const fs::path& path) {
  json meta = detail::read_sidecar(path, "similarity");
  SimilarityMatrix s;
  s.values = npy::read_matrix(path);
  s.model_id = meta.at("model_id").get<std::string>();
  s.alpha = meta.at("alpha").get<double>();
  s.sigma = meta.at("sigma").get<double>();
  s.median_distance = meta.at("median_distance").get<double>();
  return s;
}

inline void persist_artifact(const Embedding& e, const fs::path& path, int float_width = 64) {
  detail::prepare(path);
  npy::write(path, e.W, float_width);
  detail::write_sidecar(path, {{"kind", "embedding"},
                               {"model_id", e.model_id},
                               {"rank", e.rank()},
                               {"seed", e.seed},
                               {"alpha", e.alpha},
                               {"objective", e.objective},
                               {"explained_variance", e.explained_variance},
                               {"iterations", e.iterations},
                               {"converged", e.converged},
                               {"trace", e.trace},
                               {"float_width", float_width}});
}

inline Embedding load_embedding(const fs::path& path) {
  json meta = detail::read_sidecar(path, "embedding");
  Embedding e;
  e.W = npy::read_matrix(path);
  e.model_id = meta.at("model_id").get<std::string>();
  require(meta.at("rank").get<Index>() == e.W.cols(), ErrorKind::consistency, path.string() + ": rank disagrees with matrix");
  e.seed = meta.at("seed").get<std::uint64_t>();
  e.alpha = meta.at("alpha").get<double>();
  e.objective = meta.at("objective").get<double>();
  e.explained_variance = meta.at("explained_variance").get<double>();
  e.iterations = meta.at("iterations").get<int>();
  e.converged = meta.at("converged").get<bool>();
  e.trace = meta.at("trace").get<std::vector<double>>();
  return e;
}

inline Table to_table(const UniversalityReport& r) {
  Table t;
  t.columns = {"model_id", "dim", "raw", "threshold", "calibrated"};
  for (std::size_t k = 0; k < r.rank(); ++k)
    t.add_row({r.model_id, std::to_string(k + 1), format_double(r.raw[k]), format_double(r.thresholds[k]),
               format_double(r.calibrated[k])});
  return t;
}

inline void persist_artifact(const UniversalityReport& r, const fs::path& path) {
  detail::prepare(path);
  write_csv(path, to_table(r));
  std::vector<int> zeros;
  for (std::size_t k = 0; k < r.zero_column.size(); ++k)
    if (r.zero_column[k]) zeros.push_back(static_cast<int>(k + 1));
  detail::write_sidecar(path, {{"kind", "universality_report"},
                               {"model_id", r.model_id},
                               {"model_mean", r.model_mean},
                               {"zero_columns", zeros}});
}

inline UniversalityReport load_universality_report(const fs::path& path) {
  json meta = detail::read_sidecar(path, "universality_report");
  Table t = read_csv(path);
  UniversalityReport r;
  r.model_id = meta.at("model_id").get<std::string>();
  r.model_mean = meta.at("model_mean").get<double>();
  const auto cr = t.column("raw"), ct = t.column("threshold"), cc = t.column("calibrated");
  for (const auto& row : t.rows) {
    r.raw.push_back(parse_double(row[cr]));
    r.thresholds.push_back(parse_double(row[ct]));
    r.calibrated.push_back(parse_double(row[cc]));
  }
  r.zero_column.assign(r.raw.size(), false);
  for (int k : meta.at("zero_columns").get<std::vector<int>>()) r.zero_column.at(static_cast<std::size_t>(k - 1)) = true;
  return r;
}

inline void persist_artifact(const Table& t, const fs::path& path, const std::string& table_name = "table") {
  detail::prepare(path);
  write_csv(path, t);
  detail::write_sidecar(path, {{"kind", "table"}, {"name", table_name}, {"columns", t.columns}});
}

inline Table load_table(const fs::path& path) {
  json meta = detail::read_sidecar(path, "table");
  Table t = read_csv(path);
  require(meta.at("columns").get<std::vector<std::string>>() == t.columns, ErrorKind::consistency,
          path.string() + ": columns disagree with sidecar");
  return t;
}

}  // namespace unidim
