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

// Batch stages over a workspace directory. Each stage records, per unit of
// work, a marker holding the hash of its inputs and of the files it wrote; a
// unit reruns only when that hash changes, an output is missing or altered,
// or a rerun is forced.

#pragma once

#include "unidim/alignment.hpp"
#include "unidim/content.hpp"
#include "unidim/csv.hpp"
#include "unidim/error.hpp"
#include "unidim/kernel.hpp"
#include "unidim/parallel.hpp"
#include "unidim/snmf.hpp"
#include "unidim/stats.hpp"
#include "unidim/tensor_io.hpp"
#include "unidim/universality.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace unidim::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kStageVersion = "1";

// ---------------------------------------------------------------------------
// Configuration

struct Inputs {
  fs::path manifest;
  fs::path categories;
  fs::path neural_responses;
  fs::path neural_channels;
  fs::path triplets;
  fs::path contrasts;
  fs::path labels;
};

struct UniversalitySettings {
  CalibrationMode calibration = CalibrationMode::mean;
  double resample_fraction = 0.5;
  int resample_iterations = 200;
};

struct PipelineConfig {
  RunConfig run;
  Inputs inputs;
  UniversalitySettings universality;
  double reliability_threshold = 0.3;
  bool decile_per_dimension_mean = false;
  int anova_bootstrap = 2000;
  int sd_bootstrap_iters = 10000;

  json to_json() const {
    json run_json = run;
    auto p = [](const fs::path& x) { return x.empty() ? json(nullptr) : json(x.generic_string()); };
    return json{{"schema_version", kSchemaVersion},
                {"run", run_json},
                {"inputs",
                 {{"manifest", p(inputs.manifest)},
                  {"categories", p(inputs.categories)},
                  {"neural_responses", p(inputs.neural_responses)},
                  {"neural_channels", p(inputs.neural_channels)},
                  {"triplets", p(inputs.triplets)},
                  {"contrasts", p(inputs.contrasts)},
                  {"labels", p(inputs.labels)}}},
                {"universality",
                 {{"calibration", universality.calibration == CalibrationMode::mean ? "mean" : "per_pair"},
                  {"resample_fraction", universality.resample_fraction},
                  {"resample_iterations", universality.resample_iterations}}},
                {"alignment", {{"reliability_threshold", reliability_threshold}}},
                {"content", {{"decile_per_dimension_mean", decile_per_dimension_mean}}},
                {"contrast", {{"anova_bootstrap", anova_bootstrap}, {"sd_bootstrap_iters", sd_bootstrap_iters}}}};
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  require(j.is_object(), ErrorKind::config, where + " must be a JSON object");
  std::set<std::string> k(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    require(k.count(it.key()) > 0, ErrorKind::config, "unknown config key '" + where + "." + it.key() + "'");
}

}  // namespace detail

/// Relative input paths resolve against `base` (the config file's directory).
inline PipelineConfig parse_config(const json& j, const fs::path& base) {
  PipelineConfig c;
  detail::check_keys(j, {"schema_version", "run", "inputs", "universality", "alignment", "content", "contrast"}, "config");
  check_schema_version(j, "config", false);
  try {
    if (j.contains("run")) c.run = j.at("run").get<RunConfig>();
    auto path = [&](const json& obj, const char* key) -> fs::path {
      if (!obj.contains(key) || obj.at(key).is_null()) return {};
      fs::path p = obj.at(key).get<std::string>();
      return p.is_absolute() ? p : (base / p).lexically_normal();
    };
    if (j.contains("inputs")) {
      const auto& in = j.at("inputs");
      detail::check_keys(in, {"manifest", "categories", "neural_responses", "neural_channels", "triplets", "contrasts", "labels"},
                         "inputs");
      c.inputs = {path(in, "manifest"),        path(in, "categories"), path(in, "neural_responses"),
                  path(in, "neural_channels"), path(in, "triplets"),   path(in, "contrasts"),
                  path(in, "labels")};
    }
    if (j.contains("universality")) {
      const auto& u = j.at("universality");
      detail::check_keys(u, {"calibration", "resample_fraction", "resample_iterations"}, "universality");
      if (u.contains("calibration")) {
        const auto mode = u.at("calibration").get<std::string>();
        require(mode == "mean" || mode == "per_pair", ErrorKind::config, "universality.calibration must be mean or per_pair");
        c.universality.calibration = mode == "mean" ? CalibrationMode::mean : CalibrationMode::per_pair;
      }
      c.universality.resample_fraction = u.value("resample_fraction", c.universality.resample_fraction);
      c.universality.resample_iterations = u.value("resample_iterations", c.universality.resample_iterations);
    }
    if (j.contains("alignment")) {
      detail::check_keys(j.at("alignment"), {"reliability_threshold"}, "alignment");
      c.reliability_threshold = j.at("alignment").value("reliability_threshold", c.reliability_threshold);
    }
    if (j.contains("content")) {
      detail::check_keys(j.at("content"), {"decile_per_dimension_mean"}, "content");
      c.decile_per_dimension_mean = j.at("content").value("decile_per_dimension_mean", false);
    }
    if (j.contains("contrast")) {
      detail::check_keys(j.at("contrast"), {"anova_bootstrap", "sd_bootstrap_iters"}, "contrast");
      c.anova_bootstrap = j.at("contrast").value("anova_bootstrap", c.anova_bootstrap);
      c.sd_bootstrap_iters = j.at("contrast").value("sd_bootstrap_iters", c.sd_bootstrap_iters);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }
  require(c.universality.resample_fraction > 0 && c.universality.resample_fraction <= 1, ErrorKind::config,
          "universality.resample_fraction must lie in (0,1]");
  require(c.universality.resample_iterations >= 1, ErrorKind::config, "universality.resample_iterations must be positive");
  require(c.anova_bootstrap >= 1 && c.sd_bootstrap_iters >= 1, ErrorKind::config, "bootstrap counts must be positive");
  c.run.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  require(fs::exists(path), ErrorKind::config, "config file " + path.string() + " does not exist");
  return parse_config(read_json(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Hashing and the workspace

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_hash(const fs::path& p) {
  const std::string bytes = read_text(p);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

/// Order-sensitive digest of a list of strings.
class Digest {
 public:
  Digest& add(const std::string& s) {
    const std::uint64_t len = s.size();
    h_ = fnv1a64(&len, sizeof len, h_);
    h_ = fnv1a64(s.data(), s.size(), h_);
    return *this;
  }
  Digest& add(const char* s) { return add(std::string(s)); }
  Digest& add(const json& j) { return add(j.dump()); }
  std::string hex() const { return hex64(h_); }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }
  fs::path path(const fs::path& rel) const { return root_ / rel; }

  fs::path marker_path(const std::string& stage, const std::string& key) const {
    return root_ / "stages" / stage / (key + ".json");
  }

  bool has_marker(const std::string& stage, const std::string& key) const { return fs::exists(marker_path(stage, key)); }

  /// True when the marker's inputs hash matches and every recorded output is intact.
  bool up_to_date(const std::string& stage, const std::string& key, const std::string& inputs) const {
    const fs::path m = marker_path(stage, key);
    if (!fs::exists(m)) return false;
    json j;
    try {
      j = read_json(m);
    } catch (const Error&) {
      return false;
    }
    if (j.value("inputs", "") != inputs) return false;
    return outputs_intact(j);
  }

  /// Marker contents, or a missing-stage error naming the stage.
  json marker(const std::string& stage, const std::string& key) const {
    const fs::path m = marker_path(stage, key);
    require(fs::exists(m), ErrorKind::missing_stage,
            "stage '" + stage + "' has not been run" + (key == "all" ? "" : " for model '" + key + "'") +
                "; run `unidim " + stage + "` first");
    json j = read_json(m);
    require(outputs_intact(j), ErrorKind::missing_stage,
            "outputs of stage '" + stage + "'" + (key == "all" ? "" : " for model '" + key + "'") +
                " are missing or modified; rerun `unidim " + stage + "`");
    return j;
  }

  /// Digest of a completed upstream unit's outputs.
  std::string upstream(const std::string& stage, const std::string& key) const {
    return marker(stage, key).at("outputs").dump();
  }

  void mark(const std::string& stage, const std::string& key, const std::string& inputs,
            const std::vector<fs::path>& outputs) const {
    json out = json::object();
    for (const auto& p : outputs) out[fs::relative(p, root_).generic_string()] = file_hash(p);
    write_text(marker_path(stage, key), json{{"inputs", inputs}, {"outputs", out}}.dump(2) + "\n");
  }

  void log(json event) {
    std::lock_guard lock(log_mutex_);
    event["seq"] = seq_++;
    std::ofstream f(root_ / "log.jsonl", std::ios::app | std::ios::binary);
    f << event.dump() << "\n";
  }

 private:
  bool outputs_intact(const json& marker) const {
    if (!marker.contains("outputs")) return false;
    for (auto it = marker.at("outputs").begin(); it != marker.at("outputs").end(); ++it) {
      const fs::path p = root_ / it.key();
      if (!fs::exists(p) || file_hash(p) != it.value().get<std::string>()) return false;
    }
    return true;
  }

  fs::path root_;
  std::mutex log_mutex_;
  std::uint64_t seq_ = 0;
};

// ---------------------------------------------------------------------------
// Stage context

struct StageCounts {
  std::size_t ran = 0;
  std::size_t skipped = 0;
};

struct Context {
  PipelineConfig config;
  Workspace* workspace = nullptr;
  int jobs = 1;
  bool force = false;
  std::ostream* out = &std::cout;

  const ModelManifest& manifest() {
    if (!manifest_) {
      require(!config.inputs.manifest.empty(), ErrorKind::config, "config does not name inputs.manifest");
      manifest_ = load_manifest(config.inputs.manifest);
      require(manifest_->size() >= 1, ErrorKind::input, "manifest lists no models");
    }
    return *manifest_;
  }

  std::string model_dir_key(const std::string& model_id) const { return model_id; }

 private:
  std::optional<ModelManifest> manifest_;
};

namespace detail {

inline std::string stage_digest(const std::string& stage, std::initializer_list<json> parts) {
  Digest d;
  d.add(stage).add(kStageVersion);
  for (const auto& p : parts) d.add(p);
  return d.hex();
}

template <class Fn>
StageCounts for_each_model(Context& ctx, const std::string& stage, Fn&& body) {
  const auto& entries = ctx.manifest().entries;
  std::vector<int> ran(entries.size(), 0);
  parallel_for(entries.size(), ctx.jobs, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    ran[i] = body(entries[i]) ? 1 : 0;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ctx.workspace->log({{"stage", stage}, {"model", entries[i].model_id}, {"action", ran[i] ? "run" : "skip"}, {"seconds", secs}});
  });
  StageCounts c;
  for (int r : ran) (r ? c.ran : c.skipped) += 1;
  return c;
}

inline void summary(Context& ctx, const std::string& stage, const StageCounts& c) {
  *ctx.out << stage << ": " << c.ran << " run, " << c.skipped << " up to date\n";
}

inline std::string alpha_file(std::size_t i) { return "alpha_" + std::to_string(i) + ".npy"; }
inline std::string seed_file(std::size_t b) { return "seed_" + std::to_string(b) + ".npy"; }

inline FeatureMatrix load_features(Context& ctx, const ModelEntry& e) {
  FeatureLoadOptions o;
  o.model_id = e.model_id;
  o.image_ids = ctx.manifest().image_ids;
  o.float_width = ctx.config.run.float_width;
  return load_feature_matrix(e.features, o);
}

inline std::vector<std::uint64_t> seed_list(const RunConfig& run) {
  std::vector<std::uint64_t> s;
  for (int b = 0; b < run.seeds; ++b) s.push_back(derive_seed(run.rng_seed, {0x5eedULL, static_cast<std::uint64_t>(b)}));
  return s;
}

inline NullOptions null_options(const PipelineConfig& c) {
  return {c.run.permutations, c.run.null_percentile, c.run.rng_seed, c.universality.calibration};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline StageCounts run_kernel(Context& ctx) {
  const auto& run = ctx.config.run;
  auto counts = detail::for_each_model(ctx, "kernel", [&](const ModelEntry& e) {
    const std::string inputs = detail::stage_digest(
        "kernel", {file_hash(e.features), run.alpha_grid, run.zscore, run.float_width, ctx.manifest().image_ids});
    if (!ctx.force && ctx.workspace->up_to_date("kernel", e.model_id, inputs)) return false;
    const FeatureMatrix f = detail::load_features(ctx, e);
    KernelOptions ko;
    ko.zscore = run.zscore;
    const auto grid = kernel_grid(f, run.alpha_grid, ko);
    std::vector<fs::path> outputs;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const fs::path p = ctx.workspace->path(fs::path("kernel") / e.model_id / detail::alpha_file(i));
      persist_artifact(grid[i], p, run.float_width);
      outputs.push_back(p);
      outputs.push_back(sidecar_path(p));
    }
    ctx.workspace->mark("kernel", e.model_id, inputs, outputs);
    return true;
  });
  detail::summary(ctx, "kernel", counts);
  return counts;
}

inline StageCounts run_factorize(Context& ctx) {
  const auto& run = ctx.config.run;
  require(run.seeds >= 2, ErrorKind::config, "factorize needs at least two seeds to measure stability");
  const auto seeds = detail::seed_list(run);
  auto counts = detail::for_each_model(ctx, "factorize", [&](const ModelEntry& e) {
    const std::string inputs = detail::stage_digest(
        "factorize", {ctx.workspace->upstream("kernel", e.model_id), run.rank, run.seeds, run.rng_seed, run.tol,
                      run.max_iters, run.float_width});
    if (!ctx.force && ctx.workspace->up_to_date("factorize", e.model_id, inputs)) return false;
    SnmfOptions so;
    so.tol = run.tol;
    so.max_iters = run.max_iters;
    std::vector<AlphaSummary> summaries;
    std::vector<std::vector<Embedding>> fits;
    for (std::size_t i = 0; i < run.alpha_grid.size(); ++i) {
      const SimilarityMatrix S =
          load_similarity(ctx.workspace->path(fs::path("kernel") / e.model_id / detail::alpha_file(i)));
      require(run.rank < S.values.rows(), ErrorKind::config,
              "rank " + std::to_string(run.rank) + " must be below the image count " + std::to_string(S.values.rows()));
      fits.push_back(fit_seeds(S, run.rank, seeds, so));
      summaries.push_back(summarize_alpha(fits.back()));
    }
    const FitSelection sel = select_bandwidth(summaries);
    const fs::path dir = ctx.workspace->path(fs::path("factorize") / e.model_id);
    std::vector<fs::path> outputs;
    auto keep = [&](const fs::path& p) {
      outputs.push_back(p);
      outputs.push_back(sidecar_path(p));
    };
    const auto& chosen = fits[sel.chosen_index];
    persist_artifact(chosen[sel.central_index], dir / "embedding.npy", run.float_width);
    keep(dir / "embedding.npy");
    for (std::size_t b = 0; b < chosen.size(); ++b) {
      persist_artifact(chosen[b], dir / detail::seed_file(b), run.float_width);
      keep(dir / detail::seed_file(b));
    }
    Table t;
    t.columns = {"model_id", "alpha", "stability", "explained_variance", "harmonic_mean", "chosen", "central_seed_index"};
    for (std::size_t i = 0; i < sel.per_alpha.size(); ++i) {
      const auto& r = sel.per_alpha[i];
      const bool c = i == sel.chosen_index;
      t.add_row({e.model_id, format_double(r.alpha), format_double(r.stability), format_double(r.explained_variance),
                 format_double(r.harmonic_mean), c ? "1" : "0", c ? std::to_string(sel.central_index) : ""});
    }
    persist_artifact(t, dir / "selection.csv", "fit_selection");
    keep(dir / "selection.csv");
    ctx.workspace->mark("factorize", e.model_id, inputs, outputs);
    return true;
  });
  detail::summary(ctx, "factorize", counts);
  return counts;
}

namespace detail {

struct FactorizedModel {
  Embedding central;
  std::vector<Embedding> seeds;
  std::size_t central_index = 0;
};

inline FactorizedModel load_factorized(Context& ctx, const std::string& model_id) {
  ctx.workspace->marker("factorize", model_id);
  const fs::path dir = ctx.workspace->path(fs::path("factorize") / model_id);
  FactorizedModel f;
  f.central = load_embedding(dir / "embedding.npy");
  for (int b = 0; b < ctx.config.run.seeds; ++b) {
    f.seeds.push_back(load_embedding(dir / seed_file(static_cast<std::size_t>(b))));
    if (f.seeds.back().seed == f.central.seed) f.central_index = static_cast<std::size_t>(b);
  }
  return f;
}

inline std::string factorize_digest(Context& ctx) {
  Digest d;
  for (const auto& e : ctx.manifest().entries) d.add(e.model_id).add(ctx.workspace->upstream("factorize", e.model_id));
  return d.hex();
}

}  // namespace detail

inline StageCounts run_universality(Context& ctx) {
  const auto& cfg = ctx.config;
  const auto& entries = ctx.manifest().entries;
  require(entries.size() >= 2, ErrorKind::input, "universality needs at least two models");
  Digest feat;
  for (const auto& e : entries) feat.add(file_hash(e.features));
  const std::string inputs = detail::stage_digest(
      "universality", {detail::factorize_digest(ctx), feat.hex(), cfg.run.permutations, cfg.run.null_percentile,
                       cfg.run.rng_seed, cfg.run.float_width, cfg.universality.calibration == CalibrationMode::mean,
                       cfg.universality.resample_fraction, cfg.universality.resample_iterations});
  StageCounts counts;
  if (!ctx.force && ctx.workspace->up_to_date("universality", "all", inputs)) {
    counts.skipped = 1;
    ctx.workspace->log({{"stage", "universality"}, {"action", "skip"}});
    detail::summary(ctx, "universality", counts);
    return counts;
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<detail::FactorizedModel> fits(entries.size());
  for (std::size_t m = 0; m < entries.size(); ++m) fits[m] = detail::load_factorized(ctx, entries[m].model_id);
  std::vector<Embedding> centrals;
  for (const auto& f : fits) centrals.push_back(f.central);
  const NullOptions nopts = detail::null_options(cfg);
  const UniversalityEnsemble ens(centrals, nopts, ctx.jobs);
  const auto reports = ens.reports();

  std::vector<StabilityCeiling> ceilings(entries.size());
  parallel_for(entries.size(), ctx.jobs, [&](std::size_t m) {
    ceilings[m] = stability_ceiling(fits[m].seeds, fits[m].central_index, nopts);
  });

  // Mean linear CKA of each model's features with every other model's.
  std::vector<Matrix> features(entries.size());
  for (std::size_t m = 0; m < entries.size(); ++m) features[m] = detail::load_features(ctx, entries[m]).values;
  const std::size_t M = entries.size();
  std::vector<double> cka(M * M, 1.0);
  parallel_for(M * M, ctx.jobs, [&](std::size_t idx) {
    const std::size_t a = idx / M, b = idx % M;
    if (a < b) cka[idx] = cka_linear(features[a], features[b]);
  });
  std::vector<double> cka_mean(M, 0.0), u(M);
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < M; ++b)
      if (a != b) cka_mean[a] += cka[std::min(a, b) * M + std::max(a, b)];
    cka_mean[a] /= static_cast<double>(M - 1);
    u[a] = reports[a].model_mean;
  }
  const auto u_rank = stats::average_ranks(u);
  const auto cka_rank = stats::average_ranks(cka_mean);

  std::vector<fs::path> outputs;
  const fs::path dir = ctx.workspace->path("universality");
  Table dims;
  dims.columns = {"model_id", "dim", "raw", "threshold", "calibrated", "ceiling", "ceiling_raw", "zero_column"};
  Table models;
  models.columns = {"model_id", "U_m", "U_rank", "cka_mean", "cka_mean_rank"};
  for (std::size_t m = 0; m < M; ++m) {
    const auto& r = reports[m];
    const fs::path p = dir / "models" / (r.model_id + ".csv");
    persist_artifact(r, p);
    outputs.push_back(p);
    outputs.push_back(sidecar_path(p));
    for (std::size_t k = 0; k < r.rank(); ++k)
      dims.add_row({r.model_id, std::to_string(k + 1), format_double(r.raw[k]), format_double(r.thresholds[k]),
                    format_double(r.calibrated[k]), format_double(ceilings[m].calibrated[k]),
                    format_double(ceilings[m].raw[k]), r.zero_column[k] ? "1" : "0"});
    models.add_row({r.model_id, format_double(r.model_mean), format_double(u_rank[m]), format_double(cka_mean[m]),
                    format_double(cka_rank[m])});
  }
  persist_artifact(dims, dir / "dimensions.csv", "universality_dimensions");
  persist_artifact(models, dir / "models.csv", "universality_models");

  Table robust;
  robust.columns = {"analysis", "iterations", "fraction", "rho", "rho_low", "rho_high", "p", "n", "note"};
  if (M >= 3) {
    auto rc = stats::spearman(u, cka_mean);
    robust.add_row({"cka_vs_universality_rank", "", "", format_double(rc.coefficient), "", "", format_double(rc.p),
                    std::to_string(rc.n), "spearman over models"});
  }
  std::vector<std::string> families;
  for (const auto& e : entries) families.push_back(e.family);
  const auto k = static_cast<long long>(std::llround(cfg.universality.resample_fraction * static_cast<double>(M)));
  if (M >= 3 && k >= 3) {
    ResampleOptions ro;
    ro.fraction = cfg.universality.resample_fraction;
    ro.iterations = cfg.universality.resample_iterations;
    ro.seed = cfg.run.rng_seed;
    const auto bs = resample_universality(ens, families, ro);
    robust.add_row({"bootstrap_subsample", std::to_string(ro.iterations), format_double(ro.fraction),
                    format_double(bs.median), format_double(bs.low), format_double(bs.high), "", std::to_string(M),
                    "median and 2.5/97.5 percentiles of spearman rho"});
  } else {
    robust.add_row({"bootstrap_subsample", "", format_double(cfg.universality.resample_fraction), "", "", "", "",
                    std::to_string(M), "skipped: subsample holds fewer than three models"});
  }
  const bool families_known = std::none_of(families.begin(), families.end(), [](auto& f) { return f.empty(); });
  const std::set<std::string> distinct(families.begin(), families.end());
  std::string lfo_note = "skipped: needs family labels and at least two families";
  if (M >= 3 && families_known && distinct.size() >= 2) {
    ResampleOptions ro;
    ro.mode = ResampleMode::leave_family_out;
    try {
      const auto lfo = resample_universality(ens, families, ro);
      robust.add_row({"leave_family_out", "1", "", format_double(lfo.median), "", "", "", std::to_string(M),
                      "partners restricted to other families"});
      lfo_note.clear();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::input) throw;
      lfo_note = std::string("skipped: ") + e.what();
    }
  }
  if (!lfo_note.empty())
    robust.add_row({"leave_family_out", "", "", "", "", "", "", std::to_string(M), lfo_note});
  persist_artifact(robust, dir / "robustness.csv", "universality_robustness");
  for (const char* f : {"dimensions.csv", "models.csv", "robustness.csv"}) {
    outputs.push_back(dir / f);
    outputs.push_back(sidecar_path(dir / f));
  }
  ctx.workspace->mark("universality", "all", inputs, outputs);
  counts.ran = 1;
  ctx.workspace->log({{"stage", "universality"},
                      {"action", "run"},
                      {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}});
  detail::summary(ctx, "universality", counts);
  return counts;
}

namespace detail {

inline std::vector<UniversalityReport> load_reports(Context& ctx) {
  ctx.workspace->marker("universality", "all");
  std::vector<UniversalityReport> out;
  for (const auto& e : ctx.manifest().entries)
    out.push_back(load_universality_report(ctx.workspace->path(fs::path("universality") / "models" / (e.model_id + ".csv"))));
  return out;
}

inline std::size_t alpha_index(const PipelineConfig& cfg, double alpha) {
  for (std::size_t i = 0; i < cfg.run.alpha_grid.size(); ++i)
    if (cfg.run.alpha_grid[i] == alpha) return i;
  throw Error(ErrorKind::consistency, "embedding bandwidth is not on the configured grid; rerun factorize");
}

inline CategoryIndex load_categories(Context& ctx) {
  require(!ctx.config.inputs.categories.empty(), ErrorKind::config, "config does not name inputs.categories");
  const auto& ids = ctx.manifest().image_ids;
  require(!ids.empty(), ErrorKind::input, "the manifest must list image_ids to map categories");
  return load_category_index(ctx.config.inputs.categories, ids);
}

}  // namespace detail

inline StageCounts run_content(Context& ctx) {
  const auto& cfg = ctx.config;
  const auto& entries = ctx.manifest().entries;
  Digest kern;
  for (const auto& e : entries) kern.add(ctx.workspace->upstream("kernel", e.model_id));
  require(!cfg.inputs.categories.empty(), ErrorKind::config, "config does not name inputs.categories");
  const std::string inputs = detail::stage_digest(
      "content", {detail::factorize_digest(ctx), ctx.workspace->upstream("universality", "all"), kern.hex(),
                  file_hash(cfg.inputs.categories), cfg.inputs.labels.empty() ? "" : file_hash(cfg.inputs.labels),
                  cfg.decile_per_dimension_mean});
  StageCounts counts;
  if (!ctx.force && ctx.workspace->up_to_date("content", "all", inputs)) {
    counts.skipped = 1;
    ctx.workspace->log({{"stage", "content"}, {"action", "skip"}});
    detail::summary(ctx, "content", counts);
    return counts;
  }
  const CategoryIndex cats = detail::load_categories(ctx);
  const auto reports = detail::load_reports(ctx);
  std::vector<std::vector<DimensionContent>> per_model(entries.size());
  parallel_for(entries.size(), ctx.jobs, [&](std::size_t m) {
    const auto f = detail::load_factorized(ctx, entries[m].model_id);
    const auto S = load_similarity(ctx.workspace->path(fs::path("kernel") / entries[m].model_id /
                                                       detail::alpha_file(detail::alpha_index(cfg, f.central.alpha))));
    per_model[m] = analyze_content(f.central, cats, &S.values, &reports[m]);
  });
  std::vector<DimensionContent> all;
  for (const auto& v : per_model) all.insert(all.end(), v.begin(), v.end());

  const fs::path dir = ctx.workspace->path("content");
  std::vector<fs::path> outputs;
  auto save = [&](const Table& t, const char* name, const char* kind) {
    persist_artifact(t, dir / name, kind);
    outputs.push_back(dir / name);
    outputs.push_back(sidecar_path(dir / name));
  };
  save(content_table(all), "dimensions.csv", "content_dimensions");

  std::size_t usable = 0;
  for (const auto& d : all) usable += d.degenerate ? 0 : 1;
  Table deciles;
  if (usable >= 10) {
    const auto rows = variance_fraction_by_decile(all, cfg.decile_per_dimension_mean);
    deciles = decile_table(rows, cfg.decile_per_dimension_mean);
  } else {
    deciles = decile_table(std::vector<DecileRow>{}, cfg.decile_per_dimension_mean);
  }
  save(deciles, "deciles.csv", "content_deciles");

  Table corr;
  corr.columns = {"quantity", "rho", "p", "dimensions_used", "degenerate_excluded"};
  if (usable >= 3) {
    const auto c = content_universality_correlations(all);
    const auto n = std::to_string(c.dimensions_used), x = std::to_string(c.degenerate_excluded);
    corr.add_row({"eta2", format_double(c.rho_eta2), format_double(c.p_eta2), n, x});
    corr.add_row({"delta_r2_pooled", format_double(c.rho_delta_r2), format_double(c.p_delta_r2), n, x});
    corr.add_row({"delta_r2_within_model_median", format_double(c.median_within_model_rho_delta_r2), "", n, x});
  }
  save(corr, "correlations.csv", "content_correlations");

  if (!cfg.inputs.labels.empty()) {
    save(label_crosstab(all, load_dimension_labels(cfg.inputs.labels)), "labels_crosstab.csv", "content_labels");
  }
  ctx.workspace->mark("content", "all", inputs, outputs);
  counts.ran = 1;
  ctx.workspace->log({{"stage", "content"}, {"action", "run"}});
  detail::summary(ctx, "content", counts);
  return counts;
}

inline StageCounts run_align(Context& ctx) {
  const auto& cfg = ctx.config;
  const auto& entries = ctx.manifest().entries;
  const bool neural = !cfg.inputs.neural_responses.empty();
  const bool behavior = !cfg.inputs.triplets.empty();
  require(neural || behavior, ErrorKind::config, "align needs inputs.neural_responses or inputs.triplets");
  require(!neural || !cfg.inputs.neural_channels.empty(), ErrorKind::config,
          "inputs.neural_responses needs inputs.neural_channels");
  const std::string inputs = detail::stage_digest(
      "align", {detail::factorize_digest(ctx), ctx.workspace->upstream("universality", "all"),
                neural ? file_hash(cfg.inputs.neural_responses) + file_hash(cfg.inputs.neural_channels) : "",
                behavior ? file_hash(cfg.inputs.triplets) + file_hash(cfg.inputs.categories) : "",
                cfg.run.cv_folds, cfg.run.ridge_grid, cfg.run.rng_seed, cfg.reliability_threshold});
  StageCounts counts;
  if (!ctx.force && ctx.workspace->up_to_date("align", "all", inputs)) {
    counts.skipped = 1;
    ctx.workspace->log({{"stage", "align"}, {"action", "skip"}});
    detail::summary(ctx, "align", counts);
    return counts;
  }
  const auto reports = detail::load_reports(ctx);
  const Index n_images = ctx.manifest().image_ids.empty() ? -1 : static_cast<Index>(ctx.manifest().image_ids.size());
  std::optional<NeuralDataset> data;
  if (neural) data = load_neural_dataset(cfg.inputs.neural_responses, cfg.inputs.neural_channels, n_images);
  std::optional<CategoryIndex> cats;
  std::vector<Triplet> triplets;
  if (behavior) {
    cats = detail::load_categories(ctx);
    triplets = load_triplets(cfg.inputs.triplets, cats->category_count());
  }
  EncodingOptions eo;
  eo.ridge = {cfg.run.cv_folds, cfg.run.ridge_grid, cfg.run.rng_seed};
  eo.reliability_threshold = cfg.reliability_threshold;

  struct Row {
    double enc = stats::kNaN, enc_u = stats::kNaN, enc_s = stats::kNaN;
    TripletResult tri, tri_u, tri_s;
    Table neurons;
  };
  std::vector<Row> rows(entries.size());
  parallel_for(entries.size(), ctx.jobs, [&](std::size_t m) {
    const auto f = detail::load_factorized(ctx, entries[m].model_id);
    const Matrix& W = f.central.W;
    Row& row = rows[m];
    if (data) {
      auto full = encoding_score(W, *data, eo);
      row.enc = full.score;
      row.neurons = full.neurons;
      auto h = half_masked_evaluation(W, reports[m], [&](const Matrix& Wm) { return encoding_score(Wm, *data, eo).score; });
      row.enc_u = h.universal_half_score;
      row.enc_s = h.specific_half_score;
    }
    if (cats) {
      row.tri = triplet_accuracy(category_embedding(W, *cats), triplets);
      const HalfMask mask = make_half_mask(reports[m].calibrated);
      row.tri_u = triplet_accuracy(category_embedding(mask_columns(W, mask.universal_half), *cats), triplets);
      row.tri_s = triplet_accuracy(category_embedding(mask_columns(W, mask.specific_half), *cats), triplets);
    }
  });

  const fs::path dir = ctx.workspace->path("align");
  std::vector<fs::path> outputs;
  auto save = [&](const Table& t, const char* name, const char* kind) {
    persist_artifact(t, dir / name, kind);
    outputs.push_back(dir / name);
    outputs.push_back(sidecar_path(dir / name));
  };
  Table per_model;
  per_model.columns = {"model_id",          "U_m",          "encoding",         "encoding_universal_half",
                       "encoding_specific_half", "triplet_accuracy", "triplet_universal_half", "triplet_specific_half",
                       "triplets_evaluated", "triplets_skipped", "triplet_ties"};
  Table neurons;
  neurons.columns = {"model_id", "channel_id", "subject", "reliability", "r", "noise_ceiling"};
  for (std::size_t m = 0; m < entries.size(); ++m) {
    const auto& r = rows[m];
    per_model.add_row({entries[m].model_id, format_double(reports[m].model_mean), format_double(r.enc),
                       format_double(r.enc_u), format_double(r.enc_s), format_double(r.tri.accuracy),
                       format_double(r.tri_u.accuracy), format_double(r.tri_s.accuracy), std::to_string(r.tri.evaluated),
                       std::to_string(r.tri.skipped), std::to_string(r.tri.ties)});
    for (const auto& nr : r.neurons.rows) {
      std::vector<std::string> out{entries[m].model_id};
      out.insert(out.end(), nr.begin(), nr.end());
      neurons.add_row(out);
    }
  }
  save(per_model, "models.csv", "alignment_models");
  if (data) save(neurons, "neurons.csv", "alignment_neurons");

  Table tests;
  tests.columns = {"analysis", "statistic", "df", "p", "n", "note"};
  auto column = [&](auto getter) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(getter(r));
    return v;
  };
  std::vector<double> u;
  for (const auto& r : reports) u.push_back(r.model_mean);
  auto add_tests = [&](const std::string& name, const std::vector<double>& full, const std::vector<double>& uh,
                       const std::vector<double>& sh) {
    if (entries.size() >= 3) {
      try {
        auto c = alignment_universality_correlation(full, u);
        tests.add_row({name + "_vs_U_m_pearson", format_double(c.coefficient), std::to_string(c.n - 2),
                       format_double(c.p), std::to_string(c.n), "two-sided"});
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::undefined) throw;
        tests.add_row({name + "_vs_U_m_pearson", "", "", "", std::to_string(entries.size()), e.what()});
      }
    }
    if (entries.size() >= 2) {
      try {
        auto t = stats::paired_t(uh, sh);
        tests.add_row({name + "_universal_vs_specific_paired_t", format_double(t.t), format_double(t.df),
                       format_double(t.p), std::to_string(uh.size()), "paired over models, two-sided"});
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::undefined && e.kind() != ErrorKind::input) throw;
        tests.add_row({name + "_universal_vs_specific_paired_t", "", "", "", std::to_string(uh.size()), e.what()});
      }
      tests.add_row({name + "_universal_vs_specific_sign_test", "", "", format_double(stats::sign_test_greater(uh, sh)),
                     std::to_string(uh.size()), "one-sided, universal half greater"});
    }
  };
  if (data)
    add_tests("encoding", column([](const Row& r) { return r.enc; }), column([](const Row& r) { return r.enc_u; }),
              column([](const Row& r) { return r.enc_s; }));
  if (cats)
    add_tests("triplet", column([](const Row& r) { return r.tri.accuracy; }),
              column([](const Row& r) { return r.tri_u.accuracy; }), column([](const Row& r) { return r.tri_s.accuracy; }));
  save(tests, "tests.csv", "alignment_tests");
  ctx.workspace->mark("align", "all", inputs, outputs);
  counts.ran = 1;
  ctx.workspace->log({{"stage", "align"}, {"action", "run"}});
  detail::summary(ctx, "align", counts);
  return counts;
}

inline Table contrast_table(std::span<const stats::ContrastResult> results) {
  Table t;
  t.columns = {"contrast", "test", "statistic", "df1", "df2", "p_raw", "p_corrected", "effect_size", "effect_ci_low",
               "effect_ci_high", "ci_method", "groups"};
  for (const auto& r : results) {
    std::string groups;
    for (const auto& g : r.groups) {
      if (!groups.empty()) groups += "; ";
      groups += g.label + " n=" + std::to_string(g.n) + " mean=" + format_double(g.mean) + " sd=" + format_double(g.sd);
    }
    t.add_row({r.contrast_name, stats::to_string(r.test), format_double(r.statistic), format_double(r.df1),
               format_double(r.df2), format_double(r.p_raw), format_double(r.p_corrected), format_double(r.effect_size),
               format_double(r.effect_ci_low), format_double(r.effect_ci_high), r.ci_method, groups});
  }
  return t;
}

inline StageCounts run_contrast(Context& ctx) {
  const auto& cfg = ctx.config;
  require(!cfg.inputs.contrasts.empty(), ErrorKind::config, "config does not name inputs.contrasts");
  const std::string inputs =
      detail::stage_digest("contrast", {ctx.workspace->upstream("universality", "all"), file_hash(cfg.inputs.contrasts),
                                        file_hash(cfg.inputs.manifest), cfg.run.rng_seed, cfg.anova_bootstrap,
                                        cfg.sd_bootstrap_iters});
  StageCounts counts;
  if (!ctx.force && ctx.workspace->up_to_date("contrast", "all", inputs)) {
    counts.skipped = 1;
    ctx.workspace->log({{"stage", "contrast"}, {"action", "skip"}});
    detail::summary(ctx, "contrast", counts);
    return counts;
  }
  const auto specs = stats::parse_contrast_specs(read_json(cfg.inputs.contrasts));
  std::map<std::string, double> u;
  for (const auto& r : detail::load_reports(ctx)) u[r.model_id] = r.model_mean;
  stats::ContrastOptions co;
  co.anova_bootstrap = cfg.anova_bootstrap;
  co.sd_bootstrap_iters = cfg.sd_bootstrap_iters;
  co.seed = cfg.run.rng_seed;
  const auto results = stats::run_contrasts(ctx.manifest(), u, specs, co);
  const fs::path p = ctx.workspace->path(fs::path("contrast") / "contrasts.csv");
  persist_artifact(contrast_table(results), p, "contrasts");
  ctx.workspace->mark("contrast", "all", inputs, {p, sidecar_path(p)});
  counts.ran = 1;
  ctx.workspace->log({{"stage", "contrast"}, {"action", "run"}});
  detail::summary(ctx, "contrast", counts);
  return counts;
}

/// Merged per-dimension and per-model tables for plotting. Content and
/// alignment columns are filled when those stages have run.
inline StageCounts run_report(Context& ctx) {
  const bool have_content = ctx.workspace->has_marker("content", "all");
  const bool have_align = ctx.workspace->has_marker("align", "all");
  const bool have_contrast = ctx.workspace->has_marker("contrast", "all");
  const std::string inputs = detail::stage_digest(
      "report", {ctx.workspace->upstream("universality", "all"),
                 have_content ? ctx.workspace->upstream("content", "all") : "",
                 have_align ? ctx.workspace->upstream("align", "all") : "",
                 have_contrast ? ctx.workspace->upstream("contrast", "all") : "", file_hash(ctx.config.inputs.manifest)});
  StageCounts counts;
  if (!ctx.force && ctx.workspace->up_to_date("report", "all", inputs)) {
    counts.skipped = 1;
    ctx.workspace->log({{"stage", "report"}, {"action", "skip"}});
    detail::summary(ctx, "report", counts);
    return counts;
  }
  const Table udims = load_table(ctx.workspace->path("universality/dimensions.csv"));
  const Table umodels = load_table(ctx.workspace->path("universality/models.csv"));
  std::map<std::pair<std::string, std::string>, std::vector<std::string>> content_rows;
  std::vector<std::string> content_cols{"eta2", "ss_between", "ss_within", "ss_total", "delta_r2", "degenerate"};
  if (have_content) {
    const Table c = load_table(ctx.workspace->path("content/dimensions.csv"));
    for (const auto& row : c.rows) {
      std::vector<std::string> v;
      for (const auto& col : content_cols) v.push_back(row[c.column(col)]);
      content_rows[{row[c.column("model_id")], row[c.column("dim")]}] = v;
    }
  }
  Table dims;
  dims.columns = {"model_id", "dim", "raw", "threshold", "calibrated", "ceiling"};
  if (have_content) dims.columns.insert(dims.columns.end(), content_cols.begin(), content_cols.end());
  for (const auto& row : udims.rows) {
    std::vector<std::string> out;
    for (const char* c : {"model_id", "dim", "raw", "threshold", "calibrated", "ceiling"}) out.push_back(row[udims.column(c)]);
    if (have_content) {
      auto it = content_rows.find({row[udims.column("model_id")], row[udims.column("dim")]});
      require(it != content_rows.end(), ErrorKind::consistency, "content rows do not cover every dimension; rerun content");
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    dims.add_row(out);
  }

  std::map<std::string, std::vector<std::string>> align_rows;
  const std::vector<std::string> align_cols{"encoding", "encoding_universal_half", "encoding_specific_half",
                                            "triplet_accuracy", "triplet_universal_half", "triplet_specific_half"};
  if (have_align) {
    const Table a = load_table(ctx.workspace->path("align/models.csv"));
    for (const auto& row : a.rows) {
      std::vector<std::string> v;
      for (const auto& col : align_cols) v.push_back(row[a.column(col)]);
      align_rows[row[a.column("model_id")]] = v;
    }
  }
  Table models;
  models.columns = {"model_id", "architecture_class", "family", "objective", "training_data", "U_m", "cka_mean"};
  if (have_align) models.columns.insert(models.columns.end(), align_cols.begin(), align_cols.end());
  for (const auto& row : umodels.rows) {
    const auto& id = row[umodels.column("model_id")];
    const auto& e = ctx.manifest().at(id);
    std::vector<std::string> out{id, to_string(e.architecture_class), e.family, e.objective, e.training_data,
                                 row[umodels.column("U_m")], row[umodels.column("cka_mean")]};
    if (have_align) {
      auto it = align_rows.find(id);
      require(it != align_rows.end(), ErrorKind::consistency, "alignment rows do not cover every model; rerun align");
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    models.add_row(out);
  }

  // Histogram of calibrated scores over [0, 1] in 20 bins.
  Table hist;
  hist.columns = {"bin_low", "bin_high", "count"};
  std::vector<std::size_t> bins(20, 0);
  for (const auto& row : udims.rows) {
    const double v = parse_double(row[udims.column("calibrated")]);
    bins[std::min<std::size_t>(19, static_cast<std::size_t>(std::max(0.0, v) * 20.0))]++;
  }
  for (std::size_t b = 0; b < 20; ++b)
    hist.add_row({format_double(static_cast<double>(b) / 20.0), format_double(static_cast<double>(b + 1) / 20.0),
                  std::to_string(bins[b])});

  const fs::path dir = ctx.workspace->path("report");
  std::vector<fs::path> outputs;
  auto save = [&](const Table& t, const char* name, const char* kind) {
    persist_artifact(t, dir / name, kind);
    outputs.push_back(dir / name);
    outputs.push_back(sidecar_path(dir / name));
  };
  save(dims, "dimensions.csv", "report_dimensions");
  save(models, "models.csv", "report_models");
  save(hist, "universality_histogram.csv", "report_histogram");
  if (have_content) save(load_table(ctx.workspace->path("content/deciles.csv")), "deciles.csv", "report_deciles");
  if (have_contrast)
    save(load_table(ctx.workspace->path("contrast/contrasts.csv")), "contrasts.csv", "report_contrasts");
  ctx.workspace->mark("report", "all", inputs, outputs);
  counts.ran = 1;
  ctx.workspace->log({{"stage", "report"}, {"action", "run"}});
  detail::summary(ctx, "report", counts);
  return counts;
}

}  // namespace unidim::pipeline
