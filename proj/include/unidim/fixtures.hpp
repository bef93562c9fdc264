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

// Writes a complete synthetic input set (features, manifest, categories,
// neural data, triplets, contrast specs and a run config) for the pipeline.

#pragma once

#include "unidim/csv.hpp"
#include "unidim/npy.hpp"
#include "unidim/synthetic.hpp"
#include "unidim/tensor_io.hpp"

#include <cstdio>
#include <filesystem>
#include <string>

namespace unidim::synthetic {

struct FixtureOptions {
  int models = 10;
  Index categories = 30;
  Index exemplars = 10;
  Index shared = 4;
  Index private_dims = 4;
  Index feature_dims = 24;
  Index channels = 40;
  std::size_t triplets = 2000;
  std::uint64_t seed = 0;
  // written into config.json
  int seeds = 3;
  int permutations = 200;
  int resample_iterations = 50;
};

/// Returns the path of the written config.json.
inline std::filesystem::path write_fixture(const std::filesystem::path& dir, const FixtureOptions& o) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "neural");
  EnsembleOptions eo;
  eo.models = o.models;
  eo.categories = o.categories;
  eo.exemplars = o.exemplars;
  eo.shared = o.shared;
  eo.private_dims = o.private_dims;
  eo.seed = o.seed;
  const PlantedEnsemble pe = planted_ensemble(eo);
  const Index N = o.categories * o.exemplars;

  std::vector<std::string> image_ids;
  for (Index i = 0; i < N; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05lld", static_cast<long long>(i + 1));
    image_ids.emplace_back(buf);
  }
  static const char* arch[] = {"convolutional", "transformer", "mlp-mixer", "hybrid"};
  static const char* objective[] = {"supervised", "contrastive", "non-contrastive"};
  static const char* data[] = {"imagenet-1k", "imagenet-21k", "laion-2b"};
  json models = json::array();
  for (int m = 0; m < o.models; ++m) {
    const auto& e = pe.models[static_cast<std::size_t>(m)];
    Rng rng = make_stream(o.seed, {0xfea7ULL, static_cast<std::uint64_t>(m)});
    const Matrix Z = features_from_embedding(e.W, o.feature_dims, 0.02, rng);
    const std::string file = "features/" + e.model_id + ".npy";
    npy::write(dir / file, Z, 32);
    models.push_back({{"model_id", e.model_id},
                      {"architecture_class", arch[m % 4]},
                      {"family", "family_" + std::string(1, static_cast<char>('a' + m / 2))},
                      {"objective", objective[m % 3]},
                      {"training_data", data[(m / 3) % 3]},
                      {"imagenet_top1", 0.6 + 0.02 * m},
                      {"parameter_count", 1000000 * (m + 1)},
                      {"features", file}});
  }
  write_text(dir / "manifest.json",
             json{{"schema_version", kSchemaVersion}, {"image_ids", image_ids}, {"models", models}}.dump(2) + "\n");

  Table cats;
  cats.columns = {"image_id", "category_id", "designated"};
  for (Index i = 0; i < N; ++i) {
    const int c = pe.categories.labels[static_cast<std::size_t>(i)];
    cats.add_row({image_ids[static_cast<std::size_t>(i)], "cat_" + std::to_string(c + 1),
                  pe.categories.designated[static_cast<std::size_t>(c)] == static_cast<std::size_t>(i) ? "1" : "0"});
  }
  write_csv(dir / "categories.csv", cats);

  Rng nrng = make_stream(o.seed, {0x4e55ULL});
  const NeuralDataset nd = planted_neural(pe.shared_basis, o.channels, 1.0, nrng);
  npy::write(dir / "neural" / "responses.npy", nd.responses, 32);
  Table ch;
  ch.columns = {"channel_id", "reliability", "subject"};
  for (Index j = 0; j < nd.channels(); ++j) {
    const auto s = static_cast<std::size_t>(j);
    ch.add_row({nd.channel_ids[s], format_double(nd.reliabilities[s]), nd.subjects[s]});
  }
  write_csv(dir / "neural" / "channels.csv", ch);

  Rng trng = make_stream(o.seed, {0x7217ULL});
  const auto trip = planted_triplets(pe.category_profiles, o.triplets, 0.1, trng);
  Table tt;
  tt.columns = {"i", "j", "k_odd_one_out"};
  for (const auto& t : trip) tt.add_row({std::to_string(t.i + 1), std::to_string(t.j + 1), std::to_string(t.k + 1)});
  write_csv(dir / "triplets.csv", tt);

  const json contrasts = json::array({
      {{"name", "architecture"}, {"group_by", "architecture_class"}},
      {{"name", "self_supervised_objective"},
       {"filter", {{"objective", json::array({"contrastive", "non-contrastive"})}}},
       {"group_by", "objective"}},
      {{"name", "web_scale_singletons"}, {"filter", {{"training_data", "laion-2b"}}}, {"group_by", "model_id"}},
  });
  write_text(dir / "contrasts.json", contrasts.dump(2) + "\n");

  const json config{{"schema_version", kSchemaVersion},
                    {"run",
                     {{"rank", o.shared + o.private_dims},
                      {"seeds", o.seeds},
                      {"permutations", o.permutations},
                      {"rng_seed", o.seed},
                      {"cv_folds", 5}}},
                    {"inputs",
                     {{"manifest", "manifest.json"},
                      {"categories", "categories.csv"},
                      {"neural_responses", "neural/responses.npy"},
                      {"neural_channels", "neural/channels.csv"},
                      {"triplets", "triplets.csv"},
                      {"contrasts", "contrasts.json"}}},
                    {"universality", {{"resample_fraction", 0.5}, {"resample_iterations", o.resample_iterations}}},
                    {"contrast", {{"anova_bootstrap", 500}, {"sd_bootstrap_iters", 2000}}}};
  write_text(dir / "config.json", config.dump(2) + "\n");
  return dir / "config.json";
}

}  // namespace unidim::synthetic
