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

// unidim: batch driver for the analysis stages.

#include "unidim/fixtures.hpp"
#include "unidim/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace unidim;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kNumerical = 3;

struct GlobalOptions {
  std::string config;
  std::string workspace;
  int jobs = 1;
  bool force = false;
  std::optional<std::uint64_t> seed;
};

pipeline::PipelineConfig resolve_config(const GlobalOptions& g, const fs::path& ws) {
  pipeline::PipelineConfig cfg;
  if (!g.config.empty()) {
    cfg = pipeline::parse_config(read_json(g.config), fs::absolute(g.config).parent_path());
  } else if (fs::exists(ws / "effective_config.json")) {
    cfg = pipeline::parse_config(read_json(ws / "effective_config.json"), ws);
  } else {
    throw Error(ErrorKind::config, "no --config given and the workspace holds no effective_config.json");
  }
  if (g.seed) cfg.run.rng_seed = *g.seed;
  cfg.run.validate();
  return cfg;
}

fs::path resolve_workspace(const GlobalOptions& g) {
  if (!g.workspace.empty()) return g.workspace;
  if (const char* env = std::getenv("UNIDIM_WORKSPACE"); env && *env) return env;
  return "workspace";
}

int run_stages(const GlobalOptions& g, const std::vector<std::string>& stages) {
  const fs::path ws_path = resolve_workspace(g);
  pipeline::Workspace ws(ws_path);
  pipeline::Context ctx;
  ctx.config = resolve_config(g, ws_path);
  ctx.workspace = &ws;
  ctx.jobs = std::max(1, g.jobs);
  ctx.force = g.force;
  write_text(ws_path / "effective_config.json", ctx.config.to_json().dump(2) + "\n");
  for (const auto& s : stages) {
    ws.log({{"stage", s}, {"action", "start"}, {"jobs", ctx.jobs}, {"force", ctx.force}});
    if (s == "kernel") pipeline::run_kernel(ctx);
    else if (s == "factorize") pipeline::run_factorize(ctx);
    else if (s == "universality") pipeline::run_universality(ctx);
    else if (s == "content") pipeline::run_content(ctx);
    else if (s == "align") pipeline::run_align(ctx);
    else if (s == "contrast") pipeline::run_contrast(ctx);
    else if (s == "report") pipeline::run_report(ctx);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonnegative similarity dimensions and their cross-model universality"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--workspace", g.workspace, "output directory (default: $UNIDIM_WORKSPACE, then ./workspace)");
  app.add_option("--jobs", g.jobs, "parallel tasks")->check(CLI::PositiveNumber);
  app.add_flag("--force", g.force, "rerun stages even when their inputs are unchanged");
  app.add_option("--seed", g.seed, "override run.rng_seed");

  const std::vector<std::pair<std::string, std::string>> stage_cmds{
      {"kernel", "RBF similarity matrices over the bandwidth grid"},
      {"factorize", "multi-seed SNMF, bandwidth selection and central seed"},
      {"universality", "matched scores, null calibration, ceilings and resampling"},
      {"content", "category consistency, deciles and reconstruction importance"},
      {"align", "neural encoding and triplet accuracy, full and half-masked"},
      {"contrast", "pre-specified model-group contrasts"},
      {"report", "merged tables for plotting"},
      {"run", "every stage in order"}};
  std::string chosen;
  for (const auto& [name, help] : stage_cmds) {
    app.add_subcommand(name, help)->callback([&chosen, n = name] { chosen = n; });
  }
  auto* fx = app.add_subcommand("fixtures", "write a synthetic planted input set");
  std::string fx_out;
  synthetic::FixtureOptions fo;
  fx->add_option("--out", fx_out, "destination directory")->required();
  fx->add_option("--models", fo.models, "number of models")->check(CLI::Range(2, 1000));
  fx->add_option("--categories", fo.categories, "categories")->check(CLI::Range(3, 100000));
  fx->add_option("--exemplars", fo.exemplars, "images per category")->check(CLI::Range(1, 10000));
  fx->add_option("--shared", fo.shared, "shared dimensions")->check(CLI::Range(0, 1000));
  fx->add_option("--private", fo.private_dims, "private dimensions per model")->check(CLI::Range(0, 1000));
  fx->add_option("--permutations", fo.permutations, "null permutations written to the config")->check(CLI::Range(2, 1000000));
  fx->callback([&chosen] { chosen = "fixtures"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (chosen == "fixtures") {
      if (g.seed) fo.seed = *g.seed;
      const auto cfg = synthetic::write_fixture(fx_out, fo);
      std::cout << "fixtures: wrote " << fo.models << " models to " << fx_out << " (config " << cfg.string() << ")\n";
      return kOk;
    }
    if (chosen == "run")
      return run_stages(g, {"kernel", "factorize", "universality", "content", "align", "contrast", "report"});
    return run_stages(g, {chosen});
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.is_validation() ? kValidation : kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
}
