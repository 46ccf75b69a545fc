// Copyright 2026 The pih-meta Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// pih-meta <mode> --config <file> [--seed <n>] --out <dir>
// pih-meta preset <name> [--profile desk] [--seed <n>] --out <dir>
// pih-meta config [--profile desk] [--orientation]     (prints a full config)

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "pihmeta/harness.hpp"

namespace h = pihmeta::harness;

namespace {

int run_cell(const h::ExperimentConfig& cfg, std::uint64_t seed, const h::fs::path& out) {
  std::cerr << "[pih-meta] " << h::to_string(cfg.mode) << " seed " << seed << " -> " << out.string() << '\n';
  const auto r = h::run_experiment(cfg, seed, out);
  if (r.exit_code != 0) {
    std::cerr << r.error << '\n';
  } else {
    std::cout << r.summary.dump() << '\n';
  }
  return r.exit_code;
}

// Runs every configured seed; multiple seeds go to <out>/seed<n>.
int run_seeds(const h::ExperimentConfig& cfg, std::optional<std::uint64_t> seed, const h::fs::path& out) {
  if (seed) return run_cell(cfg, *seed, out);
  if (cfg.seeds.size() == 1) return run_cell(cfg, cfg.seeds.front(), out);
  int rc = 0;
  for (auto s : cfg.seeds) rc = std::max(rc, run_cell(cfg, s, out / ("seed" + std::to_string(s))));
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pih-meta: meta-RL peg-in-hole experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, preset_name, profile_name = "desk";
  std::optional<std::uint64_t> seed;
  bool orientation = false;

  std::vector<std::pair<CLI::App*, h::Mode>> mode_cmds;
  for (h::Mode m : {h::Mode::train, h::Mode::eval, h::Mode::distill, h::Mode::ood, h::Mode::baseline_sac}) {
    auto* sub = app.add_subcommand(h::to_string(m), "run one " + h::to_string(m) + " experiment");
    sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed (default: every seed listed in the config)");
    sub->add_option("--out", out_dir, "output directory")->required();
    mode_cmds.emplace_back(sub, m);
  }

  auto* preset_cmd = app.add_subcommand("preset", "run a preset experiment sequence (curves, adaptation, orientation, distill-test, distill-train, ood)");
  preset_cmd->add_option("name", preset_name, "preset name")->required();
  preset_cmd->add_option("--profile", profile_name, "smoke | desk | full");
  preset_cmd->add_option("--seed", seed, "seed (default 0)");
  preset_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* config_cmd = app.add_subcommand("config", "print the full default config for a profile");
  config_cmd->add_option("--profile", profile_name, "smoke | desk | full");
  config_cmd->add_flag("--orientation", orientation, "orientation variant defaults");

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [sub, mode] : mode_cmds) {
      if (!sub->parsed()) continue;
      h::ExperimentConfig cfg;
      try {
        cfg = h::load_config(config_path);
      } catch (const h::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return 2;
      }
      cfg.mode = mode;
      return run_seeds(cfg, seed, out_dir);
    }
    if (preset_cmd->parsed()) {
      const auto profile = h::profile_from_string(profile_name);
      const h::fs::path root(out_dir);
      int rc = 0;
      for (auto step : h::preset(preset_name, profile)) {
        if (!step.checkpoint_from.empty())
          step.config.checkpoint = (root / step.checkpoint_from / "checkpoint.json").string();
        rc = std::max(rc, run_cell(step.config, seed.value_or(0), root / step.name));
      }
      return rc;
    }
    if (config_cmd->parsed()) {
      std::cout << h::to_json(h::profile_defaults(h::profile_from_string(profile_name), orientation)).dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "pih-meta: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
