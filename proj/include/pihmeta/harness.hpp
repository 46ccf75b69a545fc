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

#pragma once

// Experiment plumbing: versioned JSON configs with profile defaults,
// success evaluation, and run_experiment, which dispatches one (config, seed)
// cell and writes its artifacts. Every number in a summary.json is an
// aggregate of a CSV written next to it.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pihmeta/adaptation.hpp"

namespace pihmeta::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Invalid experiment configuration; carries every problem found.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  [[nodiscard]] const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& ps) {
    std::string s = "invalid experiment config:";
    for (const auto& p : ps) s += "\n  - " + p;
    return s;
  }
  std::vector<std::string> problems_;
};

enum class Mode { train, eval, distill, ood, baseline_sac };
enum class Profile { smoke, desk, full };
enum class SensorMode { ground_truth, pixel, force };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::train: return "train";
    case Mode::eval: return "eval";
    case Mode::distill: return "distill";
    case Mode::ood: return "ood";
    case Mode::baseline_sac: return "baseline-sac";
  }
  return "?";
}
inline std::string to_string(Profile p) {
  return p == Profile::smoke ? "smoke" : p == Profile::desk ? "desk" : "full";
}
inline std::string to_string(SensorMode s) {
  return s == SensorMode::ground_truth ? "ground_truth" : s == SensorMode::pixel ? "pixel" : "force";
}

inline Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::train, Mode::eval, Mode::distill, Mode::ood, Mode::baseline_sac})
    if (to_string(m) == s) return m;
  throw ContractViolation("unknown mode '" + s + "' (train|eval|distill|ood|baseline-sac)");
}
inline Profile profile_from_string(const std::string& s) {
  for (Profile p : {Profile::smoke, Profile::desk, Profile::full})
    if (to_string(p) == s) return p;
  throw ContractViolation("unknown profile '" + s + "' (smoke|desk|full)");
}
inline SensorMode sensor_from_string(const std::string& s) {
  for (SensorMode m : {SensorMode::ground_truth, SensorMode::pixel, SensorMode::force})
    if (to_string(m) == s) return m;
  throw ContractViolation("unknown sensor mode '" + s + "' (ground_truth|pixel|force)");
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainSettings {
  int epochs = 30;
  int updates_per_epoch = 500;
  int initial_steps_per_task = 1000;
  int prior_steps_per_task = 400;
  int posterior_steps_per_task = 400;
  int meta_batch = 9;
  int batch_size = 64;
  int context_batch = 16;
  int context_window = 400;
  bool posterior_data_in_context = false;
  double kl_weight = 1.0;
  double discount = 0.99;
  double learning_rate = 3e-4;
  double reward_scale = 1.0;
  std::vector<int> hidden{64, 64, 64};
  int latent_dim = 2;
  int eval_trials = 3;
  int eval_trajectories = 5;
};

struct EvalSettings {
  adapt::Protocol protocol = adapt::Protocol::single_transition;
  int trials = 20;
  int max_steps = 200;
  std::string task_group = "test";  // train | test | ood
};

struct DistillSettings {
  int samples_per_configuration = 16000;  // split evenly over the training tasks
  int iterations = 2000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  adapt::KlDirection direction = adapt::KlDirection::actual_to_estimated;
  int trials = 20;
  int max_steps = 300;
};

struct OodSettings {
  adapt::OodConfig ood;
  int trials = 5;
};

struct BaselineSettings {
  int max_steps = 20000;
  int warmup_steps = 500;
  int batch_size = 64;
  std::string task_group = "test";
};

struct ExperimentConfig {
  Mode mode = Mode::train;
  meta::Variant variant = meta::Variant::MP_motion_context;
  Profile profile = Profile::desk;
  SensorMode sensor = SensorMode::ground_truth;
  bool orientation = false;
  std::vector<std::uint64_t> seeds{0};
  double clearance = 0.5;
  // Task-set files; empty means the built-in grid for that group.
  std::string train_tasks, test_tasks, ood_tasks;
  std::string checkpoint;  // input for eval / distill / ood
  TrainSettings train;
  EvalSettings eval;
  DistillSettings distill;
  OodSettings ood;
  BaselineSettings baseline;
};

/// Defaults for a profile. `desk` is what the acceptance runs use; `smoke`
/// only checks the plumbing; `full` uses full-size networks and data budgets.
inline ExperimentConfig profile_defaults(Profile p, bool orientation = false) {
  ExperimentConfig c;
  c.profile = p;
  c.orientation = orientation;
  c.train.latent_dim = orientation ? 5 : 2;
  if (orientation) {
    c.eval.max_steps = 400;
    c.train.epochs = 40;
  }
  switch (p) {
    case Profile::smoke:
      c.train.epochs = 2;
      c.train.updates_per_epoch = 10;
      c.train.initial_steps_per_task = 100;
      c.train.prior_steps_per_task = 50;
      c.train.posterior_steps_per_task = 50;
      c.train.meta_batch = 2;
      c.train.batch_size = 16;
      c.train.context_batch = 8;
      c.train.hidden = {16, 16};
      c.train.eval_trials = 1;
      c.train.eval_trajectories = 2;
      c.eval.trials = 2;
      c.eval.max_steps = 60;
      c.distill.samples_per_configuration = 450;
      c.distill.iterations = 20;
      c.distill.batch_size = 16;
      c.distill.trials = 2;
      c.distill.max_steps = 60;
      c.ood.trials = 1;
      c.ood.ood.step_budget = 300;
      c.baseline.max_steps = 300;
      c.baseline.warmup_steps = 100;
      c.baseline.batch_size = 16;
      break;
    case Profile::desk: break;
    case Profile::full:
      c.train.hidden = {200, 200, 200};
      c.train.epochs = 100;
      c.train.updates_per_epoch = 1000;
      c.train.initial_steps_per_task = 2000;
      c.train.prior_steps_per_task = 1000;
      c.train.posterior_steps_per_task = 1000;
      c.train.batch_size = 256;
      c.train.eval_trials = 10;
      c.train.eval_trajectories = 10;
      break;
  }
  return c;
}

namespace detail {

// Reads overrides from `j` into fields, collecting type errors and unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string where, std::vector<std::string>& problems)
      : j_(j), where_(std::move(where)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(where_ + ": expected an object");
  }
  ~Reader() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) problems_.push_back(where_ + ": unknown key '" + k + "'");
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      problems_.push_back(where_ + "." + key + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  template <class T, class Parse>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string s;
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    if (!j_.at(key).is_string()) {
      problems_.push_back(where_ + "." + key + ": expected a string");
      return;
    }
    try {
      out = parse(j_.at(key).get<std::string>());
    } catch (const std::exception& e) {
      problems_.push_back(where_ + "." + key + ": " + e.what());
    }
  }

  const json* section(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

inline adapt::KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "actual_to_estimated") return adapt::KlDirection::actual_to_estimated;
  if (s == "estimated_to_actual") return adapt::KlDirection::estimated_to_actual;
  throw ContractViolation("unknown KL direction '" + s + "'");
}
inline std::string to_string(adapt::KlDirection d) {
  return d == adapt::KlDirection::actual_to_estimated ? "actual_to_estimated" : "estimated_to_actual";
}

inline void check(bool ok, const std::string& what, std::vector<std::string>& problems) {
  if (!ok) problems.push_back(what);
}

}  // namespace detail

inline void validate(const ExperimentConfig& c, std::vector<std::string>& p) {
  using detail::check;
  check(!c.seeds.empty(), "seeds: need at least one seed", p);
  check(c.clearance > 0.0, "clearance: must be positive", p);
  const auto& t = c.train;
  check(t.epochs > 0 && t.updates_per_epoch >= 0 && t.meta_batch > 0 && t.batch_size > 0,
        "train: epochs, meta_batch and batch_size must be positive", p);
  check(t.initial_steps_per_task > 0 && t.prior_steps_per_task >= 0 && t.posterior_steps_per_task >= 0,
        "train: step counts must be non-negative (initial positive)", p);
  check(t.context_batch >= 0 && t.context_window > 0, "train: context sizes must be positive", p);
  check(t.kl_weight >= 0.0 && t.learning_rate > 0.0 && t.discount > 0.0 && t.discount <= 1.0,
        "train: kl_weight >= 0, learning_rate > 0, discount in (0, 1]", p);
  check(t.latent_dim > 0 && !t.hidden.empty(), "train: latent_dim and hidden must be nonempty/positive", p);
  for (int h : t.hidden) check(h > 0, "train.hidden: widths must be positive", p);
  check(c.eval.trials > 0 && c.eval.max_steps >= 0, "eval: trials > 0, max_steps >= 0", p);
  check(c.eval.task_group == "train" || c.eval.task_group == "test" || c.eval.task_group == "ood",
        "eval.task_group: one of train|test|ood", p);
  check(c.distill.samples_per_configuration > 0 && c.distill.iterations >= 0 && c.distill.batch_size > 0,
        "distill: sizes must be positive", p);
  check(c.ood.ood.alpha1 >= 0.0 && c.ood.ood.alpha2 >= 0.0 && c.ood.ood.alpha3 >= 0.0, "ood: weights must be >= 0", p);
  check(c.ood.ood.n_explore >= 1 && c.ood.ood.step_budget > 0 && c.ood.trials > 0, "ood: n_explore >= 1, budget > 0", p);
  check(c.baseline.max_steps > 0 && c.baseline.batch_size > 0, "baseline: sizes must be positive", p);
  const bool needs_ckpt = c.mode == Mode::eval || c.mode == Mode::distill || c.mode == Mode::ood;
  check(!needs_ckpt || !c.checkpoint.empty(), "checkpoint: required for mode " + to_string(c.mode), p);
  check(c.sensor != SensorMode::force || c.mode == Mode::distill,
        "sensor: force mode is only produced by distill runs", p);
}

/// Parses a config document. Profile defaults are applied first, then the
/// document's overrides. Throws ConfigError listing every problem.
inline ExperimentConfig config_from_json(const json& j) {
  std::vector<std::string> problems;
  if (!j.is_object()) throw ConfigError({"config: expected a JSON object"});
  if (!j.contains("schema_version")) {
    problems.push_back("schema_version: missing (expected " + std::to_string(kSchemaVersion) + ")");
  } else if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kSchemaVersion) {
    problems.push_back("schema_version: unsupported value " + j.at("schema_version").dump() + " (expected " +
                       std::to_string(kSchemaVersion) + ")");
  }
  Profile profile = Profile::desk;
  bool orientation = false;
  // Profile and orientation pick the defaults; bad values are reported below.
  if (j.contains("profile") && j.at("profile").is_string()) {
    try {
      profile = profile_from_string(j.at("profile").get<std::string>());
    } catch (const std::exception&) {}
  }
  if (j.contains("orientation") && j.at("orientation").is_boolean()) orientation = j.at("orientation").get<bool>();
  ExperimentConfig c = profile_defaults(profile, orientation);
  {
    detail::Reader r(j, "config", problems);
    int schema = 0;
    r.get("schema_version", schema);
    r.get_enum("mode", c.mode, mode_from_string);
    r.get_enum("variant", c.variant, meta::variant_from_string);
    r.get_enum("profile", c.profile, profile_from_string);
    r.get_enum("sensor", c.sensor, sensor_from_string);
    r.get("orientation", c.orientation);
    r.get("seeds", c.seeds);
    r.get("clearance", c.clearance);
    r.get("train_tasks", c.train_tasks);
    r.get("test_tasks", c.test_tasks);
    r.get("ood_tasks", c.ood_tasks);
    r.get("checkpoint", c.checkpoint);
    if (const json* s = r.section("train")) {
      detail::Reader t(*s, "train", problems);
      auto& x = c.train;
      t.get("epochs", x.epochs);
      t.get("updates_per_epoch", x.updates_per_epoch);
      t.get("initial_steps_per_task", x.initial_steps_per_task);
      t.get("prior_steps_per_task", x.prior_steps_per_task);
      t.get("posterior_steps_per_task", x.posterior_steps_per_task);
      t.get("meta_batch", x.meta_batch);
      t.get("batch_size", x.batch_size);
      t.get("context_batch", x.context_batch);
      t.get("context_window", x.context_window);
      t.get("posterior_data_in_context", x.posterior_data_in_context);
      t.get("kl_weight", x.kl_weight);
      t.get("discount", x.discount);
      t.get("learning_rate", x.learning_rate);
      t.get("reward_scale", x.reward_scale);
      t.get("hidden", x.hidden);
      t.get("latent_dim", x.latent_dim);
      t.get("eval_trials", x.eval_trials);
      t.get("eval_trajectories", x.eval_trajectories);
    }
    if (const json* s = r.section("eval")) {
      detail::Reader e(*s, "eval", problems);
      e.get_enum("protocol", c.eval.protocol, adapt::protocol_from_string);
      e.get("trials", c.eval.trials);
      e.get("max_steps", c.eval.max_steps);
      e.get("task_group", c.eval.task_group);
    }
    if (const json* s = r.section("distill")) {
      detail::Reader d(*s, "distill", problems);
      d.get("samples_per_configuration", c.distill.samples_per_configuration);
      d.get("iterations", c.distill.iterations);
      d.get("batch_size", c.distill.batch_size);
      d.get("learning_rate", c.distill.learning_rate);
      d.get_enum("direction", c.distill.direction, detail::kl_direction_from_string);
      d.get("trials", c.distill.trials);
      d.get("max_steps", c.distill.max_steps);
    }
    if (const json* s = r.section("ood")) {
      detail::Reader o(*s, "ood", problems);
      auto& x = c.ood.ood;
      o.get("alpha1", x.alpha1);
      o.get("alpha2", x.alpha2);
      o.get("alpha3", x.alpha3);
      o.get("n_explore", x.n_explore);
      o.get("step_budget", x.step_budget);
      o.get("encoder_lr", x.encoder_lr);
      o.get("normalize_sum", x.normalize_sum);
      o.get("per_step_latent", x.per_step_latent);
      o.get("bootstrap_steps", x.bootstrap_steps);
      o.get("trials", c.ood.trials);
    }
    if (const json* s = r.section("baseline")) {
      detail::Reader b(*s, "baseline", problems);
      b.get("max_steps", c.baseline.max_steps);
      b.get("warmup_steps", c.baseline.warmup_steps);
      b.get("batch_size", c.baseline.batch_size);
      b.get("task_group", c.baseline.task_group);
    }
  }
  if (problems.empty()) validate(c, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

/// Full effective config, suitable as a snapshot and as an input document.
inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  const auto& o = c.ood.ood;
  return {{"schema_version", kSchemaVersion},
          {"mode", to_string(c.mode)},
          {"variant", meta::to_string(c.variant)},
          {"profile", to_string(c.profile)},
          {"sensor", to_string(c.sensor)},
          {"orientation", c.orientation},
          {"seeds", c.seeds},
          {"clearance", c.clearance},
          {"train_tasks", c.train_tasks},
          {"test_tasks", c.test_tasks},
          {"ood_tasks", c.ood_tasks},
          {"checkpoint", c.checkpoint},
          {"train",
           {{"epochs", t.epochs},
            {"updates_per_epoch", t.updates_per_epoch},
            {"initial_steps_per_task", t.initial_steps_per_task},
            {"prior_steps_per_task", t.prior_steps_per_task},
            {"posterior_steps_per_task", t.posterior_steps_per_task},
            {"meta_batch", t.meta_batch},
            {"batch_size", t.batch_size},
            {"context_batch", t.context_batch},
            {"context_window", t.context_window},
            {"posterior_data_in_context", t.posterior_data_in_context},
            {"kl_weight", t.kl_weight},
            {"discount", t.discount},
            {"learning_rate", t.learning_rate},
            {"reward_scale", t.reward_scale},
            {"hidden", t.hidden},
            {"latent_dim", t.latent_dim},
            {"eval_trials", t.eval_trials},
            {"eval_trajectories", t.eval_trajectories}}},
          {"eval",
           {{"protocol", adapt::to_string(c.eval.protocol)},
            {"trials", c.eval.trials},
            {"max_steps", c.eval.max_steps},
            {"task_group", c.eval.task_group}}},
          {"distill",
           {{"samples_per_configuration", c.distill.samples_per_configuration},
            {"iterations", c.distill.iterations},
            {"batch_size", c.distill.batch_size},
            {"learning_rate", c.distill.learning_rate},
            {"direction", detail::to_string(c.distill.direction)},
            {"trials", c.distill.trials},
            {"max_steps", c.distill.max_steps}}},
          {"ood",
           {{"alpha1", o.alpha1},
            {"alpha2", o.alpha2},
            {"alpha3", o.alpha3},
            {"n_explore", o.n_explore},
            {"step_budget", o.step_budget},
            {"encoder_lr", o.encoder_lr},
            {"normalize_sum", o.normalize_sum},
            {"per_step_latent", o.per_step_latent},
            {"bootstrap_steps", o.bootstrap_steps},
            {"trials", c.ood.trials}}},
          {"baseline",
           {{"max_steps", c.baseline.max_steps},
            {"warmup_steps", c.baseline.warmup_steps},
            {"batch_size", c.baseline.batch_size},
            {"task_group", c.baseline.task_group}}}};
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path + "'"});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({"config file '" + path + "' is not valid JSON: " + e.what()});
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Task sets

/// Built-in grids: training 3x3 over +-4 mm, in-distribution test at
/// (+-2, +-2), OOD at 2.5x and 5x the training range. The orientation variant
/// spreads yaw over +-15 degrees.
struct TaskSets {
  std::vector<env::TaskSpec> train, test, ood;

  [[nodiscard]] const std::vector<env::TaskSpec>& group(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    if (name == "ood") return ood;
    throw ContractViolation("unknown task group '" + name + "'");
  }
};

inline constexpr double kTrainingDelta = 4.0;

inline TaskSets default_task_sets(double clearance, bool orientation) {
  env::TaskSpec geo;
  geo.clearance = clearance;
  TaskSets s;
  s.train = env::square_grid(kTrainingDelta, 3, geo);
  s.test = env::square_grid(2.0, 2, geo);
  for (double d : {2.5 * kTrainingDelta, 5.0 * kTrainingDelta}) {
    for (const auto& [x, y] : {std::pair{d, 0.0}, std::pair{0.0, -d}}) {
      env::TaskSpec t = geo;
      t.offset_x = x;
      t.offset_y = y;
      s.ood.push_back(t);
    }
  }
  if (orientation) {
    const double train_yaw[] = {-15.0, 0.0, 15.0};
    for (std::size_t i = 0; i < s.train.size(); ++i) s.train[i].yaw_offset = train_yaw[(i + i / 3) % 3];
    const double test_yaw[] = {-7.5, 7.5, 7.5, -7.5};
    for (std::size_t i = 0; i < s.test.size(); ++i) s.test[i].yaw_offset = test_yaw[i];
  }
  return s;
}

inline TaskSets resolve_task_sets(const ExperimentConfig& c) {
  TaskSets s = default_task_sets(c.clearance, c.orientation);
  if (!c.train_tasks.empty()) s.train = env::load_task_set(c.train_tasks);
  if (!c.test_tasks.empty()) s.test = env::load_task_set(c.test_tasks);
  if (!c.ood_tasks.empty()) s.ood = env::load_task_set(c.ood_tasks);
  return s;
}

inline meta::AgentConfig agent_config(const ExperimentConfig& c) {
  meta::AgentConfig a;
  a.variant = c.variant;
  a.latent_dim = c.train.latent_dim;
  a.hidden = c.train.hidden;
  a.encoder_hidden = c.train.hidden;
  a.env.orientation = c.orientation;
  a.features.orientation = c.orientation;
  a.env.sign_source = c.sensor == SensorMode::pixel ? env::SignSource::pixel_oracle : env::SignSource::ground_truth;
  return a;
}

inline meta::MetaTrainConfig meta_train_config(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& t = c.train;
  meta::MetaTrainConfig m;
  m.epochs = t.epochs;
  m.updates_per_epoch = t.updates_per_epoch;
  m.initial_steps_per_task = t.initial_steps_per_task;
  m.prior_steps_per_task = t.prior_steps_per_task;
  m.posterior_steps_per_task = t.posterior_steps_per_task;
  m.meta_batch = t.meta_batch;
  m.batch_size = t.batch_size;
  m.context_batch = t.context_batch;
  m.context_window = static_cast<std::size_t>(t.context_window);
  m.posterior_data_in_context = t.posterior_data_in_context;
  m.sac.kl_weight = t.kl_weight;
  m.sac.discount = t.discount;
  m.sac.policy_lr = m.sac.critic_lr = m.sac.encoder_lr = t.learning_rate;
  m.sac.reward_scale = t.reward_scale;
  m.eval_trials = t.eval_trials;
  m.eval_trajectories = t.eval_trajectories;
  m.seed = seed;
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  meta::AgentBundle agent;
  std::vector<env::TaskSpec> training_tasks;
  std::vector<latent::DiagGaussian> training_posteriors;
};

inline json to_json(const Checkpoint& c) {
  json posts = json::array();
  for (const auto& g : c.training_posteriors)
    posts.push_back({{"mean", std::vector<double>(g.mean.data(), g.mean.data() + g.mean.size())},
                     {"variance", std::vector<double>(g.variance.data(), g.variance.data() + g.variance.size())}});
  return {{"schema_version", kSchemaVersion},
          {"agent", meta::to_json(c.agent)},
          {"training_tasks", env::task_set_to_json(c.training_tasks)},
          {"training_posteriors", posts}};
}

inline Checkpoint load_checkpoint(const std::string& path, const env::EnvConfig& env_cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"checkpoint '" + path + "' does not exist or cannot be read"});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({"checkpoint '" + path + "' is not valid JSON: " + e.what()});
  }
  if (!j.is_object() || j.value("schema_version", -1) != kSchemaVersion || !j.contains("agent"))
    throw ConfigError({"checkpoint '" + path + "' has an unsupported layout"});
  Checkpoint c;
  c.agent = meta::agent_from_json(j.at("agent"), env_cfg);
  c.training_tasks = env::task_set_from_json(j.at("training_tasks"));
  for (const auto& p : j.at("training_posteriors")) {
    const auto m = p.at("mean").get<std::vector<double>>();
    const auto v = p.at("variance").get<std::vector<double>>();
    c.training_posteriors.push_back({Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size())),
                                     Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()))});
  }
  return c;
}

// ---------------------------------------------------------------------------
// Success evaluation

struct TrialResult {
  int task = 0;
  int trial = 0;
  bool success = false;
  int steps = 0;  // steps to first success, or steps used when unsuccessful
};

struct SuccessReport {
  std::vector<TrialResult> trials;
  double success_rate = 0.0;
  double mean_steps_to_success = 0.0;  // over successful trials; 0 when none
};

inline SuccessReport summarize(std::vector<TrialResult> trials) {
  SuccessReport r;
  r.trials = std::move(trials);
  int ok = 0;
  double steps = 0.0;
  for (const auto& t : r.trials) {
    if (t.success) {
      ++ok;
      steps += t.steps;
    }
  }
  if (!r.trials.empty()) r.success_rate = static_cast<double>(ok) / static_cast<double>(r.trials.size());
  if (ok > 0) r.mean_steps_to_success = steps / ok;
  return r;
}

/// Anything that can attempt one task for up to `max_steps` steps.
using Controller = std::function<adapt::AdaptationTrace(const env::TaskSpec&, int max_steps, std::uint64_t seed)>;

inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t task, int trial) {
  return meta::derive_seed(seed, 0x7121, task, static_cast<std::uint64_t>(trial));
}

inline SuccessReport evaluate_controller(const Controller& ctl, const std::vector<env::TaskSpec>& tasks, int trials,
                                         int max_steps, std::uint64_t seed) {
  std::vector<TrialResult> out;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    for (int k = 0; k < trials; ++k) {
      const auto tr = ctl(tasks[ti], max_steps, trial_seed(seed, ti, k));
      const int first = tr.steps_to_success();
      out.push_back({static_cast<int>(ti), k, first > 0, first > 0 ? first : static_cast<int>(tr.records.size())});
    }
  }
  return summarize(std::move(out));
}

/// Posterior-adaptation success of a meta-trained agent. `force_encoder`
/// switches the context channel to force.
inline SuccessReport evaluate_success(const meta::AgentBundle& agent, const std::vector<env::TaskSpec>& tasks,
                                      adapt::Protocol protocol, int trials, int max_steps, env::SignSource signs,
                                      std::uint64_t seed,
                                      const std::optional<latent::EncoderHead>& force_encoder = std::nullopt) {
  return evaluate_controller(
      [&](const env::TaskSpec& task, int steps, std::uint64_t s) {
        adapt::AdaptOptions o;
        o.protocol = protocol;
        o.max_steps = steps;
        o.sign_source = signs;
        o.seed = s;
        if (force_encoder) {
          o.encoder = force_encoder;
          o.channel = latent::ContextChannel::force;
        }
        return adapt::adapt(agent, task, o);
      },
      tasks, trials, max_steps, seed);
}

namespace detail {

template <class Policy>
adapt::AdaptationTrace run_controller(const env::EnvConfig& cfg, const env::TaskSpec& task, int max_steps,
                                      std::uint64_t seed, Policy&& policy) {
  adapt::AdaptationTrace trace;
  env::PegInHoleEnv env(cfg, task, seed);
  Rng rng(meta::derive_seed(seed, 0xC7));
  bool success = false;
  for (int step = 1; step <= max_steps && !success; ++step) {
    if (env.terminal()) env.reset();
    const auto t = env.step(policy(env.state(), rng));
    success = t.done;
    trace.records.push_back({step, Vec(), Vec(), Vec(), t.action, t.motion, t.contact, success});
  }
  return trace;
}

}  // namespace detail

/// Walks straight to the true hole, aligns yaw, then descends. Upper bound.
inline Controller scripted_oracle_controller(const env::EnvConfig& cfg) {
  return [cfg](const env::TaskSpec& task, int max_steps, std::uint64_t seed) {
    return detail::run_controller(cfg, task, max_steps, seed, [&](const env::EnvState& s, Rng&) {
      env::Action a;
      a.dx = std::clamp(task.offset_x - s.x, -cfg.max_step, cfg.max_step);
      a.dy = std::clamp(task.offset_y - s.y, -cfg.max_step, cfg.max_step);
      if (cfg.orientation) a.dyaw = std::clamp(task.yaw_offset - s.yaw, -cfg.max_yaw_step, cfg.max_yaw_step);
      const bool aligned = std::abs(s.x + a.dx - task.offset_x) < 1e-9 && std::abs(s.y + a.dy - task.offset_y) < 1e-9 &&
                           (!cfg.orientation || std::abs(s.yaw + a.dyaw - task.yaw_offset) < 1e-9);
      a.dz = aligned ? -cfg.max_step : 0.0;
      return a;
    });
  };
}

/// Uniform random actions within the per-axis limits.
inline Controller random_controller(const env::EnvConfig& cfg) {
  return [cfg](const env::TaskSpec& task, int max_steps, std::uint64_t seed) {
    return detail::run_controller(cfg, task, max_steps, seed, [&](const env::EnvState&, Rng& rng) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      env::Action a{cfg.max_step * u(rng), cfg.max_step * u(rng), cfg.max_step * u(rng), 0.0};
      if (cfg.orientation) a.dyaw = cfg.max_yaw_step * u(rng);
      return a;
    });
  };
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

inline void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

}  // namespace detail

inline void write_curves_csv(std::ostream& os, const std::vector<meta::CurveRow>& rows) {
  os << "epoch,task_group,mean_return,std_return,seed\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.task_group << ',' << detail::num(r.mean_return) << ',' << detail::num(r.std_return)
       << ',' << r.seed << '\n';
}

inline void write_success_csv(std::ostream& os, const SuccessReport& rep, const std::vector<env::TaskSpec>& tasks) {
  os << "task,offset_x,offset_y,yaw_offset,trial,success,steps\n";
  for (const auto& t : rep.trials) {
    const auto& spec = tasks[static_cast<std::size_t>(t.task)];
    os << t.task << ',' << detail::num(spec.offset_x) << ',' << detail::num(spec.offset_y) << ','
       << detail::num(spec.yaw_offset) << ',' << t.trial << ',' << (t.success ? 1 : 0) << ',' << t.steps << '\n';
  }
}

inline json success_summary(const SuccessReport& rep) {
  return {{"trials", rep.trials.size()},
          {"success_rate", rep.success_rate},
          {"mean_steps_to_success", rep.mean_steps_to_success}};
}

// ---------------------------------------------------------------------------
// Running experiments

struct RunResult {
  int exit_code = 0;  // 0 ok, 2 config/schema error, 3 runtime failure
  json summary;
  std::string error;
};

namespace detail {

struct RunContext {
  const ExperimentConfig& cfg;
  std::uint64_t seed;
  fs::path out;
  std::vector<std::string> artifacts;

  fs::path file(const std::string& name) {
    artifacts.push_back(name);
    return out / name;
  }
};

/// Per-group final/best statistics recomputable from curves.csv.
inline json curve_summary(const std::vector<meta::CurveRow>& rows) {
  json groups = json::object();
  for (const auto& r : rows) {
    auto& g = groups[r.task_group];
    if (!g.contains("best_return") || r.mean_return > g["best_return"].get<double>()) {
      g["best_return"] = r.mean_return;
      g["best_epoch"] = r.epoch;
    }
    g["final_return"] = r.mean_return;
    g["final_epoch"] = r.epoch;
  }
  return groups;
}

inline json run_train(RunContext& ctx, const TaskSets& sets) {
  const auto& c = ctx.cfg;
  std::vector<meta::TaskGroup> groups{{"train", sets.train}, {"test", sets.test}};
  meta::MetaTrainResult res;
  try {
    res = meta::meta_train(meta_train_config(c, ctx.seed), agent_config(c), groups);
  } catch (const meta::TrainingDiverged& e) {
    Checkpoint ck{e.last_good(), sets.train, {}};
    write_json(ctx.file("checkpoint_last_good.json"), to_json(ck));
    throw;
  }
  {
    auto os = open_out(ctx.file("curves.csv"));
    write_curves_csv(os, res.curves);
  }
  Checkpoint ck{res.learner.agent, sets.train, meta::training_task_posteriors(res.learner.agent, res.replays)};
  write_json(ctx.file("checkpoint.json"), to_json(ck));
  return {{"curves", curve_summary(res.curves)}};
}

inline env::EnvConfig env_config(const ExperimentConfig& c) { return agent_config(c).env; }

inline json run_eval(RunContext& ctx, const TaskSets& sets) {
  const auto& c = ctx.cfg;
  const Checkpoint ck = load_checkpoint(c.checkpoint, env_config(c));
  const auto& tasks = sets.group(c.eval.task_group);
  const auto signs = c.sensor == SensorMode::pixel ? env::SignSource::pixel_oracle : env::SignSource::ground_truth;
  const auto rep = evaluate_success(ck.agent, tasks, c.eval.protocol, c.eval.trials, c.eval.max_steps, signs, ctx.seed);
  auto os = open_out(ctx.file("success.csv"));
  write_success_csv(os, rep, tasks);
  return {{"success", success_summary(rep)}, {"task_group", c.eval.task_group}};
}

inline json run_distill(RunContext& ctx, const TaskSets& sets) {
  const auto& c = ctx.cfg;
  const Checkpoint ck = load_checkpoint(c.checkpoint, env_config(c));
  require(!ck.training_posteriors.empty(), "checkpoint carries no training-task posteriors");
  const auto& tasks = ck.training_tasks.empty() ? sets.train : ck.training_tasks;
  const int per_task = std::max(1, c.distill.samples_per_configuration / static_cast<int>(tasks.size()));
  const auto buffers = adapt::collect_distill_dataset(ck.agent, tasks, per_task, ck.training_posteriors,
                                                      meta::derive_seed(ctx.seed, 0xD1));
  const auto& f = ck.agent.config.features;
  const int m_aux = f.aux_dim(latent::ContextChannel::motion);
  const int f_aux = f.aux_dim(latent::ContextChannel::force);

  // Sanity: an exact copy fed the same tuples reproduces the posterior.
  adapt::DistillConfig sanity;
  sanity.iterations = 1;
  sanity.batch_size = c.distill.batch_size;
  sanity.paired_sampling = true;
  sanity.alternative_uses_actual_channel = true;
  sanity.learning_rate = 0.0;
  sanity.seed = ctx.seed;
  const double copy_loss = adapt::train_alt_encoder(buffers, ck.agent.encoder, ck.agent.encoder, sanity).loss_curve[0];

  adapt::DistillConfig dc;
  dc.iterations = c.distill.iterations;
  dc.batch_size = c.distill.batch_size;
  dc.learning_rate = c.distill.learning_rate;
  dc.direction = c.distill.direction;
  dc.seed = ctx.seed;
  const auto trained =
      adapt::train_alt_encoder(buffers, ck.agent.encoder, adapt::warm_start_alternative(ck.agent.encoder, m_aux, f_aux), dc);
  {
    auto os = open_out(ctx.file("distill_loss.csv"));
    os << "iteration,loss\n";
    os << "sanity_copy," << num(copy_loss) << '\n';
    for (std::size_t i = 0; i < trained.loss_curve.size(); ++i) os << i << ',' << num(trained.loss_curve[i]) << '\n';
  }
  write_json(ctx.file("force_encoder.json"), latent::to_json(trained.encoder));

  const auto& eval_tasks = sets.group(c.eval.task_group);
  const auto force_rep = evaluate_success(ck.agent, eval_tasks, c.eval.protocol, c.distill.trials, c.distill.max_steps,
                                          env::SignSource::ground_truth, ctx.seed, trained.encoder);
  const auto motion_rep = evaluate_success(ck.agent, eval_tasks, c.eval.protocol, c.distill.trials,
                                           c.distill.max_steps, env::SignSource::ground_truth, ctx.seed);
  {
    auto os = open_out(ctx.file("success_force.csv"));
    write_success_csv(os, force_rep, eval_tasks);
  }
  {
    auto os = open_out(ctx.file("success_motion.csv"));
    write_success_csv(os, motion_rep, eval_tasks);
  }
  std::size_t tuples = 0;
  for (const auto& b : buffers.tasks) tuples += b.transitions.size();
  return {{"tuples", tuples},
          {"sanity_copy_loss", copy_loss},
          {"initial_loss", trained.loss_curve.empty() ? 0.0 : trained.loss_curve.front()},
          {"final_loss", trained.loss_curve.empty() ? 0.0 : trained.loss_curve.back()},
          {"force", success_summary(force_rep)},
          {"motion", success_summary(motion_rep)}};
}

inline json run_ood(RunContext& ctx, const TaskSets& sets) {
  const auto& c = ctx.cfg;
  const Checkpoint ck = load_checkpoint(c.checkpoint, env_config(c));
  auto os = open_out(ctx.file("ood.csv"));
  os << "task,offset_x,offset_y,trial,success,steps,bootstrap_success,encoder_updates\n";
  std::vector<TrialResult> trials;
  fs::create_directories(ctx.out / "traces");
  for (std::size_t ti = 0; ti < sets.ood.size(); ++ti) {
    for (int k = 0; k < c.ood.trials; ++k) {
      adapt::OodConfig oc = c.ood.ood;
      oc.sign_source = c.sensor == SensorMode::ground_truth ? env::SignSource::ground_truth : env::SignSource::pixel_oracle;
      oc.seed = trial_seed(ctx.seed, ti, k);
      const auto r = adapt::ood_adapt(ck.agent, sets.ood[ti], oc);
      const int first = r.trace.steps_to_success();
      const bool ok = first > 0;
      const int steps = ok ? first : static_cast<int>(r.trace.records.size());
      trials.push_back({static_cast<int>(ti), k, ok, steps});
      os << ti << ',' << num(sets.ood[ti].offset_x) << ',' << num(sets.ood[ti].offset_y) << ',' << k << ','
         << (ok ? 1 : 0) << ',' << steps << ',' << (r.bootstrap_success ? 1 : 0) << ',' << r.iterations.size() << '\n';
      if (k == 0) {
        auto ts = open_out(ctx.file("traces/ood_task" + std::to_string(ti) + ".csv"));
        adapt::write_trace_csv(ts, r.trace, ck.agent.config.latent_dim);
      }
    }
  }
  return {{"success", success_summary(summarize(trials))}};
}

inline json run_baseline(RunContext& ctx, const TaskSets& sets) {
  const auto& c = ctx.cfg;
  const auto& tasks = sets.group(c.baseline.task_group);
  auto os = open_out(ctx.file("sac.csv"));
  os << "task,episode,end_step,motion_return,reward_return,success\n";
  std::vector<TrialResult> trials;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    meta::SacBaselineConfig bc;
    bc.max_steps = c.baseline.max_steps;
    bc.warmup_steps = c.baseline.warmup_steps;
    bc.batch_size = c.baseline.batch_size;
    bc.sac = meta_train_config(c, ctx.seed).sac;
    bc.seed = meta::derive_seed(ctx.seed, 0xBA5, ti);
    const auto r = meta::train_sac_baseline(tasks[ti], agent_config(c), bc);
    for (const auto& e : r.episodes)
      os << ti << ',' << e.episode << ',' << e.end_step << ',' << num(e.motion_return) << ',' << num(e.reward_return)
         << ',' << (e.success ? 1 : 0) << '\n';
    const bool ok = r.steps_to_first_success > 0;
    trials.push_back({static_cast<int>(ti), 0, ok, ok ? r.steps_to_first_success : r.steps_used});
  }
  return {{"success", success_summary(summarize(trials))}, {"task_group", c.baseline.task_group}};
}

}  // namespace detail

/// Runs one (config, seed) cell into `out`. Never throws: failures produce an
/// error.json manifest next to whatever artifacts were already written.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out) {
  RunResult res;
  detail::RunContext ctx{cfg, seed, out, {}};
  try {
    fs::create_directories(out);
    std::vector<std::string> problems;
    validate(cfg, problems);
    if (!problems.empty()) throw ConfigError(problems);
    json snap = to_json(cfg);
    snap["seed"] = seed;
    detail::write_json(ctx.file("config.json"), snap);
    const TaskSets sets = resolve_task_sets(cfg);
    json body;
    switch (cfg.mode) {
      case Mode::train: body = detail::run_train(ctx, sets); break;
      case Mode::eval: body = detail::run_eval(ctx, sets); break;
      case Mode::distill: body = detail::run_distill(ctx, sets); break;
      case Mode::ood: body = detail::run_ood(ctx, sets); break;
      case Mode::baseline_sac: body = detail::run_baseline(ctx, sets); break;
    }
    res.summary = {{"mode", to_string(cfg.mode)}, {"variant", meta::to_string(cfg.variant)}, {"seed", seed}};
    res.summary.update(body);
    detail::write_json(ctx.file("summary.json"), res.summary);
  } catch (const ConfigError& e) {
    res.exit_code = 2;
    res.error = e.what();
  } catch (const std::exception& e) {
    res.exit_code = 3;
    res.error = e.what();
  }
  if (res.exit_code != 0) {
    try {
      fs::create_directories(out);
      detail::write_json(out / "error.json", {{"mode", to_string(cfg.mode)},
                                              {"seed", seed},
                                              {"exit_code", res.exit_code},
                                              {"error", res.error},
                                              {"artifacts", ctx.artifacts}});
    } catch (const std::exception&) {
      // The manifest is best effort; the exit code still reports the failure.
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Figure-analog presets

/// One step of a preset: a config plus the output subdirectory. Steps that
/// need a checkpoint name the subdirectory whose checkpoint.json they read.
struct PresetStep {
  std::string name;
  ExperimentConfig config;
  std::string checkpoint_from;  // "" if none
};

inline std::vector<std::string> preset_names() { return {"curves", "adaptation", "orientation", "distill-test", "distill-train", "ood"}; }

inline std::vector<PresetStep> preset(const std::string& name, Profile profile = Profile::desk) {
  using V = meta::Variant;
  auto base = [&](Mode m, V v, bool orientation = false) {
    ExperimentConfig c = profile_defaults(profile, orientation);
    c.mode = m;
    c.variant = v;
    return c;
  };
  auto tag = [](V v) { return meta::to_string(v); };
  std::vector<PresetStep> steps;
  if (name == "curves") {
    for (V v : {V::OP_reward_context, V::MP_motion_context, V::MR_motion_reward})
      steps.push_back({"train_" + tag(v), base(Mode::train, v), ""});
  } else if (name == "adaptation") {
    for (V v : {V::MP_motion_context, V::OP_reward_context}) {
      steps.push_back({"train_" + tag(v), base(Mode::train, v), ""});
      for (auto p : {adapt::Protocol::trajectory_based, adapt::Protocol::single_transition}) {
        auto c = base(Mode::eval, v);
        c.eval.protocol = p;
        steps.push_back({"eval_" + tag(v) + "_" + adapt::to_string(p), c, "train_" + tag(v)});
      }
    }
    steps.push_back({"baseline_sac", base(Mode::baseline_sac, V::MR_motion_reward), ""});
  } else if (name == "orientation") {
    for (V v : {V::MP_motion_context, V::OP_reward_context}) {
      steps.push_back({"train_" + tag(v), base(Mode::train, v, true), ""});
      steps.push_back({"eval_" + tag(v), base(Mode::eval, v, true), "train_" + tag(v)});
    }
  } else if (name == "distill-test" || name == "distill-train") {
    steps.push_back({"train_MP", base(Mode::train, V::MP_motion_context), ""});
    auto d = base(Mode::distill, V::MP_motion_context);
    if (name == "distill-train") d.eval.task_group = "train";
    steps.push_back({"distill", d, "train_MP"});
  } else if (name == "ood") {
    steps.push_back({"train_MP", base(Mode::train, V::MP_motion_context), ""});
    auto o = base(Mode::ood, V::MP_motion_context);
    o.sensor = SensorMode::pixel;
    steps.push_back({"ood_MP", o, "train_MP"});
    auto op = base(Mode::eval, V::OP_reward_context);
    steps.push_back({"train_OP", base(Mode::train, V::OP_reward_context), ""});
    auto mp_eval = base(Mode::eval, V::MP_motion_context);
    mp_eval.eval.task_group = "ood";
    mp_eval.eval.max_steps = 1000;
    steps.push_back({"eval_ood_MP", mp_eval, "train_MP"});
    op.eval.task_group = "ood";
    op.eval.max_steps = 1000;
    steps.push_back({"eval_ood_OP", op, "train_OP"});
  } else {
    throw ContractViolation("unknown preset '" + name + "'");
  }
  return steps;
}

}  // namespace pihmeta::harness
