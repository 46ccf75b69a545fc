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

// Deterministic kinematic peg-in-hole simulator.
//
// Coordinates are millimetres and degrees relative to the *estimated* hole
// centre on the surface plane z = 0. The actual hole sits at (offset_x,
// offset_y) and the peg counts as inserted once its tip reaches
// z = -insertion_depth. Motion below the surface is only possible when the
// peg cross-section fits inside the hole opening; otherwise the peg is held at
// z = 0 and the contact shows up in the synthetic force/torque channel.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pihmeta/numerics.hpp"

namespace pihmeta::env {

enum class CrossSection { square, circle };

inline std::string to_string(CrossSection c) { return c == CrossSection::square ? "square" : "circle"; }

inline CrossSection cross_section_from_string(const std::string& s) {
  if (s == "square") return CrossSection::square;
  if (s == "circle") return CrossSection::circle;
  throw ContractViolation("unknown cross section '" + s + "'");
}

/// Hidden task parameters: where the actual hole is relative to the
/// estimate, plus the hole geometry.
struct TaskSpec {
  double offset_x = 0.0;
  double offset_y = 0.0;
  double yaw_offset = 0.0;  // degrees
  CrossSection cross_section = CrossSection::square;
  double hole_side = 20.0;  // side length (square) or diameter (circle)
  double clearance = 0.5;

  bool operator==(const TaskSpec&) const = default;
};

enum class SignSource { ground_truth, pixel_oracle };

struct EnvConfig {
  bool orientation = false;
  double start_height = 10.0;
  double insertion_depth = 5.0;
  double max_step = 2.0;      // mm per axis
  double max_yaw_step = 2.0;  // degrees
  double yaw_clearance = 2.0;
  int trajectory_length = 50;
  // Reward weight on yaw error, mm per degree.
  double yaw_reward_weight = 0.2;

  // Synthetic force model.
  double contact_stiffness = 10.0;  // N/mm of attempted penetration
  double lateral_gain = 1.0;        // N per mm of commanded descent, scaled by overlap
  double wall_stiffness = 10.0;     // N/mm of blocked lateral motion inside the hole
  double torque_arm = 1.0;          // mm
  double force_noise = 0.05;

  SignSource sign_source = SignSource::ground_truth;
  double pixel_threshold = 0.2;  // mm
  double pixel_flip_prob = 0.1;

  [[nodiscard]] int obs_dim() const { return orientation ? 4 : 3; }
  [[nodiscard]] int action_dim() const { return orientation ? 4 : 3; }
};

struct EnvState {
  double x = 0.0, y = 0.0, z = 0.0;
  double yaw = 0.0;
  int step_index = 0;
  bool inserted = false;
};

struct Action {
  double dx = 0.0, dy = 0.0, dz = 0.0;
  double dyaw = 0.0;

  bool operator==(const Action&) const = default;
};

using Wrench = std::array<double, 6>;  // fx fy fz tx ty tz

struct Transition {
  Vec obs;
  Action action;
  Vec next_obs;
  double reward = 0.0;
  double motion = 0.0;
  Wrench force{};
  bool done = false;     // inserted
  bool contact = false;  // vertical motion was blocked by the surface
};

inline Vec observe(const EnvConfig& cfg, const EnvState& s) {
  Vec o(cfg.obs_dim());
  o(0) = s.x;
  o(1) = s.y;
  o(2) = s.z;
  if (cfg.orientation) o(3) = s.yaw;
  return o;
}

inline bool is_terminal(const EnvConfig& cfg, const EnvState& s) {
  return s.inserted || s.step_index >= cfg.trajectory_length;
}

inline EnvState reset(const EnvConfig& cfg, const TaskSpec& /*task*/) {
  EnvState s;
  s.z = cfg.start_height;
  return s;
}

inline Action clamp_action(const EnvConfig& cfg, Action a) {
  a.dx = std::clamp(a.dx, -cfg.max_step, cfg.max_step);
  a.dy = std::clamp(a.dy, -cfg.max_step, cfg.max_step);
  a.dz = std::clamp(a.dz, -cfg.max_step, cfg.max_step);
  a.dyaw = cfg.orientation ? std::clamp(a.dyaw, -cfg.max_yaw_step, cfg.max_yaw_step) : 0.0;
  return a;
}

inline Action action_from_vector(const EnvConfig& cfg, const Vec& v) {
  require(v.size() == cfg.action_dim(), "action vector has wrong length");
  Action a{v(0), v(1), v(2), cfg.orientation ? v(3) : 0.0};
  return a;
}

inline Vec action_to_vector(const EnvConfig& cfg, const Action& a) {
  Vec v(cfg.action_dim());
  v(0) = a.dx;
  v(1) = a.dy;
  v(2) = a.dz;
  if (cfg.orientation) v(3) = a.dyaw;
  return v;
}

/// True when the peg cross-section lies fully inside the hole opening.
inline bool contained(const EnvConfig& cfg, const TaskSpec& task, double x, double y, double yaw) {
  const double ex = x - task.offset_x;
  const double ey = y - task.offset_y;
  bool ok = task.cross_section == CrossSection::square
                ? (std::abs(ex) <= task.clearance && std::abs(ey) <= task.clearance)
                : (std::hypot(ex, ey) <= task.clearance);
  if (cfg.orientation && task.cross_section == CrossSection::square) {
    ok = ok && std::abs(yaw - task.yaw_offset) <= cfg.yaw_clearance;
  }
  return ok;
}

/// Fraction of the peg cross-section area lying over the hole opening.
inline double overlap_fraction(const TaskSpec& task, double x, double y) {
  const double peg = task.hole_side - 2.0 * task.clearance;
  const double hole = task.hole_side;
  const double ex = x - task.offset_x;
  const double ey = y - task.offset_y;
  if (task.cross_section == CrossSection::square) {
    auto overlap_1d = [&](double e) {
      const double lo = std::max(e - peg / 2.0, -hole / 2.0);
      const double hi = std::min(e + peg / 2.0, hole / 2.0);
      return std::max(0.0, hi - lo) / peg;
    };
    return overlap_1d(ex) * overlap_1d(ey);
  }
  const double r1 = peg / 2.0;
  const double r2 = hole / 2.0;
  const double d = std::hypot(ex, ey);
  if (d >= r1 + r2) return 0.0;
  if (d <= r2 - r1) return 1.0;
  const double a1 = r1 * r1 * std::acos(std::clamp((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1), -1.0, 1.0));
  const double a2 = r2 * r2 * std::acos(std::clamp((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2), -1.0, 1.0));
  const double a3 = 0.5 * std::sqrt(std::max(0.0, (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)));
  return (a1 + a2 - a3) / (std::numbers::pi * r1 * r1);
}

/// Negative Euclidean distance between the peg tip and the bottom centre of
/// the actual hole (yaw error weighted in the orientation variant).
inline double reward(const EnvConfig& cfg, const EnvState& s, const TaskSpec& task) {
  const double ex = s.x - task.offset_x;
  const double ey = s.y - task.offset_y;
  const double ez = s.z + cfg.insertion_depth;
  double sq = ex * ex + ey * ey + ez * ez;
  if (cfg.orientation) {
    const double ea = cfg.yaw_reward_weight * (s.yaw - task.yaw_offset);
    sq += ea * ea;
  }
  return -std::sqrt(sq);
}

/// Simulated uncalibrated-camera sign: exact above the resolution threshold,
/// flipped with probability `flip_prob` below it.
inline int pixel_sign_oracle(double axis_displacement, int true_sign, double resolution_threshold, double flip_prob,
                             Rng& rng) {
  if (std::abs(axis_displacement) >= resolution_threshold) return true_sign;
  if (flip_prob <= 0.0) return true_sign;
  return uniform01(rng) < flip_prob ? -true_sign : true_sign;
}

/// Signed sum of per-axis displacements toward the actual hole. The z sign
/// always comes from the known hole depth; x, y and yaw come either from
/// ground truth or the pixel oracle.
inline double motion_toward_hole(const EnvConfig& cfg, const EnvState& prev, const EnvState& next,
                                 const TaskSpec& task, SignSource source, Rng& sensor_rng) {
  auto term = [&](double before, double after, double target, bool observable_by_camera) {
    const double d = std::abs(after - before);
    if (d == 0.0) return 0.0;
    const int truth = std::abs(after - target) < std::abs(before - target) ? 1 : -1;
    int sign = truth;
    if (observable_by_camera && source == SignSource::pixel_oracle) {
      sign = pixel_sign_oracle(d, truth, cfg.pixel_threshold, cfg.pixel_flip_prob, sensor_rng);
    }
    return sign * d;
  };
  double m = term(prev.x, next.x, task.offset_x, true) + term(prev.y, next.y, task.offset_y, true) +
             term(prev.z, next.z, -cfg.insertion_depth, false);
  if (cfg.orientation) m += term(prev.yaw, next.yaw, task.yaw_offset, true);
  return m;
}

namespace detail {

inline int sgn(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

/// Advances one step. Horizontal (and yaw) motion is applied first, then
/// vertical. `noise_rng` drives force noise; `sensor_rng` drives the pixel
/// oracle, kept separate so the sign source never perturbs other streams.
inline EnvState step(const EnvConfig& cfg, const EnvState& state, const TaskSpec& task, const Action& raw,
                     Rng& noise_rng, Rng& sensor_rng, Transition* out = nullptr) {
  if (is_terminal(cfg, state)) throw ContractViolation("step called on a terminal state");
  const Action a = clamp_action(cfg, raw);
  EnvState next = state;
  Wrench f{};

  double tx = state.x + a.dx;
  double ty = state.y + a.dy;
  double tyaw = state.yaw + a.dyaw;
  if (state.z < 0.0) {
    // Inside the hole the walls confine lateral and yaw motion.
    double cx = tx, cy = ty;
    if (task.cross_section == CrossSection::square) {
      cx = std::clamp(tx, task.offset_x - task.clearance, task.offset_x + task.clearance);
      cy = std::clamp(ty, task.offset_y - task.clearance, task.offset_y + task.clearance);
    } else {
      const double ex = tx - task.offset_x, ey = ty - task.offset_y;
      const double r = std::hypot(ex, ey);
      if (r > task.clearance) {
        cx = task.offset_x + ex * task.clearance / r;
        cy = task.offset_y + ey * task.clearance / r;
      }
    }
    f[0] += cfg.wall_stiffness * (cx - tx);
    f[1] += cfg.wall_stiffness * (cy - ty);
    tx = cx;
    ty = cy;
    if (cfg.orientation && task.cross_section == CrossSection::square) {
      const double cyaw = std::clamp(tyaw, task.yaw_offset - cfg.yaw_clearance, task.yaw_offset + cfg.yaw_clearance);
      f[5] += cfg.wall_stiffness * (cyaw - tyaw);
      tyaw = cyaw;
    }
  }
  next.x = tx;
  next.y = ty;
  next.yaw = tyaw;

  bool contact = false;
  const double tz = state.z + a.dz;
  if (tz >= 0.0) {
    next.z = tz;
  } else if (contained(cfg, task, next.x, next.y, next.yaw)) {
    next.z = std::max(tz, -cfg.insertion_depth);
  } else {
    contact = true;
    next.z = 0.0;
    const double penetration = -tz;
    f[2] += cfg.contact_stiffness * penetration;
    const double frac = overlap_fraction(task, next.x, next.y);
    const double ex = task.offset_x - next.x;
    const double ey = task.offset_y - next.y;
    const double dist = std::hypot(ex, ey);
    if (dist > 0.0) {
      const double mag = cfg.lateral_gain * std::abs(a.dz) * frac;
      f[0] += mag * ex / dist;
      f[1] += mag * ey / dist;
    }
    if (cfg.orientation && task.cross_section == CrossSection::square &&
        std::abs(task.yaw_offset - next.yaw) > cfg.yaw_clearance) {
      f[5] += cfg.lateral_gain * std::abs(a.dz) * frac * detail::sgn(task.yaw_offset - next.yaw);
    }
  }
  f[3] += -cfg.torque_arm * f[1];
  f[4] += cfg.torque_arm * f[0];
  if (cfg.force_noise > 0.0) {
    for (double& c : f) c += cfg.force_noise * standard_normal(noise_rng);
  }

  next.step_index = state.step_index + 1;
  next.inserted = next.z <= -cfg.insertion_depth;

  if (out) {
    out->obs = observe(cfg, state);
    out->action = a;
    out->next_obs = observe(cfg, next);
    out->reward = reward(cfg, next, task);
    out->motion = motion_toward_hole(cfg, state, next, task, cfg.sign_source, sensor_rng);
    out->force = f;
    out->done = next.inserted;
    out->contact = contact;
  }
  return next;
}

/// Owns a state, a task and the two seeded noise streams.
class PegInHoleEnv {
 public:
  PegInHoleEnv(EnvConfig cfg, TaskSpec task, std::uint64_t seed)
      : cfg_(cfg), task_(task), noise_rng_(seed * 2 + 1), sensor_rng_(seed * 2 + 2) {
    state_ = env::reset(cfg_, task_);
  }

  Vec reset() {
    state_ = env::reset(cfg_, task_);
    return observe(cfg_, state_);
  }

  Transition step(const Action& a) {
    Transition t;
    state_ = env::step(cfg_, state_, task_, a, noise_rng_, sensor_rng_, &t);
    return t;
  }

  [[nodiscard]] bool terminal() const { return is_terminal(cfg_, state_); }
  [[nodiscard]] const EnvState& state() const { return state_; }
  [[nodiscard]] const TaskSpec& task() const { return task_; }
  [[nodiscard]] const EnvConfig& config() const { return cfg_; }
  [[nodiscard]] Vec observation() const { return observe(cfg_, state_); }

 private:
  EnvConfig cfg_;
  TaskSpec task_;
  Rng noise_rng_;
  Rng sensor_rng_;
  EnvState state_;
};

// ---------------------------------------------------------------------------
// Task distributions

enum class SamplingMode { uniform, grid };

struct TaskDistribution {
  double delta = 4.0;
  SamplingMode mode = SamplingMode::uniform;
  std::vector<TaskSpec> grid;  // used in grid mode
  bool orientation_enabled = false;
  double yaw_range = 15.0;
  TaskSpec geometry;  // cross section, size and clearance shared by sampled tasks
  std::uint64_t seed = 0;
};

inline TaskSpec sample_task(const TaskDistribution& dist, Rng& rng) {
  if (dist.mode == SamplingMode::grid) {
    require(!dist.grid.empty(), "grid sampling mode needs a nonempty grid");
    std::uniform_int_distribution<std::size_t> pick(0, dist.grid.size() - 1);
    return dist.grid[pick(rng)];
  }
  TaskSpec t = dist.geometry;
  t.offset_x = dist.delta * (2.0 * uniform01(rng) - 1.0);
  t.offset_y = dist.delta * (2.0 * uniform01(rng) - 1.0);
  t.yaw_offset = dist.orientation_enabled ? dist.yaw_range * (2.0 * uniform01(rng) - 1.0) : 0.0;
  return t;
}

/// n x n grid over [-delta, delta]^2, row-major in y then x.
inline std::vector<TaskSpec> square_grid(double delta, int n, const TaskSpec& geometry = {}) {
  std::vector<TaskSpec> out;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      TaskSpec t = geometry;
      t.offset_x = n == 1 ? 0.0 : -delta + 2.0 * delta * i / (n - 1);
      t.offset_y = n == 1 ? 0.0 : -delta + 2.0 * delta * j / (n - 1);
      out.push_back(t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task-set files and transition logs

inline nlohmann::json to_json(const TaskSpec& t) {
  return {{"offset_x", t.offset_x},   {"offset_y", t.offset_y},   {"yaw_offset", t.yaw_offset},
          {"cross_section", to_string(t.cross_section)}, {"hole_side", t.hole_side}, {"clearance", t.clearance}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  TaskSpec t;
  t.offset_x = j.at("offset_x").get<double>();
  t.offset_y = j.at("offset_y").get<double>();
  t.yaw_offset = j.value("yaw_offset", 0.0);
  t.cross_section = cross_section_from_string(j.value("cross_section", std::string("square")));
  t.hole_side = j.value("hole_side", 20.0);
  t.clearance = j.value("clearance", 0.5);
  require(t.clearance > 0.0, "task clearance must be positive");
  return t;
}

inline nlohmann::json task_set_to_json(const std::vector<TaskSpec>& tasks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : tasks) arr.push_back(to_json(t));
  return arr;
}

inline std::vector<TaskSpec> task_set_from_json(const nlohmann::json& j) {
  require(j.is_array(), "task-set file must hold a JSON list");
  std::vector<TaskSpec> out;
  for (const auto& e : j) out.push_back(task_from_json(e));
  return out;
}

inline std::vector<TaskSpec> load_task_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task-set file " + path);
  return task_set_from_json(nlohmann::json::parse(in));
}

inline void write_transition_header(std::ostream& os, const EnvConfig& cfg) {
  os << "task_id,step";
  const int od = cfg.obs_dim(), ad = cfg.action_dim();
  for (int i = 0; i < od; ++i) os << ",o" << i;
  for (int i = 0; i < ad; ++i) os << ",a" << i;
  for (int i = 0; i < od; ++i) os << ",next_o" << i;
  os << ",r,m,f0,f1,f2,f3,f4,f5,done\n";
}

inline void write_transition_row(std::ostream& os, const EnvConfig& cfg, int task_id, int step_index,
                                 const Transition& t) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << ',' << buf;
  };
  os << task_id << ',' << step_index;
  for (Eigen::Index i = 0; i < t.obs.size(); ++i) num(t.obs(i));
  const Vec a = action_to_vector(cfg, t.action);
  for (Eigen::Index i = 0; i < a.size(); ++i) num(a(i));
  for (Eigen::Index i = 0; i < t.next_obs.size(); ++i) num(t.next_obs(i));
  num(t.reward);
  num(t.motion);
  for (double f : t.force) num(f);
  os << ',' << (t.done ? 1 : 0) << '\n';
}

}  // namespace pihmeta::env
