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

// PEARL-style meta training: per-task replay, posterior-guided data
// collection, meta-batched SAC updates, and the per-epoch return evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pihmeta/env.hpp"
#include "pihmeta/gaussian.hpp"
#include "pihmeta/sac.hpp"

namespace pihmeta::meta {

/// Deterministic per-purpose seed derivation (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(mix(base) ^ a) ^ b) ^ c);
}

/// Per-task replay buffer with a window of the most recent transitions used as
/// context.
class TaskReplay {
 public:
  explicit TaskReplay(std::size_t capacity = 100000, std::size_t context_window = 400)
      : capacity_(capacity), window_(context_window) {}

  void add(const env::Transition& t, bool to_context = true) {
    if (buffer_.size() < capacity_) {
      buffer_.push_back(t);
    } else {
      buffer_[next_] = t;
      next_ = (next_ + 1) % capacity_;
    }
    if (to_context) {
      if (context_.size() < window_) {
        context_.push_back(t);
      } else {
        context_[context_next_] = t;
        context_next_ = (context_next_ + 1) % window_;
      }
    }
  }

  [[nodiscard]] std::size_t size() const { return buffer_.size(); }
  [[nodiscard]] std::size_t context_size() const { return context_.size(); }
  [[nodiscard]] const std::vector<env::Transition>& buffer() const { return buffer_; }
  [[nodiscard]] const std::vector<env::Transition>& context() const { return context_; }

  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
    require(!buffer_.empty(), "sampling from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> u(0, buffer_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = u(rng);
    return idx;
  }

  std::vector<std::size_t> sample_context_indices(std::size_t n, Rng& rng) const {
    require(!context_.empty(), "sampling from an empty context window");
    std::uniform_int_distribution<std::size_t> u(0, context_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = u(rng);
    return idx;
  }

 private:
  std::size_t capacity_;
  std::size_t window_;
  std::vector<env::Transition> buffer_;
  std::size_t next_ = 0;
  std::vector<env::Transition> context_;
  std::size_t context_next_ = 0;
};

inline Mat featurize_context(const AgentConfig& cfg, const std::vector<env::Transition>& ts, ContextChannel channel) {
  Mat out(cfg.features.context_dim(channel), static_cast<Eigen::Index>(ts.size()));
  for (std::size_t i = 0; i < ts.size(); ++i)
    out.col(static_cast<Eigen::Index>(i)) = cfg.features.context(cfg.env, ts[i], channel);
  return out;
}

/// The variant's RL training signal for one transition.
inline double training_signal(Variant v, const env::Transition& t) { return trains_on_motion(v) ? t.motion : t.reward; }

inline TaskBatch make_task_batch(const AgentConfig& cfg, const TaskReplay& replay, std::size_t batch_size,
                                 std::size_t context_size, Rng& rng) {
  const int od = cfg.obs_dim(), ad = cfg.action_dim();
  const auto idx = replay.sample_indices(batch_size, rng);
  TaskBatch b;
  const auto n = static_cast<Eigen::Index>(batch_size);
  b.obs.resize(od, n);
  b.actions.resize(ad, n);
  b.next_obs.resize(od, n);
  b.rewards.resize(n);
  b.dones.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = replay.buffer()[idx[static_cast<std::size_t>(i)]];
    b.obs.col(i) = cfg.features.obs(t.obs);
    b.actions.col(i) = cfg.features.action(cfg.env, t.action);
    b.next_obs.col(i) = cfg.features.obs(t.next_obs);
    b.rewards(i) = training_signal(cfg.variant, t);
    b.dones(i) = t.done ? 1.0 : 0.0;
  }
  if (context_size > 0 && replay.context_size() > 0) {
    const auto cidx = replay.sample_context_indices(context_size, rng);
    b.context.resize(cfg.features.context_dim(cfg.channel()), static_cast<Eigen::Index>(context_size));
    for (std::size_t i = 0; i < context_size; ++i)
      b.context.col(static_cast<Eigen::Index>(i)) = cfg.features.context(cfg.env, replay.context()[cidx[i]], cfg.channel());
  } else {
    b.context.resize(cfg.features.context_dim(cfg.channel()), 0);
  }
  return b;
}

/// Running product of Gaussian factors for a frozen encoder: adding a tuple
/// only encodes that tuple.
class IncrementalPosterior {
 public:
  explicit IncrementalPosterior(int latent_dim)
      : precision_(Vec::Zero(latent_dim)), weighted_(Vec::Zero(latent_dim)), latent_dim_(latent_dim) {}

  void add_factors(const Mat& means, const Mat& variances) {
    for (Eigen::Index i = 0; i < means.cols(); ++i) {
      const Vec p = variances.col(i).cwiseInverse();
      precision_ += p;
      weighted_ += p.cwiseProduct(means.col(i));
      ++count_;
    }
  }

  void add(const latent::EncoderHead& enc, const Mat& features) {
    if (features.cols() == 0) return;
    const auto fb = latent::encode_batch(enc, features);
    add_factors(fb.means, fb.variances);
  }

  [[nodiscard]] latent::DiagGaussian current() const {
    if (count_ == 0) return latent::DiagGaussian::standard(latent_dim_);
    latent::DiagGaussian g;
    g.variance = precision_.cwiseInverse();
    g.mean = g.variance.cwiseProduct(weighted_);
    return g;
  }

  [[nodiscard]] std::size_t count() const { return count_; }

 private:
  Vec precision_;
  Vec weighted_;
  int latent_dim_;
  std::size_t count_ = 0;
};

struct RolloutStats {
  double total_return = 0.0;
  int steps = 0;
  bool success = false;
};

/// Runs one trajectory from reset with a fixed latent. Transitions are passed
/// to `sink`.
inline RolloutStats rollout(const AgentBundle& agent, env::PegInHoleEnv& env, const Vec& z, bool deterministic,
                            Rng& rng, const std::function<void(const env::Transition&)>& sink) {
  RolloutStats s;
  env.reset();
  while (!env.terminal()) {
    const auto a = policy_act(agent, env.observation(), z, deterministic, rng);
    const auto t = env.step(a);
    s.total_return += t.reward;
    s.steps += 1;
    if (sink) sink(t);
    if (t.done) s.success = true;
  }
  return s;
}

struct MetaTrainConfig {
  int epochs = 40;
  int initial_steps_per_task = 1000;    // prior-only collection before the first update
  int prior_steps_per_task = 400;       // per epoch, z ~ N(0, I)
  int posterior_steps_per_task = 400;   // per epoch, z ~ posterior of the steps collected so far
  int tasks_per_epoch = 0;              // 0 = all training tasks
  int updates_per_epoch = 500;
  int meta_batch = 4;                   // tasks per update
  int batch_size = 64;                  // RL transitions per task per update
  int context_batch = 64;
  std::size_t context_window = 400;
  bool posterior_data_in_context = true;  // false: context window holds prior-z data only
  std::size_t replay_capacity = 100000;
  SacConfig sac;
  // Evaluation: each trial runs `eval_trajectories` successive trajectories,
  // updating the posterior after each one.
  int eval_every = 1;
  int eval_trials = 3;
  int eval_trajectories = 5;
  std::uint64_t seed = 0;
};

struct CurveRow {
  int epoch = 0;
  std::string task_group;
  double mean_return = 0.0;
  double std_return = 0.0;
  double success_rate = 0.0;
  std::uint64_t seed = 0;
};

struct TaskGroup {
  std::string name;
  std::vector<env::TaskSpec> tasks;
};

struct GroupEvaluation {
  double mean_return = 0.0;
  double std_return = 0.0;
  double success_rate = 0.0;
};

/// Trajectory-based return evaluation with the deterministic policy.
inline GroupEvaluation evaluate_returns(const AgentBundle& agent, const std::vector<env::TaskSpec>& tasks, int trials,
                                        int trajectories, std::uint64_t seed) {
  std::vector<double> returns;
  int successes = 0, total = 0;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    for (int trial = 0; trial < trials; ++trial) {
      const auto s = derive_seed(seed, 0xE7A1, ti, static_cast<std::uint64_t>(trial));
      env::PegInHoleEnv env(agent.config.env, tasks[ti], s);
      Rng rng(s);
      IncrementalPosterior post(agent.config.latent_dim);
      double trial_return = 0.0;
      bool trial_success = false;
      for (int k = 0; k < trajectories; ++k) {
        const Vec z = latent::sample_latent(post.current(), rng);
        std::vector<env::Transition> traj;
        const auto st = rollout(agent, env, z, true, rng, [&](const env::Transition& t) { traj.push_back(t); });
        trial_return += st.total_return;
        trial_success = trial_success || st.success;
        post.add(agent.encoder, featurize_context(agent.config, traj, agent.config.channel()));
      }
      returns.push_back(trial_return / trajectories);
      successes += trial_success ? 1 : 0;
      ++total;
    }
  }
  GroupEvaluation g;
  if (returns.empty()) return g;
  double sum = 0.0;
  for (double r : returns) sum += r;
  g.mean_return = sum / static_cast<double>(returns.size());
  double sq = 0.0;
  for (double r : returns) sq += (r - g.mean_return) * (r - g.mean_return);
  g.std_return = std::sqrt(sq / static_cast<double>(returns.size()));
  g.success_rate = static_cast<double>(successes) / total;
  return g;
}

/// Thrown when training produces non-finite losses; carries the last agent
/// whose update completed cleanly.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, AgentBundle last_good, int epoch)
      : std::runtime_error(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  [[nodiscard]] const AgentBundle& last_good() const { return last_good_; }
  [[nodiscard]] int epoch() const { return epoch_; }

 private:
  AgentBundle last_good_;
  int epoch_;
};

struct MetaTrainResult {
  Learner learner;
  std::vector<CurveRow> curves;
  std::vector<TaskReplay> replays;  // one per training task
};

/// Collects `steps` transitions on one task. With `use_posterior` the latent
/// for each trajectory is drawn from the posterior of everything collected in
/// this call (prior while empty); otherwise always from the prior.
inline void collect_task_data(const AgentBundle& agent, const env::TaskSpec& task, int steps, bool use_posterior,
                              std::uint64_t seed, TaskReplay& replay, std::vector<env::Transition>* session = nullptr,
                              bool to_context = true) {
  env::PegInHoleEnv env(agent.config.env, task, seed);
  Rng rng(derive_seed(seed, 0xC011));
  IncrementalPosterior post(agent.config.latent_dim);
  if (session && use_posterior) post.add(agent.encoder, featurize_context(agent.config, *session, agent.config.channel()));
  int collected = 0;
  while (collected < steps) {
    const Vec z = latent::sample_latent(use_posterior ? post.current() : latent::DiagGaussian::standard(agent.config.latent_dim), rng);
    std::vector<env::Transition> traj;
    env.reset();
    while (!env.terminal() && collected < steps) {
      const auto a = policy_act(agent, env.observation(), z, false, rng);
      traj.push_back(env.step(a));
      ++collected;
    }
    for (const auto& t : traj) replay.add(t, to_context);
    if (use_posterior) post.add(agent.encoder, featurize_context(agent.config, traj, agent.config.channel()));
    if (session) session->insert(session->end(), traj.begin(), traj.end());
  }
}

/// Full meta-training run. `on_epoch` (optional) observes every curve row as
/// it is produced.
inline MetaTrainResult meta_train(const MetaTrainConfig& cfg, const AgentConfig& agent_cfg,
                                  const std::vector<TaskGroup>& groups,
                                  const std::function<void(const CurveRow&)>& on_epoch = {}) {
  require(!groups.empty() && !groups.front().tasks.empty(), "meta_train needs a nonempty training task group");
  require(cfg.epochs > 0 && cfg.meta_batch > 0 && cfg.batch_size > 0, "meta_train config must be positive");
  const auto& train_tasks = groups.front().tasks;
  Rng rng(derive_seed(cfg.seed, 0x1417));
  MetaTrainResult res;
  res.learner = Learner(make_agent(agent_cfg, rng), cfg.sac);
  for (std::size_t i = 0; i < train_tasks.size(); ++i) res.replays.emplace_back(cfg.replay_capacity, cfg.context_window);

  for (std::size_t i = 0; i < train_tasks.size(); ++i) {
    collect_task_data(res.learner.agent, train_tasks[i], cfg.initial_steps_per_task, false,
                      derive_seed(cfg.seed, 0xA11, i), res.replays[i]);
  }

  const std::size_t n_tasks = train_tasks.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Data collection.
    std::vector<std::size_t> task_order(n_tasks);
    for (std::size_t i = 0; i < n_tasks; ++i) task_order[i] = i;
    std::shuffle(task_order.begin(), task_order.end(), rng);
    const std::size_t n_collect = cfg.tasks_per_epoch > 0 ? std::min<std::size_t>(n_tasks, static_cast<std::size_t>(cfg.tasks_per_epoch)) : n_tasks;
    for (std::size_t k = 0; k < n_collect; ++k) {
      const std::size_t i = task_order[k];
      std::vector<env::Transition> session;
      if (cfg.prior_steps_per_task > 0)
        collect_task_data(res.learner.agent, train_tasks[i], cfg.prior_steps_per_task, false,
                          derive_seed(cfg.seed, 0xB0, static_cast<std::uint64_t>(epoch), i), res.replays[i], &session);
      if (cfg.posterior_steps_per_task > 0)
        collect_task_data(res.learner.agent, train_tasks[i], cfg.posterior_steps_per_task, true,
                          derive_seed(cfg.seed, 0xB1, static_cast<std::uint64_t>(epoch), i), res.replays[i], &session,
                          cfg.posterior_data_in_context);
    }

    // Gradient updates.
    AgentBundle last_good = res.learner.agent;
    try {
      for (int u = 0; u < cfg.updates_per_epoch; ++u) {
        std::vector<TaskBatch> batches;
        std::uniform_int_distribution<std::size_t> pick(0, n_tasks - 1);
        for (int t = 0; t < cfg.meta_batch; ++t) {
          const std::size_t i = pick(rng);
          batches.push_back(make_task_batch(agent_cfg, res.replays[i], static_cast<std::size_t>(cfg.batch_size),
                                            static_cast<std::size_t>(cfg.context_batch), rng));
        }
        sac_update(res.learner, batches, cfg.sac, rng);
      }
    } catch (const NonFiniteError& e) {
      throw TrainingDiverged(std::string("meta_train diverged: ") + e.what(), std::move(last_good), epoch);
    }

    if (cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].tasks.empty()) continue;
        const auto ev = evaluate_returns(res.learner.agent, groups[g].tasks, cfg.eval_trials, cfg.eval_trajectories,
                                         derive_seed(cfg.seed, 0xE0, static_cast<std::uint64_t>(epoch), g));
        CurveRow row{epoch + 1, groups[g].name, ev.mean_return, ev.std_return, ev.success_rate, cfg.seed};
        res.curves.push_back(row);
        if (on_epoch) on_epoch(row);
      }
    }
  }
  return res;
}

/// Posterior of each training task from its context window, using the
/// learner's current encoder.
inline std::vector<latent::DiagGaussian> training_task_posteriors(const AgentBundle& agent,
                                                                  const std::vector<TaskReplay>& replays) {
  std::vector<latent::DiagGaussian> out;
  for (const auto& r : replays) {
    out.push_back(latent::infer_posterior(agent.encoder, featurize_context(agent.config, r.context(), agent.config.channel())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-meta SAC baseline

struct SacBaselineConfig {
  int max_steps = 20000;    // environment steps before giving up
  int warmup_steps = 500;   // uniform-random actions before the first update
  int updates_per_step = 1;
  int batch_size = 64;
  bool stop_at_success = true;
  SacConfig sac;
  std::uint64_t seed = 0;
};

struct SacEpisode {
  int episode = 0;
  int end_step = 0;        // cumulative environment steps at episode end
  double motion_return = 0.0;
  double reward_return = 0.0;
  bool success = false;
};

struct SacBaselineResult {
  Learner learner;
  std::vector<SacEpisode> episodes;
  int steps_to_first_success = -1;  // -1 when the budget ran out
  int steps_used = 0;
};

/// SAC from scratch on one task, trained on m as the reward. The latent input
/// is held at zero and the encoder is unused.
inline SacBaselineResult train_sac_baseline(const env::TaskSpec& task, AgentConfig agent_cfg,
                                            const SacBaselineConfig& cfg) {
  require(cfg.max_steps > 0 && cfg.batch_size > 0, "sac baseline config must be positive");
  agent_cfg.variant = Variant::MR_motion_reward;
  SacConfig sac = cfg.sac;
  sac.kl_weight = 0.0;
  sac.sample_latent = false;
  Rng rng(derive_seed(cfg.seed, 0x5AC));
  SacBaselineResult res;
  res.learner = Learner(make_agent(agent_cfg, rng), sac);
  const AgentBundle& agent = res.learner.agent;
  TaskReplay replay(static_cast<std::size_t>(cfg.max_steps) + 1, 1);
  env::PegInHoleEnv env(agent_cfg.env, task, derive_seed(cfg.seed, 0x5AD));
  const Vec z = Vec::Zero(agent_cfg.latent_dim);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SacEpisode ep;
  env.reset();
  for (int step = 1; step <= cfg.max_steps; ++step) {
    env::Action a;
    if (step <= cfg.warmup_steps) {
      Vec v(agent_cfg.action_dim());
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = u(rng);
      a = env::action_from_vector(agent_cfg.env, v.cwiseProduct(action_scale(agent_cfg.env)));
    } else {
      a = policy_act(agent, env.observation(), z, false, rng);
    }
    const auto t = env.step(a);
    replay.add(t, false);
    ep.motion_return += t.motion;
    ep.reward_return += t.reward;
    ep.success = ep.success || t.done;
    res.steps_used = step;
    if (t.done && res.steps_to_first_success < 0) res.steps_to_first_success = step;
    if (env.terminal()) {
      ep.end_step = step;
      res.episodes.push_back(ep);
      ep = SacEpisode{ep.episode + 1};
      env.reset();
      if (cfg.stop_at_success && res.steps_to_first_success > 0) break;
    }
    if (step > cfg.warmup_steps) {
      for (int k = 0; k < cfg.updates_per_step; ++k) {
        std::vector<TaskBatch> batch{make_task_batch(agent_cfg, replay, static_cast<std::size_t>(cfg.batch_size), 0, rng)};
        sac_update(res.learner, batch, sac, rng);
      }
    }
  }
  return res;
}

}  // namespace pihmeta::meta
