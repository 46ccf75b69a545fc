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

#include <gtest/gtest.h>

#include "pihmeta/pearl.hpp"
#include "test_support.hpp"

using namespace pihmeta;
using namespace pihmeta::meta;
using pihmeta::testing::kFdTol;
using pihmeta::testing::max_param_error;
using pihmeta::testing::smooth_activations;

namespace {

AgentConfig tiny_config(Variant v = Variant::MP_motion_context) {
  AgentConfig c;
  c.variant = v;
  c.hidden = {8, 8};
  c.encoder_hidden = {8, 8};
  return c;
}

AgentBundle smooth_agent(const AgentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto a = make_agent(cfg, rng);
  for (auto* p : {&a.policy, &a.q1, &a.q2, &a.q1_target, &a.q2_target, &a.encoder.trunk}) smooth_activations(*p);
  return a;
}

std::vector<TaskBatch> sample_batches(const AgentBundle& agent, std::uint64_t seed, int n_tasks = 2, int batch = 12,
                                      int ctx = 6) {
  std::vector<TaskBatch> out;
  Rng rng(seed);
  for (int t = 0; t < n_tasks; ++t) {
    TaskReplay rep;
    env::TaskSpec task;
    task.offset_x = 4.0 * uniform01(rng) - 2.0;
    task.offset_y = 4.0 * uniform01(rng) - 2.0;
    collect_task_data(agent, task, 100, false, seed * 31 + static_cast<std::uint64_t>(t), rep);
    out.push_back(make_task_batch(agent.config, rep, static_cast<std::size_t>(batch), static_cast<std::size_t>(ctx), rng));
  }
  return out;
}

}  // namespace

TEST(PolicyAct, ZeroPolicyDeterministicIsZeroAction) {
  Rng rng(1);
  auto agent = make_agent(tiny_config(), rng);
  agent.policy = nn::zeros_like(agent.policy);
  const auto a = policy_act(agent, Eigen::Vector3d(1, 2, 3), Vec::Zero(2), true, rng);
  EXPECT_EQ(a.dx, 0.0);
  EXPECT_EQ(a.dy, 0.0);
  EXPECT_EQ(a.dz, 0.0);
}

TEST(PolicyAct, SampledActionsRespectBounds) {
  for (bool orientation : {false, true}) {
    auto cfg = tiny_config();
    cfg.env.orientation = cfg.features.orientation = orientation;
    cfg.latent_dim = orientation ? 5 : 2;
    Rng rng(2);
    auto agent = make_agent(cfg, rng);
    // Inflate the output layer so tanh saturates often.
    agent.policy.layers.back().weight *= 50.0;
    for (int i = 0; i < 2000; ++i) {
      Vec o = Vec::Random(cfg.obs_dim()) * 10.0;
      Vec z = Vec::Random(cfg.latent_dim) * 3.0;
      const auto a = policy_act(agent, o, z, false, rng);
      EXPECT_LE(std::abs(a.dx), 2.0);
      EXPECT_LE(std::abs(a.dy), 2.0);
      EXPECT_LE(std::abs(a.dz), 2.0);
      EXPECT_LE(std::abs(a.dyaw), 2.0);
    }
  }
}

TEST(PolicyAct, SameSeedSameAction) {
  Rng init(3);
  auto agent = make_agent(tiny_config(), init);
  Rng a(11), b(11);
  const Vec o = Eigen::Vector3d(0.5, -1, 4), z = Eigen::Vector2d(0.3, -0.2);
  const auto x = policy_act(agent, o, z, false, a), y = policy_act(agent, o, z, false, b);
  EXPECT_EQ(x.dx, y.dx);
  EXPECT_EQ(x.dy, y.dy);
  EXPECT_EQ(x.dz, y.dz);
}

TEST(SacLosses, CriticAndEncoderGradientsMatchFiniteDifferences) {
  double worst_enc = 0.0, worst_q = 0.0;
  for (int draw = 0; draw < 4; ++draw) {
    auto agent = smooth_agent(tiny_config(), 100 + static_cast<std::uint64_t>(draw));
    auto batches = sample_batches(agent, 200 + static_cast<std::uint64_t>(draw));
    SacConfig sc;
    sc.kl_weight = 0.3;
    Rng rng(draw);
    const auto noise = draw_update_noise(batches, 2, 3, rng);
    const auto base = critic_encoder_loss(agent, batches, noise, sc);
    // The TD target is held at the unperturbed latent: it is a stop-gradient
    // quantity, so the numerical derivative must not see it move.
    const auto tz = base.task_z;
    worst_enc = std::max(worst_enc, max_param_error(agent.encoder.trunk, base.d_encoder, [&] {
                           return critic_encoder_loss(agent, batches, noise, sc, &tz).encoder_loss(sc.kl_weight);
                         }));
    worst_q = std::max(worst_q, max_param_error(agent.q1, base.d_q1, [&] {
                         return critic_encoder_loss(agent, batches, noise, sc, &tz).critic_loss;
                       }));
  }
  EXPECT_LT(worst_enc, kFdTol);
  EXPECT_LT(worst_q, kFdTol);
}

TEST(SacLosses, PolicyGradientMatchesFiniteDifferences) {
  auto agent = smooth_agent(tiny_config(), 7);
  auto batches = sample_batches(agent, 8, 1, 16, 4);
  Rng rng(9);
  Mat z = Mat::Random(2, 16), eps(3, 16);
  for (auto& e : eps.reshaped()) e = standard_normal(rng);
  const auto pl = policy_loss(agent, batches[0].obs, z, eps, 0.7);
  EXPECT_LT(max_param_error(agent.policy, pl.d_policy,
                            [&] { return policy_loss(agent, batches[0].obs, z, eps, 0.7).policy_loss; }),
            kFdTol);
}

TEST(SacLosses, ZeroBetaEmptyContextHasNoKlOrEncoderGradient) {
  auto agent = smooth_agent(tiny_config(), 10);
  auto batches = sample_batches(agent, 11, 2, 8, 0);
  SacConfig sc;
  sc.kl_weight = 0.0;
  Rng rng(12);
  const auto r = critic_encoder_loss(agent, batches, draw_update_noise(batches, 2, 3, rng), sc);
  EXPECT_EQ(r.kl, 0.0);
  for (const auto& w : r.d_encoder.d_weight) EXPECT_EQ(w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SacLosses, SwappingCriticsLeavesTargetUnchanged) {
  auto agent = smooth_agent(tiny_config(), 13);
  auto batches = sample_batches(agent, 14);
  SacConfig sc;
  Rng rng(15);
  const auto noise = draw_update_noise(batches, 2, 3, rng);
  const auto a = critic_encoder_loss(agent, batches, noise, sc);
  auto swapped = agent;
  std::swap(swapped.q1, swapped.q2);
  std::swap(swapped.q1_target, swapped.q2_target);
  const auto b = critic_encoder_loss(swapped, batches, noise, sc);
  EXPECT_NEAR(a.critic_loss, b.critic_loss, 1e-12 * std::max(1.0, std::abs(a.critic_loss)));
  EXPECT_TRUE(a.d_q1.d_weight[0].isApprox(b.d_q2.d_weight[0], 1e-12));
}

TEST(SacUpdate, CriticConvergesToZeroOnTerminalZeroRewardTransition) {
  auto cfg = tiny_config();
  Rng rng(16);
  Learner learner(make_agent(cfg, rng), SacConfig{});
  TaskBatch b;
  b.obs = Mat::Constant(3, 8, 0.25);
  b.actions = Mat::Constant(3, 8, -0.5);
  b.next_obs = Mat::Constant(3, 8, 0.1);
  b.rewards = Vec::Zero(8);
  b.dones = Vec::Ones(8);
  b.context.resize(cfg.features.context_dim(cfg.channel()), 0);
  SacConfig sc;
  sc.critic_lr = 1e-3;
  learner.q1_opt.learning_rate = learner.q2_opt.learning_rate = 1e-3;
  LossReport rep;
  for (int i = 0; i < 1500; ++i) rep = sac_update(learner, {b}, sc, rng);
  Vec in(8);
  in << b.obs.col(0), b.actions.col(0), Vec::Zero(2);
  EXPECT_NEAR(nn::mlp_forward(learner.agent.q1, in)(0), 0.0, 1e-2);
  EXPECT_NEAR(nn::mlp_forward(learner.agent.q2, in)(0), 0.0, 1e-2);
}

TEST(SacUpdate, LossesFiniteAndAlphaAdapts) {
  auto cfg = tiny_config();
  Rng rng(17);
  Learner learner(make_agent(cfg, rng), SacConfig{});
  auto batches = sample_batches(learner.agent, 18, 2, 16, 8);
  const double a0 = learner.agent.log_alpha;
  for (int i = 0; i < 20; ++i) {
    const auto rep = sac_update(learner, batches, SacConfig{}, rng);
    EXPECT_TRUE(std::isfinite(rep.critic_loss) && std::isfinite(rep.policy_loss) && std::isfinite(rep.kl));
  }
  EXPECT_NE(learner.agent.log_alpha, a0);
}

TEST(Variants, ContextAndRewardChannels) {
  Rng rng(19);
  TaskReplay rep;
  env::TaskSpec task;
  task.offset_x = 2.0;
  for (Variant v : {Variant::OP_reward_context, Variant::MP_motion_context, Variant::MR_motion_reward}) {
    auto cfg = tiny_config(v);
    auto agent = make_agent(cfg, rng);
    TaskReplay r;
    collect_task_data(agent, task, 120, false, 3, r);
    // Every context column's aux slot must equal exactly one channel.
    const auto b = make_task_batch(cfg, r, 64, 64, rng);
    const int aux = 2 * cfg.obs_dim() + cfg.action_dim();
    for (Eigen::Index c = 0; c < b.context.cols(); ++c) {
      const double x = b.context(aux, c);
      bool from_reward = false, from_motion = false;
      for (const auto& t : r.buffer()) {
        if (x == t.reward / cfg.features.reward_scale && t.reward != 0.0) from_reward = true;
        if (x == t.motion / cfg.features.motion_scale && t.motion != 0.0) from_motion = true;
      }
      if (v == Variant::OP_reward_context) {
        EXPECT_TRUE(from_reward);
        EXPECT_FALSE(from_motion);
      } else {
        EXPECT_TRUE(from_motion || x == 0.0);
        EXPECT_FALSE(from_reward);
      }
    }
    for (const auto& t : r.buffer()) EXPECT_EQ(training_signal(v, t), v == Variant::MR_motion_reward ? t.motion : t.reward);
  }
}

TEST(Replay, ContextWindowKeepsMostRecent) {
  TaskReplay r(1000, 5);
  for (int i = 0; i < 12; ++i) {
    env::Transition t;
    t.reward = -i;
    r.add(t);
  }
  EXPECT_EQ(r.size(), 12u);
  EXPECT_EQ(r.context_size(), 5u);
  std::vector<double> seen;
  for (const auto& t : r.context()) seen.push_back(t.reward);
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<double>{-11, -10, -9, -8, -7}));
}

TEST(Replay, ContextSubsetOfBuffer) {
  TaskReplay r(1000, 50);
  Rng rng(20);
  auto agent = make_agent(tiny_config(), rng);
  collect_task_data(agent, env::TaskSpec{}, 200, false, 4, r);
  for (const auto& c : r.context()) {
    bool found = false;
    for (const auto& t : r.buffer()) found = found || (t.obs == c.obs && t.next_obs == c.next_obs && t.motion == c.motion);
    EXPECT_TRUE(found);
  }
}

TEST(Incremental, MatchesBatchPosterior) {
  Rng rng(21);
  auto agent = make_agent(tiny_config(), rng);
  TaskReplay r;
  collect_task_data(agent, env::TaskSpec{}, 60, false, 5, r);
  const Mat f = featurize_context(agent.config, r.buffer(), agent.config.channel());
  IncrementalPosterior inc(2);
  for (Eigen::Index c = 0; c < f.cols(); c += 7) inc.add(agent.encoder, f.middleCols(c, std::min<Eigen::Index>(7, f.cols() - c)));
  const auto all = latent::infer_posterior(agent.encoder, f);
  EXPECT_LT((inc.current().mean - all.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((inc.current().variance - all.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Checkpoint, AgentRoundTrip) {
  Rng rng(22);
  auto agent = make_agent(tiny_config(Variant::OP_reward_context), rng);
  agent.log_alpha = -1.25;
  const auto back = agent_from_json(nlohmann::json::parse(to_json(agent).dump()), agent.config.env);
  EXPECT_EQ(to_json(back).dump(), to_json(agent).dump());
  EXPECT_EQ(back.config.variant, Variant::OP_reward_context);
}

TEST(MetaTrain, SingleCentredTaskImprovesOnThreeSeeds) {
  for (std::uint64_t seed : {1, 2, 3}) {
    MetaTrainConfig mc;
    mc.seed = seed;
    mc.epochs = 10;
    mc.initial_steps_per_task = 400;
    mc.prior_steps_per_task = 100;
    mc.posterior_steps_per_task = 100;
    mc.updates_per_epoch = 150;
    mc.meta_batch = 1;
    mc.batch_size = 64;
    mc.context_batch = 32;
    mc.eval_trials = 2;
    mc.eval_trajectories = 2;
    auto cfg = tiny_config();
    cfg.hidden = {32, 32};
    std::vector<TaskGroup> groups{{"train", {env::TaskSpec{}}}};
    const auto res = meta_train(mc, cfg, groups);
    ASSERT_EQ(res.curves.size(), 10u);
    double best_late = -1e300;
    for (std::size_t e = 5; e < 10; ++e) best_late = std::max(best_late, res.curves[e].mean_return);
    EXPECT_GT(best_late, res.curves.front().mean_return) << "seed " << seed;
    EXPECT_GT(res.curves.back().mean_return, res.curves.front().mean_return) << "seed " << seed;
  }
}

TEST(MetaTrain, DeterministicCurves) {
  MetaTrainConfig mc;
  mc.epochs = 2;
  mc.initial_steps_per_task = 100;
  mc.prior_steps_per_task = 50;
  mc.posterior_steps_per_task = 50;
  mc.updates_per_epoch = 20;
  mc.batch_size = 16;
  mc.context_batch = 8;
  mc.meta_batch = 2;
  std::vector<TaskGroup> groups{{"train", env::square_grid(4, 2)}};
  const auto a = meta_train(mc, tiny_config(), groups);
  const auto b = meta_train(mc, tiny_config(), groups);
  ASSERT_EQ(a.curves.size(), b.curves.size());
  for (std::size_t i = 0; i < a.curves.size(); ++i) EXPECT_EQ(a.curves[i].mean_return, b.curves[i].mean_return);
  EXPECT_EQ(to_json(a.learner.agent).dump(), to_json(b.learner.agent).dump());
}

TEST(SacBaseline, CentredTaskSucceeds) {
  SacBaselineConfig cfg;
  cfg.max_steps = 3000;
  cfg.warmup_steps = 200;
  const auto r = train_sac_baseline(env::TaskSpec{}, tiny_config(), cfg);
  EXPECT_GT(r.steps_to_first_success, 0);
  EXPECT_LE(r.steps_to_first_success, cfg.max_steps);
  ASSERT_FALSE(r.episodes.empty());
  EXPECT_TRUE(r.episodes.back().success);
  EXPECT_EQ(r.episodes.back().end_step, r.steps_used);
}

TEST(SacBaseline, SameSeedSameCurve) {
  SacBaselineConfig cfg;
  cfg.max_steps = 600;
  cfg.warmup_steps = 100;
  cfg.stop_at_success = false;
  cfg.seed = 4;
  env::TaskSpec task;
  task.offset_x = 3.0;
  const auto a = train_sac_baseline(task, tiny_config(), cfg);
  const auto b = train_sac_baseline(task, tiny_config(), cfg);
  ASSERT_EQ(a.episodes.size(), b.episodes.size());
  for (std::size_t i = 0; i < a.episodes.size(); ++i) {
    EXPECT_EQ(a.episodes[i].motion_return, b.episodes[i].motion_return);
    EXPECT_EQ(a.episodes[i].end_step, b.episodes[i].end_step);
  }
  EXPECT_EQ(a.steps_used, 600);
}
