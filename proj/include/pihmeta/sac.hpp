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

// Latent-conditioned soft actor-critic with a context encoder trained through
// the critic loss, as used for PEARL-style meta training.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pihmeta/encoder.hpp"
#include "pihmeta/env.hpp"
#include "pihmeta/gaussian.hpp"
#include "pihmeta/numerics.hpp"

namespace pihmeta::meta {

using latent::ContextChannel;

/// OP: reward in the context, reward as the RL signal.
/// MP: motion in the context, reward as the RL signal.
/// MR: motion in the context and as the RL signal.
enum class Variant { OP_reward_context, MP_motion_context, MR_motion_reward };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::OP_reward_context: return "OP";
    case Variant::MP_motion_context: return "MP";
    case Variant::MR_motion_reward: return "MR";
  }
  return "MP";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "OP") return Variant::OP_reward_context;
  if (s == "MP") return Variant::MP_motion_context;
  if (s == "MR") return Variant::MR_motion_reward;
  throw ContractViolation("unknown variant '" + s + "' (expected OP, MP or MR)");
}

inline ContextChannel context_channel(Variant v) {
  return v == Variant::OP_reward_context ? ContextChannel::reward : ContextChannel::motion;
}

inline bool trains_on_motion(Variant v) { return v == Variant::MR_motion_reward; }

/// Maps raw simulator quantities into network inputs.
struct Featurizer {
  bool orientation = false;
  bool normalize = true;
  double position_scale = 4.0;  // delta
  double yaw_scale = 15.0;
  double reward_scale = 4.0;
  double motion_scale = 2.0;
  double force_scale = 10.0;

  [[nodiscard]] int obs_dim() const { return orientation ? 4 : 3; }
  [[nodiscard]] int action_dim() const { return orientation ? 4 : 3; }
  [[nodiscard]] int aux_dim(ContextChannel c) const { return c == ContextChannel::force ? 6 : 1; }
  [[nodiscard]] int context_dim(ContextChannel c) const { return 2 * obs_dim() + action_dim() + aux_dim(c); }

  [[nodiscard]] Vec obs(const Vec& o) const {
    if (!normalize) return o;
    Vec f = o / position_scale;
    if (orientation) f(3) = o(3) / yaw_scale;
    return f;
  }

  /// Actions enter networks in tanh units, i.e. divided by the per-axis limit.
  [[nodiscard]] Vec action(const env::EnvConfig& cfg, const env::Action& a) const {
    Vec v(action_dim());
    v(0) = a.dx / cfg.max_step;
    v(1) = a.dy / cfg.max_step;
    v(2) = a.dz / cfg.max_step;
    if (orientation) v(3) = a.dyaw / cfg.max_yaw_step;
    return v;
  }

  [[nodiscard]] Vec context(const env::EnvConfig& cfg, const env::Transition& t, ContextChannel c) const {
    const int od = obs_dim(), ad = action_dim();
    Vec f(context_dim(c));
    f.segment(0, od) = obs(t.obs);
    f.segment(od, ad) = action(cfg, t.action);
    f.segment(od + ad, od) = obs(t.next_obs);
    const double rs = normalize ? reward_scale : 1.0;
    const double ms = normalize ? motion_scale : 1.0;
    const double fs = normalize ? force_scale : 1.0;
    switch (c) {
      case ContextChannel::reward: f(2 * od + ad) = t.reward / rs; break;
      case ContextChannel::motion: f(2 * od + ad) = t.motion / ms; break;
      case ContextChannel::force:
        for (std::size_t k = 0; k < 6; ++k) f(2 * od + ad + static_cast<Eigen::Index>(k)) = t.force[k] / fs;
        break;
    }
    return f;
  }
};

struct AgentConfig {
  Variant variant = Variant::MP_motion_context;
  int latent_dim = 2;
  std::vector<int> hidden{64, 64, 64};
  std::vector<int> encoder_hidden{64, 64, 64};
  Featurizer features;
  env::EnvConfig env;

  [[nodiscard]] int obs_dim() const { return features.obs_dim(); }
  [[nodiscard]] int action_dim() const { return features.action_dim(); }
  [[nodiscard]] ContextChannel channel() const { return context_channel(variant); }
};

struct AgentBundle {
  AgentConfig config;
  nn::MlpParams policy;  // (obs, z) -> (mean, log_std) of the pre-tanh Gaussian
  nn::MlpParams q1, q2;  // (obs, action, z) -> Q
  nn::MlpParams q1_target, q2_target;
  latent::EncoderHead encoder;
  double log_alpha = 0.0;
};

inline AgentBundle make_agent(const AgentConfig& cfg, Rng& rng) {
  require(cfg.latent_dim > 0, "latent_dim must be positive");
  AgentBundle a;
  a.config = cfg;
  const int od = cfg.obs_dim(), ad = cfg.action_dim(), ld = cfg.latent_dim;
  auto dims = [&](int in, int out) {
    std::vector<int> d{in};
    d.insert(d.end(), cfg.hidden.begin(), cfg.hidden.end());
    d.push_back(out);
    return d;
  };
  a.policy = nn::make_mlp(dims(od + ld, 2 * ad), nn::Activation::relu, nn::Activation::identity, rng);
  a.q1 = nn::make_mlp(dims(od + ad + ld, 1), nn::Activation::relu, nn::Activation::identity, rng);
  a.q2 = nn::make_mlp(dims(od + ad + ld, 1), nn::Activation::relu, nn::Activation::identity, rng);
  a.q1_target = a.q1;
  a.q2_target = a.q2;
  a.encoder = latent::make_encoder(cfg.features.context_dim(cfg.channel()), ld, cfg.encoder_hidden, rng);
  return a;
}

// ---------------------------------------------------------------------------
// Policy

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kTanhEps = 1e-6;

/// Tanh-squashed Gaussian samples for a batch of (obs, z) columns. Actions are
/// in tanh units; the environment scale is applied by the caller.
struct PolicySample {
  Mat action;    // tanh(u)
  Mat u;
  Mat mean;
  Mat log_std;   // clamped
  Mat raw_log_std;
  Mat eps;
  Vec log_prob;
  nn::ForwardCache cache;
};

inline PolicySample policy_sample(const nn::MlpParams& policy, const Mat& inputs, const Mat& eps) {
  PolicySample s;
  const Mat out = nn::forward_batch(policy, inputs, &s.cache);
  const Eigen::Index ad = out.rows() / 2;
  require(eps.rows() == ad && eps.cols() == inputs.cols(), "policy noise shape mismatch");
  s.mean = out.topRows(ad);
  s.raw_log_std = out.bottomRows(ad);
  s.log_std = s.raw_log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  s.eps = eps;
  s.u = s.mean + s.log_std.array().exp().matrix().cwiseProduct(eps);
  s.action = s.u.array().tanh().matrix();
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  s.log_prob = (-0.5 * eps.array().square() - s.log_std.array() - half_log_2pi -
                (1.0 - s.action.array().square() + kTanhEps).log())
                   .colwise()
                   .sum()
                   .transpose();
  return s;
}

/// Back-propagates dL/d(action) and dL/d(log_prob) to the policy parameters.
inline nn::GradBundle policy_sample_backward(const nn::MlpParams& policy, const PolicySample& s, const Mat& d_action,
                                             const Vec& d_log_prob) {
  const Eigen::Index ad = s.mean.rows();
  const Mat one_minus_t2 = (1.0 - s.action.array().square()).matrix();
  // d log_prob / d u = 2 t (1 - t^2) / (1 - t^2 + eps)
  const Mat dlogp_du = (2.0 * s.action.array() * one_minus_t2.array() / (one_minus_t2.array() + kTanhEps)).matrix();
  Mat d_u = d_action.cwiseProduct(one_minus_t2);
  d_u += dlogp_du * d_log_prob.asDiagonal();
  const Mat sigma = s.log_std.array().exp().matrix();
  Mat d_log_std = d_u.cwiseProduct(sigma).cwiseProduct(s.eps);
  d_log_std.rowwise() -= d_log_prob.transpose();
  // Clamped entries pass no gradient.
  d_log_std = (s.raw_log_std.array() < kLogStdMin || s.raw_log_std.array() > kLogStdMax).select(0.0, d_log_std);
  Mat upstream(2 * ad, s.mean.cols());
  upstream.topRows(ad) = d_u;
  upstream.bottomRows(ad) = d_log_std;
  return nn::backward_batch(policy, s.cache, upstream);
}

inline Vec action_scale(const env::EnvConfig& cfg) {
  Vec s = Vec::Constant(cfg.action_dim(), cfg.max_step);
  if (cfg.orientation) s(3) = cfg.max_yaw_step;
  return s;
}

/// Tanh-squashed action scaled to the environment limits. Deterministic mode
/// returns the squashed mean.
inline env::Action policy_act(const AgentBundle& agent, const Vec& obs, const Vec& z, bool deterministic, Rng& rng) {
  const auto& cfg = agent.config;
  require(obs.size() == cfg.obs_dim(), "policy_act: observation length mismatch");
  require(z.size() == cfg.latent_dim, "policy_act: latent length mismatch");
  Vec input(cfg.obs_dim() + cfg.latent_dim);
  input << cfg.features.obs(obs), z;
  const Vec out = nn::mlp_forward(agent.policy, input);
  const int ad = cfg.action_dim();
  Vec u = out.head(ad);
  if (!deterministic) {
    const Vec log_std = out.tail(ad).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
    for (int k = 0; k < ad; ++k) u(k) += std::exp(log_std(k)) * standard_normal(rng);
  }
  const Vec a = action_scale(cfg.env).cwiseProduct(u.array().tanh().matrix());
  return env::clamp_action(cfg.env, env::action_from_vector(cfg.env, a));
}

// ---------------------------------------------------------------------------
// Updates

struct SacConfig {
  double discount = 0.99;
  double reward_scale = 1.0;
  double kl_weight = 0.1;  // beta
  double tau = 0.005;
  double policy_lr = 3e-4;
  double critic_lr = 3e-4;
  double encoder_lr = 3e-4;
  double alpha_lr = 3e-4;
  bool auto_entropy = true;
  double fixed_alpha = 1.0;  // used when auto_entropy is off
  bool sample_latent = true;  // false: z is the posterior mean (plain SAC with an empty context)
  std::optional<double> target_entropy;  // defaults to -action_dim
};

/// One task's slice of an update: RL transitions (columns) and context.
struct TaskBatch {
  Mat obs;       // featurized
  Mat actions;   // tanh units
  Mat next_obs;  // featurized
  Vec rewards;   // the variant's training signal, unscaled
  Vec dones;
  Mat context;   // featurized context tuples; may have zero columns
};

/// Noise consumed by one update, drawn up front so the loss is a pure
/// function of (parameters, batch, noise).
struct UpdateNoise {
  std::vector<Vec> z_eps;  // per task
  Mat next_action_eps;
  Mat new_action_eps;
};

inline UpdateNoise draw_update_noise(const std::vector<TaskBatch>& batches, int latent_dim, int action_dim, Rng& rng) {
  UpdateNoise n;
  Eigen::Index total = 0;
  for (const auto& b : batches) {
    Vec e(latent_dim);
    for (int k = 0; k < latent_dim; ++k) e(k) = standard_normal(rng);
    n.z_eps.push_back(e);
    total += b.obs.cols();
  }
  n.next_action_eps.resize(action_dim, total);
  n.new_action_eps.resize(action_dim, total);
  for (Eigen::Index c = 0; c < total; ++c)
    for (int k = 0; k < action_dim; ++k) n.next_action_eps(k, c) = standard_normal(rng);
  for (Eigen::Index c = 0; c < total; ++c)
    for (int k = 0; k < action_dim; ++k) n.new_action_eps(k, c) = standard_normal(rng);
  return n;
}

struct TaskLatent {
  latent::DiagGaussian posterior;
  Vec z;
  std::optional<latent::FactorBatch> factors;  // empty when the context was empty
};

inline TaskLatent infer_task_latent(const latent::EncoderHead& enc, const Mat& context, const Vec& eps) {
  TaskLatent tl;
  if (context.cols() > 0) {
    tl.factors = latent::encode_batch(enc, context);
    tl.posterior = latent::posterior_from_columns(tl.factors->means, tl.factors->variances);
  } else {
    tl.posterior = latent::DiagGaussian::standard(enc.latent_dim);
  }
  tl.z = tl.posterior.mean + tl.posterior.variance.cwiseSqrt().cwiseProduct(eps);
  return tl;
}

struct CriticLossResult {
  double critic_loss = 0.0;  // sum of both critics' MSE
  double kl = 0.0;           // sum over tasks of KL(posterior || N(0, I))
  double mean_q = 0.0;
  nn::GradBundle d_q1, d_q2, d_encoder;
  std::vector<Vec> task_z;
  [[nodiscard]] double encoder_loss(double kl_weight) const { return critic_loss + kl_weight * kl; }
};

namespace detail {

inline Mat stack_rows(std::initializer_list<const Mat*> parts) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = (*parts.begin())->cols();
  for (const Mat* p : parts) rows += p->rows();
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const Mat* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

}  // namespace detail

/// Twin-critic TD loss plus the KL-to-prior term, with gradients for both
/// critics and the encoder. The TD target is built from `target_z` when given
/// (it carries no encoder gradient either way).
inline CriticLossResult critic_encoder_loss(const AgentBundle& agent, const std::vector<TaskBatch>& batches,
                                            const UpdateNoise& noise, const SacConfig& cfg,
                                            const std::vector<Vec>* target_z = nullptr) {
  const int ld = agent.config.latent_dim;
  const int od = agent.config.obs_dim();
  const int ad = agent.config.action_dim();
  require(noise.z_eps.size() == batches.size(), "update noise does not match batch count");

  std::vector<TaskLatent> latents;
  Eigen::Index total = 0;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    latents.push_back(infer_task_latent(agent.encoder, batches[t].context, noise.z_eps[t]));
    total += batches[t].obs.cols();
  }
  Mat obs(od, total), act(ad, total), next_obs(od, total), z(ld, total), zt(ld, total);
  Vec rew(total), done(total);
  {
    Eigen::Index c = 0;
    for (std::size_t t = 0; t < batches.size(); ++t) {
      const auto& b = batches[t];
      const Eigen::Index n = b.obs.cols();
      obs.middleCols(c, n) = b.obs;
      act.middleCols(c, n) = b.actions;
      next_obs.middleCols(c, n) = b.next_obs;
      rew.segment(c, n) = b.rewards;
      done.segment(c, n) = b.dones;
      z.middleCols(c, n) = latents[t].z.replicate(1, n);
      zt.middleCols(c, n) = (target_z ? (*target_z)[t] : latents[t].z).replicate(1, n);
      c += n;
    }
  }
  const double alpha = cfg.auto_entropy ? std::exp(agent.log_alpha) : cfg.fixed_alpha;

  // TD target
  const Mat next_pi_in = detail::stack_rows({&next_obs, &zt});
  const PolicySample next = policy_sample(agent.policy, next_pi_in, noise.next_action_eps);
  const Mat tq_in = detail::stack_rows({&next_obs, &next.action, &zt});
  const Mat tq1 = nn::forward_batch(agent.q1_target, tq_in);
  const Mat tq2 = nn::forward_batch(agent.q2_target, tq_in);
  const Vec min_next = tq1.cwiseMin(tq2).row(0).transpose();
  const Vec target = cfg.reward_scale * rew.array() +
                     cfg.discount * (1.0 - done.array()) * (min_next.array() - alpha * next.log_prob.array());

  const Mat q_in = detail::stack_rows({&obs, &act, &z});
  nn::ForwardCache c1, c2;
  const Mat q1 = nn::forward_batch(agent.q1, q_in, &c1);
  const Mat q2 = nn::forward_batch(agent.q2, q_in, &c2);
  const Vec e1 = q1.row(0).transpose() - target;
  const Vec e2 = q2.row(0).transpose() - target;
  const double n = static_cast<double>(total);

  CriticLossResult r;
  r.critic_loss = e1.squaredNorm() / n + e2.squaredNorm() / n;
  r.mean_q = q1.mean();
  r.d_q1 = nn::backward_batch(agent.q1, c1, (2.0 / n) * e1.transpose());
  r.d_q2 = nn::backward_batch(agent.q2, c2, (2.0 / n) * e2.transpose());

  const Mat d_z_all = r.d_q1.d_input.bottomRows(ld) + r.d_q2.d_input.bottomRows(ld);
  r.d_encoder = nn::GradBundle::zeros_like(agent.encoder.trunk);
  const auto prior = latent::DiagGaussian::standard(ld);
  Eigen::Index c = 0;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const Eigen::Index m = batches[t].obs.cols();
    r.task_z.push_back(latents[t].z);
    const Vec d_z = d_z_all.middleCols(c, m).rowwise().sum();
    c += m;
    if (!latents[t].factors) continue;
    const auto& post = latents[t].posterior;
    r.kl += latent::kl_divergence(post, prior);
    latent::GaussianGrad g = latent::reparam_backward(post, noise.z_eps[t], d_z);
    const auto kg = latent::kl_divergence_grad(post, prior);
    g.d_mean += cfg.kl_weight * kg.p.d_mean;
    g.d_variance += cfg.kl_weight * kg.p.d_variance;
    r.d_encoder += latent::posterior_backward_to_encoder(agent.encoder, *latents[t].factors, post, g);
  }
  return r;
}

struct PolicyLossResult {
  double policy_loss = 0.0;
  double mean_log_prob = 0.0;
  nn::GradBundle d_policy;
};

/// alpha * log_prob - min(Q1, Q2) on reparameterized actions, z held fixed.
inline PolicyLossResult policy_loss(const AgentBundle& agent, const Mat& obs, const Mat& z, const Mat& eps,
                                    double alpha) {
  const Mat pi_in = detail::stack_rows({&obs, &z});
  const PolicySample s = policy_sample(agent.policy, pi_in, eps);
  const Mat q_in = detail::stack_rows({&obs, &s.action, &z});
  nn::ForwardCache c1, c2;
  const Mat q1 = nn::forward_batch(agent.q1, q_in, &c1);
  const Mat q2 = nn::forward_batch(agent.q2, q_in, &c2);
  const Eigen::Index n = obs.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Index od = obs.rows(), ad = s.action.rows();

  // Gradient of -min(Q1, Q2) w.r.t. the action, routed through whichever
  // critic is smaller per sample.
  const Mat g1 = nn::backward_batch(agent.q1, c1, Mat::Constant(1, n, -inv_n)).d_input.middleRows(od, ad);
  const Mat g2 = nn::backward_batch(agent.q2, c2, Mat::Constant(1, n, -inv_n)).d_input.middleRows(od, ad);
  Mat d_action(ad, n);
  PolicyLossResult r;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool first = q1(0, i) <= q2(0, i);
    d_action.col(i) = first ? g1.col(i) : g2.col(i);
    r.policy_loss += alpha * s.log_prob(i) - std::min(q1(0, i), q2(0, i));
  }
  r.policy_loss *= inv_n;
  r.mean_log_prob = s.log_prob.mean();
  r.d_policy = policy_sample_backward(agent.policy, s, d_action, Vec::Constant(n, alpha * inv_n));
  return r;
}

/// Agent plus everything needed to keep training it.
struct Learner {
  AgentBundle agent;
  nn::AdamState policy_opt, q1_opt, q2_opt, encoder_opt;
  nn::ScalarAdam alpha_opt;

  Learner() = default;
  Learner(AgentBundle a, const SacConfig& cfg)
      : agent(std::move(a)),
        policy_opt(nn::AdamState::for_params(agent.policy, cfg.policy_lr)),
        q1_opt(nn::AdamState::for_params(agent.q1, cfg.critic_lr)),
        q2_opt(nn::AdamState::for_params(agent.q2, cfg.critic_lr)),
        encoder_opt(nn::AdamState::for_params(agent.encoder.trunk, cfg.encoder_lr)) {
    alpha_opt.learning_rate = cfg.alpha_lr;
  }
};

struct LossReport {
  double critic_loss = 0.0;
  double kl = 0.0;
  double policy_loss = 0.0;
  double alpha = 0.0;
  double mean_q = 0.0;
  double entropy = 0.0;
};

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("sac_update: non-finite ") + what);
}

/// One gradient step on critics + encoder, then policy and temperature, then
/// Polyak averaging of the target critics.
inline LossReport sac_update(Learner& learner, const std::vector<TaskBatch>& batches, const SacConfig& cfg, Rng& rng) {
  auto& agent = learner.agent;
  const int ad = agent.config.action_dim();
  UpdateNoise noise = draw_update_noise(batches, agent.config.latent_dim, ad, rng);
  if (!cfg.sample_latent)
    for (auto& e : noise.z_eps) e.setZero();

  CriticLossResult cl = critic_encoder_loss(agent, batches, noise, cfg);
  check_finite(cl.critic_loss, "critic loss");
  check_finite(cl.kl, "kl");
  nn::adam_update(learner.q1_opt, agent.q1, cl.d_q1);
  nn::adam_update(learner.q2_opt, agent.q2, cl.d_q2);
  nn::adam_update(learner.encoder_opt, agent.encoder.trunk, cl.d_encoder);

  Eigen::Index total = 0;
  for (const auto& b : batches) total += b.obs.cols();
  Mat obs(agent.config.obs_dim(), total), z(agent.config.latent_dim, total);
  Eigen::Index c = 0;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const Eigen::Index n = batches[t].obs.cols();
    obs.middleCols(c, n) = batches[t].obs;
    z.middleCols(c, n) = cl.task_z[t].replicate(1, n);
    c += n;
  }
  const double alpha = cfg.auto_entropy ? std::exp(agent.log_alpha) : cfg.fixed_alpha;
  PolicyLossResult pl = policy_loss(agent, obs, z, noise.new_action_eps, alpha);
  check_finite(pl.policy_loss, "policy loss");
  nn::adam_update(learner.policy_opt, agent.policy, pl.d_policy);

  if (cfg.auto_entropy) {
    const double target = cfg.target_entropy.value_or(-static_cast<double>(ad));
    // d/dlog_alpha of -log_alpha * (log_prob + target)
    learner.alpha_opt.update(agent.log_alpha, -(pl.mean_log_prob + target));
  }

  nn::polyak_average(agent.q1_target, agent.q1, cfg.tau);
  nn::polyak_average(agent.q2_target, agent.q2, cfg.tau);

  LossReport rep;
  rep.critic_loss = cl.critic_loss;
  rep.kl = cl.kl;
  rep.policy_loss = pl.policy_loss;
  rep.alpha = alpha;
  rep.mean_q = cl.mean_q;
  rep.entropy = -pl.mean_log_prob;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const AgentBundle& a) {
  const auto& f = a.config.features;
  return {{"format_version", nn::kCheckpointFormatVersion},
          {"variant", to_string(a.config.variant)},
          {"latent_dim", a.config.latent_dim},
          {"hidden", a.config.hidden},
          {"encoder_hidden", a.config.encoder_hidden},
          {"orientation", a.config.env.orientation},
          {"features",
           {{"normalize", f.normalize},
            {"position_scale", f.position_scale},
            {"yaw_scale", f.yaw_scale},
            {"reward_scale", f.reward_scale},
            {"motion_scale", f.motion_scale},
            {"force_scale", f.force_scale}}},
          {"policy", nn::to_json(a.policy)},
          {"q1", nn::to_json(a.q1)},
          {"q2", nn::to_json(a.q2)},
          {"q1_target", nn::to_json(a.q1_target)},
          {"q2_target", nn::to_json(a.q2_target)},
          {"encoder", latent::to_json(a.encoder)},
          {"log_alpha", a.log_alpha}};
}

/// Restores an agent; the environment settings come from `env_cfg` since they
/// are part of the experiment, not the checkpoint.
inline AgentBundle agent_from_json(const nlohmann::json& j, const env::EnvConfig& env_cfg) {
  require(j.at("format_version").get<int>() == nn::kCheckpointFormatVersion, "unsupported agent checkpoint version");
  AgentBundle a;
  a.config.variant = variant_from_string(j.at("variant").get<std::string>());
  a.config.latent_dim = j.at("latent_dim").get<int>();
  a.config.hidden = j.at("hidden").get<std::vector<int>>();
  a.config.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
  a.config.env = env_cfg;
  a.config.env.orientation = j.at("orientation").get<bool>();
  const auto& f = j.at("features");
  a.config.features.orientation = a.config.env.orientation;
  a.config.features.normalize = f.at("normalize").get<bool>();
  a.config.features.position_scale = f.at("position_scale").get<double>();
  a.config.features.yaw_scale = f.at("yaw_scale").get<double>();
  a.config.features.reward_scale = f.at("reward_scale").get<double>();
  a.config.features.motion_scale = f.at("motion_scale").get<double>();
  a.config.features.force_scale = f.at("force_scale").get<double>();
  a.policy = nn::mlp_from_json(j.at("policy"));
  a.q1 = nn::mlp_from_json(j.at("q1"));
  a.q2 = nn::mlp_from_json(j.at("q2"));
  a.q1_target = nn::mlp_from_json(j.at("q1_target"));
  a.q2_target = nn::mlp_from_json(j.at("q2_target"));
  a.encoder = latent::encoder_from_json(j.at("encoder"));
  a.log_alpha = j.at("log_alpha").get<double>();
  return a;
}

}  // namespace pihmeta::meta
