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

// Deployment-time adaptation: posterior updates from collected context,
// distillation of a force-channel encoder, and latent search for
// out-of-distribution hole positions.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pihmeta/encoder.hpp"
#include "pihmeta/env.hpp"
#include "pihmeta/gaussian.hpp"
#include "pihmeta/pearl.hpp"
#include "pihmeta/sac.hpp"

namespace pihmeta::adapt {

using latent::ContextChannel;
using latent::DiagGaussian;
using latent::EncoderHead;
using meta::AgentBundle;

enum class Protocol { trajectory_based, single_transition };

inline std::string to_string(Protocol p) {
  return p == Protocol::trajectory_based ? "trajectory_based" : "single_transition";
}

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "trajectory_based" || s == "trajectory") return Protocol::trajectory_based;
  if (s == "single_transition" || s == "single") return Protocol::single_transition;
  throw ContractViolation("unknown adaptation protocol '" + s + "'");
}

struct TraceRecord {
  int step = 0;  // 1-based adaptation step
  Vec z;         // latent that produced the action
  Vec posterior_mean;
  Vec posterior_variance;
  env::Action action;
  double motion = 0.0;
  bool contact = false;
  bool success = false;
};

struct AdaptationTrace {
  Protocol protocol = Protocol::single_transition;
  std::vector<TraceRecord> records;

  [[nodiscard]] bool success() const { return !records.empty() && records.back().success; }
  /// Step of first success, or -1.
  [[nodiscard]] int steps_to_success() const {
    for (const auto& r : records)
      if (r.success) return r.step;
    return -1;
  }
};

struct AdaptOptions {
  Protocol protocol = Protocol::single_transition;
  int max_steps = 200;
  env::SignSource sign_source = env::SignSource::ground_truth;
  bool deterministic_policy = true;
  // Alternative encoder (e.g. the force-channel one) and its channel.
  std::optional<EncoderHead> encoder;
  std::optional<ContextChannel> channel;
  std::uint64_t seed = 0;
};

/// Posterior adaptation on one task, starting from N(0, I). The latent is
/// resampled after every posterior update; stops at the first insertion or
/// after `max_steps`.
inline AdaptationTrace adapt(const AgentBundle& agent, const env::TaskSpec& task, const AdaptOptions& opt) {
  AdaptationTrace trace;
  trace.protocol = opt.protocol;
  if (opt.max_steps <= 0) return trace;
  const EncoderHead& enc = opt.encoder ? *opt.encoder : agent.encoder;
  const ContextChannel channel = opt.channel ? *opt.channel : agent.config.channel();
  env::EnvConfig ecfg = agent.config.env;
  ecfg.sign_source = opt.sign_source;
  env::PegInHoleEnv env(ecfg, task, opt.seed);
  Rng rng(meta::derive_seed(opt.seed, 0xADA));
  meta::IncrementalPosterior post(agent.config.latent_dim);
  Vec z = latent::sample_latent(post.current(), rng);
  std::vector<env::Transition> pending;
  bool success = false;
  env.reset();
  for (int step = 1; step <= opt.max_steps; ++step) {
    if (env.terminal()) env.reset();
    const auto a = meta::policy_act(agent, env.observation(), z, opt.deterministic_policy, rng);
    const auto t = env.step(a);
    pending.push_back(t);
    success = success || t.done;
    const bool traj_end = env.terminal();
    if (opt.protocol == Protocol::single_transition || traj_end) {
      post.add(enc, meta::featurize_context(agent.config, pending, channel));
      pending.clear();
    }
    const DiagGaussian g = post.current();
    trace.records.push_back({step, z, g.mean, g.variance, t.action, t.motion, t.contact, success});
    if (success) break;
    if (opt.protocol == Protocol::single_transition || traj_end) z = latent::sample_latent(g, rng);
  }
  return trace;
}

inline void write_trace_csv(std::ostream& os, const AdaptationTrace& trace, int latent_dim) {
  os << "step";
  for (int k = 0; k < latent_dim; ++k) os << ",z" << k;
  for (int k = 0; k < latent_dim; ++k) os << ",mu" << k;
  for (int k = 0; k < latent_dim; ++k) os << ",var" << k;
  os << ",m,success\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << ',' << buf;
  };
  for (const auto& r : trace.records) {
    os << r.step;
    for (int k = 0; k < latent_dim; ++k) num(r.z(k));
    for (int k = 0; k < latent_dim; ++k) num(r.posterior_mean(k));
    for (int k = 0; k < latent_dim; ++k) num(r.posterior_variance(k));
    num(r.motion);
    os << ',' << (r.success ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Distillation

/// Per-task paired context buffers. Column i of `actual` and `alternative`
/// come from transition i.
struct TaskDistillBuffer {
  std::vector<env::Transition> transitions;
  Mat actual;       // (o, a, o', m)
  Mat alternative;  // (o, a, o', f)
};

struct DistillBuffers {
  std::vector<TaskDistillBuffer> tasks;
  std::vector<Vec> latent_draws;        // every z used during collection
  std::vector<int> latent_sources;      // index of the training posterior each z came from
};

/// Rolls out the policy on each task with latents drawn (truncated at 3
/// sigma) from the recorded training-task posteriors, one draw per trajectory.
inline DistillBuffers collect_distill_dataset(const AgentBundle& agent, const std::vector<env::TaskSpec>& tasks,
                                              int samples_per_task, const std::vector<DiagGaussian>& training_posteriors,
                                              std::uint64_t seed) {
  require(!training_posteriors.empty(), "distillation collection needs training-task posteriors");
  DistillBuffers out;
  Rng rng(meta::derive_seed(seed, 0xD157));
  std::uniform_int_distribution<std::size_t> pick(0, training_posteriors.size() - 1);
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    env::PegInHoleEnv env(agent.config.env, tasks[ti], meta::derive_seed(seed, 0xD158, ti));
    TaskDistillBuffer buf;
    while (static_cast<int>(buf.transitions.size()) < samples_per_task) {
      const std::size_t src = pick(rng);
      const auto& g = training_posteriors[src];
      Vec eps(g.dim());
      for (Eigen::Index k = 0; k < eps.size(); ++k) {
        double e;
        do { e = standard_normal(rng); } while (std::abs(e) > 3.0);
        eps(k) = e;
      }
      const Vec z = g.mean + g.variance.cwiseSqrt().cwiseProduct(eps);
      out.latent_draws.push_back(z);
      out.latent_sources.push_back(static_cast<int>(src));
      env.reset();
      while (!env.terminal() && static_cast<int>(buf.transitions.size()) < samples_per_task) {
        buf.transitions.push_back(env.step(meta::policy_act(agent, env.observation(), z, false, rng)));
      }
    }
    buf.actual = meta::featurize_context(agent.config, buf.transitions, ContextChannel::motion);
    buf.alternative = meta::featurize_context(agent.config, buf.transitions, ContextChannel::force);
    out.tasks.push_back(std::move(buf));
  }
  return out;
}

enum class KlDirection { actual_to_estimated, estimated_to_actual };

struct DistillConfig {
  int iterations = 2000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  KlDirection direction = KlDirection::actual_to_estimated;
  // Use the same indices for both buffers (only meaningful for sanity checks
  // where both sides see identical tuples).
  bool paired_sampling = false;
  // Feed the alternative encoder the actual (motion) tuples instead of force.
  bool alternative_uses_actual_channel = false;
  std::uint64_t seed = 0;
};

struct DistillResult {
  EncoderHead encoder;
  std::vector<double> loss_curve;  // loss before each iteration's update
};

/// Initial alternative encoder that shares the trained trunk: hidden layers
/// are copied, the first layer keeps the (o, a, o') columns and starts the
/// auxiliary columns at zero.
inline EncoderHead warm_start_alternative(const EncoderHead& actual, int actual_aux_dim, int alt_aux_dim) {
  EncoderHead e = actual;
  const auto& w = actual.trunk.layers.front().weight;
  const Eigen::Index shared = w.cols() - actual_aux_dim;
  Mat nw = Mat::Zero(w.rows(), shared + alt_aux_dim);
  nw.leftCols(shared) = w.leftCols(shared);
  e.trunk.layers.front().weight = nw;
  return e;
}

/// Sum over tasks of the distillation KL for one set of batches, plus the
/// gradient for the alternative encoder.
inline double distill_loss(const EncoderHead& actual, const EncoderHead& alt, const std::vector<Mat>& actual_batches,
                           const std::vector<Mat>& alt_batches, KlDirection dir, nn::GradBundle* grad) {
  double loss = 0.0;
  if (grad) *grad = nn::GradBundle::zeros_like(alt.trunk);
  for (std::size_t t = 0; t < actual_batches.size(); ++t) {
    const DiagGaussian target = latent::infer_posterior(actual, actual_batches[t]);
    const auto fb = latent::encode_batch(alt, alt_batches[t]);
    const DiagGaussian est = latent::posterior_from_columns(fb.means, fb.variances);
    if (dir == KlDirection::actual_to_estimated) {
      loss += latent::kl_divergence(target, est);
      if (grad) *grad += latent::posterior_backward_to_encoder(alt, fb, est, latent::kl_divergence_grad(target, est).q);
    } else {
      loss += latent::kl_divergence(est, target);
      if (grad) *grad += latent::posterior_backward_to_encoder(alt, fb, est, latent::kl_divergence_grad(est, target).p);
    }
  }
  return loss;
}

/// Trains the alternative encoder so its posterior matches the frozen actual
/// encoder's on every task.
inline DistillResult train_alt_encoder(const DistillBuffers& buffers, const EncoderHead& actual, EncoderHead init,
                                       const DistillConfig& cfg) {
  require(!buffers.tasks.empty(), "distillation needs at least one task buffer");
  for (const auto& b : buffers.tasks) require(!b.transitions.empty(), "distillation task buffer is empty");
  DistillResult res;
  res.encoder = std::move(init);
  nn::AdamState opt = nn::AdamState::for_params(res.encoder.trunk, cfg.learning_rate);
  Rng rng(meta::derive_seed(cfg.seed, 0xD15));
  EncoderHead last_good = res.encoder;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Mat> a_batches, f_batches;
    for (const auto& b : buffers.tasks) {
      const auto n = static_cast<std::size_t>(b.actual.cols());
      std::uniform_int_distribution<std::size_t> u(0, n - 1);
      const auto bs = static_cast<Eigen::Index>(cfg.batch_size);
      Mat ab(b.actual.rows(), bs);
      const Mat& alt_src = cfg.alternative_uses_actual_channel ? b.actual : b.alternative;
      Mat fbm(alt_src.rows(), bs);
      for (Eigen::Index i = 0; i < bs; ++i) {
        const auto ia = static_cast<Eigen::Index>(u(rng));
        const auto ifx = cfg.paired_sampling ? ia : static_cast<Eigen::Index>(u(rng));
        ab.col(i) = b.actual.col(ia);
        fbm.col(i) = alt_src.col(ifx);
      }
      a_batches.push_back(std::move(ab));
      f_batches.push_back(std::move(fbm));
    }
    nn::GradBundle g;
    const double loss = distill_loss(actual, res.encoder, a_batches, f_batches, cfg.direction, &g);
    if (!std::isfinite(loss) || !g.all_finite()) {
      res.encoder = last_good;
      throw NonFiniteError("train_alt_encoder diverged at iteration " + std::to_string(it));
    }
    res.loss_curve.push_back(loss);
    last_good = res.encoder;
    nn::adam_update(opt, res.encoder.trunk, g);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Out-of-distribution adaptation

struct OodConfig {
  double alpha1 = 1.0;  // motion-weighted likelihood
  double alpha2 = 0.1;  // inverse-variance penalty
  double alpha3 = 1.0;  // pull toward the pre-step mean
  int n_explore = 100;
  int step_budget = 7000;
  double encoder_lr = 1e-4;
  bool normalize_sum = false;  // divide the likelihood term by N
  bool per_step_latent = true; // fresh z each step (else once per trajectory)
  int bootstrap_steps = 100;
  env::SignSource sign_source = env::SignSource::pixel_oracle;
  std::uint64_t seed = 0;
};

struct OodLossTerms {
  double likelihood = 0.0;  // -sum prob(z_n) m_n (before alpha1)
  double variance = 0.0;    // sum_d 1 / var_d
  double trust = 0.0;       // sum_d (mu_d - mu_bar_d)^2
  double total = 0.0;
};

/// Loss on a posterior and its gradient w.r.t. (mean, variance).
inline OodLossTerms ood_loss(const DiagGaussian& post, const std::vector<Vec>& zs, const std::vector<double>& ms,
                             const Vec& mu_bar, const OodConfig& cfg, latent::GaussianGrad* grad) {
  require(zs.size() == ms.size(), "ood_loss: latent/motion count mismatch");
  OodLossTerms t;
  latent::GaussianGrad g = latent::GaussianGrad::zeros(post.dim());
  const double norm = cfg.normalize_sum && !zs.empty() ? 1.0 / static_cast<double>(zs.size()) : 1.0;
  for (std::size_t n = 0; n < zs.size(); ++n) {
    const double p = std::exp(latent::log_density(post, zs[n]));
    t.likelihood -= norm * p * ms[n];
    // d prob / d theta = prob * d log_density / d theta
    const auto lg = latent::log_density_grad(post, zs[n]);
    g.d_mean -= cfg.alpha1 * norm * p * ms[n] * lg.d_mean;
    g.d_variance -= cfg.alpha1 * norm * p * ms[n] * lg.d_variance;
  }
  t.variance = post.variance.cwiseInverse().sum();
  g.d_variance -= cfg.alpha2 * post.variance.cwiseProduct(post.variance).cwiseInverse();
  const Vec diff = post.mean - mu_bar;
  t.trust = diff.squaredNorm();
  g.d_mean += 2.0 * cfg.alpha3 * diff;
  t.total = cfg.alpha1 * t.likelihood + cfg.alpha2 * t.variance + cfg.alpha3 * t.trust;
  if (grad) *grad = g;
  return t;
}

struct OodIteration {
  int step = 0;  // adaptation steps consumed when the update happened
  OodLossTerms loss;
  Vec mean_before, mean_after;
  Vec variance_before, variance_after;
  double encoder_delta = 0.0;  // L2 norm of the parameter change
};

struct OodResult {
  AdaptationTrace trace;
  std::vector<OodIteration> iterations;
  EncoderHead encoder;  // adapted encoder
  bool bootstrap_success = false;
};

namespace detail {

inline double param_distance(const nn::MlpParams& a, const nn::MlpParams& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    s += (a.layers[k].weight - b.layers[k].weight).squaredNorm();
    s += (a.layers[k].bias - b.layers[k].bias).squaredNorm();
  }
  return std::sqrt(s);
}

}  // namespace detail

/// Bootstrap with single-transition inference from the prior, then alternate
/// between collecting `n_explore` steps under the current posterior and one
/// encoder step on the OOD loss. Stops at success or when the budget is spent.
inline OodResult ood_adapt(const AgentBundle& agent, const env::TaskSpec& task, const OodConfig& cfg) {
  require(cfg.n_explore >= 1, "n_explore must be at least 1");
  require(cfg.alpha1 >= 0.0 && cfg.alpha2 >= 0.0 && cfg.alpha3 >= 0.0, "ood weights must be non-negative");
  OodResult res;
  res.encoder = agent.encoder;
  res.trace.protocol = Protocol::single_transition;
  env::EnvConfig ecfg = agent.config.env;
  ecfg.sign_source = cfg.sign_source;
  env::PegInHoleEnv env(ecfg, task, cfg.seed);
  Rng rng(meta::derive_seed(cfg.seed, 0x00D));
  const ContextChannel channel = agent.config.channel();
  nn::AdamState opt = nn::AdamState::for_params(res.encoder.trunk, cfg.encoder_lr);
  int step = 0;
  bool success = false;
  env.reset();

  auto do_step = [&](const Vec& z, const DiagGaussian& shown) {
    if (env.terminal()) env.reset();
    const auto a = meta::policy_act(agent, env.observation(), z, true, rng);
    const auto t = env.step(a);
    ++step;
    success = success || t.done;
    res.trace.records.push_back({step, z, shown.mean, shown.variance, t.action, t.motion, t.contact, success});
    return t;
  };

  // Bootstrap from the prior.
  meta::IncrementalPosterior boot(agent.config.latent_dim);
  std::vector<env::Transition> recent;
  Vec z = latent::sample_latent(boot.current(), rng);
  for (int k = 0; k < cfg.bootstrap_steps && step < cfg.step_budget && !success; ++k) {
    const auto t = do_step(z, boot.current());
    recent.push_back(t);
    boot.add(res.encoder, meta::featurize_context(agent.config, {t}, channel));
    z = latent::sample_latent(boot.current(), rng);
  }
  if (success) {
    res.bootstrap_success = true;
    return res;
  }
  auto recent_features = [&]() { return meta::featurize_context(agent.config, recent, channel); };
  DiagGaussian current = latent::infer_posterior(res.encoder, recent_features());

  while (!success && step < cfg.step_budget) {
    std::vector<Vec> zs;
    std::vector<double> ms;
    std::vector<env::Transition> batch;
    Vec traj_z = latent::sample_latent(current, rng);
    for (int k = 0; k < cfg.n_explore && step < cfg.step_budget && !success; ++k) {
      if (env.terminal() && !cfg.per_step_latent) traj_z = latent::sample_latent(current, rng);
      const Vec zn = cfg.per_step_latent ? latent::sample_latent(current, rng) : traj_z;
      const auto t = do_step(zn, current);
      zs.push_back(zn);
      ms.push_back(t.motion);
      batch.push_back(t);
    }
    if (success || batch.empty()) break;
    recent = batch;
    const Mat feats = recent_features();
    const auto fb = latent::encode_batch(res.encoder, feats);
    const DiagGaussian post = latent::posterior_from_columns(fb.means, fb.variances);
    latent::GaussianGrad g;
    OodIteration it;
    it.step = step;
    it.loss = ood_loss(post, zs, ms, current.mean, cfg, &g);
    if (!std::isfinite(it.loss.total)) throw NonFiniteError("ood_adapt: non-finite loss at step " + std::to_string(step));
    it.mean_before = post.mean;
    it.variance_before = post.variance;
    const nn::MlpParams before = res.encoder.trunk;
    nn::adam_update(opt, res.encoder.trunk, latent::posterior_backward_to_encoder(res.encoder, fb, post, g));
    current = latent::infer_posterior(res.encoder, feats);
    it.mean_after = current.mean;
    it.variance_after = current.variance;
    it.encoder_delta = detail::param_distance(before, res.encoder.trunk);
    res.iterations.push_back(std::move(it));
  }
  return res;
}

}  // namespace pihmeta::adapt
