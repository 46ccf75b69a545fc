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

#include <string>
#include <vector>

#include "pihmeta/gaussian.hpp"
#include "pihmeta/numerics.hpp"

namespace pihmeta::latent {

/// Which auxiliary channel rides along with (o, a, o') in a context tuple.
enum class ContextChannel { reward, motion, force };

inline std::string to_string(ContextChannel c) {
  switch (c) {
    case ContextChannel::reward: return "reward";
    case ContextChannel::motion: return "motion";
    case ContextChannel::force: return "force";
  }
  return "reward";
}

inline ContextChannel context_channel_from_string(const std::string& s) {
  if (s == "reward") return ContextChannel::reward;
  if (s == "motion") return ContextChannel::motion;
  if (s == "force") return ContextChannel::force;
  throw ContractViolation("unknown context channel '" + s + "'");
}

/// Featurized context tuples, one per column. All columns carry the same
/// auxiliary channel.
struct ContextBatch {
  ContextChannel channel = ContextChannel::motion;
  Mat features;

  [[nodiscard]] Eigen::Index size() const { return features.cols(); }
};

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// MLP whose output splits into (mean, raw variance); variance is
/// softplus(raw) + floor so every factor is a valid Gaussian.
struct EncoderHead {
  nn::MlpParams trunk;
  int latent_dim = 2;
  double variance_floor = 1e-6;
};

inline EncoderHead make_encoder(int input_dim, int latent_dim, const std::vector<int>& hidden, Rng& rng,
                                nn::Activation activation = nn::Activation::relu) {
  std::vector<int> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(2 * latent_dim);
  return {nn::make_mlp(dims, activation, nn::Activation::identity, rng), latent_dim, 1e-6};
}

/// Factors of a whole batch, kept column-wise together with what the
/// backward pass needs.
struct FactorBatch {
  Mat means;      // latent x n
  Mat variances;  // latent x n
  Mat raw;        // latent x n, pre-softplus
  nn::ForwardCache cache;

  [[nodiscard]] DiagGaussian factor(Eigen::Index i) const { return {means.col(i), variances.col(i)}; }
};

inline FactorBatch encode_batch(const EncoderHead& enc, const Mat& features) {
  require(features.rows() == enc.trunk.in_dim(),
          "context tuple arity (" + std::to_string(features.rows()) + ") != encoder input dim (" +
              std::to_string(enc.trunk.in_dim()) + ")");
  require(enc.trunk.out_dim() == 2 * enc.latent_dim, "encoder output must be 2 x latent_dim");
  FactorBatch fb;
  const Mat out = nn::forward_batch(enc.trunk, features, &fb.cache);
  const Eigen::Index d = enc.latent_dim;
  fb.means = out.topRows(d);
  fb.raw = out.bottomRows(d);
  fb.variances = fb.raw.unaryExpr([&](double x) { return softplus(x) + enc.variance_floor; });
  return fb;
}

/// Encoder parameter gradients given dL/d(means) and dL/d(variances).
inline nn::GradBundle encode_batch_backward(const EncoderHead& enc, const FactorBatch& fb, const Mat& d_means,
                                            const Mat& d_variances) {
  const Eigen::Index d = enc.latent_dim;
  Mat upstream(2 * d, fb.means.cols());
  upstream.topRows(d) = d_means;
  upstream.bottomRows(d) = d_variances.cwiseProduct(fb.raw.unaryExpr([](double x) { return sigmoid(x); }));
  return nn::backward_batch(enc.trunk, fb.cache, upstream);
}

/// One Gaussian factor per context tuple, in batch order.
inline std::vector<DiagGaussian> encode_factors(const EncoderHead& enc, const ContextBatch& batch) {
  const FactorBatch fb = encode_batch(enc, batch.features);
  std::vector<DiagGaussian> out;
  out.reserve(static_cast<std::size_t>(fb.means.cols()));
  for (Eigen::Index i = 0; i < fb.means.cols(); ++i) out.push_back(fb.factor(i));
  return out;
}

/// Posterior over the latent space for a context batch; prior N(0, I) when
/// the batch is empty.
inline DiagGaussian infer_posterior(const EncoderHead& enc, const Mat& features) {
  if (features.cols() == 0) return DiagGaussian::standard(enc.latent_dim);
  const FactorBatch fb = encode_batch(enc, features);
  return posterior_from_columns(fb.means, fb.variances);
}

/// Composite: gradient of a scalar loss on the posterior back to the encoder.
inline nn::GradBundle posterior_backward_to_encoder(const EncoderHead& enc, const FactorBatch& fb,
                                                    const DiagGaussian& post, const GaussianGrad& upstream) {
  Mat d_means, d_vars;
  posterior_backward(fb.means, fb.variances, post, upstream, d_means, d_vars);
  return encode_batch_backward(enc, fb, d_means, d_vars);
}

inline nlohmann::json to_json(const EncoderHead& e) {
  return {{"trunk", nn::to_json(e.trunk)}, {"latent_dim", e.latent_dim}, {"variance_floor", e.variance_floor}};
}

inline EncoderHead encoder_from_json(const nlohmann::json& j) {
  EncoderHead e;
  e.trunk = nn::mlp_from_json(j.at("trunk"));
  e.latent_dim = j.at("latent_dim").get<int>();
  e.variance_floor = j.at("variance_floor").get<double>();
  return e;
}

}  // namespace pihmeta::latent
