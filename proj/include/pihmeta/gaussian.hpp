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

// Diagonal Gaussians over the latent task space: product-of-factors
// posteriors, KL divergence, log density, sampling, and the adjoints of each
// so encoder gradients can be propagated by hand.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "pihmeta/numerics.hpp"

namespace pihmeta::latent {

struct DiagGaussian {
  Vec mean;
  Vec variance;

  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }

  static DiagGaussian standard(Eigen::Index dim) { return {Vec::Zero(dim), Vec::Ones(dim)}; }
};

inline void validate(const DiagGaussian& g) {
  require(g.mean.size() == g.variance.size(), "gaussian mean/variance length mismatch");
  require((g.variance.array() > 0.0).all(), "gaussian variance must be strictly positive");
}

/// Gradient of a scalar w.r.t. a DiagGaussian's parameters.
struct GaussianGrad {
  Vec d_mean;
  Vec d_variance;

  static GaussianGrad zeros(Eigen::Index dim) { return {Vec::Zero(dim), Vec::Zero(dim)}; }
  GaussianGrad& operator+=(const GaussianGrad& o) {
    d_mean += o.d_mean;
    d_variance += o.d_variance;
    return *this;
  }
};

/// Precision-weighted product of `factors`. The prior is returned unchanged
/// when there are no factors; otherwise it does not enter the product.
inline DiagGaussian posterior(std::span<const DiagGaussian> factors, const DiagGaussian& prior) {
  if (factors.empty()) return prior;
  const Eigen::Index d = factors.front().dim();
  Vec precision = Vec::Zero(d);
  Vec weighted = Vec::Zero(d);
  for (const auto& f : factors) {
    require(f.dim() == d && f.variance.size() == d, "posterior: factor dimension mismatch");
    const Vec p = f.variance.cwiseInverse();
    precision += p;
    weighted += p.cwiseProduct(f.mean);
  }
  require(prior.dim() == d, "posterior: prior dimension mismatch");
  DiagGaussian out;
  out.variance = precision.cwiseInverse();
  out.mean = out.variance.cwiseProduct(weighted);
  return out;
}

inline DiagGaussian posterior(const std::vector<DiagGaussian>& factors, const DiagGaussian& prior) {
  return posterior(std::span<const DiagGaussian>(factors), prior);
}

/// Product of factors stored column-wise: means/variances are latent x n.
inline DiagGaussian posterior_from_columns(const Mat& means, const Mat& variances) {
  require(means.rows() == variances.rows() && means.cols() == variances.cols() && means.cols() > 0,
          "posterior: factor matrices must be congruent and nonempty");
  const Mat p = variances.cwiseInverse();
  DiagGaussian out;
  out.variance = p.rowwise().sum().cwiseInverse();
  out.mean = out.variance.cwiseProduct(p.cwiseProduct(means).rowwise().sum());
  return out;
}

/// Back-propagates (d_mean, d_variance) of the product to each factor column.
inline void posterior_backward(const Mat& means, const Mat& variances, const DiagGaussian& post,
                               const GaussianGrad& upstream, Mat& d_means, Mat& d_variances) {
  const Eigen::Index n = means.cols();
  d_means.resize(means.rows(), n);
  d_variances.resize(means.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec inv_v = variances.col(i).cwiseInverse();
    const Vec inv_v2 = inv_v.cwiseProduct(inv_v);
    // dM/dmu_i = V/v_i ; dM/dv_i = -V (mu_i - M) / v_i^2 ; dV/dv_i = V^2 / v_i^2
    d_means.col(i) = upstream.d_mean.cwiseProduct(post.variance).cwiseProduct(inv_v);
    d_variances.col(i) =
        -upstream.d_mean.cwiseProduct(post.variance).cwiseProduct(means.col(i) - post.mean).cwiseProduct(inv_v2) +
        upstream.d_variance.cwiseProduct(post.variance.cwiseProduct(post.variance)).cwiseProduct(inv_v2);
  }
}

/// Draws from g. When `eps_out` is given it receives the standard-normal noise
/// so the reparameterized z = mean + sqrt(variance) * eps can be differentiated.
inline Vec sample_latent(const DiagGaussian& g, Rng& rng, Vec* eps_out = nullptr) {
  Vec eps(g.dim());
  for (Eigen::Index k = 0; k < eps.size(); ++k) eps(k) = standard_normal(rng);
  if (eps_out) *eps_out = eps;
  return g.mean + g.variance.cwiseSqrt().cwiseProduct(eps);
}

/// dL/d(mean, variance) for z = mean + sqrt(variance) * eps given dL/dz.
inline GaussianGrad reparam_backward(const DiagGaussian& g, const Vec& eps, const Vec& d_z) {
  return {d_z, d_z.cwiseProduct(eps).cwiseQuotient(2.0 * g.variance.cwiseSqrt())};
}

/// Closed-form KL(p || q) for diagonal Gaussians.
inline double kl_divergence(const DiagGaussian& p, const DiagGaussian& q) {
  require(p.dim() == q.dim(), "kl: dimension mismatch");
  validate(p);
  validate(q);
  const Vec diff = p.mean - q.mean;
  const double kl = 0.5 * ((q.variance.array() / p.variance.array()).log() +
                           (p.variance.array() + diff.array().square()) / q.variance.array() - 1.0)
                              .sum();
  return std::max(kl, 0.0);
}

struct KlGrad {
  GaussianGrad p;
  GaussianGrad q;
};

inline KlGrad kl_divergence_grad(const DiagGaussian& p, const DiagGaussian& q) {
  require(p.dim() == q.dim(), "kl: dimension mismatch");
  const Vec diff = p.mean - q.mean;
  const Vec inv_q = q.variance.cwiseInverse();
  KlGrad g;
  g.p.d_mean = diff.cwiseProduct(inv_q);
  g.p.d_variance = 0.5 * (inv_q - p.variance.cwiseInverse());
  g.q.d_mean = -g.p.d_mean;
  g.q.d_variance =
      0.5 * (inv_q - (p.variance + diff.cwiseProduct(diff)).cwiseProduct(inv_q.cwiseProduct(inv_q)));
  return g;
}

inline double log_density(const DiagGaussian& g, const Vec& z) {
  require(z.size() == g.dim(), "log_density: dimension mismatch");
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const Vec diff = z - g.mean;
  return -0.5 * ((g.variance.array().log() + log2pi) + diff.array().square() / g.variance.array()).sum();
}

/// Gradient of log_density w.r.t. the Gaussian's parameters.
inline GaussianGrad log_density_grad(const DiagGaussian& g, const Vec& z) {
  const Vec diff = z - g.mean;
  const Vec inv_v = g.variance.cwiseInverse();
  return {diff.cwiseProduct(inv_v),
          0.5 * (diff.cwiseProduct(diff).cwiseProduct(inv_v.cwiseProduct(inv_v)) - inv_v)};
}

}  // namespace pihmeta::latent
