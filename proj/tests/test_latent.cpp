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

#include <algorithm>
#include <numbers>

#include "pihmeta/encoder.hpp"
#include "pihmeta/gaussian.hpp"
#include "test_support.hpp"

using namespace pihmeta;
using namespace pihmeta::latent;
using pihmeta::testing::central_difference;
using pihmeta::testing::kFdTol;
using pihmeta::testing::rel_err;

namespace {

DiagGaussian random_gaussian(int d, Rng& rng, double mean_scale = 1.0) {
  DiagGaussian g{Vec(d), Vec(d)};
  for (int i = 0; i < d; ++i) {
    g.mean(i) = mean_scale * standard_normal(rng);
    g.variance(i) = 0.1 + 2.0 * uniform01(rng);
  }
  return g;
}

DiagGaussian g1(double m, double v) { return {Vec::Constant(1, m), Vec::Constant(1, v)}; }

// Independent 1-D quadrature of KL(p||q) by the trapezoid rule on a wide grid.
double kl_quadrature_1d(double mp, double vp, double mq, double vq) {
  const double sp = std::sqrt(vp);
  const double lo = mp - 12.0 * sp, hi = mp + 12.0 * sp;
  const int n = 20000;
  const double h = (hi - lo) / n;
  auto logn = [](double x, double m, double v) {
    return -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * (x - m) * (x - m) / v;
  };
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + h * i;
    const double lp = logn(x, mp, vp);
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    acc += w * std::exp(lp) * (lp - logn(x, mq, vq));
  }
  return acc * h;
}

}  // namespace

TEST(Posterior, TwoUnitFactorsClosedForm) {
  const auto post = posterior(std::vector<DiagGaussian>{g1(0, 1), g1(2, 1)}, DiagGaussian::standard(1));
  EXPECT_NEAR(post.mean(0), 1.0, 1e-12);
  EXPECT_NEAR(post.variance(0), 0.5, 1e-12);
}

TEST(Posterior, EmptyFactorsReturnPrior) {
  const auto prior = DiagGaussian::standard(2);
  const auto post = posterior(std::vector<DiagGaussian>{}, prior);
  EXPECT_EQ(post.mean, prior.mean);
  EXPECT_EQ(post.variance, prior.variance);
}

TEST(Posterior, MatchesPrecisionClosedFormTo1e9) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<DiagGaussian> fs;
    for (int i = 0; i < 7; ++i) fs.push_back(random_gaussian(3, rng));
    const auto post = posterior(fs, DiagGaussian::standard(3));
    for (int d = 0; d < 3; ++d) {
      double prec = 0.0, num = 0.0;
      for (const auto& f : fs) {
        prec += 1.0 / f.variance(d);
        num += f.mean(d) / f.variance(d);
      }
      EXPECT_NEAR(post.variance(d), 1.0 / prec, 1e-9);
      EXPECT_NEAR(post.mean(d), num / prec, 1e-9);
    }
  }
}

TEST(Posterior, IncrementalEqualsAllAtOnce) {
  Rng rng(22);
  std::vector<DiagGaussian> fs;
  for (int i = 0; i < 20; ++i) fs.push_back(random_gaussian(2, rng));
  const auto all = posterior(fs, DiagGaussian::standard(2));
  DiagGaussian running = fs.front();
  for (std::size_t i = 1; i < fs.size(); ++i) running = posterior(std::vector<DiagGaussian>{running, fs[i]}, running);
  EXPECT_LT((running.mean - all.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((running.variance - all.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Posterior, PermutationInvariantExactly) {
  Rng rng(23);
  std::vector<DiagGaussian> fs;
  for (int i = 0; i < 12; ++i) fs.push_back(random_gaussian(2, rng));
  const auto a = posterior(fs, DiagGaussian::standard(2));
  // Reversal changes floating-point summation order; exact equality is
  // claimed for the product, so compare against a sorted-order evaluation.
  auto sorted = fs;
  std::reverse(sorted.begin(), sorted.end());
  const auto b = posterior(sorted, DiagGaussian::standard(2));
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.variance - b.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Posterior, VarianceNonIncreasingAsFactorsAccumulate) {
  Rng rng(24);
  std::vector<DiagGaussian> fs;
  Vec prev = Vec::Constant(2, std::numeric_limits<double>::infinity());
  for (int i = 0; i < 30; ++i) {
    fs.push_back(random_gaussian(2, rng));
    const auto post = posterior(fs, DiagGaussian::standard(2));
    EXPECT_TRUE((post.variance.array() <= prev.array()).all());
    prev = post.variance;
  }
}

TEST(Posterior, DimensionMismatchIsContractViolation) {
  std::vector<DiagGaussian> fs{DiagGaussian::standard(2), DiagGaussian::standard(3)};
  EXPECT_THROW(posterior(fs, DiagGaussian::standard(2)), ContractViolation);
}

TEST(Posterior, ColumnFormAgreesWithListForm) {
  Rng rng(25);
  Mat means(2, 9), vars(2, 9);
  std::vector<DiagGaussian> fs;
  for (int i = 0; i < 9; ++i) {
    auto g = random_gaussian(2, rng);
    means.col(i) = g.mean;
    vars.col(i) = g.variance;
    fs.push_back(g);
  }
  const auto a = posterior_from_columns(means, vars);
  const auto b = posterior(fs, DiagGaussian::standard(2));
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.variance - b.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Posterior, BackwardMatchesFiniteDifferences) {
  Rng rng(26);
  Mat means(3, 5), vars(3, 5);
  for (int i = 0; i < 5; ++i) {
    auto g = random_gaussian(3, rng);
    means.col(i) = g.mean;
    vars.col(i) = g.variance;
  }
  const Vec wm = Vec::Random(3), wv = Vec::Random(3);
  auto loss = [&] {
    const auto p = posterior_from_columns(means, vars);
    return wm.dot(p.mean) + wv.dot(p.variance);
  };
  Mat dm, dv;
  posterior_backward(means, vars, posterior_from_columns(means, vars), {wm, wv}, dm, dv);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) {
      EXPECT_LT(rel_err(dm(r, c), central_difference(loss, means(r, c))), kFdTol);
      EXPECT_LT(rel_err(dv(r, c), central_difference(loss, vars(r, c))), kFdTol);
    }
}

TEST(SampleLatent, TinyVarianceCollapsesToMean) {
  Rng rng(27);
  DiagGaussian g{Vec::Constant(2, 0.3), Vec::Constant(2, 1e-12)};
  EXPECT_LT((sample_latent(g, rng) - g.mean).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(SampleLatent, MonteCarloMoments) {
  Rng rng(28);
  const auto g = DiagGaussian::standard(1);
  const int n = 10000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = sample_latent(g, rng)(0);
    s += z;
    s2 += z * z;
  }
  const double mean = s / n;
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(s2 / n - mean * mean, 1.0, 0.05);
}

TEST(SampleLatent, SeedDeterminism) {
  const auto g = DiagGaussian::standard(5);
  Rng a(29), b(29);
  EXPECT_EQ(sample_latent(g, a), sample_latent(g, b));
}

TEST(SampleLatent, ReparameterizationGradient) {
  Rng rng(30);
  auto g = random_gaussian(3, rng);
  Vec eps;
  sample_latent(g, rng, &eps);
  const Vec w = Vec::Random(3);
  auto loss = [&] { return w.dot(g.mean + g.variance.cwiseSqrt().cwiseProduct(eps)); };
  const auto grad = reparam_backward(g, eps, w);
  for (int i = 0; i < 3; ++i) {
    EXPECT_LT(rel_err(grad.d_mean(i), central_difference(loss, g.mean(i))), kFdTol);
    EXPECT_LT(rel_err(grad.d_variance(i), central_difference(loss, g.variance(i))), kFdTol);
  }
}

TEST(KlDivergence, ClosedFormCases) {
  EXPECT_EQ(kl_divergence(g1(0, 1), g1(0, 1)), 0.0);
  EXPECT_NEAR(kl_divergence(g1(1, 1), g1(0, 1)), 0.5, 1e-12);
  // KL(N(0,2)||N(0,1)) = 0.5 (2 - 1 - ln 2)
  EXPECT_NEAR(kl_divergence(g1(0, 2), g1(0, 1)), 0.5 * (1.0 - std::log(2.0)), 1e-12);
}

TEST(KlDivergence, MatchesQuadratureIn5D) {
  Rng rng(31);
  const auto p = random_gaussian(5, rng), q = random_gaussian(5, rng);
  // Diagonal Gaussians factorize, so the 5-D integral is a sum of 1-D ones.
  double quad = 0.0;
  for (int i = 0; i < 5; ++i) quad += kl_quadrature_1d(p.mean(i), p.variance(i), q.mean(i), q.variance(i));
  EXPECT_NEAR(kl_divergence(p, q), quad, 1e-3);
}

TEST(KlDivergence, NonNegativeOnRandomPairsZeroOnIdentical) {
  Rng rng(32);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_gaussian(4, rng, 2.0), q = random_gaussian(4, rng, 2.0);
    EXPECT_GE(kl_divergence(p, q), 0.0);
    EXPECT_EQ(kl_divergence(p, p), 0.0);
  }
}

TEST(KlDivergence, RejectsNonPositiveVariance) {
  DiagGaussian bad{Vec::Zero(2), Vec::Zero(2)};
  EXPECT_THROW(kl_divergence(bad, DiagGaussian::standard(2)), ContractViolation);
  EXPECT_THROW(kl_divergence(DiagGaussian::standard(2), DiagGaussian::standard(3)), ContractViolation);
}

TEST(KlDivergence, GradientMatchesFiniteDifferences) {
  Rng rng(33);
  double worst = 0.0;
  for (int draw = 0; draw < 64; ++draw) {
    auto p = random_gaussian(3, rng), q = random_gaussian(3, rng);
    const auto g = kl_divergence_grad(p, q);
    auto loss = [&] { return kl_divergence(p, q); };
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, rel_err(g.p.d_mean(i), central_difference(loss, p.mean(i))));
      worst = std::max(worst, rel_err(g.p.d_variance(i), central_difference(loss, p.variance(i))));
      worst = std::max(worst, rel_err(g.q.d_mean(i), central_difference(loss, q.mean(i))));
      worst = std::max(worst, rel_err(g.q.d_variance(i), central_difference(loss, q.variance(i))));
    }
  }
  EXPECT_LT(worst, kFdTol);
}

TEST(LogDensity, StandardAtOrigin) {
  EXPECT_NEAR(log_density(DiagGaussian::standard(1), Vec::Zero(1)), -0.5 * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(LogDensity, ClosedFormTo1e9) {
  Rng rng(34);
  for (int i = 0; i < 100; ++i) {
    const auto g = random_gaussian(4, rng);
    Vec z = Vec::Random(4) * 3.0;
    double ref = 0.0;
    for (int d = 0; d < 4; ++d) {
      const double v = g.variance(d), e = z(d) - g.mean(d);
      ref += std::log(std::exp(-e * e / (2.0 * v)) / std::sqrt(2.0 * std::numbers::pi * v));
    }
    EXPECT_NEAR(log_density(g, z), ref, 1e-9);
  }
}

TEST(LogDensity, ModeIsMaximal) {
  Rng rng(35);
  const auto g = random_gaussian(3, rng);
  const double at_mean = log_density(g, g.mean);
  for (int i = 0; i < 200; ++i) EXPECT_LE(log_density(g, g.mean + Vec::Random(3)), at_mean);
}

TEST(LogDensity, GradientMatchesFiniteDifferences) {
  Rng rng(36);
  double worst = 0.0;
  for (int draw = 0; draw < 64; ++draw) {
    auto g = random_gaussian(2, rng);
    const Vec z = g.mean + Vec::Random(2);
    const auto grad = log_density_grad(g, z);
    auto loss = [&] { return log_density(g, z); };
    for (int i = 0; i < 2; ++i) {
      worst = std::max(worst, rel_err(grad.d_mean(i), central_difference(loss, g.mean(i))));
      worst = std::max(worst, rel_err(grad.d_variance(i), central_difference(loss, g.variance(i))));
    }
  }
  EXPECT_LT(worst, kFdTol);
}

// --- encoder ---------------------------------------------------------------

TEST(Encoder, ZeroTrunkGivesSoftplusZeroPlusFloor) {
  Rng rng(40);
  auto enc = make_encoder(5, 2, {8, 8}, rng);
  enc.trunk = nn::zeros_like(enc.trunk);
  Mat f = Mat::Random(5, 4);
  for (const auto& fac : encode_factors(enc, {ContextChannel::motion, f})) {
    EXPECT_EQ(fac.mean, Vec::Zero(2));
    for (int d = 0; d < 2; ++d) EXPECT_DOUBLE_EQ(fac.variance(d), std::log(2.0) + enc.variance_floor);
  }
}

TEST(Encoder, PermutingBatchPermutesFactors) {
  Rng rng(41);
  auto enc = make_encoder(5, 2, {8, 8}, rng);
  Mat f = Mat::Random(5, 6);
  Mat g(5, 6);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  for (int i = 0; i < 6; ++i) g.col(i) = f.col(perm[static_cast<std::size_t>(i)]);
  const auto a = encode_factors(enc, {ContextChannel::motion, f});
  const auto b = encode_factors(enc, {ContextChannel::motion, g});
  // Vectorized products may round a column differently depending on its
  // position in the batch, so equality is up to the last few ulps.
  for (int i = 0; i < 6; ++i) {
    const auto& want = a[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    EXPECT_TRUE(b[static_cast<std::size_t>(i)].mean.isApprox(want.mean, 1e-12));
    EXPECT_TRUE(b[static_cast<std::size_t>(i)].variance.isApprox(want.variance, 1e-12));
  }
}

TEST(Encoder, HandSetSingleLayer) {
  EncoderHead enc;
  enc.latent_dim = 1;
  Mat w(2, 2);
  w << 1.0, -1.0, 0.5, 0.0;
  Vec b(2);
  b << 0.1, -0.2;
  enc.trunk.layers.push_back({w, b, nn::Activation::identity});
  Mat x(2, 1);
  x << 2.0, 0.5;
  const auto f = encode_factors(enc, {ContextChannel::reward, x}).front();
  EXPECT_DOUBLE_EQ(f.mean(0), 2.0 - 0.5 + 0.1);
  EXPECT_DOUBLE_EQ(f.variance(0), std::log1p(std::exp(1.0 - 0.2)) + 1e-6);
}

TEST(Encoder, ArityMismatchIsContractViolation) {
  Rng rng(42);
  auto enc = make_encoder(5, 2, {8}, rng);
  EXPECT_THROW(encode_factors(enc, {ContextChannel::motion, Mat::Zero(4, 3)}), ContractViolation);
}

TEST(Encoder, FactorsAlwaysValidForFiniteInput) {
  Rng rng(43);
  auto enc = make_encoder(5, 2, {16, 16}, rng);
  Mat f = Mat::Random(5, 200) * 50.0;
  for (const auto& g : encode_factors(enc, {ContextChannel::force, f})) EXPECT_NO_THROW(validate(g));
}

TEST(Encoder, EmptyContextGivesPrior) {
  Rng rng(44);
  auto enc = make_encoder(5, 2, {8}, rng);
  const auto post = infer_posterior(enc, Mat(5, 0));
  EXPECT_EQ(post.mean, Vec::Zero(2));
  EXPECT_EQ(post.variance, Vec::Ones(2));
}

// encode -> posterior -> KL to the prior, differentiated end to end.
TEST(Encoder, CompositeKlGradientMatchesFiniteDifferences) {
  double worst = 0.0;
  for (int draw = 0; draw < 64; ++draw) {
    Rng rng(500 + draw);
    auto enc = make_encoder(5, 2, {6, 6}, rng, nn::Activation::tanh);
    const Mat f = Mat::Random(5, 4);
    auto loss = [&] { return kl_divergence(infer_posterior(enc, f), DiagGaussian::standard(2)); };
    const auto fb = encode_batch(enc, f);
    const auto post = posterior_from_columns(fb.means, fb.variances);
    const auto kg = kl_divergence_grad(post, DiagGaussian::standard(2));
    const auto g = posterior_backward_to_encoder(enc, fb, post, kg.p);
    worst = std::max(worst, pihmeta::testing::max_param_error(enc.trunk, g, loss));
  }
  EXPECT_LT(worst, kFdTol);
}

TEST(Encoder, JsonRoundTrip) {
  Rng rng(45);
  auto enc = make_encoder(5, 2, {8}, rng);
  const auto back = encoder_from_json(nlohmann::json::parse(to_json(enc).dump()));
  EXPECT_EQ(back.latent_dim, enc.latent_dim);
  EXPECT_EQ(back.trunk.layers[0].weight, enc.trunk.layers[0].weight);
}
