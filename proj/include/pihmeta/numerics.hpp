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

// Fixed-architecture MLPs with hand-written reverse mode, an Adam optimizer
// and a versioned JSON checkpoint format. Everything is float64.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace pihmeta {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Raised when a caller breaks a documented precondition (dimension
/// mismatches, stepping a finished episode, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a numeric routine meets NaN/Inf where finite values are
/// required.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

namespace nn {

enum class Activation { relu, tanh, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ContractViolation("unknown activation '" + s + "'");
}

struct Layer {
  Mat weight;  // out x in
  Vec bias;    // out
  Activation activation = Activation::identity;

  [[nodiscard]] Eigen::Index in_dim() const { return weight.cols(); }
  [[nodiscard]] Eigen::Index out_dim() const { return weight.rows(); }
};

struct MlpParams {
  std::vector<Layer> layers;

  [[nodiscard]] Eigen::Index in_dim() const {
    return layers.empty() ? 0 : layers.front().in_dim();
  }
  [[nodiscard]] Eigen::Index out_dim() const {
    return layers.empty() ? 0 : layers.back().out_dim();
  }
  [[nodiscard]] std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }
};

/// Gradients congruent with an MlpParams, plus the gradient w.r.t. the input.
struct GradBundle {
  std::vector<Mat> d_weight;
  std::vector<Vec> d_bias;
  Mat d_input;  // in x batch

  static GradBundle zeros_like(const MlpParams& p) {
    GradBundle g;
    for (const auto& l : p.layers) {
      g.d_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      g.d_bias.push_back(Vec::Zero(l.bias.size()));
    }
    return g;
  }

  GradBundle& operator+=(const GradBundle& o) {
    for (std::size_t k = 0; k < d_weight.size(); ++k) {
      d_weight[k] += o.d_weight[k];
      d_bias[k] += o.d_bias[k];
    }
    return *this;
  }

  void scale(double s) {
    for (std::size_t k = 0; k < d_weight.size(); ++k) {
      d_weight[k] *= s;
      d_bias[k] *= s;
    }
  }

  [[nodiscard]] bool all_finite() const {
    for (std::size_t k = 0; k < d_weight.size(); ++k) {
      if (!d_weight[k].allFinite() || !d_bias[k].allFinite()) return false;
    }
    return true;
  }
};

/// Checks that consecutive layer shapes chain and every entry is finite.
inline void validate(const MlpParams& p) {
  require(!p.layers.empty(), "mlp has no layers");
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& l = p.layers[k];
    require(l.bias.size() == l.weight.rows(), "bias length does not match layer output");
    if (k + 1 < p.layers.size()) {
      require(p.layers[k + 1].in_dim() == l.out_dim(), "layer dimensions do not chain");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) throw NonFiniteError("mlp parameters not finite");
  }
}

/// Builds an MLP with dims = {in, h1, ..., out}; weights and biases uniform in
/// +-1/sqrt(fan_in).
inline MlpParams make_mlp(const std::vector<int>& dims, Activation hidden, Activation output, Rng& rng) {
  require(dims.size() >= 2, "mlp needs at least input and output dims");
  MlpParams p;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    Layer l;
    const int in = dims[k];
    const int out = dims[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    l.weight.resize(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) l.weight(r, c) = u(rng);
    l.bias.resize(out);
    for (int r = 0; r < out; ++r) l.bias(r) = u(rng);
    l.activation = (k + 2 == dims.size()) ? output : hidden;
    p.layers.push_back(std::move(l));
  }
  return p;
}

/// Same shapes as `p`, all weights and biases zero.
inline MlpParams zeros_like(const MlpParams& p) {
  MlpParams z = p;
  for (auto& l : z.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return z;
}

namespace detail {

inline void activate(Mat& m, Activation a) {
  switch (a) {
    case Activation::relu: m = m.cwiseMax(0.0); break;
    case Activation::tanh: m = m.array().tanh().matrix(); break;
    case Activation::identity: break;
  }
}

// Multiplies `grad` in place by the activation derivative, expressed through
// the post-activation values.
inline void activation_backward(Mat& grad, const Mat& post, Activation a) {
  switch (a) {
    case Activation::relu: grad = (post.array() > 0.0).select(grad, 0.0); break;
    case Activation::tanh: grad = grad.cwiseProduct((1.0 - post.array().square()).matrix()); break;
    case Activation::identity: break;
  }
}

}  // namespace detail

/// Post-activation values of every layer; `activations[0]` is the input.
struct ForwardCache {
  std::vector<Mat> activations;
};

/// Batched forward pass; columns of `input` are samples.
inline Mat forward_batch(const MlpParams& p, const Mat& input, ForwardCache* cache = nullptr) {
  require(!p.layers.empty(), "mlp has no layers");
  require(input.rows() == p.in_dim(), "input rows (" + std::to_string(input.rows()) +
                                          ") != mlp input dim (" + std::to_string(p.in_dim()) + ")");
  if (cache) {
    cache->activations.clear();
    cache->activations.reserve(p.layers.size() + 1);
    cache->activations.push_back(input);
  }
  Mat h = input;
  for (const auto& l : p.layers) {
    Mat z = l.weight * h;
    z.colwise() += l.bias;
    detail::activate(z, l.activation);
    h = std::move(z);
    if (cache) cache->activations.push_back(h);
  }
  return h;
}

/// Reverse pass for `forward_batch`. Returns gradients of sum(upstream .* output)
/// w.r.t. all parameters (summed over the batch) and w.r.t. each input column.
inline GradBundle backward_batch(const MlpParams& p, const ForwardCache& cache, const Mat& upstream) {
  require(cache.activations.size() == p.layers.size() + 1, "forward cache does not match mlp");
  require(upstream.rows() == p.out_dim() && upstream.cols() == cache.activations.back().cols(),
          "upstream gradient shape does not match mlp output");
  GradBundle g;
  const std::size_t n = p.layers.size();
  g.d_weight.resize(n);
  g.d_bias.resize(n);
  Mat delta = upstream;
  for (std::size_t k = n; k-- > 0;) {
    const auto& l = p.layers[k];
    detail::activation_backward(delta, cache.activations[k + 1], l.activation);
    g.d_weight[k].noalias() = delta * cache.activations[k].transpose();
    g.d_bias[k] = delta.rowwise().sum();
    Mat next = l.weight.transpose() * delta;
    delta = std::move(next);
  }
  g.d_input = std::move(delta);
  return g;
}

inline Vec mlp_forward(const MlpParams& p, const Vec& input) {
  require(input.size() == p.in_dim(), "input length (" + std::to_string(input.size()) +
                                          ") != mlp input dim (" + std::to_string(p.in_dim()) + ")");
  return forward_batch(p, input);
}

inline GradBundle mlp_backward(const MlpParams& p, const Vec& input, const Vec& upstream) {
  require(upstream.size() == p.out_dim(), "upstream gradient length != mlp output dim");
  ForwardCache cache;
  forward_batch(p, input, &cache);
  return backward_batch(p, cache, upstream);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Mat> m_weight, v_weight;
  std::vector<Vec> m_bias, v_bias;
  std::int64_t step_count = 0;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const MlpParams& p, double lr) {
    AdamState s;
    s.learning_rate = lr;
    for (const auto& l : p.layers) {
      s.m_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      s.v_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      s.m_bias.push_back(Vec::Zero(l.bias.size()));
      s.v_bias.push_back(Vec::Zero(l.bias.size()));
    }
    return s;
  }
};

/// In-place bias-corrected Adam update. Throws NonFiniteError on NaN/Inf
/// gradients; nothing is modified in that case.
inline void adam_update(AdamState& s, MlpParams& p, const GradBundle& g) {
  require(g.d_weight.size() == p.layers.size() && s.m_weight.size() == p.layers.size(),
          "adam: gradient/state not congruent with parameters");
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    require(g.d_weight[k].rows() == p.layers[k].weight.rows() &&
                g.d_weight[k].cols() == p.layers[k].weight.cols() &&
                g.d_bias[k].size() == p.layers[k].bias.size(),
            "adam: gradient shape mismatch");
  }
  if (!g.all_finite()) throw NonFiniteError("adam: non-finite gradient");
  s.step_count += 1;
  const double t = static_cast<double>(s.step_count);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  auto apply = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = s.beta1 * m + (1.0 - s.beta1) * grad;
    v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
    param.array() -= s.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
  };
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    apply(p.layers[k].weight, s.m_weight[k], s.v_weight[k], g.d_weight[k]);
    apply(p.layers[k].bias, s.m_bias[k], s.v_bias[k], g.d_bias[k]);
  }
}

inline std::pair<MlpParams, AdamState> adam_step(AdamState state, MlpParams params, const GradBundle& grads) {
  adam_update(state, params, grads);
  return {std::move(params), std::move(state)};
}

/// Adam for a single scalar (the SAC temperature).
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  std::int64_t step_count = 0;
  double learning_rate = 3e-4, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  void update(double& x, double grad) {
    if (!std::isfinite(grad)) throw NonFiniteError("adam: non-finite scalar gradient");
    step_count += 1;
    const double t = static_cast<double>(step_count);
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad * grad;
    x -= learning_rate * (m / (1.0 - std::pow(beta1, t))) / (std::sqrt(v / (1.0 - std::pow(beta2, t))) + epsilon);
  }
};

/// target <- (1 - tau) target + tau source
inline void polyak_average(MlpParams& target, const MlpParams& source, double tau) {
  for (std::size_t k = 0; k < target.layers.size(); ++k) {
    target.layers[k].weight = (1.0 - tau) * target.layers[k].weight + tau * source.layers[k].weight;
    target.layers[k].bias = (1.0 - tau) * target.layers[k].bias + tau * source.layers[k].bias;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json to_json(const MlpParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    layers.push_back({{"in", l.in_dim()},
                      {"out", l.out_dim()},
                      {"activation", to_string(l.activation)},
                      {"weights", w},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"format_version", kCheckpointFormatVersion}, {"layers", layers}};
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  require(j.contains("format_version") && j.at("format_version").get<int>() == kCheckpointFormatVersion,
          "unsupported mlp checkpoint format_version");
  MlpParams p;
  for (const auto& jl : j.at("layers")) {
    const auto in = jl.at("in").get<Eigen::Index>();
    const auto out = jl.at("out").get<Eigen::Index>();
    const auto w = jl.at("weights").get<std::vector<double>>();
    const auto b = jl.at("bias").get<std::vector<double>>();
    require(static_cast<Eigen::Index>(w.size()) == in * out, "checkpoint weight array has wrong length");
    require(static_cast<Eigen::Index>(b.size()) == out, "checkpoint bias array has wrong length");
    Layer l;
    l.weight.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
    l.bias = Eigen::Map<const Vec>(b.data(), out);
    l.activation = activation_from_string(jl.at("activation").get<std::string>());
    p.layers.push_back(std::move(l));
  }
  validate(p);
  return p;
}

}  // namespace nn
}  // namespace pihmeta
