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

#include <algorithm>
#include <cmath>
#include <functional>

#include "pihmeta/numerics.hpp"

namespace pihmeta::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTol = 1e-4;

// Relative error with an absolute floor so gradients that are ~0 on both
// sides are not judged on round-off alone.
inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double central_difference(const std::function<double()>& f, double& x, double h = kFdStep) {
  const double old = x;
  x = old + h;
  const double fp = f();
  x = old - h;
  const double fm = f();
  x = old;
  return (fp - fm) / (2.0 * h);
}

// Max relative error of `g` against central differences of `loss` over every
// parameter of `p`.
inline double max_param_error(nn::MlpParams& p, const nn::GradBundle& g, const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    auto& w = p.layers[k].weight;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        worst = std::max(worst, rel_err(g.d_weight[k](r, c), central_difference(loss, w(r, c))));
    auto& b = p.layers[k].bias;
    for (Eigen::Index r = 0; r < b.size(); ++r)
      worst = std::max(worst, rel_err(g.d_bias[k](r), central_difference(loss, b(r))));
  }
  return worst;
}

// Swap relu for tanh everywhere: finite differences across a relu kink are
// meaningless, and the backward code paths are shared.
inline void smooth_activations(nn::MlpParams& p) {
  for (auto& l : p.layers)
    if (l.activation == nn::Activation::relu) l.activation = nn::Activation::tanh;
}

}  // namespace pihmeta::testing
