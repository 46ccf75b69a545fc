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

// Meta-trains a motion-context agent for a few epochs, then adapts it to an
// unseen hole one transition at a time and prints the posterior trace.
//
//   adapt_demo [epochs]

#include <cstdlib>
#include <iostream>

#include "pihmeta/harness.hpp"

using namespace pihmeta;
namespace h = pihmeta::harness;

int main(int argc, char** argv) {
  auto cfg = h::profile_defaults(h::Profile::desk);
  cfg.variant = meta::Variant::MP_motion_context;
  cfg.train.epochs = argc > 1 ? std::atoi(argv[1]) : 5;

  const auto sets = h::default_task_sets(cfg.clearance, cfg.orientation);
  const auto train = meta::meta_train(h::meta_train_config(cfg, /*seed=*/0), h::agent_config(cfg),
                                      {{"train", sets.train}, {"test", sets.test}}, [](const meta::CurveRow& r) {
                                        std::cerr << "epoch " << r.epoch << ' ' << r.task_group << " return "
                                                  << r.mean_return << '\n';
                                      });

  adapt::AdaptOptions opt;
  opt.max_steps = 200;
  opt.seed = 42;
  const auto trace = adapt::adapt(train.learner.agent, sets.test.front(), opt);
  adapt::write_trace_csv(std::cout, trace, cfg.train.latent_dim);
  std::cerr << (trace.success() ? "inserted at step " + std::to_string(trace.steps_to_success()) : "no insertion")
            << '\n';
}
