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

// Drives the simulator with a proportional controller that knows the hole
// position and prints every transition as CSV.
//
//   simulate [offset_x] [offset_y]

#include <cstdlib>
#include <iostream>

#include "pihmeta/env.hpp"

using namespace pihmeta;

int main(int argc, char** argv) {
  env::TaskSpec task;
  task.offset_x = argc > 1 ? std::atof(argv[1]) : 3.0;
  task.offset_y = argc > 2 ? std::atof(argv[2]) : -2.0;

  env::EnvConfig cfg;
  cfg.sign_source = env::SignSource::pixel_oracle;
  env::PegInHoleEnv sim(cfg, task, /*seed=*/1);

  env::write_transition_header(std::cout, cfg);
  for (int i = 0; !sim.terminal(); ++i) {
    const auto& s = sim.state();
    const double ex = task.offset_x - s.x, ey = task.offset_y - s.y;
    // Descend only once roughly above the hole; the env clamps the step size.
    const bool above = std::abs(ex) < 0.25 && std::abs(ey) < 0.25;
    const auto t = sim.step({ex, ey, above ? -2.0 : 0.0, 0.0});
    env::write_transition_row(std::cout, cfg, 0, i, t);
    if (t.done) break;
  }
  std::cerr << (sim.state().inserted ? "inserted" : "not inserted") << " after " << sim.state().step_index
            << " steps\n";
  return sim.state().inserted ? 0 : 1;
}
