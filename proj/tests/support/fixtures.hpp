#pragma once

#include <initializer_list>
#include <optional>
#include <vector>

#include "jmcox/model.hpp"
#include "jmcox/simulate.hpp"

namespace fixture {

inline jmcox::Subject subject(jmcox::subject_id id, double x, int delta, std::vector<double> z,
                              std::optional<double> terminal = std::nullopt) {
  jmcox::Subject s;
  s.id = id;
  s.x = x;
  s.delta = delta;
  s.z = std::move(z);
  s.terminal = terminal;
  return s;
}

inline jmcox::Dataset dataset(std::vector<double> grid, double tau, std::vector<jmcox::Subject> subjects) {
  jmcox::Dataset d;
  d.grid.times = std::move(grid);
  d.tau = tau;
  d.subjects = std::move(subjects);
  d.validate();
  return d;
}

// Small simulated dataset under the default scenario with a given size/seed.
inline jmcox::SimulatedData simulated(std::size_t n, std::uint64_t seed, double beta0 = 1.0) {
  jmcox::SimConfig c;
  c.n = n;
  c.seed = seed;
  c.beta0 = beta0;
  return jmcox::gen_dataset(c);
}

}  // namespace fixture
