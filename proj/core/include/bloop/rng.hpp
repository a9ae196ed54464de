#ifndef BLOOP_RNG_HPP
#define BLOOP_RNG_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "bloop/vecops.hpp"

namespace bloop {

// splitmix64 step; used to derive independent sub-seeds from a base seed so
// that parallel runs never share a stream.
std::uint64_t mix_seed(std::uint64_t seed);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Per-run randomness. One instance per training run, owned and advanced only
// by that run's loop; problems never carry random state themselves. Besides
// the engine it holds the row-subsampling stream used by dataset problems:
// a shuffled index order consumed without replacement and reshuffled at each
// epoch boundary.
struct RunRng {
  std::mt19937_64 engine;
  std::vector<int> row_order;
  std::size_t row_cursor = 0;

  explicit RunRng(std::uint64_t seed) : engine(seed) {}
};

// One standard normal draw. A fresh distribution per call site would discard
// cached spares non-deterministically across code paths, so all normal draws
// in the library go through these helpers.
double draw_normal(RunRng& rng);
ParamVector draw_normal_vector(RunRng& rng, Eigen::Index dim);

// Draws `count` distinct row indices out of [0, n): consumes the shuffled
// order in rng, reshuffling once a full pass over the data completes.
std::vector<int> draw_rows_without_replacement(RunRng& rng, int n, int count);

}  // namespace bloop

#endif  // BLOOP_RNG_HPP
