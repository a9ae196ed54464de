#include "bloop/rng.hpp"

#include <algorithm>
#include <numeric>

namespace bloop {

std::uint64_t mix_seed(std::uint64_t seed) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix_seed(seed ^ mix_seed(salt));
}

double draw_normal(RunRng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng.engine);
}

ParamVector draw_normal_vector(RunRng& rng, Eigen::Index dim) {
  std::normal_distribution<double> dist(0.0, 1.0);
  ParamVector out(dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    out[i] = dist(rng.engine);
  }
  return out;
}

std::vector<int> draw_rows_without_replacement(RunRng& rng, int n, int count) {
  if (n < 1 || count < 1 || count > n) {
    throw ContractViolation("draw_rows_without_replacement: need 1 <= count <= n");
  }
  if (rng.row_order.size() != static_cast<std::size_t>(n)) {
    rng.row_order.resize(n);
    std::iota(rng.row_order.begin(), rng.row_order.end(), 0);
    std::shuffle(rng.row_order.begin(), rng.row_order.end(), rng.engine);
    rng.row_cursor = 0;
  }
  if (rng.row_cursor + static_cast<std::size_t>(count) > rng.row_order.size()) {
    // epoch boundary
    std::shuffle(rng.row_order.begin(), rng.row_order.end(), rng.engine);
    rng.row_cursor = 0;
  }
  std::vector<int> rows(rng.row_order.begin() + rng.row_cursor,
                        rng.row_order.begin() + rng.row_cursor + count);
  rng.row_cursor += count;
  return rows;
}

}  // namespace bloop
