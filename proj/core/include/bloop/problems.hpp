#ifndef BLOOP_PROBLEMS_HPP
#define BLOOP_PROBLEMS_HPP

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "bloop/rng.hpp"
#include "bloop/vecops.hpp"

namespace bloop {

// Known solutions attached to a problem at construction time, used for
// distance-to-reference diagnostics and for validating runs.
struct ProblemReference {
  // Minimizer of the auxiliary loss within the main-loss solution set.
  std::optional<ParamVector> bilevel_solution;
  // Minimizer of L_main + lambda * L_aux as a function of lambda, when it has
  // a closed form.
  std::function<ParamVector(double)> regularized_solution;
  std::optional<double> min_loss_main;
};

// A main loss / auxiliary loss pair over a flat parameter vector, with exact
// and stochastic gradients. Immutable after construction: stochastic calls
// take the calling run's RunRng and share no mutable state, so a single
// instance may serve concurrent runs.
class Problem {
 public:
  virtual ~Problem() = default;

  Eigen::Index dim() const { return dim_; }
  const ProblemReference& reference() const { return reference_; }

  virtual double loss_main(const ParamVector& theta) const = 0;
  virtual double loss_aux(const ParamVector& theta) const = 0;
  virtual ParamVector grad_main(const ParamVector& theta) const = 0;
  virtual ParamVector grad_aux(const ParamVector& theta) const = 0;
  virtual ParamVector stoch_grad_main(const ParamVector& theta, RunRng& rng) const = 0;
  virtual ParamVector stoch_grad_aux(const ParamVector& theta, RunRng& rng) const = 0;

  // Number of times a spectral-norm power iteration failed to converge
  // (always 0 for problems that do not use one).
  virtual long spectral_warning_count() const { return 0; }

 protected:
  Eigen::Index dim_ = 0;
  ProblemReference reference_;
};

// Two-parameter diagnostic with L_main = a^2/2 (flat in b) and
// L_aux = ((a-1)^2 + b^2)/2. The auxiliary target (1, 0) conflicts with the
// main loss along a; the bilevel solution is the origin, the regularized one
// (lambda/(1+lambda), 0). Stochastic gradients add isotropic Gaussian noise
// of scale sigma to both gradients.
std::shared_ptr<const Problem> make_conditioning_2d(double sigma = 0.0);

// Least squares with fewer rows than parameters: L_main = ||X theta - y||^2/(2n),
// L_aux = ||theta||^2/2. The main loss has an affine set of interpolating
// minimizers; the auxiliary loss picks the min-norm one, X^+ y, computed at
// construction by a normal-equations solve on X X^T and stored as the bilevel
// reference. Stochastic main gradients average `batch_size` rows drawn
// without replacement (reshuffled each epoch); the aux gradient is exact.
// Throws ContractViolation unless n < p and 1 <= batch_size <= n;
// OracleFailure if X X^T is numerically singular.
std::shared_ptr<const Problem> make_overparam_least_squares(int n, int p,
                                                            std::uint64_t seed,
                                                            int batch_size = 4);

// Same problem on caller-provided data.
std::shared_ptr<const Problem> make_least_squares_from_data(
    const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int batch_size = 4);

// Diagonal quadratic L_main = theta^T H theta / 2 with eigenvalues log-uniform
// in [mu, L] (endpoints pinned, so the smallest and largest curvatures are
// exactly mu and L), plus L_aux = ||theta - theta_ref||^2/2 pulling toward a
// random reference point. Satisfies the gradient-dominance inequality
// ||grad||^2 / (2 L_main) >= mu everywhere. Stochastic gradients add isotropic
// Gaussian noise of scale sigma.
std::shared_ptr<const Problem> make_pl_quadratic(int p, double mu, double L,
                                                 std::uint64_t seed,
                                                 double sigma = 1.0);

// Two-class ReLU MLP trained by cross-entropy on a synthetic Gaussian-blob
// dataset, with an auxiliary loss summing the log spectral norms of the
// weight matrices (sum of logs rather than log of the product, to avoid
// overflow). Spectral norms and their gradients u1 v1^T come from a seeded
// 30-iteration power iteration; biases do not enter the auxiliary loss.
// layer_dims lists layer widths, e.g. {2, 16, 2}: 2-4 entries, parameter
// count at most 10^4, n_samples at most 10^3.
std::shared_ptr<const Problem> make_tiny_mlp_lipschitz(
    const std::vector<int>& layer_dims, std::uint64_t dataset_seed,
    int n_samples = 200, int batch_size = 32);

// --- spectral norm utilities (used by the MLP problem and its tests) ---

struct SpectralNormResult {
  double sigma = 0.0;       // largest singular value estimate
  Eigen::VectorXd u;        // left singular vector
  Eigen::VectorXd v;        // right singular vector
  bool converged = false;   // successive iterates within tol before max_iters
  int iterations = 0;
};

// Power iteration on W^T W from the given start vector. One call never
// mutates shared state; callers count non-convergence themselves.
SpectralNormResult spectral_norm_power(const Eigen::MatrixXd& W,
                                       const Eigen::VectorXd& start,
                                       int max_iters = 30, double tol = 1e-12);

// --- mini-batch direction bias oracle ---

// Synthetic testbed for the mean of pi(g_aux; g_main + sigma * eps) under
// Gaussian perturbations of the projection axis: a fixed main gradient
// (norm ~ sqrt(p)), a fixed auxiliary gradient, and noisy axis draws. The
// exact direction d_bloop projects on the true axis; d_mixed is the
// high-noise limit g_main + (1 - 1/p) g_aux.
class NoiseOracle {
 public:
  NoiseOracle(int p, double sigma, std::uint64_t seed);

  int dim() const { return static_cast<int>(g_main_.size()); }
  double sigma() const { return sigma_; }
  const ParamVector& g_main() const { return g_main_; }
  const ParamVector& g_aux() const { return g_aux_; }
  const ParamVector& d_bloop() const { return d_bloop_; }
  const ParamVector& d_mixed() const { return d_mixed_; }

  // One noisy axis draw: g_main + sigma * eps, eps ~ N(0, I).
  ParamVector draw_axis(RunRng& rng) const;

  struct Estimate {
    ParamVector mean;          // estimated E[g_main + pi(g_aux; axis draw)]
    ParamVector stderr_coord;  // per-coordinate standard error of the mean
    double stderr_norm = 0.0;  // Euclidean norm of stderr_coord
    long n_samples = 0;
  };

  // Monte-Carlo estimate of the mean simple-projection direction, with a
  // streaming (Welford) mean so that noiseless draws reproduce d_bloop
  // bit-for-bit.
  Estimate estimate_simple_direction(long n_samples, RunRng& rng) const;

 private:
  double sigma_;
  ParamVector g_main_, g_aux_, d_bloop_, d_mixed_;
};

std::shared_ptr<const NoiseOracle> make_noise_oracle(int p, double sigma,
                                                     std::uint64_t seed);

// Streaming per-coordinate mean/variance accumulator.
class RunningMoments {
 public:
  explicit RunningMoments(Eigen::Index dim);
  void add(const ParamVector& x);
  long count() const { return n_; }
  const ParamVector& mean() const { return mean_; }
  ParamVector variance() const;  // sample variance (n-1 denominator)

 private:
  long n_ = 0;
  ParamVector mean_, m2_;
};

}  // namespace bloop

#endif  // BLOOP_PROBLEMS_HPP
