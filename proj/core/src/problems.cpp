#include "bloop/problems.hpp"

#include <Eigen/Cholesky>
#include <atomic>
#include <cmath>
#include <string>

namespace bloop {

namespace {

// ---------------------------------------------------------------------------
// conditioning_2d

class Conditioning2D final : public Problem {
 public:
  explicit Conditioning2D(double sigma) : sigma_(sigma) {
    if (!(sigma >= 0.0)) {
      throw ContractViolation("make_conditioning_2d: sigma must be >= 0");
    }
    dim_ = 2;
    ParamVector bilevel(2);
    bilevel << 0.0, 0.0;
    reference_.bilevel_solution = bilevel;
    reference_.regularized_solution = [](double lambda) {
      ParamVector s(2);
      s << lambda / (1.0 + lambda), 0.0;
      return s;
    };
    reference_.min_loss_main = 0.0;
  }

  double loss_main(const ParamVector& t) const override {
    check(t);
    return 0.5 * t[0] * t[0];
  }
  double loss_aux(const ParamVector& t) const override {
    check(t);
    return 0.5 * ((t[0] - 1.0) * (t[0] - 1.0) + t[1] * t[1]);
  }
  ParamVector grad_main(const ParamVector& t) const override {
    check(t);
    ParamVector g(2);
    g << t[0], 0.0;
    return g;
  }
  ParamVector grad_aux(const ParamVector& t) const override {
    check(t);
    ParamVector g(2);
    g << t[0] - 1.0, t[1];
    return g;
  }
  ParamVector stoch_grad_main(const ParamVector& t, RunRng& rng) const override {
    return grad_main(t) + sigma_ * draw_normal_vector(rng, 2);
  }
  ParamVector stoch_grad_aux(const ParamVector& t, RunRng& rng) const override {
    return grad_aux(t) + sigma_ * draw_normal_vector(rng, 2);
  }

 private:
  void check(const ParamVector& t) const {
    if (t.size() != 2) {
      throw ContractViolation("conditioning_2d: theta must have dim 2");
    }
  }
  double sigma_;
};

// ---------------------------------------------------------------------------
// overparameterized least squares

Eigen::VectorXd min_norm_interpolator(const Eigen::MatrixXd& X,
                                      const Eigen::VectorXd& y) {
  const Eigen::MatrixXd gram = X * X.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw OracleFailure("min_norm_interpolator: X X^T not positive definite");
  }
  const Eigen::VectorXd w = llt.solve(y);
  if ((gram * w - y).norm() > 1e-6 * std::max(1.0, y.norm())) {
    throw OracleFailure("min_norm_interpolator: normal-equations solve inaccurate");
  }
  return X.transpose() * w;
}

class OverparamLeastSquares final : public Problem {
 public:
  OverparamLeastSquares(Eigen::MatrixXd X, Eigen::VectorXd y, int batch_size)
      : X_(std::move(X)), y_(std::move(y)), batch_(batch_size) {
    const int n = static_cast<int>(X_.rows());
    const int p = static_cast<int>(X_.cols());
    if (n < 1 || p <= n) {
      throw ContractViolation("least_squares: need 1 <= n < p");
    }
    if (y_.size() != n) {
      throw ContractViolation("least_squares: y size must equal row count");
    }
    if (batch_ < 1 || batch_ > n) {
      throw ContractViolation("least_squares: need 1 <= batch_size <= n");
    }
    dim_ = p;
    reference_.bilevel_solution = min_norm_interpolator(X_, y_);
    reference_.min_loss_main = 0.0;
  }

  double loss_main(const ParamVector& t) const override {
    check(t);
    return (X_ * t - y_).squaredNorm() / (2.0 * static_cast<double>(X_.rows()));
  }
  double loss_aux(const ParamVector& t) const override {
    check(t);
    return 0.5 * t.squaredNorm();
  }
  ParamVector grad_main(const ParamVector& t) const override {
    check(t);
    return X_.transpose() * (X_ * t - y_) / static_cast<double>(X_.rows());
  }
  ParamVector grad_aux(const ParamVector& t) const override {
    check(t);
    return t;
  }
  ParamVector stoch_grad_main(const ParamVector& t, RunRng& rng) const override {
    check(t);
    const std::vector<int> rows =
        draw_rows_without_replacement(rng, static_cast<int>(X_.rows()), batch_);
    ParamVector g = ParamVector::Zero(dim_);
    for (int r : rows) {
      g += (X_.row(r).dot(t) - y_[r]) * X_.row(r).transpose();
    }
    return g / static_cast<double>(batch_);
  }
  ParamVector stoch_grad_aux(const ParamVector& t, RunRng&) const override {
    return grad_aux(t);  // exact: the regularizer has no data term
  }

 private:
  void check(const ParamVector& t) const {
    if (t.size() != dim_) {
      throw ContractViolation("least_squares: theta dimension mismatch");
    }
  }
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  int batch_;
};

// ---------------------------------------------------------------------------
// PL quadratic

class PlQuadratic final : public Problem {
 public:
  PlQuadratic(int p, double mu, double L, std::uint64_t seed, double sigma)
      : sigma_(sigma) {
    if (p < 1) {
      throw ContractViolation("pl_quadratic: need p >= 1");
    }
    if (!(mu > 0.0 && mu <= L)) {
      throw ContractViolation("pl_quadratic: need 0 < mu <= L");
    }
    if (!(sigma >= 0.0)) {
      throw ContractViolation("pl_quadratic: sigma must be >= 0");
    }
    dim_ = p;
    h_.resize(p);
    RunRng rng(mix_seed(seed));
    h_[0] = L;
    if (p >= 2) {
      h_[p - 1] = mu;
    }
    std::uniform_real_distribution<double> logu(std::log(mu), std::log(L));
    for (int i = 1; i + 1 < p; ++i) {
      h_[i] = std::exp(logu(rng.engine));
    }
    theta_ref_ = draw_normal_vector(rng, p);
    reference_.min_loss_main = 0.0;
  }

  double loss_main(const ParamVector& t) const override {
    check(t);
    return 0.5 * t.cwiseProduct(h_).dot(t);
  }
  double loss_aux(const ParamVector& t) const override {
    check(t);
    return 0.5 * (t - theta_ref_).squaredNorm();
  }
  ParamVector grad_main(const ParamVector& t) const override {
    check(t);
    return h_.cwiseProduct(t);
  }
  ParamVector grad_aux(const ParamVector& t) const override {
    check(t);
    return t - theta_ref_;
  }
  ParamVector stoch_grad_main(const ParamVector& t, RunRng& rng) const override {
    return grad_main(t) + sigma_ * draw_normal_vector(rng, dim_);
  }
  ParamVector stoch_grad_aux(const ParamVector& t, RunRng& rng) const override {
    return grad_aux(t) + sigma_ * draw_normal_vector(rng, dim_);
  }

 private:
  void check(const ParamVector& t) const {
    if (t.size() != dim_) {
      throw ContractViolation("pl_quadratic: theta dimension mismatch");
    }
  }
  ParamVector h_;  // Hessian diagonal
  ParamVector theta_ref_;
  double sigma_;
};

}  // namespace

// ---------------------------------------------------------------------------
// spectral norm power iteration

SpectralNormResult spectral_norm_power(const Eigen::MatrixXd& W,
                                       const Eigen::VectorXd& start,
                                       int max_iters, double tol) {
  if (W.rows() < 1 || W.cols() < 1) {
    throw ContractViolation("spectral_norm_power: empty matrix");
  }
  if (start.size() != W.cols() || start.norm() == 0.0) {
    throw ContractViolation("spectral_norm_power: bad start vector");
  }
  if (max_iters < 1) {
    throw ContractViolation("spectral_norm_power: max_iters must be >= 1");
  }
  SpectralNormResult res;
  Eigen::VectorXd v = start / start.norm();
  for (int it = 0; it < max_iters; ++it) {
    res.iterations = it + 1;
    const Eigen::VectorXd w = W.transpose() * (W * v);
    const double wn = w.norm();
    if (wn == 0.0) {
      // v landed in the null space; the estimate below reports sigma = 0.
      res.converged = true;
      break;
    }
    const Eigen::VectorXd v_next = w / wn;
    const double diff = (v_next - v).norm();
    v = v_next;
    if (diff < tol) {
      res.converged = true;
      break;
    }
  }
  res.v = v;
  const Eigen::VectorXd Wv = W * v;
  res.sigma = Wv.norm();
  res.u = res.sigma > 0.0 ? Eigen::VectorXd(Wv / res.sigma)
                          : Eigen::VectorXd::Zero(W.rows());
  return res;
}

namespace {

// ---------------------------------------------------------------------------
// tiny MLP with spectral-norm auxiliary loss

class TinyMlpLipschitz final : public Problem {
 public:
  TinyMlpLipschitz(const std::vector<int>& layer_dims, std::uint64_t dataset_seed,
                   int n_samples, int batch_size)
      : dims_(layer_dims), n_samples_(n_samples), batch_(batch_size) {
    if (dims_.size() < 3 || dims_.size() > 4) {
      throw ContractViolation("tiny_mlp: layer_dims must have 3 or 4 entries");
    }
    for (int d : dims_) {
      if (d < 1) {
        throw ContractViolation("tiny_mlp: layer widths must be >= 1");
      }
    }
    if (dims_.back() != 2) {
      throw ContractViolation("tiny_mlp: output width must be 2 (two classes)");
    }
    if (n_samples_ < 1 || n_samples_ > 1000) {
      throw ContractViolation("tiny_mlp: need 1 <= n_samples <= 1000");
    }
    if (batch_ < 1 || batch_ > n_samples_) {
      throw ContractViolation("tiny_mlp: need 1 <= batch_size <= n_samples");
    }
    long params = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      offsets_w_.push_back(params);
      params += static_cast<long>(dims_[l + 1]) * dims_[l];
      offsets_b_.push_back(params);
      params += dims_[l + 1];
    }
    if (params > 10000) {
      throw ContractViolation("tiny_mlp: parameter count exceeds 10^4");
    }
    dim_ = params;

    // Two Gaussian blobs at +/- (1,...,1), balanced alternating labels.
    RunRng rng(mix_seed(dataset_seed));
    const int in = dims_.front();
    data_.resize(in, n_samples_);
    labels_.resize(n_samples_);
    for (int i = 0; i < n_samples_; ++i) {
      labels_[i] = i % 2;
      const double center = labels_[i] == 0 ? -1.0 : 1.0;
      for (int j = 0; j < in; ++j) {
        data_(j, i) = center + 0.8 * draw_normal(rng);
      }
    }
    // Fixed start vectors for the per-layer power iterations.
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      power_starts_.push_back(draw_normal_vector(rng, dims_[l]));
    }
  }

  double loss_main(const ParamVector& t) const override {
    check(t);
    return batch_loss(t, all_rows());
  }
  double loss_aux(const ParamVector& t) const override {
    check(t);
    double total = 0.0;
    for (std::size_t l = 0; l < offsets_w_.size(); ++l) {
      total += std::log(layer_sigma(t, l).sigma);
    }
    return total;
  }
  ParamVector grad_main(const ParamVector& t) const override {
    check(t);
    return batch_grad(t, all_rows());
  }
  ParamVector grad_aux(const ParamVector& t) const override {
    check(t);
    ParamVector g = ParamVector::Zero(dim_);
    for (std::size_t l = 0; l < offsets_w_.size(); ++l) {
      const SpectralNormResult r = layer_sigma(t, l);
      if (r.sigma > 0.0) {
        Eigen::Map<Eigen::MatrixXd> gw(g.data() + offsets_w_[l], dims_[l + 1],
                                       dims_[l]);
        gw = (r.u * r.v.transpose()) / r.sigma;
      }
    }
    return g;
  }
  ParamVector stoch_grad_main(const ParamVector& t, RunRng& rng) const override {
    check(t);
    return batch_grad(t, draw_rows_without_replacement(rng, n_samples_, batch_));
  }
  ParamVector stoch_grad_aux(const ParamVector& t, RunRng&) const override {
    return grad_aux(t);  // data-free, always exact
  }
  long spectral_warning_count() const override { return warnings_.load(); }

 private:
  void check(const ParamVector& t) const {
    if (t.size() != dim_) {
      throw ContractViolation("tiny_mlp: theta dimension mismatch");
    }
  }
  std::vector<int> all_rows() const {
    std::vector<int> rows(n_samples_);
    for (int i = 0; i < n_samples_; ++i) rows[i] = i;
    return rows;
  }
  Eigen::Map<const Eigen::MatrixXd> weight(const ParamVector& t, std::size_t l) const {
    return {t.data() + offsets_w_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(const ParamVector& t, std::size_t l) const {
    return {t.data() + offsets_b_[l], dims_[l + 1]};
  }
  SpectralNormResult layer_sigma(const ParamVector& t, std::size_t l) const {
    SpectralNormResult r = spectral_norm_power(weight(t, l), power_starts_[l]);
    if (!r.converged) {
      ++warnings_;
    }
    return r;
  }

  // Mean cross-entropy over the given sample rows.
  double batch_loss(const ParamVector& t, const std::vector<int>& rows) const {
    Eigen::MatrixXd h(dims_.front(), rows.size());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      h.col(j) = data_.col(rows[j]);
    }
    const std::size_t n_layers = offsets_w_.size();
    for (std::size_t l = 0; l < n_layers; ++l) {
      h = (weight(t, l) * h).colwise() + bias(t, l);
      if (l + 1 < n_layers) {
        h = h.cwiseMax(0.0);
      }
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto z = h.col(j);
      const double zmax = z.maxCoeff();
      const double lse = zmax + std::log((z.array() - zmax).exp().sum());
      loss += lse - z[labels_[rows[j]]];
    }
    return loss / static_cast<double>(rows.size());
  }

  // Mean cross-entropy gradient over the given rows (hand-rolled backprop).
  ParamVector batch_grad(const ParamVector& t, const std::vector<int>& rows) const {
    const std::size_t n_layers = offsets_w_.size();
    const double inv_b = 1.0 / static_cast<double>(rows.size());

    std::vector<Eigen::MatrixXd> acts;  // inputs to each layer
    acts.reserve(n_layers + 1);
    Eigen::MatrixXd h(dims_.front(), rows.size());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      h.col(j) = data_.col(rows[j]);
    }
    acts.push_back(h);
    std::vector<Eigen::MatrixXd> preacts(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
      preacts[l] = (weight(t, l) * acts.back()).colwise() + bias(t, l);
      if (l + 1 < n_layers) {
        acts.push_back(preacts[l].cwiseMax(0.0));
      }
    }

    // softmax minus one-hot at the logits, averaged over the batch
    Eigen::MatrixXd delta = preacts.back();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const double zmax = delta.col(j).maxCoeff();
      Eigen::VectorXd p = (delta.col(j).array() - zmax).exp();
      p /= p.sum();
      p[labels_[rows[j]]] -= 1.0;
      delta.col(j) = p * inv_b;
    }

    ParamVector g = ParamVector::Zero(dim_);
    for (std::size_t l = n_layers; l-- > 0;) {
      Eigen::Map<Eigen::MatrixXd> gw(g.data() + offsets_w_[l], dims_[l + 1],
                                     dims_[l]);
      Eigen::Map<Eigen::VectorXd> gb(g.data() + offsets_b_[l], dims_[l + 1]);
      gw = delta * acts[l].transpose();
      gb = delta.rowwise().sum();
      if (l > 0) {
        delta = (weight(t, l).transpose() * delta)
                    .cwiseProduct((preacts[l - 1].array() > 0.0).cast<double>().matrix());
      }
    }
    return g;
  }

  std::vector<int> dims_;
  int n_samples_;
  int batch_;
  std::vector<long> offsets_w_, offsets_b_;
  Eigen::MatrixXd data_;
  std::vector<int> labels_;
  std::vector<Eigen::VectorXd> power_starts_;
  mutable std::atomic<long> warnings_{0};
};

}  // namespace

// ---------------------------------------------------------------------------
// factories

std::shared_ptr<const Problem> make_conditioning_2d(double sigma) {
  return std::make_shared<Conditioning2D>(sigma);
}

std::shared_ptr<const Problem> make_overparam_least_squares(int n, int p,
                                                            std::uint64_t seed,
                                                            int batch_size) {
  if (n < 1 || p <= n) {
    throw ContractViolation("make_overparam_least_squares: need 1 <= n < p");
  }
  RunRng rng(mix_seed(seed));
  Eigen::MatrixXd X(n, p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) {
      X(i, j) = draw_normal(rng);
    }
  }
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = draw_normal(rng);
  }
  return std::make_shared<OverparamLeastSquares>(std::move(X), std::move(y),
                                                 batch_size);
}

std::shared_ptr<const Problem> make_least_squares_from_data(
    const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int batch_size) {
  return std::make_shared<OverparamLeastSquares>(X, y, batch_size);
}

std::shared_ptr<const Problem> make_pl_quadratic(int p, double mu, double L,
                                                 std::uint64_t seed, double sigma) {
  return std::make_shared<PlQuadratic>(p, mu, L, seed, sigma);
}

std::shared_ptr<const Problem> make_tiny_mlp_lipschitz(
    const std::vector<int>& layer_dims, std::uint64_t dataset_seed, int n_samples,
    int batch_size) {
  return std::make_shared<TinyMlpLipschitz>(layer_dims, dataset_seed, n_samples,
                                            batch_size);
}

// ---------------------------------------------------------------------------
// noise oracle

NoiseOracle::NoiseOracle(int p, double sigma, std::uint64_t seed) : sigma_(sigma) {
  if (p < 2) {
    throw ContractViolation("NoiseOracle: need p >= 2");
  }
  if (!(sigma >= 0.0)) {
    throw ContractViolation("NoiseOracle: sigma must be >= 0");
  }
  RunRng rng(mix_seed(seed));
  g_main_ = draw_normal_vector(rng, p);
  g_aux_ = draw_normal_vector(rng, p);
  d_bloop_ = g_main_ + project_orth(g_aux_, g_main_);
  d_mixed_ = g_main_ + (1.0 - 1.0 / static_cast<double>(p)) * g_aux_;
}

ParamVector NoiseOracle::draw_axis(RunRng& rng) const {
  return g_main_ + sigma_ * draw_normal_vector(rng, g_main_.size());
}

NoiseOracle::Estimate NoiseOracle::estimate_simple_direction(long n_samples,
                                                             RunRng& rng) const {
  if (n_samples < 2) {
    throw ContractViolation("NoiseOracle: need n_samples >= 2");
  }
  RunningMoments moments(g_main_.size());
  for (long i = 0; i < n_samples; ++i) {
    moments.add(project_orth(g_aux_, draw_axis(rng)));
  }
  Estimate est;
  est.mean = g_main_ + moments.mean();
  est.stderr_coord =
      (moments.variance() / static_cast<double>(n_samples)).cwiseSqrt();
  est.stderr_norm = est.stderr_coord.norm();
  est.n_samples = n_samples;
  return est;
}

std::shared_ptr<const NoiseOracle> make_noise_oracle(int p, double sigma,
                                                     std::uint64_t seed) {
  return std::make_shared<NoiseOracle>(p, sigma, seed);
}

// ---------------------------------------------------------------------------
// Welford accumulator

RunningMoments::RunningMoments(Eigen::Index dim)
    : mean_(ParamVector::Zero(dim)), m2_(ParamVector::Zero(dim)) {
  if (dim < 1) {
    throw ContractViolation("RunningMoments: dim must be >= 1");
  }
}

void RunningMoments::add(const ParamVector& x) {
  if (x.size() != mean_.size()) {
    throw ContractViolation("RunningMoments::add: dimension mismatch");
  }
  ++n_;
  const ParamVector delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta.cwiseProduct(x - mean_);
}

ParamVector RunningMoments::variance() const {
  if (n_ < 2) {
    throw ContractViolation("RunningMoments::variance: need at least 2 samples");
  }
  return m2_ / static_cast<double>(n_ - 1);
}

}  // namespace bloop
