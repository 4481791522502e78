#pragma once

#include <chrono>
#include <cmath>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sgp/bound.hpp"
#include "sgp/common.hpp"
#include "sgp/kernels.hpp"
#include "sgp/optimizer.hpp"
#include "sgp/parallel.hpp"
#include "sgp/psi_stats.hpp"

namespace sgp {

struct FitOptions {
  int max_iters = 100;
  int max_evals = 0;          // 0 = until convergence / max_iters
  double g_tol = 1e-5;
  double f_tol = 1e-9;
  int workers = 1;
  TileConfig tiles;
  bool verbose = false;
};

struct FitIteration {
  int iter = 0;
  double bound = 0.0;       // maximized objective (the ELBO)
  double grad_norm = 0.0;
  double time_s = 0.0;
  double indistributable_fraction = 0.0;
  int evals = 0;
};

struct EvalSample {
  double time_s = 0.0;
  double indistributable_fraction = 0.0;
};

struct FitTrace {
  std::vector<FitIteration> iterations;  // [0] is the initial point
  std::vector<EvalSample> evaluations;   // one entry per objective evaluation
  OptStatus status = OptStatus::max_iterations;
  int total_evals = 0;
  std::string message;

  double initial_bound() const { return iterations.front().bound; }
  double final_bound() const { return iterations.back().bound; }
};

namespace detail {

/// Distributed objective: minimize the negative bound. Each evaluation is a
/// broadcast + two-pass collect on the engine; gradients are chain-ruled
/// through the log transforms at the pack boundary.
class DistributedObjective {
 public:
  DistributedObjective(Engine& engine, const ParameterLayout& layout)
      : engine_(engine), layout_(layout) {}

  double operator()(const Vector& v, Vector& grad_out) {
    ModelParams p = unpack(v, layout_);
    engine_.broadcast({p.kernel, p.beta, p.z}, layout_.has_latent ? &p.mu : nullptr,
                      layout_.has_latent ? &p.s : nullptr);
    EvalResult r = engine_.evaluate(true);
    samples_.push_back({r.timing.wall_s, r.timing.split.indistributable_fraction});

    RawGrads g;
    g.d_beta = r.grads.d_beta;
    g.d_variance = r.grads.d_variance;
    g.d_lengthscales = r.grads.d_lengthscales;
    g.d_z = r.grads.d_z;
    if (layout_.has_latent) {
      g.d_mu = r.grads.d_mu;
      g.d_s = r.grads.d_s;
    }
    grad_out = -pack_gradient(g, p, layout_);
    return -r.bound.total;
  }

  const std::vector<EvalSample>& samples() const { return samples_; }

 private:
  Engine& engine_;
  ParameterLayout layout_;
  std::vector<EvalSample> samples_;
};

}  // namespace detail

/// One fitting run: owns the engine, the packed parameter state and the
/// stepwise optimizer. sync_step() is the per-iteration protocol round:
/// collect (value + gradients through the engine), one optimizer step, then
/// broadcast of the updated parameters.
class FitSession {
 public:
  FitSession(ModelKind kind, const Matrix& x_or_mu, const Matrix& s, const Matrix& y,
             ModelParams params, const FitOptions& opts, double jitter_factor)
      : layout_{params.kernel.input_dim(), params.z.rows(),
                kind == ModelKind::latent ? y.rows() : 0, kind == ModelKind::latent},
        engine_(kind, x_or_mu, s, y, opts.workers, opts.tiles, jitter_factor),
        objective_fn_(engine_, layout_),
        state_(pack(params, layout_),
               LbfgsOptions{.memory = 10,
                            .c1 = 1e-4,
                            .c2 = 0.9,
                            .g_tol = opts.g_tol,
                            .f_tol = opts.f_tol,
                            .max_iters = opts.max_iters,
                            .max_evals = opts.max_evals}) {
    objective_ = [this](const Vector& v, Vector& g) {
      try {
        return objective_fn_(v, g);
      } catch (const NumericError& e) {
        throw NumericError("iteration " + std::to_string(state_.iterations()) + ": " + e.what());
      }
    };
    state_.initialize(objective_);
    trace_.iterations.push_back(
        {0, -state_.value(), state_.grad().norm(), 0.0,
         objective_fn_.samples().back().indistributable_fraction, 1});
  }

  Engine& engine() { return engine_; }
  const ParameterLayout& layout() const { return layout_; }
  ModelParams current_params() const { return unpack(state_.x(), layout_); }
  double current_bound() const { return -state_.value(); }
  bool done() const { return state_.done(); }
  OptStatus status() const { return state_.status(); }

  /// One collect -> optimize -> broadcast round. The broadcast happens even
  /// for a null step so every worker holds the coordinator's parameters.
  bool sync_step() {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const std::size_t samples_before = objective_fn_.samples().size();
    const bool advanced = state_.step(objective_);

    ModelParams p = unpack(state_.x(), layout_);
    engine_.broadcast({p.kernel, p.beta, p.z}, layout_.has_latent ? &p.mu : nullptr,
                      layout_.has_latent ? &p.s : nullptr);

    if (advanced) {
      double indist = 0.0;
      const auto& samples = objective_fn_.samples();
      for (std::size_t i = samples_before; i < samples.size(); ++i)
        indist = samples[i].indistributable_fraction;  // last evaluation of the step
      trace_.iterations.push_back({state_.iterations(), -state_.value(), state_.grad().norm(),
                                   std::chrono::duration<double>(clock::now() - t0).count(),
                                   indist, state_.last_step_evals()});
    }
    return advanced;
  }

  FitTrace finish() {
    trace_.evaluations = objective_fn_.samples();
    trace_.status = state_.status();
    trace_.total_evals = state_.total_evals();
    trace_.message = state_.message();
    return trace_;
  }

 private:
  ParameterLayout layout_;
  Engine engine_;
  detail::DistributedObjective objective_fn_;
  Objective objective_;
  LbfgsState state_;
  FitTrace trace_;
};

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

enum class PredictMode {
  latent,       // variance of the noise-free function value
  observation,  // adds the 1/beta observation noise
};

struct Prediction {
  Matrix mean;      // T x D
  Matrix variance;  // T x D (same column repeated; kept per-dimension for the interface)
};

namespace detail {

/// Cached M-sized factors from which predictions are served.
struct PredictCache {
  GramFactor gram;
  Eigen::LLT<Matrix> chol_a;
  Matrix g;  // A^{-1} Psi
  double beta = 1.0;
  double variance = 1.0;
  double bound = 0.0;
};

inline Prediction predict_from_cache(const PredictCache& cache, const Matrix& kstar,
                                     Index d_out, double kernel_variance, PredictMode mode,
                                     double beta) {
  const Index t = kstar.rows();
  Prediction out;
  out.mean = beta * (kstar * cache.g);
  Matrix v1 = cache.gram.chol.matrixL().solve(kstar.transpose());
  Matrix v2 = cache.chol_a.matrixL().solve(kstar.transpose());
  Vector var = Vector::Constant(t, kernel_variance) - v1.colwise().squaredNorm().transpose() +
               v2.colwise().squaredNorm().transpose();
  var = var.cwiseMax(1e-15 * kernel_variance);
  if (mode == PredictMode::observation) var.array() += 1.0 / beta;
  out.variance = var.replicate(1, d_out);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sparse GP regression
// ---------------------------------------------------------------------------

class SparseGPRegression {
 public:
  SparseGPRegression(Matrix x, Matrix y, KernelSpec kernel, double beta, Matrix z,
                     double jitter_factor = 1e-6)
      : x_(std::move(x)), y_(std::move(y)), kernel_(std::move(kernel)), beta_{beta},
        z_(std::move(z)), jitter_factor_(jitter_factor) {
    kernel_.validate();
    beta_.validate();
    require(x_.rows() == y_.rows(), "SparseGPRegression: X/Y row mismatch");
    require(z_.cols() == x_.cols(), "SparseGPRegression: Z column mismatch");
    require(z_.rows() >= 1 && z_.rows() <= x_.rows(),
            "SparseGPRegression: need 1 <= M <= N inducing inputs");
  }

  Index n() const { return x_.rows(); }
  Index d() const { return y_.cols(); }
  Index q() const { return x_.cols(); }
  Index m() const { return z_.rows(); }
  const Matrix& inducing() const { return z_; }
  const KernelSpec& kernel() const { return kernel_; }
  double beta() const { return beta_.beta; }
  double jitter_factor() const { return jitter_factor_; }

  BoundBreakdown elbo(int workers = 1, TileConfig tiles = {}) const {
    Engine engine(ModelKind::regression, x_, Matrix(), y_, workers, tiles, jitter_factor_);
    engine.broadcast({kernel_, beta_.beta, z_});
    return engine.evaluate(false).bound;
  }

  FitTrace fit(const FitOptions& opts = {}) {
    ModelParams p{kernel_, beta_.beta, z_, {}, {}};
    FitSession session(ModelKind::regression, x_, Matrix(), y_, p, opts, jitter_factor_);
    while (session.sync_step()) {
      if (opts.verbose)
        std::cerr << "iter " << session.engine().broadcast_count() << " bound "
                  << session.current_bound() << "\n";
    }
    ModelParams fitted = session.current_params();
    kernel_ = fitted.kernel;
    beta_.beta = fitted.beta;
    z_ = fitted.z;
    finalize();
    return session.finish();
  }

  /// Build the prediction cache from the current parameters (fit() does this
  /// automatically; call it directly when parameters are set by hand).
  void finalize() {
    SufficientStats stats = stats_deterministic(x_, y_, z_, kernel_);
    detail::PredictCache cache;
    cache.gram = factor_gram(z_, kernel_, jitter_factor_);
    detail::BoundCore core =
        detail::bound_core(stats, cache.gram.kmm, beta_.beta, n(), d());
    cache.chol_a = core.ws.chol_a;
    cache.g = core.ws.g;
    cache.beta = beta_.beta;
    cache.variance = kernel_.variance;
    cache.bound = core.bd.total;
    cache_ = std::move(cache);
  }

  double cached_bound() const {
    require(cache_.has_value(), "SparseGPRegression: not fitted");
    return cache_->bound;
  }

  Prediction predict(const Matrix& x_star, PredictMode mode = PredictMode::observation) const {
    require(cache_.has_value(), "SparseGPRegression: predict() before fit()/finalize()");
    require(x_star.cols() == q(), "predict: X* column mismatch");
    Matrix kstar = kern_cross(x_star, z_, kernel_);
    return detail::predict_from_cache(*cache_, kstar, d(), kernel_.variance, mode, beta_.beta);
  }

 private:
  Matrix x_, y_;
  KernelSpec kernel_;
  NoiseModel beta_;
  Matrix z_;
  double jitter_factor_;
  std::optional<detail::PredictCache> cache_;
};

// ---------------------------------------------------------------------------
// Bayesian GP-LVM
// ---------------------------------------------------------------------------

class BayesianGPLVM {
 public:
  BayesianGPLVM(Matrix y, VariationalPosterior q, KernelSpec kernel, double beta, Matrix z,
                double jitter_factor = 1e-6)
      : y_(std::move(y)), q_(std::move(q)), kernel_(std::move(kernel)), beta_{beta},
        z_(std::move(z)), jitter_factor_(jitter_factor) {
    kernel_.validate();
    beta_.validate();
    q_.validate();
    require(q_.n() == y_.rows(), "BayesianGPLVM: q/Y row mismatch");
    require(z_.cols() == q_.q(), "BayesianGPLVM: Z column mismatch");
  }

  Index n() const { return y_.rows(); }
  Index d() const { return y_.cols(); }
  Index latent_dim() const { return q_.q(); }
  Index m() const { return z_.rows(); }
  const VariationalPosterior& posterior() const { return q_; }
  const Matrix& inducing() const { return z_; }
  const KernelSpec& kernel() const { return kernel_; }
  double beta() const { return beta_.beta; }
  double jitter_factor() const { return jitter_factor_; }

  BoundBreakdown elbo(int workers = 1, TileConfig tiles = {}) const {
    Engine engine(ModelKind::latent, q_.mu, q_.s, y_, workers, tiles, jitter_factor_);
    engine.broadcast({kernel_, beta_.beta, z_}, &q_.mu, &q_.s);
    return engine.evaluate(false).bound;
  }

  FitTrace fit(const FitOptions& opts = {}) {
    ModelParams p{kernel_, beta_.beta, z_, q_.mu, q_.s};
    FitSession session(ModelKind::latent, q_.mu, q_.s, y_, p, opts, jitter_factor_);
    while (session.sync_step()) {
      if (opts.verbose)
        std::cerr << "iter " << session.engine().broadcast_count() << " bound "
                  << session.current_bound() << "\n";
    }
    ModelParams fitted = session.current_params();
    kernel_ = fitted.kernel;
    beta_.beta = fitted.beta;
    z_ = fitted.z;
    q_.mu = fitted.mu;
    q_.s = fitted.s;
    finalize();
    return session.finish();
  }

  void finalize() {
    SufficientStats stats = stats_expected(q_, y_, z_, kernel_);
    detail::PredictCache cache;
    cache.gram = factor_gram(z_, kernel_, jitter_factor_);
    detail::BoundCore core =
        detail::bound_core(stats, cache.gram.kmm, beta_.beta, n(), d());
    cache.chol_a = core.ws.chol_a;
    cache.g = core.ws.g;
    cache.beta = beta_.beta;
    cache.variance = kernel_.variance;
    cache.bound = core.bd.total - kl_gaussian(q_);
    cache_ = std::move(cache);
  }

  double cached_bound() const {
    require(cache_.has_value(), "BayesianGPLVM: not fitted");
    return cache_->bound;
  }

  /// Prediction at latent points (rows of x_star live in the latent space).
  Prediction predict(const Matrix& x_star, PredictMode mode = PredictMode::observation) const {
    require(cache_.has_value(), "BayesianGPLVM: predict() before fit()/finalize()");
    require(x_star.cols() == latent_dim(), "predict: X* column mismatch");
    Matrix kstar = kern_cross(x_star, z_, kernel_);
    return detail::predict_from_cache(*cache_, kstar, d(), kernel_.variance, mode, beta_.beta);
  }

 private:
  Matrix y_;
  VariationalPosterior q_;
  KernelSpec kernel_;
  NoiseModel beta_;
  Matrix z_;
  double jitter_factor_;
  std::optional<detail::PredictCache> cache_;
};

/// PCA-based initialization: mu from the first Q principal directions of
/// mean-centered Y scaled to unit variance, s = 0.5, Z sampled without
/// replacement from the mu rows, variance = var(Y), lengthscales = 1,
/// beta = 100 / var(Y).
inline BayesianGPLVM init_gplvm(const Matrix& y, Index q, Index m, std::uint64_t seed,
                                double jitter_factor = 1e-6) {
  const Index n = y.rows(), d = y.cols();
  require(n >= 2, "init_gplvm: need at least two datapoints");
  require(q >= 1, "init_gplvm: latent dimension must be >= 1");
  require(m >= 1 && m <= n, "init_gplvm: need 1 <= M <= N");
  if (q > d) std::cerr << "sgp: warning: latent dimension exceeds data dimension\n";

  Matrix centered = y.rowwise() - y.colwise().mean();
  const double var_y = centered.squaredNorm() / static_cast<double>(n * d);
  require(var_y > 0.0, "init_gplvm: Y has zero variance");

  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Index rank = std::min(q, svd.singularValues().size());
  Matrix mu = Matrix::Zero(n, q);
  for (Index j = 0; j < rank; ++j) {
    Vector pc = svd.matrixU().col(j) * svd.singularValues()[j];
    const double sd = std::sqrt(pc.squaredNorm() / static_cast<double>(n));
    mu.col(j) = sd > 0.0 ? (pc / sd).eval() : pc;
  }

  // M distinct rows of mu, chosen by a seeded partial Fisher-Yates.
  Rng rng(seed);
  std::vector<Index> idx(n);
  for (Index i = 0; i < n; ++i) idx[i] = i;
  Matrix z(m, q);
  for (Index i = 0; i < m; ++i) {
    const Index j = i + static_cast<Index>(rng.next_index(n - i));
    std::swap(idx[i], idx[j]);
    z.row(i) = mu.row(idx[i]);
  }

  VariationalPosterior post{mu, Matrix::Constant(n, q, 0.5)};
  KernelSpec kernel = KernelSpec::iso(var_y, 1.0, q);
  return BayesianGPLVM(y, std::move(post), std::move(kernel), 100.0 / var_y, std::move(z),
                       jitter_factor);
}

}  // namespace sgp
