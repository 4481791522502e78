#pragma once

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sgp/common.hpp"
#include "sgp/kernels.hpp"
#include "sgp/psi_stats.hpp"

namespace sgp {

// ---------------------------------------------------------------------------
// Parameter packing
// ---------------------------------------------------------------------------

/// Fixed segment order of the unconstrained parameter vector:
///   log_beta(1) | log_variance(1) | log_lengthscales(Q) | Z(M*Q) |
///   mu(N*Q) | log_s(N*Q)
/// The mu/log_s segments exist only for the latent-variable model.
/// Matrix segments are packed row-major.
struct ParameterLayout {
  Index q = 0;
  Index m = 0;
  Index n = 0;          // 0 for the regression model
  bool has_latent = false;

  Index size() const { return 2 + q + m * q + (has_latent ? 2 * n * q : 0); }

  Index beta_offset() const { return 0; }
  Index variance_offset() const { return 1; }
  Index lengthscale_offset() const { return 2; }
  Index z_offset() const { return 2 + q; }
  Index mu_offset() const { return z_offset() + m * q; }
  Index s_offset() const { return mu_offset() + n * q; }

  struct Segment {
    std::string name;
    Index offset;
    Index length;
  };

  std::vector<Segment> segments() const {
    std::vector<Segment> out = {{"log_beta", beta_offset(), 1},
                                {"log_variance", variance_offset(), 1},
                                {"log_lengthscales", lengthscale_offset(), q},
                                {"z", z_offset(), m * q}};
    if (has_latent) {
      out.push_back({"mu", mu_offset(), n * q});
      out.push_back({"log_s", s_offset(), n * q});
    }
    return out;
  }
};

/// Raw (constrained) model parameters plus the optional variational slots.
struct ModelParams {
  KernelSpec kernel;
  double beta = 1.0;
  Matrix z;
  Matrix mu;  // empty for regression
  Matrix s;   // empty for regression
};

inline Vector pack(const ModelParams& p, const ParameterLayout& layout) {
  p.kernel.validate();
  require(p.beta > 0.0, "pack: beta must be positive");
  require(p.kernel.input_dim() == layout.q && p.z.rows() == layout.m && p.z.cols() == layout.q,
          "pack: layout mismatch");
  Vector v(layout.size());
  v[layout.beta_offset()] = std::log(p.beta);
  v[layout.variance_offset()] = std::log(p.kernel.variance);
  for (Index j = 0; j < layout.q; ++j)
    v[layout.lengthscale_offset() + j] = std::log(p.kernel.lengthscales[j]);
  for (Index i = 0; i < layout.m; ++i)
    for (Index j = 0; j < layout.q; ++j) v[layout.z_offset() + i * layout.q + j] = p.z(i, j);
  if (layout.has_latent) {
    require(p.mu.rows() == layout.n && p.mu.cols() == layout.q, "pack: mu shape mismatch");
    require((p.s.array() > 0.0).all(), "pack: s must be positive");
    for (Index i = 0; i < layout.n; ++i)
      for (Index j = 0; j < layout.q; ++j) {
        v[layout.mu_offset() + i * layout.q + j] = p.mu(i, j);
        v[layout.s_offset() + i * layout.q + j] = std::log(p.s(i, j));
      }
  }
  return v;
}

inline ModelParams unpack(const Vector& v, const ParameterLayout& layout) {
  require(v.size() == layout.size(), "unpack: vector size mismatch");
  ModelParams p;
  p.beta = std::exp(v[layout.beta_offset()]);
  p.kernel.variance = std::exp(v[layout.variance_offset()]);
  p.kernel.lengthscales = Vector(layout.q);
  for (Index j = 0; j < layout.q; ++j)
    p.kernel.lengthscales[j] = std::exp(v[layout.lengthscale_offset() + j]);
  p.z = Matrix(layout.m, layout.q);
  for (Index i = 0; i < layout.m; ++i)
    for (Index j = 0; j < layout.q; ++j) p.z(i, j) = v[layout.z_offset() + i * layout.q + j];
  if (layout.has_latent) {
    p.mu = Matrix(layout.n, layout.q);
    p.s = Matrix(layout.n, layout.q);
    for (Index i = 0; i < layout.n; ++i)
      for (Index j = 0; j < layout.q; ++j) {
        p.mu(i, j) = v[layout.mu_offset() + i * layout.q + j];
        p.s(i, j) = std::exp(v[layout.s_offset() + i * layout.q + j]);
      }
  }
  return p;
}

/// Gradients w.r.t. the raw parameters, in the same slots as ModelParams.
struct RawGrads {
  double d_beta = 0.0;
  double d_variance = 0.0;
  Vector d_lengthscales;
  Matrix d_z;
  Matrix d_mu;  // empty for regression
  Matrix d_s;   // empty for regression
};

/// Chain rule through the log transforms: d/d(log t) = t * d/dt.
inline Vector pack_gradient(const RawGrads& g, const ModelParams& p,
                            const ParameterLayout& layout) {
  Vector v(layout.size());
  v[layout.beta_offset()] = p.beta * g.d_beta;
  v[layout.variance_offset()] = p.kernel.variance * g.d_variance;
  for (Index j = 0; j < layout.q; ++j)
    v[layout.lengthscale_offset() + j] = p.kernel.lengthscales[j] * g.d_lengthscales[j];
  for (Index i = 0; i < layout.m; ++i)
    for (Index j = 0; j < layout.q; ++j) v[layout.z_offset() + i * layout.q + j] = g.d_z(i, j);
  if (layout.has_latent) {
    for (Index i = 0; i < layout.n; ++i)
      for (Index j = 0; j < layout.q; ++j) {
        v[layout.mu_offset() + i * layout.q + j] = g.d_mu(i, j);
        v[layout.s_offset() + i * layout.q + j] = p.s(i, j) * g.d_s(i, j);
      }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Limited-memory quasi-Newton with a strong-Wolfe line search
// ---------------------------------------------------------------------------

/// Objective callback: value and gradient at v.
using Objective = std::function<double(const Vector& v, Vector& grad)>;

struct LbfgsOptions {
  int memory = 10;
  double c1 = 1e-4;          // sufficient decrease
  double c2 = 0.9;           // curvature
  double g_tol = 1e-5;       // gradient 2-norm stop
  double f_tol = 1e-9;       // relative value-change stop
  int max_iters = 500;
  int max_evals = 0;         // 0 = unlimited
  int max_line_search = 40;
};

enum class OptStatus {
  gradient_converged,
  value_converged,
  max_iterations,
  max_evaluations,
  line_search_failed,
};

inline const char* to_string(OptStatus s) {
  switch (s) {
    case OptStatus::gradient_converged: return "gradient_converged";
    case OptStatus::value_converged: return "value_converged";
    case OptStatus::max_iterations: return "max_iterations";
    case OptStatus::max_evaluations: return "max_evaluations";
    case OptStatus::line_search_failed: return "line_search_failed";
  }
  return "unknown";
}

struct IterationRecord {
  int iter = 0;
  double value = 0.0;
  double grad_norm = 0.0;
  double elapsed_s = 0.0;  // wall time of this iteration
  int evals = 0;           // objective evaluations consumed by this iteration
};

struct MinimizeResult {
  Vector x;
  double value = 0.0;
  Vector grad;
  OptStatus status = OptStatus::max_iterations;
  std::vector<IterationRecord> trace;  // trace[0] is the starting point
  int total_evals = 0;
  std::string message;
};

/// Resumable L-BFGS state: one call to step() performs one outer iteration
/// (direction + strong-Wolfe line search). Keeping the state externally
/// steppable is what lets the distributed driver interleave its
/// collect/broadcast protocol with optimization.
class LbfgsState {
 public:
  LbfgsState(Vector x0, const LbfgsOptions& opts) : opts_(opts), x_(std::move(x0)) {}

  /// Evaluate the objective at the current iterate; must be called once
  /// before the first step().
  void initialize(const Objective& f) {
    grad_.resize(x_.size());
    value_ = eval(f, x_, grad_);
    if (!std::isfinite(value_)) throw NumericError("minimize: non-finite objective at start");
    initialized_ = true;
  }

  bool done() const { return done_; }
  OptStatus status() const { return status_; }
  const Vector& x() const { return x_; }
  double value() const { return value_; }
  const Vector& grad() const { return grad_; }
  int total_evals() const { return evals_; }
  int iterations() const { return iter_; }
  const std::string& message() const { return message_; }

  /// One outer iteration. Returns false once converged/stopped (state
  /// unchanged from the last accepted iterate).
  bool step(const Objective& f) {
    require(initialized_, "LbfgsState: initialize() before step()");
    if (done_) return false;

    if (grad_.norm() <= opts_.g_tol) {
      finish(OptStatus::gradient_converged);
      return false;
    }
    if (opts_.max_iters >= 0 && iter_ >= opts_.max_iters) {
      finish(OptStatus::max_iterations);
      return false;
    }
    if (opts_.max_evals > 0 && evals_ >= opts_.max_evals) {
      finish(OptStatus::max_evaluations);
      return false;
    }

    // Two-loop recursion.
    Vector dir = -grad_;
    if (!history_.empty()) {
      std::vector<double> alpha(history_.size());
      for (Index i = static_cast<Index>(history_.size()) - 1; i >= 0; --i) {
        const auto& h = history_[i];
        alpha[i] = h.rho * h.s.dot(dir);
        dir -= alpha[i] * h.y;
      }
      const auto& last = history_.back();
      dir *= last.s.dot(last.y) / last.y.squaredNorm();
      for (std::size_t i = 0; i < history_.size(); ++i) {
        const auto& h = history_[i];
        const double beta = h.rho * h.y.dot(dir);
        dir += (alpha[i] - beta) * h.s;
      }
    }

    double slope = grad_.dot(dir);
    if (slope >= 0.0) {
      // Curvature memory went bad; restart from steepest descent.
      history_.clear();
      dir = -grad_;
      slope = grad_.dot(dir);
    }

    const double alpha0 =
        history_.empty() ? std::min(1.0, 1.0 / std::max(1.0, grad_.norm())) : 1.0;

    Vector x_new, g_new(x_.size());
    double f_new = 0.0, alpha = 0.0;
    if (!line_search(f, dir, slope, alpha0, alpha, x_new, f_new, g_new)) {
      if (opts_.max_evals > 0 && evals_ >= opts_.max_evals) {
        finish(OptStatus::max_evaluations);
      } else {
        finish(OptStatus::line_search_failed);
        message_ = "line search failed to satisfy the Wolfe conditions; returning best iterate";
      }
      return false;
    }

    Vector s = x_new - x_;
    Vector yv = g_new - grad_;
    const double sy = s.dot(yv);
    if (sy > 1e-16 * s.norm() * yv.norm()) {
      history_.push_back({std::move(s), std::move(yv), 1.0 / sy});
      if (static_cast<int>(history_.size()) > opts_.memory) history_.pop_front();
    }

    const double f_prev = value_;
    x_ = std::move(x_new);
    value_ = f_new;
    grad_ = std::move(g_new);
    ++iter_;

    if (grad_.norm() <= opts_.g_tol) {
      finish(OptStatus::gradient_converged);
    } else if (std::abs(f_prev - value_) <=
               opts_.f_tol * std::max({std::abs(f_prev), std::abs(value_), 1.0})) {
      finish(OptStatus::value_converged);
    }
    return true;
  }

  int last_step_evals() const { return last_step_evals_; }

 private:
  struct Pair {
    Vector s, y;
    double rho;
  };

  double eval(const Objective& f, const Vector& x, Vector& g) {
    ++evals_;
    ++last_step_evals_;
    return f(x, g);
  }

  void finish(OptStatus s) {
    done_ = true;
    status_ = s;
  }

  // Strong-Wolfe line search (bracket + zoom with cubic/bisection steps).
  bool line_search(const Objective& f, const Vector& dir, double slope0, double alpha0,
                   double& alpha_out, Vector& x_out, double& f_out, Vector& g_out) {
    last_step_evals_ = 0;
    const double f0 = value_;
    const double c1 = opts_.c1, c2 = opts_.c2;
    const double alpha_max = 1e10;

    auto phi = [&](double a, double& dphi, Vector& g) {
      x_out = x_ + a * dir;
      const double v = eval(f, x_out, g);
      dphi = g.dot(dir);
      return v;
    };

    double alpha_prev = 0.0, f_prev = f0, dphi_prev = slope0;
    double alpha = alpha0;
    Vector g(x_.size());

    for (int it = 0; it < opts_.max_line_search; ++it) {
      if (opts_.max_evals > 0 && evals_ >= opts_.max_evals) return false;
      double dphi = 0.0;
      const double fa = phi(alpha, dphi, g);

      if (!std::isfinite(fa)) {
        // Back off from a region where the objective blew up.
        alpha = 0.5 * (alpha_prev + alpha);
        continue;
      }
      if (fa > f0 + c1 * alpha * slope0 || (it > 0 && fa >= f_prev)) {
        return zoom(f, dir, f0, slope0, alpha_prev, f_prev, dphi_prev, alpha, fa, dphi, alpha_out,
                    x_out, f_out, g_out);
      }
      if (std::abs(dphi) <= -c2 * slope0) {
        alpha_out = alpha;
        f_out = fa;
        g_out = g;
        x_out = x_ + alpha * dir;
        return true;
      }
      if (dphi >= 0.0) {
        return zoom(f, dir, f0, slope0, alpha, fa, dphi, alpha_prev, f_prev, dphi_prev, alpha_out,
                    x_out, f_out, g_out);
      }
      alpha_prev = alpha;
      f_prev = fa;
      dphi_prev = dphi;
      alpha = std::min(2.0 * alpha, alpha_max);
      if (alpha >= alpha_max) return false;
    }
    return false;
  }

  bool zoom(const Objective& f, const Vector& dir, double f0, double slope0, double alpha_lo,
            double f_lo, double dphi_lo, double alpha_hi, double f_hi, double dphi_hi,
            double& alpha_out, Vector& x_out, double& f_out, Vector& g_out) {
    const double c1 = opts_.c1, c2 = opts_.c2;
    Vector g(x_.size());
    for (int it = 0; it < opts_.max_line_search; ++it) {
      if (opts_.max_evals > 0 && evals_ >= opts_.max_evals) return false;

      // Cubic interpolation between lo and hi, safeguarded by bisection.
      double alpha = 0.0;
      {
        const double d1 = dphi_lo + dphi_hi - 3.0 * (f_lo - f_hi) / (alpha_lo - alpha_hi);
        const double disc = d1 * d1 - dphi_lo * dphi_hi;
        if (disc > 0.0) {
          const double d2 = std::sqrt(disc) * (alpha_hi > alpha_lo ? 1.0 : -1.0);
          alpha = alpha_hi -
                  (alpha_hi - alpha_lo) * (dphi_hi + d2 - d1) / (dphi_hi - dphi_lo + 2.0 * d2);
        }
        const double lo = std::min(alpha_lo, alpha_hi), hi = std::max(alpha_lo, alpha_hi);
        const double width = hi - lo;
        if (!(alpha > lo + 0.05 * width && alpha < hi - 0.05 * width))
          alpha = 0.5 * (alpha_lo + alpha_hi);
      }

      double dphi = 0.0;
      x_out = x_ + alpha * dir;
      const double fa = eval(f, x_out, g);
      dphi = g.dot(dir);

      if (!std::isfinite(fa) || fa > f0 + c1 * alpha * slope0 || fa >= f_lo) {
        alpha_hi = alpha;
        f_hi = fa;
        dphi_hi = dphi;
      } else {
        if (std::abs(dphi) <= -c2 * slope0) {
          alpha_out = alpha;
          f_out = fa;
          g_out = g;
          return true;
        }
        if (dphi * (alpha_hi - alpha_lo) >= 0.0) {
          alpha_hi = alpha_lo;
          f_hi = f_lo;
          dphi_hi = dphi_lo;
        }
        alpha_lo = alpha;
        f_lo = fa;
        dphi_lo = dphi;
      }
      if (std::abs(alpha_hi - alpha_lo) < 1e-16 * std::max(1.0, std::abs(alpha_lo))) break;
    }
    // Interval collapsed without meeting the curvature condition; accept the
    // best sufficient-decrease point if it strictly improves.
    if (f_lo < f0 && alpha_lo > 0.0) {
      double dphi = 0.0;
      x_out = x_ + alpha_lo * dir;
      f_out = eval(f, x_out, g_out);
      dphi = g_out.dot(dir);
      (void)dphi;
      alpha_out = alpha_lo;
      return std::isfinite(f_out) && f_out < f0;
    }
    return false;
  }

  LbfgsOptions opts_;
  Vector x_, grad_;
  double value_ = 0.0;
  std::deque<Pair> history_;
  int iter_ = 0;
  int evals_ = 0;
  int last_step_evals_ = 0;
  bool initialized_ = false;
  bool done_ = false;
  OptStatus status_ = OptStatus::max_iterations;
  std::string message_;
};

/// Whole-run driver around LbfgsState. Accepted iterates have non-increasing
/// objective values (guaranteed by the sufficient-decrease condition).
inline MinimizeResult minimize(const Objective& f, const Vector& x0,
                               const LbfgsOptions& opts = {}) {
  LbfgsState state(x0, opts);
  state.initialize(f);

  MinimizeResult res;
  res.trace.push_back({0, state.value(), state.grad().norm(), 0.0, 1});

  using clock = std::chrono::steady_clock;
  while (true) {
    const auto t0 = clock::now();
    const bool advanced = state.step(f);
    if (!advanced) break;
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    res.trace.push_back({state.iterations(), state.value(), state.grad().norm(), dt,
                         state.last_step_evals()});
  }

  res.x = state.x();
  res.value = state.value();
  res.grad = state.grad();
  res.status = state.status();
  res.total_evals = state.total_evals();
  res.message = state.message();
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness
// ---------------------------------------------------------------------------

struct GradCheckSegment {
  std::string name;
  double max_rel_err = 0.0;
  Index worst_coord = -1;
  Index checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckSegment> segments;
  double worst = 0.0;

  bool passes(double tol) const { return worst < tol; }
};

/// Central-difference check of an analytic gradient, per layout segment.
/// Segments longer than `max_coords_per_segment` are subsampled
/// deterministically (seeded), which keeps the cost bounded for the N*Q
/// segments while preserving detection power.
inline GradCheckReport grad_check(const Objective& f, const Vector& v,
                                  const ParameterLayout& layout, double step = 1e-5,
                                  Index max_coords_per_segment = 50, std::uint64_t seed = 17) {
  require(step > 0.0, "grad_check: step must be positive");
  Vector analytic(v.size());
  (void)f(v, analytic);

  GradCheckReport report;
  Rng rng(seed);
  Vector vp = v;
  Vector scratch(v.size());

  for (const auto& seg : layout.segments()) {
    GradCheckSegment out;
    out.name = seg.name;

    std::vector<Index> coords;
    if (seg.length <= max_coords_per_segment) {
      for (Index i = 0; i < seg.length; ++i) coords.push_back(seg.offset + i);
    } else {
      for (Index i = 0; i < max_coords_per_segment; ++i)
        coords.push_back(seg.offset + static_cast<Index>(rng.next_index(seg.length)));
    }

    for (Index c : coords) {
      const double saved = vp[c];
      vp[c] = saved + step;
      const double fp = f(vp, scratch);
      vp[c] = saved - step;
      const double fm = f(vp, scratch);
      vp[c] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double err =
          std::abs(analytic[c] - fd) / std::max({std::abs(analytic[c]), std::abs(fd), 1.0});
      if (err > out.max_rel_err) {
        out.max_rel_err = err;
        out.worst_coord = c;
      }
      ++out.checked;
    }
    report.worst = std::max(report.worst, out.max_rel_err);
    report.segments.push_back(std::move(out));
  }
  return report;
}

}  // namespace sgp
