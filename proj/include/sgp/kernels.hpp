#pragma once

#include <cmath>
#include <iostream>
#include <limits>

#include "sgp/common.hpp"

namespace sgp {

/// ARD exponentiated-quadratic covariance:
///   k(x, x') = variance * exp(-1/2 * sum_q (x_q - x'_q)^2 / lengthscales_q^2)
struct KernelSpec {
  double variance = 1.0;
  Vector lengthscales;

  Index input_dim() const { return lengthscales.size(); }

  void validate() const {
    require(std::isfinite(variance) && variance > 0.0, "kernel variance must be positive");
    require(lengthscales.size() >= 1, "kernel needs at least one lengthscale");
    for (Index q = 0; q < lengthscales.size(); ++q)
      require(std::isfinite(lengthscales[q]) && lengthscales[q] > 0.0,
              "kernel lengthscales must be positive");
  }

  static KernelSpec iso(double variance, double lengthscale, Index q) {
    KernelSpec k;
    k.variance = variance;
    k.lengthscales = Vector::Constant(q, lengthscale);
    return k;
  }
};

namespace detail {

inline void check_inputs(const Eigen::Ref<const Matrix>& x, const KernelSpec& k,
                         const char* name) {
  require(x.cols() == k.input_dim(),
          std::string(name) + ": column count does not match kernel input dimension");
  require(x.allFinite(), std::string(name) + ": non-finite entries");
}

}  // namespace detail

/// k(x, x) for every row of X. Stationary kernel, so every entry is the
/// kernel variance.
inline Vector kern_diag(const Eigen::Ref<const Matrix>& x, const KernelSpec& k) {
  k.validate();
  detail::check_inputs(x, k, "kern_diag");
  return Vector::Constant(x.rows(), k.variance);
}

/// Cross-covariance matrix between data rows X (N x Q) and inducing rows
/// Z (M x Q).
inline Matrix kern_cross(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& z,
                         const KernelSpec& k) {
  k.validate();
  detail::check_inputs(x, k, "kern_cross X");
  detail::check_inputs(z, k, "kern_cross Z");

  const Index n = x.rows(), m = z.rows(), q = k.input_dim();
  Vector inv_l2(q);
  for (Index j = 0; j < q; ++j) inv_l2[j] = 1.0 / (k.lengthscales[j] * k.lengthscales[j]);

  Matrix out(n, m);
  for (Index mm = 0; mm < m; ++mm) {
    for (Index nn = 0; nn < n; ++nn) {
      double d2 = 0.0;
      for (Index j = 0; j < q; ++j) {
        const double d = x(nn, j) - z(mm, j);
        d2 += d * d * inv_l2[j];
      }
      out(nn, mm) = k.variance * std::exp(-0.5 * d2);
    }
  }
  return out;
}

/// Gram matrix over the inducing inputs with `jitter` added to the diagonal.
/// Near-duplicate rows are warned about (not rejected); the jitter policy is
/// what keeps the factorization alive in that case.
inline Matrix kern_gram(const Eigen::Ref<const Matrix>& z, const KernelSpec& k, double jitter) {
  k.validate();
  detail::check_inputs(z, k, "kern_gram Z");
  require(z.rows() >= 1, "kern_gram: need at least one inducing input");
  require(jitter >= 0.0, "kern_gram: jitter must be non-negative");

  const Index m = z.rows(), q = k.input_dim();
  Vector inv_l2(q);
  for (Index j = 0; j < q; ++j) inv_l2[j] = 1.0 / (k.lengthscales[j] * k.lengthscales[j]);

  Matrix out(m, m);
  bool near_duplicate = false;
  for (Index a = 0; a < m; ++a) {
    out(a, a) = k.variance + jitter;
    for (Index b = a + 1; b < m; ++b) {
      double d2 = 0.0;
      for (Index j = 0; j < q; ++j) {
        const double d = z(a, j) - z(b, j);
        d2 += d * d * inv_l2[j];
      }
      if (d2 < 1e-24) near_duplicate = true;
      const double v = k.variance * std::exp(-0.5 * d2);
      out(a, b) = v;
      out(b, a) = v;
    }
  }
  if (near_duplicate)
    std::cerr << "sgp: warning: near-duplicate inducing inputs (relying on jitter)\n";
  return out;
}

struct KernGrads {
  double d_variance = 0.0;
  Vector d_lengthscales;  // Q
  Matrix d_z;             // M x Q
  Matrix d_x;             // N x Q
};

/// Adjoint of kern_cross: given upstream = dL/dK (N x M), accumulates
/// sum_{n,m} upstream_{nm} * dk(x_n, z_m)/d(parameter). Z- and theta-
/// gradients contract over n, X-gradients over m.
inline KernGrads kern_grads(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& z,
                            const KernelSpec& k, const Eigen::Ref<const Matrix>& upstream) {
  k.validate();
  detail::check_inputs(x, k, "kern_grads X");
  detail::check_inputs(z, k, "kern_grads Z");
  require(upstream.rows() == x.rows() && upstream.cols() == z.rows(),
          "kern_grads: upstream shape must be N x M");

  const Index n = x.rows(), m = z.rows(), q = k.input_dim();
  Vector inv_l2(q), inv_l3(q);
  for (Index j = 0; j < q; ++j) {
    const double l = k.lengthscales[j];
    inv_l2[j] = 1.0 / (l * l);
    inv_l3[j] = 1.0 / (l * l * l);
  }

  KernGrads g;
  g.d_lengthscales = Vector::Zero(q);
  g.d_z = Matrix::Zero(m, q);
  g.d_x = Matrix::Zero(n, q);

  for (Index mm = 0; mm < m; ++mm) {
    for (Index nn = 0; nn < n; ++nn) {
      double d2 = 0.0;
      for (Index j = 0; j < q; ++j) {
        const double d = x(nn, j) - z(mm, j);
        d2 += d * d * inv_l2[j];
      }
      const double v = k.variance * std::exp(-0.5 * d2);
      const double uv = upstream(nn, mm) * v;
      g.d_variance += uv / k.variance;
      for (Index j = 0; j < q; ++j) {
        const double d = x(nn, j) - z(mm, j);
        g.d_x(nn, j) -= uv * d * inv_l2[j];
        g.d_z(mm, j) += uv * d * inv_l2[j];
        g.d_lengthscales[j] += uv * d * d * inv_l3[j];
      }
    }
  }
  return g;
}

/// Gram matrix factored by Cholesky, with the jitter escalation policy:
/// start at jitter_factor * variance, escalate x10 on failure up to
/// 1e-2 * variance, then give up.
struct GramFactor {
  Matrix kmm;                // jitter included
  Eigen::LLT<Matrix> chol;
  double jitter = 0.0;       // the jitter actually used
  double jitter_factor = 0.0;
  double log_det = 0.0;
};

inline GramFactor factor_gram(const Eigen::Ref<const Matrix>& z, const KernelSpec& k,
                              double jitter_factor = 1e-6) {
  require(jitter_factor >= 0.0, "factor_gram: jitter factor must be non-negative");
  double jf = jitter_factor;
  for (;;) {
    GramFactor f;
    f.jitter_factor = jf;
    f.jitter = jf * k.variance;
    f.kmm = kern_gram(z, k, f.jitter);
    f.chol.compute(f.kmm);
    if (f.chol.info() == Eigen::Success) {
      f.log_det = 2.0 * f.chol.matrixLLT().diagonal().array().log().sum();
      return f;
    }
    if (jf >= 1e-2) {
      throw NumericError("factor_gram: Gram matrix not factorizable even at jitter 1e-2 * variance "
                         "(ill-conditioned inducing inputs)");
    }
    jf = (jf == 0.0) ? 1e-6 : jf * 10.0;
  }
}

}  // namespace sgp
