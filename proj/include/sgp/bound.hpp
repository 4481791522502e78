#pragma once

#include <cmath>

#include "sgp/common.hpp"
#include "sgp/kernels.hpp"
#include "sgp/psi_stats.hpp"

namespace sgp {

struct NoiseModel {
  double beta = 1.0;  // noise precision; noise variance is 1/beta

  void validate() const {
    require(std::isfinite(beta) && beta > 0.0, "noise precision beta must be positive");
  }
};

/// The variational lower bound split into its additive terms. kl_term is the
/// signed contribution (-KL <= 0, zero for regression) so that total always
/// equals the sum of the terms.
struct BoundBreakdown {
  double total = 0.0;
  double log_det_term = 0.0;
  double data_fit_term = 0.0;
  double quadratic_term = 0.0;
  double trace_phi_term = 0.0;
  double trace_kmm_term = 0.0;
  double kl_term = 0.0;

  double term_sum() const {
    return log_det_term + data_fit_term + quadratic_term + trace_phi_term + trace_kmm_term +
           kl_term;
  }
};

/// M-sized coordinator algebra shared between the bound value, its adjoints,
/// the workers' local beta-gradient shares and prediction.
struct BoundWorkspace {
  Matrix a;               // Kmm + beta * Phi (plus escalation jitter if needed)
  Eigen::LLT<Matrix> chol_a;
  double log_det_a = 0.0;
  Matrix g;               // A^{-1} Psi, M x D
  Matrix a_inv;           // explicit inverses, formed from the factors
  Matrix kmm_inv;
  Eigen::LLT<Matrix> chol_kmm;
  double log_det_kmm = 0.0;
};

namespace detail {

inline Eigen::LLT<Matrix> factor_spd(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  // Escalating diagonal shift anchored to the matrix's own scale.
  const double scale = m.diagonal().cwiseAbs().maxCoeff();
  for (double f = 1e-10; f <= 1e-2; f *= 10.0) {
    llt.compute(m + f * scale * Matrix::Identity(m.rows(), m.cols()));
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericError(std::string(what) + ": Cholesky factorization failed after jitter escalation");
}

inline double log_det_from_llt(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline void check_bound_inputs(const SufficientStats& stats, const Matrix& kmm, double beta,
                               Index n, Index d) {
  require(beta > 0.0 && std::isfinite(beta), "bound: beta must be positive");
  require(n >= 1 && d >= 1, "bound: need N >= 1 and D >= 1");
  require(stats.n_count == n, "bound: stats n_count does not match N");
  require(stats.psi_y.cols() == d, "bound: stats D does not match D");
  require(kmm.rows() == kmm.cols() && kmm.rows() == stats.psi_y.rows(),
          "bound: Kmm shape does not match stats");
  require(stats.phi >= 0.0 && stats.yy >= 0.0, "bound: phi and yy must be non-negative");
}

struct BoundCore {
  BoundBreakdown bd;
  BoundWorkspace ws;
};

inline BoundCore bound_core(const SufficientStats& stats, const Eigen::Ref<const Matrix>& kmm,
                            double beta, Index n, Index d) {
  check_bound_inputs(stats, kmm, beta, n, d);
  const Index m = kmm.rows();

  BoundCore core;
  BoundWorkspace& ws = core.ws;
  ws.chol_kmm = factor_spd(kmm, "bound (Kmm)");
  ws.log_det_kmm = log_det_from_llt(ws.chol_kmm);

  ws.a = kmm + beta * stats.phi_big;
  ws.chol_a = factor_spd(ws.a, "bound (Kmm + beta*Phi)");
  ws.log_det_a = log_det_from_llt(ws.chol_a);
  ws.g = ws.chol_a.solve(stats.psi_y);
  ws.a_inv = ws.chol_a.solve(Matrix::Identity(m, m));
  ws.a_inv = 0.5 * (ws.a_inv + ws.a_inv.transpose()).eval();
  ws.kmm_inv = ws.chol_kmm.solve(Matrix::Identity(m, m));
  ws.kmm_inv = 0.5 * (ws.kmm_inv + ws.kmm_inv.transpose()).eval();

  const double log_2pi = 1.8378770664093454835606594728112;
  const double nd = static_cast<double>(n);
  const double dd = static_cast<double>(d);

  BoundBreakdown& bd = core.bd;
  bd.log_det_term =
      dd * (0.5 * nd * std::log(beta) + 0.5 * ws.log_det_kmm - 0.5 * nd * log_2pi -
            0.5 * ws.log_det_a);
  bd.data_fit_term = -0.5 * beta * stats.yy;
  bd.quadratic_term = 0.5 * beta * beta * (stats.psi_y.array() * ws.g.array()).sum();
  bd.trace_phi_term = -0.5 * beta * dd * stats.phi;
  bd.trace_kmm_term = 0.5 * beta * dd * (ws.kmm_inv.array() * stats.phi_big.array()).sum();
  bd.kl_term = 0.0;
  bd.total = bd.term_sum();
  if (!std::isfinite(bd.total)) throw NumericError("bound: non-finite value");
  return core;
}

}  // namespace detail

/// Aggregated variational bound for sparse GP regression, assembled from the
/// sufficient statistics. All inverses and determinants go through
/// Cholesky factors; no explicit inverse enters the value path.
inline BoundBreakdown bound_regression(const SufficientStats& stats,
                                       const Eigen::Ref<const Matrix>& kmm, double beta, Index n,
                                       Index d) {
  return detail::bound_core(stats, kmm, beta, n, d).bd;
}

/// Per-dimension bound F_d on the explicit K_nm (small-N verification path).
/// Summing over dimensions reproduces bound_regression exactly.
inline double bound_per_dimension(const Eigen::Ref<const Vector>& y_d,
                                  const Eigen::Ref<const Matrix>& knm,
                                  const Eigen::Ref<const Matrix>& kmm, double beta, double phi,
                                  const Eigen::Ref<const Matrix>& phi_big) {
  const Index n = y_d.size();
  require(knm.rows() == n, "bound_per_dimension: K_nm row count mismatch");
  require(kmm.rows() == kmm.cols() && kmm.rows() == knm.cols(),
          "bound_per_dimension: Kmm shape mismatch");
  require(beta > 0.0, "bound_per_dimension: beta must be positive");

  auto chol_kmm = detail::factor_spd(kmm, "bound_per_dimension (Kmm)");
  Matrix a = kmm + beta * phi_big;
  auto chol_a = detail::factor_spd(a, "bound_per_dimension (A)");

  const double log_2pi = 1.8378770664093454835606594728112;
  const double nd = static_cast<double>(n);
  Vector kty = knm.transpose() * y_d;
  Vector sol = chol_a.solve(kty);

  double f = 0.5 * nd * std::log(beta) + 0.5 * detail::log_det_from_llt(chol_kmm) -
             0.5 * nd * log_2pi - 0.5 * detail::log_det_from_llt(chol_a);
  f += -0.5 * beta * y_d.squaredNorm();
  f += 0.5 * beta * beta * kty.dot(sol);
  f += -0.5 * beta * phi;
  f += 0.5 * beta * chol_kmm.solve(phi_big).trace();
  return f;
}

/// KL(q || p) against the standard-normal prior, summed over datapoints and
/// dimensions: sum 1/2 (s + mu^2 - log s - 1). Non-negative, zero iff q = p.
inline double kl_gaussian(const VariationalPosterior& q) {
  q.validate();
  const auto& mu = q.mu.array();
  const auto& s = q.s.array();
  return 0.5 * (s + mu.square() - s.log() - 1.0).sum();
}

/// Bayesian GP-LVM bound: the regression bound on expected statistics minus
/// the KL of the variational posterior from the prior.
inline BoundBreakdown bound_gplvm(const SufficientStats& expected_stats,
                                  const Eigen::Ref<const Matrix>& kmm, double beta,
                                  const VariationalPosterior& q, Index n, Index d) {
  BoundBreakdown bd = bound_regression(expected_stats, kmm, beta, n, d);
  bd.kl_term = -kl_gaussian(q);
  bd.total = bd.term_sum();
  return bd;
}

/// Partial derivatives of bound_regression's total w.r.t. each argument,
/// holding the others fixed. d_kmm and d_phi_big are the symmetric-matrix
/// gradients (directional derivative under a symmetric perturbation dM is
/// sum_ij grad_ij dM_ij).
struct BoundAdjoints {
  double d_phi = 0.0;
  Matrix d_psi_y;    // M x D
  Matrix d_phi_big;  // M x M
  Matrix d_kmm;      // M x M
  double d_beta = 0.0;
};

namespace detail {

inline BoundAdjoints adjoints_from_core(const BoundCore& core, const SufficientStats& stats,
                                        double beta, Index n, Index d) {
  const BoundWorkspace& ws = core.ws;
  const double dd = static_cast<double>(d);
  const Index m = ws.a.rows();

  BoundAdjoints adj;
  adj.d_phi = -0.5 * beta * dd;
  adj.d_psi_y = beta * beta * ws.g;

  Matrix ggt = ws.g * ws.g.transpose();
  ggt = 0.5 * (ggt + ggt.transpose()).eval();

  adj.d_phi_big = -0.5 * beta * dd * ws.a_inv - 0.5 * beta * beta * beta * ggt +
                  0.5 * beta * dd * ws.kmm_inv;

  Matrix kinv_phi_kinv = ws.kmm_inv * stats.phi_big * ws.kmm_inv;
  kinv_phi_kinv = 0.5 * (kinv_phi_kinv + kinv_phi_kinv.transpose()).eval();
  adj.d_kmm = 0.5 * dd * ws.kmm_inv - 0.5 * dd * ws.a_inv - 0.5 * beta * beta * ggt -
              0.5 * beta * dd * kinv_phi_kinv;

  const double tr_ainv_phi = (ws.a_inv.array() * stats.phi_big.array()).sum();
  const double tr_psig = (stats.psi_y.array() * ws.g.array()).sum();
  const double tr_gphig = (ws.g.array() * (stats.phi_big * ws.g).array()).sum();
  const double tr_kinv_phi = (ws.kmm_inv.array() * stats.phi_big.array()).sum();
  adj.d_beta = 0.5 * dd * static_cast<double>(n) / beta - 0.5 * dd * tr_ainv_phi -
               0.5 * stats.yy + beta * tr_psig - 0.5 * beta * beta * tr_gphig -
               0.5 * dd * stats.phi + 0.5 * dd * tr_kinv_phi;
  (void)m;
  return adj;
}

}  // namespace detail

inline BoundAdjoints bound_adjoints(const SufficientStats& stats,
                                    const Eigen::Ref<const Matrix>& kmm, double beta, Index n,
                                    Index d) {
  detail::BoundCore core = detail::bound_core(stats, kmm, beta, n, d);
  return detail::adjoints_from_core(core, stats, beta, n, d);
}

}  // namespace sgp
