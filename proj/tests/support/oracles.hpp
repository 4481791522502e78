#pragma once

// Test-only oracles, independent of the library's computation paths:
//  - dense GP log marginal likelihood and posterior (the exactness and
//    lower-bound reference),
//  - central finite differences,
//  - brute-force per-datapoint statistics.

#include <cmath>
#include <functional>

#include "sgp/common.hpp"
#include "sgp/kernels.hpp"

namespace oracle {

using sgp::Index;
using sgp::Matrix;
using sgp::Vector;

// log N(vec(Y); 0, (Knn + beta^{-1} I) per column), summed over columns.
inline double dense_gp_log_marginal(const Matrix& x, const Matrix& y, const sgp::KernelSpec& k,
                                    double beta) {
  const Index n = x.rows();
  Matrix knn = sgp::kern_cross(x, x, k);
  knn.diagonal().array() += 1.0 / beta;
  Eigen::LLT<Matrix> llt(knn);
  if (llt.info() != Eigen::Success) throw std::runtime_error("dense oracle: LLT failed");
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double log_2pi = 1.8378770664093454835606594728112;
  double total = 0.0;
  for (Index d = 0; d < y.cols(); ++d) {
    Vector alpha = llt.solve(y.col(d));
    total += -0.5 * static_cast<double>(n) * log_2pi - 0.5 * log_det - 0.5 * y.col(d).dot(alpha);
  }
  return total;
}

// Dense GP posterior mean at X_star (noise-free latent mean).
inline Matrix dense_gp_posterior_mean(const Matrix& x, const Matrix& y, const Matrix& x_star,
                                      const sgp::KernelSpec& k, double beta) {
  Matrix knn = sgp::kern_cross(x, x, k);
  knn.diagonal().array() += 1.0 / beta;
  Eigen::LLT<Matrix> llt(knn);
  Matrix ks = sgp::kern_cross(x_star, x, k);
  return ks * llt.solve(y);
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x0,
                           double step = 1e-5) {
  return (f(x0 + step) - f(x0 - step)) / (2.0 * step);
}

inline double rel_err(double got, double want) {
  const double scale = std::max({std::abs(got), std::abs(want), 1.0});
  return std::abs(got - want) / scale;
}

// Brute-force sufficient statistics: one datapoint at a time, no tiling.
struct BruteStats {
  double phi = 0.0;
  Matrix psi_y;
  Matrix phi_big;
  double yy = 0.0;
};

inline BruteStats brute_stats(const Matrix& x, const Matrix& y, const Matrix& z,
                              const sgp::KernelSpec& k) {
  const Index m = z.rows(), d = y.cols();
  BruteStats out;
  out.psi_y = Matrix::Zero(m, d);
  out.phi_big = Matrix::Zero(m, m);
  for (Index n = 0; n < x.rows(); ++n) {
    Matrix kn = sgp::kern_cross(x.row(n), z, k);  // 1 x M
    out.phi += k.variance;
    out.psi_y += kn.transpose() * y.row(n);
    out.phi_big += kn.transpose() * kn;
    out.yy += y.row(n).squaredNorm();
  }
  return out;
}

}  // namespace oracle
