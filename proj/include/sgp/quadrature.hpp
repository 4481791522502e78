#pragma once

#include <array>
#include <cmath>

#include "sgp/common.hpp"
#include "sgp/kernels.hpp"

namespace sgp {

/// Gauss-Hermite rule for integrals against exp(-t^2). Nodes/weights via
/// Golub-Welsch on the Jacobi matrix of the (physicists') Hermite recurrence.
struct GaussHermite {
  Vector nodes;
  Vector weights;

  static GaussHermite compute(int n) {
    require(n >= 1, "GaussHermite: need at least one node");
    Matrix jacobi = Matrix::Zero(n, n);
    for (int i = 1; i < n; ++i) {
      const double b = std::sqrt(i / 2.0);
      jacobi(i, i - 1) = b;
      jacobi(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
    GaussHermite gh;
    gh.nodes = es.eigenvalues();
    gh.weights = Vector(n);
    const double sqrt_pi = std::sqrt(3.14159265358979323846264338327950288);
    for (int i = 0; i < n; ++i) {
      const double v0 = es.eigenvectors()(0, i);
      gh.weights[i] = sqrt_pi * v0 * v0;
    }
    return gh;
  }
};

enum class PsiKind { psi0, psi1, psi2 };

/// Tensor-product Gauss-Hermite expectation of the kernel statistics for a
/// single datapoint with posterior N(mu, diag(s)):
///   psi0 -> 1x1  E[k(x,x)]
///   psi1 -> 1xM  E[k(x,z_m)]
///   psi2 -> MxM  E[k(x,z_m) k(x,z_m')]
/// Evaluates the plain kernel at the quadrature nodes; shares no code with
/// the closed-form expected statistics it is used to check.
inline Matrix quadrature_psi(const Vector& mu, const Vector& s, const Eigen::Ref<const Matrix>& z,
                             const KernelSpec& kernel, PsiKind kind, int nodes_per_dim = 50) {
  kernel.validate();
  const Index q = mu.size();
  require(s.size() == q, "quadrature_psi: mu and s sizes differ");
  require(z.cols() == q, "quadrature_psi: Z column count mismatch");
  require(q >= 1 && q <= 3, "quadrature_psi: tensor-product rule limited to Q <= 3");
  for (Index j = 0; j < q; ++j) require(s[j] >= 0.0, "quadrature_psi: negative variance");

  const GaussHermite gh = GaussHermite::compute(nodes_per_dim);
  const double inv_sqrt_pi = 1.0 / std::sqrt(3.14159265358979323846264338327950288);
  const Index m = z.rows();

  Matrix acc;
  switch (kind) {
    case PsiKind::psi0: acc = Matrix::Zero(1, 1); break;
    case PsiKind::psi1: acc = Matrix::Zero(1, m); break;
    case PsiKind::psi2: acc = Matrix::Zero(m, m); break;
  }

  Vector point(q);
  std::array<Index, 3> idx{0, 0, 0};
  const Index total = [&] {
    Index t = 1;
    for (Index j = 0; j < q; ++j) t *= nodes_per_dim;
    return t;
  }();

  Vector kz(m);
  for (Index flat = 0; flat < total; ++flat) {
    Index rem = flat;
    double w = 1.0;
    for (Index j = 0; j < q; ++j) {
      idx[j] = rem % nodes_per_dim;
      rem /= nodes_per_dim;
      point[j] = mu[j] + std::sqrt(2.0 * s[j]) * gh.nodes[idx[j]];
      w *= gh.weights[idx[j]] * inv_sqrt_pi;
    }

    switch (kind) {
      case PsiKind::psi0:
        acc(0, 0) += w * kernel.variance;  // k(x, x) for the stationary kernel
        break;
      case PsiKind::psi1: {
        for (Index mm = 0; mm < m; ++mm) {
          double d2 = 0.0;
          for (Index j = 0; j < q; ++j) {
            const double d = point[j] - z(mm, j);
            d2 += d * d / (kernel.lengthscales[j] * kernel.lengthscales[j]);
          }
          acc(0, mm) += w * kernel.variance * std::exp(-0.5 * d2);
        }
        break;
      }
      case PsiKind::psi2: {
        for (Index mm = 0; mm < m; ++mm) {
          double d2 = 0.0;
          for (Index j = 0; j < q; ++j) {
            const double d = point[j] - z(mm, j);
            d2 += d * d / (kernel.lengthscales[j] * kernel.lengthscales[j]);
          }
          kz[mm] = kernel.variance * std::exp(-0.5 * d2);
        }
        acc += w * kz * kz.transpose();
        break;
      }
    }
  }
  return acc;
}

}  // namespace sgp
