#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sgp/common.hpp"
#include "sgp/kernels.hpp"

namespace sgp {

/// Per-datapoint Gaussian posterior q(x_n) = N(mu_n, diag(s_n)).
struct VariationalPosterior {
  Matrix mu;  // N x Q
  Matrix s;   // N x Q, strictly positive

  Index n() const { return mu.rows(); }
  Index q() const { return mu.cols(); }

  void validate() const {
    require(mu.rows() == s.rows() && mu.cols() == s.cols(),
            "VariationalPosterior: mu and s shapes differ");
    require(mu.allFinite() && s.allFinite(), "VariationalPosterior: non-finite entries");
    require((s.array() > 0.0).all(), "VariationalPosterior: variances must be positive");
  }
};

/// The reduction payload: everything O(N) the bound needs, each field a sum
/// of per-datapoint contributions. Component-wise additive over disjoint
/// datapoint sets.
struct SufficientStats {
  double phi = 0.0;    // sum_n E[k(x_n, x_n)]
  Matrix psi_y;        // M x D, sum_n (K_nm)_n^T y_n^T (or its expectation)
  Matrix phi_big;      // M x M, sum_n (K_nm)_n^T (K_nm)_n (or its expectation)
  double yy = 0.0;     // sum_n <y_n, y_n>
  Index n_count = 0;

  static SufficientStats zero(Index m, Index d) {
    SufficientStats s;
    s.psi_y = Matrix::Zero(m, d);
    s.phi_big = Matrix::Zero(m, m);
    return s;
  }

  SufficientStats& operator+=(const SufficientStats& o) {
    phi += o.phi;
    psi_y += o.psi_y;
    phi_big += o.phi_big;
    yy += o.yy;
    n_count += o.n_count;
    return *this;
  }
};

/// Adjoints dL/d{phi, Psi, Phi} handed down from the bound.
struct StatsAdjoints {
  double d_phi = 0.0;
  Matrix d_psi_y;    // M x D
  Matrix d_phi_big;  // M x M, must be symmetric
};

/// Gradients produced by a statistics sweep. d_mu/d_s are per-datapoint
/// (rows match the sweep's row range); the rest are contractions over the
/// rows and stay global.
struct StatsGrads {
  Matrix d_mu;  // rows x Q (expected path only)
  Matrix d_s;   // rows x Q (expected path only)
  Matrix d_z;   // M x Q
  double d_variance = 0.0;
  Vector d_lengthscales;  // Q
};

namespace detail {

inline void check_adjoints(const StatsAdjoints& adj, Index m, Index d) {
  require(adj.d_psi_y.rows() == m && adj.d_psi_y.cols() == d,
          "stats adjoints: d_psi_y shape must be M x D");
  require(adj.d_phi_big.rows() == m && adj.d_phi_big.cols() == m,
          "stats adjoints: d_phi_big shape must be M x M");
  const double scale = adj.d_phi_big.cwiseAbs().maxCoeff();
  const double asym = (adj.d_phi_big - adj.d_phi_big.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-10 * (1.0 + scale), "stats adjoints: d_phi_big must be symmetric");
}

// Upper-triangle (m1 <= m2) pair enumeration in m1-major order.
inline Index pair_count(Index m) { return m * (m + 1) / 2; }

inline void pair_from_index(Index p, Index m, Index& m1, Index& m2) {
  // Walk rows; M is small (<= a few hundred), callers hoist this per block.
  Index row = 0, row_start = 0;
  while (row_start + (m - row) <= p) {
    row_start += m - row;
    ++row;
  }
  m1 = row;
  m2 = row + (p - row_start);
}

// Unified tiled sweep over datapoint rows. Computes the sufficient
// statistics and, when adjoints are given, the gradient contractions of
// Alg. 2's loop structure: outer blocks over inducing indices (psi part) or
// index pairs (phi part), inner chunks over datapoints; per-tile phi
// accumulators are merged in ascending tile order, psi rows are written
// disjointly per inducing index.
//
// `expected` selects the q(X)-expectation path (mu/s are the posterior
// parameters) versus the deterministic path (mu is X, s is ignored).
inline void sweep_stats(bool expected, const Eigen::Ref<const Matrix>& mu,
                        const Eigen::Ref<const Matrix>& s, const Eigen::Ref<const Matrix>& y,
                        const Eigen::Ref<const Matrix>& z, const KernelSpec& kernel,
                        const TileConfig& tiles, const StatsAdjoints* adj, SufficientStats& stats,
                        StatsGrads* grads) {
  kernel.validate();
  tiles.validate();
  const Index n = mu.rows(), q = mu.cols(), m = z.rows(), d = y.cols();
  require(z.cols() == q, "stats sweep: Z column count mismatch");
  require(kernel.input_dim() == q, "stats sweep: kernel dimension mismatch");
  require(y.rows() == n, "stats sweep: X/Y row counts differ");
  require(mu.allFinite() && y.allFinite() && z.allFinite(), "stats sweep: non-finite data");
  if (expected) require((s.array() > 0.0).all(), "stats sweep: variances must be positive");
  if (adj) check_adjoints(*adj, m, d);

  stats = SufficientStats::zero(m, d);
  stats.phi = static_cast<double>(n) * kernel.variance;
  stats.yy = y.squaredNorm();
  stats.n_count = n;

  if (grads) {
    grads->d_mu = expected ? Matrix::Zero(n, q) : Matrix();
    grads->d_s = expected ? Matrix::Zero(n, q) : Matrix();
    grads->d_z = Matrix::Zero(m, q);
    grads->d_variance = adj ? adj->d_phi * static_cast<double>(n) : 0.0;
    grads->d_lengthscales = Vector::Zero(q);
  }
  if (n == 0) return;

  const double var = kernel.variance;
  Vector l2(q), inv_l2(q);
  for (Index j = 0; j < q; ++j) {
    l2[j] = kernel.lengthscales[j] * kernel.lengthscales[j];
    inv_l2[j] = 1.0 / l2[j];
  }

  // Per-datapoint constants, computed once per sweep.
  //   psi1: c1_n = var * prod_q (1 + s/l^2)^{-1/2},  inv_den1 = 1/(s + l^2)
  //   psi2: c2_n = var^2 * prod_q (1 + 2s/l^2)^{-1/2}, inv_den2 = 1/(2s + l^2)
  // Deterministic path: s = 0 collapses both to plain kernel products.
  Array c1(n), c2(n);
  Matrix inv_den1(n, q), inv_den2(n, q);
  if (expected) {
    Array p1 = Array::Ones(n), p2 = Array::Ones(n);
    for (Index j = 0; j < q; ++j) {
      p1 *= 1.0 + s.col(j).array() / l2[j];
      p2 *= 1.0 + 2.0 * s.col(j).array() / l2[j];
      inv_den1.col(j) = (s.col(j).array() + l2[j]).inverse();
      inv_den2.col(j) = (2.0 * s.col(j).array() + l2[j]).inverse();
    }
    c1 = var * p1.rsqrt();
    c2 = var * var * p2.rsqrt();
  } else {
    c1 = Array::Constant(n, var);
    c2 = Array::Constant(n, var * var);
    for (Index j = 0; j < q; ++j) {
      inv_den1.col(j).setConstant(inv_l2[j]);
      inv_den2.col(j).setConstant(inv_l2[j]);
    }
  }

  const Index chunk_span = tiles.thread_span;
  Array e(chunk_span), v(chunk_span), w(chunk_span), uv(chunk_span), t(chunk_span);

  // ---- psi part: blocks over inducing indices m ----
  for (Index mb = 0; mb < m; mb += tiles.block_span) {
    const Index mb_end = std::min(m, mb + tiles.block_span);
    for (Index nc = 0; nc < n; nc += chunk_span) {
      const Index len = std::min(chunk_span, n - nc);
      for (Index mm = mb; mm < mb_end; ++mm) {
        auto eh = e.head(len);
        eh.setZero();
        for (Index j = 0; j < q; ++j) {
          eh += (mu.col(j).segment(nc, len).array() - z(mm, j)).square() *
                inv_den1.col(j).segment(nc, len).array();
        }
        auto vh = v.head(len);
        vh = c1.segment(nc, len) * (-0.5 * eh).exp();
        stats.psi_y.row(mm).noalias() +=
            vh.matrix().transpose() * y.middleRows(nc, len);

        if (adj) {
          // w_n = <dL/dPsi row m, y_n>; uv carries w * psi1 through the
          // per-dimension gradient pieces.
          auto wh = w.head(len);
          wh = (y.middleRows(nc, len) * adj->d_psi_y.row(mm).transpose()).array();
          auto uvh = uv.head(len);
          uvh = wh * vh;
          grads->d_variance += uvh.sum() / var;
          for (Index j = 0; j < q; ++j) {
            auto diff = (mu.col(j).segment(nc, len).array() - z(mm, j));
            auto den = inv_den1.col(j).segment(nc, len).array();
            auto r = t.head(len);
            r = diff * den;
            if (expected) {
              grads->d_mu.col(j).segment(nc, len).array() -= uvh * r;
              grads->d_s.col(j).segment(nc, len).array() +=
                  uvh * 0.5 * den * (r * diff - 1.0);
              grads->d_lengthscales[j] +=
                  (uvh * kernel.lengthscales[j] * den *
                   (s.col(j).segment(nc, len).array() * inv_l2[j] + diff * r))
                      .sum();
            } else {
              grads->d_lengthscales[j] +=
                  (uvh * diff * diff).sum() * inv_l2[j] / kernel.lengthscales[j];
            }
            grads->d_z(mm, j) += (uvh * r).sum();
          }
        }
      }
    }
  }

  // ---- phi part: blocks over inducing index pairs (m1 <= m2) ----
  const Index pairs = pair_count(m);
  const Index pb_span = tiles.block_span;
  std::vector<Index> pm1(pb_span), pm2(pb_span);
  Vector pconst(pb_span);            // exp(-sum_q (z1-z2)^2/(4 l^2)), expected path
  Matrix pzbar(pb_span, q);          // (z1 + z2)/2
  Array d1(chunk_span), d2(chunk_span);

  for (Index pb = 0; pb < pairs; pb += pb_span) {
    const Index pb_end = std::min(pairs, pb + pb_span);
    const Index np = pb_end - pb;

    Index m1 = 0, m2 = 0;
    pair_from_index(pb, m, m1, m2);
    for (Index i = 0; i < np; ++i) {
      pm1[i] = m1;
      pm2[i] = m2;
      double a = 0.0;
      for (Index j = 0; j < q; ++j) {
        pzbar(i, j) = 0.5 * (z(m1, j) + z(m2, j));
        if (expected) {
          const double dz = z(m1, j) - z(m2, j);
          a += dz * dz * inv_l2[j] * 0.25;
        }
      }
      pconst[i] = expected ? std::exp(-a) : 1.0;
      if (++m2 == m) m2 = ++m1;
    }

    for (Index nc = 0; nc < n; nc += chunk_span) {
      const Index len = std::min(chunk_span, n - nc);
      for (Index i = 0; i < np; ++i) {
        const Index a = pm1[i], b = pm2[i];
        auto eh = e.head(len);
        eh.setZero();
        if (expected) {
          for (Index j = 0; j < q; ++j) {
            eh += (mu.col(j).segment(nc, len).array() - pzbar(i, j)).square() *
                  inv_den2.col(j).segment(nc, len).array();
          }
        } else {
          // k(x,z1) k(x,z2) = var^2 exp(-(e1 + e2)/2) via both distances.
          for (Index j = 0; j < q; ++j) {
            auto xs = mu.col(j).segment(nc, len).array();
            eh += 0.5 * inv_l2[j] *
                  ((xs - z(a, j)).square() + (xs - z(b, j)).square());
          }
        }
        auto vh = v.head(len);
        if (expected)
          vh = c2.segment(nc, len) * pconst[i] * (-eh).exp();
        else
          vh = c2.segment(nc, len) * (-eh).exp();

        // Per-tile accumulator, merged in ascending tile order.
        const double tile_sum = vh.sum();
        stats.phi_big(a, b) += tile_sum;

        if (adj) {
          const double weight = (a == b) ? 1.0 : 2.0;  // symmetric adjoint
          const double u = adj->d_phi_big(a, b) * weight;
          if (u != 0.0) {
            auto uvh = uv.head(len);
            uvh = u * vh;
            grads->d_variance += 2.0 * uvh.sum() / var;
            for (Index j = 0; j < q; ++j) {
              if (expected) {
                auto diffb = (mu.col(j).segment(nc, len).array() - pzbar(i, j));
                auto den = inv_den2.col(j).segment(nc, len).array();
                auto rb = t.head(len);
                rb = diffb * den;
                grads->d_mu.col(j).segment(nc, len).array() -= 2.0 * uvh * rb;
                grads->d_s.col(j).segment(nc, len).array() +=
                    uvh * den * (2.0 * rb * diffb - 1.0);
                const double dz12 = (z(a, j) - z(b, j)) * 0.5 * inv_l2[j];
                grads->d_z(a, j) += (uvh * (rb - dz12)).sum();
                grads->d_z(b, j) += (uvh * (rb + dz12)).sum();
                const double cz = (z(a, j) - z(b, j)) * (z(a, j) - z(b, j)) * 0.5 *
                                  inv_l2[j] * inv_l2[j];
                grads->d_lengthscales[j] +=
                    kernel.lengthscales[j] *
                    (uvh * (2.0 * s.col(j).segment(nc, len).array() * den * inv_l2[j] +
                            cz + 2.0 * rb * rb))
                        .sum();
              } else {
                auto xs = mu.col(j).segment(nc, len).array();
                auto da = d1.head(len);
                auto db = d2.head(len);
                da = xs - z(a, j);
                db = xs - z(b, j);
                grads->d_z(a, j) += (uvh * da).sum() * inv_l2[j];
                grads->d_z(b, j) += (uvh * db).sum() * inv_l2[j];
                grads->d_lengthscales[j] += (uvh * (da.square() + db.square())).sum() *
                                            inv_l2[j] / kernel.lengthscales[j];
              }
            }
          }
        }
      }
    }
  }

  // Mirror the upper triangle.
  for (Index a = 0; a < m; ++a)
    for (Index b = a + 1; b < m; ++b) stats.phi_big(b, a) = stats.phi_big(a, b);
}

}  // namespace detail

/// phi, Psi, Phi, yy for fixed inputs X (sparse GP regression path),
/// accumulated as per-datapoint partial sums under the canonical tile order.
inline SufficientStats stats_deterministic(const Eigen::Ref<const Matrix>& x,
                                           const Eigen::Ref<const Matrix>& y,
                                           const Eigen::Ref<const Matrix>& z,
                                           const KernelSpec& kernel,
                                           const TileConfig& tiles = {}) {
  SufficientStats stats;
  detail::sweep_stats(false, x, Matrix(), y, z, kernel, tiles, nullptr, stats, nullptr);
  return stats;
}

/// Expectation of phi under q(X): N * variance for the stationary kernel.
inline double psi0_expected(const VariationalPosterior& q, const KernelSpec& kernel) {
  q.validate();
  kernel.validate();
  return static_cast<double>(q.n()) * kernel.variance;
}

/// E[k(x_n, z_m)] under q, as the N x M matrix:
///   var * prod_q (1 + s/l^2)^{-1/2} exp(-(mu - z)^2 / (2 (s + l^2)))
inline Matrix psi1_expected(const VariationalPosterior& q, const Eigen::Ref<const Matrix>& z,
                            const KernelSpec& kernel) {
  q.validate();
  kernel.validate();
  require(z.cols() == q.q(), "psi1_expected: Z column count mismatch");
  require(kernel.input_dim() == q.q(), "psi1_expected: kernel dimension mismatch");

  const Index n = q.n(), m = z.rows(), qd = q.q();
  Array c1 = Array::Ones(n);
  Matrix inv_den1(n, qd);
  for (Index j = 0; j < qd; ++j) {
    const double l2 = kernel.lengthscales[j] * kernel.lengthscales[j];
    c1 *= 1.0 + q.s.col(j).array() / l2;
    inv_den1.col(j) = (q.s.col(j).array() + l2).inverse();
  }
  c1 = kernel.variance * c1.rsqrt();

  Matrix out(n, m);
  for (Index mm = 0; mm < m; ++mm) {
    Array e = Array::Zero(n);
    for (Index j = 0; j < qd; ++j)
      e += (q.mu.col(j).array() - z(mm, j)).square() * inv_den1.col(j).array();
    out.col(mm) = (c1 * (-0.5 * e).exp()).matrix();
  }
  return out;
}

/// sum_n E[(K_nm)_n^T (K_nm)_n] under q, as the symmetric M x M matrix.
inline Matrix psi2_expected(const VariationalPosterior& q, const Eigen::Ref<const Matrix>& z,
                            const KernelSpec& kernel, const TileConfig& tiles = {}) {
  q.validate();
  SufficientStats stats;
  Matrix y(q.n(), 0);
  detail::sweep_stats(true, q.mu, q.s, y, z, kernel, tiles, nullptr, stats, nullptr);
  return stats.phi_big;
}

/// Expected sufficient statistics for the Bayesian GP-LVM path.
inline SufficientStats stats_expected(const VariationalPosterior& q,
                                      const Eigen::Ref<const Matrix>& y,
                                      const Eigen::Ref<const Matrix>& z, const KernelSpec& kernel,
                                      const TileConfig& tiles = {}) {
  q.validate();
  SufficientStats stats;
  detail::sweep_stats(true, q.mu, q.s, y, z, kernel, tiles, nullptr, stats, nullptr);
  return stats;
}

/// Backward pass for the expected statistics: chains the bound adjoints
/// through psi1/psi2 to per-datapoint (mu, s) and global (Z, theta)
/// gradients, accumulated per Alg. 2's loop structure.
inline StatsGrads stats_grads(const VariationalPosterior& q, const Eigen::Ref<const Matrix>& y,
                              const Eigen::Ref<const Matrix>& z, const KernelSpec& kernel,
                              const StatsAdjoints& adj, const TileConfig& tiles = {},
                              SufficientStats* stats_out = nullptr) {
  q.validate();
  SufficientStats stats;
  StatsGrads grads;
  detail::sweep_stats(true, q.mu, q.s, y, z, kernel, tiles, &adj, stats, &grads);
  if (stats_out) *stats_out = stats;
  return grads;
}

/// Backward pass for the deterministic statistics (no mu/s gradients).
inline StatsGrads stats_grads_deterministic(const Eigen::Ref<const Matrix>& x,
                                            const Eigen::Ref<const Matrix>& y,
                                            const Eigen::Ref<const Matrix>& z,
                                            const KernelSpec& kernel, const StatsAdjoints& adj,
                                            const TileConfig& tiles = {},
                                            SufficientStats* stats_out = nullptr) {
  SufficientStats stats;
  StatsGrads grads;
  detail::sweep_stats(false, x, Matrix(), y, z, kernel, tiles, &adj, stats, &grads);
  if (stats_out) *stats_out = stats;
  return grads;
}

}  // namespace sgp
