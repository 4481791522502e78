#include <catch2/catch_amalgamated.hpp>

#include "sgp/kernels.hpp"
#include "support/oracles.hpp"

using namespace sgp;

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = lo + (hi - lo) * rng.next_uniform();
  return m;
}

}  // namespace

TEST_CASE("kern_diag is constant at the kernel variance") {
  KernelSpec k = KernelSpec::iso(1.5, 1.0, 2);
  Matrix x = Matrix::Random(3, 2);
  Vector d = kern_diag(x, k);
  REQUIRE(d.size() == 3);
  for (Index i = 0; i < 3; ++i) REQUIRE(d[i] == 1.5);

  KernelSpec k1 = KernelSpec::iso(1.0, 1.0, 2);
  REQUIRE(kern_diag(Matrix::Zero(1, 2), k1)[0] == 1.0);
}

TEST_CASE("kern_diag sums to N * variance at scale") {
  KernelSpec k = KernelSpec::iso(0.25, 1.0, 1);
  Matrix x = Matrix::Zero(64000, 1);
  REQUIRE(kern_diag(x, k).sum() == Catch::Approx(16000.0).epsilon(1e-14));
}

TEST_CASE("kern_cross hand values") {
  KernelSpec k = KernelSpec::iso(1.0, 1.0, 1);

  SECTION("zero distance gives the variance") {
    Matrix x(1, 1), z(1, 1);
    x << 0.7;
    z << 0.7;
    KernelSpec kv = KernelSpec::iso(2.3, 0.8, 1);
    REQUIRE(kern_cross(x, z, kv)(0, 0) == 2.3);
  }

  SECTION("unit separation gives exp(-1/2)") {
    Matrix x(1, 1), z(1, 1);
    x << 0.0;
    z << 1.0;
    REQUIRE(kern_cross(x, z, k)(0, 0) == Catch::Approx(0.6065306597126334).epsilon(1e-14));
  }

  SECTION("huge lengthscale saturates at the variance") {
    KernelSpec kl = KernelSpec::iso(1.7, 1e9, 1);
    Matrix x(1, 1), z(1, 1);
    x << -3.0;
    z << 4.0;
    REQUIRE(std::abs(kern_cross(x, z, kl)(0, 0) - 1.7) < 1e-12);
  }
}

TEST_CASE("kern_cross transpose symmetry and diagonal identity are exact") {
  Rng rng(11);
  Matrix x = random_matrix(rng, 5, 2, -2.0, 2.0);
  Matrix z = random_matrix(rng, 3, 2, -2.0, 2.0);
  KernelSpec k;
  k.variance = 1.3;
  k.lengthscales = Vector(2);
  k.lengthscales << 0.7, 1.9;

  Matrix kxz = kern_cross(x, z, k);
  Matrix kzx = kern_cross(z, x, k);
  REQUIRE((kxz.transpose() - kzx).cwiseAbs().maxCoeff() == 0.0);

  Matrix kxx = kern_cross(x, x, k);
  Vector d = kern_diag(x, k);
  REQUIRE((kxx.diagonal() - d).cwiseAbs().maxCoeff() == 0.0);

  // Entries live in (0, variance].
  REQUIRE((kxz.array() > 0.0).all());
  REQUIRE((kxz.array() <= k.variance).all());
}

TEST_CASE("kern_cross decays monotonically with distance in 1D") {
  KernelSpec k = KernelSpec::iso(1.0, 0.9, 1);
  Matrix z(1, 1);
  z << 0.3;
  Matrix x(50, 1);
  for (Index i = 0; i < 50; ++i) x(i, 0) = 0.3 + 0.1 * static_cast<double>(i);
  Matrix kx = kern_cross(x, z, k);
  for (Index i = 1; i < 50; ++i) REQUIRE(kx(i, 0) <= kx(i - 1, 0));
}

TEST_CASE("kern_cross rejects bad input") {
  KernelSpec k = KernelSpec::iso(1.0, 1.0, 2);
  Matrix x = Matrix::Zero(2, 3);
  Matrix z = Matrix::Zero(2, 2);
  REQUIRE_THROWS_AS(kern_cross(x, z, k), std::invalid_argument);

  Matrix xb = Matrix::Zero(2, 2);
  xb(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(kern_cross(xb, z, k), std::invalid_argument);

  KernelSpec bad = KernelSpec::iso(-1.0, 1.0, 2);
  REQUIRE_THROWS_AS(kern_cross(z, z, bad), std::invalid_argument);
}

TEST_CASE("kern_gram basics") {
  SECTION("single inducing point") {
    KernelSpec k = KernelSpec::iso(2.0, 1.0, 1);
    Matrix z(1, 1);
    z << 0.4;
    Matrix g = kern_gram(z, k, 0.125);
    REQUIRE(g.rows() == 1);
    REQUIRE(g(0, 0) == 2.125);
  }

  SECTION("hand-computed 2x2") {
    KernelSpec k = KernelSpec::iso(1.0, 1.0, 1);
    Matrix z(2, 1);
    z << 0.0, 1.0;
    Matrix g = kern_gram(z, k, 0.0);
    REQUIRE(g(0, 0) == 1.0);
    REQUIRE(g(1, 1) == 1.0);
    REQUIRE(g(0, 1) == Catch::Approx(0.6065306597126334).epsilon(1e-14));
    REQUIRE(g(0, 1) == g(1, 0));
  }

  SECTION("duplicate rows are rank-deficient but not rejected") {
    KernelSpec k = KernelSpec::iso(1.0, 1.0, 1);
    Matrix z(2, 1);
    z << 0.5, 0.5;
    Matrix g = kern_gram(z, k, 0.0);
    REQUIRE(g(0, 1) == 1.0);
    REQUIRE((g - g.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(g);
    REQUIRE(es.eigenvalues().minCoeff() < 1e-14);
  }
}

TEST_CASE("factor_gram escalates jitter on degenerate inputs") {
  KernelSpec k = KernelSpec::iso(1.0, 1.0, 1);
  Matrix z(2, 1);
  z << 0.5, 0.5;  // exactly duplicated rows
  GramFactor f = factor_gram(z, k, 0.0);
  REQUIRE(f.jitter > 0.0);
  REQUIRE(f.chol.info() == Eigen::Success);

  Matrix z_ok(2, 1);
  z_ok << 0.0, 1.0;
  GramFactor f2 = factor_gram(z_ok, k, 1e-6);
  REQUIRE(f2.jitter == 1e-6);
  REQUIRE(std::abs(f2.log_det - std::log(f2.kmm.determinant())) < 1e-10);
}

TEST_CASE("kern_grads zero upstream gives zero gradients") {
  Rng rng(5);
  Matrix x = random_matrix(rng, 4, 2, -2.0, 2.0);
  Matrix z = random_matrix(rng, 3, 2, -2.0, 2.0);
  KernelSpec k = KernelSpec::iso(1.1, 0.9, 2);
  KernGrads g = kern_grads(x, z, k, Matrix::Zero(4, 3));
  REQUIRE(g.d_variance == 0.0);
  REQUIRE(g.d_lengthscales.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(g.d_z.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(g.d_x.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("kern_grads dZ mirrors dX for a coincident pair") {
  Matrix x(1, 2), z(1, 2);
  x << 0.3, -0.7;
  z << 0.3, -0.7;
  KernelSpec k = KernelSpec::iso(1.4, 0.8, 2);
  Matrix upstream(1, 1);
  upstream << 0.9;
  KernGrads g = kern_grads(x, z, k, upstream);
  REQUIRE((g.d_z + g.d_x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("kern_grads matches central finite differences") {
  Rng rng(42);
  const Index n = 3, m = 2, q = 2;
  Matrix x = random_matrix(rng, n, q, -2.0, 2.0);
  Matrix z = random_matrix(rng, m, q, -2.0, 2.0);
  Matrix upstream = random_matrix(rng, n, m, -1.0, 1.0);
  KernelSpec k;
  k.variance = 0.5 + 1.5 * rng.next_uniform();
  k.lengthscales = Vector(q);
  for (Index j = 0; j < q; ++j) k.lengthscales[j] = 0.5 + 1.5 * rng.next_uniform();

  auto loss = [&](const Matrix& xx, const Matrix& zz, const KernelSpec& kk) {
    return (upstream.array() * kern_cross(xx, zz, kk).array()).sum();
  };

  KernGrads g = kern_grads(x, z, k, upstream);
  const double step = 1e-5;

  {
    const double fd = oracle::central_diff(
        [&](double v) {
          KernelSpec kk = k;
          kk.variance = v;
          return loss(x, z, kk);
        },
        k.variance, step);
    REQUIRE(oracle::rel_err(g.d_variance, fd) < 1e-6);
  }
  for (Index j = 0; j < q; ++j) {
    const double fd = oracle::central_diff(
        [&](double v) {
          KernelSpec kk = k;
          kk.lengthscales[j] = v;
          return loss(x, z, kk);
        },
        k.lengthscales[j], step);
    REQUIRE(oracle::rel_err(g.d_lengthscales[j], fd) < 1e-6);
  }
  for (Index mm = 0; mm < m; ++mm)
    for (Index j = 0; j < q; ++j) {
      const double fd = oracle::central_diff(
          [&](double v) {
            Matrix zz = z;
            zz(mm, j) = v;
            return loss(x, zz, k);
          },
          z(mm, j), step);
      REQUIRE(oracle::rel_err(g.d_z(mm, j), fd) < 1e-6);
    }
  for (Index nn = 0; nn < n; ++nn)
    for (Index j = 0; j < q; ++j) {
      const double fd = oracle::central_diff(
          [&](double v) {
            Matrix xx = x;
            xx(nn, j) = v;
            return loss(xx, z, k);
          },
          x(nn, j), step);
      REQUIRE(oracle::rel_err(g.d_x(nn, j), fd) < 1e-6);
    }
}
