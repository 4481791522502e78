#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "sgp/common.hpp"
#include "sgp/io.hpp"
#include "sgp/kernels.hpp"

namespace sgp {

/// Synthetic benchmark data: 1D latents sampled from a standard normal,
/// mapped into `out_dim` dimensions by independent GP function draws under
/// an RBF kernel, plus Gaussian observation noise.
struct GenerateOptions {
  Index n = 0;
  std::uint64_t seed = 0;
  Index latent_dim = 1;
  Index out_dim = 3;
  double kernel_variance = 1.0;
  double kernel_lengthscale = 1.0;
  double noise_variance = 0.01;
  Index dense_threshold = 2000;  // exact GP draw up to this size
  Index inducing_sites = 256;    // conditional-draw sites beyond it
};

struct SyntheticData {
  Matrix latent;    // n x latent_dim
  Matrix observed;  // n x out_dim
  std::string method;
};

inline SyntheticData generate_synthetic(const GenerateOptions& opts) {
  require(opts.n >= 2, "generate: need n >= 2");
  require(opts.latent_dim == 1, "generate: only 1D latents are produced");
  require(opts.noise_variance >= 0.0, "generate: negative noise variance");

  Rng rng(opts.seed);
  SyntheticData out;
  out.latent = rng.normal_matrix(opts.n, 1);

  const KernelSpec kernel = KernelSpec::iso(opts.kernel_variance, opts.kernel_lengthscale, 1);
  const double noise_sd = std::sqrt(opts.noise_variance);

  if (opts.n <= opts.dense_threshold) {
    out.method = "dense-exact";
    Matrix knn = kern_cross(out.latent, out.latent, kernel);
    knn.diagonal().array() += 1e-10 * opts.kernel_variance;
    Eigen::LLT<Matrix> llt(knn);
    if (llt.info() != Eigen::Success) throw NumericError("generate: dense draw LLT failed");
    out.observed = Matrix(opts.n, opts.out_dim);
    for (Index d = 0; d < opts.out_dim; ++d) {
      Vector xi = rng.normal_matrix(opts.n, 1);
      out.observed.col(d) = llt.matrixL() * xi;
    }
  } else {
    // Conditional draw through a grid of inducing sites: u ~ N(0, Kss),
    // f = Kns Kss^{-1} u + sqrt(diag(Knn - Kns Kss^{-1} Ksn)) * xi.
    // Marginal variance per point is preserved; long-range structure is
    // carried by the sites.
    const Index sites = std::min(opts.inducing_sites, opts.n);
    out.method = "inducing-" + std::to_string(sites);
    const double lo = out.latent.minCoeff(), hi = out.latent.maxCoeff();
    Matrix s(sites, 1);
    for (Index i = 0; i < sites; ++i)
      s(i, 0) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(sites - 1);

    Matrix kss = kern_cross(s, s, kernel);
    kss.diagonal().array() += 1e-10 * opts.kernel_variance;
    Eigen::LLT<Matrix> llt(kss);
    if (llt.info() != Eigen::Success) throw NumericError("generate: site draw LLT failed");

    out.observed = Matrix(opts.n, opts.out_dim);
    const Index chunk = 8192;
    for (Index d = 0; d < opts.out_dim; ++d) {
      Vector u = llt.matrixL() * static_cast<Vector>(rng.normal_matrix(sites, 1));
      Vector alpha = llt.solve(u);
      for (Index at = 0; at < opts.n; at += chunk) {
        const Index len = std::min(chunk, opts.n - at);
        Matrix kns = kern_cross(out.latent.middleRows(at, len), s, kernel);
        Vector mean = kns * alpha;
        Matrix v = llt.matrixL().solve(kns.transpose());
        Vector resid =
            (Vector::Constant(len, opts.kernel_variance) - v.colwise().squaredNorm().transpose())
                .cwiseMax(0.0);
        for (Index i = 0; i < len; ++i)
          out.observed(at + i, d) = mean[i] + std::sqrt(resid[i]) * rng.next_normal();
      }
    }
  }

  for (Index i = 0; i < opts.n; ++i)
    for (Index d = 0; d < opts.out_dim; ++d) out.observed(i, d) += noise_sd * rng.next_normal();
  return out;
}

/// Writes latent + observed files and the manifest into `dir`, in the given
/// format ("csv" or "bin"). Returns the manifest.
inline DataManifest write_synthetic(const std::filesystem::path& dir, const GenerateOptions& opts,
                                    const SyntheticData& data, const std::string& format) {
  require(format == "csv" || format == "bin", "write_synthetic: format must be csv or bin");
  std::filesystem::create_directories(dir);

  DataManifest m;
  m.n = opts.n;
  m.latent_dim = opts.latent_dim;
  m.out_dim = opts.out_dim;
  m.seed = opts.seed;
  m.kernel_variance = opts.kernel_variance;
  m.kernel_lengthscale = opts.kernel_lengthscale;
  m.noise_variance = opts.noise_variance;
  m.method = data.method;
  m.format = format;

  if (format == "csv") {
    m.latent_file = "latent.csv";
    m.observed_file = "observed.csv";
    std::vector<std::string> xcols, ycols;
    for (Index j = 0; j < data.latent.cols(); ++j) xcols.push_back("x" + std::to_string(j));
    for (Index j = 0; j < data.observed.cols(); ++j) ycols.push_back("y" + std::to_string(j));
    write_matrix_csv(dir / m.latent_file, data.latent, xcols);
    write_matrix_csv(dir / m.observed_file, data.observed, ycols);
  } else {
    m.latent_file = "latent";
    m.observed_file = "observed";
    write_matrix_bin(dir / m.latent_file, data.latent);
    write_matrix_bin(dir / m.observed_file, data.observed);
  }
  write_manifest(dir / "manifest.json", m);
  return m;
}

struct LoadedData {
  DataManifest manifest;
  Matrix latent;
  Matrix observed;
};

inline LoadedData load_synthetic(const std::filesystem::path& dir) {
  LoadedData out;
  out.manifest = read_manifest(dir / "manifest.json");
  if (out.manifest.format == "csv") {
    out.latent = read_matrix_csv(dir / out.manifest.latent_file).values;
    out.observed = read_matrix_csv(dir / out.manifest.observed_file).values;
  } else {
    out.latent = read_matrix_bin(dir / out.manifest.latent_file);
    out.observed = read_matrix_bin(dir / out.manifest.observed_file);
  }
  return out;
}

}  // namespace sgp
