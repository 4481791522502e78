#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sgp/common.hpp"
#include "sgp/io.hpp"
#include "sgp/model.hpp"
#include "sgp/synthetic.hpp"

namespace sgp {

// ---------------------------------------------------------------------------
// Fit trace CSV
// ---------------------------------------------------------------------------

inline void write_trace_csv(const std::filesystem::path& path, const FitTrace& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "iter,bound,grad_norm,time_s,indistributable_fraction\n";
  for (const auto& it : trace.iterations) {
    out << it.iter << ',' << format_double(it.bound) << ',' << format_double(it.grad_norm) << ','
        << format_double(it.time_s) << ',' << format_double(it.indistributable_fraction) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

struct BenchRecord {
  Index n = 0;
  Index m = 0;
  Index q = 0;
  Index d = 0;
  int workers = 1;
  double iter_time_mean_s = 0.0;
  double iter_time_sd_s = 0.0;
  double indistributable_fraction = 0.0;
  std::uint64_t seed = 0;
};

inline const char* bench_csv_header() {
  return "n,m,q,d,workers,iter_time_mean_s,iter_time_sd_s,indistributable_fraction,seed";
}

inline void write_bench_csv(const std::filesystem::path& path,
                            const std::vector<BenchRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << bench_csv_header() << '\n';
  for (const auto& r : records) {
    out << r.n << ',' << r.m << ',' << r.q << ',' << r.d << ',' << r.workers << ','
        << format_double(r.iter_time_mean_s) << ',' << format_double(r.iter_time_sd_s) << ','
        << format_double(r.indistributable_fraction) << ',' << r.seed << '\n';
  }
}

struct BenchPointResult {
  BenchRecord record;
  FitTrace trace;
};

/// One benchmark point: generate data, initialize the latent model, run a
/// real fit for (warmup + iters) objective evaluations, and time each
/// evaluation cycle (broadcast -> statistics pass -> coordinator ->
/// gradient pass). The first `warmup` evaluations are discarded.
inline BenchPointResult run_bench_point(Index n, Index m, Index q, Index d, int workers,
                                        int iters, std::uint64_t seed, TileConfig tiles = {},
                                        int warmup = 2) {
  require(iters >= 1, "bench: need at least one timed iteration");

  GenerateOptions gen;
  gen.n = n;
  gen.seed = seed;
  gen.out_dim = d;
  SyntheticData data = generate_synthetic(gen);

  BayesianGPLVM model = init_gplvm(data.observed, q, m, seed);
  FitOptions opts;
  opts.workers = workers;
  opts.tiles = tiles;
  opts.max_iters = 10 * (warmup + iters);  // evaluation budget is the stop condition
  opts.max_evals = warmup + iters;
  opts.g_tol = 0.0;
  opts.f_tol = 0.0;
  FitTrace trace = model.fit(opts);

  require(static_cast<int>(trace.evaluations.size()) >= warmup + 1,
          "bench: not enough evaluations recorded");

  double mean = 0.0, mean_ind = 0.0;
  int count = 0;
  for (std::size_t i = warmup; i < trace.evaluations.size(); ++i) {
    mean += trace.evaluations[i].time_s;
    mean_ind += trace.evaluations[i].indistributable_fraction;
    ++count;
  }
  mean /= count;
  mean_ind /= count;
  double sq = 0.0;
  for (std::size_t i = warmup; i < trace.evaluations.size(); ++i) {
    const double dt = trace.evaluations[i].time_s - mean;
    sq += dt * dt;
  }
  const double sd = count > 1 ? std::sqrt(sq / (count - 1)) : 0.0;

  BenchPointResult out;
  out.record = {n, m, q, d, workers, mean, sd, mean_ind, seed};
  out.trace = std::move(trace);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check driver (shared by the CLI and the acceptance suite)
// ---------------------------------------------------------------------------

struct GradCheckRun {
  GradCheckReport report;
  ParameterLayout layout;
};

/// Builds the full distributed objective for either model kind at a seeded
/// random perturbation of the initialized parameters and runs the central
/// finite-difference harness over every layout segment.
/// `corrupt_beta` is a fault-injection hook: it scales the analytic beta
/// gradient by 1.01 so the harness itself can be shown to catch a bad
/// gradient.
inline GradCheckRun run_gradcheck(ModelKind kind, const Matrix& latent, const Matrix& observed,
                                  Index m, Index q, std::uint64_t seed, int workers = 1,
                                  TileConfig tiles = {}, bool corrupt_beta = false) {
  const Index n = observed.rows();
  require(m >= 1 && m <= n, "gradcheck: need 1 <= M <= N");

  ParameterLayout layout;
  layout.q = q;
  layout.m = m;
  layout.n = kind == ModelKind::latent ? n : 0;
  layout.has_latent = kind == ModelKind::latent;

  Rng rng(seed);
  ModelParams params;
  Matrix mu, s;
  std::unique_ptr<Engine> engine;

  if (kind == ModelKind::latent) {
    BayesianGPLVM model = init_gplvm(observed, q, m, seed);
    params = {model.kernel(), model.beta(), model.inducing(), model.posterior().mu,
              model.posterior().s};
    engine = std::make_unique<Engine>(ModelKind::latent, params.mu, params.s, observed, workers,
                                      tiles);
  } else {
    require(latent.cols() == q, "gradcheck: latent dimension mismatch for the regression model");
    KernelSpec kernel = KernelSpec::iso(1.0, 1.0, q);
    Matrix z(m, q);
    for (Index i = 0; i < m; ++i) z.row(i) = latent.row(static_cast<Index>(rng.next_index(n)));
    params = {kernel, 1.0, z, {}, {}};
    engine = std::make_unique<Engine>(ModelKind::regression, latent, Matrix(), observed, workers,
                                      tiles);
  }

  // Random point: jitter every packed coordinate so no gradient sits at a
  // symmetric stationary value.
  Vector v = pack(params, layout);
  for (Index i = 0; i < v.size(); ++i) v[i] += 0.05 * (rng.next_uniform() - 0.5);

  detail::DistributedObjective base(*engine, layout);
  Objective objective = [&](const Vector& x, Vector& g) {
    const double f = base(x, g);
    if (corrupt_beta) g[layout.beta_offset()] *= 1.01;
    return f;
  };

  GradCheckRun run;
  run.layout = layout;
  run.report = grad_check(objective, v, layout, 1e-5, 50, seed);
  return run;
}

}  // namespace sgp
