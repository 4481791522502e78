#pragma once

#include <algorithm>
#include <chrono>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

#include "sgp/bound.hpp"
#include "sgp/common.hpp"
#include "sgp/kernels.hpp"
#include "sgp/psi_stats.hpp"

namespace sgp {

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

struct Partition {
  int worker_count = 1;
  std::vector<std::pair<Index, Index>> shards;  // [begin, end), contiguous, ordered
};

/// Balanced contiguous shards covering [0, N); sizes differ by at most one,
/// remainder assigned to the earliest shards. Deterministic in (N, P).
inline Partition make_partition(Index n, int p) {
  require(p >= 1, "make_partition: worker count must be >= 1");
  require(static_cast<Index>(p) <= n, "make_partition: more workers than datapoints");
  Partition part;
  part.worker_count = p;
  const Index base = n / p, rem = n % p;
  Index at = 0;
  for (int i = 0; i < p; ++i) {
    const Index len = base + (static_cast<Index>(i) < rem ? 1 : 0);
    part.shards.emplace_back(at, at + len);
    at += len;
  }
  return part;
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

enum class ModelKind { regression, latent };

/// Global (broadcast) parameters. Local parameters (mu, s) travel separately
/// as per-worker slices.
struct GlobalParams {
  KernelSpec kernel;
  double beta = 1.0;
  Matrix z;
};

/// Coordinator-to-worker adjoint broadcast for the gradient pass. a_inv, g
/// and kmm_inv let each worker compute its own share of the beta gradient
/// from its local partial statistics.
struct AdjointRequest {
  StatsAdjoints stats;
  Matrix a_inv;    // (Kmm + beta Phi)^{-1}
  Matrix g;        // A^{-1} Psi
  Matrix kmm_inv;
  double beta = 1.0;
  Index d_out = 0;
};

struct WorkerReport {
  int shard_index = -1;
  Index shard_begin = 0, shard_end = 0;
  SufficientStats stats;
  double kl_partial = 0.0;

  bool has_grads = false;
  Matrix d_mu, d_s;        // shard rows x Q (latent model only); KL included
  Matrix d_z;              // M x Q partial sum over the shard
  double d_variance = 0.0;
  Vector d_lengthscales;   // Q partial
  double d_beta = 0.0;     // this shard's share

  double elapsed_distributable_s = 0.0;
  double elapsed_total_s = 0.0;
};

/// One compute node: owns a copy of its shard's rows and nothing else, so a
/// report is a pure function of the shard and the broadcast parameters.
class Worker {
 public:
  static Worker regression(int index, Index begin, Matrix x_rows, Matrix y_rows) {
    Worker w;
    w.kind_ = ModelKind::regression;
    w.index_ = index;
    w.begin_ = begin;
    w.x_ = std::move(x_rows);
    w.y_ = std::move(y_rows);
    require(w.x_.rows() == w.y_.rows(), "worker: X/Y row mismatch");
    return w;
  }

  static Worker latent(int index, Index begin, Matrix y_rows, Matrix mu_rows, Matrix s_rows) {
    Worker w;
    w.kind_ = ModelKind::latent;
    w.index_ = index;
    w.begin_ = begin;
    w.y_ = std::move(y_rows);
    w.mu_ = std::move(mu_rows);
    w.s_ = std::move(s_rows);
    require(w.mu_.rows() == w.y_.rows() && w.s_.rows() == w.y_.rows(),
            "worker: local parameter row mismatch");
    return w;
  }

  int index() const { return index_; }
  Index begin() const { return begin_; }
  Index rows() const { return y_.rows(); }
  ModelKind kind() const { return kind_; }
  const Matrix& mu() const { return mu_; }
  const Matrix& s() const { return s_; }

  /// Broadcast of this worker's slice of the local parameters.
  void set_local(const Eigen::Ref<const Matrix>& mu_rows, const Eigen::Ref<const Matrix>& s_rows) {
    require(kind_ == ModelKind::latent, "worker: regression workers hold no local parameters");
    require(mu_rows.rows() == y_.rows() && s_rows.rows() == y_.rows(),
            "worker: local slice row mismatch");
    mu_ = mu_rows;
    s_ = s_rows;
  }

  /// Shard-local statistics, and gradient pieces when adjoints are supplied.
  /// Tiles iterate in ascending (block, chunk) order; see sweep_stats.
  WorkerReport pass(const GlobalParams& params, const TileConfig& tiles,
                    const AdjointRequest* adj) const {
    using clock = std::chrono::steady_clock;
    const auto t_total = clock::now();

    WorkerReport rep;
    rep.shard_index = index_;
    rep.shard_begin = begin_;
    rep.shard_end = begin_ + rows();

    const auto t_dist = clock::now();
    try {
      StatsGrads grads;
      if (kind_ == ModelKind::latent) {
        detail::sweep_stats(true, mu_, s_, y_, params.z, params.kernel, tiles,
                            adj ? &adj->stats : nullptr, rep.stats, adj ? &grads : nullptr);
        rep.kl_partial =
            0.5 * (s_.array() + mu_.array().square() - s_.array().log() - 1.0).sum();
      } else {
        detail::sweep_stats(false, x_, Matrix(), y_, params.z, params.kernel, tiles,
                            adj ? &adj->stats : nullptr, rep.stats, adj ? &grads : nullptr);
      }

      if (adj) {
        rep.has_grads = true;
        rep.d_z = std::move(grads.d_z);
        rep.d_variance = grads.d_variance;
        rep.d_lengthscales = std::move(grads.d_lengthscales);
        if (kind_ == ModelKind::latent) {
          // KL enters the bound as -KL, so its gradient is subtracted here,
          // at the owning worker.
          rep.d_mu = grads.d_mu - mu_;
          rep.d_s = grads.d_s;
          rep.d_s.array() -= 0.5 * (1.0 - s_.array().inverse());
        }
        rep.d_beta = beta_share(rep.stats, *adj);
      }
    } catch (const NumericError& e) {
      throw NumericError("worker " + std::to_string(index_) + ": " + e.what());
    }
    const auto t_end = clock::now();
    rep.elapsed_distributable_s = std::chrono::duration<double>(t_end - t_dist).count();
    rep.elapsed_total_s = std::chrono::duration<double>(t_end - t_total).count();
    return rep;
  }

 private:
  Worker() = default;

  /// This shard's additive share of d(bound)/d(beta), from the shard's
  /// partial statistics and the broadcast M-sized matrices:
  ///   D n_w / (2 beta) - D/2 tr(A^{-1} Phi_w) - yy_w/2 + beta tr(Psi_w^T G)
  ///   - beta^2/2 tr(G^T Phi_w G) - D phi_w / 2 + D/2 tr(Kmm^{-1} Phi_w)
  double beta_share(const SufficientStats& st, const AdjointRequest& adj) const {
    const double dd = static_cast<double>(adj.d_out);
    const double beta = adj.beta;
    const double tr_ainv_phi = (adj.a_inv.array() * st.phi_big.array()).sum();
    const double tr_psig = (st.psi_y.array() * adj.g.array()).sum();
    const double tr_gphig = (adj.g.array() * (st.phi_big * adj.g).array()).sum();
    const double tr_kinv_phi = (adj.kmm_inv.array() * st.phi_big.array()).sum();
    return 0.5 * dd * static_cast<double>(st.n_count) / beta - 0.5 * dd * tr_ainv_phi -
           0.5 * st.yy + beta * tr_psig - 0.5 * beta * beta * tr_gphig - 0.5 * dd * st.phi +
           0.5 * dd * tr_kinv_phi;
  }

  ModelKind kind_ = ModelKind::regression;
  int index_ = -1;
  Index begin_ = 0;
  Matrix x_;       // regression only
  Matrix y_;
  Matrix mu_, s_;  // latent only
};

// ---------------------------------------------------------------------------
// Reduction
// ---------------------------------------------------------------------------

struct ReducedReports {
  SufficientStats stats;
  double kl = 0.0;
  bool has_grads = false;
  Matrix d_z;
  double d_variance = 0.0;
  Vector d_lengthscales;
  double d_beta = 0.0;
};

/// Field-wise sum in ascending shard order (the canonical order; the input
/// may arrive permuted). Local gradients stay inside the reports -- they are
/// per-datapoint parameters and never aggregate.
inline ReducedReports reduce_reports(std::vector<const WorkerReport*> reports) {
  require(!reports.empty(), "reduce_reports: no reports");
  std::sort(reports.begin(), reports.end(),
            [](const WorkerReport* a, const WorkerReport* b) {
              return a->shard_index < b->shard_index;
            });
  for (std::size_t i = 0; i < reports.size(); ++i) {
    require(reports[i]->shard_index == static_cast<int>(i),
            "reduce_reports: missing or duplicate shard report");
    if (i > 0)
      require(reports[i]->shard_begin == reports[i - 1]->shard_end,
              "reduce_reports: shards do not tile the data range");
  }

  const auto& first = *reports.front();
  ReducedReports out;
  out.stats = SufficientStats::zero(first.stats.psi_y.rows(), first.stats.psi_y.cols());
  out.has_grads = first.has_grads;
  if (out.has_grads) {
    out.d_z = Matrix::Zero(first.d_z.rows(), first.d_z.cols());
    out.d_lengthscales = Vector::Zero(first.d_lengthscales.size());
  }
  for (const WorkerReport* r : reports) {
    require(r->has_grads == out.has_grads, "reduce_reports: mixed gradient availability");
    require(r->stats.n_count == r->shard_end - r->shard_begin,
            "reduce_reports: stats n_count does not match the shard size");
    out.stats += r->stats;
    out.kl += r->kl_partial;
    if (out.has_grads) {
      out.d_z += r->d_z;
      out.d_variance += r->d_variance;
      out.d_lengthscales += r->d_lengthscales;
      out.d_beta += r->d_beta;
    }
  }
  return out;
}

inline ReducedReports reduce_reports(const std::vector<WorkerReport>& reports) {
  std::vector<const WorkerReport*> ptrs;
  ptrs.reserve(reports.size());
  for (const auto& r : reports) ptrs.push_back(&r);
  return reduce_reports(std::move(ptrs));
}

// ---------------------------------------------------------------------------
// Timing split
// ---------------------------------------------------------------------------

struct TimingSplit {
  double distributable_fraction = 1.0;
  double indistributable_fraction = 0.0;
};

/// Share of per-iteration time spent in the coordinator's M-sized algebra
/// (the (beta Phi + Kmm)^{-1} path). The iteration wall model is coordinator
/// time plus the slowest worker, matching the barrier protocol.
inline TimingSplit timing_split(const std::vector<WorkerReport>& reports,
                                double coordinator_elapsed_s) {
  double worker_wall = 0.0;
  for (const auto& r : reports) worker_wall = std::max(worker_wall, r.elapsed_total_s);
  const double wall = coordinator_elapsed_s + worker_wall;
  TimingSplit split;
  if (wall > 0.0) {
    split.indistributable_fraction = coordinator_elapsed_s / wall;
    split.distributable_fraction = 1.0 - split.indistributable_fraction;
  }
  return split;
}

// ---------------------------------------------------------------------------
// Engine: partition + workers + coordinator
// ---------------------------------------------------------------------------

struct EngineTimings {
  double coordinator_s = 0.0;       // M-sized algebra (bound + adjoints + gram grads)
  double worker_wall_s = 0.0;       // slowest worker, both passes
  double wall_s = 0.0;              // measured end to end
  TimingSplit split;
};

struct GradientParts {
  Matrix d_mu, d_s;  // N x Q, assembled from shard slices (latent model)
  Matrix d_z;        // M x Q
  double d_variance = 0.0;
  Vector d_lengthscales;
  double d_beta = 0.0;
};

struct EvalResult {
  BoundBreakdown bound;
  SufficientStats stats;
  bool has_grads = false;
  GradientParts grads;
  EngineTimings timing;
};

/// In-process realization of the collect/broadcast protocol: data rows are
/// distributed to workers once at construction; each evaluation broadcasts
/// parameters, collects shard reports (statistics pass), runs the
/// indistributable coordinator algebra, and -- when gradients are wanted --
/// broadcasts adjoints for a second collect.
class Engine {
 public:
  Engine(ModelKind kind, const Matrix& x_or_mu, const Matrix& s, const Matrix& y, int workers,
         TileConfig tiles = {}, double jitter_factor = 1e-6)
      : kind_(kind),
        n_(y.rows()),
        d_(y.cols()),
        tiles_(tiles),
        jitter_factor_(jitter_factor),
        partition_(make_partition(y.rows(), workers)) {
    tiles_.validate();
    for (int i = 0; i < partition_.worker_count; ++i) {
      const auto [b, e] = partition_.shards[i];
      const Index len = e - b;
      if (kind == ModelKind::regression) {
        workers_.push_back(
            Worker::regression(i, b, x_or_mu.middleRows(b, len), y.middleRows(b, len)));
      } else {
        workers_.push_back(Worker::latent(i, b, y.middleRows(b, len),
                                          x_or_mu.middleRows(b, len), s.middleRows(b, len)));
      }
    }
  }

  const Partition& partition() const { return partition_; }
  const TileConfig& tiles() const { return tiles_; }
  Index n() const { return n_; }
  Index d() const { return d_; }
  int worker_count() const { return partition_.worker_count; }
  const std::vector<Worker>& workers() const { return workers_; }
  const GlobalParams& current_params() const { return params_; }
  int broadcast_count() const { return broadcasts_; }

  /// Broadcast: store the global parameters and scatter the local slices.
  void broadcast(const GlobalParams& params, const Matrix* mu = nullptr,
                 const Matrix* s = nullptr) {
    params_ = params;
    if (kind_ == ModelKind::latent && mu && s) {
      require(mu->rows() == n_ && s->rows() == n_, "broadcast: local parameter row mismatch");
      for (auto& w : workers_)
        w.set_local(mu->middleRows(w.begin(), w.rows()), s->middleRows(w.begin(), w.rows()));
    }
    ++broadcasts_;
  }

  /// Full pipeline on the currently broadcast parameters.
  EvalResult evaluate(bool with_grads) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();

    // Statistics pass (distributable).
    std::vector<WorkerReport> pass1 = run_pass(nullptr);
    ReducedReports reduced = reduce_reports(pass1);

    // Indistributable coordinator algebra.
    const auto tc0 = clock::now();
    GramFactor gram = factor_gram(params_.z, params_.kernel, jitter_factor_);
    detail::BoundCore core = detail::bound_core(reduced.stats, gram.kmm, params_.beta, n_, d_);

    EvalResult result;
    result.stats = reduced.stats;
    result.bound = core.bd;
    if (kind_ == ModelKind::latent) {
      result.bound.kl_term = -reduced.kl;
      result.bound.total = result.bound.term_sum();
    }

    double coordinator_s = 0.0;
    double worker_wall = 0.0;
    for (const auto& r : pass1) worker_wall = std::max(worker_wall, r.elapsed_total_s);

    if (with_grads) {
      BoundAdjoints adj = detail::adjoints_from_core(core, reduced.stats, params_.beta, n_, d_);
      AdjointRequest request;
      request.stats.d_phi = adj.d_phi;
      request.stats.d_psi_y = std::move(adj.d_psi_y);
      request.stats.d_phi_big = std::move(adj.d_phi_big);
      request.a_inv = core.ws.a_inv;
      request.g = core.ws.g;
      request.kmm_inv = core.ws.kmm_inv;
      request.beta = params_.beta;
      request.d_out = d_;
      coordinator_s += std::chrono::duration<double>(clock::now() - tc0).count();

      // Gradient pass (distributable).
      std::vector<WorkerReport> pass2 = run_pass(&request);
      ReducedReports reduced2 = reduce_reports(pass2);
      for (const auto& r : pass2) worker_wall = std::max(worker_wall, r.elapsed_total_s);

      // Coordinator-only terms: the Kmm chain through both slots of the
      // gram matrix, plus the jitter term in the variance gradient.
      const auto tc1 = clock::now();
      KernGrads gram_grads = kern_grads(params_.z, params_.z, params_.kernel, adj.d_kmm);
      result.has_grads = true;
      result.grads.d_z = reduced2.d_z + gram_grads.d_z + gram_grads.d_x;
      result.grads.d_variance = reduced2.d_variance + gram_grads.d_variance +
                                gram.jitter_factor * adj.d_kmm.trace();
      result.grads.d_lengthscales = reduced2.d_lengthscales + gram_grads.d_lengthscales;
      result.grads.d_beta = reduced2.d_beta;
      if (kind_ == ModelKind::latent) {
        result.grads.d_mu = Matrix(n_, workers_.front().mu().cols());
        result.grads.d_s = Matrix(n_, workers_.front().mu().cols());
        for (const auto& r : pass2) {
          result.grads.d_mu.middleRows(r.shard_begin, r.shard_end - r.shard_begin) = r.d_mu;
          result.grads.d_s.middleRows(r.shard_begin, r.shard_end - r.shard_begin) = r.d_s;
        }
      }
      coordinator_s += std::chrono::duration<double>(clock::now() - tc1).count();
      last_reports_ = std::move(pass2);
    } else {
      coordinator_s += std::chrono::duration<double>(clock::now() - tc0).count();
      last_reports_ = std::move(pass1);
    }

    result.timing.coordinator_s = coordinator_s;
    result.timing.worker_wall_s = worker_wall;
    result.timing.wall_s = std::chrono::duration<double>(clock::now() - t0).count();
    // Wall model per the barrier protocol: coordinator plus slowest worker
    // across both passes.
    const double modeled_wall = coordinator_s + worker_wall;
    if (modeled_wall > 0.0) {
      result.timing.split.indistributable_fraction = coordinator_s / modeled_wall;
      result.timing.split.distributable_fraction =
          1.0 - result.timing.split.indistributable_fraction;
    }
    return result;
  }

  const std::vector<WorkerReport>& last_reports() const { return last_reports_; }

 private:
  std::vector<WorkerReport> run_pass(const AdjointRequest* adj) {
    const int p = partition_.worker_count;
    std::vector<WorkerReport> reports(p);
    if (p == 1) {
      reports[0] = workers_[0].pass(params_, tiles_, adj);
      return reports;
    }
    std::vector<std::thread> threads;
    std::exception_ptr error;
    std::mutex error_mutex;
    threads.reserve(p);
    for (int i = 0; i < p; ++i) {
      threads.emplace_back([&, i] {
        try {
          reports[i] = workers_[i].pass(params_, tiles_, adj);
        } catch (...) {
          std::scoped_lock lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
    return reports;
  }

  ModelKind kind_;
  Index n_, d_;
  TileConfig tiles_;
  double jitter_factor_;
  Partition partition_;
  std::vector<Worker> workers_;
  GlobalParams params_;
  std::vector<WorkerReport> last_reports_;
  int broadcasts_ = 0;
};

}  // namespace sgp
