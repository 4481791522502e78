// Command-line surface: synthetic data generation, model fitting, gradient
// checking and the scaling benchmark. Exit codes: 0 success, 1 verification
// failure, 2 usage error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sgp/sgp.hpp"

namespace fs = std::filesystem;
using sgp::Index;
using sgp::Matrix;

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("SGP_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw CLI::ValidationError("SGP_SEED", "cannot parse as an integer");
    }
  }
  return 0;
}

std::vector<Index> parse_size_list(const std::string& csv) {
  std::vector<Index> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(static_cast<Index>(std::stoll(tok)));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_generate(Index n, std::uint64_t seed, const std::string& out_dir,
                 const std::string& format) {
  sgp::GenerateOptions opts;
  opts.n = n;
  opts.seed = seed;
  sgp::SyntheticData data = sgp::generate_synthetic(opts);
  sgp::DataManifest manifest = sgp::write_synthetic(out_dir, opts, data, format);
  std::cout << "generated n=" << n << " latent=" << manifest.latent_file
            << " observed=" << manifest.observed_file << " method=" << manifest.method << "\n";
  return 0;
}

int cmd_fit(const std::string& data_dir, const std::string& model_kind, Index m, Index q,
            int workers, int iters, std::uint64_t seed, const std::string& out_dir) {
  sgp::LoadedData data = sgp::load_synthetic(data_dir);
  fs::create_directories(out_dir);

  sgp::FitOptions opts;
  opts.workers = workers;
  opts.max_iters = iters;

  sgp::FitTrace trace;
  nlohmann::json model_json;

  if (model_kind == "bgplvm") {
    sgp::BayesianGPLVM model = sgp::init_gplvm(data.observed, q, m, seed);
    trace = model.fit(opts);
    model_json = {{"model", "bgplvm"},
                  {"n", model.n()},
                  {"d", model.d()},
                  {"q", model.latent_dim()},
                  {"m", model.m()},
                  {"seed", seed},
                  {"kernel",
                   {{"variance", model.kernel().variance},
                    {"lengthscales", std::vector<double>(model.kernel().lengthscales.begin(),
                                                         model.kernel().lengthscales.end())}}},
                  {"beta", model.beta()},
                  {"z", matrix_to_json(model.inducing())},
                  {"mu", matrix_to_json(model.posterior().mu)},
                  {"s", matrix_to_json(model.posterior().s)}};
  } else if (model_kind == "sgpr") {
    require(data.latent.cols() == q, "fit: latent dimension of the data does not match --q");
    const Index n = data.observed.rows();
    sgp::Rng rng(seed);
    Matrix z(m, q);
    for (Index i = 0; i < m; ++i)
      z.row(i) = data.latent.row(static_cast<Index>(rng.next_index(n)));
    sgp::SparseGPRegression model(data.latent, data.observed,
                                  sgp::KernelSpec::iso(1.0, 1.0, q), 1.0, z);
    trace = model.fit(opts);
    model_json = {{"model", "sgpr"},
                  {"n", model.n()},
                  {"d", model.d()},
                  {"q", model.q()},
                  {"m", model.m()},
                  {"seed", seed},
                  {"kernel",
                   {{"variance", model.kernel().variance},
                    {"lengthscales", std::vector<double>(model.kernel().lengthscales.begin(),
                                                         model.kernel().lengthscales.end())}}},
                  {"beta", model.beta()},
                  {"z", matrix_to_json(model.inducing())}};
  } else {
    throw CLI::ValidationError("--model", "must be sgpr or bgplvm");
  }

  model_json["data_manifest"] = sgp::to_json(data.manifest);
  model_json["fit"] = {{"iters", iters},
                       {"workers", workers},
                       {"initial_bound", trace.initial_bound()},
                       {"final_bound", trace.final_bound()},
                       {"status", sgp::to_string(trace.status)}};

  std::ofstream mf(fs::path(out_dir) / "model.json", std::ios::binary);
  mf << model_json.dump(2) << '\n';
  sgp::write_trace_csv(fs::path(out_dir) / "trace.csv", trace);

  std::cout << "fit " << model_kind << " iters=" << trace.iterations.back().iter
            << " bound " << sgp::format_double(trace.initial_bound()) << " -> "
            << sgp::format_double(trace.final_bound()) << "\n";
  return 0;
}

int cmd_bench(const std::string& sizes_csv, const std::string& workers_csv, int iters,
              std::uint64_t seed, const std::string& out_file, Index m, Index q, Index d) {
  std::vector<Index> sizes = parse_size_list(sizes_csv);
  std::vector<int> workers = parse_int_list(workers_csv);
  if (sizes.empty()) throw CLI::ValidationError("--data-sizes", "empty list");
  if (workers.empty()) throw CLI::ValidationError("--workers", "empty list");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1])
      throw CLI::ValidationError("--data-sizes", "sizes must be strictly ascending");

  std::vector<sgp::BenchRecord> records;
  for (Index n : sizes) {
    for (int p : workers) {
      sgp::BenchPointResult point = sgp::run_bench_point(n, m, q, d, p, iters, seed);
      records.push_back(point.record);
      std::cout << "bench n=" << n << " workers=" << p << " iter_time="
                << sgp::format_double(point.record.iter_time_mean_s) << "s indistributable="
                << sgp::format_double(point.record.indistributable_fraction) << "\n";
    }
  }
  sgp::write_bench_csv(out_file, records);
  std::cout << "wrote " << out_file << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& data_dir, const std::string& model_kind, Index m, Index q,
                  std::uint64_t seed, bool corrupt_beta) {
  sgp::LoadedData data = sgp::load_synthetic(data_dir);
  const sgp::ModelKind kind =
      model_kind == "bgplvm" ? sgp::ModelKind::latent : sgp::ModelKind::regression;
  if (model_kind != "bgplvm" && model_kind != "sgpr")
    throw CLI::ValidationError("--model", "must be sgpr or bgplvm");

  sgp::GradCheckRun run = sgp::run_gradcheck(kind, data.latent, data.observed, m, q, seed, 1, {},
                                             corrupt_beta);
  const double tol = 1e-5;
  bool ok = true;
  for (const auto& seg : run.report.segments) {
    const bool pass = seg.max_rel_err < tol;
    ok = ok && pass;
    std::cout << (pass ? "pass" : "FAIL") << "  " << seg.name << "  max_rel_err="
              << sgp::format_double(seg.max_rel_err) << "  (" << seg.checked << " coords)\n";
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance "
            << sgp::format_double(tol) << ")\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse variational GP benchmark tool"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "generate synthetic GP data");
  Index gen_n = 0;
  std::uint64_t gen_seed = default_seed();
  std::string gen_out, gen_format = "csv";
  gen->add_option("--n", gen_n, "number of datapoints")->required()->check(CLI::Range(Index{2}, Index{100000000}));
  gen->add_option("--seed", gen_seed, "RNG seed (default: SGP_SEED or 0)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--format", gen_format, "csv or bin")->check(CLI::IsMember({"csv", "bin"}));

  // fit
  auto* fit = app.add_subcommand("fit", "fit a model to generated data");
  std::string fit_data, fit_model = "bgplvm", fit_out;
  Index fit_m = 100, fit_q = 1;
  int fit_workers = 1, fit_iters = 100;
  std::uint64_t fit_seed = default_seed();
  fit->add_option("--data", fit_data, "data directory from `generate`")->required();
  fit->add_option("--model", fit_model, "sgpr or bgplvm")->check(CLI::IsMember({"sgpr", "bgplvm"}));
  fit->add_option("--m", fit_m, "number of inducing inputs");
  fit->add_option("--q", fit_q, "latent dimension");
  fit->add_option("--workers", fit_workers, "worker count")->check(CLI::PositiveNumber);
  fit->add_option("--iters", fit_iters, "max optimizer iterations")->check(CLI::NonNegativeNumber);
  fit->add_option("--seed", fit_seed, "RNG seed (default: SGP_SEED or 0)");
  fit->add_option("--out", fit_out, "output directory")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "scaling benchmark, CSV output");
  std::string bench_sizes, bench_workers = "1", bench_out;
  int bench_iters = 3;
  std::uint64_t bench_seed = default_seed();
  Index bench_m = 100, bench_q = 1, bench_d = 3;
  bench->add_option("--data-sizes", bench_sizes, "comma list, ascending (e.g. 1000,2000,4000)")
      ->required();
  bench->add_option("--workers", bench_workers, "comma list of worker counts");
  bench->add_option("--iters", bench_iters, "timed iterations per point")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_seed, "RNG seed (default: SGP_SEED or 0)");
  bench->add_option("--out", bench_out, "output CSV path")->required();
  bench->add_option("--m", bench_m, "inducing inputs");
  bench->add_option("--q", bench_q, "latent dimension");
  bench->add_option("--d", bench_d, "output dimensions");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_data, gc_model = "bgplvm";
  Index gc_m = 5, gc_q = 2;
  std::uint64_t gc_seed = default_seed();
  bool gc_corrupt = false;
  gc->add_option("--data", gc_data, "data directory from `generate`")->required();
  gc->add_option("--model", gc_model, "sgpr or bgplvm")->check(CLI::IsMember({"sgpr", "bgplvm"}));
  gc->add_option("--m", gc_m, "number of inducing inputs");
  gc->add_option("--q", gc_q, "latent dimension");
  gc->add_option("--seed", gc_seed, "RNG seed (default: SGP_SEED or 0)");
  gc->add_flag("--corrupt-beta-gradient", gc_corrupt, "fault-injection hook for testing the harness")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_n, gen_seed, gen_out, gen_format);
    if (fit->parsed())
      return cmd_fit(fit_data, fit_model, fit_m, fit_q, fit_workers, fit_iters, fit_seed, fit_out);
    if (bench->parsed())
      return cmd_bench(bench_sizes, bench_workers, bench_iters, bench_seed, bench_out, bench_m,
                       bench_q, bench_d);
    if (gc->parsed()) return cmd_gradcheck(gc_data, gc_model, gc_m, gc_q, gc_seed, gc_corrupt);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const sgp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
