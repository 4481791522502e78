#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgp/common.hpp"

namespace sgp {

using json = nlohmann::json;

/// Shortest decimal that round-trips the exact double.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end)
    throw std::runtime_error(context + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Headered CSV matrices
// ---------------------------------------------------------------------------

inline void write_matrix_csv(const std::filesystem::path& path, const Eigen::Ref<const Matrix>& m,
                             const std::vector<std::string>& column_names) {
  require(static_cast<Index>(column_names.size()) == m.cols(),
          "write_matrix_csv: column name count mismatch");
  std::ofstream out(path, std::ios::binary);  // '\n' line endings everywhere
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (std::size_t j = 0; j < column_names.size(); ++j) {
    if (j) out << ',';
    out << column_names[j];
  }
  out << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct CsvMatrix {
  Matrix values;
  std::vector<std::string> column_names;
};

inline CsvMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());

  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        out.push_back(line.substr(start));
        break;
      }
      out.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    return out;
  };

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ":1: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  CsvMatrix result;
  result.column_names = split(line);
  const std::size_t cols = result.column_names.size();

  std::vector<double> data;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != cols)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(cols) + " fields, got " +
                               std::to_string(fields.size()));
    for (const auto& f : fields)
      data.push_back(parse_double(f, path.string() + ":" + std::to_string(lineno)));
    ++rows;
  }

  result.values = Matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) result.values(i, j) = data[i * cols + j];
  return result;
}

// ---------------------------------------------------------------------------
// Raw binary matrices: row-major little-endian float64 in <base>.bin with a
// text sidecar <base>.shape holding "rows cols\n".
// ---------------------------------------------------------------------------

inline void write_matrix_bin(const std::filesystem::path& base, const Eigen::Ref<const Matrix>& m) {
  std::ofstream shape(base.string() + ".shape", std::ios::binary);
  if (!shape) throw std::runtime_error("cannot open for writing: " + base.string() + ".shape");
  shape << m.rows() << ' ' << m.cols() << '\n';

  std::ofstream bin(base.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open for writing: " + base.string() + ".bin");
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      bin.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  if (!bin) throw std::runtime_error("write failed: " + base.string() + ".bin");
}

inline Matrix read_matrix_bin(const std::filesystem::path& base) {
  std::ifstream shape(base.string() + ".shape", std::ios::binary);
  if (!shape) throw std::runtime_error("cannot open: " + base.string() + ".shape");
  Index rows = 0, cols = 0;
  shape >> rows >> cols;
  if (!shape || rows < 0 || cols < 0)
    throw std::runtime_error(base.string() + ".shape:1: expected 'rows cols'");

  std::ifstream bin(base.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open: " + base.string() + ".bin");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) {
      double v = 0.0;
      if (!bin.read(reinterpret_cast<char*>(&v), sizeof(double)))
        throw std::runtime_error(base.string() + ".bin: truncated at row " + std::to_string(i));
      m(i, j) = v;
    }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Everything needed to regenerate a synthetic dataset byte-identically.
struct DataManifest {
  Index n = 0;
  Index latent_dim = 1;
  Index out_dim = 3;
  std::uint64_t seed = 0;
  double kernel_variance = 1.0;
  double kernel_lengthscale = 1.0;
  double noise_variance = 0.01;
  std::string method;  // "dense-exact" or "inducing-<sites>"
  std::string format;  // "csv" or "bin"
  std::string latent_file;
  std::string observed_file;
};

inline json to_json(const DataManifest& m) {
  return json{{"n", m.n},
              {"latent_dim", m.latent_dim},
              {"out_dim", m.out_dim},
              {"seed", m.seed},
              {"kernel", {{"variance", m.kernel_variance}, {"lengthscale", m.kernel_lengthscale}}},
              {"noise_variance", m.noise_variance},
              {"method", m.method},
              {"format", m.format},
              {"files", {{"latent", m.latent_file}, {"observed", m.observed_file}}}};
}

inline DataManifest manifest_from_json(const json& j) {
  DataManifest m;
  m.n = j.at("n").get<Index>();
  m.latent_dim = j.at("latent_dim").get<Index>();
  m.out_dim = j.at("out_dim").get<Index>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.kernel_variance = j.at("kernel").at("variance").get<double>();
  m.kernel_lengthscale = j.at("kernel").at("lengthscale").get<double>();
  m.noise_variance = j.at("noise_variance").get<double>();
  m.method = j.at("method").get<std::string>();
  m.format = j.at("format").get<std::string>();
  m.latent_file = j.at("files").at("latent").get<std::string>();
  m.observed_file = j.at("files").at("observed").get<std::string>();
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DataManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << to_json(m).dump(2) << '\n';
}

inline DataManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  json j = json::parse(in);
  return manifest_from_json(j);
}

}  // namespace sgp
