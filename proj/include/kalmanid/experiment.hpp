// Experiment harness behind the command-line tool: configuration, dataset
// files, and the simulate / identify / landscape / consistency / check
// commands. Needs nlohmann/json in addition to the core headers.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kalmanid/linalg.hpp"
#include "kalmanid/model.hpp"
#include "kalmanid/optimizer.hpp"
#include "kalmanid/pem.hpp"
#include "kalmanid/riccati.hpp"
#include "kalmanid/stability.hpp"

namespace kalmanid {

using json = nlohmann::json;

/// Invalid configuration; the message starts with the JSON path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or metadata file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// =============================================================================
// Configuration
// =============================================================================

enum class Example { OneDim, TwoState, ThreeState, Custom };

inline const char* example_name(Example e) {
  switch (e) {
    case Example::OneDim: return "one_dim";
    case Example::TwoState: return "two_state";
    case Example::ThreeState: return "three_state";
    case Example::Custom: return "custom";
  }
  return "?";
}

struct LandscapeGrid {
  double lo = -0.3;
  double hi = 2.1;
  int points = 241;
};

struct ExperimentConfig {
  Example example = Example::OneDim;
  // Particle examples.
  double mu = 0.1;
  double dt = 0.1;
  double sigma_f = 10.0;
  double sigma_v = 1.0;
  double a_f = 0.9;
  double p_hit = 0.1;
  double sigma_w2 = 10.0;
  double cov_v_acc = 1.0;
  double cov_v_pos = 2.0;
  // Innovation-form system for one_dim and custom.
  Matrix A, B, C;
  Vector x0;
  Matrix L_star, S_star;

  double alpha = 0.02;
  std::optional<Matrix> W;  // identity when unset
  std::vector<std::size_t> N_list{1000};
  int n_seeds = 10;
  int n_starts = 50;
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  std::string input = "zero";      // zero | random
  std::string sampler = "dare";    // dare | box | auto (box when n q <= 2)
  LandscapeGrid landscape;
  unsigned threads = 1;
};

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
  return base + "." + key;
}

inline double get_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError(path + ": must be finite");
  return v;
}

inline double get_positive(const json& j, const std::string& path) {
  const double v = get_number(j, path);
  if (!(v > 0.0)) throw ConfigError(path + ": must be > 0");
  return v;
}

inline std::int64_t get_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
  return j.get<std::int64_t>();
}

inline std::string get_string(const json& j, const std::string& path,
                              const std::vector<std::string>& allowed = {}) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  auto s = j.get<std::string>();
  if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError(path + ": must be one of {" + list + "}, got \"" + s + "\"");
  }
  return s;
}

/// Matrix from an array of rows; a bare number is a 1x1 matrix.
inline Matrix get_matrix(const json& j, const std::string& path) {
  if (j.is_number()) return Matrix::Constant(1, 1, get_number(j, path));
  if (!j.is_array() || j.empty()) throw ConfigError(path + ": expected a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = -1;
  Matrix M;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto rp = path + "[" + std::to_string(r) + "]";
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array()) throw ConfigError(rp + ": expected an array");
    if (cols < 0) {
      cols = static_cast<Eigen::Index>(row.size());
      M.resize(rows, cols);
    } else if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError(rp + ": expected " + std::to_string(cols) + " entries");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      M(r, c) = get_number(row[static_cast<std::size_t>(c)], rp + "[" + std::to_string(c) + "]");
    }
  }
  return M;
}

inline Vector get_vector(const json& j, const std::string& path) {
  if (j.is_number()) return Vector::Constant(1, get_number(j, path));
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v(static_cast<Eigen::Index>(i)) = get_number(j[i], path + "[" + std::to_string(i) + "]");
  }
  return v;
}

}  // namespace detail

inline json matrix_to_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

/// Fills defaults for the named example: the reference parameters for
/// the particle examples, A = 0.9, C = 1, L* = 0.8, S* = 1 for one_dim.
inline ExperimentConfig default_config(Example e) {
  ExperimentConfig c;
  c.example = e;
  if (e == Example::OneDim) {
    c.A = Matrix::Constant(1, 1, 0.9);
    c.B = Matrix::Constant(1, 1, 1.0);
    c.C = Matrix::Constant(1, 1, 1.0);
    c.x0 = Vector::Zero(1);
    c.L_star = Matrix::Constant(1, 1, 0.8);
    c.S_star = Matrix::Constant(1, 1, 1.0);
  }
  return c;
}

/// Parses and validates a configuration document. Errors name the offending
/// field as a JSON path, e.g. "$.N_list[2]: ...".
inline ExperimentConfig parse_config(const json& doc) {
  using namespace detail;
  if (!doc.is_object()) throw ConfigError("$: expected an object");
  if (!doc.contains("example")) throw ConfigError("$.example: required");
  const auto ex = get_string(doc.at("example"), "$.example",
                             {"one_dim", "two_state", "three_state", "custom"});
  const Example e = ex == "one_dim"     ? Example::OneDim
                    : ex == "two_state" ? Example::TwoState
                    : ex == "three_state" ? Example::ThreeState
                                          : Example::Custom;
  ExperimentConfig c = default_config(e);

  static const std::vector<std::string> known{
      "example", "mu", "dt", "sigma_f", "sigma_v", "a_f", "p_hit", "sigma_w2", "cov_v_acc",
      "cov_v_pos", "A", "B", "C", "x0", "L_star", "S_star", "alpha", "W", "N_list", "n_seeds",
      "n_starts", "seed", "output_dir", "input", "sampler", "landscape", "threads"};
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError(join_path("$", key) + ": unknown field");
    }
  }
  const auto positive = [&](const char* key, double& field) {
    if (doc.contains(key)) field = get_positive(doc.at(key), join_path("$", key));
  };
  positive("mu", c.mu);
  positive("dt", c.dt);
  positive("sigma_f", c.sigma_f);
  positive("sigma_v", c.sigma_v);
  positive("sigma_w2", c.sigma_w2);
  positive("cov_v_acc", c.cov_v_acc);
  positive("cov_v_pos", c.cov_v_pos);
  positive("alpha", c.alpha);
  if (doc.contains("a_f")) {
    c.a_f = get_number(doc.at("a_f"), "$.a_f");
    if (!(std::abs(c.a_f) < 1.0)) throw ConfigError("$.a_f: must satisfy |a_f| < 1");
  }
  if (doc.contains("p_hit")) {
    c.p_hit = get_number(doc.at("p_hit"), "$.p_hit");
    if (!(c.p_hit > 0.0 && c.p_hit <= 1.0)) throw ConfigError("$.p_hit: must lie in (0, 1]");
  }

  const bool innovation_form = e == Example::OneDim || e == Example::Custom;
  for (const char* key : {"A", "B", "C", "L_star", "S_star"}) {
    if (!doc.contains(key)) {
      if (e == Example::Custom) throw ConfigError(join_path("$", key) + ": required for custom");
      continue;
    }
    if (!innovation_form) throw ConfigError(join_path("$", key) + ": only valid for one_dim or custom");
    Matrix M = get_matrix(doc.at(key), join_path("$", key));
    if (std::string(key) == "A") c.A = M;
    if (std::string(key) == "B") c.B = M;
    if (std::string(key) == "C") c.C = M;
    if (std::string(key) == "L_star") c.L_star = M;
    if (std::string(key) == "S_star") c.S_star = M;
  }
  if (doc.contains("x0")) {
    if (!innovation_form) throw ConfigError("$.x0: only valid for one_dim or custom");
    c.x0 = get_vector(doc.at("x0"), "$.x0");
  } else if (innovation_form) {
    c.x0 = Vector::Zero(c.A.rows());
  }
  if (innovation_form) {
    InnovationModel m{{c.A, c.B, c.C, c.x0}, c.L_star, c.S_star};
    try {
      validate(m);
    } catch (const Error& err) {
      throw ConfigError(std::string("$: invalid system: ") + err.what());
    }
  }

  if (doc.contains("W")) {
    const auto& w = doc.at("W");
    if (w.is_string()) {
      get_string(w, "$.W", {"identity"});
    } else {
      c.W = get_matrix(w, "$.W");
    }
  }
  if (doc.contains("N_list")) {
    const auto& nl = doc.at("N_list");
    if (!nl.is_array() || nl.empty()) throw ConfigError("$.N_list: expected a non-empty array");
    c.N_list.clear();
    for (std::size_t i = 0; i < nl.size(); ++i) {
      const auto path = "$.N_list[" + std::to_string(i) + "]";
      const auto v = get_integer(nl[i], path);
      if (v < 1) throw ConfigError(path + ": must be >= 1");
      if (!c.N_list.empty() && static_cast<std::size_t>(v) <= c.N_list.back()) {
        throw ConfigError(path + ": N_list must be strictly ascending");
      }
      c.N_list.push_back(static_cast<std::size_t>(v));
    }
  }
  if (doc.contains("n_seeds")) {
    const auto v = get_integer(doc.at("n_seeds"), "$.n_seeds");
    if (v < 1) throw ConfigError("$.n_seeds: must be >= 1");
    c.n_seeds = static_cast<int>(v);
  }
  if (doc.contains("n_starts")) {
    const auto v = get_integer(doc.at("n_starts"), "$.n_starts");
    if (v < 1) throw ConfigError("$.n_starts: must be >= 1");
    c.n_starts = static_cast<int>(v);
  }
  if (doc.contains("seed")) {
    const auto v = get_integer(doc.at("seed"), "$.seed");
    if (v < 0) throw ConfigError("$.seed: must be >= 0");
    c.seed = static_cast<std::uint64_t>(v);
  }
  if (doc.contains("threads")) {
    const auto v = get_integer(doc.at("threads"), "$.threads");
    if (v < 0) throw ConfigError("$.threads: must be >= 0");
    c.threads = static_cast<unsigned>(v);
  }
  if (doc.contains("output_dir")) c.output_dir = get_string(doc.at("output_dir"), "$.output_dir");
  if (doc.contains("input")) c.input = get_string(doc.at("input"), "$.input", {"zero", "random"});
  if (doc.contains("sampler")) {
    c.sampler = get_string(doc.at("sampler"), "$.sampler", {"auto", "dare", "box"});
  }
  if (doc.contains("landscape")) {
    const auto& g = doc.at("landscape");
    if (!g.is_object()) throw ConfigError("$.landscape: expected an object");
    for (const auto& [key, value] : g.items()) {
      if (key != "lo" && key != "hi" && key != "points") {
        throw ConfigError("$.landscape." + key + ": unknown field");
      }
    }
    if (g.contains("lo")) c.landscape.lo = get_number(g.at("lo"), "$.landscape.lo");
    if (g.contains("hi")) c.landscape.hi = get_number(g.at("hi"), "$.landscape.hi");
    if (g.contains("points")) {
      const auto v = get_integer(g.at("points"), "$.landscape.points");
      if (v < 2) throw ConfigError("$.landscape.points: must be >= 2");
      c.landscape.points = static_cast<int>(v);
    }
    if (!(c.landscape.lo < c.landscape.hi)) throw ConfigError("$.landscape: lo must be < hi");
  }
  if (c.W) {
    const auto q = e == Example::TwoState ? 1 : e == Example::ThreeState ? 2 : c.C.rows();
    try {
      validate_weight(*c.W, q);
    } catch (const Error& err) {
      throw ConfigError(std::string("$.W: ") + err.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& err) {
    throw ConfigError(path + ": " + err.what());
  }
  return parse_config(doc);
}

/// Effective configuration, with every field spelled out.
inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["example"] = example_name(c.example);
  if (c.example == Example::TwoState || c.example == Example::ThreeState) {
    j["mu"] = c.mu;
    j["dt"] = c.dt;
  }
  if (c.example == Example::TwoState) {
    j["sigma_f"] = c.sigma_f;
    j["sigma_v"] = c.sigma_v;
  }
  if (c.example == Example::ThreeState) {
    j["a_f"] = c.a_f;
    j["p_hit"] = c.p_hit;
    j["sigma_w2"] = c.sigma_w2;
    j["cov_v_acc"] = c.cov_v_acc;
    j["cov_v_pos"] = c.cov_v_pos;
  }
  if (c.example == Example::OneDim || c.example == Example::Custom) {
    j["A"] = matrix_to_json(c.A);
    j["B"] = matrix_to_json(c.B);
    j["C"] = matrix_to_json(c.C);
    j["x0"] = vector_to_json(c.x0);
    j["L_star"] = matrix_to_json(c.L_star);
    j["S_star"] = matrix_to_json(c.S_star);
  }
  j["alpha"] = c.alpha;
  j["W"] = c.W ? matrix_to_json(*c.W) : json("identity");
  j["N_list"] = c.N_list;
  j["n_seeds"] = c.n_seeds;
  j["n_starts"] = c.n_starts;
  j["seed"] = c.seed;
  j["input"] = c.input;
  j["sampler"] = c.sampler;
  j["landscape"] = {{"lo", c.landscape.lo}, {"hi", c.landscape.hi}, {"points", c.landscape.points}};
  return j;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(c).dump())));
  return buf;
}

// =============================================================================
// Example systems and data generation
// =============================================================================

struct ExampleSystem {
  InnovationModel truth;
  std::optional<PhysicalModel> physical;
  NoiseSpec process{NoiseSpec::zero(0)};
  NoiseSpec measurement{NoiseSpec::zero(0)};
};

inline ExampleSystem example_system(const ExperimentConfig& c) {
  ExampleSystem s;
  switch (c.example) {
    case Example::OneDim:
    case Example::Custom:
      s.truth = {{c.A, c.B, c.C, c.x0}, c.L_star, c.S_star};
      break;
    case Example::TwoState: {
      auto phys = build_two_state(c.mu, c.dt);
      const double qf = c.sigma_f * c.sigma_f;
      const double rv = c.sigma_v * c.sigma_v;
      s.truth = to_innovation_form(phys.plant, qf * phys.G * phys.G.transpose(),
                                   Matrix::Constant(1, 1, rv));
      s.process = NoiseSpec::gaussian(Matrix::Constant(1, 1, qf), 0);
      s.measurement = NoiseSpec::gaussian(Matrix::Constant(1, 1, rv), 0);
      s.physical = std::move(phys);
      break;
    }
    case Example::ThreeState: {
      auto phys = build_three_state(c.mu, c.dt, c.a_f);
      Matrix R = Matrix::Zero(2, 2);
      R(0, 0) = c.cov_v_acc;
      R(1, 1) = c.cov_v_pos;
      s.process = NoiseSpec::mixture(c.p_hit, c.sigma_w2, 1, 0);
      s.truth = to_innovation_form(phys.plant, s.process.variance() * phys.G * phys.G.transpose(), R);
      s.measurement = NoiseSpec::gaussian(R, 0);
      s.physical = std::move(phys);
      break;
    }
  }
  return s;
}

inline Matrix weight(const ExperimentConfig& c, Eigen::Index q) {
  return c.W ? *c.W : Matrix::Identity(q, q);
}

/// Seed of the r-th replicate dataset.
inline std::uint64_t replicate_seed(const ExperimentConfig& c, std::uint64_t r) {
  return derive_seed(c.seed, r);
}

/// N + 1 samples of the configured example for one dataset seed.
inline Dataset generate_dataset(const ExperimentConfig& c, const ExampleSystem& sys, std::size_t N,
                                std::uint64_t dataset_seed) {
  const auto& plant = sys.truth.plant;
  const Sequence inputs = c.input == "random" ? random_inputs(plant.p(), N + 1, derive_seed(dataset_seed, 3))
                                              : zero_inputs(plant.p(), N + 1);
  if (!sys.physical) {
    return simulate_innovation(sys.truth, inputs,
                               NoiseSpec::gaussian(sys.truth.S_star, derive_seed(dataset_seed, 0)))
        .data;
  }
  NoiseSpec w = sys.process;
  NoiseSpec v = sys.measurement;
  w.seed = derive_seed(dataset_seed, 1);
  v.seed = derive_seed(dataset_seed, 2);
  return simulate_physical(sys.physical->plant, sys.physical->G, w, v, inputs);
}

inline Dataset prefix(const Dataset& d, std::size_t N) {
  if (N + 1 > d.y.size()) throw InvalidArgument("prefix: dataset too short");
  Dataset out;
  out.u.assign(d.u.begin(), d.u.begin() + static_cast<std::ptrdiff_t>(N + 1));
  out.y.assign(d.y.begin(), d.y.begin() + static_cast<std::ptrdiff_t>(N + 1));
  return out;
}

inline StartSampler start_sampler(const ExperimentConfig& c, const StateSpaceModel& plant) {
  if (c.sampler == "dare") return StartSampler::Dare;
  if (c.sampler == "box") return StartSampler::Box;
  return plant.n() * plant.q() <= 2 ? StartSampler::Box : StartSampler::Dare;
}

// =============================================================================
// Files
// =============================================================================

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Header k,u0..u{p-1},y0..y{q-1}; one row per k = 0..N, 17 significant
/// digits.
inline std::string dataset_to_csv(const Dataset& d) {
  if (d.y.empty()) throw InvalidArgument("dataset_to_csv: empty dataset");
  const auto p = d.u.front().size();
  const auto q = d.y.front().size();
  std::string out = "k";
  for (Eigen::Index i = 0; i < p; ++i) out += ",u" + std::to_string(i);
  for (Eigen::Index i = 0; i < q; ++i) out += ",y" + std::to_string(i);
  out += "\n";
  for (std::size_t k = 0; k < d.y.size(); ++k) {
    out += std::to_string(k);
    for (Eigen::Index i = 0; i < p; ++i) out += "," + format_double(d.u[k](i));
    for (Eigen::Index i = 0; i < q; ++i) out += "," + format_double(d.y[k](i));
    out += "\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && (last[-1] == ' ' || last[-1] == '\r')) --last;
  if (first == last) return false;
  const auto res = std::from_chars(first, last, v);
  return res.ec == std::errc() && res.ptr == last;
}

}  // namespace detail

/// Parses the dataset format written by dataset_to_csv. Errors name the
/// data row (k) and file line.
inline Dataset dataset_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.empty() || header[0] != "k") throw FormatError("dataset: header must start with \"k\"");
  Eigen::Index p = 0, q = 0;
  for (std::size_t i = 1; i < header.size(); ++i) {
    const auto& h = header[i];
    const bool is_u = !h.empty() && h[0] == 'u';
    const bool is_y = !h.empty() && h[0] == 'y';
    const std::string expected = is_u ? "u" + std::to_string(p) : "y" + std::to_string(q);
    if ((!is_u && !is_y) || h != expected || (is_u && q > 0)) {
      throw FormatError("dataset: unexpected header column \"" + h + "\"");
    }
    (is_u ? p : q) += 1;
  }
  if (q < 1) throw FormatError("dataset: header has no output columns");
  Dataset d;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t row = d.y.size();
    const auto where = "dataset row " + std::to_string(row) + " (line " + std::to_string(line_no) + ")";
    const auto fields = detail::split_commas(line);
    if (static_cast<Eigen::Index>(fields.size()) != 1 + p + q) {
      throw FormatError(where + ": expected " + std::to_string(1 + p + q) + " fields, got " +
                        std::to_string(fields.size()));
    }
    double k = 0.0;
    if (!detail::parse_double(fields[0], k) || k != static_cast<double>(row)) {
      throw FormatError(where + ": k must equal " + std::to_string(row));
    }
    Vector u(p), y(q);
    for (Eigen::Index i = 0; i < p + q; ++i) {
      double v = 0.0;
      if (!detail::parse_double(fields[static_cast<std::size_t>(1 + i)], v) || !std::isfinite(v)) {
        throw FormatError(where + ": field " + header[static_cast<std::size_t>(1 + i)] +
                          " is not a finite number");
      }
      (i < p ? u(i) : y(i - p)) = v;
    }
    d.u.push_back(std::move(u));
    d.y.push_back(std::move(y));
  }
  if (d.y.empty()) throw FormatError("dataset: no data rows");
  return d;
}

struct DatasetMetadata {
  StateSpaceModel plant;
  Matrix L_star;
  Matrix S_star;
  double alpha_default = 0.02;
  std::uint64_t seed = 0;
};

inline json metadata_to_json(const DatasetMetadata& m) {
  return {{"A", matrix_to_json(m.plant.A)},
          {"B", matrix_to_json(m.plant.B)},
          {"C", matrix_to_json(m.plant.C)},
          {"x0", vector_to_json(m.plant.x0)},
          {"L_star", matrix_to_json(m.L_star)},
          {"S_star", matrix_to_json(m.S_star)},
          {"alpha_default", m.alpha_default},
          {"seed", m.seed}};
}

inline DatasetMetadata metadata_from_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("$: expected an object");
    DatasetMetadata m;
    for (const char* key : {"A", "B", "C", "x0", "L_star", "S_star", "alpha_default", "seed"}) {
      if (!j.contains(key)) throw ConfigError(std::string("$.") + key + ": required");
    }
    m.plant.A = detail::get_matrix(j.at("A"), "$.A");
    m.plant.B = detail::get_matrix(j.at("B"), "$.B");
    m.plant.C = detail::get_matrix(j.at("C"), "$.C");
    m.plant.x0 = detail::get_vector(j.at("x0"), "$.x0");
    m.L_star = detail::get_matrix(j.at("L_star"), "$.L_star");
    m.S_star = detail::get_matrix(j.at("S_star"), "$.S_star");
    m.alpha_default = detail::get_positive(j.at("alpha_default"), "$.alpha_default");
    m.seed = static_cast<std::uint64_t>(detail::get_integer(j.at("seed"), "$.seed"));
    return m;
  } catch (const ConfigError& e) {
    throw FormatError(std::string("metadata: ") + e.what());
  }
}

/// <stem>.meta.json next to <stem>.csv
inline std::filesystem::path metadata_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".meta.json");
  return p;
}

// =============================================================================
// Commands
// =============================================================================

inline json report_header(const ExperimentConfig& c, const char* command) {
  return {{"command", command}, {"config_hash", config_hash(c)}, {"seed", c.seed},
          {"config", config_to_json(c)}};
}

struct SimulateOutput {
  std::filesystem::path csv;
  std::filesystem::path metadata;
};

/// Writes <example>.csv with N = max(N_list) and its metadata sidecar.
inline SimulateOutput cmd_simulate(const ExperimentConfig& c) {
  const auto sys = example_system(c);
  const std::size_t N = c.N_list.back();
  const auto data = generate_dataset(c, sys, N, replicate_seed(c, 0));
  SimulateOutput out;
  out.csv = std::filesystem::path(c.output_dir) / (std::string(example_name(c.example)) + ".csv");
  out.metadata = metadata_path(out.csv);
  write_text(out.csv, dataset_to_csv(data));
  DatasetMetadata meta{sys.truth.plant, sys.truth.L_star, sys.truth.S_star, c.alpha, c.seed};
  write_text(out.metadata, metadata_to_json(meta).dump(2) + "\n");
  return out;
}

inline json fit_to_json(const FitResult& f) {
  return {{"L_hat", matrix_to_json(f.L_hat)}, {"value", f.value}, {"grad_norm", f.grad_norm},
          {"tol_grad", f.tol_grad}, {"iterations", f.iterations}, {"converged", f.converged},
          {"constraint_slack", f.constraint_slack}, {"polished", f.polished},
          {"status", f.status}};
}

/// Index of the start with the lowest cost among converged fits (any fit
/// when none converged). Empty when every start failed.
inline std::optional<std::size_t> best_start(const MultiStartResult& ms) {
  std::optional<std::size_t> best;
  bool best_converged = false;
  for (std::size_t i = 0; i < ms.starts.size(); ++i) {
    const auto& f = ms.starts[i].fit;
    if (!f) continue;
    const bool better = !best || (f->converged && !best_converged) ||
                        (f->converged == best_converged && f->value < ms.starts[*best].fit->value);
    if (better) {
      best = i;
      best_converged = f->converged;
    }
  }
  return best;
}

struct IdentifyOutput {
  std::filesystem::path report;
  json content;
};

/// Multi-start identification on a dataset file; writes <stem>.fit.json.
inline IdentifyOutput cmd_identify(const ExperimentConfig& c, const std::filesystem::path& csv) {
  const auto sys = example_system(c);
  const auto& plant = sys.truth.plant;
  const auto data = dataset_from_csv(read_text(csv));
  validate(data, plant.p(), plant.q());
  std::optional<DatasetMetadata> meta;
  const auto meta_path = metadata_path(csv);
  if (std::filesystem::exists(meta_path)) {
    try {
      meta = metadata_from_json(json::parse(read_text(meta_path)));
    } catch (const json::parse_error& e) {
      throw FormatError("metadata " + meta_path.string() + ": " + e.what());
    }
  }
  const Matrix W = weight(c, plant.q());
  SolveOptions opts;
  opts.alpha = c.alpha;
  MultiStartOptions mso;
  mso.sampler = start_sampler(c, plant);
  mso.threads = c.threads;
  const auto ms = multi_start(plant, data, W, c.alpha, c.n_starts, derive_seed(c.seed, 100), opts, mso);
  const auto best = best_start(ms);
  if (!best) {
    throw FeasibleSampleExhausted("identify: every start failed (" + ms.starts.front().error + ")");
  }

  json report = report_header(c, "identify");
  report["dataset"] = csv.filename().string();
  report["N"] = data.N();
  const auto& fit = *ms.starts[*best].fit;
  report["best"] = fit_to_json(fit);
  report["L_hat"] = matrix_to_json(fit.L_hat);
  report["value"] = fit.value;
  report["grad_norm"] = fit.grad_norm;
  json clusters = json::array();
  for (const auto& cl : ms.clusters) {
    clusters.push_back({{"representative", matrix_to_json(cl.representative)}, {"count", cl.count()},
                        {"value", ms.starts[cl.members.front()].fit->value}});
  }
  report["clusters"] = clusters;
  report["n_clusters"] = ms.clusters.size();
  std::size_t failed = 0;
  for (const auto& s : ms.starts) failed += s.fit ? 0 : 1;
  report["failed_starts"] = failed;
  if (meta) {
    report["L_star"] = matrix_to_json(meta->L_star);
    report["distance_to_L_star"] = (fit.L_hat - meta->L_star).norm();
  }
  IdentifyOutput out;
  auto stem = csv.filename();
  stem.replace_extension(".fit.json");
  out.report = std::filesystem::path(c.output_dir) / stem;
  write_text(out.report, report.dump(2) + "\n");
  out.content = std::move(report);
  return out;
}

/// Positions of discrete local minima of a sampled curve. NaN entries break
/// the curve; a run endpoint counts when it is below its only neighbour.
inline std::vector<std::size_t> local_minima(const std::vector<double>& v) {
  std::vector<std::size_t> out;
  const auto ok = [&](std::size_t i) { return i < v.size() && std::isfinite(v[i]); };
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!ok(i)) continue;
    const bool has_left = i > 0 && ok(i - 1);
    const bool has_right = ok(i + 1);
    if (!has_left && !has_right) continue;
    if ((!has_left || v[i] < v[i - 1]) && (!has_right || v[i] < v[i + 1])) out.push_back(i);
  }
  return out;
}

struct Landscape {
  std::vector<double> L;
  std::vector<bool> stable;
  std::vector<std::vector<double>> V_N;  // per N in N_list; NaN where unstable
  std::vector<double> V_bar;
};

/// V_N on the configured 1-D gain grid for prefixes of one realization, and
/// the limit V_bar.
inline Landscape compute_landscape(const ExperimentConfig& c, std::uint64_t dataset_seed) {
  const auto sys = example_system(c);
  const auto& plant = sys.truth.plant;
  if (plant.n() != 1 || plant.q() != 1) {
    throw UnsupportedDimension("landscape: only n = q = 1 is supported");
  }
  const Matrix W = weight(c, 1);
  Landscape out;
  const auto& g = c.landscape;
  for (int i = 0; i < g.points; ++i) {
    const double L = g.lo + (g.hi - g.lo) * i / (g.points - 1);
    out.L.push_back(L);
    out.stable.push_back(std::abs(plant.A(0, 0) - L * plant.C(0, 0)) < 1.0);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < out.L.size(); ++i) {
    out.V_bar.push_back(out.stable[i]
                            ? asymptotic_eval(Matrix::Constant(1, 1, out.L[i]), sys.truth, W).V_bar
                            : nan);
  }
  const auto data = generate_dataset(c, sys, c.N_list.back(), dataset_seed);
  for (std::size_t N : c.N_list) {
    const auto prob = make_problem(plant, prefix(data, N), W);
    std::vector<double> v(out.L.size(), nan);
    for (std::size_t i = 0; i < out.L.size(); ++i) {
      if (out.stable[i]) v[i] = pem_value(Matrix::Constant(1, 1, out.L[i]), prob);
    }
    out.V_N.push_back(std::move(v));
  }
  return out;
}

struct LandscapeOutput {
  std::filesystem::path table;
  std::filesystem::path summary;
  json content;
};

/// Writes landscape.csv (L, stable, V_N_<N>..., V_bar) and landscape.json
/// with the local minimizers of each curve.
inline LandscapeOutput cmd_landscape(const ExperimentConfig& c) {
  const auto land = compute_landscape(c, replicate_seed(c, 0));
  std::string csv = "L,stable";
  for (std::size_t N : c.N_list) csv += ",V_N_" + std::to_string(N);
  csv += ",V_bar\n";
  const auto cell = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("nan"); };
  for (std::size_t i = 0; i < land.L.size(); ++i) {
    csv += format_double(land.L[i]) + (land.stable[i] ? ",1" : ",0");
    for (const auto& curve : land.V_N) csv += "," + cell(curve[i]);
    csv += "," + cell(land.V_bar[i]) + "\n";
  }
  LandscapeOutput out;
  out.table = std::filesystem::path(c.output_dir) / "landscape.csv";
  out.summary = std::filesystem::path(c.output_dir) / "landscape.json";
  write_text(out.table, csv);
  json report = report_header(c, "landscape");
  json curves = json::array();
  for (std::size_t k = 0; k < c.N_list.size(); ++k) {
    json mins = json::array();
    for (auto i : local_minima(land.V_N[k])) mins.push_back(land.L[i]);
    curves.push_back({{"N", c.N_list[k]}, {"local_minimizers", mins}});
  }
  report["curves"] = curves;
  json bar = json::array();
  for (auto i : local_minima(land.V_bar)) bar.push_back(land.L[i]);
  report["V_bar_minimizers"] = bar;
  write_text(out.summary, report.dump(2) + "\n");
  out.content = std::move(report);
  return out;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("loglog_slope: need >= 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median: empty input");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Number of adjacent pairs where the sequence goes up.
inline int count_increases(const std::vector<double>& v) {
  int n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += v[i] > v[i - 1] ? 1 : 0;
  return n;
}

struct ConsistencyRow {
  std::size_t N = 0;
  int seed_index = 0;
  double error = 0.0;
  bool converged = false;
};

struct ConsistencyStudy {
  std::vector<ConsistencyRow> rows;
  std::vector<double> medians;  // per N in N_list
  double slope = 0.0;
  int increases = 0;
};

/// For every seed and N, fits L_hat on the length-N prefix of that seed's
/// realization (multi-start, best converged fit) and records ||L_hat - L*||_F.
inline ConsistencyStudy run_consistency(const ExperimentConfig& c) {
  const auto sys = example_system(c);
  const auto& plant = sys.truth.plant;
  const Matrix W = weight(c, plant.q());
  SolveOptions opts;
  opts.alpha = c.alpha;
  MultiStartOptions mso;
  mso.sampler = start_sampler(c, plant);
  ConsistencyStudy out;
  const std::size_t cells = c.N_list.size() * static_cast<std::size_t>(c.n_seeds);
  out.rows.resize(cells);
  std::vector<Dataset> datasets(static_cast<std::size_t>(c.n_seeds));
  for (int s = 0; s < c.n_seeds; ++s) {
    datasets[static_cast<std::size_t>(s)] = generate_dataset(c, sys, c.N_list.back(), replicate_seed(c, s));
  }
  parallel_for(cells, c.threads, [&](std::size_t cell) {
    const auto s = static_cast<int>(cell / c.N_list.size());
    const std::size_t N = c.N_list[cell % c.N_list.size()];
    const auto prob = make_problem(plant, prefix(datasets[static_cast<std::size_t>(s)], N), W);
    const auto ms = multi_start(prob, c.n_starts, derive_seed(replicate_seed(c, s), 100), opts, mso);
    const auto best = best_start(ms);
    if (!best) throw FeasibleSampleExhausted("consistency: every start failed");
    const auto& fit = *ms.starts[*best].fit;
    out.rows[cell] = {N, s, (fit.L_hat - sys.truth.L_star).norm(), fit.converged};
  });
  std::vector<double> Ns;
  for (std::size_t k = 0; k < c.N_list.size(); ++k) {
    std::vector<double> errs;
    for (const auto& r : out.rows) {
      if (r.N == c.N_list[k]) errs.push_back(r.error);
    }
    out.medians.push_back(median(errs));
    Ns.push_back(static_cast<double>(c.N_list[k]));
  }
  out.slope = c.N_list.size() >= 2 ? loglog_slope(Ns, out.medians)
                                   : std::numeric_limits<double>::quiet_NaN();
  out.increases = count_increases(out.medians);
  return out;
}

struct ConsistencyOutput {
  std::filesystem::path table;
  std::filesystem::path summary;
  json content;
};

/// Writes consistency.csv (N, seed, error) and consistency.json (medians,
/// log-log slope).
inline ConsistencyOutput cmd_consistency(const ExperimentConfig& c) {
  const auto study = run_consistency(c);
  std::string csv = "N,seed,error,converged\n";
  for (const auto& r : study.rows) {
    csv += std::to_string(r.N) + "," + std::to_string(r.seed_index) + "," + format_double(r.error) +
           (r.converged ? ",1\n" : ",0\n");
  }
  ConsistencyOutput out;
  out.table = std::filesystem::path(c.output_dir) / "consistency.csv";
  out.summary = std::filesystem::path(c.output_dir) / "consistency.json";
  write_text(out.table, csv);
  json report = report_header(c, "consistency");
  report["N_list"] = c.N_list;
  report["median_error"] = study.medians;
  report["slope"] = std::isfinite(study.slope) ? json(study.slope) : json(nullptr);
  report["median_increases"] = study.increases;
  write_text(out.summary, report.dump(2) + "\n");
  out.content = std::move(report);
  return out;
}

// =============================================================================
// Self-check
// =============================================================================

struct CheckHooks {
  /// Scales the analytic V_N gradient before comparison (negative control).
  bool corrupt_gradient = false;
};

struct PropertyResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

namespace detail {

template <typename F>
Matrix central_difference(F&& f, const Matrix& X) {
  Matrix G(X.rows(), X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(X(i, j)));
      Matrix Xp = X, Xm = X;
      Xp(i, j) += h;
      Xm(i, j) -= h;
      G(i, j) = (f(Xp) - f(Xm)) / (2.0 * h);
    }
  }
  return G;
}

inline double rel_err(const Matrix& got, const Matrix& ref) {
  return (got - ref).norm() / std::max({ref.norm(), got.norm(), 1e-12});
}

}  // namespace detail

struct CheckReport {
  std::vector<PropertyResult> properties;
  std::vector<ConvergenceRow> convergence;
  bool all_passed() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const PropertyResult& p) { return p.passed; });
  }
};

/// Runs the property suite on the configured example.
inline CheckReport run_checks(const ExperimentConfig& c, const CheckHooks& hooks = {}) {
  const auto sys = example_system(c);
  const auto& model = sys.truth;
  const auto& plant = model.plant;
  const auto n = plant.n();
  const Matrix W = weight(c, plant.q());
  const auto sampler = start_sampler(c, plant);
  std::vector<Matrix> gains;
  for (std::size_t i = 0; i < 20; ++i) gains.push_back(draw_start(plant, c.alpha, c.seed, i, sampler));

  CheckReport rep;
  const auto add = [&](std::string name, double measured, double threshold, std::string detail = {}) {
    rep.properties.push_back({std::move(name), measured <= threshold, measured, threshold, std::move(detail)});
  };

  {
    const auto data = generate_dataset(c, sys, 500, replicate_seed(c, 0));
    const auto prob = make_problem(plant, data, W);
    double worst = 0.0;
    for (const auto& L : gains) {
      Matrix grad = pem_eval(L, prob).gradient;
      if (hooks.corrupt_gradient) grad *= 1.01;
      const Matrix fd = detail::central_difference([&](const Matrix& X) { return pem_value(X, prob); }, L);
      worst = std::max(worst, detail::rel_err(grad, fd));
    }
    add("pem_gradient_fd", worst, 1e-5, "max relative error over 20 feasible gains");
  }
  {
    double worst = 0.0;
    for (const auto& L : gains) {
      const auto ev = constraint_value_grad(L, plant, c.alpha);
      const Matrix fd = detail::central_difference(
          [&](const Matrix& X) { return constraint_value_grad(X, plant, c.alpha).value; }, L);
      worst = std::max(worst, detail::rel_err(ev.grad, fd));
    }
    add("constraint_gradient_fd", worst, 1e-5, "max relative error over 20 feasible gains");
  }
  {
    double worst = 0.0;
    for (const auto& L : gains) {
      const auto ev = asymptotic_eval(L, model, W);
      const Matrix fd = detail::central_difference(
          [&](const Matrix& X) { return asymptotic_eval(X, model, W).V_bar; }, L);
      worst = std::max(worst, detail::rel_err(ev.grad_V_bar, fd));
    }
    add("asymptotic_gradient_fd", worst, 1e-5, "max relative error over 20 feasible gains");
  }
  {
    // Lyapunov solve against the truncated series on random stable 3x3.
    std::mt19937_64 rng(derive_seed(c.seed, 7));
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      Matrix M = standard_normal_matrix(3, 3, rng);
      M *= 0.8 / std::max(spectral_radius(M), 1e-12);
      const Matrix G = standard_normal_matrix(3, 3, rng);
      const Matrix Q = G * G.transpose();
      const Matrix P = solve_dlyap(M, Q);
      Matrix series = Matrix::Zero(3, 3), Mi = Matrix::Identity(3, 3);
      for (int i = 0; i < 400; ++i) {
        series += Mi * Q * Mi.transpose();
        Mi = Mi * M;
      }
      worst = std::max(worst, (P - series).norm());
    }
    add("lyapunov_series", worst, 1e-8, "max ||P - series||_F on 10 random stable 3x3");
  }
  {
    double residual = 0.0;
    const Matrix one = Matrix::Constant(1, 1, 1.0);
    const auto golden = solve_dare(one, one, one, one);
    residual = std::abs(golden.Sigma(0, 0) - (1.0 + std::sqrt(5.0)) / 2.0);
    if (sys.physical) {
      const auto& pp = sys.physical->plant;
      const Matrix Q = sys.process.variance() * sys.physical->G * sys.physical->G.transpose();
      const Matrix R = sys.measurement.cov;
      const auto sol = solve_dare(pp.A, pp.C, Q, R);
      residual = std::max(residual, dare_residual(pp.A, pp.C, Q, R, sol.Sigma));
    }
    add("dare_residual", residual, 1e-9, "golden-ratio case and the example's filter DARE");
  }
  {
    const auto b = stability_bounds(c.alpha);
    int violations = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      const Matrix L = draw_start(plant, c.alpha, derive_seed(c.seed, 8), i, sampler);
      violations += verify_uniform_stability(L, plant, b.gamma, b.lambda, 500) ? 0 : 1;
    }
    add("uniform_stability", violations, 0.0, "violations of ||(A-LC)^i|| <= gamma lambda^i, 100 gains");
  }
  {
    std::vector<Matrix> grid(gains.begin(), gains.begin() + 10);
    grid.push_back(model.L_star);
    rep.convergence = empirical_uniform_convergence(model, W, grid, {100, 1000, 10000},
                                                    std::min(c.n_seeds, 5), derive_seed(c.seed, 9));
    std::vector<double> v, g;
    for (const auto& r : rep.convergence) {
      v.push_back(r.sup_value_dev);
      g.push_back(r.sup_grad_dev);
    }
    add("uniform_convergence", count_increases(v) + count_increases(g), 1.0,
        "increases of the seed-averaged sup deviations across N");
  }
  (void)n;
  return rep;
}

struct CheckOutput {
  std::filesystem::path report;
  json content;
  bool all_passed = false;
};

inline CheckOutput cmd_check(const ExperimentConfig& c, const CheckHooks& hooks = {}) {
  const auto rep = run_checks(c, hooks);
  json report = report_header(c, "check");
  json props = json::array();
  for (const auto& p : rep.properties) {
    props.push_back({{"name", p.name}, {"passed", p.passed}, {"measured", p.measured},
                     {"threshold", p.threshold}, {"detail", p.detail}});
  }
  report["properties"] = props;
  json table = json::array();
  for (const auto& r : rep.convergence) {
    table.push_back({{"N", r.N}, {"sup_value_dev", r.sup_value_dev}, {"sup_grad_dev", r.sup_grad_dev}});
  }
  report["uniform_convergence"] = table;
  report["all_passed"] = rep.all_passed();
  CheckOutput out;
  out.report = std::filesystem::path(c.output_dir) / "check.json";
  write_text(out.report, report.dump(2) + "\n");
  out.content = std::move(report);
  out.all_passed = rep.all_passed();
  return out;
}

}  // namespace kalmanid
