#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpalps/errors.hpp"
#include "gpalps/vi.hpp"

namespace gpalps {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int cols() const { return static_cast<int>(header.size()); }
  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd M(rows.size(), header.size());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < header.size(); ++c) M(r, c) = rows[r][c];
    return M;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  out.push_back(cell);
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_csv: cannot open " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError("read_csv: empty file " + path);
  t.header = split_csv_line(line);
  int rowno = 1;
  while (std::getline(in, line)) {
    ++rowno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) {
      std::ostringstream os;
      os << "read_csv: " << path << " row " << rowno << " has " << cells.size()
         << " columns, expected " << t.header.size();
      throw IoError(os.str());
    }
    std::vector<double> vals(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        vals[c] = std::stod(cells[c], &used);
        if (used != cells[c].size()) throw std::invalid_argument("trailing junk");
      } catch (const std::exception&) {
        std::ostringstream os;
        os << "read_csv: " << path << " row " << rowno << " column " << (c + 1)
           << " ('" << t.header[c] << "'): non-numeric cell '" << cells[c] << "'";
        throw IoError(os.str());
      }
    }
    t.rows.push_back(std::move(vals));
  }
  return t;
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const Eigen::MatrixXd& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("write_csv: cannot open " + path);
  for (std::size_t c = 0; c < header.size(); ++c)
    out << (c ? "," : "") << header[c];
  out << "\n";
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c)
      out << (c ? "," : "") << format_double(rows(r, c));
    out << "\n";
  }
  if (!out) throw IoError("write_csv: write failure on " + path);
}

// ---------------------------------------------------------------------------
// JSON helpers for matrices: {"shape": [r, c], "data": row-major}.

inline ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
  ordered_json j;
  j["shape"] = {m.rows(), m.cols()};
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  j["data"] = data;
  return j;
}

inline ordered_json vector_to_json(const Eigen::VectorXd& v) {
  ordered_json j;
  j["shape"] = {v.size()};
  std::vector<double> data(v.data(), v.data() + v.size());
  j["data"] = data;
  return j;
}

inline Eigen::MatrixXd matrix_from_json(const ordered_json& j) {
  const auto shape = j.at("shape");
  if (shape.size() != 2) throw IoError("matrix_from_json: expected 2-d shape");
  const Eigen::Index r = shape[0].get<Eigen::Index>();
  const Eigen::Index c = shape[1].get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != r * c)
    throw IoError("matrix_from_json: data length does not match shape");
  Eigen::MatrixXd m(r, c);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index jj = 0; jj < c; ++jj) m(i, jj) = data[k++].get<double>();
  return m;
}

inline Eigen::VectorXd vector_from_json(const ordered_json& j) {
  const auto shape = j.at("shape");
  if (shape.size() != 1) throw IoError("vector_from_json: expected 1-d shape");
  const Eigen::Index n = shape[0].get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != n)
    throw IoError("vector_from_json: data length does not match shape");
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = data[i].get<double>();
  return v;
}

inline void write_json(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("write_json: cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write_json: write failure on " + path);
}

inline ordered_json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_json: cannot open " + path);
  try {
    return ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw IoError("read_json: " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: every VariationalState array plus config and the clock.

inline ordered_json vi_config_to_json(const ViConfig& c) {
  ordered_json j;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["mc_samples"] = c.mc_samples;
  j["seed"] = c.seed;
  j["num_inducing"] = c.num_inducing;
  j["prior_temperature"] = c.prior_temperature;
  j["inducing_jitter"] = c.inducing_jitter;
  j["learn_noise"] = c.learn_noise;
  j["learn_inducing"] = c.learn_inducing;
  j["noise_init"] = c.noise_init;
  j["noise_warmup_frac"] = c.noise_warmup_frac;
  return j;
}

inline ViConfig vi_config_from_json(const ordered_json& j) {
  ViConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.seed = j.value("seed", c.seed);
  c.num_inducing = j.value("num_inducing", c.num_inducing);
  c.prior_temperature = j.value("prior_temperature", c.prior_temperature);
  c.inducing_jitter = j.value("inducing_jitter", c.inducing_jitter);
  c.learn_noise = j.value("learn_noise", c.learn_noise);
  c.learn_inducing = j.value("learn_inducing", c.learn_inducing);
  c.noise_init = j.value("noise_init", c.noise_init);
  c.noise_warmup_frac = j.value("noise_warmup_frac", c.noise_warmup_frac);
  return c;
}

inline void save_checkpoint(const std::string& path, const VariationalState& st,
                            const ViConfig& cfg) {
  ordered_json j;
  j["format"] = "gpalps-checkpoint-v1";
  j["iteration"] = st.iteration;
  j["total_iterations"] = st.total_iterations;
  j["config"] = vi_config_to_json(cfg);
  j["tz"] = vector_to_json(st.tz);
  ordered_json mz = ordered_json::array();
  ordered_json lraw = ordered_json::array();
  for (int k = 0; k < st.num_latents(); ++k) {
    mz.push_back(vector_to_json(st.mz[k]));
    lraw.push_back(matrix_to_json(st.L_raw[k]));
  }
  j["mz"] = mz;
  j["L_raw"] = lraw;
  j["mH"] = matrix_to_json(st.mH);
  j["log_sH"] = matrix_to_json(st.log_sH);
  j["rho_logits"] = vector_to_json(st.rho_logits);
  j["log_sigma2"] = vector_to_json(st.log_sigma2);
  write_json(path, j);
}

inline std::pair<VariationalState, ViConfig> load_checkpoint(const std::string& path) {
  const ordered_json j = read_json(path);
  if (j.value("format", std::string()) != "gpalps-checkpoint-v1")
    throw IoError("load_checkpoint: " + path + " is not a gpalps checkpoint");
  VariationalState st;
  st.iteration = j.at("iteration").get<int>();
  st.total_iterations = j.at("total_iterations").get<int>();
  st.tz = vector_from_json(j.at("tz"));
  for (const auto& v : j.at("mz")) st.mz.push_back(vector_from_json(v));
  for (const auto& v : j.at("L_raw")) st.L_raw.push_back(matrix_from_json(v));
  st.mH = matrix_from_json(j.at("mH"));
  st.log_sH = matrix_from_json(j.at("log_sH"));
  st.rho_logits = vector_from_json(j.at("rho_logits"));
  st.log_sigma2 = vector_from_json(j.at("log_sigma2"));
  st.validate();
  return {std::move(st), vi_config_from_json(j.at("config"))};
}

// ---------------------------------------------------------------------------
// Kernel and model specs in config files.

inline ordered_json kernel_to_json(const KernelSpec& k) {
  ordered_json j;
  j["kind"] = k.name();
  switch (k.kind) {
    case KernelKind::Rbf:
      j["lengthscale"] = k.lengthscale;
      j["variance"] = k.variance;
      break;
    case KernelKind::ExpSineSquared:
      j["period"] = k.period_or_frequency;
      j["lengthscale"] = k.lengthscale;
      j["variance"] = k.variance;
      break;
    case KernelKind::Cosine:
      j["frequency"] = k.period_or_frequency;
      j["variance"] = k.variance;
      break;
    case KernelKind::Product: {
      ordered_json fs = ordered_json::array();
      for (const auto& f : k.factors) fs.push_back(kernel_to_json(f));
      j["factors"] = fs;
      break;
    }
  }
  return j;
}

inline KernelSpec kernel_from_json(const ordered_json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "rbf")
    return KernelSpec::rbf(j.value("lengthscale", 1.0), j.value("variance", 1.0));
  if (kind == "exp-sine-squared")
    return KernelSpec::exp_sine_squared(j.at("period").get<double>(),
                                        j.value("lengthscale", 1.0), j.value("variance", 1.0));
  if (kind == "cosine")
    return KernelSpec::cosine(j.at("frequency").get<double>(), j.value("variance", 1.0));
  if (kind == "product") {
    std::vector<KernelSpec> fs;
    for (const auto& f : j.at("factors")) fs.push_back(kernel_from_json(f));
    return KernelSpec::product(std::move(fs));
  }
  throw ConfigError("kernel_from_json: unknown kind '" + kind + "'");
}

inline ordered_json model_spec_to_json(const ModelSpec& spec) {
  ordered_json j;
  j["m"] = spec.m;
  j["p"] = spec.p;
  ordered_json ks = ordered_json::array();
  for (const auto& k : spec.kernels) ks.push_back(kernel_to_json(k));
  j["kernels"] = ks;
  j["theta"] = vector_to_json(spec.theta);
  j["s"] = matrix_to_json(spec.s);
  j["sigma2"] = vector_to_json(spec.sigma2);
  if (!spec.latent_input_columns.empty()) j["latent_input_columns"] = spec.latent_input_columns;
  return j;
}

inline ModelSpec model_spec_from_json(const ordered_json& j) {
  ModelSpec spec;
  for (const auto& k : j.at("kernels")) spec.kernels.push_back(kernel_from_json(k));
  spec.m = static_cast<int>(spec.kernels.size());
  spec.p = j.value("p", 1);
  auto scalar_or_vector = [](const ordered_json& v, int n, double fallback) {
    if (v.is_null()) return Eigen::VectorXd(Eigen::VectorXd::Constant(n, fallback));
    if (v.is_number()) return Eigen::VectorXd(Eigen::VectorXd::Constant(n, v.get<double>()));
    return vector_from_json(v);
  };
  spec.theta = scalar_or_vector(j.value("theta", ordered_json()), spec.m, 0.5);
  spec.sigma2 = scalar_or_vector(j.value("sigma2", ordered_json()), spec.p, 0.1);
  const ordered_json sj = j.value("s", ordered_json());
  if (sj.is_null())
    spec.s = Eigen::MatrixXd::Constant(spec.p, spec.m, 1.0);
  else if (sj.is_number())
    spec.s = Eigen::MatrixXd::Constant(spec.p, spec.m, sj.get<double>());
  else
    spec.s = matrix_from_json(sj);
  if (j.contains("latent_input_columns"))
    spec.latent_input_columns = j.at("latent_input_columns").get<std::vector<int>>();
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Experiment reports. Everything except "metadata" is deterministic for a
// fixed config and seed.

struct ExperimentReport {
  std::string command;
  std::uint64_t seed = 0;
  ordered_json config;
  ordered_json results;
  ordered_json metadata;

  ordered_json to_json() const {
    ordered_json j;
    j["format"] = "gpalps-report-v1";
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    j["results"] = results;
    j["metadata"] = metadata;
    return j;
  }

  static ExperimentReport from_json(const ordered_json& j) {
    if (j.value("format", std::string()) != "gpalps-report-v1")
      throw IoError("ExperimentReport: missing format tag");
    ExperimentReport r;
    r.command = j.at("command").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.value("config", ordered_json::object());
    r.results = j.value("results", ordered_json::object());
    r.metadata = j.value("metadata", ordered_json::object());
    return r;
  }
};

inline void save_report(const std::string& path, const ExperimentReport& r) {
  write_json(path, r.to_json());
}

inline ExperimentReport load_report(const std::string& path) {
  return ExperimentReport::from_json(read_json(path));
}

}  // namespace gpalps
