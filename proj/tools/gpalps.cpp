// gpalps: configure, run, and report the GP-ALPS experiments.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <string>

#include "gpalps/experiments.hpp"
#include "gpalps/io.hpp"

namespace fs = std::filesystem;
using namespace gpalps;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "runs/out";
  std::string data_path;
  std::uint64_t seed = 0;
  int iterations = -1;
  int batch_size = -1;
  int inducing = -1;
  int mc_samples = -1;
  double ridge_weight = -1.0;
  double noise_std = -1.0;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* config_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_data = false) {
  o.config_opt = cmd->add_option("--config", o.config_path, "JSON config file");
  o.seed_opt = cmd->add_option("--seed", o.seed, "RNG seed (required here or in the config)");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--iterations", o.iterations, "VI iterations");
  cmd->add_option("--batch-size", o.batch_size, "minibatch size (0 = full batch)");
  cmd->add_option("--inducing", o.inducing, "number of inducing points");
  cmd->add_option("--mc-samples", o.mc_samples, "MC samples per ELBO step");
  cmd->add_option("--ridge-weight", o.ridge_weight, "ridge weight for KRR baselines");
  cmd->add_option("--noise-std", o.noise_std, "generator noise standard deviation");
  if (with_data) cmd->add_option("--data", o.data_path, "input CSV path");
}

ordered_json load_config(const CommonOpts& o) {
  if (o.config_path.empty()) return ordered_json::object();
  return read_json(o.config_path);
}

std::uint64_t resolve_seed(const CommonOpts& o, const ordered_json& cfg) {
  if (o.seed_opt && o.seed_opt->count() > 0) return o.seed;
  if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
  throw ConfigError("a seed is required (--seed or \"seed\" in the config file)");
}

ViConfig overlay_vi(ViConfig base, const ordered_json& cfg, const CommonOpts& o) {
  if (cfg.contains("vi")) base = vi_config_from_json(cfg.at("vi"));
  if (o.iterations >= 0) base.iterations = o.iterations;
  if (o.batch_size >= 0) base.batch_size = o.batch_size;
  if (o.inducing >= 0) base.num_inducing = o.inducing;
  if (o.mc_samples >= 0) base.mc_samples = o.mc_samples;
  return base;
}

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

ordered_json run_metadata(const std::string& started) {
  ordered_json m;
  m["started"] = started;
  m["finished"] = iso_now();
  return m;
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

void write_elbo_trace(const std::string& path, const std::vector<ElboBreakdown>& trace) {
  Eigen::MatrixXd rows(trace.size(), 6);
  for (std::size_t i = 0; i < trace.size(); ++i)
    rows.row(i) << static_cast<double>(i), trace[i].ell, trace[i].kl_z, trace[i].kl_h,
        trace[i].kl_b, trace[i].total;
  write_csv(path, {"iteration", "ell", "kl_z", "kl_h", "kl_b", "total"}, rows);
}

// Plot-ready predictions: t, then observed / mean / +-2 sigma per output.
void write_predictions(const std::string& path, const Dataset& data, const Predictive& pred) {
  const Eigen::Index n = data.n();
  const int p = static_cast<int>(data.Y.rows());
  std::vector<std::string> header = {"t"};
  for (int i = 0; i < p; ++i) {
    header.push_back("y" + std::to_string(i));
    header.push_back("y" + std::to_string(i) + "_mean");
    header.push_back("y" + std::to_string(i) + "_lo");
    header.push_back("y" + std::to_string(i) + "_hi");
  }
  Eigen::MatrixXd rows(n, 1 + 4 * p);
  for (Eigen::Index c = 0; c < n; ++c) {
    rows(c, 0) = data.inputs(c, 0);
    for (int i = 0; i < p; ++i) {
      const double sd = std::sqrt(pred.variance(i, c));
      rows(c, 1 + 4 * i) = data.Y(i, c);
      rows(c, 2 + 4 * i) = pred.mean(i, c);
      rows(c, 3 + 4 * i) = pred.mean(i, c) - 2.0 * sd;
      rows(c, 4 + 4 * i) = pred.mean(i, c) + 2.0 * sd;
    }
  }
  write_csv(path, header, rows);
}

void write_chain_trace(const std::string& path, const std::vector<Eigen::VectorXd>& rows_b,
                       const std::vector<double>& log_joints) {
  const int m = rows_b.empty() ? 0 : static_cast<int>(rows_b[0].size());
  std::vector<std::string> header = {"sample"};
  for (int j = 0; j < m; ++j) header.push_back("b" + std::to_string(j));
  header.push_back("log_joint");
  Eigen::MatrixXd rows(rows_b.size(), m + 2);
  for (std::size_t r = 0; r < rows_b.size(); ++r) {
    rows(r, 0) = static_cast<double>(r);
    for (int j = 0; j < m; ++j) rows(r, 1 + j) = rows_b[r][j];
    rows(r, m + 1) = log_joints[r];
  }
  write_csv(path, header, rows);
}

Predictive vi_predictive(const VariationalState& state, const ModelSpec& spec,
                         const Dataset& data, const ViConfig& vi, int samples = 256) {
  Rng prng(hash_combine(vi.seed, 0x7072ULL));
  ModelSpec pred_spec = spec;
  pred_spec.sigma2 = state.sigma2();
  auto sampler = vi_posterior_sampler(state, pred_spec, data.inputs, prng, vi.inducing_jitter);
  return predict(sampler, data.n(), samples, pred_spec.sigma2);
}

// ---------------------------------------------------------------------------

int cmd_square_wave(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  auto exp = SquareWaveExperiment::defaults(seed);
  exp.wave.frequency = cfg.value("frequency", exp.wave.frequency);
  exp.wave.n = cfg.value("n", exp.wave.n);
  exp.wave.t_end = cfg.value("t_end", exp.wave.t_end);
  exp.wave.noise_std = cfg.value("noise_std", exp.wave.noise_std);
  exp.m = cfg.value("m", exp.m);
  exp.theta = cfg.value("theta", exp.theta);
  exp.vi = overlay_vi(exp.vi, cfg, o);
  exp.vi.seed = seed;
  exp.wave.seed = seed;
  if (o.noise_std >= 0.0) exp.wave.noise_std = o.noise_std;

  const Dataset data = gen_square_wave(exp.wave);
  const ModelSpec spec = square_wave_model(exp.wave.frequency, exp.m, exp.theta);
  Rng rng(hash_combine(seed, 0x696eULL));
  VariationalState st = init_state(spec, data, exp.vi, rng);
  auto res = fit(std::move(st), spec, data, exp.vi);
  const Eigen::VectorXd rho = activation_probabilities(res.state);

  fs::create_directories(o.out_dir);
  write_elbo_trace(o.out_dir + "/elbo_trace.csv", res.trace);
  write_predictions(o.out_dir + "/predictions.csv", data,
                    vi_predictive(res.state, spec, data, exp.vi));
  save_checkpoint(o.out_dir + "/checkpoint.json", res.state, exp.vi);

  ExperimentReport rep;
  rep.command = "square-wave";
  rep.seed = seed;
  rep.config["frequency"] = exp.wave.frequency;
  rep.config["n"] = exp.wave.n;
  rep.config["t_end"] = exp.wave.t_end;
  rep.config["noise_std"] = exp.wave.noise_std;
  rep.config["m"] = exp.m;
  rep.config["theta"] = exp.theta;
  rep.config["vi"] = vi_config_to_json(exp.vi);
  rep.results["activation_probabilities"] = to_std(rho);
  rep.results["sigma2"] = to_std(res.state.sigma2());
  rep.results["final_elbo"] = res.trace.back().total;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("square-wave seed=%llu: rho =", static_cast<unsigned long long>(seed));
  for (int j = 0; j < rho.size(); ++j) std::printf(" %.3f", rho[j]);
  std::printf(" -> %s/report.json\n", o.out_dir.c_str());
  return 0;
}

int cmd_mixture(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  auto exp = MixtureExperiment::defaults(seed);
  exp.mix.n = cfg.value("n", exp.mix.n);
  exp.mix.t_end = cfg.value("t_end", exp.mix.t_end);
  exp.mix.noise_std = cfg.value("noise_std", exp.mix.noise_std);
  exp.theta = cfg.value("theta", exp.theta);
  exp.vi = overlay_vi(exp.vi, cfg, o);
  exp.vi.seed = seed;
  exp.mix.seed = seed;
  if (o.noise_std >= 0.0) exp.mix.noise_std = o.noise_std;

  const MixtureData mix = gen_periodic_mixture(exp.mix);
  const std::vector<double> periods = mixture_candidate_periods();
  const ModelSpec spec = mixture_model(periods, exp.mix.p, exp.theta);
  Rng rng(hash_combine(seed, 0x696eULL));
  VariationalState st = init_state(spec, mix.data, exp.vi, rng);
  auto res = fit(std::move(st), spec, mix.data, exp.vi);
  const Eigen::VectorXd rho = activation_probabilities(res.state);

  fs::create_directories(o.out_dir);
  write_elbo_trace(o.out_dir + "/elbo_trace.csv", res.trace);
  write_predictions(o.out_dir + "/predictions.csv", mix.data,
                    vi_predictive(res.state, spec, mix.data, exp.vi));
  save_checkpoint(o.out_dir + "/checkpoint.json", res.state, exp.vi);

  ExperimentReport rep;
  rep.command = "mixture";
  rep.seed = seed;
  rep.config["periods"] = periods;
  rep.config["n"] = exp.mix.n;
  rep.config["t_end"] = exp.mix.t_end;
  rep.config["noise_std"] = exp.mix.noise_std;
  rep.config["theta"] = exp.theta;
  rep.config["vi"] = vi_config_to_json(exp.vi);
  rep.results["activation_probabilities"] = to_std(rho);
  rep.results["sigma2"] = to_std(res.state.sigma2());
  Eigen::VectorXd mH_abs(spec.m), sH_mean(spec.m);
  for (int j = 0; j < spec.m; ++j) {
    mH_abs[j] = res.state.mH.col(j).cwiseAbs().mean();
    sH_mean[j] = res.state.log_sH.col(j).array().exp().mean();
  }
  rep.results["mixing_mean_abs_by_latent"] = to_std(mH_abs);
  rep.results["mixing_var_mean_by_latent"] = to_std(sH_mean);
  rep.results["final_elbo"] = res.trace.back().total;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("mixture seed=%llu: rho =", static_cast<unsigned long long>(seed));
  for (int j = 0; j < rho.size(); ++j) std::printf(" %.3f", rho[j]);
  std::printf(" -> %s/report.json\n", o.out_dir.c_str());
  return 0;
}

int cmd_boston(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  auto exp = BostonExperiment::defaults(seed);
  exp.csv_path = cfg.value("data", exp.csv_path);
  if (!o.data_path.empty()) exp.csv_path = o.data_path;
  exp.split_fraction = cfg.value("split_fraction", exp.split_fraction);
  exp.theta = cfg.value("theta", exp.theta);
  exp.ridge_weight = cfg.value("ridge_weight", exp.ridge_weight);
  if (o.ridge_weight >= 0.0) exp.ridge_weight = o.ridge_weight;
  exp.vi = overlay_vi(exp.vi, cfg, o);
  exp.vi.seed = seed;

  TabularDataset data = load_tabular(exp.csv_path, "MEDV", exp.split_fraction, seed);
  auto sel = gp_alps_select(data, exp.vi, exp.theta);
  const double ridge = exp.effective_ridge(static_cast<int>(data.train_idx.size()));
  const double rmse_selected = krr_fit_predict(data, sel.mask, ridge);
  const std::uint32_t full = (1u << data.d()) - 1;
  const double rmse_full = krr_fit_predict(data, full, ridge);

  fs::create_directories(o.out_dir);
  write_elbo_trace(o.out_dir + "/elbo_trace.csv", sel.trace);
  save_checkpoint(o.out_dir + "/checkpoint.json", sel.state, exp.vi);

  ExperimentReport rep;
  rep.command = "boston";
  rep.seed = seed;
  rep.config["data"] = exp.csv_path;
  rep.config["split_fraction"] = exp.split_fraction;
  rep.config["ridge_weight"] = ridge;
  rep.config["theta"] = exp.theta;
  rep.config["vi"] = vi_config_to_json(exp.vi);
  rep.results["activation_probabilities"] = to_std(sel.rho);
  rep.results["mask_bits"] = sel.mask;
  ordered_json names = ordered_json::array();
  for (int f = 0; f < data.d(); ++f)
    if (sel.mask & (1u << f)) names.push_back(data.feature_names[f]);
  rep.results["selected_features"] = names;
  rep.results["rmse_selected"] = rmse_selected;
  rep.results["rmse_full"] = rmse_full;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("boston seed=%llu: selected %s (rmse %.3f vs full %.3f) -> %s/report.json\n",
              static_cast<unsigned long long>(seed), names.dump().c_str(), rmse_selected,
              rmse_full, o.out_dir.c_str());
  return 0;
}

int cmd_enumerate(const CommonOpts& o, std::uint32_t query_mask, const std::string& mask_from) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  auto exp = BostonExperiment::defaults(seed);
  exp.csv_path = cfg.value("data", exp.csv_path);
  if (!o.data_path.empty()) exp.csv_path = o.data_path;
  exp.split_fraction = cfg.value("split_fraction", exp.split_fraction);
  exp.ridge_weight = cfg.value("ridge_weight", exp.ridge_weight);
  if (o.ridge_weight >= 0.0) exp.ridge_weight = o.ridge_weight;

  if (!mask_from.empty()) {
    const ExperimentReport prev = load_report(mask_from);
    query_mask = prev.results.at("mask_bits").get<std::uint32_t>();
  }
  TabularDataset data = load_tabular(exp.csv_path, "MEDV", exp.split_fraction, seed);
  const double ridge = exp.effective_ridge(static_cast<int>(data.train_idx.size()));
  auto bench = enumerate_subsets(data, ridge, query_mask);

  fs::create_directories(o.out_dir);
  write_json(o.out_dir + "/benchmark.json", bench.to_json());

  ExperimentReport rep;
  rep.command = "enumerate";
  rep.seed = seed;
  rep.config["data"] = exp.csv_path;
  rep.config["split_fraction"] = exp.split_fraction;
  rep.config["ridge_weight"] = ridge;
  rep.results["query_mask"] = bench.query_mask;
  rep.results["percentile"] = bench.query_percentile;
  rep.results["rmse_query"] = bench.rmse[bench.query_mask];
  rep.results["rmse_best"] = bench.rmse.minCoeff();
  rep.results["rmse_full"] = bench.rmse[bench.rmse.size() - 1];
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("enumerate seed=%llu: mask %u percentile %.3f%% -> %s/benchmark.json\n",
              static_cast<unsigned long long>(seed), bench.query_mask, bench.query_percentile,
              o.out_dir.c_str());
  return 0;
}

Dataset load_series_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.cols() < 2) throw IoError("series CSV needs a t column plus at least one output");
  const Eigen::MatrixXd M = t.matrix();
  Dataset d;
  d.inputs = M.col(0);
  d.Y = M.rightCols(t.cols() - 1).transpose();
  d.validate();
  return d;
}

ModelSpec model_from_config(const ordered_json& cfg, const Dataset& data) {
  if (!cfg.contains("model"))
    throw ConfigError("this command needs a \"model\" block in the config file");
  ModelSpec spec = model_spec_from_json(cfg.at("model"));
  if (spec.p != data.Y.rows()) throw ConfigError("model p does not match the data outputs");
  return spec;
}

int cmd_train(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  if (o.data_path.empty() && !cfg.contains("data"))
    throw ConfigError("train needs --data or a \"data\" path in the config");
  const std::string data_path = o.data_path.empty() ? cfg.at("data").get<std::string>()
                                                    : o.data_path;
  const Dataset data = load_series_csv(data_path);
  const ModelSpec spec = model_from_config(cfg, data);
  ViConfig vi = overlay_vi(ViConfig{}, cfg, o);
  vi.seed = seed;
  Rng rng(hash_combine(seed, 0x696eULL));
  VariationalState st = init_state(spec, data, vi, rng);
  auto res = fit(std::move(st), spec, data, vi);
  const Eigen::VectorXd rho = activation_probabilities(res.state);

  fs::create_directories(o.out_dir);
  write_elbo_trace(o.out_dir + "/elbo_trace.csv", res.trace);
  write_predictions(o.out_dir + "/predictions.csv", data,
                    vi_predictive(res.state, spec, data, vi));
  save_checkpoint(o.out_dir + "/checkpoint.json", res.state, vi);

  ExperimentReport rep;
  rep.command = "train";
  rep.seed = seed;
  rep.config["data"] = data_path;
  rep.config["model"] = model_spec_to_json(spec);
  rep.config["vi"] = vi_config_to_json(vi);
  rep.results["activation_probabilities"] = to_std(rho);
  rep.results["sigma2"] = to_std(res.state.sigma2());
  rep.results["final_elbo"] = res.trace.back().total;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("train seed=%llu: final elbo %.3f -> %s/report.json\n",
              static_cast<unsigned long long>(seed), res.trace.back().total,
              o.out_dir.c_str());
  return 0;
}

int cmd_gibbs(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  if (o.data_path.empty() && !cfg.contains("data"))
    throw ConfigError("gibbs needs --data or a \"data\" path in the config");
  const std::string data_path = o.data_path.empty() ? cfg.at("data").get<std::string>()
                                                    : o.data_path;
  const Dataset data = load_series_csv(data_path);
  const ModelSpec spec = model_from_config(cfg, data);
  ChainConfig chain;
  if (cfg.contains("chain")) {
    const auto& c = cfg.at("chain");
    chain.iterations = c.value("iterations", chain.iterations);
    chain.burn_in = c.value("burn_in", chain.burn_in);
    chain.thinning = c.value("thinning", chain.thinning);
    chain.random_sweep = c.value("random_sweep", chain.random_sweep);
  }
  if (o.iterations >= 0) chain.iterations = o.iterations;
  chain.seed = seed;

  std::vector<Eigen::VectorXd> rows_b;
  std::vector<double> log_joints;
  auto sum = run_chain(data.Y, spec, data.inputs, chain, [&](const GibbsState& st) {
    rows_b.push_back(st.b);
    log_joints.push_back(st.log_joint);
  });

  fs::create_directories(o.out_dir);
  write_chain_trace(o.out_dir + "/chain_trace.csv", rows_b, log_joints);

  ExperimentReport rep;
  rep.command = "gibbs";
  rep.seed = seed;
  rep.config["data"] = data_path;
  rep.config["model"] = model_spec_to_json(spec);
  rep.config["chain"] = {{"iterations", chain.iterations},
                         {"burn_in", chain.burn_in},
                         {"thinning", chain.thinning},
                         {"random_sweep", chain.random_sweep}};
  rep.results["activation_frequencies"] = to_std(sum.activation_freq);
  rep.results["retained"] = sum.retained;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("gibbs seed=%llu: freq =", static_cast<unsigned long long>(seed));
  for (int j = 0; j < sum.activation_freq.size(); ++j)
    std::printf(" %.3f", sum.activation_freq[j]);
  std::printf(" -> %s/report.json\n", o.out_dir.c_str());
  return 0;
}

int cmd_compare(const CommonOpts& o) {
  const std::string started = iso_now();
  const ordered_json cfg = load_config(o);
  const std::uint64_t seed = resolve_seed(o, cfg);
  auto exp = CompareExperiment::defaults(seed);
  exp.wave.frequency = cfg.value("frequency", exp.wave.frequency);
  exp.wave.n = cfg.value("n", exp.wave.n);
  exp.wave.noise_std = cfg.value("noise_std", exp.wave.noise_std);
  exp.m = cfg.value("m", exp.m);
  exp.theta = cfg.value("theta", exp.theta);
  exp.sigma2 = cfg.value("sigma2", exp.sigma2);
  exp.vi = overlay_vi(exp.vi, cfg, o);
  exp.vi.seed = seed;
  exp.vi.learn_noise = false;
  exp.wave.seed = seed;
  if (o.noise_std >= 0.0) exp.wave.noise_std = o.noise_std;
  if (cfg.contains("chain")) {
    const auto& c = cfg.at("chain");
    exp.chain.iterations = c.value("iterations", exp.chain.iterations);
    exp.chain.burn_in = c.value("burn_in", exp.chain.burn_in);
    exp.chain.thinning = c.value("thinning", exp.chain.thinning);
  }
  if (o.iterations >= 0) exp.vi.iterations = o.iterations;

  const Dataset data = gen_square_wave(exp.wave);
  const ModelSpec spec = square_wave_model(exp.wave.frequency, exp.m, exp.theta, exp.sigma2);
  auto cmp = compare_vi_mcmc(data, spec, exp.vi, exp.chain);
  double max_delta = 0.0;
  for (int j = 0; j < spec.m; ++j)
    max_delta = std::max(max_delta, std::abs(cmp.rho_vi[j] - cmp.rho_mcmc[j]));

  fs::create_directories(o.out_dir);
  write_elbo_trace(o.out_dir + "/elbo_trace.csv", cmp.trace);
  write_predictions(o.out_dir + "/predictions_vi.csv", data, cmp.vi_pred);
  write_predictions(o.out_dir + "/predictions_mcmc.csv", data, cmp.mcmc_pred);

  ExperimentReport rep;
  rep.command = "compare";
  rep.seed = seed;
  rep.config["frequency"] = exp.wave.frequency;
  rep.config["n"] = exp.wave.n;
  rep.config["noise_std"] = exp.wave.noise_std;
  rep.config["m"] = exp.m;
  rep.config["theta"] = exp.theta;
  rep.config["sigma2"] = exp.sigma2;
  rep.config["vi"] = vi_config_to_json(exp.vi);
  rep.config["chain"] = {{"iterations", exp.chain.iterations},
                         {"burn_in", exp.chain.burn_in},
                         {"thinning", exp.chain.thinning}};
  rep.results["rho_vi"] = to_std(cmp.rho_vi);
  rep.results["rho_mcmc"] = to_std(cmp.rho_mcmc);
  rep.results["max_abs_delta"] = max_delta;
  rep.metadata = run_metadata(started);
  save_report(o.out_dir + "/report.json", rep);

  std::printf("compare seed=%llu: max |rho_vi - rho_mcmc| = %.4f -> %s/report.json\n",
              static_cast<unsigned long long>(seed), max_delta, o.out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("report: not a directory: " + dir);
  ordered_json summary;
  summary["format"] = "gpalps-summary-v1";
  ordered_json reports = ordered_json::array();
  ordered_json compare_tables = ordered_json::array();
  ordered_json percentiles = ordered_json::array();
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  int found = 0;
  for (const auto& path : files) {
    ordered_json j = read_json(path.string());
    if (j.value("format", std::string()) != "gpalps-report-v1") continue;
    ExperimentReport r = ExperimentReport::from_json(j);
    ++found;
    ordered_json item;
    item["file"] = fs::relative(path, dir).string();
    item["command"] = r.command;
    item["seed"] = r.seed;
    item["results"] = r.results;
    reports.push_back(item);
    if (r.command == "compare") {
      const auto rv = r.results.at("rho_vi");
      const auto rm = r.results.at("rho_mcmc");
      ordered_json rows = ordered_json::array();
      for (std::size_t k = 0; k < rv.size(); ++k) {
        const double a = rv[k].get<double>(), b = rm[k].get<double>();
        rows.push_back({{"latent", k},
                        {"rho_vi", a},
                        {"rho_mcmc", b},
                        {"abs_delta", std::abs(a - b)}});
      }
      compare_tables.push_back({{"file", item["file"]}, {"rows", rows}});
    }
    if (r.results.contains("percentile"))
      percentiles.push_back({{"file", item["file"]},
                             {"percentile", r.results.at("percentile")}});
  }
  if (found == 0) throw IoError("report: no reports found under " + dir);
  summary["reports"] = reports;
  summary["compare_tables"] = compare_tables;
  summary["benchmark_percentiles"] = percentiles;
  const std::string out = (fs::path(dir) / "summary.json").string();
  write_json(out, summary);
  std::printf("report: merged %d report(s) -> %s\n", found, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP-ALPS: multi-output GP regression with automatic latent process selection"};
  app.require_subcommand(1);

  CommonOpts sq, mx, bo, en, tr, gb, cp;
  std::uint32_t query_mask = 0;
  std::string mask_from, report_dir;

  auto* c_sq = app.add_subcommand("square-wave", "harmonic selection on a square wave");
  add_common(c_sq, sq);
  auto* c_mx = app.add_subcommand("mixture", "noisy mixture of periodic signals");
  add_common(c_mx, mx);
  auto* c_bo = app.add_subcommand("boston", "feature selection on the Boston housing data");
  add_common(c_bo, bo, true);
  auto* c_en = app.add_subcommand("enumerate", "score every feature subset with KRR");
  add_common(c_en, en, true);
  c_en->add_option("--mask", query_mask, "query mask to rank");
  c_en->add_option("--mask-from", mask_from, "read the query mask from a boston report");
  auto* c_tr = app.add_subcommand("train", "variational inference on a series CSV");
  add_common(c_tr, tr, true);
  auto* c_gb = app.add_subcommand("gibbs", "Gibbs chain on a series CSV");
  add_common(c_gb, gb, true);
  auto* c_cp = app.add_subcommand("compare", "VI vs Gibbs on the square-wave instance");
  add_common(c_cp, cp);
  auto* c_rp = app.add_subcommand("report", "merge run reports into a summary");
  c_rp->add_option("dir", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help() << std::flush;
    return 1;
  }

  try {
    if (c_sq->parsed()) return cmd_square_wave(sq);
    if (c_mx->parsed()) return cmd_mixture(mx);
    if (c_bo->parsed()) return cmd_boston(bo);
    if (c_en->parsed()) return cmd_enumerate(en, query_mask, mask_from);
    if (c_tr->parsed()) return cmd_train(tr);
    if (c_gb->parsed()) return cmd_gibbs(gb);
    if (c_cp->parsed()) return cmd_compare(cp);
    if (c_rp->parsed()) return cmd_report(report_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const NotPositiveDefinite& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  }
  return 0;
}
