// Command-line runner: formula, preprocess, estimate, bench, train.
// Options come from flags or a JSON file given with --config (flags win).
// Every run writes manifest.json with the option values it used; passing that
// file back through --config reproduces the run.
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wscub/cubature_formulas.hpp"
#include "wscub/error.hpp"
#include "wscub/estimator.hpp"
#include "wscub/numeric.hpp"
#include "wscub/partition_paths.hpp"
#include "wscub/recombination.hpp"
#include "wscub/training.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) return wscub::format_double17(v.get<double>());
  throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "unsupported config value " + v.dump());
}

std::string option_key(std::string name) {
  for (char& c : name) c = c == '-' ? '_' : c;
  return name;
}

// Every long option of `sub` with its parsed or default value. Values stay
// strings so they round-trip through the option parser unchanged.
json options_json(const CLI::App& sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (opt->get_lnames().empty() || name == "help" || name == "config") continue;
    std::vector<std::string> values = opt->results();
    if (values.empty()) {
      std::string def = opt->get_default_str();
      if (def.empty()) continue;
      if (opt->get_expected_max() > 1 && def.front() == '[' && def.back() == ']') {
        values = CLI::detail::split(def.substr(1, def.size() - 2), ',');
      } else {
        values.push_back(def);
      }
    }
    const std::string key = option_key(name);
    if (opt->get_expected_max() > 1) {
      out[key] = values;
    } else if (opt->get_type_size() == 0) {
      out[key] = values.back() == "true" || values.back() == "1";
    } else {
      out[key] = values.back();
    }
  }
  return out;
}

// Fills options that were not given on the command line from a flat JSON
// object. Nested objects (a manifest's results) and the command name are
// skipped; any other unknown key is a configuration error.
void apply_config(CLI::App& sub, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "cannot read config " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "config " + path + " is not valid JSON");
  }
  if (!j.is_object()) throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (value.is_object() || value.is_null() || key == "command" || key == "config") continue;
    std::string name = key;
    for (char& c : name) c = c == '_' ? '-' : c;
    CLI::Option* opt = sub.get_option_no_throw("--" + name);
    if (opt == nullptr) throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "unknown config key '" + key + "'");
    if (opt->count() > 0) continue;
    std::vector<std::string> inputs;
    if (value.is_array()) {
      for (const auto& v : value) inputs.push_back(scalar_text(v));
    } else {
      inputs.push_back(scalar_text(value));
    }
    try {
      for (const auto& in : inputs) opt->add_result(in);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "config key '" + key + "': " + e.what());
    }
  }
}

struct Common {
  std::string out = ".";
  std::size_t workers = 0;
  std::uint64_t seed = 20240607;
  std::string config;
};

void add_common(CLI::App* sub, Common& common, bool with_seed) {
  sub->option_defaults()->always_capture_default();
  sub->add_option("--config", common.config, "JSON file with option values (flags override it)");
  sub->add_option("--out", common.out, "Output directory");
  sub->add_option("--workers", common.workers, "Worker threads (0 = all cores)");
  if (with_seed) sub->add_option("--seed", common.seed, "Root random seed");
}

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "cannot create output directory " + dir);
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "cannot write " + path.string());
  f << text;
}

std::string read_file(const std::string& path, wscub::ErrorKind kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw wscub::Error(kind, "cannot read " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_manifest(const CLI::App& sub, const fs::path& out, const json& results) {
  json m = options_json(sub);
  m["command"] = sub.get_name();
  m["results"] = results;
  write_file(out / "manifest.json", m.dump(2) + "\n");
}

wscub::AffineScalarSde parse_model(const std::vector<double>& v) {
  if (v.size() != 5) {
    throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "--model takes five numbers: a c b e x0");
  }
  return {v[0], v[1], v[2], v[3], v[4]};
}

// ---------------------------------------------------------------- formula

struct FormulaArgs {
  int degree = 3;
  int dim = 1;
  double tol = 1e-10;
  int check_degree = 0;
};

int run_formula(const CLI::App& sub, const FormulaArgs& a, const Common& c) {
  const auto formula = wscub::make_formula(a.degree, a.dim);
  const int m = a.check_degree > 0 ? a.check_degree : a.degree;
  const auto report = wscub::verify_cubature(formula, m, a.tol);
  const auto out = prepare_out(c.out);
  write_file(out / "formula.json", wscub::to_json(formula) + "\n");
  write_file(out / "verification.json", wscub::to_json(report) + "\n");
  const json summary = json::parse(wscub::to_json(report));
  write_manifest(sub, out, {{"paths", formula.size()}, {"verification", summary}});
  std::printf("degree %d, d_b %d: %zu paths, max defect %.3e over degree-%d words\n", a.degree, a.dim,
              formula.size(), summary.value("max_defect", 0.0), m);
  if (!report.passed) {
    std::printf("verification FAILED (tolerance %.1e) at word %s\n", a.tol, summary["offending_word"].dump().c_str());
    return kExitNumerical;
  }
  return 0;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string formula_file;
  int degree = 5;
  int dim = 1;
  int k = 10;
  double gamma = 0.6;
  double horizon = 1.0;
  int basis_degree = 4;
  double p_star = 1.0;
  bool raw = false;
};

wscub::CubatureFormula load_formula(const std::string& file, int degree, int dim) {
  if (file.empty()) return wscub::make_formula(degree, dim);
  const std::string text = read_file(file, wscub::ErrorKind::kManifestMismatch);
  try {
    return wscub::formula_from_json(text);
  } catch (const json::exception& e) {
    throw wscub::Error(wscub::ErrorKind::kManifestMismatch, "formula file " + file + " is malformed");
  }
}

int run_preprocess(const CLI::App& sub, const PreprocessArgs& a, const Common& c) {
  const auto formula = load_formula(a.formula_file, a.degree, a.dim);
  const auto partition = wscub::make_partition(a.horizon, a.k, a.gamma);
  wscub::PreprocessOptions opts;
  opts.basis_degree = a.basis_degree;
  opts.p_star = a.p_star;
  const auto table = a.raw ? wscub::raw_weight_table(formula, partition)
                           : wscub::preprocess(formula, partition, opts, a.gamma);
  const auto out = prepare_out(c.out);
  write_file(out / "weight_table.json", wscub::to_json(table) + "\n");
  const auto& mf = table.manifest();
  const std::size_t leaves = table.levels().empty() ? 0 : table.levels().back().size();
  write_manifest(sub, out,
                 {{"survivors", mf.survivors}, {"atoms", mf.atoms}, {"leaves", leaves}, {"seconds", mf.seconds}});
  std::printf("k=%d: %zu surviving leaves in %.3f s\n", a.k, leaves, mf.seconds);
  return 0;
}

// ---------------------------------------------------------------- estimate

struct EstimateArgs {
  std::vector<double> model{0.0, 0.0, 0.0, 1.0, 0.0};
  std::string functional = "sine_tracking";
  double horizon = 1.0;
  int degree = 5;
  int k = 8;
  double gamma = 0.6;
  std::string table_file;
  bool raw = false;
  int basis_degree = 4;
  double p_star = 1.0;
  int steps_per_segment = 32;
  std::size_t mc_n = 0;
  std::size_t mc_steps = 1000;
};

int run_estimate(const CLI::App& sub, const EstimateArgs& a, const Common& c) {
  const auto model = parse_model(a.model);
  const auto functional = wscub::functional_by_name(a.functional);
  const auto formula = wscub::make_formula(a.degree, 1);
  const auto partition = wscub::make_partition(a.horizon, a.k, a.gamma);
  const auto fields = wscub::stratonovich_fields(model);
  const std::vector<double> x0_aug{0.0, model.x0};
  wscub::OdeConfig ode;
  ode.steps_per_segment = a.steps_per_segment;
  ode.workers = c.workers;

  wscub::EstimateReport cub;
  std::string method = "cubature";
  if (!a.table_file.empty()) {
    const auto table =
        wscub::weight_table_from_json(read_file(a.table_file, wscub::ErrorKind::kManifestMismatch));
    cub = wscub::cubature_estimate(functional, fields, formula, partition, table, x0_aug, ode);
  } else if (a.raw) {
    method = "cubature_raw";
    cub = wscub::cubature_estimate_raw(functional, fields, formula, partition, x0_aug, ode);
  } else {
    wscub::PreprocessOptions opts;
    opts.basis_degree = a.basis_degree;
    opts.p_star = a.p_star;
    const auto table = wscub::preprocess(formula, partition, opts, a.gamma);
    cub = wscub::cubature_estimate(functional, fields, formula, partition, table, x0_aug, ode);
  }
  const auto oracle = wscub::affine_oracle(model, a.functional, a.horizon);
  auto error_text = [&](double v) { return oracle ? wscub::format_double17(std::abs(v - *oracle)) : std::string(); };

  std::string csv = "method,n,value,seconds,error\n";
  csv += method + "," + std::to_string(cub.n) + "," + wscub::format_double17(cub.value) + "," +
         wscub::format_double17(cub.seconds) + "," + error_text(cub.value) + "\n";
  json results = {{method, {{"value", cub.value}, {"n", cub.n}}}};
  std::printf("%s: %.12g over %zu paths\n", method.c_str(), cub.value, cub.n);
  if (a.mc_n > 0) {
    const std::vector<double> x0{model.x0};
    const auto mc = wscub::mc_estimate(functional, wscub::to_ito(model), x0, a.horizon, a.mc_steps, a.mc_n, c.seed,
                                       c.workers);
    csv += "mc," + std::to_string(mc.n) + "," + wscub::format_double17(mc.value) + "," +
           wscub::format_double17(mc.seconds) + "," + error_text(mc.value) + "\n";
    results["mc"] = {{"value", mc.value}, {"n", mc.n}, {"std_error", mc.std_error}};
    std::printf("mc: %.12g +- %.2g over %zu paths\n", mc.value, mc.std_error, mc.n);
  }
  if (oracle) {
    results["oracle"] = *oracle;
    std::printf("oracle: %.12g\n", *oracle);
  }
  const auto out = prepare_out(c.out);
  write_file(out / "estimate.csv", csv);
  write_manifest(sub, out, results);
  return 0;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::vector<double> model{0.0, 0.0, 0.0, 1.0, 0.0};
  std::string functional = "sine_tracking";
  double horizon = 1.0;
  std::optional<double> oracle;
  int degree = 5;
  double gamma = 0.6;
  std::vector<int> ks{2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24};
  bool raw = false;
  int basis_degree = 4;
  double p_star = 1.0;
  int steps_per_segment = 8;
  std::vector<std::size_t> mc_ns{100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000};
  std::size_t replicates = 20;
  std::size_t mc_steps = 1000;
};

int run_bench(const CLI::App& sub, const BenchArgs& a, const Common& c) {
  wscub::ConvergenceConfig cfg;
  cfg.model = parse_model(a.model);
  cfg.functional = a.functional;
  cfg.horizon = a.horizon;
  cfg.oracle = a.oracle;
  cfg.degree = a.degree;
  cfg.gamma = a.gamma;
  cfg.ks = a.ks;
  cfg.recombine = !a.raw;
  cfg.basis_degree = a.basis_degree;
  cfg.p_star = a.p_star;
  cfg.steps_per_segment = a.steps_per_segment;
  cfg.mc_ns = a.mc_ns;
  cfg.replicates = a.replicates;
  cfg.mc_steps = a.mc_steps;
  cfg.seed = c.seed;
  cfg.workers = c.workers;
  if (!a.mc_ns.empty()) {
    cfg.mc_fit_min = static_cast<double>(*std::min_element(a.mc_ns.begin(), a.mc_ns.end()));
    cfg.mc_fit_max = static_cast<double>(*std::max_element(a.mc_ns.begin(), a.mc_ns.end()));
  }
  const auto r = wscub::convergence_experiment(cfg);
  const auto out = prepare_out(c.out);
  write_file(out / "convergence.csv", r.to_csv());
  write_manifest(sub, out,
                 {{"oracle", r.oracle},
                  {"mc_slope", r.mc_slope},
                  {"cubature_slope", r.cubature_slope},
                  {"cubature_fit_points", r.cubature_fit_points},
                  {"cubature_dominates", r.cubature_dominates},
                  {"matched_points", r.matched_points}});
  std::printf("oracle %.12g\n", r.oracle);
  for (const auto& row : r.rows) std::printf("%-9s n=%-8zu error=%.3e\n", row.method.c_str(), row.n, row.error);
  std::printf("mc slope %.3f, cubature slope %.3f over %zu points, cubature dominates: %s\n", r.mc_slope,
              r.cubature_slope, r.cubature_fit_points, r.cubature_dominates ? "yes" : "no");
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  wscub::TrainConfig cfg;
  std::vector<std::string> arms{"cubature", "mc"};
  bool mc_fixed_noise = false;
  bool raw = false;
};

int run_train(const CLI::App& sub, TrainArgs& a, const Common& c) {
  auto& cfg = a.cfg;
  cfg.network.dim = cfg.data.dim;
  cfg.seed = c.seed;
  cfg.workers = c.workers;
  cfg.mc_resample = !a.mc_fixed_noise;
  cfg.recombine = !a.raw;
  cfg.run_cubature = std::find(a.arms.begin(), a.arms.end(), "cubature") != a.arms.end();
  cfg.run_mc = std::find(a.arms.begin(), a.arms.end(), "mc") != a.arms.end();
  for (const auto& arm : a.arms) {
    if (arm != "cubature" && arm != "mc") {
      throw wscub::Error(wscub::ErrorKind::kInvalidParameter, "unknown arm '" + arm + "'");
    }
  }
  const auto r = wscub::train(cfg);
  const wscub::NetworkFields net(cfg.network);
  const auto out = prepare_out(c.out);
  write_file(out / "train_log.csv", r.log_csv());
  write_file(out / "data.csv", wscub::data_csv(r.data));
  json results = {{"cubature_paths", r.cubature_paths}, {"mc_paths", r.mc_paths}};
  for (const std::string arm : {"cubature", "mc"}) {
    const auto losses = r.losses(arm);
    if (losses.empty()) continue;
    const auto& params = arm == "cubature" ? r.cubature_parameters : r.mc_parameters;
    write_file(out / ("params_" + arm + ".json"), wscub::parameters_json(net, params) + "\n");
    results[arm] = {{"first_loss", losses.front()},
                    {"last_loss", losses.back()},
                    {"mean_epoch_seconds", r.mean_seconds(arm)}};
    std::printf("%-8s loss %.6g -> %.6g, %.4g s/epoch\n", arm.c_str(), losses.front(), losses.back(),
                r.mean_seconds(arm));
  }
  write_manifest(sub, out, results);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wiener-space cubature experiments"};
  app.require_subcommand(1);
  Common common;

  FormulaArgs fa;
  auto* formula = app.add_subcommand("formula", "Build a cubature formula and verify it against the expected signature");
  add_common(formula, common, false);
  formula->add_option("--degree", fa.degree, "Cubature degree (3 or 5)");
  formula->add_option("--dim", fa.dim, "Driving dimension");
  formula->add_option("--tol", fa.tol, "Verification tolerance");
  formula->add_option("--check-degree", fa.check_degree, "Verify against words of this degree (0 = own degree)");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Recombine the cubature tree into a weight table");
  add_common(pre, common, false);
  pre->add_option("--formula", pa.formula_file, "Formula JSON (otherwise built from --degree/--dim)");
  pre->add_option("--degree", pa.degree);
  pre->add_option("--dim", pa.dim);
  pre->add_option("--k", pa.k, "Number of subintervals");
  pre->add_option("--gamma", pa.gamma, "Partition grading exponent");
  pre->add_option("--horizon", pa.horizon);
  pre->add_option("--basis-degree", pa.basis_degree, "Polynomial degree of the test basis");
  pre->add_option("--p-star", pa.p_star, "Exponent in the radius schedule");
  pre->add_flag("--raw", pa.raw, "Skip recombination and store the full tree");

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate E[L(X)] for a scalar affine SDE");
  add_common(est, common, true);
  est->add_option("--model", ea.model, "a c b e x0 for dX = (aX+c)dt + (bX+e)dB")->expected(5);
  est->add_option("--functional", ea.functional, "sine_tracking, terminal_mean, terminal_square, terminal_abs");
  est->add_option("--horizon", ea.horizon);
  est->add_option("--degree", ea.degree);
  est->add_option("--k", ea.k);
  est->add_option("--gamma", ea.gamma);
  est->add_option("--table", ea.table_file, "Weight table JSON from preprocess");
  est->add_flag("--raw", ea.raw, "Sum over the full tree without recombination");
  est->add_option("--basis-degree", ea.basis_degree);
  est->add_option("--p-star", ea.p_star);
  est->add_option("--steps-per-segment", ea.steps_per_segment);
  est->add_option("--mc-n", ea.mc_n, "Monte Carlo paths (0 = skip)");
  est->add_option("--mc-steps", ea.mc_steps, "Euler steps per Monte Carlo path");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Convergence sweep of cubature against Monte Carlo");
  add_common(bench, common, true);
  bench->add_option("--model", ba.model, "a c b e x0")->expected(5);
  bench->add_option("--functional", ba.functional);
  bench->add_option("--horizon", ba.horizon);
  bench->add_option("--oracle", ba.oracle, "Reference value (default: analytic)");
  bench->add_option("--degree", ba.degree);
  bench->add_option("--gamma", ba.gamma);
  bench->add_option("--ks", ba.ks, "Partition sizes to sweep");
  bench->add_flag("--raw", ba.raw, "Use the full tree instead of recombined tables");
  bench->add_option("--basis-degree", ba.basis_degree);
  bench->add_option("--p-star", ba.p_star);
  bench->add_option("--steps-per-segment", ba.steps_per_segment);
  bench->add_option("--mc-ns", ba.mc_ns, "Monte Carlo path counts");
  bench->add_option("--replicates", ba.replicates);
  bench->add_option("--mc-steps", ba.mc_steps);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a latent SDE with cubature and Monte Carlo gradients");
  add_common(train, common, true);
  auto& tc = ta.cfg;
  train->add_option("--dim", tc.data.dim, "Latent and data dimension");
  train->add_option("--width", tc.network.width);
  train->add_option("--depth", tc.network.depth);
  train->add_option("--diffusion-scale", tc.network.diffusion_scale);
  train->add_option("--obs-noise", tc.obs_noise);
  train->add_option("--kl-weight", tc.kl_weight);
  train->add_option("--data-points", tc.data.points);
  train->add_option("--data-rate", tc.data.rate);
  train->add_option("--data-level", tc.data.level);
  train->add_option("--data-vol", tc.data.vol);
  train->add_option("--data-start", tc.data.start);
  train->add_option("--data-seed", tc.data.seed);
  train->add_option("--degree", tc.degree);
  train->add_option("--k", tc.k);
  train->add_option("--gamma", tc.gamma);
  train->add_flag("--raw", ta.raw, "Use the full tree instead of a recombined table");
  train->add_option("--basis-degree", tc.basis_degree);
  train->add_option("--p-star", tc.p_star);
  train->add_option("--steps-per-segment", tc.steps_per_segment);
  train->add_option("--mc-paths", tc.mc_paths, "Monte Carlo paths (0 = cubature path count)");
  train->add_option("--mc-steps", tc.mc_steps);
  train->add_flag("--mc-fixed-noise", ta.mc_fixed_noise, "Reuse the same Monte Carlo noise every epoch");
  train->add_option("--lr", tc.learning_rate);
  train->add_option("--epochs", tc.epochs);
  train->add_option("--arms", ta.arms, "cubature and/or mc");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    for (auto* sub : app.get_subcommands()) {
      if (!common.config.empty()) apply_config(*sub, common.config);
    }
    if (formula->parsed()) return run_formula(*formula, fa, common);
    if (pre->parsed()) return run_preprocess(*pre, pa, common);
    if (est->parsed()) return run_estimate(*est, ea, common);
    if (bench->parsed()) return run_bench(*bench, ba, common);
    if (train->parsed()) return run_train(*train, ta, common);
  } catch (const wscub::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return wscub::is_config_error(e.kind()) ? kExitConfig : kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  }
  return kExitConfig;
}
