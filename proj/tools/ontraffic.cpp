// ontraffic: generate datasets, train, evaluate and predict from the command line.
//
// Exit codes: 0 success, 1 user error, 2 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ontraffic/config_json.hpp"
#include "ontraffic/dataset.hpp"
#include "ontraffic/evaluation.hpp"
#include "ontraffic/net.hpp"
#include "ontraffic/training.hpp"

namespace fs = std::filesystem;
using namespace ontraffic;

namespace {

enum class Level { kQuiet, kInfo, kDebug };

Level log_level() {
  const char* env = std::getenv("ONTRAFFIC_LOG");
  if (env == nullptr) return Level::kInfo;
  const std::string s = env;
  if (s == "quiet" || s == "0" || s == "error") return Level::kQuiet;
  if (s == "debug" || s == "2") return Level::kDebug;
  return Level::kInfo;
}

const Level kLevel = log_level();

template <class... A>
void info(const A&... a) {
  if (kLevel == Level::kQuiet) return;
  (std::cerr << ... << a) << '\n';
}

template <class... A>
void debug(const A&... a) {
  if (kLevel != Level::kDebug) return;
  (std::cerr << ... << a) << '\n';
}

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::size_t workers = 0;
};

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Root seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--workers", c.workers, "Worker threads (default: hardware threads)");
}

ConfigSource source_of(const Common& c) {
  return c.config.empty() ? ConfigSource{} : read_config(c.config);
}

ExperimentConfig finish(ConfigSource src, const Common& c) {
  if (c.seed) src.json["seed"] = *c.seed;
  return make_experiment(src);
}

std::size_t workers_of(const Common& c) { return c.workers == 0 ? default_workers() : c.workers; }

fs::path ensure_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw UserError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw UserError("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

// ---- generate -----------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::optional<std::size_t> scenarios;
  std::optional<std::string> source;
  std::optional<std::size_t> cells;
  std::string file = "dataset.ontd";
};

int cmd_generate(const GenerateArgs& a) {
  auto src = source_of(a.common);
  if (a.source) src.json["data"]["source"] = *a.source;
  if (a.scenarios) src.json["data"]["scenario_count"] = *a.scenarios;
  if (a.cells) src.json["data"]["n_cells"] = *a.cells;
  const auto cfg = finish(src, a.common);
  const auto dir = ensure_dir(a.common.out);
  const auto t0 = std::chrono::steady_clock::now();
  pipeline::GenerationSummary summary;
  const auto ds = pipeline::generate_dataset(cfg.data, static_cast<unsigned>(workers_of(a.common)), &summary);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto path = dir / a.file;
  pipeline::save_dataset(ds, path);
  std::cout << "wrote " << path.string() << ": " << ds.scenarios.size() << " " << pipeline::to_string(cfg.data.source)
            << " scenarios, " << fs::file_size(path) << " bytes, seed " << cfg.seed << ", " << secs << " s\n";
  if (cfg.data.source == pipeline::Source::kIdm)
    std::cout << "collisions " << summary.collisions << ", red-light violations " << summary.red_violations << '\n';
  else
    std::cout << "conservation violations " << summary.conservation_violations << '\n';
  return 0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string dataset;
  std::string checkpoint;
  std::string resume;
  std::optional<std::size_t> epochs;
  bool no_shift = false;
};

int cmd_train(const TrainArgs& a) {
  auto src = source_of(a.common);
  if (a.epochs) src.json["train"]["epochs"] = *a.epochs;
  if (a.no_shift) src.json["train"]["temporal_shift"] = false;
  auto cfg = finish(src, a.common);
  cfg.train.workers = workers_of(a.common);
  const auto data = pipeline::load_dataset(a.dataset);
  const auto model = training::fit_model_box(cfg.model, data.config, cfg.train.temporal_shift);
  const auto dir = ensure_dir(a.common.out);

  training::TrainOptions opt;
  opt.checkpoint = a.checkpoint.empty() ? dir / "model.ontc" : fs::path(a.checkpoint);
  opt.log_csv = dir / "train_log.csv";
  if (!a.resume.empty()) {
    opt.resume = net::load_checkpoint(a.resume);
    info("resuming from ", a.resume);
  }
  opt.on_epoch = [&](const training::EpochRecord& r) {
    info("epoch ", r.epoch, "  train_mse ", r.train_mse, "  val_mse ", r.val_mse, "  train_nll ", r.train_nll,
         "  val_nll ", r.val_nll, "  ", r.seconds, " s");
  };
  Json resolved = to_json(cfg);
  resolved["model"] = to_json(model);
  write_json(dir / "config.json", resolved);
  debug("resolved config ", resolved.dump());
  Rng probe_rng(0);
  info("training on ", data.scenarios.size(), " scenarios, ", net::ModelParams::init(model, probe_rng).parameter_count(),
       " parameters, ", cfg.train.epochs, " epochs");
  const auto result = training::train(data, model, cfg.train, opt);
  std::cout << "checkpoint " << opt.checkpoint.string() << " (best epoch " << result.report.best_epoch << ", score "
            << result.report.best_score << "), log " << opt.log_csv.string() << ", " << result.report.wall_seconds
            << " s\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string baseline;
  std::string dataset;
  std::string analyses = "all";
  bool holdout = false;
};

bool shifted_model(const net::Checkpoint& ck) {
  const Json meta = Json::parse(ck.meta_json);
  if (meta.contains("train_config") && meta["train_config"].contains("temporal_shift"))
    return meta["train_config"]["temporal_shift"].get<bool>();
  return ck.params.config.t_min < 0.0;
}

double median_of(const evaluation::MetricRecord& r) { return r.box.median; }

const evaluation::MetricRecord* at_value(const std::vector<evaluation::MetricRecord>& rs, double v) {
  for (const auto& r : rs)
    if (std::abs(r.value - v) < 1e-12) return &r;
  return nullptr;
}

int cmd_eval(const EvalArgs& a) {
  const auto cfg = finish(source_of(a.common), a.common);
  const std::size_t workers = workers_of(a.common);
  std::vector<std::string> wanted;
  {
    std::stringstream ss(a.analyses);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "all") {
        wanted = {"accuracy", "horizon", "robustness", "coverage"};
        break;
      }
      if (item != "accuracy" && item != "horizon" && item != "robustness" && item != "coverage")
        throw UserError("unknown analysis '" + item + "' (expected accuracy, horizon, robustness, coverage or all)");
      wanted.push_back(item);
    }
  }
  if (wanted.empty()) throw UserError("no analyses requested");
  auto want = [&](const char* n) { return std::find(wanted.begin(), wanted.end(), n) != wanted.end(); };

  const auto ck = net::load_checkpoint(a.checkpoint);
  const bool shifted = shifted_model(ck);
  auto data = pipeline::load_dataset(a.dataset);
  if (a.holdout) {
    const auto [tr, va] = pipeline::split_indices(data.scenarios.size(), cfg.train.train_fraction);
    std::vector<pipeline::Scenario> held;
    for (auto i : va) held.push_back(data.scenarios[i]);
    data.scenarios = std::move(held);
  }
  if (data.scenarios.empty()) throw UserError("evaluation set is empty");
  const auto& w = data.config.windows;
  const auto samples = evaluation::test_samples(data.scenarios, w, cfg.seed, shifted);
  const auto dir = ensure_dir(a.common.out);
  Json summary{{"checkpoint", a.checkpoint},
               {"dataset", a.dataset},
               {"scenarios", data.scenarios.size()},
               {"seed", cfg.seed},
               {"analyses", Json::object()}};
  auto& out = summary["analyses"];

  if (want("accuracy")) {
    const auto r = evaluation::accuracy_table(ck.params, samples, pipeline::to_string(data.config.source), workers);
    const std::vector<evaluation::MetricRecord> rows{r};
    evaluation::write_metrics_csv(dir / "accuracy.csv", rows);
    out["accuracy"] = {{"file", "accuracy.csv"}, {"mse", r.mse},         {"mae", r.mae},
                       {"mse_rho", r.mse_rho},   {"mae_rho", r.mae_rho}, {"threshold_mse", 0.09},
                       {"pass", r.mse <= 0.09}};
    std::cout << "accuracy: mse " << r.mse << ", mae " << r.mae << '\n';
  }
  if (want("horizon")) {
    std::optional<net::Checkpoint> base;
    if (!a.baseline.empty()) base = net::load_checkpoint(a.baseline);
    if (!shifted) throw UserError("horizon analysis needs the shift-trained model as --checkpoint");
    const auto c = evaluation::receding_horizon_eval(ck.params, base ? &base->params : nullptr, data.scenarios, w,
                                                     cfg.eval.t_c0, cfg.eval.delta_h, cfg.eval.shifts, workers);
    evaluation::write_horizon_csv(dir / "horizon.csv", c);
    Json h{{"file", "horizon.csv"}, {"spread", c.spread()}, {"scenario_pass_fraction", c.pass_fraction()}};
    bool pass = c.pass_fraction() >= 0.8;
    if (base) {
      const double ms = std::accumulate(c.mse_shifted.begin() + 1, c.mse_shifted.end(), 0.0);
      const double mb = std::accumulate(c.mse_baseline.begin() + 1, c.mse_baseline.end(), 0.0);
      const double n = static_cast<double>(c.mse_shifted.size() - 1);
      h["mean_mse_shifted_later"] = ms / n;
      h["mean_mse_baseline_later"] = mb / n;
      pass = pass && ms < mb;
    } else {
      h["note"] = "no --baseline given; only the spread condition is checked";
    }
    h["pass"] = pass;
    out["horizon"] = h;
    std::cout << "horizon: spread " << c.spread() << ", scenario pass fraction " << c.pass_fraction() << '\n';
  }
  if (want("robustness")) {
    if (!shifted) throw UserError("robustness analysis needs a shift-trained model");
    std::vector<evaluation::MetricRecord> all;
    Json r{{"file", "robustness.csv"}};
    bool pass = true;
    const auto noise = evaluation::robustness_sweep(ck.params, samples, evaluation::Axis::kNoise, cfg.eval.noise_m,
                                                    cfg.seed, workers);
    const auto drop = evaluation::robustness_sweep(ck.params, samples, evaluation::Axis::kDropout, cfg.eval.dropout,
                                                   cfg.seed, workers);
    const auto hist = evaluation::robustness_sweep(ck.params, samples, evaluation::Axis::kHistory, cfg.eval.history,
                                                   cfg.seed, workers);
    for (const auto* v : {&noise, &drop, &hist}) all.insert(all.end(), v->begin(), v->end());
    evaluation::write_metrics_csv(dir / "robustness.csv", all);
    auto ratio = [&](const std::vector<evaluation::MetricRecord>& rs, double v, const char* key) {
      const auto* clean = at_value(rs, 0.0);
      const auto* hit = at_value(rs, v);
      if (clean == nullptr || hit == nullptr) {
        r[key] = nullptr;
        pass = false;
        return;
      }
      const double inc = median_of(*hit) / median_of(*clean) - 1.0;
      r[key] = inc;
      pass = pass && inc <= 0.25;
    };
    ratio(noise, 30.0, "median_increase_noise_30m");
    ratio(drop, 0.3, "median_increase_dropout_0.3");
    const auto* h_long = at_value(hist, 2.0);
    const auto* h_short = at_value(hist, 0.25);
    if (h_long && h_short) {
      r["median_history_2min"] = median_of(*h_long);
      r["median_history_0.25min"] = median_of(*h_short);
      pass = pass && median_of(*h_long) < median_of(*h_short);
    } else {
      pass = false;
    }
    r["pass"] = pass;
    out["robustness"] = r;
    std::cout << "robustness: " << all.size() << " sweep points\n";
  }
  if (want("coverage")) {
    const auto preds = evaluation::predict_all(ck.params, samples, workers);
    const auto cols = evaluation::rho_columns(preds, samples);
    const auto curve = evaluation::coverage_from(cols.rho_hat, cols.sigma, cols.rho_true, cfg.eval.k);
    evaluation::write_coverage_csv(dir / "coverage.csv", curve);
    const auto bins =
        evaluation::binned_coverage(cols.rho_hat, cols.sigma, cols.rho_true, cfg.eval.k, cfg.eval.coverage_bins);
    evaluation::write_binned_coverage_csv(dir / "coverage_binned.csv", bins);
    const auto check = evaluation::coverage_from(cols.rho_hat, cols.sigma, cols.rho_true, cfg.eval.coverage_check);
    double worst = 0.0;
    Json gaps = Json::array();
    for (std::size_t i = 0; i < check.k.size(); ++i) {
      const double g = std::abs(check.observed[i] - check.expected[i]);
      worst = std::max(worst, g);
      gaps.push_back({{"k", check.k[i]}, {"expected", check.expected[i]}, {"observed", check.observed[i]}});
    }
    out["coverage"] = {{"file", "coverage.csv"}, {"binned_file", "coverage_binned.csv"}, {"points", gaps},
                       {"max_gap", worst},       {"threshold", 0.10},                      {"pass", worst <= 0.10}};
    std::cout << "coverage: max |observed - expected| " << worst << " over " << check.n << " points\n";
  }
  write_json(dir / "summary.json", summary);
  std::cout << "summary " << (dir / "summary.json").string() << '\n';
  return 0;
}

// ---- predict ------------------------------------------------------------------

struct PredictArgs {
  Common common;
  std::string checkpoint;
  std::string input;
  std::string dataset;
  std::size_t scenario = 0;
  std::optional<double> t_c;
  std::string grid = "100x240";
  bool drop_probes = false;
  std::string file = "prediction.csv";
};

pipeline::InputSet read_input_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UserError("cannot read input set '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw UserError(path + ":1: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,t,id,rho,v") throw UserError(path + ":1: expected header 'x,t,id,rho,v'");
  pipeline::InputSet in;
  std::size_t ln = 1;
  while (std::getline(f, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<double, 5> v{};
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(ss, cell, ',')) {
      if (k == 5) throw UserError(path + ":" + std::to_string(ln) + ": more than 5 fields");
      try {
        std::size_t used = 0;
        v[k] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw UserError(path + ":" + std::to_string(ln) + ": field " + std::to_string(k + 1) + " is not a number");
      }
      if (!std::isfinite(v[k])) throw UserError(path + ":" + std::to_string(ln) + ": non-finite value");
      ++k;
    }
    if (k != 5) throw UserError(path + ":" + std::to_string(ln) + ": expected 5 fields, got " + std::to_string(k));
    in.push({v[0], v[1], v[2]}, {v[3], v[4]});
  }
  return in;
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& g) {
  const auto x = g.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(g);
    const auto nx = std::stoul(g.substr(0, x)), nt = std::stoul(g.substr(x + 1));
    if (nx < 1 || nt < 1) throw std::invalid_argument(g);
    return {nx, nt};
  } catch (const std::exception&) {
    throw UserError("--grid expects NXxNT, e.g. 100x240, got '" + g + "'");
  }
}

int cmd_predict(const PredictArgs& a) {
  const auto ck = net::load_checkpoint(a.checkpoint);
  const auto& mc = ck.params.config;
  pipeline::InputSet input;
  if (!a.input.empty() == !a.dataset.empty()) throw UserError("give exactly one of --input or --dataset");
  if (!a.input.empty()) {
    input = read_input_csv(a.input);
  } else {
    const auto data = pipeline::load_dataset(a.dataset);
    if (a.scenario >= data.scenarios.size())
      throw UserError("--scenario " + std::to_string(a.scenario) + " out of range (dataset has " +
                      std::to_string(data.scenarios.size()) + ")");
    const auto& w = data.config.windows;
    const double t_c = a.t_c.value_or(w.delta_past);
    input = training::window(data.scenarios[a.scenario], t_c, w, shifted_model(ck)).input;
  }
  if (a.drop_probes) {
    pipeline::InputSet controls;
    for (std::size_t i = 0; i < input.size(); ++i)
      if (input.is_control(i)) controls.push(input.coords[i], input.values[i]);
    input = std::move(controls);
  }
  if (input.empty()) throw UserError("input set has no rows");
  const auto [nx, nt] = parse_grid(a.grid);
  std::vector<pipeline::Query> q;
  q.reserve(nx * nt);
  auto lin = [](double lo, double hi, std::size_t n, std::size_t i) {
    return n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  for (std::size_t j = 0; j < nt; ++j)
    for (std::size_t i = 0; i < nx; ++i) q.push_back({lin(mc.x_min, mc.x_max, nx, i), lin(mc.t_min, mc.t_max, nt, j)});

  const auto t0 = std::chrono::steady_clock::now();
  const auto pred = net::predict(ck.params, input, q);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  const auto dir = ensure_dir(a.common.out);
  const auto path = dir / a.file;
  std::ofstream f(path);
  if (!f) throw UserError("cannot write '" + path.string() + "'");
  f.precision(8);
  f << "x,t,rho,v,sigma_rho,sigma_v\n";
  for (std::size_t i = 0; i < q.size(); ++i)
    f << q[i].x << ',' << q[i].t << ',' << pred.rho[i] << ',' << pred.v[i] << ',' << pred.sigma_rho[i] << ','
      << pred.sigma_v[i] << '\n';
  const double mean_sigma =
      std::accumulate(pred.sigma_rho.begin(), pred.sigma_rho.end(), 0.0) / static_cast<double>(pred.size());
  std::cout << "wrote " << path.string() << ": " << q.size() << " points from " << input.size() << " input rows ("
            << input.probe_count() << " probe), mean sigma_rho " << mean_sigma << ", " << ms << " ms\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ontraffic: traffic-state operator learning with probe vehicles"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate scenarios and write a dataset file");
  add_common(g, gen.common);
  g->add_option("--scenarios", gen.scenarios, "Number of scenarios");
  g->add_option("--source", gen.source, "godunov or idm")->check(CLI::IsMember({"godunov", "idm"}));
  g->add_option("--cells", gen.cells, "Grid cells");
  g->add_option("--file", gen.file, "Dataset file name inside --out")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a dataset");
  add_common(t, tr.common);
  t->add_option("--dataset", tr.dataset, "Dataset file")->required()->check(CLI::ExistingFile);
  t->add_option("--checkpoint", tr.checkpoint, "Checkpoint path (default: OUT/model.ontc)");
  t->add_option("--resume", tr.resume, "Resume from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--epochs", tr.epochs, "Epoch count (overrides the config)");
  t->add_flag("--no-shift", tr.no_shift, "Train the fixed-window baseline (no temporal shift)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Run analyses and write CSV reports plus summary.json");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Shift-trained model")->required()->check(CLI::ExistingFile);
  e->add_option("--baseline", ev.baseline, "No-shift baseline model for the horizon analysis")
      ->check(CLI::ExistingFile);
  e->add_option("--dataset", ev.dataset, "Test dataset")->required()->check(CLI::ExistingFile);
  e->add_option("--analyses", ev.analyses, "Comma list of accuracy,horizon,robustness,coverage or all")
      ->capture_default_str();
  e->add_flag("--holdout", ev.holdout, "Use only the validation split of the dataset");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict a space-time grid from one input set");
  add_common(p, pr.common);
  p->add_option("--checkpoint", pr.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--input", pr.input, "Input set CSV with header x,t,id,rho,v (model time frame)")
      ->check(CLI::ExistingFile);
  p->add_option("--dataset", pr.dataset, "Take the input window from a dataset scenario")->check(CLI::ExistingFile);
  p->add_option("--scenario", pr.scenario, "Scenario index for --dataset")->capture_default_str();
  p->add_option("--t-c", pr.t_c, "Reference time for --dataset (default: delta_past)");
  p->add_option("--grid", pr.grid, "Query grid NXxNT over the model box")->capture_default_str();
  p->add_flag("--drop-probes", pr.drop_probes, "Keep only boundary-control rows");
  p->add_option("--file", pr.file, "Output file name inside --out")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 1;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_predict(pr);
  } catch (const training::DivergenceError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const ad::DomainError& err) {
    std::cerr << "numerical error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
