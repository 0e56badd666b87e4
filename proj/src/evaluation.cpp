#include "ontraffic/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ontraffic/parallel.hpp"
#include "ontraffic/training.hpp"

namespace ontraffic::evaluation {

namespace {

constexpr std::uint64_t kStageTest = 30;
constexpr std::uint64_t kStageSweep = 31;

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f.precision(10);
  return f;
}

}  // namespace

BoxStats box_stats(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("box_stats: no values");
  std::sort(values.begin(), values.end());
  BoxStats b;
  b.min = values.front();
  b.max = values.back();
  b.q1 = quantile(values, 0.25);
  b.median = quantile(values, 0.5);
  b.q3 = quantile(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_lo = *std::find_if(values.begin(), values.end(), [&](double x) { return x >= lo; });
  b.whisker_hi = *std::find_if(values.rbegin(), values.rend(), [&](double x) { return x <= hi; });
  return b;
}

std::vector<TrainingSample> test_samples(std::span<const Scenario> scenarios, const pipeline::WindowConfig& w,
                                         std::uint64_t seed, bool temporal_shift) {
  std::vector<TrainingSample> out;
  out.reserve(scenarios.size());
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    Rng rng = make_rng(seed, {kStageTest, i});
    const double hi = scenarios[i].duration() - w.delta_pred;
    if (hi < w.delta_past) throw std::invalid_argument("test_samples: scenario " + std::to_string(i) + " too short");
    out.push_back(training::window(scenarios[i], uniform(rng, w.delta_past, hi), w, temporal_shift));
  }
  return out;
}

std::vector<net::PredictionField> predict_all(const net::ModelParams& params, std::span<const TrainingSample> samples,
                                              std::size_t workers) {
  std::vector<net::PredictionField> out(samples.size());
  parallel_for(samples.size(), workers,
               [&](std::size_t i) { out[i] = net::predict(params, samples[i].input, samples[i].queries); });
  return out;
}

MetricRecord score(std::span<const net::PredictionField> preds, std::span<const TrainingSample> samples,
                   const std::string& tag) {
  if (samples.empty()) throw std::invalid_argument("score: empty test set");
  if (preds.size() != samples.size()) throw std::invalid_argument("score: prediction/sample count mismatch");
  MetricRecord r;
  r.tag = tag;
  r.scenario_count = samples.size();
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& p = preds[s];
    const auto& t = samples[s].targets;
    if (p.size() != t.size()) throw std::invalid_argument("score: prediction/target length mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double er = p.rho[i] - t[i][0], ev = p.v[i] - t[i][1];
      se += er * er + ev * ev;
      r.mae += std::abs(er) + std::abs(ev);
      r.mse_rho += er * er;
      r.mae_rho += std::abs(er);
    }
    r.mse += se;
    r.query_count += t.size();
    r.per_scenario_mse.push_back(t.empty() ? 0.0 : se / static_cast<double>(t.size()));
  }
  if (r.query_count == 0) throw std::invalid_argument("score: no query points");
  const double n = static_cast<double>(r.query_count);
  r.mse /= n;
  r.mae /= n;
  r.mse_rho /= n;
  r.mae_rho /= n;
  r.box = box_stats(r.per_scenario_mse);
  return r;
}

MetricRecord accuracy_table(const net::ModelParams& params, std::span<const TrainingSample> samples,
                            const std::string& tag, std::size_t workers) {
  if (samples.empty()) throw std::invalid_argument("accuracy_table: empty test set");
  return score(predict_all(params, samples, workers), samples, tag);
}

// ---- receding horizon -------------------------------------------------------

double HorizonCurve::spread() const {
  if (mse_shifted.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(mse_shifted.begin(), mse_shifted.end());
  const double mean = std::accumulate(mse_shifted.begin(), mse_shifted.end(), 0.0) / static_cast<double>(mse_shifted.size());
  return (*hi - *lo) / mean;
}

double HorizonCurve::pass_fraction(double max_spread) const {
  if (scenario_shifted.empty()) return 0.0;
  std::size_t pass = 0;
  for (std::size_t s = 0; s < scenario_shifted.size(); ++s) {
    const auto& a = scenario_shifted[s];
    const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    bool beats = true;
    if (!scenario_baseline.empty()) {
      const auto& b = scenario_baseline[s];
      beats = std::accumulate(a.begin() + 1, a.end(), 0.0) < std::accumulate(b.begin() + 1, b.end(), 0.0);
    }
    if ((*hi - *lo) / mean < max_spread && beats) ++pass;
  }
  return static_cast<double>(pass) / static_cast<double>(scenario_shifted.size());
}

HorizonCurve receding_horizon_eval(const net::ModelParams& shifted, const net::ModelParams* baseline,
                                   std::span<const Scenario> scenarios, const pipeline::WindowConfig& w, double t_c0,
                                   double delta_h, std::size_t shifts, std::size_t workers) {
  if (scenarios.empty()) throw std::invalid_argument("receding_horizon_eval: no scenarios");
  if (!(delta_h > 0.0)) throw std::invalid_argument("receding_horizon_eval: delta_h must be > 0");
  if (t_c0 < w.delta_past) throw std::invalid_argument("receding_horizon_eval: t_c0 precedes the history window");
  const double last = t_c0 + static_cast<double>(shifts) * delta_h + w.delta_pred;
  for (std::size_t i = 0; i < scenarios.size(); ++i)
    if (scenarios[i].duration() + 1e-9 < last)
      throw std::invalid_argument("receding_horizon_eval: scenario " + std::to_string(i) + " lasts " +
                                  std::to_string(scenarios[i].duration()) + " min, " + std::to_string(shifts) +
                                  " shifts need " + std::to_string(last));
  HorizonCurve c;
  const std::size_t n = scenarios.size(), J = shifts + 1;
  c.scenario_shifted.assign(n, std::vector<double>(J));
  if (baseline) c.scenario_baseline.assign(n, std::vector<double>(J));
  for (std::size_t j = 0; j < J; ++j) {
    const double t_c = t_c0 + static_cast<double>(j) * delta_h;
    std::vector<TrainingSample> rel(n), abs(n);
    for (std::size_t i = 0; i < n; ++i) {
      rel[i] = pipeline::shift_to(scenarios[i], t_c, w);
      abs[i] = pipeline::unshift(rel[i]);
    }
    const auto a = score(predict_all(shifted, rel, workers), rel);
    c.t_c.push_back(t_c);
    c.mse_shifted.push_back(a.mse);
    for (std::size_t i = 0; i < n; ++i) c.scenario_shifted[i][j] = a.per_scenario_mse[i];
    if (baseline) {
      const auto b = score(predict_all(*baseline, abs, workers), abs);
      c.mse_baseline.push_back(b.mse);
      for (std::size_t i = 0; i < n; ++i) c.scenario_baseline[i][j] = b.per_scenario_mse[i];
    }
  }
  return c;
}

// ---- robustness ---------------------------------------------------------------

std::string to_string(Axis a) {
  switch (a) {
    case Axis::kNoise: return "noise";
    case Axis::kDropout: return "dropout";
    case Axis::kHistory: return "history";
  }
  return "?";
}

Axis axis_from_string(const std::string& s) {
  if (s == "noise") return Axis::kNoise;
  if (s == "dropout") return Axis::kDropout;
  if (s == "history") return Axis::kHistory;
  throw std::invalid_argument("unknown robustness axis '" + s + "' (expected noise, dropout or history)");
}

std::vector<MetricRecord> robustness_sweep(const net::ModelParams& params, std::span<const TrainingSample> samples,
                                           Axis axis, std::span<const double> values, std::uint64_t seed,
                                           std::size_t workers) {
  if (!std::is_sorted(values.begin(), values.end()))
    throw std::invalid_argument("robustness_sweep: values must be sorted ascending");
  for (const auto& s : samples)
    if (!s.shifted) throw std::invalid_argument("robustness_sweep: samples must be in shifted time");
  const double x_min = params.config.x_min, x_max = params.config.x_max;
  std::vector<MetricRecord> out;
  for (double value : values) {
    std::vector<TrainingSample> mod(samples.begin(), samples.end());
    parallel_for(mod.size(), workers, [&](std::size_t i) {
      Rng rng = make_rng(seed, {kStageSweep, static_cast<std::uint64_t>(axis), i});
      switch (axis) {
        case Axis::kNoise: {
          pipeline::Corruption c;
          c.position_sigma = value / 1000.0;
          c.density_sigma = value / 1000.0;
          mod[i].input = pipeline::corrupt(mod[i].input, rng, c, x_min, x_max);
          break;
        }
        case Axis::kDropout: {
          pipeline::Corruption c;
          c.mask_fraction = value;
          mod[i].input = pipeline::corrupt(mod[i].input, rng, c, x_min, x_max);
          break;
        }
        case Axis::kHistory:
          mod[i].input = pipeline::restrict_history(mod[i].input, value);
          break;
      }
    });
    auto r = score(predict_all(params, mod, workers), mod, to_string(axis));
    r.param = to_string(axis);
    r.value = value;
    out.push_back(std::move(r));
  }
  return out;
}

// ---- calibration ----------------------------------------------------------------

double expected_coverage(double k) { return std::erf(k / std::sqrt(2.0)); }

CoverageCurve coverage_from(std::span<const double> rho_hat, std::span<const double> sigma,
                            std::span<const double> rho_true, std::span<const double> ks) {
  if (rho_hat.size() != sigma.size() || rho_hat.size() != rho_true.size())
    throw std::invalid_argument("coverage: column lengths differ");
  CoverageCurve c;
  c.n = rho_hat.size();
  // Ratio |e| / sigma per point; coverage at k is the share of ratios <= k.
  std::vector<double> ratio(c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    if (!(sigma[i] > 0.0)) throw std::invalid_argument("coverage: non-positive sigma at point " + std::to_string(i));
    ratio[i] = std::abs(rho_hat[i] - rho_true[i]) / sigma[i];
  }
  std::sort(ratio.begin(), ratio.end());
  for (double k : ks) {
    c.k.push_back(k);
    c.expected.push_back(expected_coverage(k));
    const auto hits = std::upper_bound(ratio.begin(), ratio.end(), k) - ratio.begin();
    c.observed.push_back(c.n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(c.n));
  }
  return c;
}

RhoColumns rho_columns(std::span<const net::PredictionField> preds, std::span<const TrainingSample> samples) {
  if (preds.size() != samples.size()) throw std::invalid_argument("rho_columns: prediction/sample count mismatch");
  RhoColumns c;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    c.rho_hat.insert(c.rho_hat.end(), preds[s].rho.begin(), preds[s].rho.end());
    c.sigma.insert(c.sigma.end(), preds[s].sigma_rho.begin(), preds[s].sigma_rho.end());
    for (const auto& t : samples[s].targets) c.rho_true.push_back(t[0]);
  }
  return c;
}

CoverageCurve coverage_curve(const net::ModelParams& params, std::span<const TrainingSample> samples,
                             std::span<const double> ks, std::size_t workers) {
  const auto cols = rho_columns(predict_all(params, samples, workers), samples);
  return coverage_from(cols.rho_hat, cols.sigma, cols.rho_true, ks);
}

std::vector<CoverageBin> binned_coverage(std::span<const double> rho_hat, std::span<const double> sigma,
                                         std::span<const double> rho_true, std::span<const double> ks,
                                         std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("binned_coverage: bins must be >= 1");
  if (rho_hat.size() != sigma.size() || rho_hat.size() != rho_true.size())
    throw std::invalid_argument("coverage: column lengths differ");
  const std::size_t n = sigma.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] < sigma[b]; });
  std::vector<CoverageBin> out;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
    if (lo == hi) continue;
    std::vector<double> h, s, t;
    for (std::size_t k = lo; k < hi; ++k) {
      h.push_back(rho_hat[order[k]]);
      s.push_back(sigma[order[k]]);
      t.push_back(rho_true[order[k]]);
    }
    out.push_back({s.front(), s.back(), coverage_from(h, s, t, ks)});
  }
  return out;
}

// ---- analysis settings ------------------------------------------------------------

EvalConfig::EvalConfig() {
  for (int i = 0; i <= 30; ++i) k.push_back(i / 10.0);
}

void EvalConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("eval config '" + key + "': " + why);
  };
  if (!(t_c0 >= 0.0)) fail("t_c0", "must be >= 0");
  if (!(delta_h > 0.0)) fail("delta_h", "must be > 0");
  if (shifts == 0) fail("shifts", "must be >= 1");
  auto sorted = [&](const std::vector<double>& v, const char* key) {
    if (v.empty()) fail(key, "must not be empty");
    if (!std::is_sorted(v.begin(), v.end())) fail(key, "must be sorted ascending");
  };
  sorted(noise_m, "noise_m");
  sorted(dropout, "dropout");
  sorted(history, "history");
  sorted(k, "k");
  if (noise_m.front() < 0.0) fail("noise_m", "must be >= 0");
  if (dropout.front() < 0.0 || dropout.back() >= 1.0) fail("dropout", "must lie in [0, 1)");
  if (!(history.front() > 0.0)) fail("history", "must be > 0");
  if (k.front() < 0.0) fail("k", "must be >= 0");
  if (coverage_bins == 0) fail("coverage_bins", "must be >= 1");
}

// ---- output ---------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRecord> records) {
  auto f = open_csv(path);
  f << "tag,param,value,scenarios,queries,mse,mae,mse_rho,mae_rho,median,q1,q3,whisker_lo,whisker_hi,min,max\n";
  for (const auto& r : records)
    f << r.tag << ',' << r.param << ',' << r.value << ',' << r.scenario_count << ',' << r.query_count << ',' << r.mse
      << ',' << r.mae << ',' << r.mse_rho << ',' << r.mae_rho << ',' << r.box.median << ',' << r.box.q1 << ','
      << r.box.q3 << ',' << r.box.whisker_lo << ',' << r.box.whisker_hi << ',' << r.box.min << ',' << r.box.max
      << '\n';
}

void write_horizon_csv(const std::filesystem::path& path, const HorizonCurve& c) {
  auto f = open_csv(path);
  f << "shift,t_c,mse_shifted,mse_baseline\n";
  for (std::size_t j = 0; j < c.t_c.size(); ++j) {
    f << j << ',' << c.t_c[j] << ',' << c.mse_shifted[j] << ',';
    if (j < c.mse_baseline.size()) f << c.mse_baseline[j];
    f << '\n';
  }
}

void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& c) {
  auto f = open_csv(path);
  f << "k,expected,observed,n\n";
  for (std::size_t i = 0; i < c.k.size(); ++i)
    f << c.k[i] << ',' << c.expected[i] << ',' << c.observed[i] << ',' << c.n << '\n';
}

void write_binned_coverage_csv(const std::filesystem::path& path, std::span<const CoverageBin> bins) {
  auto f = open_csv(path);
  f << "bin,sigma_lo,sigma_hi,k,expected,observed,n\n";
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& c = bins[b].curve;
    for (std::size_t i = 0; i < c.k.size(); ++i)
      f << b << ',' << bins[b].sigma_lo << ',' << bins[b].sigma_hi << ',' << c.k[i] << ',' << c.expected[i] << ','
        << c.observed[i] << ',' << c.n << '\n';
  }
}

}  // namespace ontraffic::evaluation
