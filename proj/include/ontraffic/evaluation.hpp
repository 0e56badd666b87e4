#pragma once

// Accuracy tables, receding-horizon curves, robustness sweeps and coverage
// calibration, plus CSV writers for each.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ontraffic/net.hpp"
#include "ontraffic/scenario.hpp"

namespace ontraffic::evaluation {

using pipeline::Scenario;
using pipeline::TrainingSample;

/// Median, quartiles (linear interpolation) and 1.5 IQR whiskers clipped to
/// the data.
struct BoxStats {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
  double whisker_lo = 0.0;
  double whisker_hi = 0.0;
};
BoxStats box_stats(std::vector<double> values);

struct MetricRecord {
  std::string tag;
  std::size_t scenario_count = 0;
  std::size_t query_count = 0;
  /// Over both components: mean of |e|^2 and of |e_rho| + |e_v|.
  double mse = 0.0;
  double mae = 0.0;
  /// Density component only.
  double mse_rho = 0.0;
  double mae_rho = 0.0;
  std::string param;
  double value = 0.0;
  std::vector<double> per_scenario_mse;
  BoxStats box;
};

/// One full-resolution window per scenario: t_c drawn from `seed`, every
/// probe row and every target kept.
std::vector<TrainingSample> test_samples(std::span<const Scenario> scenarios, const pipeline::WindowConfig& w,
                                         std::uint64_t seed, bool temporal_shift = true);

std::vector<net::PredictionField> predict_all(const net::ModelParams& params, std::span<const TrainingSample> samples,
                                              std::size_t workers = 1);

/// Metrics from predictions alone (pooled over all queries of all samples).
MetricRecord score(std::span<const net::PredictionField> preds, std::span<const TrainingSample> samples,
                   const std::string& tag = "");

MetricRecord accuracy_table(const net::ModelParams& params, std::span<const TrainingSample> samples,
                            const std::string& tag, std::size_t workers = 1);

// ---- receding horizon -------------------------------------------------------

struct HorizonCurve {
  std::vector<double> t_c;
  std::vector<double> mse_shifted;   // pooled per shift
  std::vector<double> mse_baseline;
  std::vector<std::vector<double>> scenario_shifted;  // [scenario][shift]
  std::vector<std::vector<double>> scenario_baseline;
  /// (max - min) / mean of the pooled shifted curve.
  double spread() const;
  /// Share of scenarios whose own curve has spread < max_spread and whose
  /// mean over shifts j >= 1 is below the baseline's.
  double pass_fraction(double max_spread = 0.5) const;
};

/// Evaluates both models at t_c = t_c0 + j * delta_h for j = 0..shifts,
/// rebuilding the input window each time. The shift-trained model sees
/// relative time, the baseline absolute time. Without a baseline the
/// baseline columns stay empty and only the spread enters pass_fraction.
HorizonCurve receding_horizon_eval(const net::ModelParams& shifted, const net::ModelParams* baseline,
                                   std::span<const Scenario> scenarios, const pipeline::WindowConfig& w, double t_c0,
                                   double delta_h, std::size_t shifts, std::size_t workers = 1);

// ---- robustness ---------------------------------------------------------------

enum class Axis { kNoise, kDropout, kHistory };
std::string to_string(Axis a);
Axis axis_from_string(const std::string& s);

/// Noise values are sigma_n in metres, applied to probe positions (sigma_n
/// / 1000 km) and densities (sigma_n / 1000 normalized). Dropout values are
/// mask fractions; history values are delta_past in minutes (targets keep
/// the full window). Samples must be shifted. Each scenario uses one random
/// stream across all values.
std::vector<MetricRecord> robustness_sweep(const net::ModelParams& params, std::span<const TrainingSample> samples,
                                           Axis axis, std::span<const double> values, std::uint64_t seed,
                                           std::size_t workers = 1);

// ---- calibration ----------------------------------------------------------------

/// 2 Phi(k) - 1.
double expected_coverage(double k);

struct CoverageCurve {
  std::vector<double> k;
  std::vector<double> expected;
  std::vector<double> observed;
  std::size_t n = 0;
};

/// Share of points with |rho_hat - rho| <= k sigma_rho.
CoverageCurve coverage_from(std::span<const double> rho_hat, std::span<const double> sigma,
                            std::span<const double> rho_true, std::span<const double> ks);
CoverageCurve coverage_curve(const net::ModelParams& params, std::span<const TrainingSample> samples,
                             std::span<const double> ks, std::size_t workers = 1);

/// Coverage within quantile bins of the predicted sigma.
struct CoverageBin {
  double sigma_lo = 0.0;
  double sigma_hi = 0.0;
  CoverageCurve curve;
};
std::vector<CoverageBin> binned_coverage(std::span<const double> rho_hat, std::span<const double> sigma,
                                         std::span<const double> rho_true, std::span<const double> ks,
                                         std::size_t bins = 10);

/// Flattened density predictions and targets of a set of samples.
struct RhoColumns {
  std::vector<double> rho_hat, sigma, rho_true;
};
RhoColumns rho_columns(std::span<const net::PredictionField> preds, std::span<const TrainingSample> samples);

// ---- analysis settings ------------------------------------------------------------

struct EvalConfig {
  double t_c0 = 2.0;
  double delta_h = 1.0;
  std::size_t shifts = 5;
  std::vector<double> noise_m{0.0, 10.0, 20.0, 30.0, 50.0, 100.0};
  std::vector<double> dropout{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<double> history{0.25, 0.5, 1.0, 1.5, 2.0};
  /// k grid of the coverage curve; the verdict uses the points listed in
  /// coverage_check.
  std::vector<double> k;
  std::vector<double> coverage_check{0.5, 1.0, 1.5, 2.0};
  std::size_t coverage_bins = 10;

  EvalConfig();
  void validate() const;
};

// ---- output ---------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRecord> records);
void write_horizon_csv(const std::filesystem::path& path, const HorizonCurve& curve);
void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& curve);
void write_binned_coverage_csv(const std::filesystem::path& path, std::span<const CoverageBin> bins);

}  // namespace ontraffic::evaluation
