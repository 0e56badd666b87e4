#pragma once

// Losses, Adam and the epoch loop with per-epoch temporal shifts and
// subsampling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ontraffic/dataset.hpp"
#include "ontraffic/net.hpp"

namespace ontraffic::training {

using pipeline::Scenario;
using pipeline::TrainingSample;
using Targets = std::span<const std::array<double, 2>>;

/// kJoint: one Gaussian with variance sigma_rho^2 + sigma_v^2 over the error
/// norm. kDiagonal: independent Gaussians per component.
enum class NllMode { kJoint, kDiagonal };

std::string to_string(NllMode m);
NllMode nll_mode_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t epochs = 100;
  /// Leading share of epochs trained with MSE before switching to NLL.
  double warmup_fraction = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double val_fraction = 0.2;
  double keep_min = 0.2;
  double keep_max = 1.0;
  std::size_t n_queries = 512;
  /// Queries per validation scenario (fixed across epochs).
  std::size_t val_queries = 1024;
  /// false: every window sits at t_c = delta_past in absolute time (the
  /// no-shift baseline).
  bool temporal_shift = true;
  NllMode nll_mode = NllMode::kJoint;
  /// Rescale the batch gradient to this global L2 norm when it is larger;
  /// 0 disables clipping.
  double clip_norm = 0.0;
  std::size_t workers = 1;

  /// Throws std::invalid_argument naming the offending key.
  void validate() const;
  std::size_t warmup_epochs() const;
};

/// Model coordinate box for a dataset: the road, and the window in relative
/// time ([-past, pred]) or absolute time ([0, past + pred]) for the baseline.
net::ModelConfig fit_model_box(net::ModelConfig model, const pipeline::GenerationConfig& data, bool temporal_shift);

// ---- losses -------------------------------------------------------------------

/// Mean over samples of (rho_hat - rho)^2 + (v_hat - v)^2.
double mse_loss(const net::PredictionField& pred, Targets targets);
/// Mean over samples of |e|^2 / s + log(2 pi s) with s = sigma_rho^2 + sigma_v^2
/// (joint), or the per-component sum (diagonal).
double nll_loss(const net::PredictionField& pred, Targets targets, NllMode mode = NllMode::kJoint);

/// Tape versions; return the sum (not the mean) over queries so that batch
/// means can be formed across samples of different size.
ad::Var mse_sum(const net::BoundModel::Outputs& out, Targets targets);
ad::Var nll_sum(const net::BoundModel::Outputs& out, Targets targets, NllMode mode);

/// Mean over samples of |rho_hat - rho| + |v_hat - v|.
double mae_loss(const net::PredictionField& pred, Targets targets);

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  static AdamState zeros(const net::ModelParams& params);
};

/// Bias-corrected Adam; `grads` aligned with ModelParams::named().
void adam_step(net::ModelParams& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const TrainConfig& cfg);

// ---- training loop --------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  /// Largest batch gradient norm of the epoch, before clipping.
  double grad_norm = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  double wall_seconds = 0.0;
  std::string checkpoint;
};

struct TrainOptions {
  /// CSV epoch log (epoch, train_mse, val_mse, train_nll, val_nll,
  /// grad_norm, seconds).
  std::filesystem::path log_csv;
  /// Checkpoint rewritten after every epoch: best parameters, plus the
  /// current parameters and Adam moments for resuming.
  std::filesystem::path checkpoint;
  /// Continue from a checkpoint written by a previous run.
  std::optional<net::Checkpoint> resume;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  net::ModelParams params;  // best-validation parameters
  net::ModelParams last;    // parameters after the final epoch
  TrainReport report;
};

/// Windowed sample at reference time t_c in the model's time frame: shifted
/// (relative) when `temporal_shift`, absolute otherwise.
TrainingSample window(const Scenario& s, double t_c, const pipeline::WindowConfig& w, bool temporal_shift);

/// Fixed validation samples: one window per scenario with all probe rows.
std::vector<TrainingSample> validation_samples(std::span<const Scenario> scenarios, const TrainConfig& cfg,
                                               const pipeline::WindowConfig& w);

struct LossTotals {
  double mse = 0.0;
  double nll = 0.0;
  double mae = 0.0;
  std::size_t queries = 0;
};

/// Query-weighted mean losses over samples using the inference path.
LossTotals evaluate(const net::ModelParams& params, std::span<const TrainingSample> samples, NllMode mode,
                    std::size_t workers = 1);

TrainResult train(std::span<const Scenario> train_set, std::span<const Scenario> val_set,
                  const pipeline::WindowConfig& windows, const net::ModelConfig& model, const TrainConfig& cfg,
                  const TrainOptions& options = {});

/// Splits the dataset contiguously by cfg.train_fraction and trains.
TrainResult train(const pipeline::Dataset& data, const net::ModelConfig& model, const TrainConfig& cfg,
                  const TrainOptions& options = {});

}  // namespace ontraffic::training
