#pragma once

// Scenario generation and the sample pipeline: probe selection, input-set
// assembly, receding-horizon windowing with temporal shift, subsampling and
// corruption.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ontraffic/idm.hpp"
#include "ontraffic/lwr.hpp"
#include "ontraffic/rng.hpp"

namespace ontraffic::pipeline {

enum class Source : std::uint32_t { kGodunov = 0, kIdm = 1 };

std::string to_string(Source s);
Source source_from_string(const std::string& s);

/// Identifier stored in the ID coordinate of boundary-control rows.
inline constexpr double kControlId = -1.0;

struct ProbeObservation {
  double rho;
  double v;
  double y;  // km
  double t;  // min
  std::int64_t source_id;
};

/// Ground truth on a space-time lattice plus probe observations and the
/// downstream light schedule.
struct Scenario {
  Source source = Source::kGodunov;
  double x_min = 0.0;
  double x_max = 5.0;
  std::vector<double> cell_centers;
  std::vector<double> times;
  std::vector<double> rho;  // [time][cell]
  std::vector<double> v;    // [time][cell]
  lwr::BoundarySchedule schedule;
  std::vector<ProbeObservation> probes;

  std::size_t n_cells() const { return cell_centers.size(); }
  std::size_t n_times() const { return times.size(); }
  double duration() const { return times.empty() ? 0.0 : times.back(); }
  double rho_at(std::size_t ti, std::size_t ci) const { return rho[ti * n_cells() + ci]; }
  double v_at(std::size_t ti, std::size_t ci) const { return v[ti * n_cells() + ci]; }
};

/// Variable-length observation set: coords (x, t, id) and values (rho, v).
struct InputSet {
  std::vector<std::array<double, 3>> coords;
  std::vector<std::array<double, 2>> values;

  std::size_t size() const { return coords.size(); }
  bool empty() const { return coords.empty(); }
  bool is_control(std::size_t i) const { return coords[i][2] == kControlId; }
  std::size_t probe_count() const;
  std::size_t control_count() const { return size() - probe_count(); }
  void push(const std::array<double, 3>& c, const std::array<double, 2>& v) {
    coords.push_back(c);
    values.push_back(v);
  }
};

struct Query {
  double x;
  double t;
};

struct WindowConfig {
  double delta_past = 2.0;
  double delta_pred = 8.0;
  double control_spacing = 10.0 / 60.0;
};

/// One windowed training/evaluation sample. Times are relative to t_c when
/// `shifted` is true.
struct TrainingSample {
  InputSet input;
  std::vector<Query> queries;
  std::vector<std::array<double, 2>> targets;
  double t_c = 0.0;
  double delta_past = 0.0;
  double delta_pred = 0.0;
  bool shifted = false;
};

// ---- probes ---------------------------------------------------------------

/// Independent Bernoulli(probability) selection over vehicle ids.
std::vector<std::int64_t> select_probes(std::span<const std::int64_t> ids, Rng& rng, double probability);

/// Forward-Euler characteristic dy/dt = v(y, t) through a Godunov field with
/// bilinear interpolation, one step per snapshot interval. Stops when the
/// probe leaves the road or the field ends.
std::vector<ProbeObservation> trace_probe_trajectory(const lwr::DensityField& field, double x0, double t0,
                                                     std::int64_t id = 0);

/// Synthetic probes for a Godunov field: initial probes uniform at
/// rho_bar * probability per km, entries at x_min with rate
/// rho_bar * probability * v(x_min, t) per min.
std::vector<ProbeObservation> spawn_godunov_probes(const lwr::DensityField& field, Rng& rng, double rho_bar,
                                                   double probability);

// ---- windows --------------------------------------------------------------

/// Probe rows in [t_c - past, t_c]; control rows on a lattice over
/// [t_c - past, t_c + pred] at x_max. Times stay absolute.
InputSet build_input_set(std::span<const ProbeObservation> probes, const lwr::BoundarySchedule& schedule,
                         double x_max, double t_c, const WindowConfig& w);

std::size_t control_lattice_size(const WindowConfig& w);

/// Window at reference time t_c with targets on every lattice point inside
/// [t_c - past, t_c + pred], shifted so t_c maps to 0.
TrainingSample shift_to(const Scenario& s, double t_c, const WindowConfig& w);

/// Algorithm-1 step for one scenario: t_c ~ U[past, T - pred], then shift_to.
TrainingSample random_temporal_shift(const Scenario& s, Rng& rng, const WindowConfig& w);
std::vector<TrainingSample> random_temporal_shift(std::span<const Scenario> dataset, Rng& rng,
                                                  const WindowConfig& w);

/// Adds t_c back to every time coordinate.
TrainingSample unshift(const TrainingSample& sample);

/// Keeps a U[keep_min, keep_max] fraction of probe rows (controls always
/// kept) and draws n_queries targets without replacement.
TrainingSample subsample(const TrainingSample& sample, Rng& rng, double keep_min, double keep_max,
                         std::size_t n_queries);

struct Corruption {
  double position_sigma = 0.0;  // km
  double density_sigma = 0.0;   // normalized
  double mask_fraction = 0.0;   // in [0, 1)
};

/// Gaussian noise on probe positions/densities (clamped to the road and
/// [0, 1]) and removal of ceil(mask_fraction * m_probe) probe rows.
InputSet corrupt(const InputSet& input, Rng& rng, const Corruption& c, double x_min, double x_max);

/// Re-windows the probe rows of a shifted sample to a shorter history.
InputSet restrict_history(const InputSet& input, double delta_past);

// ---- scenario generation --------------------------------------------------

struct GenerationConfig {
  Source source = Source::kGodunov;
  std::size_t scenario_count = 100;
  double x_min = 0.0;
  double x_max = 5.0;
  std::size_t n_cells = 100;
  double t_end = 20.0;
  double snapshot_interval = 5.0 / 60.0;
  double rho_bar = 40.0;
  double probe_probability = 0.03;
  double delta_min = 1.0;
  double delta_max = 2.0;
  double rho_red = 1.0;
  double rho_green = 0.0;
  double rho_init = 0.1;
  double s_w_min = 0.5;
  double s_w_max = 2.0;
  double cfl = 0.5;
  double idm_inflow_rate = 12.0;
  double idm_warmup = 3.0;
  WindowConfig windows;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending key.
  void validate() const;
  /// Preset for the IDM family (1 km road, 50 cells).
  static GenerationConfig idm_defaults();
};

Scenario make_godunov_scenario(Rng& rng, const GenerationConfig& cfg);
/// `stats` (optional) receives the simulator invariant counters.
Scenario make_idm_scenario(Rng& rng, const GenerationConfig& cfg, idm::SimulationStats* stats = nullptr);

/// Rounds every stored value to float32 so the in-memory scenario matches
/// its serialized form bit for bit.
void quantize(Scenario& s);

/// Schedule re-referenced to start at `offset` minutes.
lwr::BoundarySchedule trim_schedule(const lwr::BoundarySchedule& s, double offset);

}  // namespace ontraffic::pipeline
