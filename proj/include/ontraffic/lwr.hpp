#pragma once

// LWR conservation law on a single road, solved with the Godunov scheme.
//
// Units: position in km, time in min. Density and velocity are normalized to
// [0, 1]; the normalized flux f(rho) = rho (1 - rho) is in km/min of free-flow
// speed, i.e. v = 1 corresponds to 1 km/min.

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ontraffic/rng.hpp"

namespace ontraffic::lwr {

class CflError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Greenshields fundamental diagram in normalized units.
inline double flux(double rho) { return rho * (1.0 - rho); }
inline double velocity(double rho) { return 1.0 - rho; }
inline double max_wave_speed() { return 1.0; }

struct Grid {
  double x_min = 0.0;
  double x_max = 5.0;
  std::size_t n_cells = 100;
  double t_end = 20.0;
  double dt = 0.025;
  /// Spacing of stored snapshots; must be an integer multiple of dt.
  double snapshot_interval = 5.0 / 60.0;

  double dx() const { return (x_max - x_min) / static_cast<double>(n_cells); }
  double cell_center(std::size_t i) const { return x_min + (static_cast<double>(i) + 0.5) * dx(); }
  std::size_t steps_per_snapshot() const;
  std::size_t n_snapshots() const;
  /// Throws std::invalid_argument / CflError when the grid is unusable.
  void validate() const;

  /// Grid whose dt is the largest divisor of snapshot_interval satisfying
  /// dt <= cfl * dx / max|f'|.
  static Grid with_cfl(double x_min, double x_max, std::size_t n_cells, double t_end,
                       double snapshot_interval, double cfl = 0.5);
};

struct Step {
  double position;  // right edge x_k of the segment
  double height;    // Delta h_k added to rho_init on [x_{k-1}, x_k)
};

struct InitialConditionParams {
  double rho_init = 0.1;
  std::vector<Step> steps;
  double s_w_min = 0.5;
  double s_w_max = 2.0;

  double density_at(double x) const;
};

struct InitialConditionRanges {
  double rho_init = 0.1;
  double s_w_min = 0.5;
  double s_w_max = 2.0;
  double x_min = 0.0;
  double x_max = 5.0;
};

struct Phase {
  double duration;
  double level;
  bool red;
};

struct BoundarySchedule {
  std::vector<Phase> phases;
  double rho_red = 1.0;
  double rho_green = 0.0;
  double delta_min = 1.0;
  double delta_max = 2.0;

  double total_duration() const;
  /// Boundary density at time t (phases are half-open [start, end)); the last
  /// phase extends beyond the schedule end.
  double level_at(double t) const;
  bool red_at(double t) const;
};

/// Normalized density snapshots, row-major [snapshot][cell].
struct DensityField {
  Grid grid;
  std::vector<double> times;
  std::vector<double> rho;

  std::size_t n_cells() const { return grid.n_cells; }
  std::size_t n_times() const { return times.size(); }
  double at(std::size_t snapshot, std::size_t cell) const { return rho[snapshot * grid.n_cells + cell]; }
  double velocity_at(std::size_t snapshot, std::size_t cell) const { return velocity(at(snapshot, cell)); }
  /// Bilinear interpolation between cell centres and snapshots, clamped to
  /// the outermost centres/snapshots.
  double sample(double x, double t) const;
};

/// Mass bookkeeping for one conservative update.
struct StepRecord {
  std::size_t step;
  double mass_before;
  double mass_after;
  double flux_in;
  double flux_out;
  double dt;
};

InitialConditionParams sample_initial_condition(Rng& rng, const InitialConditionRanges& ranges);

BoundarySchedule sample_boundary_schedule(Rng& rng, double delta_min, double delta_max, double horizon,
                                          double rho_red = 1.0, double rho_green = 0.0);

/// Godunov numerical flux for the concave Greenshields flux.
double godunov_flux(double rho_left, double rho_right);

DensityField solve(const InitialConditionParams& ic, const BoundarySchedule& bc, const Grid& grid,
                   const std::function<void(const StepRecord&)>& observer = {});

}  // namespace ontraffic::lwr
