#pragma once

// Single-lane IDM car-following simulator with a downstream traffic light.
// Units: km and min. Normalized outputs divide densities by the jam density
// 1 / (s0 + vehicle_length) and speeds by v0.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ontraffic/lwr.hpp"
#include "ontraffic/rng.hpp"

namespace ontraffic::idm {

struct IdmParams {
  double a = 0.73 * 3.6;       // max acceleration, km/min^2 (0.73 m/s^2)
  double b = 1.67 * 3.6;       // comfortable deceleration, km/min^2 (1.67 m/s^2)
  double v0 = 1.0;             // desired speed, km/min
  double s0 = 0.002;           // minimum jam gap, km
  double time_headway = 0.025; // desired time headway, min (1.5 s)
  double vehicle_length = 0.005;

  double jam_spacing() const { return s0 + vehicle_length; }
  double jam_density() const { return 1.0 / jam_spacing(); }
  void validate() const;
};

struct VehicleState {
  double position = 0.0;  // front bumper, km
  double speed = 0.0;     // km/min
  std::int64_t id = 0;
  bool is_probe = false;
};

/// IDM acceleration with the standard desired-gap closure
/// s* = s0 + v T + v dv / (2 sqrt(a b)). Throws std::domain_error when the
/// gap to the leader is not positive.
double idm_acceleration(const VehicleState& me, const std::optional<VehicleState>& leader, const IdmParams& p);

/// Normalized per-vehicle density from spacing; `vehicles` ordered front to
/// back. The frontmost vehicle uses its rear gap; a lone vehicle reads 0.
std::vector<double> estimate_local_density(std::span<const VehicleState> vehicles, const IdmParams& p);

struct SimulationConfig {
  double inflow_rate = 12.0;  // mean Poisson arrivals, veh/min
  double road_length = 1.0;   // km; stop line at the road end
  double t_end = 20.0;
  double dt = 1.0 / 600.0;    // 0.1 s
  double record_interval = 5.0 / 60.0;
  std::size_t n_cells = 50;
  /// Insertion speed as a fraction of min(v0, speed of the last vehicle).
  double insertion_speed_fraction = 1.0;
  /// Stop inserting after this many vehicles (0 = unlimited).
  std::size_t max_vehicles = 0;
  IdmParams params;
};

struct TrajectoryPoint {
  double t;
  double position;
  double speed;    // normalized by v0
  double density;  // normalized by jam density
};

struct VehicleTrack {
  std::int64_t id;
  std::vector<TrajectoryPoint> points;
};

struct SimulationStats {
  std::size_t entered = 0;
  std::size_t exited = 0;
  std::size_t collisions = 0;
  std::size_t red_violations = 0;
  std::size_t conservation_violations = 0;
  double min_gap = 0.0;  // smallest bumper gap seen, km (+inf if never two vehicles)
};

struct SimulationResult {
  std::vector<VehicleTrack> tracks;
  std::vector<double> record_times;
  /// Edie-aggregated normalized fields, row-major [record][cell].
  std::vector<double> rho;
  std::vector<double> v;
  std::vector<double> cell_centers;
  /// Stop-line state per record.
  std::vector<std::uint8_t> red;
  SimulationStats stats;
  /// Positions of stopped vehicles queued behind the line, per record:
  /// (head, tail) or (NaN, NaN) when no queue.
  std::vector<std::pair<double, double>> queue_extent;
};

/// Runs the simulation; the light is red whenever `light.red_at(t)`.
SimulationResult simulate(const SimulationConfig& cfg, const lwr::BoundarySchedule& light, Rng& rng);

}  // namespace ontraffic::idm
