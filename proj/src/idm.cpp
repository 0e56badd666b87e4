#include "ontraffic/idm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace ontraffic::idm {

namespace {

// Bumper gap kept between a vehicle and whatever is in front of it when a
// step would otherwise close the gap completely (1 cm).
constexpr double kGuardGap = 1e-5;
constexpr double kStoppedSpeed = 1e-3;

}  // namespace

void IdmParams::validate() const {
  if (!(a > 0 && b > 0 && v0 > 0 && s0 > 0 && time_headway > 0 && vehicle_length > 0)) {
    throw std::invalid_argument("idm: all parameters must be strictly positive");
  }
}

double idm_acceleration(const VehicleState& me, const std::optional<VehicleState>& leader, const IdmParams& p) {
  const double v = me.speed;
  const double free_term = std::pow(v / p.v0, 4);
  if (!leader) return p.a * (1.0 - free_term);
  const double gap = leader->position - me.position - p.vehicle_length;
  if (!(gap > 0.0)) {
    std::ostringstream os;
    os << "idm_acceleration: non-positive gap " << gap << " km between vehicles " << me.id << " and "
       << leader->id;
    throw std::domain_error(os.str());
  }
  const double dv = v - leader->speed;
  const double s_star = p.s0 + v * p.time_headway + v * dv / (2.0 * std::sqrt(p.a * p.b));
  const double ratio = s_star / gap;
  return p.a * (1.0 - free_term - ratio * ratio);
}

std::vector<double> estimate_local_density(std::span<const VehicleState> vehicles, const IdmParams& p) {
  std::vector<double> out(vehicles.size(), 0.0);
  const double l = p.vehicle_length;
  auto from_gap = [&](double gap) { return std::clamp(p.jam_spacing() / (gap + l), 0.0, 1.0); };
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    if (i > 0) {
      out[i] = from_gap(vehicles[i - 1].position - l - vehicles[i].position);
    } else if (vehicles.size() > 1) {
      out[i] = from_gap(vehicles[0].position - l - vehicles[1].position);
    }
  }
  return out;
}

SimulationResult simulate(const SimulationConfig& cfg, const lwr::BoundarySchedule& light, Rng& rng) {
  const IdmParams& p = cfg.params;
  p.validate();
  if (!(cfg.dt > 0.0) || cfg.dt > 0.1 / 60.0 + 1e-15) {
    throw std::invalid_argument("idm simulate: dt must be in (0, 0.1 s]");
  }
  if (cfg.n_cells < 1 || !(cfg.road_length > 0.0)) throw std::invalid_argument("idm simulate: bad road");
  const double stop_line = cfg.road_length;
  const std::size_t n_steps = static_cast<std::size_t>(std::llround(cfg.t_end / cfg.dt));
  const std::size_t per_record = static_cast<std::size_t>(std::llround(cfg.record_interval / cfg.dt));
  if (per_record == 0) throw std::invalid_argument("idm simulate: record interval shorter than dt");
  const double dx = cfg.road_length / static_cast<double>(cfg.n_cells);

  SimulationResult res;
  res.stats.min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cfg.n_cells; ++c) res.cell_centers.push_back((static_cast<double>(c) + 0.5) * dx);

  std::vector<VehicleState> road;  // front (index 0) to back
  std::unordered_map<std::int64_t, std::size_t> track_index;
  std::exponential_distribution<double> inter_arrival(cfg.inflow_rate > 0.0 ? cfg.inflow_rate : 1.0);
  double next_arrival = cfg.inflow_rate > 0.0 ? inter_arrival(rng) : std::numeric_limits<double>::infinity();
  std::size_t pending = 0;
  std::size_t arrivals = 0;
  std::int64_t next_id = 0;

  std::vector<double> time_in_cell(cfg.n_cells, 0.0), dist_in_cell(cfg.n_cells, 0.0);

  auto record = [&](double t) {
    res.record_times.push_back(t);
    const double window = cfg.record_interval;
    for (std::size_t c = 0; c < cfg.n_cells; ++c) {
      const double area = dx * window;
      const double dens = time_in_cell[c] / area;  // veh/km
      res.rho.push_back(std::clamp(dens / p.jam_density(), 0.0, 1.0));
      res.v.push_back(time_in_cell[c] > 0.0 ? std::clamp(dist_in_cell[c] / time_in_cell[c] / p.v0, 0.0, 1.0) : 1.0);
      time_in_cell[c] = 0.0;
      dist_in_cell[c] = 0.0;
    }
    res.red.push_back(light.red_at(t) ? 1 : 0);
    const auto dens = estimate_local_density(road, p);
    for (std::size_t i = 0; i < road.size(); ++i) {
      auto [it, fresh] = track_index.try_emplace(road[i].id, res.tracks.size());
      if (fresh) res.tracks.push_back({road[i].id, {}});
      res.tracks[it->second].points.push_back({t, road[i].position, road[i].speed / p.v0, dens[i]});
    }
    // Queue: contiguous stopped vehicles from the head.
    std::size_t q = 0;
    while (q < road.size() && road[q].speed < kStoppedSpeed) ++q;
    if (q > 0) {
      res.queue_extent.emplace_back(road.front().position, road[q - 1].position);
    } else {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      res.queue_extent.emplace_back(nan, nan);
    }
  };
  record(0.0);

  std::vector<double> acc;
  std::vector<double> new_pos;
  for (std::size_t step = 0; step < n_steps; ++step) {
    const double t = static_cast<double>(step) * cfg.dt;
    const double t_next = t + cfg.dt;
    const bool red = light.red_at(t);

    while (next_arrival <= t_next) {
      if (cfg.max_vehicles == 0 || arrivals < cfg.max_vehicles) {
        ++pending;
        ++arrivals;
      }
      next_arrival += inter_arrival(rng);
    }
    if (pending > 0) {
      double v_ins = p.v0;
      bool space = true;
      if (!road.empty()) {
        const auto& last = road.back();
        v_ins = std::min(p.v0, last.speed);
        const double gap = last.position - p.vehicle_length;
        space = gap >= p.s0 + v_ins * p.time_headway;
      }
      if (space) {
        VehicleState v;
        v.position = 0.0;
        v.speed = v_ins * cfg.insertion_speed_fraction;
        v.id = next_id++;
        road.push_back(v);
        --pending;
        ++res.stats.entered;
      }
    }

    acc.assign(road.size(), 0.0);
    for (std::size_t i = 0; i < road.size(); ++i) {
      std::optional<VehicleState> leader;
      if (i > 0) {
        leader = road[i - 1];
      } else if (red) {
        VehicleState line;
        line.position = stop_line + p.vehicle_length;
        line.speed = 0.0;
        line.id = -1;
        leader = line;
      }
      if (leader && leader->position - p.vehicle_length - road[i].position <= 0.0) {
        // Already at the stop line when it turned red: hold position.
        acc[i] = -road[i].speed / cfg.dt;
        continue;
      }
      acc[i] = idm_acceleration(road[i], leader, p);
    }

    // Semi-implicit Euler, front to back so every cap sees its leader's new
    // position.
    new_pos.assign(road.size(), 0.0);
    for (std::size_t i = 0; i < road.size(); ++i) {
      auto& v = road[i];
      double speed = std::max(0.0, v.speed + acc[i] * cfg.dt);
      double x = v.position + speed * cfg.dt;
      double limit = std::numeric_limits<double>::infinity();
      if (i > 0) {
        limit = new_pos[i - 1] - p.vehicle_length - kGuardGap;
      } else if (red) {
        limit = stop_line - kGuardGap;
      }
      if (x > limit) {
        x = std::max(v.position, limit);
        speed = (x - v.position) / cfg.dt;
      }
      if (red && v.position <= stop_line && x > stop_line) ++res.stats.red_violations;
      new_pos[i] = x;
      v.position = x;
      v.speed = speed;
    }
    for (std::size_t i = 1; i < road.size(); ++i) {
      const double gap = road[i - 1].position - p.vehicle_length - road[i].position;
      res.stats.min_gap = std::min(res.stats.min_gap, gap);
      if (!(gap > 0.0)) ++res.stats.collisions;
    }
    while (!road.empty() && road.front().position > stop_line) {
      road.erase(road.begin());
      ++res.stats.exited;
    }
    if (res.stats.entered != res.stats.exited + road.size()) ++res.stats.conservation_violations;

    for (const auto& v : road) {
      const auto c = std::min(static_cast<std::size_t>(v.position / dx), cfg.n_cells - 1);
      time_in_cell[c] += cfg.dt;
      dist_in_cell[c] += v.speed * cfg.dt;
    }
    if ((step + 1) % per_record == 0) record(static_cast<double>((step + 1) / per_record) * cfg.record_interval);
  }
  return res;
}

}  // namespace ontraffic::idm
