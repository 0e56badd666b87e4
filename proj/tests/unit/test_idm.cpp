#include <doctest.h>

#include <cmath>

#include "ontraffic/idm.hpp"

using namespace ontraffic;
using namespace ontraffic::idm;

namespace {

lwr::BoundarySchedule always(bool red) {
  lwr::BoundarySchedule bc;
  bc.phases.push_back({1e6, red ? 1.0 : 0.0, red});
  return bc;
}

VehicleState at(double x, double v, std::int64_t id = 0) {
  VehicleState s;
  s.position = x;
  s.speed = v;
  s.id = id;
  return s;
}

}  // namespace

TEST_CASE("idm acceleration closed forms") {
  IdmParams p;
  CHECK(idm_acceleration(at(0, 0), std::nullopt, p) == doctest::Approx(p.a));
  CHECK(idm_acceleration(at(0, p.v0), std::nullopt, p) == doctest::Approx(0.0));
  // Stopped behind a stopped leader at exactly the jam gap.
  const auto leader = at(p.s0 + p.vehicle_length, 0.0, 1);
  CHECK(std::abs(idm_acceleration(at(0, 0), leader, p)) <= 1e-12);
  // Closing in fast brakes harder than following at equal speed.
  const auto ahead = at(0.05, 0.5, 1);
  CHECK(idm_acceleration(at(0, 1.0), ahead, p) < idm_acceleration(at(0, 0.5), ahead, p));
  CHECK_THROWS_AS(idm_acceleration(at(0, 0), at(p.vehicle_length, 0, 1), p), std::domain_error);
  CHECK_THROWS_AS(idm_acceleration(at(0, 0), at(0.001, 0, 1), p), std::domain_error);
}

TEST_CASE("parameter validation") {
  IdmParams p;
  p.s0 = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("local density estimator") {
  IdmParams p;
  const double l = p.vehicle_length;
  SUBCASE("bumper to bumper at the jam gap") {
    std::vector<VehicleState> vs{at(1.0, 0), at(1.0 - l - p.s0, 0), at(1.0 - 2 * (l + p.s0), 0)};
    for (double d : estimate_local_density(vs, p)) CHECK(d == doctest::Approx(1.0));
  }
  SUBCASE("isolated vehicles read near zero") {
    std::vector<VehicleState> vs{at(100.0, 1), at(0.0, 1)};
    for (double d : estimate_local_density(vs, p)) CHECK(d < 1e-3);
    std::vector<VehicleState> lone{at(0.3, 1)};
    CHECK(estimate_local_density(lone, p)[0] == 0.0);
  }
  SUBCASE("twice the jam spacing reads one half") {
    const double spacing = 2.0 * p.jam_spacing();
    std::vector<VehicleState> vs;
    for (int i = 0; i < 6; ++i) vs.push_back(at(1.0 - i * spacing, 0.5, i));
    for (double d : estimate_local_density(vs, p)) CHECK(std::abs(d - 0.5) <= 0.01);
  }
}

TEST_CASE("zero inflow produces no trajectories") {
  Rng rng(1);
  SimulationConfig cfg;
  cfg.inflow_rate = 0.0;
  cfg.t_end = 2.0;
  const auto res = simulate(cfg, always(false), rng);
  CHECK(res.tracks.empty());
  CHECK(res.stats.entered == 0);
  CHECK(res.record_times.size() == 25);
  for (double r : res.rho) CHECK(r == 0.0);
}

TEST_CASE("single vehicle relaxes to the desired speed like the scalar ODE") {
  Rng rng(2);
  SimulationConfig cfg;
  cfg.inflow_rate = 50.0;
  cfg.max_vehicles = 1;
  cfg.insertion_speed_fraction = 0.0;
  cfg.road_length = 20.0;
  cfg.t_end = 4.0;
  const auto res = simulate(cfg, always(false), rng);
  REQUIRE(res.tracks.size() == 1);
  const auto& pts = res.tracks[0].points;

  // Independent RK4 of the autonomous ODE dv/dt = a (1 - (v/v0)^4), started
  // from the first recorded speed.
  const IdmParams p;
  auto rhs = [&](double v) { return p.a * (1.0 - std::pow(v / p.v0, 4)); };
  double v = pts.front().speed * p.v0, t = pts.front().t;
  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t k = 1; k < pts.size(); ++k) {
    while (t + 0.5 * h < pts[k].t) {
      const double k1 = rhs(v), k2 = rhs(v + 0.5 * h * k1), k3 = rhs(v + 0.5 * h * k2), k4 = rhs(v + h * k3);
      v += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0;
      t += h;
    }
    worst = std::max(worst, std::abs(pts[k].speed * p.v0 - v));
  }
  CHECK(pts.front().speed < 0.5);
  // Euler with 0.1 s steps tracks the exact ODE closely and both settle at v0.
  CHECK(worst <= 0.02);
  CHECK(std::abs(pts.back().speed - 1.0) <= 1e-3);
}

TEST_CASE("permanent red builds a queue anchored at the stop line") {
  Rng rng(3);
  SimulationConfig cfg;
  cfg.inflow_rate = 12.0;
  cfg.t_end = 15.0;
  const auto res = simulate(cfg, always(true), rng);
  CHECK(res.stats.collisions == 0);
  CHECK(res.stats.red_violations == 0);
  CHECK(res.stats.exited == 0);
  double prev_tail = 1e9;
  std::size_t queued_records = 0;
  for (std::size_t r = 0; r < res.queue_extent.size(); ++r) {
    const auto [head, tail] = res.queue_extent[r];
    if (std::isnan(head)) continue;
    ++queued_records;
    CHECK(head <= cfg.road_length);
    CHECK(head >= cfg.road_length - cfg.params.s0 - 0.002);
    CHECK(tail <= prev_tail + 1e-3);
    prev_tail = tail;
  }
  CHECK(queued_records > 100);
  CHECK(prev_tail < 0.5);
}

TEST_CASE("100 light cycles: no collisions, compliance, conservation") {
  Rng rng(4);
  const auto light = lwr::sample_boundary_schedule(rng, 1.0, 2.0, 310.0);
  SimulationConfig cfg;
  cfg.t_end = 300.0;
  std::size_t cycles = 0;
  double acc = 0.0;
  for (const auto& ph : light.phases) {
    acc += ph.duration;
    if (acc > cfg.t_end) break;
    cycles += ph.red;
  }
  CHECK(cycles >= 100);
  const auto res = simulate(cfg, light, rng);
  CHECK(res.stats.collisions == 0);
  CHECK(res.stats.red_violations == 0);
  CHECK(res.stats.conservation_violations == 0);
  CHECK(res.stats.min_gap > 0.0);
  CHECK(res.stats.entered > 1000);
  CHECK(res.stats.exited > 1000);
  for (double r : res.rho) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
  for (double v : res.v) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // Recorded positions never lie beyond the stop line.
  for (const auto& tr : res.tracks) {
    for (std::size_t k = 1; k < tr.points.size(); ++k) {
      CHECK(tr.points[k].position <= cfg.road_length);
    }
  }
}

TEST_CASE("invalid configuration") {
  Rng rng(5);
  SimulationConfig cfg;
  cfg.dt = 1.0;
  CHECK_THROWS_AS(simulate(cfg, always(false), rng), std::invalid_argument);
}
