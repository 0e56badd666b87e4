#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ontraffic/lwr.hpp"

using namespace ontraffic;
using namespace ontraffic::lwr;

namespace {

BoundarySchedule constant_boundary(double level, double duration = 1000.0) {
  BoundarySchedule bc;
  bc.phases.push_back({duration, level, level > 0.5});
  return bc;
}

InitialConditionParams two_state(double left, double right, double split, double rho_init = 0.1) {
  InitialConditionParams ic;
  ic.rho_init = rho_init;
  ic.steps = {{split, left - rho_init}, {1e9, right - rho_init}};
  return ic;
}

}  // namespace

TEST_CASE("godunov flux examples") {
  CHECK(godunov_flux(0.5, 0.5) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(godunov_flux(0.2, 0.8) == doctest::Approx(0.16).epsilon(1e-15));
  CHECK(godunov_flux(0.8, 0.2) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(godunov_flux(0.9, 0.6) == doctest::Approx(flux(0.6)).epsilon(1e-15));
  CHECK(godunov_flux(0.4, 0.1) == doctest::Approx(flux(0.4)).epsilon(1e-15));
  CHECK_THROWS_AS(godunov_flux(-0.1, 0.5), std::domain_error);
  CHECK_THROWS_AS(godunov_flux(0.5, 1.2), std::domain_error);
}

TEST_CASE("godunov flux equals the extremum of f over the Riemann fan") {
  // Brute-force min/max over a fine sampling of the interval.
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const double a = uniform(rng, 0, 1), b = uniform(rng, 0, 1);
    double ext = a <= b ? 1e9 : -1e9;
    for (int k = 0; k <= 20000; ++k) {
      const double r = std::min(a, b) + (std::max(a, b) - std::min(a, b)) * k / 20000.0;
      ext = a <= b ? std::min(ext, flux(r)) : std::max(ext, flux(r));
    }
    CHECK(std::abs(godunov_flux(a, b) - ext) <= 1e-8);
  }
}

TEST_CASE("initial condition sampling") {
  SUBCASE("no steps gives the constant inflow profile") {
    InitialConditionParams ic;
    for (double x : {0.0, 1.3, 4.99}) CHECK(ic.density_at(x) == 0.1);
  }
  SUBCASE("step heights and widths stay in range over 1000 samples") {
    Rng rng(42);
    InitialConditionRanges r;
    double lo = 1.0, hi = 0.0, hmin = 1.0, hmax = -1.0;
    for (int s = 0; s < 1000; ++s) {
      const auto ic = sample_initial_condition(rng, r);
      CHECK(ic.rho_init == 0.1);
      REQUIRE_FALSE(ic.steps.empty());
      CHECK(ic.steps.back().position >= r.x_max);
      double prev = r.x_min;
      for (const auto& st : ic.steps) {
        CHECK(st.position - prev >= r.s_w_min - 1e-12);
        CHECK(st.position - prev <= r.s_w_max + 1e-12);
        CHECK(st.height >= -0.1);
        CHECK(st.height <= 0.9);
        hmin = std::min(hmin, st.height);
        hmax = std::max(hmax, st.height);
        prev = st.position;
      }
      for (double x = 0.0; x < 5.0; x += 0.05) {
        const double v = ic.density_at(x);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    // The full height range [-0.1, 0.9] is explored.
    CHECK(hmin < -0.09);
    CHECK(hmax > 0.89);
  }
  SUBCASE("invalid widths") {
    Rng rng(0);
    InitialConditionRanges r;
    r.s_w_min = 0.0;
    CHECK_THROWS_AS(sample_initial_condition(rng, r), std::invalid_argument);
  }
}

TEST_CASE("boundary schedule sampling") {
  Rng rng(9);
  SUBCASE("phase count over a 10 minute horizon") {
    for (int i = 0; i < 200; ++i) {
      const auto bc = sample_boundary_schedule(rng, 1, 2, 10);
      CHECK(bc.phases.size() >= 5);
      CHECK(bc.phases.size() <= 10);
      CHECK(bc.total_duration() >= 10.0);
      for (std::size_t k = 1; k < bc.phases.size(); ++k) CHECK(bc.phases[k].red != bc.phases[k - 1].red);
      for (const auto& p : bc.phases) CHECK(p.level == (p.red ? 1.0 : 0.0));
    }
  }
  SUBCASE("degenerate range gives unit durations") {
    const auto bc = sample_boundary_schedule(rng, 1, 1, 7.5);
    CHECK(bc.phases.size() == 8);
    for (const auto& p : bc.phases) CHECK(p.duration == 1.0);
  }
  SUBCASE("mean duration of U(1,2)") {
    double total = 0.0;
    std::size_t n = 0;
    for (int i = 0; i < 1000; ++i) {
      for (const auto& p : sample_boundary_schedule(rng, 1, 2, 20).phases) {
        total += p.duration;
        ++n;
      }
    }
    CHECK(std::abs(total / static_cast<double>(n) - 1.5) <= 0.05);
  }
  SUBCASE("level lookup uses half-open phases") {
    BoundarySchedule bc;
    bc.phases = {{1.0, 1.0, true}, {2.0, 0.0, false}};
    CHECK(bc.level_at(0.0) == 1.0);
    CHECK(bc.level_at(0.999) == 1.0);
    CHECK(bc.level_at(1.0) == 0.0);
    CHECK(bc.red_at(0.5));
    CHECK_FALSE(bc.red_at(2.9));
    CHECK(bc.level_at(50.0) == 0.0);
  }
  CHECK_THROWS_AS(sample_boundary_schedule(rng, 1, 2, 0.0), std::invalid_argument);
}

TEST_CASE("grid construction and CFL") {
  const auto g = Grid::with_cfl(0, 5, 100, 20, 5.0 / 60.0);
  CHECK(g.dt * max_wave_speed() / g.dx() <= 0.5 + 1e-12);
  CHECK(g.steps_per_snapshot() == 4);
  CHECK(g.n_snapshots() == 241);
  Grid bad;
  bad.dt = 0.06;
  bad.snapshot_interval = 0.06;
  bad.t_end = 0.6;
  try {
    bad.validate();
    FAIL("expected CflError");
  } catch (const CflError& e) {
    CHECK(std::string(e.what()).find("dt/dx = 1.2") != std::string::npos);
  }
  CHECK_THROWS_AS(solve(InitialConditionParams{}, constant_boundary(0.1), bad), CflError);
}

TEST_CASE("constant state is a steady solution") {
  const auto g = Grid::with_cfl(0, 5, 100, 5, 5.0 / 60.0);
  const auto field = solve(InitialConditionParams{}, constant_boundary(0.1), g);
  CHECK(field.n_times() == 61);
  for (double r : field.rho) CHECK(std::abs(r - 0.1) <= 1e-15);
}

TEST_CASE("stationary shock stays at the interface on coarse and fine grids") {
  auto shock_position = [](std::size_t n) {
    const auto g = Grid::with_cfl(0, 5, n, 2, 5.0 / 60.0);
    const auto field = solve(two_state(0.2, 0.8, 2.5), constant_boundary(0.8), g);
    const std::size_t last = field.n_times() - 1;
    for (std::size_t i = 1; i < n; ++i) {
      if (field.at(last, i - 1) < 0.5 && field.at(last, i) >= 0.5) return 0.5 * (g.cell_center(i - 1) + g.cell_center(i));
    }
    return -1.0;
  };
  const double coarse = shock_position(100);
  const double fine = shock_position(400);
  CHECK(std::abs(coarse - 2.5) <= 0.05);
  CHECK(std::abs(fine - 2.5) <= 0.0125);
  CHECK(std::abs(coarse - fine) <= 0.05);
}

TEST_CASE("per-step mass balance and maximum principle") {
  Rng rng(77);
  for (int s = 0; s < 10; ++s) {
    const auto ic = sample_initial_condition(rng, {});
    const auto bc = sample_boundary_schedule(rng, 1, 2, 28);
    const auto g = Grid::with_cfl(0, 5, 100, 20, 5.0 / 60.0);
    double worst = 0.0;
    const auto field = solve(ic, bc, g, [&](const StepRecord& r) {
      worst = std::max(worst, std::abs((r.mass_after - r.mass_before) - r.dt * (r.flux_in - r.flux_out)));
    });
    CHECK(worst <= 1e-12);
    double lo = std::min({ic.rho_init, bc.rho_red, bc.rho_green});
    double hi = std::max({ic.rho_init, bc.rho_red, bc.rho_green});
    for (std::size_t i = 0; i < g.n_cells; ++i) {
      lo = std::min(lo, field.at(0, i));
      hi = std::max(hi, field.at(0, i));
    }
    for (double r : field.rho) {
      CHECK(r >= lo);
      CHECK(r <= hi);
    }
  }
}

TEST_CASE("grid refinement reduces the error against a fine reference") {
  Rng rng(5);
  const auto ic = sample_initial_condition(rng, {});
  const auto bc = sample_boundary_schedule(rng, 1, 2, 12);
  const auto ref = solve(ic, bc, Grid::with_cfl(0, 5, 1600, 4, 1.0 / 6.0));
  std::vector<double> errors;
  for (std::size_t n : {50, 100, 200, 400}) {
    const auto field = solve(ic, bc, Grid::with_cfl(0, 5, n, 4, 1.0 / 6.0));
    double err = 0.0;
    int count = 0;
    for (double t = 0.5; t <= 4.0; t += 0.5) {
      for (double x = 0.1; x < 4.9; x += 0.0237) {
        err += std::abs(field.sample(x, t) - ref.sample(x, t));
        ++count;
      }
    }
    errors.push_back(err / count);
  }
  for (std::size_t k = 1; k < errors.size(); ++k) {
    INFO("errors " << errors[k - 1] << " -> " << errors[k]);
    CHECK(errors[k] < errors[k - 1]);
  }
}

TEST_CASE("bilinear sampling reproduces lattice values and clamps") {
  const auto g = Grid::with_cfl(0, 5, 10, 1, 0.5);
  const auto field = solve(two_state(0.3, 0.6, 2.5), constant_boundary(0.6), g);
  CHECK(field.sample(g.cell_center(3), 0.5) == field.at(1, 3));
  CHECK(field.sample(-1.0, -1.0) == field.at(0, 0));
  CHECK(field.sample(9.0, 9.0) == field.at(field.n_times() - 1, 9));
  const double mid = field.sample(0.5 * (g.cell_center(4) + g.cell_center(5)), 0.0);
  CHECK(mid == doctest::Approx(0.5 * (field.at(0, 4) + field.at(0, 5))));
}
