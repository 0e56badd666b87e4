#include "ontraffic/lwr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ontraffic::lwr {

namespace {

std::size_t checked_ratio(double num, double den, const char* what) {
  const double r = num / den;
  const double n = std::round(r);
  if (n < 1.0 || std::abs(r - n) > 1e-9 * std::max(1.0, n)) {
    std::ostringstream os;
    os << "grid: " << what << " (" << num << ") is not an integer multiple of dt (" << den << ")";
    throw std::invalid_argument(os.str());
  }
  return static_cast<std::size_t>(n);
}

// Fractional index of v on a uniform lattice start + k*step, k in [0, n-1].
void bracket(double v, double start, double step, std::size_t n, std::size_t& lo, double& w) {
  if (n == 1) {
    lo = 0;
    w = 0.0;
    return;
  }
  double f = (v - start) / step;
  f = std::clamp(f, 0.0, static_cast<double>(n - 1));
  lo = std::min(static_cast<std::size_t>(f), n - 2);
  w = f - static_cast<double>(lo);
}

}  // namespace

std::size_t Grid::steps_per_snapshot() const { return checked_ratio(snapshot_interval, dt, "snapshot interval"); }

std::size_t Grid::n_snapshots() const { return checked_ratio(t_end, snapshot_interval, "t_end") + 1; }

void Grid::validate() const {
  if (!(x_max > x_min)) throw std::invalid_argument("grid: x_max must exceed x_min");
  if (n_cells < 2) throw std::invalid_argument("grid: need at least 2 cells");
  if (!(dt > 0.0) || !(t_end > 0.0)) throw std::invalid_argument("grid: dt and t_end must be positive");
  const double courant = dt * max_wave_speed() / dx();
  if (courant > 1.0 + 1e-12) {
    std::ostringstream os;
    os << "CFL violated: dt/dx = " << dt / dx() << " (dt = " << dt << " min, dx = " << dx()
       << " km) exceeds 1/max|f'| = " << 1.0 / max_wave_speed();
    throw CflError(os.str());
  }
  steps_per_snapshot();
  n_snapshots();
}

Grid Grid::with_cfl(double x_min, double x_max, std::size_t n_cells, double t_end, double snapshot_interval,
                    double cfl) {
  Grid g;
  g.x_min = x_min;
  g.x_max = x_max;
  g.n_cells = n_cells;
  g.t_end = t_end;
  g.snapshot_interval = snapshot_interval;
  const double dt_max = cfl * g.dx() / max_wave_speed();
  const double sub = std::ceil(snapshot_interval / dt_max - 1e-12);
  g.dt = snapshot_interval / sub;
  return g;
}

double InitialConditionParams::density_at(double x) const {
  double left = -std::numeric_limits<double>::infinity();
  for (const Step& s : steps) {
    if (x >= left && x < s.position) return std::clamp(rho_init + s.height, 0.0, 1.0);
    left = s.position;
  }
  return rho_init;
}

double BoundarySchedule::total_duration() const {
  double total = 0.0;
  for (const auto& p : phases) total += p.duration;
  return total;
}

namespace {

const Phase* phase_at(const std::vector<Phase>& phases, double t) {
  if (phases.empty()) return nullptr;
  double end = 0.0;
  for (const auto& p : phases) {
    end += p.duration;
    if (t < end) return &p;
  }
  return &phases.back();
}

}  // namespace

double BoundarySchedule::level_at(double t) const {
  const Phase* p = phase_at(phases, t);
  return p ? p->level : rho_green;
}

bool BoundarySchedule::red_at(double t) const {
  const Phase* p = phase_at(phases, t);
  return p != nullptr && p->red;
}

double DensityField::sample(double x, double t) const {
  std::size_t ci = 0, ti = 0;
  double wx = 0.0, wt = 0.0;
  bracket(x, grid.cell_center(0), grid.dx(), grid.n_cells, ci, wx);
  const double t0 = times.front();
  const double step = times.size() > 1 ? times[1] - times[0] : 1.0;
  bracket(t, t0, step, times.size(), ti, wt);
  const std::size_t ci1 = std::min(ci + 1, grid.n_cells - 1);
  const std::size_t ti1 = std::min(ti + 1, times.size() - 1);
  const double a = (1.0 - wx) * at(ti, ci) + wx * at(ti, ci1);
  const double b = (1.0 - wx) * at(ti1, ci) + wx * at(ti1, ci1);
  return (1.0 - wt) * a + wt * b;
}

InitialConditionParams sample_initial_condition(Rng& rng, const InitialConditionRanges& r) {
  if (!(r.s_w_min > 0.0) || r.s_w_max < r.s_w_min) {
    throw std::invalid_argument("initial condition: need 0 < s_w_min <= s_w_max");
  }
  InitialConditionParams ic;
  ic.rho_init = r.rho_init;
  ic.s_w_min = r.s_w_min;
  ic.s_w_max = r.s_w_max;
  // Each segment [x_{k-1}, x_k) sits at rho_init + Delta h_k, so the current
  // level the height range is measured from is rho_init.
  const double current = r.rho_init;
  double prev = r.x_min;
  while (prev < r.x_max) {
    const double next = uniform(rng, prev + r.s_w_min, prev + r.s_w_max);
    const double h = uniform(rng, -current, 1.0 - current);
    ic.steps.push_back({next, h});
    prev = next;
  }
  return ic;
}

BoundarySchedule sample_boundary_schedule(Rng& rng, double delta_min, double delta_max, double horizon,
                                          double rho_red, double rho_green) {
  if (!(horizon > 0.0)) throw std::invalid_argument("boundary schedule: horizon must be positive");
  if (!(delta_min > 0.0) || delta_max < delta_min) {
    throw std::invalid_argument("boundary schedule: need 0 < delta_min <= delta_max");
  }
  BoundarySchedule bc;
  bc.rho_red = rho_red;
  bc.rho_green = rho_green;
  bc.delta_min = delta_min;
  bc.delta_max = delta_max;
  bool red = std::bernoulli_distribution(0.5)(rng);
  double total = 0.0;
  while (total < horizon) {
    const double d = uniform(rng, delta_min, delta_max);
    bc.phases.push_back({d, red ? rho_red : rho_green, red});
    total += d;
    red = !red;
  }
  return bc;
}

double godunov_flux(double rho_left, double rho_right) {
  if (!(rho_left >= 0.0 && rho_left <= 1.0) || !(rho_right >= 0.0 && rho_right <= 1.0)) {
    std::ostringstream os;
    os << "godunov_flux: densities (" << rho_left << ", " << rho_right << ") outside [0, 1]";
    throw std::domain_error(os.str());
  }
  constexpr double kCritical = 0.5;
  if (rho_left <= rho_right) return std::min(flux(rho_left), flux(rho_right));
  if (rho_right <= kCritical && kCritical <= rho_left) return flux(kCritical);
  return std::max(flux(rho_left), flux(rho_right));
}

DensityField solve(const InitialConditionParams& ic, const BoundarySchedule& bc, const Grid& grid,
                   const std::function<void(const StepRecord&)>& observer) {
  grid.validate();
  const std::size_t n = grid.n_cells;
  const double dx = grid.dx();
  const double ratio = grid.dt / dx;
  const std::size_t per_snap = grid.steps_per_snapshot();
  const std::size_t n_snap = grid.n_snapshots();
  const std::size_t n_steps = per_snap * (n_snap - 1);

  std::vector<double> rho(n);
  for (std::size_t i = 0; i < n; ++i) rho[i] = ic.density_at(grid.cell_center(i));

  DensityField field;
  field.grid = grid;
  field.times.reserve(n_snap);
  field.rho.reserve(n_snap * n);
  auto record = [&](std::size_t step) {
    field.times.push_back(static_cast<double>(step / per_snap) * grid.snapshot_interval);
    field.rho.insert(field.rho.end(), rho.begin(), rho.end());
  };
  record(0);

  std::vector<double> fluxes(n + 1);
  auto mass = [&] {
    double m = 0.0;
    for (double r : rho) m += r * dx;
    return m;
  };
  for (std::size_t step = 0; step < n_steps; ++step) {
    const double t = static_cast<double>(step) * grid.dt;
    const double inflow = std::clamp(ic.rho_init, 0.0, 1.0);
    const double downstream = std::clamp(bc.level_at(t), 0.0, 1.0);
    fluxes[0] = godunov_flux(inflow, rho[0]);
    for (std::size_t i = 1; i < n; ++i) fluxes[i] = godunov_flux(rho[i - 1], rho[i]);
    fluxes[n] = godunov_flux(rho[n - 1], downstream);
    const double before = observer ? mass() : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      // The monotone scheme keeps values in [0, 1] up to rounding.
      rho[i] = std::clamp(rho[i] - ratio * (fluxes[i + 1] - fluxes[i]), 0.0, 1.0);
    }
    if (observer) observer({step, before, mass(), fluxes[0], fluxes[n], grid.dt});
    if ((step + 1) % per_snap == 0) record(step + 1);
  }
  return field;
}

}  // namespace ontraffic::lwr
