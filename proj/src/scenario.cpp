#include "ontraffic/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ontraffic::pipeline {

namespace {

// Slack on window edges; absorbs float32 storage of lattice times.
constexpr double kTimeTol = 1e-6;

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

std::vector<std::size_t> choose_without_replacement(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

std::string to_string(Source s) { return s == Source::kIdm ? "idm" : "godunov"; }

Source source_from_string(const std::string& s) {
  if (s == "godunov") return Source::kGodunov;
  if (s == "idm") return Source::kIdm;
  throw std::invalid_argument("unknown source '" + s + "' (expected godunov or idm)");
}

std::size_t InputSet::probe_count() const {
  std::size_t n = 0;
  for (const auto& c : coords) n += c[2] != kControlId;
  return n;
}

std::vector<std::int64_t> select_probes(std::span<const std::int64_t> ids, Rng& rng, double probability) {
  if (!(probability >= 0.0 && probability <= 1.0)) {
    throw std::invalid_argument("select_probes: probability must lie in [0, 1]");
  }
  std::bernoulli_distribution coin(probability);
  std::vector<std::int64_t> out;
  for (auto id : ids) {
    if (coin(rng)) out.push_back(id);
  }
  return out;
}

std::vector<ProbeObservation> trace_probe_trajectory(const lwr::DensityField& field, double x0, double t0,
                                                     std::int64_t id) {
  const auto& g = field.grid;
  if (field.times.empty()) return {};
  const double t_end = field.times.back();
  if (x0 < g.x_min || x0 > g.x_max || t0 < field.times.front() || t0 > t_end) {
    throw std::invalid_argument("trace_probe_trajectory: entry outside the domain");
  }
  const double dt = g.snapshot_interval;
  std::vector<ProbeObservation> out;
  double y = x0;
  for (std::size_t k = 0;; ++k) {
    const double t = t0 + static_cast<double>(k) * dt;
    if (t > t_end + 1e-12 || y > g.x_max) break;
    const double rho = field.sample(y, t);
    const double v = lwr::velocity(rho);
    out.push_back({rho, v, y, t, id});
    y += v * dt;
  }
  return out;
}

std::vector<ProbeObservation> spawn_godunov_probes(const lwr::DensityField& field, Rng& rng, double rho_bar,
                                                   double probability) {
  const auto& g = field.grid;
  const double rate = rho_bar * probability;
  std::vector<ProbeObservation> out;
  if (!(rate > 0.0) || field.times.empty()) return out;
  std::int64_t next_id = 0;

  std::poisson_distribution<int> count(rate * (g.x_max - g.x_min));
  std::vector<double> starts(static_cast<std::size_t>(count(rng)));
  for (auto& x : starts) x = uniform(rng, g.x_min, g.x_max);
  std::sort(starts.begin(), starts.end());
  for (double x : starts) {
    auto tr = trace_probe_trajectory(field, x, field.times.front(), next_id++);
    out.insert(out.end(), tr.begin(), tr.end());
  }

  // Entries: thinning of a rate * v(x_min, t) process, v <= 1.
  std::exponential_distribution<double> gap(rate);
  const double t_end = field.times.back();
  for (double t = field.times.front() + gap(rng); t <= t_end; t += gap(rng)) {
    const double accept = lwr::velocity(field.sample(g.x_min, t));
    if (uniform(rng, 0.0, 1.0) < accept) {
      auto tr = trace_probe_trajectory(field, g.x_min, t, next_id++);
      out.insert(out.end(), tr.begin(), tr.end());
    }
  }
  return out;
}

std::size_t control_lattice_size(const WindowConfig& w) {
  if (!(w.control_spacing > 0.0)) throw std::invalid_argument("control_spacing must be positive");
  return static_cast<std::size_t>(std::floor((w.delta_past + w.delta_pred) / w.control_spacing + 1e-9)) + 1;
}

InputSet build_input_set(std::span<const ProbeObservation> probes, const lwr::BoundarySchedule& schedule,
                         double x_max, double t_c, const WindowConfig& w) {
  InputSet in;
  const double lo = t_c - w.delta_past;
  for (const auto& p : probes) {
    if (p.t >= lo - kTimeTol && p.t <= t_c + kTimeTol) {
      in.push({p.y, p.t, static_cast<double>(p.source_id)}, {p.rho, p.v});
    }
  }
  const std::size_t n = control_lattice_size(w);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = lo + static_cast<double>(k) * w.control_spacing;
    const double rho = schedule.level_at(t);
    in.push({x_max, t, kControlId}, {rho, lwr::velocity(rho)});
  }
  return in;
}

TrainingSample shift_to(const Scenario& s, double t_c, const WindowConfig& w) {
  if (s.duration() + kTimeTol < w.delta_past + w.delta_pred) {
    std::ostringstream os;
    os << "scenario duration " << s.duration() << " min is shorter than the window "
       << w.delta_past + w.delta_pred << " min";
    throw std::invalid_argument(os.str());
  }
  TrainingSample out;
  out.t_c = t_c;
  out.delta_past = w.delta_past;
  out.delta_pred = w.delta_pred;
  out.shifted = true;
  out.input = build_input_set(s.probes, s.schedule, s.x_max, t_c, w);
  for (auto& c : out.input.coords) c[1] -= t_c;
  const double lo = t_c - w.delta_past - kTimeTol;
  const double hi = t_c + w.delta_pred + kTimeTol;
  for (std::size_t ti = 0; ti < s.n_times(); ++ti) {
    const double t = s.times[ti];
    if (t < lo || t > hi) continue;
    for (std::size_t ci = 0; ci < s.n_cells(); ++ci) {
      out.queries.push_back({s.cell_centers[ci], t - t_c});
      out.targets.push_back({s.rho_at(ti, ci), s.v_at(ti, ci)});
    }
  }
  return out;
}

TrainingSample random_temporal_shift(const Scenario& s, Rng& rng, const WindowConfig& w) {
  const double hi = s.duration() - w.delta_pred;
  if (hi + kTimeTol < w.delta_past) {
    std::ostringstream os;
    os << "scenario duration " << s.duration() << " min is shorter than the window "
       << w.delta_past + w.delta_pred << " min";
    throw std::invalid_argument(os.str());
  }
  const double t_c = hi > w.delta_past ? uniform(rng, w.delta_past, hi) : w.delta_past;
  return shift_to(s, t_c, w);
}

std::vector<TrainingSample> random_temporal_shift(std::span<const Scenario> dataset, Rng& rng,
                                                  const WindowConfig& w) {
  std::vector<TrainingSample> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(random_temporal_shift(s, rng, w));
  return out;
}

TrainingSample unshift(const TrainingSample& sample) {
  TrainingSample out = sample;
  if (!sample.shifted) return out;
  for (auto& c : out.input.coords) c[1] += sample.t_c;
  for (auto& q : out.queries) q.t += sample.t_c;
  out.shifted = false;
  return out;
}

TrainingSample subsample(const TrainingSample& sample, Rng& rng, double keep_min, double keep_max,
                         std::size_t n_queries) {
  if (n_queries < 1) throw std::invalid_argument("subsample: n_queries must be >= 1");
  if (!(keep_min >= 0.0 && keep_min <= keep_max && keep_max <= 1.0)) {
    throw std::invalid_argument("subsample: need 0 <= keep_min <= keep_max <= 1");
  }
  TrainingSample out;
  out.t_c = sample.t_c;
  out.delta_past = sample.delta_past;
  out.delta_pred = sample.delta_pred;
  out.shifted = sample.shifted;

  const double frac = keep_min == keep_max ? keep_min : uniform(rng, keep_min, keep_max);
  std::vector<std::size_t> probe_rows;
  for (std::size_t i = 0; i < sample.input.size(); ++i) {
    if (!sample.input.is_control(i)) probe_rows.push_back(i);
  }
  const auto keep_n = static_cast<std::size_t>(std::llround(frac * static_cast<double>(probe_rows.size())));
  std::vector<char> keep(sample.input.size(), 1);
  if (keep_n < probe_rows.size()) {
    for (auto i : probe_rows) keep[i] = 0;
    for (auto k : choose_without_replacement(rng, probe_rows.size(), keep_n)) keep[probe_rows[k]] = 1;
  }
  for (std::size_t i = 0; i < sample.input.size(); ++i) {
    if (keep[i]) out.input.push(sample.input.coords[i], sample.input.values[i]);
  }

  auto picks = choose_without_replacement(rng, sample.queries.size(), n_queries);
  out.queries.reserve(picks.size());
  out.targets.reserve(picks.size());
  for (auto i : picks) {
    out.queries.push_back(sample.queries[i]);
    out.targets.push_back(sample.targets[i]);
  }
  return out;
}

InputSet corrupt(const InputSet& input, Rng& rng, const Corruption& c, double x_min, double x_max) {
  if (!(c.mask_fraction >= 0.0 && c.mask_fraction < 1.0)) {
    throw std::invalid_argument("corrupt: mask fraction must lie in [0, 1)");
  }
  if (c.position_sigma < 0.0 || c.density_sigma < 0.0) {
    throw std::invalid_argument("corrupt: noise standard deviations must be non-negative");
  }
  InputSet noisy = input;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::size_t> probe_rows;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (noisy.is_control(i)) continue;
    probe_rows.push_back(i);
    if (c.position_sigma > 0.0) {
      noisy.coords[i][0] = std::clamp(noisy.coords[i][0] + c.position_sigma * gauss(rng), x_min, x_max);
    }
    if (c.density_sigma > 0.0) {
      noisy.values[i][0] = std::clamp(noisy.values[i][0] + c.density_sigma * gauss(rng), 0.0, 1.0);
    }
  }
  const auto n_mask =
      static_cast<std::size_t>(std::ceil(c.mask_fraction * static_cast<double>(probe_rows.size()) - 1e-9));
  if (n_mask == 0) return noisy;
  std::vector<char> drop(noisy.size(), 0);
  for (auto k : choose_without_replacement(rng, probe_rows.size(), n_mask)) drop[probe_rows[k]] = 1;
  InputSet out;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (!drop[i]) out.push(noisy.coords[i], noisy.values[i]);
  }
  return out;
}

InputSet restrict_history(const InputSet& input, double delta_past) {
  InputSet out;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (input.coords[i][1] >= -delta_past - kTimeTol) out.push(input.coords[i], input.values[i]);
  }
  return out;
}

void GenerationConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': " + why);
  };
  if (scenario_count < 1) fail("scenario_count", "must be >= 1");
  if (!(x_max > x_min)) fail("x_max", "must exceed x_min");
  if (n_cells < 2) fail("n_cells", "must be >= 2");
  if (!(snapshot_interval > 0.0)) fail("snapshot_interval", "must be positive");
  if (!(t_end > 0.0)) fail("t_end", "must be positive");
  if (!(rho_bar >= 0.0)) fail("rho_bar", "must be non-negative");
  if (!(probe_probability >= 0.0 && probe_probability <= 1.0)) fail("probe_probability", "must lie in [0, 1]");
  if (!(delta_min > 0.0 && delta_max >= delta_min)) fail("delta_min", "need 0 < delta_min <= delta_max");
  if (!(rho_red >= 0.0 && rho_red <= 1.0)) fail("rho_red", "must lie in [0, 1]");
  if (!(rho_green >= 0.0 && rho_green <= 1.0)) fail("rho_green", "must lie in [0, 1]");
  if (!(rho_init >= 0.0 && rho_init <= 1.0)) fail("rho_init", "must lie in [0, 1]");
  if (!(s_w_min > 0.0 && s_w_max >= s_w_min)) fail("s_w_min", "need 0 < s_w_min <= s_w_max");
  if (!(cfl > 0.0 && cfl <= 1.0)) fail("cfl", "must lie in (0, 1]");
  if (!(idm_inflow_rate >= 0.0)) fail("idm_inflow_rate", "must be non-negative");
  if (!(idm_warmup >= 0.0)) fail("idm_warmup", "must be non-negative");
  if (!(windows.delta_past > 0.0)) fail("delta_past", "must be positive");
  if (!(windows.delta_pred > 0.0)) fail("delta_pred", "must be positive");
  if (!(windows.control_spacing > 0.0)) fail("control_spacing", "must be positive");
  if (t_end + kTimeTol < windows.delta_past + windows.delta_pred) {
    fail("t_end", "must cover delta_past + delta_pred");
  }
  if (source == Source::kIdm && x_min != 0.0) fail("x_min", "must be 0 for the idm source");
}

GenerationConfig GenerationConfig::idm_defaults() {
  GenerationConfig c;
  c.source = Source::kIdm;
  c.x_max = 1.0;
  c.n_cells = 50;
  return c;
}

Scenario make_godunov_scenario(Rng& rng, const GenerationConfig& cfg) {
  const auto grid = lwr::Grid::with_cfl(cfg.x_min, cfg.x_max, cfg.n_cells, cfg.t_end, cfg.snapshot_interval, cfg.cfl);
  lwr::InitialConditionRanges ranges;
  ranges.rho_init = cfg.rho_init;
  ranges.s_w_min = cfg.s_w_min;
  ranges.s_w_max = cfg.s_w_max;
  ranges.x_min = cfg.x_min;
  ranges.x_max = cfg.x_max;
  const auto ic = lwr::sample_initial_condition(rng, ranges);
  const auto bc = lwr::sample_boundary_schedule(rng, cfg.delta_min, cfg.delta_max, cfg.t_end + cfg.windows.delta_pred,
                                                cfg.rho_red, cfg.rho_green);
  const auto field = lwr::solve(ic, bc, grid);

  Scenario s;
  s.source = Source::kGodunov;
  s.x_min = cfg.x_min;
  s.x_max = cfg.x_max;
  for (std::size_t i = 0; i < grid.n_cells; ++i) s.cell_centers.push_back(grid.cell_center(i));
  s.times = field.times;
  s.rho = field.rho;
  s.v.resize(s.rho.size());
  std::transform(s.rho.begin(), s.rho.end(), s.v.begin(), lwr::velocity);
  s.schedule = bc;
  s.probes = spawn_godunov_probes(field, rng, cfg.rho_bar, cfg.probe_probability);
  return s;
}

lwr::BoundarySchedule trim_schedule(const lwr::BoundarySchedule& s, double offset) {
  lwr::BoundarySchedule out = s;
  out.phases.clear();
  double start = 0.0;
  for (const auto& p : s.phases) {
    const double end = start + p.duration;
    if (end > offset) {
      auto q = p;
      q.duration = end - std::max(start, offset);
      out.phases.push_back(q);
    }
    start = end;
  }
  if (out.phases.empty() && !s.phases.empty()) out.phases.push_back(s.phases.back());
  return out;
}

Scenario make_idm_scenario(Rng& rng, const GenerationConfig& cfg, idm::SimulationStats* stats) {
  const auto skip = static_cast<std::size_t>(std::llround(cfg.idm_warmup / cfg.snapshot_interval));
  const double warmup = static_cast<double>(skip) * cfg.snapshot_interval;
  const auto light = lwr::sample_boundary_schedule(rng, cfg.delta_min, cfg.delta_max,
                                                   warmup + cfg.t_end + cfg.windows.delta_pred, cfg.rho_red,
                                                   cfg.rho_green);
  idm::SimulationConfig sim;
  sim.inflow_rate = cfg.idm_inflow_rate;
  sim.road_length = cfg.x_max - cfg.x_min;
  sim.t_end = warmup + cfg.t_end;
  sim.record_interval = cfg.snapshot_interval;
  sim.n_cells = cfg.n_cells;
  const auto res = idm::simulate(sim, light, rng);
  if (stats) *stats = res.stats;

  Scenario s;
  s.source = Source::kIdm;
  s.x_min = cfg.x_min;
  s.x_max = cfg.x_max;
  s.cell_centers = res.cell_centers;
  for (std::size_t r = skip; r < res.record_times.size(); ++r) {
    s.times.push_back(static_cast<double>(r - skip) * cfg.snapshot_interval);
    const auto* rho = res.rho.data() + r * cfg.n_cells;
    const auto* v = res.v.data() + r * cfg.n_cells;
    s.rho.insert(s.rho.end(), rho, rho + cfg.n_cells);
    s.v.insert(s.v.end(), v, v + cfg.n_cells);
  }
  s.schedule = trim_schedule(light, warmup);

  std::vector<std::int64_t> ids;
  ids.reserve(res.tracks.size());
  for (const auto& tr : res.tracks) ids.push_back(tr.id);
  const auto chosen = select_probes(ids, rng, cfg.probe_probability);
  std::size_t k = 0;
  for (const auto& tr : res.tracks) {
    if (k >= chosen.size() || tr.id != chosen[k]) continue;
    ++k;
    for (const auto& pt : tr.points) {
      if (pt.t < warmup - 1e-9) continue;
      s.probes.push_back({pt.density, pt.speed, std::clamp(pt.position, cfg.x_min, cfg.x_max), pt.t - warmup, tr.id});
    }
  }
  return s;
}

void quantize(Scenario& s) {
  auto q = [](std::vector<double>& xs) {
    for (auto& x : xs) x = f32(x);
  };
  s.x_min = f32(s.x_min);
  s.x_max = f32(s.x_max);
  q(s.cell_centers);
  q(s.times);
  q(s.rho);
  q(s.v);
  for (auto& p : s.schedule.phases) {
    p.duration = f32(p.duration);
    p.level = f32(p.level);
  }
  s.schedule.rho_red = f32(s.schedule.rho_red);
  s.schedule.rho_green = f32(s.schedule.rho_green);
  s.schedule.delta_min = f32(s.schedule.delta_min);
  s.schedule.delta_max = f32(s.schedule.delta_max);
  for (auto& p : s.probes) {
    p.rho = f32(p.rho);
    p.v = f32(p.v);
    p.y = f32(p.y);
    p.t = f32(p.t);
  }
}

}  // namespace ontraffic::pipeline
