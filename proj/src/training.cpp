#include "ontraffic/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "ontraffic/config_json.hpp"
#include "ontraffic/parallel.hpp"

namespace ontraffic::training {

using ad::Tape;
using ad::Var;
using net::ModelParams;

namespace {

// Stage ids for make_rng.
constexpr std::uint64_t kStageInit = 20;
constexpr std::uint64_t kStageTrain = 21;
constexpr std::uint64_t kStageVal = 22;

// Keeps the velocity variance of the diagonal NLL away from zero where the
// learned FD is flat.
constexpr double kVelocityVarianceFloor = 1e-6;

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a) + " predictions for " +
                                std::to_string(b) + " targets");
}

}  // namespace

std::string to_string(NllMode m) { return m == NllMode::kJoint ? "joint" : "diagonal"; }

NllMode nll_mode_from_string(const std::string& s) {
  if (s == "joint") return NllMode::kJoint;
  if (s == "diagonal") return NllMode::kDiagonal;
  throw std::invalid_argument("unknown nll_mode '" + s + "' (expected joint or diagonal)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("train config '" + key + "': " + why);
  };
  if (batch_size == 0) fail("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) fail("warmup_fraction", "must lie in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon", "must be > 0");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) fail("train_fraction", "must lie in (0, 1]");
  if (!(val_fraction >= 0.0) || std::abs(train_fraction + val_fraction - 1.0) > 1e-9)
    fail("val_fraction", "train_fraction + val_fraction must equal 1");
  if (!(keep_min > 0.0 && keep_min <= keep_max && keep_max <= 1.0)) fail("keep_min", "need 0 < keep_min <= keep_max <= 1");
  if (n_queries == 0) fail("n_queries", "must be >= 1");
  if (val_queries == 0) fail("val_queries", "must be >= 1");
  if (!(clip_norm >= 0.0)) fail("clip_norm", "must be >= 0");
  if (workers == 0) fail("workers", "must be >= 1");
}

std::size_t TrainConfig::warmup_epochs() const {
  return static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(epochs)));
}

net::ModelConfig fit_model_box(net::ModelConfig model, const pipeline::GenerationConfig& data, bool temporal_shift) {
  model.x_min = data.x_min;
  model.x_max = data.x_max;
  if (temporal_shift) {
    model.t_min = -data.windows.delta_past;
    model.t_max = data.windows.delta_pred;
  } else {
    model.t_min = 0.0;
    model.t_max = data.windows.delta_past + data.windows.delta_pred;
  }
  return model;
}

// ---- losses -------------------------------------------------------------------

double mse_loss(const net::PredictionField& pred, Targets targets) {
  check_lengths(pred.size(), targets.size(), "mse_loss");
  if (targets.empty()) throw std::invalid_argument("mse_loss: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double er = pred.rho[i] - targets[i][0], ev = pred.v[i] - targets[i][1];
    s += er * er + ev * ev;
  }
  return s / static_cast<double>(targets.size());
}

double mae_loss(const net::PredictionField& pred, Targets targets) {
  check_lengths(pred.size(), targets.size(), "mae_loss");
  if (targets.empty()) throw std::invalid_argument("mae_loss: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    s += std::abs(pred.rho[i] - targets[i][0]) + std::abs(pred.v[i] - targets[i][1]);
  return s / static_cast<double>(targets.size());
}

double nll_loss(const net::PredictionField& pred, Targets targets, NllMode mode) {
  check_lengths(pred.size(), targets.size(), "nll_loss");
  if (targets.empty()) throw std::invalid_argument("nll_loss: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double sr = pred.sigma_rho[i], sv = pred.sigma_v[i];
    if (!(sr > 0.0) || !(sv >= 0.0)) throw std::invalid_argument("nll_loss: non-positive sigma at sample " + std::to_string(i));
    const double er = pred.rho[i] - targets[i][0], ev = pred.v[i] - targets[i][1];
    if (mode == NllMode::kJoint) {
      const double var = sr * sr + sv * sv;
      s += (er * er + ev * ev) / var + kLog2Pi + std::log(var);
    } else {
      const double vr = sr * sr, vv = sv * sv + kVelocityVarianceFloor;
      s += er * er / vr + ev * ev / vv + 2.0 * kLog2Pi + std::log(vr) + std::log(vv);
    }
  }
  return s / static_cast<double>(targets.size());
}

namespace {

std::pair<Var, Var> target_columns(Tape& tape, Targets targets) {
  std::vector<double> r(targets.size()), v(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    r[i] = targets[i][0];
    v[i] = targets[i][1];
  }
  return {tape.constant(targets.size(), 1, std::move(r)), tape.constant(targets.size(), 1, std::move(v))};
}

Var squared_error(const net::BoundModel::Outputs& out, Targets targets, Var* er2, Var* ev2) {
  check_lengths(out.rho.rows(), targets.size(), "loss");
  auto [tr, tv] = target_columns(*out.rho.tape, targets);
  *er2 = ad::square(ad::sub(out.rho, tr));
  *ev2 = ad::square(ad::sub(out.v, tv));
  return ad::add(*er2, *ev2);
}

}  // namespace

Var mse_sum(const net::BoundModel::Outputs& out, Targets targets) {
  Var er2, ev2;
  return ad::sum_all(squared_error(out, targets, &er2, &ev2));
}

Var nll_sum(const net::BoundModel::Outputs& out, Targets targets, NllMode mode) {
  Var er2, ev2;
  Var err = squared_error(out, targets, &er2, &ev2);
  const double n = static_cast<double>(targets.size());
  if (mode == NllMode::kJoint) {
    Var var = ad::add(ad::square(out.sigma_rho), ad::square(out.sigma_v));
    Var terms = ad::add(ad::div(err, var), ad::log(var));
    return ad::add_scalar(ad::sum_all(terms), n * kLog2Pi);
  }
  Var vr = ad::square(out.sigma_rho);
  Var vv = ad::add_scalar(ad::square(out.sigma_v), kVelocityVarianceFloor);
  Var terms = ad::add(ad::add(ad::div(er2, vr), ad::div(ev2, vv)), ad::add(ad::log(vr), ad::log(vv)));
  return ad::add_scalar(ad::sum_all(terms), 2.0 * n * kLog2Pi);
}

// ---- optimizer ----------------------------------------------------------------

AdamState AdamState::zeros(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.named()) {
    s.m.emplace_back(t->size(), 0.0);
    s.v.emplace_back(t->size(), 0.0);
  }
  return s;
}

void adam_step(ModelParams& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const TrainConfig& cfg) {
  auto named = params.named();
  if (grads.size() != named.size() || state.m.size() != named.size() || state.v.size() != named.size())
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(named.size()) + " tensors");
  for (std::size_t k = 0; k < named.size(); ++k) {
    const std::size_t n = named[k].second->size();
    if (grads[k].size() != n || state.m[k].size() != n || state.v[k].size() != n)
      throw std::invalid_argument("adam_step: shape mismatch for '" + named[k].first + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto w = named[k].second->mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
  }
}

// ---- samples and evaluation -------------------------------------------------------

TrainingSample window(const Scenario& s, double t_c, const pipeline::WindowConfig& w, bool temporal_shift) {
  auto sample = pipeline::shift_to(s, t_c, w);
  return temporal_shift ? sample : pipeline::unshift(sample);
}

namespace {

double draw_t_c(const Scenario& s, Rng& rng, const pipeline::WindowConfig& w, bool temporal_shift) {
  if (!temporal_shift) return w.delta_past;
  const double hi = s.duration() - w.delta_pred;
  if (hi < w.delta_past) throw std::invalid_argument("scenario shorter than delta_past + delta_pred");
  return uniform(rng, w.delta_past, hi);
}

}  // namespace

std::vector<TrainingSample> validation_samples(std::span<const Scenario> scenarios, const TrainConfig& cfg,
                                               const pipeline::WindowConfig& w) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    Rng rng = make_rng(cfg.seed, {kStageVal, i});
    const double t_c = draw_t_c(scenarios[i], rng, w, cfg.temporal_shift);
    out.push_back(pipeline::subsample(window(scenarios[i], t_c, w, cfg.temporal_shift), rng, 1.0, 1.0, cfg.val_queries));
  }
  return out;
}

LossTotals evaluate(const ModelParams& params, std::span<const TrainingSample> samples, NllMode mode,
                    std::size_t workers) {
  std::vector<LossTotals> parts(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto& s = samples[i];
    const auto pred = net::predict(params, s.input, s.queries);
    const double n = static_cast<double>(s.queries.size());
    parts[i] = {mse_loss(pred, s.targets) * n, nll_loss(pred, s.targets, mode) * n, mae_loss(pred, s.targets) * n,
                s.queries.size()};
  });
  LossTotals total;
  for (const auto& p : parts) {
    total.mse += p.mse;
    total.nll += p.nll;
    total.mae += p.mae;
    total.queries += p.queries;
  }
  if (total.queries > 0) {
    const double n = static_cast<double>(total.queries);
    total.mse /= n;
    total.nll /= n;
    total.mae /= n;
  }
  return total;
}

// ---- training loop --------------------------------------------------------------

namespace {

struct SampleResult {
  std::vector<std::vector<double>> grads;
  double mse = 0.0;
  double nll = 0.0;
};

Json record_json(const EpochRecord& r) {
  return Json{{"epoch", r.epoch},     {"train_mse", r.train_mse}, {"val_mse", r.val_mse}, {"train_nll", r.train_nll},
              {"val_nll", r.val_nll}, {"grad_norm", r.grad_norm}, {"seconds", r.seconds}};
}

EpochRecord record_from_json(const Json& j) {
  auto num = [&](const char* k) { return !j.contains(k) || j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>(); };
  return {j.at("epoch").get<std::size_t>(), num("train_mse"), num("val_mse"), num("train_nll"), num("val_nll"),
          num("grad_norm"), num("seconds")};
}

void write_log(const std::filesystem::path& path, const std::vector<EpochRecord>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << "epoch,train_mse,val_mse,train_nll,val_nll,grad_norm,seconds\n";
  f.precision(10);
  for (const auto& r : rows)
    f << r.epoch << ',' << r.train_mse << ',' << r.val_mse << ',' << r.train_nll << ',' << r.val_nll << ','
      << r.grad_norm << ',' << r.seconds << '\n';
}

ad::Tensor as_tensor(const std::vector<double>& v) { return ad::Tensor({v.size()}, v); }

}  // namespace

TrainResult train(std::span<const Scenario> train_set, std::span<const Scenario> val_set,
                  const pipeline::WindowConfig& windows, const net::ModelConfig& model, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  model.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const auto wall0 = std::chrono::steady_clock::now();

  ModelParams params, best;
  AdamState adam;
  TrainReport report;
  std::size_t start_epoch = 0;
  bool best_is_nll = false;
  double best_score = std::numeric_limits<double>::infinity();

  if (options.resume) {
    const net::Checkpoint& ck = *options.resume;
    best = ck.params;
    params = ck.params;
    adam = AdamState::zeros(params);
    const Json meta = Json::parse(ck.meta_json);
    auto named = params.named();
    std::size_t found = 0;
    for (const auto& [name, t] : ck.extra) {
      for (std::size_t k = 0; k < named.size(); ++k) {
        auto copy = [&](std::vector<double>& dst) {
          if (t.size() != dst.size()) throw net::CheckpointError("resume: size mismatch for '" + name + "'");
          dst.assign(t.data().begin(), t.data().end());
          ++found;
        };
        if (name == "current." + named[k].first) {
          if (t.size() != named[k].second->size()) throw net::CheckpointError("resume: size mismatch for '" + name + "'");
          std::copy(t.data().begin(), t.data().end(), named[k].second->mutable_data().begin());
          ++found;
        } else if (name == "adam.m." + named[k].first) {
          copy(adam.m[k]);
        } else if (name == "adam.v." + named[k].first) {
          copy(adam.v[k]);
        }
      }
    }
    if (found != 3 * named.size()) throw net::CheckpointError("resume: checkpoint lacks optimizer state");
    if (to_json(params.config) != to_json(model)) throw net::CheckpointError("resume: model config differs from checkpoint");
    try {
      adam.step = meta.at("adam_step").get<std::uint64_t>();
      start_epoch = meta.at("epoch").get<std::size_t>() + 1;
      report.best_epoch = meta.at("best_epoch").get<std::size_t>();
      best_is_nll = meta.at("best_is_nll").get<bool>();
      best_score = meta.at("best_score").is_null() ? std::numeric_limits<double>::infinity()
                                                   : meta.at("best_score").get<double>();
      for (const auto& r : meta.at("history")) report.epochs.push_back(record_from_json(r));
    } catch (const nlohmann::json::exception& e) {
      throw net::CheckpointError(std::string("resume: checkpoint metadata incomplete: ") + e.what());
    }
  } else {
    Rng rng = make_rng(cfg.seed, {kStageInit});
    params = ModelParams::init(model, rng);
    best = params;
    adam = AdamState::zeros(params);
  }

  const auto val = validation_samples(val_set, cfg, windows);
  const std::size_t warm = cfg.warmup_epochs();
  const std::size_t n_params = params.named().size();

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool nll_phase = epoch >= warm;

    std::vector<TrainingSample> samples(train_set.size());
    parallel_for(train_set.size(), cfg.workers, [&](std::size_t i) {
      Rng rng = make_rng(cfg.seed, {kStageTrain, epoch, i});
      const double t_c = draw_t_c(train_set[i], rng, windows, cfg.temporal_shift);
      samples[i] = pipeline::subsample(window(train_set[i], t_c, windows, cfg.temporal_shift), rng, cfg.keep_min,
                                       cfg.keep_max, cfg.n_queries);
    });
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(cfg.seed, {kStageTrain, epoch});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_mse = 0.0, sum_nll = 0.0, grad_max = 0.0;
    std::size_t sum_n = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::size_t batch_n = 0;
      for (std::size_t k = b0; k < b1; ++k) batch_n += samples[order[k]].queries.size();
      const double inv = 1.0 / static_cast<double>(batch_n);

      std::vector<SampleResult> results(b1 - b0);
      parallel_for(b1 - b0, cfg.workers, [&](std::size_t k) {
        const auto& s = samples[order[b0 + k]];
        Tape tape;
        net::BoundModel m(tape, params);
        try {
          const auto out = m.forward(s.input, s.queries);
          Var mse = mse_sum(out, s.targets);
          Var nll = nll_sum(out, s.targets, cfg.nll_mode);
          tape.backward(ad::scale(nll_phase ? nll : mse, inv));
          results[k] = {m.gradients(), mse.item(), nll.item()};
        } catch (const ad::DomainError& e) {
          throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
        }
      });

      std::vector<std::vector<double>> grads = std::move(results[0].grads);
      for (std::size_t k = 1; k < results.size(); ++k)
        for (std::size_t p = 0; p < n_params; ++p)
          for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += results[k].grads[p][i];
      for (const auto& r : results) {
        sum_mse += r.mse;
        sum_nll += r.nll;
      }
      sum_n += batch_n;
      const double batch_loss = std::accumulate(results.begin(), results.end(), 0.0, [&](double a, const SampleResult& r) {
        return a + (nll_phase ? r.nll : r.mse);
      });
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training diverged: non-finite " + std::string(nll_phase ? "NLL" : "MSE") +
                              " loss in epoch " + std::to_string(epoch));
      double sq = 0.0;
      for (const auto& g : grads)
        for (double x : g) sq += x * x;
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm))
        throw DivergenceError("training diverged: non-finite gradient in epoch " + std::to_string(epoch));
      grad_max = std::max(grad_max, norm);
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
        const double f = cfg.clip_norm / norm;
        for (auto& g : grads)
          for (double& x : g) x *= f;
      }
      adam_step(params, grads, adam, cfg);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = sum_mse / static_cast<double>(sum_n);
    rec.train_nll = sum_nll / static_cast<double>(sum_n);
    rec.grad_norm = grad_max;
    if (!val.empty()) {
      LossTotals v;
      try {
        v = evaluate(params, val, cfg.nll_mode, cfg.workers);
      } catch (const std::invalid_argument& e) {
        // NaN parameters surface as invalid sigmas here.
        throw DivergenceError("training diverged: validation failed in epoch " + std::to_string(epoch) + ": " +
                              e.what());
      }
      rec.val_mse = v.mse;
      rec.val_nll = v.nll;
    } else {
      rec.val_mse = rec.train_mse;
      rec.val_nll = rec.train_nll;
    }
    if (!std::isfinite(rec.val_mse) || !std::isfinite(rec.val_nll))
      throw DivergenceError("training diverged: non-finite validation loss in epoch " + std::to_string(epoch));

    if (nll_phase && !best_is_nll) {
      best_is_nll = true;
      best_score = std::numeric_limits<double>::infinity();
    }
    const double score = nll_phase ? rec.val_nll : rec.val_mse;
    if (score < best_score) {
      best_score = score;
      best = params;
      report.best_epoch = epoch;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    report.best_score = best_score;

    if (options.on_epoch) options.on_epoch(rec);
    if (!options.log_csv.empty()) write_log(options.log_csv, report.epochs);
    if (!options.checkpoint.empty()) {
      Json history = Json::array();
      for (const auto& r : report.epochs) history.push_back(record_json(r));
      const Json meta{{"epoch", epoch},
                      {"adam_step", adam.step},
                      {"best_epoch", report.best_epoch},
                      {"best_is_nll", best_is_nll},
                      {"best_score", best_score},
                      {"train_config", to_json(cfg)},
                      {"history", history}};
      net::Checkpoint ck{best, meta.dump(), {}};
      const auto named = params.named();
      for (std::size_t k = 0; k < named.size(); ++k) {
        const auto& t = *named[k].second;
        ck.extra.emplace_back("current." + named[k].first, ad::Tensor(t.shape(), {t.data().begin(), t.data().end()}));
      }
      for (std::size_t k = 0; k < named.size(); ++k) ck.extra.emplace_back("adam.m." + named[k].first, as_tensor(adam.m[k]));
      for (std::size_t k = 0; k < named.size(); ++k) ck.extra.emplace_back("adam.v." + named[k].first, as_tensor(adam.v[k]));
      net::save_checkpoint(ck, options.checkpoint);
      report.checkpoint = options.checkpoint.string();
    }
  }
  report.best_score = best_score;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return {best, params, report};
}

TrainResult train(const pipeline::Dataset& data, const net::ModelConfig& model, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  const auto [tr, va] = pipeline::split_indices(data.scenarios.size(), cfg.train_fraction);
  std::vector<Scenario> train_set, val_set;
  for (auto i : tr) train_set.push_back(data.scenarios[i]);
  for (auto i : va) val_set.push_back(data.scenarios[i]);
  return train(train_set, val_set, data.config.windows, model, cfg, options);
}

}  // namespace ontraffic::training
