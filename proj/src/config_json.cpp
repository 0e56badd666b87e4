#include "ontraffic/config_json.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <string>

namespace ontraffic {

namespace {

template <typename T>
void read(const Json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const Json& j, const std::set<std::string>& known, const char* section) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError(std::string("unknown config key '") + k + "' in section '" + section + "'");
  }
}

}  // namespace

Json to_json(const pipeline::GenerationConfig& c) {
  return Json{{"source", pipeline::to_string(c.source)},
              {"scenario_count", c.scenario_count},
              {"x_min", c.x_min},
              {"x_max", c.x_max},
              {"n_cells", c.n_cells},
              {"t_end", c.t_end},
              {"snapshot_interval", c.snapshot_interval},
              {"rho_bar", c.rho_bar},
              {"probe_probability", c.probe_probability},
              {"delta_min", c.delta_min},
              {"delta_max", c.delta_max},
              {"rho_red", c.rho_red},
              {"rho_green", c.rho_green},
              {"rho_init", c.rho_init},
              {"s_w_min", c.s_w_min},
              {"s_w_max", c.s_w_max},
              {"cfl", c.cfl},
              {"idm_inflow_rate", c.idm_inflow_rate},
              {"idm_warmup", c.idm_warmup},
              {"delta_past", c.windows.delta_past},
              {"delta_pred", c.windows.delta_pred},
              {"control_spacing", c.windows.control_spacing},
              {"seed", c.seed}};
}

void apply_json(pipeline::GenerationConfig& c, const Json& j) {
  reject_unknown(j,
                 {"source", "scenario_count", "x_min", "x_max", "n_cells", "t_end", "snapshot_interval", "rho_bar",
                  "probe_probability", "delta_min", "delta_max", "rho_red", "rho_green", "rho_init", "s_w_min",
                  "s_w_max", "cfl", "idm_inflow_rate", "idm_warmup", "delta_past", "delta_pred", "control_spacing",
                  "seed"},
                 "dataset");
  if (j.contains("source")) {
    std::string s;
    read(j, "source", s);
    try {
      const auto src = pipeline::source_from_string(s);
      if (src == pipeline::Source::kIdm && c.source != src) {
        // Switching families picks up the family's road geometry unless
        // overridden below.
        const auto keep_seed = c.seed;
        const auto keep_count = c.scenario_count;
        const auto keep_windows = c.windows;
        c = pipeline::GenerationConfig::idm_defaults();
        c.seed = keep_seed;
        c.scenario_count = keep_count;
        c.windows = keep_windows;
      }
      c.source = src;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config key 'source': ") + e.what());
    }
  }
  read(j, "scenario_count", c.scenario_count);
  read(j, "x_min", c.x_min);
  read(j, "x_max", c.x_max);
  read(j, "n_cells", c.n_cells);
  read(j, "t_end", c.t_end);
  read(j, "snapshot_interval", c.snapshot_interval);
  read(j, "rho_bar", c.rho_bar);
  read(j, "probe_probability", c.probe_probability);
  read(j, "delta_min", c.delta_min);
  read(j, "delta_max", c.delta_max);
  read(j, "rho_red", c.rho_red);
  read(j, "rho_green", c.rho_green);
  read(j, "rho_init", c.rho_init);
  read(j, "s_w_min", c.s_w_min);
  read(j, "s_w_max", c.s_w_max);
  read(j, "cfl", c.cfl);
  read(j, "idm_inflow_rate", c.idm_inflow_rate);
  read(j, "idm_warmup", c.idm_warmup);
  read(j, "delta_past", c.windows.delta_past);
  read(j, "delta_pred", c.windows.delta_pred);
  read(j, "control_spacing", c.windows.control_spacing);
  read(j, "seed", c.seed);
}

Json to_json(const net::ModelConfig& c) {
  return Json{{"d_enc", c.d_enc},
              {"heads", c.heads},
              {"head_width", c.head_width},
              {"p", c.p},
              {"coord_hidden", c.coord_hidden},
              {"value_enc_hidden", c.value_enc_hidden},
              {"score_hidden", c.score_hidden},
              {"head_value_hidden", c.head_value_hidden},
              {"phi_hidden", c.phi_hidden},
              {"phi_sigma_hidden", c.phi_sigma_hidden},
              {"trunk_hidden", c.trunk_hidden},
              {"nd_hidden", c.nd_hidden},
              {"nd_sigma_hidden", c.nd_sigma_hidden},
              {"fd_hidden", c.fd_hidden},
              {"activation", net::to_string(c.activation)},
              {"sigma_floor", c.sigma_floor},
              {"linear_decoder", c.linear_decoder},
              {"shared_trunk", c.shared_trunk},
              {"x_min", c.x_min},
              {"x_max", c.x_max},
              {"t_min", c.t_min},
              {"t_max", c.t_max}};
}

void apply_json(net::ModelConfig& c, const Json& j) {
  reject_unknown(j,
                 {"d_enc", "heads", "head_width", "p", "coord_hidden", "value_enc_hidden", "score_hidden",
                  "head_value_hidden", "phi_hidden", "phi_sigma_hidden", "trunk_hidden", "nd_hidden", "nd_sigma_hidden",
                  "fd_hidden", "activation", "sigma_floor", "linear_decoder", "shared_trunk", "x_min", "x_max", "t_min",
                  "t_max"},
                 "model");
  read(j, "d_enc", c.d_enc);
  read(j, "heads", c.heads);
  read(j, "head_width", c.head_width);
  read(j, "p", c.p);
  read(j, "coord_hidden", c.coord_hidden);
  read(j, "value_enc_hidden", c.value_enc_hidden);
  read(j, "score_hidden", c.score_hidden);
  read(j, "head_value_hidden", c.head_value_hidden);
  read(j, "phi_hidden", c.phi_hidden);
  read(j, "phi_sigma_hidden", c.phi_sigma_hidden);
  read(j, "trunk_hidden", c.trunk_hidden);
  read(j, "nd_hidden", c.nd_hidden);
  read(j, "nd_sigma_hidden", c.nd_sigma_hidden);
  read(j, "fd_hidden", c.fd_hidden);
  if (j.contains("activation")) {
    std::string s;
    read(j, "activation", s);
    try {
      c.activation = net::activation_from_string(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config key 'activation': ") + e.what());
    }
  }
  read(j, "sigma_floor", c.sigma_floor);
  read(j, "linear_decoder", c.linear_decoder);
  read(j, "shared_trunk", c.shared_trunk);
  read(j, "x_min", c.x_min);
  read(j, "x_max", c.x_max);
  read(j, "t_min", c.t_min);
  read(j, "t_max", c.t_max);
}

Json to_json(const training::TrainConfig& c) {
  return Json{{"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"epochs", c.epochs},
              {"warmup_fraction", c.warmup_fraction},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"seed", c.seed},
              {"train_fraction", c.train_fraction},
              {"val_fraction", c.val_fraction},
              {"keep_min", c.keep_min},
              {"keep_max", c.keep_max},
              {"n_queries", c.n_queries},
              {"val_queries", c.val_queries},
              {"temporal_shift", c.temporal_shift},
              {"nll_mode", training::to_string(c.nll_mode)},
              {"clip_norm", c.clip_norm},
              {"workers", c.workers}};
}

void apply_json(training::TrainConfig& c, const Json& j) {
  reject_unknown(j,
                 {"batch_size", "learning_rate", "epochs", "warmup_fraction", "beta1", "beta2", "epsilon", "seed",
                  "train_fraction", "val_fraction", "keep_min", "keep_max", "n_queries", "val_queries",
                  "temporal_shift", "nll_mode", "clip_norm", "workers"},
                 "train");
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "epochs", c.epochs);
  read(j, "warmup_fraction", c.warmup_fraction);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "epsilon", c.epsilon);
  read(j, "seed", c.seed);
  read(j, "train_fraction", c.train_fraction);
  if (j.contains("train_fraction") && !j.contains("val_fraction")) c.val_fraction = 1.0 - c.train_fraction;
  read(j, "val_fraction", c.val_fraction);
  read(j, "keep_min", c.keep_min);
  read(j, "keep_max", c.keep_max);
  read(j, "n_queries", c.n_queries);
  read(j, "val_queries", c.val_queries);
  read(j, "temporal_shift", c.temporal_shift);
  if (j.contains("nll_mode")) {
    std::string s;
    read(j, "nll_mode", s);
    try {
      c.nll_mode = training::nll_mode_from_string(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config key 'nll_mode': ") + e.what());
    }
  }
  read(j, "clip_norm", c.clip_norm);
  read(j, "workers", c.workers);
}

Json to_json(const evaluation::EvalConfig& c) {
  return Json{{"t_c0", c.t_c0},
              {"delta_h", c.delta_h},
              {"shifts", c.shifts},
              {"noise_m", c.noise_m},
              {"dropout", c.dropout},
              {"history", c.history},
              {"k", c.k},
              {"coverage_check", c.coverage_check},
              {"coverage_bins", c.coverage_bins}};
}

void apply_json(evaluation::EvalConfig& c, const Json& j) {
  reject_unknown(j,
                 {"t_c0", "delta_h", "shifts", "noise_m", "dropout", "history", "k", "coverage_check",
                  "coverage_bins"},
                 "eval");
  read(j, "t_c0", c.t_c0);
  read(j, "delta_h", c.delta_h);
  read(j, "shifts", c.shifts);
  read(j, "noise_m", c.noise_m);
  read(j, "dropout", c.dropout);
  read(j, "history", c.history);
  read(j, "k", c.k);
  read(j, "coverage_check", c.coverage_check);
  read(j, "coverage_bins", c.coverage_bins);
}

void ExperimentConfig::finalize() {
  data.seed = seed;
  train.seed = seed;
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(e.what()) + " (section " + section + ")");
    }
  };
  wrap("data", [&] { data.validate(); });
  wrap("model", [&] { model.validate(); });
  wrap("train", [&] { train.validate(); });
  wrap("eval", [&] { eval.validate(); });
}

Json to_json(const ExperimentConfig& c) {
  return Json{{"seed", c.seed},
              {"data", to_json(c.data)},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"eval", to_json(c.eval)}};
}

void apply_json(ExperimentConfig& c, const Json& j) {
  reject_unknown(j, {"seed", "data", "model", "train", "eval"}, "experiment");
  read(j, "seed", c.seed);
  if (j.contains("data")) {
    if (j["data"].contains("seed")) throw ConfigError("config key 'seed' belongs at the top level, not in 'data'");
    apply_json(c.data, j["data"]);
  }
  if (j.contains("model")) apply_json(c.model, j["model"]);
  if (j.contains("train")) {
    if (j["train"].contains("seed")) throw ConfigError("config key 'seed' belongs at the top level, not in 'train'");
    apply_json(c.train, j["train"]);
  }
  if (j.contains("eval")) apply_json(c.eval, j["eval"]);
}

namespace {

std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t at) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(at, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

// Location of the first quoted name in an error message, looked up in the
// file text as a JSON key.
std::string locate(const std::string& path, const std::string& text, const std::string& message) {
  const auto a = message.find('\'');
  const auto b = a == std::string::npos ? a : message.find('\'', a + 1);
  if (b != std::string::npos) {
    const auto at = text.find('"' + message.substr(a + 1, b - a - 1) + '"');
    if (at != std::string::npos) {
      const auto [line, col] = line_col(text, at);
      return path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": ";
    }
  }
  return path + ": ";
}

}  // namespace

ConfigSource read_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  ConfigSource src;
  src.text = ss.str();
  src.origin = path.string();
  try {
    src.json = Json::parse(src.text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = line_col(src.text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(src.origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
  }
  return src;
}

ExperimentConfig make_experiment(const ConfigSource& src) {
  ExperimentConfig c;
  try {
    apply_json(c, src.json);
    c.finalize();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(locate(src.origin, src.text, e.what()) + e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) { return make_experiment(read_config(path)); }

}  // namespace ontraffic
