#pragma once

// JSON mapping of configuration structs. Readers reject unknown keys and
// type mismatches with messages naming the offending key.

#include <filesystem>

#include <json.hpp>

#include "ontraffic/evaluation.hpp"
#include "ontraffic/net.hpp"
#include "ontraffic/scenario.hpp"
#include "ontraffic/training.hpp"

namespace ontraffic {

using Json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Json to_json(const pipeline::GenerationConfig& c);
/// Overrides fields of `c` present in `j`.
void apply_json(pipeline::GenerationConfig& c, const Json& j);

Json to_json(const net::ModelConfig& c);
void apply_json(net::ModelConfig& c, const Json& j);

Json to_json(const training::TrainConfig& c);
void apply_json(training::TrainConfig& c, const Json& j);

Json to_json(const evaluation::EvalConfig& c);
void apply_json(evaluation::EvalConfig& c, const Json& j);

/// One experiment file: {"seed", "data", "model", "train", "eval"}. The root
/// seed feeds every stage; stages draw from disjoint streams.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  pipeline::GenerationConfig data;
  net::ModelConfig model;
  training::TrainConfig train;
  evaluation::EvalConfig eval;

  /// Propagates the root seed into the stage configs and validates them.
  void finalize();
};

Json to_json(const ExperimentConfig& c);
void apply_json(ExperimentConfig& c, const Json& j);
/// Raw config document plus its text, kept for error locations.
struct ConfigSource {
  Json json = Json::object();
  std::string text;
  std::string origin = "<defaults>";
};
/// Syntax errors carry file:line:column.
ConfigSource read_config(const std::filesystem::path& path);
/// Applies and finalizes; semantic errors point at the offending key's line
/// when it appears in the text.
ExperimentConfig make_experiment(const ConfigSource& src);
ExperimentConfig load_experiment(const std::filesystem::path& path);

}  // namespace ontraffic
