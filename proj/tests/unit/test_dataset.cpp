#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "ontraffic/config_json.hpp"
#include "ontraffic/dataset.hpp"

using namespace ontraffic;
using namespace ontraffic::pipeline;

namespace {

Dataset small(std::size_t n, Source src = Source::kGodunov, std::uint64_t seed = 7) {
  GenerationConfig cfg = src == Source::kIdm ? GenerationConfig::idm_defaults() : GenerationConfig{};
  cfg.scenario_count = n;
  cfg.n_cells = 50;
  cfg.seed = seed;
  return generate_dataset(cfg);
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

void check_identical(const Scenario& a, const Scenario& b) {
  CHECK(a.source == b.source);
  CHECK(same_bits(a.x_min, b.x_min));
  CHECK(same_bits(a.x_max, b.x_max));
  REQUIRE(a.rho.size() == b.rho.size());
  for (std::size_t i = 0; i < a.rho.size(); ++i) {
    if (!same_bits(a.rho[i], b.rho[i]) || !same_bits(a.v[i], b.v[i])) {
      FAIL("field mismatch at " << i);
    }
  }
  CHECK(a.times == b.times);
  CHECK(a.cell_centers == b.cell_centers);
  REQUIRE(a.schedule.phases.size() == b.schedule.phases.size());
  for (std::size_t i = 0; i < a.schedule.phases.size(); ++i) {
    CHECK(same_bits(a.schedule.phases[i].duration, b.schedule.phases[i].duration));
    CHECK(a.schedule.phases[i].red == b.schedule.phases[i].red);
  }
  REQUIRE(a.probes.size() == b.probes.size());
  for (std::size_t i = 0; i < a.probes.size(); ++i) {

    CHECK(same_bits(a.probes[i].y, b.probes[i].y));
    CHECK(same_bits(a.probes[i].t, b.probes[i].t));
    CHECK(same_bits(a.probes[i].rho, b.probes[i].rho));
    CHECK(a.probes[i].source_id == b.probes[i].source_id);
  }
}

}  // namespace

TEST_CASE("round trip is bit-identical") {
  for (auto src : {Source::kGodunov, Source::kIdm}) {
    const auto d = small(3, src);
    const auto bytes = serialize(d);
    const auto back = deserialize(bytes);
    REQUIRE(back.scenarios.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) check_identical(d.scenarios[i], back.scenarios[i]);
    CHECK(to_json(back.config) == to_json(d.config));
    CHECK(serialize(back) == bytes);
  }
}

TEST_CASE("file round trip") {
  const auto d = small(2);
  const auto path = std::filesystem::temp_directory_path() / "ontraffic_test_dataset.ontf";
  save_dataset(d, path);
  const auto back = load_dataset(path);
  CHECK(serialize(back) == serialize(d));
  std::filesystem::remove(path);
  CHECK_THROWS(load_dataset(path));
}

TEST_CASE("corruption is detected") {
  const auto bytes = serialize(small(2));
  SUBCASE("magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(deserialize(b), VersionError);
  }
  SUBCASE("version") {
    auto b = bytes;
    b[4] = 99;
    CHECK_THROWS_AS(deserialize(b), VersionError);
  }
  SUBCASE("truncation") {
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(deserialize(b), DatasetError);
    }
    std::vector<std::uint8_t> b(bytes.begin(), bytes.end() - 3);
    CHECK_THROWS_AS(deserialize(b), TruncationError);
  }
  SUBCASE("payload bit flip") {
    auto b = bytes;
    b[b.size() - 100] ^= 0x10;
    CHECK_THROWS_AS(deserialize(b), ChecksumError);
  }
}

TEST_CASE("generation is deterministic and independent of the worker count") {
  const auto a = serialize(small(6, Source::kGodunov, 99));
  GenerationConfig cfg;
  cfg.scenario_count = 6;
  cfg.n_cells = 50;
  cfg.seed = 99;
  const auto b = serialize(generate_dataset(cfg, 3));
  CHECK(a == b);
  CHECK(serialize(small(6, Source::kGodunov, 100)) != a);
}

TEST_CASE("1000-scenario file size matches the record-size sum") {
  const auto d = small(1000);
  const auto bytes = serialize(d);
  const double predicted = static_cast<double>(predicted_size(d));
  CHECK(std::abs(static_cast<double>(bytes.size()) - predicted) <= 0.1 * predicted);
}

TEST_CASE("idm generation reports simulator invariants") {
  auto cfg = GenerationConfig::idm_defaults();
  cfg.scenario_count = 4;
  GenerationSummary summary;
  const auto d = generate_dataset(cfg, 2, &summary);
  CHECK(d.scenarios.size() == 4);
  CHECK(summary.collisions == 0);
  CHECK(summary.red_violations == 0);
  CHECK(summary.conservation_violations == 0);
}

TEST_CASE("split indices") {
  const auto [train, val] = split_indices(100, 0.8);
  CHECK(train.size() == 80);
  CHECK(val.size() == 20);
  CHECK(val.front() == 80);
  CHECK_THROWS_AS(split_indices(10, 0.0), std::invalid_argument);
}

TEST_CASE("config json rejects unknown keys and bad types") {
  GenerationConfig c;
  CHECK_THROWS_AS(apply_json(c, Json{{"n_cell", 5}}), ConfigError);
  CHECK_THROWS_AS(apply_json(c, Json{{"n_cells", "many"}}), ConfigError);
  apply_json(c, Json{{"source", "idm"}, {"seed", 5}});
  CHECK(c.source == Source::kIdm);
  CHECK(c.x_max == 1.0);
  CHECK(c.seed == 5);
}
