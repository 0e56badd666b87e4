#pragma once

// Dataset container and its on-disk format.
//
// Layout (all integers little-endian):
//   "ONTF" | u32 version | u32 header_len | header JSON (UTF-8)
//   per scenario:
//     u32 source | u32 n_cells | u32 n_times | u32 n_phases | u32 n_probes
//     f32 x_min, x_max, rho_red, rho_green, delta_min, delta_max
//     f32 cell_centers[n_cells] | f32 times[n_times]
//     f32 rho[n_times * n_cells] | f32 v[n_times * n_cells]
//     f32 phases[n_phases][3] (duration, level, red)
//     f32 probes[n_probes][4] (rho, v, y, t) | i64 probe_ids[n_probes]
//     u32 crc32 of the block bytes above

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "ontraffic/scenario.hpp"

namespace ontraffic::pipeline {

inline constexpr std::uint32_t kDatasetVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class TruncationError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class ChecksumError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct Dataset {
  GenerationConfig config;
  std::vector<Scenario> scenarios;
};

struct GenerationSummary {
  std::size_t collisions = 0;
  std::size_t red_violations = 0;
  std::size_t conservation_violations = 0;
};

/// Scenario i is drawn from make_rng(seed, {1, i}), so the result does not
/// depend on `workers`. Values are quantized to float32.
Dataset generate_dataset(const GenerationConfig& cfg, unsigned workers = 1, GenerationSummary* summary = nullptr);

std::vector<std::uint8_t> serialize(const Dataset& d);
Dataset deserialize(std::span<const std::uint8_t> bytes);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Bytes of one scenario block including its checksum.
std::size_t block_size(const Scenario& s);
/// Sum of block sizes; excludes the header.
std::size_t predicted_size(const Dataset& d);

/// Contiguous train/validation split of scenario indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double train_fraction);

}  // namespace ontraffic::pipeline
