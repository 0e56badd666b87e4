#include "ontraffic/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "ontraffic/config_json.hpp"

namespace ontraffic::pipeline {

namespace {

constexpr char kMagic[4] = {'O', 'N', 'T', 'F'};
constexpr std::uint64_t kStageGenerate = 1;

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f32s(const std::vector<double>& vs) {
    for (double v : vs) f32(v);
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::size_t pos() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      std::ostringstream os;
      os << "dataset truncated while reading " << what << " at byte " << pos_ << " (need " << n << ", have "
         << in_.size() - pos_ << ")";
      throw TruncationError(os.str());
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int64_t i64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return static_cast<std::int64_t>(v);
  }
  double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
  std::vector<double> f32s(std::size_t n, const char* what) {
    need(4 * n, what);
    std::vector<double> out(n);
    for (auto& v : out) v = f32(what);
    return out;
  }
  std::span<const std::uint8_t> slice(std::size_t from, std::size_t to) const { return in_.subspan(from, to - from); }
  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; blocks are far below 4 GiB.
  c = crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

void write_block(std::vector<std::uint8_t>& out, const Scenario& s) {
  const std::size_t start = out.size();
  Writer w(out);
  w.u32(static_cast<std::uint32_t>(s.source));
  w.u32(static_cast<std::uint32_t>(s.n_cells()));
  w.u32(static_cast<std::uint32_t>(s.n_times()));
  w.u32(static_cast<std::uint32_t>(s.schedule.phases.size()));
  w.u32(static_cast<std::uint32_t>(s.probes.size()));
  w.f32(s.x_min);
  w.f32(s.x_max);
  w.f32(s.schedule.rho_red);
  w.f32(s.schedule.rho_green);
  w.f32(s.schedule.delta_min);
  w.f32(s.schedule.delta_max);
  w.f32s(s.cell_centers);
  w.f32s(s.times);
  w.f32s(s.rho);
  w.f32s(s.v);
  for (const auto& p : s.schedule.phases) {
    w.f32(p.duration);
    w.f32(p.level);
    w.f32(p.red ? 1.0 : 0.0);
  }
  for (const auto& p : s.probes) {
    w.f32(p.rho);
    w.f32(p.v);
    w.f32(p.y);
    w.f32(p.t);
  }
  for (const auto& p : s.probes) w.i64(p.source_id);
  w.u32(crc(std::span<const std::uint8_t>(out).subspan(start)));
}

Scenario read_block(Reader& r, std::size_t index) {
  const std::size_t start = r.pos();
  Scenario s;
  const auto src = r.u32("scenario source");
  if (src > 1) throw DatasetError("scenario " + std::to_string(index) + ": unknown source tag");
  s.source = static_cast<Source>(src);
  const std::size_t nc = r.u32("n_cells");
  const std::size_t nt = r.u32("n_times");
  const std::size_t nph = r.u32("n_phases");
  const std::size_t npr = r.u32("n_probes");
  s.x_min = r.f32("x_min");
  s.x_max = r.f32("x_max");
  s.schedule.rho_red = r.f32("rho_red");
  s.schedule.rho_green = r.f32("rho_green");
  s.schedule.delta_min = r.f32("delta_min");
  s.schedule.delta_max = r.f32("delta_max");
  s.cell_centers = r.f32s(nc, "cell centers");
  s.times = r.f32s(nt, "times");
  s.rho = r.f32s(nt * nc, "density field");
  s.v = r.f32s(nt * nc, "velocity field");
  r.need(12 * nph, "phases");
  for (std::size_t i = 0; i < nph; ++i) {
    lwr::Phase p{};
    p.duration = r.f32("phase");
    p.level = r.f32("phase");
    p.red = r.f32("phase") != 0.0;
    s.schedule.phases.push_back(p);
  }
  r.need(24 * npr, "probes");
  s.probes.resize(npr);
  for (auto& p : s.probes) {
    p.rho = r.f32("probe");
    p.v = r.f32("probe");
    p.y = r.f32("probe");
    p.t = r.f32("probe");
  }
  for (auto& p : s.probes) p.source_id = r.i64("probe id");
  const std::size_t end = r.pos();
  const auto stored = r.u32("checksum");
  if (stored != crc(r.slice(start, end))) {
    throw ChecksumError("dataset checksum mismatch in scenario " + std::to_string(index));
  }
  return s;
}

}  // namespace

Dataset generate_dataset(const GenerationConfig& cfg, unsigned workers, GenerationSummary* summary) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.scenarios.resize(cfg.scenario_count);
  std::vector<idm::SimulationStats> stats(cfg.scenario_count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < cfg.scenario_count; i = next++) {
      try {
        Rng rng = make_rng(cfg.seed, {kStageGenerate, i});
        d.scenarios[i] = cfg.source == Source::kIdm ? make_idm_scenario(rng, cfg, &stats[i])
                                                    : make_godunov_scenario(rng, cfg);
        quantize(d.scenarios[i]);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = cfg.scenario_count;
      }
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(cfg.scenario_count)));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
  if (summary) {
    *summary = {};
    for (const auto& s : stats) {
      summary->collisions += s.collisions;
      summary->red_violations += s.red_violations;
      summary->conservation_violations += s.conservation_violations;
    }
  }
  return d;
}

std::vector<std::uint8_t> serialize(const Dataset& d) {
  std::vector<std::uint8_t> out;
  out.reserve(predicted_size(d) + 4096);
  Writer w(out);
  w.bytes(kMagic, 4);
  w.u32(kDatasetVersion);
  Json header{{"schema_version", kDatasetVersion},
              {"generation", to_json(d.config)},
              {"scenario_count", d.scenarios.size()},
              {"normalization", {{"density", "jam density"}, {"velocity", "free-flow speed"}}},
              {"units", {{"position", "km"}, {"time", "min"}}}};
  const std::string text = header.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  for (const auto& s : d.scenarios) write_block(out, s);
  return out;
}

Dataset deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw VersionError("not a dataset file: bad magic bytes (expected ONTF)");
  }
  r.string(4, "magic");
  const auto version = r.u32("version");
  if (version != kDatasetVersion) {
    throw VersionError("unsupported dataset version " + std::to_string(version) + " (expected " +
                       std::to_string(kDatasetVersion) + ")");
  }
  const auto len = r.u32("header length");
  const std::string text = r.string(len, "header");
  Json header;
  try {
    header = Json::parse(text);
  } catch (const Json::exception& e) {
    throw DatasetError(std::string("dataset header is not valid JSON: ") + e.what());
  }
  Dataset d;
  apply_json(d.config, header.at("generation"));
  const auto n = header.at("scenario_count").get<std::size_t>();
  d.scenarios.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.scenarios.push_back(read_block(r, i));
  if (r.pos() != bytes.size()) throw DatasetError("trailing bytes after the last scenario");
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  const auto bytes = serialize(d);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open dataset '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::size_t block_size(const Scenario& s) {
  const std::size_t nc = s.n_cells(), nt = s.n_times();
  return 5 * 4 + 6 * 4 + 4 * (nc + nt + 2 * nt * nc) + 12 * s.schedule.phases.size() + 24 * s.probes.size() + 4;
}

std::size_t predicted_size(const Dataset& d) {
  std::size_t total = 0;
  for (const auto& s : d.scenarios) total += block_size(s);
  return total;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument("train fraction must lie in (0, 1]");
  }
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, n > 0 ? 1 : 0, n);
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? out.first : out.second).push_back(i);
  return out;
}

}  // namespace ontraffic::pipeline
