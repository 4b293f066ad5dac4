#pragma once

// Persistence for trajectory datasets, normalization statistics and model
// checkpoints. Both container formats share one layout:
//
//   <ASCII header: magic line, then key=value lines, terminated by "end\n">
//   <payload: little-endian float64 / int64 arrays, sizes implied by header>
//   <trailer: the 4 bytes "DCRC" + little-endian uint32 CRC-32 of everything before it>
//
// The byte-level description lives in docs/formats.md.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "didi/digest.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"

namespace didi {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr double kMinStd = 1e-8;

/// Flat segment layout [s_t, a_t, s_{t+1}, a_{t+1}, ...].
struct SegmentLayout {
  int horizon = 8;
  int state_dim = 4;
  int action_dim = 2;

  int step_dim() const noexcept { return state_dim + action_dim; }
  int dim() const noexcept { return horizon * step_dim(); }
  int state_offset(int t) const noexcept { return t * step_dim(); }
  int action_offset(int t) const noexcept { return t * step_dim() + state_dim; }

  bool operator==(const SegmentLayout&) const = default;
};

struct TrajectorySegment {
  Vec values;
  SegmentLayout layout;
  std::int64_t start_time = 0;

  Vec state(int t) const { return values.segment(layout.state_offset(t), layout.state_dim); }
  Vec action(int t) const { return values.segment(layout.action_offset(t), layout.action_dim); }
};

enum class NormMode { per_coordinate, per_step };

inline const char* to_string(NormMode m) {
  return m == NormMode::per_coordinate ? "per_coordinate" : "per_step";
}

/// Per-coordinate mean/std. In per_step mode the vectors have length
/// state_dim + action_dim and are broadcast over time steps.
struct NormStats {
  NormMode mode = NormMode::per_coordinate;
  Vec mean;
  Vec std;
  std::vector<int> flagged;  // coordinates whose std was widened to kMinStd

  bool empty() const noexcept { return mean.size() == 0; }

  Vec full_mean(const SegmentLayout& layout) const { return expand(mean, layout); }
  Vec full_std(const SegmentLayout& layout) const { return expand(std, layout); }

  Vec expand(const Vec& v, const SegmentLayout& layout) const {
    if (mode == NormMode::per_coordinate) {
      require(v.size() == layout.dim(), "normalization length does not match segment dimension");
      return v;
    }
    require(v.size() == layout.step_dim(), "per-step normalization length mismatch");
    Vec out(layout.dim());
    for (int t = 0; t < layout.horizon; ++t) out.segment(t * layout.step_dim(), layout.step_dim()) = v;
    return out;
  }

  /// Digest over mode and exact statistic bytes; ties a prior to its dataset.
  std::string digest() const {
    Vec both(mean.size() + std.size());
    both << mean, std;
    return sha256_hex(std::string(to_string(mode)) + ":" + params_digest(both));
  }
};

inline NormStats compute_stats(const Mat& raw, const SegmentLayout& layout,
                               NormMode mode = NormMode::per_coordinate) {
  require(raw.cols() > 0, "cannot compute statistics of an empty corpus");
  NormStats s;
  s.mode = mode;
  if (mode == NormMode::per_coordinate) {
    s.mean = raw.rowwise().mean();
    s.std = ((raw.colwise() - s.mean).array().square().rowwise().mean()).sqrt();
  } else {
    const int sd = layout.step_dim();
    s.mean = Vec::Zero(sd);
    Vec sq = Vec::Zero(sd);
    const double count = static_cast<double>(raw.cols()) * layout.horizon;
    for (int t = 0; t < layout.horizon; ++t) s.mean += raw.middleRows(t * sd, sd).rowwise().sum();
    s.mean /= count;
    for (int t = 0; t < layout.horizon; ++t)
      sq += (raw.middleRows(t * sd, sd).colwise() - s.mean).array().square().matrix().rowwise().sum();
    s.std = (sq / count).array().sqrt();
  }
  for (Index i = 0; i < s.std.size(); ++i) {
    if (!(s.std[i] > kMinStd)) {
      s.std[i] = kMinStd;
      s.flagged.push_back(static_cast<int>(i));
    }
  }
  return s;
}

inline Mat normalize(const Mat& raw, const NormStats& stats, const SegmentLayout& layout) {
  require(!stats.empty(), "normalize: statistics missing");
  const Vec m = stats.full_mean(layout);
  const Vec s = stats.full_std(layout);
  require(raw.rows() == m.size(), "normalize: dimension mismatch");
  return (raw.colwise() - m).array().colwise() / s.array();
}

inline Mat denormalize(const Mat& norm, const NormStats& stats, const SegmentLayout& layout) {
  require(!stats.empty(), "denormalize: statistics missing");
  const Vec m = stats.full_mean(layout);
  const Vec s = stats.full_std(layout);
  require(norm.rows() == m.size(), "denormalize: dimension mismatch");
  return (norm.array().colwise() * s.array()).matrix().colwise() + m;
}

inline TrajectorySegment normalize(const TrajectorySegment& seg, const NormStats& stats) {
  return {normalize(Mat(seg.values), stats, seg.layout).col(0), seg.layout, seg.start_time};
}

inline TrajectorySegment denormalize(const TrajectorySegment& seg, const NormStats& stats) {
  return {denormalize(Mat(seg.values), stats, seg.layout).col(0), seg.layout, seg.start_time};
}

/// Statistics of the first state (and first action) slots, used to move
/// between environment units and the normalized segment space.
struct SlotStats {
  Vec state_mean, state_std, action_mean, action_std;
};

inline SlotStats slot_stats(const NormStats& stats, const SegmentLayout& layout) {
  const Vec m = stats.full_mean(layout);
  const Vec s = stats.full_std(layout);
  return {m.head(layout.state_dim), s.head(layout.state_dim),
          m.segment(layout.state_dim, layout.action_dim), s.segment(layout.state_dim, layout.action_dim)};
}

/// Label-free segment corpus in environment units plus its normalization.
/// Script ids, when present, are evaluation-only provenance and are written
/// to a separate sidecar file, never into the training file.
struct OfflineDataset {
  SegmentLayout layout;
  Mat segments;  // dim x count, environment units
  std::vector<std::int64_t> start_times;
  NormStats stats;
  std::optional<std::vector<int>> provenance;
  int format_version = kDatasetFormatVersion;

  Index size() const noexcept { return segments.cols(); }
  bool empty() const noexcept { return segments.cols() == 0; }

  Mat normalized() const { return normalize(segments, stats, layout); }

  TrajectorySegment segment(Index i) const {
    return {segments.col(i), layout, start_times.at(static_cast<std::size_t>(i))};
  }

  /// Fraction of normalized coordinates outside [-5, 5].
  double soft_bound_violation() const {
    if (empty()) return 0.0;
    const Mat n = normalized();
    return static_cast<double>((n.array().abs() > 5.0).count()) / static_cast<double>(n.size());
  }
};

// ---------------------------------------------------------------------------
// Byte-level helpers

class ByteWriter {
 public:
  void put_u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) buf_.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  }
  void put_i64(std::int64_t v) { put_u64(static_cast<std::uint64_t>(v)); }
  void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
  void put_vec(const Vec& v) {
    for (Index i = 0; i < v.size(); ++i) put_f64(v[i]);
  }
  void put_raw(const std::string& s) { buf_ += s; }
  const std::string& bytes() const noexcept { return buf_; }

  void seal() {
    const std::uint32_t crc = crc32_of(buf_);
    buf_ += "DCRC";
    for (int b = 0; b < 4; ++b) buf_.push_back(static_cast<char>((crc >> (8 * b)) & 0xFF));
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t pos, std::size_t end, std::string path)
      : bytes_(bytes), pos_(pos), end_(end), path_(std::move(path)) {}

  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 8;
    return v;
  }
  std::int64_t get_i64() { return static_cast<std::int64_t>(get_u64()); }
  double get_f64() { return std::bit_cast<double>(get_u64()); }
  Vec get_vec(Index n) {
    Vec v(n);
    for (Index i = 0; i < n; ++i) v[i] = get_f64();
    return v;
  }
  std::size_t remaining() const noexcept { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw Error(ErrorKind::truncated_file, "'" + path_ + "' ends inside its payload");
  }
  const std::string& bytes_;
  std::size_t pos_;
  std::size_t end_;
  std::string path_;
};

using Header = std::map<std::string, std::string>;

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes bytes atomically: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "short write to '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw Error(ErrorKind::io, "rename to '" + path + "' failed: " + ec.message());
}

struct ParsedContainer {
  Header header;
  std::string bytes;
  std::size_t payload_begin = 0;
  std::size_t payload_end = 0;
};

/// Splits a container into header and payload and verifies magic, version and checksum.
inline ParsedContainer parse_container(const std::string& path, const std::string& magic, int version) {
  ParsedContainer pc;
  pc.bytes = read_file_bytes(path);
  const std::string& b = pc.bytes;
  const std::string first = magic + "\n";
  if (b.compare(0, first.size(), first) != 0) {
    throw Error(ErrorKind::io, "'" + path + "' is not a " + magic + " file");
  }
  std::size_t pos = first.size();
  bool ended = false;
  while (pos < b.size()) {
    const std::size_t nl = b.find('\n', pos);
    if (nl == std::string::npos) break;
    const std::string line = b.substr(pos, nl - pos);
    pos = nl + 1;
    if (line == "end") {
      ended = true;
      break;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::io, "malformed header line '" + line + "'");
    pc.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!ended) throw Error(ErrorKind::truncated_file, "'" + path + "' ends inside its header");
  const auto it = pc.header.find("version");
  if (it == pc.header.end() || it->second != std::to_string(version)) {
    throw Error(ErrorKind::version_mismatch, "'" + path + "' has version " +
                                                 (it == pc.header.end() ? "<none>" : it->second) +
                                                 ", expected " + std::to_string(version));
  }
  if (b.size() < pos + 8) throw Error(ErrorKind::truncated_file, "'" + path + "' has no trailer");
  pc.payload_begin = pos;
  pc.payload_end = b.size() - 8;
  return pc;
}

inline void verify_checksum(const ParsedContainer& pc, const std::string& path) {
  const std::size_t trailer = pc.bytes.size() - 8;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= std::uint32_t(static_cast<unsigned char>(pc.bytes[trailer + 4 + i])) << (8 * i);
  const bool magic_ok = pc.bytes.compare(trailer, 4, "DCRC") == 0;
  if (!magic_ok || crc32_of(std::string_view(pc.bytes).substr(0, trailer)) != stored) {
    throw Error(ErrorKind::checksum_failure, "'" + path + "' failed its CRC-32 check");
  }
}

inline long header_int(const Header& h, const std::string& key, const std::string& path) {
  const auto it = h.find(key);
  if (it == h.end()) throw Error(ErrorKind::io, "'" + path + "' header lacks '" + key + "'");
  try {
    return std::stol(it->second);
  } catch (const std::exception&) {
    throw Error(ErrorKind::io, "'" + path + "' header field '" + key + "' is not an integer");
  }
}

inline std::string header_str(const Header& h, const std::string& key, const std::string& path) {
  const auto it = h.find(key);
  if (it == h.end()) throw Error(ErrorKind::io, "'" + path + "' header lacks '" + key + "'");
  return it->second;
}

inline std::string join_ints(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  if (s == "none" || s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline std::string provenance_path(const std::string& dataset_path) { return dataset_path + ".provenance.csv"; }

inline void save_dataset(const OfflineDataset& ds, const std::string& path) {
  require(static_cast<Index>(ds.start_times.size()) == ds.size(), "start_times length mismatch");
  const Index norm_len = ds.stats.mean.size();
  std::ostringstream h;
  h << "DIDI-DATASET\n"
    << "version=" << kDatasetFormatVersion << "\n"
    << "horizon=" << ds.layout.horizon << "\n"
    << "state_dim=" << ds.layout.state_dim << "\n"
    << "action_dim=" << ds.layout.action_dim << "\n"
    << "count=" << ds.size() << "\n"
    << "norm_mode=" << to_string(ds.stats.mode) << "\n"
    << "norm_length=" << norm_len << "\n"
    << "flagged=" << join_ints(ds.stats.flagged) << "\n"
    << "stats_digest=" << ds.stats.digest() << "\n"
    << "end\n";
  ByteWriter w;
  w.put_raw(h.str());
  for (Index j = 0; j < ds.size(); ++j) w.put_vec(ds.segments.col(j));
  for (auto t : ds.start_times) w.put_i64(t);
  w.put_vec(ds.stats.mean);
  w.put_vec(ds.stats.std);
  w.seal();
  write_file_atomic(path, w.bytes());

  if (ds.provenance) {
    std::ostringstream csv;
    csv << "segment,script_id\n";
    for (std::size_t i = 0; i < ds.provenance->size(); ++i) csv << i << "," << (*ds.provenance)[i] << "\n";
    write_file_atomic(provenance_path(path), csv.str());
  }
}

inline OfflineDataset load_dataset(const std::string& path) {
  const ParsedContainer pc = parse_container(path, "DIDI-DATASET", kDatasetFormatVersion);
  const Header& h = pc.header;
  OfflineDataset ds;
  ds.layout.horizon = static_cast<int>(header_int(h, "horizon", path));
  ds.layout.state_dim = static_cast<int>(header_int(h, "state_dim", path));
  ds.layout.action_dim = static_cast<int>(header_int(h, "action_dim", path));
  const long count = header_int(h, "count", path);
  const long norm_len = header_int(h, "norm_length", path);
  const std::string mode = header_str(h, "norm_mode", path);
  if (ds.layout.horizon <= 0 || ds.layout.state_dim <= 0 || ds.layout.action_dim <= 0 || count < 0 ||
      norm_len < 0) {
    throw Error(ErrorKind::io, "'" + path + "' header has invalid dimensions");
  }
  const std::size_t expected =
      static_cast<std::size_t>(count) * (ds.layout.dim() + 1) * 8 + static_cast<std::size_t>(norm_len) * 16;
  const std::size_t have = pc.payload_end - pc.payload_begin;
  if (have < expected) throw Error(ErrorKind::truncated_file, "'" + path + "' payload is shorter than its header declares");
  verify_checksum(pc, path);
  if (have != expected) throw Error(ErrorKind::io, "'" + path + "' payload is longer than its header declares");

  ByteReader r(pc.bytes, pc.payload_begin, pc.payload_end, path);
  ds.segments.resize(ds.layout.dim(), count);
  for (long j = 0; j < count; ++j) ds.segments.col(j) = r.get_vec(ds.layout.dim());
  ds.start_times.resize(static_cast<std::size_t>(count));
  for (auto& t : ds.start_times) t = r.get_i64();
  ds.stats.mode = mode == "per_step" ? NormMode::per_step : NormMode::per_coordinate;
  ds.stats.mean = r.get_vec(norm_len);
  ds.stats.std = r.get_vec(norm_len);
  ds.stats.flagged = split_ints(header_str(h, "flagged", path));
  const Index want = ds.stats.mode == NormMode::per_step ? ds.layout.step_dim() : ds.layout.dim();
  if (norm_len != want) throw Error(ErrorKind::io, "'" + path + "' normalization length is inconsistent");
  return ds;
}

/// Reads the evaluation-only script ids written next to a dataset.
inline std::vector<int> load_provenance(const std::string& dataset_path) {
  std::ifstream in(provenance_path(dataset_path));
  if (!in) throw Error(ErrorKind::missing_artifact, "no provenance sidecar for '" + dataset_path + "'");
  std::string line;
  std::getline(in, line);
  std::vector<int> ids;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    ids.push_back(std::stoi(line.substr(comma + 1)));
  }
  return ids;
}

/// Segment CSV for plotting: one row per (segment, step).
inline void export_segments_csv(const OfflineDataset& ds, const std::string& path) {
  std::ostringstream out;
  out << "segment,start,step";
  for (int i = 0; i < ds.layout.state_dim; ++i) out << ",s" << i;
  for (int i = 0; i < ds.layout.action_dim; ++i) out << ",a" << i;
  out << "\n" << std::setprecision(17);
  for (Index j = 0; j < ds.size(); ++j) {
    for (int t = 0; t < ds.layout.horizon; ++t) {
      out << j << "," << ds.start_times[static_cast<std::size_t>(j)] << "," << t;
      for (int i = 0; i < ds.layout.step_dim(); ++i) out << "," << ds.segments(t * ds.layout.step_dim() + i, j);
      out << "\n";
    }
  }
  write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// Checkpoints

struct NetworkSpec {
  std::string name;
  std::vector<int> widths;
  Activation activation = Activation::tanh;

  bool operator==(const NetworkSpec&) const = default;
};

struct ScheduleParams {
  std::string kind = "linear";
  int steps = 64;
  double beta_min = 1e-4;
  double beta_max = 0.1;

  bool operator==(const ScheduleParams&) const = default;
};

struct Checkpoint {
  std::string kind;
  std::vector<NetworkSpec> networks;
  std::vector<ParamBlock> layout;
  Vec params;
  Vec adam_m;
  Vec adam_v;
  long adam_step = 0;
  std::optional<ScheduleParams> schedule;
  long train_step = 0;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::uint64_t rng_position = 0;
  std::map<std::string, std::string> meta;

  const std::string& meta_at(const std::string& key) const {
    const auto it = meta.find(key);
    if (it == meta.end()) throw Error(ErrorKind::io, "checkpoint lacks metadata '" + key + "'");
    return it->second;
  }
};

inline std::string shape_string(const std::vector<Index>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s;
}

inline Checkpoint make_checkpoint(std::string kind, std::vector<NetworkSpec> nets, const ParamStore& store) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.networks = std::move(nets);
  c.layout = store.layout();
  c.params = store.values();
  c.adam_m = store.first_moment();
  c.adam_v = store.second_moment();
  c.adam_step = store.step();
  return c;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::ostringstream h;
  h << "DIDI-CHECKPOINT\n"
    << "version=" << kCheckpointFormatVersion << "\n"
    << "kind=" << c.kind << "\n"
    << "train_step=" << c.train_step << "\n"
    << "seed=" << c.seed << "\n"
    << "rng_position=" << c.rng_position << "\n"
    << "config_digest=" << c.config_digest << "\n"
    << "networks=" << c.networks.size() << "\n";
  for (std::size_t i = 0; i < c.networks.size(); ++i) {
    const auto& n = c.networks[i];
    h << "net" << i << ".name=" << n.name << "\n"
      << "net" << i << ".widths=" << join_ints(n.widths) << "\n"
      << "net" << i << ".activation=" << to_string(n.activation) << "\n";
  }
  h << "blocks=" << c.layout.size() << "\n";
  for (std::size_t i = 0; i < c.layout.size(); ++i) {
    h << "block" << i << "=" << c.layout[i].name << ":" << shape_string(c.layout[i].shape) << "\n";
  }
  h << "param_count=" << c.params.size() << "\n"
    << "adam_step=" << c.adam_step << "\n";
  if (c.schedule) {
    h << "schedule=" << c.schedule->kind << "," << c.schedule->steps << "," << format_double(c.schedule->beta_min)
      << "," << format_double(c.schedule->beta_max) << "\n";
  } else {
    h << "schedule=none\n";
  }
  for (const auto& [k, v] : c.meta) h << "meta." << k << "=" << v << "\n";
  h << "end\n";
  ByteWriter w;
  w.put_raw(h.str());
  w.put_vec(c.params);
  w.put_vec(c.adam_m);
  w.put_vec(c.adam_v);
  w.seal();
  return w.bytes();
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  require(c.adam_m.size() == c.params.size() && c.adam_v.size() == c.params.size(),
          "checkpoint optimizer state length mismatch");
  write_file_atomic(path, serialize_checkpoint(c));
}

inline std::vector<Index> parse_shape(const std::string& s) {
  std::vector<Index> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, 'x')) out.push_back(std::stol(tok));
  return out;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const ParsedContainer pc = parse_container(path, "DIDI-CHECKPOINT", kCheckpointFormatVersion);
  const Header& h = pc.header;
  Checkpoint c;
  c.kind = header_str(h, "kind", path);
  c.train_step = header_int(h, "train_step", path);
  c.seed = std::stoull(header_str(h, "seed", path));
  c.rng_position = std::stoull(header_str(h, "rng_position", path));
  c.config_digest = header_str(h, "config_digest", path);
  const long nets = header_int(h, "networks", path);
  for (long i = 0; i < nets; ++i) {
    const std::string p = "net" + std::to_string(i) + ".";
    c.networks.push_back({header_str(h, p + "name", path), split_ints(header_str(h, p + "widths", path)),
                          activation_from_string(header_str(h, p + "activation", path))});
  }
  const long blocks = header_int(h, "blocks", path);
  Index offset = 0;
  for (long i = 0; i < blocks; ++i) {
    const std::string spec = header_str(h, "block" + std::to_string(i), path);
    const auto colon = spec.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorKind::io, "malformed block descriptor '" + spec + "'");
    ParamBlock b{spec.substr(0, colon), parse_shape(spec.substr(colon + 1)), offset, 1};
    for (Index s : b.shape) b.size *= s;
    offset += b.size;
    c.layout.push_back(std::move(b));
  }
  const long count = header_int(h, "param_count", path);
  if (count != offset) throw Error(ErrorKind::io, "'" + path + "' layout does not sum to param_count");
  c.adam_step = header_int(h, "adam_step", path);
  const std::string sched = header_str(h, "schedule", path);
  if (sched != "none") {
    std::stringstream ss(sched);
    std::string kind, steps, bmin, bmax;
    std::getline(ss, kind, ',');
    std::getline(ss, steps, ',');
    std::getline(ss, bmin, ',');
    std::getline(ss, bmax, ',');
    c.schedule = ScheduleParams{kind, std::stoi(steps), std::stod(bmin), std::stod(bmax)};
  }
  for (const auto& [k, v] : h) {
    if (k.rfind("meta.", 0) == 0) c.meta[k.substr(5)] = v;
  }
  const std::size_t expected = static_cast<std::size_t>(count) * 3 * 8;
  const std::size_t have = pc.payload_end - pc.payload_begin;
  if (have < expected) throw Error(ErrorKind::truncated_file, "'" + path + "' payload is shorter than its header declares");
  verify_checksum(pc, path);
  if (have != expected) throw Error(ErrorKind::io, "'" + path + "' payload is longer than its header declares");
  ByteReader r(pc.bytes, pc.payload_begin, pc.payload_end, path);
  c.params = r.get_vec(count);
  c.adam_m = r.get_vec(count);
  c.adam_v = r.get_vec(count);
  return c;
}

/// Copies checkpoint parameters and optimizer state into a store built for
/// the same architecture; any layout difference is rejected.
inline void restore_into(const Checkpoint& c, ParamStore& store) {
  if (c.layout.size() != store.layout().size()) {
    throw Error(ErrorKind::architecture_mismatch, "checkpoint has " + std::to_string(c.layout.size()) +
                                                      " parameter blocks, model has " +
                                                      std::to_string(store.layout().size()));
  }
  for (std::size_t i = 0; i < c.layout.size(); ++i) {
    const auto& a = c.layout[i];
    const auto& b = store.layout()[i];
    if (a.name != b.name || a.shape != b.shape) {
      throw Error(ErrorKind::architecture_mismatch, "block " + std::to_string(i) + " is " + a.name + ":" +
                                                        shape_string(a.shape) + " in the checkpoint but " +
                                                        b.name + ":" + shape_string(b.shape) + " in the model");
    }
  }
  store.values() = c.params;
  store.set_optimizer_state(c.adam_m, c.adam_v, c.adam_step);
}

/// A differing config digest is reported but does not prevent loading.
inline bool check_config_digest(const Checkpoint& c, const std::string& expected, std::ostream& log) {
  if (c.config_digest == expected) return true;
  log << "warning: checkpoint config digest " << c.config_digest.substr(0, 12) << " differs from "
      << expected.substr(0, 12) << "\n";
  return false;
}

}  // namespace didi
