#include "flowalign/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>

#ifndef FLOWALIGN_VERSION
#define FLOWALIGN_VERSION "unknown"
#endif

namespace flowalign {

namespace fs = std::filesystem;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw FormatError("not a number: '" + std::string(text) + "'");
  }
  return v;
}

namespace {

std::ofstream open_for_write(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  return out;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

void write_row(std::ostream& out, std::span<const double> row) {
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j > 0) out << ',';
    out << format_double(row[j]);
  }
  out << '\n';
}

}  // namespace

Index CsvTable::column(std::string_view name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw FormatError("csv: no column named '" + std::string(name) + "'");
  return static_cast<Index>(it - header.begin());
}

void write_csv(const fs::path& path, std::span<const std::string> header, const DenseMatrix& rows) {
  if (static_cast<Index>(header.size()) != rows.cols() && rows.rows() > 0) {
    throw std::invalid_argument("write_csv: " + std::to_string(header.size()) + " header names for " +
                                std::to_string(rows.cols()) + " columns");
  }
  std::ofstream out = open_for_write(path);
  for (std::size_t j = 0; j < header.size(); ++j) out << (j > 0 ? "," : "") << header[j];
  out << '\n';
  std::vector<double> row(header.size());
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index j = 0; j < rows.cols(); ++j) row[static_cast<std::size_t>(j)] = rows(i, j);
    write_row(out, row);
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (std::string_view name : split_commas(line)) t.header.emplace_back(name);
  std::vector<double> values;
  Index n = 0;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != t.header.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    for (std::string_view c : cells) {
      try {
        values.push_back(parse_double(c));
      } catch (const FormatError& e) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    ++n;
  }
  t.rows = n == 0 ? DenseMatrix(0, static_cast<Index>(t.header.size()))
                  : DenseMatrix(Eigen::Map<DenseMatrix>(values.data(), n, static_cast<Index>(t.header.size())));
  return t;
}

CsvWriter::CsvWriter(const fs::path& path, std::vector<std::string> header)
    : out_(open_for_write(path)), columns_(header.size()) {
  for (std::size_t j = 0; j < header.size(); ++j) out_ << (j > 0 ? "," : "") << header[j];
  out_ << '\n';
}

void CsvWriter::append(std::span<const double> row) {
  if (row.size() != columns_) {
    throw std::invalid_argument("CsvWriter: row of " + std::to_string(row.size()) + " values for " +
                                std::to_string(columns_) + " columns");
  }
  write_row(out_, row);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'A', 'L', 'G', 'N'};

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void scalar(T v) {
    v = to_little_endian(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void string(std::string_view s) {
    scalar<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix(const DenseMatrix& m) {
    scalar<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    scalar<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    } else {
      for (Index i = 0; i < m.size(); ++i) scalar(m.data()[i]);
    }
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  template <typename T>
  T scalar() {
    T v;
    read(&v, sizeof(T));
    return to_little_endian(v);
  }
  std::string string() {
    const auto n = scalar<std::uint64_t>();
    if (n > (std::uint64_t{1} << 30)) fail("implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  DenseMatrix matrix() {
    const auto rows = scalar<std::uint64_t>();
    const auto cols = scalar<std::uint64_t>();
    if (rows > (std::uint64_t{1} << 32) || cols > (std::uint64_t{1} << 32) || rows * cols > (std::uint64_t{1} << 34)) {
      fail("implausible tensor shape");
    }
    DenseMatrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    read(m.data(), sizeof(double) * m.size());
    if constexpr (std::endian::native == std::endian::big) {
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = to_little_endian(m.data()[i]);
    }
    return m;
  }
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
  }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(source_ + ": " + what); }

 private:
  std::istream& in_;
  std::string source_;
};

}  // namespace

const std::string& Checkpoint::get(std::string_view key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  throw FormatError("checkpoint '" + kind + "': missing header key '" + std::string(key) + "'");
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ofstream out = open_for_write(path, std::ios::out | std::ios::binary);
  Writer w(out);
  out.write(kMagic, sizeof(kMagic));
  w.scalar<std::uint32_t>(kCheckpointVersion);
  w.string(ckpt.kind);
  w.scalar<std::uint64_t>(ckpt.header.size());
  for (const auto& [k, v] : ckpt.header) {
    w.string(k);
    w.string(v);
  }
  w.scalar<std::uint64_t>(ckpt.tensors.size());
  for (const DenseMatrix& m : ckpt.tensors) w.matrix(m);
  if (!out) throw FormatError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Reader r(in, path.string());
  char magic[sizeof(kMagic)];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a flowalign checkpoint (bad magic)");
  const auto version = r.scalar<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
  Checkpoint c;
  c.kind = r.string();
  const auto entries = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < entries; ++i) {
    std::string k = r.string();
    std::string v = r.string();
    c.header.emplace_back(std::move(k), std::move(v));
  }
  const auto tensors = r.scalar<std::uint64_t>();
  if (tensors > (std::uint64_t{1} << 20)) r.fail("implausible tensor count");
  for (std::uint64_t i = 0; i < tensors; ++i) c.tensors.push_back(r.matrix());
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return c;
}

namespace {

Index header_index(const Checkpoint& c, std::string_view key) {
  const std::string& v = c.get(key);
  Index out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw FormatError("checkpoint: header '" + std::string(key) + "' is not an integer: '" + v + "'");
  }
  return out;
}

void take_tensors(std::vector<DenseMatrix*> dst, const Checkpoint& c, std::size_t& cursor) {
  for (DenseMatrix* m : dst) {
    if (cursor >= c.tensors.size()) throw FormatError("checkpoint: too few tensors");
    const DenseMatrix& src = c.tensors[cursor++];
    if (src.rows() != m->rows() || src.cols() != m->cols()) {
      throw FormatError("checkpoint: tensor " + std::to_string(cursor - 1) + " has shape " + shape_string(src) +
                        ", expected " + shape_string(*m));
    }
    *m = src;
  }
}

}  // namespace

void save_training_state(const fs::path& path, const TrainingState& state) {
  const FlowNetConfig& fc = state.params.config;
  Checkpoint c;
  c.kind = "training_state";
  c.header = {{"in_dim", std::to_string(fc.in_dim)},
              {"hidden", std::to_string(fc.hidden)},
              {"blocks", std::to_string(fc.blocks)},
              {"time_embed_dim", std::to_string(fc.time_embed_dim)},
              {"time_scale", format_double(fc.time_scale)},
              {"variant", std::string(to_string(fc.variant))},
              {"step", std::to_string(state.step)},
              {"optimizer_step", std::to_string(state.optimizer.step)}};
  for (const DenseMatrix* m : state.params.tensors()) c.tensors.push_back(*m);
  for (const DenseMatrix* m : state.ema.tensors()) c.tensors.push_back(*m);
  for (const DenseMatrix& m : state.optimizer.first_moment) c.tensors.push_back(m);
  for (const DenseMatrix& m : state.optimizer.second_moment) c.tensors.push_back(m);
  write_checkpoint(path, c);
}

TrainingState load_training_state(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  if (c.kind != "training_state") {
    throw FormatError(path.string() + ": expected a training_state checkpoint, found '" + c.kind + "'");
  }
  FlowNetConfig fc;
  fc.in_dim = header_index(c, "in_dim");
  fc.hidden = header_index(c, "hidden");
  fc.blocks = header_index(c, "blocks");
  fc.time_embed_dim = header_index(c, "time_embed_dim");
  fc.time_scale = parse_double(c.get("time_scale"));
  fc.variant = parse_flownet_variant(c.get("variant"));
  fc.validate();

  TrainingState s;
  s.params = VelocityFieldParams::zeros(fc);
  s.ema = VelocityFieldParams::zeros(fc);
  s.optimizer = OptimizerState::zeros_like(std::as_const(s.params).tensors());
  s.step = header_index(c, "step");
  s.optimizer.step = header_index(c, "optimizer_step");
  std::size_t cursor = 0;
  take_tensors(s.params.tensors(), c, cursor);
  take_tensors(s.ema.tensors(), c, cursor);
  std::vector<DenseMatrix*> moments;
  for (DenseMatrix& m : s.optimizer.first_moment) moments.push_back(&m);
  for (DenseMatrix& m : s.optimizer.second_moment) moments.push_back(&m);
  take_tensors(moments, c, cursor);
  if (cursor != c.tensors.size()) throw FormatError(path.string() + ": unexpected extra tensors");
  return s;
}

void save_projection(const fs::path& path, const ProjectionSpec& spec) {
  spec.validate();
  Checkpoint c;
  c.kind = "projection";
  c.header = {{"kind", std::string(to_string(spec.kind))},
              {"source_dim", std::to_string(spec.source_dim)},
              {"target_dim", std::to_string(spec.target_dim)},
              {"seed", std::to_string(spec.seed)},
              {"jl_rescale", spec.jl_rescale ? "1" : "0"}};
  c.tensors = {spec.weight, DenseMatrix(spec.explained_variance)};
  write_checkpoint(path, c);
}

ProjectionSpec load_projection(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  if (c.kind != "projection") {
    throw FormatError(path.string() + ": expected a projection checkpoint, found '" + c.kind + "'");
  }
  if (c.tensors.size() != 2) throw FormatError(path.string() + ": projection needs 2 tensors");
  ProjectionSpec s;
  s.kind = parse_projection_kind(c.get("kind"));
  s.source_dim = header_index(c, "source_dim");
  s.target_dim = header_index(c, "target_dim");
  const std::string& seed = c.get("seed");
  std::from_chars(seed.data(), seed.data() + seed.size(), s.seed);
  s.jl_rescale = c.get("jl_rescale") == "1";
  s.weight = c.tensors[0];
  s.explained_variance = c.tensors[1].reshaped<Eigen::RowMajor>();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

PgmBounds write_pgm(const fs::path& path, const DenseMatrix& values) {
  if (values.size() == 0) throw std::invalid_argument("write_pgm: empty image");
  ensure_finite(values, "write_pgm");
  PgmBounds b{values.minCoeff(), values.maxCoeff()};
  const double span = b.max - b.min;
  std::ofstream out = open_for_write(path, std::ios::out | std::ios::binary);
  out << "P5\n" << values.cols() << ' ' << values.rows() << "\n255\n";
  std::vector<unsigned char> pixels(static_cast<std::size_t>(values.size()));
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j) {
      const double u = span > 0.0 ? (values(i, j) - b.min) / span : 0.0;
      pixels[static_cast<std::size_t>(i * values.cols() + j)] =
          static_cast<unsigned char>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw FormatError("write failed for " + path.string());
  return b;
}

PgmImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  PgmImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || img.width <= 0 || img.height <= 0) {
    throw FormatError(path.string() + ": not an 8-bit P5 image");
  }
  in.get();  // single whitespace after maxval
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw FormatError(path.string() + ": truncated");
  return img;
}

// ---------------------------------------------------------------------------

fs::path sidecar_path(const fs::path& output) {
  fs::path p = output;
  p += ".meta.json";
  return p;
}

std::string version_string() {
  std::ostringstream os;
  os << "flowalign " << FLOWALIGN_VERSION << "; eigen " << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION
     << '.' << EIGEN_MINOR_VERSION << "; compiler " << __VERSION__;
  return os.str();
}

void write_sidecar(const fs::path& output, const Sidecar& meta) {
  nlohmann::ordered_json j;
  j["output"] = output.filename().string();
  j["command"] = meta.command;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["versions"] = version_string();
  for (const auto& [k, v] : meta.extra) j[k] = v;
  std::ofstream out = open_for_write(sidecar_path(output));
  out << j.dump(2) << '\n';
  if (!out) throw FormatError("write failed for " + sidecar_path(output).string());
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace flowalign
