#ifndef FLOWALIGN_IO_HPP
#define FLOWALIGN_IO_HPP

#include "flowalign/numerics.hpp"
#include "flowalign/project.hpp"
#include "flowalign/training.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace flowalign {

/// Malformed or unreadable input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

// ---------------------------------------------------------------------------
// CSV: UTF-8, comma separated, header row mandatory.

struct CsvTable {
  std::vector<std::string> header;
  DenseMatrix rows;

  /// Index of a named column; throws FormatError when absent.
  Index column(std::string_view name) const;
};

void write_csv(const std::filesystem::path& path, std::span<const std::string> header, const DenseMatrix& rows);
CsvTable read_csv(const std::filesystem::path& path);

/// Streams rows to disk as they arrive, so partial runs leave a valid file behind.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  void append(std::span<const double> row);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  std::size_t columns_;
};

// ---------------------------------------------------------------------------
// Binary checkpoints, little-endian:
//
//   "FLOWALGN" | u32 format version | string kind | u64 header entries, each string key, string value
//   | u64 tensor count, each u64 rows, u64 cols, rows*cols float64 row-major
//
// Strings are a u64 byte length followed by the bytes.

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<DenseMatrix> tensors;

  const std::string& get(std::string_view key) const;
  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_training_state(const std::filesystem::path& path, const TrainingState& state);
TrainingState load_training_state(const std::filesystem::path& path);

void save_projection(const std::filesystem::path& path, const ProjectionSpec& spec);
ProjectionSpec load_projection(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Heatmaps

struct PgmBounds {
  double min = 0.0;
  double max = 0.0;
};

/// 8-bit binary portable graymap (P5). Row r of `values` becomes image row r; values are
/// min-max normalized to 0..255 and the bounds used are returned.
PgmBounds write_pgm(const std::filesystem::path& path, const DenseMatrix& values);

struct PgmImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;
};

PgmImage read_pgm(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metadata sidecars: <output>.meta.json next to every output file.

struct Sidecar {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  /// Extra key/value facts, e.g. heatmap bounds or the source checkpoint.
  std::vector<std::pair<std::string, std::string>> extra;
};

std::filesystem::path sidecar_path(const std::filesystem::path& output);
void write_sidecar(const std::filesystem::path& output, const Sidecar& meta);

/// Library, Eigen and compiler versions recorded in every sidecar.
std::string version_string();

/// 64-bit FNV-1a digest as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace flowalign

#endif  // FLOWALIGN_IO_HPP
