#ifndef FLOWALIGN_CONFIG_HPP
#define FLOWALIGN_CONFIG_HPP

#include "flowalign/align.hpp"
#include "flowalign/distributions.hpp"
#include "flowalign/flownet.hpp"
#include "flowalign/ode.hpp"
#include "flowalign/project.hpp"
#include "flowalign/training.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace flowalign {

/// Invalid, missing or unknown configuration. `key()` is "section.key" when one key is to blame.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::string key = {})
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Raw `key = value` entries grouped under `[section]` headers. Blank lines and lines starting
/// with '#' are ignored; keys outside a section and repeated keys are errors.
class ConfigFile {
 public:
  struct Entry {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;
  };

  static ConfigFile parse(std::string_view text, const std::string& source = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  bool has_section(std::string_view section) const;
  const std::string* find(std::string_view section, std::string_view key) const;

  /// Value of a mandatory key; throws ConfigError naming it when absent.
  const std::string& require(std::string_view section, std::string_view key) const;

  /// Sorted "section.key = value" lines; the basis of the config hash.
  std::string canonical() const;
  std::string hash() const;

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::string source_;
  std::vector<Entry> entries_;
};

/// Evaluation grid over [lo, hi]^2.
struct LandscapeConfig {
  double lo = -3.0;
  double hi = 3.0;
  Index resolution = 50;
  Index mc = 1024;
  Index knn_k = 10;
  Index knn_dataset = 10000;
  bool exact = false;
  Index exact_steps = 100;
  Index c_mc = 256;
  Index kde_samples = kKdeDefaultSamples;
  double kde_bandwidth = kKdeDefaultBandwidth;

  void validate() const;
  DenseMatrix nodes() const;  // resolution^2 x 2, y0 fastest
};

/// Test points and budgets for ELBO reports.
struct EvalConfig {
  Index n_data = 100;
  Index n_uniform = 100;
  double lo = -3.0;
  double hi = 3.0;
  Index mc = 100000;
  OdeSolveConfig ode{200, OdeMethod::rk4, OdeDirection::backward};

  void validate() const;
};

struct AlignRunConfig {
  AlignConfig optimizer;
  Index knn_k = 10;
  Index knn_dataset = 10000;
};

struct ProjectRunConfig {
  ProjectionKind kind = ProjectionKind::random;
  Index target_dim = 2;
  bool jl_rescale = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  ToyDistributionSpec data;
  Index n_samples = 10000;
  FlowNetConfig flownet;
  TrainConfig train;
  bool use_ema = true;
  std::filesystem::path train_data_csv;
  AlignRunConfig align;
  LandscapeConfig landscape;
  EvalConfig eval;
  ProjectRunConfig project;

  std::string config_hash;
  /// Canonical text of the parsed file, recorded in sidecars so any output can be re-run.
  std::string config_text;
  std::set<std::string> sections;

  /// Parses every section present. Mandatory keys: run.seed, run.output_dir, data.kind,
  /// data.n_samples, flownet.preset, train.preset, align.preset, landscape.resolution, eval.n_data,
  /// project.kind, project.target_dim (each only when its section is present). Every other key
  /// falls back to the documented default of its preset.
  static ExperimentConfig from(const ConfigFile& file);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Throws ConfigError naming the first mandatory key of a missing section.
  void require_section(std::string_view section) const;
};

}  // namespace flowalign

#endif  // FLOWALIGN_CONFIG_HPP
