#ifndef FLOWALIGN_HARNESS_HPP
#define FLOWALIGN_HARNESS_HPP

#include "flowalign/align.hpp"
#include "flowalign/config.hpp"
#include "flowalign/distributions.hpp"
#include "flowalign/flownet.hpp"
#include "flowalign/io.hpp"
#include "flowalign/likelihood.hpp"
#include "flowalign/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace flowalign {

namespace exit_code {
constexpr int kOk = 0;
constexpr int kConfig = 1;
constexpr int kNumeric = 2;
}  // namespace exit_code

/// File names inside the run's output directory.
namespace outputs {
inline constexpr const char* kSamples = "samples.csv";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kTrainLoss = "train_loss.csv";
inline constexpr const char* kAlignDir = "align";
inline constexpr const char* kAlignMetrics = "align_metrics.csv";
inline constexpr const char* kLandscape = "landscape.csv";
inline constexpr const char* kElbo = "elbo.csv";
inline constexpr const char* kCorrelationText = "correlation.txt";
inline constexpr const char* kCorrelationCsv = "correlation.csv";
}  // namespace outputs

/// Keeps large freed blocks inside the heap instead of returning them to the kernel. Batched
/// network passes allocate tens of megabytes per call, and without this every call pays for
/// fresh zeroed pages. No-op outside glibc.
void tune_allocator();

/// Column names x0..x{d-1} (or another prefix).
std::vector<std::string> numbered_columns(const std::string& prefix, Index d);

/// Sidecar for an output written by `command` under `config`.
Sidecar make_sidecar(const ExperimentConfig& config, const std::string& command,
                     std::vector<std::pair<std::string, std::string>> extra = {});

/// Frozen network from a training checkpoint, using the EMA weights when asked.
FlowNet load_field(const std::filesystem::path& checkpoint, bool use_ema);

/// Ground truth shared by the landscape and alignment metrics: a k-NN dataset and the
/// reference density, both drawn from the reference stream.
struct ReferenceSet {
  DenseMatrix knn_dataset;
  ReferenceDensity density;
};

ReferenceSet make_reference(const ToyDistributionSpec& spec, Index knn_dataset, Index kde_samples,
                            double kde_bandwidth, std::uint64_t seed);

struct Landscape {
  Index resolution = 0;
  DenseMatrix nodes;  // resolution^2 x 2, y0 fastest
  DenseVector align_loss;
  DenseVector nll;
  DenseVector knn_logr;
  std::optional<DenseVector> exact_loglik;
  std::optional<DenseVector> c_y;

  std::vector<std::string> header() const;
  DenseMatrix table() const;
  /// One metric column as a resolution x resolution image; row r holds y1 node r.
  DenseMatrix image(const DenseVector& column) const;
};

/// Evaluates every landscape column on the grid. The alignment loss uses one set of (t, x0)
/// draws for every node.
Landscape compute_landscape(const VelocityField& field, const ReferenceSet& reference,
                            const LandscapeConfig& config, std::uint64_t seed);

/// Per-column correlation against a reference column; nullopt marks an undefined value.
struct CorrelationRow {
  std::string column;
  Index n = 0;
  std::optional<double> pearson;
  std::optional<double> spearman;
};

/// Correlates `against` with every other column except `step`, over rows where both are finite.
/// Throws ConfigError with fewer than 10 rows.
std::vector<CorrelationRow> correlate_table(const CsvTable& table, const std::string& against = "align_loss");

// ---------------------------------------------------------------------------
// Commands. Each writes into config.output_dir and leaves a sidecar next to every file.

std::filesystem::path cmd_gen_data(const ExperimentConfig& config);

/// Trains from scratch, or from output_dir/checkpoint.bin when `resume` is set and it exists.
/// On divergence the last finite state is checkpointed and TrainingDiverged propagates.
TrainingState cmd_train_flow(const ExperimentConfig& config, bool resume = false);

AlignTrajectory cmd_align(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

Landscape cmd_landscape(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

std::vector<ElboReport> cmd_eval_likelihood(const ExperimentConfig& config,
                                            const std::filesystem::path& checkpoint);

std::vector<CorrelationRow> cmd_correlate(const std::filesystem::path& metrics_csv,
                                          const std::filesystem::path& output_dir);

/// Projects the rows of a feature CSV; the operator is saved next to the output as
/// <output>.projection.bin.
ProjectionSpec cmd_project(const ExperimentConfig& config, const std::filesystem::path& input_csv,
                           const std::filesystem::path& output_csv);

}  // namespace flowalign

#endif  // FLOWALIGN_HARNESS_HPP
