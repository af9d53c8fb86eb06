#include "flowalign/harness.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flowalign {

namespace fs = std::filesystem;

namespace {

std::string describe(const ToyDistributionSpec& s) {
  std::ostringstream os;
  os << to_string(s.kind) << " components=" << s.components << " radius=" << format_double(s.radius)
     << " std=" << format_double(s.std) << " extent=" << format_double(s.extent)
     << " noise=" << format_double(s.noise) << " turns=" << format_double(s.turns)
     << " normalization=" << (s.normalization ? format_double(*s.normalization) : "none");
  return os.str();
}

void write_csv_with_sidecar(const fs::path& path, const std::vector<std::string>& header, const DenseMatrix& rows,
                            const Sidecar& meta) {
  write_csv(path, header, rows);
  write_sidecar(path, meta);
}

// Checkpoints are replaced atomically so an interrupted save never leaves a torn file.
void save_state_atomically(const fs::path& path, const TrainingState& state) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_training_state(tmp, state);
  fs::rename(tmp, path);
}

DenseMatrix row_major_values(std::span<const double> v) {
  DenseMatrix m(1, static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Index>(i)) = v[i];
  return m;
}

const ToyDistributionSpec& require_data(const ExperimentConfig& config) {
  config.require_section("data");
  return config.data;
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

std::vector<std::string> numbered_columns(const std::string& prefix, Index d) {
  std::vector<std::string> out;
  for (Index j = 0; j < d; ++j) out.push_back(prefix + std::to_string(j));
  return out;
}

Sidecar make_sidecar(const ExperimentConfig& config, const std::string& command,
                     std::vector<std::pair<std::string, std::string>> extra) {
  Sidecar s{command, config.config_hash, config.seed, std::move(extra)};
  s.extra.emplace_back("config", config.config_text);
  return s;
}

FlowNet load_field(const fs::path& checkpoint, bool use_ema) {
  TrainingState state = load_training_state(checkpoint);
  return FlowNet(use_ema ? std::move(state.ema) : std::move(state.params));
}

ReferenceSet make_reference(const ToyDistributionSpec& spec, Index knn_dataset, Index kde_samples,
                            double kde_bandwidth, std::uint64_t seed) {
  Rng rng = Rng(seed).split(streams::kReference);
  DenseMatrix dataset = sample(spec, knn_dataset, rng);
  ReferenceDensity density(spec, rng, kde_samples, kde_bandwidth);
  return {std::move(dataset), std::move(density)};
}

// ---------------------------------------------------------------------------

std::vector<std::string> Landscape::header() const {
  std::vector<std::string> h{"y0", "y1", "align_loss", "nll_analytic", "knn_logr"};
  if (exact_loglik) h.emplace_back("exact_loglik");
  if (c_y) h.emplace_back("C_y");
  return h;
}

DenseMatrix Landscape::table() const {
  const std::size_t cols = header().size();
  DenseMatrix t(nodes.rows(), static_cast<Index>(cols));
  t.leftCols(2) = nodes;
  t.col(2) = align_loss;
  t.col(3) = nll;
  t.col(4) = knn_logr;
  Index next = 5;
  if (exact_loglik) t.col(next++) = *exact_loglik;
  if (c_y) t.col(next++) = *c_y;
  return t;
}

DenseMatrix Landscape::image(const DenseVector& column) const {
  DenseMatrix img(resolution, resolution);
  for (Index r = 0; r < resolution; ++r)
    for (Index c = 0; c < resolution; ++c) img(r, c) = column(r * resolution + c);
  return img;
}

Landscape compute_landscape(const VelocityField& field, const ReferenceSet& reference,
                            const LandscapeConfig& config, std::uint64_t seed) {
  config.validate();
  if (field.dim() != kToyDim) {
    throw std::invalid_argument("landscape: needs a 2D field, got dimension " + std::to_string(field.dim()));
  }
  Landscape l;
  l.resolution = config.resolution;
  l.nodes = config.nodes();

  Rng eval = Rng(seed).split(streams::kEvaluation);
  const AlignDraws draws = AlignDraws::common(kToyDim, config.mc, eval);
  l.align_loss = align_loss(field, l.nodes, draws, false).loss;
  l.nll = reference.density.nll(l.nodes);
  l.knn_logr = knn_log_distance(reference.knn_dataset, l.nodes, config.knn_k);
  if (config.exact) {
    l.exact_loglik = exact_log_likelihood(field, l.nodes, {config.exact_steps, OdeMethod::rk4, OdeDirection::backward})
                         .value;
    Rng probe = Rng(seed).split(streams::kTraceProbe);
    const std::vector<McEstimate> c = estimate_C(field, l.nodes, config.c_mc, probe);
    DenseVector cv(static_cast<Index>(c.size()));
    for (std::size_t i = 0; i < c.size(); ++i) cv(static_cast<Index>(i)) = c[i].mean;
    l.c_y = std::move(cv);
  }
  return l;
}

std::vector<CorrelationRow> correlate_table(const CsvTable& table, const std::string& against) {
  if (table.rows.rows() < 10) {
    throw ConfigError("correlate: need at least 10 rows, got " + std::to_string(table.rows.rows()));
  }
  const Index ref = table.column(against);
  std::vector<CorrelationRow> out;
  for (std::size_t j = 0; j < table.header.size(); ++j) {
    const Index col = static_cast<Index>(j);
    if (col == ref || table.header[j] == "step") continue;
    std::vector<Index> keep;
    for (Index i = 0; i < table.rows.rows(); ++i) {
      if (std::isfinite(table.rows(i, ref)) && std::isfinite(table.rows(i, col))) keep.push_back(i);
    }
    CorrelationRow row{table.header[j], static_cast<Index>(keep.size()), std::nullopt, std::nullopt};
    if (keep.size() >= 2) {
      DenseVector a(row.n), b(row.n);
      for (Index k = 0; k < row.n; ++k) {
        a(k) = table.rows(keep[static_cast<std::size_t>(k)], ref);
        b(k) = table.rows(keep[static_cast<std::size_t>(k)], col);
      }
      row.pearson = pearson(a, b);
      row.spearman = spearman(a, b);
    }
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------

fs::path cmd_gen_data(const ExperimentConfig& config) {
  config.require_section("run");
  const ToyDistributionSpec& spec = require_data(config);
  fs::create_directories(config.output_dir);
  Rng rng = Rng(config.seed).split(streams::kSampling);
  const DenseMatrix x = sample(spec, config.n_samples, rng);
  const fs::path out = config.output_dir / outputs::kSamples;
  write_csv_with_sidecar(out, numbered_columns("x", kToyDim), x,
                         make_sidecar(config, "gen-data",
                                      {{"spec", describe(spec)}, {"n_samples", std::to_string(config.n_samples)}}));
  return out;
}

TrainingState cmd_train_flow(const ExperimentConfig& config, bool resume) {
  config.require_section("run");
  config.require_section("flownet");
  config.require_section("train");

  TargetSampler target;
  if (!config.train_data_csv.empty()) {
    DenseMatrix data = read_csv(config.train_data_csv).rows;
    if (data.cols() != config.flownet.in_dim) {
      throw ConfigError("train.data_csv has " + std::to_string(data.cols()) + " columns but flownet.in_dim is " +
                            std::to_string(config.flownet.in_dim),
                        "train.data_csv");
    }
    target = dataset_sampler(std::move(data));
  } else {
    const ToyDistributionSpec spec = require_data(config);
    if (config.flownet.in_dim != kToyDim) {
      throw ConfigError("toy targets are 2D; set flownet.in_dim = 2 or train.data_csv", "flownet.in_dim");
    }
    target = [spec](Index n, Rng& rng) { return sample(spec, n, rng); };
  }

  fs::create_directories(config.output_dir);
  const fs::path ckpt = config.output_dir / outputs::kCheckpoint;
  const fs::path loss_csv = config.output_dir / outputs::kTrainLoss;
  const std::vector<std::string> header{"step", "fm_loss", "lr", "grad_norm"};

  TrainingState state;
  DenseMatrix kept_rows(0, 4);
  if (resume && fs::exists(ckpt)) {
    state = load_training_state(ckpt);
    if (!(state.params.config == config.flownet)) {
      throw ConfigError("checkpoint architecture does not match [flownet]", "flownet.preset");
    }
    if (fs::exists(loss_csv)) {
      const CsvTable old = read_csv(loss_csv);
      if (old.header != header) throw FormatError(loss_csv.string() + ": unexpected columns");
      Index n = 0;
      while (n < old.rows.rows() && old.rows(n, 0) < static_cast<double>(state.step)) ++n;
      kept_rows = old.rows.topRows(n);
    }
  } else {
    state = TrainingState::fresh(config.flownet, config.seed);
  }

  CsvWriter log(loss_csv, header);
  for (Index i = 0; i < kept_rows.rows(); ++i) {
    const DenseRowVector r = kept_rows.row(i);
    log.append(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
  }
  const Sidecar meta = make_sidecar(config, "train-flow");
  TrainHooks hooks;
  hooks.on_record = [&log](const TrainRecord& r) {
    const double row[] = {static_cast<double>(r.step), r.fm_loss, r.lr, r.grad_norm};
    log.append(row);
  };
  hooks.on_checkpoint = [&](const TrainingState& s) {
    log.flush();
    save_state_atomically(ckpt, s);
  };

  try {
    train_flow(state, target, config.train, hooks);
  } catch (const TrainingDiverged& e) {
    log.flush();
    save_state_atomically(ckpt, e.last_good());
    Sidecar failed = meta;
    failed.extra.emplace_back("diverged", e.what());
    write_sidecar(ckpt, failed);
    write_sidecar(loss_csv, failed);
    throw;
  }
  log.flush();
  save_state_atomically(ckpt, state);
  Sidecar ckpt_meta = meta;
  ckpt_meta.extra.emplace_back("step", std::to_string(state.step));
  write_sidecar(ckpt, ckpt_meta);
  write_sidecar(loss_csv, meta);
  return state;
}

AlignTrajectory cmd_align(const ExperimentConfig& config, const fs::path& checkpoint) {
  config.require_section("run");
  config.require_section("align");
  const FlowNet field = load_field(checkpoint, config.use_ema);
  const Index dim = field.dim();

  const fs::path dir = config.output_dir / outputs::kAlignDir;
  fs::create_directories(dir);
  const Sidecar meta = make_sidecar(config, "align", {{"checkpoint", checkpoint.string()}});

  std::optional<ReferenceSet> reference;
  AlignHooks hooks;
  if (dim == kToyDim) {
    reference = make_reference(require_data(config), config.align.knn_dataset, config.landscape.kde_samples,
                               config.landscape.kde_bandwidth, config.seed);
    if (config.align.knn_dataset < config.align.knn_k) {
      throw ConfigError("align.knn_k exceeds align.knn_dataset", "align.knn_k");
    }
    hooks.nll = [&reference](const DenseMatrix& y) { return reference->density.nll(y).mean(); };
    hooks.knn = [&reference, k = config.align.knn_k](const DenseMatrix& y) {
      return knn_log_distance(reference->knn_dataset, y, k).mean();
    };
  }

  const fs::path metrics = config.output_dir / outputs::kAlignMetrics;
  CsvWriter log(metrics, {"step", "align_loss", "nll_analytic", "knn_logr"});
  hooks.on_record = [&log](const AlignRecord& r) {
    const double row[] = {static_cast<double>(r.step), r.align_loss, r.nll_analytic, r.knn_logr};
    log.append(row);
  };
  const std::vector<std::string> latent_header = numbered_columns("y", dim);
  hooks.on_snapshot = [&](const LatentBatch& b) {
    const fs::path p = dir / ("latents_step" + std::to_string(b.step) + ".csv");
    write_csv_with_sidecar(p, latent_header, b.y, meta);
  };

  const DenseMatrix init = init_latents(config.align.optimizer.latents, dim, config.seed);
  try {
    AlignTrajectory traj = optimize_latents(field, init, config.align.optimizer, hooks);
    log.flush();
    write_sidecar(metrics, meta);
    return traj;
  } catch (const AlignDiverged& e) {
    log.flush();
    Sidecar failed = meta;
    failed.extra.emplace_back("diverged", e.what());
    write_sidecar(metrics, failed);
    throw;
  }
}

Landscape cmd_landscape(const ExperimentConfig& config, const fs::path& checkpoint) {
  config.require_section("run");
  config.require_section("landscape");
  const ToyDistributionSpec& spec = require_data(config);
  const FlowNet field = load_field(checkpoint, config.use_ema);
  const LandscapeConfig& lc = config.landscape;
  const ReferenceSet reference = make_reference(spec, lc.knn_dataset, lc.kde_samples, lc.kde_bandwidth, config.seed);
  const Landscape l = compute_landscape(field, reference, lc, config.seed);

  fs::create_directories(config.output_dir);
  const fs::path csv = config.output_dir / outputs::kLandscape;
  const std::vector<std::string> header = l.header();
  const DenseMatrix table = l.table();
  std::vector<std::pair<std::string, std::string>> bounds{
      {"checkpoint", checkpoint.string()},
      {"reference", reference.density.analytic() ? "analytic" : "kde"},
      {"orientation", "pixel (r, c) is node y0 = lo + c*step, y1 = lo + r*step; first row is y1 = lo"}};
  for (std::size_t j = 2; j < header.size(); ++j) {
    const DenseVector col = table.col(static_cast<Index>(j));
    const fs::path pgm = config.output_dir / ("landscape_" + header[j] + ".pgm");
    const PgmBounds b = write_pgm(pgm, l.image(col));
    write_sidecar(pgm, make_sidecar(config, "landscape",
                                    {{"checkpoint", checkpoint.string()},
                                     {"column", header[j]},
                                     {"min", format_double(b.min)},
                                     {"max", format_double(b.max)},
                                     {"orientation", bounds[2].second}}));
    bounds.emplace_back(header[j] + "_min", format_double(b.min));
    bounds.emplace_back(header[j] + "_max", format_double(b.max));
  }
  write_csv_with_sidecar(csv, header, table, make_sidecar(config, "landscape", bounds));
  return l;
}

std::vector<ElboReport> cmd_eval_likelihood(const ExperimentConfig& config, const fs::path& checkpoint) {
  config.require_section("run");
  config.require_section("eval");
  const ToyDistributionSpec& spec = require_data(config);
  const EvalConfig& ec = config.eval;
  const FlowNet field = load_field(checkpoint, config.use_ema);

  Rng rng = Rng(config.seed).split(streams::kEvaluation);
  DenseMatrix points(ec.n_data + ec.n_uniform, field.dim());
  points.topRows(ec.n_data) = sample(spec, ec.n_data, rng);
  points.bottomRows(ec.n_uniform) = rng.uniform_matrix(ec.n_uniform, field.dim(), ec.lo, ec.hi);
  const std::vector<ElboReport> reports = elbo_report(field, points, ec.mc, ec.ode, rng);

  std::vector<std::string> header = numbered_columns("y", field.dim());
  for (const char* h : {"is_data", "C_y", "C_y_stderr", "align_loss", "align_loss_stderr", "elbo", "exact_loglik",
                        "gap", "quadrature_error", "tolerance", "bound_holds"}) {
    header.emplace_back(h);
  }
  DenseMatrix table(points.rows(), static_cast<Index>(header.size()));
  for (Index i = 0; i < points.rows(); ++i) {
    const ElboReport& r = reports[static_cast<std::size_t>(i)];
    const double tail[] = {i < ec.n_data ? 1.0 : 0.0,
                           r.c_y.mean,
                           r.c_y.standard_error,
                           r.align_loss.mean,
                           r.align_loss.standard_error,
                           r.elbo,
                           r.exact_loglik,
                           r.gap,
                           r.quadrature_error,
                           r.tolerance(),
                           r.bound_holds() ? 1.0 : 0.0};
    table.row(i) << points.row(i), row_major_values(tail);
  }
  fs::create_directories(config.output_dir);
  write_csv_with_sidecar(config.output_dir / outputs::kElbo, header, table,
                         make_sidecar(config, "eval-likelihood", {{"checkpoint", checkpoint.string()}}));
  return reports;
}

std::vector<CorrelationRow> cmd_correlate(const fs::path& metrics_csv, const fs::path& output_dir) {
  const CsvTable table = read_csv(metrics_csv);
  const std::vector<CorrelationRow> rows = correlate_table(table);

  fs::create_directories(output_dir);
  const auto text = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("undefined"); };
  const fs::path csv = output_dir / outputs::kCorrelationCsv;
  const fs::path txt = output_dir / outputs::kCorrelationText;
  {
    std::ofstream out(csv);
    out << "column,n,pearson,spearman\n";
    for (const CorrelationRow& r : rows) out << r.column << ',' << r.n << ',' << text(r.pearson) << ',' << text(r.spearman) << '\n';
    if (!out) throw FormatError("write failed for " + csv.string());
  }
  {
    std::ofstream out(txt);
    out << "correlation of align_loss with each metric in " << metrics_csv.filename().string() << '\n';
    for (const CorrelationRow& r : rows) {
      out << std::left << std::setw(16) << r.column << " n=" << r.n << "  pearson=" << text(r.pearson)
          << "  spearman=" << text(r.spearman) << '\n';
    }
    if (!out) throw FormatError("write failed for " + txt.string());
  }
  std::ifstream in(metrics_csv, std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const Sidecar meta{"correlate", fnv1a_hex(bytes), 0, {{"input", metrics_csv.string()}}};
  write_sidecar(csv, meta);
  write_sidecar(txt, meta);
  return rows;
}

ProjectionSpec cmd_project(const ExperimentConfig& config, const fs::path& input_csv, const fs::path& output_csv) {
  config.require_section("run");
  config.require_section("project");
  const CsvTable input = read_csv(input_csv);
  const ProjectRunConfig& pc = config.project;
  const Index d2 = input.rows.cols();
  Rng rng = Rng(config.seed).split(streams::kInit);
  ProjectionSpec spec;
  try {
    spec = pc.kind == ProjectionKind::random ? make_random_projection(d2, pc.target_dim, rng, pc.jl_rescale)
                                             : make_projection(pc.kind, d2, pc.target_dim, input.rows, rng);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("project: ") + e.what(), "project.target_dim");
  }
  spec.seed = config.seed;
  const DenseMatrix out = apply(spec, input.rows);

  if (output_csv.has_parent_path()) fs::create_directories(output_csv.parent_path());
  const Sidecar meta = make_sidecar(config, "project", {{"input", input_csv.string()}});
  write_csv_with_sidecar(output_csv, numbered_columns("y", pc.target_dim), out, meta);
  fs::path bin = output_csv;
  bin += ".projection.bin";
  save_projection(bin, spec);
  write_sidecar(bin, meta);
  return spec;
}

}  // namespace flowalign
