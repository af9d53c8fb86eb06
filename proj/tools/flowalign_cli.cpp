#include "flowalign/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>

using namespace flowalign;
namespace fs = std::filesystem;

namespace {

int fail(int code, const std::string& kind, const std::string& message, const std::string& key = {}) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["code"] = code;
  if (!key.empty()) j["key"] = key;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  return code;
}

fs::path checkpoint_or_default(const std::string& given, const ExperimentConfig& config) {
  return given.empty() ? config.output_dir / outputs::kCheckpoint : fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Flow-prior alignment experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  std::string config_path, checkpoint, metrics, output_dir, input, output;
  bool resume = false;

  auto* gen = app.add_subcommand("gen-data", "Sample the target distribution to samples.csv");
  auto* train = app.add_subcommand("train-flow", "Train the flow prior; writes checkpoint.bin and train_loss.csv");
  train->add_flag("--resume", resume, "Continue from output_dir/checkpoint.bin when present");
  auto* align = app.add_subcommand("align", "Optimize latents against the frozen prior");
  auto* land = app.add_subcommand("landscape", "Evaluate align loss and reference NLL on a grid");
  auto* eval = app.add_subcommand("eval-likelihood", "ELBO versus exact log-likelihood report");
  for (CLI::App* sub : {gen, train, align, land, eval}) {
    sub->add_option("-c,--config", config_path, "Experiment config file")->required();
  }
  for (CLI::App* sub : {align, land, eval}) {
    sub->add_option("--checkpoint", checkpoint, "Training checkpoint (default output_dir/checkpoint.bin)");
  }
  auto* corr = app.add_subcommand("correlate", "Correlate align_loss with the other metric columns of a CSV");
  corr->add_option("metrics", metrics, "Metrics or landscape CSV")->required();
  corr->add_option("-o,--output-dir", output_dir, "Report directory (default: next to the input)");
  auto* proj = app.add_subcommand("project", "Project feature rows to the latent dimension");
  proj->add_option("-c,--config", config_path, "Experiment config file")->required();
  proj->add_option("-i,--input", input, "Feature CSV")->required();
  proj->add_option("-o,--output", output, "Projected CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(exit_code::kConfig, "usage", e.what());
  }

  try {
    if (corr->parsed()) {
      const fs::path in(metrics);
      const auto rows = cmd_correlate(in, output_dir.empty() ? in.parent_path() : fs::path(output_dir));
      for (const CorrelationRow& r : rows) {
        std::cout << r.column << " pearson=" << (r.pearson ? format_double(*r.pearson) : "undefined")
                  << " spearman=" << (r.spearman ? format_double(*r.spearman) : "undefined") << '\n';
      }
      return exit_code::kOk;
    }
    const ExperimentConfig config = ExperimentConfig::load(config_path);
    if (gen->parsed()) {
      std::cout << cmd_gen_data(config).string() << '\n';
    } else if (train->parsed()) {
      const TrainingState s = cmd_train_flow(config, resume);
      std::cout << "trained to step " << s.step << '\n';
    } else if (align->parsed()) {
      const AlignTrajectory t = cmd_align(config, checkpoint_or_default(checkpoint, config));
      std::cout << "align_loss " << format_double(t.records.back().align_loss) << " nll "
                << format_double(t.records.back().nll_analytic) << '\n';
    } else if (land->parsed()) {
      const Landscape l = cmd_landscape(config, checkpoint_or_default(checkpoint, config));
      const auto r = pearson(l.align_loss, l.nll);
      std::cout << "pearson(align_loss, nll_analytic) " << (r ? format_double(*r) : "undefined") << '\n';
    } else if (eval->parsed()) {
      const auto reports = cmd_eval_likelihood(config, checkpoint_or_default(checkpoint, config));
      std::size_t holds = 0;
      for (const ElboReport& r : reports) holds += r.bound_holds();
      std::cout << "bound holds at " << holds << " of " << reports.size() << " points\n";
    } else if (proj->parsed()) {
      const ProjectionSpec s = cmd_project(config, input, output);
      std::cout << to_string(s.kind) << ' ' << s.source_dim << " -> " << s.target_dim << '\n';
    }
    return exit_code::kOk;
  } catch (const ConfigError& e) {
    return fail(exit_code::kConfig, "config", e.what(), e.key());
  } catch (const NumericError& e) {
    return fail(exit_code::kNumeric, "numeric", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(exit_code::kConfig, "input", e.what());
  } catch (const FormatError& e) {
    return fail(exit_code::kConfig, "input", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(exit_code::kConfig, "input", e.what());
  } catch (const std::exception& e) {
    return fail(exit_code::kNumeric, "runtime", e.what());
  }
}
