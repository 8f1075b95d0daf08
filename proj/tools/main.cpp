// contseg command line: generate synthetic multi-center datasets, run the
// continual-learning regimes over a (regime x seed) grid, and emit report
// tables from the collected result matrices.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "contseg/errors.hpp"
#include "contseg/experiment.hpp"
#include "contseg/report.hpp"
#include "contseg/serialize.hpp"

namespace {

// Exit codes, documented in the README:
//   0 success, 1 unexpected failure, 2 usage, 3 configuration,
//   4 data/contract, 5 I/O, 6 training.
constexpr int kExitOk = 0;
constexpr int kExitUnexpected = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitData = 4;
constexpr int kExitIo = 5;
constexpr int kExitTraining = 6;

struct CliOptions {
  std::string config_path;
  std::string output_dir;
  std::string seeds;
  std::string regimes;
  std::string order;
};

contseg::ExperimentConfig effective_config(const CliOptions& options) {
  contseg::ExperimentConfig config;
  if (!options.config_path.empty()) {
    config = contseg::load_config_file(options.config_path);
  }
  if (!options.output_dir.empty()) config.output_dir = options.output_dir;
  if (!options.seeds.empty()) {
    config.seeds.clear();
    std::stringstream ss(options.seeds);
    std::string part;
    while (std::getline(ss, part, ',')) {
      const auto dots = part.find("..");
      if (dots == std::string::npos) {
        config.seeds.push_back(std::stoull(part));
      } else {
        for (auto s = std::stoull(part.substr(0, dots));
             s <= std::stoull(part.substr(dots + 2)); ++s) {
          config.seeds.push_back(s);
        }
      }
    }
    if (config.seeds.empty()) throw contseg::UsageError("empty --seeds list");
  }
  if (!options.regimes.empty()) {
    config.regimes.clear();
    std::stringstream ss(options.regimes);
    std::string part;
    while (std::getline(ss, part, ',')) {
      config.regimes.push_back(contseg::regime_from_string(part));
    }
  }
  if (!options.order.empty()) {
    config.order = contseg::order_mode_from_string(options.order);
  }
  return config;
}

int do_generate(const CliOptions& options) {
  auto config = effective_config(options);
  if (config.archive_dir.empty()) config.archive_dir = "runs/data";
  const auto specs = contseg::resolve_domain_specs(config);
  const int written = contseg::cmd_generate(config);
  std::printf("archive %s: %d domain(s) written, %d up to date\n",
              config.archive_dir.c_str(), written,
              static_cast<int>(specs.size()) - written);
  return kExitOk;
}

int do_run(const CliOptions& options) {
  const auto config = effective_config(options);
  const int workers = contseg::env_worker_count();
  const auto domains = contseg::load_or_generate_domains(config);
  contseg::write_run_manifest(config);
  std::printf("running %zu regime(s) x %zu seed(s) on %zu domains (%d worker%s)\n",
              config.regimes.size(), config.seeds.size(), domains.size(),
              workers, workers == 1 ? "" : "s");
  const auto outcomes = contseg::run_cells(config, domains, workers);
  for (const auto& outcome : outcomes) {
    std::printf("  %s seed %llu: %s (%d resumed, %d trained)\n",
                contseg::to_string(outcome.key.regime).c_str(),
                static_cast<unsigned long long>(outcome.key.seed),
                outcome.skipped ? "up to date" : "done",
                outcome.resumed_stages, outcome.trained_stages);
  }
  const auto files = contseg::write_report(config);
  for (const auto& file : files.written) {
    std::printf("wrote %s/%s\n", config.output_dir.c_str(), file.c_str());
  }
  std::printf("results under %s/cells\n", config.output_dir.c_str());
  return kExitOk;
}

int do_report(const CliOptions& options) {
  const auto config = effective_config(options);
  const auto files = contseg::write_report(config);
  for (const auto& file : files.written) {
    std::printf("wrote %s/%s\n", config.output_dir.c_str(), file.c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contseg: continual-learning experiments on synthetic "
               "multi-center soft-label segmentation tasks"};
  app.require_subcommand(1);

  CliOptions options;
  const auto add_common = [&options](CLI::App* cmd) {
    cmd->add_option("-c,--config", options.config_path,
                    "experiment config file (key = value)");
    cmd->add_option("-o,--output", options.output_dir, "output directory override");
    cmd->add_option("--seeds", options.seeds, "seed list override, e.g. 0..8 or 1,3");
    cmd->add_option("--regimes", options.regimes,
                    "regime filter, e.g. fine-tune,replay");
    cmd->add_option("--order", options.order,
                    "domain order mode: shuffled | fixed-descending");
  };

  auto* generate = app.add_subcommand("generate", "write the dataset archive");
  auto* run = app.add_subcommand("run", "execute the (regime x seed) grid");
  auto* report = app.add_subcommand("report", "emit report tables from results");
  add_common(generate);
  add_common(run);
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (generate->parsed()) return do_generate(options);
    if (run->parsed()) return do_run(options);
    if (report->parsed()) return do_report(options);
    std::fprintf(stderr, "no subcommand given\n");
    return kExitUsage;
  } catch (const contseg::UsageError& err) {
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return kExitUsage;
  } catch (const contseg::ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kExitConfig;
  } catch (const contseg::TrainingError& err) {
    std::fprintf(stderr, "training error: %s\n", err.what());
    return kExitTraining;
  } catch (const contseg::IoError& err) {
    std::fprintf(stderr, "io error: %s\n", err.what());
    return kExitIo;
  } catch (const contseg::Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "unexpected error: %s\n", err.what());
    return kExitUnexpected;
  }
}
