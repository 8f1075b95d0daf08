#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "contseg/continual.hpp"
#include "contseg/model.hpp"
#include "contseg/synth.hpp"

namespace contseg {

enum class OrderMode { Shuffled, FixedDescending };
std::string to_string(OrderMode mode);
OrderMode order_mode_from_string(const std::string& text);

// One experiment description: dataset, model, training setup, and the
// (regime x seed) grid. Parsed from a flat, ordered key = value document.
struct ExperimentConfig {
  std::string archive_dir;        // dataset archive location ("" = in-memory)
  std::string cohort = "full8";  // full8 | desk4 | none
  std::uint64_t data_seed = 0;
  std::vector<DomainSpec> domains;  // explicit specs; empty = built-in cohort
  ModelConfig model;
  RegimeConfig train;  // regime field ignored; regimes come from the list below
  std::vector<Regime> regimes = {Regime::SingleDomain, Regime::MultiDomain,
                                 Regime::FineTune, Regime::Replay};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  OrderMode order = OrderMode::Shuffled;
  std::string output_dir = "runs/out";
};

ExperimentConfig parse_config(const std::string& text);  // ConfigError
ExperimentConfig load_config_file(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);  // canonical
std::uint64_t config_hash(const ExperimentConfig& config);

// Explicit domains when given, otherwise the named built-in cohort.
std::vector<DomainSpec> resolve_domain_specs(const ExperimentConfig& config);

// Domain order for one run seed: a seed-deterministic permutation in
// shuffled mode, or sorting by subject count (descending, stable) in fixed
// mode regardless of seed.
std::vector<std::string> ordered_domain_names(
    const std::vector<DomainSpec>& specs, OrderMode mode, std::uint64_t seed);

// Reads the archive when config.archive_dir exists on disk, otherwise
// generates the cohort in memory. Either path yields bit-identical data.
std::vector<Domain> load_or_generate_domains(const ExperimentConfig& config);

// `generate` subcommand: writes the dataset archive; idempotent per domain
// via the spec hash. Returns the number of domains (re)written.
int cmd_generate(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Run artifacts. Layout under config.output_dir:
//   manifest.txt
//   cells/<regime>/seed<k>/{R.csv, stages.log, audit.log, stage<i>.ckpt}
//   report/{curves.csv, bwt_table.csv, heatmap_<regime>.csv}

struct CellKey {
  Regime regime;
  std::uint64_t seed;
};

std::filesystem::path cell_dir(const ExperimentConfig& config, CellKey key);

struct CellOutcome {
  CellKey key;
  bool skipped = false;   // R.csv already present
  int resumed_stages = 0; // stages replayed from the stage log
  int trained_stages = 0;
};

struct CellHooks {
  // Test hook, called after each persisted stage; may throw to simulate
  // an interruption.
  std::function<void(const CellKey&, const StageRecord&)> after_stage;
};

// Runs one (regime, seed) cell against the shared dataset, persisting stage
// checkpoints, the append-only stage log, the audit log, and finally R.csv.
// Cells whose R.csv exists are skipped; partial cells resume from the log.
CellOutcome run_cell(const ExperimentConfig& config,
                     const std::vector<Domain>& domains, CellKey key,
                     const CellHooks& hooks = {});

// Executes every (regime x seed) cell, `workers` at a time. Worker count
// never affects artifact bytes: cells are independent and keyed by name.
std::vector<CellOutcome> run_cells(const ExperimentConfig& config,
                                   const std::vector<Domain>& domains,
                                   int workers, const CellHooks& hooks = {});

// Writes manifest.txt (config hash + canonical config echo) if absent;
// refuses with a ConfigError when an existing manifest carries a different
// hash.
void write_run_manifest(const ExperimentConfig& config);

// Worker count from the environment (CONTSEG_WORKERS), default 1.
int env_worker_count();

// Runs jobs on `workers` threads; rethrows the first failure.
void parallel_run(const std::vector<std::function<void()>>& jobs, int workers);

// ---------------------------------------------------------------------------
// R.csv: per-cell result matrix with config hash, regime, seed, and the
// run's domain order in comment headers.

struct CellResult {
  CellKey key;
  std::string config_hash_hex;
  std::vector<std::string> order;
  ResultMatrix matrix;
};

std::string format_result_csv(const ExperimentConfig& config, CellKey key,
                              const ResultMatrix& matrix);
CellResult parse_result_csv(const std::string& text);

// Stage log lines (append-only, one per completed stage).
std::string format_stage_line(const StageRecord& record);
StageRecord parse_stage_line(const std::string& line);

std::string format_audit_line(const AccessRecord& record);

}  // namespace contseg
