#pragma once

#include <string>
#include <vector>

#include "contseg/experiment.hpp"

namespace contseg {

// Emitted tables are delimiter-separated text with a documented header row
// and a `# config_hash = ...` comment; every table has a typed parser whose
// re-serialization is byte-identical (schema round-trip).

// Dice-vs-stage curves. mean_dice averages each stage's R row over all
// domains and seeds; the zeroshot columns restrict to domains at positions
// after the stage (empty at the final stage).
struct CurveRow {
  std::string regime;
  int stage = 0;  // 1-based in the file
  double mean_dice = 0.0;
  double std_dice = 0.0;
  int n_unseen = 0;
  double zeroshot_mean = 0.0;  // valid when n_unseen > 0
  double zeroshot_std = 0.0;
};

struct CurvesTable {
  std::string config_hash_hex;
  std::vector<CurveRow> rows;
};

std::string format_curves_csv(const CurvesTable& table);
CurvesTable parse_curves_csv(const std::string& text);

// Per-center backward transfer for the sequential methods, averaged over
// seeds, plus a final "average" row holding the BWT formula's mean.
struct BwtTable {
  std::string config_hash_hex;
  std::vector<std::string> methods;  // subset of {fine-tune, replay}
  std::vector<std::string> rows;     // domain names, then "average"
  std::vector<std::vector<double>> values;  // rows x methods
};

std::string format_bwt_csv(const BwtTable& table);
BwtTable parse_bwt_csv(const std::string& text);

// Mean +/- std of R over seeds, aggregated by sequence position. Domain
// name columns show "*" when the domain at a position varies across seeds
// (shuffled order mode).
struct HeatmapCell {
  int row = 0;  // training stage, 1-based
  int col = 0;  // test position, 1-based
  std::string train_domain;
  std::string test_domain;
  double mean = 0.0;
  double std = 0.0;
};

struct HeatmapTable {
  std::string config_hash_hex;
  std::string regime;
  std::vector<HeatmapCell> cells;
};

std::string format_heatmap_csv(const HeatmapTable& table);
HeatmapTable parse_heatmap_csv(const std::string& text);

// Loads every (regime x seed) R.csv under the output directory, refusing
// with a ConfigError (and a per-file hash summary) when config hashes are
// mixed, then writes report/curves.csv, report/bwt_table.csv and
// report/heatmap_<regime>.csv.
struct ReportFiles {
  std::vector<std::string> written;  // paths relative to the output dir
};

ReportFiles write_report(const ExperimentConfig& config);

// Aggregation helpers, exposed for the report tests.
CurvesTable build_curves(const ExperimentConfig& config,
                         const std::vector<CellResult>& cells);
BwtTable build_bwt_table(const ExperimentConfig& config,
                         const std::vector<CellResult>& cells);
HeatmapTable build_heatmap(const ExperimentConfig& config, Regime regime,
                           const std::vector<CellResult>& cells);

// Reads all cells the config prescribes; IoError if any are missing.
std::vector<CellResult> load_cells(const ExperimentConfig& config);

}  // namespace contseg
