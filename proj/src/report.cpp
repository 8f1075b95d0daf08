#include "contseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "contseg/errors.hpp"
#include "contseg/serialize.hpp"

namespace contseg {

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (const double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Population standard deviation over seeds.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double s = 0.0;
  for (const double x : xs) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string part;
  while (std::getline(ss, part, ',')) fields.push_back(part);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

std::string parse_hash_header(const std::string& line) {
  const std::string prefix = "# config_hash = ";
  if (line.rfind(prefix, 0) != 0) {
    throw IoError("expected '# config_hash = ...' header, got: " + line);
  }
  return line.substr(prefix.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Curves

std::string format_curves_csv(const CurvesTable& table) {
  std::ostringstream os;
  os << "# config_hash = " << table.config_hash_hex << "\n";
  os << "regime,stage,mean_dice,std_dice,n_unseen,zeroshot_mean,zeroshot_std\n";
  for (const auto& row : table.rows) {
    os << row.regime << ',' << row.stage << ',' << format_double(row.mean_dice)
       << ',' << format_double(row.std_dice) << ',' << row.n_unseen << ',';
    if (row.n_unseen > 0) {
      os << format_double(row.zeroshot_mean) << ','
         << format_double(row.zeroshot_std);
    } else {
      os << ',';
    }
    os << "\n";
  }
  return os.str();
}

CurvesTable parse_curves_csv(const std::string& text) {
  CurvesTable table;
  std::stringstream ss(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.config_hash_hex = parse_hash_header(line);
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto fields = split_csv_line(line);
    if (fields.size() != 7) throw IoError("curves row needs 7 fields: " + line);
    CurveRow row;
    row.regime = fields[0];
    row.stage = std::stoi(fields[1]);
    row.mean_dice = parse_double(fields[2]);
    row.std_dice = parse_double(fields[3]);
    row.n_unseen = std::stoi(fields[4]);
    if (row.n_unseen > 0) {
      row.zeroshot_mean = parse_double(fields[5]);
      row.zeroshot_std = parse_double(fields[6]);
    }
    table.rows.push_back(std::move(row));
  }
  if (table.config_hash_hex.empty()) throw IoError("curves csv: missing config hash");
  return table;
}

// ---------------------------------------------------------------------------
// BWT table

std::string format_bwt_csv(const BwtTable& table) {
  std::ostringstream os;
  os << "# config_hash = " << table.config_hash_hex << "\n";
  os << "domain";
  for (const auto& method : table.methods) os << ',' << method;
  os << "\n";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    os << table.rows[i];
    for (const double v : table.values[i]) os << ',' << format_double(v);
    os << "\n";
  }
  return os.str();
}

BwtTable parse_bwt_csv(const std::string& text) {
  BwtTable table;
  std::stringstream ss(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.config_hash_hex = parse_hash_header(line);
      continue;
    }
    const auto fields = split_csv_line(line);
    if (!header_seen) {
      header_seen = true;
      if (fields.empty() || fields[0] != "domain") {
        throw IoError("bwt csv: bad header: " + line);
      }
      table.methods.assign(fields.begin() + 1, fields.end());
      continue;
    }
    if (fields.size() != table.methods.size() + 1) {
      throw IoError("bwt csv: ragged row: " + line);
    }
    table.rows.push_back(fields[0]);
    std::vector<double> values;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      values.push_back(parse_double(fields[i]));
    }
    table.values.push_back(std::move(values));
  }
  if (table.config_hash_hex.empty()) throw IoError("bwt csv: missing config hash");
  return table;
}

// ---------------------------------------------------------------------------
// Heatmaps

std::string format_heatmap_csv(const HeatmapTable& table) {
  std::ostringstream os;
  os << "# config_hash = " << table.config_hash_hex << "\n";
  os << "# regime = " << table.regime << "\n";
  os << "row,col,train_domain,test_domain,mean,std\n";
  for (const auto& cell : table.cells) {
    os << cell.row << ',' << cell.col << ',' << cell.train_domain << ','
       << cell.test_domain << ',' << format_double(cell.mean) << ','
       << format_double(cell.std) << "\n";
  }
  return os.str();
}

HeatmapTable parse_heatmap_csv(const std::string& text) {
  HeatmapTable table;
  std::stringstream ss(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string regime_prefix = "# regime = ";
      if (line.rfind(regime_prefix, 0) == 0) {
        table.regime = line.substr(regime_prefix.size());
      } else {
        table.config_hash_hex = parse_hash_header(line);
      }
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto fields = split_csv_line(line);
    if (fields.size() != 6) throw IoError("heatmap row needs 6 fields: " + line);
    HeatmapCell cell;
    cell.row = std::stoi(fields[0]);
    cell.col = std::stoi(fields[1]);
    cell.train_domain = fields[2];
    cell.test_domain = fields[3];
    cell.mean = parse_double(fields[4]);
    cell.std = parse_double(fields[5]);
    table.cells.push_back(std::move(cell));
  }
  if (table.config_hash_hex.empty() || table.regime.empty()) {
    throw IoError("heatmap csv: missing headers");
  }
  return table;
}

// ---------------------------------------------------------------------------
// Aggregation

std::vector<CellResult> load_cells(const ExperimentConfig& config) {
  std::vector<CellResult> cells;
  std::vector<std::pair<std::string, std::string>> hashes;  // file -> hash
  for (const auto regime : config.regimes) {
    for (const auto seed : config.seeds) {
      const auto path = cell_dir(config, CellKey{regime, seed}) / "R.csv";
      if (!std::filesystem::exists(path)) {
        throw IoError("missing cell result: " + path.string() +
                      " (run the experiment first)");
      }
      CellResult cell = parse_result_csv(read_file(path));
      hashes.emplace_back(path.string(), cell.config_hash_hex);
      cells.push_back(std::move(cell));
    }
  }
  const std::string expected = hash_hex(config_hash(config));
  bool mixed = false;
  for (const auto& [file, hash] : hashes) mixed = mixed || hash != expected;
  if (mixed) {
    std::ostringstream os;
    os << "refusing to report over mixed config hashes (expected " << expected
       << "):";
    for (const auto& [file, hash] : hashes) {
      if (hash != expected) os << "\n  " << file << " -> " << hash;
    }
    throw ConfigError(os.str());
  }
  return cells;
}

CurvesTable build_curves(const ExperimentConfig& config,
                         const std::vector<CellResult>& cells) {
  CurvesTable table;
  table.config_hash_hex = hash_hex(config_hash(config));
  for (const auto regime : config.regimes) {
    const std::string regime_name = to_string(regime);
    int k = 0;
    for (const auto& cell : cells) {
      if (cell.key.regime == regime) k = cell.matrix.k();
    }
    for (int stage = 0; stage < k; ++stage) {
      std::vector<double> means, zs_means;
      for (const auto& cell : cells) {
        if (cell.key.regime != regime) continue;
        const auto& row = cell.matrix.r[static_cast<std::size_t>(stage)];
        double sum = 0.0;
        for (const double v : row) sum += v;
        means.push_back(sum / static_cast<double>(row.size()));
        if (stage + 1 < k) {
          double zs = 0.0;
          for (int j = stage + 1; j < k; ++j) zs += row[static_cast<std::size_t>(j)];
          zs_means.push_back(zs / static_cast<double>(k - stage - 1));
        }
      }
      CurveRow row;
      row.regime = regime_name;
      row.stage = stage + 1;
      row.mean_dice = mean_of(means);
      row.std_dice = std_of(means);
      row.n_unseen = k - stage - 1;
      if (row.n_unseen > 0) {
        row.zeroshot_mean = mean_of(zs_means);
        row.zeroshot_std = std_of(zs_means);
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

BwtTable build_bwt_table(const ExperimentConfig& config,
                         const std::vector<CellResult>& cells) {
  BwtTable table;
  table.config_hash_hex = hash_hex(config_hash(config));
  for (const auto regime : config.regimes) {
    if (regime == Regime::FineTune || regime == Regime::Replay) {
      table.methods.push_back(to_string(regime));
    }
  }
  if (table.methods.empty()) return table;

  // Row order: the shared run order when every cell agrees (fixed mode),
  // otherwise the configured domain order.
  std::vector<std::string> row_order;
  bool shared_order = true;
  for (const auto& cell : cells) {
    if (row_order.empty()) {
      row_order = cell.order;
    } else if (cell.order != row_order) {
      shared_order = false;
    }
  }
  if (!shared_order || row_order.empty()) {
    row_order.clear();
    for (const auto& spec : resolve_domain_specs(config)) {
      row_order.push_back(spec.name);
    }
  }

  // Per-domain BWT keyed by name: R[K][pos(d)] - R[pos(d)][pos(d)]; the
  // final domain of a run contributes exactly 0.
  std::map<std::string, std::map<std::string, std::vector<double>>> per_domain;
  std::map<std::string, std::vector<double>> averages;
  for (const auto& cell : cells) {
    if (cell.key.regime != Regime::FineTune && cell.key.regime != Regime::Replay) {
      continue;
    }
    const std::string method = to_string(cell.key.regime);
    const int k = cell.matrix.k();
    const auto& final_row = cell.matrix.r[static_cast<std::size_t>(k - 1)];
    for (int p = 0; p < k; ++p) {
      const double delta =
          final_row[static_cast<std::size_t>(p)] -
          cell.matrix.r[static_cast<std::size_t>(p)][static_cast<std::size_t>(p)];
      per_domain[method][cell.order[static_cast<std::size_t>(p)]].push_back(delta);
    }
    averages[method].push_back(compute_bwt(cell.matrix).average);
  }

  for (const auto& domain : row_order) {
    table.rows.push_back(domain);
    std::vector<double> values;
    for (const auto& method : table.methods) {
      values.push_back(mean_of(per_domain[method][domain]));
    }
    table.values.push_back(std::move(values));
  }
  table.rows.push_back("average");
  std::vector<double> avg_values;
  for (const auto& method : table.methods) {
    avg_values.push_back(mean_of(averages[method]));
  }
  table.values.push_back(std::move(avg_values));
  return table;
}

HeatmapTable build_heatmap(const ExperimentConfig& config, Regime regime,
                           const std::vector<CellResult>& cells) {
  HeatmapTable table;
  table.config_hash_hex = hash_hex(config_hash(config));
  table.regime = to_string(regime);

  std::vector<const CellResult*> selected;
  for (const auto& cell : cells) {
    if (cell.key.regime == regime) selected.push_back(&cell);
  }
  if (selected.empty()) return table;
  const int k = selected.front()->matrix.k();

  // Multi-domain rows are replicated; emit the single distinct row.
  const int n_rows = regime == Regime::MultiDomain ? 1 : k;
  for (int row = 0; row < n_rows; ++row) {
    for (int col = 0; col < k; ++col) {
      std::vector<double> values;
      std::string train_domain, test_domain;
      bool train_const = true, test_const = true;
      for (const auto* cell : selected) {
        values.push_back(cell->matrix.r[static_cast<std::size_t>(row)]
                                       [static_cast<std::size_t>(col)]);
        const auto& tr = cell->order[static_cast<std::size_t>(row)];
        const auto& te = cell->order[static_cast<std::size_t>(col)];
        if (train_domain.empty()) train_domain = tr;
        if (test_domain.empty()) test_domain = te;
        train_const = train_const && tr == train_domain;
        test_const = test_const && te == test_domain;
      }
      HeatmapCell cell;
      cell.row = row + 1;
      cell.col = col + 1;
      cell.train_domain = train_const ? train_domain : "*";
      cell.test_domain = test_const ? test_domain : "*";
      cell.mean = mean_of(values);
      cell.std = std_of(values);
      table.cells.push_back(std::move(cell));
    }
  }
  return table;
}

ReportFiles write_report(const ExperimentConfig& config) {
  const auto cells = load_cells(config);
  const auto report_dir = std::filesystem::path(config.output_dir) / "report";
  ReportFiles files;

  atomic_write_file(report_dir / "curves.csv",
                    format_curves_csv(build_curves(config, cells)));
  files.written.push_back("report/curves.csv");

  const BwtTable bwt = build_bwt_table(config, cells);
  if (!bwt.methods.empty()) {
    atomic_write_file(report_dir / "bwt_table.csv", format_bwt_csv(bwt));
    files.written.push_back("report/bwt_table.csv");
  }

  for (const auto regime : config.regimes) {
    const std::string name = "heatmap_" + to_string(regime) + ".csv";
    atomic_write_file(report_dir / name,
                      format_heatmap_csv(build_heatmap(config, regime, cells)));
    files.written.push_back("report/" + name);
  }
  return files;
}

}  // namespace contseg
