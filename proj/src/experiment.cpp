#include "contseg/experiment.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "contseg/archive.hpp"
#include "contseg/errors.hpp"
#include "contseg/serialize.hpp"

namespace contseg {

namespace {

constexpr std::uint64_t kOrderTag = 0x6f72646572;  // domain-order stream

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& text, int line_no) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("line " + std::to_string(line_no) + ": expected true/false, got '" + text + "'");
}

Shape parse_shape_value(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) shape.push_back(std::stoll(part));
  if (shape.empty()) throw ConfigError("empty shape value '" + text + "'");
  return shape;
}

std::string shape_value(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

// "0..8" ranges and comma lists, possibly mixed: "0..3,7".
std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      seeds.push_back(std::stoull(part));
    } else {
      const auto lo = std::stoull(part.substr(0, dots));
      const auto hi = std::stoull(part.substr(dots + 2));
      if (hi < lo) throw ConfigError("empty seed range '" + part + "'");
      for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    }
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

std::string seed_list_value(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seeds[i]);
  }
  return out;
}

std::pair<int, int> parse_int_range(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    const int v = std::stoi(text);
    return {v, v};
  }
  return {std::stoi(text.substr(0, dots)), std::stoi(text.substr(dots + 2))};
}

std::pair<double, double> parse_double_range(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    const double v = parse_double(text);
    return {v, v};
  }
  return {parse_double(text.substr(0, dots)), parse_double(text.substr(dots + 2))};
}

void validate_domain_name(const std::string& name, int line_no) {
  if (name.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty domain name");
  for (const char c : name) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') {
      throw ConfigError("line " + std::to_string(line_no) + ": domain name '" + name +
                        "' may only contain alphanumerics, '-' and '_'");
    }
  }
}

}  // namespace

std::string to_string(OrderMode mode) {
  return mode == OrderMode::Shuffled ? "shuffled" : "fixed-descending";
}

OrderMode order_mode_from_string(const std::string& text) {
  if (text == "shuffled") return OrderMode::Shuffled;
  if (text == "fixed-descending") return OrderMode::FixedDescending;
  throw UsageError("unknown order mode '" + text +
                   "' (valid: shuffled, fixed-descending)");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig config;
  std::map<std::string, std::size_t> domain_index;

  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));

    try {
      if (key == "data.archive") {
        config.archive_dir = value;
      } else if (key == "data.cohort") {
        if (value != "full8" && value != "desk4" && value != "none") {
          throw ConfigError("data.cohort must be full8, desk4 or none");
        }
        config.cohort = value;
      } else if (key == "data.seed") {
        config.data_seed = std::stoull(value);
      } else if (key.rfind("domain.", 0) == 0) {
        const auto rest = key.substr(7);
        const auto dot = rest.find('.');
        if (dot == std::string::npos) {
          throw ConfigError("expected domain.<name>.<field>");
        }
        const std::string name = rest.substr(0, dot);
        const std::string field = rest.substr(dot + 1);
        validate_domain_name(name, line_no);
        if (domain_index.find(name) == domain_index.end()) {
          domain_index[name] = config.domains.size();
          DomainSpec spec;
          spec.name = name;
          config.domains.push_back(spec);
        }
        DomainSpec& spec = config.domains[domain_index[name]];
        if (field == "n_subjects") {
          spec.n_subjects = std::stoi(value);
        } else if (field == "polarity") {
          spec.polarity = polarity_from_string(value);
        } else if (field == "lesion_count") {
          std::tie(spec.lesion_count_min, spec.lesion_count_max) = parse_int_range(value);
        } else if (field == "lesion_radius") {
          std::tie(spec.lesion_radius_min, spec.lesion_radius_max) = parse_double_range(value);
        } else if (field == "noise_sigma") {
          spec.noise_sigma = parse_double(value);
        } else if (field == "bias_field_strength") {
          spec.bias_field_strength = parse_double(value);
        } else if (field == "volume_shape") {
          spec.volume_shape = parse_shape_value(value);
        } else if (field == "seed") {
          spec.seed = std::stoull(value);
        } else {
          throw ConfigError("unknown domain field '" + field + "'");
        }
      } else if (key == "model.levels") {
        config.model.levels = std::stoi(value);
      } else if (key == "model.base_features") {
        config.model.base_features = std::stoi(value);
      } else if (key == "model.spatial_rank") {
        config.model.spatial_rank = std::stoi(value);
      } else if (key == "model.in_channels") {
        config.model.in_channels = std::stoi(value);
      } else if (key == "model.residual") {
        config.model.residual = parse_bool(value, line_no);
      } else if (key == "train.epochs") {
        config.train.epochs = std::stoi(value);
      } else if (key == "train.batch_size") {
        config.train.batch_size = std::stoi(value);
      } else if (key == "train.lr") {
        config.train.lr = parse_double(value);
      } else if (key == "train.lr_step") {
        config.train.lr_step = std::stoi(value);
      } else if (key == "train.lr_gamma") {
        config.train.lr_gamma = parse_double(value);
      } else if (key == "train.weight_decay") {
        config.train.weight_decay = parse_double(value);
      } else if (key == "train.buffer_cap") {
        config.train.buffer_cap = std::stoi(value);
      } else if (key == "train.mixing") {
        config.train.mixing = mixing_from_string(value);
      } else if (key == "train.patches_per_image") {
        config.train.patches_per_image = std::stoi(value);
      } else if (key == "train.fg_probability") {
        config.train.fg_probability = parse_double(value);
      } else if (key == "train.patch_shape") {
        config.train.patch_shape = parse_shape_value(value);
      } else if (key == "train.eval_threshold") {
        config.train.eval_threshold = parse_double(value);
      } else if (key == "train.dice_epsilon") {
        config.train.dice_epsilon = parse_double(value);
      } else if (key == "train.encoder_only_transfer") {
        config.train.encoder_only_transfer = parse_bool(value, line_no);
      } else if (key == "experiment.regimes") {
        config.regimes.clear();
        std::stringstream rs(value);
        std::string part;
        while (std::getline(rs, part, ',')) {
          config.regimes.push_back(regime_from_string(trim(part)));
        }
        if (config.regimes.empty()) throw ConfigError("empty regime list");
      } else if (key == "experiment.seeds") {
        config.seeds = parse_seed_list(value);
      } else if (key == "experiment.order") {
        config.order = order_mode_from_string(value);
      } else if (key == "experiment.output") {
        config.output_dir = value;
      } else {
        throw ConfigError("unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const UsageError& err) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + err.what());
    } catch (const std::exception& err) {
      throw ConfigError("line " + std::to_string(line_no) + ": bad value for '" +
                        key + "': " + err.what());
    }
  }
  if (config.regimes.empty()) throw ConfigError("at least one regime is required");
  if (config.seeds.empty()) throw ConfigError("at least one seed is required");
  return config;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  return parse_config(read_file(path));
}

std::string serialize_config(const ExperimentConfig& config) {
  std::ostringstream os;
  os << "data.archive = " << config.archive_dir << "\n";
  os << "data.cohort = " << config.cohort << "\n";
  os << "data.seed = " << config.data_seed << "\n";
  for (const auto& spec : config.domains) {
    const std::string prefix = "domain." + spec.name + ".";
    os << prefix << "n_subjects = " << spec.n_subjects << "\n";
    os << prefix << "polarity = " << to_string(spec.polarity) << "\n";
    os << prefix << "lesion_count = " << spec.lesion_count_min << ".."
       << spec.lesion_count_max << "\n";
    os << prefix << "lesion_radius = " << format_double(spec.lesion_radius_min)
       << ".." << format_double(spec.lesion_radius_max) << "\n";
    os << prefix << "noise_sigma = " << format_double(spec.noise_sigma) << "\n";
    os << prefix << "bias_field_strength = "
       << format_double(spec.bias_field_strength) << "\n";
    os << prefix << "volume_shape = " << shape_value(spec.volume_shape) << "\n";
    os << prefix << "seed = " << spec.seed << "\n";
  }
  os << "model.levels = " << config.model.levels << "\n";
  os << "model.base_features = " << config.model.base_features << "\n";
  os << "model.spatial_rank = " << config.model.spatial_rank << "\n";
  os << "model.in_channels = " << config.model.in_channels << "\n";
  os << "model.residual = " << (config.model.residual ? "true" : "false") << "\n";
  os << "train.epochs = " << config.train.epochs << "\n";
  os << "train.batch_size = " << config.train.batch_size << "\n";
  os << "train.lr = " << format_double(config.train.lr) << "\n";
  os << "train.lr_step = " << config.train.lr_step << "\n";
  os << "train.lr_gamma = " << format_double(config.train.lr_gamma) << "\n";
  os << "train.weight_decay = " << format_double(config.train.weight_decay) << "\n";
  os << "train.buffer_cap = " << config.train.buffer_cap << "\n";
  os << "train.mixing = " << to_string(config.train.mixing) << "\n";
  os << "train.patches_per_image = " << config.train.patches_per_image << "\n";
  os << "train.fg_probability = " << format_double(config.train.fg_probability) << "\n";
  os << "train.patch_shape = " << shape_value(config.train.patch_shape) << "\n";
  os << "train.eval_threshold = " << format_double(config.train.eval_threshold) << "\n";
  os << "train.dice_epsilon = " << format_double(config.train.dice_epsilon) << "\n";
  os << "train.encoder_only_transfer = "
     << (config.train.encoder_only_transfer ? "true" : "false") << "\n";
  os << "experiment.regimes = ";
  for (std::size_t i = 0; i < config.regimes.size(); ++i) {
    if (i) os << ',';
    os << to_string(config.regimes[i]);
  }
  os << "\n";
  os << "experiment.seeds = " << seed_list_value(config.seeds) << "\n";
  os << "experiment.order = " << to_string(config.order) << "\n";
  os << "experiment.output = " << config.output_dir << "\n";
  return os.str();
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  return fnv1a64(serialize_config(config));
}

std::vector<DomainSpec> resolve_domain_specs(const ExperimentConfig& config) {
  if (!config.domains.empty()) {
    for (const auto& spec : config.domains) validate_domain_spec(spec);
    return config.domains;
  }
  if (config.cohort == "full8") return default_cohort(config.data_seed);
  if (config.cohort == "desk4") return desk_cohort(config.data_seed);
  throw ConfigError("no domains configured: set domain.* entries or data.cohort");
}

std::vector<std::string> ordered_domain_names(
    const std::vector<DomainSpec>& specs, OrderMode mode, std::uint64_t seed) {
  std::vector<std::string> names;
  names.reserve(specs.size());
  for (const auto& spec : specs) names.push_back(spec.name);
  if (mode == OrderMode::Shuffled) {
    Rng rng(mix_seed(seed, kOrderTag));
    rng.shuffle(names);
    return names;
  }
  std::map<std::string, int> subjects;
  for (const auto& spec : specs) subjects[spec.name] = spec.n_subjects;
  std::stable_sort(names.begin(), names.end(),
                   [&subjects](const std::string& a, const std::string& b) {
                     return subjects[a] > subjects[b];
                   });
  return names;
}

std::vector<Domain> load_or_generate_domains(const ExperimentConfig& config) {
  const auto specs = resolve_domain_specs(config);
  std::vector<Domain> domains;
  domains.reserve(specs.size());
  const bool have_archive =
      !config.archive_dir.empty() && std::filesystem::exists(config.archive_dir);
  for (const auto& spec : specs) {
    if (have_archive) {
      Domain domain = read_domain_archive(config.archive_dir, spec.name);
      if (spec_hash(domain.spec) != spec_hash(spec)) {
        throw ConfigError("archive for '" + spec.name +
                          "' was generated from a different spec; rerun generate");
      }
      domains.push_back(std::move(domain));
    } else {
      domains.push_back(generate_domain(spec));
    }
  }
  return domains;
}

int cmd_generate(const ExperimentConfig& config) {
  if (config.archive_dir.empty()) {
    throw ConfigError("generate requires data.archive to be set");
  }
  const auto specs = resolve_domain_specs(config);
  int written = 0;
  for (const auto& spec : specs) {
    if (domain_archive_up_to_date(config.archive_dir, spec)) continue;
    written += write_domain_archive(config.archive_dir, generate_domain(spec)) ? 1 : 0;
  }
  return written;
}

// ---------------------------------------------------------------------------
// Cells

std::filesystem::path cell_dir(const ExperimentConfig& config, CellKey key) {
  return std::filesystem::path(config.output_dir) / "cells" /
         to_string(key.regime) / ("seed" + std::to_string(key.seed));
}

std::string format_stage_line(const StageRecord& record) {
  std::ostringstream os;
  os << "stage=" << record.stage + 1 << " domain=" << record.domain
     << " epochs=" << record.epochs
     << " final_train_loss=" << format_double(record.final_train_loss) << " r=";
  for (std::size_t i = 0; i < record.r_row.size(); ++i) {
    if (i) os << ',';
    os << format_double(record.r_row[i]);
  }
  return os.str();
}

StageRecord parse_stage_line(const std::string& line) {
  StageRecord record;
  std::stringstream ss(line);
  std::string token;
  bool have_stage = false, have_domain = false, have_r = false;
  while (ss >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw IoError("bad stage log token '" + token + "'");
    const std::string key = token.substr(0, eq);
    const std::string value = token.substr(eq + 1);
    if (key == "stage") {
      record.stage = std::stoi(value) - 1;
      have_stage = true;
    } else if (key == "domain") {
      record.domain = value;
      have_domain = true;
    } else if (key == "epochs") {
      record.epochs = std::stoi(value);
    } else if (key == "final_train_loss") {
      record.final_train_loss = parse_double(value);
    } else if (key == "r") {
      std::stringstream rs(value);
      std::string part;
      while (std::getline(rs, part, ',')) record.r_row.push_back(parse_double(part));
      have_r = true;
    } else {
      throw IoError("unknown stage log key '" + key + "'");
    }
  }
  if (!have_stage || !have_domain || !have_r) {
    throw IoError("incomplete stage log line: " + line);
  }
  return record;
}

std::string format_audit_line(const AccessRecord& record) {
  std::ostringstream os;
  os << "stage=" << record.stage + 1 << " domain=" << record.domain
     << " split=" << record.split << " purpose=" << record.purpose
     << " count=" << record.count;
  return os.str();
}

std::string format_result_csv(const ExperimentConfig& config, CellKey key,
                              const ResultMatrix& matrix) {
  std::ostringstream os;
  os << "# config_hash = " << hash_hex(config_hash(config)) << "\n";
  os << "# regime = " << to_string(key.regime) << "\n";
  os << "# seed = " << key.seed << "\n";
  os << "# order = ";
  for (std::size_t i = 0; i < matrix.domain_order.size(); ++i) {
    if (i) os << ',';
    os << matrix.domain_order[i];
  }
  os << "\n";
  os << "stage";
  for (const auto& name : matrix.domain_order) os << ',' << name;
  os << "\n";
  for (std::size_t s = 0; s < matrix.r.size(); ++s) {
    os << s + 1;
    for (const double v : matrix.r[s]) os << ',' << format_double(v);
    os << "\n";
  }
  return os.str();
}

CellResult parse_result_csv(const std::string& text) {
  CellResult result;
  std::stringstream ss(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      const std::string key = trim(line.substr(1, eq - 1));
      const std::string value = line.substr(eq + 3);
      if (key == "config_hash") {
        result.config_hash_hex = value;
      } else if (key == "regime") {
        result.key.regime = regime_from_string(value);
      } else if (key == "seed") {
        result.key.seed = std::stoull(value);
      } else if (key == "order") {
        std::stringstream os(value);
        std::string part;
        while (std::getline(os, part, ',')) result.order.push_back(part);
      }
      continue;
    }
    if (!header_seen) {
      header_seen = true;  // column header row
      continue;
    }
    std::stringstream rs(line);
    std::string part;
    std::vector<double> row;
    bool first = true;
    while (std::getline(rs, part, ',')) {
      if (first) {
        first = false;  // stage column
        continue;
      }
      row.push_back(parse_double(part));
    }
    result.matrix.r.push_back(std::move(row));
  }
  result.matrix.domain_order = result.order;
  if (result.config_hash_hex.empty() || result.order.empty()) {
    throw IoError("malformed result csv: missing headers");
  }
  if (result.matrix.r.size() != result.order.size()) {
    throw IoError("malformed result csv: expected " +
                  std::to_string(result.order.size()) + " rows");
  }
  for (const auto& row : result.matrix.r) {
    if (row.size() != result.order.size()) {
      throw IoError("malformed result csv: ragged rows");
    }
  }
  return result;
}

namespace {

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot append to " + path.string());
  os << line << "\n";
  os.flush();
  if (!os) throw IoError("append failed: " + path.string());
}

}  // namespace

CellOutcome run_cell(const ExperimentConfig& config,
                     const std::vector<Domain>& domains, CellKey key,
                     const CellHooks& hooks) {
  CellOutcome outcome;
  outcome.key = key;

  const auto dir = cell_dir(config, key);
  const auto result_path = dir / "R.csv";
  if (std::filesystem::exists(result_path)) {
    outcome.skipped = true;
    return outcome;
  }
  std::filesystem::create_directories(dir);

  const auto specs = resolve_domain_specs(config);
  const auto order = ordered_domain_names(specs, config.order, key.seed);
  std::map<std::string, const Domain*> by_name;
  for (const auto& domain : domains) by_name[domain.spec.name] = &domain;
  std::vector<Domain> sequence;
  sequence.reserve(order.size());
  for (const auto& name : order) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("domain '" + name + "' not loaded");
    sequence.push_back(*it->second);
  }

  // Resume from the stage log when it is consistent with a checkpoint.
  const auto log_path = dir / "stages.log";
  const auto audit_path = dir / "audit.log";
  ResumeState resume;
  bool resuming = false;
  if (std::filesystem::exists(log_path)) {
    std::stringstream ss(read_file(log_path));
    std::string line;
    std::vector<StageRecord> records;
    while (std::getline(ss, line)) {
      if (trim(line).empty()) continue;
      records.push_back(parse_stage_line(line));
    }
    const bool sequential =
        key.regime == Regime::FineTune || key.regime == Regime::Replay;
    if (!records.empty()) {
      const auto ckpt =
          dir / ("stage" + std::to_string(records.back().stage + 1) + ".ckpt");
      if (!sequential) {
        resume.records = std::move(records);
        resuming = true;
      } else if (std::filesystem::exists(ckpt)) {
        resume.model = Model::load(ckpt);
        resume.records = std::move(records);
        resuming = true;
      }
    }
  }
  if (!resuming) {
    // stale or absent logs: start the cell clean
    std::filesystem::remove(log_path);
    std::filesystem::remove(audit_path);
  } else if (!resume.records.empty()) {
    // drop audit lines of the stage that was interrupted mid-flight, keeping
    // the append-only log aligned with the completed stages
    const int completed = static_cast<int>(resume.records.size());
    if (std::filesystem::exists(audit_path)) {
      std::stringstream ss(read_file(audit_path));
      std::ostringstream kept;
      std::string line;
      const std::string cutoff = "stage=" + std::to_string(completed + 1) + " ";
      while (std::getline(ss, line)) {
        if (line.rfind(cutoff, 0) == 0) break;
        kept << line << "\n";
      }
      atomic_write_file(audit_path, kept.str());
    }
  }
  outcome.resumed_stages = static_cast<int>(resume.records.size());

  RegimeConfig regime_config = config.train;
  regime_config.regime = key.regime;

  RunHooks run_hooks;
  run_hooks.on_stage_end = [&](const StageRecord& record, const Model& model) {
    model.save(dir / ("stage" + std::to_string(record.stage + 1) + ".ckpt"));
    append_line(log_path, format_stage_line(record));
    if (hooks.after_stage) hooks.after_stage(key, record);
  };
  run_hooks.on_access = [&](const AccessRecord& record) {
    append_line(audit_path, format_audit_line(record));
  };

  const RunResult result =
      run_regime(sequence, config.model, regime_config, key.seed, run_hooks,
                 resuming ? &resume : nullptr);
  outcome.trained_stages = result.trained_stages;

  atomic_write_file(result_path, format_result_csv(config, key, result.matrix));
  return outcome;
}

std::vector<CellOutcome> run_cells(const ExperimentConfig& config,
                                   const std::vector<Domain>& domains,
                                   int workers, const CellHooks& hooks) {
  std::vector<CellKey> keys;
  for (const auto regime : config.regimes) {
    for (const auto seed : config.seeds) {
      keys.push_back(CellKey{regime, seed});
    }
  }
  std::vector<CellOutcome> outcomes(keys.size());
  std::vector<std::function<void()>> jobs;
  jobs.reserve(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    jobs.push_back([&, i]() {
      outcomes[i] = run_cell(config, domains, keys[i], hooks);
    });
  }
  parallel_run(jobs, workers);
  return outcomes;
}

void write_run_manifest(const ExperimentConfig& config) {
  const auto path = std::filesystem::path(config.output_dir) / "manifest.txt";
  std::ostringstream os;
  os << "config_hash = " << hash_hex(config_hash(config)) << "\n";
  os << "format = 1\n";
  os << serialize_config(config);
  const std::string manifest = os.str();
  if (std::filesystem::exists(path)) {
    const std::string existing = read_file(path);
    if (existing != manifest) {
      throw ConfigError("output directory '" + config.output_dir +
                        "' holds artifacts for a different config; "
                        "choose a fresh output directory");
    }
    return;
  }
  atomic_write_file(path, manifest);
}

int env_worker_count() {
  const char* env = std::getenv("CONTSEG_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    throw ConfigError("CONTSEG_WORKERS must be a positive integer, got '" +
                      std::string(env) + "'");
  }
  return static_cast<int>(v);
}

void parallel_run(const std::vector<std::function<void()>>& jobs, int workers) {
  if (workers < 1) throw ContractError("parallel_run: workers must be >= 1");
  if (jobs.empty()) return;
  if (workers == 1 || jobs.size() == 1) {
    for (const auto& job : jobs) job();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  const int n_threads = std::min<int>(workers, static_cast<int>(jobs.size()));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) {
    threads.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& thread : threads) thread.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace contseg
