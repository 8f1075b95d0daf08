// Acceptance suite: one pass/fail line per criterion.
//
//   1. gradient checks for every primitive and the full model+loss graph
//   2. metric oracles (dice loss / dice score / BWT worked examples)
//   3. buffer policy on {6, 40}-sized train sets with cap 20
//   4. replay degeneracy: unlimited cap + merged mixing == pooled training
//   5. trend reproduction on the 4-center desk cohort over 5 seeds
//   6. protocol invariants (final-domain BWT, audit, byte determinism)
//   7. learning-rate schedule values
//
// Exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "contseg/archive.hpp"
#include "contseg/continual.hpp"
#include "contseg/experiment.hpp"
#include "contseg/model.hpp"
#include "contseg/objectives.hpp"
#include "contseg/report.hpp"
#include "contseg/rng.hpp"
#include "contseg/serialize.hpp"

using namespace contseg;

namespace {

struct Criterion {
  int id;
  std::string title;
  bool pass = true;
  std::string detail;
};

std::vector<Criterion> g_results;

void record(int id, const std::string& title, bool pass, const std::string& detail) {
  g_results.push_back({id, title, pass, detail});
  std::printf("[%s] criterion %d: %s  (%s)\n", pass ? "PASS" : "FAIL", id,
              title.c_str(), detail.c_str());
  std::fflush(stdout);
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad, double lo,
                     double hi) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.values_mut()) v = rng.uniform(lo, hi);
  return t;
}

// --------------------------------------------------------------------------
// 1. Gradient suite

void criterion_gradients() {
  const auto start = std::chrono::steady_clock::now();
  constexpr double kTol = 1e-4;
  bool pass = true;
  std::string worst = "none";
  double worst_err = 0.0;
  const auto note = [&](const std::string& name, const GradCheckReport& report) {
    for (const auto& entry : report.entries) {
      if (entry.max_rel_error > worst_err) {
        worst_err = entry.max_rel_error;
        worst = name + "/" + entry.name;
      }
      pass = pass && entry.pass;
    }
  };

  Rng rng(101);
  {
    Tensor x = random_tensor({2, 1, 6, 6}, rng, false, 0.0, 1.0);
    Tensor k = random_tensor({3, 1, 3, 3}, rng, true, -0.5, 0.5);
    Tensor b = random_tensor({3}, rng, true, -0.1, 0.1);
    note("conv2d", check_gradients([&](Graph& g) { return g.sum(g.mul(g.conv(x, k, b), g.conv(x, k, b))); },
                                   {{"kernel", k}, {"bias", b}}, kTol));
  }
  {
    Tensor x = random_tensor({1, 2, 4, 4, 4}, rng, false, 0.0, 1.0);
    Tensor k = random_tensor({2, 2, 3, 3, 3}, rng, true, -0.5, 0.5);
    Tensor b = random_tensor({2}, rng, true, -0.1, 0.1);
    note("conv3d", check_gradients([&](Graph& g) { return g.sum(g.conv(x, k, b)); },
                                   {{"kernel", k}, {"bias", b}}, kTol));
  }
  {
    Tensor x = random_tensor({3, 11}, rng, true, -1.0, 1.0);
    note("relu", check_gradients([&](Graph& g) { return g.sum(g.mul(g.relu(x), g.relu(x))); },
                                 {{"x", x}}, kTol));
  }
  {
    Tensor x = random_tensor({2, 13}, rng, true, 0.1, 2.0);
    note("normalized_relu",
         check_gradients([&](Graph& g) { return g.sum(g.mul(g.normalized_relu(x), x)); },
                         {{"x", x}}, kTol));
  }
  {
    Tensor a = random_tensor({4, 5}, rng, true, -1.0, 1.0);
    Tensor b = random_tensor({4, 5}, rng, true, -1.0, 1.0);
    note("add_mul", check_gradients([&](Graph& g) { return g.sum(g.mul(g.add(a, b), a)); },
                                    {{"a", a}, {"b", b}}, kTol));
  }
  {
    Tensor n = random_tensor({7}, rng, true, 0.5, 1.5);
    Tensor d = random_tensor({7}, rng, true, 1.0, 2.0);
    note("div", check_gradients([&](Graph& g) { return g.sum(g.div(n, d)); },
                                {{"num", n}, {"den", d}}, kTol));
  }
  {
    Tensor a = random_tensor({1, 2, 4, 4}, rng, true, -1.0, 1.0);
    Tensor b = random_tensor({1, 2, 4, 4}, rng, true, -1.0, 1.0);
    note("concat", check_gradients(
                       [&](Graph& g) {
                         Tensor c = g.concat_channels(a, b);
                         return g.sum(g.mul(c, c));
                       },
                       {{"a", a}, {"b", b}}, kTol));
  }
  {
    Tensor x = random_tensor({1, 2, 6, 6}, rng, true, -1.0, 1.0);
    note("max_pool", check_gradients([&](Graph& g) { return g.sum(g.mul(g.max_pool(x), g.max_pool(x))); },
                                     {{"x", x}}, kTol));
  }
  {
    Tensor x = random_tensor({1, 2, 3, 3}, rng, true, -1.0, 1.0);
    note("upsample", check_gradients(
                         [&](Graph& g) {
                           Tensor u = g.upsample_nearest(x);
                           return g.sum(g.mul(u, u));
                         },
                         {{"x", x}}, kTol));
  }
  {
    Tensor x = random_tensor({9}, rng, true, -1.0, 1.0);
    note("affine_sum", check_gradients([&](Graph& g) { return g.sum(g.affine(x, 1.7, 0.3)); },
                                       {{"x", x}}, kTol));
  }

  // Full mini-UNet + Dice loss graph at the desk configuration.
  {
    ModelConfig config;  // levels 2, base 8, 2D
    Model model(config, 2024);
    Tensor x = random_tensor({1, 1, 16, 16}, rng, false, 0.0, 1.0);
    Tensor y = Tensor::zeros({1, 1, 16, 16});
    for (int i = 4; i < 11; ++i) {
      for (int j = 4; j < 11; ++j) {
        y.values_mut()[i * 16 + j] = 1.0;
        x.values_mut()[i * 16 + j] += 0.7;
      }
    }
    const auto forward = [&](Graph& g) {
      return dice_loss(g, model.forward(g, x), y, 1e-5);
    };
    note("unet_dice", check_gradients(forward, model.parameters(), kTol, 20,
                                      1e-5, 555));
  }

  const double secs = elapsed_s(start);
  pass = pass && secs < 120.0;
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "worst rel err %.3g at %s, tolerance 1e-4, %.1fs < 120s",
                worst_err, worst.c_str(), secs);
  record(1, "gradient suite", pass, detail);
}

// --------------------------------------------------------------------------
// 2. Metric oracles

void criterion_metric_oracles() {
  bool pass = true;
  std::string detail = "all worked examples reproduced";
  constexpr double kEps = 1e-5;

  {  // dice loss: equal masks
    Tensor m = Tensor::from_values({6}, {0.0, 1.0, 0.8, 0.0, 0.3, 1.0});
    Graph g;
    pass = pass && std::fabs(dice_loss(g, m, m, kEps).item()) <= 1e-6;
  }
  {  // dice loss: half-confidence example, 1/3 modulo epsilon
    Tensor target = Tensor::from_values({8}, {1, 0, 1, 0, 1, 0, 1, 0});
    Tensor pred = Tensor::full({8}, 0.5);
    Graph g;
    const double loss = dice_loss(g, pred, target, kEps).item();
    const double exact = 1.0 - (4.0 + kEps) / (6.0 + kEps);
    pass = pass && std::fabs(loss - exact) <= 1e-9;
    pass = pass && std::fabs(loss - 1.0 / 3.0) <= 2e-6;
  }
  {  // dice loss: disjoint masks
    Tensor target = Tensor::from_values({8}, {1, 1, 1, 1, 0, 0, 0, 0});
    Tensor pred = Tensor::from_values({8}, {0, 0, 0, 0, 1, 1, 1, 1});
    Graph g;
    const double loss = dice_loss(g, pred, target, kEps).item();
    pass = pass && std::fabs(loss - (1.0 - kEps / (8.0 + kEps))) <= 1e-9;
  }
  {  // dice score: 2*4/(4+8)
    std::vector<double> pv(16, 0.0), tv(16, 0.0);
    for (int i = 0; i < 4; ++i) pv[static_cast<std::size_t>(i)] = 1.0;
    for (int i = 0; i < 8; ++i) tv[static_cast<std::size_t>(i)] = 1.0;
    const double score = dice_score(Tensor::from_values({16}, pv),
                                    Tensor::from_values({16}, tv), 0.5);
    pass = pass && std::fabs(score - 2.0 / 3.0) <= 1e-6;
    Tensor m = Tensor::from_values({4}, {0.9, 0.2, 0.7, 0.0});
    pass = pass && dice_score(m, m, 0.5) == 1.0;
    Tensor empty = Tensor::full({9}, 0.1);
    pass = pass && dice_score(empty, empty, 0.5) == 1.0;
  }
  {  // BWT worked example (K = 3)
    ResultMatrix matrix;
    matrix.domain_order = {"a", "b", "c"};
    matrix.r = {{0.8, 0.0, 0.0}, {0.0, 0.7, 0.0}, {0.7, 0.75, 0.6}};
    const BwtResult bwt = compute_bwt(matrix);
    pass = pass && bwt.per_domain.size() == 2;
    pass = pass && std::fabs(bwt.per_domain[0] + 0.1) <= 1e-12;
    pass = pass && std::fabs(bwt.per_domain[1] - 0.05) <= 1e-12;
    pass = pass && std::fabs(bwt.average + 0.025) <= 1e-12;
  }
  {  // BWT vanishes when nothing changes
    ResultMatrix matrix;
    matrix.domain_order = {"a", "b", "c", "d"};
    matrix.r.assign(4, {0.4, 0.5, 0.6, 0.7});
    const BwtResult bwt = compute_bwt(matrix);
    pass = pass && bwt.average == 0.0;
    for (const double v : bwt.per_domain) pass = pass && v == 0.0;
  }
  if (!pass) detail = "a worked example diverged";
  record(2, "metric oracles", pass, detail);
}

// --------------------------------------------------------------------------
// 3. Buffer policy

void criterion_buffer_policy() {
  DomainSpec small;
  small.name = "small";
  small.n_subjects = 8;  // 80/20 -> 6 train
  small.volume_shape = {16, 16};
  small.lesion_radius_min = 2.0;
  small.lesion_radius_max = 3.0;
  small.seed = 61;
  DomainSpec large = small;
  large.name = "large";
  large.n_subjects = 50;  // 80/20 -> 40 train
  large.seed = 62;

  const Domain d_small = generate_domain(small);
  const Domain d_large = generate_domain(large);
  bool pass = d_small.train.size() == 6 && d_large.train.size() == 40;

  MemoryBuffer buffer(20);
  buffer.update(d_small, 1);
  const std::size_t after_small = buffer.size();
  buffer.update(d_large, 2);
  const std::size_t after_large = buffer.size();
  pass = pass && after_small == 6 && after_large == 26;
  pass = pass && buffer.count_for("small") == 6 && buffer.count_for("large") == 20;

  char detail[120];
  std::snprintf(detail, sizeof(detail),
                "train sizes {%zu,%zu}, buffer 6 -> %zu then %zu (cap 20)",
                d_small.train.size(), d_large.train.size(), after_small,
                after_large);
  record(3, "buffer policy", pass, detail);
}

// --------------------------------------------------------------------------
// 4. Degeneracy oracle

void criterion_degeneracy() {
  const auto specs = desk_cohort(7);
  std::vector<Domain> domains;
  for (const auto& spec : specs) domains.push_back(generate_domain(spec));

  MemoryBuffer buffer(MemoryBuffer::kUnlimited);
  for (std::size_t s = 0; s + 1 < domains.size(); ++s) {
    buffer.update(domains[s], 100 + s);
  }
  const auto stage_k =
      stage_train_set(Regime::Replay, domains.back(), buffer);

  std::multiset<std::pair<std::string, int>> replay_set, pooled_set;
  for (const auto& [name, sample] : stage_k) replay_set.insert({name, sample->subject_id});
  for (const auto& domain : domains) {
    for (const auto& sample : domain.train) {
      pooled_set.insert({domain.spec.name, sample.subject_id});
    }
  }
  const bool pass = replay_set == pooled_set;
  char detail[120];
  std::snprintf(detail, sizeof(detail),
                "stage-%zu multiset (%zu pairs) vs pooled multiset (%zu pairs)",
                domains.size(), replay_set.size(), pooled_set.size());
  record(4, "replay degeneracy with unlimited cap", pass, detail);
}

// --------------------------------------------------------------------------
// 5. Trend reproduction

void criterion_trend() {
  const auto start = std::chrono::steady_clock::now();
  const auto specs = desk_cohort(0);
  std::vector<Domain> domains;
  for (const auto& spec : specs) domains.push_back(generate_domain(spec));
  std::map<std::string, const Domain*> by_name;
  for (const auto& domain : domains) by_name[domain.spec.name] = &domain;

  const ModelConfig model_config;  // desk defaults
  const int n_seeds = 5;

  std::vector<double> ft_dice(n_seeds), rp_dice(n_seeds);
  std::vector<double> ft_bwt(n_seeds), rp_bwt(n_seeds);
  std::vector<std::function<void()>> jobs;
  for (int i = 0; i < n_seeds; ++i) {
    jobs.push_back([&, i]() {
      const auto order =
          ordered_domain_names(specs, OrderMode::Shuffled, static_cast<std::uint64_t>(i));
      std::vector<Domain> sequence;
      for (const auto& name : order) sequence.push_back(*by_name.at(name));
      for (const auto regime : {Regime::FineTune, Regime::Replay}) {
        RegimeConfig config;
        config.regime = regime;
        const RunResult result = run_regime(sequence, model_config, config,
                                            static_cast<std::uint64_t>(i));
        double final_mean = 0.0;
        for (const double v : result.matrix.r.back()) {
          final_mean += v / static_cast<double>(result.matrix.k());
        }
        const double bwt = compute_bwt(result.matrix).average;
        if (regime == Regime::FineTune) {
          ft_dice[static_cast<std::size_t>(i)] = final_mean;
          ft_bwt[static_cast<std::size_t>(i)] = bwt;
        } else {
          rp_dice[static_cast<std::size_t>(i)] = final_mean;
          rp_bwt[static_cast<std::size_t>(i)] = bwt;
        }
      }
    });
  }
  const int workers = std::min<int>(
      2, std::max<int>(1, static_cast<int>(std::thread::hardware_concurrency())));
  parallel_run(jobs, workers);

  const auto mean = [](const std::vector<double>& xs) {
    double s = 0.0;
    for (const double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  };
  const double ft_d = mean(ft_dice), rp_d = mean(rp_dice);
  const double ft_b = mean(ft_bwt), rp_b = mean(rp_bwt);
  const double secs = elapsed_s(start);

  const bool dice_gap = rp_d >= ft_d + 0.02;
  const bool bwt_order = rp_b > ft_b;
  const bool ft_forgets = ft_b < 0.0;
  const bool rp_retains = rp_b > -0.02;
  const bool in_time = secs <= 3600.0;
  const bool pass = dice_gap && bwt_order && ft_forgets && rp_retains && in_time;

  char detail[240];
  std::snprintf(detail, sizeof(detail),
                "final-row dice ft=%.3f rp=%.3f (gap %+.3f >= 0.02: %s); "
                "avg BWT ft=%+.3f rp=%+.3f (rp>ft: %s, ft<0: %s, rp>-0.02: %s); "
                "%.0fs <= 3600s",
                ft_d, rp_d, rp_d - ft_d, dice_gap ? "yes" : "NO", ft_b, rp_b,
                bwt_order ? "yes" : "NO", ft_forgets ? "yes" : "NO",
                rp_retains ? "yes" : "NO", secs);
  record(5, "trend reproduction over 5 seeds", pass, detail);
}

// --------------------------------------------------------------------------
// 6. Protocol invariants

void criterion_protocol() {
  bool pass = true;
  std::string note;

  // small end-to-end grid, run twice into separate directories
  const auto base = std::filesystem::temp_directory_path() / "contseg_acceptance";
  std::filesystem::remove_all(base);
  ExperimentConfig config;
  config.cohort = "none";
  for (int i = 0; i < 3; ++i) {
    DomainSpec spec;
    spec.name = "p" + std::to_string(i);
    spec.n_subjects = 4 + i;
    spec.polarity = i == 1 ? Polarity::LesionDark : Polarity::LesionBright;
    spec.volume_shape = {16, 16};
    spec.lesion_radius_min = 2.0;
    spec.lesion_radius_max = 3.0;
    spec.seed = 70 + static_cast<std::uint64_t>(i);
    config.domains.push_back(spec);
  }
  config.model.levels = 2;
  config.model.base_features = 2;
  config.train.epochs = 2;
  config.train.patch_shape = {8, 8};
  config.regimes = {Regime::FineTune, Regime::Replay};
  config.seeds = {0};
  config.order = OrderMode::FixedDescending;
  config.output_dir = (base / "out").string();

  const auto domains = load_or_generate_domains(config);
  write_run_manifest(config);
  run_cells(config, domains, 2);
  write_report(config);

  // (a) final-domain BWT is exactly zero in the fixed-order table
  const auto report_dir = std::filesystem::path(config.output_dir) / "report";
  const BwtTable bwt = parse_bwt_csv(read_file(report_dir / "bwt_table.csv"));
  if (bwt.rows.size() < 2) {
    pass = false;
    note += "missing BWT rows; ";
  } else {
    const std::size_t last_center = bwt.rows.size() - 2;  // before "average"
    for (const double v : bwt.values[last_center]) {
      if (v != 0.0) {
        pass = false;
        note += "final-domain BWT not zero; ";
      }
    }
  }

  // (b) audit logs are zero-shot clean (re-run in memory to get typed audit)
  for (const auto regime : {Regime::FineTune, Regime::Replay}) {
    const auto order = ordered_domain_names(config.domains, config.order, 0);
    std::map<std::string, const Domain*> by_name;
    for (const auto& domain : domains) by_name[domain.spec.name] = &domain;
    std::vector<Domain> sequence;
    for (const auto& name : order) sequence.push_back(*by_name.at(name));
    RegimeConfig regime_config = config.train;
    regime_config.regime = regime;
    const RunResult result = run_regime(sequence, config.model, regime_config, 0);
    std::string why;
    if (!audit_is_zero_shot_clean(regime, result.audit, order, &why)) {
      pass = false;
      note += "audit violation (" + why + "); ";
    }
    // the persisted audit must match the in-memory one line for line
    std::ostringstream expected;
    for (const auto& access : result.audit) {
      expected << format_audit_line(access) << "\n";
    }
    const auto audit_path = cell_dir(config, {regime, 0}) / "audit.log";
    if (read_file(audit_path) != expected.str()) {
      pass = false;
      note += "persisted audit differs; ";
    }
  }

  // (c) identical (config, seed) -> byte-identical R matrices and reports
  ExperimentConfig rerun = config;
  rerun.output_dir = (base / "out2").string();
  // keep the hash identical: the manifest hash covers the output dir, so the
  // second run must reuse the first directory name inside its artifacts.
  // Instead compare matrices cell by cell from a fresh in-memory run.
  for (const auto regime : {Regime::FineTune, Regime::Replay}) {
    const auto r_path = cell_dir(config, {regime, 0}) / "R.csv";
    const std::string first = read_file(r_path);
    std::filesystem::remove(r_path);
    std::filesystem::remove(cell_dir(config, {regime, 0}) / "stages.log");
    run_cell(config, domains, {regime, 0});
    if (read_file(r_path) != first) {
      pass = false;
      note += "R.csv bytes changed across identical runs; ";
    }
  }
  const std::string curves_first = read_file(report_dir / "curves.csv");
  write_report(config);
  if (read_file(report_dir / "curves.csv") != curves_first) {
    pass = false;
    note += "report bytes changed; ";
  }

  std::filesystem::remove_all(base);
  if (note.empty()) {
    note = "final-domain BWT == 0, audits clean, artifacts byte-stable";
  }
  record(6, "protocol invariants", pass, note);
}

// --------------------------------------------------------------------------
// 7. Learning-rate schedule

void criterion_lr_schedule() {
  const bool pass = lr_schedule(0, 1e-4) == 1e-4 &&
                    lr_schedule(50, 1e-4) == 5e-5 &&
                    lr_schedule(100, 1e-4) == 2.5e-5;
  record(7, "learning-rate schedule", pass,
         "epochs 0/50/100 -> 1e-4 / 5e-5 / 2.5e-5 exactly");
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  std::printf("contseg acceptance suite\n\n");

  criterion_gradients();
  criterion_metric_oracles();
  criterion_buffer_policy();
  criterion_degeneracy();
  criterion_trend();
  criterion_protocol();
  criterion_lr_schedule();

  int failures = 0;
  for (const auto& result : g_results) failures += result.pass ? 0 : 1;
  std::printf("\n%zu criteria, %d failed, %.0fs total\n", g_results.size(),
              failures, elapsed_s(start));
  return failures == 0 ? 0 : 1;
}
