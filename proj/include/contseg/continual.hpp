#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "contseg/model.hpp"
#include "contseg/synth.hpp"

namespace contseg {

// The four training regimes: independent per-center models, pooled joint
// training, sequential fine-tuning, and fine-tuning with a rehearsal buffer.
enum class Regime { SingleDomain, MultiDomain, FineTune, Replay };

// How replay combines buffer and current data: `merged` folds the buffer
// into the epoch's training multiset; `balanced` draws each batch half from
// the current domain and half from the buffer.
enum class Mixing { Merged, Balanced };

std::string to_string(Regime regime);
Regime regime_from_string(const std::string& text);  // UsageError, lists valid names
std::string to_string(Mixing mixing);
Mixing mixing_from_string(const std::string& text);

// ---------------------------------------------------------------------------

// Rehearsal store of past domains' image-label pairs, capped per domain.
// Centers with fewer training pairs than the cap are stored whole. Entries
// are frozen at insertion and never re-selected.
class MemoryBuffer {
 public:
  static constexpr int kUnlimited = std::numeric_limits<int>::max();

  struct Entry {
    std::string domain;
    const Sample* sample;
  };

  explicit MemoryBuffer(int cap = 20);

  // Appends min(cap, |train|) samples drawn uniformly without replacement
  // from the domain's train set; existing entries are untouched.
  void update(const Domain& domain, std::uint64_t seed);

  const std::vector<Entry>& entries() const { return entries_; }
  int count_for(const std::string& domain) const;
  int capacity() const { return cap_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  int cap_;
  std::vector<Entry> entries_;
};

// The stage's training multiset: the current domain's train set for
// fine-tuning; that plus every buffered pair for merged replay. Balanced
// replay mixes at the batch level instead (see run_regime).
std::vector<std::pair<std::string, const Sample*>> stage_train_set(
    Regime regime, const Domain& current, const MemoryBuffer& buffer);

// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam with bias correction. Decay is applied before
// the moment update, so a zero gradient shrinks parameters by exactly
// (1 - lr*weight_decay) per step.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::vector<std::pair<std::string, Tensor>>& params);

  // One update using the parameters' current gradients. A non-finite
  // gradient raises TrainingError naming the offending parameter.
  void step(double lr);

  std::int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t step_ = 0;
};

// Step decay: base_lr * gamma^floor(epoch / step).
double lr_schedule(int epoch, double base_lr, int step = 50, double gamma = 0.5);

// ---------------------------------------------------------------------------

struct RegimeConfig {
  Regime regime = Regime::Replay;
  int epochs = 40;
  int batch_size = 4;
  double lr = 1e-4;
  int lr_step = 50;
  double lr_gamma = 0.5;
  double weight_decay = 0.01;
  int buffer_cap = 20;
  Mixing mixing = Mixing::Merged;
  int patches_per_image = 4;
  double fg_probability = 0.75;
  Shape patch_shape = {32, 32};
  double eval_threshold = 0.5;
  double dice_epsilon = 1e-5;
  // When true, only encoder weights carry over between sequential stages;
  // decoder and head are re-drawn at each stage boundary.
  bool encoder_only_transfer = false;
};

void validate_regime_config(const RegimeConfig& config);

// R[i][j] = mean test Dice on domain j after finishing training stage i.
struct ResultMatrix {
  std::vector<std::string> domain_order;
  std::vector<std::vector<double>> r;

  int k() const { return static_cast<int>(domain_order.size()); }
};

struct BwtResult {
  double average = 0.0;
  std::vector<double> per_domain;  // K-1 values, one per non-final domain
};

// Backward transfer: per-domain R[K][i] - R[i][i] for i < K, averaged.
// K = 1 gives average 0 with an empty per-domain list.
BwtResult compute_bwt(const ResultMatrix& matrix);

struct StageRecord {
  int stage = 0;  // 0-based
  std::string domain;
  int epochs = 0;
  double final_train_loss = 0.0;
  std::vector<double> r_row;
};

// One line of the data-access audit: which split of which domain a stage
// touched, and why (train / replay / buffer / eval).
struct AccessRecord {
  int stage = 0;
  std::string domain;
  std::string split;    // "train" | "test"
  std::string purpose;  // "train" | "replay" | "buffer" | "eval"
  int count = 0;
};

struct RunHooks {
  // Called after each completed stage (checkpointing, logging). Throwing
  // aborts the run after the stage's artifacts are recorded.
  std::function<void(const StageRecord&, const Model&)> on_stage_end;
  // Streamed audit records, in generation order; lets callers persist the
  // audit append-only so resumed runs keep earlier stages' records.
  std::function<void(const AccessRecord&)> on_access;
};

// Completed work carried into a resumed run: records of finished stages and
// the model as of the last checkpoint. Buffer contents are reconstructed
// deterministically from the seeds, so they are not part of this state.
struct ResumeState {
  std::vector<StageRecord> records;
  std::optional<Model> model;
};

struct RunResult {
  ResultMatrix matrix;
  std::vector<StageRecord> stages;
  std::vector<AccessRecord> audit;
  int trained_stages = 0;  // stages trained by this invocation (not resumed)
};

// Executes one regime over the ordered domain sequence and fills the
// evaluation matrix row by row. Evaluation after every stage is zero-shot on
// every domain's held-out test set.
RunResult run_regime(const std::vector<Domain>& sequence,
                     const ModelConfig& model_config, const RegimeConfig& config,
                     std::uint64_t run_seed, const RunHooks& hooks = {},
                     const ResumeState* resume = nullptr);

// Verifies the audit log against the zero-shot protocol: sequential regimes
// may only touch train data of already-started domains, single-domain stages
// only their own domain, and evaluation only test splits.
bool audit_is_zero_shot_clean(Regime regime,
                              const std::vector<AccessRecord>& audit,
                              const std::vector<std::string>& order,
                              std::string* violation = nullptr);

}  // namespace contseg
