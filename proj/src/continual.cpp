#include "contseg/continual.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "contseg/errors.hpp"
#include "contseg/objectives.hpp"

namespace contseg {

namespace {

// Sub-stream tags for deriving per-stage seeds from the run seed.
constexpr std::uint64_t kInitTag = 0x696e6974;      // model initialization
constexpr std::uint64_t kStageTag = 0x7374616765;   // shuffling + patch sampling
constexpr std::uint64_t kBufferTag = 0x627566666572;
constexpr std::uint64_t kDecoderTag = 0x646563;

std::uint64_t derive(std::uint64_t run_seed, std::uint64_t tag, int stage) {
  return mix_seed(mix_seed(run_seed, tag), static_cast<std::uint64_t>(stage));
}

}  // namespace

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::SingleDomain: return "single-domain";
    case Regime::MultiDomain: return "multi-domain";
    case Regime::FineTune: return "fine-tune";
    case Regime::Replay: return "replay";
  }
  throw ContractError("unknown regime value");
}

Regime regime_from_string(const std::string& text) {
  if (text == "single-domain") return Regime::SingleDomain;
  if (text == "multi-domain") return Regime::MultiDomain;
  if (text == "fine-tune") return Regime::FineTune;
  if (text == "replay") return Regime::Replay;
  throw UsageError("unknown regime '" + text +
                   "' (valid: single-domain, multi-domain, fine-tune, replay)");
}

std::string to_string(Mixing mixing) {
  return mixing == Mixing::Merged ? "merged" : "balanced";
}

Mixing mixing_from_string(const std::string& text) {
  if (text == "merged") return Mixing::Merged;
  if (text == "balanced") return Mixing::Balanced;
  throw UsageError("unknown mixing '" + text + "' (valid: merged, balanced)");
}

// ---------------------------------------------------------------------------
// MemoryBuffer

MemoryBuffer::MemoryBuffer(int cap) : cap_(cap) {
  if (cap < 1) throw ConfigError("buffer cap must be >= 1");
}

void MemoryBuffer::update(const Domain& domain, std::uint64_t seed) {
  if (domain.train.empty()) {
    throw ContractError("buffer update: domain '" + domain.spec.name +
                        "' has an empty train set");
  }
  const std::int64_t n = static_cast<std::int64_t>(domain.train.size());
  const std::int64_t take = std::min<std::int64_t>(cap_, n);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  for (std::int64_t i = 0; i < take; ++i) {
    entries_.push_back(Entry{domain.spec.name,
                             &domain.train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]});
  }
}

int MemoryBuffer::count_for(const std::string& domain) const {
  int count = 0;
  for (const auto& entry : entries_) count += entry.domain == domain ? 1 : 0;
  return count;
}

std::vector<std::pair<std::string, const Sample*>> stage_train_set(
    Regime regime, const Domain& current, const MemoryBuffer& buffer) {
  if (regime != Regime::FineTune && regime != Regime::Replay) {
    throw ContractError("stage_train_set applies to fine-tune and replay only");
  }
  std::vector<std::pair<std::string, const Sample*>> items;
  items.reserve(current.train.size() +
                (regime == Regime::Replay ? buffer.size() : 0));
  for (const auto& sample : current.train) {
    items.emplace_back(current.spec.name, &sample);
  }
  if (regime == Regime::Replay) {
    for (const auto& entry : buffer.entries()) {
      items.emplace_back(entry.domain, entry.sample);
    }
  }
  return items;
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(AdamWConfig config,
             std::vector<std::pair<std::string, Tensor>>& params)
    : config_(config) {
  for (auto& [name, tensor] : params) {
    names_.push_back(name);
    params_.push_back(tensor);
    m_.emplace_back(static_cast<std::size_t>(tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(tensor.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto vals = params_[i].values_mut();
    const double* grad =
        params_[i].has_grad() ? params_[i].grad().data() : nullptr;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double g = grad ? grad[j] : 0.0;
      if (!std::isfinite(g)) {
        throw TrainingError("non-finite gradient in parameter '" + names_[i] + "'");
      }
      vals[j] -= lr * config_.weight_decay * vals[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      vals[j] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

double lr_schedule(int epoch, double base_lr, int step, double gamma) {
  if (epoch < 0) throw ContractError("lr_schedule: epoch must be >= 0");
  if (step < 1) throw ConfigError("lr_schedule: step must be >= 1");
  return base_lr * std::pow(gamma, static_cast<double>(epoch / step));
}

// ---------------------------------------------------------------------------
// Regime execution

void validate_regime_config(const RegimeConfig& config) {
  if (config.epochs < 1) throw ConfigError("regime: epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("regime: batch_size must be >= 1");
  if (!(config.lr > 0.0)) throw ConfigError("regime: lr must be > 0");
  if (config.lr_step < 1) throw ConfigError("regime: lr_step must be >= 1");
  if (config.buffer_cap < 1) throw ConfigError("regime: buffer_cap must be >= 1");
  if (config.patches_per_image < 1) {
    throw ConfigError("regime: patches_per_image must be >= 1");
  }
  if (!(config.fg_probability >= 0.0 && config.fg_probability <= 1.0)) {
    throw ConfigError("regime: fg_probability must lie in [0,1]");
  }
  if (!(config.eval_threshold > 0.0 && config.eval_threshold < 1.0)) {
    throw ConfigError("regime: eval_threshold must lie in (0,1)");
  }
  if (!(config.dice_epsilon > 0.0)) throw ConfigError("regime: dice_epsilon must be > 0");
  if (config.weight_decay < 0.0) throw ConfigError("regime: weight_decay must be >= 0");
}

namespace {

using Items = std::vector<std::pair<std::string, const Sample*>>;

std::pair<Tensor, Tensor> make_batch(
    const std::vector<std::pair<Tensor, Tensor>>& patches,
    const Shape& patch_shape) {
  const std::int64_t b = static_cast<std::int64_t>(patches.size());
  Shape batch_shape{b, 1};
  for (const auto extent : patch_shape) batch_shape.push_back(extent);
  Tensor x = Tensor::zeros(batch_shape);
  Tensor y = Tensor::zeros(batch_shape);
  auto xv = x.values_mut();
  auto yv = y.values_mut();
  const std::int64_t per = shape_numel(patch_shape);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto iv = patches[static_cast<std::size_t>(i)].first.values();
    const auto lv = patches[static_cast<std::size_t>(i)].second.values();
    std::copy(iv.begin(), iv.end(), xv.begin() + i * per);
    std::copy(lv.begin(), lv.end(), yv.begin() + i * per);
  }
  return {x, y};
}

double train_batch(Model& model, AdamW& optimizer,
                   const std::vector<std::pair<Tensor, Tensor>>& patches,
                   const RegimeConfig& cfg, double lr) {
  auto [x, y] = make_batch(patches, cfg.patch_shape);
  Graph graph;
  const Tensor pred = model.forward(graph, x);
  if (!all_finite(pred.values())) {
    throw TrainingError("non-finite activations in the forward pass");
  }
  const Tensor loss = dice_loss(graph, pred, y, cfg.dice_epsilon);
  model.zero_grads();
  graph.backward(loss);
  optimizer.step(lr);
  return loss.item();
}

// One stage of optimization. `items` is the epoch multiset (current domain
// plus, for merged replay, the buffer). `balanced_buffer` switches batch
// assembly to half-current/half-buffer draws.
double train_stage(Model& model, const Items& items,
                   const std::vector<MemoryBuffer::Entry>* balanced_buffer,
                   const RegimeConfig& cfg, Rng& rng) {
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW optimizer(opt_cfg, model.parameters());

  double final_epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.lr, cfg.lr_step, cfg.lr_gamma);
    double loss_sum = 0.0;
    int batches = 0;

    if (balanced_buffer == nullptr) {
      std::vector<std::size_t> order(items.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      std::vector<std::pair<Tensor, Tensor>> pending;
      for (const std::size_t idx : order) {
        auto patches = sample_patches(*items[idx].second, cfg.patches_per_image,
                                      cfg.patch_shape, cfg.fg_probability, rng);
        for (auto& patch : patches) {
          pending.push_back(std::move(patch));
          if (static_cast<int>(pending.size()) == cfg.batch_size) {
            loss_sum += train_batch(model, optimizer, pending, cfg, lr);
            ++batches;
            pending.clear();
          }
        }
      }
      if (!pending.empty()) {
        loss_sum += train_batch(model, optimizer, pending, cfg, lr);
        ++batches;
      }
    } else {
      const std::int64_t total =
          static_cast<std::int64_t>(items.size()) * cfg.patches_per_image;
      const std::int64_t n_batches =
          (total + cfg.batch_size - 1) / cfg.batch_size;
      const int from_buffer = cfg.batch_size / 2;
      const int from_current = cfg.batch_size - from_buffer;
      for (std::int64_t b = 0; b < n_batches; ++b) {
        std::vector<std::pair<Tensor, Tensor>> batch;
        for (int i = 0; i < from_current; ++i) {
          const auto& item = items[static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<std::int64_t>(items.size()) - 1))];
          auto patch = sample_patches(*item.second, 1, cfg.patch_shape,
                                      cfg.fg_probability, rng);
          batch.push_back(std::move(patch.front()));
        }
        for (int i = 0; i < from_buffer; ++i) {
          const auto& entry = (*balanced_buffer)[static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<std::int64_t>(balanced_buffer->size()) - 1))];
          auto patch = sample_patches(*entry.sample, 1, cfg.patch_shape,
                                      cfg.fg_probability, rng);
          batch.push_back(std::move(patch.front()));
        }
        loss_sum += train_batch(model, optimizer, batch, cfg, lr);
        ++batches;
      }
    }
    final_epoch_loss = batches > 0 ? loss_sum / batches : 0.0;
  }
  return final_epoch_loss;
}

using AccessSink = std::function<void(AccessRecord)>;

std::vector<double> eval_row(const Model& model,
                             const std::vector<Domain>& sequence,
                             const RegimeConfig& cfg, int stage,
                             const AccessSink& audit) {
  std::vector<double> row;
  row.reserve(sequence.size());
  for (const auto& domain : sequence) {
    double sum = 0.0;
    for (const auto& sample : domain.test) {
      const Tensor mask = model.predict(sample.image);
      sum += dice_score(mask, sample.label, cfg.eval_threshold);
    }
    row.push_back(sum / static_cast<double>(domain.test.size()));
    audit(AccessRecord{stage, domain.spec.name, "test", "eval",
                       static_cast<int>(domain.test.size())});
  }
  return row;
}

void record_item_access(const AccessSink& audit, int stage,
                        const std::string& current_domain, const Items& items) {
  std::unordered_map<std::string, int> replayed;
  int current = 0;
  std::vector<std::string> order;
  for (const auto& item : items) {
    const std::string& domain = item.first;
    if (domain == current_domain) {
      ++current;
    } else {
      if (replayed.find(domain) == replayed.end()) order.push_back(domain);
      ++replayed[domain];
    }
  }
  audit(AccessRecord{stage, current_domain, "train", "train", current});
  for (const auto& domain : order) {
    audit(AccessRecord{stage, domain, "train", "replay", replayed[domain]});
  }
}

}  // namespace

RunResult run_regime(const std::vector<Domain>& sequence,
                     const ModelConfig& model_config, const RegimeConfig& config,
                     std::uint64_t run_seed, const RunHooks& hooks,
                     const ResumeState* resume) {
  if (sequence.empty()) throw ContractError("run_regime: empty domain sequence");
  validate_model_config(model_config);
  validate_regime_config(config);
  validate_patch_config(model_config, config.patch_shape);
  const std::int64_t divisor = std::int64_t{1} << (model_config.levels - 1);
  for (const auto& domain : sequence) {
    if (domain.train.empty() || domain.test.empty()) {
      throw ContractError("run_regime: domain '" + domain.spec.name +
                          "' has an empty split");
    }
    for (const auto extent : domain.spec.volume_shape) {
      if (extent % divisor != 0) {
        throw ConfigError("run_regime: volume extents of '" + domain.spec.name +
                          "' are not divisible by 2^(levels-1)");
      }
    }
  }

  const int k = static_cast<int>(sequence.size());
  RunResult result;
  result.matrix.domain_order.reserve(sequence.size());
  for (const auto& domain : sequence) {
    result.matrix.domain_order.push_back(domain.spec.name);
  }
  result.matrix.r.assign(static_cast<std::size_t>(k),
                         std::vector<double>(static_cast<std::size_t>(k), 0.0));

  int completed = 0;
  if (resume != nullptr) {
    for (const auto& record : resume->records) {
      if (static_cast<int>(record.r_row.size()) != k) {
        throw ContractError("resume: stage record row width mismatch");
      }
      result.stages.push_back(record);
    }
    completed = static_cast<int>(resume->records.size());
  }

  const auto finish_stage = [&](const StageRecord& record, const Model& model) {
    result.stages.push_back(record);
    ++result.trained_stages;
    if (hooks.on_stage_end) hooks.on_stage_end(record, model);
  };

  const AccessSink push_access = [&](AccessRecord record) {
    if (hooks.on_access) hooks.on_access(record);
    result.audit.push_back(std::move(record));
  };

  const auto run_training = [&](Model& model, const Items& items,
                                const std::vector<MemoryBuffer::Entry>* balanced,
                                int stage, Rng& rng) {
    try {
      return train_stage(model, items, balanced, config, rng);
    } catch (const TrainingError& err) {
      throw TrainingError("stage " + std::to_string(stage + 1) + " (" +
                          sequence[static_cast<std::size_t>(stage)].spec.name +
                          "): " + err.what());
    }
  };

  switch (config.regime) {
    case Regime::FineTune:
    case Regime::Replay: {
      if (completed > 0 && !(resume != nullptr && resume->model.has_value())) {
        throw ContractError("resume: missing model checkpoint for completed stages");
      }
      if (resume != nullptr && resume->model.has_value() &&
          !(resume->model->config() == model_config)) {
        throw ContractError("resume: checkpoint model config does not match the run config");
      }
      Model model = resume != nullptr && resume->model.has_value()
                        ? resume->model->clone()
                        : Model(model_config, derive(run_seed, kInitTag, 0));
      MemoryBuffer buffer(config.buffer_cap);
      for (int s = 0; s < completed && config.regime == Regime::Replay; ++s) {
        buffer.update(sequence[static_cast<std::size_t>(s)],
                      derive(run_seed, kBufferTag, s));
      }
      for (int s = completed; s < k; ++s) {
        const auto& current = sequence[static_cast<std::size_t>(s)];
        if (s > 0 && config.encoder_only_transfer) {
          model.reinitialize_decoder(derive(run_seed, kDecoderTag, s));
        }
        const Items items = stage_train_set(config.regime, current, buffer);
        record_item_access(push_access, s, current.spec.name, items);

        const bool balanced = config.regime == Regime::Replay &&
                              config.mixing == Mixing::Balanced &&
                              !buffer.empty();
        Items current_only;
        if (balanced) {
          current_only = stage_train_set(Regime::FineTune, current, buffer);
        }
        Rng rng(derive(run_seed, kStageTag, s));
        const double final_loss =
            run_training(model, balanced ? current_only : items,
                         balanced ? &buffer.entries() : nullptr, s, rng);

        std::vector<double> row = eval_row(model, sequence, config, s, push_access);
        result.matrix.r[static_cast<std::size_t>(s)] = row;

        if (config.regime == Regime::Replay) {
          buffer.update(current, derive(run_seed, kBufferTag, s));
          push_access(AccessRecord{s, current.spec.name, "train", "buffer",
                                   buffer.count_for(current.spec.name)});
        }
        finish_stage(StageRecord{s, current.spec.name, config.epochs, final_loss,
                                 std::move(row)},
                     model);
      }
      break;
    }

    case Regime::SingleDomain: {
      for (int s = completed; s < k; ++s) {
        const auto& current = sequence[static_cast<std::size_t>(s)];
        Model model(model_config, derive(run_seed, kInitTag, s));
        Items items;
        for (const auto& sample : current.train) {
          items.emplace_back(current.spec.name, &sample);
        }
        record_item_access(push_access, s, current.spec.name, items);
        Rng rng(derive(run_seed, kStageTag, s));
        const double final_loss = run_training(model, items, nullptr, s, rng);
        std::vector<double> row = eval_row(model, sequence, config, s, push_access);
        result.matrix.r[static_cast<std::size_t>(s)] = row;
        finish_stage(StageRecord{s, current.spec.name, config.epochs, final_loss,
                                 std::move(row)},
                     model);
      }
      break;
    }

    case Regime::MultiDomain: {
      if (completed == 0) {
        Model model(model_config, derive(run_seed, kInitTag, 0));
        Items items;
        for (const auto& domain : sequence) {
          Items domain_items;
          for (const auto& sample : domain.train) {
            domain_items.emplace_back(domain.spec.name, &sample);
          }
          record_item_access(push_access, 0, domain.spec.name, domain_items);
          items.insert(items.end(), domain_items.begin(), domain_items.end());
        }
        Rng rng(derive(run_seed, kStageTag, 0));
        const double final_loss = run_training(model, items, nullptr, 0, rng);
        std::vector<double> row = eval_row(model, sequence, config, 0, push_access);
        for (auto& r : result.matrix.r) r = row;
        finish_stage(StageRecord{0, "pooled", config.epochs, final_loss,
                                 std::move(row)},
                     model);
      } else {
        for (auto& r : result.matrix.r) r = result.stages.front().r_row;
      }
      break;
    }
  }

  // Rows of completed (resumed) stages come from their records.
  for (int s = 0; s < std::min(completed, k); ++s) {
    if (config.regime != Regime::MultiDomain) {
      result.matrix.r[static_cast<std::size_t>(s)] =
          result.stages[static_cast<std::size_t>(s)].r_row;
    }
  }

  return result;
}

BwtResult compute_bwt(const ResultMatrix& matrix) {
  const int k = matrix.k();
  if (k < 1) throw ContractError("compute_bwt: empty matrix");
  if (static_cast<int>(matrix.r.size()) != k) {
    throw ContractError("compute_bwt: matrix has " +
                        std::to_string(matrix.r.size()) + " rows, expected " +
                        std::to_string(k));
  }
  for (const auto& row : matrix.r) {
    if (static_cast<int>(row.size()) != k) {
      throw ContractError("compute_bwt: incomplete matrix row");
    }
  }
  BwtResult result;
  if (k == 1) return result;
  const auto& final_row = matrix.r[static_cast<std::size_t>(k - 1)];
  double sum = 0.0;
  for (int i = 0; i < k - 1; ++i) {
    const double delta = final_row[static_cast<std::size_t>(i)] -
                         matrix.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
    result.per_domain.push_back(delta);
    sum += delta;
  }
  result.average = sum / static_cast<double>(k - 1);
  return result;
}

bool audit_is_zero_shot_clean(Regime regime,
                              const std::vector<AccessRecord>& audit,
                              const std::vector<std::string>& order,
                              std::string* violation) {
  std::unordered_map<std::string, int> position;
  for (std::size_t i = 0; i < order.size(); ++i) {
    position[order[i]] = static_cast<int>(i);
  }
  const auto fail = [violation](const std::string& why) {
    if (violation != nullptr) *violation = why;
    return false;
  };
  for (const auto& record : audit) {
    const auto pos = position.find(record.domain);
    if (pos == position.end()) {
      return fail("audit references unknown domain '" + record.domain + "'");
    }
    if (record.split == "test") {
      if (record.purpose != "eval") {
        return fail("test split of '" + record.domain + "' used for '" +
                    record.purpose + "'");
      }
      continue;
    }
    if (record.split != "train") {
      return fail("unknown split '" + record.split + "'");
    }
    switch (regime) {
      case Regime::FineTune:
      case Regime::Replay:
        if (pos->second > record.stage) {
          return fail("stage " + std::to_string(record.stage + 1) +
                      " touched train data of not-yet-seen domain '" +
                      record.domain + "'");
        }
        break;
      case Regime::SingleDomain:
        if (pos->second != record.stage) {
          return fail("single-domain stage " + std::to_string(record.stage + 1) +
                      " touched train data of '" + record.domain + "'");
        }
        break;
      case Regime::MultiDomain:
        if (record.stage != 0) {
          return fail("multi-domain training outside stage 1");
        }
        break;
    }
  }
  return true;
}

}  // namespace contseg
