#include "cpcvar/gcns.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpcvar/container.hpp"
#include "cpcvar/errors.hpp"
#include "cpcvar/hash.hpp"
#include "cpcvar/log.hpp"

namespace cpcvar {

// ---- ledger ----

bool TaskLedger::has_task(int64_t task_id) const {
  for (const auto& r : records_)
    if (r.task_id == task_id) return true;
  return false;
}

bool TaskLedger::has_concept(const std::string& name) const {
  for (const auto& r : records_)
    if (r.concept_name == name) return true;
  return false;
}

void TaskLedger::append(TaskRecord record) {
  if (record.mask.size() != static_cast<size_t>(ca_dim_))
    throw ShapeError("ledger: mask size does not match CA dimension");
  if (has_task(record.task_id))
    throw StateError("ledger: task id " + std::to_string(record.task_id) + " already recorded");
  if (has_concept(record.concept_name))
    throw StateError("ledger: concept '" + record.concept_name + "' already recorded");
  history_ |= record.mask;
  records_.push_back(std::move(record));
}

BitMask TaskLedger::recompute_history() const {
  BitMask out(static_cast<size_t>(ca_dim_));
  for (const auto& r : records_) out |= r.mask;
  return out;
}

void TaskLedger::save(const std::string& path) const {
  Container c;
  c.put_i64("ca_dim", {ca_dim_});
  c.put_i64("task_count", {task_count()});
  for (size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    std::string p = "task" + std::to_string(i) + ".";
    c.put_i64(p + "meta", {r.task_id, r.concept_token, static_cast<int64_t>(r.seed)});
    c.put_f64(p + "percent", {r.percent}, {1});
    c.put_string(p + "concept", r.concept_name);
    c.put_bytes(p + "mask", r.mask.bytes());
    c.put_string(p + "theta_old_hash", r.theta_old_hash);
  }
  c.save(path);
}

TaskLedger TaskLedger::load(const std::string& path) {
  Container c = Container::load(path);
  TaskLedger ledger(c.get_i64("ca_dim")[0]);
  int64_t count = c.get_i64("task_count")[0];
  for (int64_t i = 0; i < count; ++i) {
    std::string p = "task" + std::to_string(i) + ".";
    const auto& meta = c.get_i64(p + "meta");
    TaskRecord r;
    r.task_id = meta[0];
    r.concept_token = meta[1];
    r.seed = static_cast<uint64_t>(meta[2]);
    r.percent = c.get_f64(p + "percent")[0];
    r.concept_name = c.get_string(p + "concept");
    r.mask = BitMask::from_bytes(c.get_bytes(p + "mask"), static_cast<size_t>(ledger.ca_dim()));
    r.theta_old_hash = c.get_string(p + "theta_old_hash");
    ledger.append(std::move(r));
  }
  return ledger;
}

// ---- config ----

void GcnsConfig::validate() const {
  if (percent <= 0.0 || percent > 100.0)
    throw ConfigError("gcns: selection percent must be in (0,100]");
  if (refresh_interval < 1) throw ConfigError("gcns: refresh interval must be >= 1");
  if (iterations < 0) throw ConfigError("gcns: iterations must be >= 0");
  if (lambda < 0.0) throw ConfigError("gcns: lambda must be >= 0");
  if (lr_embedding <= 0.0 || lr_neuron <= 0.0 || lr_scale <= 0.0)
    throw ConfigError("gcns: learning rates must be positive");
}

ScaleWeights GcnsConfig::resolved_weights(size_t num_scales) const {
  if (weights.w.empty()) return ScaleWeights::all_ones(num_scales);
  weights.validate(num_scales);
  return weights;
}

// ---- mask algebra ----

BitMask select_mask(const std::vector<double>& gradient, double percent) {
  if (percent <= 0.0 || percent > 100.0)
    throw ConfigError("select_mask: percent must be in (0,100]");
  size_t d = gradient.size();
  for (double g : gradient)
    if (!std::isfinite(g)) throw NumericError("select_mask: non-finite gradient entry");

  auto count = static_cast<size_t>(
      std::ceil(percent * static_cast<double>(d) / 100.0 - 1e-12));
  count = std::min(count, d);

  std::vector<size_t> order(d);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    double ga = std::fabs(gradient[a]), gb = std::fabs(gradient[b]);
    if (ga != gb) return ga > gb;
    return a < b;
  });

  BitMask mask(d);
  for (size_t i = 0; i < count; ++i) mask.set(order[i]);
  return mask;
}

ConceptMask merge_phase_masks(const std::vector<ConceptMask>& masks) {
  if (masks.empty()) throw StateError("merge_phase_masks: no masks");
  ConceptMask out;
  out.task_id = masks[0].task_id;
  out.phase = masks.back().phase;
  out.bits = masks[0].bits;
  for (size_t i = 1; i < masks.size(); ++i) {
    if (masks[i].task_id != out.task_id)
      throw StateError("merge_phase_masks: mixed task ids " + std::to_string(out.task_id) +
                       " and " + std::to_string(masks[i].task_id));
    out.bits |= masks[i].bits;
  }
  return out;
}

BitMask history_mask(const TaskLedger& ledger) { return ledger.recompute_history(); }

double conflict_reg_loss(const std::vector<double>& theta, const std::vector<double>& theta_old,
                         const BitMask& reg_mask, const std::vector<int64_t>& ca_indices,
                         double lambda) {
  if (reg_mask.size() != ca_indices.size())
    throw ShapeError("conflict_reg_loss: mask does not match CA index space");
  if (theta.size() != theta_old.size()) throw ShapeError("conflict_reg_loss: theta size mismatch");
  double acc = 0.0;
  for (size_t j = 0; j < ca_indices.size(); ++j) {
    if (!reg_mask.test(j)) continue;
    double diff = theta[static_cast<size_t>(ca_indices[j])] -
                  theta_old[static_cast<size_t>(ca_indices[j])];
    acc += diff * diff;
  }
  return lambda * acc;
}

MaskStorageReport mask_storage_bytes(const TaskLedger& ledger) {
  MaskStorageReport rep;
  rep.tasks = ledger.task_count();
  rep.mask_bytes_per_task = (ledger.ca_dim() + 7) / 8;
  // task id, concept token, seed, percent: 4 fixed 8-byte fields
  rep.metadata_bytes_per_task = 32;
  rep.total_bytes = rep.tasks * (rep.mask_bytes_per_task + rep.metadata_bytes_per_task);
  return rep;
}

std::vector<size_t> batch_schedule(size_t item_count, int64_t iterations, Rng& rng) {
  if (item_count == 0) throw StateError("batch_schedule: empty dataset");
  std::vector<size_t> out(static_cast<size_t>(iterations));
  for (auto& idx : out) idx = static_cast<size_t>(rng.below(item_count));
  return out;
}

std::string batch_stream_hash(const std::vector<size_t>& schedule) {
  std::vector<uint8_t> bytes;
  bytes.reserve(schedule.size() * 8);
  for (size_t idx : schedule)
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<uint8_t>(static_cast<uint64_t>(idx) >> (8 * b)));
  return sha256_hex(bytes);
}

// ---- trainer ----

namespace {

// Sum of weighted losses over the batch on one tape.
Tensor batch_weighted_nll(const VarConfig& config, const BoundParams& bound,
                          const Tokenizer& tokenizer, const std::vector<TrainingItem>& batch,
                          const ScaleWeights& weights) {
  Tensor acc;
  for (const auto& item : batch) {
    auto inputs = tokenizer.build_scale_inputs(item.pyramid);
    auto logits = VarModel::forward_graph(config, bound, item.prompt, inputs,
                                          item.pyramid.num_scales());
    Tensor loss = VarModel::weighted_nll(logits, item.pyramid, weights);
    acc = acc.defined() ? add(acc, loss) : loss;
  }
  return acc;
}

// lambda * || M_reg ⊙ (theta - theta_old) ||^2 as a graph term over the
// cross-attention segments.
Tensor conflict_reg_graph(const BoundParams& bound, const std::vector<double>& theta_old,
                          const BitMask& reg_mask, double lambda) {
  const ParamStore& store = *bound.store;
  Tensor acc;
  size_t ca_cursor = 0;
  for (size_t i = 0; i < store.segments().size(); ++i) {
    const auto& seg = store.segments()[i];
    if (seg.group != ParamGroup::kCrossAttention) continue;
    std::vector<double> mask_vals(static_cast<size_t>(seg.size), 0.0);
    bool any = false;
    for (int64_t j = 0; j < seg.size; ++j) {
      if (reg_mask.test(ca_cursor + static_cast<size_t>(j))) {
        mask_vals[static_cast<size_t>(j)] = 1.0;
        any = true;
      }
    }
    if (any) {
      std::vector<double> old_vals(theta_old.begin() + seg.offset,
                                   theta_old.begin() + seg.offset + seg.size);
      Tensor old_t = Tensor::from(seg.shape, std::move(old_vals));
      Tensor diff = mask_mul(sub(bound.tensors[i], old_t), mask_vals);
      Tensor term = sum_all(mul(diff, diff));
      acc = acc.defined() ? add(acc, term) : term;
    }
    ca_cursor += static_cast<size_t>(seg.size);
  }
  if (!acc.defined()) return Tensor::scalar(0.0);
  return mul_scalar(acc, lambda);
}

}  // namespace

std::vector<double> GcnsTrainer::compute_saliency(const std::vector<TrainingItem>& batch,
                                                  const ScaleWeights& weights) const {
  if (batch.empty()) throw StateError("compute_saliency: empty batch");
  Tape tape;
  auto bound = bind_params(model_->params(), true);
  Tensor loss = batch_weighted_nll(model_->config(), bound, *tokenizer_, batch, weights);
  tape.backward(loss);
  auto flat = collect_gradients(bound);

  const auto& ca = model_->params().ca_indices();
  std::vector<double> g(ca.size());
  for (size_t j = 0; j < ca.size(); ++j) {
    g[j] = flat[static_cast<size_t>(ca[j])];
    if (!std::isfinite(g[j]))
      throw NumericError("compute_saliency: non-finite gradient at CA coordinate " +
                         std::to_string(j));
  }
  return g;
}

TrainTaskResult GcnsTrainer::train_task(TaskLedger& ledger, const ConceptTaskData& task,
                                        const GcnsConfig& config, uint64_t seed) {
  config.validate();
  ParamStore& params = model_->params();
  if (ledger.ca_dim() != params.ca_dim())
    throw StateError("train_task: ledger CA dimension does not match model");
  if (ledger.has_task(task.task_id))
    throw StateError("train_task: task id " + std::to_string(task.task_id) + " already trained");
  if (task.concept_token < model_->config().prompt_vocab ||
      task.concept_token >= model_->vocab().size())
    throw StateError("train_task: concept token " + std::to_string(task.concept_token) +
                     " is not a registered concept");
  if (task.items.empty()) throw StateError("train_task: no training items");

  const VarConfig& cfg = model_->config();
  ScaleWeights weights = config.resolved_weights(cfg.schedule.num_scales());
  std::vector<double> theta_old = params.values();
  const BitMask& history = ledger.history();

  TrainTaskResult result;
  result.task_mask = BitMask(static_cast<size_t>(params.ca_dim()));
  TrainTelemetry& tele = result.telemetry;

  Rng batch_rng = Rng::stream(seed, "task" + std::to_string(task.task_id) + ".batches");
  auto schedule = batch_schedule(task.items.size(), config.iterations, batch_rng);
  tele.batch_stream_hash = batch_stream_hash(schedule);

  Optimizer optimizer(config.optimizer, static_cast<size_t>(params.dim()));
  std::vector<double> lr(static_cast<size_t>(params.dim()), 0.0);
  const ParamSegment& prompt_seg = params.segment("embed.prompt");
  int64_t row_offset = prompt_seg.offset + task.concept_token * cfg.d_model;

  ConceptMask phase;
  phase.task_id = task.task_id;
  phase.bits = BitMask(static_cast<size_t>(params.ca_dim()));

  auto refresh_lr = [&] {
    std::fill(lr.begin(), lr.end(), 0.0);
    double lr_emb = config.lr_embedding * config.lr_scale;
    double lr_ca = config.lr_neuron * config.lr_scale;
    for (int64_t j = 0; j < cfg.d_model; ++j) lr[static_cast<size_t>(row_offset + j)] = lr_emb;
    const auto& ca = params.ca_indices();
    for (size_t j = 0; j < ca.size(); ++j)
      if (phase.bits.test(j)) lr[static_cast<size_t>(ca[j])] = lr_ca;
  };

  int64_t k = 0;
  for (int64_t iter = 0; iter < config.iterations; ++iter) {
    bool refresh = config.dynamic_refresh ? (iter % config.refresh_interval == 0) : (iter == 0);
    if (refresh) {
      auto g = compute_saliency(task.items, weights);
      phase.bits = select_mask(g, config.percent);
      phase.phase = k++;
      result.task_mask |= phase.bits;
      tele.phase_masks.push_back(phase.bits);
      tele.task_mask_after.push_back(result.task_mask);
      refresh_lr();
    }

    BitMask reg_mask = history & phase.bits;

    Tape tape;
    auto bound = bind_params(params, true);
    const TrainingItem& item = task.items[schedule[static_cast<size_t>(iter)]];
    Tensor loss = batch_weighted_nll(cfg, bound, *tokenizer_, {item}, weights);
    double reg_value = 0.0;
    if (config.conflict_regularization && config.lambda > 0.0 && reg_mask.any()) {
      Tensor reg = conflict_reg_graph(bound, theta_old, reg_mask, config.lambda);
      reg_value = reg.item();
      loss = add(loss, reg);
    }
    double total = loss.item();
    if (!std::isfinite(total))
      throw NumericError("train_task: non-finite loss at iteration " + std::to_string(iter));
    tape.backward(loss);
    auto grad = collect_gradients(bound);
    optimizer.step(params.values(), grad, lr);

    tele.total_losses.push_back(total);
    tele.reg_losses.push_back(reg_value);
  }

  // Final-state decomposition over the whole dataset for external audit.
  {
    BitMask reg_mask = history & phase.bits;
    tele.final_reg_mask = reg_mask;
    auto bound = bind_params(params, false);
    tele.final_weighted_nll =
        batch_weighted_nll(cfg, bound, *tokenizer_, task.items, weights).item();
    tele.final_reg = (config.conflict_regularization && config.iterations > 0)
                         ? conflict_reg_loss(params.values(), theta_old, reg_mask,
                                             params.ca_indices(), config.lambda)
                         : 0.0;
    tele.final_total = tele.final_weighted_nll + tele.final_reg;
  }

  TaskRecord record;
  record.task_id = task.task_id;
  record.concept_name = task.concept_name;
  record.concept_token = task.concept_token;
  record.percent = config.percent;
  record.seed = seed;
  record.mask = result.task_mask;
  record.theta_old_hash = sha256_hex(theta_old);
  ledger.append(std::move(record));

  log::debug("task %lld: |M_t| = %zu, overlap with history = %zu",
             static_cast<long long>(task.task_id), result.task_mask.popcount(),
             (result.task_mask & history).popcount());
  return result;
}

}  // namespace cpcvar
