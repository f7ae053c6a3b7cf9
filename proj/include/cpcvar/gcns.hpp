#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcvar/bitmask.hpp"
#include "cpcvar/optim.hpp"
#include "cpcvar/rng.hpp"
#include "cpcvar/var_model.hpp"

namespace cpcvar {

// Saliency mask over the cross-attention index subset of the parameter
// store; one per training phase, merged per task.
struct ConceptMask {
  BitMask bits;
  int64_t task_id = -1;
  int64_t phase = -1;
};

struct TaskRecord {
  int64_t task_id = -1;
  std::string concept_name;
  int64_t concept_token = -1;
  double percent = 0.0;
  uint64_t seed = 0;
  BitMask mask;  // merged task mask M_t
  std::string theta_old_hash;
};

// Archive of per-task masks, the running historical union and the previous
// snapshot hash; drives cross-task conflict regularization.
class TaskLedger {
 public:
  TaskLedger() = default;
  explicit TaskLedger(int64_t ca_dim) : ca_dim_(ca_dim), history_(static_cast<size_t>(ca_dim)) {}

  int64_t ca_dim() const { return ca_dim_; }
  int64_t task_count() const { return static_cast<int64_t>(records_.size()); }
  const std::vector<TaskRecord>& records() const { return records_; }
  bool has_task(int64_t task_id) const;
  bool has_concept(const std::string& name) const;

  void append(TaskRecord record);

  // Historical mask M_{<t}: OR of all stored task masks (all-zero for t=1).
  const BitMask& history() const { return history_; }
  BitMask recompute_history() const;

  void save(const std::string& path) const;
  static TaskLedger load(const std::string& path);

 private:
  int64_t ca_dim_ = 0;
  std::vector<TaskRecord> records_;
  BitMask history_;
};

struct GcnsConfig {
  double percent = 5.0;          // selection ratio p (top |g| percent)
  int64_t refresh_interval = 50; // e iterations per phase
  int64_t iterations = 300;      // N
  double lambda = 1.0;           // conflict penalty
  double lr_embedding = 2e-3;    // concept token embedding rate
  double lr_neuron = 2e-5;       // selected cross-attention rate
  double lr_scale = 10.0;        // desk-scale multiplier on both rates
  OptimizerKind optimizer = OptimizerKind::kSgd;
  ScaleWeights weights;          // per-scale loss weights (empty = all ones)
  bool dynamic_refresh = true;   // recompute the mask every e iterations
  bool conflict_regularization = true;

  void validate() const;
  ScaleWeights resolved_weights(size_t num_scales) const;
};

struct TrainingItem {
  PromptSpec prompt;
  TokenPyramid pyramid;
};

struct ConceptTaskData {
  int64_t task_id = -1;
  std::string concept_name;
  int64_t concept_token = -1;
  std::vector<TrainingItem> items;
};

struct TrainTelemetry {
  std::vector<BitMask> phase_masks;        // M_t^{ke} per refresh
  std::vector<BitMask> task_mask_after;    // merged M_t after each refresh
  std::vector<double> total_losses;        // per iteration
  std::vector<double> reg_losses;          // per iteration
  std::string batch_stream_hash;           // parity audit across methods
  // Final-state decomposition over the full concept dataset.
  double final_weighted_nll = 0.0;
  double final_reg = 0.0;
  double final_total = 0.0;
  BitMask final_reg_mask;                  // M_reg at the last phase
};

struct TrainTaskResult {
  BitMask task_mask;
  TrainTelemetry telemetry;
};

// ---- mask algebra (free functions) ----

// Top ceil(p*D_CA/100) coordinates of |g|; threshold ties keep lower indices.
BitMask select_mask(const std::vector<double>& gradient, double percent);

// Logical OR of same-task phase masks.
ConceptMask merge_phase_masks(const std::vector<ConceptMask>& masks);

BitMask history_mask(const TaskLedger& ledger);

// lambda * || M_reg ⊙ (theta - theta_old) ||^2 over the cross-attention
// subspace; the independent numeric form used by reports and oracles.
double conflict_reg_loss(const std::vector<double>& theta, const std::vector<double>& theta_old,
                         const BitMask& reg_mask, const std::vector<int64_t>& ca_indices,
                         double lambda);

struct MaskStorageReport {
  int64_t tasks = 0;
  int64_t mask_bytes_per_task = 0;      // exactly ceil(D_CA/8)
  int64_t metadata_bytes_per_task = 0;  // fixed-size record fields
  int64_t total_bytes = 0;
};
MaskStorageReport mask_storage_bytes(const TaskLedger& ledger);

// Deterministic batch index sequence shared by every training method.
std::vector<size_t> batch_schedule(size_t item_count, int64_t iterations, Rng& rng);
std::string batch_stream_hash(const std::vector<size_t>& schedule);

// ---- trainer ----

// Continual trainer: phase-wise saliency masks with dynamic OR refresh,
// conflict regularization against the previous snapshot, and updates
// restricted to the current phase mask plus the concept embedding row.
class GcnsTrainer {
 public:
  GcnsTrainer(VarModel& model, const Tokenizer& tokenizer)
      : model_(&model), tokenizer_(&tokenizer) {}

  // Weighted-loss gradient restricted to cross-attention coordinates.
  std::vector<double> compute_saliency(const std::vector<TrainingItem>& batch,
                                       const ScaleWeights& weights) const;

  TrainTaskResult train_task(TaskLedger& ledger, const ConceptTaskData& task,
                             const GcnsConfig& config, uint64_t seed);

 private:
  VarModel* model_;
  const Tokenizer* tokenizer_;
};

}  // namespace cpcvar
