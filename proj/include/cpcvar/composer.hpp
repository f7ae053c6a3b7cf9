#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcvar/rng.hpp"
#include "cpcvar/tokenizer.hpp"
#include "cpcvar/var_model.hpp"

namespace cpcvar {

// Normalized rectangle in [0,1]^2; x grows rightward, y downward.
struct BoxRegion {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
  void validate() const;
};

// Cell (r,c) is set iff its rectangle overlaps the box with positive area;
// when no cell qualifies the cell containing the box center is set, so the
// result always has at least one active cell.
std::vector<uint8_t> rasterize_box(const BoxRegion& box, int64_t h, int64_t w);

enum class OverlapMode { kStrict, kLastWins };
enum class FusionSite { kCrossAttention, kBlockOutput };

struct CompositionBranch {
  PromptSpec prompt;
  BoxRegion box;
};

struct CompositionSpec {
  PromptSpec global_prompt;
  std::vector<CompositionBranch> branches;
  double alpha = 0.05;
  int64_t s_start = 3;  // 1-based first intervened scale
  OverlapMode overlap = OverlapMode::kStrict;
  FusionSite fusion = FusionSite::kCrossAttention;
  // Ablation hook: when nonzero, intervene at exactly this 1-based scale.
  int64_t single_scale_only = 0;

  void validate() const;
};

// Per-scale rasterized branch and background masks (the audit sidecar).
struct ScaleMasks {
  std::vector<std::vector<std::vector<uint8_t>>> branch;  // [S][B][h_s*w_s]
  std::vector<std::vector<uint8_t>> background;           // [S][h_s*w_s]
};

ScaleMasks build_scale_masks(const CompositionSpec& spec, const ScaleSchedule& schedule);

// f^F = b ⊙ f_local + (1-b) ⊙ f_global with exact row-copy semantics.
Tensor fuse_features(const Tensor& f_local, const Tensor& f_global,
                     const std::vector<uint8_t>& row_mask);

// alpha * L_G + (1-alpha) * L_i.
Tensor blend_logits(const Tensor& global_logits, const Tensor& local_logits, double alpha);

// L_M = b_G ⊙ L_G + sum_i b_i ⊙ L~_i; every cell takes exactly one source.
// Strict mode fails on overlapping cells, naming them.
Tensor merge_logits(const Tensor& global_logits, const std::vector<Tensor>& blended,
                    const std::vector<std::vector<uint8_t>>& branch_masks,
                    const std::vector<uint8_t>& background_mask, OverlapMode mode);

struct ComposeResult {
  TokenPyramid pyramid;
  ScaleMasks masks;
  std::vector<bool> intervened;  // per scale
  // Hash of every branch's running feature sum after each scale; all entries
  // of one scale must agree (branch synchronization audit).
  std::vector<std::vector<std::string>> sync_hashes;  // [S][B+1]
};

// Algorithm: scales below s_start run the global branch alone; from s_start
// on, the global and B local branches run forward with feature fusion at
// every cross-attention sublayer, logits are blended and spatially merged,
// and one sampled grid is synchronized into every branch.
ComposeResult compose_sample(const VarModel& model, const Tokenizer& tokenizer,
                             const CompositionSpec& spec, const SampleParams& params, Rng& rng);

}  // namespace cpcvar
