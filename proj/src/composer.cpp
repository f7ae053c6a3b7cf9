#include "cpcvar/composer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cpcvar/errors.hpp"
#include "cpcvar/hash.hpp"

namespace cpcvar {

void BoxRegion::validate() const {
  if (!(x0 < x1) || !(y0 < y1))
    throw ConfigError("box: requires x0 < x1 and y0 < y1");
  if (x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0)
    throw ConfigError("box: coordinates must lie in [0,1]");
}

std::vector<uint8_t> rasterize_box(const BoxRegion& box, int64_t h, int64_t w) {
  box.validate();
  std::vector<uint8_t> grid(static_cast<size_t>(h * w), 0);
  bool any = false;
  for (int64_t r = 0; r < h; ++r) {
    double cy0 = static_cast<double>(r) / static_cast<double>(h);
    double cy1 = static_cast<double>(r + 1) / static_cast<double>(h);
    for (int64_t c = 0; c < w; ++c) {
      double cx0 = static_cast<double>(c) / static_cast<double>(w);
      double cx1 = static_cast<double>(c + 1) / static_cast<double>(w);
      double ox = std::min(box.x1, cx1) - std::max(box.x0, cx0);
      double oy = std::min(box.y1, cy1) - std::max(box.y0, cy0);
      if (ox > 0.0 && oy > 0.0) {
        grid[static_cast<size_t>(r * w + c)] = 1;
        any = true;
      }
    }
  }
  if (!any) {
    double cx = 0.5 * (box.x0 + box.x1);
    double cy = 0.5 * (box.y0 + box.y1);
    int64_t c = std::clamp<int64_t>(static_cast<int64_t>(cx * static_cast<double>(w)), 0, w - 1);
    int64_t r = std::clamp<int64_t>(static_cast<int64_t>(cy * static_cast<double>(h)), 0, h - 1);
    grid[static_cast<size_t>(r * w + c)] = 1;
  }
  return grid;
}

void CompositionSpec::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("composition: alpha must be in [0,1]");
  if (s_start < 1) throw ConfigError("composition: s_start must be >= 1");
  if (single_scale_only < 0) throw ConfigError("composition: single_scale_only must be >= 0");
  for (const auto& b : branches) b.box.validate();
}

ScaleMasks build_scale_masks(const CompositionSpec& spec, const ScaleSchedule& schedule) {
  ScaleMasks masks;
  size_t S = schedule.num_scales();
  masks.branch.resize(S);
  masks.background.resize(S);
  for (size_t s = 0; s < S; ++s) {
    int64_t hs = schedule.levels[s][0], ws = schedule.levels[s][1];
    masks.background[s].assign(static_cast<size_t>(hs * ws), 1);
    for (const auto& b : spec.branches) {
      auto grid = rasterize_box(b.box, hs, ws);
      for (size_t i = 0; i < grid.size(); ++i)
        if (grid[i]) masks.background[s][i] = 0;  // b_G = 1 - OR_i b_i
      masks.branch[s].push_back(std::move(grid));
    }
  }
  return masks;
}

Tensor fuse_features(const Tensor& f_local, const Tensor& f_global,
                     const std::vector<uint8_t>& row_mask) {
  if (f_local.shape() != f_global.shape())
    throw ShapeError("fuse_features: shape mismatch " + shape_str(f_local.shape()) + " vs " +
                     shape_str(f_global.shape()));
  if (f_local.ndim() != 2 || static_cast<int64_t>(row_mask.size()) != f_local.dim(0))
    throw ShapeError("fuse_features: mask covers " + std::to_string(row_mask.size()) +
                     " rows for " + shape_str(f_local.shape()));
  int64_t rows = f_local.dim(0), d = f_local.dim(1);
  std::vector<double> out(static_cast<size_t>(rows * d));
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = row_mask[static_cast<size_t>(r)] ? f_local.value().data() + r * d
                                                         : f_global.value().data() + r * d;
    std::memcpy(out.data() + r * d, src, static_cast<size_t>(d) * sizeof(double));
  }
  return Tensor::from(f_local.shape(), std::move(out));
}

Tensor blend_logits(const Tensor& global_logits, const Tensor& local_logits, double alpha) {
  if (global_logits.shape() != local_logits.shape())
    throw ShapeError("blend_logits: shape mismatch");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("blend_logits: alpha must be in [0,1]");
  std::vector<double> out(global_logits.value().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = alpha * global_logits.value()[i] + (1.0 - alpha) * local_logits.value()[i];
  return Tensor::from(global_logits.shape(), std::move(out));
}

Tensor merge_logits(const Tensor& global_logits, const std::vector<Tensor>& blended,
                    const std::vector<std::vector<uint8_t>>& branch_masks,
                    const std::vector<uint8_t>& background_mask, OverlapMode mode) {
  int64_t cells = global_logits.dim(0), v = global_logits.dim(1);
  if (blended.size() != branch_masks.size())
    throw ShapeError("merge_logits: " + std::to_string(blended.size()) + " logit sets for " +
                     std::to_string(branch_masks.size()) + " masks");
  for (const auto& b : blended)
    if (b.shape() != global_logits.shape()) throw ShapeError("merge_logits: shape mismatch");
  for (const auto& m : branch_masks)
    if (static_cast<int64_t>(m.size()) != cells) throw ShapeError("merge_logits: mask size mismatch");

  if (mode == OverlapMode::kStrict) {
    std::string offenders;
    for (int64_t i = 0; i < cells; ++i) {
      int owners = 0;
      for (const auto& m : branch_masks) owners += m[static_cast<size_t>(i)] ? 1 : 0;
      if (owners > 1) offenders += (offenders.empty() ? "" : ",") + std::to_string(i);
    }
    if (!offenders.empty())
      throw StateError("merge_logits: overlapping masks at cells {" + offenders + "}");
  }

  std::vector<double> out(global_logits.value().size());
  for (int64_t i = 0; i < cells; ++i) {
    const double* src = nullptr;
    if (background_mask[static_cast<size_t>(i)]) src = global_logits.value().data() + i * v;
    for (size_t b = 0; b < branch_masks.size(); ++b)
      if (branch_masks[b][static_cast<size_t>(i)]) src = blended[b].value().data() + i * v;
    if (src == nullptr) src = global_logits.value().data() + i * v;  // empty-box background
    std::memcpy(out.data() + i * v, src, static_cast<size_t>(v) * sizeof(double));
  }
  return Tensor::from(global_logits.shape(), std::move(out));
}

namespace {

// Row mask over the current prefix sequence: prefix position 0 is excluded
// from spatial masking; grid rows of scale s' take the branch's mask
// rasterized at that scale's resolution.
std::vector<uint8_t> sequence_row_mask(const ScaleMasks& masks, size_t branch_index,
                                       size_t num_scales) {
  std::vector<uint8_t> rows;
  rows.push_back(0);
  for (size_t s = 0; s < num_scales; ++s) {
    const auto& grid = masks.branch[s][branch_index];
    rows.insert(rows.end(), grid.begin(), grid.end());
  }
  return rows;
}

}  // namespace

ComposeResult compose_sample(const VarModel& model, const Tokenizer& tokenizer,
                             const CompositionSpec& spec, const SampleParams& params,
                             Rng& rng) {
  spec.validate();
  model.validate_prompt(spec.global_prompt);
  for (const auto& b : spec.branches) model.validate_prompt(b.prompt);
  const VarConfig& cfg = model.config();
  const ScaleSchedule& schedule = cfg.schedule;
  size_t S = schedule.num_scales();
  size_t B = spec.branches.size();
  int64_t h = schedule.levels.back()[0], w = schedule.levels.back()[1];
  int64_t c = cfg.feature_dim;

  ComposeResult result;
  result.pyramid.schedule = schedule;
  result.pyramid.target_h = h;
  result.pyramid.target_w = w;
  result.masks = build_scale_masks(spec, schedule);

  auto bound = bind_params(model.params(), false);

  // one running sum per branch (0 = global); synchronized after every scale
  std::vector<Tensor> partials(B + 1, Tensor::zeros({h, w, c}));
  std::vector<Tensor> inputs;

  for (size_t s = 0; s < S; ++s) {
    int64_t hs = schedule.levels[s][0], ws = schedule.levels[s][1];
    if (s == 0)
      inputs.push_back(Tensor::zeros({hs, ws, c}));
    else
      inputs.push_back((hs == h && ws == w) ? partials[0] : avg_pool2d(partials[0], hs, ws));

    bool intervene;
    if (spec.single_scale_only > 0)
      intervene = static_cast<int64_t>(s + 1) == spec.single_scale_only;
    else
      intervene = static_cast<int64_t>(s + 1) >= spec.s_start;
    intervene = intervene && B > 0;
    result.intervened.push_back(intervene);

    Tensor scale_logits;
    if (!intervene) {
      auto logits = VarModel::forward_graph(cfg, bound, spec.global_prompt, inputs, s + 1);
      scale_logits = logits.per_scale[s];
    } else {
      // global pass, capturing the fused-site hidden states per layer
      std::vector<Tensor> captured(static_cast<size_t>(cfg.n_layers));
      ForwardHooks capture;
      auto capture_fn = [&captured](int layer, const Tensor& hidden) {
        captured[static_cast<size_t>(layer)] = hidden;
        return Tensor();
      };
      if (spec.fusion == FusionSite::kCrossAttention)
        capture.post_cross_attention = capture_fn;
      else
        capture.post_block = capture_fn;
      auto global_logits =
          VarModel::forward_graph(cfg, bound, spec.global_prompt, inputs, s + 1, &capture);
      Tensor L_G = global_logits.per_scale[s];

      // local branches with per-layer feature fusion against the capture
      std::vector<Tensor> blended;
      for (size_t b = 0; b < B; ++b) {
        auto row_mask = sequence_row_mask(result.masks, b, s + 1);
        ForwardHooks fusion;
        auto fuse_fn = [&captured, &row_mask](int layer, const Tensor& hidden) {
          return fuse_features(hidden, captured[static_cast<size_t>(layer)], row_mask);
        };
        if (spec.fusion == FusionSite::kCrossAttention)
          fusion.post_cross_attention = fuse_fn;
        else
          fusion.post_block = fuse_fn;
        auto local_logits =
            VarModel::forward_graph(cfg, bound, spec.branches[b].prompt, inputs, s + 1, &fusion);
        blended.push_back(blend_logits(L_G, local_logits.per_scale[s], spec.alpha));
      }

      std::vector<std::vector<uint8_t>> branch_masks_s;
      for (size_t b = 0; b < B; ++b) branch_masks_s.push_back(result.masks.branch[s][b]);
      scale_logits =
          merge_logits(L_G, blended, branch_masks_s, result.masks.background[s], spec.overlap);
    }

    // single draw sequence from the merged logits, shared by every branch
    std::vector<int64_t> grid(static_cast<size_t>(hs * ws));
    for (int64_t i = 0; i < hs * ws; ++i)
      grid[static_cast<size_t>(i)] = sample_from_logits(
          scale_logits.value().data() + i * cfg.vocab, cfg.vocab, params, rng);

    Tensor decoded = tokenizer.codebook().decode_grid(grid, hs, ws);
    Tensor up = (hs == h && ws == w) ? decoded : bilinear_resize2d(decoded, h, w);
    std::vector<std::string> hashes;
    for (auto& partial : partials) {
      partial = add(partial, up);
      hashes.push_back(sha256_hex(partial.value()));
    }
    result.sync_hashes.push_back(std::move(hashes));
    result.pyramid.grids.push_back(std::move(grid));
  }
  return result;
}

}  // namespace cpcvar
