#include "cpcvar/var_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cpcvar/container.hpp"
#include "cpcvar/errors.hpp"
#include "cpcvar/hash.hpp"

namespace cpcvar {

namespace {

constexpr double kMaskBias = -1e30;

std::vector<ParamSegment> build_layout(const VarConfig& cfg) {
  std::vector<ParamSegment> segs;
  int64_t offset = 0;
  auto push = [&](std::string name, Shape shape, int32_t layer, ParamGroup group) {
    ParamSegment s;
    s.name = std::move(name);
    s.shape = std::move(shape);
    s.size = shape_numel(s.shape);
    s.offset = offset;
    s.layer = layer;
    s.group = group;
    offset += s.size;
    segs.push_back(std::move(s));
  };

  int64_t d = cfg.d_model;
  push("embed.prompt", {cfg.prompt_rows(), d}, -1, ParamGroup::kEmbedding);
  push("embed.pos", {cfg.schedule.total_cells(), d}, -1, ParamGroup::kEmbedding);
  push("embed.input_proj", {cfg.feature_dim, d}, -1, ParamGroup::kEmbedding);
  push("embed.bos", {1, d}, -1, ParamGroup::kEmbedding);
  for (int32_t l = 0; l < cfg.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    push(p + "ln1.gain", {d}, l, ParamGroup::kNorm);
    push(p + "ln1.bias", {d}, l, ParamGroup::kNorm);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      push(p + "sa." + w, {d, d}, l, ParamGroup::kSelfAttention);
    push(p + "ln2.gain", {d}, l, ParamGroup::kNorm);
    push(p + "ln2.bias", {d}, l, ParamGroup::kNorm);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      push(p + "ca." + w, {d, d}, l, ParamGroup::kCrossAttention);
    push(p + "ln3.gain", {d}, l, ParamGroup::kNorm);
    push(p + "ln3.bias", {d}, l, ParamGroup::kNorm);
    push(p + "ffn.w1", {d, cfg.ffn_hidden}, l, ParamGroup::kFeedForward);
    push(p + "ffn.b1", {cfg.ffn_hidden}, l, ParamGroup::kFeedForward);
    push(p + "ffn.w2", {cfg.ffn_hidden, d}, l, ParamGroup::kFeedForward);
    push(p + "ffn.b2", {d}, l, ParamGroup::kFeedForward);
  }
  push("final_ln.gain", {d}, -1, ParamGroup::kNorm);
  push("final_ln.bias", {d}, -1, ParamGroup::kNorm);
  push("head.w", {d, cfg.vocab}, -1, ParamGroup::kHead);
  return segs;
}

bool is_gain(const std::string& name) {
  return name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
}

bool is_bias(const std::string& name) {
  return (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) ||
         (name.find(".b1") != std::string::npos) || (name.find(".b2") != std::string::npos);
}

}  // namespace

const char* param_group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::kCrossAttention: return "cross-attention";
    case ParamGroup::kFeedForward: return "feed-forward";
    case ParamGroup::kSelfAttention: return "self-attention";
    case ParamGroup::kEmbedding: return "embedding";
    case ParamGroup::kHead: return "head";
    case ParamGroup::kNorm: return "norm";
  }
  return "unknown";
}

void VarConfig::validate() const {
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (vocab < 2) throw ConfigError("model: vocab must be at least 2");
  if (max_prompt_len < 1) throw ConfigError("model: max_prompt_len must be positive");
  schedule.validate();
  if (schedule.levels[0][0] != 1 || schedule.levels[0][1] != 1)
    throw ConfigError("model: schedule must start at (1,1)");
}

// ---- ParamStore ----

ParamStore ParamStore::init(const VarConfig& config, uint64_t seed) {
  config.validate();
  ParamStore store;
  store.segments_ = build_layout(config);
  int64_t total = 0;
  for (const auto& s : store.segments_) total += s.size;
  store.values_.assign(static_cast<size_t>(total), 0.0);

  Rng rng(seed);
  for (const auto& s : store.segments_) {
    double* dst = store.values_.data() + s.offset;
    if (is_gain(s.name)) {
      std::fill(dst, dst + s.size, 1.0);
    } else if (is_bias(s.name)) {
      std::fill(dst, dst + s.size, 0.0);
    } else {
      for (int64_t i = 0; i < s.size; ++i) dst[i] = rng.normal(0.0, 0.02);
    }
  }
  store.rebuild_index();
  return store;
}

void ParamStore::rebuild_index() {
  by_name_.clear();
  ca_indices_.clear();
  for (size_t i = 0; i < segments_.size(); ++i) {
    by_name_[segments_[i].name] = i;
    if (segments_[i].group == ParamGroup::kCrossAttention)
      for (int64_t j = 0; j < segments_[i].size; ++j)
        ca_indices_.push_back(segments_[i].offset + j);
  }
}

const ParamSegment& ParamStore::segment(std::string_view name) const {
  return segments_[segment_index(name)];
}

size_t ParamStore::segment_index(std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end())
    throw StateError("ParamStore: unknown segment " + std::string(name));
  return it->second;
}

std::string ParamStore::content_hash() const { return sha256_hex(values_); }

std::string ParamStore::hash_excluding(ParamGroup group,
                                       const std::vector<int64_t>& extra_excluded) const {
  std::vector<uint8_t> keep(values_.size(), 1);
  for (const auto& s : segments_)
    if (s.group == group)
      std::fill(keep.begin() + s.offset, keep.begin() + s.offset + s.size, uint8_t{0});
  for (int64_t idx : extra_excluded) keep[static_cast<size_t>(idx)] = 0;
  std::vector<double> rest;
  rest.reserve(values_.size());
  for (size_t i = 0; i < values_.size(); ++i)
    if (keep[i]) rest.push_back(values_[i]);
  return sha256_hex(rest);
}

namespace {

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void append_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
uint32_t read_u32(const std::vector<uint8_t>& in, size_t& pos) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in.at(pos++)) << (8 * i);
  return v;
}
uint64_t read_u64(const std::vector<uint8_t>& in, size_t& pos) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in.at(pos++)) << (8 * i);
  return v;
}

}  // namespace

std::vector<uint8_t> ParamStore::serialize_segment_table() const {
  std::vector<uint8_t> out;
  append_u32(out, static_cast<uint32_t>(segments_.size()));
  for (const auto& s : segments_) {
    append_u32(out, static_cast<uint32_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    append_u64(out, static_cast<uint64_t>(s.offset));
    append_u64(out, static_cast<uint64_t>(s.size));
    append_u32(out, static_cast<uint32_t>(s.layer));
    out.push_back(static_cast<uint8_t>(s.group));
    append_u32(out, static_cast<uint32_t>(s.shape.size()));
    for (int64_t d : s.shape) append_u64(out, static_cast<uint64_t>(d));
  }
  return out;
}

std::vector<ParamSegment> ParamStore::deserialize_segment_table(
    const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  uint32_t count = read_u32(bytes, pos);
  std::vector<ParamSegment> segs(count);
  for (auto& s : segs) {
    uint32_t len = read_u32(bytes, pos);
    s.name.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + len));
    pos += len;
    s.offset = static_cast<int64_t>(read_u64(bytes, pos));
    s.size = static_cast<int64_t>(read_u64(bytes, pos));
    s.layer = static_cast<int32_t>(read_u32(bytes, pos));
    s.group = static_cast<ParamGroup>(bytes.at(pos++));
    uint32_t ndim = read_u32(bytes, pos);
    s.shape.resize(ndim);
    for (auto& d : s.shape) d = static_cast<int64_t>(read_u64(bytes, pos));
  }
  return segs;
}

ParamStore ParamStore::from_parts(std::vector<ParamSegment> segments,
                                  std::vector<double> values) {
  ParamStore store;
  store.segments_ = std::move(segments);
  store.values_ = std::move(values);
  int64_t total = 0;
  for (const auto& s : store.segments_) {
    if (s.offset != total) throw StateError("ParamStore: segment table does not partition [0,D)");
    total += s.size;
  }
  if (total != store.dim()) throw StateError("ParamStore: values do not match segment table");
  store.rebuild_index();
  return store;
}

// ---- bound params ----

const Tensor& BoundParams::get(std::string_view name) const {
  return tensors[store->segment_index(name)];
}

BoundParams bind_params(const ParamStore& store, bool requires_grad) {
  BoundParams bound;
  bound.store = &store;
  bound.tensors.reserve(store.segments().size());
  for (const auto& s : store.segments()) {
    std::vector<double> vals(store.values().begin() + s.offset,
                             store.values().begin() + s.offset + s.size);
    bound.tensors.push_back(Tensor::from(s.shape, std::move(vals), requires_grad));
  }
  return bound;
}

std::vector<double> collect_gradients(const BoundParams& bound) {
  std::vector<double> grad(static_cast<size_t>(bound.store->dim()), 0.0);
  const auto& segs = bound.store->segments();
  for (size_t i = 0; i < segs.size(); ++i) {
    if (!bound.tensors[i].has_grad()) continue;
    const auto& g = bound.tensors[i].grad();
    std::copy(g.begin(), g.end(), grad.begin() + segs[i].offset);
  }
  return grad;
}

// ---- PromptVocab ----

int64_t PromptVocab::register_concept(const std::string& name) {
  if (has_concept(name))
    throw StateError("PromptVocab: concept '" + name + "' already registered");
  if (static_cast<int64_t>(concepts_.size()) >= max_concepts_)
    throw StateError("PromptVocab: concept capacity " + std::to_string(max_concepts_) +
                     " exhausted");
  concepts_.push_back(name);
  return base_size_ + static_cast<int64_t>(concepts_.size()) - 1;
}

bool PromptVocab::has_concept(const std::string& name) const {
  return std::find(concepts_.begin(), concepts_.end(), name) != concepts_.end();
}

int64_t PromptVocab::concept_id(const std::string& name) const {
  auto it = std::find(concepts_.begin(), concepts_.end(), name);
  if (it == concepts_.end())
    throw StateError("PromptVocab: unknown concept token '" + name + "'");
  return base_size_ + (it - concepts_.begin());
}

// ---- ScaleWeights ----

ScaleWeights ScaleWeights::all_ones(size_t num_scales) {
  return ScaleWeights{std::vector<double>(num_scales, 1.0)};
}

ScaleWeights ScaleWeights::fine_scales(size_t num_scales, double fine) {
  ScaleWeights w = all_ones(num_scales);
  size_t start = num_scales - num_scales / 3;
  for (size_t s = start; s < num_scales; ++s) w.w[s] = fine;
  return w;
}

void ScaleWeights::validate(size_t num_scales) const {
  if (w.size() != num_scales)
    throw ShapeError("scale weights: " + std::to_string(w.size()) + " entries for " +
                     std::to_string(num_scales) + " scales");
  for (double v : w) {
    if (!std::isfinite(v)) throw NumericError("scale weights: non-finite entry");
    if (v < 0.0) throw ConfigError("scale weights: negative weight");
  }
}

// ---- mask ----

BlockCausalMask block_causal_mask(const ScaleSchedule& schedule) {
  schedule.validate();
  int64_t cells = schedule.total_cells();
  BlockCausalMask mask;
  mask.seq_len = 1 + cells;
  mask.allow.assign(static_cast<size_t>(mask.seq_len * mask.seq_len), 0);

  // prefix column is always attendable; prefix row sees only itself
  for (int64_t q = 0; q < mask.seq_len; ++q) mask.allow[static_cast<size_t>(q * mask.seq_len)] = 1;

  int64_t row_start = 1;
  for (size_t s = 0; s < schedule.num_scales(); ++s) {
    int64_t n = schedule.cells(s);
    int64_t visible_end = row_start + n;  // earlier scales plus own scale
    for (int64_t q = row_start; q < row_start + n; ++q)
      for (int64_t k = 1; k < visible_end; ++k)
        mask.allow[static_cast<size_t>(q * mask.seq_len + k)] = 1;
    row_start += n;
  }
  return mask;
}

// ---- VarModel ----

VarModel::VarModel(VarConfig config, uint64_t init_seed)
    : config_(std::move(config)),
      params_(ParamStore::init(config_, init_seed)),
      vocab_(config_.prompt_vocab, config_.max_concepts) {}

void VarModel::validate_prompt(const PromptSpec& prompt) const {
  if (static_cast<int64_t>(prompt.ids.size()) > config_.max_prompt_len)
    throw StateError("prompt: length " + std::to_string(prompt.ids.size()) + " exceeds maximum " +
                     std::to_string(config_.max_prompt_len));
  if (prompt.ids.empty()) throw StateError("prompt: empty");
  for (int64_t id : prompt.ids)
    if (id < 0 || id >= vocab_.size())
      throw StateError("prompt: token id " + std::to_string(id) + " out of range [0," +
                       std::to_string(vocab_.size()) + ")");
}

namespace {

// Multi-head attention: query rows x, key/value rows kv, optional additive
// mask bias on the scores.
Tensor attention(const Tensor& x, const Tensor& kv, const Tensor& wq, const Tensor& wk,
                 const Tensor& wv, const Tensor& wo, int64_t n_heads, const Tensor* mask_bias) {
  int64_t d = x.dim(1);
  int64_t hd = d / n_heads;
  auto q = matmul(x, wq);
  auto k = matmul(kv, wk);
  auto v = matmul(kv, wv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int64_t h = 0; h < n_heads; ++h) {
    auto qh = slice(q, 1, h * hd, (h + 1) * hd);
    auto kh = slice(k, 1, h * hd, (h + 1) * hd);
    auto vh = slice(v, 1, h * hd, (h + 1) * hd);
    auto scores = div_scalar(matmul(qh, transpose2d(kh)), std::sqrt(static_cast<double>(hd)));
    if (mask_bias != nullptr) scores = add(scores, *mask_bias);
    heads.push_back(matmul(softmax_lastdim(scores), vh));
  }
  return matmul(concat(heads, 1), wo);
}

}  // namespace

LogitsPyramid VarModel::forward_graph(const VarConfig& config, const BoundParams& params,
                                      const PromptSpec& prompt,
                                      const std::vector<Tensor>& scale_inputs, size_t num_scales,
                                      const ForwardHooks* hooks) {
  if (num_scales == 0 || num_scales > config.schedule.num_scales())
    throw ShapeError("forward: scale count " + std::to_string(num_scales) + " out of range");
  if (scale_inputs.size() < num_scales)
    throw ShapeError("forward: " + std::to_string(scale_inputs.size()) + " scale inputs for " +
                     std::to_string(num_scales) + " scales");

  ScaleSchedule prefix_schedule = config.schedule.prefix(num_scales);
  int64_t grid_cells = prefix_schedule.total_cells();
  int64_t d = config.d_model;

  // grid rows: projected continuous maps plus per-position embeddings
  std::vector<Tensor> flat_inputs;
  flat_inputs.reserve(num_scales);
  for (size_t s = 0; s < num_scales; ++s) {
    int64_t hs = prefix_schedule.levels[s][0], ws = prefix_schedule.levels[s][1];
    if (scale_inputs[s].shape() != Shape{hs, ws, config.feature_dim})
      throw ShapeError("forward: scale " + std::to_string(s) + " input " +
                       shape_str(scale_inputs[s].shape()) + " does not match schedule");
    flat_inputs.push_back(reshape(scale_inputs[s], {hs * ws, config.feature_dim}));
  }
  Tensor cells = num_scales == 1 ? flat_inputs[0] : concat(flat_inputs, 0);
  Tensor x_grid = matmul(cells, params.get("embed.input_proj"));
  Tensor pos_table = params.get("embed.pos");
  Tensor pos = grid_cells == pos_table.dim(0) ? pos_table : slice(pos_table, 0, 0, grid_cells);
  x_grid = add(x_grid, pos);
  Tensor x = concat({params.get("embed.bos"), x_grid}, 0);  // [1+N, d]

  Tensor prompt_emb = embedding_lookup(params.get("embed.prompt"), prompt.ids);

  BlockCausalMask mask = block_causal_mask(prefix_schedule);
  std::vector<double> bias(mask.allow.size());
  for (size_t i = 0; i < bias.size(); ++i) bias[i] = mask.allow[i] ? 0.0 : kMaskBias;
  Tensor mask_bias = Tensor::from({mask.seq_len, mask.seq_len}, std::move(bias));

  for (int32_t l = 0; l < config.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    auto h1 = layer_norm(x, params.get(p + "ln1.gain"), params.get(p + "ln1.bias"));
    x = add(x, attention(h1, h1, params.get(p + "sa.wq"), params.get(p + "sa.wk"),
                         params.get(p + "sa.wv"), params.get(p + "sa.wo"), config.n_heads,
                         &mask_bias));
    auto h2 = layer_norm(x, params.get(p + "ln2.gain"), params.get(p + "ln2.bias"));
    x = add(x, attention(h2, prompt_emb, params.get(p + "ca.wq"), params.get(p + "ca.wk"),
                         params.get(p + "ca.wv"), params.get(p + "ca.wo"), config.n_heads,
                         nullptr));
    if (hooks != nullptr && hooks->post_cross_attention) {
      Tensor replaced = hooks->post_cross_attention(l, x);
      if (replaced.defined()) x = replaced;
    }
    auto h3 = layer_norm(x, params.get(p + "ln3.gain"), params.get(p + "ln3.bias"));
    auto ffn = bias_add(
        matmul(gelu(bias_add(matmul(h3, params.get(p + "ffn.w1")), params.get(p + "ffn.b1"))),
               params.get(p + "ffn.w2")),
        params.get(p + "ffn.b2"));
    x = add(x, ffn);
    if (hooks != nullptr && hooks->post_block) {
      Tensor replaced = hooks->post_block(l, x);
      if (replaced.defined()) x = replaced;
    }
  }

  auto final_x = layer_norm(x, params.get("final_ln.gain"), params.get("final_ln.bias"));
  auto logits_full = matmul(final_x, params.get("head.w"));  // [1+N, V]

  LogitsPyramid out;
  int64_t row = 1;
  for (size_t s = 0; s < num_scales; ++s) {
    int64_t n = prefix_schedule.cells(s);
    out.per_scale.push_back(slice(logits_full, 0, row, row + n));
    row += n;
  }
  return out;
}

LogitsPyramid VarModel::forward_teacher_forced(const PromptSpec& prompt,
                                               const TokenPyramid& pyramid,
                                               const Tokenizer& tokenizer) const {
  validate_prompt(prompt);
  pyramid.validate(config_.vocab);
  auto inputs = tokenizer.build_scale_inputs(pyramid);
  auto bound = bind_params(params_, false);
  return forward_graph(config_, bound, prompt, inputs, pyramid.num_scales());
}

Tensor VarModel::nll(const LogitsPyramid& logits, const TokenPyramid& pyramid) {
  if (logits.per_scale.size() != pyramid.num_scales())
    throw ShapeError("nll: logits cover " + std::to_string(logits.per_scale.size()) +
                     " scales, pyramid has " + std::to_string(pyramid.num_scales()));
  Tensor acc;
  for (size_t s = 0; s < pyramid.num_scales(); ++s) {
    Tensor ce = cross_entropy_sum(logits.per_scale[s], pyramid.grids[s]);
    acc = acc.defined() ? add(acc, ce) : ce;
  }
  return acc;
}

Tensor VarModel::weighted_nll(const LogitsPyramid& logits, const TokenPyramid& pyramid,
                              const ScaleWeights& weights) {
  if (logits.per_scale.size() != pyramid.num_scales())
    throw ShapeError("weighted_nll: scale count mismatch");
  weights.validate(pyramid.num_scales());
  Tensor acc;
  for (size_t s = 0; s < pyramid.num_scales(); ++s) {
    Tensor ce = mul_scalar(cross_entropy_sum(logits.per_scale[s], pyramid.grids[s]),
                           weights.w[s]);
    acc = acc.defined() ? add(acc, ce) : ce;
  }
  return acc;
}

int64_t sample_from_logits(const double* logits, int64_t vocab, const SampleParams& params,
                           Rng& rng) {
  if (params.temperature <= 0.0) throw ConfigError("sample: temperature must be positive");
  int64_t k = params.top_k == 0 ? vocab : params.top_k;
  if (k < 1 || k > vocab)
    throw ConfigError("sample: top_k " + std::to_string(k) + " out of range [1," +
                      std::to_string(vocab) + "]");

  std::vector<int64_t> order(static_cast<size_t>(vocab));
  for (int64_t i = 0; i < vocab; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;  // ties favor the lowest index
  });
  order.resize(static_cast<size_t>(k));

  double mx = logits[order[0]] / params.temperature;
  std::vector<double> probs(order.size());
  double total = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    probs[i] = std::exp(logits[order[i]] / params.temperature - mx);
    total += probs[i];
  }
  double u = rng.uniform() * total;
  double cum = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    cum += probs[i];
    if (u < cum) return order[i];
  }
  return order.back();
}

TokenPyramid VarModel::sample(const Tokenizer& tokenizer, const PromptSpec& prompt,
                              const SampleParams& sample_params, Rng& rng) const {
  validate_prompt(prompt);
  const auto& schedule = config_.schedule;
  int64_t h = schedule.levels.back()[0], w = schedule.levels.back()[1];
  int64_t c = config_.feature_dim;

  TokenPyramid out;
  out.schedule = schedule;
  out.target_h = h;
  out.target_w = w;

  auto bound = bind_params(params_, false);
  Tensor partial = Tensor::zeros({h, w, c});
  std::vector<Tensor> inputs;
  for (size_t s = 0; s < schedule.num_scales(); ++s) {
    int64_t hs = schedule.levels[s][0], ws = schedule.levels[s][1];
    if (s == 0)
      inputs.push_back(Tensor::zeros({hs, ws, c}));
    else
      inputs.push_back((hs == h && ws == w) ? partial : avg_pool2d(partial, hs, ws));

    auto logits = forward_graph(config_, bound, prompt, inputs, s + 1);
    const Tensor& rows = logits.per_scale[s];
    std::vector<int64_t> grid(static_cast<size_t>(hs * ws));
    for (int64_t i = 0; i < hs * ws; ++i)
      grid[static_cast<size_t>(i)] =
          sample_from_logits(rows.value().data() + i * config_.vocab, config_.vocab,
                             sample_params, rng);
    Tensor decoded = tokenizer.codebook().decode_grid(grid, hs, ws);
    Tensor up = (hs == h && ws == w) ? decoded : bilinear_resize2d(decoded, h, w);
    partial = add(partial, up);
    out.grids.push_back(std::move(grid));
  }
  return out;
}

void VarModel::save(const std::string& path) const {
  Container c;
  c.put_i64("config", {config_.d_model, config_.n_heads, config_.n_layers, config_.ffn_hidden,
                       config_.vocab, config_.feature_dim, config_.prompt_vocab,
                       config_.max_concepts, config_.max_prompt_len});
  c.put_i64("schedule", config_.schedule.to_flat());
  c.put_f64("theta", params_.values(), {params_.values().size()});
  c.put_bytes("segment_table", params_.serialize_segment_table());
  std::vector<uint8_t> concepts;
  append_u32(concepts, static_cast<uint32_t>(vocab_.concepts().size()));
  for (const auto& name : vocab_.concepts()) {
    append_u32(concepts, static_cast<uint32_t>(name.size()));
    concepts.insert(concepts.end(), name.begin(), name.end());
  }
  c.put_bytes("concepts", concepts);
  c.save(path);
}

VarModel VarModel::load(const std::string& path) {
  Container c = Container::load(path);
  const auto& meta = c.get_i64("config");
  VarConfig cfg;
  cfg.d_model = meta[0];
  cfg.n_heads = meta[1];
  cfg.n_layers = meta[2];
  cfg.ffn_hidden = meta[3];
  cfg.vocab = meta[4];
  cfg.feature_dim = meta[5];
  cfg.prompt_vocab = meta[6];
  cfg.max_concepts = meta[7];
  cfg.max_prompt_len = meta[8];
  cfg.schedule = ScaleSchedule::from_flat(c.get_i64("schedule"));

  VarModel model;
  model.config_ = cfg;
  model.params_ = ParamStore::from_parts(
      ParamStore::deserialize_segment_table(c.get_bytes("segment_table")), c.get_f64("theta"));
  model.vocab_ = PromptVocab(cfg.prompt_vocab, cfg.max_concepts);

  const auto& concepts = c.get_bytes("concepts");
  size_t pos = 0;
  uint32_t count = read_u32(concepts, pos);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = read_u32(concepts, pos);
    std::string name(concepts.begin() + static_cast<long>(pos),
                     concepts.begin() + static_cast<long>(pos + len));
    pos += len;
    model.vocab_.register_concept(name);
  }
  return model;
}

}  // namespace cpcvar
