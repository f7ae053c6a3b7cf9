#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cpcvar/rng.hpp"
#include "cpcvar/tensor.hpp"
#include "cpcvar/tokenizer.hpp"

namespace cpcvar {

enum class ParamGroup : uint8_t {
  kCrossAttention = 0,
  kFeedForward = 1,
  kSelfAttention = 2,
  kEmbedding = 3,
  kHead = 4,
  kNorm = 5,
};

const char* param_group_name(ParamGroup group);

struct ParamSegment {
  std::string name;
  int64_t offset = 0;
  int64_t size = 0;
  Shape shape;
  int32_t layer = -1;  // -1 for shared parameters
  ParamGroup group = ParamGroup::kEmbedding;
};

struct VarConfig {
  ScaleSchedule schedule = ScaleSchedule::desk_default();
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_layers = 4;
  int64_t ffn_hidden = 256;
  int64_t vocab = 64;         // must match codebook size
  int64_t feature_dim = 8;    // continuous map channels (codebook dim)
  int64_t prompt_vocab = 32;  // base prompt tokens
  int64_t max_concepts = 8;   // registered concept tokens on top
  int64_t max_prompt_len = 8;

  int64_t prompt_rows() const { return prompt_vocab + max_concepts; }
  void validate() const;
};

// Flat 64-bit parameter vector with a segment table mapping index ranges to
// (layer, group). The segment table is stable across save/load; masked
// updates and saliency are expressed over the cross-attention index subset.
class ParamStore {
 public:
  ParamStore() = default;
  static ParamStore init(const VarConfig& config, uint64_t seed);

  int64_t dim() const { return static_cast<int64_t>(values_.size()); }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  const std::vector<ParamSegment>& segments() const { return segments_; }
  const ParamSegment& segment(std::string_view name) const;
  size_t segment_index(std::string_view name) const;

  // Flat indices of all cross-attention coordinates, ascending. The mask
  // index space of the continual trainer is positions in this list.
  const std::vector<int64_t>& ca_indices() const { return ca_indices_; }
  int64_t ca_dim() const { return static_cast<int64_t>(ca_indices_.size()); }

  std::string content_hash() const;
  // Hash over every coordinate outside the given group (freezing audits).
  std::string hash_excluding(ParamGroup group, const std::vector<int64_t>& extra_excluded) const;

  std::vector<uint8_t> serialize_segment_table() const;
  static std::vector<ParamSegment> deserialize_segment_table(const std::vector<uint8_t>& bytes);
  static ParamStore from_parts(std::vector<ParamSegment> segments, std::vector<double> values);

 private:
  void rebuild_index();
  std::vector<ParamSegment> segments_;
  std::vector<double> values_;
  std::map<std::string, size_t, std::less<>> by_name_;
  std::vector<int64_t> ca_indices_;
};

// Leaf tensors for one differentiated pass, bound per segment from a flat
// parameter vector.
struct BoundParams {
  const ParamStore* store = nullptr;
  std::vector<Tensor> tensors;  // parallel to store->segments()

  const Tensor& get(std::string_view name) const;
};

BoundParams bind_params(const ParamStore& store, bool requires_grad);
// Gradient in flat layout, zero where a segment was never touched.
std::vector<double> collect_gradients(const BoundParams& bound);

// Prompt token ids over the base vocabulary plus registered concept tokens.
struct PromptSpec {
  std::vector<int64_t> ids;
};

// Tiny fixed word table plus registered concept tokens; concept ids start at
// the base vocabulary size.
class PromptVocab {
 public:
  PromptVocab() = default;
  PromptVocab(int64_t base_size, int64_t max_concepts)
      : base_size_(base_size), max_concepts_(max_concepts) {}

  int64_t base_size() const { return base_size_; }
  int64_t size() const { return base_size_ + static_cast<int64_t>(concepts_.size()); }
  const std::vector<std::string>& concepts() const { return concepts_; }

  int64_t register_concept(const std::string& name);
  bool has_concept(const std::string& name) const;
  int64_t concept_id(const std::string& name) const;

 private:
  int64_t base_size_ = 0;
  int64_t max_concepts_ = 0;
  std::vector<std::string> concepts_;
};

struct ScaleWeights {
  std::vector<double> w;
  static ScaleWeights all_ones(size_t num_scales);
  // Paper-style down-weighting: the finest third of scales get `fine`.
  static ScaleWeights fine_scales(size_t num_scales, double fine);
  void validate(size_t num_scales) const;
};

struct LogitsPyramid {
  std::vector<Tensor> per_scale;  // [h_s*w_s, V] each
};

// Boolean attention mask over prefix + flattened grid positions: tokens see
// every strictly earlier scale, their own scale, and the always-attendable
// prompt-summary prefix.
struct BlockCausalMask {
  int64_t seq_len = 0;
  std::vector<uint8_t> allow;  // row-major seq_len x seq_len

  bool at(int64_t query, int64_t key) const {
    return allow[static_cast<size_t>(query * seq_len + key)] != 0;
  }
};

BlockCausalMask block_causal_mask(const ScaleSchedule& schedule);

struct SampleParams {
  double temperature = 1.0;
  int64_t top_k = 0;  // 0 means full vocabulary
};

// Deterministic draw from one logit row under temperature + top-k.
int64_t sample_from_logits(const double* logits, int64_t vocab, const SampleParams& params,
                           Rng& rng);

struct ForwardHooks {
  // Replace the hidden state right after a cross-attention residual add (or
  // after the whole block). Return an undefined tensor to keep the original.
  std::function<Tensor(int layer, const Tensor& hidden)> post_cross_attention;
  std::function<Tensor(int layer, const Tensor& hidden)> post_block;
};

// Scale-wise causal transformer for next-scale prediction. Prompt
// conditioning enters every layer through cross-attention only; a learned
// prompt-independent summary token is prefixed so scale 1 has context.
class VarModel {
 public:
  VarModel() = default;
  VarModel(VarConfig config, uint64_t init_seed);

  const VarConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  PromptVocab& vocab() { return vocab_; }
  const PromptVocab& vocab() const { return vocab_; }

  void validate_prompt(const PromptSpec& prompt) const;

  // Graph-building forward over the first `num_scales` scales. scale_inputs
  // holds one [h_s,w_s,c] map per scale (entry 0 is the zero map).
  static LogitsPyramid forward_graph(const VarConfig& config, const BoundParams& params,
                                     const PromptSpec& prompt,
                                     const std::vector<Tensor>& scale_inputs, size_t num_scales,
                                     const ForwardHooks* hooks = nullptr);

  // Teacher-forced logits for every scale in one pass (no gradients).
  LogitsPyramid forward_teacher_forced(const PromptSpec& prompt, const TokenPyramid& pyramid,
                                       const Tokenizer& tokenizer) const;

  static Tensor nll(const LogitsPyramid& logits, const TokenPyramid& pyramid);
  static Tensor weighted_nll(const LogitsPyramid& logits, const TokenPyramid& pyramid,
                             const ScaleWeights& weights);

  // Scale-by-scale decoding; deterministic under the rng stream.
  TokenPyramid sample(const Tokenizer& tokenizer, const PromptSpec& prompt,
                      const SampleParams& params, Rng& rng) const;

  void save(const std::string& path) const;
  static VarModel load(const std::string& path);
  std::string content_hash() const { return params_.content_hash(); }

 private:
  VarConfig config_;
  ParamStore params_;
  PromptVocab vocab_;
};

}  // namespace cpcvar
