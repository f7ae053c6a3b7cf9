#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cpcvar/image.hpp"
#include "cpcvar/rng.hpp"
#include "cpcvar/tensor.hpp"

namespace cpcvar {

// Resolution ladder for next-scale prediction. First scale is (1,1); both
// dimensions are non-decreasing and the last scale equals the feature grid.
struct ScaleSchedule {
  std::vector<std::array<int64_t, 2>> levels;

  static ScaleSchedule desk_default();  // (1,1)..(8,8), S = 6
  static ScaleSchedule from_flat(const std::vector<int64_t>& flat);

  size_t num_scales() const { return levels.size(); }
  int64_t cells(size_t s) const { return levels[s][0] * levels[s][1]; }
  int64_t total_cells() const;
  ScaleSchedule prefix(size_t len) const;
  std::vector<int64_t> to_flat() const;

  void validate() const;
  void validate_target(int64_t h, int64_t w) const;

  bool operator==(const ScaleSchedule& other) const { return levels == other.levels; }
};

// Per-scale discrete token grids; the autoregressive unit of the model.
struct TokenPyramid {
  ScaleSchedule schedule;
  std::vector<std::vector<int64_t>> grids;
  int64_t target_h = 0, target_w = 0;

  size_t num_scales() const { return grids.size(); }
  void validate(int64_t vocab) const;
};

struct Codebook {
  int64_t size = 0;
  int64_t dim = 0;
  std::vector<double> vectors;  // [size, dim]
  bool trained = false;

  const double* vec(int64_t idx) const { return vectors.data() + idx * dim; }
  // Nearest centroid by squared distance; ties broken by lowest index.
  int64_t nearest(const double* cell) const;
  Tensor decode_grid(const std::vector<int64_t>& grid, int64_t h, int64_t w) const;
};

// Lloyd k-means with a fixed iteration count; deterministic under the rng.
// Returns k*dim centroid values. Empty clusters are reseeded with the point
// farthest from its assigned centroid.
std::vector<double> kmeans(const std::vector<double>& points, int64_t n, int64_t dim, int64_t k,
                           int64_t iters, Rng& rng);

// Frozen patch autoencoder standing in for the vision encoder/decoder: two
// stride-2 patch convolutions each way, trained once on the base corpus.
class PatchAutoencoder {
 public:
  static PatchAutoencoder init(int64_t hidden_dim, int64_t feature_dim, Rng& rng);

  Tensor encode(const Image& image) const;
  Image decode(const Tensor& features) const;

  // Reconstruction graph from leaf parameter tensors; used by training only.
  struct Params {
    Tensor enc_w1, enc_b1, enc_w2, enc_b2;
    Tensor dec_w1, dec_b1, dec_w2, dec_b2;
    std::vector<Tensor*> all();
  };
  Params leaf_params(bool requires_grad) const;
  void assign_from(const Params& params);
  static Tensor encode_graph(const Params& p, const Tensor& image);
  static Tensor decode_graph(const Params& p, const Tensor& features);

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

  int64_t hidden_dim() const { return hidden_dim_; }
  int64_t feature_dim() const { return feature_dim_; }

 private:
  int64_t hidden_dim_ = 0;
  int64_t feature_dim_ = 0;
  // enc_w1 [12,hidden], enc_w2 [4*hidden,feature]; decoder mirrors.
  std::vector<double> enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  std::vector<double> dec_w1_, dec_b1_, dec_w2_, dec_b2_;
};

struct TokenizerConfig {
  int64_t image_size = 32;
  int64_t hidden_dim = 16;
  int64_t feature_dim = 8;
  int64_t codebook_size = 64;
  int64_t train_steps = 400;
  int64_t kmeans_iters = 25;
  double learning_rate = 1e-2;
  ScaleSchedule schedule = ScaleSchedule::desk_default();
};

// Image <-> multi-scale token pyramid codec. Immutable once trained; all
// quantization calls are stateless and safe to share across threads.
class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(TokenizerConfig config, PatchAutoencoder autoencoder, Codebook codebook);

  const TokenizerConfig& config() const { return config_; }
  const Codebook& codebook() const { return codebook_; }
  const ScaleSchedule& schedule() const { return config_.schedule; }
  const PatchAutoencoder& autoencoder() const { return autoencoder_; }

  // Deterministic feature map [h,w,c] from the frozen encoder.
  Tensor encode_image(const Image& image) const;

  // Residual quantization loop: pool the residual to scale s, assign each
  // cell to its nearest code, upsample the decoded grid and subtract.
  TokenPyramid multiscale_quantize(const Tensor& fmap) const;
  TokenPyramid multiscale_quantize(const Tensor& fmap, const ScaleSchedule& schedule) const;

  // Exact sum of upsampled decoded grids; no renormalization.
  Tensor reconstruct(const TokenPyramid& pyramid) const;

  // down(f_s, (h_{s+1}, w_{s+1})) of the running sum after scale s.
  Tensor next_scale_input(const Tensor& partial_sum, size_t scale_index) const;

  // Teacher-forcing inputs per scale: entry 0 is zeros at (1,1); entry s is
  // the pooled partial sum of scales < s at resolution (h_s, w_s).
  std::vector<Tensor> build_scale_inputs(const TokenPyramid& pyramid) const;

  TokenPyramid tokenize(const Image& image) const;
  Image decode_pyramid(const TokenPyramid& pyramid) const;

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);
  std::string content_hash() const;

 private:
  TokenizerConfig config_;
  PatchAutoencoder autoencoder_;
  Codebook codebook_;
};

// Free reconstruct form mirroring the residual-sum identity; used by tests
// and by Tokenizer::reconstruct.
Tensor reconstruct_pyramid(const TokenPyramid& pyramid, const Codebook& codebook);

// One-time frozen pretraining: autoencoder by reconstruction MSE, then
// codebook by k-means over encoder output cells.
Tokenizer train_tokenizer(const std::vector<Image>& corpus, const TokenizerConfig& config,
                          Rng rng);

}  // namespace cpcvar
