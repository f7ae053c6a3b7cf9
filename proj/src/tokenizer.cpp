#include "cpcvar/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpcvar/container.hpp"
#include "cpcvar/errors.hpp"
#include "cpcvar/log.hpp"
#include "cpcvar/optim.hpp"

namespace cpcvar {

// ---- ScaleSchedule ----

ScaleSchedule ScaleSchedule::desk_default() {
  return ScaleSchedule{{{1, 1}, {2, 2}, {3, 3}, {4, 4}, {6, 6}, {8, 8}}};
}

ScaleSchedule ScaleSchedule::from_flat(const std::vector<int64_t>& flat) {
  if (flat.size() % 2 != 0) throw ConfigError("schedule: expected pairs of dimensions");
  ScaleSchedule s;
  for (size_t i = 0; i < flat.size(); i += 2) s.levels.push_back({flat[i], flat[i + 1]});
  s.validate();
  return s;
}

std::vector<int64_t> ScaleSchedule::to_flat() const {
  std::vector<int64_t> flat;
  for (const auto& lv : levels) {
    flat.push_back(lv[0]);
    flat.push_back(lv[1]);
  }
  return flat;
}

int64_t ScaleSchedule::total_cells() const {
  int64_t n = 0;
  for (const auto& lv : levels) n += lv[0] * lv[1];
  return n;
}

ScaleSchedule ScaleSchedule::prefix(size_t len) const {
  ScaleSchedule out;
  out.levels.assign(levels.begin(), levels.begin() + static_cast<long>(len));
  return out;
}

void ScaleSchedule::validate() const {
  if (levels.empty()) throw ConfigError("schedule: empty");
  for (size_t s = 1; s < levels.size(); ++s)
    if (levels[s][0] < levels[s - 1][0] || levels[s][1] < levels[s - 1][1])
      throw ConfigError("schedule: resolutions must be non-decreasing");
}

// Canonical schedules (tokenizer/model configs) start at (1,1) and end on
// the feature grid; test fixtures may use arbitrary prefixes.
void ScaleSchedule::validate_target(int64_t h, int64_t w) const {
  validate();
  if (levels[0][0] != 1 || levels[0][1] != 1)
    throw ConfigError("schedule: first scale must be (1,1)");
  if (levels.back()[0] != h || levels.back()[1] != w)
    throw ConfigError("schedule: finest scale " + std::to_string(levels.back()[0]) + "x" +
                      std::to_string(levels.back()[1]) + " does not match feature grid " +
                      std::to_string(h) + "x" + std::to_string(w));
}

void TokenPyramid::validate(int64_t vocab) const {
  if (grids.size() != schedule.num_scales())
    throw StateError("pyramid: grid count does not match schedule");
  for (size_t s = 0; s < grids.size(); ++s) {
    if (static_cast<int64_t>(grids[s].size()) != schedule.cells(s))
      throw StateError("pyramid: scale " + std::to_string(s) + " has wrong cell count");
    for (int64_t t : grids[s])
      if (t < 0 || t >= vocab)
        throw StateError("pyramid: token index " + std::to_string(t) + " out of range [0," +
                         std::to_string(vocab) + ")");
  }
}

// ---- Codebook ----

int64_t Codebook::nearest(const double* cell) const {
  int64_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < size; ++j) {
    const double* v = vec(j);
    double d = 0.0;
    for (int64_t c = 0; c < dim; ++c) {
      double diff = cell[c] - v[c];
      d += diff * diff;
    }
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = j;
    }
  }
  return best;
}

Tensor Codebook::decode_grid(const std::vector<int64_t>& grid, int64_t h, int64_t w) const {
  if (static_cast<int64_t>(grid.size()) != h * w)
    throw ShapeError("decode_grid: grid size does not match " + std::to_string(h) + "x" +
                     std::to_string(w));
  std::vector<double> out(static_cast<size_t>(h * w * dim));
  for (int64_t i = 0; i < h * w; ++i) {
    int64_t t = grid[static_cast<size_t>(i)];
    if (t < 0 || t >= size)
      throw StateError("decode_grid: token index " + std::to_string(t) + " out of range [0," +
                       std::to_string(size) + ")");
    std::copy(vec(t), vec(t) + dim, out.begin() + i * dim);
  }
  return Tensor::from({h, w, dim}, std::move(out));
}

// ---- k-means ----

std::vector<double> kmeans(const std::vector<double>& points, int64_t n, int64_t dim, int64_t k,
                           int64_t iters, Rng& rng) {
  if (n <= 0 || k <= 0) throw ConfigError("kmeans: need positive point and cluster counts");
  if (static_cast<int64_t>(points.size()) != n * dim) throw ShapeError("kmeans: bad point buffer");

  std::vector<double> centroids(static_cast<size_t>(k * dim));
  // Seed from distinct points when possible; jittered copies otherwise.
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  for (int64_t j = 0; j < k; ++j) {
    int64_t src = order[static_cast<size_t>(j % n)];
    for (int64_t c = 0; c < dim; ++c) {
      double jitter = (j >= n) ? rng.normal(0.0, 1e-3) : 0.0;
      centroids[static_cast<size_t>(j * dim + c)] = points[static_cast<size_t>(src * dim + c)] + jitter;
    }
  }

  std::vector<int64_t> assign(static_cast<size_t>(n), 0);
  std::vector<double> dist(static_cast<size_t>(n), 0.0);
  for (int64_t it = 0; it < iters; ++it) {
    for (int64_t i = 0; i < n; ++i) {
      const double* p = points.data() + i * dim;
      int64_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < k; ++j) {
        const double* c = centroids.data() + j * dim;
        double d = 0.0;
        for (int64_t q = 0; q < dim; ++q) {
          double diff = p[q] - c[q];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      assign[static_cast<size_t>(i)] = best;
      dist[static_cast<size_t>(i)] = best_d;
    }
    std::vector<double> sums(static_cast<size_t>(k * dim), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t j = assign[static_cast<size_t>(i)];
      counts[static_cast<size_t>(j)]++;
      for (int64_t q = 0; q < dim; ++q)
        sums[static_cast<size_t>(j * dim + q)] += points[static_cast<size_t>(i * dim + q)];
    }
    for (int64_t j = 0; j < k; ++j) {
      if (counts[static_cast<size_t>(j)] > 0) {
        for (int64_t q = 0; q < dim; ++q)
          centroids[static_cast<size_t>(j * dim + q)] =
              sums[static_cast<size_t>(j * dim + q)] / static_cast<double>(counts[static_cast<size_t>(j)]);
      } else {
        // Reseed on the point farthest from its centroid (first max wins).
        int64_t far = 0;
        for (int64_t i = 1; i < n; ++i)
          if (dist[static_cast<size_t>(i)] > dist[static_cast<size_t>(far)]) far = i;
        for (int64_t q = 0; q < dim; ++q)
          centroids[static_cast<size_t>(j * dim + q)] = points[static_cast<size_t>(far * dim + q)];
        dist[static_cast<size_t>(far)] = 0.0;
      }
    }
  }
  return centroids;
}

// ---- PatchAutoencoder ----

namespace {

constexpr int64_t kPatchBlock = 2;  // two stride-2 stages -> patch factor 4
constexpr int64_t kImageChannels = 3;

std::vector<double> init_matrix(int64_t rows, int64_t cols, Rng& rng) {
  double std = 1.0 / std::sqrt(static_cast<double>(rows));
  return rng.normal_vec(static_cast<size_t>(rows * cols), 0.0, std);
}

}  // namespace

std::vector<Tensor*> PatchAutoencoder::Params::all() {
  return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &dec_w1, &dec_b1, &dec_w2, &dec_b2};
}

PatchAutoencoder PatchAutoencoder::init(int64_t hidden_dim, int64_t feature_dim, Rng& rng) {
  PatchAutoencoder ae;
  ae.hidden_dim_ = hidden_dim;
  ae.feature_dim_ = feature_dim;
  int64_t in1 = kImageChannels * kPatchBlock * kPatchBlock;  // 12
  ae.enc_w1_ = init_matrix(in1, hidden_dim, rng);
  ae.enc_b1_.assign(static_cast<size_t>(hidden_dim), 0.0);
  ae.enc_w2_ = init_matrix(hidden_dim * kPatchBlock * kPatchBlock, feature_dim, rng);
  ae.enc_b2_.assign(static_cast<size_t>(feature_dim), 0.0);
  ae.dec_w1_ = init_matrix(feature_dim, hidden_dim * kPatchBlock * kPatchBlock, rng);
  ae.dec_b1_.assign(static_cast<size_t>(hidden_dim * kPatchBlock * kPatchBlock), 0.0);
  ae.dec_w2_ = init_matrix(hidden_dim, in1, rng);
  ae.dec_b2_.assign(static_cast<size_t>(in1), 0.0);
  return ae;
}

PatchAutoencoder::Params PatchAutoencoder::leaf_params(bool requires_grad) const {
  int64_t h = hidden_dim_, f = feature_dim_;
  int64_t in1 = kImageChannels * kPatchBlock * kPatchBlock;
  Params p;
  p.enc_w1 = Tensor::from({in1, h}, enc_w1_, requires_grad);
  p.enc_b1 = Tensor::from({h}, enc_b1_, requires_grad);
  p.enc_w2 = Tensor::from({h * 4, f}, enc_w2_, requires_grad);
  p.enc_b2 = Tensor::from({f}, enc_b2_, requires_grad);
  p.dec_w1 = Tensor::from({f, h * 4}, dec_w1_, requires_grad);
  p.dec_b1 = Tensor::from({h * 4}, dec_b1_, requires_grad);
  p.dec_w2 = Tensor::from({h, in1}, dec_w2_, requires_grad);
  p.dec_b2 = Tensor::from({in1}, dec_b2_, requires_grad);
  return p;
}

void PatchAutoencoder::assign_from(const Params& params) {
  enc_w1_ = params.enc_w1.value();
  enc_b1_ = params.enc_b1.value();
  enc_w2_ = params.enc_w2.value();
  enc_b2_ = params.enc_b2.value();
  dec_w1_ = params.dec_w1.value();
  dec_b1_ = params.dec_b1.value();
  dec_w2_ = params.dec_w2.value();
  dec_b2_ = params.dec_b2.value();
}

Tensor PatchAutoencoder::encode_graph(const Params& p, const Tensor& image) {
  int64_t h = image.dim(0), w = image.dim(1);
  int64_t hidden = p.enc_w1.dim(1);
  int64_t feature = p.enc_w2.dim(1);
  auto x = space_to_depth(image, kPatchBlock);  // [h/2, w/2, 12]
  auto flat = reshape(x, {(h / 2) * (w / 2), kImageChannels * 4});
  auto h1 = gelu(bias_add(matmul(flat, p.enc_w1), p.enc_b1));
  auto m1 = reshape(h1, {h / 2, w / 2, hidden});
  auto x2 = space_to_depth(m1, kPatchBlock);  // [h/4, w/4, 4*hidden]
  auto flat2 = reshape(x2, {(h / 4) * (w / 4), hidden * 4});
  auto f = bias_add(matmul(flat2, p.enc_w2), p.enc_b2);
  return reshape(f, {h / 4, w / 4, feature});
}

Tensor PatchAutoencoder::decode_graph(const Params& p, const Tensor& features) {
  int64_t fh = features.dim(0), fw = features.dim(1);
  int64_t feature = features.dim(2);
  int64_t hidden = p.dec_w2.dim(0);
  auto flat = reshape(features, {fh * fw, feature});
  auto h1 = gelu(bias_add(matmul(flat, p.dec_w1), p.dec_b1));
  auto m1 = reshape(h1, {fh, fw, hidden * 4});
  auto up1 = depth_to_space(m1, kPatchBlock);  // [2fh, 2fw, hidden]
  auto flat2 = reshape(up1, {(2 * fh) * (2 * fw), hidden});
  auto out = bias_add(matmul(flat2, p.dec_w2), p.dec_b2);
  auto m2 = reshape(out, {2 * fh, 2 * fw, kImageChannels * 4});
  return depth_to_space(m2, kPatchBlock);  // [4fh, 4fw, 3]
}

Tensor PatchAutoencoder::encode(const Image& image) const {
  return encode_graph(leaf_params(false), image.to_tensor());
}

Image PatchAutoencoder::decode(const Tensor& features) const {
  return Image::from_tensor(decode_graph(leaf_params(false), features));
}

std::vector<double> PatchAutoencoder::flatten() const {
  std::vector<double> out;
  for (const auto* part : {&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_, &dec_w1_, &dec_b1_, &dec_w2_, &dec_b2_})
    out.insert(out.end(), part->begin(), part->end());
  return out;
}

void PatchAutoencoder::unflatten(const std::vector<double>& flat) {
  size_t off = 0;
  for (auto* part : {&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_, &dec_w1_, &dec_b1_, &dec_w2_, &dec_b2_}) {
    std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + part->size()),
              part->begin());
    off += part->size();
  }
  if (off != flat.size()) throw ShapeError("PatchAutoencoder::unflatten: size mismatch");
}

// ---- Tokenizer ----

Tokenizer::Tokenizer(TokenizerConfig config, PatchAutoencoder autoencoder, Codebook codebook)
    : config_(std::move(config)), autoencoder_(std::move(autoencoder)), codebook_(std::move(codebook)) {
  config_.schedule.validate_target(config_.image_size / 4, config_.image_size / 4);
}

Tensor Tokenizer::encode_image(const Image& image) const {
  if (image.height != config_.image_size || image.width != config_.image_size)
    throw StateError("encode_image: expected " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + " image, got " +
                     std::to_string(image.height) + "x" + std::to_string(image.width));
  return autoencoder_.encode(image);
}

TokenPyramid Tokenizer::multiscale_quantize(const Tensor& fmap) const {
  return multiscale_quantize(fmap, config_.schedule);
}

TokenPyramid Tokenizer::multiscale_quantize(const Tensor& fmap,
                                            const ScaleSchedule& schedule) const {
  if (!codebook_.trained) throw StateError("multiscale_quantize: codebook is untrained");
  if (fmap.ndim() != 3 || fmap.dim(2) != codebook_.dim)
    throw ShapeError("multiscale_quantize: feature map " + shape_str(fmap.shape()) +
                     " does not match codebook dim " + std::to_string(codebook_.dim));
  int64_t h = fmap.dim(0), w = fmap.dim(1);

  TokenPyramid pyramid;
  pyramid.schedule = schedule;
  pyramid.target_h = h;
  pyramid.target_w = w;

  Tensor residual = fmap;
  for (size_t s = 0; s < schedule.num_scales(); ++s) {
    int64_t hs = schedule.levels[s][0], ws = schedule.levels[s][1];
    Tensor pooled = (hs == h && ws == w) ? residual : avg_pool2d(residual, hs, ws);
    std::vector<int64_t> grid(static_cast<size_t>(hs * ws));
    for (int64_t i = 0; i < hs * ws; ++i)
      grid[static_cast<size_t>(i)] = codebook_.nearest(pooled.value().data() + i * codebook_.dim);
    Tensor decoded = codebook_.decode_grid(grid, hs, ws);
    Tensor up = (hs == h && ws == w) ? decoded : bilinear_resize2d(decoded, h, w);
    residual = sub(residual, up);
    pyramid.grids.push_back(std::move(grid));
  }
  return pyramid;
}

Tensor reconstruct_pyramid(const TokenPyramid& pyramid, const Codebook& codebook) {
  int64_t h = pyramid.target_h, w = pyramid.target_w;
  Tensor acc = Tensor::zeros({h, w, codebook.dim});
  for (size_t s = 0; s < pyramid.num_scales(); ++s) {
    int64_t hs = pyramid.schedule.levels[s][0], ws = pyramid.schedule.levels[s][1];
    Tensor decoded = codebook.decode_grid(pyramid.grids[s], hs, ws);
    Tensor up = (hs == h && ws == w) ? decoded : bilinear_resize2d(decoded, h, w);
    acc = add(acc, up);
  }
  return acc;
}

Tensor Tokenizer::reconstruct(const TokenPyramid& pyramid) const {
  return reconstruct_pyramid(pyramid, codebook_);
}

Tensor Tokenizer::next_scale_input(const Tensor& partial_sum, size_t scale_index) const {
  const auto& levels = config_.schedule.levels;
  if (scale_index + 1 >= levels.size())
    throw StateError("next_scale_input: scale " + std::to_string(scale_index) +
                     " has no next scale (S = " + std::to_string(levels.size()) + ")");
  int64_t hn = levels[scale_index + 1][0], wn = levels[scale_index + 1][1];
  if (partial_sum.dim(0) == hn && partial_sum.dim(1) == wn) return partial_sum;
  return avg_pool2d(partial_sum, hn, wn);
}

std::vector<Tensor> Tokenizer::build_scale_inputs(const TokenPyramid& pyramid) const {
  const auto& levels = pyramid.schedule.levels;
  int64_t h = pyramid.target_h, w = pyramid.target_w;
  std::vector<Tensor> inputs;
  inputs.reserve(levels.size());
  inputs.push_back(Tensor::zeros({levels[0][0], levels[0][1], codebook_.dim}));
  if (levels.size() == 1) return inputs;

  Tensor partial = Tensor::zeros({h, w, codebook_.dim});
  for (size_t s = 0; s + 1 < levels.size(); ++s) {
    int64_t hs = levels[s][0], ws = levels[s][1];
    Tensor decoded = codebook_.decode_grid(pyramid.grids[s], hs, ws);
    Tensor up = (hs == h && ws == w) ? decoded : bilinear_resize2d(decoded, h, w);
    partial = add(partial, up);
    int64_t hn = levels[s + 1][0], wn = levels[s + 1][1];
    inputs.push_back((hn == h && wn == w) ? partial : avg_pool2d(partial, hn, wn));
  }
  return inputs;
}

TokenPyramid Tokenizer::tokenize(const Image& image) const {
  return multiscale_quantize(encode_image(image));
}

Image Tokenizer::decode_pyramid(const TokenPyramid& pyramid) const {
  return autoencoder_.decode(reconstruct(pyramid));
}

void Tokenizer::save(const std::string& path) const {
  Container c;
  c.put_i64("meta", {config_.image_size, config_.hidden_dim, config_.feature_dim,
                     config_.codebook_size, config_.train_steps, config_.kmeans_iters});
  c.put_f64("learning_rate", {config_.learning_rate}, {1});
  c.put_i64("schedule", config_.schedule.to_flat());
  auto flat = autoencoder_.flatten();
  c.put_f64("autoencoder", flat, {flat.size()});
  c.put_f64("codebook", codebook_.vectors,
            {static_cast<uint64_t>(codebook_.size), static_cast<uint64_t>(codebook_.dim)});
  c.put_i64("codebook_trained", {codebook_.trained ? 1 : 0});
  c.save(path);
}

Tokenizer Tokenizer::load(const std::string& path) {
  Container c = Container::load(path);
  const auto& meta = c.get_i64("meta");
  TokenizerConfig cfg;
  cfg.image_size = meta[0];
  cfg.hidden_dim = meta[1];
  cfg.feature_dim = meta[2];
  cfg.codebook_size = meta[3];
  cfg.train_steps = meta[4];
  cfg.kmeans_iters = meta[5];
  cfg.learning_rate = c.get_f64("learning_rate")[0];
  cfg.schedule = ScaleSchedule::from_flat(c.get_i64("schedule"));

  Rng dummy(0);
  PatchAutoencoder ae = PatchAutoencoder::init(cfg.hidden_dim, cfg.feature_dim, dummy);
  ae.unflatten(c.get_f64("autoencoder"));

  Codebook cb;
  cb.size = cfg.codebook_size;
  cb.dim = cfg.feature_dim;
  cb.vectors = c.get_f64("codebook");
  cb.trained = c.get_i64("codebook_trained")[0] != 0;
  return Tokenizer(cfg, std::move(ae), std::move(cb));
}

std::string Tokenizer::content_hash() const {
  Container c;
  auto flat = autoencoder_.flatten();
  c.put_f64("autoencoder", flat, {flat.size()});
  c.put_f64("codebook", codebook_.vectors, {codebook_.vectors.size()});
  c.put_i64("schedule", config_.schedule.to_flat());
  return c.content_hash();
}

Tokenizer train_tokenizer(const std::vector<Image>& corpus, const TokenizerConfig& config,
                          Rng rng) {
  if (corpus.empty()) throw StateError("train_tokenizer: empty corpus");
  if (config.image_size % 4 != 0) throw ConfigError("train_tokenizer: image size must be divisible by 4");
  config.schedule.validate_target(config.image_size / 4, config.image_size / 4);

  PatchAutoencoder ae = PatchAutoencoder::init(config.hidden_dim, config.feature_dim, rng);

  // Reconstruction training; one image per step in seeded order.
  std::vector<double> theta = ae.flatten();
  Optimizer opt(OptimizerKind::kAdamW, theta.size(), 0.9, 0.999);
  std::vector<double> lr(theta.size(), config.learning_rate);
  double last_loss = 0.0;
  for (int64_t step = 0; step < config.train_steps; ++step) {
    const Image& img = corpus[rng.below(corpus.size())];
    ae.unflatten(theta);
    Tape tape;
    auto params = ae.leaf_params(true);
    auto x = img.to_tensor();
    auto recon = PatchAutoencoder::decode_graph(params, PatchAutoencoder::encode_graph(params, x));
    auto diff = sub(recon, x);
    auto loss = div_scalar(sum_all(mul(diff, diff)), static_cast<double>(x.numel()));
    last_loss = loss.item();
    if (!std::isfinite(last_loss))
      throw NumericError("train_tokenizer: loss diverged (NaN) at step " + std::to_string(step));
    tape.backward(loss);
    std::vector<double> grad;
    grad.reserve(theta.size());
    for (Tensor* t : params.all()) {
      const auto& g = t->grad();
      grad.insert(grad.end(), g.begin(), g.end());
    }
    opt.step(theta, grad, lr);
  }
  ae.unflatten(theta);
  log::debug("tokenizer autoencoder trained, final mse %.6f", last_loss);

  // Codebook: k-means over all encoder output cells of the corpus.
  int64_t dim = config.feature_dim;
  std::vector<double> cells;
  for (const Image& img : corpus) {
    Tensor f = ae.encode(img);
    cells.insert(cells.end(), f.value().begin(), f.value().end());
  }
  int64_t n_cells = static_cast<int64_t>(cells.size()) / dim;
  Codebook cb;
  cb.size = config.codebook_size;
  cb.dim = dim;
  cb.vectors = kmeans(cells, n_cells, dim, config.codebook_size, config.kmeans_iters, rng);
  cb.trained = true;

  return Tokenizer(config, std::move(ae), std::move(cb));
}

}  // namespace cpcvar
