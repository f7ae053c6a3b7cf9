#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cpcvar/rng.hpp"
#include "cpcvar/tokenizer.hpp"

using namespace cpcvar;

namespace {

Image random_image(uint64_t seed, int64_t size = 32) {
  Rng rng(seed);
  Image img(size, size);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

// Magnitude-spanning random codebook: residual quantizers rely on codes at
// several scales, down to exact zero for fully explained residuals.
Codebook fixture_codebook(uint64_t seed, int64_t size = 64, int64_t dim = 8) {
  Rng rng(seed);
  Codebook cb;
  cb.size = size;
  cb.dim = dim;
  cb.vectors.resize(static_cast<size_t>(size * dim));
  for (int64_t j = 0; j < size; ++j) {
    double mag = std::pow(2.0, -static_cast<double>(j % 8));
    for (int64_t c = 0; c < dim; ++c)
      cb.vectors[static_cast<size_t>(j * dim + c)] = mag * rng.uniform(-1.0, 1.0);
  }
  for (int64_t c = 0; c < dim; ++c) cb.vectors[static_cast<size_t>((size - 1) * dim + c)] = 0.0;
  cb.trained = true;
  return cb;
}

Tokenizer fixture_tokenizer(uint64_t seed) {
  TokenizerConfig cfg;
  Rng rng(seed);
  PatchAutoencoder ae = PatchAutoencoder::init(cfg.hidden_dim, cfg.feature_dim, rng);
  return Tokenizer(cfg, std::move(ae), fixture_codebook(seed ^ 0x5a5a));
}

Tensor random_feature_map(uint64_t seed, int64_t h = 8, int64_t w = 8, int64_t c = 8) {
  Rng rng(seed);
  std::vector<double> vals(static_cast<size_t>(h * w * c));
  for (auto& v : vals) v = rng.uniform(-1.0, 1.0);
  return Tensor::from({h, w, c}, std::move(vals));
}

double feature_mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.value().size(); ++i) {
    double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.value().size());
}

}  // namespace

TEST_CASE("encoder shape contract and determinism") {
  auto tok = fixture_tokenizer(1);
  auto f = tok.encode_image(random_image(5));
  CHECK(f.shape() == Shape{8, 8, 8});

  // frozen encoder: identical maps across calls, including on zero input
  Image zero(32, 32);
  auto a = tok.encode_image(zero);
  auto b = tok.encode_image(zero);
  CHECK(std::memcmp(a.value().data(), b.value().data(), a.value().size() * 8) == 0);

  auto img = random_image(9);
  auto c = tok.encode_image(img);
  auto d = tok.encode_image(img);
  CHECK(std::memcmp(c.value().data(), d.value().data(), c.value().size() * 8) == 0);

  CHECK_THROWS_AS(tok.encode_image(Image(16, 16)), StateError);
}

TEST_CASE("single full-resolution scale is plain nearest assignment") {
  auto tok = fixture_tokenizer(2);
  auto fmap = random_feature_map(3);
  ScaleSchedule single{{{8, 8}}};
  auto pyr = tok.multiscale_quantize(fmap, single);
  REQUIRE(pyr.grids.size() == 1);
  const auto& cb = tok.codebook();
  for (int64_t i = 0; i < 64; ++i)
    CHECK(pyr.grids[0][static_cast<size_t>(i)] == cb.nearest(fmap.value().data() + i * cb.dim));
}

TEST_CASE("feature map equal to a code at every cell quantizes losslessly") {
  auto tok = fixture_tokenizer(4);
  const auto& cb = tok.codebook();
  int64_t j = 7;
  std::vector<double> vals;
  for (int64_t i = 0; i < 64; ++i) vals.insert(vals.end(), cb.vec(j), cb.vec(j) + cb.dim);
  auto fmap = Tensor::from({8, 8, 8}, vals);
  ScaleSchedule single{{{8, 8}}};
  auto pyr = tok.multiscale_quantize(fmap, single);
  for (int64_t t : pyr.grids[0]) CHECK(t == j);
  CHECK(feature_mse(tok.reconstruct(pyr), fmap) == 0.0);
}

TEST_CASE("empty pyramid reconstructs to zero") {
  auto tok = fixture_tokenizer(5);
  TokenPyramid empty;
  empty.target_h = 8;
  empty.target_w = 8;
  auto rec = reconstruct_pyramid(empty, tok.codebook());
  for (double v : rec.value()) CHECK(v == 0.0);
}

TEST_CASE("single scale pyramid reconstructs to upsampled decode") {
  auto tok = fixture_tokenizer(6);
  TokenPyramid pyr;
  pyr.schedule = ScaleSchedule{{{2, 2}}};
  pyr.grids = {{3, 9, 27, 41}};
  pyr.target_h = 8;
  pyr.target_w = 8;
  auto rec = tok.reconstruct(pyr);
  auto expected = bilinear_resize2d(tok.codebook().decode_grid(pyr.grids[0], 2, 2), 8, 8);
  CHECK(rec.value() == expected.value());
}

TEST_CASE("reconstruct equals independent residual-sum loop bit-exact") {
  auto tok = fixture_tokenizer(7);
  auto fmap = random_feature_map(8);
  auto pyr = tok.multiscale_quantize(fmap);

  // independent accumulation: manual decode, library resize, per-cell sum
  std::vector<double> acc(8 * 8 * 8, 0.0);
  const auto& cb = tok.codebook();
  for (size_t s = 0; s < pyr.num_scales(); ++s) {
    int64_t hs = pyr.schedule.levels[s][0], ws = pyr.schedule.levels[s][1];
    std::vector<double> dec;
    for (int64_t t : pyr.grids[s]) dec.insert(dec.end(), cb.vec(t), cb.vec(t) + cb.dim);
    Tensor decoded = Tensor::from({hs, ws, cb.dim}, dec);
    Tensor up = (hs == 8 && ws == 8) ? decoded : bilinear_resize2d(decoded, 8, 8);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += up.value()[i];
  }
  auto rec = tok.reconstruct(pyr);
  CHECK(std::memcmp(rec.value().data(), acc.data(), acc.size() * 8) == 0);
}

TEST_CASE("exact recovery fixture achieves mse zero") {
  auto tok = fixture_tokenizer(10);
  const auto& cb = tok.codebook();
  // F built by upsampling a scale-1 code, so scale 1 explains it exactly and
  // the zero code absorbs every later residual.
  int64_t j = 12;
  auto fmap = bilinear_resize2d(cb.decode_grid({j}, 1, 1), 8, 8);
  auto pyr = tok.multiscale_quantize(fmap);
  CHECK(pyr.grids[0][0] == j);
  CHECK(feature_mse(tok.reconstruct(pyr), fmap) == 0.0);
}

TEST_CASE("reconstruction mse non-increasing over schedule prefixes") {
  ScaleSchedule full = ScaleSchedule::desk_default();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto tok = fixture_tokenizer(1000 + seed);
    auto fmap = random_feature_map(seed * 31 + 2);
    double prev = std::numeric_limits<double>::infinity();
    for (size_t len = 1; len <= 4; ++len) {
      auto pyr = tok.multiscale_quantize(fmap, full.prefix(len));
      double mse = feature_mse(tok.reconstruct(pyr), fmap);
      INFO("seed " << seed << " prefix " << len << " mse " << mse << " prev " << prev);
      CHECK(mse <= prev);
      prev = mse;
    }
  }
}

TEST_CASE("next scale input pools the running sum") {
  auto tok = fixture_tokenizer(11);

  // constant map stays constant at the new resolution
  auto constant = Tensor::full({8, 8, 8}, 0.42);
  auto pooled = tok.next_scale_input(constant, 2);  // -> (4,4)
  CHECK(pooled.shape() == Shape{4, 4, 8});
  for (double v : pooled.value()) CHECK(v == doctest::Approx(0.42).epsilon(1e-15));

  // (2,2) -> (1,1) is the arithmetic mean
  ScaleSchedule sched{{{1, 1}, {2, 2}}};
  TokenizerConfig cfg;
  cfg.image_size = 8;  // feature grid (2,2)
  cfg.schedule = sched;
  Rng rng(3);
  Tokenizer small(cfg, PatchAutoencoder::init(cfg.hidden_dim, cfg.feature_dim, rng),
                  fixture_codebook(77));
  std::vector<double> vals(2 * 2 * 8, 0.0);
  for (int64_t i = 0; i < 4; ++i) vals[static_cast<size_t>(i * 8)] = static_cast<double>(i + 1);
  auto m = Tensor::from({2, 2, 8}, vals);
  auto one = avg_pool2d(m, 1, 1);
  CHECK(one.value()[0] == doctest::Approx(2.5).epsilon(1e-15));

  // (4,4) -> (2,2) against a naive window-mean oracle
  auto fm = random_feature_map(21, 4, 4, 8);
  auto down = avg_pool2d(fm, 2, 2);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 2; ++j)
      for (int64_t c = 0; c < 8; ++c) {
        double mean = 0.0;
        for (int64_t y = 2 * i; y < 2 * i + 2; ++y)
          for (int64_t x = 2 * j; x < 2 * j + 2; ++x)
            mean += fm.value()[static_cast<size_t>((y * 4 + x) * 8 + c)];
        mean /= 4.0;
        CHECK(down.value()[static_cast<size_t>((i * 2 + j) * 8 + c)] ==
              doctest::Approx(mean).epsilon(1e-15));
      }

  // no next scale past the finest
  CHECK_THROWS_AS(tok.next_scale_input(constant, 5), StateError);
}

TEST_CASE("untrained codebook is rejected") {
  TokenizerConfig cfg;
  Rng rng(1);
  Codebook cb = fixture_codebook(3);
  cb.trained = false;
  Tokenizer tok(cfg, PatchAutoencoder::init(cfg.hidden_dim, cfg.feature_dim, rng), cb);
  CHECK_THROWS_AS(tok.multiscale_quantize(random_feature_map(1)), StateError);
}

TEST_CASE("kmeans with one centroid is the mean") {
  Rng rng(5);
  std::vector<double> pts = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};  // 3 points, dim 2
  auto c = kmeans(pts, 3, 2, 1, 5, rng);
  CHECK(c[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(c[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("kmeans separates two well-formed clusters") {
  Rng rng(8);
  std::vector<double> pts;
  int64_t n = 80;
  for (int64_t i = 0; i < n; ++i) {
    double base = (i % 2 == 0) ? -5.0 : 5.0;
    for (int64_t d = 0; d < 4; ++d) pts.push_back(base + rng.normal(0.0, 0.3));
  }
  auto centroids = kmeans(pts, n, 4, 16, 20, rng);

  // brute-force assignment check: every point lands near its own cluster side
  int64_t neg = 0, pos = 0;
  for (int64_t j = 0; j < 16; ++j) {
    if (centroids[static_cast<size_t>(j * 4)] < 0)
      ++neg;
    else
      ++pos;
  }
  CHECK(neg >= 1);
  CHECK(pos >= 1);

  // quantization error below the single-centroid error
  auto single = kmeans(pts, n, 4, 1, 20, rng);
  auto sq_err = [&](const std::vector<double>& cents, int64_t k) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < k; ++j) {
        double d = 0.0;
        for (int64_t q = 0; q < 4; ++q) {
          double diff = pts[static_cast<size_t>(i * 4 + q)] - cents[static_cast<size_t>(j * 4 + q)];
          d += diff * diff;
        }
        best = std::min(best, d);
      }
      acc += best;
    }
    return acc;
  };
  CHECK(sq_err(centroids, 16) < sq_err(single, 1));
}

TEST_CASE("training reduces reconstruction error") {
  TokenizerConfig cfg;
  cfg.train_steps = 80;
  cfg.codebook_size = 8;
  cfg.kmeans_iters = 5;
  Image img = random_image(33);
  std::vector<Image> corpus = {img};

  Rng init_rng(17);
  PatchAutoencoder untrained = PatchAutoencoder::init(cfg.hidden_dim, cfg.feature_dim, init_rng);
  double initial = image_mse(untrained.decode(untrained.encode(img)), img);

  auto tok = train_tokenizer(corpus, cfg, Rng::stream(17, "tokenizer"));
  double trained = image_mse(tok.autoencoder().decode(tok.autoencoder().encode(img)), img);
  CHECK(trained < initial);
}

TEST_CASE("train_tokenizer is deterministic and artifacts round-trip") {
  TokenizerConfig cfg;
  cfg.train_steps = 40;
  cfg.kmeans_iters = 5;
  std::vector<Image> corpus = {random_image(1), random_image(2), random_image(3)};
  auto a = train_tokenizer(corpus, cfg, Rng::stream(7, "tokenizer"));
  auto b = train_tokenizer(corpus, cfg, Rng::stream(7, "tokenizer"));
  CHECK(a.content_hash() == b.content_hash());

  std::string path = "tokenizer_roundtrip.cpcv";
  a.save(path);
  auto loaded = Tokenizer::load(path);
  CHECK(loaded.content_hash() == a.content_hash());

  // quantization behaves identically after reload
  auto f = a.encode_image(corpus[0]);
  auto p1 = a.multiscale_quantize(f);
  auto p2 = loaded.multiscale_quantize(loaded.encode_image(corpus[0]));
  CHECK(p1.grids == p2.grids);
  std::remove(path.c_str());
}

TEST_CASE("tokenizer content hash is stable under read-only use") {
  auto tok = fixture_tokenizer(12);
  auto before = tok.content_hash();
  auto fmap = random_feature_map(40);
  auto pyr = tok.multiscale_quantize(fmap);
  (void)tok.reconstruct(pyr);
  (void)tok.build_scale_inputs(pyr);
  CHECK(tok.content_hash() == before);
}

TEST_CASE("token index out of range fails") {
  auto tok = fixture_tokenizer(13);
  TokenPyramid pyr;
  pyr.schedule = ScaleSchedule{{{1, 1}}};
  pyr.grids = {{99}};
  pyr.target_h = 8;
  pyr.target_w = 8;
  CHECK_THROWS_AS(tok.reconstruct(pyr), StateError);
}
