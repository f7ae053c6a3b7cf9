#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cpcvar/rng.hpp"
#include "cpcvar/var_model.hpp"

using namespace cpcvar;

namespace {

VarConfig tiny_config() {
  VarConfig cfg;
  cfg.schedule = ScaleSchedule{{{1, 1}, {2, 2}}};
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.ffn_hidden = 32;
  cfg.vocab = 8;
  cfg.feature_dim = 4;
  cfg.prompt_vocab = 8;
  cfg.max_concepts = 2;
  cfg.max_prompt_len = 4;
  return cfg;
}

Codebook tiny_codebook(uint64_t seed, int64_t size, int64_t dim) {
  Rng rng(seed);
  Codebook cb;
  cb.size = size;
  cb.dim = dim;
  cb.vectors = rng.normal_vec(static_cast<size_t>(size * dim), 0.0, 0.5);
  cb.trained = true;
  return cb;
}

Tokenizer tiny_tokenizer(const VarConfig& cfg, uint64_t seed) {
  TokenizerConfig tcfg;
  tcfg.image_size = cfg.schedule.levels.back()[0] * 4;
  tcfg.feature_dim = cfg.feature_dim;
  tcfg.codebook_size = cfg.vocab;
  tcfg.schedule = cfg.schedule;
  Rng rng(seed);
  return Tokenizer(tcfg, PatchAutoencoder::init(tcfg.hidden_dim, tcfg.feature_dim, rng),
                   tiny_codebook(seed ^ 0x99, cfg.vocab, cfg.feature_dim));
}

TokenPyramid random_pyramid(const VarConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  TokenPyramid p;
  p.schedule = cfg.schedule;
  p.target_h = cfg.schedule.levels.back()[0];
  p.target_w = cfg.schedule.levels.back()[1];
  for (size_t s = 0; s < cfg.schedule.num_scales(); ++s) {
    std::vector<int64_t> grid(static_cast<size_t>(cfg.schedule.cells(s)));
    for (auto& t : grid) t = static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg.vocab)));
    p.grids.push_back(std::move(grid));
  }
  return p;
}

// Independent per-cell log-softmax accumulation.
double oracle_nll(const LogitsPyramid& logits, const TokenPyramid& pyramid,
                  const std::vector<double>* weights = nullptr) {
  double total = 0.0;
  for (size_t s = 0; s < pyramid.num_scales(); ++s) {
    const Tensor& rows = logits.per_scale[s];
    int64_t v = rows.dim(1);
    double scale_sum = 0.0;
    for (int64_t i = 0; i < rows.dim(0); ++i) {
      const double* x = rows.value().data() + i * v;
      double mx = x[0];
      for (int64_t c = 1; c < v; ++c) mx = std::max(mx, x[c]);
      double denom = 0.0;
      for (int64_t c = 0; c < v; ++c) denom += std::exp(x[c] - mx);
      scale_sum += mx + std::log(denom) - x[pyramid.grids[s][static_cast<size_t>(i)]];
    }
    total += (weights ? (*weights)[s] : 1.0) * scale_sum;
  }
  return total;
}

LogitsPyramid random_logits(const ScaleSchedule& sched, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  LogitsPyramid out;
  for (size_t s = 0; s < sched.num_scales(); ++s)
    out.per_scale.push_back(
        Tensor::from({sched.cells(s), vocab},
                     rng.normal_vec(static_cast<size_t>(sched.cells(s) * vocab), 0.0, 2.0)));
  return out;
}

}  // namespace

TEST_CASE("block causal mask matches index-pair brute force") {
  // single scale: 1x1 all-true block plus prefix column
  auto m1 = block_causal_mask(ScaleSchedule{{{1, 1}}});
  CHECK(m1.seq_len == 2);
  CHECK(m1.at(1, 0));
  CHECK(m1.at(1, 1));
  CHECK(m1.at(0, 0));
  CHECK_FALSE(m1.at(0, 1));

  // two scales: scale-2 rows see 1+4 grid positions, scale-1 row sees itself
  auto m2 = block_causal_mask(ScaleSchedule{{{1, 1}, {2, 2}}});
  CHECK(m2.seq_len == 6);
  int grid_vis_scale1 = 0;
  for (int64_t k = 1; k < 6; ++k) grid_vis_scale1 += m2.at(1, k) ? 1 : 0;
  CHECK(grid_vis_scale1 == 1);
  for (int64_t q = 2; q < 6; ++q) {
    int vis = 0;
    for (int64_t k = 1; k < 6; ++k) vis += m2.at(q, k) ? 1 : 0;
    CHECK(vis == 5);
    CHECK(m2.at(q, 0));
  }

  // any schedule: block-lower-triangular at scale granularity
  ScaleSchedule sched{{{1, 1}, {2, 2}, {2, 3}, {4, 4}}};
  auto mask = block_causal_mask(sched);
  std::vector<int64_t> scale_of(static_cast<size_t>(mask.seq_len), -1);
  {
    int64_t pos = 1;
    for (size_t s = 0; s < sched.num_scales(); ++s)
      for (int64_t i = 0; i < sched.cells(s); ++i) scale_of[static_cast<size_t>(pos++)] = static_cast<int64_t>(s);
  }
  for (int64_t q = 0; q < mask.seq_len; ++q)
    for (int64_t k = 0; k < mask.seq_len; ++k) {
      bool expected;
      if (k == 0)
        expected = true;
      else if (q == 0)
        expected = false;
      else
        expected = scale_of[static_cast<size_t>(k)] <= scale_of[static_cast<size_t>(q)];
      CHECK(mask.at(q, k) == expected);
    }
}

TEST_CASE("single scale model logits shape") {
  VarConfig cfg = tiny_config();
  cfg.schedule = ScaleSchedule{{{1, 1}}};
  VarModel model(cfg, 3);
  auto tok = tiny_tokenizer(cfg, 5);
  auto pyr = random_pyramid(cfg, 7);
  auto logits = model.forward_teacher_forced(PromptSpec{{1, 2}}, pyr, tok);
  REQUIRE(logits.per_scale.size() == 1);
  CHECK(logits.per_scale[0].shape() == Shape{1, 8});
}

TEST_CASE("identical embeddings give identical logits") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 11);
  auto tok = tiny_tokenizer(cfg, 13);
  int64_t concept_id = model.vocab().register_concept("<c0>");

  // copy base token 5's embedding row into the concept row
  auto& theta = model.params().values();
  const auto& seg = model.params().segment("embed.prompt");
  for (int64_t j = 0; j < cfg.d_model; ++j)
    theta[static_cast<size_t>(seg.offset + concept_id * cfg.d_model + j)] =
        theta[static_cast<size_t>(seg.offset + 5 * cfg.d_model + j)];

  auto pyr = random_pyramid(cfg, 17);
  auto a = model.forward_teacher_forced(PromptSpec{{1, 5}}, pyr, tok);
  auto b = model.forward_teacher_forced(PromptSpec{{1, concept_id}}, pyr, tok);
  for (size_t s = 0; s < a.per_scale.size(); ++s)
    CHECK(std::memcmp(a.per_scale[s].value().data(), b.per_scale[s].value().data(),
                      a.per_scale[s].value().size() * 8) == 0);
}

TEST_CASE("teacher-forced likelihood factorizes over scales") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 23);
  auto tok = tiny_tokenizer(cfg, 29);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto pyr = random_pyramid(cfg, 100 + seed);
    auto logits = model.forward_teacher_forced(PromptSpec{{2, 4, 6}}, pyr, tok);
    double joint = VarModel::nll(logits, pyr).item();
    double per_scale_sum = oracle_nll(logits, pyr);
    CHECK(std::fabs(joint - per_scale_sum) < 1e-9);
  }
}

TEST_CASE("causality: later-scale tokens leave earlier logits bit-identical") {
  VarConfig cfg = tiny_config();
  cfg.schedule = ScaleSchedule{{{1, 1}, {2, 2}, {3, 3}}};
  VarModel model(cfg, 31);
  auto tok = tiny_tokenizer(cfg, 37);
  auto pyr = random_pyramid(cfg, 41);
  auto base = model.forward_teacher_forced(PromptSpec{{1}}, pyr, tok);

  auto perturbed = pyr;
  for (auto& t : perturbed.grids[2]) t = (t + 3) % cfg.vocab;
  auto after = model.forward_teacher_forced(PromptSpec{{1}}, perturbed, tok);

  // scale 3's own tokens influence nothing it predicts
  for (size_t s = 0; s < 3; ++s)
    CHECK(std::memcmp(base.per_scale[s].value().data(), after.per_scale[s].value().data(),
                      base.per_scale[s].value().size() * 8) == 0);
}

TEST_CASE("nll closed forms") {
  // uniform logits, V=4, single (1,1) scale -> ln 4
  TokenPyramid pyr;
  pyr.schedule = ScaleSchedule{{{1, 1}}};
  pyr.grids = {{2}};
  pyr.target_h = pyr.target_w = 1;
  LogitsPyramid uniform;
  uniform.per_scale.push_back(Tensor::zeros({1, 4}));
  CHECK(VarModel::nll(uniform, pyr).item() ==
        doctest::Approx(1.3862943611198906).epsilon(1e-12));

  // saturated margin toward the target
  LogitsPyramid sat;
  sat.per_scale.push_back(Tensor::from({1, 4}, {0.0, 0.0, 100.0, 0.0}));
  CHECK(VarModel::nll(sat, pyr).item() < 1e-9);

  // random case against the independent oracle
  ScaleSchedule sched{{{1, 1}, {2, 2}}};
  TokenPyramid rp;
  rp.schedule = sched;
  rp.grids = {{1}, {0, 3, 2, 1}};
  rp.target_h = rp.target_w = 2;
  auto logits = random_logits(sched, 4, 55);
  CHECK(VarModel::nll(logits, rp).item() == doctest::Approx(oracle_nll(logits, rp)).epsilon(1e-12));
}

TEST_CASE("weighted nll identities") {
  ScaleSchedule sched = ScaleSchedule::desk_default();
  TokenPyramid pyr;
  pyr.schedule = sched;
  pyr.target_h = pyr.target_w = 8;
  Rng rng(71);
  for (size_t s = 0; s < sched.num_scales(); ++s) {
    std::vector<int64_t> grid(static_cast<size_t>(sched.cells(s)));
    for (auto& t : grid) t = static_cast<int64_t>(rng.below(16));
    pyr.grids.push_back(std::move(grid));
  }

  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto logits = random_logits(sched, 16, 200 + seed);

    // all-ones weights reproduce nll bit-exactly
    double plain = VarModel::nll(logits, pyr).item();
    double ones = VarModel::weighted_nll(logits, pyr, ScaleWeights::all_ones(6)).item();
    CHECK(std::memcmp(&plain, &ones, 8) == 0);

    // all-zero weights vanish
    CHECK(VarModel::weighted_nll(logits, pyr, ScaleWeights{std::vector<double>(6, 0.0)}).item() ==
          0.0);

    // fine-scale weight 0.5: equals 0.5*(fine part) + coarse part
    auto w = ScaleWeights::fine_scales(6, 0.5);
    double weighted = VarModel::weighted_nll(logits, pyr, w).item();
    double split = oracle_nll(logits, pyr, &w.w);
    CHECK(std::fabs(weighted - split) < 1e-12);
  }

  CHECK_THROWS_AS(
      VarModel::weighted_nll(random_logits(sched, 16, 1), pyr,
                             ScaleWeights{{1.0, 1.0, -0.1, 1.0, 1.0, 1.0}}),
      ConfigError);
}

TEST_CASE("prompt locality: zeroed cross-attention outputs ignore the prompt") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 43);
  auto tok = tiny_tokenizer(cfg, 47);
  auto& theta = model.params().values();
  for (const auto& seg : model.params().segments())
    if (seg.group == ParamGroup::kCrossAttention && seg.name.find(".ca.wo") != std::string::npos)
      std::fill(theta.begin() + seg.offset, theta.begin() + seg.offset + seg.size, 0.0);

  auto pyr = random_pyramid(cfg, 53);
  auto a = model.forward_teacher_forced(PromptSpec{{0, 1, 2}}, pyr, tok);
  auto b = model.forward_teacher_forced(PromptSpec{{7, 6}}, pyr, tok);
  for (size_t s = 0; s < a.per_scale.size(); ++s)
    CHECK(std::memcmp(a.per_scale[s].value().data(), b.per_scale[s].value().data(),
                      a.per_scale[s].value().size() * 8) == 0);
}

TEST_CASE("argmax decoding is deterministic and the zero-temperature limit") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 59);
  auto tok = tiny_tokenizer(cfg, 61);
  PromptSpec prompt{{3}};

  SampleParams greedy{1.0, 1};
  Rng r1 = Rng::stream(5, "sample0");
  Rng r2 = Rng::stream(5, "sample0");
  auto a = model.sample(tok, prompt, greedy, r1);
  auto b = model.sample(tok, prompt, greedy, r2);
  CHECK(a.grids == b.grids);

  SampleParams cold{1e-9, 0};
  Rng r3 = Rng::stream(5, "sample0");
  auto c = model.sample(tok, prompt, cold, r3);
  CHECK(c.grids == a.grids);
}

TEST_CASE("sampled token frequency matches softmax within 3 sigma") {
  VarConfig cfg = tiny_config();
  cfg.schedule = ScaleSchedule{{{1, 1}}};
  cfg.vocab = 4;
  VarModel model(cfg, 67);
  auto tok = tiny_tokenizer(cfg, 71);
  PromptSpec prompt{{2}};

  auto pyr = random_pyramid(cfg, 1);
  auto logits = model.forward_teacher_forced(prompt, pyr, tok);
  const double* row = logits.per_scale[0].value().data();
  double mx = *std::max_element(row, row + 4);
  double denom = 0.0;
  std::vector<double> p(4);
  for (int i = 0; i < 4; ++i) denom += std::exp(row[i] - mx);
  for (int i = 0; i < 4; ++i) p[static_cast<size_t>(i)] = std::exp(row[i] - mx) / denom;

  const int n = 10000;
  std::vector<int> counts(4, 0);
  Rng rng = Rng::stream(123, "sample-freq");
  SampleParams full{1.0, 0};
  for (int i = 0; i < n; ++i) {
    int64_t t = sample_from_logits(row, 4, full, rng);
    counts[static_cast<size_t>(t)]++;
  }
  for (int i = 0; i < 4; ++i) {
    double freq = static_cast<double>(counts[static_cast<size_t>(i)]) / n;
    double sigma = std::sqrt(p[static_cast<size_t>(i)] * (1 - p[static_cast<size_t>(i)]) / n);
    INFO("token " << i << " freq " << freq << " p " << p[static_cast<size_t>(i)]);
    CHECK(std::fabs(freq - p[static_cast<size_t>(i)]) <= 3.0 * sigma + 1e-12);
  }
}

TEST_CASE("checkpoint round trip preserves behavior") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 73);
  model.vocab().register_concept("<c0>");
  auto tok = tiny_tokenizer(cfg, 79);
  auto pyr = random_pyramid(cfg, 83);
  auto before = model.forward_teacher_forced(PromptSpec{{1, 8}}, pyr, tok);

  std::string path = "model_roundtrip.cpcv";
  model.save(path);
  auto loaded = VarModel::load(path);
  CHECK(loaded.content_hash() == model.content_hash());
  CHECK(loaded.vocab().concepts() == model.vocab().concepts());
  auto after = loaded.forward_teacher_forced(PromptSpec{{1, 8}}, pyr, tok);
  for (size_t s = 0; s < before.per_scale.size(); ++s)
    CHECK(before.per_scale[s].value() == after.per_scale[s].value());
  std::remove(path.c_str());
}

TEST_CASE("prompt validation") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 89);
  CHECK_THROWS_AS(model.validate_prompt(PromptSpec{{0, 1, 2, 3, 4}}), StateError);  // too long
  CHECK_THROWS_AS(model.validate_prompt(PromptSpec{{9}}), StateError);  // unregistered concept id
  CHECK_THROWS_AS(model.validate_prompt(PromptSpec{{}}), StateError);
  model.vocab().register_concept("<c0>");
  model.validate_prompt(PromptSpec{{8}});  // now registered
}
