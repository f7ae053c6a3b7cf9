#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cpcvar/gcns.hpp"
#include "cpcvar/rng.hpp"

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
  cfg.max_concepts = 4;
  cfg.max_prompt_len = 4;
  return cfg;
}

Tokenizer tiny_tokenizer(const VarConfig& cfg, uint64_t seed) {
  TokenizerConfig tcfg;
  tcfg.image_size = cfg.schedule.levels.back()[0] * 4;
  tcfg.feature_dim = cfg.feature_dim;
  tcfg.codebook_size = cfg.vocab;
  tcfg.schedule = cfg.schedule;
  Rng rng(seed);
  Codebook cb;
  cb.size = cfg.vocab;
  cb.dim = cfg.feature_dim;
  cb.vectors = rng.normal_vec(static_cast<size_t>(cfg.vocab * cfg.feature_dim), 0.0, 0.5);
  cb.trained = true;
  return Tokenizer(tcfg, PatchAutoencoder::init(tcfg.hidden_dim, tcfg.feature_dim, rng), cb);
}

TokenPyramid random_pyramid(const VarConfig& cfg, Rng& rng) {
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

ConceptTaskData make_task(const VarConfig& cfg, VarModel& model, int64_t task_id,
                          const std::string& name, uint64_t seed) {
  ConceptTaskData task;
  task.task_id = task_id;
  task.concept_name = name;
  task.concept_token = model.vocab().has_concept(name) ? model.vocab().concept_id(name)
                                                       : model.vocab().register_concept(name);
  Rng rng(seed);
  for (int i = 0; i < 3; ++i) {
    TrainingItem item;
    item.prompt = PromptSpec{{1, task.concept_token}};
    item.pyramid = random_pyramid(cfg, rng);
    task.items.push_back(std::move(item));
  }
  return task;
}

BitMask mask_of(std::initializer_list<size_t> bits, size_t size) {
  BitMask m(size);
  for (size_t b : bits) m.set(b);
  return m;
}

}  // namespace

TEST_CASE("select_mask cardinality and ordering") {
  // p = 100 selects everything
  std::vector<double> g = {0.1, -0.2, 0.0, 0.3};
  CHECK(select_mask(g, 100.0).popcount() == 4);

  // ceil(5 * 1000 / 100) = 50
  Rng rng(3);
  auto big = rng.normal_vec(1000, 0.0, 1.0);
  CHECK(select_mask(big, 5.0).popcount() == 50);

  // |g| = [5,1,4,2,3], p=40 -> indices {0,2}
  auto m = select_mask({5.0, -1.0, 4.0, 2.0, -3.0}, 40.0);
  CHECK(m.popcount() == 2);
  CHECK(m.test(0));
  CHECK(m.test(2));

  // sort-and-take oracle on random vectors, several p values
  for (double p : {5.0, 10.0, 40.0, 100.0}) {
    auto vec = rng.normal_vec(333, 0.0, 1.0);
    auto mask = select_mask(vec, p);
    size_t expect = static_cast<size_t>(std::ceil(p * 333.0 / 100.0 - 1e-12));
    CHECK(mask.popcount() == expect);
    std::vector<size_t> order(vec.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return std::fabs(vec[a]) > std::fabs(vec[b]);
    });
    for (size_t i = 0; i < expect; ++i) CHECK(mask.test(order[i]));
  }
}

TEST_CASE("phase mask merge is logical OR within one task") {
  ConceptMask a{mask_of({0, 2}, 8), 1, 0};
  ConceptMask b{mask_of({2, 3}, 8), 1, 1};
  ConceptMask empty{BitMask(8), 1, 2};

  auto merged = merge_phase_masks({a});
  CHECK(merged.bits == a.bits);

  merged = merge_phase_masks({a, empty});
  CHECK(merged.bits == a.bits);

  merged = merge_phase_masks({a, b});
  CHECK(merged.bits == mask_of({0, 2, 3}, 8));
  CHECK(merged.bits.popcount() >= a.bits.popcount());

  ConceptMask other{mask_of({1}, 8), 2, 0};
  CHECK_THROWS_AS(merge_phase_masks({a, other}), StateError);
}

TEST_CASE("history mask folds the ledger") {
  TaskLedger ledger(16);
  CHECK(history_mask(ledger).popcount() == 0);  // t = 1

  TaskRecord r1;
  r1.task_id = 1;
  r1.concept_name = "<a>";
  r1.mask = mask_of({0, 1, 2}, 16);
  ledger.append(r1);
  TaskRecord r2;
  r2.task_id = 2;
  r2.concept_name = "<b>";
  r2.mask = mask_of({8, 9}, 16);
  ledger.append(r2);

  // disjoint masks: union popcount is the sum
  CHECK(ledger.history().popcount() == 5);
  // recompute-from-archive equals the cached union bit-exactly
  CHECK(ledger.recompute_history() == ledger.history());
}

TEST_CASE("ledger rejects collisions and round-trips") {
  TaskLedger ledger(16);
  TaskRecord r;
  r.task_id = 1;
  r.concept_name = "<a>";
  r.concept_token = 8;
  r.percent = 5.0;
  r.seed = 42;
  r.mask = mask_of({3, 7}, 16);
  r.theta_old_hash = "abc";
  ledger.append(r);
  CHECK_THROWS_AS(ledger.append(r), StateError);

  ledger.save("ledger_roundtrip.cpcv");
  auto loaded = TaskLedger::load("ledger_roundtrip.cpcv");
  CHECK(loaded.ca_dim() == 16);
  CHECK(loaded.task_count() == 1);
  CHECK(loaded.records()[0].mask == r.mask);
  CHECK(loaded.records()[0].theta_old_hash == "abc");
  CHECK(loaded.history() == ledger.history());
  std::remove("ledger_roundtrip.cpcv");
}

TEST_CASE("conflict regularization closed forms") {
  std::vector<int64_t> ca = {10, 11, 12, 13};
  std::vector<double> theta(20, 0.0), theta_old(20, 0.0);

  // empty overlap -> 0
  CHECK(conflict_reg_loss(theta, theta_old, BitMask(4), ca, 1.0) == 0.0);

  // single masked coordinate, diff 0.3, lambda 1 -> 0.09
  theta[11] = 0.3;
  auto m = mask_of({1}, 4);
  CHECK(conflict_reg_loss(theta, theta_old, m, ca, 1.0) == doctest::Approx(0.09).epsilon(1e-15));

  // lambda 0 -> 0
  CHECK(conflict_reg_loss(theta, theta_old, m, ca, 0.0) == 0.0);
}

TEST_CASE("conflict term has exactly zero numeric gradient off the mask") {
  std::vector<int64_t> ca = {0, 1, 2, 3, 4, 5};
  std::vector<double> theta_old(6, 0.1);
  auto m = mask_of({1, 4}, 6);
  auto f = [&](const std::vector<double>& t) {
    return conflict_reg_loss(t, theta_old, m, ca, 1.3);
  };
  Rng rng(7);
  auto theta = rng.normal_vec(6, 0.0, 0.5);
  auto g = finite_diff_gradient(f, theta, 1e-5);
  for (size_t j = 0; j < 6; ++j) {
    if (!m.test(j)) CHECK(g[j] == 0.0);  // exact zero, not approximately
  }
  // and on-mask coordinates match the analytic derivative 2*lambda*diff
  for (size_t j : {1UL, 4UL})
    CHECK(g[j] == doctest::Approx(2.0 * 1.3 * (theta[j] - theta_old[j])).epsilon(1e-6));
}

TEST_CASE("mask storage accounting") {
  TaskLedger ledger(800);
  MaskStorageReport rep = mask_storage_bytes(ledger);
  CHECK(rep.mask_bytes_per_task == 100);  // ceil(800/8)

  for (int64_t t = 1; t <= 8; ++t) {
    TaskRecord r;
    r.task_id = t;
    r.concept_name = "<c" + std::to_string(t) + ">";
    r.mask = BitMask(800);
    ledger.append(r);
  }
  rep = mask_storage_bytes(ledger);
  CHECK(rep.tasks == 8);
  CHECK(rep.total_bytes == 8 * (100 + rep.metadata_bytes_per_task));

  // low-rank adapter storage at the same desk width is strictly larger:
  // 2*r*(d_in+d_out) doubles per adapted matrix
  int64_t lora_bytes_per_matrix = 2 * 4 * (16 + 16) * 8;
  CHECK(rep.mask_bytes_per_task < lora_bytes_per_matrix);
}

TEST_CASE("saliency: dead path behind zero output projections") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 5);
  auto tok = tiny_tokenizer(cfg, 7);
  auto& theta = model.params().values();
  for (const auto& seg : model.params().segments())
    if (seg.name.find(".ca.wo") != std::string::npos)
      std::fill(theta.begin() + seg.offset, theta.begin() + seg.offset + seg.size, 0.0);

  auto task = make_task(cfg, model, 1, "<c>", 11);
  GcnsTrainer trainer(model, tok);
  auto g = trainer.compute_saliency(task.items, ScaleWeights::all_ones(2));

  // q/k/v coordinates feed only through the zeroed projection
  size_t cursor = 0;
  for (const auto& seg : model.params().segments()) {
    if (seg.group != ParamGroup::kCrossAttention) continue;
    bool is_wo = seg.name.find(".ca.wo") != std::string::npos;
    for (int64_t j = 0; j < seg.size; ++j) {
      if (!is_wo) CHECK(g[cursor + static_cast<size_t>(j)] == 0.0);
    }
    cursor += static_cast<size_t>(seg.size);
  }
}

TEST_CASE("saliency agrees with central differences on CA coordinates") {
  VarConfig cfg = tiny_config();
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.ffn_hidden = 16;
  VarModel model(cfg, 13);
  auto tok = tiny_tokenizer(cfg, 17);
  auto task = make_task(cfg, model, 1, "<c>", 19);
  GcnsTrainer trainer(model, tok);
  auto weights = ScaleWeights::fine_scales(2, 0.5);
  auto g = trainer.compute_saliency(task.items, weights);

  const auto& ca = model.params().ca_indices();
  REQUIRE(g.size() == ca.size());

  auto loss_at = [&](const std::vector<double>& theta_flat) {
    VarModel probe = model;  // copies params
    probe.params().values() = theta_flat;
    double total = 0.0;
    for (const auto& item : task.items) {
      auto logits = probe.forward_teacher_forced(item.prompt, item.pyramid, tok);
      total += VarModel::weighted_nll(logits, item.pyramid, weights).item();
    }
    return total;
  };

  std::vector<double> theta = model.params().values();
  double max_err = 0.0;
  for (size_t j = 0; j < ca.size(); ++j) {
    size_t flat = static_cast<size_t>(ca[j]);
    double saved = theta[flat];
    theta[flat] = saved + 1e-5;
    double hi = loss_at(theta);
    theta[flat] = saved - 1e-5;
    double lo = loss_at(theta);
    theta[flat] = saved;
    double numeric = (hi - lo) / 2e-5;
    double denom = std::max({std::fabs(numeric), std::fabs(g[j]), 1e-3});
    max_err = std::max(max_err, std::fabs(numeric - g[j]) / denom);
  }
  INFO("max rel err " << max_err);
  CHECK(max_err < 1e-4);
}

TEST_CASE("saliency is linear in the loss") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 23);
  auto tok = tiny_tokenizer(cfg, 29);
  auto task = make_task(cfg, model, 1, "<c>", 31);
  GcnsTrainer trainer(model, tok);

  auto g1 = trainer.compute_saliency(task.items, ScaleWeights::all_ones(2));
  auto g2 = trainer.compute_saliency(task.items, ScaleWeights{{2.0, 2.0}});
  for (size_t j = 0; j < g1.size(); ++j) CHECK(g2[j] == 2.0 * g1[j]);
}

TEST_CASE("train_task with zero iterations is a no-op") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 37);
  auto tok = tiny_tokenizer(cfg, 41);
  auto task = make_task(cfg, model, 1, "<c>", 43);
  TaskLedger ledger(model.params().ca_dim());
  GcnsConfig gc;
  gc.iterations = 0;

  auto before = model.params().values();
  GcnsTrainer trainer(model, tok);
  auto result = trainer.train_task(ledger, task, gc, 99);
  CHECK(model.params().values() == before);
  CHECK(result.task_mask.popcount() == 0);
  CHECK(ledger.task_count() == 1);
}

TEST_CASE("train_task freezes everything outside mask and concept row") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 47);
  auto tok = tiny_tokenizer(cfg, 53);
  auto task = make_task(cfg, model, 1, "<c>", 59);
  TaskLedger ledger(model.params().ca_dim());
  GcnsConfig gc;
  gc.iterations = 12;
  gc.refresh_interval = 4;
  gc.percent = 10.0;

  auto before = model.params().values();
  const auto& prompt_seg = model.params().segment("embed.prompt");
  std::vector<int64_t> row_coords;
  for (int64_t j = 0; j < cfg.d_model; ++j)
    row_coords.push_back(prompt_seg.offset + task.concept_token * cfg.d_model + j);
  auto non_ca_before = model.params().hash_excluding(ParamGroup::kCrossAttention, row_coords);

  GcnsTrainer trainer(model, tok);
  auto result = trainer.train_task(ledger, task, gc, 7);

  // all non-CA transformer weights hash-identical
  CHECK(model.params().hash_excluding(ParamGroup::kCrossAttention, row_coords) == non_ca_before);

  // bitwise diff set is inside (union of phase masks) + concept row
  const auto& after = model.params().values();
  const auto& ca = model.params().ca_indices();
  std::vector<int64_t> ca_pos_of_flat(static_cast<size_t>(model.params().dim()), -1);
  for (size_t j = 0; j < ca.size(); ++j) ca_pos_of_flat[static_cast<size_t>(ca[j])] = static_cast<int64_t>(j);
  for (size_t i = 0; i < after.size(); ++i) {
    if (after[i] == before[i]) continue;
    bool in_row = std::find(row_coords.begin(), row_coords.end(), static_cast<int64_t>(i)) !=
                  row_coords.end();
    bool in_mask = ca_pos_of_flat[i] >= 0 &&
                   result.task_mask.test(static_cast<size_t>(ca_pos_of_flat[i]));
    CHECK((in_row || in_mask));
  }

  // OR monotonicity across phases
  for (size_t k = 1; k < result.telemetry.task_mask_after.size(); ++k)
    CHECK(result.telemetry.task_mask_after[k - 1].is_subset_of(
        result.telemetry.task_mask_after[k]));

  // selection cardinality at every phase
  size_t expect = static_cast<size_t>(
      std::ceil(gc.percent * static_cast<double>(model.params().ca_dim()) / 100.0 - 1e-12));
  for (const auto& pm : result.telemetry.phase_masks) CHECK(pm.popcount() == expect);
}

TEST_CASE("two-task loss decomposition matches external recompute") {
  VarConfig cfg = tiny_config();
  VarModel model(cfg, 61);
  auto tok = tiny_tokenizer(cfg, 67);
  TaskLedger ledger(model.params().ca_dim());
  GcnsConfig gc;
  gc.iterations = 10;
  gc.refresh_interval = 5;
  gc.percent = 30.0;
  gc.lambda = 1.0;

  GcnsTrainer trainer(model, tok);
  auto task1 = make_task(cfg, model, 1, "<c1>", 71);
  trainer.train_task(ledger, task1, gc, 5);
  auto theta_after_task1 = model.params().values();

  // similar data for task 2 encourages overlapping saliency
  auto task2 = make_task(cfg, model, 2, "<c2>", 71);
  auto result = trainer.train_task(ledger, task2, gc, 6);
  const auto& tele = result.telemetry;

  ScaleWeights w = gc.resolved_weights(2);
  double nll = 0.0;
  for (const auto& item : task2.items) {
    auto logits = model.forward_teacher_forced(item.prompt, item.pyramid, tok);
    nll += VarModel::weighted_nll(logits, item.pyramid, w).item();
  }
  double reg = conflict_reg_loss(model.params().values(), theta_after_task1,
                                 tele.final_reg_mask, model.params().ca_indices(), gc.lambda);
  CHECK(std::fabs(tele.final_total - (nll + reg)) < 1e-9);
}

TEST_CASE("train_task is deterministic") {
  auto run = [](uint64_t seed) {
    VarConfig cfg = tiny_config();
    VarModel model(cfg, 73);
    auto tok = tiny_tokenizer(cfg, 79);
    auto task = make_task(cfg, model, 1, "<c>", 83);
    TaskLedger ledger(model.params().ca_dim());
    GcnsConfig gc;
    gc.iterations = 8;
    gc.refresh_interval = 3;
    GcnsTrainer trainer(model, tok);
    auto result = trainer.train_task(ledger, task, gc, seed);
    return std::pair{model.params().content_hash(), result.task_mask};
  };
  auto [h1, m1] = run(11);
  auto [h2, m2] = run(11);
  CHECK(h1 == h2);
  CHECK(m1 == m2);
  auto [h3, m3] = run(12);
  CHECK(h1 != h3);  // different batch stream
}

TEST_CASE("config validation") {
  GcnsConfig gc;
  gc.percent = 0.0;
  CHECK_THROWS_AS(gc.validate(), ConfigError);
  gc = GcnsConfig{};
  gc.refresh_interval = 0;
  CHECK_THROWS_AS(gc.validate(), ConfigError);
  gc = GcnsConfig{};
  gc.lambda = -1.0;
  CHECK_THROWS_AS(gc.validate(), ConfigError);
  gc = GcnsConfig{};
  gc.validate();
}
