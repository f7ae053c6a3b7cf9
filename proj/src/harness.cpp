#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "cpcvar/errors.hpp"
#include "cpcvar/harness.hpp"
#include "cpcvar/hash.hpp"
#include "cpcvar/log.hpp"

namespace cpcvar {

namespace {

constexpr int64_t kLoraRank = 4;

PromptSpec object_prompt(int64_t concept_token, int bg_color) {
  return PromptSpec{{world::kA, world::kPhoto, world::kOf, concept_token, world::kOn,
                     world::kColorBase + bg_color, world::kBackground}};
}

PromptSpec style_prompt(int64_t concept_token, int fg_color, int shape) {
  return PromptSpec{{world::kA, world::kPhoto, world::kOf, world::kColorBase + fg_color,
                     world::kShapeBase + shape, world::kIn, concept_token}};
}

struct EvalPrompt {
  PromptSpec prompt;
  int expected_bg = -1;
};

std::vector<EvalPrompt> eval_prompt_set(const ConceptDataset& dataset, int64_t concept_token,
                                        int count) {
  std::vector<EvalPrompt> out;
  if (dataset.descriptor.kind == ConceptKind::kObject) {
    int bg = 0;
    while (static_cast<int>(out.size()) < count) {
      if (bg % world::kNumColors != dataset.descriptor.fg_color)
        out.push_back({object_prompt(concept_token, bg % world::kNumColors),
                       bg % world::kNumColors});
      ++bg;
    }
  } else {
    for (int i = 0; i < count; ++i)
      out.push_back({style_prompt(concept_token, (2 * i + 1) % world::kNumColors,
                                  i % world::kNumShapes),
                     -1});
  }
  return out;
}

std::string batches_stream_name(int64_t task_id) {
  return "task" + std::to_string(task_id) + ".batches";
}

// Per-coordinate learning rates for the unrestricted baselines.
std::vector<double> full_lr_vector(const VarModel& model, const ConceptTaskData& task,
                                   const GcnsConfig& config) {
  const ParamStore& store = model.params();
  std::vector<double> lr(static_cast<size_t>(store.dim()), config.lr_neuron * config.lr_scale);
  const auto& seg = store.segment("embed.prompt");
  int64_t row = seg.offset + task.concept_token * model.config().d_model;
  for (int64_t j = 0; j < model.config().d_model; ++j)
    lr[static_cast<size_t>(row + j)] = config.lr_embedding * config.lr_scale;
  return lr;
}

struct TeacherDistribution {
  // per item, per scale: softmax rows and their entropy-sum contribution
  std::vector<std::vector<std::vector<double>>> probs;
  std::vector<std::vector<double>> entropy;  // sum q log q per scale
};

TeacherDistribution teacher_distribution(const VarModel& model, const Tokenizer& tokenizer,
                                         const ConceptTaskData& task) {
  TeacherDistribution t;
  for (const auto& item : task.items) {
    auto logits = model.forward_teacher_forced(item.prompt, item.pyramid, tokenizer);
    std::vector<std::vector<double>> item_probs;
    std::vector<double> item_entropy;
    for (const auto& rows : logits.per_scale) {
      auto p = softmax_lastdim(rows);
      double ent = 0.0;
      for (double q : p.value()) ent += (q > 0.0) ? q * std::log(q) : 0.0;
      item_probs.push_back(p.value());
      item_entropy.push_back(ent);
    }
    t.probs.push_back(std::move(item_probs));
    t.entropy.push_back(std::move(item_entropy));
  }
  return t;
}

BaselineTrainResult train_unrestricted(VarModel& model, const Tokenizer& tokenizer,
                                       const ConceptTaskData& task, const GcnsConfig& config,
                                       uint64_t seed, bool distill) {
  config.validate();
  const VarConfig& cfg = model.config();
  ParamStore& params = model.params();
  ScaleWeights ones = ScaleWeights::all_ones(cfg.schedule.num_scales());

  Rng batch_rng = Rng::stream(seed, batches_stream_name(task.task_id));
  auto schedule = batch_schedule(task.items.size(), config.iterations, batch_rng);
  BaselineTrainResult result;
  result.batch_stream_hash = batch_stream_hash(schedule);

  TeacherDistribution teacher;
  if (distill) teacher = teacher_distribution(model, tokenizer, task);

  Optimizer optimizer(config.optimizer, static_cast<size_t>(params.dim()));
  auto lr = full_lr_vector(model, task, config);

  for (int64_t iter = 0; iter < config.iterations; ++iter) {
    size_t item_idx = schedule[static_cast<size_t>(iter)];
    const TrainingItem& item = task.items[item_idx];
    Tape tape;
    auto bound = bind_params(params, true);
    auto inputs = tokenizer.build_scale_inputs(item.pyramid);
    auto logits = VarModel::forward_graph(cfg, bound, item.prompt, inputs,
                                          item.pyramid.num_scales());
    Tensor loss = VarModel::weighted_nll(logits, item.pyramid, ones);
    if (distill) {
      // KL(teacher || student) on the current batch item, weight 1.0
      Tensor kl;
      for (size_t s = 0; s < logits.per_scale.size(); ++s) {
        auto ls = log_softmax_lastdim(logits.per_scale[s]);
        Tensor soft_ce = mul_scalar(sum_all(mask_mul(ls, teacher.probs[item_idx][s])), -1.0);
        Tensor term = add(soft_ce, Tensor::scalar(teacher.entropy[item_idx][s]));
        kl = kl.defined() ? add(kl, term) : term;
      }
      loss = add(loss, kl);
    }
    double total = loss.item();
    if (!std::isfinite(total))
      throw NumericError("train_baseline_task: non-finite loss at iteration " +
                         std::to_string(iter));
    tape.backward(loss);
    auto grad = collect_gradients(bound);
    optimizer.step(params.values(), grad, lr);
    result.losses.push_back(total);
  }
  return result;
}

std::vector<size_t> lora_segment_indices(const ParamStore& store) {
  std::vector<size_t> out;
  const auto& segs = store.segments();
  for (size_t i = 0; i < segs.size(); ++i) {
    bool adapted_group = segs[i].group == ParamGroup::kCrossAttention ||
                         segs[i].group == ParamGroup::kFeedForward;
    if (adapted_group && segs[i].shape.size() == 2) out.push_back(i);
  }
  return out;
}

BaselineTrainResult train_lowrank(VarModel& model, const Tokenizer& tokenizer,
                                  const ConceptTaskData& task, const GcnsConfig& config,
                                  uint64_t seed, MethodState& state) {
  config.validate();
  const VarConfig& cfg = model.config();
  ParamStore& params = model.params();
  ScaleWeights ones = ScaleWeights::all_ones(cfg.schedule.num_scales());

  if (!state.lora)
    state.lora = LoraAdapters::init(params, kLoraRank, seed ^ 0x10ad);
  LoraAdapters& lora = *state.lora;

  Rng batch_rng = Rng::stream(seed, batches_stream_name(task.task_id));
  auto schedule = batch_schedule(task.items.size(), config.iterations, batch_rng);
  BaselineTrainResult result;
  result.batch_stream_hash = batch_stream_hash(schedule);

  // flat trainable vector: [concept row | A_0 B_0 A_1 B_1 ...]
  const auto& prompt_seg = params.segment("embed.prompt");
  int64_t row_offset = prompt_seg.offset + task.concept_token * cfg.d_model;
  size_t flat_dim = static_cast<size_t>(cfg.d_model);
  for (size_t j = 0; j < lora.a.size(); ++j) flat_dim += lora.a[j].size() + lora.b[j].size();

  Optimizer optimizer(config.optimizer, flat_dim);
  std::vector<double> lr(flat_dim, config.lr_neuron * config.lr_scale);
  for (int64_t j = 0; j < cfg.d_model; ++j)
    lr[static_cast<size_t>(j)] = config.lr_embedding * config.lr_scale;

  for (int64_t iter = 0; iter < config.iterations; ++iter) {
    const TrainingItem& item = task.items[schedule[static_cast<size_t>(iter)]];
    Tape tape;
    auto bound = bind_params(params, true);
    std::vector<Tensor> a_leaves, b_leaves;
    for (size_t j = 0; j < lora.segment_indices.size(); ++j) {
      const auto& seg = params.segments()[lora.segment_indices[j]];
      Tensor a = Tensor::from({seg.shape[0], lora.rank}, lora.a[j], true);
      Tensor b = Tensor::from({lora.rank, seg.shape[1]}, lora.b[j], true);
      bound.tensors[lora.segment_indices[j]] = add(bound.tensors[lora.segment_indices[j]],
                                                   matmul(a, b));
      a_leaves.push_back(std::move(a));
      b_leaves.push_back(std::move(b));
    }
    auto inputs = tokenizer.build_scale_inputs(item.pyramid);
    auto logits = VarModel::forward_graph(cfg, bound, item.prompt, inputs,
                                          item.pyramid.num_scales());
    Tensor loss = VarModel::weighted_nll(logits, item.pyramid, ones);
    double total = loss.item();
    if (!std::isfinite(total))
      throw NumericError("train_baseline_task: non-finite loss at iteration " +
                         std::to_string(iter));
    tape.backward(loss);

    std::vector<double> flat_theta(flat_dim), flat_grad(flat_dim, 0.0);
    for (int64_t j = 0; j < cfg.d_model; ++j)
      flat_theta[static_cast<size_t>(j)] = params.values()[static_cast<size_t>(row_offset + j)];
    const auto& emb_grad = bound.get("embed.prompt").grad();
    for (int64_t j = 0; j < cfg.d_model; ++j)
      flat_grad[static_cast<size_t>(j)] =
          emb_grad[static_cast<size_t>(task.concept_token * cfg.d_model + j)];
    size_t off = static_cast<size_t>(cfg.d_model);
    for (size_t j = 0; j < lora.a.size(); ++j) {
      const auto& ga = a_leaves[j].grad();
      const auto& gb = b_leaves[j].grad();
      std::copy(lora.a[j].begin(), lora.a[j].end(), flat_theta.begin() + static_cast<long>(off));
      std::copy(ga.begin(), ga.end(), flat_grad.begin() + static_cast<long>(off));
      off += lora.a[j].size();
      std::copy(lora.b[j].begin(), lora.b[j].end(), flat_theta.begin() + static_cast<long>(off));
      std::copy(gb.begin(), gb.end(), flat_grad.begin() + static_cast<long>(off));
      off += lora.b[j].size();
    }

    optimizer.step(flat_theta, flat_grad, lr);

    for (int64_t j = 0; j < cfg.d_model; ++j)
      params.values()[static_cast<size_t>(row_offset + j)] = flat_theta[static_cast<size_t>(j)];
    off = static_cast<size_t>(cfg.d_model);
    for (size_t j = 0; j < lora.a.size(); ++j) {
      std::copy(flat_theta.begin() + static_cast<long>(off),
                flat_theta.begin() + static_cast<long>(off + lora.a[j].size()),
                lora.a[j].begin());
      off += lora.a[j].size();
      std::copy(flat_theta.begin() + static_cast<long>(off),
                flat_theta.begin() + static_cast<long>(off + lora.b[j].size()),
                lora.b[j].begin());
      off += lora.b[j].size();
    }
    result.losses.push_back(total);
  }
  return result;
}

}  // namespace

const char* baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kGcns: return "gcns";
    case BaselineKind::kFullFinetune: return "full_finetune";
    case BaselineKind::kDistillKl: return "distill_kl";
    case BaselineKind::kLowRankAdapter: return "lowrank_adapter";
    case BaselineKind::kFrozen: return "frozen";
  }
  return "unknown";
}

BaselineKind baseline_from_string(const std::string& name) {
  for (BaselineKind k : {BaselineKind::kGcns, BaselineKind::kFullFinetune,
                         BaselineKind::kDistillKl, BaselineKind::kLowRankAdapter,
                         BaselineKind::kFrozen})
    if (name == baseline_name(k)) return k;
  throw ConfigError("unknown method '" + name + "'");
}

LoraAdapters LoraAdapters::init(const ParamStore& store, int64_t rank, uint64_t seed) {
  LoraAdapters lora;
  lora.rank = rank;
  lora.segment_indices = lora_segment_indices(store);
  Rng rng(seed);
  for (size_t idx : lora.segment_indices) {
    const auto& seg = store.segments()[idx];
    lora.a.push_back(rng.normal_vec(static_cast<size_t>(seg.shape[0] * rank), 0.0, 0.02));
    lora.b.push_back(std::vector<double>(static_cast<size_t>(rank * seg.shape[1]), 0.0));
  }
  return lora;
}

int64_t LoraAdapters::storage_bytes() const {
  int64_t total = 0;
  for (size_t j = 0; j < a.size(); ++j)
    total += static_cast<int64_t>((a[j].size() + b[j].size()) * sizeof(double));
  return total;
}

double LoraAdapters::fuse_into(ParamStore& store) const {
  auto t0 = std::chrono::steady_clock::now();
  for (size_t j = 0; j < segment_indices.size(); ++j) {
    const auto& seg = store.segments()[segment_indices[j]];
    int64_t rows = seg.shape[0], cols = seg.shape[1];
    double* w = store.values().data() + seg.offset;
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t r = 0; r < rank; ++r) {
        double av = a[j][static_cast<size_t>(i * rank + r)];
        const double* brow = b[j].data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) w[i * cols + c] += av * brow[c];
      }
  }
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

BaselineTrainResult train_baseline_task(VarModel& model, const Tokenizer& tokenizer,
                                        TaskLedger& ledger, const ConceptTaskData& task,
                                        BaselineKind kind, const GcnsConfig& config,
                                        uint64_t seed, MethodState& state) {
  switch (kind) {
    case BaselineKind::kGcns: {
      GcnsTrainer trainer(model, tokenizer);
      auto r = trainer.train_task(ledger, task, config, seed);
      return {r.telemetry.batch_stream_hash, r.telemetry.total_losses};
    }
    case BaselineKind::kFrozen: {
      Rng batch_rng = Rng::stream(seed, batches_stream_name(task.task_id));
      auto schedule = batch_schedule(task.items.size(), config.iterations, batch_rng);
      return {batch_stream_hash(schedule), {}};
    }
    case BaselineKind::kFullFinetune:
      return train_unrestricted(model, tokenizer, task, config, seed, false);
    case BaselineKind::kDistillKl:
      return train_unrestricted(model, tokenizer, task, config, seed, true);
    case BaselineKind::kLowRankAdapter:
      return train_lowrank(model, tokenizer, task, config, seed, state);
  }
  throw ConfigError("train_baseline_task: unknown method");
}

// ---- pretraining ----

PretrainedArtifacts pretrain_base(const PretrainConfig& config, uint64_t seed) {
  if (config.model.vocab != config.tokenizer.codebook_size)
    throw ConfigError("pretrain: model vocab must equal codebook size");
  if (config.model.feature_dim != config.tokenizer.feature_dim)
    throw ConfigError("pretrain: model feature dim must equal tokenizer feature dim");
  if (!(config.model.schedule == config.tokenizer.schedule))
    throw ConfigError("pretrain: model and tokenizer schedules differ");
  if (config.model.prompt_vocab != world::kBaseVocab)
    throw ConfigError("pretrain: prompt vocabulary must match the world word table");

  auto make_scene = [](Rng& rng) {
    world::SceneSpec scene;
    scene.shape = static_cast<int>(rng.below(world::kNumShapes));
    scene.fg_color = static_cast<int>(rng.below(world::kNumColors));
    scene.texture = static_cast<int>(rng.below(world::kNumTextures));
    scene.bg_color = static_cast<int>(rng.below(world::kNumColors));
    if (scene.bg_color == scene.fg_color)
      scene.bg_color = (scene.bg_color + 1) % world::kNumColors;
    scene.center_x = 0.5 + rng.uniform(-0.08, 0.08);
    scene.center_y = 0.5 + rng.uniform(-0.08, 0.08);
    scene.radius = rng.uniform(0.24, 0.34);
    return scene;
  };
  auto caption = [](const world::SceneSpec& s) {
    return PromptSpec{{world::kA, world::kPhoto, world::kOf, world::kColorBase + s.fg_color,
                       world::kShapeBase + s.shape, world::kOn, world::kColorBase + s.bg_color,
                       world::kBackground}};
  };

  Rng corpus_rng = Rng::stream(seed, "corpus");
  std::vector<world::SceneSpec> scenes;
  std::vector<Image> images;
  for (int64_t i = 0; i < config.corpus_images; ++i) {
    scenes.push_back(make_scene(corpus_rng));
    images.push_back(world::render_scene(scenes.back()));
  }
  Rng val_rng = Rng::stream(seed, "validation");
  std::vector<world::SceneSpec> val_scenes;
  std::vector<Image> val_images;
  for (int64_t i = 0; i < config.validation_images; ++i) {
    val_scenes.push_back(make_scene(val_rng));
    val_images.push_back(world::render_scene(val_scenes.back()));
  }

  PretrainedArtifacts artifacts{
      train_tokenizer(images, config.tokenizer, Rng::stream(seed, "tokenizer")),
      VarModel(config.model, Rng::stream(seed, "base").next_u64()),
      {}};

  std::vector<TrainingItem> items, val_items;
  for (size_t i = 0; i < images.size(); ++i)
    items.push_back({caption(scenes[i]), artifacts.tokenizer.tokenize(images[i])});
  for (size_t i = 0; i < val_images.size(); ++i)
    val_items.push_back({caption(val_scenes[i]), artifacts.tokenizer.tokenize(val_images[i])});

  auto validation_nll = [&] {
    double acc = 0.0;
    for (const auto& item : val_items) {
      auto logits = artifacts.model.forward_teacher_forced(item.prompt, item.pyramid,
                                                           artifacts.tokenizer);
      acc += VarModel::nll(logits, item.pyramid).item();
    }
    return acc / static_cast<double>(val_items.size());
  };

  ParamStore& params = artifacts.model.params();
  Optimizer optimizer(OptimizerKind::kAdamW, static_cast<size_t>(params.dim()), 0.9, 0.95);
  std::vector<double> lr(static_cast<size_t>(params.dim()), config.learning_rate);
  Rng batch_rng = Rng::stream(seed, "base.batches");

  artifacts.validation_nll.push_back(validation_nll());
  for (int64_t step = 0; step < config.steps; ++step) {
    const TrainingItem& item = items[batch_rng.below(items.size())];
    Tape tape;
    auto bound = bind_params(params, true);
    auto inputs = artifacts.tokenizer.build_scale_inputs(item.pyramid);
    auto logits = VarModel::forward_graph(config.model, bound, item.prompt, inputs,
                                          item.pyramid.num_scales());
    Tensor loss = VarModel::nll(logits, item.pyramid);
    if (!std::isfinite(loss.item()))
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    auto grad = collect_gradients(bound);
    optimizer.step(params.values(), grad, lr);
    if ((step + 1) % config.log_every == 0 || step + 1 == config.steps) {
      artifacts.validation_nll.push_back(validation_nll());
      log::debug("pretrain step %lld val nll %.3f", static_cast<long long>(step + 1),
                 artifacts.validation_nll.back());
    }
  }
  return artifacts;
}

int64_t register_concept_token(VarModel& model, const ConceptDescriptor& descriptor) {
  int64_t token = model.vocab().register_concept(descriptor.name);
  // warm-start the trainable row from the nearest class word, as common for
  // identifier-token personalization
  int64_t source_word = descriptor.kind == ConceptKind::kObject
                            ? world::kShapeBase + descriptor.shape
                            : world::kStyleWord;
  auto& theta = model.params().values();
  const auto& seg = model.params().segment("embed.prompt");
  int64_t d = model.config().d_model;
  for (int64_t j = 0; j < d; ++j)
    theta[static_cast<size_t>(seg.offset + token * d + j)] =
        theta[static_cast<size_t>(seg.offset + source_word * d + j)];
  return token;
}

ConceptTaskData build_task_data(const ConceptDataset& dataset, int64_t task_id,
                                int64_t concept_token, const Tokenizer& tokenizer) {
  ConceptTaskData task;
  task.task_id = task_id;
  task.concept_name = dataset.descriptor.name;
  task.concept_token = concept_token;
  for (size_t i = 0; i < dataset.references.size(); ++i) {
    TrainingItem item;
    if (dataset.descriptor.kind == ConceptKind::kObject)
      item.prompt = object_prompt(concept_token, dataset.reference_bg[i]);
    else
      item.prompt = style_prompt(concept_token, dataset.descriptor.fg_color,
                                 dataset.descriptor.shape);
    item.pyramid = tokenizer.tokenize(dataset.references[i]);
    task.items.push_back(std::move(item));
  }
  return task;
}

// ---- sequence runner ----

const ConceptEval* SequenceResult::find_eval(const std::string& concept_name,
                                             int64_t after_task) const {
  for (const auto& e : evals)
    if (e.concept_name == concept_name && e.after_task == after_task) return &e;
  return nullptr;
}

double SequenceResult::retention_of(const std::string& concept_name) const {
  const ConceptEval* last = nullptr;
  for (const auto& e : evals)
    if (e.concept_name == concept_name) last = &e;
  if (last == nullptr) throw StateError("retention_of: concept never evaluated");
  return last->forgetting_delta;
}

SequenceResult run_sequence(const PretrainedArtifacts& artifacts,
                            const std::vector<ConceptDataset>& concepts,
                            const TaskSequence& sequence, BaselineKind method,
                            const HarnessConfig& config, uint64_t seed) {
  auto wall_start = std::chrono::steady_clock::now();

  SequenceResult res;
  res.method = method;
  res.seed = seed;
  res.sequence_label = sequence.label;

  VarModel model = artifacts.model;
  const Tokenizer& tokenizer = artifacts.tokenizer;
  res.tokenizer_hash_before = tokenizer.content_hash();

  TaskLedger ledger(model.params().ca_dim());
  MethodState state;
  auto extractor = RandomFeatureExtractor::make(config.extractor_seed);
  std::map<std::string, double> learn_time_fidelity;
  std::vector<size_t> learned;

  for (size_t t = 0; t < sequence.concept_order.size(); ++t) {
    int64_t task_id = static_cast<int64_t>(t) + 1;
    size_t ci = sequence.concept_order[t];
    const ConceptDataset& dataset = concepts.at(ci);
    int64_t token = register_concept_token(model, dataset.descriptor);
    ConceptTaskData data = build_task_data(dataset, task_id, token, tokenizer);

    GcnsConfig gcfg = config.gcns;
    gcfg.percent = dataset.descriptor.kind == ConceptKind::kStyle ? config.percent_style
                                                                  : config.percent_object;
    auto train_result =
        train_baseline_task(model, tokenizer, ledger, data, method, gcfg, seed, state);
    res.batch_hashes.push_back(train_result.batch_stream_hash);
    learned.push_back(ci);

    // adapters are merged into the weights before any sampling
    VarModel fused;
    const VarModel* sample_model = &model;
    if (method == BaselineKind::kLowRankAdapter && state.lora) {
      fused = model;
      res.fusion_seconds += state.lora->fuse_into(fused.params());
      sample_model = &fused;
    }

    for (size_t li = 0; li < learned.size(); ++li) {
      const ConceptDataset& ds = concepts[learned[li]];
      int64_t tok_id = model.vocab().concept_id(ds.descriptor.name);
      auto prompts = eval_prompt_set(ds, tok_id, config.eval_prompts);
      std::vector<Image> generated;
      std::vector<int> expected_bg;
      int draw = 0;
      for (const auto& ep : prompts)
        for (int k = 0; k < config.images_per_prompt; ++k, ++draw) {
          Rng rng = Rng::stream(seed, "eval." + ds.descriptor.name + ".sample" +
                                          std::to_string(draw));
          auto pyramid = sample_model->sample(tokenizer, ep.prompt, config.sample, rng);
          generated.push_back(tokenizer.decode_pyramid(pyramid));
          expected_bg.push_back(ep.expected_bg);
        }

      ConceptEval eval;
      eval.after_task = task_id;
      eval.concept_name = ds.descriptor.name;
      eval.subject_fidelity = proxy_subject_fidelity(extractor, generated, ds.references);
      eval.prompt_fidelity = proxy_prompt_fidelity(generated, expected_bg);
      auto it = learn_time_fidelity.find(ds.descriptor.name);
      if (it == learn_time_fidelity.end()) {
        learn_time_fidelity[ds.descriptor.name] = eval.subject_fidelity;
        eval.forgetting_delta = 0.0;
      } else {
        eval.forgetting_delta = eval.subject_fidelity - it->second;
      }
      res.evals.push_back(std::move(eval));
    }
  }

  switch (method) {
    case BaselineKind::kGcns:
      res.storage_bytes_per_concept = mask_storage_bytes(ledger).mask_bytes_per_task;
      break;
    case BaselineKind::kLowRankAdapter:
      res.storage_bytes_per_concept = state.lora ? state.lora->storage_bytes() : 0;
      break;
    default:
      res.storage_bytes_per_concept = 0;
  }
  res.tokenizer_hash_after = tokenizer.content_hash();

  // deterministic content hash; wall-clock time deliberately excluded
  {
    std::string blob = baseline_name(method);
    blob += ":" + std::to_string(seed) + ":" + sequence.label;
    char buf[64];
    for (const auto& e : res.evals) {
      std::snprintf(buf, sizeof(buf), "|%lld:%s:%.17g:%.17g:%.17g",
                    static_cast<long long>(e.after_task), e.concept_name.c_str(),
                    e.subject_fidelity, e.prompt_fidelity, e.forgetting_delta);
      blob += buf;
    }
    for (const auto& h : res.batch_hashes) blob += "|" + h;
    blob += "|" + std::to_string(res.storage_bytes_per_concept);
    res.metrics_hash = sha256_hex(blob);
  }

  auto wall_end = std::chrono::steady_clock::now();
  res.wall_seconds = std::chrono::duration<double>(wall_end - wall_start).count();
  return res;
}

// ---- composition evaluation ----

CompositionSpec side_by_side_spec(const VarModel& model, const std::string& left_concept,
                                  const std::string& right_concept) {
  CompositionSpec spec;
  spec.global_prompt = PromptSpec{{world::kA, world::kPhoto}};
  int64_t left_token = model.vocab().concept_id(left_concept);
  int64_t right_token = model.vocab().concept_id(right_concept);
  spec.branches.push_back({PromptSpec{{world::kA, world::kPhoto, world::kOf, left_token}},
                           BoxRegion{0.02, 0.1, 0.33, 0.9}});
  spec.branches.push_back({PromptSpec{{world::kA, world::kPhoto, world::kOf, right_token}},
                           BoxRegion{0.67, 0.1, 0.98, 0.9}});
  return spec;
}

CompositionEval evaluate_composition(const VarModel& model, const Tokenizer& tokenizer,
                                     const std::vector<ConceptDataset>& concepts,
                                     const std::vector<std::string>& concept_names,
                                     const RandomFeatureExtractor& extractor,
                                     const CompositionSpec& spec, const SampleParams& params,
                                     uint64_t seed) {
  if (concept_names.size() != spec.branches.size())
    throw ShapeError("evaluate_composition: one concept name per branch required");
  Rng rng = Rng::stream(seed, "compose");
  auto result = compose_sample(model, tokenizer, spec, params, rng);

  CompositionEval eval;
  eval.image = tokenizer.decode_pyramid(result.pyramid);

  auto dataset_of = [&](const std::string& name) -> const ConceptDataset& {
    for (const auto& ds : concepts)
      if (ds.descriptor.name == name) return ds;
    throw StateError("evaluate_composition: unknown concept " + name);
  };

  double own = 0.0, swapped = 0.0;
  for (size_t b = 0; b < spec.branches.size(); ++b) {
    const auto& box = spec.branches[b].box;
    Image crop = eval.image.crop_normalized(box.x0, box.y0, box.x1, box.y1);
    const auto& own_refs = dataset_of(concept_names[b]).references;
    const auto& other_refs =
        dataset_of(concept_names[(b + 1) % concept_names.size()]).references;
    own += proxy_subject_fidelity(extractor, {crop}, own_refs);
    swapped += proxy_subject_fidelity(extractor, {crop}, other_refs);
  }
  eval.in_box_fidelity = own / static_cast<double>(spec.branches.size());
  eval.swapped_box_fidelity = swapped / static_cast<double>(spec.branches.size());
  return eval;
}

// ---- resources ----

std::vector<ResourceRow> resource_report(const std::vector<SequenceResult>& results) {
  std::map<BaselineKind, ResourceRow> rows;
  std::map<BaselineKind, int> counts;
  for (const auto& r : results) {
    auto& row = rows[r.method];
    row.method = r.method;
    row.extra_bytes_per_concept = r.storage_bytes_per_concept;
    row.fusion_seconds += r.fusion_seconds;
    counts[r.method]++;
  }
  std::vector<ResourceRow> out;
  for (auto& [kind, row] : rows) {
    row.fusion_seconds /= counts[kind];
    out.push_back(row);
  }
  return out;
}

}  // namespace cpcvar
