#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpcvar/composer.hpp"
#include "cpcvar/gcns.hpp"
#include "cpcvar/image.hpp"
#include "cpcvar/rng.hpp"
#include "cpcvar/tokenizer.hpp"
#include "cpcvar/var_model.hpp"

namespace cpcvar {

// ---- procedural world ----
// Tiny fixed prompt vocabulary and deterministic scene renderer standing in
// for real photo data. Concept identity is a (shape, palette, texture)
// signature for objects, or a global filter for styles.

namespace world {

inline constexpr int64_t kA = 0, kPhoto = 1, kOf = 2, kOn = 3, kBackground = 4, kIn = 5,
                         kStyleWord = 6, kThe = 7;
inline constexpr int64_t kShapeBase = 8;    // 6 shapes
inline constexpr int64_t kColorBase = 14;   // 6 colors
inline constexpr int64_t kTextureBase = 20; // 4 textures
inline constexpr int kNumShapes = 6;
inline constexpr int kNumColors = 6;
inline constexpr int kNumTextures = 4;
inline constexpr int64_t kBaseVocab = 32;

const char* word_name(int64_t id);
std::optional<int64_t> word_id(const std::string& word);

struct Rgb {
  double r, g, b;
};
Rgb palette_color(int index);
// Nearest palette entry to an rgb value (background classification).
int classify_color(const Rgb& value);

struct SceneSpec {
  int shape = 0;      // 0..5: circle, square, triangle, cross, ring, bar
  int fg_color = 0;   // palette index
  int texture = 0;    // 0..3: plain, dots, stripes, checker
  int bg_color = 1;   // palette index
  double center_x = 0.5, center_y = 0.5;
  double radius = 0.3;  // normalized half extent
  int style = -1;       // -1 none, 0 hatch, 1 tint
};

Image render_scene(const SceneSpec& spec, int64_t size = 32);
Image apply_hatch(Image image);
Image apply_tint(Image image);

}  // namespace world

// ---- concepts ----

enum class ConceptKind { kObject, kStyle };

struct ConceptDescriptor {
  std::string name;  // concept token text, e.g. "<c1>"
  ConceptKind kind = ConceptKind::kObject;
  int shape = 0, fg_color = 0, texture = 0;  // object signature
  int style_kind = 0;                        // 0 hatch, 1 tint
  std::string signature() const;
};

struct ConceptDataset {
  ConceptDescriptor descriptor;
  std::vector<Image> references;
  std::vector<int> reference_bg;  // palette index per reference
};

struct ConceptSpec {
  int object_concepts = 4;
  int style_concepts = 1;
  int references_per_concept = 4;  // must stay within [3,5]
};

// Deterministic concept construction. The first two object concepts form the
// hard pair: same shape and palette, different texture.
std::vector<ConceptDataset> generate_concepts(const ConceptSpec& spec, uint64_t seed);

struct TaskSequence {
  std::vector<size_t> concept_order;  // indices into the dataset list
  std::string label;
};

// ---- proxy metrics ----

// Frozen random-feature extractor: two stride-2 convolutions with global
// mean and deviation pooling, centered on a fixed probe-scene statistic so
// cosine compares concept-specific deviations rather than shared scene
// structure. Stands in for learned metric backbones; instantiated once per
// experiment from a fixed seed. Linear mode drops the nonlinearity, the
// deviation channels and the centering (a plain zero-bias linear map).
class RandomFeatureExtractor {
 public:
  static RandomFeatureExtractor make(uint64_t seed, bool linear = false);
  std::vector<double> features(const Image& image) const;

 private:
  std::vector<double> raw_features(const Image& image) const;
  int64_t mid_channels_ = 16;
  int64_t out_channels_ = 32;
  bool linear_ = false;
  std::vector<double> k1_, k2_;  // 3x3 kernels
  std::vector<double> center_;   // probe-world mean feature
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Mean pairwise cosine similarity of pooled features; in [-1, 1].
double proxy_subject_fidelity(const RandomFeatureExtractor& extractor,
                              const std::vector<Image>& generated,
                              const std::vector<Image>& references);

// Fraction of generated images whose border background classifies to the
// palette color named in the prompt.
double proxy_prompt_fidelity(const std::vector<Image>& generated,
                             const std::vector<int>& expected_bg);

// ---- baselines ----

enum class BaselineKind { kGcns, kFullFinetune, kDistillKl, kLowRankAdapter, kFrozen };

const char* baseline_name(BaselineKind kind);
BaselineKind baseline_from_string(const std::string& name);

// One shared adapter pair per adapted matrix, trained continually across
// tasks; fused into the weights before sampling.
struct LoraAdapters {
  int64_t rank = 4;
  std::vector<size_t> segment_indices;
  std::vector<std::vector<double>> a;  // [rows, rank]
  std::vector<std::vector<double>> b;  // [rank, cols]

  static LoraAdapters init(const ParamStore& store, int64_t rank, uint64_t seed);
  int64_t storage_bytes() const;
  // Materialize W + A@B into the store; returns elapsed seconds.
  double fuse_into(ParamStore& store) const;
};

struct MethodState {
  std::optional<LoraAdapters> lora;
};

struct BaselineTrainResult {
  std::string batch_stream_hash;
  std::vector<double> losses;
};

BaselineTrainResult train_baseline_task(VarModel& model, const Tokenizer& tokenizer,
                                        TaskLedger& ledger, const ConceptTaskData& task,
                                        BaselineKind kind, const GcnsConfig& config,
                                        uint64_t seed, MethodState& state);

// ---- experiment runner ----

struct HarnessConfig {
  GcnsConfig gcns;
  double percent_object = 5.0;   // selection ratio for object concepts
  double percent_style = 10.0;   // style concepts are harder; select more
  int eval_prompts = 5;
  int images_per_prompt = 4;
  SampleParams sample;
  uint64_t extractor_seed = 7777;
  ConceptSpec concepts;
};

struct ConceptEval {
  int64_t after_task = 0;  // 1-based task count completed
  std::string concept_name;
  double subject_fidelity = 0.0;
  double prompt_fidelity = 0.0;
  double forgetting_delta = 0.0;
};

struct SequenceResult {
  BaselineKind method = BaselineKind::kGcns;
  uint64_t seed = 0;
  std::string sequence_label;
  std::vector<ConceptEval> evals;
  std::vector<std::string> batch_hashes;  // per task
  int64_t storage_bytes_per_concept = 0;
  double fusion_seconds = 0.0;
  double wall_seconds = 0.0;      // reported separately from the hash
  std::string tokenizer_hash_before, tokenizer_hash_after;
  std::string metrics_hash;       // deterministic content hash

  const ConceptEval* find_eval(const std::string& concept_name, int64_t after_task) const;
  double retention_of(const std::string& concept_name) const;  // last delta
};

struct PretrainedArtifacts {
  Tokenizer tokenizer;
  VarModel model;
  std::vector<double> validation_nll;  // logged curve
};

struct PretrainConfig {
  TokenizerConfig tokenizer;
  VarConfig model;
  int64_t steps = 1500;
  double learning_rate = 1e-3;
  int64_t corpus_images = 96;
  int64_t validation_images = 12;
  int64_t log_every = 250;
};

PretrainedArtifacts pretrain_base(const PretrainConfig& config, uint64_t seed);

// Registers the concept token and warm-starts its embedding row from the
// nearest class word (shape word for objects, the style word otherwise).
int64_t register_concept_token(VarModel& model, const ConceptDescriptor& descriptor);

// Builds the teacher-forced training items for one concept task.
ConceptTaskData build_task_data(const ConceptDataset& dataset, int64_t task_id,
                                int64_t concept_token, const Tokenizer& tokenizer);

SequenceResult run_sequence(const PretrainedArtifacts& artifacts,
                            const std::vector<ConceptDataset>& concepts,
                            const TaskSequence& sequence, BaselineKind method,
                            const HarnessConfig& config, uint64_t seed);

// ---- composition evaluation ----

struct CompositionEval {
  double in_box_fidelity = 0.0;       // own-concept fidelity inside each box
  double swapped_box_fidelity = 0.0;  // same crops scored against the other concept
  Image image;
};

// Trains nothing: composes the two given concepts side by side with the
// already-trained model and scores box crops against concept references.
CompositionEval evaluate_composition(const VarModel& model, const Tokenizer& tokenizer,
                                     const std::vector<ConceptDataset>& concepts,
                                     const std::vector<std::string>& concept_names,
                                     const RandomFeatureExtractor& extractor,
                                     const CompositionSpec& spec, const SampleParams& params,
                                     uint64_t seed);

// Default side-by-side spec for two concepts; boxes chosen to rasterize
// disjointly on every desk scale from (3,3) up.
CompositionSpec side_by_side_spec(const VarModel& model, const std::string& left_concept,
                                  const std::string& right_concept);

// ---- resources ----

struct ResourceRow {
  BaselineKind method;
  int64_t extra_bytes_per_concept = 0;
  double fusion_seconds = 0.0;
};

std::vector<ResourceRow> resource_report(const std::vector<SequenceResult>& results);

// ---- ablation grids ----

struct CellRun {
  uint64_t seed = 0;
  double retention = 0.0;         // mean final forgetting delta, earlier concepts
  double subject_fidelity = 0.0;  // mean final subject fidelity
  std::string metrics_hash;
};

struct AblationCellResult {
  std::string cell_id;
  std::vector<CellRun> runs;
  double mean_retention = 0.0;
  double mean_subject_fidelity = 0.0;
};

struct InterventionRun {
  uint64_t seed = 0;
  double continuous_fidelity = 0.0;
  double single_scale_fidelity = 0.0;
};

struct AblationConfig {
  std::vector<uint64_t> seeds = {1, 2, 3};
  int tasks = 3;
  HarnessConfig harness;
  std::string out_dir;  // cell persistence for resume; empty disables
  int jobs = 1;         // cell-level parallelism; cells stay deterministic
  bool component_grid = true;
  bool lambda_sweep = true;
  bool order_grid = true;
  bool intervention_grid = true;
};

struct AblationReport {
  std::vector<AblationCellResult> component_grid;  // the 5 paper rows + reg-off cell
  std::vector<AblationCellResult> lambda_sweep;    // lambda in {0.1, 1, 5, 20}
  std::vector<AblationCellResult> order_runs;
  std::vector<InterventionRun> intervention;
  std::string markdown;
};

AblationReport run_ablations(const PretrainedArtifacts& artifacts,
                             const std::vector<ConceptDataset>& concepts,
                             const AblationConfig& config);

}  // namespace cpcvar
