#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>

#include "cpcvar/errors.hpp"
#include "cpcvar/harness.hpp"
#include "cpcvar/log.hpp"

namespace cpcvar {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Mean final forgetting delta over concepts learned before the last task.
double mean_retention(const SequenceResult& result, size_t tasks) {
  double acc = 0.0;
  int count = 0;
  for (const auto& e : result.evals) {
    if (e.after_task != static_cast<int64_t>(tasks)) continue;
    if (e.forgetting_delta == 0.0 && result.find_eval(e.concept_name, tasks) != nullptr) {
      // concept learned at the final task contributes no retention signal
      bool learned_earlier = false;
      for (const auto& other : result.evals)
        if (other.concept_name == e.concept_name && other.after_task < e.after_task)
          learned_earlier = true;
      if (!learned_earlier) continue;
    }
    acc += e.forgetting_delta;
    ++count;
  }
  return count == 0 ? 0.0 : acc / count;
}

double mean_final_fidelity(const SequenceResult& result, size_t tasks) {
  double acc = 0.0;
  int count = 0;
  for (const auto& e : result.evals)
    if (e.after_task == static_cast<int64_t>(tasks)) {
      acc += e.subject_fidelity;
      ++count;
    }
  return count == 0 ? 0.0 : acc / count;
}

json cell_to_json(const AblationCellResult& cell) {
  json runs = json::array();
  for (const auto& r : cell.runs)
    runs.push_back({{"seed", r.seed},
                    {"retention", r.retention},
                    {"subject_fidelity", r.subject_fidelity},
                    {"metrics_hash", r.metrics_hash}});
  return json{{"cell_id", cell.cell_id},
              {"runs", runs},
              {"mean_retention", cell.mean_retention},
              {"mean_subject_fidelity", cell.mean_subject_fidelity}};
}

AblationCellResult cell_from_json(const json& j) {
  AblationCellResult cell;
  cell.cell_id = j.at("cell_id").get<std::string>();
  for (const auto& r : j.at("runs")) {
    CellRun run;
    run.seed = r.at("seed").get<uint64_t>();
    run.retention = r.at("retention").get<double>();
    run.subject_fidelity = r.at("subject_fidelity").get<double>();
    run.metrics_hash = r.at("metrics_hash").get<std::string>();
    cell.runs.push_back(std::move(run));
  }
  cell.mean_retention = j.at("mean_retention").get<double>();
  cell.mean_subject_fidelity = j.at("mean_subject_fidelity").get<double>();
  return cell;
}

void finalize_cell(AblationCellResult& cell) {
  double r = 0.0, f = 0.0;
  for (const auto& run : cell.runs) {
    r += run.retention;
    f += run.subject_fidelity;
  }
  cell.mean_retention = cell.runs.empty() ? 0.0 : r / static_cast<double>(cell.runs.size());
  cell.mean_subject_fidelity =
      cell.runs.empty() ? 0.0 : f / static_cast<double>(cell.runs.size());
}

struct CellTask {
  std::string id;
  GcnsConfig config;
  TaskSequence sequence;
};

}  // namespace

AblationReport run_ablations(const PretrainedArtifacts& artifacts,
                             const std::vector<ConceptDataset>& concepts,
                             const AblationConfig& config) {
  if (config.tasks < 2) throw ConfigError("run_ablations: need at least 2 tasks");
  if (static_cast<size_t>(config.tasks) > concepts.size())
    throw ConfigError("run_ablations: more tasks than concepts");

  fs::path cells_dir;
  if (!config.out_dir.empty()) {
    cells_dir = fs::path(config.out_dir) / "cells";
    fs::create_directories(cells_dir);
  }

  TaskSequence default_seq;
  for (int t = 0; t < config.tasks; ++t) default_seq.concept_order.push_back(static_cast<size_t>(t));
  default_seq.label = "order1";

  ScaleWeights ones = ScaleWeights::all_ones(artifacts.model.config().schedule.num_scales());
  ScaleWeights fine = ScaleWeights::fine_scales(artifacts.model.config().schedule.num_scales(), 0.5);

  auto variant = [&](bool reg, bool weight, bool mask) {
    GcnsConfig cfg = config.harness.gcns;
    cfg.conflict_regularization = reg;
    cfg.weights = weight ? fine : ones;
    cfg.dynamic_refresh = mask;
    return cfg;
  };

  // Table-shaped component grid plus the reg-removal comparator cell.
  std::vector<CellTask> cell_tasks;
  if (config.component_grid) {
    cell_tasks.push_back({"components/none", variant(false, false, false), default_seq});
    cell_tasks.push_back({"components/reg", variant(true, false, false), default_seq});
    cell_tasks.push_back({"components/reg+mask", variant(true, false, true), default_seq});
    cell_tasks.push_back({"components/reg+weight", variant(true, true, false), default_seq});
    cell_tasks.push_back({"components/full", variant(true, true, true), default_seq});
    cell_tasks.push_back({"components/weight+mask", variant(false, true, true), default_seq});
  }
  if (config.lambda_sweep) {
    for (double lambda : {0.1, 1.0, 5.0, 20.0}) {
      GcnsConfig cfg = variant(true, true, true);
      cfg.lambda = lambda;
      std::ostringstream id;
      id << "lambda/" << lambda;
      cell_tasks.push_back({id.str(), cfg, default_seq});
    }
  }
  if (config.order_grid) {
    std::vector<std::vector<size_t>> orders = {default_seq.concept_order};
    {
      auto o2 = default_seq.concept_order;
      std::rotate(o2.begin(), o2.begin() + 1, o2.end());
      orders.push_back(o2);
      auto o3 = default_seq.concept_order;
      std::reverse(o3.begin(), o3.end());
      orders.push_back(o3);
    }
    for (size_t i = 0; i < orders.size(); ++i) {
      TaskSequence seq;
      seq.concept_order = orders[i];
      seq.label = "order" + std::to_string(i + 1);
      cell_tasks.push_back({"order/" + seq.label, variant(true, true, true), seq});
    }
  }

  auto run_cell = [&](const CellTask& task) {
    AblationCellResult cell;
    cell.cell_id = task.id;
    fs::path cell_file;
    if (!cells_dir.empty()) {
      std::string safe = task.id;
      std::replace(safe.begin(), safe.end(), '/', '_');
      cell_file = cells_dir / (safe + ".json");
      if (fs::exists(cell_file)) {
        std::ifstream in(cell_file);
        json j = json::parse(in);
        auto loaded = cell_from_json(j);
        if (loaded.runs.size() == config.seeds.size()) {
          log::info("ablation cell %s: reusing persisted result", task.id.c_str());
          return loaded;
        }
      }
    }
    HarnessConfig hcfg = config.harness;
    hcfg.gcns = task.config;
    for (uint64_t seed : config.seeds) {
      auto result = run_sequence(artifacts, concepts, task.sequence, BaselineKind::kGcns, hcfg,
                                 seed);
      CellRun run;
      run.seed = seed;
      run.retention = mean_retention(result, task.sequence.concept_order.size());
      run.subject_fidelity = mean_final_fidelity(result, task.sequence.concept_order.size());
      run.metrics_hash = result.metrics_hash;
      cell.runs.push_back(std::move(run));
    }
    finalize_cell(cell);
    if (!cell_file.empty()) {
      std::ofstream out(cell_file);
      out << cell_to_json(cell).dump(2) << "\n";
    }
    return cell;
  };

  std::vector<AblationCellResult> cells(cell_tasks.size());
  if (config.jobs <= 1) {
    for (size_t i = 0; i < cell_tasks.size(); ++i) cells[i] = run_cell(cell_tasks[i]);
  } else {
    size_t next = 0;
    while (next < cell_tasks.size()) {
      size_t batch = std::min<size_t>(static_cast<size_t>(config.jobs),
                                      cell_tasks.size() - next);
      std::vector<std::future<AblationCellResult>> futures;
      for (size_t j = 0; j < batch; ++j)
        futures.push_back(std::async(std::launch::async, run_cell, cell_tasks[next + j]));
      for (size_t j = 0; j < batch; ++j) cells[next + j] = futures[j].get();
      next += batch;
    }
  }

  AblationReport report;
  for (size_t i = 0; i < cell_tasks.size(); ++i) {
    const std::string& id = cell_tasks[i].id;
    if (id.rfind("components/", 0) == 0) report.component_grid.push_back(cells[i]);
    else if (id.rfind("lambda/", 0) == 0) report.lambda_sweep.push_back(cells[i]);
    else report.order_runs.push_back(cells[i]);
  }

  // Intervention-scale comparison: continuous from s_start versus a single
  // isolated intervention at the finest scale, on a 2-concept model.
  if (config.intervention_grid) {
    auto extractor = RandomFeatureExtractor::make(config.harness.extractor_seed);
    int64_t finest = static_cast<int64_t>(artifacts.model.config().schedule.num_scales());
    for (uint64_t seed : config.seeds) {
      VarModel model = artifacts.model;
      TaskLedger ledger(model.params().ca_dim());
      MethodState state;
      std::vector<size_t> pair = {0, 2 < concepts.size() ? size_t{2} : size_t{1}};
      std::vector<std::string> names;
      for (size_t t = 0; t < pair.size(); ++t) {
        const ConceptDataset& ds = concepts[pair[t]];
        int64_t token = register_concept_token(model, ds.descriptor);
        auto data = build_task_data(ds, static_cast<int64_t>(t) + 1, token, artifacts.tokenizer);
        GcnsConfig gcfg = config.harness.gcns;
        train_baseline_task(model, artifacts.tokenizer, ledger, data, BaselineKind::kGcns, gcfg,
                            seed, state);
        names.push_back(ds.descriptor.name);
      }
      auto spec = side_by_side_spec(model, names[0], names[1]);
      InterventionRun run;
      run.seed = seed;
      run.continuous_fidelity =
          evaluate_composition(model, artifacts.tokenizer, concepts, names, extractor, spec,
                               config.harness.sample, seed)
              .in_box_fidelity;
      auto single = spec;
      single.single_scale_only = finest;
      run.single_scale_fidelity =
          evaluate_composition(model, artifacts.tokenizer, concepts, names, extractor, single,
                               config.harness.sample, seed)
              .in_box_fidelity;
      report.intervention.push_back(run);
    }
  }

  // markdown report mirroring the paper's table shapes
  std::ostringstream md;
  md << "# Ablation report\n\n";
  md << "Proxy metrics from a frozen random-feature extractor; retention is the mean\n"
        "final-minus-learn-time subject fidelity of earlier concepts (closer to 0 is\n"
        "better). No claim of equivalence with learned metric backbones.\n\n";
  if (!report.component_grid.empty()) {
    md << "## Component grid\n\n";
    md << "| Reg. | Weight | Mask | Avg. retention | Avg. fidelity |\n";
    md << "|------|--------|------|----------------|---------------|\n";
    auto row = [&](const char* id, const char* r, const char* w, const char* m) {
      for (const auto& cell : report.component_grid)
        if (cell.cell_id == std::string("components/") + id) {
          char buf[128];
          std::snprintf(buf, sizeof(buf), "| %s | %s | %s | %.4f | %.4f |\n", r, w, m,
                        cell.mean_retention, cell.mean_subject_fidelity);
          md << buf;
        }
    };
    row("none", " ", " ", " ");
    row("reg", "x", " ", " ");
    row("reg+mask", "x", " ", "x");
    row("reg+weight", "x", "x", " ");
    row("full", "x", "x", "x");
    md << "\n(reg-removal comparator: ";
    for (const auto& cell : report.component_grid)
      if (cell.cell_id == "components/weight+mask") {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "weight+mask retention %.4f", cell.mean_retention);
        md << buf;
      }
    md << ")\n\n";
  }
  if (!report.lambda_sweep.empty()) {
    md << "## Conflict penalty sweep\n\n| lambda | Avg. retention | Avg. fidelity |\n";
    md << "|--------|----------------|---------------|\n";
    for (const auto& cell : report.lambda_sweep) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f |\n",
                    cell.cell_id.substr(7).c_str(), cell.mean_retention,
                    cell.mean_subject_fidelity);
      md << buf;
    }
    md << "\n";
  }
  if (!report.order_runs.empty()) {
    md << "## Task order\n\n| Order | Avg. retention | Avg. fidelity |\n";
    md << "|-------|----------------|---------------|\n";
    for (const auto& cell : report.order_runs) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f |\n", cell.cell_id.substr(6).c_str(),
                    cell.mean_retention, cell.mean_subject_fidelity);
      md << buf;
    }
    md << "\n";
  }
  if (!report.intervention.empty()) {
    md << "## Intervention scale\n\n| Seed | Continuous | Single finest scale |\n";
    md << "|------|------------|---------------------|\n";
    for (const auto& run : report.intervention) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "| %llu | %.4f | %.4f |\n",
                    static_cast<unsigned long long>(run.seed), run.continuous_fidelity,
                    run.single_scale_fidelity);
      md << buf;
    }
    md << "\n";
  }
  report.markdown = md.str();
  return report;
}

}  // namespace cpcvar
