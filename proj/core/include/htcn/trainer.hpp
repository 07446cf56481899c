#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "htcn/config.hpp"
#include "htcn/detector.hpp"
#include "htcn/scenegen.hpp"

namespace htcn {

// Per-iteration loss decomposition. The optimizer objective is assembled as
//   total = (cls + reg) + lambda * (((la + ma) + ga) + ins)
// in exactly that association, so the identity can be re-checked from the
// recorded components down to the last bit.
struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;  // objectness + classification cross-entropy
    double reg = 0.0;  // box regression
    double la = 0.0;   // pixel-level adversarial term (D1)
    double ma = 0.0;   // mid-level image adversarial term (D2)
    double ga = 0.0;   // global image adversarial term (D3)
    double ins = 0.0;  // instance alignment term (D_ins)
};

struct EvalReport {
    std::vector<double> ap_per_class;  // -1 marks classes with nothing to score
    double map50 = 0.0;
    int classes_counted = 0;
    std::vector<std::pair<double, double>> sweep;  // (iou threshold, mAP)
};

// Everything one training run produced. losses has one entry per completed
// iteration; on an abort the series stops at the last finite loss.
struct RunRecord {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::vector<LossBreakdown> losses;
    std::vector<std::string> warnings;
    double wall_seconds = 0.0;
    bool aborted = false;
    std::string abort_reason;
    EvalReport eval;  // filled when final evaluation ran (skipped on abort)
};

// Held-out labeled split on the fogged domain (the deployment condition the
// metrics target). Indices are disjoint from all training content.
std::vector<LabeledScene> build_eval_split(const ExperimentConfig& cfg, std::uint64_t seed);

// Runs detection on every scene and scores it. Throws on an empty split.
EvalReport evaluate_detector(const Detector& det, const std::vector<LabeledScene>& split,
                             int num_classes);

// Trains one detector from scratch. When out_dir is non-empty it receives
// config.txt, losses.csv, metrics.json, run.json, and checkpoint.bin (plus
// numbered interval checkpoints when configured). A non-finite loss aborts
// the run: the weights roll back to the last finite-loss state, that state
// is what checkpoint.bin holds, and abort_reason names the first non-finite
// component. out_detector (optional) receives the final model.
RunRecord train_run(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                    Detector* out_detector = nullptr);

// Deterministic artifact writers. metrics.json carries only run-independent
// evaluation results (hash, seed, APs, sweep) so re-evaluating a checkpoint
// reproduces it byte for byte; timing and abort state go to run.json.
void write_losses_csv(const RunRecord& rec, const std::string& path);
void write_metrics_json(const RunRecord& rec, const std::string& path);
void write_run_json(const RunRecord& rec, int planned_iterations, const std::string& path);
void write_sweep_csv(const EvalReport& eval, const std::string& path);

// The ablation grid: the configuration as given ("full"), each calibration
// switch turned off on its own, and the source-only baseline. 8 variants.
std::vector<std::pair<std::string, ExperimentConfig>> ablation_grid(const ExperimentConfig& base);

struct AblationRow {
    std::string variant;
    std::vector<double> map_per_seed;
    double mean_map = 0.0;
};

// Trains every grid variant over cfg.train.seeds (sequentially; runs land in
// out_dir/<variant>_seed<k>/) and writes out_dir/ablation.csv.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& out_dir);

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::vector<std::uint64_t>& seeds, const std::string& path);

}  // namespace htcn
