#include "htcn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "htcn/checkpoint.hpp"
#include "htcn/mechanisms.hpp"
#include "htcn/metrics.hpp"
#include "htcn/nn.hpp"

namespace htcn {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

[[noreturn]] void run_fail(const std::string& msg) {
    throw std::runtime_error("run: " + msg);
}

Tensor sum_terms(const std::vector<Tensor>& terms) {
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

// Flattens every part to rank 1 and joins them, so per-image discriminator
// outputs of any shape form one combined batch vector.
Tensor concat_flat(const std::vector<Tensor>& parts) {
    std::vector<Tensor> flat;
    flat.reserve(parts.size());
    for (const Tensor& p : parts) {
        flat.push_back(p.rank() == 1 ? p : reshape(p, {static_cast<int>(p.numel())}));
    }
    if (flat.size() == 1) return flat.front();
    return concat(flat);
}

// Rolling copy of all parameter values; the abort path restores the weights
// that produced the last finite loss.
struct ParamSnapshot {
    std::vector<std::vector<double>> values;

    void capture(const ParamStore& store) {
        const auto& entries = store.entries();
        values.resize(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) values[i] = entries[i].second.values();
    }

    void restore(const ParamStore& store) const {
        const auto& entries = store.entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            Tensor t = entries[i].second;
            t.mutable_values() = values[i];
        }
    }
};

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) run_fail("cannot write '" + path + "'");
    return out;
}

std::string interval_checkpoint_name(int iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint_%06d.bin", iteration);
    return buf;
}

// First non-finite component already recorded for this iteration, or null when
// every recorded value is finite (the divergence hit before any component
// scalar was read).
const char* nonfinite_component(const LossBreakdown& row) {
    const std::pair<const char*, double> components[] = {
        {"L_cls", row.cls}, {"L_reg", row.reg}, {"L_la", row.la},
        {"L_ma", row.ma},   {"L_ga", row.ga},   {"L_ins", row.ins},
    };
    for (const auto& [name, value] : components) {
        if (!std::isfinite(value)) return name;
    }
    return nullptr;
}

}  // namespace

std::vector<LabeledScene> build_eval_split(const ExperimentConfig& cfg, std::uint64_t seed) {
    SceneSpec spec = cfg.scene;
    spec.seed = seed;
    return generate_eval_split(spec, cfg.train.eval_images, /*domain_fogged=*/true);
}

EvalReport evaluate_detector(const Detector& det, const std::vector<LabeledScene>& split,
                             int num_classes) {
    if (split.empty()) run_fail("evaluation split is empty");
    std::vector<EvalSample> samples;
    samples.reserve(split.size());
    for (const LabeledScene& scene : split) {
        samples.push_back(EvalSample{scene.labels, det.detect(scene.image)});
    }
    ClassApSummary at50 = evaluate_map(samples, num_classes, 0.5);
    EvalReport report;
    report.ap_per_class = at50.ap_per_class;
    report.map50 = at50.map;
    report.classes_counted = at50.classes_counted;
    report.sweep = map_sweep(samples, num_classes, default_sweep_thresholds());
    return report;
}

RunRecord train_run(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                    Detector* out_detector) {
    validate_config(cfg);
    ExperimentConfig c = cfg;
    c.scene.seed = seed;
    c.model.image_size = c.scene.image_size;

    RunRecord rec;
    rec.config_hash = config_hash(cfg);
    rec.seed = seed;

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        save_config_file(cfg, (fs::path(out_dir) / "config.txt").string());
    }

    Detector det(c.model, derive_seed(seed, "model-init"));
    SgdMomentum opt(c.train.lr, c.train.momentum);
    const int decay_at = static_cast<int>(c.train.lr_decay_at * c.train.iterations);
    const bool adversarial = c.train.lambda > 0.0;
    const bool cila = adversarial && c.model.use_cila;

    ParamSnapshot last_good;
    last_good.capture(det.params());

    auto t0 = std::chrono::steady_clock::now();

    // One iteration's forward graph and loss assembly. Returns the total-loss
    // tensor and fills the component row. The loop below owns divergence
    // handling, so this helper just builds.
    auto build_iteration = [&](int iter, LossBreakdown& row) -> Tensor {
        DomainBatch batch = make_domain_batch(c.scene, static_cast<std::uint64_t>(iter),
                                              c.train.per_stream);
        std::vector<LabeledScene> labeled = batch.source;
        if (c.model.use_interpolation) {
            labeled.insert(labeled.end(), batch.target_like_source.begin(),
                           batch.target_like_source.end());
        }
        std::vector<UnlabeledScene> unlabeled = batch.target;
        if (c.model.use_interpolation) {
            unlabeled.insert(unlabeled.end(), batch.source_like_target.begin(),
                             batch.source_like_target.end());
        }

        std::vector<Tensor> cls_terms, reg_terms;
        std::vector<Tensor> src_d1, src_d2, src_d3, tgt_d1, tgt_d2, tgt_d3;
        std::vector<Tensor> src_ins, tgt_ins;

        int slot = 0;
        for (const LabeledScene& scene : labeled) {
            PipelineOut pipe = det.forward_pipeline(scene.image);
            std::vector<Box> proposals = det.propose(pipe, &scene.labels);
            InstanceOut inst = det.forward_instances(pipe, proposals);

            const std::uint64_t tick = static_cast<std::uint64_t>(iter) * 128 + slot;
            Pcg32 rpn_rng(derive_seed(seed, "rpn-neg", tick));
            Pcg32 roi_rng(derive_seed(seed, "roi-neg", tick));
            DetLosses rpn = det.rpn_losses(pipe, scene.labels, rpn_rng);
            std::vector<int> fg_rows;
            DetLosses roi = det.roi_losses(inst, proposals, scene.labels, roi_rng, &fg_rows);
            if (rpn.no_positives || roi.no_positives) {
                rec.warnings.push_back("iteration " + std::to_string(iter) +
                                       ": a labeled image matched no positives; its box "
                                       "regression contributed zero");
            }

            cls_terms.push_back(add(rpn.cls, roi.cls));
            reg_terms.push_back(add(rpn.reg, roi.reg));

            if (adversarial) {
                src_d1.push_back(pipe.d1_map);
                src_d2.push_back(pipe.d2_score);
                src_d3.push_back(pipe.d3_score);
                if (cila && !fg_rows.empty()) {
                    src_ins.push_back(det.instance_domain_scores(pipe, inst, fg_rows));
                }
            }
            ++slot;
        }

        if (adversarial) {
            for (const UnlabeledScene& scene : unlabeled) {
                PipelineOut pipe = det.forward_pipeline(scene.image);
                tgt_d1.push_back(pipe.d1_map);
                tgt_d2.push_back(pipe.d2_score);
                tgt_d3.push_back(pipe.d3_score);
                if (cila) {
                    std::vector<Box> proposals = det.propose(pipe, nullptr);
                    if (proposals.empty()) {
                        rec.warnings.push_back("iteration " + std::to_string(iter) +
                                               ": no proposals on an unlabeled image, instance "
                                               "alignment skipped it");
                        continue;
                    }
                    InstanceOut inst = det.forward_instances(pipe, proposals);
                    int k = std::min<int>(c.model.instance_align_top_k,
                                          static_cast<int>(proposals.size()));
                    std::vector<int> rows(k);
                    std::iota(rows.begin(), rows.end(), 0);
                    tgt_ins.push_back(det.instance_domain_scores(pipe, inst, rows));
                }
            }
        }

        const double inv_labeled = 1.0 / static_cast<double>(labeled.size());
        Tensor l_cls = scalar_mul(sum_terms(cls_terms), inv_labeled);
        Tensor l_reg = scalar_mul(sum_terms(reg_terms), inv_labeled);
        Tensor det_part = add(l_cls, l_reg);

        row.cls = l_cls.scalar_value();
        row.reg = l_reg.scalar_value();

        Tensor total = det_part;
        if (adversarial) {
            Tensor l_la = pixelwise_adversarial_loss(concat_flat(src_d1), concat_flat(tgt_d1));
            Tensor l_ma = bce_image_adversarial_loss(concat_flat(src_d2), concat_flat(tgt_d2));
            Tensor l_ga = bce_image_adversarial_loss(concat_flat(src_d3), concat_flat(tgt_d3));
            row.la = l_la.scalar_value();
            row.ma = l_ma.scalar_value();
            row.ga = l_ga.scalar_value();
            Tensor adv = add(add(l_la, l_ma), l_ga);

            if (cila) {
                Tensor l_ins;
                bool have_ins = true;
                if (!src_ins.empty() && !tgt_ins.empty()) {
                    l_ins = instance_align_loss(concat_flat(src_ins), concat_flat(tgt_ins));
                } else if (!src_ins.empty()) {
                    l_ins = instance_align_source_term(concat_flat(src_ins));
                    rec.warnings.push_back("iteration " + std::to_string(iter) +
                                           ": no unlabeled-side instances, alignment used the "
                                           "labeled side only");
                } else if (!tgt_ins.empty()) {
                    l_ins = instance_align_target_term(concat_flat(tgt_ins));
                    rec.warnings.push_back("iteration " + std::to_string(iter) +
                                           ": no labeled-side instances, alignment used the "
                                           "unlabeled side only");
                } else {
                    have_ins = false;
                    rec.warnings.push_back("iteration " + std::to_string(iter) +
                                           ": no instances on either side, alignment skipped");
                }
                if (have_ins) {
                    row.ins = l_ins.scalar_value();
                    adv = add(adv, l_ins);
                }
            }
            total = add(det_part, scalar_mul(adv, c.train.lambda));
        }
        return total;
    };

    for (int iter = 0; iter < c.train.iterations; ++iter) {
        if (iter == decay_at && iter > 0) opt.set_lr(c.train.lr * c.train.lr_decay_factor);

        LossBreakdown row;
        Tensor total;
        // Divergence surfaces two ways: the engine rejects a non-finite value
        // the moment an op consumes one (an exception mid-graph), or the
        // assembled total itself comes out non-finite. Either way the run
        // stops, the weights roll back to the last state that produced a
        // finite loss, and the reason is recorded.
        try {
            total = build_iteration(iter, row);
            row.total = total.scalar_value();
        } catch (const std::runtime_error& e) {
            // Components recorded before the engine tripped let the reason
            // name the diverging term; otherwise the op's message stands.
            const char* term = nonfinite_component(row);
            std::string why =
                term ? std::string(term) + " is not finite (" + e.what() + ")" : e.what();
            rec.aborted = true;
            rec.abort_reason = "iteration " + std::to_string(iter) + ": " + why +
                               "; weights rolled back to the last finite state";
            last_good.restore(det.params());
            break;
        }

        if (!std::isfinite(row.total)) {
            const char* term = nonfinite_component(row);
            rec.aborted = true;
            rec.abort_reason = "iteration " + std::to_string(iter) + ": " +
                               (term ? term : "the total") +
                               " is not finite; weights rolled back to the last finite state";
            last_good.restore(det.params());
            break;
        }

        last_good.capture(det.params());
        rec.losses.push_back(row);

        det.params().zero_grad();
        backward(total);
        opt.step(det.params());

        if (!out_dir.empty() && c.train.checkpoint_every > 0 &&
            (iter + 1) % c.train.checkpoint_every == 0 && iter + 1 < c.train.iterations) {
            save_checkpoint((fs::path(out_dir) / interval_checkpoint_name(iter + 1)).string(),
                            det, rec.config_hash, seed);
        }
    }

    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!rec.aborted) {
        rec.eval = evaluate_detector(det, build_eval_split(cfg, seed), c.model.num_classes);
    }

    if (!out_dir.empty()) {
        save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), det, rec.config_hash,
                        seed);
        write_losses_csv(rec, (fs::path(out_dir) / "losses.csv").string());
        write_run_json(rec, c.train.iterations, (fs::path(out_dir) / "run.json").string());
        if (!rec.aborted) {
            write_metrics_json(rec, (fs::path(out_dir) / "metrics.json").string());
        }
    }

    if (out_detector) *out_detector = std::move(det);
    return rec;
}

void write_losses_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "iteration,total,cls,reg,la,ma,ga,ins\n";
    for (std::size_t i = 0; i < rec.losses.size(); ++i) {
        const LossBreakdown& r = rec.losses[i];
        out << i << ',' << format_shortest(r.total) << ',' << format_shortest(r.cls) << ','
            << format_shortest(r.reg) << ',' << format_shortest(r.la) << ','
            << format_shortest(r.ma) << ',' << format_shortest(r.ga) << ','
            << format_shortest(r.ins) << '\n';
    }
    if (!out) run_fail("write to '" + path + "' failed");
}

void write_metrics_json(const RunRecord& rec, const std::string& path) {
    json j;
    j["config_hash"] = hash_hex(rec.config_hash);
    j["seed"] = rec.seed;
    j["map50"] = rec.eval.map50;
    j["ap_per_class"] = rec.eval.ap_per_class;
    j["classes_counted"] = rec.eval.classes_counted;
    json sweep = json::array();
    for (const auto& [iou, map] : rec.eval.sweep) {
        sweep.push_back(json{{"iou", iou}, {"map", map}});
    }
    j["sweep"] = sweep;
    std::ofstream out = open_out(path);
    out << j.dump(2) << "\n";
    if (!out) run_fail("write to '" + path + "' failed");
}

void write_run_json(const RunRecord& rec, int planned_iterations, const std::string& path) {
    json j;
    j["config_hash"] = hash_hex(rec.config_hash);
    j["seed"] = rec.seed;
    j["aborted"] = rec.aborted;
    j["abort_reason"] = rec.abort_reason;
    j["iterations_completed"] = rec.losses.size();
    j["iterations_planned"] = planned_iterations;
    j["wall_seconds"] = rec.wall_seconds;
    j["warnings"] = rec.warnings;
    std::ofstream out = open_out(path);
    out << j.dump(2) << "\n";
    if (!out) run_fail("write to '" + path + "' failed");
}

void write_sweep_csv(const EvalReport& eval, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "threshold,map\n";
    for (const auto& [iou, map] : eval.sweep) {
        out << format_shortest(iou) << ',' << format_shortest(map) << '\n';
    }
    if (!out) run_fail("write to '" + path + "' failed");
}

std::vector<std::pair<std::string, ExperimentConfig>> ablation_grid(const ExperimentConfig& base) {
    std::vector<std::pair<std::string, ExperimentConfig>> grid;
    grid.emplace_back("full", base);
    auto off = [&base](bool DetectorConfig::* flag) {
        ExperimentConfig c = base;
        c.model.*flag = false;
        return c;
    };
    grid.emplace_back("no_iwat_i", off(&DetectorConfig::use_iwat_i));
    grid.emplace_back("no_cila", off(&DetectorConfig::use_cila));
    grid.emplace_back("no_local_masks", off(&DetectorConfig::use_local_masks));
    grid.emplace_back("no_interpolation", off(&DetectorConfig::use_interpolation));
    grid.emplace_back("no_context", off(&DetectorConfig::use_context));
    grid.emplace_back("no_tensor_product", off(&DetectorConfig::use_tensor_product));
    grid.emplace_back("source_only", source_only_variant(base));
    return grid;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& out_dir) {
    validate_config(base);
    if (!out_dir.empty()) fs::create_directories(out_dir);
    std::vector<AblationRow> rows;
    for (const auto& [name, cfg] : ablation_grid(base)) {
        AblationRow row;
        row.variant = name;
        for (std::uint64_t seed : base.train.seeds) {
            std::string run_dir;
            if (!out_dir.empty()) {
                run_dir =
                    (fs::path(out_dir) / (name + "_seed" + std::to_string(seed))).string();
            }
            RunRecord rec = train_run(cfg, seed, run_dir);
            if (rec.aborted) {
                run_fail("ablation variant '" + name + "' seed " + std::to_string(seed) +
                         " aborted: " + rec.abort_reason);
            }
            row.map_per_seed.push_back(rec.eval.map50);
        }
        row.mean_map = std::accumulate(row.map_per_seed.begin(), row.map_per_seed.end(), 0.0) /
                       static_cast<double>(row.map_per_seed.size());
        rows.push_back(std::move(row));
    }
    if (!out_dir.empty()) {
        write_ablation_csv(rows, base.train.seeds, (fs::path(out_dir) / "ablation.csv").string());
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::vector<std::uint64_t>& seeds, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "variant";
    for (std::uint64_t s : seeds) out << ",map50_seed" << s;
    out << ",mean_map50\n";
    for (const AblationRow& row : rows) {
        out << row.variant;
        for (double m : row.map_per_seed) out << ',' << format_shortest(m);
        out << ',' << format_shortest(row.mean_map) << '\n';
    }
    if (!out) run_fail("write to '" + path + "' failed");
}

}  // namespace htcn
