// End-to-end acceptance gate. One binary re-checks every promise the library
// makes, from op-level gradients up to the full adaptation experiment, and
// prints one verdict line per check. Exit status is the number of failures.
//
// Usage: acceptance [--out <dir>] [check numbers...]
// With no numbers, all checks run in order. Training artifacts for the
// expensive checks land under --out (default: ./acceptance_artifacts).

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "htcn/config.hpp"
#include "htcn/mechanisms.hpp"
#include "htcn/metrics.hpp"
#include "htcn/rng.hpp"
#include "htcn/selfcheck.hpp"
#include "htcn/tensor.hpp"
#include "htcn/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace htcn;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, pattern);
    std::vsnprintf(buf, sizeof buf, pattern, ap);
    va_end(ap);
    return buf;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients vs central finite differences: every differentiable
// op, then the composed detector pipeline under both frozen objectives.

Verdict check_gradients() {
    auto t0 = Clock::now();
    std::vector<GradCheckReport> reports = run_op_gradient_checks(kPipelineCheckSeed);
    std::vector<GradCheckReport> pipeline = run_pipeline_gradient_check(kPipelineCheckSeed);
    double secs = seconds_since(t0);

    std::size_t failures = 0;
    double worst = 0.0;
    std::size_t probes = 0;
    auto tally = [&](const std::vector<GradCheckReport>& rs) {
        for (const GradCheckReport& r : rs) {
            if (!r.pass) ++failures;
            if (r.max_rel_err > worst) worst = r.max_rel_err;
            probes += r.probes;
        }
    };
    tally(reports);
    tally(pipeline);

    Verdict v;
    v.pass = failures == 0 && secs < 120.0;
    v.detail = fmt("%zu op checks + %zu pipeline audits, %zu probes, max rel err %.3e "
                   "(tolerance %.0e), %.1fs (budget 120s)",
                   reports.size(), pipeline.size(), probes, worst, kFdTolerance, secs);
    if (failures > 0) v.detail += fmt(", %zu FAILED", failures);
    return v;
}

// ---------------------------------------------------------------------------
// 2. Reversal layer: forward is the identity bit for bit; backward multiplies
// the upstream gradient by exactly -lambda.

Verdict check_reversal_law() {
    Pcg32 rng(derive_seed(2, "acceptance-reversal", 0));
    std::size_t values_checked = 0;
    bool forward_ok = true;
    bool backward_ok = true;

    for (int trial = 0; trial < 20; ++trial) {
        int rank = 1 + static_cast<int>(rng.next_below(3));
        std::vector<int> shape;
        int n = 1;
        for (int r = 0; r < rank; ++r) {
            int d = 1 + static_cast<int>(rng.next_below(6));
            shape.push_back(d);
            n *= d;
        }
        std::vector<double> xs(static_cast<std::size_t>(n));
        std::vector<double> up(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            xs[static_cast<std::size_t>(i)] = rng.uniform(-3.0, 3.0);
            up[static_cast<std::size_t>(i)] = rng.uniform(-2.0, 2.0);
        }
        // Trial 0 stresses signed zero and subnormals; the identity claim
        // covers every representable value.
        if (trial == 0 && n >= 3) {
            xs[0] = 0.0;
            xs[1] = -0.0;
            xs[2] = 5e-324;
        }
        double lambda = trial == 0 ? 0.0 : rng.uniform(0.0, 3.0);

        Tensor x = Tensor::from_values(shape, xs, /*requires_grad=*/true);
        Tensor upstream = Tensor::from_values(shape, up);
        Tensor y = gradient_reversal(x, lambda);
        forward_ok = forward_ok && std::memcmp(y.values().data(), xs.data(),
                                               xs.size() * sizeof(double)) == 0;

        backward(sum(mul(y, upstream)));
        for (int i = 0; i < n; ++i) {
            double want = -(lambda * up[static_cast<std::size_t>(i)]);
            double got = x.grad()[static_cast<std::size_t>(i)];
            if (std::memcmp(&want, &got, sizeof(double)) != 0 && got != want) {
                backward_ok = false;
            }
        }
        values_checked += static_cast<std::size_t>(n);
    }

    Verdict v;
    v.pass = forward_ok && backward_ok;
    v.detail = fmt("20 random tensors, %zu values: forward identity %s, backward -lambda "
                   "law %s (both to the bit)",
                   values_checked, forward_ok ? "exact" : "BROKEN",
                   backward_ok ? "exact" : "BROKEN");
    return v;
}

// ---------------------------------------------------------------------------
// 3. Uncertainty, image weights, and local masks stay inside their declared
// ranges; entropy is symmetric with its peak at one half.

Verdict check_calibration_bounds() {
    Pcg32 rng(derive_seed(3, "acceptance-bounds", 0));
    const int n_scores = 10000;
    const double peak = binary_entropy_value(0.5);

    int v_range_bad = 0, weight_range_bad = 0, symmetry_bad = 0, peak_bad = 0;
    std::vector<double> scores(static_cast<std::size_t>(n_scores));
    for (int i = 0; i < n_scores; ++i) {
        double d;
        switch (i) {
            case 0: d = 0.0; break;
            case 1: d = 1.0; break;
            case 2: d = 0.5; break;
            case 3: d = kProbEps; break;
            case 4: d = 1.0 - kProbEps; break;
            default: d = rng.uniform(0.0, 1.0); break;
        }
        scores[static_cast<std::size_t>(i)] = d;
        double v = binary_entropy_value(d);
        if (!(v >= 0.0 && v <= 1.0)) ++v_range_bad;
        if (!(1.0 + v >= 1.0 && 1.0 + v <= 2.0)) ++weight_range_bad;
        if (std::fabs(v - binary_entropy_value(1.0 - d)) > 1e-9) ++symmetry_bad;
        if (v > peak) ++peak_bad;
        if (std::fabs(d - 0.5) > 1e-3 && v >= peak) ++peak_bad;
    }

    // The same scores pushed through the tensor paths: the mask must land in
    // [1,2] and the image reweight factor in [1,2].
    int mask_range_bad = 0;
    Tensor mask = local_feature_mask(Tensor::from_values({n_scores}, scores));
    for (double m : mask.values()) {
        if (!(m >= 1.0 && m <= 2.0)) ++mask_range_bad;
    }
    int reweight_bad = 0;
    for (double d : {0.0, 0.17, 0.5, 0.83, 1.0}) {
        Tensor g = image_reweight(Tensor::full({4}, 1.0), binary_entropy_value(d));
        for (double w : g.values()) {
            if (!(w >= 1.0 && w <= 2.0)) ++reweight_bad;
        }
    }

    bool peak_exact = peak == 1.0;
    Verdict v;
    v.pass = v_range_bad == 0 && weight_range_bad == 0 && symmetry_bad == 0 && peak_bad == 0 &&
             mask_range_bad == 0 && reweight_bad == 0 && peak_exact;
    v.detail = fmt("%d scores: uncertainty in [0,1] (%d bad), weight in [1,2] (%d bad), mask "
                   "in [1,2] (%d bad), symmetry (%d bad), peak at 0.5 = %.17g",
                   n_scores, v_range_bad + reweight_bad, weight_range_bad, mask_range_bad,
                   symmetry_bad, peak);
    if (peak_bad > 0) v.detail += fmt(", %d values above the peak", peak_bad);
    return v;
}

// ---------------------------------------------------------------------------
// 4. Randomized fusion: fused inner products are unbiased estimators of the
// product of the original inner products.

Verdict check_fusion_unbiasedness() {
    auto t0 = Clock::now();
    FusionCheckReport rep = run_fusion_unbiasedness_check(derive_seed(4, "acceptance-fusion", 0),
                                                          /*n_pairs=*/20, /*n_resamples=*/20000,
                                                          /*d_context=*/96, /*d_instance=*/128,
                                                          /*d_out=*/256);
    double secs = seconds_since(t0);
    Verdict v;
    v.pass = rep.pass && secs < 60.0;
    v.detail = fmt("%d/%d vector pairs within 3 standard errors over %d projection resamples, "
                   "worst |z| = %.2f, %.1fs (budget 60s)",
                   rep.pairs_within_3se, rep.pairs, rep.resamples, rep.worst_abs_z, secs);
    return v;
}

// ---------------------------------------------------------------------------
// 5. Matching, AP, and mAP agree exactly with the deliberately naive oracle;
// the threshold sweep never increases.

Verdict check_metric_oracle() {
    Pcg32 rng(derive_seed(5, "acceptance-metrics", 0));
    const int n_classes = 3;
    const std::vector<double> thresholds = default_sweep_thresholds();

    int instances = 0, comparisons = 0, mismatches = 0, monotone_violations = 0;
    for (int trial = 0; trial < 200; ++trial) {
        auto samples = oracle::random_instance(
            rng, 1 + static_cast<int>(rng.next_below(3)), n_classes, 10);
        ++instances;
        for (double threshold : {0.5, 0.65, 0.9}) {
            for (int c = 0; c < n_classes; ++c) {
                MatchResult got = match_class(samples, c, threshold);
                MatchResult want = oracle::match_class(samples, c, threshold);
                bool same = got.total_gt == want.total_gt && got.is_tp == want.is_tp &&
                            average_precision_from_match(got) ==
                                oracle::average_precision(want);
                ++comparisons;
                if (!same) ++mismatches;
            }
        }
        // Whole-summary agreement at the headline threshold.
        ClassApSummary lib = evaluate_map(samples, n_classes, 0.5);
        double oracle_total = 0.0;
        int oracle_counted = 0;
        for (int c = 0; c < n_classes; ++c) {
            double ap = oracle::average_precision(oracle::match_class(samples, c, 0.5));
            if (ap >= 0.0) {
                oracle_total += ap;
                ++oracle_counted;
            }
        }
        double oracle_map =
            oracle_counted > 0 ? oracle_total / static_cast<double>(oracle_counted) : 0.0;
        ++comparisons;
        if (lib.map != oracle_map || lib.classes_counted != oracle_counted) ++mismatches;

        auto curve = map_sweep(samples, n_classes, thresholds);
        for (std::size_t i = 1; i < curve.size(); ++i) {
            if (curve[i - 1].second < curve[i].second) ++monotone_violations;
        }
    }

    Verdict v;
    v.pass = mismatches == 0 && monotone_violations == 0;
    v.detail = fmt("%d random instances, %d exact comparisons, %d mismatches, %d sweep "
                   "monotonicity violations",
                   instances, comparisons, mismatches, monotone_violations);
    return v;
}

// ---------------------------------------------------------------------------
// 6. The adaptation experiment: with the default domain gap, the full model
// beats the source-only baseline by at least five mAP points on average, and
// no single-switch ablation beats the full model.

Verdict check_adaptation_gain(const fs::path& out) {
    auto t0 = Clock::now();
    ExperimentConfig cfg = default_config();
    std::vector<AblationRow> rows = run_ablation(cfg, (out / "adaptation").string());
    double secs = seconds_since(t0);

    double full_mean = -1.0, source_only_mean = -1.0;
    for (const AblationRow& r : rows) {
        if (r.variant == "full") full_mean = r.mean_map;
        if (r.variant == "source_only") source_only_mean = r.mean_map;
    }

    // Per-run numbers for audit; ablation.csv under --out holds the same table.
    std::printf("  seeds:");
    for (std::uint64_t s : cfg.train.seeds) std::printf(" %llu", (unsigned long long)s);
    std::printf("\n");
    for (const AblationRow& r : rows) {
        std::printf("  %-18s", r.variant.c_str());
        for (double m : r.map_per_seed) std::printf(" %.4f", m);
        std::printf("  mean %.4f\n", r.mean_map);
    }

    bool gap_ok = full_mean - source_only_mean >= 0.05;
    std::string losers;
    for (const AblationRow& r : rows) {
        if (r.variant == "full" || r.variant == "source_only") continue;
        if (full_mean < r.mean_map) losers += (losers.empty() ? "" : ",") + r.variant;
    }
    bool budget_ok = secs <= 4.0 * 3600.0;

    Verdict v;
    v.pass = gap_ok && losers.empty() && budget_ok;
    v.detail = fmt("full %.4f vs source-only %.4f over %zu seeds: gap %.1f points (needs >= 5); "
                   "full >= every single ablation: %s; %.0fs (budget 14400s)",
                   full_mean, source_only_mean, cfg.train.seeds.size(),
                   (full_mean - source_only_mean) * 100.0,
                   losers.empty() ? "yes" : ("NO: " + losers).c_str(), secs);
    return v;
}

// ---------------------------------------------------------------------------
// 7. Bit-exact determinism of a full training run under a fixed config+seed.

Verdict check_determinism(const fs::path& out) {
    ExperimentConfig cfg = default_config();
    cfg.train.iterations = 60;
    cfg.train.eval_images = 25;

    fs::path dir_a = out / "determinism_a";
    fs::path dir_b = out / "determinism_b";
    RunRecord a = train_run(cfg, 5, dir_a.string());
    RunRecord b = train_run(cfg, 5, dir_b.string());

    bool curves_equal = a.losses.size() == b.losses.size();
    if (curves_equal) {
        for (std::size_t i = 0; i < a.losses.size(); ++i) {
            const LossBreakdown& x = a.losses[i];
            const LossBreakdown& y = b.losses[i];
            curves_equal = curves_equal && x.total == y.total && x.cls == y.cls &&
                           x.reg == y.reg && x.la == y.la && x.ma == y.ma && x.ga == y.ga &&
                           x.ins == y.ins;
        }
    }
    bool metrics_equal = a.eval.map50 == b.eval.map50 &&
                         a.eval.ap_per_class == b.eval.ap_per_class && a.eval.sweep == b.eval.sweep;
    bool files_equal = read_bytes(dir_a / "losses.csv") == read_bytes(dir_b / "losses.csv") &&
                       read_bytes(dir_a / "metrics.json") == read_bytes(dir_b / "metrics.json");

    Verdict v;
    v.pass = curves_equal && metrics_equal && files_equal;
    v.detail = fmt("two %d-iteration runs, seed 5: %zu-row loss curve %s, metrics %s, "
                   "losses.csv/metrics.json bytes %s",
                   cfg.train.iterations, a.losses.size(),
                   curves_equal ? "bit-identical" : "DIFFER",
                   metrics_equal ? "bit-identical" : "DIFFER",
                   files_equal ? "identical" : "DIFFER");
    return v;
}

// ---------------------------------------------------------------------------
// 8. With the domain gap removed the adaptation machinery must be harmless:
// full and source-only land within two mAP points of each other.

Verdict check_null_domain_gap(const fs::path& out) {
    ExperimentConfig cfg = default_config();
    cfg.scene.fog.alpha_lo = 0.0;
    cfg.scene.fog.alpha_hi = 0.0;
    cfg.scene.fog.blur_radius = 0;
    cfg.scene.fog.noise_sigma = 0.0;
    ExperimentConfig source_only = source_only_variant(cfg);

    double full_sum = 0.0, source_sum = 0.0;
    std::printf("  seed   full  source-only\n");
    for (std::uint64_t seed : cfg.train.seeds) {
        RunRecord f = train_run(cfg, seed, (out / ("nullgap_full_s" + std::to_string(seed))).string());
        RunRecord s = train_run(source_only, seed,
                                (out / ("nullgap_source_s" + std::to_string(seed))).string());
        full_sum += f.eval.map50;
        source_sum += s.eval.map50;
        std::printf("  %4llu  %.4f  %.4f\n", (unsigned long long)seed, f.eval.map50,
                    s.eval.map50);
    }
    double n = static_cast<double>(cfg.train.seeds.size());
    double gap = std::fabs(full_sum / n - source_sum / n);

    Verdict v;
    v.pass = gap < 0.02;
    v.detail = fmt("no-gap domains over %zu seeds: full mean %.4f, source-only mean %.4f, "
                   "|difference| %.2f points (needs < 2)",
                   cfg.train.seeds.size(), full_sum / n, source_sum / n, gap * 100.0);
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    fs::path out = "acceptance_artifacts";
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--out" && i + 1 < argc) {
            out = argv[++i];
        } else {
            try {
                selected.insert(std::stoi(arg));
            } catch (...) {
                std::fprintf(stderr, "usage: %s [--out <dir>] [check numbers 1..8]\n", argv[0]);
                return 2;
            }
        }
    }
    fs::create_directories(out);

    struct Check {
        int index;
        const char* name;
        std::function<Verdict()> run;
    };
    const std::vector<Check> checks = {
        {1, "gradient-correctness", [] { return check_gradients(); }},
        {2, "reversal-law", [] { return check_reversal_law(); }},
        {3, "calibration-bounds", [] { return check_calibration_bounds(); }},
        {4, "fusion-unbiasedness", [] { return check_fusion_unbiasedness(); }},
        {5, "metric-oracle", [] { return check_metric_oracle(); }},
        {6, "adaptation-gain", [&] { return check_adaptation_gain(out); }},
        {7, "determinism", [&] { return check_determinism(out); }},
        {8, "null-domain-gap", [&] { return check_null_domain_gap(out); }},
    };

    int failures = 0;
    int ran = 0;
    for (const Check& c : checks) {
        if (!selected.empty() && !selected.count(c.index)) continue;
        ++ran;
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail = std::string("exception: ") + e.what();
        }
        std::printf("[%s] %d %s: %s\n", v.pass ? "PASS" : "FAIL", c.index, c.name,
                    v.detail.c_str());
        std::fflush(stdout);
        if (!v.pass) ++failures;
    }
    std::printf("acceptance: %d/%d passed\n", ran - failures, ran);
    return failures;
}
