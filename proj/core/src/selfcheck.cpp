#include "htcn/selfcheck.hpp"

#include <algorithm>
#include <cmath>

#include "htcn/detector.hpp"
#include "htcn/mechanisms.hpp"
#include "htcn/nn.hpp"
#include "htcn/rng.hpp"
#include "htcn/scenegen.hpp"

namespace htcn {

GradCheckReport fd_compare(const std::string& name, const std::function<Tensor()>& loss_fn,
                           const std::vector<Tensor>& params, double step, double tol,
                           std::size_t max_probes_per_tensor) {
    GradCheckReport report;
    report.name = name;

    for (auto p : params) const_cast<Tensor&>(p).zero_grad();
    Tensor loss = loss_fn();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto& vals = p.mutable_values();
        std::size_t n = vals.size();
        std::size_t probes = (max_probes_per_tensor == 0)
                                 ? n
                                 : std::min<std::size_t>(n, max_probes_per_tensor);
        for (std::size_t k = 0; k < probes; ++k) {
            // Strided deterministic probe selection when subsampling.
            std::size_t i = (probes == n) ? k : (k * n) / probes;
            double saved = vals[i];
            vals[i] = saved + step;
            double plus = loss_fn().scalar_value();
            vals[i] = saved - step;
            double minus = loss_fn().scalar_value();
            vals[i] = saved;
            double numeric = (plus - minus) / (2.0 * step);
            double a = analytic[pi][i];
            double rel = std::fabs(a - numeric) /
                         std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            ++report.probes;
        }
    }
    for (auto p : params) const_cast<Tensor&>(p).zero_grad();
    report.pass = report.max_rel_err < tol;
    return report;
}

bool all_passed(const std::vector<GradCheckReport>& reports) {
    for (const auto& r : reports) {
        if (!r.pass) return false;
    }
    return !reports.empty();
}

double worst_rel_err(const std::vector<GradCheckReport>& reports) {
    double w = 0.0;
    for (const auto& r : reports) w = std::max(w, r.max_rel_err);
    return w;
}

namespace {

// Random values bounded away from zero so relu/sign kinks sit farther from
// the probe point than the finite-difference step.
Tensor away_from_zero(std::vector<int> shape, Pcg32& rng, double lo = 0.2, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_values()) {
        double mag = rng.uniform(lo, hi);
        v = (rng.next_u32() & 1u) ? mag : -mag;
    }
    return t;
}

Tensor uniform_tensor(std::vector<int> shape, Pcg32& rng, double lo, double hi,
                      bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.mutable_values()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

std::vector<GradCheckReport> run_op_gradient_checks(std::uint64_t seed) {
    std::vector<GradCheckReport> reports;
    auto rng_for = [seed](const char* tag) { return Pcg32(derive_seed(seed, tag, 0)); };

    {
        auto rng = rng_for("add");
        Tensor a = uniform_tensor({2, 3}, rng, -1.0, 1.0);
        Tensor b = uniform_tensor({2, 3}, rng, -1.0, 1.0);
        Tensor w = uniform_tensor({2, 3}, rng, -1.0, 1.0, false);
        reports.push_back(fd_compare(
            "add", [&] { return sum(mul(add(a, b), w)); }, {a, b}));
        reports.push_back(fd_compare(
            "sub", [&] { return sum(mul(sub(a, b), w)); }, {a, b}));
        reports.push_back(fd_compare(
            "mul", [&] { return sum(mul(mul(a, b), w)); }, {a, b}));
        reports.push_back(fd_compare(
            "scalar_mul", [&] { return sum(scalar_mul(a, 1.7)); }, {a}));
        reports.push_back(fd_compare(
            "scalar_add", [&] { return sum(mul(scalar_add(a, -0.3), a)); }, {a}));
        // Shared-input accumulation: x feeding two consumers must sum both paths.
        reports.push_back(fd_compare(
            "shared_input", [&] { return sum(add(mul(a, b), mul(a, a))); }, {a, b}));
    }
    {
        auto rng = rng_for("relu");
        Tensor x = away_from_zero({3, 4}, rng);
        Tensor w = uniform_tensor({3, 4}, rng, -1.0, 1.0, false);
        reports.push_back(fd_compare(
            "relu", [&] { return sum(mul(relu(x), w)); }, {x}));
    }
    {
        auto rng = rng_for("sigmoid");
        Tensor x = uniform_tensor({2, 5}, rng, -2.0, 2.0);
        reports.push_back(fd_compare(
            "sigmoid", [&] { return sum(sigmoid(x)); }, {x}));
        reports.push_back(fd_compare(
            "mean", [&] { return mean(sigmoid(x)); }, {x}));
    }
    {
        auto rng = rng_for("ln");
        Tensor x = uniform_tensor({6}, rng, 0.2, 2.0);
        reports.push_back(fd_compare(
            "ln", [&] { return sum(ln(x)); }, {x}));
    }
    {
        auto rng = rng_for("clamp");
        // Interior points only; at the clamp edges the derivative is
        // one-sided and a central difference would straddle the kink.
        Tensor x = uniform_tensor({8}, rng, -0.8, 0.8);
        reports.push_back(fd_compare(
            "clamp", [&] { return sum(mul(clamp(x, -1.0, 1.0), x)); }, {x}));
    }
    {
        auto rng = rng_for("structural");
        Tensor a = uniform_tensor({2, 3}, rng, -1.0, 1.0);
        Tensor b = uniform_tensor({1, 3}, rng, -1.0, 1.0);
        Tensor c = uniform_tensor({3, 3}, rng, -1.0, 1.0);
        reports.push_back(fd_compare(
            "concat", [&] { return sum(mul(concat({a, b, c}), concat({a, b, c}))); },
            {a, b, c}));
        reports.push_back(fd_compare(
            "reshape", [&] { return sum(mul(reshape(a, {6}), reshape(a, {6}))); }, {a}));
        reports.push_back(fd_compare(
            "take", [&] { return sum(take(reshape(a, {6}), {0, 2, 2, 5})); }, {a}));
    }
    {
        auto rng = rng_for("matmul");
        Tensor a = uniform_tensor({3, 4}, rng, -1.0, 1.0);
        Tensor b = uniform_tensor({4, 2}, rng, -1.0, 1.0);
        Tensor v = uniform_tensor({4}, rng, -1.0, 1.0);
        reports.push_back(fd_compare(
            "matmul", [&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b}));
        reports.push_back(fd_compare(
            "add_rowvec", [&] { return sum(mul(add_rowvec(a, v), a)); }, {a, v}));
        reports.push_back(fd_compare(
            "mul_rowvec", [&] { return sum(mul(mul_rowvec(a, v), a)); }, {a, v}));
    }
    {
        auto rng = rng_for("conv");
        Tensor x = uniform_tensor({2, 5, 5}, rng, -1.0, 1.0);
        Tensor w = uniform_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor b = uniform_tensor({3}, rng, -0.5, 0.5);
        reports.push_back(fd_compare(
            "conv2d_s1p1", [&] { return sum(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); },
            {x, w, b}));
        reports.push_back(fd_compare(
            "conv2d_s2p0", [&] { return mean(conv2d(x, w, b, 2, 0)); }, {x, w, b}));
    }
    {
        auto rng = rng_for("pool");
        // Jitter separates window entries so the max argument cannot flip
        // under the probe step.
        Tensor x = uniform_tensor({2, 4, 4}, rng, -1.0, 1.0);
        {
            auto& vals = x.mutable_values();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                vals[i] += 0.01 * static_cast<double>(i);
            }
        }
        Tensor w = uniform_tensor({2, 2, 2}, rng, -1.0, 1.0, false);
        reports.push_back(fd_compare(
            "max_pool2d", [&] { return sum(mul(max_pool2d(x, 2, 2), w)); }, {x}));
        reports.push_back(fd_compare(
            "avg_pool2d", [&] { return sum(mul(avg_pool2d(x, 2, 2), w)); }, {x}));
        reports.push_back(fd_compare(
            "global_avg_pool", [&] { return sum(mul(global_avg_pool(x), global_avg_pool(x))); },
            {x}));
    }
    {
        auto rng = rng_for("scale_by_map");
        Tensor x = uniform_tensor({3, 4, 4}, rng, -1.0, 1.0);
        Tensor map = uniform_tensor({4, 4}, rng, 1.0, 2.0, false);
        reports.push_back(fd_compare(
            "scale_by_map", [&] { return sum(mul(scale_by_map(x, map), x)); }, {x}));
    }
    {
        auto rng = rng_for("softmax_ce");
        Tensor logits = uniform_tensor({4, 3}, rng, -1.5, 1.5);
        std::vector<int> labels = {2, 0, 1, 0};
        reports.push_back(fd_compare(
            "softmax_cross_entropy", [&] { return softmax_cross_entropy(logits, labels); },
            {logits}));
    }
    {
        auto rng = rng_for("smooth_l1");
        // Differences bounded away from |d| = 1 where the loss switches branch.
        Tensor pred = uniform_tensor({6}, rng, -0.4, 0.4);
        Tensor target = uniform_tensor({6}, rng, -0.4, 0.4);
        reports.push_back(fd_compare(
            "smooth_l1_quadratic", [&] { return smooth_l1(pred, target); }, {pred, target}));
        Tensor far = uniform_tensor({6}, rng, 1.5, 2.5);
        reports.push_back(fd_compare(
            "smooth_l1_linear", [&] { return smooth_l1(far, target); }, {far, target}));
    }
    {
        auto rng = rng_for("entropy");
        // Away from d = 0.5, where the entropy peak makes the result-clamp
        // boundary coincide with a zero derivative.
        Tensor d = uniform_tensor({5}, rng, 0.12, 0.44);
        reports.push_back(fd_compare(
            "binary_entropy", [&] { return sum(binary_entropy(d)); }, {d}));
    }
    {
        auto rng = rng_for("reweight");
        Tensor f = uniform_tensor({2, 3, 3}, rng, -1.0, 1.0);
        reports.push_back(fd_compare(
            "image_reweight", [&] { return sum(mul(image_reweight(f, 0.37), f)); }, {f}));
    }
    {
        auto rng = rng_for("fusion");
        Tensor fc = uniform_tensor({5}, rng, -1.0, 1.0);
        Tensor fins = uniform_tensor({3, 7}, rng, -1.0, 1.0);
        RandomProjectionPair proj = RandomProjectionPair::create(5, 7, 11, rng);
        reports.push_back(fd_compare(
            "multilinear_fusion",
            [&] {
                Tensor fused = multilinear_fusion(fc, fins, proj);
                return sum(mul(fused, fused));
            },
            {fc, fins}));
    }
    {
        auto rng = rng_for("loss_heads");
        Tensor s_logit = uniform_tensor({3}, rng, -1.5, 1.5);
        Tensor t_logit = uniform_tensor({2}, rng, -1.5, 1.5);
        reports.push_back(fd_compare(
            "bce_image_adversarial_loss",
            [&] { return bce_image_adversarial_loss(sigmoid(s_logit), sigmoid(t_logit)); },
            {s_logit, t_logit}));
        reports.push_back(fd_compare(
            "instance_align_loss",
            [&] { return instance_align_loss(sigmoid(s_logit), sigmoid(t_logit)); },
            {s_logit, t_logit}));
        Tensor s_map = uniform_tensor({2, 3}, rng, -1.0, 1.0);
        Tensor t_map = uniform_tensor({2, 3}, rng, -1.0, 1.0);
        reports.push_back(fd_compare(
            "pixelwise_adversarial_loss",
            [&] { return pixelwise_adversarial_loss(sigmoid(s_map), sigmoid(t_map)); },
            {s_map, t_map}));
    }
    {
        auto rng = rng_for("mask_path");
        Tensor x = uniform_tensor({2, 3, 3}, rng, -1.0, 1.0);
        Tensor d_map = uniform_tensor({3, 3}, rng, 0.15, 0.85, false);
        reports.push_back(fd_compare(
            "local_mask_apply",
            [&] { return sum(mul(scale_by_map(x, local_feature_mask(d_map)), x)); }, {x}));
    }
    {
        // Small conv net end to end: conv -> relu -> pool -> linear -> ce.
        auto rng = rng_for("composed_net");
        ParamStore store;
        Conv2d conv(store, "c1", 1, 4, 3, 1, 1, rng);
        Linear fc(store, "fc", 4 * 2 * 2, 3, rng);
        Tensor img = uniform_tensor({1, 4, 4}, rng, -1.0, 1.0, false);
        std::vector<int> labels = {1};
        std::vector<Tensor> params;
        for (const auto& [name, t] : store.entries()) params.push_back(t);
        reports.push_back(fd_compare(
            "composed_conv_net",
            [&] {
                Tensor h = max_pool2d(relu(conv.forward(img)), 2, 2);
                Tensor logits = fc.forward(reshape(h, {1, 4 * 2 * 2}));
                return softmax_cross_entropy(logits, labels);
            },
            params));
    }
    {
        // Reversal contract on a two-parameter toy net: the generator-side
        // gradient of the adversarial loss must equal -lambda times the
        // finite-difference gradient of the same loss without the reversal.
        auto rng = rng_for("grl_toy");
        const double lambda = 0.7;
        Tensor g = Tensor::scalar(rng.uniform(0.5, 1.5), true);
        Tensor d = Tensor::scalar(rng.uniform(0.5, 1.5), true);
        Tensor x = Tensor::scalar(0.8, false);
        auto loss_with = [&] {
            Tensor feat = mul(g, x);
            Tensor score = sigmoid(mul(d, gradient_reversal(feat, lambda)));
            return scalar_mul(ln(clamp(score, kProbEps, 1.0 - kProbEps)), -1.0);
        };
        auto loss_without = [&] {
            Tensor feat = mul(g, x);
            Tensor score = sigmoid(mul(d, feat));
            return scalar_mul(ln(clamp(score, kProbEps, 1.0 - kProbEps)), -1.0);
        };
        g.zero_grad();
        d.zero_grad();
        backward(loss_with());
        double analytic_g = g.grad()[0];

        double saved = g.values()[0];
        g.mutable_values()[0] = saved + kFdStep;
        double plus = loss_without().scalar_value();
        g.mutable_values()[0] = saved - kFdStep;
        double minus = loss_without().scalar_value();
        g.mutable_values()[0] = saved;
        double fd_unreversed = (plus - minus) / (2.0 * kFdStep);

        GradCheckReport r;
        r.name = "grl_two_param_toy";
        r.probes = 1;
        r.analytic_at_worst = analytic_g;
        r.numeric_at_worst = -lambda * fd_unreversed;
        r.max_rel_err = std::fabs(analytic_g - r.numeric_at_worst) /
                        std::max({std::fabs(analytic_g), std::fabs(r.numeric_at_worst), 1e-6});
        r.pass = r.max_rel_err < kFdTolerance;
        reports.push_back(r);
        g.zero_grad();
        d.zero_grad();
    }
    return reports;
}

std::vector<GradCheckReport> run_pipeline_gradient_check(std::uint64_t seed) {
    DetectorConfig cfg = DetectorConfig::tiny();
    Detector det(cfg, derive_seed(seed, "pipeline-check-model"));

    SceneSpec spec;
    spec.seed = derive_seed(seed, "pipeline-check-data");
    DomainBatch batch = make_domain_batch(spec, 0, 1);
    const LabeledScene& src = batch.source.front();
    const Tensor tgt_image = batch.target.front().image;

    // Freeze everything discrete or detached at the unperturbed point: the
    // applied mask, the image weight, the context vector, and the proposal
    // boxes. Matching against fixed proposals and anchors is then constant
    // across perturbed evaluations, as is the negative subsample (the rng is
    // re-seeded identically inside the closures).
    PipelineOut src_pipe0 = det.forward_pipeline(src.image);
    FrozenCalibration src_frozen =
        det.capture_calibration(src_pipe0, det.propose(src_pipe0, &src.labels));
    PipelineOut tgt_pipe0 = det.forward_pipeline(tgt_image);
    FrozenCalibration tgt_frozen =
        det.capture_calibration(tgt_pipe0, det.propose(tgt_pipe0, nullptr));

    auto detection_loss = [&]() {
        PipelineOut ps = det.forward_pipeline(src.image, &src_frozen);
        InstanceOut inst = det.forward_instances(ps, src_frozen.proposals);
        Pcg32 rpn_rng(derive_seed(seed, "pipeline-check-rpn"));
        Pcg32 roi_rng(derive_seed(seed, "pipeline-check-roi"));
        DetLosses rpn = det.rpn_losses(ps, src.labels, rpn_rng);
        DetLosses roi = det.roi_losses(inst, src_frozen.proposals, src.labels, roi_rng);
        return add(add(rpn.cls, roi.cls), add(rpn.reg, roi.reg));
    };

    auto adversarial_loss = [&]() {
        PipelineOut ps = det.forward_pipeline(src.image, &src_frozen);
        InstanceOut inst_s = det.forward_instances(ps, src_frozen.proposals);
        Pcg32 roi_rng(derive_seed(seed, "pipeline-check-roi"));
        std::vector<int> fg_rows;
        det.roi_losses(inst_s, src_frozen.proposals, src.labels, roi_rng, &fg_rows);

        PipelineOut pt = det.forward_pipeline(tgt_image, &tgt_frozen);
        InstanceOut inst_t = det.forward_instances(pt, tgt_frozen.proposals);

        Tensor l_la = pixelwise_adversarial_loss(ps.d1_map, pt.d1_map);
        Tensor l_ma = bce_image_adversarial_loss(ps.d2_score, pt.d2_score);
        Tensor l_ga = bce_image_adversarial_loss(ps.d3_score, pt.d3_score);
        Tensor adv = add(add(l_la, l_ma), l_ga);
        if (!fg_rows.empty() && !tgt_frozen.proposals.empty()) {
            Tensor src_scores = det.instance_domain_scores(ps, inst_s, fg_rows);
            int k = std::min<int>(cfg.instance_align_top_k,
                                  static_cast<int>(tgt_frozen.proposals.size()));
            std::vector<int> rows(k);
            for (int i = 0; i < k; ++i) rows[i] = i;
            Tensor tgt_scores = det.instance_domain_scores(pt, inst_t, rows);
            adv = add(adv, instance_align_loss(src_scores, tgt_scores));
        }
        return adv;
    };

    std::vector<Tensor> all_params, dis_params;
    for (const auto& [name, tensor] : det.params().entries()) {
        all_params.push_back(tensor);
        if (name.starts_with("d1.") || name.starts_with("d2.") || name.starts_with("d3.") ||
            name.starts_with("dins.")) {
            dis_params.push_back(tensor);
        }
    }

    std::vector<GradCheckReport> reports;
    reports.push_back(fd_compare("pipeline_detection_path", detection_loss, all_params, kFdStep,
                                 kFdTolerance, /*max_probes_per_tensor=*/8));
    reports.push_back(fd_compare("pipeline_adversarial_path", adversarial_loss, dis_params,
                                 kFdStep, kFdTolerance, /*max_probes_per_tensor=*/8));
    return reports;
}

FusionCheckReport run_fusion_unbiasedness_check(std::uint64_t seed, int n_pairs, int n_resamples,
                                                int d_context, int d_instance, int d_out) {
    if (n_pairs < 1 || n_resamples < 2 || d_context < 1 || d_instance < 1 || d_out < 1) {
        tensor_fail("fusion check: invalid dimensions");
    }
    FusionCheckReport report;
    report.pairs = n_pairs;
    report.resamples = n_resamples;

    std::size_t np = static_cast<std::size_t>(n_pairs);
    // Pair-major component layout [component][pair] keeps the per-pair inner
    // loops contiguous for vectorization.
    std::vector<double> xs(static_cast<std::size_t>(d_context) * np);
    std::vector<double> ys(xs.size());
    std::vector<double> us(static_cast<std::size_t>(d_instance) * np);
    std::vector<double> ws(us.size());
    std::vector<double> exact(np);
    {
        for (int p = 0; p < n_pairs; ++p) {
            Pcg32 rng(derive_seed(seed, "fusion-pair", static_cast<std::uint64_t>(p)));
            double dot_xy = 0.0, dot_uw = 0.0;
            for (int c = 0; c < d_context; ++c) {
                double x = rng.uniform(-1.0, 1.0);
                double y = rng.uniform(-1.0, 1.0);
                xs[static_cast<std::size_t>(c) * np + p] = x;
                ys[static_cast<std::size_t>(c) * np + p] = y;
                dot_xy += x * y;
            }
            for (int c = 0; c < d_instance; ++c) {
                double u = rng.uniform(-1.0, 1.0);
                double w = rng.uniform(-1.0, 1.0);
                us[static_cast<std::size_t>(c) * np + p] = u;
                ws[static_cast<std::size_t>(c) * np + p] = w;
                dot_uw += u * w;
            }
            exact[p] = dot_xy * dot_uw;
        }
    }

    const double kBound = std::sqrt(3.0);
    std::vector<double> mean_acc(np, 0.0);
    std::vector<double> m2_acc(np, 0.0);  // Welford running variance
    std::vector<double> a(np), b(np), c(np), e(np), est(np);
    Pcg32 proj_rng(derive_seed(seed, "fusion-projections", 0));

    for (int m = 0; m < n_resamples; ++m) {
        std::fill(est.begin(), est.end(), 0.0);
        for (int k = 0; k < d_out; ++k) {
            std::fill(a.begin(), a.end(), 0.0);
            std::fill(b.begin(), b.end(), 0.0);
            for (int comp = 0; comp < d_context; ++comp) {
                double r = proj_rng.uniform(-kBound, kBound);
                const double* xrow = xs.data() + static_cast<std::size_t>(comp) * np;
                const double* yrow = ys.data() + static_cast<std::size_t>(comp) * np;
                for (std::size_t p = 0; p < np; ++p) {
                    a[p] += r * xrow[p];
                    b[p] += r * yrow[p];
                }
            }
            std::fill(c.begin(), c.end(), 0.0);
            std::fill(e.begin(), e.end(), 0.0);
            for (int comp = 0; comp < d_instance; ++comp) {
                double r = proj_rng.uniform(-kBound, kBound);
                const double* urow = us.data() + static_cast<std::size_t>(comp) * np;
                const double* wrow = ws.data() + static_cast<std::size_t>(comp) * np;
                for (std::size_t p = 0; p < np; ++p) {
                    c[p] += r * urow[p];
                    e[p] += r * wrow[p];
                }
            }
            for (std::size_t p = 0; p < np; ++p) est[p] += a[p] * b[p] * c[p] * e[p];
        }
        double inv_d = 1.0 / static_cast<double>(d_out);
        for (std::size_t p = 0; p < np; ++p) {
            double v = est[p] * inv_d;
            double delta = v - mean_acc[p];
            mean_acc[p] += delta / static_cast<double>(m + 1);
            m2_acc[p] += delta * (v - mean_acc[p]);
        }
    }

    report.pairs_within_3se = 0;
    for (std::size_t p = 0; p < np; ++p) {
        double var = m2_acc[p] / static_cast<double>(n_resamples - 1);
        double se = std::sqrt(var / static_cast<double>(n_resamples));
        double z = (se > 0.0) ? std::fabs(mean_acc[p] - exact[p]) / se : 0.0;
        report.worst_abs_z = std::max(report.worst_abs_z, z);
        if (z <= 3.0) ++report.pairs_within_3se;
    }
    report.pass = report.pairs_within_3se == n_pairs;
    return report;
}

}  // namespace htcn
