#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "htcn/detector.hpp"
#include "htcn/scenegen.hpp"
#include "htcn/selfcheck.hpp"

using namespace htcn;

namespace {

bool throws_mentioning(const std::function<void()>& fn, const std::string& needle) {
    try {
        fn();
    } catch (const std::runtime_error& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
}

DetectorConfig all_off(DetectorConfig cfg = DetectorConfig{}) {
    cfg.use_iwat_i = false;
    cfg.use_cila = false;
    cfg.use_local_masks = false;
    cfg.use_interpolation = false;
    cfg.use_context = false;
    cfg.use_tensor_product = false;
    return cfg;
}

Tensor test_image(std::uint64_t index = 0) {
    SceneSpec spec;
    spec.seed = 555;
    return generate_scene(spec, index).image;
}

// Fake proposal-head outputs so propose() can be driven directly: one
// objectness logit pair and four deltas per anchor.
PipelineOut fake_rpn(const Detector& det, const std::vector<double>& fg_logits,
                     const std::vector<double>& deltas) {
    int n = static_cast<int>(det.anchors().size());
    std::vector<double> obj(static_cast<std::size_t>(n) * 2);
    for (int a = 0; a < n; ++a) {
        obj[static_cast<std::size_t>(a) * 2] = 0.0;
        obj[static_cast<std::size_t>(a) * 2 + 1] = fg_logits[static_cast<std::size_t>(a)];
    }
    PipelineOut pipe;
    pipe.rpn_obj_rows = Tensor::from_values({n, 2}, obj);
    pipe.rpn_reg_rows = Tensor::from_values({n, 4}, deltas);
    return pipe;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("construction is deterministic and layers share inits across configs") {
    Detector a(DetectorConfig{}, 7);
    Detector b(DetectorConfig{}, 7);
    REQUIRE(a.params().entries().size() == b.params().entries().size());
    for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
        CHECK(a.params().entries()[i].first == b.params().entries()[i].first);
        CHECK(a.params().entries()[i].second.values() == b.params().entries()[i].second.values());
    }
    // Each layer seeds its own init stream, so configs that add or remove
    // other layers leave shared layers bit-identical. This is what makes a
    // lambda-0, all-off run comparable to the source-only baseline.
    Detector off(all_off(), 7);
    for (const char* name : {"g1.conv.weight", "g2.conv.weight", "g3.conv.weight",
                             "roi.fc.weight", "rpn.obj.weight", "d2.conv.weight"}) {
        CHECK(a.params().find(name).values() == off.params().find(name).values());
    }
    Detector other(DetectorConfig{}, 8);
    CHECK(a.params().find("g1.conv.weight").values() !=
          other.params().find("g1.conv.weight").values());
}

TEST_CASE("projections are frozen, deterministic, and never trainable") {
    Detector a(DetectorConfig{}, 3);
    Detector b(DetectorConfig{}, 3);
    CHECK(a.projections().r_context.values() == b.projections().r_context.values());
    CHECK_FALSE(a.projections().r_context.requires_grad());
    CHECK(a.projections().r_context.dim(0) == a.config().d_context());
    CHECK(a.projections().r_instance.dim(0) == a.config().d_ins);
}

TEST_CASE("calibration disabled reduces the pipeline to the plain stage stack") {
    Detector det(all_off(), 11);
    Tensor image = test_image();
    PipelineOut pipe = det.forward_pipeline(image);

    const ParamStore& ps = det.params();
    auto stage = [&](const Tensor& x, const std::string& name) {
        return max_pool2d(relu(conv2d(x, ps.find(name + ".weight"), ps.find(name + ".bias"), 1, 1)),
                          2, 2);
    };
    Tensor manual = stage(stage(stage(image, "g1.conv"), "g2.conv"), "g3.conv");
    CHECK(pipe.f3.values() == manual.values());
    CHECK(pipe.v == 0.0);
    for (double m : pipe.mask.values()) CHECK(m == 1.0);
}

TEST_CASE("masks and entropy weights actually modulate the features when enabled") {
    DetectorConfig cfg;  // all switches on
    Detector det(cfg, 11);
    Detector det_off(all_off(), 11);
    Tensor image = test_image();
    PipelineOut on = det.forward_pipeline(image);
    PipelineOut off = det_off.forward_pipeline(image);
    for (double m : on.mask.values()) {
        CHECK(m >= 1.0);
        CHECK(m <= 2.0);
    }
    CHECK(on.v >= 0.0);
    CHECK(on.v <= 1.0);
    CHECK(on.f3.values() != off.f3.values());
    CHECK_FALSE(on.mask.requires_grad());
    CHECK_FALSE(on.f_context.requires_grad());
}

TEST_CASE("zero-bias pipeline is positively homogeneous in the input") {
    Detector det(all_off(), 21);
    // Zero the biases by hand so the stage stack is a positively homogeneous
    // function of the image; doubling the input must exactly double every
    // feature.
    for (auto& [name, t] : det.params().entries()) {
        if (name.find(".bias") == std::string::npos) continue;
        Tensor b = t;
        for (double& v : b.mutable_values()) v = 0.0;
    }
    Tensor image = test_image();
    std::vector<double> doubled = image.values();
    for (double& v : doubled) v *= 2.0;
    Tensor image2 = Tensor::from_values(image.shape(), std::move(doubled));

    PipelineOut a = det.forward_pipeline(image);
    PipelineOut b = det.forward_pipeline(image2);
    REQUIRE(a.f3.numel() == b.f3.numel());
    for (std::size_t i = 0; i < a.f3.numel(); ++i) {
        CHECK(b.f3.values()[i] == 2.0 * a.f3.values()[i]);
    }
    // Pre-sigmoid head activations inherit the scaling.
    for (std::size_t i = 0; i < a.rpn_obj_rows.numel(); ++i) {
        CHECK(b.rpn_obj_rows.values()[i] == 2.0 * a.rpn_obj_rows.values()[i]);
    }
}

TEST_CASE("forward and detect are bit-deterministic") {
    Detector det(DetectorConfig{}, 31);
    Tensor image = test_image(4);
    PipelineOut p1 = det.forward_pipeline(image);
    PipelineOut p2 = det.forward_pipeline(image);
    CHECK(p1.f3.values() == p2.f3.values());
    CHECK(p1.d1_map.values() == p2.d1_map.values());
    CHECK(p1.d2_score.values() == p2.d2_score.values());
    auto d1 = det.detect(image);
    auto d2 = det.detect(image);
    REQUIRE(d1.size() == d2.size());
    for (std::size_t i = 0; i < d1.size(); ++i) {
        CHECK(d1[i].confidence == d2[i].confidence);
        CHECK(d1[i].box.x1 == d2[i].box.x1);
        CHECK(d1[i].cls == d2[i].cls);
    }
}

TEST_CASE("propose keeps the top anchor's decoded box") {
    DetectorConfig cfg;
    cfg.proposal_top_k = 1;
    Detector det(cfg, 1);
    int n = static_cast<int>(det.anchors().size());
    // Interior anchor: grid cell (4,4), first scale.
    int star = (4 * det.feature_extent() + 4) * 3;
    std::vector<double> fg(static_cast<std::size_t>(n), -20.0);
    fg[static_cast<std::size_t>(star)] = 20.0;
    std::vector<double> deltas(static_cast<std::size_t>(n) * 4, 0.0);
    PipelineOut pipe = fake_rpn(det, fg, deltas);

    auto props = det.propose(pipe, nullptr);
    REQUIRE(props.size() == 1);
    const Box& anchor = det.anchors()[static_cast<std::size_t>(star)];
    CHECK(props[0].x1 == doctest::Approx(anchor.x1).epsilon(1e-12));
    CHECK(props[0].y2 == doctest::Approx(anchor.y2).epsilon(1e-12));
}

TEST_CASE("propose suppresses an exact duplicate and keeps the higher score") {
    Detector det(DetectorConfig{}, 1);
    int n = static_cast<int>(det.anchors().size());
    int cell = (4 * det.feature_extent() + 4) * 3;
    int a = cell;      // scale 10 anchor
    int b = cell + 1;  // scale 16 anchor, steered onto a's box
    std::vector<double> fg(static_cast<std::size_t>(n), -20.0);
    fg[static_cast<std::size_t>(a)] = logit(0.9);
    fg[static_cast<std::size_t>(b)] = logit(0.8);
    std::vector<double> deltas(static_cast<std::size_t>(n) * 4, 0.0);
    auto steer = encode_box_delta(det.anchors()[static_cast<std::size_t>(b)],
                                  det.anchors()[static_cast<std::size_t>(a)]);
    for (int j = 0; j < 4; ++j) {
        deltas[static_cast<std::size_t>(b) * 4 + static_cast<std::size_t>(j)] =
            steer[static_cast<std::size_t>(j)];
    }
    auto props = det.propose(fake_rpn(det, fg, deltas), nullptr);
    REQUIRE(props.size() == 1);
    const Box& want = det.anchors()[static_cast<std::size_t>(a)];
    CHECK(props[0].x1 == doctest::Approx(want.x1).epsilon(1e-9));
    CHECK(props[0].x2 == doctest::Approx(want.x2).epsilon(1e-9));
}

TEST_CASE("propose falls back to injected ground truth when everything is sub-floor") {
    Detector det(DetectorConfig{}, 1);
    int n = static_cast<int>(det.anchors().size());
    std::vector<double> fg(static_cast<std::size_t>(n), -20.0);  // scores ~ 0
    std::vector<double> deltas(static_cast<std::size_t>(n) * 4, 0.0);
    PipelineOut pipe = fake_rpn(det, fg, deltas);

    CHECK(det.propose(pipe, nullptr).empty());
    std::vector<GroundTruthBox> gts = {{{20.0, 20.0, 30.0, 30.0}, 1}};
    auto props = det.propose(pipe, &gts);
    REQUIRE(props.size() == 1);
    CHECK(props[0].x1 == 20.0);
    CHECK(props[0].y2 == 30.0);
}

TEST_CASE("proposals stay inside image bounds") {
    Detector det(DetectorConfig{}, 99);
    SceneSpec spec;
    spec.seed = 909;
    for (std::uint64_t i = 0; i < 6; ++i) {
        LabeledScene scene = generate_scene(spec, i);
        PipelineOut pipe = det.forward_pipeline(scene.image);
        auto props = det.propose(pipe, &scene.labels);
        for (const Box& b : props) {
            CHECK(box_valid(b));
            CHECK(b.x1 >= 0.0);
            CHECK(b.y1 >= 0.0);
            CHECK(b.x2 <= 64.0);
            CHECK(b.y2 <= 64.0);
        }
    }
}

TEST_CASE("roi_max_pool bin semantics") {
    // Constant map: every bin reports the constant.
    Tensor flat = Tensor::full({2, 8, 8}, 1.75);
    Tensor pooled = roi_max_pool(flat, {{1.0, 1.0, 6.0, 6.0}}, 4);
    REQUIRE(pooled.shape() == std::vector<int>{1, 2 * 4 * 4});
    for (double v : pooled.values()) CHECK(v == 1.75);

    // Whole-map box with 1x1 output: the global max.
    std::vector<double> vals(64);
    for (std::size_t i = 0; i < 64; ++i) vals[i] = 0.01 * static_cast<double>(i);
    vals[37] = 9.0;
    Tensor map = Tensor::from_values({1, 8, 8}, vals);
    Tensor top = roi_max_pool(map, {{0.0, 0.0, 8.0, 8.0}}, 1);
    CHECK(top.values()[0] == 9.0);

    // 4x4 map, peak in the corner, 2x2 bins: the peak lands only in bin (0,0).
    std::vector<double> quad(16, 0.0);
    for (std::size_t i = 0; i < 16; ++i) quad[i] = 0.001 * static_cast<double>(i);
    quad[0] = 5.0;
    Tensor qmap = Tensor::from_values({1, 4, 4}, quad);
    Tensor q = roi_max_pool(qmap, {{0.0, 0.0, 4.0, 4.0}}, 2);
    CHECK(q.values()[0] == 5.0);                 // bin (0,0)
    CHECK(q.values()[1] == quad[7]);             // bin (0,1): max of cols 2-3, rows 0-1
    CHECK(q.values()[2] == quad[13]);            // bin (1,0)
    CHECK(q.values()[3] == quad[15]);            // bin (1,1)
}

TEST_CASE("roi_max_pool ignores values outside the box") {
    std::vector<double> vals(16);
    for (std::size_t i = 0; i < 16; ++i) vals[i] = static_cast<double>(i);
    Tensor a = Tensor::from_values({1, 4, 4}, vals);
    Box box{1.0, 1.0, 3.0, 3.0};
    Tensor pa = roi_max_pool(a, {box}, 2);

    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            if (x >= 1 && x < 3 && y >= 1 && y < 3) continue;
            vals[static_cast<std::size_t>(y) * 4 + x] = 100.0;
        }
    }
    Tensor b = Tensor::from_values({1, 4, 4}, vals);
    Tensor pb = roi_max_pool(b, {box}, 2);
    CHECK(pa.values() == pb.values());
}

TEST_CASE("roi_max_pool expands degenerate boxes to one cell") {
    std::vector<double> vals(16);
    for (std::size_t i = 0; i < 16; ++i) vals[i] = static_cast<double>(i);
    Tensor map = Tensor::from_values({1, 4, 4}, vals);
    Tensor pooled = roi_max_pool(map, {{2.2, 2.2, 2.3, 2.3}}, 2);
    for (double v : pooled.values()) CHECK(v == vals[2 * 4 + 2]);
}

TEST_CASE("roi_max_pool gradient matches finite differences") {
    std::vector<double> vals(2 * 36);
    Pcg32 rng(17);
    for (auto& v : vals) v = rng.uniform(-1.0, 1.0);
    Tensor fmap = Tensor::from_values({2, 6, 6}, std::move(vals), true);
    std::vector<Box> boxes = {{0.5, 0.5, 4.5, 5.0}, {2.0, 1.0, 6.0, 6.0}};
    auto report = fd_compare(
        "roi_max_pool", [&] { return mean(roi_max_pool(fmap, boxes, 2)); }, {fmap});
    INFO(report.name, " rel err ", report.max_rel_err);
    CHECK(report.pass);
}

TEST_CASE("roi losses: frozen examples and matching bands") {
    Detector det(DetectorConfig{}, 5);
    std::vector<GroundTruthBox> gts = {{{16.0, 16.0, 28.0, 28.0}, 2},
                                       {{40.0, 36.0, 52.0, 50.0}, 0}};
    std::vector<Box> props = {gts[0].box, gts[1].box};
    int n = 2, width = 4;

    InstanceOut inst;
    inst.f_ins = Tensor::zeros({n, det.config().d_ins});
    std::vector<double> logits(static_cast<std::size_t>(n) * width, 0.0);
    logits[0 * 4 + 2] = 30.0;  // proposal 0 -> class 2
    logits[1 * 4 + 0] = 30.0;  // proposal 1 -> class 0
    inst.cls_logits = Tensor::from_values({n, width}, logits);
    inst.reg_deltas = Tensor::zeros({n, 4});  // proposals equal GT, so targets are 0

    Pcg32 rng(1);
    std::vector<int> fg;
    DetLosses losses = det.roi_losses(inst, props, gts, rng, &fg);
    CHECK(losses.num_pos == 2);
    CHECK(fg == std::vector<int>{0, 1});
    CHECK(losses.cls.scalar_value() < 1e-9);
    CHECK(losses.reg.scalar_value() == 0.0);
    CHECK_FALSE(losses.no_positives);

    // One positive with a 0.5 error on every delta coordinate: the quadratic
    // branch gives 4 * (0.5^2 / 2) = 0.5.
    std::vector<GroundTruthBox> one_gt = {gts[0]};
    std::vector<Box> one_prop = {gts[0].box};
    InstanceOut inst2;
    inst2.f_ins = Tensor::zeros({1, det.config().d_ins});
    inst2.cls_logits = Tensor::from_values({1, width}, {0.0, 0.0, 30.0, 0.0});
    inst2.reg_deltas = Tensor::from_values({1, 4}, {0.5, 0.5, 0.5, 0.5});
    Pcg32 rng2(1);
    DetLosses half = det.roi_losses(inst2, one_prop, one_gt, rng2);
    CHECK(half.reg.scalar_value() == 0.5);

    // A proposal in the ignore band (IoU between 0.3 and 0.5) must not feed
    // the classification loss, even with absurd logits.
    Box mid = {16.0, 16.0, 28.0, 21.5};  // nested half-height slab, IoU ~ 0.458
    double band = iou(mid, gts[0].box);
    REQUIRE(band > 0.3);
    REQUIRE(band < 0.5);
    std::vector<Box> props3 = {gts[0].box, gts[1].box, mid};
    InstanceOut inst3;
    inst3.f_ins = Tensor::zeros({3, det.config().d_ins});
    std::vector<double> logits3(3 * 4, 0.0);
    logits3[0 * 4 + 2] = 30.0;
    logits3[1 * 4 + 0] = 30.0;
    logits3[2 * 4 + 1] = 1e6;  // would explode the loss if it were counted
    inst3.cls_logits = Tensor::from_values({3, width}, logits3);
    inst3.reg_deltas = Tensor::zeros({3, 4});
    Pcg32 rng3(1);
    DetLosses banded = det.roi_losses(inst3, props3, gts, rng3);
    CHECK(banded.cls.scalar_value() < 1e-9);

    // Nothing overlapping: background-only classification, zero regression.
    std::vector<Box> far = {{0.0, 0.0, 8.0, 8.0}};
    InstanceOut inst4;
    inst4.f_ins = Tensor::zeros({1, det.config().d_ins});
    inst4.cls_logits = Tensor::zeros({1, width});
    inst4.reg_deltas = Tensor::zeros({1, 4});
    Pcg32 rng4(1);
    DetLosses none = det.roi_losses(inst4, far, gts, rng4);
    CHECK(none.no_positives);
    CHECK(none.reg.scalar_value() == 0.0);
    CHECK(none.num_pos == 0);
}

TEST_CASE("rpn losses recruit a positive for every reachable object") {
    Detector det(DetectorConfig{}, 5);
    SceneSpec spec;
    spec.seed = 77;
    for (std::uint64_t i = 0; i < 30; ++i) {
        LabeledScene scene = generate_scene(spec, i);
        PipelineOut pipe = det.forward_pipeline(scene.image);
        Pcg32 rng(derive_seed(1, "rpn-neg", i));
        DetLosses losses = det.rpn_losses(pipe, scene.labels, rng);
        CHECK(losses.num_pos >= 1);
        CHECK_FALSE(losses.no_positives);
        CHECK(std::isfinite(losses.cls.scalar_value()));
        CHECK(std::isfinite(losses.reg.scalar_value()));
    }
    // An object that sits exactly on an anchor matches it at IoU 1.
    Box anchor_box = det.anchors()[(4 * det.feature_extent() + 4) * 3 + 1];
    LabeledScene synthetic;
    synthetic.labels = {{anchor_box, 0}};
    PipelineOut pipe = det.forward_pipeline(test_image());
    Pcg32 rng(3);
    DetLosses exact = det.rpn_losses(pipe, synthetic.labels, rng);
    CHECK(exact.num_pos >= 1);
}

TEST_CASE("instance discriminator modes and gradient routing") {
    Tensor image = test_image(2);
    SceneSpec spec;
    spec.seed = 555;
    auto labels = generate_scene(spec, 2).labels;

    DetectorConfig fused;  // context + tensor product
    DetectorConfig concat_mode;
    concat_mode.use_tensor_product = false;
    DetectorConfig plain;
    plain.use_context = false;

    for (const auto& cfg : {fused, concat_mode, plain}) {
        Detector det(cfg, 13);
        PipelineOut pipe = det.forward_pipeline(image);
        auto props = det.propose(pipe, &labels);
        REQUIRE(!props.empty());
        InstanceOut inst = det.forward_instances(pipe, props);
        CHECK(inst.f_ins.shape() ==
              std::vector<int>{static_cast<int>(props.size()), cfg.d_ins});
        std::vector<int> rows;
        for (int r = 0; r < static_cast<int>(props.size()); ++r) rows.push_back(r);
        Tensor scores = det.instance_domain_scores(pipe, inst, rows);
        REQUIRE(scores.shape() == std::vector<int>{static_cast<int>(rows.size())});
        for (double s : scores.values()) {
            CHECK(s > 0.0);
            CHECK(s < 1.0);
        }

        det.params().zero_grad();
        backward(mean(scores));
        // The alignment signal reaches the backbone through ROI pooling...
        CHECK(det.params().find("g1.conv.weight").has_grad());
        // ...but never the stage discriminators: context taps are detached.
        CHECK_FALSE(det.params().find("d1.conv1.weight").has_grad());
        CHECK_FALSE(det.params().find("d2.conv.weight").has_grad());
        CHECK_FALSE(det.params().find("d3.conv.weight").has_grad());
    }
}

TEST_CASE("detection-only training never touches discriminator parameters") {
    Detector det(all_off(), 19);
    SceneSpec spec;
    spec.seed = 313;
    LabeledScene scene = generate_scene(spec, 0);

    PipelineOut pipe = det.forward_pipeline(scene.image);
    auto props = det.propose(pipe, &scene.labels);
    InstanceOut inst = det.forward_instances(pipe, props);
    Pcg32 rng(9);
    DetLosses rpn = det.rpn_losses(pipe, scene.labels, rng);
    DetLosses roi = det.roi_losses(inst, props, scene.labels, rng);
    Tensor total = add(add(rpn.cls, rpn.reg), add(roi.cls, roi.reg));

    det.params().zero_grad();
    backward(total);
    CHECK(det.params().find("g1.conv.weight").has_grad());
    CHECK(det.params().find("g3.conv.weight").has_grad());
    CHECK(det.params().find("roi.cls.weight").has_grad());
    for (const char* name : {"d1.conv1.weight", "d1.conv2.weight", "d2.conv.weight",
                             "d2.fc.weight", "d3.conv.weight", "d3.fc.weight",
                             "dins.fc1.weight", "dins.fc2.weight"}) {
        CHECK_FALSE(det.params().find(name).has_grad());
    }
}

TEST_CASE("frozen calibration reproduces the live forward exactly") {
    Detector det(DetectorConfig{}, 23);
    Tensor image = test_image(6);
    PipelineOut live = det.forward_pipeline(image);
    auto props = det.propose(live, nullptr);
    FrozenCalibration frozen = det.capture_calibration(live, props);

    PipelineOut replay = det.forward_pipeline(image, &frozen);
    CHECK(replay.f3.values() == live.f3.values());
    CHECK(replay.v == live.v);
    CHECK(replay.mask.values() == live.mask.values());
    CHECK(replay.f_context.values() == live.f_context.values());

    // A perturbed mask must change the downstream features: the frozen values
    // really are the ones applied.
    FrozenCalibration bent = frozen;
    for (double& m : bent.mask) m = 1.5;
    PipelineOut warped = det.forward_pipeline(image, &bent);
    CHECK(warped.f3.values() != live.f3.values());
}

TEST_CASE("detect returns well-formed, in-bounds detections") {
    Detector det(DetectorConfig{}, 41);
    auto dets = det.detect(test_image(8));
    for (const auto& d : dets) {
        CHECK(box_valid(d.box));
        CHECK(d.box.x1 >= 0.0);
        CHECK(d.box.y2 <= 64.0);
        CHECK(d.confidence > 0.0);
        CHECK(d.confidence <= 1.0);
        CHECK(d.cls >= 0);
        CHECK(d.cls < 3);
    }
    for (std::size_t i = 1; i < dets.size(); ++i) {
        CHECK(dets[i - 1].confidence >= dets[i].confidence);
    }
}

TEST_CASE("config and input validation") {
    DetectorConfig bad;
    bad.image_size = 30;
    CHECK_THROWS(Detector(bad, 1));
    DetectorConfig no_cls;
    no_cls.num_classes = 0;
    CHECK_THROWS(Detector(no_cls, 1));

    Detector det(DetectorConfig{}, 1);
    CHECK(throws_mentioning([&] { (void)det.forward_pipeline(Tensor::zeros({3, 32, 32})); },
                            "[3,32,32]"));
}
