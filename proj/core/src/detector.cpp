#include "htcn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace htcn {

namespace {

Pcg32 layer_rng(std::uint64_t seed, const char* name) {
    return Pcg32(derive_seed(seed, name, 0));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor roi_max_pool(const Tensor& fmap, const std::vector<Box>& boxes, int out_size) {
    if (fmap.rank() != 3) {
        tensor_fail("roi_max_pool: expects [C,h,w] features, got " + shape_str(fmap.shape()));
    }
    if (boxes.empty()) tensor_fail("roi_max_pool: no boxes");
    if (out_size < 1) tensor_fail("roi_max_pool: output size must be >= 1");
    int C = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
    int n = static_cast<int>(boxes.size());
    int r = out_size;
    std::size_t per_row = static_cast<std::size_t>(C) * r * r;
    std::vector<double> out(static_cast<std::size_t>(n) * per_row);
    std::vector<int> src(out.size());
    const auto& f = fmap.values();
    std::size_t plane = static_cast<std::size_t>(h) * w;

    for (int i = 0; i < n; ++i) {
        double x1 = boxes[static_cast<std::size_t>(i)].x1;
        double y1 = boxes[static_cast<std::size_t>(i)].y1;
        double x2 = boxes[static_cast<std::size_t>(i)].x2;
        double y2 = boxes[static_cast<std::size_t>(i)].y2;
        if (x2 - x1 < 1.0) {
            double cx = std::min(std::max(0.5 * (x1 + x2), 0.5), w - 0.5);
            x1 = cx - 0.5;
            x2 = cx + 0.5;
        }
        if (y2 - y1 < 1.0) {
            double cy = std::min(std::max(0.5 * (y1 + y2), 0.5), h - 0.5);
            y1 = cy - 0.5;
            y2 = cy + 0.5;
        }
        double bw = (x2 - x1) / r, bh = (y2 - y1) / r;
        for (int by = 0; by < r; ++by) {
            int rl = std::max(0, static_cast<int>(std::floor(y1 + bh * by)));
            int rh = std::min(h, static_cast<int>(std::ceil(y1 + bh * (by + 1))));
            if (rh <= rl) rh = std::min(h, rl + 1);
            for (int bx = 0; bx < r; ++bx) {
                int cl = std::max(0, static_cast<int>(std::floor(x1 + bw * bx)));
                int ch = std::min(w, static_cast<int>(std::ceil(x1 + bw * (bx + 1))));
                if (ch <= cl) ch = std::min(w, cl + 1);
                for (int c = 0; c < C; ++c) {
                    const double* base = f.data() + static_cast<std::size_t>(c) * plane;
                    double best = base[static_cast<std::size_t>(rl) * w + cl];
                    int best_idx = rl * w + cl;
                    for (int y = rl; y < rh; ++y) {
                        for (int x = cl; x < ch; ++x) {
                            double val = base[static_cast<std::size_t>(y) * w + x];
                            if (val > best) {
                                best = val;
                                best_idx = y * w + x;
                            }
                        }
                    }
                    std::size_t k = static_cast<std::size_t>(i) * per_row +
                                    static_cast<std::size_t>(c) * r * r +
                                    static_cast<std::size_t>(by) * r + bx;
                    out[k] = best;
                    src[k] = static_cast<int>(static_cast<std::size_t>(c) * plane) + best_idx;
                }
            }
        }
    }

    NodePtr fn = fmap.node();
    return make_op("roi_max_pool", {n, static_cast<int>(per_row)}, std::move(out), {fmap},
                   [fn, src = std::move(src)](TensorNode& o) {
                       if (!fn->requires_grad) return;
                       std::vector<double> g(fn->values.size());
                       for (std::size_t k = 0; k < src.size(); ++k) {
                           g[static_cast<std::size_t>(src[k])] += o.grad[k];
                       }
                       fn->accumulate_grad(g.data(), g.size());
                   });
}

namespace {

// IoU-band matching shared by the anchor and proposal stages: index lists of
// positives (>= pos_iou, plus optionally the best candidate per ground-truth
// box) and negatives (< neg_iou); candidates in between stay unmatched.
struct MatchLists {
    std::vector<int> pos;
    std::vector<int> pos_gt;  // ground-truth index per positive
    std::vector<int> neg;
};

MatchLists match_by_iou(const std::vector<Box>& cands, const std::vector<GroundTruthBox>& gts,
                        double pos_iou, double neg_iou, bool force_best_per_gt) {
    int n = static_cast<int>(cands.size());
    std::vector<double> best_iou(static_cast<std::size_t>(n), 0.0);
    std::vector<int> best_gt(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < gts.size(); ++j) {
            double ov = iou(cands[static_cast<std::size_t>(i)], gts[j].box);
            if (ov > best_iou[static_cast<std::size_t>(i)]) {
                best_iou[static_cast<std::size_t>(i)] = ov;
                best_gt[static_cast<std::size_t>(i)] = static_cast<int>(j);
            }
        }
    }
    std::vector<char> is_pos(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        if (best_gt[static_cast<std::size_t>(i)] >= 0 &&
            best_iou[static_cast<std::size_t>(i)] >= pos_iou) {
            is_pos[static_cast<std::size_t>(i)] = 1;
        }
    }
    if (force_best_per_gt) {
        // Guarantee every object recruits its closest candidate even when no
        // candidate clears the positive band (small objects between anchor
        // centers would otherwise go untrained).
        for (std::size_t j = 0; j < gts.size(); ++j) {
            double top = 0.05;  // do not force a hopeless match
            int top_i = -1;
            for (int i = 0; i < n; ++i) {
                double ov = iou(cands[static_cast<std::size_t>(i)], gts[j].box);
                if (ov > top) {
                    top = ov;
                    top_i = i;
                }
            }
            if (top_i >= 0 && !is_pos[static_cast<std::size_t>(top_i)]) {
                is_pos[static_cast<std::size_t>(top_i)] = 1;
                best_gt[static_cast<std::size_t>(top_i)] = static_cast<int>(j);
            }
        }
    }
    MatchLists out;
    for (int i = 0; i < n; ++i) {
        if (is_pos[static_cast<std::size_t>(i)]) {
            out.pos.push_back(i);
            out.pos_gt.push_back(best_gt[static_cast<std::size_t>(i)]);
        } else if (best_iou[static_cast<std::size_t>(i)] < neg_iou) {
            out.neg.push_back(i);
        }
    }
    return out;
}

// Keep every positive and a bounded random subset of negatives so the
// classification loss is not dominated by easy background.
std::vector<int> subsample_negatives(const std::vector<int>& neg, int num_pos, int neg_per_pos,
                                     Pcg32& rng) {
    std::size_t quota = static_cast<std::size_t>(neg_per_pos) *
                        static_cast<std::size_t>(std::max(1, num_pos));
    if (neg.size() <= quota) return neg;
    std::vector<int> pool = neg;
    std::vector<int> picked;
    picked.reserve(quota);
    for (std::size_t k = 0; k < quota; ++k) {
        std::uint32_t at = rng.next_below(static_cast<std::uint32_t>(pool.size()));
        picked.push_back(pool[at]);
        pool[at] = pool.back();
        pool.pop_back();
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

std::vector<int> row_gather_indices(const std::vector<int>& rows, int row_width) {
    std::vector<int> flat;
    flat.reserve(rows.size() * static_cast<std::size_t>(row_width));
    for (int r : rows) {
        for (int j = 0; j < row_width; ++j) flat.push_back(r * row_width + j);
    }
    return flat;
}

}  // namespace

DetectorConfig DetectorConfig::tiny() {
    DetectorConfig t;
    t.c1 = 4;
    t.c2 = 5;
    t.c3 = 6;
    t.rpn_hidden = 6;
    t.dis_hidden = 6;
    t.d_ins = 16;
    t.d_fused = 24;
    t.ins_hidden = 8;
    t.proposal_top_k = 12;
    t.max_proposals = 6;
    t.instance_align_top_k = 4;
    return t;
}

Detector::Detector(const DetectorConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    if (cfg.image_size < 32 || cfg.image_size % 8 != 0) {
        tensor_fail("detector: image size must be >= 32 and divisible by 8, got " +
                    std::to_string(cfg.image_size));
    }
    if (cfg.anchor_scales.empty()) tensor_fail("detector: no anchor scales configured");
    if (cfg.num_classes < 1) tensor_fail("detector: needs at least one class");

    auto make_conv = [&](Conv2d& layer, const char* name, int in_ch, int out_ch, int k, int stride,
                         int pad) {
        Pcg32 r = layer_rng(seed, name);
        layer = Conv2d(params_, name, in_ch, out_ch, k, stride, pad, r);
    };
    auto make_fc = [&](Linear& layer, const char* name, int in_dim, int out_dim) {
        Pcg32 r = layer_rng(seed, name);
        layer = Linear(params_, name, in_dim, out_dim, r);
    };

    make_conv(g1_, "g1.conv", 3, cfg.c1, 3, 1, 1);
    make_conv(g2_, "g2.conv", cfg.c1, cfg.c2, 3, 1, 1);
    make_conv(g3_, "g3.conv", cfg.c2, cfg.c3, 3, 1, 1);

    make_conv(d1_conv1_, "d1.conv1", cfg.c1, cfg.dis_hidden, 1, 1, 0);
    make_conv(d1_conv2_, "d1.conv2", cfg.dis_hidden, 1, 1, 1, 0);
    make_conv(d2_conv_, "d2.conv", cfg.c2, cfg.dis_hidden, 3, 1, 1);
    make_fc(d2_fc_, "d2.fc", cfg.dis_hidden, 1);
    make_conv(d3_conv_, "d3.conv", cfg.c3, cfg.dis_hidden, 3, 1, 1);
    make_fc(d3_fc_, "d3.fc", cfg.dis_hidden, 1);

    int scales = static_cast<int>(cfg.anchor_scales.size());
    make_conv(rpn_conv_, "rpn.conv", cfg.c3, cfg.rpn_hidden, 3, 1, 1);
    make_conv(rpn_obj_, "rpn.obj", cfg.rpn_hidden, 2 * scales, 1, 1, 0);
    make_conv(rpn_reg_, "rpn.reg", cfg.rpn_hidden, 4 * scales, 1, 1, 0);

    make_fc(roi_fc_, "roi.fc", cfg.c3 * cfg.roi_size * cfg.roi_size, cfg.d_ins);
    make_fc(cls_head_, "roi.cls", cfg.d_ins, cfg.num_classes + 1);
    make_fc(reg_head_, "roi.reg", cfg.d_ins, 4);

    int ins_in = (cfg.use_context && cfg.use_tensor_product) ? cfg.d_fused : cfg.d_ins;
    make_fc(ins_fc1_, "dins.fc1", ins_in, cfg.ins_hidden);
    if (cfg.use_context && !cfg.use_tensor_product) {
        make_fc(ins_fc1_ctx_, "dins.fc1ctx", cfg.d_context(), cfg.ins_hidden);
    }
    make_fc(ins_fc2_, "dins.fc2", cfg.ins_hidden, 1);

    {
        Pcg32 r = layer_rng(seed, "projections");
        proj_ = RandomProjectionPair::create(cfg.d_context(), cfg.d_ins, cfg.d_fused, r);
    }

    feat_extent_ = cfg.image_size / 8;
    stride_ = 8;
    int e = feat_extent_;
    anchors_.reserve(static_cast<std::size_t>(e) * e * scales);
    for (int y = 0; y < e; ++y) {
        for (int x = 0; x < e; ++x) {
            double cx = (x + 0.5) * stride_;
            double cy = (y + 0.5) * stride_;
            for (int s = 0; s < scales; ++s) {
                double half = 0.5 * cfg.anchor_scales[static_cast<std::size_t>(s)];
                anchors_.push_back({cx - half, cy - half, cx + half, cy + half});
            }
        }
    }
    // Gather maps from channel-major conv output [K*scales, e, e] to
    // anchor-major rows [(y,x,s), K].
    auto build_perm = [&](int per_anchor, std::vector<int>& perm) {
        perm.reserve(anchors_.size() * static_cast<std::size_t>(per_anchor));
        for (int y = 0; y < e; ++y) {
            for (int x = 0; x < e; ++x) {
                for (int s = 0; s < scales; ++s) {
                    for (int j = 0; j < per_anchor; ++j) {
                        perm.push_back((s * per_anchor + j) * e * e + y * e + x);
                    }
                }
            }
        }
    };
    build_perm(2, obj_perm_);
    build_perm(4, reg_perm_);
}

Tensor Detector::backbone_stage(const Conv2d& conv, const Tensor& x) const {
    return max_pool2d(relu(conv.forward(x)), 2, 2);
}

Tensor Detector::anchor_rows(const Tensor& conv_out, int per_anchor,
                             const std::vector<int>& perm) const {
    Tensor flat = take(conv_out, perm);
    return reshape(flat, {static_cast<int>(anchors_.size()), per_anchor});
}

PipelineOut Detector::forward_pipeline(const Tensor& image,
                                       const FrozenCalibration* frozen) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size) {
        tensor_fail("detector: expected [3," + std::to_string(cfg_.image_size) + "," +
                    std::to_string(cfg_.image_size) + "] image, got " + shape_str(image.shape()));
    }

    PipelineOut out;
    out.f1 = backbone_stage(g1_, image);
    int h1 = out.f1.dim(1), w1 = out.f1.dim(2);

    Tensor d1_hidden = relu(d1_conv1_.forward(gradient_reversal(out.f1, 1.0)));
    out.d1_map = reshape(sigmoid(d1_conv2_.forward(d1_hidden)), {h1, w1});
    Tensor tap1 = global_avg_pool(d1_hidden).detach();

    Tensor masked = out.f1;
    if (frozen) {
        out.mask = Tensor::from_values({h1, w1}, frozen->mask);
        masked = scale_by_map(out.f1, out.mask);
    } else if (cfg_.use_local_masks) {
        out.mask = local_feature_mask(out.d1_map);
        masked = scale_by_map(out.f1, out.mask);
    } else {
        out.mask = Tensor::full({h1, w1}, 1.0);
    }

    out.f2 = backbone_stage(g2_, masked);
    Tensor d2_hidden = global_avg_pool(relu(d2_conv_.forward(gradient_reversal(out.f2, 1.0))));
    out.d2_score = sigmoid(d2_fc_.forward(d2_hidden));
    Tensor tap2 = d2_hidden.detach();

    if (frozen) {
        out.v = frozen->v;
    } else if (cfg_.use_iwat_i) {
        out.v = binary_entropy_value(out.d2_score.value_at(0));
    }
    Tensor reweighted = out.v != 0.0 ? image_reweight(out.f2, out.v) : out.f2;

    out.f3 = backbone_stage(g3_, reweighted);
    Tensor d3_hidden = global_avg_pool(relu(d3_conv_.forward(gradient_reversal(out.f3, 1.0))));
    out.d3_score = sigmoid(d3_fc_.forward(d3_hidden));
    Tensor tap3 = d3_hidden.detach();

    if (frozen) {
        out.f_context = Tensor::from_values({cfg_.d_context()}, frozen->f_context);
    } else {
        out.f_context = concat({tap1, tap2, tap3});
    }

    Tensor rpn_hidden = relu(rpn_conv_.forward(out.f3));
    out.rpn_obj_rows = anchor_rows(rpn_obj_.forward(rpn_hidden), 2, obj_perm_);
    out.rpn_reg_rows = anchor_rows(rpn_reg_.forward(rpn_hidden), 4, reg_perm_);
    return out;
}

std::vector<Box> Detector::propose(const PipelineOut& pipe,
                                   const std::vector<GroundTruthBox>* inject_gt) const {
    const auto& obj = pipe.rpn_obj_rows.values();
    const auto& reg = pipe.rpn_reg_rows.values();
    int n = static_cast<int>(anchors_.size());

    std::vector<double> scores(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
        // Two-logit objectness head; the softmax foreground probability.
        scores[static_cast<std::size_t>(a)] = stable_sigmoid(
            obj[static_cast<std::size_t>(a) * 2 + 1] - obj[static_cast<std::size_t>(a) * 2]);
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });

    std::vector<Box> cands;
    std::vector<double> cand_scores;
    int limit = std::min(cfg_.proposal_top_k, n);
    double size = cfg_.image_size;
    for (int k = 0; k < limit; ++k) {
        int a = order[static_cast<std::size_t>(k)];
        double s = scores[static_cast<std::size_t>(a)];
        if (s < cfg_.proposal_score_floor) break;  // order is descending
        std::size_t off = static_cast<std::size_t>(a) * 4;
        Box decoded = decode_box_delta(anchors_[static_cast<std::size_t>(a)], reg[off],
                                       reg[off + 1], reg[off + 2], reg[off + 3]);
        Box clipped = clip_box(decoded, size, size);
        if (!box_valid(clipped)) continue;
        cands.push_back(clipped);
        cand_scores.push_back(s);
    }

    std::vector<Box> result;
    for (int idx : nms(cands, cand_scores, cfg_.proposal_nms_iou)) {
        if (static_cast<int>(result.size()) >= cfg_.max_proposals) break;
        result.push_back(cands[static_cast<std::size_t>(idx)]);
    }
    if (inject_gt) {
        for (const auto& gt : *inject_gt) result.push_back(clip_box(gt.box, size, size));
    }
    return result;
}

InstanceOut Detector::forward_instances(const PipelineOut& pipe,
                                        const std::vector<Box>& proposals) const {
    if (proposals.empty()) tensor_fail("detector: forward_instances needs at least one proposal");
    std::vector<Box> feat_boxes;
    feat_boxes.reserve(proposals.size());
    double inv = 1.0 / stride_;
    for (const Box& b : proposals) {
        feat_boxes.push_back({b.x1 * inv, b.y1 * inv, b.x2 * inv, b.y2 * inv});
    }
    InstanceOut out;
    Tensor pooled = roi_max_pool(pipe.f3, feat_boxes, cfg_.roi_size);
    out.f_ins = relu(roi_fc_.forward(pooled));
    out.cls_logits = cls_head_.forward(out.f_ins);
    out.reg_deltas = reg_head_.forward(out.f_ins);
    return out;
}

Tensor Detector::instance_domain_scores(const PipelineOut& pipe, const InstanceOut& inst,
                                        const std::vector<int>& rows) const {
    if (rows.empty()) tensor_fail("detector: instance_domain_scores needs at least one row");
    int m = static_cast<int>(rows.size());
    Tensor selected =
        reshape(take(inst.f_ins, row_gather_indices(rows, cfg_.d_ins)), {m, cfg_.d_ins});
    Tensor reversed = gradient_reversal(selected, 1.0);

    Tensor hidden;
    if (cfg_.use_context && cfg_.use_tensor_product) {
        hidden = relu(ins_fc1_.forward(multilinear_fusion(pipe.f_context, reversed, proj_)));
    } else if (cfg_.use_context) {
        // Concatenation baseline, computed as a sum of two linear maps.
        hidden = relu(add_rowvec(ins_fc1_.forward(reversed), ins_fc1_ctx_.forward(pipe.f_context)));
    } else {
        hidden = relu(ins_fc1_.forward(reversed));
    }
    return reshape(sigmoid(ins_fc2_.forward(hidden)), {m});
}

DetLosses Detector::rpn_losses(const PipelineOut& pipe, const std::vector<GroundTruthBox>& gts,
                               Pcg32& rng) const {
    MatchLists match =
        match_by_iou(anchors_, gts, cfg_.match_pos_iou, cfg_.match_neg_iou, true);
    std::vector<int> negs =
        subsample_negatives(match.neg, static_cast<int>(match.pos.size()), cfg_.neg_per_pos, rng);

    std::vector<int> rows = match.pos;
    std::vector<int> labels(match.pos.size(), 1);
    rows.insert(rows.end(), negs.begin(), negs.end());
    labels.insert(labels.end(), negs.size(), 0);

    DetLosses out;
    out.num_pos = static_cast<int>(match.pos.size());
    if (rows.empty()) {
        out.cls = Tensor::scalar(0.0);
        out.reg = Tensor::scalar(0.0);
        out.no_positives = true;
        return out;
    }
    Tensor sel_logits = reshape(take(pipe.rpn_obj_rows, row_gather_indices(rows, 2)),
                                {static_cast<int>(rows.size()), 2});
    out.cls = softmax_cross_entropy(sel_logits, labels);

    if (match.pos.empty()) {
        out.reg = Tensor::scalar(0.0);
        out.no_positives = true;
        return out;
    }
    int p = static_cast<int>(match.pos.size());
    Tensor pred = reshape(take(pipe.rpn_reg_rows, row_gather_indices(match.pos, 4)), {p, 4});
    std::vector<double> targets;
    targets.reserve(static_cast<std::size_t>(p) * 4);
    for (int k = 0; k < p; ++k) {
        const Box& anchor = anchors_[static_cast<std::size_t>(match.pos[static_cast<std::size_t>(k)])];
        const Box& gt = gts[static_cast<std::size_t>(match.pos_gt[static_cast<std::size_t>(k)])].box;
        auto d = encode_box_delta(anchor, gt);
        targets.insert(targets.end(), d.begin(), d.end());
    }
    Tensor target = Tensor::from_values({p, 4}, std::move(targets));
    out.reg = scalar_mul(smooth_l1(pred, target), 1.0 / p);
    return out;
}

DetLosses Detector::roi_losses(const InstanceOut& inst, const std::vector<Box>& proposals,
                               const std::vector<GroundTruthBox>& gts, Pcg32& rng,
                               std::vector<int>* fg_rows_out) const {
    MatchLists match =
        match_by_iou(proposals, gts, cfg_.match_pos_iou, cfg_.match_neg_iou, false);
    std::vector<int> negs =
        subsample_negatives(match.neg, static_cast<int>(match.pos.size()), cfg_.neg_per_pos, rng);
    if (fg_rows_out) *fg_rows_out = match.pos;

    std::vector<int> rows = match.pos;
    std::vector<int> labels;
    labels.reserve(rows.size() + negs.size());
    for (int gt_idx : match.pos_gt) labels.push_back(gts[static_cast<std::size_t>(gt_idx)].cls);
    rows.insert(rows.end(), negs.begin(), negs.end());
    labels.insert(labels.end(), negs.size(), cfg_.num_classes);  // background class

    DetLosses out;
    out.num_pos = static_cast<int>(match.pos.size());
    if (rows.empty()) {
        out.cls = Tensor::scalar(0.0);
        out.reg = Tensor::scalar(0.0);
        out.no_positives = true;
        return out;
    }
    int width = cfg_.num_classes + 1;
    Tensor sel_logits = reshape(take(inst.cls_logits, row_gather_indices(rows, width)),
                                {static_cast<int>(rows.size()), width});
    out.cls = softmax_cross_entropy(sel_logits, labels);

    if (match.pos.empty()) {
        out.reg = Tensor::scalar(0.0);
        out.no_positives = true;
        return out;
    }
    int p = static_cast<int>(match.pos.size());
    Tensor pred = reshape(take(inst.reg_deltas, row_gather_indices(match.pos, 4)), {p, 4});
    std::vector<double> targets;
    targets.reserve(static_cast<std::size_t>(p) * 4);
    for (int k = 0; k < p; ++k) {
        const Box& prop = proposals[static_cast<std::size_t>(match.pos[static_cast<std::size_t>(k)])];
        const Box& gt = gts[static_cast<std::size_t>(match.pos_gt[static_cast<std::size_t>(k)])].box;
        auto d = encode_box_delta(prop, gt);
        targets.insert(targets.end(), d.begin(), d.end());
    }
    Tensor target = Tensor::from_values({p, 4}, std::move(targets));
    out.reg = scalar_mul(smooth_l1(pred, target), 1.0 / p);
    return out;
}

std::vector<DetectionBox> Detector::detect(const Tensor& image) const {
    PipelineOut pipe = forward_pipeline(image);
    std::vector<Box> proposals = propose(pipe, nullptr);
    if (proposals.empty()) return {};
    InstanceOut inst = forward_instances(pipe, proposals);

    const auto& logits = inst.cls_logits.values();
    const auto& reg = inst.reg_deltas.values();
    int n = static_cast<int>(proposals.size());
    int width = cfg_.num_classes + 1;
    double size = cfg_.image_size;

    // Candidates per class, then class-wise suppression.
    std::vector<DetectionBox> all;
    for (int cls = 0; cls < cfg_.num_classes; ++cls) {
        std::vector<Box> boxes;
        std::vector<double> confs;
        for (int i = 0; i < n; ++i) {
            const double* row = logits.data() + static_cast<std::size_t>(i) * width;
            double hi = *std::max_element(row, row + width);
            double denom = 0.0;
            for (int c = 0; c < width; ++c) denom += std::exp(row[c] - hi);
            double prob = std::exp(row[cls] - hi) / denom;
            if (prob < cfg_.eval_score_floor) continue;
            std::size_t off = static_cast<std::size_t>(i) * 4;
            Box decoded = decode_box_delta(proposals[static_cast<std::size_t>(i)], reg[off],
                                           reg[off + 1], reg[off + 2], reg[off + 3]);
            Box clipped = clip_box(decoded, size, size);
            if (!box_valid(clipped)) continue;
            boxes.push_back(clipped);
            confs.push_back(prob);
        }
        for (int idx : nms(boxes, confs, cfg_.eval_nms_iou)) {
            all.push_back({boxes[static_cast<std::size_t>(idx)], cls,
                           confs[static_cast<std::size_t>(idx)]});
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const DetectionBox& a, const DetectionBox& b) {
        return a.confidence > b.confidence;
    });
    if (static_cast<int>(all.size()) > cfg_.eval_max_dets) {
        all.resize(static_cast<std::size_t>(cfg_.eval_max_dets));
    }
    return all;
}

FrozenCalibration Detector::capture_calibration(const PipelineOut& pipe,
                                                const std::vector<Box>& proposals) const {
    FrozenCalibration frozen;
    frozen.mask = pipe.mask.values();
    frozen.v = pipe.v;
    frozen.f_context = pipe.f_context.values();
    frozen.proposals = proposals;
    return frozen;
}

}  // namespace htcn
