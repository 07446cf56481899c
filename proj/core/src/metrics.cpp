#include "htcn/metrics.hpp"

#include <algorithm>
#include <tuple>

#include "htcn/tensor.hpp"

namespace htcn {

MatchResult match_class(const std::vector<EvalSample>& samples, int cls, double iou_threshold) {
    struct Ref {
        double confidence;
        int image;
        int det;
    };
    std::vector<Ref> refs;
    MatchResult result;
    for (int si = 0; si < static_cast<int>(samples.size()); ++si) {
        const auto& s = samples[si];
        for (int di = 0; di < static_cast<int>(s.dets.size()); ++di) {
            if (s.dets[di].cls == cls) refs.push_back({s.dets[di].confidence, si, di});
        }
        for (const auto& gt : s.gts) {
            if (gt.cls == cls) ++result.total_gt;
        }
    }
    std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return std::tie(a.image, a.det) < std::tie(b.image, b.det);
    });

    std::vector<std::vector<char>> gt_taken(samples.size());
    for (std::size_t si = 0; si < samples.size(); ++si) {
        gt_taken[si].assign(samples[si].gts.size(), 0);
    }

    result.is_tp.reserve(refs.size());
    for (const auto& ref : refs) {
        const auto& s = samples[static_cast<std::size_t>(ref.image)];
        const Box& db = s.dets[static_cast<std::size_t>(ref.det)].box;
        int best_gt = -1;
        double best_iou = 0.0;
        for (int gi = 0; gi < static_cast<int>(s.gts.size()); ++gi) {
            if (s.gts[static_cast<std::size_t>(gi)].cls != cls) continue;
            if (gt_taken[static_cast<std::size_t>(ref.image)][static_cast<std::size_t>(gi)]) {
                continue;
            }
            double v = iou(db, s.gts[static_cast<std::size_t>(gi)].box);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best_gt = gi;
            }
        }
        if (best_gt >= 0) {
            gt_taken[static_cast<std::size_t>(ref.image)][static_cast<std::size_t>(best_gt)] = 1;
            result.is_tp.push_back(1);
        } else {
            result.is_tp.push_back(0);
        }
    }
    return result;
}

double average_precision_from_match(const MatchResult& match) {
    if (match.total_gt == 0) {
        return match.is_tp.empty() ? -1.0 : 0.0;
    }
    // Precision/recall after each detection in processing order.
    std::size_t n = match.is_tp.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += match.is_tp[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(match.total_gt);
    }
    // Precision envelope: max precision at any recall >= r, swept right to left.
    for (std::size_t i = n; i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

double average_precision(const std::vector<EvalSample>& samples, int cls, double iou_threshold) {
    return average_precision_from_match(match_class(samples, cls, iou_threshold));
}

ClassApSummary evaluate_map(const std::vector<EvalSample>& samples, int n_classes,
                            double iou_threshold) {
    if (n_classes < 1) tensor_fail("evaluate_map: need at least one class");
    ClassApSummary summary;
    summary.ap_per_class.resize(static_cast<std::size_t>(n_classes), -1.0);
    double total = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        double ap = average_precision(samples, c, iou_threshold);
        summary.ap_per_class[static_cast<std::size_t>(c)] = ap;
        if (ap >= 0.0) {
            total += ap;
            ++summary.classes_counted;
        }
    }
    summary.map = summary.classes_counted > 0
                      ? total / static_cast<double>(summary.classes_counted)
                      : 0.0;
    return summary;
}

std::vector<std::pair<double, double>> map_sweep(const std::vector<EvalSample>& samples,
                                                 int n_classes,
                                                 const std::vector<double>& thresholds) {
    std::vector<std::pair<double, double>> curve;
    curve.reserve(thresholds.size());
    for (double t : thresholds) {
        curve.emplace_back(t, evaluate_map(samples, n_classes, t).map);
    }
    return curve;
}

std::vector<double> default_sweep_thresholds() {
    std::vector<double> ts;
    // Integer ticks over 100 so each threshold is the nearest double to the
    // decimal and serializes as "0.85", not "0.8500000000000001".
    for (int i = 0; i <= 8; ++i) ts.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    return ts;
}

}  // namespace htcn
