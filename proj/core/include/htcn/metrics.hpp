#pragma once

#include <vector>

#include "htcn/boxes.hpp"

namespace htcn {

// Detection evaluation with VOC-style greedy matching and all-points
// interpolated average precision.

struct GroundTruthBox {
    Box box;
    int cls = 0;
};

struct DetectionBox {
    Box box;
    int cls = 0;
    double confidence = 0.0;
};

// One image's ground truth and predictions.
struct EvalSample {
    std::vector<GroundTruthBox> gts;
    std::vector<DetectionBox> dets;
};

// Outcome of matching one class at one IoU threshold. Flags follow the
// global processing order: detections of the class sorted by descending
// confidence, ties broken by (image index, detection index) ascending.
struct MatchResult {
    std::vector<char> is_tp;  // per processed detection
    int total_gt = 0;
};

// Greedy matcher: each detection takes the highest-IoU unmatched ground
// truth of its class in its image with IoU >= threshold (IoU ties keep the
// lowest ground-truth index); each ground truth matches at most once.
MatchResult match_class(const std::vector<EvalSample>& samples, int cls, double iou_threshold);

// Area under the precision envelope over recall (all-points interpolation).
// Returns -1 when undefined: no ground truth and no predictions. Zero ground
// truth with predictions scores 0.
double average_precision_from_match(const MatchResult& match);
double average_precision(const std::vector<EvalSample>& samples, int cls, double iou_threshold);

struct ClassApSummary {
    std::vector<double> ap_per_class;  // -1 entries mean undefined (excluded)
    double map = 0.0;
    int classes_counted = 0;
};

ClassApSummary evaluate_map(const std::vector<EvalSample>& samples, int n_classes,
                            double iou_threshold);

// mAP per threshold; with greedy matching this curve is monotone
// non-increasing in the threshold.
std::vector<std::pair<double, double>> map_sweep(const std::vector<EvalSample>& samples,
                                                 int n_classes,
                                                 const std::vector<double>& thresholds);

// The 0.5 .. 0.9 step 0.05 threshold list.
std::vector<double> default_sweep_thresholds();

}  // namespace htcn
