#include "htcn/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "htcn/tensor.hpp"

namespace htcn {

double iou(const Box& a, const Box& b) {
    double area_a = box_area(a);
    double area_b = box_area(b);
    if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
    double ix1 = std::max(a.x1, b.x1);
    double iy1 = std::max(a.y1, b.y1);
    double ix2 = std::min(a.x2, b.x2);
    double iy2 = std::min(a.y2, b.y2);
    double iw = ix2 - ix1;
    double ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    double inter = iw * ih;
    return inter / (area_a + area_b - inter);
}

Box clip_box(const Box& b, double width, double height) {
    Box out;
    out.x1 = std::min(std::max(b.x1, 0.0), width);
    out.y1 = std::min(std::max(b.y1, 0.0), height);
    out.x2 = std::min(std::max(b.x2, 0.0), width);
    out.y2 = std::min(std::max(b.y2, 0.0), height);
    return out;
}

std::array<double, 4> encode_box_delta(const Box& anchor, const Box& target) {
    if (!box_valid(anchor) || !box_valid(target)) {
        tensor_fail("encode_box_delta: degenerate box");
    }
    double wa = box_width(anchor), ha = box_height(anchor);
    double cxa = anchor.x1 + 0.5 * wa, cya = anchor.y1 + 0.5 * ha;
    double wt = box_width(target), ht = box_height(target);
    double cxt = target.x1 + 0.5 * wt, cyt = target.y1 + 0.5 * ht;
    return {(cxt - cxa) / wa, (cyt - cya) / ha, std::log(wt / wa), std::log(ht / ha)};
}

Box decode_box_delta(const Box& anchor, double dx, double dy, double dw, double dh) {
    if (!box_valid(anchor)) tensor_fail("decode_box_delta: degenerate anchor");
    double wa = box_width(anchor), ha = box_height(anchor);
    double cxa = anchor.x1 + 0.5 * wa, cya = anchor.y1 + 0.5 * ha;
    dw = std::min(std::max(dw, -4.0), 4.0);
    dh = std::min(std::max(dh, -4.0), 4.0);
    double cx = cxa + dx * wa;
    double cy = cya + dy * ha;
    double w = wa * std::exp(dw);
    double h = ha * std::exp(dh);
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
    if (boxes.size() != scores.size()) tensor_fail("nms: box/score count mismatch");
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (int idx : order) {
        if (suppressed[idx]) continue;
        kept.push_back(idx);
        for (int other : order) {
            if (other == idx || suppressed[other]) continue;
            if (iou(boxes[idx], boxes[other]) > iou_threshold) suppressed[other] = 1;
        }
    }
    return kept;
}

}  // namespace htcn
