#pragma once

#include <array>
#include <vector>

namespace htcn {

// Axis-aligned box in (x1,y1,x2,y2) form, continuous coordinates.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;
};

inline double box_width(const Box& b) { return b.x2 - b.x1; }
inline double box_height(const Box& b) { return b.y2 - b.y1; }
inline double box_area(const Box& b) {
    double w = box_width(b), h = box_height(b);
    return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}
inline bool box_valid(const Box& b) { return b.x1 < b.x2 && b.y1 < b.y2; }

// Intersection over union; degenerate boxes contribute zero area, and a
// pair with empty union reports 0.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

// Center/size offset encoding between an anchor and a target box:
//   dx = (cx_t - cx_a) / w_a,  dw = ln(w_t / w_a),  likewise for y/h.
std::array<double, 4> encode_box_delta(const Box& anchor, const Box& target);

// Inverse of encode_box_delta. dw/dh are clamped to [-4, 4] so a wild
// regression output cannot overflow exp().
Box decode_box_delta(const Box& anchor, double dx, double dy, double dw, double dh);

// Greedy non-maximum suppression. Returns indices of kept boxes in
// descending score order; score ties keep the lower index first, so the
// result is deterministic for any input order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

}  // namespace htcn
