#pragma once

// Miniature two-stage detector with hierarchical domain calibration hooks.
//
// The backbone is split into three stages so domain discriminators can tap
// features at increasing depth:
//
//   image -> G1 -> [D1: per-pixel domain scores -> local feature mask]
//          -> G2 -> [D2: image domain score -> entropy image weight]
//          -> G3 -> [D3: image domain score]
//          -> proposal head -> ROI pooling -> detection heads
//
// The masks and entropy weights are calibration factors, not gradient paths:
// they are detached when applied. Context taps from the three discriminators
// feed the instance-level discriminator through a randomized fusion of
// context and instance features.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "htcn/boxes.hpp"
#include "htcn/mechanisms.hpp"
#include "htcn/metrics.hpp"
#include "htcn/nn.hpp"
#include "htcn/rng.hpp"
#include "htcn/tensor.hpp"

namespace htcn {

struct DetectorConfig {
    int image_size = 64;
    int num_classes = 3;  // foreground classes; background is class index num_classes

    // Backbone stage widths. Each stage is conv3x3 + relu + 2x2 max pool,
    // so three stages map 64x64 input to an 8x8 grid (stride 8).
    int c1 = 12;
    int c2 = 16;
    int c3 = 24;

    int rpn_hidden = 16;
    int dis_hidden = 32;  // penultimate width of D1/D2/D3; context taps pool to this
    int d_ins = 128;      // instance feature width after the ROI fc
    int d_fused = 256;    // randomized fusion output width
    int ins_hidden = 64;  // hidden width of the instance discriminator

    std::vector<double> anchor_scales = {10.0, 16.0, 24.0};  // square anchors, px
    int roi_size = 4;

    int proposal_top_k = 32;            // anchors kept by objectness before NMS
    double proposal_score_floor = 0.05;
    double proposal_nms_iou = 0.7;
    int max_proposals = 16;             // post-NMS cap
    int instance_align_top_k = 8;       // unlabeled-side instances used for alignment

    double match_pos_iou = 0.5;  // >= is a positive match
    double match_neg_iou = 0.3;  // < is a negative; in between is ignored
    int neg_per_pos = 3;         // negative subsampling ratio for classification

    double eval_score_floor = 0.05;
    double eval_nms_iou = 0.5;
    int eval_max_dets = 20;

    // Calibration switches. All on = the full method; all off plus lambda 0
    // in the trainer = a plain source-only detector.
    bool use_iwat_i = true;         // entropy-based image reweighting
    bool use_cila = true;           // instance-level alignment (D_ins)
    bool use_local_masks = true;    // pixel-uncertainty feature masks
    bool use_interpolation = true;  // cross-domain interpolation streams
    bool use_context = true;        // context taps feed the instance discriminator
    bool use_tensor_product = true; // randomized fusion vs plain concatenation

    int d_context() const { return 3 * dis_hidden; }

    // Small preset sized for finite-difference auditing (under 5k parameters).
    static DetectorConfig tiny();
};

// Everything the backbone forward produces for one image. Feature tensors
// stay on the gradient tape; mask/v/f_context are detached calibration data.
struct PipelineOut {
    Tensor f1;  // G1 output, before masking
    Tensor f2;  // G2 output, before image reweighting (the feature D2 sees)
    Tensor f3;  // G3 output

    Tensor d1_map;    // [h1,w1] per-pixel domain scores (through gradient reversal)
    Tensor d2_score;  // [1] image domain score
    Tensor d3_score;  // [1] image domain score

    Tensor mask;       // [h1,w1] detached mask actually applied (ones when disabled)
    double v = 0.0;    // entropy weight actually applied (0 when disabled)
    Tensor f_context;  // [3*dis_hidden] detached context taps

    Tensor rpn_obj_rows;  // [num_anchors, 2] objectness logits
    Tensor rpn_reg_rows;  // [num_anchors, 4] box deltas
};

// Snapshot of every detached or discrete quantity in one forward pass.
// Re-running the pipeline with a frozen snapshot makes the loss a smooth
// function of the parameters, which is what numeric gradient audits need.
struct FrozenCalibration {
    std::vector<double> mask;       // flattened [h1*w1]
    double v = 0.0;
    std::vector<double> f_context;  // [3*dis_hidden]
    std::vector<Box> proposals;     // image coordinates, injection included
};

struct InstanceOut {
    Tensor f_ins;       // [n, d_ins]
    Tensor cls_logits;  // [n, num_classes+1]
    Tensor reg_deltas;  // [n, 4], class-agnostic
};

// Max pooling of one [C,h,w] feature map over boxes given in feature-map
// coordinates: each box becomes an out_size x out_size bin grid with the
// per-channel maximum inside every bin, flattened to one row. The result
// depends only on feature values the box covers. Boxes thinner than one
// cell are expanded to a one-cell minimum around their center.
Tensor roi_max_pool(const Tensor& fmap, const std::vector<Box>& boxes, int out_size);

struct DetLosses {
    Tensor cls;
    Tensor reg;
    int num_pos = 0;
    bool no_positives = false;  // reg was forced to 0 because nothing matched
};

class Detector {
public:
    Detector(const DetectorConfig& cfg, std::uint64_t seed);

    // Backbone plus discriminators for one [3,H,W] image. When frozen is
    // non-null its mask/v/f_context replace the freshly computed ones.
    PipelineOut forward_pipeline(const Tensor& image,
                                 const FrozenCalibration* frozen = nullptr) const;

    // Decoded, clipped, NMS-filtered proposal boxes ordered by objectness.
    // On labeled images pass the ground truth; those boxes are appended so
    // the ROI heads see positives before the proposal head has converged.
    std::vector<Box> propose(const PipelineOut& pipe,
                             const std::vector<GroundTruthBox>* inject_gt) const;

    // ROI features and detection head outputs for the given proposals.
    InstanceOut forward_instances(const PipelineOut& pipe,
                                  const std::vector<Box>& proposals) const;

    // Domain scores from the instance discriminator for the selected rows
    // of f_ins, through gradient reversal. [rows.size()] sigmoid outputs.
    Tensor instance_domain_scores(const PipelineOut& pipe, const InstanceOut& inst,
                                  const std::vector<int>& rows) const;

    // Proposal-head losses from anchor matching: objectness cross-entropy
    // over sampled matches and smooth-L1 on positive-anchor deltas.
    DetLosses rpn_losses(const PipelineOut& pipe, const std::vector<GroundTruthBox>& gts,
                         Pcg32& rng) const;

    // Detection-head losses from proposal matching. fg_rows_out (optional)
    // receives the proposal row indices matched to ground truth, which are
    // the labeled-side instances used for instance alignment.
    DetLosses roi_losses(const InstanceOut& inst, const std::vector<Box>& proposals,
                         const std::vector<GroundTruthBox>& gts, Pcg32& rng,
                         std::vector<int>* fg_rows_out = nullptr) const;

    // Full inference for one image: proposals, heads, per-class NMS.
    std::vector<DetectionBox> detect(const Tensor& image) const;

    FrozenCalibration capture_calibration(const PipelineOut& pipe,
                                          const std::vector<Box>& proposals) const;

    const std::vector<Box>& anchors() const { return anchors_; }
    int feature_extent() const { return feat_extent_; }
    int stride() const { return stride_; }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const RandomProjectionPair& projections() const { return proj_; }
    RandomProjectionPair& projections() { return proj_; }
    const DetectorConfig& config() const { return cfg_; }

private:
    Tensor backbone_stage(const Conv2d& conv, const Tensor& x) const;
    Tensor anchor_rows(const Tensor& conv_out, int per_anchor,
                       const std::vector<int>& perm) const;

    DetectorConfig cfg_;
    std::uint64_t seed_ = 0;
    ParamStore params_;

    Conv2d g1_, g2_, g3_;
    Conv2d d1_conv1_, d1_conv2_;   // 1x1 pixel discriminator
    Conv2d d2_conv_, d3_conv_;     // image discriminators: conv + GAP + linear
    Linear d2_fc_, d3_fc_;
    Conv2d rpn_conv_, rpn_obj_, rpn_reg_;
    Linear roi_fc_, cls_head_, reg_head_;
    Linear ins_fc1_;               // first instance-discriminator layer (input
                                   // width depends on the fusion mode)
    Linear ins_fc1_ctx_;           // context path when concatenation is used
    Linear ins_fc2_;

    RandomProjectionPair proj_;

    int feat_extent_ = 0;  // G3 spatial size
    int stride_ = 0;
    std::vector<Box> anchors_;
    std::vector<int> obj_perm_, reg_perm_;  // channel-major -> anchor-major
};

}  // namespace htcn
