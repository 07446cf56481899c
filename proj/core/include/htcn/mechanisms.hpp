#pragma once

#include "htcn/rng.hpp"
#include "htcn/tensor.hpp"

namespace htcn {

// Transferability calibration building blocks: discriminator-uncertainty
// weighting, local feature masks, randomized multilinear fusion, and the
// adversarial loss heads they feed.

// Probability clamp applied before logarithms so saturated discriminator
// outputs cannot produce infinities.
inline constexpr double kProbEps = 1e-7;

// Binary entropy in bits: H(d) = -d*log2(d) - (1-d)*log2(1-d).
// Inputs are clamped to [kProbEps, 1-kProbEps]; the result is clamped to
// [0,1] so rounding near d=0.5 cannot push an uncertainty weight above 1.
// Differentiable; callers detach when the value is used as a fixed weight.
Tensor binary_entropy(const Tensor& d);
double binary_entropy_value(double d);

// Image-level transferability re-weight: g = f * (1 + v), v in [0,1].
// v is a plain number (already detached); the scale factor is constant with
// respect to the graph, so gradients reach f scaled by (1+v) only.
Tensor image_reweight(const Tensor& f, double v);

// Per-location mask from a pixel-wise discriminator map: m = 2 - H(d).
// Low-uncertainty (confidently classified) locations score near 2, fully
// ambiguous locations score 1. Returned detached: the mask modulates
// features without creating a second gradient path into the discriminator.
Tensor local_feature_mask(const Tensor& d_map);

// Frozen random projections for multilinear fusion. Entries are drawn once
// from U[-sqrt(3), sqrt(3)] (unit variance) and never trained; they must be
// persisted alongside the parameters to reproduce a trained model.
struct RandomProjectionPair {
    Tensor r_context;   // [d_context, d_out]
    Tensor r_instance;  // [d_instance, d_out]
    int d_out = 0;

    static RandomProjectionPair create(int d_context, int d_instance, int d_out, Pcg32& rng);
};

// f_fused = (1/sqrt(d_out)) * (f_c R1) ⊙ (f_ins R2), applied per row.
// f_context: [d_context]; f_instances: [n, d_instance]; result: [n, d_out].
// With unit-variance projections the fused inner products are unbiased
// estimators of the product of the two original inner products.
Tensor multilinear_fusion(const Tensor& f_context, const Tensor& f_instances,
                          const RandomProjectionPair& proj);

// Image-level adversarial BCE over a combined two-domain batch:
//   -( sum_s log d  +  sum_t log(1-d) ) / (n_s + n_t)
// d_source, d_target: rank-1 discriminator outputs in (0,1), one per image.
Tensor bce_image_adversarial_loss(const Tensor& d_source, const Tensor& d_target);

// Instance-level alignment loss, normalized per domain then summed:
//   -mean_s log d  -  mean_t log(1-d)
// d_source, d_target: rank-1, one score per candidate instance. The two
// per-domain terms are exposed separately so a caller with no candidates in
// one domain can keep the other domain's term (the empty side contributes
// zero).
Tensor instance_align_source_term(const Tensor& d_source);
Tensor instance_align_target_term(const Tensor& d_target);
Tensor instance_align_loss(const Tensor& d_source, const Tensor& d_target);

// Pixel-wise adversarial loss in least-squares form:
//   mean_s (1-d)^2 + mean_t d^2
// Each argument is a full discriminator map (any shape, means taken over all
// elements). The squared form keeps gradients bounded at saturation.
Tensor pixelwise_adversarial_loss(const Tensor& d_source_map, const Tensor& d_target_map);

}  // namespace htcn
