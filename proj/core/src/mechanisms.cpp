#include "htcn/mechanisms.hpp"

#include <cmath>

namespace htcn {

namespace {

const double kInvLn2 = 1.0 / std::log(2.0);

Tensor clamped_ln(const Tensor& p) {
    return ln(clamp(p, kProbEps, 1.0 - kProbEps));
}

Tensor one_minus(const Tensor& p) {
    return scalar_add(scalar_mul(p, -1.0), 1.0);
}

}  // namespace

Tensor binary_entropy(const Tensor& d) {
    Tensor p = clamp(d, kProbEps, 1.0 - kProbEps);
    Tensor q = one_minus(p);
    Tensor h = scalar_mul(add(mul(p, ln(p)), mul(q, ln(q))), -kInvLn2);
    return clamp(h, 0.0, 1.0);
}

double binary_entropy_value(double d) {
    double p = std::min(std::max(d, kProbEps), 1.0 - kProbEps);
    double q = 1.0 - p;
    double h = -(p * std::log(p) + q * std::log(q)) * kInvLn2;
    return std::min(std::max(h, 0.0), 1.0);
}

Tensor image_reweight(const Tensor& f, double v) {
    if (!(v >= 0.0 && v <= 1.0)) {
        tensor_fail("image_reweight: uncertainty " + std::to_string(v) + " outside [0,1]");
    }
    return scalar_mul(f, 1.0 + v);
}

Tensor local_feature_mask(const Tensor& d_map) {
    if (d_map.rank() != 2) {
        tensor_fail("local_feature_mask: expects [H,W] discriminator map, got " +
                    shape_str(d_map.shape()));
    }
    check_finite(d_map, "local_feature_mask");
    std::vector<double> m(d_map.numel());
    const auto& dv = d_map.values();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = 2.0 - binary_entropy_value(dv[i]);
    return Tensor::from_values(d_map.shape(), std::move(m), false);
}

RandomProjectionPair RandomProjectionPair::create(int d_context, int d_instance, int d_out,
                                                  Pcg32& rng) {
    if (d_context < 1 || d_instance < 1 || d_out < 1) {
        tensor_fail("random projection dimensions must be positive");
    }
    const double bound = std::sqrt(3.0);
    RandomProjectionPair rp;
    rp.d_out = d_out;
    rp.r_context = Tensor::zeros({d_context, d_out}, false);
    for (auto& v : rp.r_context.mutable_values()) v = rng.uniform(-bound, bound);
    rp.r_instance = Tensor::zeros({d_instance, d_out}, false);
    for (auto& v : rp.r_instance.mutable_values()) v = rng.uniform(-bound, bound);
    return rp;
}

Tensor multilinear_fusion(const Tensor& f_context, const Tensor& f_instances,
                          const RandomProjectionPair& proj) {
    if (f_context.rank() != 1) {
        tensor_fail("multilinear_fusion: context vector must be rank-1, got " +
                    shape_str(f_context.shape()));
    }
    if (f_instances.rank() != 2) {
        tensor_fail("multilinear_fusion: instances must be [n,d], got " +
                    shape_str(f_instances.shape()));
    }
    if (f_context.dim(0) != proj.r_context.dim(0)) {
        tensor_fail("multilinear_fusion: context width " + std::to_string(f_context.dim(0)) +
                    " != projection " + std::to_string(proj.r_context.dim(0)));
    }
    if (f_instances.dim(1) != proj.r_instance.dim(0)) {
        tensor_fail("multilinear_fusion: instance width " + std::to_string(f_instances.dim(1)) +
                    " != projection " + std::to_string(proj.r_instance.dim(0)));
    }
    int d_out = proj.d_out;
    Tensor ctx_proj = reshape(matmul(reshape(f_context, {1, f_context.dim(0)}), proj.r_context),
                              {d_out});
    Tensor ins_proj = matmul(f_instances, proj.r_instance);
    Tensor fused = mul_rowvec(ins_proj, ctx_proj);
    return scalar_mul(fused, 1.0 / std::sqrt(static_cast<double>(d_out)));
}

Tensor bce_image_adversarial_loss(const Tensor& d_source, const Tensor& d_target) {
    if (d_source.rank() != 1 || d_target.rank() != 1) {
        tensor_fail("bce_image_adversarial_loss: expects rank-1 score vectors, got " +
                    shape_str(d_source.shape()) + " and " + shape_str(d_target.shape()));
    }
    Tensor src_term = sum(clamped_ln(d_source));
    Tensor tgt_term = sum(clamped_ln(one_minus(d_target)));
    double n = static_cast<double>(d_source.numel() + d_target.numel());
    return scalar_mul(add(src_term, tgt_term), -1.0 / n);
}

Tensor instance_align_source_term(const Tensor& d_source) {
    if (d_source.rank() != 1) {
        tensor_fail("instance_align_source_term: expects a rank-1 score vector, got " +
                    shape_str(d_source.shape()));
    }
    return scalar_mul(mean(clamped_ln(d_source)), -1.0);
}

Tensor instance_align_target_term(const Tensor& d_target) {
    if (d_target.rank() != 1) {
        tensor_fail("instance_align_target_term: expects a rank-1 score vector, got " +
                    shape_str(d_target.shape()));
    }
    return scalar_mul(mean(clamped_ln(one_minus(d_target))), -1.0);
}

Tensor instance_align_loss(const Tensor& d_source, const Tensor& d_target) {
    return add(instance_align_source_term(d_source), instance_align_target_term(d_target));
}

Tensor pixelwise_adversarial_loss(const Tensor& d_source_map, const Tensor& d_target_map) {
    Tensor src_err = one_minus(d_source_map);
    Tensor src_term = mean(mul(src_err, src_err));
    Tensor tgt_term = mean(mul(d_target_map, d_target_map));
    return add(src_term, tgt_term);
}

}  // namespace htcn
