#include "htcn/nn.hpp"

#include <cmath>

namespace htcn {

Tensor ParamStore::create(const std::string& name, std::vector<int> shape, double init_lo,
                          double init_hi, Pcg32& rng) {
    if (contains(name)) tensor_fail("parameter '" + name + "' registered twice");
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_values()) v = rng.uniform(init_lo, init_hi);
    entries_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
    if (contains(name)) tensor_fail("parameter '" + name + "' registered twice");
    Tensor t = Tensor::zeros(std::move(shape), true);
    entries_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::find(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    tensor_fail("parameter '" + name + "' not found");
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return true;
    }
    return false;
}

std::size_t ParamStore::total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [name, t] : entries_) const_cast<Tensor&>(t).zero_grad();
}

double fan_in_bound(int fan_in) {
    if (fan_in < 1) tensor_fail("fan_in must be positive");
    return std::sqrt(6.0 / static_cast<double>(fan_in));
}

double bias_bound(int fan_in) {
    if (fan_in < 1) tensor_fail("fan_in must be positive");
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
}

// Biases draw from a small nonzero range on purpose. The synthetic images are
// piecewise constant, so with zero biases every all-zero receptive field lands
// a pre-activation of exactly 0.0: the relu sits on its kink and finite
// differences measure the half-slope instead of the chosen subgradient. A
// generic offset keeps the network off those degenerate points at init.
Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k,
               int stride, int pad, Pcg32& rng)
    : stride_(stride), pad_(pad), out_ch_(out_ch) {
    double bound = fan_in_bound(in_ch * k * k);
    double bb = bias_bound(in_ch * k * k);
    weight_ = store.create(name + ".weight", {out_ch, in_ch, k, k}, -bound, bound, rng);
    bias_ = store.create(name + ".bias", {out_ch}, -bb, bb, rng);
}

Tensor Conv2d::forward(const Tensor& x) const {
    return conv2d(x, weight_, bias_, stride_, pad_);
}

Linear::Linear(ParamStore& store, const std::string& name, int in_dim, int out_dim, Pcg32& rng)
    : in_dim_(in_dim), out_dim_(out_dim) {
    double bound = fan_in_bound(in_dim);
    double bb = bias_bound(in_dim);
    weight_ = store.create(name + ".weight", {in_dim, out_dim}, -bound, bound, rng);
    bias_ = store.create(name + ".bias", {out_dim}, -bb, bb, rng);
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.rank() == 1) {
        if (x.dim(0) != in_dim_) {
            tensor_fail("linear: input width " + std::to_string(x.dim(0)) + " != " +
                        std::to_string(in_dim_));
        }
        Tensor row = reshape(x, {1, in_dim_});
        return reshape(add_rowvec(matmul(row, weight_), bias_), {out_dim_});
    }
    if (x.rank() != 2 || x.dim(1) != in_dim_) {
        tensor_fail("linear: expected [n," + std::to_string(in_dim_) + "], got " +
                    shape_str(x.shape()));
    }
    return add_rowvec(matmul(x, weight_), bias_);
}

void SgdMomentum::step(const ParamStore& store) {
    const auto& entries = store.entries();
    if (velocity_.empty()) {
        velocity_.resize(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            velocity_[i].assign(entries[i].second.numel(), 0.0);
        }
    }
    if (velocity_.size() != entries.size()) {
        tensor_fail("optimizer bound to a different parameter set");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor t = entries[i].second;
        auto& vel = velocity_[i];
        auto& vals = t.mutable_values();
        if (vel.size() != vals.size()) tensor_fail("parameter shape changed under optimizer");
        // A parameter that was not touched by this step's loss contributes a
        // zero gradient; momentum still decays its velocity.
        const std::vector<double>* gp = t.has_grad() ? &t.grad() : nullptr;
        for (std::size_t j = 0; j < vals.size(); ++j) {
            double g = gp ? (*gp)[j] : 0.0;
            vel[j] = momentum_ * vel[j] + g;
            vals[j] -= lr_ * vel[j];
        }
    }
}

}  // namespace htcn
