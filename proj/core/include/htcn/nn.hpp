#pragma once

#include <string>
#include <utility>
#include <vector>

#include "htcn/rng.hpp"
#include "htcn/tensor.hpp"

namespace htcn {

// Named parameter registry. Layers register their tensors here so the
// optimizer, the checkpoint writer, and the gradient checker all walk the
// same ordered list. Order is insertion order and therefore deterministic.
class ParamStore {
public:
    Tensor create(const std::string& name, std::vector<int> shape, double init_lo,
                  double init_hi, Pcg32& rng);
    Tensor create_zeros(const std::string& name, std::vector<int> shape);

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    Tensor find(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t total_count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Uniform fan-in init bound: sqrt(6 / fan_in). Keeps activations at a usable
// scale for the small nets here without needing normal variates.
double fan_in_bound(int fan_in);
double bias_bound(int fan_in);

// 2D convolution layer over [C,H,W] tensors.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k, int stride,
           int pad, Pcg32& rng);

    Tensor forward(const Tensor& x) const;
    int out_channels() const { return out_ch_; }

private:
    Tensor weight_;
    Tensor bias_;
    int stride_ = 1;
    int pad_ = 0;
    int out_ch_ = 0;
};

// Fully connected layer; forward accepts [n,in] or [in].
class Linear {
public:
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in_dim, int out_dim, Pcg32& rng);

    Tensor forward(const Tensor& x) const;
    int out_dim() const { return out_dim_; }

private:
    Tensor weight_;  // [in,out]
    Tensor bias_;    // [out]
    int in_dim_ = 0;
    int out_dim_ = 0;
};

// SGD with classical momentum:
//   v <- m * v + g
//   p <- p - lr * v
// Velocity buffers are keyed by parameter order and start at zero.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    // Applies one update to every parameter in the store, then leaves the
    // gradients untouched (callers zero them explicitly).
    void step(const ParamStore& store);

private:
    double lr_;
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

}  // namespace htcn
