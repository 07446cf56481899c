#include "htcn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace htcn {

namespace {

std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) tensor_fail("non-positive extent in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        tensor_fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
    }
}

// Accumulate g into p's grad if p participates in the gradient path.
void add_grad(const NodePtr& p, const double* g, std::size_t n) {
    if (p->requires_grad) p->accumulate_grad(g, n);
}

void add_grad(const NodePtr& p, const std::vector<double>& g) {
    add_grad(p, g.data(), g.size());
}

}  // namespace

void TensorNode::accumulate_grad(const double* g, std::size_t n) {
    if (n != values.size()) tensor_fail("gradient size mismatch");
    if (grad.empty()) grad.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
}

[[noreturn]] void tensor_fail(const std::string& msg) {
    throw std::runtime_error("tensor: " + msg);
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            tensor_fail(std::string(op) + ": non-finite input value " + std::to_string(v));
        }
    }
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    std::size_t count = numel_of(shape);
    n->shape = std::move(shape);
    n->values.assign(count, value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
    std::size_t count = numel_of(shape);
    if (values.size() != count) {
        tensor_fail("from_values: " + std::to_string(values.size()) +
                    " values for shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
    if (!node_) tensor_fail("shape() on undefined tensor");
    return node_->shape;
}

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) {
        tensor_fail("dim " + std::to_string(i) + " out of range for " + shape_str(s));
    }
    return s[i];
}

std::size_t Tensor::numel() const {
    if (!node_) tensor_fail("numel() on undefined tensor");
    return node_->numel();
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

const std::vector<double>& Tensor::values() const {
    if (!node_) tensor_fail("values() on undefined tensor");
    return node_->values;
}

std::vector<double>& Tensor::mutable_values() {
    if (!node_) tensor_fail("mutable_values() on undefined tensor");
    return node_->values;
}

double Tensor::value_at(std::size_t flat) const {
    const auto& v = values();
    if (flat >= v.size()) tensor_fail("flat index out of range");
    return v[flat];
}

double Tensor::scalar_value() const {
    if (numel() != 1) tensor_fail("scalar_value() on tensor of shape " + shape_str(shape()));
    return values()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!node_) tensor_fail("set_requires_grad() on undefined tensor");
    if (node_->op) tensor_fail("set_requires_grad() on op output; only leaves are trainable");
    node_->requires_grad = rg;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!node_) tensor_fail("grad() on undefined tensor");
    if (node_->grad.empty()) tensor_fail("grad() before any backward pass reached this tensor");
    return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
    if (!node_) tensor_fail("mutable_grad() on undefined tensor");
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
    if (!node_) tensor_fail("detach() on undefined tensor");
    return from_values(node_->shape, node_->values, false);
}

// ---- op factory -------------------------------------------------------------

Tensor make_op(const char* op, std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs, std::function<void(TensorNode&)> backward) {
    std::size_t count = numel_of(shape);
    if (values.size() != count) {
        tensor_fail(std::string(op) + ": produced " + std::to_string(values.size()) +
                    " values for shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool any_grad = false;
    for (const auto& t : inputs) {
        if (t.requires_grad()) {
            any_grad = true;
            break;
        }
    }
    if (any_grad) {
        n->requires_grad = true;
        n->op = op;
        n->parents.reserve(inputs.size());
        for (const auto& t : inputs) n->parents.push_back(t.node());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

// ---- elementwise ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    check_finite(a, "add");
    check_finite(b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op("add", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
        add_grad(an, o.grad);
        add_grad(bn, o.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    check_finite(a, "sub");
    check_finite(b, "sub");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op("sub", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
        add_grad(an, o.grad);
        if (bn->requires_grad) {
            std::vector<double> g(o.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -o.grad[i];
            bn->accumulate_grad(g.data(), g.size());
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    check_finite(a, "mul");
    check_finite(b, "mul");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op("mul", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& o) {
        std::vector<double> g(o.grad.size());
        if (an->requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * bn->values[i];
            an->accumulate_grad(g.data(), g.size());
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * an->values[i];
            bn->accumulate_grad(g.data(), g.size());
        }
    });
}

Tensor scalar_mul(const Tensor& a, double c) {
    check_finite(a, "scalar_mul");
    if (!std::isfinite(c)) tensor_fail("scalar_mul: non-finite scalar");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    NodePtr an = a.node();
    return make_op("scalar_mul", a.shape(), std::move(out), {a}, [an, c](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * c;
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor scalar_add(const Tensor& a, double c) {
    check_finite(a, "scalar_add");
    if (!std::isfinite(c)) tensor_fail("scalar_add: non-finite scalar");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    NodePtr an = a.node();
    return make_op("scalar_add", a.shape(), std::move(out), {a},
                   [an](TensorNode& o) { add_grad(an, o.grad); });
}

Tensor relu(const Tensor& a) {
    check_finite(a, "relu");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    NodePtr an = a.node();
    return make_op("relu", a.shape(), std::move(out), {a}, [an](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = an->values[i] > 0.0 ? o.grad[i] : 0.0;
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor sigmoid(const Tensor& a) {
    check_finite(a, "sigmoid");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = av[i];
        if (x >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            double e = std::exp(x);
            out[i] = e / (1.0 + e);
        }
    }
    NodePtr an = a.node();
    return make_op("sigmoid", a.shape(), std::move(out), {a}, [an](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            double y = o.values[i];
            g[i] = o.grad[i] * y * (1.0 - y);
        }
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor ln(const Tensor& a) {
    check_finite(a, "ln");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av[i] <= 0.0) {
            tensor_fail("ln: non-positive input " + std::to_string(av[i]) +
                        "; clamp before taking logs");
        }
        out[i] = std::log(av[i]);
    }
    NodePtr an = a.node();
    return make_op("ln", a.shape(), std::move(out), {a}, [an](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] / an->values[i];
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) tensor_fail("clamp: lo > hi");
    check_finite(a, "clamp");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(av[i], lo), hi);
    NodePtr an = a.node();
    return make_op("clamp", a.shape(), std::move(out), {a}, [an, lo, hi](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = an->values[i];
            g[i] = (x >= lo && x <= hi) ? o.grad[i] : 0.0;
        }
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor sum(const Tensor& a) {
    check_finite(a, "sum");
    double s = 0.0;
    for (double v : a.values()) s += v;
    NodePtr an = a.node();
    return make_op("sum", {1}, {s}, {a}, [an](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(an->values.size(), o.grad[0]);
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor mean(const Tensor& a) {
    check_finite(a, "mean");
    double s = 0.0;
    for (double v : a.values()) s += v;
    double n = static_cast<double>(a.numel());
    NodePtr an = a.node();
    return make_op("mean", {1}, {s / n}, {a}, [an, n](TensorNode& o) {
        if (!an->requires_grad) return;
        std::vector<double> g(an->values.size(), o.grad[0] / n);
        an->accumulate_grad(g.data(), g.size());
    });
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) tensor_fail("concat: no inputs");
    const auto& first = parts[0].shape();
    std::size_t tail = 1;
    for (std::size_t i = 1; i < first.size(); ++i) tail *= static_cast<std::size_t>(first[i]);
    int total0 = 0;
    for (const auto& p : parts) {
        check_finite(p, "concat");
        const auto& s = p.shape();
        if (s.size() != first.size()) {
            tensor_fail("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
        }
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (s[i] != first[i]) {
                tensor_fail("concat: trailing extent mismatch " + shape_str(first) + " vs " +
                            shape_str(s));
            }
        }
        total0 += s[0];
    }
    std::vector<int> out_shape = first;
    out_shape[0] = total0;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total0) * tail);
    for (const auto& p : parts) {
        const auto& v = p.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_op("concat", std::move(out_shape), std::move(out), parts,
                   [nodes](TensorNode& o) {
                       std::size_t off = 0;
                       for (const auto& n : nodes) {
                           std::size_t cnt = n->values.size();
                           if (n->requires_grad) n->accumulate_grad(o.grad.data() + off, cnt);
                           off += cnt;
                       }
                   });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    std::size_t count = numel_of(shape);
    if (count != a.numel()) {
        tensor_fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    NodePtr an = a.node();
    return make_op("reshape", std::move(shape), a.values(), {a},
                   [an](TensorNode& o) { add_grad(an, o.grad); });
}

Tensor take(const Tensor& a, std::vector<int> indices) {
    check_finite(a, "take");
    std::vector<double> out(indices.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        int idx = indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= av.size()) {
            tensor_fail("take: index " + std::to_string(idx) + " out of range for " +
                        std::to_string(av.size()) + " elements");
        }
        out[i] = av[static_cast<std::size_t>(idx)];
    }
    NodePtr an = a.node();
    int out_extent = static_cast<int>(indices.size());
    return make_op("take", {out_extent}, std::move(out), {a},
                   [an, indices = std::move(indices)](TensorNode& o) {
                       if (!an->requires_grad) return;
                       std::vector<double> g(an->values.size(), 0.0);
                       for (std::size_t i = 0; i < indices.size(); ++i) {
                           g[static_cast<std::size_t>(indices[i])] += o.grad[i];
                       }
                       an->accumulate_grad(g.data(), g.size());
                   });
}

// ---- linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        tensor_fail("matmul: expects rank-2 inputs, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    }
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        tensor_fail("matmul: inner extent mismatch " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
    }
    check_finite(a, "matmul");
    check_finite(b, "matmul");
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double aip = av[static_cast<std::size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + static_cast<std::size_t>(p) * n;
            double* orow = out.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    NodePtr an = a.node(), bn = b.node();
    return make_op("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& o) {
        if (an->requires_grad) {
            // dA = G * B^T
            std::vector<double> g(static_cast<std::size_t>(m) * k, 0.0);
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    double gij = o.grad[static_cast<std::size_t>(i) * n + j];
                    if (gij == 0.0) continue;
                    for (int p = 0; p < k; ++p) {
                        g[static_cast<std::size_t>(i) * k + p] +=
                            gij * bn->values[static_cast<std::size_t>(p) * n + j];
                    }
                }
            }
            an->accumulate_grad(g.data(), g.size());
        }
        if (bn->requires_grad) {
            // dB = A^T * G
            std::vector<double> g(static_cast<std::size_t>(k) * n, 0.0);
            for (int i = 0; i < m; ++i) {
                for (int p = 0; p < k; ++p) {
                    double aip = an->values[static_cast<std::size_t>(i) * k + p];
                    if (aip == 0.0) continue;
                    for (int j = 0; j < n; ++j) {
                        g[static_cast<std::size_t>(p) * n + j] +=
                            aip * o.grad[static_cast<std::size_t>(i) * n + j];
                    }
                }
            }
            bn->accumulate_grad(g.data(), g.size());
        }
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1) {
        tensor_fail("add_rowvec: expects [n,k] + [k], got " + shape_str(m.shape()) + " and " +
                    shape_str(v.shape()));
    }
    int rows = m.dim(0), cols = m.dim(1);
    if (v.dim(0) != cols) {
        tensor_fail("add_rowvec: width mismatch " + shape_str(m.shape()) + " vs " +
                    shape_str(v.shape()));
    }
    check_finite(m, "add_rowvec");
    check_finite(v, "add_rowvec");
    std::vector<double> out(m.numel());
    const auto& mv = m.values();
    const auto& vv = v.values();
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            out[static_cast<std::size_t>(i) * cols + j] =
                mv[static_cast<std::size_t>(i) * cols + j] + vv[static_cast<std::size_t>(j)];
        }
    }
    NodePtr mn = m.node(), vn = v.node();
    return make_op("add_rowvec", m.shape(), std::move(out), {m, v},
                   [mn, vn, rows, cols](TensorNode& o) {
                       add_grad(mn, o.grad);
                       if (vn->requires_grad) {
                           std::vector<double> g(static_cast<std::size_t>(cols), 0.0);
                           for (int i = 0; i < rows; ++i) {
                               for (int j = 0; j < cols; ++j) {
                                   g[static_cast<std::size_t>(j)] +=
                                       o.grad[static_cast<std::size_t>(i) * cols + j];
                               }
                           }
                           vn->accumulate_grad(g.data(), g.size());
                       }
                   });
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1) {
        tensor_fail("mul_rowvec: expects [n,k] * [k], got " + shape_str(m.shape()) + " and " +
                    shape_str(v.shape()));
    }
    int rows = m.dim(0), cols = m.dim(1);
    if (v.dim(0) != cols) {
        tensor_fail("mul_rowvec: width mismatch " + shape_str(m.shape()) + " vs " +
                    shape_str(v.shape()));
    }
    check_finite(m, "mul_rowvec");
    check_finite(v, "mul_rowvec");
    std::vector<double> out(m.numel());
    const auto& mv = m.values();
    const auto& vv = v.values();
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            out[static_cast<std::size_t>(i) * cols + j] =
                mv[static_cast<std::size_t>(i) * cols + j] * vv[static_cast<std::size_t>(j)];
        }
    }
    NodePtr mn = m.node(), vn = v.node();
    return make_op("mul_rowvec", m.shape(), std::move(out), {m, v},
                   [mn, vn, rows, cols](TensorNode& o) {
                       if (mn->requires_grad) {
                           std::vector<double> g(o.grad.size());
                           for (int i = 0; i < rows; ++i) {
                               for (int j = 0; j < cols; ++j) {
                                   std::size_t idx = static_cast<std::size_t>(i) * cols + j;
                                   g[idx] = o.grad[idx] * vn->values[static_cast<std::size_t>(j)];
                               }
                           }
                           mn->accumulate_grad(g.data(), g.size());
                       }
                       if (vn->requires_grad) {
                           std::vector<double> g(static_cast<std::size_t>(cols), 0.0);
                           for (int i = 0; i < rows; ++i) {
                               for (int j = 0; j < cols; ++j) {
                                   std::size_t idx = static_cast<std::size_t>(i) * cols + j;
                                   g[static_cast<std::size_t>(j)] += o.grad[idx] * mn->values[idx];
                               }
                           }
                           vn->accumulate_grad(g.data(), g.size());
                       }
                   });
}

// ---- conv / pooling -------------------------------------------------------------

int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 3) tensor_fail("conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) {
        tensor_fail("conv2d: weight must be [O,C,kh,kw], got " + shape_str(w.shape()));
    }
    if (stride < 1 || pad < 0) tensor_fail("conv2d: invalid stride/pad");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C) {
        tensor_fail("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs weight " +
                    shape_str(w.shape()));
    }
    int OH = conv_out_extent(H, kh, stride, pad);
    int OW = conv_out_extent(W, kw, stride, pad);
    if (OH < 1 || OW < 1) {
        tensor_fail("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                    " does not fit input " + shape_str(x.shape()));
    }
    bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != O)) {
        tensor_fail("conv2d: bias must be [O], got " + shape_str(bias.shape()));
    }
    check_finite(x, "conv2d");
    check_finite(w, "conv2d");
    if (has_bias) check_finite(bias, "conv2d");

    const auto& xv = x.values();
    const auto& wv = w.values();
    std::vector<double> out(static_cast<std::size_t>(O) * OH * OW, 0.0);
    for (int o = 0; o < O; ++o) {
        double b = has_bias ? bias.values()[static_cast<std::size_t>(o)] : 0.0;
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double acc = b;
                for (int c = 0; c < C; ++c) {
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += xv[(static_cast<std::size_t>(c) * H + iy) * W + ix] *
                                   wv[((static_cast<std::size_t>(o) * C + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(static_cast<std::size_t>(o) * OH + oy) * OW + ox] = acc;
            }
        }
    }

    std::vector<Tensor> inputs = {x, w};
    if (has_bias) inputs.push_back(bias);
    NodePtr xn = x.node(), wn = w.node();
    NodePtr bn = has_bias ? bias.node() : nullptr;
    auto bwd = [xn, wn, bn, C, H, W, O, kh, kw, OH, OW, stride, pad](TensorNode& o) {
        std::vector<double> dx, dw, db;
        bool want_x = xn->requires_grad;
        bool want_w = wn->requires_grad;
        bool want_b = bn && bn->requires_grad;
        if (want_x) dx.assign(xn->values.size(), 0.0);
        if (want_w) dw.assign(wn->values.size(), 0.0);
        if (want_b) db.assign(bn->values.size(), 0.0);
        for (int oc = 0; oc < O; ++oc) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    double g = o.grad[(static_cast<std::size_t>(oc) * OH + oy) * OW + ox];
                    if (g == 0.0) continue;
                    if (want_b) db[static_cast<std::size_t>(oc)] += g;
                    if (!want_x && !want_w) continue;
                    for (int c = 0; c < C; ++c) {
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                std::size_t xi = (static_cast<std::size_t>(c) * H + iy) * W + ix;
                                std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * C + c) * kh + ky) * kw + kx;
                                if (want_x) dx[xi] += g * wn->values[wi];
                                if (want_w) dw[wi] += g * xn->values[xi];
                            }
                        }
                    }
                }
            }
        }
        if (want_x) xn->accumulate_grad(dx.data(), dx.size());
        if (want_w) wn->accumulate_grad(dw.data(), dw.size());
        if (want_b) bn->accumulate_grad(db.data(), db.size());
    };
    return make_op("conv2d", {O, OH, OW}, std::move(out), std::move(inputs), std::move(bwd));
}

namespace {

Tensor pool2d(const Tensor& x, int k, int stride, bool take_max, const char* opname) {
    if (x.rank() != 3) {
        tensor_fail(std::string(opname) + ": input must be [C,H,W], got " + shape_str(x.shape()));
    }
    if (k < 1 || stride < 1) tensor_fail(std::string(opname) + ": invalid kernel/stride");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    int OH = conv_out_extent(H, k, stride, 0);
    int OW = conv_out_extent(W, k, stride, 0);
    if (OH < 1 || OW < 1) {
        tensor_fail(std::string(opname) + ": window " + std::to_string(k) +
                    " does not fit input " + shape_str(x.shape()));
    }
    check_finite(x, opname);
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(C) * OH * OW);
    std::vector<int> argmax;
    if (take_max) argmax.resize(out.size());
    double inv_area = 1.0 / (static_cast<double>(k) * k);
    for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                std::size_t oi = (static_cast<std::size_t>(c) * OH + oy) * OW + ox;
                if (take_max) {
                    double best = -1e308;
                    int best_idx = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = oy * stride + ky;
                        for (int kx = 0; kx < k; ++kx) {
                            int ix = ox * stride + kx;
                            std::size_t xi = (static_cast<std::size_t>(c) * H + iy) * W + ix;
                            // Strict > keeps the first maximum on ties, which pins
                            // the backward routing deterministically.
                            if (xv[xi] > best) {
                                best = xv[xi];
                                best_idx = static_cast<int>(xi);
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx;
                } else {
                    double acc = 0.0;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = oy * stride + ky;
                        for (int kx = 0; kx < k; ++kx) {
                            int ix = ox * stride + kx;
                            acc += xv[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                        }
                    }
                    out[oi] = acc * inv_area;
                }
            }
        }
    }
    NodePtr xn = x.node();
    if (take_max) {
        return make_op(opname, {C, OH, OW}, std::move(out), {x},
                       [xn, argmax = std::move(argmax)](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           std::vector<double> g(xn->values.size(), 0.0);
                           for (std::size_t i = 0; i < argmax.size(); ++i) {
                               g[static_cast<std::size_t>(argmax[i])] += o.grad[i];
                           }
                           xn->accumulate_grad(g.data(), g.size());
                       });
    }
    return make_op(opname, {C, OH, OW}, std::move(out), {x},
                   [xn, C, H, W, OH, OW, k, stride, inv_area](TensorNode& o) {
                       if (!xn->requires_grad) return;
                       std::vector<double> g(xn->values.size(), 0.0);
                       for (int c = 0; c < C; ++c) {
                           for (int oy = 0; oy < OH; ++oy) {
                               for (int ox = 0; ox < OW; ++ox) {
                                   double go =
                                       o.grad[(static_cast<std::size_t>(c) * OH + oy) * OW + ox] *
                                       inv_area;
                                   for (int ky = 0; ky < k; ++ky) {
                                       int iy = oy * stride + ky;
                                       for (int kx = 0; kx < k; ++kx) {
                                           int ix = ox * stride + kx;
                                           g[(static_cast<std::size_t>(c) * H + iy) * W + ix] += go;
                                       }
                                   }
                               }
                           }
                       }
                       xn->accumulate_grad(g.data(), g.size());
                   });
}

}  // namespace

Tensor max_pool2d(const Tensor& x, int k, int stride) {
    return pool2d(x, k, stride, true, "max_pool2d");
}

Tensor avg_pool2d(const Tensor& x, int k, int stride) {
    return pool2d(x, k, stride, false, "avg_pool2d");
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3) {
        tensor_fail("global_avg_pool: input must be [C,H,W], got " + shape_str(x.shape()));
    }
    check_finite(x, "global_avg_pool");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    std::size_t area = static_cast<std::size_t>(H) * W;
    double inv_area = 1.0 / static_cast<double>(area);
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const double* base = xv.data() + static_cast<std::size_t>(c) * area;
        for (std::size_t i = 0; i < area; ++i) acc += base[i];
        out[static_cast<std::size_t>(c)] = acc * inv_area;
    }
    NodePtr xn = x.node();
    return make_op("global_avg_pool", {C}, std::move(out), {x},
                   [xn, C, area, inv_area](TensorNode& o) {
                       if (!xn->requires_grad) return;
                       std::vector<double> g(xn->values.size());
                       for (int c = 0; c < C; ++c) {
                           double go = o.grad[static_cast<std::size_t>(c)] * inv_area;
                           double* base = g.data() + static_cast<std::size_t>(c) * area;
                           for (std::size_t i = 0; i < area; ++i) base[i] = go;
                       }
                       xn->accumulate_grad(g.data(), g.size());
                   });
}

Tensor scale_by_map(const Tensor& x, const Tensor& map) {
    if (x.rank() != 3 || map.rank() != 2) {
        tensor_fail("scale_by_map: expects [C,H,W] and [H,W], got " + shape_str(x.shape()) +
                    " and " + shape_str(map.shape()));
    }
    if (x.dim(1) != map.dim(0) || x.dim(2) != map.dim(1)) {
        tensor_fail("scale_by_map: spatial mismatch " + shape_str(x.shape()) + " vs " +
                    shape_str(map.shape()));
    }
    if (map.requires_grad()) {
        tensor_fail("scale_by_map: map must be detached; it is a calibration weight, "
                    "not a trainable path");
    }
    check_finite(x, "scale_by_map");
    check_finite(map, "scale_by_map");
    int C = x.dim(0);
    std::size_t area = map.numel();
    const auto& xv = x.values();
    const auto& mv = map.values();
    std::vector<double> out(x.numel());
    for (int c = 0; c < C; ++c) {
        std::size_t base = static_cast<std::size_t>(c) * area;
        for (std::size_t i = 0; i < area; ++i) out[base + i] = xv[base + i] * mv[i];
    }
    NodePtr xn = x.node(), mn = map.node();
    return make_op("scale_by_map", x.shape(), std::move(out), {x, map},
                   [xn, mn, C, area](TensorNode& o) {
                       if (!xn->requires_grad) return;
                       std::vector<double> g(xn->values.size());
                       for (int c = 0; c < C; ++c) {
                           std::size_t base = static_cast<std::size_t>(c) * area;
                           for (std::size_t i = 0; i < area; ++i) {
                               g[base + i] = o.grad[base + i] * mn->values[i];
                           }
                       }
                       xn->accumulate_grad(g.data(), g.size());
                   });
}

// ---- fused losses -----------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        tensor_fail("softmax_cross_entropy: logits must be [n,c], got " +
                    shape_str(logits.shape()));
    }
    int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        tensor_fail("softmax_cross_entropy: " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(n) + " rows");
    }
    for (int l : labels) {
        if (l < 0 || l >= c) {
            tensor_fail("softmax_cross_entropy: label " + std::to_string(l) +
                        " outside [0," + std::to_string(c) + ")");
        }
    }
    check_finite(logits, "softmax_cross_entropy");
    const auto& lv = logits.values();
    // Softmax probabilities are kept for the backward pass.
    std::vector<double> probs(lv.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = lv.data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        double log_denom = std::log(denom);
        for (int j = 0; j < c; ++j) {
            probs[static_cast<std::size_t>(i) * c + j] = std::exp(row[j] - mx) / denom;
        }
        loss += log_denom - (row[labels[static_cast<std::size_t>(i)]] - mx);
    }
    loss /= static_cast<double>(n);
    NodePtr ln_ = logits.node();
    return make_op("softmax_cross_entropy", {1}, {loss}, {logits},
                   [ln_, labels, probs = std::move(probs), n, c](TensorNode& o) {
                       if (!ln_->requires_grad) return;
                       double scale = o.grad[0] / static_cast<double>(n);
                       std::vector<double> g(probs.size());
                       for (int i = 0; i < n; ++i) {
                           for (int j = 0; j < c; ++j) {
                               std::size_t idx = static_cast<std::size_t>(i) * c + j;
                               double onehot =
                                   (j == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                               g[idx] = scale * (probs[idx] - onehot);
                           }
                       }
                       ln_->accumulate_grad(g.data(), g.size());
                   });
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
    check_same_shape("smooth_l1", pred, target);
    check_finite(pred, "smooth_l1");
    check_finite(target, "smooth_l1");
    const auto& pv = pred.values();
    const auto& tv = target.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        double d = pv[i] - tv[i];
        double ad = std::fabs(d);
        loss += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
    }
    NodePtr pn = pred.node(), tn = target.node();
    return make_op("smooth_l1", {1}, {loss}, {pred, target}, [pn, tn](TensorNode& o) {
        double g0 = o.grad[0];
        std::vector<double> g(pn->values.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            double d = pn->values[i] - tn->values[i];
            double slope = std::fabs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
            g[i] = g0 * slope;
        }
        if (pn->requires_grad) pn->accumulate_grad(g.data(), g.size());
        if (tn->requires_grad) {
            for (auto& v : g) v = -v;
            tn->accumulate_grad(g.data(), g.size());
        }
    });
}

// ---- adversarial plumbing -----------------------------------------------------------

Tensor gradient_reversal(const Tensor& x, double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        tensor_fail("gradient_reversal: lambda must be finite and >= 0, got " +
                    std::to_string(lambda));
    }
    check_finite(x, "gradient_reversal");
    NodePtr xn = x.node();
    // Values are copied verbatim: the reversal is purely a backward-pass effect.
    return make_op("gradient_reversal", x.shape(), x.values(), {x},
                   [xn, lambda](TensorNode& o) {
                       if (!xn->requires_grad) return;
                       std::vector<double> g(o.grad.size());
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] = -lambda * o.grad[i];
                       xn->accumulate_grad(g.data(), g.size());
                   });
}

// ---- autodiff ----------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) tensor_fail("backward: undefined tensor");
    if (loss.numel() != 1) {
        tensor_fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) {
        tensor_fail("backward: loss does not depend on any trainable tensor");
    }

    // Iterative postorder DFS; parents land before their consumers, so the
    // reversed order visits each node only after all of its consumers.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    visited.insert(root);
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            TensorNode* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    double seed = 1.0;
    root->accumulate_grad(&seed, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // A trainable leaf that ended up disconnected (e.g. masked out of this
    // step's loss) still reports a well-defined zero gradient.
    for (TensorNode* n : visited) {
        if (n->requires_grad && n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
    }
}

}  // namespace htcn
