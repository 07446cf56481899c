#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace htcn {

// Dense f64 tensor with reverse-mode autodiff.
//
// Tensors are handles to shared nodes. Every op validates shapes and input
// finiteness, computes eagerly, and records a tape node when any input
// requires gradients. backward() walks the tape once in reverse topological
// order; gradients accumulate additively until zero_grad().
//
// Broadcasting is restricted to explicit scalar ops (scalar_mul/scalar_add)
// and scale_by_map; all other ops require exact shape agreement.

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    // Tape fields; `backward` reads this node's grad and accumulates into parents.
    const char* op = nullptr;  // null for leaves
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward;

    std::size_t numel() const { return values.size(); }
    void accumulate_grad(const double* g, std::size_t n);
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int dim(int i) const;
    std::size_t numel() const;
    int rank() const;

    const std::vector<double>& values() const;
    // Mutable access for initialization and optimizer updates; never call on
    // a tensor that already participates in a recorded graph.
    std::vector<double>& mutable_values();
    double value_at(std::size_t flat) const;
    double scalar_value() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad();
    void zero_grad();

    // Leaf copy of the values, outside any graph.
    Tensor detach() const;

    NodePtr node() const { return node_; }
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

private:
    NodePtr node_;
};

// ---- error helpers -------------------------------------------------------

[[noreturn]] void tensor_fail(const std::string& msg);
std::string shape_str(const std::vector<int>& shape);

// ---- op construction (for modules that define their own ops) --------------

Tensor make_op(const char* op, std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs, std::function<void(TensorNode&)> backward);

void check_finite(const Tensor& t, const char* op);

// ---- elementwise and structural ops ---------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Natural log; rejects non-positive inputs (clamp first).
Tensor ln(const Tensor& a);
// Pass-through gradient inside [lo, hi], zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Concatenate along axis 0; all inputs must share rank and trailing extents.
Tensor concat(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, std::vector<int> shape);
// Gather flat indices into a rank-1 tensor; backward scatter-adds.
Tensor take(const Tensor& a, std::vector<int> indices);

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor add_rowvec(const Tensor& m, const Tensor& v);      // [n,k] + [k]
Tensor mul_rowvec(const Tensor& m, const Tensor& v);      // [n,k] * [k] per row

// ---- conv / pooling --------------------------------------------------------

// x: [C,H,W], w: [O,C,kh,kw], bias: [O] or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor max_pool2d(const Tensor& x, int k, int stride);
Tensor avg_pool2d(const Tensor& x, int k, int stride);
Tensor global_avg_pool(const Tensor& x);                  // [C,H,W] -> [C]

// Multiply every channel of x [C,H,W] by map [H,W]. The map must be detached:
// it is a calibration weight, not a trainable path.
Tensor scale_by_map(const Tensor& x, const Tensor& map);

// ---- fused losses ----------------------------------------------------------

// Mean cross-entropy over rows of logits [n,c] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Sum over elements of smooth-L1(pred - target).
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

// ---- adversarial plumbing ---------------------------------------------------

// Identity forward; backward multiplies the upstream gradient by -lambda.
Tensor gradient_reversal(const Tensor& x, double lambda);

// ---- autodiff ---------------------------------------------------------------

// Populates grad on every requires_grad tensor reachable from loss.
// loss must be scalar (numel == 1).
void backward(const Tensor& loss);

// Output extent for conv/pool: floor((in + 2*pad - k)/stride) + 1.
int conv_out_extent(int in, int k, int stride, int pad);

}  // namespace htcn
