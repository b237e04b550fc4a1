#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "feddgm/tensor.hpp"

/// Symbolic reverse-mode automatic differentiation.
///
/// A Graph is built once and evaluated many times (see executor.hpp). `grad`
/// appends gradient nodes to the same graph, built from the same primitives,
/// so gradients can be differentiated again. This is what lets the distillation
/// loss be differentiated through unrolled SGD steps that themselves contain
/// gradients.
namespace feddgm::ad {

enum class Op : std::uint8_t {
    Input,
    Constant,
    Add,
    AddN,
    Sub,
    Mul,
    Div,
    Neg,
    Affine,          // alpha * x + beta
    MulScalar,       // x * s, s of shape []
    MatMul,          // op(a) @ op(b), transposes in flags
    BiasAdd,         // x[..., C] + b[C]
    SumLeading,      // [..., C] -> [C]
    BroadcastLeading,
    SumAll,          // any -> []
    BroadcastScalar,
    SumSquares,      // any -> []
    RowSum,          // [N, C] -> [N]
    RowBroadcast,    // [N] -> [N, C]
    Relu,
    ReluMask,        // step function; zero derivative
    Tanh,
    Sigmoid,
    Exp,
    Softmax,         // along last axis of [N, C]
    LogSoftmax,
    Conv2d,          // NHWC input, [kh, kw, cin, cout] filter, stride 1, same padding
    Conv2dInputGrad,
    Conv2dFilterGrad,
    MeanPool2,       // 2x2 mean pool, NHWC
    Unpool2,         // 2x nearest upsample, NHWC
    Reshape,
    Slice,           // contiguous flat slice, reshaped
    Embed,           // adjoint of Slice: place into zeros of length `extent`
};

const char* op_name(Op op);

enum class LeafKind : std::uint8_t { Parameter, Data };

struct Node {
    Op op = Op::Input;
    std::vector<std::uint32_t> inputs;
    Shape shape;
    double alpha = 0.0;
    double beta = 0.0;
    std::size_t offset = 0;
    std::size_t extent = 0;
    bool trans_a = false;
    bool trans_b = false;
    LeafKind leaf = LeafKind::Data;
    std::uint32_t constant = 0;
    std::string label;
};

class Graph;

/// Handle to a node. Cheap to copy; only valid while its graph lives.
struct Var {
    Graph* graph = nullptr;
    std::uint32_t id = 0;

    bool valid() const noexcept { return graph != nullptr; }
    const Shape& shape() const;
    std::size_t size() const { return numel(shape()); }
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(Shape shape, std::string label = {}, LeafKind kind = LeafKind::Data);
    Var parameter(Shape shape, std::string label = {}) {
        return input(std::move(shape), std::move(label), LeafKind::Parameter);
    }
    Var constant(Tensor<double> value, std::string label = {});
    Var scalar(double v) { return constant(Tensor<double>::scalar(v)); }
    Var zeros(Shape shape);
    Var ones(Shape shape);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(std::uint32_t id) const { return nodes_.at(id); }
    const Tensor<double>& constant_value(std::uint32_t index) const { return constants_.at(index); }
    bool owns(Var v) const noexcept { return v.graph == this && v.id < nodes_.size(); }

    /// Appends gradient nodes d(root)/d(w) for every w in `wrt`. The root must be
    /// scalar. Nodes that `root` does not depend on get an all-zero gradient.
    std::vector<Var> grad(Var root, std::span<const Var> wrt);
    Var grad(Var root, Var wrt) { return grad(root, std::span<const Var>(&wrt, 1)).front(); }

    Var emit(Node node);

private:
    Var vjp(const Node& node, std::uint32_t self, std::size_t arg, Var g);

    std::vector<Node> nodes_;
    std::vector<Tensor<double>> constants_;
};

// Primitive builders. All inputs must belong to the same graph.
Var add(Var a, Var b);
Var add_n(std::span<const Var> xs);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var x);
Var affine(Var x, double alpha, double beta);
inline Var scale(Var x, double alpha) { return affine(x, alpha, 0.0); }
Var mul_scalar(Var x, Var s);
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var bias_add(Var x, Var b);
Var sum_leading(Var x);
Var broadcast_leading(Var x, Shape shape);
Var sum_all(Var x);
Var broadcast_scalar(Var x, Shape shape);
Var sum_squares(Var x);
Var row_sum(Var x);
Var row_broadcast(Var x, std::size_t cols);
Var relu(Var x);
Var relu_mask(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var softmax(Var x);
Var log_softmax(Var x);
Var conv2d(Var x, Var w);
Var conv2d_input_grad(Var g, Var w);
Var conv2d_filter_grad(Var x, Var g, std::size_t kh, std::size_t kw);
Var mean_pool2(Var x);
Var unpool2(Var x);
Var reshape(Var x, Shape shape);
Var slice(Var x, std::size_t offset, Shape shape);
Var embed(Var x, std::size_t offset, std::size_t extent);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

// Composites.

/// Mean softmax cross-entropy over rows; `onehot` has the logits' shape.
Var softmax_cross_entropy(Var logits, Var onehot);
/// Mean of squared differences over all elements.
Var mean_squared_error(Var a, Var b);

/// params - lr * d(loss)/d(params), as a node that stays differentiable with
/// respect to everything upstream of `loss` and `params`.
Var sgd_step_differentiable(Var params, Var loss, double lr);

} // namespace feddgm::ad
