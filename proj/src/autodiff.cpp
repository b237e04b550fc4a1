#include "feddgm/autodiff.hpp"

#include <stdexcept>

namespace feddgm::ad {

const char* op_name(Op op) {
    switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::AddN: return "add_n";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Affine: return "affine";
    case Op::MulScalar: return "mul_scalar";
    case Op::MatMul: return "matmul";
    case Op::BiasAdd: return "bias_add";
    case Op::SumLeading: return "sum_leading";
    case Op::BroadcastLeading: return "broadcast_leading";
    case Op::SumAll: return "sum_all";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::SumSquares: return "sum_squares";
    case Op::RowSum: return "row_sum";
    case Op::RowBroadcast: return "row_broadcast";
    case Op::Relu: return "relu";
    case Op::ReluMask: return "relu_mask";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dInputGrad: return "conv2d_input_grad";
    case Op::Conv2dFilterGrad: return "conv2d_filter_grad";
    case Op::MeanPool2: return "mean_pool2";
    case Op::Unpool2: return "unpool2";
    case Op::Reshape: return "reshape";
    case Op::Slice: return "slice";
    case Op::Embed: return "embed";
    }
    return "?";
}

const Shape& Var::shape() const {
    if (!graph) throw std::logic_error("shape() on an empty Var");
    return graph->node(id).shape;
}

Var Graph::input(Shape shape, std::string label, LeafKind kind) {
    Node n;
    n.op = Op::Input;
    n.shape = std::move(shape);
    n.leaf = kind;
    n.label = std::move(label);
    return emit(std::move(n));
}

Var Graph::constant(Tensor<double> value, std::string label) {
    Node n;
    n.op = Op::Constant;
    n.shape = value.shape;
    n.constant = static_cast<std::uint32_t>(constants_.size());
    n.label = std::move(label);
    constants_.push_back(std::move(value));
    return emit(std::move(n));
}

Var Graph::zeros(Shape shape) { return constant(Tensor<double>(std::move(shape), 0.0)); }
Var Graph::ones(Shape shape) { return constant(Tensor<double>(std::move(shape), 1.0)); }

Var Graph::emit(Node node) {
    for (auto in : node.inputs) {
        if (in >= nodes_.size()) throw std::logic_error("node input refers to a later node");
    }
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

namespace {

Graph& same_graph(Var a, Var b) {
    if (!a.valid() || a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
    return *a.graph;
}

void require(bool ok, const char* op, const std::string& detail) {
    if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

Var unary(Op op, Var x, Shape out) {
    if (!x.valid()) throw std::invalid_argument("empty Var");
    Node n;
    n.op = op;
    n.inputs = {x.id};
    n.shape = std::move(out);
    return x.graph->emit(std::move(n));
}

Var binary(Op op, Var a, Var b, Shape out) {
    Graph& g = same_graph(a, b);
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.shape = std::move(out);
    return g.emit(std::move(n));
}

Var elementwise(Op op, Var a, Var b) {
    require(a.shape() == b.shape(), op_name(op),
            "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    return binary(op, a, b, a.shape());
}

} // namespace

Var add(Var a, Var b) { return elementwise(Op::Add, a, b); }
Var sub(Var a, Var b) { return elementwise(Op::Sub, a, b); }
Var mul(Var a, Var b) { return elementwise(Op::Mul, a, b); }
Var div(Var a, Var b) { return elementwise(Op::Div, a, b); }
Var neg(Var x) { return unary(Op::Neg, x, x.shape()); }

Var add_n(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("add_n of nothing");
    if (xs.size() == 1) return xs[0];
    Node n;
    n.op = Op::AddN;
    n.shape = xs[0].shape();
    for (Var x : xs) {
        same_graph(xs[0], x);
        require(x.shape() == n.shape, "add_n", "shape mismatch");
        n.inputs.push_back(x.id);
    }
    return xs[0].graph->emit(std::move(n));
}

Var affine(Var x, double alpha, double beta) {
    Node n;
    n.op = Op::Affine;
    n.inputs = {x.id};
    n.shape = x.shape();
    n.alpha = alpha;
    n.beta = beta;
    return x.graph->emit(std::move(n));
}

Var mul_scalar(Var x, Var s) {
    require(numel(s.shape()) == 1, "mul_scalar", "scale must have one element");
    return binary(Op::MulScalar, x, s, x.shape());
}

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.size() == 2 && sb.size() == 2, "matmul", "operands must be rank 2");
    std::size_t m = trans_a ? sa[1] : sa[0];
    std::size_t k = trans_a ? sa[0] : sa[1];
    std::size_t k2 = trans_b ? sb[1] : sb[0];
    std::size_t p = trans_b ? sb[0] : sb[1];
    require(k == k2, "matmul", "inner extent mismatch " + to_string(sa) + " x " + to_string(sb));
    Graph& g = same_graph(a, b);
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a.id, b.id};
    n.shape = {m, p};
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    return g.emit(std::move(n));
}

Var bias_add(Var x, Var b) {
    require(!x.shape().empty() && b.shape() == Shape{x.shape().back()}, "bias_add",
            "bias " + to_string(b.shape()) + " does not match " + to_string(x.shape()));
    return binary(Op::BiasAdd, x, b, x.shape());
}

Var sum_leading(Var x) {
    require(!x.shape().empty(), "sum_leading", "rank 0 input");
    return unary(Op::SumLeading, x, Shape{x.shape().back()});
}

Var broadcast_leading(Var x, Shape shape) {
    require(x.shape().size() == 1 && !shape.empty() && shape.back() == x.shape()[0], "broadcast_leading",
            "cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
    return unary(Op::BroadcastLeading, x, std::move(shape));
}

Var sum_all(Var x) { return unary(Op::SumAll, x, Shape{}); }

Var broadcast_scalar(Var x, Shape shape) {
    require(numel(x.shape()) == 1, "broadcast_scalar", "input must have one element");
    return unary(Op::BroadcastScalar, x, std::move(shape));
}

Var sum_squares(Var x) { return unary(Op::SumSquares, x, Shape{}); }

Var row_sum(Var x) {
    require(x.shape().size() == 2, "row_sum", "input must be rank 2");
    return unary(Op::RowSum, x, Shape{x.shape()[0]});
}

Var row_broadcast(Var x, std::size_t cols) {
    require(x.shape().size() == 1, "row_broadcast", "input must be rank 1");
    return unary(Op::RowBroadcast, x, Shape{x.shape()[0], cols});
}

Var relu(Var x) { return unary(Op::Relu, x, x.shape()); }
Var relu_mask(Var x) { return unary(Op::ReluMask, x, x.shape()); }
Var tanh(Var x) { return unary(Op::Tanh, x, x.shape()); }
Var sigmoid(Var x) { return unary(Op::Sigmoid, x, x.shape()); }
Var exp(Var x) { return unary(Op::Exp, x, x.shape()); }

Var softmax(Var x) {
    require(x.shape().size() == 2, "softmax", "input must be rank 2");
    return unary(Op::Softmax, x, x.shape());
}

Var log_softmax(Var x) {
    require(x.shape().size() == 2, "log_softmax", "input must be rank 2");
    return unary(Op::LogSoftmax, x, x.shape());
}

Var conv2d(Var x, Var w) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    require(sx.size() == 4 && sw.size() == 4, "conv2d", "expects NHWC input and [kh,kw,cin,cout] filter");
    require(sw[0] % 2 == 1 && sw[1] % 2 == 1, "conv2d", "kernel extents must be odd");
    require(sx[3] == sw[2], "conv2d", "channel mismatch " + to_string(sx) + " vs " + to_string(sw));
    return binary(Op::Conv2d, x, w, Shape{sx[0], sx[1], sx[2], sw[3]});
}

Var conv2d_input_grad(Var g, Var w) {
    const Shape& sg = g.shape();
    const Shape& sw = w.shape();
    require(sg.size() == 4 && sw.size() == 4 && sg[3] == sw[3], "conv2d_input_grad", "shape mismatch");
    return binary(Op::Conv2dInputGrad, g, w, Shape{sg[0], sg[1], sg[2], sw[2]});
}

Var conv2d_filter_grad(Var x, Var g, std::size_t kh, std::size_t kw) {
    const Shape& sx = x.shape();
    const Shape& sg = g.shape();
    require(sx.size() == 4 && sg.size() == 4 && sx[0] == sg[0] && sx[1] == sg[1] && sx[2] == sg[2],
            "conv2d_filter_grad", "shape mismatch");
    return binary(Op::Conv2dFilterGrad, x, g, Shape{kh, kw, sx[3], sg[3]});
}

Var mean_pool2(Var x) {
    const Shape& s = x.shape();
    require(s.size() == 4 && s[1] % 2 == 0 && s[2] % 2 == 0, "mean_pool2", "needs NHWC with even H and W");
    return unary(Op::MeanPool2, x, Shape{s[0], s[1] / 2, s[2] / 2, s[3]});
}

Var unpool2(Var x) {
    const Shape& s = x.shape();
    require(s.size() == 4, "unpool2", "needs NHWC input");
    return unary(Op::Unpool2, x, Shape{s[0], s[1] * 2, s[2] * 2, s[3]});
}

Var reshape(Var x, Shape shape) {
    require(numel(shape) == x.size(), "reshape",
            "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    if (shape == x.shape()) return x;
    return unary(Op::Reshape, x, std::move(shape));
}

Var slice(Var x, std::size_t offset, Shape shape) {
    require(offset + numel(shape) <= x.size(), "slice", "range exceeds input");
    Node n;
    n.op = Op::Slice;
    n.inputs = {x.id};
    n.shape = std::move(shape);
    n.offset = offset;
    return x.graph->emit(std::move(n));
}

Var embed(Var x, std::size_t offset, std::size_t extent) {
    require(offset + x.size() <= extent, "embed", "range exceeds extent");
    Node n;
    n.op = Op::Embed;
    n.inputs = {x.id};
    n.shape = {extent};
    n.offset = offset;
    n.extent = extent;
    return x.graph->emit(std::move(n));
}

Var softmax_cross_entropy(Var logits, Var onehot) {
    require(logits.shape().size() == 2 && logits.shape() == onehot.shape(), "softmax_cross_entropy",
            "logits and one-hot labels must share a rank-2 shape");
    double rows = static_cast<double>(logits.shape()[0]);
    return scale(sum_all(mul(onehot, log_softmax(logits))), -1.0 / rows);
}

Var mean_squared_error(Var a, Var b) {
    return scale(sum_squares(sub(a, b)), 1.0 / static_cast<double>(a.size()));
}

Var sgd_step_differentiable(Var params, Var loss, double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be non-negative");
    Var g = params.graph->grad(loss, params);
    return sub(params, scale(g, lr));
}

std::vector<Var> Graph::grad(Var root, std::span<const Var> wrt) {
    if (!owns(root)) throw std::invalid_argument("grad: root is not a node of this graph");
    if (numel(root.shape()) != 1) throw ShapeError("grad: root must be scalar, got " + to_string(root.shape()));
    for (Var w : wrt) {
        if (!owns(w)) throw std::invalid_argument("grad: wrt node is not in this graph");
    }

    const std::size_t n = root.id + 1;
    std::vector<char> depends(n, 0);
    for (Var w : wrt) {
        if (w.id < n) depends[w.id] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (depends[i] || nodes_[i].op == Op::ReluMask) continue;
        for (auto in : nodes_[i].inputs) {
            if (depends[in]) {
                depends[i] = 1;
                break;
            }
        }
    }
    std::vector<char> relevant(n, 0);
    relevant[root.id] = depends[root.id];
    for (std::size_t i = n; i-- > 0;) {
        if (!relevant[i]) continue;
        for (auto in : nodes_[i].inputs) {
            if (depends[in]) relevant[in] = 1;
        }
    }

    std::vector<std::vector<Var>> adjoint(n);
    if (relevant[root.id]) adjoint[root.id].push_back(ones(root.shape()));
    for (std::size_t i = n; i-- > 0;) {
        if (!relevant[i] || adjoint[i].empty()) continue;
        Var g = adjoint[i].size() == 1 ? adjoint[i][0] : add_n(adjoint[i]);
        adjoint[i].assign(1, g);
        const Node node = nodes_[i]; // copy: emitting below may reallocate nodes_
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            auto in = node.inputs[k];
            if (!relevant[in]) continue;
            adjoint[in].push_back(vjp(node, static_cast<std::uint32_t>(i), k, g));
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt) {
        if (w.id < n && relevant[w.id] && !adjoint[w.id].empty()) {
            out.push_back(adjoint[w.id][0]);
        } else {
            out.push_back(zeros(w.shape()));
        }
    }
    return out;
}

Var Graph::vjp(const Node& node, std::uint32_t self_id, std::size_t k, Var g) {
    Var self{this, self_id};
    auto in = [&](std::size_t j) { return Var{this, node.inputs[j]}; };
    switch (node.op) {
    case Op::Add:
    case Op::AddN:
        return g;
    case Op::Sub:
        return k == 0 ? g : neg(g);
    case Op::Mul:
        return mul(g, in(1 - k));
    case Op::Div:
        return k == 0 ? div(g, in(1)) : neg(div(mul(g, self), in(1)));
    case Op::Neg:
        return neg(g);
    case Op::Affine:
        return affine(g, node.alpha, 0.0);
    case Op::MulScalar:
        if (k == 0) return mul_scalar(g, in(1));
        return reshape(sum_all(mul(g, in(0))), in(1).shape());
    case Op::MatMul: {
        const bool ta = node.trans_a;
        const bool tb = node.trans_b;
        if (k == 0) return ta ? matmul(in(1), g, tb, true) : matmul(g, in(1), false, !tb);
        return tb ? matmul(g, in(0), true, ta) : matmul(in(0), g, !ta, false);
    }
    case Op::BiasAdd:
        return k == 0 ? g : sum_leading(g);
    case Op::SumLeading:
        return broadcast_leading(g, in(0).shape());
    case Op::BroadcastLeading:
        return sum_leading(g);
    case Op::SumAll:
        return broadcast_scalar(g, in(0).shape());
    case Op::BroadcastScalar:
        return reshape(sum_all(g), in(0).shape());
    case Op::SumSquares:
        return mul_scalar(scale(in(0), 2.0), g);
    case Op::RowSum:
        return row_broadcast(g, in(0).shape()[1]);
    case Op::RowBroadcast:
        return row_sum(g);
    case Op::Relu:
        return mul(g, relu_mask(in(0)));
    case Op::Tanh:
        return mul(g, affine(mul(self, self), -1.0, 1.0));
    case Op::Sigmoid:
        return mul(g, mul(self, affine(self, -1.0, 1.0)));
    case Op::Exp:
        return mul(g, self);
    case Op::Softmax: {
        Var gs = mul(g, self);
        return sub(gs, mul(self, row_broadcast(row_sum(gs), node.shape[1])));
    }
    case Op::LogSoftmax:
        return sub(g, mul(exp(self), row_broadcast(row_sum(g), node.shape[1])));
    case Op::Conv2d: {
        const Shape& sw = in(1).shape();
        return k == 0 ? conv2d_input_grad(g, in(1)) : conv2d_filter_grad(in(0), g, sw[0], sw[1]);
    }
    case Op::Conv2dInputGrad: {
        const Shape& sw = in(1).shape();
        return k == 0 ? conv2d(g, in(1)) : conv2d_filter_grad(g, in(0), sw[0], sw[1]);
    }
    case Op::Conv2dFilterGrad:
        return k == 0 ? conv2d_input_grad(in(1), g) : conv2d(in(0), g);
    case Op::MeanPool2:
        return scale(unpool2(g), 0.25);
    case Op::Unpool2:
        return scale(mean_pool2(g), 4.0);
    case Op::Reshape:
        return reshape(g, in(0).shape());
    case Op::Slice:
        return reshape(embed(reshape(g, Shape{g.size()}), node.offset, in(0).size()), in(0).shape());
    case Op::Embed:
        return slice(g, node.offset, in(0).shape());
    case Op::Input:
    case Op::Constant:
    case Op::ReluMask:
        break;
    }
    throw std::logic_error(std::string("no derivative rule for ") + op_name(node.op));
}

} // namespace feddgm::ad
