#include "feddgm/executor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace feddgm::ad {

namespace {

template <typename T>
using In = const Tensor<T>&;

template <typename T, typename F>
Tensor<T> map1(const Shape& shape, In<T> x, F f) {
    Tensor<T> out(shape);
    const T* px = x.values.data();
    T* po = out.values.data();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = f(px[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> map2(const Shape& shape, In<T> a, In<T> b, F f) {
    Tensor<T> out(shape);
    const T* pa = a.values.data();
    const T* pb = b.values.data();
    T* po = out.values.data();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
}

// C[m,p] = op(A) op(B)
template <typename T>
Tensor<T> matmul_kernel(const Node& node, In<T> a, In<T> b) {
    const std::size_t m = node.shape[0];
    const std::size_t p = node.shape[1];
    const std::size_t k = node.trans_a ? a.shape[0] : a.shape[1];
    Tensor<T> c(node.shape);
    const T* A = a.values.data();
    const T* B = b.values.data();
    T* C = c.values.data();
    if (!node.trans_a && !node.trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = C + i * p;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = A[i * k + kk];
                const T* brow = B + kk * p;
                for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (node.trans_a && !node.trans_b) {
        // A is [k, m]
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = B + kk * p;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = A[kk * m + i];
                T* crow = C + i * p;
                for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!node.trans_a && node.trans_b) {
        // B is [p, k]
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = A + i * k;
            for (std::size_t j = 0; j < p; ++j) {
                const T* brow = B + j * k;
                T acc = 0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                C[i * p + j] = acc;
            }
        }
    } else {
        // A is [k, m], B is [p, k]
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < p; ++j) {
                T acc = 0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += A[kk * m + i] * B[j * k + kk];
                C[i * p + j] = acc;
            }
        }
    }
    return c;
}

struct ConvDims {
    std::size_t n, h, w, ci, co, kh, kw;
};

// y[n,y,x,o] = sum_{ky,kx,i} x[n, y+ky-ph, x+kx-pw, i] * w[ky,kx,i,o]
template <typename T>
Tensor<T> conv_forward(const ConvDims& d, In<T> x, In<T> w) {
    Tensor<T> y(Shape{d.n, d.h, d.w, d.co});
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(d.kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(d.kw / 2);
    const T* X = x.values.data();
    const T* W = w.values.data();
    T* Y = y.values.data();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t r = 0; r < d.h; ++r) {
            for (std::size_t c = 0; c < d.w; ++c) {
                T* out = Y + ((n * d.h + r) * d.w + c) * d.co;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r + ky) - ph;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(c + kx) - pw;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                        const T* in = X + ((n * d.h + iy) * d.w + ix) * d.ci;
                        const T* wk = W + (ky * d.kw + kx) * d.ci * d.co;
                        for (std::size_t i = 0; i < d.ci; ++i) {
                            const T v = in[i];
                            const T* wrow = wk + i * d.co;
                            for (std::size_t o = 0; o < d.co; ++o) out[o] += v * wrow[o];
                        }
                    }
                }
            }
        }
    }
    return y;
}

// dx[n,iy,ix,i] = sum g[n,y,x,o] w[ky,kx,i,o]
template <typename T>
Tensor<T> conv_input_grad(const ConvDims& d, In<T> g, In<T> w) {
    Tensor<T> dx(Shape{d.n, d.h, d.w, d.ci});
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(d.kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(d.kw / 2);
    const T* G = g.values.data();
    const T* W = w.values.data();
    T* DX = dx.values.data();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t r = 0; r < d.h; ++r) {
            for (std::size_t c = 0; c < d.w; ++c) {
                const T* go = G + ((n * d.h + r) * d.w + c) * d.co;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r + ky) - ph;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(c + kx) - pw;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                        T* out = DX + ((n * d.h + iy) * d.w + ix) * d.ci;
                        const T* wk = W + (ky * d.kw + kx) * d.ci * d.co;
                        for (std::size_t i = 0; i < d.ci; ++i) {
                            const T* wrow = wk + i * d.co;
                            T acc = 0;
                            for (std::size_t o = 0; o < d.co; ++o) acc += go[o] * wrow[o];
                            out[i] += acc;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// dw[ky,kx,i,o] = sum x[n,y+ky-ph,x+kx-pw,i] g[n,y,x,o]
template <typename T>
Tensor<T> conv_filter_grad(const ConvDims& d, In<T> x, In<T> g) {
    Tensor<T> dw(Shape{d.kh, d.kw, d.ci, d.co});
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(d.kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(d.kw / 2);
    const T* X = x.values.data();
    const T* G = g.values.data();
    T* DW = dw.values.data();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t r = 0; r < d.h; ++r) {
            for (std::size_t c = 0; c < d.w; ++c) {
                const T* go = G + ((n * d.h + r) * d.w + c) * d.co;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r + ky) - ph;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(c + kx) - pw;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                        const T* in = X + ((n * d.h + iy) * d.w + ix) * d.ci;
                        T* wk = DW + (ky * d.kw + kx) * d.ci * d.co;
                        for (std::size_t i = 0; i < d.ci; ++i) {
                            const T v = in[i];
                            T* wrow = wk + i * d.co;
                            for (std::size_t o = 0; o < d.co; ++o) wrow[o] += v * go[o];
                        }
                    }
                }
            }
        }
    }
    return dw;
}

template <typename T>
Tensor<T> mean_pool2_kernel(const Shape& out_shape, In<T> x) {
    Tensor<T> y(out_shape);
    const std::size_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
    const std::size_t ho = h / 2, wo = w / 2;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t q = 0; q < wo; ++q) {
                T* out = &y.values[((b * ho + r) * wo + q) * c];
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const T* in = &x.values[((b * h + 2 * r + dy) * w + 2 * q + dx) * c];
                        for (std::size_t k = 0; k < c; ++k) out[k] += in[k];
                    }
                for (std::size_t k = 0; k < c; ++k) out[k] *= T(0.25);
            }
    return y;
}

template <typename T>
Tensor<T> unpool2_kernel(const Shape& out_shape, In<T> x) {
    Tensor<T> y(out_shape);
    const std::size_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
    const std::size_t ho = 2 * h, wo = 2 * w;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t q = 0; q < wo; ++q) {
                const T* in = &x.values[((b * h + r / 2) * w + q / 2) * c];
                std::copy(in, in + c, &y.values[((b * ho + r) * wo + q) * c]);
            }
    return y;
}

template <typename T>
T stable_sigmoid(T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> compute(const Node& node, const std::vector<const Tensor<T>*>& args) {
    auto arg = [&](std::size_t i) -> In<T> { return *args[i]; };
    const Shape& shape = node.shape;
    switch (node.op) {
    case Op::Add: return map2<T>(shape, arg(0), arg(1), [](T a, T b) { return a + b; });
    case Op::Sub: return map2<T>(shape, arg(0), arg(1), [](T a, T b) { return a - b; });
    case Op::Mul: return map2<T>(shape, arg(0), arg(1), [](T a, T b) { return a * b; });
    case Op::Div: return map2<T>(shape, arg(0), arg(1), [](T a, T b) { return a / b; });
    case Op::AddN: {
        Tensor<T> out = arg(0);
        for (std::size_t k = 1; k < args.size(); ++k) {
            const T* p = args[k]->values.data();
            for (std::size_t i = 0, n = out.size(); i < n; ++i) out.values[i] += p[i];
        }
        return out;
    }
    case Op::Neg: return map1<T>(shape, arg(0), [](T a) { return -a; });
    case Op::Affine: {
        const T alpha = static_cast<T>(node.alpha);
        const T beta = static_cast<T>(node.beta);
        return map1<T>(shape, arg(0), [=](T a) { return alpha * a + beta; });
    }
    case Op::MulScalar: {
        const T s = arg(1).values[0];
        return map1<T>(shape, arg(0), [=](T a) { return a * s; });
    }
    case Op::MatMul: return matmul_kernel<T>(node, arg(0), arg(1));
    case Op::BiasAdd: {
        Tensor<T> out = arg(0);
        const std::size_t c = shape.back();
        const T* b = arg(1).values.data();
        for (std::size_t i = 0, n = out.size(); i < n; i += c)
            for (std::size_t j = 0; j < c; ++j) out.values[i + j] += b[j];
        return out;
    }
    case Op::SumLeading: {
        Tensor<T> out(shape);
        const std::size_t c = shape[0];
        In<T> x = arg(0);
        for (std::size_t i = 0, n = x.size(); i < n; i += c)
            for (std::size_t j = 0; j < c; ++j) out.values[j] += x.values[i + j];
        return out;
    }
    case Op::BroadcastLeading: {
        Tensor<T> out(shape);
        const std::size_t c = shape.back();
        In<T> x = arg(0);
        for (std::size_t i = 0, n = out.size(); i < n; i += c)
            std::copy(x.values.begin(), x.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i));
        return out;
    }
    case Op::SumAll: {
        T acc = 0;
        for (T v : arg(0).values) acc += v;
        return Tensor<T>::scalar(acc);
    }
    case Op::BroadcastScalar: return Tensor<T>(shape, arg(0).values[0]);
    case Op::SumSquares: {
        T acc = 0;
        for (T v : arg(0).values) acc += v * v;
        return Tensor<T>::scalar(acc);
    }
    case Op::RowSum: {
        In<T> x = arg(0);
        const std::size_t rows = x.shape[0], cols = x.shape[1];
        Tensor<T> out(shape);
        for (std::size_t r = 0; r < rows; ++r) {
            T acc = 0;
            for (std::size_t c = 0; c < cols; ++c) acc += x.values[r * cols + c];
            out.values[r] = acc;
        }
        return out;
    }
    case Op::RowBroadcast: {
        In<T> x = arg(0);
        const std::size_t rows = shape[0], cols = shape[1];
        Tensor<T> out(shape);
        for (std::size_t r = 0; r < rows; ++r)
            std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, x.values[r]);
        return out;
    }
    case Op::Relu: return map1<T>(shape, arg(0), [](T a) { return a > 0 ? a : T(0); });
    case Op::ReluMask: return map1<T>(shape, arg(0), [](T a) { return a > 0 ? T(1) : T(0); });
    case Op::Tanh: return map1<T>(shape, arg(0), [](T a) { return std::tanh(a); });
    case Op::Sigmoid: return map1<T>(shape, arg(0), [](T a) { return stable_sigmoid(a); });
    case Op::Exp: return map1<T>(shape, arg(0), [](T a) { return std::exp(a); });
    case Op::Softmax:
    case Op::LogSoftmax: {
        In<T> x = arg(0);
        const std::size_t rows = shape[0], cols = shape[1];
        Tensor<T> out(shape);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = &x.values[r * cols];
            T* o = &out.values[r * cols];
            const T mx = *std::max_element(in, in + cols);
            T sum = 0;
            for (std::size_t c = 0; c < cols; ++c) sum += std::exp(in[c] - mx);
            if (node.op == Op::Softmax) {
                for (std::size_t c = 0; c < cols; ++c) o[c] = std::exp(in[c] - mx) / sum;
            } else {
                const T lse = mx + std::log(sum);
                for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
            }
        }
        return out;
    }
    case Op::Conv2d: {
        const Shape& sx = arg(0).shape;
        const Shape& sw = arg(1).shape;
        return conv_forward<T>({sx[0], sx[1], sx[2], sx[3], sw[3], sw[0], sw[1]}, arg(0), arg(1));
    }
    case Op::Conv2dInputGrad: {
        const Shape& sg = arg(0).shape;
        const Shape& sw = arg(1).shape;
        return conv_input_grad<T>({sg[0], sg[1], sg[2], sw[2], sw[3], sw[0], sw[1]}, arg(0), arg(1));
    }
    case Op::Conv2dFilterGrad: {
        const Shape& sx = arg(0).shape;
        const Shape& sg = arg(1).shape;
        return conv_filter_grad<T>({sx[0], sx[1], sx[2], sx[3], sg[3], shape[0], shape[1]}, arg(0), arg(1));
    }
    case Op::MeanPool2: return mean_pool2_kernel<T>(shape, arg(0));
    case Op::Unpool2: return unpool2_kernel<T>(shape, arg(0));
    case Op::Reshape: return Tensor<T>(shape, arg(0).values);
    case Op::Slice: {
        auto first = arg(0).values.begin() + static_cast<std::ptrdiff_t>(node.offset);
        return Tensor<T>(shape, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(numel(shape))));
    }
    case Op::Embed: {
        Tensor<T> out(shape);
        std::copy(arg(0).values.begin(), arg(0).values.end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(node.offset));
        return out;
    }
    case Op::Input:
    case Op::Constant:
        break;
    }
    throw std::logic_error(std::string("no kernel for ") + op_name(node.op));
}

std::string describe(const Graph& g, std::uint32_t id) {
    const Node& n = g.node(id);
    std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s + ")";
}

} // namespace

template <typename T>
Executor<T>::Executor(const Graph& graph, std::vector<Var> outputs, ExecOptions options)
    : graph_(&graph), outputs_(std::move(outputs)), options_(options) {
    const std::size_t n = graph.size();
    std::vector<char> needed(n, 0);
    keep_.assign(n, 0);
    for (Var v : outputs_) {
        if (!graph.owns(v)) throw std::invalid_argument("executor output is not a node of this graph");
        needed[v.id] = 1;
        keep_[v.id] = 1;
    }
    for (std::size_t i = n; i-- > 0;) {
        if (!needed[i]) continue;
        for (auto in : graph.node(static_cast<std::uint32_t>(i)).inputs) needed[in] = 1;
    }
    last_use_.assign(n, 0);
    for (std::uint32_t i = 0; i < n; ++i) {
        if (!needed[i]) continue;
        const Node& node = graph.node(i);
        const std::uint32_t pos = static_cast<std::uint32_t>(order_.size());
        order_.push_back(i);
        for (auto in : node.inputs) last_use_[in] = pos;
        if (node.op == Op::Constant) {
            constants_.emplace(i, graph.constant_value(node.constant).template cast<T>());
        }
    }
}

template <typename T>
std::vector<Tensor<T>> Executor<T>::run(const Bindings<T>& bindings) const {
    const Graph& g = *graph_;
    std::vector<Tensor<T>> owned(g.size());
    std::vector<const Tensor<T>*> value(g.size(), nullptr);
    std::vector<const Tensor<T>*> args;

    for (std::uint32_t pos = 0; pos < order_.size(); ++pos) {
        const std::uint32_t id = order_[pos];
        const Node& node = g.node(id);
        if (node.op == Op::Input) {
            const Tensor<T>* bound = bindings.find(id);
            if (!bound) throw std::invalid_argument("unbound leaf " + describe(g, id));
            if (bound->shape != node.shape) {
                throw ShapeError("binding for " + describe(g, id) + " has shape " + to_string(bound->shape) +
                                 ", expected " + to_string(node.shape));
            }
            if (options_.check_finite && !bound->all_finite()) {
                throw NonFiniteError(id, "non-finite value bound to " + describe(g, id));
            }
            value[id] = bound;
        } else if (node.op == Op::Constant) {
            value[id] = &constants_.at(id);
        } else {
            args.clear();
            for (auto in : node.inputs) args.push_back(value[in]);
            owned[id] = compute<T>(node, args);
            if (options_.check_finite && !owned[id].all_finite()) {
                throw NonFiniteError(id, "non-finite output at " + describe(g, id));
            }
            value[id] = &owned[id];
            for (auto in : node.inputs) {
                if (last_use_[in] == pos && !keep_[in] && value[in] == &owned[in]) {
                    owned[in] = Tensor<T>{};
                    value[in] = nullptr;
                }
            }
        }
    }

    std::vector<Tensor<T>> out;
    out.reserve(outputs_.size());
    for (Var v : outputs_) out.push_back(*value[v.id]);
    return out;
}

template class Executor<float>;
template class Executor<double>;

} // namespace feddgm::ad
