#include <cmath>
#include <functional>
#include <thread>

#include <gtest/gtest.h>

#include "feddgm/autodiff.hpp"
#include "feddgm/executor.hpp"
#include "oracles.hpp"

using namespace feddgm;
using namespace feddgm::ad;

namespace {

Tensor<double> tensor(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

double eval_scalar(const Graph& g, Var root, const Bindings<double>& b) { return eval(g, root, b).item(); }

struct PrimitiveCase {
    std::string name;
    std::vector<Shape> shapes;
    std::function<Var(std::vector<Var>&)> build;
    double magnitude = 1.0;
    bool avoid_zero = false;
};

// Checks d/dx_i <R, op(x)> against central differences for every input.
void check_primitive(const PrimitiveCase& c, unsigned seed) {
    SCOPED_TRACE(c.name);
    Graph g;
    std::vector<Var> leaves;
    std::vector<std::vector<double>> values;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
        leaves.push_back(g.input(c.shapes[i], "x" + std::to_string(i)));
        const std::size_t n = numel(c.shapes[i]);
        values.push_back(c.avoid_zero ? oracle::away_from_zero(n, 0.2 * c.magnitude, c.magnitude, seed + i)
                                      : oracle::uniform(n, -c.magnitude, c.magnitude, seed + i));
    }
    Var y = c.build(leaves);
    Var r = g.constant(tensor(y.shape(), oracle::uniform(y.size(), -1.0, 1.0, seed + 101)));
    Var loss = sum_all(mul(y, r));
    auto grads = g.grad(loss, leaves);

    auto bind = [&](const std::vector<std::vector<double>>& vals) {
        Bindings<double> b;
        for (std::size_t i = 0; i < leaves.size(); ++i) b.set(leaves[i], tensor(c.shapes[i], vals[i]));
        return b;
    };
    Executor<double> exec(g, grads);
    auto analytic = exec.run(bind(values));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto f = [&](const std::vector<double>& xi) {
            auto vals = values;
            vals[i] = xi;
            return eval_scalar(g, loss, bind(vals));
        };
        auto numeric = oracle::central_gradient(f, values[i]);
        EXPECT_LE(oracle::relative_error(analytic[i].values, numeric), 1e-4) << "input " << i;
    }
}

} // namespace

TEST(Eval, ComponentwiseAdd) {
    Graph g;
    Var x = g.input({2}), y = g.input({2});
    Var z = x + y;
    Bindings<double> b;
    b.set(x, tensor({2}, {1, 2})).set(y, tensor({2}, {3, 4}));
    EXPECT_EQ(eval(g, z, b).values, (std::vector<double>{4, 6}));
}

TEST(Eval, IdentityMatmul) {
    Graph g;
    Var x = g.input({3, 4});
    Tensor<double> eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    Var y = matmul(x, g.constant(eye));
    auto xv = oracle::uniform(12, -3, 3, 5);
    Bindings<double> b;
    b.set(x, tensor({3, 4}, xv));
    EXPECT_EQ(eval(g, y, b).values, xv);
}

TEST(Eval, UniformSoftmaxCrossEntropy) {
    Graph g;
    Var logits = g.input({1, 2});
    Var onehot = g.constant(tensor({1, 2}, {1, 0}));
    Var loss = softmax_cross_entropy(logits, onehot);
    Bindings<double> b;
    b.set(logits, tensor({1, 2}, {0, 0}));
    EXPECT_NEAR(eval(g, loss, b).item(), std::log(2.0), 1e-15);
}

TEST(Eval, ShapeMismatchAtBuildAndBind) {
    Graph g;
    Var x = g.input({2}), y = g.input({3});
    EXPECT_THROW(add(x, y), ShapeError);
    Bindings<double> b;
    b.set(x, tensor({3}, {1, 2, 3}));
    EXPECT_THROW(eval(g, neg(x), b), ShapeError);
}

TEST(Eval, UnboundLeafIsAnError) {
    Graph g;
    Var x = g.input({1});
    EXPECT_THROW(eval(g, neg(x), Bindings<double>{}), std::invalid_argument);
}

TEST(Eval, NonFiniteReportsOffendingNode) {
    Graph g;
    Var x = g.input({2});
    Var y = div(g.ones({2}), x);
    Var z = neg(y);
    Bindings<double> b;
    b.set(x, tensor({2}, {1.0, 0.0}));
    try {
        eval(g, z, b);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_EQ(e.node(), y.id);
        EXPECT_NE(std::string(e.what()).find("div"), std::string::npos);
    }
}

TEST(Eval, DeterministicBitIdentical) {
    Graph g;
    Var x = g.input({16, 8}), w = g.input({8, 5});
    Var loss = softmax_cross_entropy(tanh(matmul(x, w)), g.constant(Tensor<double>({16, 5}, 0.2)));
    Var dw = g.grad(loss, w);
    Bindings<float> b;
    auto xv = oracle::uniform(128, -1, 1, 1);
    auto wv = oracle::uniform(40, -1, 1, 2);
    b.set(x, Tensor<float>({16, 8}, std::vector<float>(xv.begin(), xv.end())));
    b.set(w, Tensor<float>({8, 5}, std::vector<float>(wv.begin(), wv.end())));
    Executor<float> exec(g, {loss, dw});
    auto first = exec.run(b);
    auto second = exec.run(b);
    EXPECT_EQ(first, second);
}

TEST(Eval, ConcurrentRunsOnDisjointBindings) {
    Graph g;
    Var x = g.input({4, 3});
    Var y = sum_squares(tanh(x));
    Var dx = g.grad(y, x);
    Executor<double> exec(g, {y, dx});
    std::vector<std::vector<Tensor<double>>> serial(4), parallel(4);
    std::vector<Bindings<double>> bindings(4);
    for (unsigned i = 0; i < 4; ++i) {
        bindings[i].set(x, tensor({4, 3}, oracle::uniform(12, -2, 2, 40 + i)));
        serial[i] = exec.run(bindings[i]);
    }
    std::vector<std::thread> threads;
    for (unsigned i = 0; i < 4; ++i) threads.emplace_back([&, i] { parallel[i] = exec.run(bindings[i]); });
    for (auto& t : threads) t.join();
    EXPECT_EQ(serial, parallel);
}

TEST(Grad, PolynomialFirstAndSecondOrder) {
    Graph g;
    Var x = g.input({});
    Var y = x * x;
    Var dy = g.grad(y, x);
    Var d2y = g.grad(dy, x);
    for (double xv : {-2.5, 0.0, 3.0, 7.0}) {
        Bindings<double> b;
        b.set(x, Tensor<double>::scalar(xv));
        EXPECT_DOUBLE_EQ(eval(g, dy, b).item(), 2 * xv);
        EXPECT_DOUBLE_EQ(eval(g, d2y, b).item(), 2.0);
    }
}

TEST(Grad, RootMustBeScalar) {
    Graph g;
    Var x = g.input({3});
    EXPECT_THROW(g.grad(tanh(x), x), ShapeError);
}

TEST(Grad, WrtFromAnotherGraphRejected) {
    Graph g, other;
    Var x = g.input({});
    Var stranger = other.input({});
    EXPECT_THROW(g.grad(x * x, stranger), std::invalid_argument);
}

TEST(Grad, UnconnectedInputGetsZeros) {
    Graph g;
    Var x = g.input({2}), y = g.input({3});
    Var dy = g.grad(sum_squares(x), y);
    Bindings<double> b;
    b.set(x, tensor({2}, {1, 2})).set(y, tensor({3}, {1, 2, 3}));
    EXPECT_EQ(eval(g, dy, b).values, (std::vector<double>{0, 0, 0}));
}

TEST(Grad, EveryPrimitiveMatchesCentralDifferences) {
    const std::vector<PrimitiveCase> cases = {
        {"add", {{3, 2}, {3, 2}}, [](auto& v) { return add(v[0], v[1]); }},
        {"sub", {{3, 2}, {3, 2}}, [](auto& v) { return sub(v[0], v[1]); }},
        {"mul", {{3, 2}, {3, 2}}, [](auto& v) { return mul(v[0], v[1]); }},
        {"div", {{3, 2}, {3, 2}}, [](auto& v) { return div(v[0], v[1]); }, 1.0, true},
        {"neg", {{4}}, [](auto& v) { return neg(v[0]); }},
        {"affine", {{4}}, [](auto& v) { return affine(v[0], -1.7, 0.3); }},
        {"mul_scalar", {{2, 3}, {}}, [](auto& v) { return mul_scalar(v[0], v[1]); }},
        {"add_n", {{3}, {3}, {3}}, [](auto& v) { return add_n(v); }},
        {"matmul", {{3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }},
        {"matmul_ta", {{4, 3}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1], true, false); }},
        {"matmul_tb", {{3, 4}, {2, 4}}, [](auto& v) { return matmul(v[0], v[1], false, true); }},
        {"matmul_tt", {{4, 3}, {2, 4}}, [](auto& v) { return matmul(v[0], v[1], true, true); }},
        {"bias_add", {{2, 3, 4}, {4}}, [](auto& v) { return bias_add(v[0], v[1]); }},
        {"sum_leading", {{2, 3, 4}}, [](auto& v) { return sum_leading(v[0]); }},
        {"broadcast_leading", {{4}}, [](auto& v) { return broadcast_leading(v[0], {2, 3, 4}); }},
        {"sum_all", {{2, 3}}, [](auto& v) { return sum_all(v[0]); }},
        {"broadcast_scalar", {{}}, [](auto& v) { return broadcast_scalar(v[0], {2, 2}); }},
        {"sum_squares", {{5}}, [](auto& v) { return sum_squares(v[0]); }},
        {"row_sum", {{3, 4}}, [](auto& v) { return row_sum(v[0]); }},
        {"row_broadcast", {{3}}, [](auto& v) { return row_broadcast(v[0], 4); }},
        {"relu", {{10}}, [](auto& v) { return relu(v[0]); }, 1.0, true},
        {"tanh", {{6}}, [](auto& v) { return tanh(v[0]); }, 2.0},
        {"sigmoid", {{6}}, [](auto& v) { return sigmoid(v[0]); }, 3.0},
        {"exp", {{6}}, [](auto& v) { return exp(v[0]); }},
        {"softmax", {{3, 5}}, [](auto& v) { return softmax(v[0]); }, 2.0},
        {"log_softmax", {{3, 5}}, [](auto& v) { return log_softmax(v[0]); }, 2.0},
        {"softmax_cross_entropy", {{4, 3}},
         [](auto& v) {
             Tensor<double> onehot({4, 3});
             for (std::size_t r = 0; r < 4; ++r) onehot[r * 3 + r % 3] = 1.0;
             return softmax_cross_entropy(v[0], v[0].graph->constant(onehot));
         },
         2.0},
        {"mean_squared_error", {{3, 2}, {3, 2}}, [](auto& v) { return mean_squared_error(v[0], v[1]); }},
        {"conv2d_3x3", {{2, 4, 4, 3}, {3, 3, 3, 2}}, [](auto& v) { return conv2d(v[0], v[1]); }},
        {"conv2d_5x3", {{1, 5, 4, 2}, {5, 3, 2, 3}}, [](auto& v) { return conv2d(v[0], v[1]); }},
        {"conv2d_input_grad", {{2, 4, 4, 2}, {3, 3, 3, 2}}, [](auto& v) { return conv2d_input_grad(v[0], v[1]); }},
        {"conv2d_filter_grad", {{2, 4, 4, 3}, {2, 4, 4, 2}},
         [](auto& v) { return conv2d_filter_grad(v[0], v[1], 3, 3); }},
        {"mean_pool2", {{2, 4, 6, 3}}, [](auto& v) { return mean_pool2(v[0]); }},
        {"unpool2", {{2, 2, 3, 3}}, [](auto& v) { return unpool2(v[0]); }},
        {"reshape", {{2, 6}}, [](auto& v) { return reshape(v[0], {3, 4}); }},
        {"slice", {{12}}, [](auto& v) { return slice(v[0], 3, {2, 3}); }},
        {"embed", {{2, 2}}, [](auto& v) { return embed(v[0], 5, 11); }},
    };
    unsigned seed = 1;
    for (const auto& c : cases) check_primitive(c, seed += 7);
}

namespace {

// Hessian-vector product through grad-of-grad, against central differences of
// the first-order gradient along v.
void check_hvp(const std::function<Var(Graph&, Var)>& loss_of, const Shape& wshape, unsigned seed) {
    Graph g;
    Var w = g.input(wshape, "w");
    Var v = g.input(wshape, "v");
    Var loss = loss_of(g, w);
    Var gw = g.grad(loss, w);
    Var hv = g.grad(sum_all(mul(gw, v)), w);

    const std::size_t n = numel(wshape);
    auto wv = oracle::uniform(n, -0.8, 0.8, seed);
    auto vv = oracle::uniform(n, -1.0, 1.0, seed + 1);
    auto bind = [&](const std::vector<double>& wx) {
        Bindings<double> b;
        b.set(w, tensor(wshape, wx)).set(v, tensor(wshape, vv));
        return b;
    };
    auto analytic = eval(g, hv, bind(wv)).values;

    const double eps = 1e-5;
    auto wp = wv, wm = wv;
    for (std::size_t i = 0; i < n; ++i) {
        wp[i] += eps * vv[i];
        wm[i] -= eps * vv[i];
    }
    auto gp = eval(g, gw, bind(wp)).values;
    auto gm = eval(g, gw, bind(wm)).values;
    std::vector<double> numeric(n);
    for (std::size_t i = 0; i < n; ++i) numeric[i] = (gp[i] - gm[i]) / (2 * eps);
    EXPECT_LE(oracle::relative_error(analytic, numeric), 1e-3);
}

} // namespace

TEST(DoubleBackprop, HessianVectorProductTanhMlp) {
    check_hvp(
        [](Graph& g, Var w) {
            Var x = g.constant(tensor({5, 4}, oracle::uniform(20, -1, 1, 77)));
            Var w1 = reshape(slice(w, 0, {12}), {4, 3});
            Var w2 = reshape(slice(w, 12, {6}), {3, 2});
            Tensor<double> onehot({5, 2});
            for (std::size_t r = 0; r < 5; ++r) onehot[r * 2 + r % 2] = 1.0;
            return softmax_cross_entropy(matmul(tanh(matmul(x, w1)), w2), g.constant(onehot));
        },
        {18}, 11);
}

TEST(DoubleBackprop, HessianVectorProductConvReluPool) {
    check_hvp(
        [](Graph& g, Var w) {
            Var x = g.constant(tensor({2, 4, 4, 1}, oracle::uniform(32, 0, 1, 78)));
            Var k = reshape(slice(w, 0, {18}), {3, 3, 1, 2});
            Var b = slice(w, 18, {2});
            Var h = mean_pool2(relu(bias_add(conv2d(x, k), b)));
            Var head = reshape(slice(w, 20, {24}), {8, 3});
            Var logits = matmul(reshape(h, {2, 8}), head);
            Tensor<double> onehot({2, 3});
            onehot[0] = 1.0;
            onehot[5] = 1.0;
            return softmax_cross_entropy(logits, g.constant(onehot));
        },
        {44}, 12);
}

TEST(DoubleBackprop, GradientOfSigmoidSoftmaxChain) {
    check_hvp(
        [](Graph& g, Var w) {
            Var s = sigmoid(reshape(w, {2, 3}));
            return sum_squares(softmax(s)) + sum_all(exp(scale(w, 0.5)));
        },
        {6}, 13);
}

TEST(SgdStep, SingleStepOnSquare) {
    Graph g;
    Var p = g.input({1});
    Var next = sgd_step_differentiable(p, sum_squares(p), 0.1);
    Bindings<double> b;
    b.set(p, tensor({1}, {1.0}));
    EXPECT_NEAR(eval(g, next, b).item(), 0.8, 1e-15);
}

TEST(SgdStep, ZeroRateIsIdentity) {
    Graph g;
    Var p = g.input({3});
    Var next = sgd_step_differentiable(p, sum_squares(tanh(p)), 0.0);
    auto pv = oracle::uniform(3, -1, 1, 3);
    Bindings<double> b;
    b.set(p, tensor({3}, pv));
    EXPECT_EQ(eval(g, next, b).values, pv);
}

TEST(SgdStep, NegativeRateRejected) {
    Graph g;
    Var p = g.input({1});
    EXPECT_THROW(sgd_step_differentiable(p, sum_squares(p), -0.1), std::invalid_argument);
}

// Twenty chained steps on 0.5 x^T A x with lr < 1/lambda_max: the loss must
// decrease at every step (closed-form contraction by 1 - lr * lambda_i).
TEST(SgdStep, ChainedStepsOnQuadraticDecreaseMonotonically) {
    Graph g;
    Var p = g.input({3});
    const std::vector<double> diag = {0.5, 2.0, 4.0};
    Var a = g.constant(tensor({3}, diag));
    auto loss_of = [&](Var x) { return scale(sum_all(mul(a, mul(x, x))), 0.5); };
    const double lr = 0.2; // below 1 / 4
    std::vector<Var> losses{loss_of(p)};
    Var x = p;
    for (int i = 0; i < 20; ++i) {
        x = sgd_step_differentiable(x, losses.back(), lr);
        losses.push_back(loss_of(x));
    }
    Bindings<double> b;
    std::vector<double> x0 = {1.0, -2.0, 0.5};
    b.set(p, tensor({3}, x0));
    auto values = Executor<double>(g, losses).run(b);
    for (std::size_t i = 1; i < values.size(); ++i) {
        EXPECT_LT(values[i].item(), values[i - 1].item());
        double expected = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            double xi = x0[k] * std::pow(1 - lr * diag[k], static_cast<double>(i));
            expected += 0.5 * diag[k] * xi * xi;
        }
        EXPECT_NEAR(values[i].item(), expected, 1e-12);
    }
}
