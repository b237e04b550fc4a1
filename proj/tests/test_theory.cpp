#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "feddgm/error.hpp"
#include "feddgm/theory.hpp"
#include "oracles.hpp"

using namespace feddgm;
using namespace feddgm::theory;

namespace {

LinearData random_set(std::size_t rows, std::size_t dim, unsigned seed) {
    LinearData d;
    d.rows = rows;
    d.dim = dim;
    d.x = oracle::uniform(rows * dim, -1, 1, seed);
    d.y = oracle::uniform(rows, -1, 1, seed + 1);
    return d;
}

std::vector<double> residual(const LinearData& d, const std::vector<double>& theta) {
    std::vector<double> r(d.rows);
    for (std::size_t i = 0; i < d.rows; ++i) {
        double s = -d.y[i];
        for (std::size_t j = 0; j < d.dim; ++j) s += d.x[i * d.dim + j] * theta[j];
        r[i] = s;
    }
    return r;
}

std::vector<double> column_mean(const GibbsChain& c) {
    std::vector<double> m(c.dim, 0.0);
    for (std::size_t s = 0; s < c.steps(); ++s)
        for (std::size_t j = 0; j < c.dim; ++j) m[j] += c.theta[s * c.dim + j] / c.steps();
    return m;
}

double total_variance(const GibbsChain& c) {
    const auto m = column_mean(c);
    double v = 0.0;
    for (std::size_t s = 0; s < c.steps(); ++s)
        for (std::size_t j = 0; j < c.dim; ++j) v += std::pow(c.theta[s * c.dim + j] - m[j], 2) / c.steps();
    return v;
}

} // namespace

TEST(Toy, MseExample) {
    LinearData d{2, 1, {1.0, 2.0}, {1.0, 0.0}};
    // residuals 2-1 = 1 and 4-0 = 4
    EXPECT_DOUBLE_EQ(mse({2.0}, d), 8.5);
    EXPECT_THROW(mse({1.0, 2.0}, d), ShapeError);
}

TEST(Toy, FamiliesRespectTheirShape) {
    auto over = make_toy_problem(ToyFamily::overparameterized, 20, 10, 15, 2, 0.0, 1);
    EXPECT_EQ(over.real.size(), 2u);
    EXPECT_LT(over.samples, over.dim);
    EXPECT_LT(mse(over.theta_true, over.real[1]), 1e-24);
    EXPECT_THROW(make_toy_problem(ToyFamily::overparameterized, 5, 10, 3, 1, 0.0, 1), ConfigError);
    EXPECT_THROW(make_toy_problem(ToyFamily::quadratic, 5, 3, 3, 1, 0.0, 1), ConfigError);
    EXPECT_EQ(parse_toy_family("quadratic"), ToyFamily::quadratic);
    EXPECT_THROW(parse_toy_family("cubic"), ConfigError);
}

TEST(TrainedOn, UnderdeterminedProjects) {
    auto d = random_set(3, 6, 4);
    auto theta = oracle::uniform(6, -1, 1, 9);
    auto t = trained_on(d, theta);
    for (double r : residual(d, t)) EXPECT_NEAR(r, 0.0, 1e-12);
    // theta^ - theta lies in the row space: re-projecting from theta^ is a no-op
    auto again = trained_on(d, t);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(again[j], t[j], 1e-12);
    // and the move is orthogonal to any null-space direction of X~
    Eigen::Map<const Eigen::Matrix<double, 3, 6, Eigen::RowMajor>> x(d.x.data());
    Eigen::FullPivLU<Eigen::MatrixXd> lu(x);
    Eigen::MatrixXd null = lu.kernel();
    for (Eigen::Index c = 0; c < null.cols(); ++c) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dot += (t[j] - theta[j]) * null(Eigen::Index(j), c);
        EXPECT_NEAR(dot, 0.0, 1e-12);
    }
}

TEST(TrainedOn, OverdeterminedSolvesNormalEquations) {
    auto d = random_set(8, 3, 5);
    auto t = trained_on(d, {5.0, -5.0, 1.0});
    auto r = residual(d, t);
    for (std::size_t j = 0; j < 3; ++j) {
        double g = 0.0;
        for (std::size_t i = 0; i < 8; ++i) g += d.x[i * 3 + j] * r[i];
        EXPECT_NEAR(g, 0.0, 1e-12);
    }
}

TEST(Energy, ThetaGradientMatchesDifferences) {
    auto p = make_toy_problem(ToyFamily::overparameterized, 6, 3, 4, 1, 0.0, 2);
    auto d = random_set(4, 6, 7);
    auto theta = oracle::uniform(6, -1, 1, 8);
    auto e = theta_energy(p, d, 3.0, theta);
    auto fd = oracle::central_gradient([&](const std::vector<double>& t) { return theta_energy(p, d, 3.0, t).value; },
                                       theta);
    EXPECT_LE(oracle::relative_error(e.grad, fd), 1e-7);
}

TEST(Energy, DataGradientMatchesDifferences) {
    for (auto family : {ToyFamily::overparameterized, ToyFamily::quadratic}) {
        const bool over = family == ToyFamily::overparameterized;
        auto p = over ? make_toy_problem(family, 6, 3, 4, 1, 0.0, 3) : make_toy_problem(family, 3, 8, 5, 1, 0.1, 3);
        auto d = random_set(p.distilled, p.dim, 11);
        auto theta = oracle::uniform(p.dim, -1, 1, 12);
        auto pack = [&](const LinearData& v) {
            auto out = v.x;
            out.insert(out.end(), v.y.begin(), v.y.end());
            return out;
        };
        auto energy = [&](const std::vector<double>& v) {
            LinearData x{d.rows, d.dim, {v.begin(), v.begin() + d.rows * d.dim}, {v.begin() + d.rows * d.dim, v.end()}};
            return data_energy(p, 0, theta, 2.0, x).value;
        };
        auto e = data_energy(p, 0, theta, 2.0, d);
        auto fd = oracle::central_gradient(energy, pack(d), 1e-6);
        EXPECT_LE(oracle::relative_error(e.grad, fd), 1e-6) << to_string(family);
    }
}

TEST(Support, IdenticalDataHolds) {
    auto p = make_toy_problem(ToyFamily::overparameterized, 20, 10, 15, 1, 0.0, 4);
    EXPECT_TRUE(check_support_condition(p.real[0], p, 1e-10));
    auto q = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.3, 4);
    EXPECT_TRUE(check_support_condition(q.real[0], q, 1e-10));
}

TEST(Support, RandomTargetsFailWhenUnderparameterized) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.0, 5);
    int failures = 0;
    for (unsigned s = 0; s < 10; ++s) {
        auto d = random_set(5, 3, 100 + s);
        // Least-squares oracle: the distilled solution is unique, so the
        // excess is its real-data loss (real targets are noise-free).
        Eigen::Map<const Eigen::Matrix<double, 5, 3, Eigen::RowMajor>> x(d.x.data());
        Eigen::Map<const Eigen::Vector<double, 5>> y(d.y.data());
        Eigen::Vector3d sol = x.colPivHouseholderQr().solve(y);
        const double expected = mse({sol[0], sol[1], sol[2]}, p.real[0]);
        EXPECT_NEAR(support_excess(d, p.real[0]), expected, 1e-9 * std::max(1.0, expected));
        failures += !check_support_condition(d, p, 1e-3);
    }
    EXPECT_EQ(failures, 10);
}

TEST(Support, SingularCountsAsFalse) {
    auto p = make_toy_problem(ToyFamily::overparameterized, 4, 2, 3, 1, 0.0, 6);
    LinearData zero{3, 4, std::vector<double>(12, 0.0), {1.0, 2.0, 3.0}};
    EXPECT_THROW(support_excess(zero, p.real[0]), SingularSystemError);
    EXPECT_FALSE(check_support_condition(zero, p, 1e9));
    EXPECT_THROW(support_excess(LinearData{0, 4, {}, {}}, p.real[0]), ConfigError);
}

TEST(Centralized, IdenticalSetsGiveZero) {
    auto p = make_toy_problem(ToyFamily::overparameterized, 20, 10, 15, 3, 0.0, 7);
    EXPECT_NEAR(centralized_vs_distilled(p, p.real), 0.0, 1e-12);
    EXPECT_THROW(centralized_vs_distilled(p, {p.real[0]}), ConfigError);
}

TEST(Centralized, PerturbationBound) {
    auto p = make_toy_problem(ToyFamily::quadratic, 4, 12, 12, 1, 0.2, 8);
    const auto& real = p.real[0];
    Eigen::Map<const Eigen::Matrix<double, 12, 4, Eigen::RowMajor>> x(real.x.data());
    const double sigma_min = std::sqrt(Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(x.transpose() * x).eigenvalues()[0]);
    for (unsigned s = 0; s < 10; ++s) {
        auto d = real;
        auto delta = oracle::uniform(12, -0.05, 0.05, 200 + s);
        for (std::size_t i = 0; i < 12; ++i) d.y[i] += delta[i];
        const double eps = support_excess(d, real);
        const double dev = centralized_vs_distilled(p, {d});
        EXPECT_LE(dev, std::sqrt(12.0 * eps) / sigma_min * (1.0 + 1e-9) + 1e-12);
        EXPECT_GT(dev, 0.0);
    }
}

TEST(Gibbs, ReproducibleAndTunedAcceptance) {
    auto p = make_toy_problem(ToyFamily::overparameterized, 20, 10, 15, 1, 0.0, 9);
    GibbsOptions o;
    o.steps = 1000;
    o.burn_in = 1000;
    auto a = gibbs_alternate(p, 100.0, 100.0, o, 3);
    auto b = gibbs_alternate(p, 100.0, 100.0, o, 3);
    EXPECT_EQ(a.theta, b.theta);
    EXPECT_EQ(a.energy, b.energy);
    EXPECT_EQ(a.distilled, b.distilled);
    for (double r : {a.accept_theta, a.accept_data}) {
        EXPECT_GE(r, 0.1);
        EXPECT_LE(r, 0.9);
    }
    EXPECT_EQ(a.steps(), 1000u);
}

TEST(Gibbs, RejectsBadTemperatures) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.1, 1);
    EXPECT_THROW(gibbs_alternate(p, 0.0, 1.0, {}, 1), ConfigError);
    EXPECT_THROW(gibbs_alternate(p, 1.0, -1.0, {}, 1), ConfigError);
}

TEST(Gibbs, ZeroTemperatureFindsMinimizer) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.3, 10);
    // analytic minimizer of the real loss
    Eigen::Map<const Eigen::Matrix<double, 20, 3, Eigen::RowMajor>> x(p.real[0].x.data());
    Eigen::Map<const Eigen::Vector<double, 20>> y(p.real[0].y.data());
    Eigen::Vector3d ls = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    GibbsOptions o;
    o.steps = 2000;
    o.burn_in = 3000;
    auto c = gibbs_alternate(p, 1e6, 1e6, o, 1);
    auto m = column_mean(c);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(m[j], ls[j], 1e-2);
}

TEST(Gibbs, SplitChainStabilizes) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.3, 11);
    GibbsOptions o;
    o.steps = 10000;
    auto c = gibbs_alternate(p, 1.0, 1.0, o, 2);
    EXPECT_LE(split_chain_tv(c), 0.1);
}

TEST(Gibbs, ConditionalCollapsesAsBetaGrows) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.3, 12);
    auto d = random_set(5, 3, 13);
    GibbsOptions o;
    o.steps = 5000;
    double prev = 1e300;
    for (double beta : {1.0, 10.0, 100.0, 1000.0}) {
        auto c = sample_theta_conditional(p, d, beta, o, 4);
        const double v = total_variance(c);
        EXPECT_LT(v, prev) << beta;
        prev = v;
    }
}

TEST(Gibbs, LowTemperatureEndpointsMeetSupport) {
    int ok = 0;
    for (unsigned s = 0; s < 5; ++s) {
        auto p = make_toy_problem(ToyFamily::overparameterized, 20, 10, 15, 1, 0.0, s);
        GibbsOptions o;
        o.steps = 1000;
        auto c = gibbs_alternate(p, 1e4, 1e4, o, s);
        ok += check_support_condition(c.distilled, p, 1e-3);
    }
    EXPECT_GE(ok, 4);
}

TEST(Balance, ConditionalSamplersOnGrids) {
    auto p = make_toy_problem(ToyFamily::quadratic, 3, 20, 5, 1, 0.3, 14);
    auto d = random_set(5, 3, 15);
    std::vector<double> theta{0.1, -0.2, 0.3};
    std::vector<double> theta_grid, data_grid;
    for (int k = -20; k <= 20; ++k) {
        auto t = theta;
        t[0] += 0.05 * k;
        theta_grid.push_back(theta_energy(p, d, 5.0, t).value);
        auto dd = d;
        dd.y[0] += 0.05 * k;
        data_grid.push_back(data_energy(p, 0, theta, 5.0, dd).value);
    }
    for (const auto* grid : {&theta_grid, &data_grid}) {
        auto r = detailed_balance_check(*grid, 4'000'000, 1);
        EXPECT_GE(r.pairs_checked, 5u);
        EXPECT_LE(r.max_relative_error, 0.05);
    }
}

TEST(Output, ChainCsv) {
    GibbsChain c;
    c.dim = 2;
    c.theta = {1.0, 2.0, 3.0, 4.0};
    c.energy = {0.5, 0.25};
    std::ostringstream s;
    write_chain_csv(s, c);
    EXPECT_EQ(s.str(), "step,theta_0,theta_1,energy\n0,1,2,0.5\n1,3,4,0.25\n");
}
