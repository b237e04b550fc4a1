#include "feddgm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>

#include <Eigen/Dense>

#include "feddgm/error.hpp"
#include "feddgm/random.hpp"

namespace feddgm::theory {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

Eigen::Map<const RowMat> design(const LinearData& d) { return {d.x.data(), Eigen::Index(d.rows), Eigen::Index(d.dim)}; }
Eigen::Map<const Vec> targets(const LinearData& d) { return {d.y.data(), Eigen::Index(d.rows)}; }
Eigen::Map<const Vec> as_vec(const std::vector<double>& v) { return {v.data(), Eigen::Index(v.size())}; }
std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

void check_shape(const LinearData& d) {
    if (d.x.size() != d.rows * d.dim || d.y.size() != d.rows) throw ShapeError("linear data has inconsistent sizes");
}

Vec min_norm_solve(const RowMat& x, const Vec& y) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return svd.solve(y);
}

LinearData stack(const std::vector<LinearData>& parts) {
    LinearData out;
    out.dim = parts.front().dim;
    for (const auto& p : parts) {
        check_shape(p);
        if (p.dim != out.dim) throw ShapeError("stacked linear data differ in dimension");
        out.rows += p.rows;
        out.x.insert(out.x.end(), p.x.begin(), p.x.end());
        out.y.insert(out.y.end(), p.y.begin(), p.y.end());
    }
    return out;
}

double half_norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return 0.5 * s;
}

using EnergyFn = std::function<Energy(const std::vector<double>&)>;

struct Mala {
    double step;
    std::vector<double> state;
    Energy current;
};

// One Metropolis-adjusted Langevin step. Proposals with a singular or
// non-finite energy are rejected.
bool mala_step(Mala& m, const EnergyFn& energy, Rng& rng) {
    std::normal_distribution<double> normal;
    const double h = m.step;
    std::vector<double> prop(m.state.size());
    for (std::size_t i = 0; i < prop.size(); ++i)
        prop[i] = m.state[i] - h * m.current.grad[i] + std::sqrt(2.0 * h) * normal(rng);
    Energy next;
    try {
        next = energy(prop);
    } catch (const SingularSystemError&) {
        return false;
    }
    if (!std::isfinite(next.value)) return false;
    // log q(x | x') - log q(x' | x)
    double fwd = 0.0, back = 0.0;
    for (std::size_t i = 0; i < prop.size(); ++i) {
        const double a = prop[i] - m.state[i] + h * m.current.grad[i];
        const double b = m.state[i] - prop[i] + h * next.grad[i];
        fwd += a * a;
        back += b * b;
    }
    const double log_ratio = m.current.value - next.value + (fwd - back) / (4.0 * h);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (std::log(unit(rng)) < log_ratio) {
        m.state = std::move(prop);
        m.current = std::move(next);
        return true;
    }
    return false;
}

void adapt(Mala& m, bool accepted, double target, std::size_t t) {
    m.step *= std::exp(2.0 * ((accepted ? 1.0 : 0.0) - target) / std::sqrt(static_cast<double>(t) + 1.0));
}

LinearData unpack(const std::vector<double>& v, std::size_t rows, std::size_t dim) {
    LinearData d;
    d.rows = rows;
    d.dim = dim;
    d.x.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rows * dim));
    d.y.assign(v.begin() + static_cast<std::ptrdiff_t>(rows * dim), v.end());
    return d;
}

std::vector<double> pack(const LinearData& d) {
    std::vector<double> v = d.x;
    v.insert(v.end(), d.y.begin(), d.y.end());
    return v;
}

void check_betas(double beta_d, double beta_star) {
    if (!(beta_d > 0.0) || !(beta_star > 0.0) || !std::isfinite(beta_d) || !std::isfinite(beta_star))
        throw ConfigError("inverse temperatures must be positive");
}

void check_start(const Energy& e) {
    if (!std::isfinite(e.value)) throw DivergenceError("non-finite energy at the chain start");
}

} // namespace

std::string to_string(ToyFamily f) { return f == ToyFamily::quadratic ? "quadratic" : "overparameterized"; }

ToyFamily parse_toy_family(const std::string& s) {
    if (s == "quadratic") return ToyFamily::quadratic;
    if (s == "overparameterized") return ToyFamily::overparameterized;
    throw ConfigError("unknown toy family '" + s + "' (expected quadratic or overparameterized)");
}

double mse(const std::vector<double>& theta, const LinearData& d) {
    check_shape(d);
    if (theta.size() != d.dim) throw ShapeError("theta does not match the data dimension");
    if (d.rows == 0) return 0.0;
    return (design(d) * as_vec(theta) - targets(d)).squaredNorm() / static_cast<double>(d.rows);
}

void ToyProblem::validate() const {
    if (dim < 1 || samples < 1 || distilled < 1 || agents < 1) throw ConfigError("toy problem sizes must be positive");
    if (family == ToyFamily::overparameterized && samples >= dim)
        throw ConfigError("overparameterized toy needs fewer samples than parameters");
    if (family == ToyFamily::quadratic && samples <= dim)
        throw ConfigError("quadratic toy needs more samples than parameters");
    if (!(prior_precision > 0.0)) throw ConfigError("prior precision must be positive");
    if (real.size() != agents) throw ConfigError("toy problem needs one real dataset per agent");
}

ToyProblem make_toy_problem(ToyFamily family, std::size_t dim, std::size_t samples, std::size_t distilled,
                            std::size_t agents, double noise, std::uint64_t seed) {
    ToyProblem p;
    p.family = family;
    p.dim = dim;
    p.samples = samples;
    p.distilled = distilled;
    p.agents = agents;
    p.noise = noise;
    Rng rng(derive_seed({seed, 0x7011}));
    std::normal_distribution<double> normal;
    p.theta_true.resize(dim);
    for (auto& v : p.theta_true) v = normal(rng) / std::sqrt(static_cast<double>(dim));
    for (std::size_t a = 0; a < agents; ++a) {
        LinearData d;
        d.rows = samples;
        d.dim = dim;
        d.x.resize(samples * dim);
        for (auto& v : d.x) v = normal(rng);
        d.y.resize(samples);
        for (std::size_t i = 0; i < samples; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += d.x[i * dim + j] * p.theta_true[j];
            d.y[i] = s + noise * normal(rng);
        }
        p.real.push_back(std::move(d));
    }
    p.validate();
    return p;
}

std::vector<double> trained_on(const LinearData& distilled, const std::vector<double>& theta) {
    check_shape(distilled);
    const RowMat xt = design(distilled);
    const Vec yt = targets(distilled);
    const Vec th = as_vec(theta);
    if (distilled.rows < distilled.dim) {
        Eigen::LDLT<Eigen::MatrixXd> g(xt * xt.transpose());
        if (g.info() != Eigen::Success) throw SingularSystemError("distilled design is singular");
        return to_std(th + xt.transpose() * g.solve(yt - xt * th));
    }
    Eigen::LDLT<Eigen::MatrixXd> h(xt.transpose() * xt);
    if (h.info() != Eigen::Success) throw SingularSystemError("distilled design is singular");
    return to_std(h.solve(xt.transpose() * yt));
}

Energy theta_energy(const ToyProblem& p, const LinearData& distilled, double beta_star, const std::vector<double>& theta) {
    check_shape(distilled);
    const Vec th = as_vec(theta);
    const Vec r = design(distilled) * th - targets(distilled);
    const double n = static_cast<double>(distilled.rows);
    Energy e;
    e.value = beta_star * r.squaredNorm() / n + p.prior_precision * half_norm2(theta);
    e.grad = to_std((2.0 * beta_star / n) * (design(distilled).transpose() * r) + p.prior_precision * th);
    return e;
}

Energy data_energy(const ToyProblem& p, std::size_t agent, const std::vector<double>& theta, double beta_d,
                   const LinearData& distilled) {
    check_shape(distilled);
    const auto& real = p.real.at(agent);
    const RowMat xt = design(distilled);
    const Vec yt = targets(distilled);
    const Vec th = as_vec(theta);
    const auto x = design(real);
    const auto y = targets(real);
    const double n = static_cast<double>(real.rows);

    Vec that;
    RowMat dx;
    Vec dy;
    auto loss_grad = [&](const Vec& t) { return ((2.0 / n) * (x.transpose() * (x * t - y))).eval(); };
    if (distilled.rows < distilled.dim) {
        // theta^ = theta + X~' a with a = G^-1 (y~ - X~ theta), G = X~ X~'
        Eigen::LDLT<Eigen::MatrixXd> g(xt * xt.transpose());
        if (g.info() != Eigen::Success) throw SingularSystemError("distilled design is singular");
        const Vec a = g.solve(yt - xt * th);
        that = th + xt.transpose() * a;
        const Vec gl = loss_grad(that);
        const Vec u = g.solve(xt * gl);
        dx = a * (gl - xt.transpose() * u).transpose() - u * that.transpose();
        dy = u;
    } else {
        // theta^ = H^-1 X~' y~, H = X~' X~
        Eigen::LDLT<Eigen::MatrixXd> h(xt.transpose() * xt);
        if (h.info() != Eigen::Success) throw SingularSystemError("distilled design is singular");
        that = h.solve(xt.transpose() * yt);
        const Vec gl = loss_grad(that);
        const Vec w = h.solve(gl);
        dx = (yt - xt * that) * w.transpose() - (xt * w) * that.transpose();
        dy = xt * w;
    }
    const double loss = (x * that - y).squaredNorm() / n;
    Energy e;
    const auto packed = pack(distilled);
    e.value = beta_d * loss + p.prior_precision * half_norm2(packed);
    e.grad.resize(packed.size());
    for (std::size_t i = 0; i < distilled.rows; ++i)
        for (std::size_t j = 0; j < distilled.dim; ++j) e.grad[i * distilled.dim + j] = beta_d * dx(Eigen::Index(i), Eigen::Index(j));
    for (std::size_t i = 0; i < distilled.rows; ++i) e.grad[distilled.rows * distilled.dim + i] = beta_d * dy(Eigen::Index(i));
    for (std::size_t i = 0; i < packed.size(); ++i) e.grad[i] += p.prior_precision * packed[i];
    if (!std::isfinite(e.value)) throw SingularSystemError("distilled design is numerically singular");
    return e;
}

GibbsChain gibbs_alternate(const ToyProblem& p, double beta_d, double beta_star, const GibbsOptions& o,
                           std::uint64_t seed) {
    p.validate();
    check_betas(beta_d, beta_star);
    if (o.agent >= p.agents) throw ConfigError("agent index out of range");
    Rng rng(derive_seed({seed, 0x6166}));
    std::normal_distribution<double> normal;
    const std::size_t rows = p.distilled, dim = p.dim;

    LinearData init;
    init.rows = rows;
    init.dim = dim;
    init.x.resize(rows * dim);
    init.y.resize(rows);
    for (auto& v : init.x) v = normal(rng);
    for (auto& v : init.y) v = normal(rng);

    Mala th{o.initial_step, std::vector<double>(dim, 0.0), {}};
    Mala dt{o.initial_step, pack(init), {}};
    auto theta_fn = [&](const std::vector<double>& t) { return theta_energy(p, unpack(dt.state, rows, dim), beta_star, t); };
    auto data_fn = [&](const std::vector<double>& v) {
        return data_energy(p, o.agent, th.state, beta_d, unpack(v, rows, dim));
    };
    th.current = theta_fn(th.state);
    check_start(th.current);
    try {
        dt.current = data_fn(dt.state);
    } catch (const SingularSystemError& e) {
        throw DivergenceError(std::string("non-finite energy at the chain start: ") + e.what());
    }

    GibbsChain chain;
    chain.dim = dim;
    std::size_t acc_t = 0, acc_d = 0;
    for (std::size_t s = 0; s < o.burn_in + o.steps; ++s) {
        th.current = theta_fn(th.state); // D~ moved since the last theta step
        const bool at = mala_step(th, theta_fn, rng);
        dt.current = data_fn(dt.state);
        const bool ad = mala_step(dt, data_fn, rng);
        if (s < o.burn_in) {
            adapt(th, at, o.target_accept, s);
            adapt(dt, ad, o.target_accept, s);
            continue;
        }
        acc_t += at;
        acc_d += ad;
        chain.theta.insert(chain.theta.end(), th.state.begin(), th.state.end());
        chain.energy.push_back(theta_fn(th.state).value + dt.current.value);
        if (!std::isfinite(chain.energy.back())) throw DivergenceError("non-finite energy in the chain");
    }
    chain.distilled = unpack(dt.state, rows, dim);
    chain.last_theta = th.state;
    if (o.steps > 0) {
        chain.accept_theta = static_cast<double>(acc_t) / static_cast<double>(o.steps);
        chain.accept_data = static_cast<double>(acc_d) / static_cast<double>(o.steps);
    }
    chain.step_theta = th.step;
    chain.step_data = dt.step;
    return chain;
}

GibbsChain sample_theta_conditional(const ToyProblem& p, const LinearData& distilled, double beta_star,
                                    const GibbsOptions& o, std::uint64_t seed) {
    p.validate();
    check_betas(1.0, beta_star);
    Rng rng(derive_seed({seed, 0x7468}));
    auto fn = [&](const std::vector<double>& t) { return theta_energy(p, distilled, beta_star, t); };
    Mala th{o.initial_step, std::vector<double>(p.dim, 0.0), {}};
    th.current = fn(th.state);
    check_start(th.current);
    GibbsChain chain;
    chain.dim = p.dim;
    chain.distilled = distilled;
    std::size_t acc = 0;
    for (std::size_t s = 0; s < o.burn_in + o.steps; ++s) {
        const bool a = mala_step(th, fn, rng);
        if (s < o.burn_in) {
            adapt(th, a, o.target_accept, s);
            continue;
        }
        acc += a;
        chain.theta.insert(chain.theta.end(), th.state.begin(), th.state.end());
        chain.energy.push_back(th.current.value);
    }
    chain.last_theta = th.state;
    if (o.steps > 0) chain.accept_theta = static_cast<double>(acc) / static_cast<double>(o.steps);
    chain.step_theta = th.step;
    return chain;
}

double support_excess(const LinearData& distilled, const LinearData& real) {
    check_shape(distilled);
    check_shape(real);
    if (distilled.rows == 0) throw ConfigError("distilled set is empty");
    if (distilled.dim != real.dim) throw ShapeError("distilled and real data differ in dimension");
    const RowMat xt = design(distilled);
    const RowMat x = design(real);
    const Vec y = targets(real);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(xt, Eigen::ComputeFullV | Eigen::ComputeThinU);
    const auto rank = svd.rank();
    if (rank == 0) throw SingularSystemError("distilled design has rank zero");
    Vec theta = svd.solve(Vec(targets(distilled)));
    const auto free = Eigen::Index(distilled.dim) - rank;
    if (free > 0) {
        const Eigen::MatrixXd null = svd.matrixV().rightCols(free);
        const Vec z = min_norm_solve(x * null, y - x * theta);
        theta += null * z;
    }
    const double best_real = (x * min_norm_solve(x, y) - y).squaredNorm() / static_cast<double>(real.rows);
    const double on_distilled = (x * theta - y).squaredNorm() / static_cast<double>(real.rows);
    return std::max(0.0, on_distilled - best_real);
}

bool check_support_condition(const LinearData& distilled, const ToyProblem& p, double eps, std::size_t agent) {
    try {
        return support_excess(distilled, p.real.at(agent)) <= eps;
    } catch (const SingularSystemError&) {
        return false;
    }
}

double centralized_vs_distilled(const ToyProblem& p, const std::vector<LinearData>& distilled) {
    if (distilled.size() != p.real.size()) throw ConfigError("one distilled set per agent required");
    const auto real = stack(p.real);
    const auto dist = stack(distilled);
    if (dist.dim != real.dim) throw ShapeError("distilled and real data differ in dimension");
    const Vec a = min_norm_solve(design(dist), targets(dist));
    const Vec b = min_norm_solve(design(real), targets(real));
    if (!a.allFinite() || !b.allFinite()) throw SingularSystemError("least-squares solve produced non-finite values");
    return (a - b).norm();
}

double split_chain_tv(const GibbsChain& chain, std::size_t bins) {
    const std::size_t n = chain.steps(), half = n / 2;
    if (half == 0 || bins == 0) throw ConfigError("chain too short for a split diagnostic");
    double worst = 0.0;
    for (std::size_t j = 0; j < chain.dim; ++j) {
        double lo = chain.theta[j], hi = lo;
        for (std::size_t s = 0; s < 2 * half; ++s) {
            lo = std::min(lo, chain.theta[s * chain.dim + j]);
            hi = std::max(hi, chain.theta[s * chain.dim + j]);
        }
        std::vector<double> first(bins, 0.0), second(bins, 0.0);
        const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
        for (std::size_t s = 0; s < 2 * half; ++s) {
            auto b = static_cast<std::size_t>((chain.theta[s * chain.dim + j] - lo) / width);
            b = std::min(b, bins - 1);
            (s < half ? first : second)[b] += 1.0 / static_cast<double>(half);
        }
        double tv = 0.0;
        for (std::size_t b = 0; b < bins; ++b) tv += std::abs(first[b] - second[b]);
        worst = std::max(worst, 0.5 * tv);
    }
    return worst;
}

BalanceReport detailed_balance_check(const std::vector<double>& energies, std::size_t steps, std::uint64_t seed,
                                     std::size_t min_count) {
    const std::size_t k = energies.size();
    if (k < 2) throw ConfigError("detailed balance needs at least two states");
    Rng rng(derive_seed({seed, 0xdb}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> visits(k, 0.0), up(k, 0.0), down(k, 0.0);
    std::size_t state = static_cast<std::size_t>(std::min_element(energies.begin(), energies.end()) - energies.begin());
    for (std::size_t s = 0; s < steps; ++s) {
        visits[state] += 1.0;
        const bool right = unit(rng) < 0.5;
        if ((right && state + 1 == k) || (!right && state == 0)) continue;
        const std::size_t next = right ? state + 1 : state - 1;
        if (std::log(unit(rng)) < energies[state] - energies[next]) {
            (right ? up : down)[state] += 1.0;
            state = next;
        }
    }
    BalanceReport r;
    for (std::size_t i = 0; i + 1 < k; ++i) {
        if (up[i] < static_cast<double>(min_count) || down[i + 1] < static_cast<double>(min_count)) continue;
        const double empirical = (up[i] / visits[i]) / (down[i + 1] / visits[i + 1]);
        const double gibbs = std::exp(energies[i] - energies[i + 1]);
        r.max_relative_error = std::max(r.max_relative_error, std::abs(empirical / gibbs - 1.0));
        ++r.pairs_checked;
    }
    return r;
}

void write_chain_csv(std::ostream& out, const GibbsChain& chain) {
    out << "step";
    for (std::size_t j = 0; j < chain.dim; ++j) out << ",theta_" << j;
    out << ",energy\n" << std::setprecision(12);
    for (std::size_t s = 0; s < chain.steps(); ++s) {
        out << s;
        for (std::size_t j = 0; j < chain.dim; ++j) out << ',' << chain.theta[s * chain.dim + j];
        out << ',' << chain.energy[s] << '\n';
    }
}

} // namespace feddgm::theory
