#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace feddgm::theory {

enum class ToyFamily { quadratic, overparameterized };

std::string to_string(ToyFamily f);
ToyFamily parse_toy_family(const std::string& s);

/// Least-squares data: `rows` x `dim` design matrix (row-major) and targets.
struct LinearData {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> x;
    std::vector<double> y;

    bool operator==(const LinearData&) const = default;
};

/// Mean squared residual of x * theta against y.
double mse(const std::vector<double>& theta, const LinearData& d);

/// Linear regression toys. `quadratic` has more samples than parameters, so
/// f(., D) has a unique minimizer; `overparameterized` has fewer, giving a
/// zero-loss affine subspace. Real targets come from a shared theta_true.
struct ToyProblem {
    ToyFamily family = ToyFamily::overparameterized;
    std::size_t dim = 20;
    std::size_t samples = 10;   ///< real rows per agent
    std::size_t distilled = 15; ///< distilled rows per agent
    std::size_t agents = 1;
    double noise = 0.0;
    /// Gaussian prior precision on theta and on every distilled entry.
    double prior_precision = 1.0;
    std::vector<LinearData> real;
    std::vector<double> theta_true;

    void validate() const;
};

ToyProblem make_toy_problem(ToyFamily family, std::size_t dim, std::size_t samples, std::size_t distilled,
                            std::size_t agents, double noise, std::uint64_t seed);

/// Where training on the distilled set converges from theta: the projection
/// theta + X~^+ (y~ - X~ theta) when X~ has fewer rows than columns, the
/// least-squares solution otherwise.
std::vector<double> trained_on(const LinearData& distilled, const std::vector<double>& theta);

struct Energy {
    double value = 0.0;
    std::vector<double> grad;
};

/// -log pi(theta | D~) up to a constant: beta* f(theta, D~) + prior.
Energy theta_energy(const ToyProblem& p, const LinearData& distilled, double beta_star, const std::vector<double>& theta);
/// -log pi(D~ | theta) up to a constant: beta_D f(trained_on(D~, theta), D_agent)
/// + prior. The gradient is laid out as x entries followed by y entries.
Energy data_energy(const ToyProblem& p, std::size_t agent, const std::vector<double>& theta, double beta_d,
                   const LinearData& distilled);

struct GibbsOptions {
    std::size_t steps = 10000; ///< recorded sweeps after burn-in
    std::size_t burn_in = 2000;
    double target_accept = 0.574;
    double initial_step = 1e-3;
    std::size_t agent = 0;
};

/// One alternating chain. Each sweep takes one Metropolis-adjusted Langevin
/// step on theta given D~, then one on D~ given theta. Step sizes adapt
/// during burn-in only.
struct GibbsChain {
    std::size_t dim = 0;
    /// Row-major, steps x dim.
    std::vector<double> theta;
    /// Sum of both conditional energies after each sweep.
    std::vector<double> energy;
    LinearData distilled;
    std::vector<double> last_theta;
    double accept_theta = 0.0;
    double accept_data = 0.0;
    double step_theta = 0.0;
    double step_data = 0.0;

    std::size_t steps() const noexcept { return energy.size(); }
};

GibbsChain gibbs_alternate(const ToyProblem& p, double beta_d, double beta_star, const GibbsOptions& options,
                           std::uint64_t seed);

/// Theta-block only, D~ held fixed.
GibbsChain sample_theta_conditional(const ToyProblem& p, const LinearData& distilled, double beta_star,
                                    const GibbsOptions& options, std::uint64_t seed);

/// min over argmin f(., D~) of f(., D) minus min f(., D). Throws
/// SingularSystemError when D~ carries no information (rank zero).
double support_excess(const LinearData& distilled, const LinearData& real);

/// support_excess <= eps; a singular system counts as false.
bool check_support_condition(const LinearData& distilled, const ToyProblem& p, double eps, std::size_t agent = 0);

/// || argmin sum_m f(., D~_m) - argmin sum_m f(., D_m) || with minimum-norm
/// solutions.
double centralized_vs_distilled(const ToyProblem& p, const std::vector<LinearData>& distilled);

/// Largest total-variation distance between first-half and second-half
/// histograms over the coordinates of theta.
double split_chain_tv(const GibbsChain& chain, std::size_t bins = 20);

struct BalanceReport {
    double max_relative_error = 0.0;
    std::size_t pairs_checked = 0;
};

/// Metropolis with +-1 proposals on a discretized state space with the given
/// energies; compares empirical transition-probability ratios of adjacent
/// states against exp(-(E_j - E_i)). Pairs with fewer than `min_count`
/// transitions either way are skipped.
BalanceReport detailed_balance_check(const std::vector<double>& energies, std::size_t steps, std::uint64_t seed,
                                     std::size_t min_count = 2000);

/// step, theta_0..theta_{d-1}, energy
void write_chain_csv(std::ostream& out, const GibbsChain& chain);

} // namespace feddgm::theory
