#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "feddgm/generator.hpp"
#include "feddgm/models.hpp"
#include "feddgm/training.hpp"

namespace feddgm {

enum class LatentOptimizer { sgd, momentum, adam };

std::string to_string(LatentOptimizer o);
LatentOptimizer parse_latent_optimizer(const std::string& s);

struct DistillConfig {
    std::size_t local_epochs = 20;   ///< T_l
    std::size_t student_steps = 20;  ///< T_s
    std::size_t distill_iters = 100; ///< T_d
    double lr_local = 0.1;
    double lr_student = 0.2;
    /// Sized for plain SGD: the normalized loss gives latent gradients near 1e-3.
    double lr_latent = 2000.0;
    std::size_t ipc = 10;
    /// Generator layer to distill in; negative picks the generator default.
    int layer = -1;
    std::size_t local_batch = 256;
    double local_momentum = 0.0;
    LatentOptimizer latent_optimizer = LatentOptimizer::sgd;
    double latent_momentum = 0.9;
    double prox_mu = 0.0;
    Precision precision = Precision::f32;

    void validate() const;
    std::size_t resolved_layer(const Generator& g) const;
    bool operator==(const DistillConfig&) const = default;
};

struct LocalResult {
    ParamVector params;
    TrainStats stats;
};

/// T_l epochs of mini-batch SGD on the shard starting from theta_g.
LocalResult client_update(const ParamVector& theta_g, const ModelSpec& spec, const LabeledDataset& ds,
                          std::span<const std::size_t> shard, const DistillConfig& cfg, std::uint64_t seed);

/// ||theta_hat - theta_m||^2 / ||theta_g - theta_m||^2. Throws
/// ClientDidNotMoveError when the denominator is zero.
double mtt_loss(std::span<const double> theta_hat, std::span<const double> theta_m, std::span<const double> theta_g);
ad::Var mtt_loss(ad::Var theta_hat, ad::Var theta_m, ad::Var theta_g);

struct DistillResult {
    LatentSet latents;
    /// Loss before each of the T_d latent updates.
    std::vector<double> trace;
    /// Loss after the last update (equals the initial loss when T_d = 0).
    double final_loss = 0.0;
};

/// The unrolled student: T_s full-batch differentiable SGD steps from theta_g
/// on decode(z), then the trajectory-matching loss against theta_m.
struct MttGraph {
    ad::Graph graph;
    ad::Var z, gen, theta_g, theta_m, onehot, loss, dz;

    MttGraph(const Generator& g, const ModelSpec& spec, const LatentSet& z0, std::size_t student_steps,
             double lr_student);
};

DistillResult distill_client(const ParamVector& theta_g, const ParamVector& theta_m, const Generator& g,
                             const LatentSet& z0, const ModelSpec& spec, const DistillConfig& cfg);

/// Decoded synthetic set plus labels, ready for server-side training.
LabeledDataset synthetic_dataset(const Generator& g, const LatentSet& z, const std::string& name = "synthetic");

} // namespace feddgm
