#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "feddgm/dataset.hpp"
#include "feddgm/distill.hpp"
#include "feddgm/generator.hpp"
#include "feddgm/models.hpp"

namespace feddgm {

enum class Method { feddgm, fedavg, fedprox, fednova, feddm_lite };

std::string to_string(Method m);
Method parse_method(const std::string& s);

/// Client-side distribution matching baseline: pixel-space synthetic images
/// matched to real class-mean embeddings of a random frozen feature network.
struct FeddmLiteConfig {
    std::size_t iters = 100;
    double lr = 0.05;
    std::size_t feature_width = 64;

    bool operator==(const FeddmLiteConfig&) const = default;
};

struct FedConfig {
    std::size_t clients = 10;
    /// Clients sampled per round; 0 means all of them.
    std::size_t participants = 0;
    std::size_t rounds = 10;
    Method method = Method::feddgm;
    double alpha = 0.5;
    ModelSpec surrogate;
    ModelSpec global;
    DistillConfig distill;
    std::size_t global_epochs = 100; ///< T_g
    std::size_t global_batch = 64;
    double global_lr = 0.05;
    /// Proximal weight used by fedprox only.
    double prox_mu = 0.01;
    /// Train the server models on the union of all rounds' synthetic sets.
    bool accumulate = false;
    FeddmLiteConfig feddm;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const;
    std::size_t participants_per_round() const noexcept { return participants == 0 ? clients : participants; }
};

/// MLP surrogate (1 x 64) and its x2/+1 global counterpart for the data shape.
FedConfig default_fed_config(const ImageShape& image, std::size_t classes);

/// Federated pool, held-out test set and the client partition of the pool.
struct FedData {
    LabeledDataset train;
    LabeledDataset test;
    std::vector<ClientShard> shards;
};

enum class Payload { params, images };
std::string to_string(Payload p);

struct TransportRecord {
    std::size_t round = 0;
    std::size_t client = 0;
    Payload kind = Payload::params;
    /// Parameter count or image count.
    std::size_t items = 0;
    std::size_t bytes = 0;
};

using Upload = std::variant<ParamVector, LabeledDataset>;

/// The only client -> server path. Every message is recorded before delivery.
class Channel {
public:
    explicit Channel(std::size_t float_bytes) : float_bytes_(float_bytes) {}

    Upload send(std::size_t round, std::size_t client, Upload message);

    const std::vector<TransportRecord>& log() const noexcept { return log_; }
    std::size_t count(Payload kind) const;
    std::size_t items(std::size_t round, std::size_t client, Payload kind) const;
    std::size_t round_bytes(std::size_t round) const;

private:
    std::size_t float_bytes_;
    std::vector<TransportRecord> log_;
};

struct ClientMetrics {
    std::size_t client_id = 0;
    double local_loss = 0.0;
    /// NaN when the method does no trajectory matching or the client was skipped.
    double mtt_loss_final = 0.0;
    bool skipped = false;
};

struct RoundMetrics {
    std::size_t round = 0;
    std::uint64_t seed = 0;
    std::vector<ClientMetrics> clients;
    double global_acc = 0.0;
    double surrogate_acc = 0.0;
    double wall_s = 0.0;
    std::size_t upload_bytes = 0;
};

struct FedRun {
    Method method = Method::feddgm;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    std::vector<RoundMetrics> rounds;
    std::vector<TransportRecord> transport;
    ParamVector global_params;
    ParamVector surrogate_params;
};

/// Convex combination with weights normalized to sum 1.
ParamVector aggregate_weighted(const std::vector<ParamVector>& params, const std::vector<double>& weights);

/// Participants of round t: uniform sample without replacement, sorted.
std::vector<std::size_t> sample_participants(std::size_t clients, std::size_t k, std::uint64_t seed, std::size_t round);

/// Runs fn(0..n-1) on up to `threads` workers. The first failing index (in
/// index order) has its exception rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

using RoundCallback = std::function<void(const RoundMetrics&)>;
/// Called with each client's synthetic set (round, client, images), in
/// participant order, before the server trains on them.
using SyntheticCallback = std::function<void(std::size_t, std::size_t, const LabeledDataset&)>;

FedRun run_feddgm(const FedConfig& cfg, const FedData& data, const Generator& gen, const RoundCallback& on_round = {},
                  const SyntheticCallback& on_synthetic = {});
/// fedavg, fedprox or fednova; clients train the global architecture.
FedRun run_baseline(const FedConfig& cfg, const FedData& data, const RoundCallback& on_round = {});
FedRun run_feddm_lite(const FedConfig& cfg, const FedData& data, const RoundCallback& on_round = {},
                      const SyntheticCallback& on_synthetic = {});
/// Dispatches on cfg.method; `gen` may be null for methods that do not use it.
FedRun run_method(const FedConfig& cfg, const FedData& data, const Generator* gen, const RoundCallback& on_round = {},
                  const SyntheticCallback& on_synthetic = {});

struct FeddmLiteResult {
    LabeledDataset synthetic;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// One client's feddm-lite distillation: ipc images per class, initialized
/// from the client's own samples where available and uniform noise otherwise.
FeddmLiteResult feddm_lite_client(const LabeledDataset& ds, std::span<const std::size_t> shard, std::size_t ipc,
                                  const FeddmLiteConfig& cfg, std::uint64_t feature_seed, std::uint64_t seed);

inline constexpr const char* kMetricsHeader =
    "round,method,alpha,seed,client_id_or_GLOBAL,local_loss,mtt_loss_final,global_acc,surrogate_acc,wall_s";

/// One row per participating client and one GLOBAL row per round. wall_s is
/// written as 0 unless `timing` is set, keeping files byte-reproducible.
void write_metrics_csv(std::ostream& out, const FedRun& run, bool timing, bool header = true);

} // namespace feddgm
