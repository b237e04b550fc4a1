#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddgm/federation.hpp"
#include "feddgm/generator.hpp"
#include "feddgm/theory.hpp"

namespace feddgm {

/// Model architecture without the data-dependent input shape and class count.
struct ArchConfig {
    Family family = Family::mlp;
    std::size_t depth = 1;
    std::size_t width = 64;
    Activation activation = Activation::relu;

    bool operator==(const ArchConfig&) const = default;
};

struct DataSource {
    std::string source = "tiny-digits";
    std::size_t samples = 0;
    std::size_t classes = 0;
    std::size_t dim = 2;
    double noise = -1.0;
    std::uint64_t seed = 0;
    /// Stratified share held out to pretrain the generator.
    double proxy_fraction = 0.2;
    /// Stratified share of the remainder used as the test set.
    double test_fraction = 0.25;

    bool operator==(const DataSource&) const = default;
};

/// Empty axes are not swept. Values are applied on top of the base config.
struct SweepAxes {
    std::vector<Method> method;
    std::vector<double> alpha;
    std::vector<std::size_t> ipc;
    std::vector<int> layer;
    std::vector<std::size_t> local_epochs;
    std::vector<std::size_t> surrogate_depth;

    bool empty() const noexcept;
    bool operator==(const SweepAxes&) const = default;
};

struct TheoryConfig {
    theory::ToyFamily family = theory::ToyFamily::overparameterized;
    std::size_t dim = 20;
    std::size_t samples = 10;
    std::size_t distilled = 15;
    std::size_t agents = 1;
    double noise = 0.0;
    std::vector<double> beta_d{1.0, 10.0, 100.0};
    double beta_star = 1e5;
    std::size_t steps = 1000;
    std::size_t burn_in = 2000;
    double eps = 1e-3;
    bool dump_chains = false;

    bool operator==(const TheoryConfig&) const = default;
};

struct ExperimentConfig {
    DataSource data;
    /// Pretrained generator file; empty means pretrain from `generator`.
    std::string generator_path;
    GeneratorConfig generator;
    std::size_t clients = 10;
    std::size_t participants = 0;
    std::size_t rounds = 10;
    Method method = Method::feddgm;
    double alpha = 0.5;
    ArchConfig surrogate;
    /// Unset means the surrogate scaled x2 in width and +1 in depth.
    std::optional<ArchConfig> global;
    DistillConfig distill;
    std::size_t global_epochs = 100;
    std::size_t global_batch = 64;
    double global_lr = 0.05;
    double prox_mu = 0.01;
    bool accumulate = false;
    FeddmLiteConfig feddm;
    std::size_t threads = 1;
    std::vector<std::uint64_t> seeds{0};
    SweepAxes sweep;
    /// Concurrent sweep cells or theory chains.
    std::size_t workers = 1;
    bool timing = false;
    std::string output_dir;
    TheoryConfig theory;

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing fields keep their defaults. Unknown fields and type mismatches
/// raise ConfigError naming the field path, e.g. "config.distill.ipc".
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Reads a config file or a manifest written by the harness (its "config").
ExperimentConfig load_config(const std::filesystem::path& path);
/// The published schema (docs/config.schema.json).
nlohmann::json config_schema();

struct PreparedData {
    LabeledDataset full;
    LabeledDataset proxy;
    LabeledDataset pool;
    LabeledDataset test;
};

/// Proxy and test splits depend only on the data seed, so every run seed and
/// sweep cell sees the same pool, test set and generator.
PreparedData prepare_data(const DataSource& source);

/// Replaces every implicit default (sample count, noise, global architecture,
/// participant count, generator layer) with its concrete value.
ExperimentConfig resolve(const ExperimentConfig& cfg, const PreparedData& data);

FedConfig make_fed_config(const ExperimentConfig& cfg, const LabeledDataset& pool, std::uint64_t seed);

/// Loads generator_path, or pretrains on the proxy set.
Generator obtain_generator(const ExperimentConfig& cfg, const PreparedData& data);

/// Axis settings for one sweep cell, e.g. "alpha=0.1;ipc=5".
struct SweepCell {
    std::string label;
    ExperimentConfig config;
};
std::vector<SweepCell> expand_sweep(const ExperimentConfig& cfg);

struct SummaryRow {
    std::string method;
    std::string alpha;
    std::string architecture;
    std::string axis;
    std::size_t series = 0;
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample standard deviation of final-round global accuracy per
/// (method, alpha, architecture[, axis]) cell. Architecture is read from a
/// manifest.json next to each CSV when present.
std::vector<SummaryRow> summarize(const std::vector<std::filesystem::path>& csv_paths);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);

/// Entry point of the command-line tool. Returns 0 on success, 1 on a
/// configuration error, 2 on a runtime failure.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace feddgm
