#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "feddgm/tensor.hpp"

namespace feddgm {

struct ImageShape {
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;

    std::size_t numel() const noexcept { return height * width * channels; }
    bool operator==(const ImageShape&) const = default;
};

std::string to_string(const ImageShape& s);

/// N images of one shape with integer labels. Pixels live in [0,1] and are
/// stored as float, row-major N x H x W x C.
struct LabeledDataset {
    std::string name;
    std::size_t classes = 0;
    ImageShape shape;
    std::vector<float> images;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const float> image(std::size_t i) const {
        return {images.data() + i * shape.numel(), shape.numel()};
    }
    /// Throws FormatError when any invariant is broken.
    void validate() const;

    LabeledDataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;

    /// Batch of the given rows as [n, H, W, C].
    template <typename T>
    Tensor<T> batch(std::span<const std::size_t> indices) const;
    /// One-hot labels [n, classes].
    template <typename T>
    Tensor<T> onehot(std::span<const std::size_t> indices) const;

    bool operator==(const LabeledDataset&) const = default;
};

std::vector<std::size_t> all_indices(const LabeledDataset& ds);

struct BuiltinOptions {
    std::size_t classes = 0; ///< 0 picks the builtin's natural count
    std::size_t samples = 0; ///< total samples, 0 picks the builtin default
    std::size_t dim = 2;     ///< gauss-blobs only
    double noise = -1.0;     ///< negative picks the builtin default
    std::uint64_t seed = 0;
};

/// Builtin names: gauss-blobs, two-spirals, tiny-digits. Anything else is
/// treated as a directory in the IDX layout read by read_idx_dir.
LabeledDataset load_dataset(const std::string& source, const BuiltinOptions& options = {});
bool is_builtin_dataset(const std::string& source);

LabeledDataset make_gauss_blobs(const BuiltinOptions& options);
LabeledDataset make_two_spirals(const BuiltinOptions& options);
LabeledDataset make_tiny_digits(const BuiltinOptions& options);

/// Directory with images.idx, labels.idx and an optional `classes` file
/// holding the class count. Pixels are stored as unsigned bytes (value*255).
void write_idx_dir(const LabeledDataset& ds, const std::filesystem::path& dir);
LabeledDataset read_idx_dir(const std::filesystem::path& dir);

struct ClientShard {
    std::size_t client_id = 0;
    std::vector<std::size_t> indices;
    std::vector<std::size_t> histogram;

    std::size_t size() const noexcept { return indices.size(); }
    bool operator==(const ClientShard&) const = default;
};

/// Per class c, proportions over clients p ~ Dir_M(alpha); class-c indices
/// (shuffled) are cut into consecutive runs with largest-remainder rounding.
/// Partitions with an empty client are redrawn with seed+1, up to 100 times.
std::vector<ClientShard> dirichlet_partition(const LabeledDataset& ds, std::size_t clients, double alpha,
                                             std::uint64_t seed);

/// One draw from Dir_k(alpha), computed through log-Gamma variates so tiny
/// alpha does not underflow to an all-zero vector.
std::vector<double> sample_dirichlet(std::size_t k, double alpha, std::uint64_t seed);

struct StratifiedSplit {
    LabeledDataset first;
    LabeledDataset second;
    std::vector<std::size_t> first_indices;
    std::vector<std::size_t> second_indices;
};

/// Per class, round(fraction * n_c) shuffled samples go to `first`.
StratifiedSplit stratified_split(const LabeledDataset& ds, double fraction, std::uint64_t seed);

/// `first` is the public proxy used to pretrain the generator, `second` the
/// federated pool.
inline StratifiedSplit public_proxy_split(const LabeledDataset& ds, double fraction, std::uint64_t seed) {
    return stratified_split(ds, fraction, seed);
}

void write_partition_manifest(const std::vector<ClientShard>& shards, const std::filesystem::path& path);
std::vector<ClientShard> read_partition_manifest(const std::filesystem::path& path, const LabeledDataset& ds);

} // namespace feddgm
