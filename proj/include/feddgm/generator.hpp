#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "feddgm/autodiff.hpp"
#include "feddgm/dataset.hpp"
#include "feddgm/models.hpp"

namespace feddgm {

enum class SynthesisKind { conv, dense };

struct GeneratorConfig {
    std::size_t noise_dim = 16;
    std::size_t style_dim = 32;
    /// Channels (conv) or hidden units (dense) of the synthesis layers.
    std::size_t channels = 16;
    std::size_t out_channels = 8;
    std::size_t encoder_hidden = 64;
    std::size_t max_epochs = 150;
    std::size_t batch_size = 64;
    double lr = 3e-3;
    double target_mse = 0.005;
    double kl_weight = 0.05;
    std::uint64_t seed = 0;

    bool operator==(const GeneratorConfig&) const = default;
};

struct GeneratorMeta {
    std::uint64_t proxy_hash = 0;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
    double final_mse = 0.0;
    bool converged = false;

    bool operator==(const GeneratorMeta&) const = default;
};

/// Class-conditional decoder: mapping MLP (noise, class) -> w, followed by K
/// synthesis layers L_1..L_K. The latent at layer n is the output of L_n
/// (n = 0 is the mapping output), and decoding from layer n applies
/// L_{n+1}..L_K. Parameters are frozen once pretrained.
struct Generator {
    SynthesisKind kind = SynthesisKind::conv;
    ImageShape image;
    std::size_t classes = 0;
    GeneratorConfig config;
    ParamLayout layout;
    std::vector<double> params;
    /// Encoder half, kept only to measure reconstruction quality.
    ParamLayout encoder_layout;
    std::vector<double> encoder_params;
    /// Per-sample latent shape for layers 0..K.
    std::vector<Shape> layer_shapes;
    GeneratorMeta meta;

    std::size_t depth() const noexcept { return layer_shapes.size() - 1; }
    std::size_t default_layer() const noexcept { return depth() - 2; }
    Shape latent_shape(std::size_t layer, std::size_t n) const;
    bool operator==(const Generator&) const = default;
};

/// Untrained generator with the architecture implied by the image shape:
/// conv synthesis when H and W are divisible by 4, dense otherwise.
Generator generator_new(const ImageShape& image, std::size_t classes, const GeneratorConfig& config);

/// Mapping network output [N, style_dim].
ad::Var generator_mapping(const Generator& g, ad::Var params, ad::Var noise, ad::Var onehot);
/// Applies layers from+1..to to a [N, ...] latent at layer `from`.
ad::Var generator_synthesize(const Generator& g, ad::Var params, ad::Var z, std::size_t from, std::size_t to);
inline ad::Var generator_decode(const Generator& g, ad::Var params, ad::Var z, std::size_t layer) {
    return generator_synthesize(g, params, z, layer, g.depth());
}

/// Trains the decoder as the decoding half of a class-conditional variational
/// autoencoder on the proxy set, so random standard-normal noise decodes to
/// plausible class samples. Stops at target_mse or max_epochs.
Generator pretrain_decoder(const LabeledDataset& proxy, const GeneratorConfig& config);

/// Mean per-pixel squared error of decode(encode_mean(x), y) against x.
double reconstruction_mse(const Generator& g, const LabeledDataset& ds);

struct LatentSet {
    std::size_t client_id = 0;
    std::size_t layer = 0;
    Tensor<double> codes;
    std::vector<int> labels;

    std::size_t count() const noexcept { return labels.size(); }
    bool operator==(const LatentSet&) const = default;
};

/// ipc codes per class, class-major order: codes for W ~ N(0, I) pushed
/// through the mapping net and synthesis layers 1..n.
LatentSet init_latents(const Generator& g, std::size_t layer, std::size_t ipc, std::size_t classes,
                       std::uint64_t seed);

/// Host-side decode to images [N, H, W, C] in (0,1).
Tensor<double> decode(const Generator& g, const LatentSet& z);

/// Pushes codes from layer `from` to layer `to` (to >= from).
Tensor<double> lift_latents(const Generator& g, const Tensor<double>& codes, std::size_t from, std::size_t to);

struct LatentFit {
    Tensor<double> codes;
    std::vector<double> mse;
};

/// Adam on latent codes at `layer` to reproduce `targets` [N, H, W, C].
LatentFit fit_latents(const Generator& g, std::size_t layer, Tensor<double> init, const Tensor<double>& targets,
                      std::size_t steps, double lr);

void save_generator(const std::filesystem::path& path, const Generator& g);
Generator load_generator(const std::filesystem::path& path);

/// Portable tensor file: "FDTN", u32 dtype (1 = f32, 2 = f64), u32 rank,
/// u64 extents, little-endian payload.
void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t);
void write_tensor_file(const std::filesystem::path& path, const Tensor<double>& t);
Tensor<double> read_tensor_file(const std::filesystem::path& path);

/// images.fdtn plus labels.txt (one label per line) under `dir`.
void dump_synthetic(const std::filesystem::path& dir, const Tensor<double>& images, const std::vector<int>& labels);

std::uint64_t dataset_hash(const LabeledDataset& ds);

} // namespace feddgm
