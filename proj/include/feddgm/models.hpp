#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "feddgm/autodiff.hpp"
#include "feddgm/dataset.hpp"

namespace feddgm {

enum class Family { mlp, convnet };
enum class Activation { relu, tanh };

std::string to_string(Family f);
std::string to_string(Activation a);
Family parse_family(const std::string& s);
Activation parse_activation(const std::string& s);

/// mlp: `depth` hidden dense layers of `width` units, then a linear head.
/// convnet: `depth` blocks of 3x3 conv (`width` channels) -> activation ->
/// 2x2 mean pool (skipped once a side is odd), then a linear head.
struct ModelSpec {
    Family family = Family::mlp;
    std::size_t depth = 1;
    std::size_t width = 16;
    ImageShape input;
    std::size_t classes = 2;
    Activation activation = Activation::relu;

    void validate() const;
    std::string describe() const;
    bool operator==(const ModelSpec&) const = default;
};

/// The default "larger" global model: width doubled, one extra layer.
ModelSpec scaled_spec(const ModelSpec& base, std::size_t width_factor = 2, std::size_t extra_depth = 1);

struct LayoutEntry {
    std::string name;
    std::size_t offset = 0;
    Shape shape;
    std::size_t fan_in = 0;

    bool operator==(const LayoutEntry&) const = default;
};

struct ParamLayout {
    std::vector<LayoutEntry> entries;
    std::size_t total = 0;

    bool operator==(const ParamLayout&) const = default;
};

ParamLayout param_layout(const ModelSpec& spec);

struct ParamVector {
    ParamLayout layout;
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
    bool operator==(const ParamVector&) const = default;
};

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ParamVector model_new(const ModelSpec& spec, std::uint64_t seed);

std::vector<Tensor<double>> unflatten(const ParamVector& params);
ParamVector flatten(const ParamLayout& layout, const std::vector<Tensor<double>>& tensors);

/// Logits node [N, classes] for `batch` [N, H, W, C] given a flat params node.
ad::Var forward(const ModelSpec& spec, ad::Var params, ad::Var batch);

/// Host-side convenience: build, run, discard.
Tensor<double> logits(const ParamVector& params, const ModelSpec& spec, const Tensor<double>& batch);

/// Fraction of argmax-correct predictions; ties go to the lowest class index.
double evaluate(const ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds);

/// Mean softmax cross-entropy over the given rows, 64-bit.
double dataset_loss(const ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                    std::span<const std::size_t> indices);

void write_spec(std::ostream& out, const ModelSpec& spec);
ModelSpec read_spec(std::istream& in, const std::string& what);

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ParamVector& params);
struct Checkpoint {
    ModelSpec spec;
    ParamVector params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace feddgm
