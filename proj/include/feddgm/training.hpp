#pragma once

#include <cstdint>
#include <span>

#include "feddgm/dataset.hpp"
#include "feddgm/models.hpp"

namespace feddgm {

enum class Precision { f32, f64 };

struct SgdOptions {
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double lr = 0.05;
    double momentum = 0.0;
    /// Adds (mu/2)||theta - theta_start||^2 to the loss when positive.
    double prox_mu = 0.0;
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
};

struct TrainStats {
    /// Mean mini-batch loss over the last epoch, measured before each step.
    double last_epoch_loss = 0.0;
    std::size_t steps = 0;
};

/// Mini-batch SGD over `rows` of `ds`, reshuffled every epoch. Throws
/// DivergenceError if the loss or gradient turns non-finite.
TrainStats train_sgd(ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                     std::span<const std::size_t> rows, const SgdOptions& options);

inline TrainStats train_sgd(ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                            const SgdOptions& options) {
    const auto rows = all_indices(ds);
    return train_sgd(params, spec, ds, rows, options);
}

} // namespace feddgm
