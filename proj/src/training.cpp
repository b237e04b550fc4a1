#include "feddgm/training.hpp"

#include <algorithm>
#include <map>
#include <memory>

#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

namespace {

template <typename T>
struct StepGraph {
    ad::Graph graph;
    ad::Var params, batch, onehot, loss, dparams;
    std::unique_ptr<ad::Executor<T>> exec;

    StepGraph(const ModelSpec& spec, std::size_t total, std::size_t n, std::size_t classes) {
        params = graph.input({total}, "params", ad::LeafKind::Parameter);
        batch = graph.input({n, spec.input.height, spec.input.width, spec.input.channels}, "batch");
        onehot = graph.input({n, classes}, "onehot");
        loss = ad::softmax_cross_entropy(forward(spec, params, batch), onehot);
        dparams = graph.grad(loss, params);
        exec = std::make_unique<ad::Executor<T>>(graph, std::vector<ad::Var>{loss, dparams});
    }
};

template <typename T>
TrainStats train_impl(ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                      std::span<const std::size_t> rows, const SgdOptions& o) {
    TrainStats stats;
    if (o.epochs == 0 || o.lr == 0.0) return stats;
    const std::size_t total = params.size();
    std::map<std::size_t, std::unique_ptr<StepGraph<T>>> graphs;
    auto graph_for = [&](std::size_t n) -> StepGraph<T>& {
        auto& slot = graphs[n];
        if (!slot) slot = std::make_unique<StepGraph<T>>(spec, total, n, ds.classes);
        return *slot;
    };

    const std::vector<double> start = params.values;
    std::vector<double> velocity(o.momentum > 0.0 ? total : 0, 0.0);
    std::vector<std::size_t> order(rows.begin(), rows.end());
    const std::size_t bs = std::max<std::size_t>(1, std::min(o.batch_size, order.size()));
    Rng rng(derive_seed({o.seed, 0x7a1e}));

    for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += bs) {
            const std::size_t n = std::min(bs, order.size() - begin);
            std::span<const std::size_t> idx(order.data() + begin, n);
            auto& sg = graph_for(n);
            ad::Bindings<T> b;
            b.set(sg.params, Tensor<T>({total}, std::vector<T>(params.values.begin(), params.values.end())))
                .set(sg.batch, ds.batch<T>(idx))
                .set(sg.onehot, ds.onehot<T>(idx));
            std::vector<Tensor<T>> out;
            try {
                out = sg.exec->run(b);
            } catch (const NonFiniteError& e) {
                throw DivergenceError(std::string("local training diverged: ") + e.what());
            }
            loss_sum += static_cast<double>(out[0].item());
            ++batches;
            const auto& g = out[1].values;
            for (std::size_t i = 0; i < total; ++i) {
                double gi = static_cast<double>(g[i]);
                if (o.prox_mu > 0.0) gi += o.prox_mu * (params.values[i] - start[i]);
                if (o.momentum > 0.0) {
                    velocity[i] = o.momentum * velocity[i] + gi;
                    gi = velocity[i];
                }
                params.values[i] -= o.lr * gi;
            }
            ++stats.steps;
        }
        stats.last_epoch_loss = loss_sum / static_cast<double>(batches);
    }
    for (double v : params.values)
        if (!std::isfinite(v)) throw DivergenceError("local training diverged: non-finite parameters");
    return stats;
}

} // namespace

TrainStats train_sgd(ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                     std::span<const std::size_t> rows, const SgdOptions& options) {
    if (rows.empty()) throw ConfigError("train_sgd: no training rows");
    if (options.lr < 0.0) throw ConfigError("learning rate must be non-negative");
    if (params.size() != param_layout(spec).total) throw ShapeError("train_sgd: params do not match spec");
    return options.precision == Precision::f64 ? train_impl<double>(params, spec, ds, rows, options)
                                               : train_impl<float>(params, spec, ds, rows, options);
}

} // namespace feddgm
