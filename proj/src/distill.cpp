#include "feddgm/distill.hpp"

#include <cmath>

#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "feddgm/optim.hpp"

namespace feddgm {

std::string to_string(LatentOptimizer o) {
    switch (o) {
    case LatentOptimizer::sgd: return "sgd";
    case LatentOptimizer::momentum: return "momentum";
    default: return "adam";
    }
}

LatentOptimizer parse_latent_optimizer(const std::string& s) {
    if (s == "sgd") return LatentOptimizer::sgd;
    if (s == "momentum") return LatentOptimizer::momentum;
    if (s == "adam") return LatentOptimizer::adam;
    throw ConfigError("unknown latent optimizer '" + s + "' (expected sgd, momentum or adam)");
}

void DistillConfig::validate() const {
    if (local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
    if (student_steps < 1) throw ConfigError("student_steps must be at least 1");
    if (ipc < 1) throw ConfigError("ipc must be at least 1");
    if (local_batch < 1) throw ConfigError("local_batch must be at least 1");
    for (auto [name, v] : {std::pair{"lr_local", lr_local}, {"lr_student", lr_student}, {"lr_latent", lr_latent}})
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a non-negative number");
    if (prox_mu < 0.0) throw ConfigError("prox_mu must be non-negative");
    if (local_momentum < 0.0 || local_momentum >= 1.0) throw ConfigError("local_momentum must lie in [0,1)");
    if (latent_momentum < 0.0 || latent_momentum >= 1.0) throw ConfigError("latent_momentum must lie in [0,1)");
}

std::size_t DistillConfig::resolved_layer(const Generator& g) const {
    if (layer < 0) return g.default_layer();
    if (static_cast<std::size_t>(layer) >= g.depth())
        throw ConfigError("distillation layer " + std::to_string(layer) + " must be below generator depth " +
                          std::to_string(g.depth()));
    return static_cast<std::size_t>(layer);
}

LocalResult client_update(const ParamVector& theta_g, const ModelSpec& spec, const LabeledDataset& ds,
                          std::span<const std::size_t> shard, const DistillConfig& cfg, std::uint64_t seed) {
    if (shard.empty()) throw ConfigError("client_update: empty shard");
    LocalResult r{theta_g, {}};
    SgdOptions o;
    o.epochs = cfg.local_epochs;
    o.batch_size = cfg.local_batch;
    o.lr = cfg.lr_local;
    o.momentum = cfg.local_momentum;
    o.prox_mu = cfg.prox_mu;
    o.seed = seed;
    o.precision = cfg.precision;
    r.stats = train_sgd(r.params, spec, ds, shard, o);
    return r;
}

double mtt_loss(std::span<const double> theta_hat, std::span<const double> theta_m, std::span<const double> theta_g) {
    if (theta_hat.size() != theta_m.size() || theta_g.size() != theta_m.size())
        throw ShapeError("mtt_loss: parameter vectors differ in length");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < theta_m.size(); ++i) {
        num += (theta_hat[i] - theta_m[i]) * (theta_hat[i] - theta_m[i]);
        den += (theta_g[i] - theta_m[i]) * (theta_g[i] - theta_m[i]);
    }
    if (den == 0.0) throw ClientDidNotMoveError("client did not move: theta_g == theta_m");
    return num / den;
}

ad::Var mtt_loss(ad::Var theta_hat, ad::Var theta_m, ad::Var theta_g) {
    return ad::div(ad::sum_squares(theta_hat - theta_m), ad::sum_squares(theta_g - theta_m));
}

MttGraph::MttGraph(const Generator& g, const ModelSpec& spec, const LatentSet& z0, std::size_t student_steps,
                   double lr_student) {
    const std::size_t n = z0.count();
    const std::size_t total = param_layout(spec).total;
    z = graph.input(z0.codes.shape, "latents", ad::LeafKind::Parameter);
    gen = graph.input({g.layout.total}, "generator");
    theta_g = graph.input({total}, "theta_g");
    theta_m = graph.input({total}, "theta_m");
    onehot = graph.input({n, spec.classes}, "onehot");
    auto images = generator_decode(g, gen, z, z0.layer);
    ad::Var theta = theta_g;
    for (std::size_t s = 0; s < student_steps; ++s) {
        auto inner = ad::softmax_cross_entropy(forward(spec, theta, images), onehot);
        theta = ad::sgd_step_differentiable(theta, inner, lr_student);
    }
    loss = mtt_loss(theta, theta_m, theta_g);
    dz = graph.grad(loss, z);
}

namespace {

template <typename T>
Tensor<T> as_tensor(const std::vector<double>& v) {
    return Tensor<T>({v.size()}, std::vector<T>(v.begin(), v.end()));
}

template <typename T>
DistillResult distill_impl(const ParamVector& theta_g, const ParamVector& theta_m, const Generator& g,
                           const LatentSet& z0, const ModelSpec& spec, const DistillConfig& cfg) {
    DistillResult out{z0, {}, 0.0};
    MttGraph mg(g, spec, z0, cfg.student_steps, cfg.lr_student);
    ad::Executor<T> step(mg.graph, {mg.loss, mg.dz});
    ad::Executor<T> probe(mg.graph, {mg.loss});

    Tensor<T> onehot({z0.count(), spec.classes});
    for (std::size_t i = 0; i < z0.count(); ++i) onehot[i * spec.classes + static_cast<std::size_t>(z0.labels[i])] = T(1);
    ad::Bindings<T> fixed;
    fixed.set(mg.gen, as_tensor<T>(g.params))
        .set(mg.theta_g, as_tensor<T>(theta_g.values))
        .set(mg.theta_m, as_tensor<T>(theta_m.values))
        .set(mg.onehot, onehot);

    auto& z = out.latents.codes.values;
    std::vector<double> velocity(cfg.latent_optimizer == LatentOptimizer::momentum ? z.size() : 0, 0.0);
    Adam adam(cfg.lr_latent);
    auto bind_z = [&](ad::Bindings<T>& b) {
        b.set(mg.z, Tensor<T>(out.latents.codes.shape, std::vector<T>(z.begin(), z.end())));
    };

    for (std::size_t it = 0; it < cfg.distill_iters; ++it) {
        ad::Bindings<T> b = fixed;
        bind_z(b);
        std::vector<Tensor<T>> res;
        try {
            res = step.run(b);
        } catch (const NonFiniteError& e) {
            throw DivergenceError("distillation iteration " + std::to_string(it) + ": " + e.what());
        }
        out.trace.push_back(static_cast<double>(res[0].item()));
        const auto& grad = res[1].values;
        switch (cfg.latent_optimizer) {
        case LatentOptimizer::sgd:
            for (std::size_t i = 0; i < z.size(); ++i) z[i] -= cfg.lr_latent * static_cast<double>(grad[i]);
            break;
        case LatentOptimizer::momentum:
            for (std::size_t i = 0; i < z.size(); ++i) {
                velocity[i] = cfg.latent_momentum * velocity[i] + static_cast<double>(grad[i]);
                z[i] -= cfg.lr_latent * velocity[i];
            }
            break;
        case LatentOptimizer::adam: adam.step(z, grad); break;
        }
    }
    ad::Bindings<T> b = fixed;
    bind_z(b);
    try {
        out.final_loss = static_cast<double>(probe.run(b)[0].item());
    } catch (const NonFiniteError& e) {
        throw DivergenceError("distillation iteration " + std::to_string(cfg.distill_iters) + ": " + e.what());
    }
    return out;
}

} // namespace

DistillResult distill_client(const ParamVector& theta_g, const ParamVector& theta_m, const Generator& g,
                             const LatentSet& z0, const ModelSpec& spec, const DistillConfig& cfg) {
    cfg.validate();
    if (theta_g.size() != theta_m.size() || theta_g.size() != param_layout(spec).total)
        throw ShapeError("distill_client: parameter vectors do not match the surrogate spec");
    if (spec.input != g.image || spec.classes != g.classes)
        throw ShapeError("distill_client: surrogate and generator disagree on data shape");
    mtt_loss(theta_g.values, theta_m.values, theta_g.values); // zero-denominator check
    return cfg.precision == Precision::f64 ? distill_impl<double>(theta_g, theta_m, g, z0, spec, cfg)
                                           : distill_impl<float>(theta_g, theta_m, g, z0, spec, cfg);
}

LabeledDataset synthetic_dataset(const Generator& g, const LatentSet& z, const std::string& name) {
    LabeledDataset ds;
    ds.name = name;
    ds.classes = g.classes;
    ds.shape = g.image;
    ds.labels = z.labels;
    const auto img = decode(g, z);
    ds.images.assign(img.values.begin(), img.values.end());
    return ds;
}

} // namespace feddgm
