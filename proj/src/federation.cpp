#include "feddgm/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>

#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "feddgm/optim.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Seed stream tags.
enum : std::uint64_t {
    kSample = 1,
    kLocal,
    kLatents,
    kGlobalTrain,
    kSurrogateTrain,
    kGlobalInit,
    kSurrogateInit,
    kFeatures,
    kSynthInit,
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t float_width(const FedConfig& cfg) {
    return cfg.distill.precision == Precision::f64 ? 8 : 4;
}

void check_data(const FedConfig& cfg, const FedData& data) {
    cfg.validate();
    if (data.shards.size() != cfg.clients)
        throw ConfigError("partition has " + std::to_string(data.shards.size()) + " clients, config expects " +
                          std::to_string(cfg.clients));
    for (const auto* spec : {&cfg.surrogate, &cfg.global}) {
        if (spec->input != data.train.shape || spec->classes != data.train.classes)
            throw ConfigError("model spec " + spec->describe() + " does not match dataset " + data.train.name);
    }
    if (data.test.size() == 0) throw ConfigError("empty test set");
}

SgdOptions server_options(const FedConfig& cfg, std::uint64_t seed) {
    SgdOptions o;
    o.epochs = cfg.global_epochs;
    o.batch_size = cfg.global_batch;
    o.lr = cfg.global_lr;
    o.seed = seed;
    o.precision = cfg.distill.precision;
    return o;
}

LabeledDataset concat(const std::vector<LabeledDataset>& parts, const LabeledDataset& like, const std::string& name) {
    LabeledDataset out;
    out.name = name;
    out.classes = like.classes;
    out.shape = like.shape;
    for (const auto& p : parts) {
        out.images.insert(out.images.end(), p.images.begin(), p.images.end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

FedRun make_run(const FedConfig& cfg) {
    FedRun run;
    run.method = cfg.method;
    run.alpha = cfg.alpha;
    run.seed = cfg.seed;
    return run;
}

void finish_round(FedRun& run, RoundMetrics m, const Channel& channel, Clock::time_point t0,
                  const RoundCallback& on_round) {
    m.upload_bytes = channel.round_bytes(m.round);
    m.wall_s = seconds_since(t0);
    if (on_round) on_round(m);
    run.rounds.push_back(std::move(m));
}

} // namespace

std::string to_string(Method m) {
    switch (m) {
    case Method::feddgm: return "feddgm";
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::fednova: return "fednova";
    default: return "feddm-lite";
    }
}

Method parse_method(const std::string& s) {
    for (auto m : {Method::feddgm, Method::fedavg, Method::fedprox, Method::fednova, Method::feddm_lite})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown method '" + s + "' (expected feddgm, fedavg, fedprox, fednova or feddm-lite)");
}

std::string to_string(Payload p) { return p == Payload::params ? "params" : "images"; }

void FedConfig::validate() const {
    if (clients < 1) throw ConfigError("clients must be at least 1");
    if (participants > clients) throw ConfigError("participants must lie in [1, clients]");
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (prox_mu < 0.0) throw ConfigError("prox_mu must be non-negative");
    if (!(global_lr >= 0.0)) throw ConfigError("global_lr must be non-negative");
    if (global_batch < 1) throw ConfigError("global_batch must be at least 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (feddm.feature_width < 1) throw ConfigError("feddm feature_width must be at least 1");
    surrogate.validate();
    global.validate();
    distill.validate();
}

FedConfig default_fed_config(const ImageShape& image, std::size_t classes) {
    FedConfig c;
    c.surrogate.family = Family::mlp;
    c.surrogate.depth = 1;
    c.surrogate.width = 64;
    c.surrogate.input = image;
    c.surrogate.classes = classes;
    c.global = scaled_spec(c.surrogate);
    return c;
}

Upload Channel::send(std::size_t round, std::size_t client, Upload message) {
    TransportRecord r{round, client, Payload::params, 0, 0};
    if (const auto* p = std::get_if<ParamVector>(&message)) {
        r.items = p->size();
        r.bytes = p->size() * float_bytes_;
    } else {
        const auto& ds = std::get<LabeledDataset>(message);
        r.kind = Payload::images;
        r.items = ds.size();
        r.bytes = ds.images.size() * float_bytes_ + ds.labels.size() * sizeof(std::int32_t);
    }
    log_.push_back(r);
    return message;
}

std::size_t Channel::count(Payload kind) const {
    return static_cast<std::size_t>(
        std::count_if(log_.begin(), log_.end(), [&](const TransportRecord& r) { return r.kind == kind; }));
}

std::size_t Channel::items(std::size_t round, std::size_t client, Payload kind) const {
    std::size_t n = 0;
    for (const auto& r : log_)
        if (r.round == round && r.client == client && r.kind == kind) n += r.items;
    return n;
}

std::size_t Channel::round_bytes(std::size_t round) const {
    std::size_t n = 0;
    for (const auto& r : log_)
        if (r.round == round) n += r.bytes;
    return n;
}

ParamVector aggregate_weighted(const std::vector<ParamVector>& params, const std::vector<double>& weights) {
    if (params.empty()) throw ConfigError("aggregate_weighted: no parameter vectors");
    if (params.size() != weights.size()) throw ShapeError("aggregate_weighted: one weight per vector required");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("aggregate_weighted: weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw ConfigError("aggregate_weighted: weights sum to zero");
    ParamVector out = params.front();
    std::fill(out.values.begin(), out.values.end(), 0.0);
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].size() != out.size()) throw ShapeError("aggregate_weighted: parameter vectors differ in length");
        const double w = weights[k] / total;
        if (w == 0.0) continue;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += w * params[k].values[i];
    }
    return out;
}

std::vector<std::size_t> sample_participants(std::size_t clients, std::size_t k, std::uint64_t seed, std::size_t round) {
    std::vector<std::size_t> ids(clients);
    std::iota(ids.begin(), ids.end(), 0);
    if (k >= clients) return ids;
    Rng rng(derive_seed({seed, kSample, round}));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto guarded = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t workers = std::min(threads, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) guarded(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) guarded(i);
            });
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

FedRun run_feddgm(const FedConfig& cfg, const FedData& data, const Generator& gen, const RoundCallback& on_round,
                  const SyntheticCallback& on_synthetic) {
    check_data(cfg, data);
    if (gen.image != data.train.shape || gen.classes != data.train.classes)
        throw ConfigError("generator does not match dataset " + data.train.name);
    const std::size_t layer = cfg.distill.resolved_layer(gen);
    FedRun run = make_run(cfg);
    Channel channel(float_width(cfg));
    ParamVector theta_g = model_new(cfg.surrogate, derive_seed({cfg.seed, kSurrogateInit}));
    ParamVector w_g = model_new(cfg.global, derive_seed({cfg.seed, kGlobalInit}));
    std::vector<LabeledDataset> history;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto t0 = Clock::now();
        const auto ids = sample_participants(cfg.clients, cfg.participants_per_round(), cfg.seed, t);
        const std::size_t k = ids.size();
        std::vector<ParamVector> uploaded(k);
        std::vector<ClientMetrics> metrics(k);

        parallel_for(k, cfg.threads, [&](std::size_t j) {
            const auto& shard = data.shards[ids[j]];
            auto local = client_update(theta_g, cfg.surrogate, data.train, shard.indices, cfg.distill,
                                       derive_seed({cfg.seed, kLocal, t, ids[j]}));
            metrics[j] = {ids[j], local.stats.last_epoch_loss, kNaN, false};
            uploaded[j] = std::move(local.params);
        });
        // Uploads are logged in participant order so the audit trail does not
        // depend on thread scheduling.
        for (std::size_t j = 0; j < k; ++j)
            uploaded[j] = std::get<ParamVector>(channel.send(t, ids[j], std::move(uploaded[j])));

        std::vector<LabeledDataset> synthetic(k);
        parallel_for(k, cfg.threads, [&](std::size_t j) {
            auto z0 = init_latents(gen, layer, cfg.distill.ipc, data.train.classes,
                                   derive_seed({cfg.seed, kLatents, t, ids[j]}));
            z0.client_id = ids[j];
            try {
                auto r = distill_client(theta_g, uploaded[j], gen, z0, cfg.surrogate, cfg.distill);
                metrics[j].mtt_loss_final = r.final_loss;
                synthetic[j] = synthetic_dataset(gen, r.latents, "synthetic");
            } catch (const ClientDidNotMoveError&) {
                metrics[j].skipped = true;
            }
        });
        std::vector<LabeledDataset> kept;
        for (std::size_t j = 0; j < k; ++j) {
            if (metrics[j].skipped) continue;
            if (on_synthetic) on_synthetic(t, ids[j], synthetic[j]);
            kept.push_back(std::move(synthetic[j]));
        }
        if (kept.empty()) throw RoundAbortedError("round " + std::to_string(t) + ": every client was skipped");

        auto round_set = concat(kept, data.train, "synthetic");
        if (cfg.accumulate) {
            history.push_back(std::move(round_set));
            round_set = concat(history, data.train, "synthetic");
        }
        train_sgd(w_g, cfg.global, round_set, server_options(cfg, derive_seed({cfg.seed, kGlobalTrain, t})));
        train_sgd(theta_g, cfg.surrogate, round_set, server_options(cfg, derive_seed({cfg.seed, kSurrogateTrain, t})));

        RoundMetrics m;
        m.round = t;
        m.seed = cfg.seed;
        m.clients = std::move(metrics);
        m.global_acc = evaluate(w_g, cfg.global, data.test);
        m.surrogate_acc = evaluate(theta_g, cfg.surrogate, data.test);
        finish_round(run, std::move(m), channel, t0, on_round);
    }
    run.transport = channel.log();
    run.global_params = std::move(w_g);
    run.surrogate_params = std::move(theta_g);
    return run;
}

FedRun run_baseline(const FedConfig& cfg, const FedData& data, const RoundCallback& on_round) {
    if (cfg.method != Method::fedavg && cfg.method != Method::fedprox && cfg.method != Method::fednova)
        throw ConfigError("run_baseline: method must be fedavg, fedprox or fednova");
    check_data(cfg, data);
    FedRun run = make_run(cfg);
    Channel channel(float_width(cfg));
    ParamVector w_g = model_new(cfg.global, derive_seed({cfg.seed, kGlobalInit}));
    DistillConfig local_cfg = cfg.distill;
    local_cfg.prox_mu = cfg.method == Method::fedprox ? cfg.prox_mu : 0.0;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto t0 = Clock::now();
        const auto ids = sample_participants(cfg.clients, cfg.participants_per_round(), cfg.seed, t);
        const std::size_t k = ids.size();
        std::vector<ParamVector> uploaded(k);
        std::vector<std::size_t> steps(k);
        std::vector<ClientMetrics> metrics(k);

        parallel_for(k, cfg.threads, [&](std::size_t j) {
            const auto& shard = data.shards[ids[j]];
            auto local = client_update(w_g, cfg.global, data.train, shard.indices, local_cfg,
                                       derive_seed({cfg.seed, kLocal, t, ids[j]}));
            metrics[j] = {ids[j], local.stats.last_epoch_loss, kNaN, false};
            steps[j] = local.stats.steps;
            uploaded[j] = std::move(local.params);
        });
        std::vector<double> weights(k);
        for (std::size_t j = 0; j < k; ++j) {
            uploaded[j] = std::get<ParamVector>(channel.send(t, ids[j], std::move(uploaded[j])));
            weights[j] = static_cast<double>(data.shards[ids[j]].size());
        }

        if (cfg.method == Method::fednova) {
            // Normalized directions d_m = (w_g - w_m) / tau_m, rescaled by the
            // weighted mean step count.
            const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
            double tau_eff = 0.0;
            std::vector<double> dir(w_g.size(), 0.0);
            for (std::size_t j = 0; j < k; ++j) {
                const double p = weights[j] / total;
                tau_eff += p * static_cast<double>(steps[j]);
                if (steps[j] == 0) continue;
                const double s = p / static_cast<double>(steps[j]);
                for (std::size_t i = 0; i < dir.size(); ++i) dir[i] += s * (w_g.values[i] - uploaded[j].values[i]);
            }
            for (std::size_t i = 0; i < dir.size(); ++i) w_g.values[i] -= tau_eff * dir[i];
        } else {
            w_g = aggregate_weighted(uploaded, weights);
        }

        RoundMetrics m;
        m.round = t;
        m.seed = cfg.seed;
        m.clients = std::move(metrics);
        m.global_acc = evaluate(w_g, cfg.global, data.test);
        m.surrogate_acc = m.global_acc;
        finish_round(run, std::move(m), channel, t0, on_round);
    }
    run.transport = channel.log();
    run.global_params = w_g;
    run.surrogate_params = std::move(w_g);
    return run;
}

FeddmLiteResult feddm_lite_client(const LabeledDataset& ds, std::span<const std::size_t> shard, std::size_t ipc,
                                  const FeddmLiteConfig& cfg, std::uint64_t feature_seed, std::uint64_t seed) {
    if (shard.empty()) throw ConfigError("feddm_lite_client: empty shard");
    if (ipc < 1) throw ConfigError("ipc must be at least 1");
    const std::size_t classes = ds.classes, d = ds.shape.numel(), n = ipc * classes;
    ModelSpec fspec;
    fspec.family = Family::mlp;
    fspec.depth = 1;
    fspec.width = cfg.feature_width;
    fspec.input = ds.shape;
    fspec.classes = cfg.feature_width;
    const auto features = model_new(fspec, feature_seed);

    std::vector<std::vector<std::size_t>> by_class(classes);
    for (auto i : shard) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

    // Real class-mean embeddings, and the syn -> class-mean averaging matrix
    // with zero rows for classes this client does not hold.
    const auto real = logits(features, fspec, ds.batch<double>(shard));
    Tensor<double> target({classes, cfg.feature_width});
    Tensor<double> avg({classes, n});
    for (std::size_t r = 0; r < shard.size(); ++r) {
        const auto c = static_cast<std::size_t>(ds.labels[shard[r]]);
        for (std::size_t f = 0; f < cfg.feature_width; ++f)
            target[c * cfg.feature_width + f] += real[r * cfg.feature_width + f] / by_class[c].size();
    }
    for (std::size_t c = 0; c < classes; ++c)
        if (!by_class[c].empty())
            for (std::size_t k = 0; k < ipc; ++k) avg[c * n + c * ipc + k] = 1.0 / static_cast<double>(ipc);

    FeddmLiteResult out;
    out.synthetic.name = "feddm-lite";
    out.synthetic.classes = classes;
    out.synthetic.shape = ds.shape;
    std::vector<double> x(n * d);
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t c = 0; c < classes; ++c) {
        auto& rows = by_class[c];
        std::shuffle(rows.begin(), rows.end(), rng);
        for (std::size_t k = 0; k < ipc; ++k) {
            double* dst = x.data() + (c * ipc + k) * d;
            if (rows.empty()) {
                for (std::size_t p = 0; p < d; ++p) dst[p] = unit(rng);
            } else {
                auto img = ds.image(rows[k % rows.size()]);
                std::copy(img.begin(), img.end(), dst);
            }
            out.synthetic.labels.push_back(static_cast<int>(c));
        }
    }

    ad::Graph g;
    const Shape xshape{n, ds.shape.height, ds.shape.width, ds.shape.channels};
    auto xs = g.input(xshape, "synthetic", ad::LeafKind::Parameter);
    auto fp = g.constant(Tensor<double>({features.size()}, features.values), "features");
    auto means = ad::matmul(g.constant(avg, "avg"), forward(fspec, fp, xs));
    auto target_means = g.constant(target, "target");
    auto loss = ad::sum_squares(means - target_means);
    auto dx = g.grad(loss, xs);
    ad::Executor<double> ex(g, {loss, dx});
    Adam adam(cfg.lr);
    auto step = [&] {
        ad::Bindings<double> b;
        b.set(xs, Tensor<double>(xshape, x));
        return ex.run(b);
    };
    for (std::size_t it = 0; it < cfg.iters; ++it) {
        auto res = step();
        if (it == 0) out.initial_loss = res[0].item();
        adam.step(x, res[1].values);
        for (auto& v : x) v = std::clamp(v, 0.0, 1.0);
    }
    out.final_loss = step()[0].item();
    if (cfg.iters == 0) out.initial_loss = out.final_loss;
    out.synthetic.images.assign(x.begin(), x.end());
    return out;
}

FedRun run_feddm_lite(const FedConfig& cfg, const FedData& data, const RoundCallback& on_round,
                      const SyntheticCallback& on_synthetic) {
    check_data(cfg, data);
    FedRun run = make_run(cfg);
    Channel channel(float_width(cfg));
    ParamVector w_g = model_new(cfg.global, derive_seed({cfg.seed, kGlobalInit}));
    std::vector<LabeledDataset> history;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto t0 = Clock::now();
        const auto ids = sample_participants(cfg.clients, cfg.participants_per_round(), cfg.seed, t);
        const std::size_t k = ids.size();
        std::vector<LabeledDataset> uploaded(k);
        std::vector<ClientMetrics> metrics(k);
        const auto feature_seed = derive_seed({cfg.seed, kFeatures, t});
        parallel_for(k, cfg.threads, [&](std::size_t j) {
            auto r = feddm_lite_client(data.train, data.shards[ids[j]].indices, cfg.distill.ipc, cfg.feddm, feature_seed,
                                       derive_seed({cfg.seed, kSynthInit, t, ids[j]}));
            metrics[j] = {ids[j], r.final_loss, kNaN, false};
            uploaded[j] = std::move(r.synthetic);
        });
        for (std::size_t j = 0; j < k; ++j)
            uploaded[j] = std::get<LabeledDataset>(channel.send(t, ids[j], std::move(uploaded[j])));
        if (on_synthetic)
            for (std::size_t j = 0; j < k; ++j) on_synthetic(t, ids[j], uploaded[j]);

        auto round_set = concat(uploaded, data.train, "feddm-lite");
        if (cfg.accumulate) {
            history.push_back(std::move(round_set));
            round_set = concat(history, data.train, "feddm-lite");
        }
        train_sgd(w_g, cfg.global, round_set, server_options(cfg, derive_seed({cfg.seed, kGlobalTrain, t})));

        RoundMetrics m;
        m.round = t;
        m.seed = cfg.seed;
        m.clients = std::move(metrics);
        m.global_acc = evaluate(w_g, cfg.global, data.test);
        m.surrogate_acc = m.global_acc;
        finish_round(run, std::move(m), channel, t0, on_round);
    }
    run.transport = channel.log();
    run.global_params = w_g;
    run.surrogate_params = std::move(w_g);
    return run;
}

FedRun run_method(const FedConfig& cfg, const FedData& data, const Generator* gen, const RoundCallback& on_round,
                  const SyntheticCallback& on_synthetic) {
    switch (cfg.method) {
    case Method::feddgm:
        if (!gen) throw ConfigError("feddgm needs a pretrained generator");
        return run_feddgm(cfg, data, *gen, on_round, on_synthetic);
    case Method::feddm_lite: return run_feddm_lite(cfg, data, on_round, on_synthetic);
    default: return run_baseline(cfg, data, on_round);
    }
}

namespace {

void put_number(std::ostream& out, double v) {
    if (std::isnan(v))
        out << "nan";
    else
        out << std::setprecision(10) << v;
}

double median(std::vector<double> v) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

} // namespace

void write_metrics_csv(std::ostream& out, const FedRun& run, bool timing, bool header) {
    if (header) out << kMetricsHeader << '\n';
    for (const auto& r : run.rounds) {
        auto prefix = [&] { out << r.round << ',' << to_string(run.method) << ',' << run.alpha << ',' << run.seed << ','; };
        auto tail = [&] {
            out << ',';
            put_number(out, r.global_acc);
            out << ',';
            put_number(out, r.surrogate_acc);
            out << ',';
            put_number(out, timing ? r.wall_s : 0.0);
            out << '\n';
        };
        std::vector<double> losses, mtts;
        for (const auto& c : r.clients) {
            prefix();
            out << c.client_id << ',';
            put_number(out, c.local_loss);
            out << ',';
            put_number(out, c.mtt_loss_final);
            tail();
            losses.push_back(c.local_loss);
            if (!std::isnan(c.mtt_loss_final)) mtts.push_back(c.mtt_loss_final);
        }
        prefix();
        out << "GLOBAL,";
        put_number(out, losses.empty() ? kNaN : std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size());
        out << ',';
        put_number(out, median(mtts));
        tail();
    }
}

} // namespace feddgm
