#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "feddgm/error.hpp"
#include "feddgm/federation.hpp"

using namespace feddgm;

namespace {

struct World {
    LabeledDataset proxy;
    LabeledDataset pool;
    LabeledDataset test;
    Generator gen;
};

const World& world() {
    static const World w = [] {
        World x;
        BuiltinOptions o;
        o.samples = 1000;
        o.seed = 5;
        auto ds = load_dataset("tiny-digits", o);
        auto split = public_proxy_split(ds, 0.2, 1);
        auto rest = stratified_split(split.second, 0.25, 2);
        x.proxy = split.first;
        x.pool = rest.second;
        x.test = rest.first;
        GeneratorConfig c;
        c.max_epochs = 30;
        c.seed = 1;
        x.gen = pretrain_decoder(x.proxy, c);
        return x;
    }();
    return w;
}

FedConfig small_config(Method m, std::size_t clients, double alpha) {
    const auto& w = world();
    FedConfig c = default_fed_config(w.pool.shape, w.pool.classes);
    c.method = m;
    c.clients = clients;
    c.alpha = alpha;
    c.rounds = 2;
    c.global_epochs = 5;
    c.distill.local_epochs = 3;
    c.distill.student_steps = 3;
    c.distill.distill_iters = 3;
    c.distill.ipc = 2;
    c.feddm.iters = 10;
    return c;
}

FedData make_data(const FedConfig& c) {
    const auto& w = world();
    return {w.pool, w.test, dirichlet_partition(w.pool, c.clients, c.alpha, c.seed)};
}

std::string csv(const FedRun& run, bool timing = false) {
    std::ostringstream s;
    write_metrics_csv(s, run, timing);
    return s.str();
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST(Aggregate, Examples) {
    ModelSpec s;
    s.input = {1, 1, 1};
    s.width = 1;
    auto base = model_new(s, 1);
    auto a = base, b = base;
    std::fill(a.values.begin(), a.values.end(), 1.0);
    std::fill(b.values.begin(), b.values.end(), 3.0);
    EXPECT_EQ(aggregate_weighted({base, base, base}, {1, 2, 3}).values, base.values);
    EXPECT_EQ(aggregate_weighted({a, b}, {1, 0}).values, a.values);
    for (double v : aggregate_weighted({a, b}, {0.5, 0.5}).values) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Aggregate, Errors) {
    ModelSpec s;
    s.input = {1, 1, 1};
    auto p = model_new(s, 1);
    EXPECT_THROW(aggregate_weighted({p, p}, {1.0}), ShapeError);
    EXPECT_THROW(aggregate_weighted({p, p}, {0.0, 0.0}), ConfigError);
    EXPECT_THROW(aggregate_weighted({p}, {-1.0}), ConfigError);
    EXPECT_THROW(aggregate_weighted({}, {}), ConfigError);
    auto q = p;
    q.values.pop_back();
    EXPECT_THROW(aggregate_weighted({p, q}, {1, 1}), ShapeError);
}

TEST(Sampling, WithoutReplacementAndDeterministic) {
    for (std::size_t r = 0; r < 20; ++r) {
        auto ids = sample_participants(10, 4, 7, r);
        ASSERT_EQ(ids.size(), 4u);
        EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
        EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 4u);
        EXPECT_EQ(ids, sample_participants(10, 4, 7, r));
    }
    auto all = sample_participants(5, 5, 1, 0);
    EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
    std::vector<int> hits(50, 0);
    parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 6) throw ConfigError("boom"); }), ConfigError);
}

TEST(FedConfig, Validation) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    EXPECT_NO_THROW(c.validate());
    c.participants = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config(Method::fedavg, 4, 0.5);
    c.rounds = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config(Method::fedavg, 4, 0.5);
    c.prox_mu = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(parse_method("feddm-lite"), Method::feddm_lite);
    EXPECT_THROW(parse_method("scaffold"), ConfigError);
}

TEST(FedConfig, DefaultsMatchTopology) {
    auto c = default_fed_config({8, 8, 1}, 10);
    EXPECT_EQ(c.clients, 10u);
    EXPECT_EQ(c.participants_per_round(), 10u);
    EXPECT_EQ(c.alpha, 0.5);
    EXPECT_EQ(c.global, scaled_spec(c.surrogate));
    EXPECT_LT(param_layout(c.surrogate).total, param_layout(c.global).total);
}

TEST(FedConfig, PartitionMismatchRejected) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    auto d = make_data(c);
    d.shards.pop_back();
    EXPECT_THROW(run_baseline(c, d), ConfigError);
}

TEST(Baselines, FedProxZeroMuIsFedAvg) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    auto d = make_data(c);
    auto avg = run_baseline(c, d);
    c.method = Method::fedprox;
    c.prox_mu = 0.0;
    auto prox = run_baseline(c, d);
    EXPECT_EQ(avg.global_params.values, prox.global_params.values);
    for (std::size_t r = 0; r < c.rounds; ++r) EXPECT_EQ(avg.rounds[r].global_acc, prox.rounds[r].global_acc);
}

TEST(Baselines, FedProxPullsTowardGlobal) {
    auto c = small_config(Method::fedprox, 4, 0.5);
    c.rounds = 1;
    auto d = make_data(c);
    c.prox_mu = 0.0;
    auto loose = run_baseline(c, d);
    c.prox_mu = 5.0;
    auto tight = run_baseline(c, d);
    c.distill.lr_local = 0.0;
    auto start = run_baseline(c, d);
    double dl = 0, dt = 0;
    for (std::size_t i = 0; i < start.global_params.size(); ++i) {
        dl += std::pow(loose.global_params.values[i] - start.global_params.values[i], 2);
        dt += std::pow(tight.global_params.values[i] - start.global_params.values[i], 2);
    }
    EXPECT_LT(dt, dl);
}

TEST(Baselines, FedNovaEqualStepsIsFedAvg) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    c.distill.local_batch = 1000; // one full-batch step per epoch for every client
    auto d = make_data(c);
    auto avg = run_baseline(c, d);
    c.method = Method::fednova;
    auto nova = run_baseline(c, d);
    EXPECT_LE(max_abs_diff(avg.global_params.values, nova.global_params.values), 1e-6);
}

TEST(Baselines, FedNovaDiffersWithUnequalSteps) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    c.distill.local_batch = 8;
    auto d = make_data(c);
    auto avg = run_baseline(c, d);
    c.method = Method::fednova;
    auto nova = run_baseline(c, d);
    EXPECT_GT(max_abs_diff(avg.global_params.values, nova.global_params.values), 1e-6);
}

TEST(Baselines, SingleClientIsCentralizedSgd) {
    auto c = small_config(Method::fedavg, 1, 0.5);
    c.distill.precision = Precision::f64;
    c.distill.local_batch = 1000;
    auto d = make_data(c);
    auto run = run_baseline(c, d);
    auto zero = c;
    zero.distill.lr_local = 0.0;
    auto w = run_baseline(zero, d).global_params;
    SgdOptions o;
    o.epochs = c.rounds * c.distill.local_epochs;
    o.batch_size = 1000;
    o.lr = c.distill.lr_local;
    o.precision = Precision::f64;
    train_sgd(w, c.global, d.train, d.shards[0].indices, o);
    EXPECT_LE(max_abs_diff(run.global_params.values, w.values), 1e-9);
    for (auto m : {Method::fedprox, Method::fednova}) {
        c.method = m;
        c.prox_mu = 0.0;
        EXPECT_LE(max_abs_diff(run_baseline(c, d).global_params.values, w.values), 1e-9) << to_string(m);
    }
}

TEST(Baselines, ThreadsDoNotChangeResults) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    auto d = make_data(c);
    auto one = run_baseline(c, d);
    c.threads = 3;
    auto three = run_baseline(c, d);
    EXPECT_EQ(one.global_params.values, three.global_params.values);
    EXPECT_EQ(csv(one), csv(three));
}

TEST(Baselines, ClientsUploadGlobalArchitecture) {
    auto c = small_config(Method::fedavg, 4, 0.5);
    auto run = run_baseline(c, make_data(c));
    for (const auto& r : run.transport) {
        EXPECT_EQ(r.kind, Payload::params);
        EXPECT_EQ(r.items, param_layout(c.global).total);
    }
}

TEST(FedDgm, SeriesAndTransportAudit) {
    auto c = small_config(Method::feddgm, 4, 0.5);
    auto d = make_data(c);
    auto run = run_feddgm(c, d, world().gen);
    ASSERT_EQ(run.rounds.size(), c.rounds);
    EXPECT_EQ(run.transport.size(), c.rounds * 4);
    const std::size_t n = param_layout(c.surrogate).total;
    for (const auto& r : run.transport) {
        EXPECT_EQ(r.kind, Payload::params);
        EXPECT_EQ(r.items, n);
    }
    auto avg_cfg = c;
    avg_cfg.method = Method::fedavg;
    auto avg = run_baseline(avg_cfg, d);
    for (std::size_t t = 0; t < c.rounds; ++t) {
        EXPECT_EQ(run.rounds[t].upload_bytes, 4 * n * 4);
        EXPECT_LT(run.rounds[t].upload_bytes, avg.rounds[t].upload_bytes);
        for (const auto& cm : run.rounds[t].clients) {
            EXPECT_FALSE(cm.skipped);
            EXPECT_GE(cm.mtt_loss_final, 0.0);
        }
        EXPECT_GE(run.rounds[t].global_acc, 0.0);
        EXPECT_LE(run.rounds[t].global_acc, 1.0);
    }
}

TEST(FedDgm, DeterministicAcrossRunsAndThreads) {
    auto c = small_config(Method::feddgm, 3, 0.5);
    auto d = make_data(c);
    auto a = run_feddgm(c, d, world().gen);
    auto b = run_feddgm(c, d, world().gen);
    c.threads = 2;
    auto t = run_feddgm(c, d, world().gen);
    EXPECT_EQ(csv(a), csv(b));
    EXPECT_EQ(csv(a), csv(t));
    EXPECT_EQ(a.global_params.values, t.global_params.values);
}

TEST(FedDgm, SingleIidClientBeatsMajorityClass) {
    auto c = small_config(Method::feddgm, 1, 1e6);
    c.rounds = 1;
    c.global_epochs = 40;
    c.distill.local_epochs = 20;
    c.distill.student_steps = 10;
    c.distill.distill_iters = 20;
    c.distill.ipc = 10;
    auto d = make_data(c);
    auto run = run_feddgm(c, d, world().gen);
    const auto counts = d.test.class_counts();
    const double majority = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / d.test.size();
    EXPECT_GE(run.rounds[0].global_acc, majority);
}

TEST(FedDgm, AllClientsSkippedAborts) {
    auto c = small_config(Method::feddgm, 3, 0.5);
    c.distill.lr_local = 0.0;
    EXPECT_THROW(run_feddgm(c, make_data(c), world().gen), RoundAbortedError);
}

TEST(FedDgm, MissingGeneratorRejected) {
    auto c = small_config(Method::feddgm, 3, 0.5);
    EXPECT_THROW(run_method(c, make_data(c), nullptr), ConfigError);
}

TEST(FeddmLite, UploadsIpcTimesClassesImages) {
    auto c = small_config(Method::feddm_lite, 4, 0.1);
    auto run = run_feddm_lite(c, make_data(c));
    EXPECT_EQ(run.transport.size(), c.rounds * 4);
    for (const auto& r : run.transport) {
        EXPECT_EQ(r.kind, Payload::images);
        EXPECT_EQ(r.items, c.distill.ipc * 10);
    }
}

TEST(FeddmLite, CopiesMatchWhenIpcCoversShard) {
    const auto& w = world();
    std::vector<std::size_t> shard;
    std::vector<int> taken(10, 0);
    for (std::size_t i = 0; i < w.pool.size(); ++i)
        if (taken[w.pool.labels[i]] < 2) {
            shard.push_back(i);
            ++taken[w.pool.labels[i]];
        }
    FeddmLiteConfig cfg;
    cfg.iters = 0;
    auto r = feddm_lite_client(w.pool, shard, 2, cfg, 1, 2);
    EXPECT_LE(r.final_loss, 1e-10);
    EXPECT_EQ(r.synthetic.size(), 20u);
}

TEST(FeddmLite, MatchingReducesLoss) {
    const auto& w = world();
    auto shards = dirichlet_partition(w.pool, 4, 0.5, 3);
    FeddmLiteConfig cfg;
    cfg.iters = 50;
    auto r = feddm_lite_client(w.pool, shards[0].indices, 3, cfg, 4, 5);
    EXPECT_LT(r.final_loss, r.initial_loss);
    for (float v : r.synthetic.images) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(FeddmLite, BeatsChanceOnTinyDigits) {
    double acc = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto c = small_config(Method::feddm_lite, 4, 0.5);
        c.seed = s;
        c.rounds = 3;
        c.global_epochs = 30;
        c.distill.ipc = 5;
        c.feddm.iters = 30;
        acc += run_feddm_lite(c, make_data(c)).rounds.back().global_acc / 3.0;
    }
    EXPECT_GT(acc, 0.1);
}

TEST(Metrics, CsvLayout) {
    auto c = small_config(Method::fedavg, 3, 0.5);
    auto run = run_baseline(c, make_data(c));
    std::istringstream in(csv(run));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "round,method,alpha,seed,client_id_or_GLOBAL,local_loss,mtt_loss_final,global_acc,surrogate_acc,wall_s");
    std::size_t rows = 0, global_rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
        EXPECT_TRUE(line.ends_with(",0")) << line;
        if (line.find(",GLOBAL,") != std::string::npos) ++global_rows;
    }
    EXPECT_EQ(rows, c.rounds * 4);
    EXPECT_EQ(global_rows, c.rounds);
    EXPECT_EQ(csv(run), csv(run_baseline(c, make_data(c))));
}

TEST(Metrics, TimingColumnOptIn) {
    auto c = small_config(Method::fedavg, 2, 0.5);
    c.rounds = 1;
    auto run = run_baseline(c, make_data(c));
    run.rounds[0].wall_s = 1.5;
    EXPECT_NE(csv(run, true).find(",1.5\n"), std::string::npos);
    EXPECT_EQ(csv(run, false).find(",1.5\n"), std::string::npos);
}

TEST(Sanity, IidFedAvgTracksCentralized) {
    double fed = 0.0, central = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto c = small_config(Method::fedavg, 5, 1e6);
        c.seed = s;
        c.rounds = 5;
        c.distill.local_epochs = 10;
        auto d = make_data(c);
        auto run = run_baseline(c, d);
        fed += run.rounds.back().global_acc / 3.0;
        auto zero = c;
        zero.rounds = 1;
        zero.distill.lr_local = 0.0;
        auto w = run_baseline(zero, d).global_params;
        // Every client takes one full-batch step per epoch; match that count
        // with full-pool steps.
        SgdOptions o;
        o.epochs = c.rounds * c.distill.local_epochs;
        o.batch_size = d.train.size();
        o.lr = c.distill.lr_local;
        o.seed = s;
        train_sgd(w, c.global, d.train, o);
        central += evaluate(w, c.global, d.test) / 3.0;
    }
    EXPECT_NEAR(fed, central, 0.05);
}
