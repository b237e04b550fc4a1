#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <gtest/gtest.h>

#include "feddgm/distill.hpp"
#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "oracles.hpp"

using namespace feddgm;

namespace {

ModelSpec blob_surrogate() {
    ModelSpec s;
    s.family = Family::mlp;
    s.depth = 1;
    s.width = 8;
    s.input = {1, 2, 1};
    s.classes = 2;
    s.activation = Activation::tanh;
    return s;
}

struct BlobWorld {
    LabeledDataset ds;
    Generator gen;
};

const BlobWorld& blobs() {
    static const BlobWorld w = [] {
        BlobWorld b;
        BuiltinOptions o;
        o.classes = 2;
        o.samples = 200;
        o.seed = 4;
        b.ds = load_dataset("gauss-blobs", o);
        GeneratorConfig c;
        c.max_epochs = 60;
        c.seed = 2;
        b.gen = pretrain_decoder(b.ds, c);
        return b;
    }();
    return w;
}

std::vector<std::size_t> all_rows(const LabeledDataset& ds) {
    std::vector<std::size_t> r(ds.size());
    std::iota(r.begin(), r.end(), 0);
    return r;
}

bool same_bytes(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST(MttLoss, Anchors) {
    for (unsigned s = 0; s < 100; ++s) {
        auto g = oracle::uniform(37, -2, 2, s);
        auto m = oracle::uniform(37, -2, 2, s + 1000);
        auto h = oracle::uniform(37, -2, 2, s + 2000);
        EXPECT_EQ(mtt_loss(g, m, g), 1.0);
        EXPECT_EQ(mtt_loss(m, m, g), 0.0);
        EXPECT_GE(mtt_loss(h, m, g), 0.0);
    }
}

TEST(MttLoss, QuarterExample) {
    // theta_hat halfway between theta_g and theta_m
    std::vector<double> g{0.0, 0.0}, m{2.0, 0.0}, h{1.0, 0.0};
    EXPECT_DOUBLE_EQ(mtt_loss(h, m, g), 0.25);
}

TEST(MttLoss, PermutationInvariant) {
    auto g = oracle::uniform(20, -1, 1, 1), m = oracle::uniform(20, -1, 1, 2), h = oracle::uniform(20, -1, 1, 3);
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(9);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto apply = [&](const std::vector<double>& v) {
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[perm[i]];
        return out;
    };
    EXPECT_NEAR(mtt_loss(apply(h), apply(m), apply(g)), mtt_loss(h, m, g), 1e-14);
}

TEST(MttLoss, ZeroDenominatorThrows) {
    std::vector<double> g{1.0, 2.0};
    EXPECT_THROW(mtt_loss(g, g, g), ClientDidNotMoveError);
}

TEST(MttLoss, NodeMatchesHost) {
    ad::Graph gr;
    auto h = gr.input({6}, "h"), m = gr.input({6}, "m"), g = gr.input({6}, "g");
    auto l = mtt_loss(h, m, g);
    auto hv = oracle::uniform(6, -1, 1, 5), mv = oracle::uniform(6, -1, 1, 6), gv = oracle::uniform(6, -1, 1, 7);
    ad::Bindings<double> b;
    b.set(h, Tensor<double>({6}, hv)).set(m, Tensor<double>({6}, mv)).set(g, Tensor<double>({6}, gv));
    EXPECT_NEAR(ad::eval(gr, l, b).item(), mtt_loss(hv, mv, gv), 1e-14);
}

TEST(ClientUpdate, ZeroRateLeavesParams) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta = model_new(spec, 1);
    DistillConfig c;
    c.lr_local = 0.0;
    auto r = client_update(theta, spec, w.ds, all_rows(w.ds), c, 3);
    EXPECT_TRUE(same_bytes(r.params.values, theta.values));
}

TEST(ClientUpdate, MemorizesOneSample) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    spec.width = 16;
    auto theta = model_new(spec, 2);
    DistillConfig c;
    c.local_epochs = 3000;
    c.lr_local = 0.5;
    c.local_batch = 1;
    c.precision = Precision::f64;
    std::vector<std::size_t> one{7};
    auto r = client_update(theta, spec, w.ds, one, c, 1);
    EXPECT_LE(dataset_loss(r.params, spec, w.ds, one), 1e-4);
}

TEST(ClientUpdate, DeterministicPerSeed) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta = model_new(spec, 1);
    DistillConfig c;
    c.local_epochs = 3;
    c.local_batch = 16;
    auto a = client_update(theta, spec, w.ds, all_rows(w.ds), c, 11);
    auto b = client_update(theta, spec, w.ds, all_rows(w.ds), c, 11);
    EXPECT_TRUE(same_bytes(a.params.values, b.params.values));
}

TEST(ClientUpdate, DivergenceIsReported) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    spec.activation = Activation::relu;
    auto theta = model_new(spec, 1);
    for (auto& v : theta.values) v *= 1e3;
    DistillConfig c;
    c.lr_local = 1e30;
    EXPECT_THROW(client_update(theta, spec, w.ds, all_rows(w.ds), c, 1), DivergenceError);
}

TEST(ClientUpdate, EmptyShardRejected) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    EXPECT_THROW(client_update(model_new(spec, 1), spec, w.ds, {}, DistillConfig{}, 1), ConfigError);
}

TEST(DistillConfig, Validation) {
    DistillConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lr_latent = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.ipc = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.local_momentum = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(parse_latent_optimizer("adam"), LatentOptimizer::adam);
    EXPECT_THROW(parse_latent_optimizer("lbfgs"), ConfigError);
}

// Meta-gradient through T_s = 3 unrolled steps against central differences.
TEST(Distill, MetaGradientMatchesFiniteDifferences) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    ASSERT_LE(param_layout(spec).total, 100u);
    auto theta_g = model_new(spec, 5);
    DistillConfig c;
    c.local_epochs = 5;
    c.local_batch = 32;
    c.precision = Precision::f64;
    auto theta_m = client_update(theta_g, spec, w.ds, all_rows(w.ds), c, 2).params;
    auto z0 = init_latents(w.gen, w.gen.default_layer(), 3, 2, 8);

    MttGraph mg(w.gen, spec, z0, 3, 0.5);
    ad::Executor<double> ex(mg.graph, {mg.loss, mg.dz});
    Tensor<double> onehot({z0.count(), 2});
    for (std::size_t i = 0; i < z0.count(); ++i) onehot[i * 2 + static_cast<std::size_t>(z0.labels[i])] = 1.0;
    ad::Bindings<double> fixed;
    fixed.set(mg.gen, Tensor<double>({w.gen.params.size()}, w.gen.params))
        .set(mg.theta_g, Tensor<double>({theta_g.size()}, theta_g.values))
        .set(mg.theta_m, Tensor<double>({theta_m.size()}, theta_m.values))
        .set(mg.onehot, onehot);
    auto run = [&](const std::vector<double>& z) {
        auto b = fixed;
        b.set(mg.z, Tensor<double>(z0.codes.shape, z));
        return ex.run(b);
    };
    const auto analytic = run(z0.codes.values)[1].values;
    const auto numeric =
        oracle::central_gradient([&](const std::vector<double>& z) { return run(z)[0].item(); }, z0.codes.values, 1e-6);
    std::size_t good = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i)
        if (oracle::coordinate_error(analytic[i], numeric[i], 1e-8) <= 1e-3) ++good;
    EXPECT_GE(good * 100, 95 * numeric.size());
}

TEST(Distill, ZeroIterationsKeepLatents) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta_g = model_new(spec, 1);
    DistillConfig c;
    c.local_epochs = 2;
    auto theta_m = client_update(theta_g, spec, w.ds, all_rows(w.ds), c, 1).params;
    c.distill_iters = 0;
    c.student_steps = 3;
    auto z0 = init_latents(w.gen, w.gen.default_layer(), 2, 2, 3);
    auto r = distill_client(theta_g, theta_m, w.gen, z0, spec, c);
    EXPECT_EQ(r.latents, z0);
    EXPECT_TRUE(r.trace.empty());
    EXPECT_GT(r.final_loss, 0.0);
}

TEST(Distill, GeneratorAndThetaStayFrozen) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta_g = model_new(spec, 1);
    DistillConfig c;
    c.local_epochs = 2;
    auto theta_m = client_update(theta_g, spec, w.ds, all_rows(w.ds), c, 1).params;
    const auto gen_before = w.gen.params, g_before = theta_g.values, m_before = theta_m.values;
    c.distill_iters = 5;
    c.student_steps = 3;
    auto r = distill_client(theta_g, theta_m, w.gen, init_latents(w.gen, w.gen.default_layer(), 2, 2, 3), spec, c);
    EXPECT_EQ(r.trace.size(), 5u);
    EXPECT_TRUE(same_bytes(w.gen.params, gen_before));
    EXPECT_TRUE(same_bytes(theta_g.values, g_before));
    EXPECT_TRUE(same_bytes(theta_m.values, m_before));
}

TEST(Distill, UnmovedClientRejected) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta = model_new(spec, 1);
    auto z0 = init_latents(w.gen, w.gen.default_layer(), 2, 2, 3);
    EXPECT_THROW(distill_client(theta, theta, w.gen, z0, spec, DistillConfig{}), ClientDidNotMoveError);
}

TEST(Distill, ShapeMismatchRejected) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    auto theta_g = model_new(spec, 1);
    auto other = spec;
    other.width = 4;
    auto z0 = init_latents(w.gen, w.gen.default_layer(), 2, 2, 3);
    EXPECT_THROW(distill_client(theta_g, model_new(other, 2), w.gen, z0, spec, DistillConfig{}), ShapeError);
}

TEST(Distill, BlobsImproveInMostSeeds) {
    const auto& w = blobs();
    auto spec = blob_surrogate();
    int improved = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto theta_g = model_new(spec, 100 + s);
        DistillConfig c;
        c.local_epochs = 5;
        c.local_batch = 32;
        c.student_steps = 3;
        c.distill_iters = 50;
        c.lr_student = 0.5;
        c.ipc = 5;
        auto theta_m = client_update(theta_g, spec, w.ds, all_rows(w.ds), c, s).params;
        auto z0 = init_latents(w.gen, w.gen.default_layer(), c.ipc, 2, 200 + s);
        auto r = distill_client(theta_g, theta_m, w.gen, z0, spec, c);
        if (r.final_loss < r.trace.front()) ++improved;
    }
    EXPECT_GE(improved, 18);
}

TEST(Distill, SyntheticDatasetCarriesLabels) {
    const auto& w = blobs();
    auto z = init_latents(w.gen, w.gen.default_layer(), 3, 2, 1);
    auto ds = synthetic_dataset(w.gen, z);
    EXPECT_NO_THROW(ds.validate());
    EXPECT_EQ(ds.size(), 6u);
    EXPECT_EQ(ds.labels, z.labels);
    EXPECT_EQ(ds.shape, w.gen.image);
}
