#include "feddgm/generator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>

#include "feddgm/binio.hpp"
#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "feddgm/optim.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

namespace {

struct LayoutBuilder {
    ParamLayout layout;
    void add(std::string name, Shape shape, std::size_t fan_in) {
        const std::size_t n = numel(shape);
        layout.entries.push_back({std::move(name), layout.total, std::move(shape), fan_in});
        layout.total += n;
    }
};

const LayoutEntry& entry(const ParamLayout& layout, const std::string& name) {
    for (const auto& e : layout.entries)
        if (e.name == name) return e;
    throw Error("generator layout has no entry " + name);
}

ad::Var piece(const ParamLayout& layout, ad::Var params, const std::string& name) {
    const auto& e = entry(layout, name);
    return ad::slice(params, e.offset, e.shape);
}

std::vector<double> init_params(const ParamLayout& layout, std::uint64_t seed) {
    std::vector<double> values(layout.total);
    Rng rng(seed);
    for (const auto& e : layout.entries) {
        const bool bias = e.name.size() > 2 && e.name.compare(e.name.size() - 2, 2, ".b") == 0;
        const double bound = bias ? 0.0 : std::sqrt(3.0 / static_cast<double>(e.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (std::size_t i = 0; i < numel(e.shape); ++i) values[e.offset + i] = bias ? 0.0 : dist(rng);
    }
    return values;
}

ParamLayout encoder_layout_for(const ImageShape& image, std::size_t classes, const GeneratorConfig& c) {
    LayoutBuilder b;
    const std::size_t d = image.numel();
    b.add("enc.w", {d, c.encoder_hidden}, d + classes);
    b.add("enc.c", {classes, c.encoder_hidden}, d + classes);
    b.add("enc.b", {c.encoder_hidden}, d + classes);
    b.add("mu.w", {c.encoder_hidden, c.noise_dim}, c.encoder_hidden);
    b.add("mu.b", {c.noise_dim}, c.encoder_hidden);
    b.add("lv.w", {c.encoder_hidden, c.noise_dim}, c.encoder_hidden);
    b.add("lv.b", {c.noise_dim}, c.encoder_hidden);
    return b.layout;
}

void build_layout(Generator& g) {
    const auto& c = g.config;
    LayoutBuilder b;
    b.add("map1.noise", {c.noise_dim, c.style_dim}, c.noise_dim + g.classes);
    b.add("map1.class", {g.classes, c.style_dim}, c.noise_dim + g.classes);
    b.add("map1.b", {c.style_dim}, c.noise_dim + g.classes);
    b.add("map2.w", {c.style_dim, c.style_dim}, c.style_dim);
    b.add("map2.b", {c.style_dim}, c.style_dim);
    const auto& im = g.image;
    g.layer_shapes = {{c.style_dim}};
    if (g.kind == SynthesisKind::conv) {
        const std::size_t h4 = im.height / 4, w4 = im.width / 4;
        b.add("syn1.w", {c.style_dim, h4 * w4 * c.channels}, c.style_dim);
        b.add("syn1.b", {h4 * w4 * c.channels}, c.style_dim);
        b.add("syn2.w", {3, 3, c.channels, c.channels}, 9 * c.channels);
        b.add("syn2.b", {c.channels}, 9 * c.channels);
        b.add("syn3.w", {3, 3, c.channels, c.out_channels}, 9 * c.channels);
        b.add("syn3.b", {c.out_channels}, 9 * c.channels);
        b.add("syn4.w", {3, 3, c.out_channels, im.channels}, 9 * c.out_channels);
        b.add("syn4.b", {im.channels}, 9 * c.out_channels);
        g.layer_shapes.push_back({h4, w4, c.channels});
        g.layer_shapes.push_back({2 * h4, 2 * w4, c.channels});
        g.layer_shapes.push_back({im.height, im.width, c.out_channels});
    } else {
        const std::size_t d = im.numel();
        b.add("syn1.w", {c.style_dim, c.channels}, c.style_dim);
        b.add("syn1.b", {c.channels}, c.style_dim);
        b.add("syn2.w", {c.channels, c.channels}, c.channels);
        b.add("syn2.b", {c.channels}, c.channels);
        b.add("syn3.w", {c.channels, c.channels}, c.channels);
        b.add("syn3.b", {c.channels}, c.channels);
        b.add("syn4.w", {c.channels, d}, c.channels);
        b.add("syn4.b", {d}, c.channels);
        g.layer_shapes.push_back({c.channels});
        g.layer_shapes.push_back({c.channels});
        g.layer_shapes.push_back({c.channels});
    }
    g.layer_shapes.push_back({im.height, im.width, im.channels});
    g.layout = b.layout;
    g.encoder_layout = encoder_layout_for(g.image, g.classes, g.config);
}

ad::Var encode_mean(const Generator& g, ad::Var enc, ad::Var x, ad::Var onehot, ad::Var* logvar = nullptr) {
    const std::size_t n = x.shape()[0];
    const auto& L = g.encoder_layout;
    auto flat = ad::reshape(x, {n, g.image.numel()});
    auto h = ad::tanh(ad::bias_add(ad::matmul(flat, piece(L, enc, "enc.w")) + ad::matmul(onehot, piece(L, enc, "enc.c")),
                                   piece(L, enc, "enc.b")));
    if (logvar) *logvar = ad::bias_add(ad::matmul(h, piece(L, enc, "lv.w")), piece(L, enc, "lv.b"));
    return ad::bias_add(ad::matmul(h, piece(L, enc, "mu.w")), piece(L, enc, "mu.b"));
}

} // namespace

Shape Generator::latent_shape(std::size_t layer, std::size_t n) const {
    if (layer >= layer_shapes.size()) throw ConfigError("generator has no layer " + std::to_string(layer));
    Shape s{n};
    s.insert(s.end(), layer_shapes[layer].begin(), layer_shapes[layer].end());
    return s;
}

Generator generator_new(const ImageShape& image, std::size_t classes, const GeneratorConfig& config) {
    if (classes < 2) throw ConfigError("generator needs at least 2 classes");
    if (config.noise_dim == 0 || config.style_dim == 0 || config.channels == 0 || config.out_channels == 0 ||
        config.encoder_hidden == 0)
        throw ConfigError("generator layer sizes must be positive");
    Generator g;
    g.image = image;
    g.classes = classes;
    g.config = config;
    g.kind = (image.height % 4 == 0 && image.width % 4 == 0 && image.height >= 4 && image.width >= 4)
                 ? SynthesisKind::conv
                 : SynthesisKind::dense;
    build_layout(g);
    g.params = init_params(g.layout, derive_seed({config.seed, 0x6e1}));
    g.encoder_params = init_params(g.encoder_layout, derive_seed({config.seed, 0xe1c}));
    g.meta.seed = config.seed;
    return g;
}

ad::Var generator_mapping(const Generator& g, ad::Var params, ad::Var noise, ad::Var onehot) {
    const auto& L = g.layout;
    auto h = ad::tanh(ad::bias_add(
        ad::matmul(noise, piece(L, params, "map1.noise")) + ad::matmul(onehot, piece(L, params, "map1.class")),
        piece(L, params, "map1.b")));
    return ad::bias_add(ad::matmul(h, piece(L, params, "map2.w")), piece(L, params, "map2.b"));
}

ad::Var generator_synthesize(const Generator& g, ad::Var params, ad::Var z, std::size_t from, std::size_t to) {
    if (from > to || to > g.depth())
        throw ConfigError("invalid synthesis range " + std::to_string(from) + ".." + std::to_string(to));
    const std::size_t n = z.shape().empty() ? 0 : z.shape()[0];
    if (z.shape() != g.latent_shape(from, n))
        throw ShapeError("latent " + to_string(z.shape()) + " does not fit layer " + std::to_string(from) + " " +
                         to_string(g.latent_shape(from, n)));
    const auto& L = g.layout;
    auto w = [&](std::size_t l) { return piece(L, params, "syn" + std::to_string(l) + ".w"); };
    auto b = [&](std::size_t l) { return piece(L, params, "syn" + std::to_string(l) + ".b"); };
    ad::Var h = z;
    for (std::size_t l = from + 1; l <= to; ++l) {
        if (g.kind == SynthesisKind::conv) {
            switch (l) {
            case 1: h = ad::reshape(ad::tanh(ad::bias_add(ad::matmul(h, w(1)), b(1))), g.latent_shape(1, n)); break;
            case 2:
            case 3: h = ad::tanh(ad::bias_add(ad::conv2d(ad::unpool2(h), w(l)), b(l))); break;
            default: h = ad::sigmoid(ad::bias_add(ad::conv2d(h, w(4)), b(4))); break;
            }
        } else {
            if (l < 4)
                h = ad::tanh(ad::bias_add(ad::matmul(h, w(l)), b(l)));
            else
                h = ad::reshape(ad::sigmoid(ad::bias_add(ad::matmul(h, w(4)), b(4))), g.latent_shape(4, n));
        }
    }
    return h;
}

std::uint64_t dataset_hash(const LabeledDataset& ds) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * 1099511628211ULL;
    };
    mix(ds.images.data(), ds.images.size() * sizeof(float));
    mix(ds.labels.data(), ds.labels.size() * sizeof(int));
    return h;
}

namespace {

struct VaeStep {
    ad::Graph graph;
    ad::Var gen, enc, x, onehot, eps, loss, dgen, denc;
    std::unique_ptr<ad::Executor<float>> exec;

    VaeStep(const Generator& g, std::size_t n) {
        gen = graph.input({g.layout.total}, "generator", ad::LeafKind::Parameter);
        enc = graph.input({g.encoder_layout.total}, "encoder", ad::LeafKind::Parameter);
        x = graph.input({n, g.image.height, g.image.width, g.image.channels}, "x");
        onehot = graph.input({n, g.classes}, "onehot");
        eps = graph.input({n, g.config.noise_dim}, "eps");
        ad::Var logvar;
        auto mu = encode_mean(g, enc, x, onehot, &logvar);
        auto noise = mu + ad::exp(ad::scale(logvar, 0.5)) * eps;
        auto xhat = generator_decode(g, gen, generator_mapping(g, gen, noise, onehot), 0);
        const double inv_n = 1.0 / static_cast<double>(n);
        auto rec = ad::scale(ad::sum_squares(xhat - x), inv_n);
        auto kl = ad::affine(ad::sum_all(ad::exp(logvar) + mu * mu - logvar), 0.5 * inv_n,
                             -0.5 * static_cast<double>(g.config.noise_dim));
        loss = rec + ad::scale(kl, g.config.kl_weight);
        const std::vector<ad::Var> wrt{gen, enc};
        auto grads = graph.grad(loss, wrt);
        dgen = grads[0];
        denc = grads[1];
        exec = std::make_unique<ad::Executor<float>>(graph, std::vector<ad::Var>{loss, dgen, denc});
    }
};

template <typename T>
Tensor<T> as_tensor(const std::vector<double>& v) {
    return Tensor<T>({v.size()}, std::vector<T>(v.begin(), v.end()));
}

} // namespace

double reconstruction_mse(const Generator& g, const LabeledDataset& ds) {
    if (ds.size() == 0) throw ConfigError("reconstruction_mse: empty dataset");
    const auto idx = all_indices(ds);
    ad::Graph graph;
    auto gen = graph.input({g.layout.total});
    auto enc = graph.input({g.encoder_layout.total});
    auto x = graph.input({ds.size(), g.image.height, g.image.width, g.image.channels});
    auto onehot = graph.input({ds.size(), g.classes});
    auto xhat = generator_decode(g, gen, generator_mapping(g, gen, encode_mean(g, enc, x, onehot), onehot), 0);
    auto mse = ad::scale(ad::sum_squares(xhat - x), 1.0 / static_cast<double>(ds.images.size()));
    ad::Bindings<float> b;
    b.set(gen, as_tensor<float>(g.params))
        .set(enc, as_tensor<float>(g.encoder_params))
        .set(x, ds.batch<float>(idx))
        .set(onehot, ds.onehot<float>(idx));
    return static_cast<double>(ad::eval(graph, mse, b).item());
}

Generator pretrain_decoder(const LabeledDataset& proxy, const GeneratorConfig& config) {
    if (proxy.size() == 0) throw ConfigError("pretrain_decoder: empty proxy set");
    const auto counts = proxy.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) throw ConfigError("pretrain_decoder: class " + std::to_string(c) + " missing from proxy");
    Generator g = generator_new(proxy.shape, proxy.classes, config);
    g.meta.proxy_hash = dataset_hash(proxy);

    Adam gen_opt(config.lr), enc_opt(config.lr);
    std::map<std::size_t, std::unique_ptr<VaeStep>> steps;
    std::vector<std::size_t> order = all_indices(proxy);
    Rng rng(derive_seed({config.seed, 0x7a5}));
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const std::size_t bs = std::max<std::size_t>(1, std::min(config.batch_size, order.size()));

    g.meta.final_mse = reconstruction_mse(g, proxy);
    for (std::size_t epoch = 0; epoch < config.max_epochs && g.meta.final_mse > config.target_mse; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t begin = 0; begin < order.size(); begin += bs) {
            const std::size_t n = std::min(bs, order.size() - begin);
            std::span<const std::size_t> idx(order.data() + begin, n);
            auto& slot = steps[n];
            if (!slot) slot = std::make_unique<VaeStep>(g, n);
            Tensor<float> eps({n, config.noise_dim});
            for (auto& e : eps.values) e = normal(rng);
            ad::Bindings<float> b;
            b.set(slot->gen, as_tensor<float>(g.params))
                .set(slot->enc, as_tensor<float>(g.encoder_params))
                .set(slot->x, proxy.batch<float>(idx))
                .set(slot->onehot, proxy.onehot<float>(idx))
                .set(slot->eps, std::move(eps));
            auto out = slot->exec->run(b);
            gen_opt.step(g.params, out[1].values);
            enc_opt.step(g.encoder_params, out[2].values);
        }
        g.meta.epochs = epoch + 1;
        g.meta.final_mse = reconstruction_mse(g, proxy);
    }
    g.meta.converged = g.meta.final_mse <= config.target_mse;
    return g;
}

LatentSet init_latents(const Generator& g, std::size_t layer, std::size_t ipc, std::size_t classes,
                       std::uint64_t seed) {
    if (layer >= g.depth())
        throw ConfigError("latent layer " + std::to_string(layer) + " must be below generator depth " +
                          std::to_string(g.depth()));
    if (ipc == 0) throw ConfigError("ipc must be positive");
    if (classes != g.classes) throw ConfigError("class count does not match the generator");
    const std::size_t n = ipc * classes;
    LatentSet z;
    z.layer = layer;
    Tensor<double> noise({n, g.config.noise_dim});
    Rng rng(derive_seed({seed, 0x1a7e}));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : noise.values) v = normal(rng);
    Tensor<double> onehot({n, classes});
    for (std::size_t i = 0; i < n; ++i) {
        z.labels.push_back(static_cast<int>(i / ipc));
        onehot[i * classes + i / ipc] = 1.0;
    }
    ad::Graph graph;
    auto gen = graph.input({g.layout.total});
    auto nz = graph.input(noise.shape);
    auto oh = graph.input(onehot.shape);
    auto codes = generator_synthesize(g, gen, generator_mapping(g, gen, nz, oh), 0, layer);
    ad::Bindings<double> b;
    b.set(gen, as_tensor<double>(g.params)).set(nz, std::move(noise)).set(oh, std::move(onehot));
    z.codes = ad::eval(graph, codes, b);
    return z;
}

Tensor<double> lift_latents(const Generator& g, const Tensor<double>& codes, std::size_t from, std::size_t to) {
    if (codes.shape.empty()) throw ShapeError("latent codes need a leading batch extent");
    ad::Graph graph;
    auto gen = graph.input({g.layout.total});
    auto z = graph.input(codes.shape);
    auto out = generator_synthesize(g, gen, z, from, to);
    ad::Bindings<double> b;
    b.set(gen, as_tensor<double>(g.params)).set(z, codes);
    return ad::eval(graph, out, b);
}

Tensor<double> decode(const Generator& g, const LatentSet& z) { return lift_latents(g, z.codes, z.layer, g.depth()); }

LatentFit fit_latents(const Generator& g, std::size_t layer, Tensor<double> init, const Tensor<double>& targets,
                      std::size_t steps, double lr) {
    const std::size_t n = targets.shape.at(0);
    const std::size_t d = g.image.numel();
    ad::Graph graph;
    auto gen = graph.input({g.layout.total});
    auto z = graph.input(g.latent_shape(layer, n));
    auto t = graph.input(targets.shape);
    auto img = generator_decode(g, gen, z, layer);
    auto loss = ad::scale(ad::sum_squares(img - t), 1.0 / static_cast<double>(n * d));
    auto dz = graph.grad(loss, z);
    ad::Executor<double> exec(graph, {img, dz});

    LatentFit best{init, std::vector<double>(n, INFINITY)};
    Adam opt(lr);
    const std::size_t per = numel(g.layer_shapes[layer]);
    for (std::size_t s = 0; s <= steps; ++s) {
        ad::Bindings<double> b;
        b.set(gen, as_tensor<double>(g.params)).set(z, init).set(t, targets);
        auto out = exec.run(b);
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = out[0][i * d + k] - targets[i * d + k];
                e += diff * diff;
            }
            e /= static_cast<double>(d);
            if (e < best.mse[i]) {
                best.mse[i] = e;
                std::copy_n(init.values.begin() + static_cast<std::ptrdiff_t>(i * per), per,
                            best.codes.values.begin() + static_cast<std::ptrdiff_t>(i * per));
            }
        }
        if (s < steps) opt.step(init.values, out[1].values);
    }
    return best;
}

namespace {
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kKindGenerator = 1;

void put_layout_sizes(std::ostream& out, const GeneratorConfig& c) {
    for (std::size_t v : {c.noise_dim, c.style_dim, c.channels, c.out_channels, c.encoder_hidden, c.max_epochs,
                          c.batch_size})
        binio::put<std::uint64_t>(out, v);
    for (double v : {c.lr, c.target_mse, c.kl_weight}) binio::put<double>(out, v);
    binio::put<std::uint64_t>(out, c.seed);
}

GeneratorConfig get_layout_sizes(std::istream& in, const std::string& what) {
    GeneratorConfig c;
    for (std::size_t* v : {&c.noise_dim, &c.style_dim, &c.channels, &c.out_channels, &c.encoder_hidden,
                           &c.max_epochs, &c.batch_size})
        *v = binio::get<std::uint64_t>(in, what);
    for (double* v : {&c.lr, &c.target_mse, &c.kl_weight}) *v = binio::get<double>(in, what);
    c.seed = binio::get<std::uint64_t>(in, what);
    return c;
}
} // namespace

void save_generator(const std::filesystem::path& path, const Generator& g) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    binio::put_magic(out, "FDGM");
    binio::put<std::uint32_t>(out, kVersion);
    binio::put<std::uint32_t>(out, kKindGenerator);
    binio::put<std::uint32_t>(out, g.kind == SynthesisKind::conv ? 0 : 1);
    for (std::size_t v : {g.image.height, g.image.width, g.image.channels, g.classes})
        binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    put_layout_sizes(out, g.config);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(g.layer_shapes.size()));
    for (const auto& s : g.layer_shapes) {
        binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
        for (auto e : s) binio::put<std::uint64_t>(out, e);
    }
    binio::put<std::uint64_t>(out, g.meta.proxy_hash);
    binio::put<std::uint64_t>(out, g.meta.epochs);
    binio::put<std::uint64_t>(out, g.meta.seed);
    binio::put<double>(out, g.meta.final_mse);
    binio::put<std::uint32_t>(out, g.meta.converged ? 1 : 0);
    binio::put_doubles(out, g.params);
    binio::put_doubles(out, g.encoder_params);
    if (!out) throw Error("cannot write " + path.string());
}

Generator load_generator(const std::filesystem::path& path) {
    const std::string what = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + what);
    binio::expect_magic(in, "FDGM", what);
    if (binio::get<std::uint32_t>(in, what) != kVersion) throw FormatError(what + ": unsupported version");
    if (binio::get<std::uint32_t>(in, what) != kKindGenerator) throw FormatError(what + ": not a generator checkpoint");
    const auto kind = binio::get<std::uint32_t>(in, what);
    ImageShape image;
    image.height = binio::get<std::uint32_t>(in, what);
    image.width = binio::get<std::uint32_t>(in, what);
    image.channels = binio::get<std::uint32_t>(in, what);
    const std::size_t classes = binio::get<std::uint32_t>(in, what);
    const auto config = get_layout_sizes(in, what);
    Generator g;
    try {
        g = generator_new(image, classes, config);
    } catch (const ConfigError& e) {
        throw FormatError(what + ": " + e.what());
    }
    if ((kind == 0) != (g.kind == SynthesisKind::conv)) throw FormatError(what + ": synthesis kind mismatch");
    const auto layers = binio::get<std::uint32_t>(in, what);
    std::vector<Shape> shapes(layers);
    for (auto& s : shapes) {
        s.resize(binio::get<std::uint32_t>(in, what));
        for (auto& e : s) e = binio::get<std::uint64_t>(in, what);
    }
    if (shapes != g.layer_shapes) throw FormatError(what + ": layer shape table does not match architecture");
    g.meta.proxy_hash = binio::get<std::uint64_t>(in, what);
    g.meta.epochs = binio::get<std::uint64_t>(in, what);
    g.meta.seed = binio::get<std::uint64_t>(in, what);
    g.meta.final_mse = binio::get<double>(in, what);
    g.meta.converged = binio::get<std::uint32_t>(in, what) != 0;
    g.params = binio::get_doubles(in, what);
    g.encoder_params = binio::get_doubles(in, what);
    if (g.params.size() != g.layout.total || g.encoder_params.size() != g.encoder_layout.total)
        throw FormatError(what + ": parameter lengths do not match architecture");
    return g;
}

namespace {
template <typename T>
void write_tensor_impl(const std::filesystem::path& path, const Tensor<T>& t, std::uint32_t code) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    binio::put_magic(out, "FDTN");
    binio::put<std::uint32_t>(out, code);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) binio::put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(T)));
    if (!out) throw Error("cannot write " + path.string());
}
} // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t) { write_tensor_impl(path, t, 1); }
void write_tensor_file(const std::filesystem::path& path, const Tensor<double>& t) { write_tensor_impl(path, t, 2); }

Tensor<double> read_tensor_file(const std::filesystem::path& path) {
    const std::string what = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + what);
    binio::expect_magic(in, "FDTN", what);
    const auto code = binio::get<std::uint32_t>(in, what);
    if (code != 1 && code != 2) throw FormatError(what + ": unknown dtype code");
    Shape shape(binio::get<std::uint32_t>(in, what));
    for (auto& e : shape) e = binio::get<std::uint64_t>(in, what);
    Tensor<double> t(shape);
    if (code == 1) {
        std::vector<float> buf(t.size());
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
            throw FormatError(what + ": truncated payload");
        std::copy(buf.begin(), buf.end(), t.values.begin());
    } else if (!in.read(reinterpret_cast<char*>(t.values.data()),
                        static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw FormatError(what + ": truncated payload");
    }
    return t;
}

void dump_synthetic(const std::filesystem::path& dir, const Tensor<double>& images, const std::vector<int>& labels) {
    if (images.shape.empty() || images.shape[0] != labels.size())
        throw ShapeError("dump_synthetic: image count does not match label count");
    std::filesystem::create_directories(dir);
    write_tensor_file(dir / "images.fdtn", images.cast<float>());
    std::ofstream out(dir / "labels.txt");
    for (int l : labels) out << l << '\n';
}

} // namespace feddgm
