#include "feddgm/models.hpp"

#include <cmath>
#include <fstream>

#include "feddgm/binio.hpp"
#include "feddgm/error.hpp"
#include "feddgm/executor.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

std::string to_string(Family f) { return f == Family::mlp ? "mlp" : "convnet"; }
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Family parse_family(const std::string& s) {
    if (s == "mlp") return Family::mlp;
    if (s == "convnet") return Family::convnet;
    throw ConfigError("unknown model family '" + s + "' (expected mlp or convnet)");
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + s + "' (expected relu or tanh)");
}

void ModelSpec::validate() const {
    if (depth < 1) throw ConfigError("model depth must be at least 1");
    if (width < 1) throw ConfigError("model width must be positive (zero-sized layer)");
    if (classes < 2) throw ConfigError("model needs at least 2 classes");
    if (input.numel() == 0) throw ConfigError("model input shape has a zero extent");
}

std::string ModelSpec::describe() const {
    return to_string(family) + "-d" + std::to_string(depth) + "-w" + std::to_string(width);
}

ModelSpec scaled_spec(const ModelSpec& base, std::size_t width_factor, std::size_t extra_depth) {
    ModelSpec s = base;
    s.width = base.width * width_factor;
    s.depth = base.depth + extra_depth;
    return s;
}

namespace {

bool can_pool(std::size_t h, std::size_t w) { return h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0; }

} // namespace

ParamLayout param_layout(const ModelSpec& spec) {
    spec.validate();
    ParamLayout layout;
    auto add = [&](std::string name, Shape shape, std::size_t fan_in) {
        const std::size_t n = numel(shape);
        layout.entries.push_back({std::move(name), layout.total, std::move(shape), fan_in});
        layout.total += n;
    };
    std::size_t features = 0;
    if (spec.family == Family::mlp) {
        std::size_t in = spec.input.numel();
        for (std::size_t l = 0; l < spec.depth; ++l) {
            add("dense" + std::to_string(l) + ".w", {in, spec.width}, in);
            add("dense" + std::to_string(l) + ".b", {spec.width}, in);
            in = spec.width;
        }
        features = in;
    } else {
        std::size_t h = spec.input.height, w = spec.input.width, c = spec.input.channels;
        for (std::size_t l = 0; l < spec.depth; ++l) {
            add("conv" + std::to_string(l) + ".w", {3, 3, c, spec.width}, 9 * c);
            add("conv" + std::to_string(l) + ".b", {spec.width}, 9 * c);
            c = spec.width;
            if (can_pool(h, w)) {
                h /= 2;
                w /= 2;
            }
        }
        features = h * w * c;
    }
    add("head.w", {features, spec.classes}, features);
    add("head.b", {spec.classes}, features);
    return layout;
}

ParamVector model_new(const ModelSpec& spec, std::uint64_t seed) {
    ParamVector p;
    p.layout = param_layout(spec);
    p.values.resize(p.layout.total);
    Rng rng(derive_seed({seed, 0x30de1}));
    for (const auto& e : p.layout.entries) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(e.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (std::size_t i = 0; i < numel(e.shape); ++i) p.values[e.offset + i] = dist(rng);
    }
    return p;
}

std::vector<Tensor<double>> unflatten(const ParamVector& params) {
    if (params.values.size() != params.layout.total)
        throw ShapeError("param vector of length " + std::to_string(params.values.size()) + " for layout of " +
                         std::to_string(params.layout.total));
    std::vector<Tensor<double>> out;
    for (const auto& e : params.layout.entries) {
        auto first = params.values.begin() + static_cast<std::ptrdiff_t>(e.offset);
        out.emplace_back(e.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(numel(e.shape))));
    }
    return out;
}

ParamVector flatten(const ParamLayout& layout, const std::vector<Tensor<double>>& tensors) {
    if (tensors.size() != layout.entries.size())
        throw ShapeError("flatten: " + std::to_string(tensors.size()) + " tensors for " +
                         std::to_string(layout.entries.size()) + " layout entries");
    ParamVector p;
    p.layout = layout;
    p.values.resize(layout.total);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& e = layout.entries[i];
        if (tensors[i].shape != e.shape)
            throw ShapeError("flatten: " + e.name + " expects " + to_string(e.shape) + ", got " +
                             to_string(tensors[i].shape));
        std::copy(tensors[i].values.begin(), tensors[i].values.end(),
                  p.values.begin() + static_cast<std::ptrdiff_t>(e.offset));
    }
    return p;
}

ad::Var forward(const ModelSpec& spec, ad::Var params, ad::Var batch) {
    const auto layout = param_layout(spec);
    if (params.shape() != Shape{layout.total})
        throw ShapeError("forward: params node " + to_string(params.shape()) + ", model needs [" +
                         std::to_string(layout.total) + "]");
    const Shape& bs = batch.shape();
    if (bs.size() != 4 || bs[1] != spec.input.height || bs[2] != spec.input.width || bs[3] != spec.input.channels)
        throw ShapeError("forward: batch " + to_string(bs) + " does not match model input " + to_string(spec.input));
    const std::size_t n = bs[0];
    auto piece = [&](std::size_t i) { return ad::slice(params, layout.entries[i].offset, layout.entries[i].shape); };
    auto act = [&](ad::Var x) { return spec.activation == Activation::relu ? ad::relu(x) : ad::tanh(x); };

    std::size_t k = 0;
    ad::Var h = batch;
    if (spec.family == Family::mlp) {
        h = ad::reshape(h, {n, spec.input.numel()});
        for (std::size_t l = 0; l < spec.depth; ++l, k += 2) h = act(ad::bias_add(ad::matmul(h, piece(k)), piece(k + 1)));
    } else {
        for (std::size_t l = 0; l < spec.depth; ++l, k += 2) {
            h = act(ad::bias_add(ad::conv2d(h, piece(k)), piece(k + 1)));
            if (can_pool(h.shape()[1], h.shape()[2])) h = ad::mean_pool2(h);
        }
        h = ad::reshape(h, {n, h.size() / n});
    }
    return ad::bias_add(ad::matmul(h, piece(k)), piece(k + 1));
}

Tensor<double> logits(const ParamVector& params, const ModelSpec& spec, const Tensor<double>& batch) {
    ad::Graph g;
    auto p = g.input({params.size()}, "params");
    auto x = g.input(batch.shape, "batch");
    auto out = forward(spec, p, x);
    ad::Bindings<double> b;
    b.set(p, Tensor<double>({params.size()}, params.values)).set(x, batch);
    return ad::eval(g, out, b);
}

double evaluate(const ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    constexpr std::size_t kChunk = 500;
    const auto pf = Tensor<double>({params.size()}, params.values).cast<float>();
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, ds.size() - start);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        ad::Graph g;
        auto p = g.input({params.size()}, "params");
        auto x = g.input({n, ds.shape.height, ds.shape.width, ds.shape.channels}, "batch");
        auto out = forward(spec, p, x);
        ad::Bindings<float> b;
        b.set(p, pf).set(x, ds.batch<float>(idx));
        const auto z = ad::eval(g, out, b);
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < spec.classes; ++c)
                if (z[r * spec.classes + c] > z[r * spec.classes + best]) best = c;
            if (static_cast<int>(best) == ds.labels[idx[r]]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double dataset_loss(const ParamVector& params, const ModelSpec& spec, const LabeledDataset& ds,
                    std::span<const std::size_t> indices) {
    if (indices.empty()) throw ConfigError("dataset_loss: no rows");
    ad::Graph g;
    auto p = g.input({params.size()}, "params");
    auto x = g.input({indices.size(), ds.shape.height, ds.shape.width, ds.shape.channels}, "batch");
    auto y = g.input({indices.size(), ds.classes}, "onehot");
    auto loss = ad::softmax_cross_entropy(forward(spec, p, x), y);
    ad::Bindings<double> b;
    b.set(p, Tensor<double>({params.size()}, params.values))
        .set(x, ds.batch<double>(indices))
        .set(y, ds.onehot<double>(indices));
    return ad::eval(g, loss, b).item();
}

void write_spec(std::ostream& out, const ModelSpec& s) {
    for (std::size_t v : {static_cast<std::size_t>(s.family), s.depth, s.width, s.input.height, s.input.width,
                          s.input.channels, s.classes, static_cast<std::size_t>(s.activation)})
        binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
}

ModelSpec read_spec(std::istream& in, const std::string& what) {
    ModelSpec s;
    const auto family = binio::get<std::uint32_t>(in, what);
    if (family > 1) throw FormatError(what + ": unknown model family code");
    s.family = static_cast<Family>(family);
    s.depth = binio::get<std::uint32_t>(in, what);
    s.width = binio::get<std::uint32_t>(in, what);
    s.input.height = binio::get<std::uint32_t>(in, what);
    s.input.width = binio::get<std::uint32_t>(in, what);
    s.input.channels = binio::get<std::uint32_t>(in, what);
    s.classes = binio::get<std::uint32_t>(in, what);
    const auto act = binio::get<std::uint32_t>(in, what);
    if (act > 1) throw FormatError(what + ": unknown activation code");
    s.activation = static_cast<Activation>(act);
    try {
        s.validate();
    } catch (const ConfigError& e) {
        throw FormatError(what + ": " + e.what());
    }
    return s;
}

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kKindModel = 0;
} // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ParamVector& params) {
    if (params.size() != param_layout(spec).total) throw ShapeError("checkpoint: params do not match spec");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    binio::put_magic(out, "FDGM");
    binio::put<std::uint32_t>(out, kCheckpointVersion);
    binio::put<std::uint32_t>(out, kKindModel);
    write_spec(out, spec);
    binio::put_doubles(out, params.values);
    if (!out) throw Error("cannot write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    const std::string what = path.string();
    if (!in) throw FormatError("cannot read " + what);
    binio::expect_magic(in, "FDGM", what);
    if (binio::get<std::uint32_t>(in, what) != kCheckpointVersion) throw FormatError(what + ": unsupported version");
    if (binio::get<std::uint32_t>(in, what) != kKindModel) throw FormatError(what + ": not a model checkpoint");
    Checkpoint ck;
    ck.spec = read_spec(in, what);
    ck.params.layout = param_layout(ck.spec);
    ck.params.values = binio::get_doubles(in, what);
    if (ck.params.values.size() != ck.params.layout.total)
        throw FormatError(what + ": stored length does not match the model spec");
    return ck;
}

} // namespace feddgm
