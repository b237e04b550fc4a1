#include "feddgm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "feddgm/error.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kProxySplit = 1;
constexpr std::uint64_t kTestSplit = 2;
constexpr std::uint64_t kToyData = 3;
constexpr std::uint64_t kToyChain = 4;

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string format_number(double v) {
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return s.str();
}

std::string arch_label(const ArchConfig& a) {
    return to_string(a.family) + "-d" + std::to_string(a.depth) + "-w" + std::to_string(a.width);
}

/// Reads one JSON object, tracking which keys were consumed so leftovers can
/// be reported as unknown fields.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const char* key) const { return j_.contains(key); }
    std::string at(const char* key) const { return path_ + "." + key; }

    const json* find(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.insert(key);
        return &*it;
    }

    void get(const char* key, double& v) {
        if (auto* x = find(key)) v = number(*x, at(key));
    }
    void get(const char* key, std::size_t& v) {
        if (auto* x = find(key)) v = count(*x, at(key));
    }
    void get(const char* key, int& v) {
        if (auto* x = find(key)) {
            if (!x->is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
            v = x->get<int>();
        }
    }
    void get(const char* key, bool& v) {
        if (auto* x = find(key)) {
            if (!x->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
            v = x->get<bool>();
        }
    }
    void get(const char* key, std::string& v) {
        if (auto* x = find(key)) v = text(*x, at(key));
    }
    template <typename T, typename Parse>
    void get_enum(const char* key, T& v, Parse parse) {
        if (auto* x = find(key)) {
            try {
                v = parse(text(*x, at(key)));
            } catch (const ConfigError& e) {
                throw ConfigError(at(key) + ": " + e.what());
            }
        }
    }
    template <typename T, typename Item>
    void get_list(const char* key, std::vector<T>& v, Item item) {
        if (auto* x = find(key)) {
            if (!x->is_array()) throw ConfigError(at(key) + ": expected an array");
            v.clear();
            for (std::size_t i = 0; i < x->size(); ++i)
                v.push_back(item((*x)[i], at(key) + "[" + std::to_string(i) + "]"));
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key()) && it.key() != "$schema") throw ConfigError(path_ + "." + it.key() + ": unknown field");
    }

    static double number(const json& x, const std::string& path) {
        if (!x.is_number()) throw ConfigError(path + ": expected a number");
        return x.get<double>();
    }
    static std::uint64_t count(const json& x, const std::string& path) {
        if (!x.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
        return x.get<std::uint64_t>();
    }
    static std::string text(const json& x, const std::string& path) {
        if (!x.is_string()) throw ConfigError(path + ": expected a string");
        return x.get<std::string>();
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

json arch_json(const ArchConfig& a) {
    return {{"family", to_string(a.family)}, {"depth", a.depth}, {"width", a.width},
            {"activation", to_string(a.activation)}};
}

ArchConfig read_arch(const json& j, const std::string& path) {
    ArchConfig a;
    Fields f(j, path);
    f.get_enum("family", a.family, parse_family);
    f.get("depth", a.depth);
    f.get("width", a.width);
    f.get_enum("activation", a.activation, parse_activation);
    f.finish();
    return a;
}

ModelSpec arch_spec(const ArchConfig& a, const LabeledDataset& ds) {
    ModelSpec s;
    s.family = a.family;
    s.depth = a.depth;
    s.width = a.width;
    s.activation = a.activation;
    s.input = ds.shape;
    s.classes = ds.classes;
    return s;
}

ArchConfig spec_arch(const ModelSpec& s) { return {s.family, s.depth, s.width, s.activation}; }

double default_noise(const std::string& source) {
    if (source == "gauss-blobs") return 0.08;
    if (source == "two-spirals") return 0.02;
    return 0.2;
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (auto& c : out)
        if (c == '/' || c == ' ') c = '_';
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
    if (!f) throw Error("failed writing " + path.string());
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

} // namespace

bool SweepAxes::empty() const noexcept {
    return method.empty() && alpha.empty() && ipc.empty() && layer.empty() && local_epochs.empty() &&
           surrogate_depth.empty();
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seed list must not be empty");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
    if (clients < 1) throw ConfigError("clients must be at least 1");
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (!(data.proxy_fraction > 0.0 && data.proxy_fraction < 1.0))
        throw ConfigError("data.proxy_fraction must lie in (0,1)");
    if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0))
        throw ConfigError("data.test_fraction must lie in (0,1)");
    for (double a : sweep.alpha)
        if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("alpha must be positive");
    for (auto v : sweep.ipc)
        if (v < 1) throw ConfigError("sweep.ipc values must be at least 1");
    for (auto v : sweep.local_epochs)
        if (v < 1) throw ConfigError("sweep.local_epochs values must be at least 1");
    for (auto v : sweep.surrogate_depth)
        if (v < 1) throw ConfigError("sweep.surrogate_depth values must be at least 1");
    for (double b : theory.beta_d)
        if (!(b > 0.0)) throw ConfigError("theory.beta_d values must be positive");
    if (!(theory.beta_star > 0.0)) throw ConfigError("theory.beta_star must be positive");
    if (theory.agents < 1) throw ConfigError("theory.agents must be at least 1");
    if (!(theory.eps >= 0.0)) throw ConfigError("theory.eps must be non-negative");
    distill.validate();
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["data"] = {{"source", c.data.source},
                 {"samples", c.data.samples},
                 {"classes", c.data.classes},
                 {"dim", c.data.dim},
                 {"noise", c.data.noise},
                 {"seed", c.data.seed},
                 {"proxy_fraction", c.data.proxy_fraction},
                 {"test_fraction", c.data.test_fraction}};
    const auto& g = c.generator;
    j["generator"] = {{"path", c.generator_path},     {"noise_dim", g.noise_dim},
                      {"style_dim", g.style_dim},     {"channels", g.channels},
                      {"out_channels", g.out_channels}, {"encoder_hidden", g.encoder_hidden},
                      {"max_epochs", g.max_epochs},   {"batch_size", g.batch_size},
                      {"lr", g.lr},                   {"target_mse", g.target_mse},
                      {"kl_weight", g.kl_weight},     {"seed", g.seed}};
    j["federation"] = {{"method", to_string(c.method)},
                       {"clients", c.clients},
                       {"participants", c.participants},
                       {"rounds", c.rounds},
                       {"alpha", c.alpha},
                       {"global_epochs", c.global_epochs},
                       {"global_batch", c.global_batch},
                       {"global_lr", c.global_lr},
                       {"prox_mu", c.prox_mu},
                       {"accumulate", c.accumulate},
                       {"threads", c.threads}};
    j["surrogate"] = arch_json(c.surrogate);
    j["global"] = c.global ? arch_json(*c.global) : json(nullptr);
    const auto& d = c.distill;
    j["distill"] = {{"local_epochs", d.local_epochs},
                    {"student_steps", d.student_steps},
                    {"distill_iters", d.distill_iters},
                    {"lr_local", d.lr_local},
                    {"lr_student", d.lr_student},
                    {"lr_latent", d.lr_latent},
                    {"ipc", d.ipc},
                    {"layer", d.layer},
                    {"local_batch", d.local_batch},
                    {"local_momentum", d.local_momentum},
                    {"latent_optimizer", to_string(d.latent_optimizer)},
                    {"latent_momentum", d.latent_momentum},
                    {"prox_mu", d.prox_mu},
                    {"precision", to_string(d.precision)}};
    j["feddm_lite"] = {{"iters", c.feddm.iters}, {"lr", c.feddm.lr}, {"feature_width", c.feddm.feature_width}};
    j["seeds"] = c.seeds;
    json methods = json::array();
    for (auto m : c.sweep.method) methods.push_back(to_string(m));
    j["sweep"] = {{"method", methods},
                  {"alpha", c.sweep.alpha},
                  {"ipc", c.sweep.ipc},
                  {"layer", c.sweep.layer},
                  {"local_epochs", c.sweep.local_epochs},
                  {"surrogate_depth", c.sweep.surrogate_depth}};
    j["workers"] = c.workers;
    j["timing"] = c.timing;
    j["output_dir"] = c.output_dir;
    const auto& t = c.theory;
    j["theory"] = {{"family", theory::to_string(t.family)},
                   {"dim", t.dim},
                   {"samples", t.samples},
                   {"distilled", t.distilled},
                   {"agents", t.agents},
                   {"noise", t.noise},
                   {"beta_d", t.beta_d},
                   {"beta_star", t.beta_star},
                   {"steps", t.steps},
                   {"burn_in", t.burn_in},
                   {"eps", t.eps},
                   {"dump_chains", t.dump_chains}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    Fields top(j, "config");
    if (auto* x = top.find("data")) {
        Fields f(*x, top.at("data"));
        f.get("source", c.data.source);
        f.get("samples", c.data.samples);
        f.get("classes", c.data.classes);
        f.get("dim", c.data.dim);
        f.get("noise", c.data.noise);
        f.get("seed", c.data.seed);
        f.get("proxy_fraction", c.data.proxy_fraction);
        f.get("test_fraction", c.data.test_fraction);
        f.finish();
    }
    if (auto* x = top.find("generator")) {
        Fields f(*x, top.at("generator"));
        auto& g = c.generator;
        f.get("path", c.generator_path);
        f.get("noise_dim", g.noise_dim);
        f.get("style_dim", g.style_dim);
        f.get("channels", g.channels);
        f.get("out_channels", g.out_channels);
        f.get("encoder_hidden", g.encoder_hidden);
        f.get("max_epochs", g.max_epochs);
        f.get("batch_size", g.batch_size);
        f.get("lr", g.lr);
        f.get("target_mse", g.target_mse);
        f.get("kl_weight", g.kl_weight);
        f.get("seed", g.seed);
        f.finish();
    }
    if (auto* x = top.find("federation")) {
        Fields f(*x, top.at("federation"));
        f.get_enum("method", c.method, parse_method);
        f.get("clients", c.clients);
        f.get("participants", c.participants);
        f.get("rounds", c.rounds);
        f.get("alpha", c.alpha);
        f.get("global_epochs", c.global_epochs);
        f.get("global_batch", c.global_batch);
        f.get("global_lr", c.global_lr);
        f.get("prox_mu", c.prox_mu);
        f.get("accumulate", c.accumulate);
        f.get("threads", c.threads);
        f.finish();
    }
    if (auto* x = top.find("surrogate")) c.surrogate = read_arch(*x, top.at("surrogate"));
    if (auto* x = top.find("global")) {
        if (x->is_null())
            c.global.reset();
        else
            c.global = read_arch(*x, top.at("global"));
    }
    if (auto* x = top.find("distill")) {
        Fields f(*x, top.at("distill"));
        auto& d = c.distill;
        f.get("local_epochs", d.local_epochs);
        f.get("student_steps", d.student_steps);
        f.get("distill_iters", d.distill_iters);
        f.get("lr_local", d.lr_local);
        f.get("lr_student", d.lr_student);
        f.get("lr_latent", d.lr_latent);
        f.get("ipc", d.ipc);
        f.get("layer", d.layer);
        f.get("local_batch", d.local_batch);
        f.get("local_momentum", d.local_momentum);
        f.get_enum("latent_optimizer", d.latent_optimizer, parse_latent_optimizer);
        f.get("latent_momentum", d.latent_momentum);
        f.get("prox_mu", d.prox_mu);
        f.get_enum("precision", d.precision, parse_precision);
        f.finish();
    }
    if (auto* x = top.find("feddm_lite")) {
        Fields f(*x, top.at("feddm_lite"));
        f.get("iters", c.feddm.iters);
        f.get("lr", c.feddm.lr);
        f.get("feature_width", c.feddm.feature_width);
        f.finish();
    }
    top.get_list("seeds", c.seeds, Fields::count);
    if (auto* x = top.find("sweep")) {
        Fields f(*x, top.at("sweep"));
        f.get_list("method", c.sweep.method, [](const json& v, const std::string& p) {
            try {
                return parse_method(Fields::text(v, p));
            } catch (const ConfigError& e) {
                throw ConfigError(p + ": " + e.what());
            }
        });
        f.get_list("alpha", c.sweep.alpha, Fields::number);
        f.get_list("ipc", c.sweep.ipc, Fields::count);
        f.get_list("layer", c.sweep.layer, [](const json& v, const std::string& p) {
            if (!v.is_number_integer()) throw ConfigError(p + ": expected an integer");
            return v.get<int>();
        });
        f.get_list("local_epochs", c.sweep.local_epochs, Fields::count);
        f.get_list("surrogate_depth", c.sweep.surrogate_depth, Fields::count);
        f.finish();
    }
    top.get("workers", c.workers);
    top.get("timing", c.timing);
    top.get("output_dir", c.output_dir);
    if (auto* x = top.find("theory")) {
        Fields f(*x, top.at("theory"));
        auto& t = c.theory;
        f.get_enum("family", t.family, theory::parse_toy_family);
        f.get("dim", t.dim);
        f.get("samples", t.samples);
        f.get("distilled", t.distilled);
        f.get("agents", t.agents);
        f.get("noise", t.noise);
        f.get_list("beta_d", t.beta_d, Fields::number);
        f.get("beta_star", t.beta_star);
        f.get("steps", t.steps);
        f.get("burn_in", t.burn_in);
        f.get("eps", t.eps);
        f.get("dump_chains", t.dump_chains);
        f.finish();
    }
    top.finish();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("config") && j.contains("command")) return config_from_json(j["config"]);
    return config_from_json(j);
}

json config_schema() {
    static const char* text = R"({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "feddgm experiment config",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "$schema": {"type": "string"},
    "data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "source": {"type": "string", "description": "gauss-blobs, two-spirals, tiny-digits or an IDX directory"},
        "samples": {"type": "integer", "minimum": 0},
        "classes": {"type": "integer", "minimum": 0},
        "dim": {"type": "integer", "minimum": 1},
        "noise": {"type": "number"},
        "seed": {"type": "integer", "minimum": 0},
        "proxy_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
      }
    },
    "generator": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "path": {"type": "string"},
        "noise_dim": {"type": "integer", "minimum": 1},
        "style_dim": {"type": "integer", "minimum": 1},
        "channels": {"type": "integer", "minimum": 1},
        "out_channels": {"type": "integer", "minimum": 1},
        "encoder_hidden": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "target_mse": {"type": "number", "minimum": 0},
        "kl_weight": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "federation": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "method": {"enum": ["feddgm", "fedavg", "fedprox", "fednova", "feddm-lite"]},
        "clients": {"type": "integer", "minimum": 1},
        "participants": {"type": "integer", "minimum": 0},
        "rounds": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "global_epochs": {"type": "integer", "minimum": 0},
        "global_batch": {"type": "integer", "minimum": 1},
        "global_lr": {"type": "number", "minimum": 0},
        "prox_mu": {"type": "number", "minimum": 0},
        "accumulate": {"type": "boolean"},
        "threads": {"type": "integer", "minimum": 1}
      }
    },
    "surrogate": {"$ref": "#/$defs/arch"},
    "global": {"oneOf": [{"$ref": "#/$defs/arch"}, {"type": "null"}]},
    "distill": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "local_epochs": {"type": "integer", "minimum": 1},
        "student_steps": {"type": "integer", "minimum": 1},
        "distill_iters": {"type": "integer", "minimum": 0},
        "lr_local": {"type": "number", "minimum": 0},
        "lr_student": {"type": "number", "minimum": 0},
        "lr_latent": {"type": "number", "minimum": 0},
        "ipc": {"type": "integer", "minimum": 1},
        "layer": {"type": "integer", "minimum": -1},
        "local_batch": {"type": "integer", "minimum": 1},
        "local_momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "latent_optimizer": {"enum": ["sgd", "momentum", "adam"]},
        "latent_momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "prox_mu": {"type": "number", "minimum": 0},
        "precision": {"enum": ["f32", "f64"]}
      }
    },
    "feddm_lite": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "iters": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "feature_width": {"type": "integer", "minimum": 1}
      }
    },
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    "sweep": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "method": {"type": "array", "items": {"enum": ["feddgm", "fedavg", "fedprox", "fednova", "feddm-lite"]}},
        "alpha": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "ipc": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "layer": {"type": "array", "items": {"type": "integer", "minimum": -1}},
        "local_epochs": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "surrogate_depth": {"type": "array", "items": {"type": "integer", "minimum": 1}}
      }
    },
    "workers": {"type": "integer", "minimum": 1},
    "timing": {"type": "boolean"},
    "output_dir": {"type": "string"},
    "theory": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "family": {"enum": ["quadratic", "overparameterized"]},
        "dim": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "distilled": {"type": "integer", "minimum": 1},
        "agents": {"type": "integer", "minimum": 1},
        "noise": {"type": "number", "minimum": 0},
        "beta_d": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "beta_star": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "burn_in": {"type": "integer", "minimum": 0},
        "eps": {"type": "number", "minimum": 0},
        "dump_chains": {"type": "boolean"}
      }
    }
  },
  "$defs": {
    "arch": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "family": {"enum": ["mlp", "convnet"]},
        "depth": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "activation": {"enum": ["relu", "tanh"]}
      }
    }
  }
})";
    return json::parse(text);
}

PreparedData prepare_data(const DataSource& source) {
    BuiltinOptions o;
    o.samples = source.samples;
    o.classes = source.classes;
    o.dim = source.dim;
    o.noise = source.noise;
    o.seed = source.seed;
    PreparedData d;
    d.full = load_dataset(source.source, o);
    auto split = public_proxy_split(d.full, source.proxy_fraction, derive_seed({source.seed, kProxySplit}));
    auto rest = stratified_split(split.second, source.test_fraction, derive_seed({source.seed, kTestSplit}));
    d.proxy = std::move(split.first);
    d.test = std::move(rest.first);
    d.pool = std::move(rest.second);
    if (d.proxy.size() == 0 || d.test.size() == 0 || d.pool.size() == 0)
        throw ConfigError("data: proxy, test and federated pool must all be non-empty");
    return d;
}

ExperimentConfig resolve(const ExperimentConfig& cfg, const PreparedData& data) {
    ExperimentConfig r = cfg;
    if (is_builtin_dataset(cfg.data.source)) {
        r.data.samples = data.full.size();
        r.data.classes = data.full.classes;
        if (r.data.noise < 0.0) r.data.noise = default_noise(cfg.data.source);
    }
    if (!r.global) r.global = spec_arch(scaled_spec(arch_spec(cfg.surrogate, data.pool)));
    if (r.participants == 0) r.participants = r.clients;
    const auto gen_shape = generator_new(data.pool.shape, data.pool.classes, cfg.generator);
    if (r.distill.layer < 0) r.distill.layer = static_cast<int>(gen_shape.default_layer());
    return r;
}

FedConfig make_fed_config(const ExperimentConfig& cfg, const LabeledDataset& pool, std::uint64_t seed) {
    FedConfig f;
    f.clients = cfg.clients;
    f.participants = cfg.participants;
    f.rounds = cfg.rounds;
    f.method = cfg.method;
    f.alpha = cfg.alpha;
    f.surrogate = arch_spec(cfg.surrogate, pool);
    f.global = cfg.global ? arch_spec(*cfg.global, pool) : scaled_spec(f.surrogate);
    f.distill = cfg.distill;
    f.global_epochs = cfg.global_epochs;
    f.global_batch = cfg.global_batch;
    f.global_lr = cfg.global_lr;
    f.prox_mu = cfg.prox_mu;
    f.accumulate = cfg.accumulate;
    f.feddm = cfg.feddm;
    f.seed = seed;
    f.threads = cfg.threads;
    f.validate();
    return f;
}

Generator obtain_generator(const ExperimentConfig& cfg, const PreparedData& data) {
    if (cfg.generator_path.empty()) return pretrain_decoder(data.proxy, cfg.generator);
    Generator g = load_generator(cfg.generator_path);
    if (g.image != data.pool.shape || g.classes != data.pool.classes)
        throw ConfigError("generator " + cfg.generator_path + " does not match the dataset shape");
    if (g.meta.proxy_hash != dataset_hash(data.proxy))
        throw ConfigError("generator " + cfg.generator_path + " was pretrained on a different proxy set");
    return g;
}

std::vector<SweepCell> expand_sweep(const ExperimentConfig& cfg) {
    std::vector<SweepCell> cells{{"", cfg}};
    auto extend = [&](const std::string& name, std::size_t n, auto&& apply, auto&& show) {
        if (n == 0) return;
        std::vector<SweepCell> next;
        for (const auto& cell : cells)
            for (std::size_t i = 0; i < n; ++i) {
                SweepCell c = cell;
                apply(c.config, i);
                c.label += (c.label.empty() ? "" : ";") + name + "=" + show(i);
                next.push_back(std::move(c));
            }
        cells = std::move(next);
    };
    const auto& s = cfg.sweep;
    extend("method", s.method.size(), [&](ExperimentConfig& c, std::size_t i) { c.method = s.method[i]; },
           [&](std::size_t i) { return to_string(s.method[i]); });
    extend("alpha", s.alpha.size(), [&](ExperimentConfig& c, std::size_t i) { c.alpha = s.alpha[i]; },
           [&](std::size_t i) { return format_number(s.alpha[i]); });
    extend("ipc", s.ipc.size(), [&](ExperimentConfig& c, std::size_t i) { c.distill.ipc = s.ipc[i]; },
           [&](std::size_t i) { return std::to_string(s.ipc[i]); });
    extend("layer", s.layer.size(), [&](ExperimentConfig& c, std::size_t i) { c.distill.layer = s.layer[i]; },
           [&](std::size_t i) { return std::to_string(s.layer[i]); });
    extend("local_epochs", s.local_epochs.size(),
           [&](ExperimentConfig& c, std::size_t i) { c.distill.local_epochs = s.local_epochs[i]; },
           [&](std::size_t i) { return std::to_string(s.local_epochs[i]); });
    extend("surrogate_depth", s.surrogate_depth.size(),
           [&](ExperimentConfig& c, std::size_t i) { c.surrogate.depth = s.surrogate_depth[i]; },
           [&](std::size_t i) { return std::to_string(s.surrogate_depth[i]); });
    for (auto& c : cells) c.config.sweep = {};
    return cells;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream s(line);
    while (std::getline(s, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::string architecture_for(const fs::path& csv) {
    const auto manifest = csv.parent_path() / "manifest.json";
    if (!fs::exists(manifest)) return "unknown";
    try {
        const auto cfg = load_config(manifest);
        return arch_label(cfg.global.value_or(spec_arch(scaled_spec(arch_spec(cfg.surrogate, LabeledDataset{})))));
    } catch (const Error&) {
        return "unknown";
    }
}

} // namespace

std::vector<SummaryRow> summarize(const std::vector<fs::path>& csv_paths) {
    if (csv_paths.empty()) throw ConfigError("summarize needs at least one CSV");
    const std::string plain = kMetricsHeader;
    const std::string swept = std::string("axis,") + kMetricsHeader;
    std::string header;
    struct Final {
        std::size_t round = 0;
        double acc = 0.0;
    };
    // series key: (method, alpha, architecture, axis, seed)
    using SeriesKey = std::tuple<std::string, std::string, std::string, std::string, std::string>;
    std::map<SeriesKey, Final> finals;
    std::vector<SeriesKey> order;
    for (const auto& path : csv_paths) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read " + path.string());
        std::string line;
        if (!std::getline(f, line)) throw ConfigError(path.string() + ": empty file");
        if (line != plain && line != swept) throw ConfigError(path.string() + ": not a metrics CSV (header '" + line + "')");
        if (header.empty())
            header = line;
        else if (header != line)
            throw ConfigError("inconsistent schemas: " + path.string() + " has header '" + line + "', expected '" +
                              header + "'");
        const bool has_axis = line == swept;
        const std::string arch = architecture_for(path);
        std::size_t lineno = 1;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto cols = split(line, ',');
            const std::size_t off = has_axis ? 1 : 0;
            if (cols.size() != 10 + off)
                throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                  std::to_string(10 + off) + " columns");
            if (cols[off + 4] != "GLOBAL") continue;
            SeriesKey key{cols[off + 1], cols[off + 2], arch, has_axis ? cols[0] : "", cols[off + 3]};
            Final fin{std::stoul(cols[off + 0]), std::stod(cols[off + 7])};
            auto it = finals.find(key);
            if (it == finals.end()) {
                finals.emplace(key, fin);
                order.push_back(key);
            } else if (fin.round >= it->second.round) {
                it->second = fin;
            }
        }
    }
    using CellKey = std::tuple<std::string, std::string, std::string, std::string>;
    std::map<CellKey, std::vector<double>> cells;
    std::vector<CellKey> cell_order;
    for (const auto& key : order) {
        CellKey c{std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key)};
        auto [it, fresh] = cells.try_emplace(c);
        if (fresh) cell_order.push_back(c);
        it->second.push_back(finals.at(key).acc);
    }
    std::vector<SummaryRow> rows;
    for (const auto& c : cell_order) {
        const auto& v = cells.at(c);
        SummaryRow r{std::get<0>(c), std::get<1>(c), std::get<2>(c), std::get<3>(c), v.size(), 0.0, 0.0};
        for (double a : v) r.mean += a;
        r.mean /= static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0.0;
            for (double a : v) ss += (a - r.mean) * (a - r.mean);
            r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "method,alpha,architecture,axis,series,mean_acc,std_acc\n";
    for (const auto& r : rows)
        out << r.method << ',' << r.alpha << ',' << r.architecture << ',' << r.axis << ',' << r.series << ','
            << format_number(r.mean) << ',' << format_number(r.std) << '\n';
}

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::mutex log_mutex;

    void log(const std::string& s) {
        std::lock_guard lock(log_mutex);
        err << s << '\n';
    }
};

fs::path output_dir(const ExperimentConfig& cfg, const std::string& command) {
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    const char* root = std::getenv("FEDDGM_OUT");
    return fs::path(root && *root ? root : "runs") / command;
}

void write_manifest(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg,
                    const PreparedData* data, const Generator* gen, const std::vector<std::string>& outputs) {
    json m;
    m["command"] = command;
    m["config"] = to_json(cfg);
    if (data) {
        m["data"] = {{"dataset_hash", hex(dataset_hash(data->full))},
                     {"proxy_hash", hex(dataset_hash(data->proxy))},
                     {"input", to_string(data->pool.shape)},
                     {"classes", data->pool.classes},
                     {"pool_size", data->pool.size()},
                     {"test_size", data->test.size()},
                     {"proxy_size", data->proxy.size()}};
        const auto fc = make_fed_config(cfg, data->pool, 0);
        m["models"] = {{"surrogate", fc.surrogate.describe()},
                       {"surrogate_params", param_layout(fc.surrogate).total},
                       {"global", fc.global.describe()},
                       {"global_params", param_layout(fc.global).total}};
    }
    if (gen)
        m["generator"] = {{"epochs", gen->meta.epochs},
                          {"final_mse", gen->meta.final_mse},
                          {"converged", gen->meta.converged},
                          {"depth", gen->depth()},
                          {"proxy_hash", hex(gen->meta.proxy_hash)}};
    m["outputs"] = outputs;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

bool needs_generator(const ExperimentConfig& cfg) {
    const auto& m = cfg.sweep.method;
    if (m.empty()) return cfg.method == Method::feddgm;
    return std::find(m.begin(), m.end(), Method::feddgm) != m.end();
}

std::string run_series(Context& ctx, const ExperimentConfig& cfg, const PreparedData& data, const Generator* gen,
                       std::uint64_t seed, const std::string& tag, bool header,
                       const SyntheticCallback& on_synthetic = {}) {
    const auto fc = make_fed_config(cfg, data.pool, seed);
    FedData fd{data.pool, data.test, dirichlet_partition(data.pool, fc.clients, fc.alpha, seed)};
    const auto run = run_method(fc, fd, gen, [&](const RoundMetrics& m) {
        std::ostringstream s;
        s << tag << to_string(fc.method) << " seed " << seed << " round " << m.round + 1 << "/" << fc.rounds
          << " global_acc " << std::fixed << std::setprecision(4) << m.global_acc;
        ctx.log(s.str());
    }, on_synthetic);
    std::ostringstream csv;
    write_metrics_csv(csv, run, cfg.timing, header);
    return csv.str();
}

int cmd_run(Context& ctx, ExperimentConfig cfg, bool dump) {
    const std::string command = dump ? "dump-synth" : "run";
    if (dump && cfg.method != Method::feddgm && cfg.method != Method::feddm_lite)
        throw ConfigError("dump-synth needs method feddgm or feddm-lite");
    cfg.validate();
    const auto data = prepare_data(cfg.data);
    const auto dir = output_dir(cfg, command);
    cfg.output_dir = dir.string();
    cfg = resolve(cfg, data);
    make_fed_config(cfg, data.pool, 0);
    fs::create_directories(dir);
    std::optional<Generator> gen;
    if (needs_generator(cfg)) gen = obtain_generator(cfg, data);
    std::vector<std::string> outputs{"metrics.csv"};
    if (dump) outputs.push_back("synthetic/");
    write_manifest(dir, command, cfg, &data, gen ? &*gen : nullptr, outputs);

    std::string csv;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const auto seed = cfg.seeds[i];
        SyntheticCallback on_synth;
        if (dump)
            on_synth = [&, seed](std::size_t round, std::size_t client, const LabeledDataset& ds) {
                const auto sub = dir / "synthetic" / ("seed_" + std::to_string(seed)) /
                                 ("round_" + std::to_string(round)) / ("client_" + std::to_string(client));
                fs::create_directories(sub);
                Shape shape{ds.size(), ds.shape.height, ds.shape.width, ds.shape.channels};
                Tensor<double> images(shape, std::vector<double>(ds.images.begin(), ds.images.end()));
                dump_synthetic(sub, images, ds.labels);
            };
        csv += run_series(ctx, cfg, data, gen ? &*gen : nullptr, seed, "", i == 0, on_synth);
    }
    write_text(dir / "metrics.csv", csv);
    ctx.out << "wrote " << (dir / "metrics.csv").string() << '\n';
    return 0;
}

int cmd_sweep(Context& ctx, ExperimentConfig cfg) {
    if (cfg.sweep.empty()) throw ConfigError("sweep needs at least one --axis");
    cfg.validate();
    const auto data = prepare_data(cfg.data);
    const auto dir = output_dir(cfg, "sweep");
    cfg.output_dir = dir.string();
    cfg = resolve(cfg, data);
    const auto cells = expand_sweep(cfg);
    for (const auto& c : cells) make_fed_config(c.config, data.pool, 0);
    fs::create_directories(dir);
    std::optional<Generator> gen;
    if (needs_generator(cfg)) gen = obtain_generator(cfg, data);
    write_manifest(dir, "sweep", cfg, &data, gen ? &*gen : nullptr, {"sweep.csv"});

    const std::size_t jobs = cells.size() * cfg.seeds.size();
    std::vector<std::string> parts(jobs);
    parallel_for(jobs, cfg.workers, [&](std::size_t i) {
        const auto& cell = cells[i / cfg.seeds.size()];
        const auto seed = cfg.seeds[i % cfg.seeds.size()];
        const auto body = run_series(ctx, cell.config, data, gen ? &*gen : nullptr, seed, "[" + cell.label + "] ", false);
        std::string rows;
        std::istringstream s(body);
        std::string line;
        while (std::getline(s, line)) rows += cell.label + "," + line + "\n";
        parts[i] = std::move(rows);
    });
    std::string csv = std::string("axis,") + kMetricsHeader + "\n";
    for (const auto& p : parts) csv += p;
    write_text(dir / "sweep.csv", csv);
    ctx.out << "wrote " << (dir / "sweep.csv").string() << " (" << cells.size() << " cells x " << cfg.seeds.size()
            << " seeds)\n";
    return 0;
}

int cmd_partition(Context& ctx, ExperimentConfig cfg) {
    cfg.validate();
    const auto data = prepare_data(cfg.data);
    const auto dir = output_dir(cfg, "partition");
    cfg.output_dir = dir.string();
    cfg = resolve(cfg, data);
    fs::create_directories(dir);
    std::vector<std::string> outputs{"histograms.csv"};
    for (auto seed : cfg.seeds) outputs.push_back("partition_seed_" + std::to_string(seed) + ".csv");
    write_manifest(dir, "partition", cfg, &data, nullptr, outputs);

    std::ostringstream hist;
    hist << "seed,client_id,size";
    for (std::size_t c = 0; c < data.pool.classes; ++c) hist << ",class_" << c;
    hist << '\n';
    for (auto seed : cfg.seeds) {
        const auto shards = dirichlet_partition(data.pool, cfg.clients, cfg.alpha, seed);
        write_partition_manifest(shards, dir / ("partition_seed_" + std::to_string(seed) + ".csv"));
        for (const auto& s : shards) {
            hist << seed << ',' << s.client_id << ',' << s.size();
            for (auto h : s.histogram) hist << ',' << h;
            hist << '\n';
        }
    }
    write_text(dir / "histograms.csv", hist.str());
    ctx.out << "wrote " << cfg.seeds.size() << " partition(s) of " << data.pool.size() << " samples into "
            << cfg.clients << " clients under " << dir.string() << '\n';
    return 0;
}

int cmd_pretrain(Context& ctx, ExperimentConfig cfg) {
    cfg.validate();
    const auto data = prepare_data(cfg.data);
    const auto dir = output_dir(cfg, "pretrain-gen");
    cfg.output_dir = dir.string();
    cfg = resolve(cfg, data);
    fs::create_directories(dir);
    const auto target = dir / "generator.bin";
    if (!cfg.generator_path.empty() && fs::exists(cfg.generator_path) && fs::equivalent(cfg.generator_path, target))
        throw ConfigError("refusing to overwrite the input generator " + cfg.generator_path);
    ExperimentConfig fresh = cfg;
    fresh.generator_path.clear();
    const auto gen = obtain_generator(fresh, data);
    save_generator(target, gen);
    write_manifest(dir, "pretrain-gen", fresh, &data, &gen, {"generator.bin"});
    ctx.out << "generator: epochs " << gen.meta.epochs << ", train mse " << format_number(gen.meta.final_mse)
            << ", test reconstruction mse " << format_number(reconstruction_mse(gen, data.test))
            << (gen.meta.converged ? ", converged" : ", stopped at max_epochs") << '\n';
    ctx.out << "wrote " << target.string() << '\n';
    return 0;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_theory(Context& ctx, ExperimentConfig cfg) {
    cfg.validate();
    const auto& t = cfg.theory;
    if (t.beta_d.empty()) throw ConfigError("theory.beta_d must not be empty");
    const auto dir = output_dir(cfg, "theory");
    cfg.output_dir = dir.string();
    fs::create_directories(dir);
    if (t.dump_chains) fs::create_directories(dir / "chains");
    write_manifest(dir, "theory", cfg, nullptr, nullptr, {"theory.csv", "summary.json"});

    struct Row {
        double excess = 0.0;
        bool ok = false;
        double deviation = 0.0;
        double accept_theta = 0.0;
        double accept_data = 0.0;
    };
    const std::size_t ns = cfg.seeds.size();
    std::vector<Row> rows(t.beta_d.size() * ns);
    parallel_for(rows.size(), cfg.workers, [&](std::size_t i) {
        const double beta_d = t.beta_d[i / ns];
        const auto seed = cfg.seeds[i % ns];
        const auto p = theory::make_toy_problem(t.family, t.dim, t.samples, t.distilled, t.agents, t.noise,
                                                derive_seed({seed, kToyData}));
        std::vector<theory::LinearData> distilled;
        Row& r = rows[i];
        r.ok = true;
        for (std::size_t a = 0; a < t.agents; ++a) {
            theory::GibbsOptions o;
            o.steps = t.steps;
            o.burn_in = t.burn_in;
            o.agent = a;
            const auto chain = theory::gibbs_alternate(p, beta_d, t.beta_star, o, derive_seed({seed, kToyChain, a}));
            double excess;
            try {
                excess = theory::support_excess(chain.distilled, p.real[a]);
            } catch (const SingularSystemError&) {
                excess = std::numeric_limits<double>::infinity();
            }
            r.excess = std::max(r.excess, excess);
            r.ok = r.ok && excess <= t.eps;
            r.accept_theta += chain.accept_theta / static_cast<double>(t.agents);
            r.accept_data += chain.accept_data / static_cast<double>(t.agents);
            if (t.dump_chains) {
                std::ofstream f(dir / "chains" /
                                ("beta_" + sanitize(format_number(beta_d)) + "_seed_" + std::to_string(seed) +
                                 "_agent_" + std::to_string(a) + ".csv"));
                theory::write_chain_csv(f, chain);
            }
            distilled.push_back(chain.distilled);
        }
        try {
            r.deviation = theory::centralized_vs_distilled(p, distilled);
        } catch (const SingularSystemError&) {
            r.deviation = std::numeric_limits<double>::infinity();
        }
    });

    std::ostringstream csv;
    csv << "beta_d,seed,support_excess,support_ok,deviation,accept_theta,accept_data\n";
    json cells = json::array();
    std::vector<double> medians;
    for (std::size_t b = 0; b < t.beta_d.size(); ++b) {
        std::size_t ok = 0;
        std::vector<double> dev;
        for (std::size_t s = 0; s < ns; ++s) {
            const auto& r = rows[b * ns + s];
            csv << format_number(t.beta_d[b]) << ',' << cfg.seeds[s] << ',' << format_number(r.excess) << ','
                << (r.ok ? 1 : 0) << ',' << format_number(r.deviation) << ',' << format_number(r.accept_theta) << ','
                << format_number(r.accept_data) << '\n';
            ok += r.ok;
            dev.push_back(r.deviation);
        }
        medians.push_back(median(dev));
        const double rate = static_cast<double>(ok) / static_cast<double>(ns);
        cells.push_back({{"beta_d", t.beta_d[b]}, {"support_rate", rate}, {"median_deviation", medians.back()}});
        ctx.out << "beta_d " << format_number(t.beta_d[b]) << ": support holds in " << ok << "/" << ns
                << " seeds, median deviation " << format_number(medians.back()) << '\n';
    }
    bool decreasing = true;
    for (std::size_t b = 1; b < medians.size(); ++b) decreasing = decreasing && medians[b] < medians[b - 1];
    write_text(dir / "theory.csv", csv.str());
    json summary = {{"family", theory::to_string(t.family)},
                    {"beta_star", t.beta_star},
                    {"eps", t.eps},
                    {"seeds", ns},
                    {"cells", cells},
                    {"deviation_decreasing", decreasing}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    ctx.out << "wrote " << (dir / "theory.csv").string() << '\n';
    return 0;
}

/// Flags shared by the experiment subcommands; each overrides the config file.
struct Overrides {
    std::string config;
    std::string out;
    std::string dataset;
    std::size_t samples = 0;
    std::uint64_t data_seed = 0;
    std::string generator;
    std::size_t gen_epochs = 0;
    std::string method;
    std::size_t clients = 0, participants = 0, rounds = 0;
    double alpha = 0.0;
    std::vector<std::uint64_t> seeds;
    std::size_t ipc = 0;
    int layer = -1;
    std::size_t local_epochs = 0, student_steps = 0, distill_iters = 0, global_epochs = 0;
    std::size_t threads = 0, workers = 0;
    bool timing = false;
    bool accumulate = false;
    std::vector<std::string> axes;
    std::string family;
    std::vector<double> beta_d;
    double beta_star = 0.0;
    std::size_t steps = 0, burn_in = 0;
    double eps = 0.0;
    bool dump_chains = false;

    std::multimap<std::string, CLI::Option*> opts;

    bool given(const std::string& name) const {
        auto [lo, hi] = opts.equal_range(name);
        for (auto it = lo; it != hi; ++it)
            if (it->second->count() > 0) return true;
        return false;
    }
};

void add_common(CLI::App* sub, Overrides& o) {
    auto add = [&](const std::string& name, auto& var, const std::string& help) {
        auto* opt = sub->add_option("--" + name, var, help);
        if constexpr (!requires { var.push_back(var.front()); })
            opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        o.opts.emplace(name, opt);
        return opt;
    };
    add("config", o.config, "JSON config file or a manifest from a previous run");
    add("out", o.out, "output directory (default $FEDDGM_OUT/<command>)");
    add("dataset", o.dataset, "gauss-blobs, two-spirals, tiny-digits or an IDX directory");
    add("samples", o.samples, "total samples of a builtin dataset");
    add("data-seed", o.data_seed, "seed of the dataset and its proxy/test splits");
    add("generator", o.generator, "pretrained generator file");
    add("gen-epochs", o.gen_epochs, "generator pretraining epochs");
    add("method", o.method, "feddgm, fedavg, fedprox, fednova or feddm-lite");
    add("clients", o.clients, "number of clients M");
    add("participants", o.participants, "clients per round (0 = all)");
    add("rounds", o.rounds, "communication rounds T");
    add("alpha", o.alpha, "Dirichlet concentration");
    add("seeds", o.seeds, "comma-separated run seeds")->delimiter(',');
    add("ipc", o.ipc, "synthetic images per class");
    add("layer", o.layer, "generator layer to distill in");
    add("local-epochs", o.local_epochs, "client epochs T_l");
    add("student-steps", o.student_steps, "student steps T_s");
    add("distill-iters", o.distill_iters, "latent updates T_d");
    add("global-epochs", o.global_epochs, "server epochs T_g");
    add("threads", o.threads, "worker threads per run");
    add("workers", o.workers, "concurrent sweep cells or theory chains");
    o.opts.emplace("timing", sub->add_flag("--timing", o.timing, "record wall-clock seconds in the CSV"));
    o.opts.emplace("accumulate", sub->add_flag("--accumulate", o.accumulate, "train on every round's synthetic sets"));
}

void add_theory(CLI::App* sub, Overrides& o) {
    auto last = [&](const std::string& name, CLI::Option* opt) {
        opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        o.opts.emplace(name, opt);
    };
    last("family", sub->add_option("--family", o.family, "quadratic or overparameterized"));
    o.opts.emplace("beta-d", sub->add_option("--beta-d", o.beta_d, "comma-separated data temperatures")->delimiter(','));
    last("beta-star", sub->add_option("--beta-star", o.beta_star, "parameter inverse temperature"));
    last("steps", sub->add_option("--steps", o.steps, "recorded sweeps per chain"));
    last("burn-in", sub->add_option("--burn-in", o.burn_in, "adaptation sweeps per chain"));
    last("eps", sub->add_option("--eps", o.eps, "support-condition tolerance"));
    o.opts.emplace("dump-chains", sub->add_flag("--dump-chains", o.dump_chains, "write every chain as CSV"));
}

void apply_axis(SweepAxes& axes, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("--axis expects name=v1,v2,... (got '" + spec + "')");
    const auto name = spec.substr(0, eq);
    const auto values = split(spec.substr(eq + 1), ',');
    if (values.empty()) throw ConfigError("--axis " + name + " has no values");
    auto number = [&](const std::string& v) {
        std::size_t used = 0;
        double x;
        try {
            x = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != v.size()) throw ConfigError("--axis " + name + ": '" + v + "' is not a number");
        return x;
    };
    auto whole = [&](const std::string& v) {
        const double x = number(v);
        if (x < 0 || x != std::floor(x)) throw ConfigError("--axis " + name + ": '" + v + "' is not a whole number");
        return static_cast<std::size_t>(x);
    };
    if (name == "method") {
        axes.method.clear();
        for (const auto& v : values) axes.method.push_back(parse_method(v));
    } else if (name == "alpha") {
        axes.alpha.clear();
        for (const auto& v : values) axes.alpha.push_back(number(v));
    } else if (name == "ipc") {
        axes.ipc.clear();
        for (const auto& v : values) axes.ipc.push_back(whole(v));
    } else if (name == "layer") {
        axes.layer.clear();
        for (const auto& v : values) axes.layer.push_back(static_cast<int>(whole(v)));
    } else if (name == "local_epochs" || name == "T_l") {
        axes.local_epochs.clear();
        for (const auto& v : values) axes.local_epochs.push_back(whole(v));
    } else if (name == "surrogate_depth") {
        axes.surrogate_depth.clear();
        for (const auto& v : values) axes.surrogate_depth.push_back(whole(v));
    } else {
        throw ConfigError("unknown sweep axis '" + name +
                          "' (expected method, alpha, ipc, layer, local_epochs or surrogate_depth)");
    }
}

ExperimentConfig build_config(const Overrides& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.given("out")) c.output_dir = o.out;
    if (o.given("dataset")) c.data.source = o.dataset;
    if (o.given("samples")) c.data.samples = o.samples;
    if (o.given("data-seed")) c.data.seed = o.data_seed;
    if (o.given("generator")) c.generator_path = o.generator;
    if (o.given("gen-epochs")) c.generator.max_epochs = o.gen_epochs;
    if (o.given("method")) c.method = parse_method(o.method);
    if (o.given("clients")) c.clients = o.clients;
    if (o.given("participants")) c.participants = o.participants;
    if (o.given("rounds")) c.rounds = o.rounds;
    if (o.given("alpha")) c.alpha = o.alpha;
    if (o.given("seeds")) c.seeds = o.seeds;
    if (o.given("ipc")) c.distill.ipc = o.ipc;
    if (o.given("layer")) c.distill.layer = o.layer;
    if (o.given("local-epochs")) c.distill.local_epochs = o.local_epochs;
    if (o.given("student-steps")) c.distill.student_steps = o.student_steps;
    if (o.given("distill-iters")) c.distill.distill_iters = o.distill_iters;
    if (o.given("global-epochs")) c.global_epochs = o.global_epochs;
    if (o.given("threads")) c.threads = o.threads;
    if (o.given("workers")) c.workers = o.workers;
    if (o.given("timing")) c.timing = o.timing;
    if (o.given("accumulate")) c.accumulate = o.accumulate;
    for (const auto& a : o.axes) apply_axis(c.sweep, a);
    if (o.given("family")) c.theory.family = theory::parse_toy_family(o.family);
    if (o.given("beta-d")) c.theory.beta_d = o.beta_d;
    if (o.given("beta-star")) c.theory.beta_star = o.beta_star;
    if (o.given("steps")) c.theory.steps = o.steps;
    if (o.given("burn-in")) c.theory.burn_in = o.burn_in;
    if (o.given("eps")) c.theory.eps = o.eps;
    if (o.given("dump-chains")) c.theory.dump_chains = o.dump_chains;
    return c;
}

} // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Federated learning simulator with server-side generative dataset distillation", "feddgm"};
    app.require_subcommand(1, 1);
    Overrides o;
    auto* partition = app.add_subcommand("partition", "Dirichlet-partition the federated pool and write shard files");
    auto* pretrain = app.add_subcommand("pretrain-gen", "Pretrain the generator on the public proxy split");
    auto* run = app.add_subcommand("run", "Run one method for every seed and write metrics.csv");
    auto* sweep = app.add_subcommand("sweep", "Run the cartesian product of sweep axes and write sweep.csv");
    auto* theory_cmd = app.add_subcommand("theory", "Alternating Gibbs sampling on linear-regression toys");
    auto* dump = app.add_subcommand("dump-synth", "Run and dump every client's synthetic set");
    for (auto* sub : {partition, pretrain, run, sweep, theory_cmd, dump}) add_common(sub, o);
    sweep->add_option("--axis", o.axes, "name=v1,v2,... (method, alpha, ipc, layer, local_epochs, surrogate_depth)");
    add_theory(theory_cmd, o);
    std::vector<std::string> csvs;
    std::string summary_out;
    auto* summarize_cmd = app.add_subcommand("summarize", "Mean and std of final global accuracy per cell");
    summarize_cmd->add_option("csv", csvs, "metrics or sweep CSV files")->required();
    summarize_cmd->add_option("--out", summary_out, "also write the summary CSV here");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 1;
    }

    Context ctx{out, err, {}};
    try {
        if (summarize_cmd->parsed()) {
            std::vector<fs::path> paths(csvs.begin(), csvs.end());
            const auto rows = summarize(paths);
            write_summary_csv(out, rows);
            if (!summary_out.empty()) {
                std::ostringstream s;
                write_summary_csv(s, rows);
                write_text(summary_out, s.str());
            }
            return 0;
        }
        auto cfg = build_config(o);
        if (partition->parsed()) return cmd_partition(ctx, cfg);
        if (pretrain->parsed()) return cmd_pretrain(ctx, cfg);
        if (run->parsed()) return cmd_run(ctx, cfg, false);
        if (dump->parsed()) return cmd_run(ctx, cfg, true);
        if (sweep->parsed()) return cmd_sweep(ctx, cfg);
        if (theory_cmd->parsed()) return cmd_theory(ctx, cfg);
        return 1;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace feddgm
