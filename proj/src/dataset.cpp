#include "feddgm/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "feddgm/error.hpp"
#include "feddgm/random.hpp"

namespace feddgm {

std::string to_string(const ImageShape& s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

void LabeledDataset::validate() const {
    if (classes < 1) throw FormatError("dataset '" + name + "': class count must be positive");
    if (shape.numel() == 0) throw FormatError("dataset '" + name + "': empty image shape");
    if (images.size() != labels.size() * shape.numel())
        throw FormatError("dataset '" + name + "': " + std::to_string(images.size()) + " pixels for " +
                          std::to_string(labels.size()) + " labels of shape " + to_string(shape));
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= classes)
            throw FormatError("dataset '" + name + "': label " + std::to_string(l) + " out of range [0," +
                              std::to_string(classes) + ")");
    for (float v : images)
        if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("dataset '" + name + "': pixel outside [0,1]");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.name = name;
    out.classes = classes;
    out.shape = shape;
    out.labels.reserve(indices.size());
    out.images.reserve(indices.size() * shape.numel());
    for (auto i : indices) {
        if (i >= size()) throw std::out_of_range("subset index " + std::to_string(i));
        out.labels.push_back(labels[i]);
        auto img = image(i);
        out.images.insert(out.images.end(), img.begin(), img.end());
    }
    return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    return counts;
}

template <typename T>
Tensor<T> LabeledDataset::batch(std::span<const std::size_t> indices) const {
    const std::size_t d = shape.numel();
    Tensor<T> out({indices.size(), shape.height, shape.width, shape.channels});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        auto img = image(indices[r]);
        std::copy(img.begin(), img.end(), out.values.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return out;
}

template <typename T>
Tensor<T> LabeledDataset::onehot(std::span<const std::size_t> indices) const {
    Tensor<T> out({indices.size(), classes});
    for (std::size_t r = 0; r < indices.size(); ++r)
        out[r * classes + static_cast<std::size_t>(labels[indices[r]])] = T(1);
    return out;
}

template Tensor<float> LabeledDataset::batch(std::span<const std::size_t>) const;
template Tensor<double> LabeledDataset::batch(std::span<const std::size_t>) const;
template Tensor<float> LabeledDataset::onehot(std::span<const std::size_t>) const;
template Tensor<double> LabeledDataset::onehot(std::span<const std::size_t>) const;

std::vector<std::size_t> all_indices(const LabeledDataset& ds) {
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

namespace {

float quantize(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::round(v * 255.0) / 255.0);
}

// 5x7 glyphs, one string per row.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

} // namespace

LabeledDataset make_gauss_blobs(const BuiltinOptions& o) {
    LabeledDataset ds;
    ds.name = "gauss-blobs";
    ds.classes = o.classes ? o.classes : 2;
    const std::size_t n = o.samples ? o.samples : 200;
    const std::size_t dim = o.dim;
    if (dim == 0) throw ConfigError("gauss-blobs: dim must be positive");
    const double sigma = o.noise >= 0 ? o.noise : 0.08;
    ds.shape = {1, dim, 1};
    Rng rng(derive_seed({o.seed, 0xb10b5}));
    std::uniform_real_distribution<double> center_dist(0.2, 0.8);
    std::vector<double> centers(ds.classes * dim);
    for (auto& c : centers) c = center_dist(rng);
    std::normal_distribution<double> noise(0.0, sigma);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % ds.classes;
        ds.labels.push_back(static_cast<int>(c));
        for (std::size_t k = 0; k < dim; ++k) ds.images.push_back(quantize(centers[c * dim + k] + noise(rng)));
    }
    return ds;
}

LabeledDataset make_two_spirals(const BuiltinOptions& o) {
    LabeledDataset ds;
    ds.name = "two-spirals";
    ds.classes = o.classes ? o.classes : 2;
    const std::size_t n = o.samples ? o.samples : 400;
    const double sigma = o.noise >= 0 ? o.noise : 0.02;
    ds.shape = {1, 2, 1};
    Rng rng(derive_seed({o.seed, 0x5917a1}));
    std::uniform_real_distribution<double> t_dist(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, sigma);
    const double pi = std::acos(-1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % ds.classes;
        const double t = t_dist(rng);
        const double radius = 0.05 + 0.4 * t;
        const double angle = 3.0 * pi * t + 2.0 * pi * static_cast<double>(c) / static_cast<double>(ds.classes);
        ds.labels.push_back(static_cast<int>(c));
        ds.images.push_back(quantize(0.5 + radius * std::cos(angle) + noise(rng)));
        ds.images.push_back(quantize(0.5 + radius * std::sin(angle) + noise(rng)));
    }
    return ds;
}

LabeledDataset make_tiny_digits(const BuiltinOptions& o) {
    LabeledDataset ds;
    ds.name = "tiny-digits";
    ds.classes = 10;
    if (o.classes != 0 && o.classes != 10) throw ConfigError("tiny-digits always has 10 classes");
    const std::size_t n = o.samples ? o.samples : 2000;
    const double sigma = o.noise >= 0 ? o.noise : 0.2;
    ds.shape = {8, 8, 1};
    Rng rng(derive_seed({o.seed, 0xd1617}));
    std::uniform_int_distribution<int> dx(0, 3), dy(0, 1);
    std::uniform_real_distribution<double> ink(0.55, 1.0), paper(0.0, 0.15);
    std::bernoulli_distribution drop(0.12);
    std::normal_distribution<double> noise(0.0, sigma);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % 10;
        const int ox = dx(rng), oy = dy(rng);
        const double fg = ink(rng), bg = paper(rng);
        std::array<double, 64> px;
        px.fill(bg);
        for (int r = 0; r < 7; ++r)
            for (int q = 0; q < 5; ++q)
                if (kGlyphs[c][r][q] == '#' && !drop(rng)) px[(r + oy) * 8 + q + ox] = fg;
        ds.labels.push_back(static_cast<int>(c));
        for (double v : px) ds.images.push_back(quantize(v + noise(rng)));
    }
    return ds;
}

bool is_builtin_dataset(const std::string& source) {
    return source == "gauss-blobs" || source == "two-spirals" || source == "tiny-digits";
}

LabeledDataset load_dataset(const std::string& source, const BuiltinOptions& options) {
    LabeledDataset ds;
    if (source == "gauss-blobs")
        ds = make_gauss_blobs(options);
    else if (source == "two-spirals")
        ds = make_two_spirals(options);
    else if (source == "tiny-digits")
        ds = make_tiny_digits(options);
    else
        ds = read_idx_dir(source);
    ds.validate();
    return ds;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxImages3 = 0x00000803;
constexpr std::uint32_t kIdxImages4 = 0x00000804;

} // namespace

void write_idx_dir(const LabeledDataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "images.idx", std::ios::binary);
        const bool gray = ds.shape.channels == 1;
        put_u32(out, gray ? kIdxImages3 : kIdxImages4);
        put_u32(out, static_cast<std::uint32_t>(ds.size()));
        put_u32(out, static_cast<std::uint32_t>(ds.shape.height));
        put_u32(out, static_cast<std::uint32_t>(ds.shape.width));
        if (!gray) put_u32(out, static_cast<std::uint32_t>(ds.shape.channels));
        std::vector<char> bytes(ds.images.size());
        for (std::size_t i = 0; i < bytes.size(); ++i)
            bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(ds.images[i] * 255.0f)));
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("cannot write " + (dir / "images.idx").string());
    }
    {
        std::ofstream out(dir / "labels.idx", std::ios::binary);
        put_u32(out, kIdxLabels);
        put_u32(out, static_cast<std::uint32_t>(ds.size()));
        for (int l : ds.labels) out.put(static_cast<char>(l));
        if (!out) throw Error("cannot write " + (dir / "labels.idx").string());
    }
    std::ofstream(dir / "classes") << ds.classes << "\n";
}

LabeledDataset read_idx_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw FormatError("dataset source '" + dir.string() + "' is neither a builtin nor a directory");
    LabeledDataset ds;
    ds.name = dir.filename().string();
    if (ds.name.empty()) ds.name = dir.parent_path().filename().string();

    const auto img_path = dir / "images.idx";
    std::ifstream img(img_path, std::ios::binary);
    if (!img) throw FormatError("missing " + img_path.string());
    const auto magic = get_u32(img, img_path.string());
    if (magic != kIdxImages3 && magic != kIdxImages4)
        throw FormatError(img_path.string() + ": bad magic for images");
    const std::size_t n = get_u32(img, img_path.string());
    ds.shape.height = get_u32(img, img_path.string());
    ds.shape.width = get_u32(img, img_path.string());
    ds.shape.channels = magic == kIdxImages4 ? get_u32(img, img_path.string()) : 1;
    std::vector<unsigned char> bytes(n * ds.shape.numel());
    if (!img.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
        throw FormatError(img_path.string() + ": payload shorter than header extents");
    if (img.peek() != std::char_traits<char>::eof()) throw FormatError(img_path.string() + ": trailing bytes");
    ds.images.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) ds.images[i] = static_cast<float>(bytes[i] / 255.0);

    const auto lab_path = dir / "labels.idx";
    std::ifstream lab(lab_path, std::ios::binary);
    if (!lab) throw FormatError("missing " + lab_path.string());
    if (get_u32(lab, lab_path.string()) != kIdxLabels) throw FormatError(lab_path.string() + ": bad magic for labels");
    const std::size_t nl = get_u32(lab, lab_path.string());
    if (nl != n) throw FormatError("label count " + std::to_string(nl) + " != image count " + std::to_string(n));
    std::vector<unsigned char> lbytes(n);
    if (!lab.read(reinterpret_cast<char*>(lbytes.data()), static_cast<std::streamsize>(n)))
        throw FormatError(lab_path.string() + ": payload shorter than header");
    ds.labels.assign(lbytes.begin(), lbytes.end());

    if (std::ifstream cf(dir / "classes"); cf) {
        if (!(cf >> ds.classes)) throw FormatError((dir / "classes").string() + ": not an integer");
    } else {
        int mx = -1;
        for (int l : ds.labels) mx = std::max(mx, l);
        ds.classes = static_cast<std::size_t>(mx + 1);
    }
    ds.validate();
    return ds;
}

std::vector<double> sample_dirichlet(std::size_t k, double alpha, std::uint64_t seed) {
    Rng rng(seed);
    // log G with G ~ Gamma(alpha): G = G' * U^(1/alpha), G' ~ Gamma(alpha + 1).
    std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> logs(k);
    for (auto& l : logs) {
        double u = unif(rng);
        while (u <= 0.0) u = unif(rng);
        l = std::log(gamma(rng)) + std::log(u) / alpha;
    }
    const double mx = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    for (auto& l : logs) total += (l = std::exp(l - mx));
    for (auto& l : logs) l /= total;
    return logs;
}

namespace {

std::vector<std::size_t> largest_remainder(const std::vector<double>& p, std::size_t n) {
    std::vector<std::size_t> counts(p.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double exact = p[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rem.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++counts[rem[j % rem.size()].second];
    return counts;
}

std::vector<std::vector<std::size_t>> by_class(const LabeledDataset& ds) {
    std::vector<std::vector<std::size_t>> out(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) out[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    return out;
}

} // namespace

std::vector<ClientShard> dirichlet_partition(const LabeledDataset& ds, std::size_t clients, double alpha,
                                             std::uint64_t seed) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
    if (clients == 0) throw ConfigError("number of clients must be positive");
    if (ds.size() < clients) throw ConfigError("fewer samples than clients");
    const auto classes = by_class(ds);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const std::uint64_t s = seed + static_cast<std::uint64_t>(attempt);
        std::vector<ClientShard> shards(clients);
        for (std::size_t m = 0; m < clients; ++m) {
            shards[m].client_id = m;
            shards[m].histogram.assign(ds.classes, 0);
        }
        for (std::size_t c = 0; c < ds.classes; ++c) {
            auto idx = classes[c];
            Rng rng(derive_seed({s, c, 0x5f1}));
            std::shuffle(idx.begin(), idx.end(), rng);
            const auto p = sample_dirichlet(clients, alpha, derive_seed({s, c, 0xd1c}));
            const auto counts = largest_remainder(p, idx.size());
            std::size_t pos = 0;
            for (std::size_t m = 0; m < clients; ++m) {
                for (std::size_t j = 0; j < counts[m]; ++j) shards[m].indices.push_back(idx[pos++]);
                shards[m].histogram[c] += counts[m];
            }
        }
        if (std::any_of(shards.begin(), shards.end(), [](const ClientShard& sh) { return sh.indices.empty(); }))
            continue;
        for (auto& sh : shards) std::sort(sh.indices.begin(), sh.indices.end());
        return shards;
    }
    throw Error("dirichlet_partition: every one of 100 draws left a client empty (alpha=" + std::to_string(alpha) +
                ", clients=" + std::to_string(clients) + ")");
}

StratifiedSplit stratified_split(const LabeledDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0,1)");
    StratifiedSplit out;
    const auto classes = by_class(ds);
    for (std::size_t c = 0; c < classes.size(); ++c) {
        auto idx = classes[c];
        Rng rng(derive_seed({seed, c, 0x5b11}));
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
        out.first_indices.insert(out.first_indices.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
        out.second_indices.insert(out.second_indices.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
    }
    if (out.first_indices.empty() || out.second_indices.empty())
        throw ConfigError("split fraction " + std::to_string(fraction) + " leaves one side empty");
    std::sort(out.first_indices.begin(), out.first_indices.end());
    std::sort(out.second_indices.begin(), out.second_indices.end());
    out.first = ds.subset(out.first_indices);
    out.second = ds.subset(out.second_indices);
    return out;
}

void write_partition_manifest(const std::vector<ClientShard>& shards, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& sh : shards)
        for (auto i : sh.indices) out << sh.client_id << ',' << i << '\n';
}

std::vector<ClientShard> read_partition_manifest(const std::filesystem::path& path, const LabeledDataset& ds) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read " + path.string());
    std::vector<ClientShard> shards;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::size_t client = 0, index = 0;
        char comma = 0;
        if (!(ss >> client >> comma >> index) || comma != ',')
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected client_id,index");
        if (index >= ds.size()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": index out of range");
        if (client >= shards.size()) shards.resize(client + 1);
        shards[client].indices.push_back(index);
    }
    std::vector<char> seen(ds.size(), 0);
    for (std::size_t m = 0; m < shards.size(); ++m) {
        auto& sh = shards[m];
        for (auto i : sh.indices) {
            if (seen[i]) throw FormatError(path.string() + ": index " + std::to_string(i) + " assigned twice");
            seen[i] = 1;
        }
        sh.client_id = m;
        sh.histogram.assign(ds.classes, 0);
        std::sort(sh.indices.begin(), sh.indices.end());
        for (auto i : sh.indices) ++sh.histogram[static_cast<std::size_t>(ds.labels[i])];
    }
    return shards;
}

} // namespace feddgm
