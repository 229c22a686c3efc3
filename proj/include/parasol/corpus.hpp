#pragma once

// Synthetic item corpus: items are generated from explicit content factors and
// style factors, in one of two modes.
//
//   linear  64-dim items, data = Wc * gamma + Ws * sigma with fixed orthonormal,
//           mutually orthogonal Wc (64x8) and Ws (64x6)
//   render  12x12 RGB images of a soft shape with a tinted stripe texture
//
// Every corpus is split into three pools: targets, a style database and a
// semantics database whose items all carry the neutral style.

#include "parasol/common.hpp"
#include "parasol/io.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <span>

namespace parasol::corpus {

enum class Mode { linear, render };
enum class Role { target, style_db, semantics_db };

inline constexpr int kShapeClasses = 5;
inline constexpr int kContentDim = 8;
inline constexpr int kStyleDim = 6;

inline std::string to_string(Mode m) { return m == Mode::linear ? "linear" : "render"; }
inline std::string to_string(Role r) {
    switch (r) {
        case Role::target: return "target";
        case Role::style_db: return "style_db";
        case Role::semantics_db: return "semantics_db";
    }
    return "?";
}
inline Mode mode_from_string(std::string_view s) {
    if (s == "linear") return Mode::linear;
    if (s == "render") return Mode::render;
    throw InvalidArgument("unknown corpus mode: " + std::string(s));
}
inline Role role_from_string(std::string_view s) {
    if (s == "target") return Role::target;
    if (s == "style_db") return Role::style_db;
    if (s == "semantics_db") return Role::semantics_db;
    throw InvalidArgument("unknown role: " + std::string(s));
}

struct Grid {
    int height = 0;
    int width = 0;
    int channels = 0;
    int size() const { return height * width * channels; }
    bool operator==(const Grid&) const = default;
};

inline Grid grid_for(Mode m) { return m == Mode::linear ? Grid{8, 8, 1} : Grid{12, 12, 3}; }

/// Shapes: disk, square, triangle, cross, ring.
struct ContentFactors {
    int shape_class = 0;
    double center_x = 0.5;
    double center_y = 0.5;
    double size = 0.25;

    std::array<double, kContentDim> encode() const {
        std::array<double, kContentDim> g{};
        g[static_cast<std::size_t>(shape_class)] = 1.0;
        g[5] = center_x;
        g[6] = center_y;
        g[7] = size;
        return g;
    }
    bool in_range() const {
        return shape_class >= 0 && shape_class < kShapeClasses && center_x >= 0.2 && center_x <= 0.8 &&
               center_y >= 0.2 && center_y <= 0.8 && size >= 0.15 && size <= 0.35;
    }
    bool operator==(const ContentFactors&) const = default;
};

struct StyleFactors {
    double brightness = 0.5;
    double contrast = 1.0;
    double tint_r = 1.0;
    double tint_g = 1.0;
    double tint_b = 1.0;
    double texture_freq = 0.0;

    std::array<double, kStyleDim> encode() const {
        return {brightness, contrast, tint_r, tint_g, tint_b, texture_freq};
    }
    bool in_range() const {
        auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
        return in(brightness, 0, 1) && in(contrast, 0.5, 2) && in(tint_r, 0.25, 1) && in(tint_g, 0.25, 1) &&
               in(tint_b, 0.25, 1) && in(texture_freq, 0, 4);
    }
    bool operator==(const StyleFactors&) const = default;
};

/// The "photographic" style shared by every semantics-database item.
inline constexpr StyleFactors kNeutralStyle{0.5, 1.0, 1.0, 1.0, 1.0, 0.0};

struct Factors {
    ContentFactors content;
    StyleFactors style;
};

struct Item {
    std::vector<double> data;
    Mode mode = Mode::linear;
    Grid grid;
};

inline std::vector<Factors> sample_factors(std::uint64_t seed, std::size_t n, Role role) {
    require(n >= 1, "sample_factors: n must be >= 1");
    Rng rng(derive_seed(seed, 0xC0A1, static_cast<std::uint64_t>(role)));
    std::uniform_int_distribution<int> shape(0, kShapeClasses - 1);
    auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    std::vector<Factors> out(n);
    for (auto& f : out) {
        f.content.shape_class = shape(rng);
        f.content.center_x = uniform(0.2, 0.8);
        f.content.center_y = uniform(0.2, 0.8);
        f.content.size = uniform(0.15, 0.35);
        // draws are consumed for every role so pools with equal seeds stay aligned in content
        StyleFactors s;
        s.brightness = uniform(0.0, 1.0);
        s.contrast = uniform(0.5, 2.0);
        s.tint_r = uniform(0.25, 1.0);
        s.tint_g = uniform(0.25, 1.0);
        s.tint_b = uniform(0.25, 1.0);
        s.texture_freq = uniform(0.0, 4.0);
        f.style = role == Role::semantics_db ? kNeutralStyle : s;
    }
    return out;
}

struct LinearBasis {
    Matrix content;  // 64 x 8
    Matrix style;    // 64 x 6
};

/// Fixed generator matrices for linear mode, drawn once from seed 0.
inline const LinearBasis& linear_basis() {
    static const LinearBasis basis = [] {
        Rng rng(derive_seed(0, 0xBA515));
        const Matrix g = standard_normal(rng, 64, kContentDim + kStyleDim);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(g)};
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(64, kContentDim + kStyleDim);
        LinearBasis b;
        b.content = q.leftCols(kContentDim);
        b.style = q.rightCols(kStyleDim);
        return b;
    }();
    return basis;
}

/// Signed distance to the shape boundary, positive inside.
inline double shape_signed_distance(const ContentFactors& c, double u, double v) {
    const double dx = u - c.center_x, dy = v - c.center_y;
    const double r = c.size;
    switch (c.shape_class) {
        case 0: return r - std::hypot(dx, dy);
        case 1: return r - std::max(std::abs(dx), std::abs(dy));
        case 2: {
            // equilateral triangle with circumradius r, apex up (v grows downward)
            double best = std::numeric_limits<double>::infinity();
            for (double deg : {90.0, 210.0, 330.0}) {
                const double a = deg * std::numbers::pi / 180.0;
                const double nx = std::cos(a), ny = std::sin(a);
                best = std::min(best, 0.5 * r - (nx * dx + ny * dy));
            }
            return best;
        }
        case 3: {
            const double bar = r / 3.0;
            const double horizontal = std::min(r - std::abs(dx), bar - std::abs(dy));
            const double vertical = std::min(bar - std::abs(dx), r - std::abs(dy));
            return std::max(horizontal, vertical);
        }
        case 4: return r / 3.0 - std::abs(std::hypot(dx, dy) - 0.7 * r);
        default: throw InvalidArgument("shape_class out of range");
    }
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Item render(const ContentFactors& content, const StyleFactors& style, Mode mode) {
    Item item;
    item.mode = mode;
    item.grid = grid_for(mode);
    if (mode == Mode::linear) {
        const auto& basis = linear_basis();
        const auto g = content.encode();
        const auto s = style.encode();
        item.data.assign(64, 0.0);
        for (int i = 0; i < 64; ++i) {
            double acc = 0.0;
            for (int j = 0; j < kContentDim; ++j) acc += basis.content(i, j) * g[static_cast<std::size_t>(j)];
            double acc_s = 0.0;
            for (int j = 0; j < kStyleDim; ++j) acc_s += basis.style(i, j) * s[static_cast<std::size_t>(j)];
            item.data[static_cast<std::size_t>(i)] = acc + acc_s;
        }
        return item;
    }
    const Grid grid = item.grid;
    item.data.resize(static_cast<std::size_t>(grid.size()));
    const std::array<double, 3> tint{style.tint_r, style.tint_g, style.tint_b};
    for (int row = 0; row < grid.height; ++row) {
        for (int col = 0; col < grid.width; ++col) {
            const double u = (col + 0.5) / grid.width;
            const double v = (row + 0.5) / grid.height;
            const double mask = logistic(20.0 * shape_signed_distance(content, u, v));
            const double texture = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * style.texture_freq * (u + v));
            const double base = style.brightness + style.contrast * (mask * texture - 0.5) + 0.5;
            for (int ch = 0; ch < 3; ++ch)
                item.data[static_cast<std::size_t>((row * grid.width + col) * 3 + ch)] =
                    std::clamp(tint[static_cast<std::size_t>(ch)] * base, 0.0, 1.0);
        }
    }
    return item;
}

struct CorpusConfig {
    long targets = 2000;
    long style_db = 2000;
    long semantics_db = 2000;
    Mode mode = Mode::linear;
};

/// Items are stored row-wise: targets first, then the style database, then the
/// semantics database. Item ids are row indices.
struct CorpusBundle {
    Mode mode = Mode::linear;
    Grid grid;
    std::uint64_t seed = 0;
    Matrix items;
    std::vector<Factors> factors;
    std::vector<Role> roles;

    std::size_t size() const { return roles.size(); }
    int dim() const { return static_cast<int>(items.cols()); }

    Item item(std::size_t id) const {
        if (id >= size()) throw InvalidArgument("item id out of range: " + std::to_string(id));
        Item it;
        it.mode = mode;
        it.grid = grid;
        const auto row = items.row(static_cast<Eigen::Index>(id));
        it.data.assign(row.data(), row.data() + row.size());
        return it;
    }

    std::vector<std::size_t> ids_with_role(Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < roles.size(); ++i)
            if (roles[i] == r) out.push_back(i);
        return out;
    }
};

inline CorpusBundle build_corpus(const CorpusConfig& config, std::uint64_t seed) {
    if (config.targets <= 0 || config.style_db <= 0 || config.semantics_db <= 0)
        throw InvalidArgument("build_corpus: every pool count must be positive");
    CorpusBundle b;
    b.mode = config.mode;
    b.grid = grid_for(config.mode);
    b.seed = seed;
    const std::array<std::pair<Role, long>, 3> pools{
        {{Role::target, config.targets}, {Role::style_db, config.style_db}, {Role::semantics_db, config.semantics_db}}};
    for (const auto& [role, count] : pools) {
        auto f = sample_factors(seed, static_cast<std::size_t>(count), role);
        b.factors.insert(b.factors.end(), f.begin(), f.end());
        b.roles.insert(b.roles.end(), static_cast<std::size_t>(count), role);
    }
    b.items.resize(static_cast<Eigen::Index>(b.size()), b.grid.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
        const Item it = render(b.factors[i].content, b.factors[i].style, b.mode);
        for (int j = 0; j < b.grid.size(); ++j)
            b.items(static_cast<Eigen::Index>(i), j) = it.data[static_cast<std::size_t>(j)];
    }
    return b;
}

// ---------------------------------------------------------------------------
// Container: <dir>/manifest.json + <dir>/items.f32 (little-endian, item-major)

inline io::json manifest_of(const CorpusBundle& b) {
    io::json m;
    m["format"] = "parasol-corpus";
    m["version"] = 1;
    m["mode"] = to_string(b.mode);
    m["grid"] = {b.grid.height, b.grid.width, b.grid.channels};
    m["seed"] = b.seed;
    io::json counts = {{"target", 0}, {"style_db", 0}, {"semantics_db", 0}};
    io::json roles = io::json::array();
    io::json content = io::json::array();
    io::json style = io::json::array();
    for (std::size_t i = 0; i < b.size(); ++i) {
        counts[to_string(b.roles[i])] = counts[to_string(b.roles[i])].get<long>() + 1;
        roles.push_back(to_string(b.roles[i]));
        const auto& c = b.factors[i].content;
        content.push_back({c.shape_class, c.center_x, c.center_y, c.size});
        const auto s = b.factors[i].style.encode();
        style.push_back(s);
    }
    m["counts"] = counts;
    m["roles"] = roles;
    m["content_factors"] = content;
    m["style_factors"] = style;
    return m;
}

inline std::string items_bytes(const CorpusBundle& b) { return io::pack<float>(to_std(b.items)); }

/// Hash of the serialized container; identical for a bundle and its reloaded copy.
inline std::string corpus_hash(const CorpusBundle& b) {
    Fnv1a h;
    h.update(manifest_of(b).dump());
    h.update(items_bytes(b));
    return h.hex();
}

/// `extra` keys are added to the manifest (for example the producing run's config hash).
inline void save_corpus(const CorpusBundle& b, const io::fs::path& dir, const io::json& extra = io::json::object()) {
    io::json m = manifest_of(b);
    m.update(extra);
    io::write_json(dir / "manifest.json", m);
    io::write_bytes(dir / "items.f32", items_bytes(b));
}

inline CorpusBundle load_corpus(const io::fs::path& dir) {
    const auto m = io::read_json(dir / "manifest.json");
    if (m.value("format", "") != "parasol-corpus") throw ArtifactError("not a corpus manifest: " + dir.string());
    CorpusBundle b;
    b.mode = mode_from_string(m.at("mode").get<std::string>());
    const auto g = m.at("grid");
    b.grid = Grid{g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
    b.seed = m.at("seed").get<std::uint64_t>();
    const auto& roles = m.at("roles");
    const auto& content = m.at("content_factors");
    const auto& style = m.at("style_factors");
    if (content.size() != roles.size() || style.size() != roles.size())
        throw ArtifactError("corpus manifest arrays have different lengths");
    for (std::size_t i = 0; i < roles.size(); ++i) {
        b.roles.push_back(role_from_string(roles[i].get<std::string>()));
        Factors f;
        f.content = ContentFactors{content[i][0].get<int>(), content[i][1].get<double>(), content[i][2].get<double>(),
                                   content[i][3].get<double>()};
        const auto& s = style[i];
        f.style = StyleFactors{s[0].get<double>(), s[1].get<double>(), s[2].get<double>(),
                               s[3].get<double>(), s[4].get<double>(), s[5].get<double>()};
        b.factors.push_back(f);
    }
    const auto values = io::unpack<float>(io::read_bytes(dir / "items.f32"));
    if (values.size() != b.size() * static_cast<std::size_t>(b.grid.size()))
        throw ArtifactError("items.f32 size does not match the manifest");
    io::ArrayCursor cursor(values);
    b.items = cursor.take(static_cast<Eigen::Index>(b.size()), b.grid.size());
    return b;
}

}  // namespace parasol::corpus
