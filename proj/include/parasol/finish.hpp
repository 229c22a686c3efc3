#pragma once

// Colour-distribution post-processing and the evaluation harness.

#include "parasol/sampler.hpp"

#include <iomanip>
#include <limits>

namespace parasol::finish {

/// Pixels of an item as rows of a (pixels x channels) matrix.
inline Matrix pixels_of(std::span<const double> data, const corpus::Grid& grid) {
    if (static_cast<int>(data.size()) != grid.size()) throw InvalidArgument("item length does not match its grid");
    const int c = grid.channels;
    Matrix px(grid.height * grid.width, c);
    std::copy(data.begin(), data.end(), px.data());
    return px;
}

struct ColorStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline ColorStats color_stats(const Matrix& pixels) {
    if (pixels.rows() == 0) throw InvalidArgument("color_stats: empty pixel set");
    ColorStats s;
    s.mean = pixels.colwise().mean().transpose();
    const Eigen::MatrixXd centred = pixels.rowwise() - s.mean.transpose();
    s.cov = (centred.transpose() * centred) / static_cast<double>(pixels.rows());
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
}

inline constexpr double kColorRegularization = 1e-8;
inline constexpr double kSingularEigenvalue = 1e-10;

namespace detail {
inline Eigen::MatrixXd sym_power(const Eigen::MatrixXd& m, double power) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    const Eigen::VectorXd vals = es.eigenvalues().array().max(0.0).pow(power);
    return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

struct ColorMatchResult {
    std::vector<double> item;       // clamped to [0, 1] when matched
    std::vector<double> unclamped;  // affine map output before clamping
    bool matched = false;
    std::string message;
};

/// p -> S^{1/2} X^{-1/2} (p - mu_x) + mu_s, with S and X the style and input
/// colour covariances. S is regularized with +1e-8 I; X is inverted exactly, since
/// any shift there biases the output covariance. A singular input covariance (for
/// instance a constant-colour item) is reported and the input is returned unchanged.
inline ColorMatchResult color_match(std::span<const double> x, std::span<const double> s, const corpus::Grid& grid) {
    const Matrix px = pixels_of(x, grid), ps = pixels_of(s, grid);
    const ColorStats sx = color_stats(px), ss = color_stats(ps);
    ColorMatchResult r;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sx.cov);
    if (es.eigenvalues().minCoeff() <= kSingularEigenvalue) {
        r.item.assign(x.begin(), x.end());
        r.unclamped = r.item;
        r.message = "input colour covariance is singular; item left unchanged";
        return r;
    }
    const auto c = grid.channels;
    const Eigen::MatrixXd reg = kColorRegularization * Eigen::MatrixXd::Identity(c, c);
    const Eigen::MatrixXd map = detail::sym_power(ss.cov + reg, 0.5) * detail::sym_power(sx.cov, -0.5);
    Matrix out = (px.rowwise() - sx.mean.transpose()) * map.transpose();
    out.rowwise() += ss.mean.transpose();
    r.unclamped.assign(out.data(), out.data() + out.size());
    r.item = r.unclamped;
    for (double& v : r.item) v = std::clamp(v, 0.0, 1.0);
    r.matched = true;
    return r;
}

/// Pixels as points in colour space: mean nearest squared distance from each
/// set to the other, summed over both directions.
inline double chamfer(std::span<const double> x, std::span<const double> s, int channels) {
    if (channels < 1 || x.size() % static_cast<std::size_t>(channels) != 0 ||
        s.size() % static_cast<std::size_t>(channels) != 0)
        throw InvalidArgument("chamfer: lengths are not multiples of the channel count");
    const std::size_t nx = x.size() / static_cast<std::size_t>(channels);
    const std::size_t ns = s.size() / static_cast<std::size_t>(channels);
    if (nx == 0 || ns == 0) throw InvalidArgument("chamfer: empty pixel set");
    const auto ch = static_cast<std::size_t>(channels);
    auto one_way = [ch](std::span<const double> a, std::size_t na, std::span<const double> b, std::size_t nb) {
        double total = 0.0;
        for (std::size_t i = 0; i < na; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < nb; ++j) {
                double d = 0.0;
                for (std::size_t k = 0; k < ch; ++k) {
                    const double diff = a[i * ch + k] - b[j * ch + k];
                    d += diff * diff;
                }
                best = std::min(best, d);
            }
            total += best;
        }
        return total / static_cast<double>(na);
    };
    return one_way(x, nx, s, ns) + one_way(s, ns, x, nx);
}

inline double mean_squared_difference(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidArgument("mse: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

inline double style_mse(const embed::StyleEncoder& a, std::span<const double> target, std::span<const double> item) {
    return mean_squared_difference(target, a.apply(item));
}

inline double content_mse(const embed::ContentEncoder& c, std::span<const double> target, std::span<const double> item) {
    return mean_squared_difference(target, c.apply(item));
}

// --- evaluation harness -----------------------------------------------------

/// Training-time ablations are read from the checkpoint; no_inversion is a
/// sampling-time switch (plain conditional sampling instead of inversion).
struct Ablation {
    bool no_projector = false;
    bool no_modality_losses = false;
    bool no_inversion = false;
    bool joint_dropout = false;

    io::json to_json() const {
        return {{"no_projector", no_projector},
                {"no_modality_losses", no_modality_losses},
                {"no_inversion", no_inversion},
                {"joint_dropout", joint_dropout}};
    }
};

/// Reads the training-time ablation flags back from a checkpoint config echo.
inline Ablation ablation_of_checkpoint(const io::json& echo) {
    Ablation a;
    a.no_projector = !echo.at("model").at("use_projector").get<bool>();
    a.no_modality_losses =
        echo.at("train").at("omega_s").get<double>() == 0.0 && echo.at("train").at("omega_y").get<double>() == 0.0;
    a.joint_dropout = echo.at("train").at("joint_dropout").get<bool>();
    return a;
}

struct EvalParams {
    std::size_t pair_count = 200;
    std::uint64_t seed = 0;
    int lambda = 20;
    sampler::GuidanceConfig guidance;
    bool postprocess = false;
    Ablation ablation;
};

struct ReportRow {
    std::size_t y_id = 0;
    std::size_t s_id = 0;
    int lambda = 0;
    double g_s = 0.0;
    double g_y = 0.0;
    double style_mse = 0.0;        // MSE(A(s), A(out))
    double content_mse = 0.0;      // MSE(C(y), C(out))
    double style_mse_ref = 0.0;    // MSE(A(s), A(y))
    double content_mse_ref = 0.0;  // MSE(C(y), C(s))
    double chamfer_pre = 0.0;
    std::optional<double> chamfer_post;
    double latent_shift = 0.0;  // |E(out) - E(y)|
};

struct Report {
    std::vector<ReportRow> rows;
    io::json config;
    std::string corpus_hash;
    std::string checkpoint_hash;
    std::vector<Matrix> outputs;  // decoded items per row (not serialised)

    io::json aggregates() const {
        io::json a;
        auto mean_of = [this](auto field) {
            if (rows.empty()) return 0.0;
            double acc = 0.0;
            for (const auto& r : rows) acc += field(r);
            return acc / static_cast<double>(rows.size());
        };
        a["pairs"] = rows.size();
        a["style_mse"] = mean_of([](const ReportRow& r) { return r.style_mse; });
        a["content_mse"] = mean_of([](const ReportRow& r) { return r.content_mse; });
        a["style_mse_ref"] = mean_of([](const ReportRow& r) { return r.style_mse_ref; });
        a["content_mse_ref"] = mean_of([](const ReportRow& r) { return r.content_mse_ref; });
        a["chamfer_pre"] = mean_of([](const ReportRow& r) { return r.chamfer_pre; });
        a["latent_shift"] = mean_of([](const ReportRow& r) { return r.latent_shift; });
        const bool has_post = !rows.empty() && rows.front().chamfer_post.has_value();
        if (has_post)
            a["chamfer_post"] = mean_of([](const ReportRow& r) { return r.chamfer_post.value_or(0.0); });
        else
            a["chamfer_post"] = nullptr;
        return a;
    }
};

/// Deterministic (y, s) pairs: y from the semantics pool, s from the style pool.
inline std::vector<std::pair<std::size_t, std::size_t>> select_pairs(const corpus::CorpusBundle& corpus,
                                                                     std::size_t count, std::uint64_t seed) {
    auto ys = corpus.ids_with_role(corpus::Role::semantics_db);
    auto ss = corpus.ids_with_role(corpus::Role::style_db);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (count == 0) return pairs;
    if (ys.empty() || ss.empty()) throw InvalidArgument("evaluate: corpus needs semantics and style pools");
    Rng rng(derive_seed(seed, 0xE7A1));
    std::shuffle(ys.begin(), ys.end(), rng);
    std::shuffle(ss.begin(), ss.end(), rng);
    for (std::size_t i = 0; i < count; ++i) pairs.emplace_back(ys[i % ys.size()], ss[i % ss.size()]);
    return pairs;
}

inline Report evaluate(const sampler::Pipeline& pl, const io::json& checkpoint_echo, const corpus::CorpusBundle& corpus,
                       const EvalParams& params) {
    const Ablation trained = ablation_of_checkpoint(checkpoint_echo);
    if (trained.no_projector != params.ablation.no_projector ||
        trained.no_modality_losses != params.ablation.no_modality_losses ||
        trained.joint_dropout != params.ablation.joint_dropout)
        throw ArtifactError("evaluate: requested ablation toggles do not match the checkpoint");
    if (corpus.dim() != pl.encoders.autoencoder.data_dim())
        throw ArtifactError("evaluate: corpus item dimension does not match the encoders");
    if (params.postprocess && corpus.mode != corpus::Mode::render)
        throw InvalidArgument("evaluate: colour post-processing needs a render-mode corpus");

    Report rep;
    rep.corpus_hash = corpus::corpus_hash(corpus);
    rep.checkpoint_hash = pl.params.hash();
    rep.config = {{"pair_count", params.pair_count},
                  {"seed", params.seed},
                  {"lambda", params.lambda},
                  {"g_s", params.guidance.g_s},
                  {"g_y", params.guidance.g_y},
                  {"postprocess", params.postprocess},
                  {"ablation", params.ablation.to_json()},
                  {"checkpoint", checkpoint_echo},
                  {"metrics_not_computed", {"SIFID", "LPIPS"}}};
    const auto pairs = select_pairs(corpus, params.pair_count, params.seed);
    if (pairs.empty()) return rep;

    std::vector<std::size_t> y_ids, s_ids;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        y_ids.push_back(pairs[i].first);
        s_ids.push_back(pairs[i].second);
        seeds.push_back(derive_seed(params.seed, 0xE7A2, i));
    }
    const Matrix y = mine::gather_rows(corpus.items, y_ids);
    const Matrix s = mine::gather_rows(corpus.items, s_ids);
    const Matrix a_s = pl.style_of(s), c_y = pl.content_of(y), a_y = pl.style_of(y), c_s = pl.content_of(s);
    Matrix out;
    if (params.ablation.no_inversion)
        out = sampler::sample(pl, a_s, c_y, params.guidance, seeds);
    else
        out = sampler::stylize(pl, y, a_s, params.lambda, params.guidance, seeds).items;
    const Matrix a_out = pl.style_of(out), c_out = pl.content_of(out);
    const Matrix shift = pl.encode(out) - pl.encode(y);

    auto row_span = [](const Matrix& m, Eigen::Index i) {
        return std::span<const double>(m.row(i).data(), static_cast<std::size_t>(m.cols()));
    };
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        ReportRow row;
        row.y_id = y_ids[i];
        row.s_id = s_ids[i];
        row.lambda = params.lambda;
        row.g_s = params.guidance.g_s;
        row.g_y = params.guidance.g_y;
        row.style_mse = mean_squared_difference(row_span(a_s, r), row_span(a_out, r));
        row.content_mse = mean_squared_difference(row_span(c_y, r), row_span(c_out, r));
        row.style_mse_ref = mean_squared_difference(row_span(a_s, r), row_span(a_y, r));
        row.content_mse_ref = mean_squared_difference(row_span(c_y, r), row_span(c_s, r));
        row.latent_shift = shift.row(r).norm();
        row.chamfer_pre = chamfer(row_span(out, r), row_span(s, r), corpus.grid.channels);
        if (params.postprocess) {
            const auto matched = color_match(row_span(out, r), row_span(s, r), corpus.grid);
            row.chamfer_post = chamfer(matched.item, row_span(s, r), corpus.grid.channels);
        }
        rep.rows.push_back(row);
        rep.outputs.push_back(out.row(r));
    }
    return rep;
}

inline std::string report_csv(const Report& rep) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "pair,y_id,s_id,lambda,g_s,g_y,style_mse,content_mse,chamfer_pre,chamfer_post,style_mse_ref,content_mse_ref,"
           "latent_shift\n";
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        out << i << ',' << r.y_id << ',' << r.s_id << ',' << r.lambda << ',' << r.g_s << ',' << r.g_y << ','
            << r.style_mse << ',' << r.content_mse << ',' << r.chamfer_pre << ',';
        if (r.chamfer_post) out << *r.chamfer_post;
        out << ',' << r.style_mse_ref << ',' << r.content_mse_ref << ',' << r.latent_shift << '\n';
    }
    return out.str();
}

inline io::json report_json(const Report& rep) {
    io::json j;
    j["format"] = "parasol-report";
    j["config"] = rep.config;
    j["corpus_hash"] = rep.corpus_hash;
    j["checkpoint_hash"] = rep.checkpoint_hash;
    j["aggregates"] = rep.aggregates();
    io::json rows = io::json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"y_id", r.y_id},
                        {"s_id", r.s_id},
                        {"lambda", r.lambda},
                        {"g_s", r.g_s},
                        {"g_y", r.g_y},
                        {"style_mse", r.style_mse},
                        {"content_mse", r.content_mse},
                        {"chamfer_pre", r.chamfer_pre},
                        {"chamfer_post", r.chamfer_post ? io::json(*r.chamfer_post) : io::json(nullptr)},
                        {"style_mse_ref", r.style_mse_ref},
                        {"content_mse_ref", r.content_mse_ref},
                        {"latent_shift", r.latent_shift}});
    j["rows"] = rows;
    return j;
}

inline void save_report(const Report& rep, const io::fs::path& dir) {
    io::write_bytes(dir / "report.csv", report_csv(rep));
    io::write_json(dir / "report.json", report_json(rep));
}

}  // namespace parasol::finish
