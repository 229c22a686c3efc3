#pragma once

// Inference: dual classifier-free guidance, ancestral sampling, noise-recording
// inversion with a style switch after lambda steps, spherical interpolation of
// embeddings, and two-stage content diversification.
//
// Every routine works on row batches. Rows never interact and each row draws
// noise from its own seed, so a batch gives the same result as running its rows
// one at a time.

#include "parasol/diffusion.hpp"

namespace parasol::sampler {

using diffusion::Conditions;
using diffusion::ModelConfig;
using diffusion::Schedule;
using diffnet::ParamStore;

struct GuidanceConfig {
    double g_s = 5.0;
    double g_y = 5.0;
};

/// A trained denoiser plus the frozen pieces it was trained against.
struct Pipeline {
    ParamStore params;
    ModelConfig model;
    Schedule schedule;
    embed::EncoderBundle encoders;
    std::optional<std::pair<Vector, Vector>> latent_box;  // per-dimension clamp for the predicted z0

    int latent_dim() const { return model.latent_dim; }
    Matrix content_of(const Matrix& items) const { return encoders.encoders.content.apply(items); }
    Matrix style_of(const Matrix& items) const { return encoders.encoders.style.apply(items); }
    Matrix encode(const Matrix& items) const { return encoders.autoencoder.encode(items); }
    Matrix decode(const Matrix& z) const { return encoders.autoencoder.decode(z); }
};

/// eps = e(0,0) + g_s [e(s,0) - e(0,0)] + g_y [e(0,c) - e(0,0)], evaluated as
/// (1 - g_s - g_y) e(0,0) + g_s e(s,0) + g_y e(0,c) so that unit/zero scales
/// reproduce a single branch bit for bit. Three branches, one stacked forward pass.
/// A row whose style (content) keep flag is 0 has that branch equal to e(0,0).
inline Matrix guided_eps(const ParamStore& p, const ModelConfig& c, const Matrix& z_t, std::span<const int> steps,
                         const Conditions& cond, const GuidanceConfig& g) {
    const auto n = z_t.rows();
    Conditions uncond = cond;
    uncond.style_keep.setZero();
    uncond.content_keep.setZero();
    Conditions style_only = cond;
    style_only.content_keep.setZero();
    Conditions content_only = cond;
    content_only.style_keep.setZero();
    const Conditions stacked = Conditions::stack({&uncond, &style_only, &content_only});
    Matrix z3(3 * n, z_t.cols());
    z3 << z_t, z_t, z_t;
    std::vector<int> steps3;
    for (int r = 0; r < 3; ++r) steps3.insert(steps3.end(), steps.begin(), steps.end());
    const Matrix e = diffusion::predict_eps(p, c, z3, steps3, stacked);
    const double w0 = 1.0 - g.g_s - g.g_y;
    return w0 * e.topRows(n) + g.g_s * e.middleRows(n, n) + g.g_y * e.bottomRows(n);
}

/// mu_t = (z_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(1 - beta_t)
inline Matrix posterior_mean(const Schedule& s, const Matrix& z_t, int t, const Matrix& eps) {
    s.check_step(t);
    const double b = s.beta_at(t);
    return (z_t - (b / std::sqrt(1.0 - s.alpha_bar_at(t))) * eps) / std::sqrt(1.0 - b);
}

/// Posterior mean through a clamped one-step estimate of z0 when the pipeline
/// carries a latent box; the plain formula otherwise.
inline Matrix posterior_mean(const Pipeline& pl, const Matrix& z_t, int t, const Matrix& eps) {
    if (!pl.latent_box) return posterior_mean(pl.schedule, z_t, t, eps);
    const Schedule& s = pl.schedule;
    const double ab = s.alpha_bar_at(t), b = s.beta_at(t);
    const double ab_prev = t > 1 ? s.alpha_bar_at(t - 1) : 1.0;
    Matrix z0 = (z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    for (Eigen::Index j = 0; j < z0.cols(); ++j)
        z0.col(j) = z0.col(j).cwiseMax(pl.latent_box->first(j)).cwiseMin(pl.latent_box->second(j));
    return (std::sqrt(ab_prev) * b / (1.0 - ab)) * z0 + (std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)) * z_t;
}

/// z_{t-1} = mu_t + sigma_t w
inline Matrix reverse_step(const Pipeline& pl, const Matrix& z_t, int t, const Conditions& cond,
                           const GuidanceConfig& g, const Matrix& noise) {
    pl.schedule.check_step(t);
    const std::vector<int> steps(static_cast<std::size_t>(z_t.rows()), t);
    const Matrix mu = posterior_mean(pl, z_t, t, guided_eps(pl.params, pl.model, z_t, steps, cond, g));
    const double sigma = pl.schedule.sigma_at(t);
    if (sigma == 0.0) return mu;
    return mu + sigma * noise;
}

namespace detail {

inline Matrix row_noise(std::span<const std::uint64_t> seeds, std::uint64_t stream, std::uint64_t index, int dim) {
    Matrix m(static_cast<Eigen::Index>(seeds.size()), dim);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        Rng rng(derive_seed(seeds[i], stream, index));
        m.row(static_cast<Eigen::Index>(i)) = standard_normal(rng, 1, dim);
    }
    return m;
}

inline constexpr std::uint64_t kSampleStream = 0x5A3;
inline constexpr std::uint64_t kInvertStream = 0x1A7;

}  // namespace detail

/// Latents of conditional samples; one seed per row. Missing conditions are null.
inline Matrix sample_latents(const Pipeline& pl, const std::optional<Matrix>& style, const std::optional<Matrix>& content,
                             const GuidanceConfig& g, std::span<const std::uint64_t> seeds) {
    const auto n = static_cast<Eigen::Index>(seeds.size());
    const Conditions cond = Conditions::make(style, content, n, pl.model);
    const int d = pl.latent_dim();
    Matrix z = detail::row_noise(seeds, detail::kSampleStream, 0, d);
    for (int t = pl.schedule.T; t >= 1; --t) {
        const Matrix w = t > 1 ? detail::row_noise(seeds, detail::kSampleStream, static_cast<std::uint64_t>(t), d)
                               : Matrix::Zero(n, d);
        z = reverse_step(pl, z, t, cond, g, w);
    }
    return z;
}

inline Matrix sample(const Pipeline& pl, const std::optional<Matrix>& style, const std::optional<Matrix>& content,
                     const GuidanceConfig& g, std::span<const std::uint64_t> seeds) {
    return pl.decode(sample_latents(pl, style, content, g, seeds));
}

/// Recorded noises that make the conditional reverse chain land exactly on E(y).
struct NoiseTrack {
    Matrix z_terminal;           // z_T
    std::vector<Matrix> w;       // w[t-1] for t = 1..T; w[0] is zero
    Matrix final_residual;       // z_0 - mu_1(z_1); sigma_1 = 0 so it cannot live in w[0]
    Matrix style;                // conditions used while recording
    Matrix content;
    GuidanceConfig guidance;

    Eigen::Index rows() const { return z_terminal.rows(); }
};

/// Forward-noises z0 with independent per-step draws, then walks the reverse chain
/// under the given conditions, solving each step for the noise that lands on the
/// forward sample. The walk performs the same operations as replay() at lambda = T,
/// so rounding does not accumulate across steps.
inline NoiseTrack invert_record(const Pipeline& pl, const Matrix& z0, const Matrix& style, const Matrix& content,
                                const GuidanceConfig& g, std::span<const std::uint64_t> seeds) {
    const Schedule& s = pl.schedule;
    const auto n = z0.rows();
    if (static_cast<Eigen::Index>(seeds.size()) != n) throw InvalidArgument("invert_record: one seed per row");
    for (int t = 2; t <= s.T; ++t)
        if (!(s.sigma_at(t) > 0.0)) throw NumericalError("invert_record: degenerate sigma at step " + std::to_string(t));
    std::vector<Matrix> forward(static_cast<std::size_t>(s.T + 1));
    forward[0] = z0;
    for (int t = 1; t <= s.T; ++t)
        forward[static_cast<std::size_t>(t)] = diffusion::q_sample(
            s, z0, t, detail::row_noise(seeds, detail::kInvertStream, static_cast<std::uint64_t>(t), pl.latent_dim()));
    const Conditions cond = Conditions::make(style, content, n, pl.model);
    NoiseTrack track;
    track.z_terminal = forward[static_cast<std::size_t>(s.T)];
    track.w.assign(static_cast<std::size_t>(s.T), Matrix::Zero(n, pl.latent_dim()));
    track.style = style;
    track.content = content;
    track.guidance = g;
    Matrix z = track.z_terminal;
    for (int t = s.T; t >= 1; --t) {
        const std::vector<int> steps(static_cast<std::size_t>(n), t);
        const Matrix mu = posterior_mean(pl, z, t, guided_eps(pl.params, pl.model, z, steps, cond, g));
        const Matrix& target = forward[static_cast<std::size_t>(t - 1)];
        if (t >= 2) {
            Matrix& w = track.w[static_cast<std::size_t>(t - 1)];
            w = (target - mu) / s.sigma_at(t);
            z = mu + s.sigma_at(t) * w;
        } else {
            track.final_residual = target - mu;
        }
    }
    return track;
}

/// Replays a track. The first `lambda` reverse steps (t = T down to T - lambda + 1)
/// use the recorded style; the remaining steps use `target_style`.
inline Matrix replay(const Pipeline& pl, const NoiseTrack& track, const Matrix& target_style, int lambda) {
    const Schedule& s = pl.schedule;
    if (lambda < 0 || lambda > s.T) throw InvalidArgument("lambda must lie in [0, T]");
    const auto n = track.rows();
    const Conditions recorded = Conditions::make(track.style, track.content, n, pl.model);
    const Conditions switched = Conditions::make(target_style, track.content, n, pl.model);
    Matrix z = track.z_terminal;
    for (int t = s.T; t >= 1; --t) {
        const bool before_switch = (s.T - t) < lambda;
        const std::vector<int> steps(static_cast<std::size_t>(n), t);
        const Matrix mu =
            posterior_mean(pl, z, t, guided_eps(pl.params, pl.model, z, steps, before_switch ? recorded : switched, track.guidance));
        z = t >= 2 ? Matrix(mu + s.sigma_at(t) * track.w[static_cast<std::size_t>(t - 1)]) : Matrix(mu + track.final_residual);
    }
    return z;
}

struct StylizeBatch {
    Matrix latents;  // n x d
    Matrix items;    // decoded, n x D
};

/// Content items y (rows) take on the target styles (rows of raw style embeddings).
inline StylizeBatch stylize(const Pipeline& pl, const Matrix& y_items, const Matrix& target_style, int lambda,
                            const GuidanceConfig& g, std::span<const std::uint64_t> seeds) {
    if (lambda < 0 || lambda > pl.schedule.T) throw InvalidArgument("lambda must lie in [0, T]");
    if (target_style.rows() != y_items.rows()) throw InvalidArgument("stylize: one target style per content item");
    const NoiseTrack track = invert_record(pl, pl.encode(y_items), pl.style_of(y_items), pl.content_of(y_items), g, seeds);
    StylizeBatch out;
    out.latents = replay(pl, track, target_style, lambda);
    out.items = pl.decode(out.latents);
    return out;
}

/// Great-circle interpolation of directions with linear interpolation of norms.
/// Falls back to linear interpolation below an angle of 1e-6.
inline std::vector<double> slerp(std::span<const double> u, std::span<const double> v, double alpha) {
    if (u.size() != v.size()) throw InvalidArgument("slerp: length mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("slerp: alpha must lie in [0, 1]");
    const auto nu = embed::normalized(u);
    const auto nv = embed::normalized(v);
    if (alpha == 0.0) return {u.begin(), u.end()};
    if (alpha == 1.0) return {v.begin(), v.end()};
    const double cos_omega = std::clamp(embed::dot(nu, nv), -1.0, 1.0);
    const double omega = std::acos(cos_omega);
    std::vector<double> out(u.size());
    if (omega < 1e-6) {
        for (std::size_t i = 0; i < u.size(); ++i) out[i] = (1.0 - alpha) * u[i] + alpha * v[i];
        return out;
    }
    if (std::numbers::pi - omega < 1e-6) throw InvalidArgument("slerp: antipodal vectors have no unique great circle");
    const double norm_u = std::sqrt(embed::dot(u, u)), norm_v = std::sqrt(embed::dot(v, v));
    const double mag = (1.0 - alpha) * norm_u + alpha * norm_v;
    const double a = std::sin((1.0 - alpha) * omega) / std::sin(omega);
    const double b = std::sin(alpha * omega) / std::sin(omega);
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = mag * (a * nu[i] + b * nv[i]);
    return out;
}

struct WeightedRef {
    std::uint64_t id = 0;
    std::vector<double> embedding;
    double weight = 1.0;
};

/// Folds references in ascending id order: acc <- slerp(acc, e_i, w_i / (w_1 + ... + w_i)).
/// Returns nullopt for an empty list.
inline std::optional<std::vector<double>> blend(std::vector<WeightedRef> refs) {
    if (refs.empty()) return std::nullopt;
    double total_weight = 0.0;
    for (const auto& r : refs) {
        if (!(r.weight >= 0.0)) throw InvalidArgument("reference weights must be non-negative");
        total_weight += r.weight;
    }
    if (!(total_weight > 0.0)) throw InvalidArgument("reference weights must have a positive sum");
    std::stable_sort(refs.begin(), refs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::optional<std::vector<double>> acc;
    double cumulative = 0.0;
    for (const auto& r : refs) {
        if (!acc) {
            if (r.weight == 0.0) continue;
            acc = r.embedding;
            cumulative = r.weight;
            continue;
        }
        cumulative += r.weight;
        acc = slerp(*acc, r.embedding, r.weight / cumulative);
    }
    return acc;
}

/// Inversion anchor for interpolated generation: the item whose structure is kept
/// and the switch step.
struct Anchor {
    std::vector<double> item;
    int lambda = 20;
};

struct InterpolateRequest {
    std::vector<WeightedRef> content_refs;
    std::vector<WeightedRef> style_refs;
    GuidanceConfig guidance;
    std::optional<Anchor> anchor;
    std::uint64_t seed = 0;
};

/// Generates from blended embeddings. Without an anchor this is plain conditional
/// sampling; with one, the anchor is inverted under (A(anchor), blended content)
/// and the style switches to the blended style (or stays, if none) after lambda steps.
inline std::vector<double> interpolate_generate(const Pipeline& pl, const InterpolateRequest& req) {
    const auto content = blend(req.content_refs);
    const auto style = blend(req.style_refs);
    if (!content && !style) throw InvalidArgument("interpolate_generate: no references given");
    auto as_row = [](const std::vector<double>& v) { return row_of(v); };
    const std::uint64_t seeds[1] = {req.seed};
    Matrix out;
    if (!req.anchor) {
        out = sample(pl, style ? std::optional<Matrix>(as_row(*style)) : std::nullopt,
                     content ? std::optional<Matrix>(as_row(*content)) : std::nullopt, req.guidance, seeds);
    } else {
        const Matrix y = row_of(req.anchor->item);
        const Matrix content_row = content ? as_row(*content) : pl.content_of(y);
        const Matrix own_style = pl.style_of(y);
        const NoiseTrack track = invert_record(pl, pl.encode(y), own_style, content_row, req.guidance, seeds);
        out = pl.decode(replay(pl, track, style ? as_row(*style) : own_style, req.anchor->lambda));
    }
    return to_std(out);
}

enum class Modality { content, style };

inline constexpr std::array<double, 5> kAlphaGrid{0.0, 0.25, 0.5, 0.75, 1.0};

/// One generation per alpha, blending `from` and `to` with weights (1 - alpha, alpha)
/// in the chosen modality. The other modality keeps the references in `base`.
/// The endpoints equal generating from `from` or `to` alone.
inline std::vector<std::vector<double>> interpolation_grid(const Pipeline& pl, const InterpolateRequest& base,
                                                           Modality modality, const std::vector<double>& from,
                                                           const std::vector<double>& to,
                                                           std::span<const double> alphas = kAlphaGrid) {
    std::vector<std::vector<double>> out;
    for (double alpha : alphas) {
        InterpolateRequest req = base;
        auto& refs = modality == Modality::content ? req.content_refs : req.style_refs;
        refs = {{0, from, 1.0 - alpha}, {1, to, alpha}};
        out.push_back(interpolate_generate(pl, req));
    }
    return out;
}

/// Stage 1 samples a fresh item from the content embedding (style null); stage 2
/// uses it as the content item of a stylization towards the style embedding.
/// Output i depends only on seeds[i].
inline Matrix diversify(const Pipeline& pl, std::span<const double> content, std::span<const double> style, int lambda,
                        const GuidanceConfig& g, std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw InvalidArgument("diversify: n must be >= 1");
    const auto n = static_cast<Eigen::Index>(seeds.size());
    const Matrix c = row_of({content.begin(), content.end()}).replicate(n, 1);
    const Matrix s = row_of({style.begin(), style.end()}).replicate(n, 1);
    const Matrix stage1 = sample(pl, std::nullopt, c, g, seeds);
    std::vector<std::uint64_t> stage2_seeds;
    for (auto seed : seeds) stage2_seeds.push_back(derive_seed(seed, 0xD1E));
    return stylize(pl, stage1, s, lambda, g, stage2_seeds).items;
}

}  // namespace parasol::sampler
