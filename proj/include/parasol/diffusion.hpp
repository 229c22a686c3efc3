#pragma once

// Forward noising process, the token-conditioned denoiser and its training loop.
//
// The denoiser predicts the noise in a latent z_t given the step t and two
// condition tokens: a style token (projected style embedding, or a learned null
// token) and a content token (content embedding, or a learned null token).
// Both tokens are read by a cross-attention layer in every residual block.

#include "parasol/diffnet.hpp"
#include "parasol/embed.hpp"
#include "parasol/mine.hpp"

#include <chrono>
#include <fstream>
#include <optional>

namespace parasol::diffusion {

using diffnet::ParamStore;
using diffnet::Tape;
using diffnet::Var;

struct Schedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] for t = 1..T
    std::vector<double> alpha_bar;  // alpha_bar[t-1]
    std::vector<double> sigma;      // posterior std, sigma[0] = 0

    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
    double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t - 1)); }
    void check_step(int t) const {
        if (t < 1 || t > T) throw InvalidArgument("step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
};

inline Schedule make_schedule(int T = 50, double beta_1 = 1e-3, double beta_T = 0.2) {
    if (T < 2) throw InvalidArgument("make_schedule: T must be >= 2");
    if (!(beta_1 > 0.0) || !(beta_T < 1.0) || !(beta_1 < beta_T))
        throw InvalidArgument("make_schedule: need 0 < beta_1 < beta_T < 1");
    Schedule s;
    s.T = T;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b = beta_1 + (beta_T - beta_1) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        const double prev = prod;
        prod *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha_bar.push_back(prod);
        s.sigma.push_back(t == 1 ? 0.0 : std::sqrt(b * (1.0 - prev) / (1.0 - prod)));
    }
    return s;
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, applied to rows.
inline Matrix q_sample(const Schedule& s, const Matrix& z0, int t, const Matrix& eps) {
    s.check_step(t);
    if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw InvalidArgument("q_sample: shape mismatch");
    const double ab = s.alpha_bar_at(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

struct ModelConfig {
    int latent_dim = 13;
    int hidden = 128;
    int time_features = 16;
    int time_hidden = 32;
    int token_dim = corpus::kContentDim;
    int style_dim = corpus::kStyleDim;
    int projector_hidden = 32;
    int key_dim = 32;
    int value_dim = 32;
    int blocks = 2;
    bool use_projector = true;  // false: style embedding is zero-padded into the token space

    io::json to_json() const {
        return {{"latent_dim", latent_dim},       {"hidden", hidden},         {"time_features", time_features},
                {"time_hidden", time_hidden},     {"token_dim", token_dim},   {"style_dim", style_dim},
                {"projector_hidden", projector_hidden}, {"key_dim", key_dim}, {"value_dim", value_dim},
                {"blocks", blocks},               {"use_projector", use_projector}};
    }
    static ModelConfig from_json(const io::json& j) {
        ModelConfig c;
        c.latent_dim = j.at("latent_dim").get<int>();
        c.hidden = j.at("hidden").get<int>();
        c.time_features = j.at("time_features").get<int>();
        c.time_hidden = j.at("time_hidden").get<int>();
        c.token_dim = j.at("token_dim").get<int>();
        c.style_dim = j.at("style_dim").get<int>();
        c.projector_hidden = j.at("projector_hidden").get<int>();
        c.key_dim = j.at("key_dim").get<int>();
        c.value_dim = j.at("value_dim").get<int>();
        c.blocks = j.at("blocks").get<int>();
        c.use_projector = j.at("use_projector").get<bool>();
        return c;
    }
};

/// Weights ~ N(0, 1/fan_in), biases zero, layernorm gains one; the four token
/// vectors (modality embeddings and null tokens) ~ N(0, 1).
inline ParamStore init_denoiser(const ModelConfig& c, std::uint64_t seed) {
    ParamStore p;
    Rng rng(derive_seed(seed, 0x1417));
    diffnet::create_affine(p, "time.fc", c.time_features, c.time_hidden, rng);
    diffnet::create_affine(p, "in.fc", c.latent_dim + c.time_hidden, c.hidden, rng);
    for (int b = 0; b < c.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b);
        diffnet::create_affine(p, pre + ".fc", c.hidden, c.hidden, rng);
        p.create(pre + ".ln.g", 1, c.hidden, diffnet::Init::ones, rng);
        p.create(pre + ".ln.b", 1, c.hidden, diffnet::Init::zeros, rng);
        diffnet::create_cross_attention(p, pre + ".attn", {c.hidden, c.token_dim, c.key_dim, c.value_dim}, rng);
    }
    diffnet::create_affine(p, "out.fc", c.hidden, c.latent_dim, rng);
    if (c.use_projector) {
        diffnet::create_affine(p, "proj.fc1", c.style_dim, c.projector_hidden, rng);
        diffnet::create_affine(p, "proj.fc2", c.projector_hidden, c.token_dim, rng);
    }
    for (const char* name : {"tok.e_style", "tok.e_content", "tok.null_style", "tok.null_content"})
        p.create(name, 1, c.token_dim, diffnet::Init::unit_normal, rng);
    return p;
}

/// Per-row conditions. A keep flag of 0 substitutes the learned null token.
struct Conditions {
    Matrix style;         // n x style_dim (raw style embeddings)
    Matrix style_keep;    // n x 1 in {0, 1}
    Matrix content;       // n x token_dim
    Matrix content_keep;  // n x 1

    Eigen::Index rows() const { return style.rows(); }

    static Conditions make(const std::optional<Matrix>& style, const std::optional<Matrix>& content, Eigen::Index n,
                           const ModelConfig& c) {
        Conditions out;
        out.style = style ? *style : Matrix::Zero(n, c.style_dim);
        out.content = content ? *content : Matrix::Zero(n, c.token_dim);
        out.style_keep = Matrix::Constant(n, 1, style ? 1.0 : 0.0);
        out.content_keep = Matrix::Constant(n, 1, content ? 1.0 : 0.0);
        if (out.style.rows() != n || out.content.rows() != n) throw InvalidArgument("conditions: row count mismatch");
        if (out.style.cols() != c.style_dim) throw InvalidArgument("conditions: style embedding dimension mismatch");
        if (out.content.cols() != c.token_dim) throw InvalidArgument("conditions: content embedding dimension mismatch");
        return out;
    }

    /// Stacks several condition sets row-wise.
    static Conditions stack(const std::vector<const Conditions*>& parts) {
        Eigen::Index n = 0;
        for (const auto* p : parts) n += p->rows();
        Conditions out;
        out.style.resize(n, parts.front()->style.cols());
        out.content.resize(n, parts.front()->content.cols());
        out.style_keep.resize(n, 1);
        out.content_keep.resize(n, 1);
        Eigen::Index off = 0;
        for (const auto* p : parts) {
            out.style.middleRows(off, p->rows()) = p->style;
            out.content.middleRows(off, p->rows()) = p->content;
            out.style_keep.middleRows(off, p->rows()) = p->style_keep;
            out.content_keep.middleRows(off, p->rows()) = p->content_keep;
            off += p->rows();
        }
        return out;
    }
};

/// The style projector M, R^style_dim -> R^token_dim.
inline Var project_style(Tape& t, const ParamStore& p, const ModelConfig& c, Var style) {
    if (!c.use_projector) {
        Matrix pad = Matrix::Zero(c.token_dim, c.style_dim);
        for (int i = 0; i < std::min(c.token_dim, c.style_dim); ++i) pad(i, i) = 1.0;
        return diffnet::affine(t.constant(pad), t.constant(Matrix::Zero(1, c.token_dim)), style);
    }
    const Var h = diffnet::silu(diffnet::affine_layer(t, p, "proj.fc1", style));
    return diffnet::affine_layer(t, p, "proj.fc2", h);
}

inline Var condition_token(Tape& t, const ParamStore& p, Var value, const Matrix& keep, const std::string& null_name,
                           const std::string& modality_name) {
    const Eigen::Index n = keep.rows();
    const Var keep_v = t.constant(keep);
    const Var drop_v = t.constant(Matrix::Ones(n, 1) - keep);
    const Var chosen = diffnet::add(diffnet::mul_col(keep_v, value),
                                    diffnet::mul_col(drop_v, diffnet::broadcast_rows(t.param(p, null_name), n)));
    return diffnet::add_row(chosen, t.param(p, modality_name));
}

inline Var denoiser_forward(Tape& t, const ParamStore& p, const ModelConfig& c, Var z_t, std::span<const int> steps,
                            const Conditions& cond) {
    const Eigen::Index n = z_t.rows();
    if (z_t.cols() != c.latent_dim) throw InvalidArgument("denoiser: latent dimension mismatch");
    if (static_cast<Eigen::Index>(steps.size()) != n || cond.rows() != n)
        throw InvalidArgument("denoiser: batch size mismatch");
    const Var temb = t.constant(diffnet::time_embed_rows(steps, c.time_features));
    const Var th = diffnet::silu(diffnet::affine_layer(t, p, "time.fc", temb));
    Var h = diffnet::affine_layer(t, p, "in.fc", diffnet::concat_cols({z_t, th}));

    const Var style_tok = condition_token(t, p, project_style(t, p, c, t.constant(cond.style)), cond.style_keep,
                                          "tok.null_style", "tok.e_style");
    const Var content_tok =
        condition_token(t, p, t.constant(cond.content), cond.content_keep, "tok.null_content", "tok.e_content");
    const std::vector<Var> tokens{style_tok, content_tok};

    for (int b = 0; b < c.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b);
        const Var u = diffnet::silu(diffnet::affine_layer(t, p, pre + ".fc", h));
        h = diffnet::add(h, diffnet::layernorm(u, t.param(p, pre + ".ln.g"), t.param(p, pre + ".ln.b")));
        h = diffnet::cross_attention(t, p, pre + ".attn", h, tokens);
    }
    return diffnet::affine_layer(t, p, "out.fc", h);
}

/// Inference convenience: predicted noise for rows of z_t.
inline Matrix predict_eps(const ParamStore& p, const ModelConfig& c, const Matrix& z_t, std::span<const int> steps,
                          const Conditions& cond) {
    Tape t;
    return denoiser_forward(t, p, c, t.constant(z_t), steps, cond).value();
}

// --- training ---------------------------------------------------------------

struct TrainConfig {
    double omega_s = 0.1;
    double omega_y = 0.1;
    double drop_p = 0.1;
    bool joint_dropout = false;  // drop both conditions together instead of independently
    int batch = 32;
    long steps = 20000;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    long log_every = 10;

    io::json to_json() const {
        return {{"omega_s", omega_s}, {"omega_y", omega_y}, {"drop_p", drop_p}, {"joint_dropout", joint_dropout},
                {"batch", batch},     {"steps", steps},     {"lr", lr},         {"seed", seed},
                {"log_every", log_every}};
    }
    static TrainConfig from_json(const io::json& j) {
        TrainConfig c;
        c.omega_s = j.at("omega_s").get<double>();
        c.omega_y = j.at("omega_y").get<double>();
        c.drop_p = j.at("drop_p").get<double>();
        c.joint_dropout = j.at("joint_dropout").get<bool>();
        c.batch = j.at("batch").get<int>();
        c.steps = j.at("steps").get<long>();
        c.lr = j.at("lr").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.log_every = j.at("log_every").get<long>();
        return c;
    }
    void validate() const {
        if (drop_p < 0 || drop_p > 1) throw InvalidArgument("train: drop_p must lie in [0, 1]");
        if (omega_s < 0 || omega_y < 0) throw InvalidArgument("train: loss weights must be non-negative");
        if (batch < 1 || steps < 0 || !(lr > 0)) throw InvalidArgument("train: invalid batch/steps/lr");
    }
};

struct LossBreakdown {
    double l_dm = 0.0;
    double l_s = 0.0;
    double l_y = 0.0;
    double total = 0.0;
};

/// Per-triplet tensors precomputed from the frozen encoders.
struct TrainingData {
    Matrix z0;         // latent of x
    Matrix style;      // a_s = A(s)
    Matrix content;    // c_y = C(y)
    Matrix style_head; // A o D restricted to latents: (style_dim x d)
    Matrix style_bias; // 1 x style_dim
    Matrix content_head;
    Matrix content_bias;

    Eigen::Index size() const { return z0.rows(); }
};

inline TrainingData make_training_data(const corpus::CorpusBundle& corpus, const embed::EncoderBundle& enc,
                                       const std::vector<mine::Triplet>& triplets) {
    if (triplets.empty()) throw InvalidArgument("train: no triplets");
    TrainingData d;
    std::vector<mine::ItemId> xs, ys, ss;
    for (const auto& tr : triplets) {
        for (auto id : {tr.x_id, tr.y_id, tr.s_id})
            if (id >= corpus.size()) throw ArtifactError("triplet references an item outside the corpus");
        xs.push_back(tr.x_id);
        ys.push_back(tr.y_id);
        ss.push_back(tr.s_id);
    }
    d.z0 = enc.autoencoder.encode(mine::gather_rows(corpus.items, xs));
    d.style = enc.encoders.style.apply(mine::gather_rows(corpus.items, ss));
    d.content = enc.encoders.content.apply(mine::gather_rows(corpus.items, ys));
    // x_hat = D(z) = z B^T + mu, so A(x_hat) = z (W B)^T + (W mu^T + b)
    const auto& ae = enc.autoencoder;
    d.style_head = parasol::matmul(enc.encoders.style.weight, ae.basis);
    d.style_bias = matmul_nt(ae.mean, enc.encoders.style.weight) + enc.encoders.style.bias;
    d.content_head = parasol::matmul(enc.encoders.content.weight, ae.basis);
    d.content_bias = matmul_nt(ae.mean, enc.encoders.content.weight) + enc.encoders.content.bias;
    return d;
}

/// Everything random about one optimisation step; a pure function of (seed, step).
struct StepDraw {
    std::vector<Eigen::Index> rows;
    std::vector<int> steps;
    Matrix eps;
    Matrix style_keep;
    Matrix content_keep;
};

inline StepDraw draw_step(const TrainConfig& cfg, const Schedule& s, Eigen::Index data_size, int latent_dim, long step) {
    Rng rng(derive_seed(cfg.seed, 0x57E9, static_cast<std::uint64_t>(step)));
    StepDraw d;
    std::uniform_int_distribution<Eigen::Index> pick(0, data_size - 1);
    std::uniform_int_distribution<int> pick_t(1, s.T);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto n = static_cast<Eigen::Index>(cfg.batch);
    d.style_keep.resize(n, 1);
    d.content_keep.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        d.rows.push_back(pick(rng));
        d.steps.push_back(pick_t(rng));
        const double a = u01(rng);
        const double b = u01(rng);
        const bool drop_style = a < cfg.drop_p;
        const bool drop_content = cfg.joint_dropout ? drop_style : b < cfg.drop_p;
        d.style_keep(i, 0) = drop_style ? 0.0 : 1.0;
        d.content_keep(i, 0) = drop_content ? 0.0 : 1.0;
    }
    d.eps = standard_normal(rng, n, latent_dim);
    return d;
}

/// Masked mean square over the rows whose keep flag is set; zero when none is.
inline Var masked_mean_square(Tape& t, Var diff, const Matrix& keep) {
    const double kept = keep.sum();
    if (kept == 0.0) return t.constant(Matrix::Zero(1, 1));
    return diffnet::scale(diffnet::sum_square(diffnet::mul_col(t.constant(keep), diff)),
                          1.0 / (kept * static_cast<double>(diff.cols())));
}

struct StepResult {
    LossBreakdown loss;
    diffnet::Gradients grads;
};

/// Builds the full objective for one drawn batch and differentiates it.
inline StepResult training_objective(const ParamStore& p, const ModelConfig& c, const Schedule& s,
                                     const TrainingData& data, const TrainConfig& cfg, const StepDraw& draw) {
    const auto n = static_cast<Eigen::Index>(draw.rows.size());
    Matrix z_t(n, c.latent_dim), inv_sqrt_ab(n, 1), noise_ratio(n, 1);
    Conditions cond;
    cond.style.resize(n, c.style_dim);
    cond.content.resize(n, c.token_dim);
    cond.style_keep = draw.style_keep;
    cond.content_keep = draw.content_keep;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto r = draw.rows[static_cast<std::size_t>(i)];
        const int step = draw.steps[static_cast<std::size_t>(i)];
        const double ab = s.alpha_bar_at(step);
        z_t.row(i) = std::sqrt(ab) * data.z0.row(r) + std::sqrt(1.0 - ab) * draw.eps.row(i);
        inv_sqrt_ab(i, 0) = 1.0 / std::sqrt(ab);
        noise_ratio(i, 0) = std::sqrt(1.0 - ab) / std::sqrt(ab);
        cond.style.row(i) = data.style.row(r);
        cond.content.row(i) = data.content.row(r);
    }

    Tape t;
    const Var eps_hat = denoiser_forward(t, p, c, t.constant(z_t), draw.steps, cond);
    const Var l_dm = diffnet::mse(eps_hat, t.constant(draw.eps));
    // one-step estimate z0_hat = (z_t - sqrt(1 - abar) eps_hat) / sqrt(abar)
    const Var z0_hat = diffnet::sub(t.constant(Matrix(z_t.array().colwise() * inv_sqrt_ab.col(0).array())),
                                    diffnet::mul_col(t.constant(noise_ratio), eps_hat));
    const Var style_hat = diffnet::affine(t.constant(data.style_head), t.constant(data.style_bias), z0_hat);
    const Var content_hat = diffnet::affine(t.constant(data.content_head), t.constant(data.content_bias), z0_hat);
    const Var l_s = masked_mean_square(t, diffnet::sub(style_hat, t.constant(cond.style)), cond.style_keep);
    const Var l_y = masked_mean_square(t, diffnet::sub(content_hat, t.constant(cond.content)), cond.content_keep);
    const Var total = diffnet::add(diffnet::add(l_dm, diffnet::scale(l_s, cfg.omega_s)), diffnet::scale(l_y, cfg.omega_y));

    StepResult out;
    out.loss = {l_dm.value()(0, 0), l_s.value()(0, 0), l_y.value()(0, 0), total.value()(0, 0)};
    if (!std::isfinite(out.loss.total))
        throw NumericalError("training loss is not finite (l_dm=" + std::to_string(out.loss.l_dm) +
                             ", l_s=" + std::to_string(out.loss.l_s) + ", l_y=" + std::to_string(out.loss.l_y) + ")");
    out.grads = t.backward(total, p);
    return out;
}

/// One optimisation step at the store's current step counter.
inline LossBreakdown training_step(ParamStore& p, const ModelConfig& c, const Schedule& s, const TrainingData& data,
                                   const TrainConfig& cfg) {
    const StepDraw draw = draw_step(cfg, s, data.size(), c.latent_dim, p.step());
    StepResult r = training_objective(p, c, s, data, cfg, draw);
    diffnet::adam_step(p, r.grads, {cfg.lr});
    return r.loss;
}

/// Central-difference check of the full training objective on the batch drawn at
/// the store's current step.
inline diffnet::FdReport check_gradients(ParamStore& p, const ModelConfig& c, const Schedule& s, const TrainingData& data,
                                         const TrainConfig& cfg, const diffnet::FdOptions& opt = {}) {
    const StepDraw draw = draw_step(cfg, s, data.size(), c.latent_dim, p.step());
    const StepResult r = training_objective(p, c, s, data, cfg, draw);
    auto loss = [&](const ParamStore& q) { return training_objective(q, c, s, data, cfg, draw).loss.total; };
    return diffnet::fd_check(loss, p, r.grads, opt);
}

struct TrainLogRow {
    long step = 0;
    LossBreakdown loss;
};

/// Trains from the store's current step up to cfg.steps. Resuming from a saved
/// store reproduces an uninterrupted run exactly.
inline std::vector<TrainLogRow> train(ParamStore& p, const ModelConfig& c, const Schedule& s, const TrainingData& data,
                                      const TrainConfig& cfg, std::ostream* progress = nullptr) {
    cfg.validate();
    std::vector<TrainLogRow> log;
    while (p.step() < cfg.steps) {
        const long step = p.step();
        const LossBreakdown loss = training_step(p, c, s, data, cfg);
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) log.push_back({step + 1, loss});
        if (progress && (step + 1) % 1000 == 0)
            *progress << "step " << step + 1 << " total " << loss.total << " (dm " << loss.l_dm << ", s " << loss.l_s
                      << ", y " << loss.l_y << ")\n";
    }
    return log;
}

inline void write_train_log(const std::vector<TrainLogRow>& log, const io::fs::path& path, bool append = false) {
    if (path.has_parent_path()) io::fs::create_directories(path.parent_path());
    const bool header = !append || !io::fs::exists(path);
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out.precision(17);
    if (header) out << "step,l_dm,l_s,l_y,total\n";
    for (const auto& r : log)
        out << r.step << ',' << r.loss.l_dm << ',' << r.loss.l_s << ',' << r.loss.l_y << ',' << r.loss.total << '\n';
}

}  // namespace parasol::diffusion
