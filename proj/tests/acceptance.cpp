// Acceptance checks: one PASS/FAIL line per criterion.
//
//   parasol_acceptance --prepare --runs DIR    train the desk runs
//   parasol_acceptance --runs DIR [--expect-fail NAME]...
//
// Exits 0 when every failing criterion was listed with --expect-fail.

#include "oracles.hpp"
#include "parasol/ctl/run.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>

using namespace parasol;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

// --- random-init fixture ---------------------------------------------------

struct Bench {
    corpus::CorpusBundle corpus;
    sampler::Pipeline pl;
};

const Bench& bench() {
    static const Bench b = [] {
        Bench b;
        b.corpus = corpus::build_corpus({200, 200, 200, corpus::Mode::linear}, 31);
        b.pl.params = diffusion::init_denoiser(b.pl.model, 41);
        b.pl.schedule = diffusion::make_schedule();
        b.pl.encoders = embed::fit_all(b.corpus, 13);
        return b;
    }();
    return b;
}

Matrix item_rows(const Matrix& items, const std::vector<std::size_t>& ids) { return mine::gather_rows(items, ids); }

Outcome guided_algebra() {
    const auto& b = bench();
    const auto t0 = Clock::now();
    Rng rng(7);
    std::uniform_int_distribution<std::size_t> pick(0, 599);
    std::uniform_int_distribution<int> step(1, 50);
    std::uniform_real_distribution<double> scale(-3.0, 8.0);
    double worst = 0.0;
    bool exact = true;
    const int cases = 100;
    for (int i = 0; i < cases; ++i) {
        auto model = b.pl.model;
        const auto params = diffusion::init_denoiser(model, 1000 + static_cast<std::uint64_t>(i));
        const Matrix z = standard_normal(rng, 1, 13);
        const std::vector<int> t{step(rng)};
        const Matrix items = item_rows(b.corpus.items, {pick(rng), pick(rng)});
        const Matrix a = b.pl.style_of(items.row(0)), c = b.pl.content_of(items.row(1));
        const sampler::GuidanceConfig g{scale(rng), scale(rng)};
        const auto cond = diffusion::Conditions::make(a, c, 1, model);
        const Matrix got = sampler::guided_eps(params, model, z, t, cond, g);
        const auto want = oracle::guided(params, model, to_std(z), t[0], to_std(a), to_std(c), g.g_s, g.g_y);
        for (int j = 0; j < 13; ++j) worst = std::max(worst, std::abs(got(0, j) - want[j]));

        auto only = [&](bool s, bool y) {
            auto k = cond;
            k.style_keep.setConstant(s ? 1.0 : 0.0);
            k.content_keep.setConstant(y ? 1.0 : 0.0);
            return diffusion::predict_eps(params, model, z, t, k);
        };
        exact = exact && sampler::guided_eps(params, model, z, t, cond, {0, 0}) == only(false, false) &&
                sampler::guided_eps(params, model, z, t, cond, {1, 0}) == only(true, false) &&
                sampler::guided_eps(params, model, z, t, cond, {0, 1}) == only(false, true);
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-12 && exact && secs < 1.0,
            fmt("%d cases, max |diff| %.3g (tol 1e-12), reductions %s, %.2f s (limit 1 s)", cases, worst,
                exact ? "bit-exact" : "NOT bit-exact", secs)};
}

Outcome inversion() {
    const auto& b = bench();
    const auto t0 = Clock::now();
    std::vector<std::size_t> ys, ss;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < 20; ++i) {
        ys.push_back(400 + 10 * i);
        ss.push_back(200 + 9 * i);
        seeds.push_back(100 + i);
    }
    const Matrix y = item_rows(b.corpus.items, ys), s = item_rows(b.corpus.items, ss);
    sampler::Pipeline boxed = b.pl;
    const Matrix z = b.pl.encode(b.corpus.items);
    boxed.latent_box = std::make_pair(Vector(z.colwise().minCoeff().transpose()), Vector(z.colwise().maxCoeff().transpose()));
    double worst = 0.0;
    for (const sampler::Pipeline* pl : {&b.pl, static_cast<const sampler::Pipeline*>(&boxed)}) {
        const auto out = sampler::stylize(*pl, y, pl->style_of(s), 50, {5, 5}, seeds);
        worst = std::max(worst, max_abs(out.latents - pl->encode(y)));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 10.0,
            fmt("20 items, plain and boxed posterior, max |z - E(y)| %.3g (tol 1e-9), %.2f s (limit 10 s)", worst, secs)};
}

Outcome gradients() {
    const auto t0 = Clock::now();
    const auto c = corpus::build_corpus({100, 100, 100, corpus::Mode::linear}, 17);
    const auto enc = embed::fit_all(c, 13);
    mine::MineParams mp;
    mp.k = 20;
    const auto set = mine::mine_dataset(c, enc.encoders, mp);
    const auto data = diffusion::make_training_data(c, enc, set.triplets);
    const diffusion::ModelConfig mc;
    auto p = diffusion::init_denoiser(mc, 3);
    const diffusion::TrainConfig tc;
    const auto rep = diffusion::check_gradients(p, mc, diffusion::make_schedule(), data, tc, {1e-5, 256, 1e-6, 9});
    const double secs = seconds_since(t0);
    return {rep.coordinates >= 200 && rep.max_relative_error < 1e-6 && secs < 30.0,
            fmt("%zu coordinates of %zu, h=1e-5, max relative error %.3g (tol 1e-6, worst %s), %.2f s (limit 30 s)",
                rep.coordinates, p.parameter_count(), rep.max_relative_error, rep.worst_parameter.c_str(), secs)};
}

corpus::CorpusBundle replant(corpus::CorpusBundle b, std::size_t id, const corpus::Factors& f) {
    b.factors[id] = f;
    const auto item = corpus::render(f.content, f.style, b.mode);
    std::copy(item.data.begin(), item.data.end(), b.items.row(static_cast<Eigen::Index>(id)).data());
    return b;
}

struct MineCheck {
    std::size_t targets = 0, mismatches = 0, threshold_violations = 0, triplets = 0;
};

void check_mining(const corpus::CorpusBundle& c, const mine::MineParams& p, MineCheck& acc) {
    const auto enc = embed::fit_encoders(c);
    const auto set = mine::mine_dataset(c, enc, p);
    const auto tables = oracle::mine_tables(c, enc, p.quantile);
    if (tables.tau_content != set.stats.thresholds.tau_content || tables.tau_style != set.stats.thresholds.tau_style)
        ++acc.mismatches;
    std::map<std::size_t, const mine::Triplet*> by_x;
    for (const auto& t : set.triplets) by_x[t.x_id] = &t;
    for (auto x : tables.targets) {
        ++acc.targets;
        const auto want = oracle::brute_mine(tables, x, p.k);
        const auto it = by_x.find(x);
        const bool got = it != by_x.end();
        if (got != (want.s_id && want.y_id) ||
            (got && (it->second->s_id != *want.s_id || it->second->y_id != *want.y_id)))
            ++acc.mismatches;
    }
    for (const auto& t : set.triplets) {
        ++acc.triplets;
        const double sc = oracle::cosine(oracle::row(tables.content, t.s_id), oracle::row(tables.content, t.x_id));
        const double ys = oracle::cosine(oracle::row(tables.style, t.y_id), oracle::row(tables.style, t.x_id));
        if (sc > tables.tau_content || ys > tables.tau_style) ++acc.threshold_violations;
    }
}

Outcome mining_oracle() {
    const auto t0 = Clock::now();
    MineCheck acc;
    const mine::MineParams defaults;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const long n = 150 + 50 * static_cast<long>(seed);
        const auto mode = seed % 2 ? corpus::Mode::render : corpus::Mode::linear;
        const auto c = corpus::build_corpus({n, n + 17, n - 9, mode}, 500 + seed);
        mine::MineParams p = defaults;
        p.k = 5 + 5 * (seed % 4);
        check_mining(c, p, acc);
    }
    // planted: s shares x's style with a far content, y shares x's content in the neutral style
    auto base = corpus::build_corpus({60, 60, 60, corpus::Mode::linear}, 21);
    const auto probe = oracle::mine_tables(base, embed::fit_encoders(base), defaults.quantile);
    std::size_t x = 0;
    while (oracle::cosine(oracle::row(probe.style, x), oracle::row(probe.style, 120)) > probe.tau_style) ++x;
    const auto fx = base.factors[x];
    const corpus::Factors planted_s{{(fx.content.shape_class + 2) % 5, 0.8 - (fx.content.center_x - 0.2), 0.5, 0.3},
                                    fx.style};
    const corpus::Factors planted_y{fx.content, corpus::kNeutralStyle};
    const auto planted = replant(replant(base, 77, planted_s), 150, planted_y);
    check_mining(planted, defaults, acc);
    const auto enc = embed::fit_encoders(planted);
    const auto ctx = mine::make_context(planted, enc, defaults);
    const auto t = mine::mine_triplet(x, ctx, defaults.k);
    const bool found = t.s_id == 77 && t.y_id == 150;
    const double secs = seconds_since(t0);
    return {acc.mismatches == 0 && acc.threshold_violations == 0 && found && secs < 30.0,
            fmt("11 corpora, %zu targets, %zu mismatches, %zu of %zu triplets violate thresholds, planted pair %s, "
                "%.2f s (limit 30 s)",
                acc.targets, acc.mismatches, acc.threshold_violations, acc.triplets, found ? "recovered" : "MISSED",
                secs)};
}

Outcome interpolation() {
    const auto& b = bench();
    const auto& pl = b.pl;
    const sampler::GuidanceConfig g{5, 5};
    std::size_t identical = 0, total = 0;
    bool grids_ok = true;
    for (std::size_t i = 0; i < 20; ++i) {
        const std::size_t y = 400 + 7 * i, s0 = 200 + 3 * i, s1 = 201 + 5 * i, c0 = 410 + 4 * i, c1 = 420 + 6 * i;
        const std::uint64_t seed = 900 + i;
        auto emb_s = [&](std::size_t id) { return to_std(pl.style_of(b.corpus.items.row(static_cast<Eigen::Index>(id)))); };
        auto emb_c = [&](std::size_t id) { return to_std(pl.content_of(b.corpus.items.row(static_cast<Eigen::Index>(id)))); };
        sampler::InterpolateRequest base;
        base.guidance = g;
        base.seed = seed;
        std::vector<std::vector<double>> grid;
        std::vector<std::vector<double>> ends;
        const std::uint64_t seeds[1] = {seed};
        if (i % 2 == 0) {
            const Matrix yrow = b.corpus.items.row(static_cast<Eigen::Index>(y));
            base.content_refs = {{y, emb_c(y), 1.0}};
            base.anchor = sampler::Anchor{to_std(yrow), 20};
            grid = sampler::interpolation_grid(pl, base, sampler::Modality::style, emb_s(s0), emb_s(s1));
            for (auto s : {s0, s1})
                ends.push_back(to_std(sampler::stylize(pl, yrow, row_of(emb_s(s)), 20, g, seeds).items));
        } else {
            base.style_refs = {{s0, emb_s(s0), 1.0}};
            grid = sampler::interpolation_grid(pl, base, sampler::Modality::content, emb_c(c0), emb_c(c1));
            for (auto c : {c0, c1}) ends.push_back(to_std(sampler::sample(pl, row_of(emb_s(s0)), row_of(emb_c(c)), g, seeds)));
        }
        total += 2;
        identical += (grid.front() == ends[0]) + (grid.back() == ends[1]);
        const auto again = i % 2 == 0
                               ? sampler::interpolation_grid(pl, base, sampler::Modality::style, emb_s(s0), emb_s(s1))
                               : sampler::interpolation_grid(pl, base, sampler::Modality::content, emb_c(c0), emb_c(c1));
        grids_ok = grids_ok && grid.size() == 5 && again == grid;
    }
    return {identical == total && grids_ok,
            fmt("%zu/%zu endpoints bit-identical to single-reference generation, 5-item grids %s", identical, total,
                grids_ok ? "deterministic" : "NOT deterministic")};
}

// --- desk runs -------------------------------------------------------------

struct Desk {
    std::string name;
    io::json config;
};

std::vector<Desk> desks(const std::string& runs) {
    const auto base = ctl::merge_config({{"paths", {{"runs", runs}}}});
    return {{"reference", base},
            {"no_modality_losses", ctl::merge_config({{"train", {{"omega_s", 0.0}, {"omega_y", 0.0}}}}, base)},
            {"render", ctl::merge_config({{"corpus", {{"mode", "render"}}}, {"embed", {{"latent_dim", 16}}}}, base)}};
}

io::fs::path timing_file(const std::string& runs) { return io::fs::path(runs) / "desk_timing.json"; }

int prepare(const std::string& runs) {
    io::json timing = io::fs::exists(timing_file(runs)) ? io::read_json(timing_file(runs)) : io::json::object();
    for (const auto& d : desks(runs)) {
        const bool fresh = !io::fs::exists(ctl::run_paths(d.config).checkpoint() / "checkpoint.json");
        const auto t0 = Clock::now();
        ctl::ensure_trained(d.config, std::cerr);
        if (fresh) timing[d.name] = seconds_since(t0);
        std::cout << d.name << ": " << ctl::run_paths(d.config).root.string() << "\n";
    }
    io::write_json(timing_file(runs), timing);
    return 0;
}

struct DeskRun {
    ctl::LoadedRun run;
    corpus::CorpusBundle heldout;
};

DeskRun load_desk(const Desk& d) {
    DeskRun r{ctl::ensure_trained(d.config, std::cerr), {}};
    r.heldout = corpus::build_corpus(ctl::corpus_config(d.config), ctl::eval_settings(d.config).heldout_seed);
    return r;
}

finish::Report run_eval(const DeskRun& d, std::size_t pairs, int lambda, sampler::GuidanceConfig g, bool post = false) {
    finish::EvalParams ep;
    ep.pair_count = pairs;
    ep.seed = ctl::eval_settings(d.run.config).seed;
    ep.lambda = lambda;
    ep.guidance = g;
    ep.postprocess = post;
    ep.ablation = finish::ablation_of_checkpoint(d.run.checkpoint_echo);
    return finish::evaluate(d.run.pipeline, d.run.checkpoint_echo, d.heldout, ep);
}

double mean_of(const finish::Report& rep, double finish::ReportRow::*field) {
    double acc = 0.0;
    for (const auto& r : rep.rows) acc += r.*field;
    return acc / static_cast<double>(rep.rows.size());
}

std::string join(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : ", ") + fmt("%.4g", x);
    return out;
}

Outcome disentanglement(const DeskRun& ref, const io::json& timing) {
    const auto ss = ctl::sampler_settings(ref.run.config);
    const auto rep = run_eval(ref, 200, ss.lambda, ss.guidance);
    std::size_t pass = 0;
    for (const auto& r : rep.rows) pass += r.style_mse < r.style_mse_ref && r.content_mse < r.content_mse_ref;
    std::string train = "training time not recorded";
    bool fast = true;
    if (timing.contains("reference")) {
        const double t = timing.at("reference").get<double>();
        fast = t < 1800.0;
        train = fmt("reference training %.0f s (limit 1800 s)", t);
    }
    return {pass >= 160 && fast, fmt("%zu/200 pairs improve both style and content (need 160), %s", pass, train.c_str())};
}

Outcome lambda_monotonicity(const DeskRun& ref) {
    const auto ss = ctl::sampler_settings(ref.run.config);
    const std::vector<double> lambdas{0, 10, 20, 30, 40, 50};
    std::vector<double> shift;
    for (double l : lambdas)
        shift.push_back(mean_of(run_eval(ref, 100, static_cast<int>(l), ss.guidance), &finish::ReportRow::latent_shift));
    const double rho = oracle::spearman(lambdas, shift);
    int violations = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i + 1 < shift.size(); ++i)
        if (shift[i + 1] > shift[i]) {
            ++violations;
            worst = std::max(worst, (shift[i + 1] - shift[i]) / shift[i]);
        }
    return {rho <= 0 && violations <= 1 && worst <= 0.05,
            fmt("mean latent shift [%s] over lambda 0..50, Spearman %.3f, %d adjacent increases (max %.1f%%)",
                join(shift).c_str(), rho, violations, 100 * worst)};
}

Outcome style_guidance_monotonicity(const DeskRun& ref) {
    const auto ss = ctl::sampler_settings(ref.run.config);
    const std::vector<double> scales{0, 1, 3, 5, 8};
    std::vector<double> mse;
    for (double gs : scales)
        mse.push_back(mean_of(run_eval(ref, 100, ss.lambda, {gs, 5.0}), &finish::ReportRow::style_mse));
    std::string rises;
    for (std::size_t i = 0; i + 1 < mse.size(); ++i)
        if (mse[i + 1] > mse[i])
            rises += fmt(" %g->%g (+%.1f%%)", scales[i], scales[i + 1], 100 * (mse[i + 1] - mse[i]) / mse[i]);
    return {rises.empty(), fmt("mean style_mse [%s] over g_s 0,1,3,5,8 at g_y=5; increases:%s", join(mse).c_str(),
                               rises.empty() ? " none" : rises.c_str())};
}

Outcome postprocessing(const DeskRun& render) {
    const auto ss = ctl::sampler_settings(render.run.config);
    const auto rep = run_eval(render, 200, ss.lambda, ss.guidance, true);
    std::size_t better = 0, matched = 0;
    double worst = 0.0;
    const auto& grid = render.heldout.grid;
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        better += *r.chamfer_post <= r.chamfer_pre;
        const auto s = render.heldout.item(r.s_id).data;
        const auto m = finish::color_match(to_std(rep.outputs[i]), s, grid);
        if (!m.matched) continue;
        ++matched;
        const auto [mu_o, cov_o] = oracle::moments(m.unclamped, grid.channels);
        const auto [mu_s, cov_s] = oracle::moments(s, grid.channels);
        for (int a = 0; a < grid.channels; ++a) {
            worst = std::max(worst, std::abs(mu_o[a] - mu_s[a]));
            for (int b = 0; b < grid.channels; ++b) worst = std::max(worst, std::abs(cov_o[a][b] - cov_s[a][b]));
        }
    }
    return {better >= 180 && worst <= 1e-6,
            fmt("%zu/200 pairs with chamfer(post) <= chamfer(pre) (need 180), %zu matched, max moment error %.3g "
                "(tol 1e-6)",
                better, matched, worst)};
}

Outcome ablation(const DeskRun& ref, const DeskRun& abl) {
    const auto ss = ctl::sampler_settings(ref.run.config);
    const double a = mean_of(run_eval(ref, 200, ss.lambda, ss.guidance), &finish::ReportRow::style_mse);
    const double b = mean_of(run_eval(abl, 200, ss.lambda, ss.guidance), &finish::ReportRow::style_mse);
    return {a < b, fmt("mean style_mse reference %.4f vs without modality losses %.4f over the same 200 pairs", a, b)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string runs = std::getenv("PARASOL_DESK_RUNS") ? std::getenv("PARASOL_DESK_RUNS") : "desk_runs";
    bool prep = false;
    std::vector<std::string> expected;
    app.add_option("--runs", runs, "directory holding the desk runs");
    app.add_flag("--prepare", prep, "train the desk runs and exit");
    app.add_option("--expect-fail", expected, "criterion allowed to fail");
    CLI11_PARSE(app, argc, argv);

    try {
        if (prep) return prepare(runs);

        const std::set<std::string> allowed(expected.begin(), expected.end());
        int unexpected = 0;
        auto report = [&](const std::string& name, const std::function<Outcome()>& check) {
            Outcome o;
            try {
                o = check();
            } catch (const std::exception& e) {
                o = {false, std::string("error: ") + e.what()};
            }
            const bool known = !o.pass && allowed.count(name);
            if (!o.pass && !known) ++unexpected;
            std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << (known ? " (known failure)" : "")
                      << std::endl;
        };

        report("guided_eps_algebra", guided_algebra);
        report("inversion_reconstruction", inversion);
        report("gradient_integrity", gradients);
        report("mining_oracle", mining_oracle);

        const auto d = desks(runs);
        const io::json timing = io::fs::exists(timing_file(runs)) ? io::read_json(timing_file(runs)) : io::json::object();
        std::optional<DeskRun> ref, abl, render;
        auto desk = [&](std::optional<DeskRun>& slot, std::size_t i) -> const DeskRun& {
            if (!slot) slot = load_desk(d[i]);
            return *slot;
        };
        report("disentanglement", [&] { return disentanglement(desk(ref, 0), timing); });
        report("lambda_monotonicity", [&] { return lambda_monotonicity(desk(ref, 0)); });
        report("g_s_monotonicity", [&] { return style_guidance_monotonicity(desk(ref, 0)); });
        report("postprocessing", [&] { return postprocessing(desk(render, 2)); });
        report("interpolation_endpoints", interpolation);
        report("ablation_direction", [&] { return ablation(desk(ref, 0), desk(abl, 1)); });
        return unexpected == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
