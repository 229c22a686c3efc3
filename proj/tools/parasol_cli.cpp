#include "parasol/ctl/service.hpp"

#include <CLI11.hpp>

#include <csignal>

using namespace parasol;
using ctl::json;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string runs;
};

/// Flags shared by the sampling subcommands; each maps onto a config override.
struct SamplingFlags {
    std::optional<int> lambda;
    std::optional<double> g_s;
    std::optional<double> g_y;
    std::optional<std::uint64_t> seed;
    bool png = false;

    void add_to(CLI::App* cmd, bool with_lambda = true) {
        if (with_lambda) cmd->add_option("--lambda", lambda, "reverse steps under the content item's own style");
        cmd->add_option("--g-s", g_s, "style guidance scale");
        cmd->add_option("--g-y", g_y, "content guidance scale");
        cmd->add_option("--seed", seed, "sampling seed");
        cmd->add_flag("--png", png, "also write PNG renderings");
    }
    void apply(std::vector<std::string>& overrides) const {
        if (lambda) overrides.push_back("sampler.lambda=" + std::to_string(*lambda));
        if (g_s) overrides.push_back("sampler.g_s=" + json(*g_s).dump());
        if (g_y) overrides.push_back("sampler.g_y=" + json(*g_y).dump());
        if (seed) overrides.push_back("sampler.seed=" + std::to_string(*seed));
    }
};

json load(const Common& common, std::vector<std::string> extra = {}) {
    std::vector<std::string> overrides = common.overrides;
    if (!common.runs.empty()) overrides.push_back("paths.runs=" + json(common.runs).dump());
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    return ctl::load_config(common.config_file.empty() ? std::nullopt : std::optional<io::fs::path>(common.config_file),
                            overrides);
}

Matrix rows_of(const corpus::CorpusBundle& c, const std::vector<std::size_t>& ids) {
    for (auto id : ids)
        if (id >= c.size()) throw InvalidArgument("item id out of range: " + std::to_string(id));
    return mine::gather_rows(c.items, ids);
}

/// outputs/<command>-<hash of the request>
io::fs::path output_dir(const ctl::LoadedRun& run, const std::string& command, const json& request) {
    Fnv1a h;
    h.update(request.dump());
    return run.paths.outputs() / (command + "-" + h.hex().substr(0, 12));
}

json metrics_row(const sampler::Pipeline& pl, const Matrix& out, const Matrix& y, const Matrix& s) {
    json rows = json::array();
    const Matrix a_out = pl.style_of(out), c_out = pl.content_of(out);
    const Matrix a_s = pl.style_of(s), c_y = pl.content_of(y);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        rows.push_back({{"style_mse", finish::mean_squared_difference(to_std(a_s.row(i)), to_std(a_out.row(i)))},
                        {"content_mse", finish::mean_squared_difference(to_std(c_y.row(i)), to_std(c_out.row(i)))}});
    return rows;
}

void finish_output(const ctl::LoadedRun& run, const io::fs::path& dir, const Matrix& items, json meta, bool png) {
    meta.update(ctl::stamp(run.config));
    ctl::write_items(dir, items, run.corpus, meta, png);
    std::cout << meta.dump(2) << "\n" << "wrote " << items.rows() << " item(s) to " << dir.string() << "\n";
}

httplib::Server* active_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parasol: style-and-content conditioned diffusion on a synthetic corpus"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    Common common;
    app.add_option("-c,--config", common.config_file, "JSON config merged over the defaults")->check(CLI::ExistingFile);
    app.add_option("--set", common.overrides, "override a config key, e.g. --set train.steps=500")
        ->allow_extra_args(false);
    app.add_option("--runs", common.runs, "root directory for run outputs (paths.runs)");

    std::function<int()> action;

    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    gen->callback([&] {
        action = [&] {
            ctl::gen_corpus(load(common), std::cout);
            return 0;
        };
    });

    auto* fit = app.add_subcommand("fit-encoders", "fit the autoencoder and the content/style encoders");
    fit->callback([&] {
        action = [&] {
            ctl::fit_encoders_stage(load(common), std::cout);
            return 0;
        };
    });

    auto* mine_cmd = app.add_subcommand("mine", "mine (x, y, s) training triplets");
    mine_cmd->callback([&] {
        action = [&] {
            const auto set = ctl::mine_stage(load(common), std::cout);
            std::cout << mine::to_json(set).at("stats").dump(2) << "\n";
            return 0;
        };
    });

    auto* train_cmd = app.add_subcommand("train", "train the denoiser (resumes an interrupted run)");
    train_cmd->callback([&] {
        action = [&] {
            ctl::train_stage(load(common), std::cout);
            return 0;
        };
    });

    SamplingFlags sample_flags;
    std::optional<std::size_t> sample_content, sample_style;
    std::size_t sample_n = 1;
    auto* sample_cmd = app.add_subcommand("sample", "conditional sampling from item embeddings");
    sample_cmd->add_option("--content", sample_content, "item id whose content embedding conditions the sample");
    sample_cmd->add_option("--style", sample_style, "item id whose style embedding conditions the sample");
    sample_cmd->add_option("-n,--n", sample_n, "number of samples")->check(CLI::PositiveNumber);
    sample_flags.add_to(sample_cmd, false);
    sample_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            sample_flags.apply(extra);
            const auto run = ctl::load_run(load(common, extra));
            const auto ss = ctl::sampler_settings(run.config);
            if (!sample_content && !sample_style) throw InvalidArgument("give --content and/or --style");
            std::optional<Matrix> c, s;
            if (sample_content)
                c = run.pipeline.content_of(rows_of(run.corpus, {*sample_content})).replicate(Eigen::Index(sample_n), 1);
            if (sample_style)
                s = run.pipeline.style_of(rows_of(run.corpus, {*sample_style})).replicate(Eigen::Index(sample_n), 1);
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < sample_n; ++i) seeds.push_back(derive_seed(ss.seed, 0x5A, i));
            const Matrix out = sampler::sample(run.pipeline, s, c, ss.guidance, seeds);
            const json request{{"command", "sample"},
                               {"content", sample_content ? json(*sample_content) : json(nullptr)},
                               {"style", sample_style ? json(*sample_style) : json(nullptr)},
                               {"n", sample_n},
                               {"g_s", ss.guidance.g_s},
                               {"g_y", ss.guidance.g_y},
                               {"seed", ss.seed}};
            finish_output(run, output_dir(run, "sample", request), out, {{"request", request}}, sample_flags.png);
            return 0;
        };
    });

    SamplingFlags stylize_flags;
    std::vector<std::size_t> stylize_y, stylize_s;
    auto* stylize_cmd = app.add_subcommand("stylize", "restyle content items y with the styles of items s");
    stylize_cmd->add_option("--y", stylize_y, "content item id(s)")->required();
    stylize_cmd->add_option("--s", stylize_s, "style item id(s), one per --y")->required();
    stylize_flags.add_to(stylize_cmd);
    stylize_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            stylize_flags.apply(extra);
            const auto run = ctl::load_run(load(common, extra));
            const auto ss = ctl::sampler_settings(run.config);
            if (stylize_y.size() != stylize_s.size()) throw InvalidArgument("--y and --s need the same number of ids");
            const Matrix y = rows_of(run.corpus, stylize_y), s = rows_of(run.corpus, stylize_s);
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < stylize_y.size(); ++i) seeds.push_back(derive_seed(ss.seed, 0x57, i));
            const auto out = sampler::stylize(run.pipeline, y, run.pipeline.style_of(s), ss.lambda, ss.guidance, seeds);
            const json request{{"command", "stylize"}, {"y", stylize_y},         {"s", stylize_s},
                               {"lambda", ss.lambda},  {"g_s", ss.guidance.g_s}, {"g_y", ss.guidance.g_y},
                               {"seed", ss.seed}};
            json meta{{"request", request}, {"metrics", metrics_row(run.pipeline, out.items, y, s)}};
            meta["latent_shift"] = json::array();
            for (Eigen::Index i = 0; i < y.rows(); ++i)
                meta["latent_shift"].push_back((out.latents.row(i) - run.pipeline.encode(y.row(i))).norm());
            finish_output(run, output_dir(run, "stylize", request), out.items, meta, stylize_flags.png);
            return 0;
        };
    });

    SamplingFlags interp_flags;
    std::string interp_modality = "style";
    std::size_t interp_from = 0, interp_to = 0;
    std::optional<std::size_t> interp_content, interp_style;
    auto* interp_cmd = app.add_subcommand("interpolate", "five generations along the path between two references");
    interp_cmd->add_option("--modality", interp_modality, "content or style")
        ->check(CLI::IsMember({"content", "style"}));
    interp_cmd->add_option("--from", interp_from, "item id at alpha = 0")->required();
    interp_cmd->add_option("--to", interp_to, "item id at alpha = 1")->required();
    interp_cmd->add_option("--content", interp_content,
                           "content item held fixed (and inverted) while the style moves");
    interp_cmd->add_option("--style", interp_style, "style item held fixed while the content moves");
    interp_flags.add_to(interp_cmd);
    interp_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            interp_flags.apply(extra);
            const auto run = ctl::load_run(load(common, extra));
            const auto ss = ctl::sampler_settings(run.config);
            const auto& pl = run.pipeline;
            const bool by_content = interp_modality == "content";
            auto emb = [&](std::size_t id) {
                const Matrix row = rows_of(run.corpus, {id});
                return to_std(by_content ? pl.content_of(row) : pl.style_of(row));
            };
            sampler::InterpolateRequest base;
            base.guidance = ss.guidance;
            base.seed = ss.seed;
            if (by_content && interp_style)
                base.style_refs = {{*interp_style, to_std(pl.style_of(rows_of(run.corpus, {*interp_style}))), 1.0}};
            if (!by_content && interp_content) {
                const Matrix row = rows_of(run.corpus, {*interp_content});
                base.content_refs = {{*interp_content, to_std(pl.content_of(row)), 1.0}};
                base.anchor = sampler::Anchor{to_std(row), ss.lambda};
            }
            const auto items = sampler::interpolation_grid(
                pl, base, by_content ? sampler::Modality::content : sampler::Modality::style, emb(interp_from),
                emb(interp_to));
            Matrix out(static_cast<Eigen::Index>(items.size()), run.corpus.dim());
            for (std::size_t i = 0; i < items.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = row_of(items[i]);
            const json request{{"command", "interpolate"},
                               {"modality", interp_modality},
                               {"from", interp_from},
                               {"to", interp_to},
                               {"content", interp_content ? json(*interp_content) : json(nullptr)},
                               {"style", interp_style ? json(*interp_style) : json(nullptr)},
                               {"alphas", sampler::kAlphaGrid},
                               {"lambda", ss.lambda},
                               {"g_s", ss.guidance.g_s},
                               {"g_y", ss.guidance.g_y},
                               {"seed", ss.seed}};
            finish_output(run, output_dir(run, "interpolate", request), out, {{"request", request}}, interp_flags.png);
            return 0;
        };
    });

    SamplingFlags div_flags;
    std::size_t div_content = 0, div_style = 0, div_n = 4;
    auto* div_cmd = app.add_subcommand("diversify", "fresh content layouts with a fixed content and style");
    div_cmd->add_option("--content", div_content, "content item id")->required();
    div_cmd->add_option("--style", div_style, "style item id")->required();
    div_cmd->add_option("-n,--n", div_n, "number of outputs")->check(CLI::PositiveNumber);
    div_flags.add_to(div_cmd);
    div_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            div_flags.apply(extra);
            const auto run = ctl::load_run(load(common, extra));
            const auto ss = ctl::sampler_settings(run.config);
            const auto c = to_std(run.pipeline.content_of(rows_of(run.corpus, {div_content})));
            const auto s = to_std(run.pipeline.style_of(rows_of(run.corpus, {div_style})));
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < div_n; ++i) seeds.push_back(derive_seed(ss.seed, 0xD7, i));
            const Matrix out = sampler::diversify(run.pipeline, c, s, ss.lambda, ss.guidance, seeds);
            const json request{{"command", "diversify"}, {"content", div_content}, {"style", div_style},
                               {"n", div_n},             {"lambda", ss.lambda},    {"g_s", ss.guidance.g_s},
                               {"g_y", ss.guidance.g_y}, {"seed", ss.seed}};
            finish_output(run, output_dir(run, "diversify", request), out, {{"request", request}}, div_flags.png);
            return 0;
        };
    });

    SamplingFlags eval_flags;
    std::optional<std::size_t> eval_pairs;
    bool eval_post = false, eval_no_inversion = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate on held-out (y, s) pairs and write report.csv/report.json");
    eval_cmd->add_option("--pairs", eval_pairs, "number of pairs");
    eval_cmd->add_flag("--postprocess", eval_post, "colour-match outputs to the style item (render mode)");
    eval_cmd->add_flag("--no-inversion", eval_no_inversion, "plain conditional sampling instead of inversion");
    eval_flags.add_to(eval_cmd);
    eval_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            eval_flags.apply(extra);
            if (eval_pairs) extra.push_back("eval.pairs=" + std::to_string(*eval_pairs));
            if (eval_post) extra.push_back("eval.postprocess=true");
            if (eval_no_inversion) extra.push_back("eval.no_inversion=true");
            const auto run = ctl::load_run(load(common, extra));
            const auto ss = ctl::sampler_settings(run.config);
            const auto es = ctl::eval_settings(run.config);
            auto held_cfg = ctl::corpus_config(run.config);
            const auto held = corpus::build_corpus(held_cfg, es.heldout_seed);
            finish::EvalParams ep;
            ep.pair_count = es.pairs;
            ep.seed = es.seed;
            ep.lambda = ss.lambda;
            ep.guidance = ss.guidance;
            ep.postprocess = es.postprocess;
            ep.ablation = finish::ablation_of_checkpoint(run.checkpoint_echo);
            ep.ablation.no_inversion = es.no_inversion;
            auto rep = finish::evaluate(run.pipeline, run.checkpoint_echo, held, ep);
            rep.config["config_hash"] = ctl::config_hash(run.config);
            rep.config["heldout_seed"] = es.heldout_seed;
            const json tag{{"sampler", run.config.at("sampler")}, {"eval", run.config.at("eval")}};
            Fnv1a h;
            h.update(tag.dump());
            const auto dir = run.paths.eval() / h.hex().substr(0, 12);
            finish::save_report(rep, dir);
            std::cout << rep.aggregates().dump(2) << "\nreport written to " << dir.string() << "\n";
            return 0;
        };
    });

    std::size_t fd_coords = 256;
    double fd_h = 1e-5;
    auto* fd_cmd = app.add_subcommand("fd-check", "finite-difference check of the full training objective");
    fd_cmd->add_option("--coords", fd_coords, "sampled parameter coordinates")->check(CLI::PositiveNumber);
    fd_cmd->add_option("--step", fd_h, "central-difference step")->check(CLI::PositiveNumber);
    fd_cmd->callback([&] {
        action = [&] {
            const auto cfg = load(common);
            const auto up = ctl::load_upstream(cfg);
            const auto mc = ctl::model_config(cfg);
            const auto data = diffusion::make_training_data(up.corpus, up.encoders, up.triplets.triplets);
            auto store = diffusion::init_denoiser(mc, ctl::model_seed(cfg));
            diffnet::FdOptions opt;
            opt.h = fd_h;
            opt.coordinates = fd_coords;
            const auto rep =
                diffusion::check_gradients(store, mc, ctl::schedule(cfg), data, ctl::train_config(cfg), opt);
            std::cout << "coordinates " << rep.coordinates << "\nmax relative error " << rep.max_relative_error
                      << " (" << rep.worst_parameter << "[" << rep.worst_index << "]: analytic " << rep.worst_analytic
                      << ", numeric " << rep.worst_numeric << ")\n";
            return rep.max_relative_error > 1e-5 ? 1 : 0;
        };
    });

    auto* serve_cmd = app.add_subcommand("serve", "HTTP/JSON service for search and generation");
    std::optional<std::string> serve_host;
    std::optional<int> serve_port;
    serve_cmd->add_option("--host", serve_host, "bind address (serve.host)");
    serve_cmd->add_option("--port", serve_port, "port (serve.port)");
    serve_cmd->callback([&] {
        action = [&] {
            std::vector<std::string> extra;
            if (serve_host) extra.push_back("serve.host=" + json(*serve_host).dump());
            if (serve_port) extra.push_back("serve.port=" + std::to_string(*serve_port));
            const auto cfg = load(common, extra);
            ctl::Service service(ctl::load_run(cfg));
            httplib::Server server;
            service.bind(server);
            const auto host = cfg.at("serve").at("host").get<std::string>();
            const int port = cfg.at("serve").at("port").get<int>();
            active_server = &server;
            std::signal(SIGINT, [](int) {
                if (active_server) active_server->stop();
            });
            std::signal(SIGTERM, [](int) {
                if (active_server) active_server->stop();
            });
            std::cout << "serving run " << service.run().paths.root.string() << " on http://" << host << ":" << port
                      << std::endl;
            if (!server.listen(host, port)) throw ArtifactError("cannot listen on " + host + ":" + std::to_string(port));
            return 0;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    try {
        return action();
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ArtifactError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mine::NoCandidate& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
