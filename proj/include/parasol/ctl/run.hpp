#pragma once

// Run directories and pipeline stages. Every artifact lives under
// <paths.runs>/<config hash>/ and records that hash; a stage refuses inputs
// that were produced under a different configuration.

#include "parasol/ctl/config.hpp"

#include <cstdio>
#include <iostream>

namespace parasol::ctl {

namespace fs = io::fs;

struct RunPaths {
    fs::path root;

    fs::path corpus() const { return root / "corpus"; }
    fs::path encoders() const { return root / "encoders"; }
    fs::path triplets() const { return root / "triplets.json"; }
    fs::path checkpoint() const { return root / "checkpoint"; }
    fs::path train_log() const { return root / "train_log.csv"; }
    fs::path train_lock() const { return root / "train.lock"; }
    fs::path outputs() const { return root / "outputs"; }
    fs::path eval() const { return root / "eval"; }
    fs::path record() const { return root / "run.json"; }
};

inline RunPaths run_paths(const json& cfg) {
    return {fs::path(cfg.at("paths").at("runs").get<std::string>()) / config_hash(cfg)};
}

/// A stage's input is absent; `producer` names the subcommand that creates it.
class MissingArtifact : public ArtifactError {
public:
    MissingArtifact(const std::string& what, const fs::path& where, const std::string& producer)
        : ArtifactError("missing " + what + " at " + where.string() + "; run `parasol " + producer + "` first") {}
};

inline json stamp(const json& cfg) { return {{"config_hash", config_hash(cfg)}}; }

inline void check_stamp(const json& manifest, const json& cfg, const std::string& what) {
    const std::string expected = config_hash(cfg);
    const std::string found = manifest.value("config_hash", "");
    if (found != expected)
        throw ArtifactError(what + " was produced under config " + (found.empty() ? "<none>" : found) +
                            ", expected " + expected);
}

inline void write_run_record(const json& cfg) {
    json record = stamp(cfg);
    for (const auto& name : pipeline_sections()) record["config"][name] = cfg.at(name);
    io::write_json(run_paths(cfg).record(), record);
}

inline std::string file_hash(const fs::path& p) {
    Fnv1a h;
    h.update(io::read_bytes(p));
    return h.hex();
}

// --- corpus ----------------------------------------------------------------

/// Builds and saves the corpus, then returns it as reloaded from disk so that
/// downstream stages always see the stored (f32-rounded) values.
inline corpus::CorpusBundle gen_corpus(const json& cfg, std::ostream& log) {
    const RunPaths paths = run_paths(cfg);
    const auto bundle = corpus::build_corpus(corpus_config(cfg), corpus_seed(cfg));
    corpus::save_corpus(bundle, paths.corpus(), stamp(cfg));
    write_run_record(cfg);
    auto stored = corpus::load_corpus(paths.corpus());
    log << "corpus: " << stored.size() << " items (" << corpus::to_string(stored.mode) << "), hash "
        << corpus::corpus_hash(stored) << " -> " << paths.corpus().string() << "\n";
    return stored;
}

inline corpus::CorpusBundle load_corpus_stage(const json& cfg) {
    const RunPaths paths = run_paths(cfg);
    if (!fs::exists(paths.corpus() / "manifest.json")) throw MissingArtifact("corpus", paths.corpus(), "gen-corpus");
    check_stamp(io::read_json(paths.corpus() / "manifest.json"), cfg, "corpus");
    return corpus::load_corpus(paths.corpus());
}

// --- encoders --------------------------------------------------------------

inline embed::EncoderBundle fit_encoders_stage(const json& cfg, std::ostream& log) {
    const RunPaths paths = run_paths(cfg);
    const auto corpus = load_corpus_stage(cfg);
    const auto enc = embed::fit_all(corpus, latent_dim(cfg));
    if (enc.autoencoder.rank < latent_dim(cfg))
        log << "warning: corpus rank " << enc.autoencoder.rank << " is below latent_dim " << latent_dim(cfg) << "\n";
    embed::save_encoders(enc, paths.encoders(), stamp(cfg));
    log << "encoders: d=" << enc.autoencoder.latent_dim() << ", hash " << enc.params_hash() << " -> "
        << paths.encoders().string() << "\n";
    return enc;
}

inline embed::EncoderBundle load_encoders_stage(const json& cfg, const corpus::CorpusBundle& corpus) {
    const RunPaths paths = run_paths(cfg);
    if (!fs::exists(paths.encoders() / "encoders.json"))
        throw MissingArtifact("encoders", paths.encoders(), "fit-encoders");
    check_stamp(io::read_json(paths.encoders() / "encoders.json"), cfg, "encoders");
    auto enc = embed::load_encoders(paths.encoders());
    if (enc.corpus_hash != corpus::corpus_hash(corpus))
        throw ArtifactError("encoders were fitted on a different corpus; rerun fit-encoders");
    return enc;
}

// --- mining ----------------------------------------------------------------

inline mine::TripletSet mine_stage(const json& cfg, std::ostream& log) {
    const RunPaths paths = run_paths(cfg);
    const auto corpus = load_corpus_stage(cfg);
    const auto enc = load_encoders_stage(cfg, corpus);
    auto set = mine::mine_dataset(corpus, enc.encoders, mine_params(cfg));
    json j = mine::to_json(set);
    j.update(stamp(cfg));
    io::write_json(paths.triplets(), j);
    log << "mine: " << set.triplets.size() << " triplets -> " << paths.triplets().string() << "\n";
    return set;
}

inline mine::TripletSet load_triplets_stage(const json& cfg, const corpus::CorpusBundle& corpus) {
    const RunPaths paths = run_paths(cfg);
    if (!fs::exists(paths.triplets())) throw MissingArtifact("triplets", paths.triplets(), "mine");
    const json j = io::read_json(paths.triplets());
    check_stamp(j, cfg, "triplets");
    auto set = mine::triplets_from_json(j);
    if (set.corpus_hash != corpus::corpus_hash(corpus))
        throw ArtifactError("triplets were mined from a different corpus; rerun mine");
    return set;
}

// --- training --------------------------------------------------------------

/// Exclusive training lock; creation fails if the file already exists.
class TrainLock {
public:
    explicit TrainLock(fs::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw ArtifactError("another training job holds " + path_.string() +
                                "; remove the file if no training is running");
        std::fclose(f);
    }
    ~TrainLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    TrainLock(const TrainLock&) = delete;
    TrainLock& operator=(const TrainLock&) = delete;

private:
    fs::path path_;
};

/// Per-dimension range of the training latents.
inline std::pair<Vector, Vector> latent_range(const Matrix& z0) {
    return {z0.colwise().minCoeff().transpose(), z0.colwise().maxCoeff().transpose()};
}

struct Upstream {
    corpus::CorpusBundle corpus;
    embed::EncoderBundle encoders;
    mine::TripletSet triplets;
    std::string triplets_hash;
};

inline Upstream load_upstream(const json& cfg) {
    Upstream u;
    u.corpus = load_corpus_stage(cfg);
    u.encoders = load_encoders_stage(cfg, u.corpus);
    u.triplets = load_triplets_stage(cfg, u.corpus);
    u.triplets_hash = file_hash(run_paths(cfg).triplets());
    return u;
}

inline json checkpoint_echo(const json& cfg, const Upstream& u, const diffusion::TrainingData& data) {
    const auto [lo, hi] = latent_range(data.z0);
    json echo = stamp(cfg);
    echo["model"] = model_config(cfg).to_json();
    echo["train"] = train_config(cfg).to_json();
    echo["diffusion"] = cfg.at("diffusion");
    echo["corpus_hash"] = u.encoders.corpus_hash;
    echo["encoders_hash"] = u.encoders.params_hash();
    echo["triplets_hash"] = u.triplets_hash;
    echo["latent_box"] = {{"lo", to_std(Matrix(lo.transpose()))}, {"hi", to_std(Matrix(hi.transpose()))}};
    return echo;
}

namespace detail {

/// Drops log rows past `step` (left behind by an interrupted run).
inline void truncate_train_log(const fs::path& path, long step) {
    if (!fs::exists(path)) return;
    std::istringstream in(io::read_bytes(path));
    std::string line, kept;
    bool header = true;
    while (std::getline(in, line)) {
        if (header || std::stol(line.substr(0, line.find(','))) <= step) kept += line + "\n";
        header = false;
    }
    io::write_bytes(path, kept);
}

}  // namespace detail

inline constexpr long kCheckpointEvery = 2000;

/// Trains to train.steps, saving a checkpoint every kCheckpointEvery steps. An
/// existing checkpoint is resumed; a finished one is left untouched.
inline void train_stage(const json& cfg, std::ostream& log) {
    const RunPaths paths = run_paths(cfg);
    const Upstream u = load_upstream(cfg);
    TrainLock lock(paths.train_lock());
    const auto mc = model_config(cfg);
    const auto tc = train_config(cfg);
    const auto sched = schedule(cfg);
    const auto data = diffusion::make_training_data(u.corpus, u.encoders, u.triplets.triplets);
    const json echo = checkpoint_echo(cfg, u, data);

    diffnet::ParamStore store;
    if (fs::exists(paths.checkpoint() / "checkpoint.json")) {
        auto ck = diffnet::load_checkpoint(paths.checkpoint());
        check_stamp(ck.config, cfg, "checkpoint");
        if (ck.config.at("triplets_hash") != u.triplets_hash)
            throw ArtifactError("checkpoint was trained on different triplets; remove it to retrain");
        store = std::move(ck.store);
        detail::truncate_train_log(paths.train_log(), store.step());
        log << "train: resuming at step " << store.step() << "\n";
    } else {
        store = diffusion::init_denoiser(mc, model_seed(cfg));
        std::error_code ec;
        fs::remove(paths.train_log(), ec);
    }
    if (store.step() >= tc.steps) {
        log << "train: checkpoint already at step " << store.step() << "\n";
        return;
    }
    while (store.step() < tc.steps) {
        diffusion::TrainConfig chunk = tc;
        chunk.steps = std::min(tc.steps, (store.step() / kCheckpointEvery + 1) * kCheckpointEvery);
        auto rows = diffusion::train(store, mc, sched, data, chunk, &log);
        // chunk ends are not logging points of an uninterrupted run
        std::erase_if(rows, [&](const diffusion::TrainLogRow& r) {
            return tc.log_every <= 0 || ((r.step - 1) % tc.log_every != 0 && r.step != tc.steps);
        });
        diffusion::write_train_log(rows, paths.train_log(), true);
        diffnet::save_checkpoint(store, echo, paths.checkpoint());
    }
    log << "train: " << tc.steps << " steps, params " << store.hash() << " -> " << paths.checkpoint().string() << "\n";
}

// --- loaded pipeline -------------------------------------------------------

struct LoadedRun {
    json config;
    RunPaths paths;
    corpus::CorpusBundle corpus;
    sampler::Pipeline pipeline;
    json checkpoint_echo;
    std::string checkpoint_hash;

    std::string corpus_hash() const { return pipeline.encoders.corpus_hash; }
};

inline LoadedRun load_run(const json& cfg) {
    LoadedRun run;
    run.config = cfg;
    run.paths = run_paths(cfg);
    run.corpus = load_corpus_stage(cfg);
    auto enc = load_encoders_stage(cfg, run.corpus);
    if (!fs::exists(run.paths.checkpoint() / "checkpoint.json"))
        throw MissingArtifact("checkpoint", run.paths.checkpoint(), "train");
    auto ck = diffnet::load_checkpoint(run.paths.checkpoint());
    check_stamp(ck.config, cfg, "checkpoint");
    const long steps = train_config(cfg).steps;
    if (ck.store.step() != steps)
        throw ArtifactError("training is incomplete (step " + std::to_string(ck.store.step()) + " of " +
                            std::to_string(steps) + "); rerun `parasol train` to resume");
    if (ck.config.at("encoders_hash") != enc.params_hash() || ck.config.at("corpus_hash") != enc.corpus_hash)
        throw ArtifactError("checkpoint was trained against different encoders");
    const auto mc = diffusion::ModelConfig::from_json(ck.config.at("model"));
    std::optional<std::pair<Vector, Vector>> box;
    if (sampler_settings(cfg).clip_latents) {
        const auto lo = ck.config.at("latent_box").at("lo").get<std::vector<double>>();
        const auto hi = ck.config.at("latent_box").at("hi").get<std::vector<double>>();
        box = std::make_pair(Vector(Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()))),
                             Vector(Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()))));
    }
    run.checkpoint_hash = ck.store.hash();
    run.checkpoint_echo = ck.config;
    run.pipeline = sampler::Pipeline{std::move(ck.store), mc, schedule(cfg), std::move(enc), std::move(box)};
    return run;
}

/// Runs whichever stages are missing, then loads the trained pipeline.
inline LoadedRun ensure_trained(const json& cfg, std::ostream& log) {
    const RunPaths paths = run_paths(cfg);
    if (!fs::exists(paths.corpus() / "manifest.json")) gen_corpus(cfg, log);
    if (!fs::exists(paths.encoders() / "encoders.json")) fit_encoders_stage(cfg, log);
    if (!fs::exists(paths.triplets())) mine_stage(cfg, log);
    train_stage(cfg, log);
    return load_run(cfg);
}

// --- outputs ---------------------------------------------------------------

/// Generated items: manifest.json + items.f32 in the corpus layout, plus an
/// optional nearest-neighbour-upscaled PNG per item.
inline void write_items(const fs::path& dir, const Matrix& items, const corpus::CorpusBundle& like, const json& meta,
                        bool png) {
    json m = meta;
    m["format"] = "parasol-items";
    m["version"] = 1;
    m["mode"] = corpus::to_string(like.mode);
    m["grid"] = {like.grid.height, like.grid.width, like.grid.channels};
    m["count"] = items.rows();
    io::write_json(dir / "manifest.json", m);
    io::write_bytes(dir / "items.f32", io::pack<float>(to_std(items)));
    if (!png) return;
    for (Eigen::Index i = 0; i < items.rows(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "item_%03ld.png", static_cast<long>(i));
        io::write_bytes(dir / name, io::encode_png(std::span<const double>(items.row(i).data(), items.cols()),
                                                   like.grid.height, like.grid.width, like.grid.channels));
    }
}

inline Matrix read_items(const fs::path& dir) {
    const auto m = io::read_json(dir / "manifest.json");
    if (m.value("format", "") != "parasol-items") throw ArtifactError("not an item set: " + dir.string());
    const auto& g = m.at("grid");
    const Eigen::Index cols = g[0].get<long>() * g[1].get<long>() * g[2].get<long>();
    io::ArrayCursor cursor(io::unpack<float>(io::read_bytes(dir / "items.f32")));
    return cursor.take(m.at("count").get<Eigen::Index>(), cols);
}

}  // namespace parasol::ctl
