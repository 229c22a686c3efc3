#pragma once

// Run configuration: one nested JSON document covering every stage. User files
// and --set overrides are merged onto the defaults; unknown keys and type changes
// are rejected. The run directory is named by a hash of the sections that shape
// the trained artifacts.

#include "parasol/finish.hpp"

namespace parasol::ctl {

using io::json;

inline const json& default_config() {
    static const json defaults = R"json({
  "corpus": {
    "mode": "linear",
    "targets": 2000,
    "style_db": 2000,
    "semantics_db": 2000,
    "seed": 1
  },
  "embed": {
    "latent_dim": 13
  },
  "mine": {
    "k": 50,
    "threshold_mode": "quantile",
    "quantile": 0.9,
    "tau_content": 0.9,
    "tau_style": 0.9
  },
  "diffusion": {
    "T": 50,
    "beta_1": 0.001,
    "beta_T": 0.2
  },
  "model": {
    "hidden": 128,
    "time_features": 16,
    "time_hidden": 32,
    "projector_hidden": 32,
    "key_dim": 32,
    "value_dim": 32,
    "blocks": 2,
    "use_projector": true,
    "seed": 3
  },
  "train": {
    "omega_s": 0.1,
    "omega_y": 0.1,
    "drop_p": 0.3,
    "joint_dropout": false,
    "batch": 32,
    "steps": 20000,
    "lr": 0.001,
    "seed": 0,
    "log_every": 10
  },
  "sampler": {
    "lambda": 20,
    "g_s": 5.0,
    "g_y": 5.0,
    "clip_latents": true,
    "seed": 0
  },
  "eval": {
    "heldout_seed": 777,
    "pairs": 200,
    "seed": 0,
    "postprocess": false,
    "no_inversion": false
  },
  "serve": {
    "host": "127.0.0.1",
    "port": 8080
  },
  "paths": {
    "runs": "runs"
  }
})json"_json;
    return defaults;
}

/// Sections whose values determine the corpus, encoders, triplets and checkpoint.
inline const std::vector<std::string>& pipeline_sections() {
    static const std::vector<std::string> names{"corpus", "embed", "mine", "diffusion", "model", "train"};
    return names;
}

namespace detail {

inline bool same_kind(const json& schema, const json& value) {
    if (schema.is_boolean()) return value.is_boolean();
    if (schema.is_string()) return value.is_string();
    if (schema.is_number_float()) return value.is_number();
    if (schema.is_number_unsigned() || schema.is_number_integer()) return value.is_number_integer();
    if (schema.is_object()) return value.is_object();
    return schema.type() == value.type();
}

inline void merge_into(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw InvalidArgument("config section '" + prefix + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw InvalidArgument("unknown config key: " + path);
        json& slot = base[key];
        if (!same_kind(slot, value)) throw InvalidArgument("config key " + path + " has the wrong type");
        if (slot.is_object())
            merge_into(slot, value, path);
        else if (slot.is_number_float())
            slot = value.get<double>();
        else
            slot = value;
    }
}

}  // namespace detail

/// Defaults with `patch` merged in.
inline json merge_config(const json& patch, const json& base = default_config()) {
    json out = base;
    detail::merge_into(out, patch, "");
    return out;
}

/// Parses "a.b.c=value"; the value is read as JSON when it parses, else as a string.
inline json override_patch(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw InvalidArgument("override must look like key.path=value");
    const std::string path(assignment.substr(0, eq));
    const std::string raw(assignment.substr(eq + 1));
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json patch = json::object();
    json* cursor = &patch;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw InvalidArgument("empty component in override key: " + path);
        if (dot == std::string::npos) {
            (*cursor)[key] = value;
            break;
        }
        cursor = &(*cursor)[key];
        start = dot + 1;
    }
    return patch;
}

inline json load_config(const std::optional<io::fs::path>& file, const std::vector<std::string>& overrides = {}) {
    json cfg = default_config();
    if (file) cfg = merge_config(io::read_json(*file), cfg);
    for (const auto& o : overrides) cfg = merge_config(override_patch(o), cfg);
    return cfg;
}

inline std::string config_hash(const json& cfg) {
    json pipeline = json::object();
    for (const auto& name : pipeline_sections()) pipeline[name] = cfg.at(name);
    Fnv1a h;
    h.update(pipeline.dump());
    return h.hex();
}

// --- typed views -----------------------------------------------------------

inline corpus::CorpusConfig corpus_config(const json& cfg) {
    const auto& c = cfg.at("corpus");
    corpus::CorpusConfig out;
    out.mode = corpus::mode_from_string(c.at("mode").get<std::string>());
    out.targets = c.at("targets").get<long>();
    out.style_db = c.at("style_db").get<long>();
    out.semantics_db = c.at("semantics_db").get<long>();
    return out;
}

inline std::uint64_t corpus_seed(const json& cfg) { return cfg.at("corpus").at("seed").get<std::uint64_t>(); }

inline int latent_dim(const json& cfg) { return cfg.at("embed").at("latent_dim").get<int>(); }

inline mine::MineParams mine_params(const json& cfg) {
    const auto& m = cfg.at("mine");
    mine::MineParams p;
    const long k = m.at("k").get<long>();
    if (k < 1) throw InvalidArgument("mine.k must be >= 1");
    p.k = static_cast<std::size_t>(k);
    const auto mode = m.at("threshold_mode").get<std::string>();
    if (mode == "quantile")
        p.threshold_mode = mine::ThresholdMode::quantile;
    else if (mode == "absolute")
        p.threshold_mode = mine::ThresholdMode::absolute;
    else
        throw InvalidArgument("mine.threshold_mode must be 'quantile' or 'absolute'");
    p.quantile = m.at("quantile").get<double>();
    p.tau_content = m.at("tau_content").get<double>();
    p.tau_style = m.at("tau_style").get<double>();
    return p;
}

inline diffusion::Schedule schedule(const json& cfg) {
    const auto& d = cfg.at("diffusion");
    return diffusion::make_schedule(d.at("T").get<int>(), d.at("beta_1").get<double>(), d.at("beta_T").get<double>());
}

inline diffusion::ModelConfig model_config(const json& cfg) {
    const auto& m = cfg.at("model");
    diffusion::ModelConfig c;
    c.latent_dim = latent_dim(cfg);
    c.hidden = m.at("hidden").get<int>();
    c.time_features = m.at("time_features").get<int>();
    c.time_hidden = m.at("time_hidden").get<int>();
    c.projector_hidden = m.at("projector_hidden").get<int>();
    c.key_dim = m.at("key_dim").get<int>();
    c.value_dim = m.at("value_dim").get<int>();
    c.blocks = m.at("blocks").get<int>();
    c.use_projector = m.at("use_projector").get<bool>();
    return c;
}

inline std::uint64_t model_seed(const json& cfg) { return cfg.at("model").at("seed").get<std::uint64_t>(); }

inline diffusion::TrainConfig train_config(const json& cfg) {
    auto c = diffusion::TrainConfig::from_json(cfg.at("train"));
    c.validate();
    return c;
}

struct SamplerSettings {
    int lambda = 20;
    sampler::GuidanceConfig guidance;
    bool clip_latents = true;
    std::uint64_t seed = 0;
};

inline SamplerSettings sampler_settings(const json& cfg) {
    const auto& s = cfg.at("sampler");
    SamplerSettings out;
    out.lambda = s.at("lambda").get<int>();
    out.guidance = {s.at("g_s").get<double>(), s.at("g_y").get<double>()};
    out.clip_latents = s.at("clip_latents").get<bool>();
    out.seed = s.at("seed").get<std::uint64_t>();
    if (!std::isfinite(out.guidance.g_s) || !std::isfinite(out.guidance.g_y))
        throw InvalidArgument("guidance scales must be finite");
    return out;
}

struct EvalSettings {
    std::uint64_t heldout_seed = 777;
    std::size_t pairs = 200;
    std::uint64_t seed = 0;
    bool postprocess = false;
    bool no_inversion = false;
};

inline EvalSettings eval_settings(const json& cfg) {
    const auto& e = cfg.at("eval");
    EvalSettings out;
    out.heldout_seed = e.at("heldout_seed").get<std::uint64_t>();
    const long pairs = e.at("pairs").get<long>();
    if (pairs < 0) throw InvalidArgument("eval.pairs must be >= 0");
    out.pairs = static_cast<std::size_t>(pairs);
    out.seed = e.at("seed").get<std::uint64_t>();
    out.postprocess = e.at("postprocess").get<bool>();
    out.no_inversion = e.at("no_inversion").get<bool>();
    return out;
}

}  // namespace parasol::ctl
