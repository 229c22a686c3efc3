#pragma once

// HTTP/JSON service over a trained run: item lookup, nearest-neighbour search in
// either embedding space, and weighted generation. Generated items live in an
// in-memory session store under ids "g1", "g2", ... and can be fetched or used
// as queries like corpus items. Corpus ids are the decimal row index; all ids
// are returned as strings.

#include "parasol/ctl/run.hpp"

#include <httplib.h>

#include <mutex>

namespace parasol::ctl {

struct HttpResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";

    json json_body() const { return json::parse(body); }
};

class NotFound : public Error {
public:
    using Error::Error;
};

class Service {
public:
    explicit Service(LoadedRun run) : run_(std::move(run)) {
        std::vector<mine::ItemId> ids(run_.corpus.size());
        std::iota(ids.begin(), ids.end(), mine::ItemId{0});
        content_ = run_.pipeline.content_of(run_.corpus.items);
        style_ = run_.pipeline.style_of(run_.corpus.items);
        content_index_ = mine::build_index(content_, ids);
        style_index_ = mine::build_index(style_, ids);
    }

    const LoadedRun& run() const { return run_; }

    HttpResponse health() const {
        return guarded([&] {
            return ok({{"status", "ok"},
                       {"config_hash", config_hash(run_.config)},
                       {"corpus_hash", run_.corpus_hash()},
                       {"encoders_hash", run_.pipeline.encoders.params_hash()},
                       {"checkpoint_hash", run_.checkpoint_hash},
                       {"mode", corpus::to_string(run_.corpus.mode)},
                       {"grid", {run_.corpus.grid.height, run_.corpus.grid.width, run_.corpus.grid.channels}},
                       {"items", run_.corpus.size()},
                       {"T", run_.pipeline.schedule.T},
                       {"defaults", run_.config.at("sampler")}});
        });
    }

    /// `path_id` is "<id>", "<id>.json" or "<id>.png".
    HttpResponse item(const std::string& path_id) const {
        return guarded([&] {
            std::string id = path_id;
            bool png = false;
            if (id.ends_with(".png")) {
                png = true;
                id.resize(id.size() - 4);
            } else if (id.ends_with(".json")) {
                id.resize(id.size() - 5);
            }
            const Resolved r = resolve(id);
            if (png) return HttpResponse{200, png_of(r.data), "image/png"};
            json j{{"item_id", r.id},
                   {"source", r.session ? "session" : "corpus"},
                   {"mode", corpus::to_string(run_.corpus.mode)},
                   {"grid", {run_.corpus.grid.height, run_.corpus.grid.width, run_.corpus.grid.channels}},
                   {"data", r.data},
                   {"content_embedding", embedding(r, sampler::Modality::content)},
                   {"style_embedding", embedding(r, sampler::Modality::style)}};
            if (!r.session) j["role"] = corpus::to_string(run_.corpus.roles[r.index]);
            return ok(j);
        });
    }

    /// {modality: "content" | "style", query: id | [embedding values], k}
    HttpResponse search(const std::string& body) const {
        return guarded([&] {
            const json req = parse_object(body);
            const auto modality = modality_of(req.at("modality"));
            const long k = req.contains("k") ? integer(req.at("k"), "k") : 10;
            if (k < 1) throw InvalidArgument("k must be >= 1");
            const json& query = field(req, "query");
            std::vector<double> vec;
            json query_echo;
            if (query.is_array()) {
                for (const auto& v : query) {
                    if (!v.is_number()) throw InvalidArgument("query vector must hold numbers");
                    vec.push_back(v.get<double>());
                }
                const auto& index = modality == sampler::Modality::content ? content_index_ : style_index_;
                if (static_cast<int>(vec.size()) != index.dim())
                    throw InvalidArgument("query vector must have " + std::to_string(index.dim()) + " values");
                query_echo = vec;
            } else {
                const Resolved r = resolve(id_string(query));
                vec = embedding(r, modality);
                query_echo = r.id;
            }
            const auto& index = modality == sampler::Modality::content ? content_index_ : style_index_;
            const auto knn = index.knn(vec, static_cast<std::size_t>(k));
            json results = json::array();
            for (const auto& n : knn.neighbors)
                results.push_back({{"item_id", std::to_string(n.id)},
                                   {"similarity", n.similarity},
                                   {"role", corpus::to_string(run_.corpus.roles[n.id])}});
            return ok({{"modality", modality_name(modality)}, {"query", query_echo}, {"k", k}, {"results", results}});
        });
    }

    /// {content_refs: [{id, weight}], style_refs: [...], lambda, g_s, g_y, seed, postprocess}
    ///
    /// With content references the highest-weight one (lowest id on ties) is inverted
    /// under the blended content and its own style, and the style switches to the
    /// blended style after `lambda` steps. Without content references this is plain
    /// style-conditioned sampling.
    HttpResponse generate(const std::string& body) {
        return guarded([&] {
            const json req = parse_object(body);
            const auto defaults = sampler_settings(run_.config);
            const int T = run_.pipeline.schedule.T;
            const auto content_refs = refs_of(req, "content_refs", sampler::Modality::content);
            const auto style_refs = refs_of(req, "style_refs", sampler::Modality::style);
            const long lambda = req.contains("lambda") ? integer(req.at("lambda"), "lambda") : defaults.lambda;
            if (lambda < 0 || lambda > T) throw InvalidArgument("lambda must lie in [0, " + std::to_string(T) + "]");
            sampler::GuidanceConfig g = defaults.guidance;
            if (req.contains("g_s")) g.g_s = number(req.at("g_s"), "g_s");
            if (req.contains("g_y")) g.g_y = number(req.at("g_y"), "g_y");
            std::uint64_t seed = defaults.seed;
            if (req.contains("seed")) {
                const long s = integer(req.at("seed"), "seed");
                if (s < 0) throw InvalidArgument("seed must be non-negative");
                seed = static_cast<std::uint64_t>(s);
            }
            bool postprocess = false;
            if (req.contains("postprocess")) {
                if (!req.at("postprocess").is_boolean()) throw InvalidArgument("postprocess must be a boolean");
                postprocess = req.at("postprocess").get<bool>();
            }
            if (content_refs.empty() && style_refs.empty())
                throw InvalidArgument("give at least one content or style reference");
            if (postprocess && run_.corpus.mode != corpus::Mode::render)
                throw InvalidArgument("postprocess needs a render-mode corpus");
            if (postprocess && style_refs.empty()) throw InvalidArgument("postprocess needs a style reference");

            sampler::InterpolateRequest ir;
            ir.guidance = g;
            ir.seed = seed;
            for (const auto& r : content_refs) ir.content_refs.push_back(r.ref);
            for (const auto& r : style_refs) ir.style_refs.push_back(r.ref);
            const Ref* anchor = top(content_refs);
            if (anchor) ir.anchor = sampler::Anchor{anchor->item.data, static_cast<int>(lambda)};
            std::vector<double> out = sampler::interpolate_generate(run_.pipeline, ir);

            const Ref* style_item = top(style_refs);
            json post = nullptr;
            if (postprocess) {
                auto matched = finish::color_match(out, style_item->item.data, run_.corpus.grid);
                post = {{"matched", matched.matched}, {"message", matched.message}};
                out = std::move(matched.item);
            }

            const auto blended_content = sampler::blend(ir.content_refs);
            auto blended_style = sampler::blend(ir.style_refs);
            if (!blended_style) blended_style = embedding(anchor->item, sampler::Modality::style);
            const Matrix out_row = row_of(out);
            json metrics;
            metrics["style_mse"] = finish::mean_squared_difference(*blended_style, to_std(run_.pipeline.style_of(out_row)));
            metrics["content_mse"] =
                blended_content
                    ? json(finish::mean_squared_difference(*blended_content, to_std(run_.pipeline.content_of(out_row))))
                    : json(nullptr);
            const auto& reference = style_item ? style_item->item.data : anchor->item.data;
            metrics["chamfer"] = finish::chamfer(out, reference, run_.corpus.grid.channels);

            json echo{{"content_refs", refs_echo(content_refs)},
                      {"style_refs", refs_echo(style_refs)},
                      {"lambda", lambda},
                      {"g_s", g.g_s},
                      {"g_y", g.g_y},
                      {"seed", seed},
                      {"postprocess", postprocess}};

            std::lock_guard lock(mutex_);
            const std::string id = "g" + std::to_string(sessions_.size() + 1);
            json record{{"item_id", id},
                        {"session_id", id},
                        {"request", echo},
                        {"anchor_id", anchor ? json(anchor->item.id) : json(nullptr)},
                        {"metrics", metrics},
                        {"postprocess", post},
                        {"data", out},
                        {"png", io::base64_encode(png_of(out))}};
            sessions_.push_back({out, record});
            return ok(record);
        });
    }

    HttpResponse session(const std::string& id) const {
        return guarded([&] {
            std::lock_guard lock(mutex_);
            return ok(sessions_.at(session_index(id)).record);
        });
    }

    void bind(httplib::Server& server) {
        auto reply = [](httplib::Response& res, const HttpResponse& r) {
            res.status = r.status;
            res.set_content(r.body, r.content_type);
        };
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                    {"Access-Control-Allow-Headers", "Content-Type"},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server.Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
        server.Get(R"(/item/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, item(req.matches[1]));
        });
        server.Post("/search", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, search(req.body));
        });
        server.Post("/generate", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, generate(req.body));
        });
        server.Get(R"(/session/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, session(req.matches[1]));
        });
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) res.set_content(json{{"error", "no such endpoint"}}.dump(), "application/json");
        });
    }

private:
    struct Resolved {
        std::string id;
        std::vector<double> data;
        bool session = false;
        std::size_t index = 0;  // corpus row or session slot
    };

    struct Ref {
        Resolved item;
        sampler::WeightedRef ref;
    };

    struct SessionItem {
        std::vector<double> data;
        json record;
    };

    static HttpResponse ok(const json& j) { return {200, j.dump()}; }
    static HttpResponse fail(int status, const std::string& message) { return {status, json{{"error", message}}.dump()}; }

    template <typename F>
    static HttpResponse guarded(F&& f) {
        try {
            return f();
        } catch (const NotFound& e) {
            return fail(404, e.what());
        } catch (const InvalidArgument& e) {
            return fail(400, e.what());
        } catch (const json::exception& e) {
            return fail(400, std::string("malformed request: ") + e.what());
        } catch (const std::exception& e) {
            return fail(500, e.what());
        }
    }

    static json parse_object(const std::string& body) {
        json j = json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw InvalidArgument("request body must be a JSON object");
        return j;
    }

    static const json& field(const json& j, const char* name) {
        if (!j.contains(name)) throw InvalidArgument(std::string("missing field '") + name + "'");
        return j.at(name);
    }

    static long integer(const json& v, const char* name) {
        if (!v.is_number_integer()) throw InvalidArgument(std::string(name) + " must be an integer");
        return v.get<long>();
    }

    static double number(const json& v, const char* name) {
        if (!v.is_number() || !std::isfinite(v.get<double>()))
            throw InvalidArgument(std::string(name) + " must be a finite number");
        return v.get<double>();
    }

    static std::string id_string(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long>() >= 0)) return std::to_string(v.get<long>());
        throw InvalidArgument("item ids are non-negative integers or strings");
    }

    static sampler::Modality modality_of(const json& v) {
        if (v == "content") return sampler::Modality::content;
        if (v == "style") return sampler::Modality::style;
        throw InvalidArgument("modality must be 'content' or 'style'");
    }

    static const char* modality_name(sampler::Modality m) { return m == sampler::Modality::content ? "content" : "style"; }

    std::size_t session_index(const std::string& id) const {
        if (id.size() < 2 || id[0] != 'g' || !std::all_of(id.begin() + 1, id.end(), ::isdigit))
            throw NotFound("unknown session id: " + id);
        const std::size_t n = std::stoul(id.substr(1));
        if (n == 0 || n > sessions_.size()) throw NotFound("unknown session id: " + id);
        return n - 1;
    }

    Resolved resolve(const std::string& id) const {
        if (id.empty()) throw NotFound("empty item id");
        if (id[0] == 'g') {
            std::lock_guard lock(mutex_);
            const std::size_t slot = session_index(id);
            return {id, sessions_[slot].data, true, slot};
        }
        if (!std::all_of(id.begin(), id.end(), ::isdigit) || id.size() > 18) throw NotFound("unknown item id: " + id);
        const std::size_t row = std::stoul(id);
        if (row >= run_.corpus.size()) throw NotFound("unknown item id: " + id);
        const auto it = run_.corpus.item(row);
        return {std::to_string(row), it.data, false, row};
    }

    std::vector<double> embedding(const Resolved& r, sampler::Modality m) const {
        if (!r.session) {
            const Matrix& table = m == sampler::Modality::content ? content_ : style_;
            return to_std(table.row(static_cast<Eigen::Index>(r.index)));
        }
        const Matrix row = row_of(r.data);
        return to_std(m == sampler::Modality::content ? run_.pipeline.content_of(row) : run_.pipeline.style_of(row));
    }

    /// Session items order after all corpus items when blending.
    std::uint64_t order_key(const Resolved& r) const {
        return r.session ? run_.corpus.size() + r.index : r.index;
    }

    std::vector<Ref> refs_of(const json& req, const char* name, sampler::Modality m) const {
        std::vector<Ref> out;
        if (!req.contains(name)) return out;
        const json& list = req.at(name);
        if (!list.is_array()) throw InvalidArgument(std::string(name) + " must be an array");
        for (const auto& entry : list) {
            if (!entry.is_object()) throw InvalidArgument(std::string(name) + " entries must be objects {id, weight}");
            Ref r;
            r.item = resolve(id_string(field(entry, "id")));
            const double w = entry.contains("weight") ? number(entry.at("weight"), "weight") : 1.0;
            if (w < 0) throw InvalidArgument("weights must be non-negative");
            r.ref = {order_key(r.item), embedding(r.item, m), w};
            out.push_back(std::move(r));
        }
        return out;
    }

    static const Ref* top(const std::vector<Ref>& refs) {
        const Ref* best = nullptr;
        for (const auto& r : refs)
            if (!best || r.ref.weight > best->ref.weight || (r.ref.weight == best->ref.weight && r.ref.id < best->ref.id))
                best = &r;
        return best;
    }

    static json refs_echo(const std::vector<Ref>& refs) {
        json out = json::array();
        for (const auto& r : refs) out.push_back({{"id", r.item.id}, {"weight", r.ref.weight}});
        return out;
    }

    std::string png_of(const std::vector<double>& data) const {
        const auto& g = run_.corpus.grid;
        return io::encode_png(data, g.height, g.width, g.channels);
    }

    LoadedRun run_;
    Matrix content_;
    Matrix style_;
    mine::VectorIndex content_index_;
    mine::VectorIndex style_index_;
    mutable std::mutex mutex_;
    std::vector<SessionItem> sessions_;
};

}  // namespace parasol::ctl
