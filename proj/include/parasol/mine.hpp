#pragma once

// Cross-modal triplet mining. For each target x the style exemplar s is the
// most style-similar style-database item whose content similarity to x stays
// under a ceiling, and the content exemplar y is the most content-similar
// semantics-database item whose style similarity to x stays under a ceiling.

#include "parasol/embed.hpp"

#include <algorithm>
#include <optional>
#include <unordered_set>

namespace parasol::mine {

using ItemId = std::size_t;

struct Neighbor {
    ItemId id = 0;
    double similarity = 0.0;
    bool operator==(const Neighbor&) const = default;
};

struct KnnResult {
    std::vector<Neighbor> neighbors;
    bool truncated = false;  // fewer than k vectors were indexed
};

/// Descending similarity, ties by ascending id.
inline bool ranks_before(const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
}

/// Exact cosine index over a fixed set of vectors.
class VectorIndex {
public:
    VectorIndex() = default;

    VectorIndex(const Matrix& vectors, std::vector<ItemId> ids) : ids_(std::move(ids)) {
        if (static_cast<Eigen::Index>(ids_.size()) != vectors.rows())
            throw InvalidArgument("build_index: id count does not match vector count");
        std::unordered_set<ItemId> seen;
        for (ItemId id : ids_)
            if (!seen.insert(id).second) throw InvalidArgument("build_index: duplicate id " + std::to_string(id));
        if (!vectors.allFinite()) throw InvalidArgument("build_index: non-finite vector");
        dim_ = static_cast<int>(vectors.cols());
        unit_.resize(vectors.rows(), vectors.cols());
        for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
            const auto u = embed::normalized(std::span<const double>(vectors.row(i).data(), vectors.cols()));
            std::copy(u.begin(), u.end(), unit_.row(i).data());
        }
    }

    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    int dim() const { return dim_; }
    const std::vector<ItemId>& ids() const { return ids_; }

    KnnResult knn(std::span<const double> query, std::size_t k) const {
        if (k < 1) throw InvalidArgument("knn: k must be >= 1");
        KnnResult result;
        if (empty()) {
            result.truncated = true;
            return result;
        }
        if (static_cast<int>(query.size()) != dim_) throw InvalidArgument("knn: query dimension mismatch");
        const auto q = embed::normalized(query);
        std::vector<Neighbor> all(ids_.size());
        for (std::size_t i = 0; i < ids_.size(); ++i)
            all[i] = {ids_[i], embed::dot(q, std::span<const double>(unit_.row(static_cast<Eigen::Index>(i)).data(),
                                                                      static_cast<std::size_t>(dim_)))};
        const std::size_t keep = std::min(k, all.size());
        result.truncated = keep < k;
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), ranks_before);
        all.resize(keep);
        result.neighbors = std::move(all);
        return result;
    }

private:
    std::vector<ItemId> ids_;
    Matrix unit_;
    int dim_ = 0;
};

inline VectorIndex build_index(const Matrix& vectors, std::vector<ItemId> ids) {
    return VectorIndex(vectors, std::move(ids));
}

enum class ThresholdMode { absolute, quantile };

struct MineParams {
    std::size_t k = 50;
    ThresholdMode threshold_mode = ThresholdMode::quantile;
    double quantile = 0.9;
    // ceilings used in absolute mode
    double tau_content = 0.9;  // max content similarity between x and a style candidate
    double tau_style = 0.9;    // max style similarity between x and a content candidate
};

struct Thresholds {
    double tau_content = 0.0;
    double tau_style = 0.0;
};

struct Triplet {
    ItemId x_id = 0;
    ItemId y_id = 0;
    ItemId s_id = 0;
    double style_sim = 0.0;      // style similarity of s to x
    double content_sim = 0.0;    // content similarity of y to x
    double s_content_sim = 0.0;  // filter value checked against tau_content
    double y_style_sim = 0.0;    // filter value checked against tau_style
    bool operator==(const Triplet&) const = default;
};

/// Every candidate among the top k was filtered out.
class NoCandidate : public Error {
public:
    NoCandidate(std::string modality, ItemId x) : Error("no " + modality + " candidate survives the filter for item " +
                                                        std::to_string(x)), modality_(std::move(modality)) {}
    const std::string& modality() const { return modality_; }

private:
    std::string modality_;
};

/// Embeddings of every corpus item plus the two pool indices.
struct MiningContext {
    Matrix content;  // N x 8, row = item id
    Matrix style;    // N x 6
    VectorIndex style_index;    // over the style database, style embeddings
    VectorIndex content_index;  // over the semantics database, content embeddings
    Thresholds thresholds;

    std::span<const double> content_of(ItemId id) const {
        return {content.row(static_cast<Eigen::Index>(id)).data(), static_cast<std::size_t>(content.cols())};
    }
    std::span<const double> style_of(ItemId id) const {
        return {style.row(static_cast<Eigen::Index>(id)).data(), static_cast<std::size_t>(style.cols())};
    }
};

inline Matrix gather_rows(const Matrix& m, const std::vector<ItemId>& ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), m.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(ids[i]));
    return out;
}

/// Nearest-rank q-quantile.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw InvalidArgument("quantile of an empty set");
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
    return values[rank - 1];
}

inline std::vector<double> cross_similarities(const Matrix& emb, const std::vector<ItemId>& a, const std::vector<ItemId>& b) {
    auto unit_rows = [&emb](const std::vector<ItemId>& ids) {
        std::vector<std::vector<double>> out;
        out.reserve(ids.size());
        for (ItemId id : ids)
            out.push_back(embed::normalized({emb.row(static_cast<Eigen::Index>(id)).data(), static_cast<std::size_t>(emb.cols())}));
        return out;
    };
    const auto ua = unit_rows(a), ub = unit_rows(b);
    std::vector<double> sims;
    sims.reserve(a.size() * b.size());
    for (const auto& u : ua)
        for (const auto& v : ub) sims.push_back(embed::dot(u, v));
    return sims;
}

inline MiningContext make_context(const corpus::CorpusBundle& corpus, const embed::Encoders& enc, const MineParams& params) {
    if (params.k < 1) throw InvalidArgument("mine: k must be >= 1");
    MiningContext ctx;
    ctx.content = enc.content.apply(corpus.items);
    ctx.style = enc.style.apply(corpus.items);
    const auto style_db = corpus.ids_with_role(corpus::Role::style_db);
    const auto semantics_db = corpus.ids_with_role(corpus::Role::semantics_db);
    ctx.style_index = build_index(gather_rows(ctx.style, style_db), style_db);
    ctx.content_index = build_index(gather_rows(ctx.content, semantics_db), semantics_db);
    if (params.threshold_mode == ThresholdMode::absolute) {
        if (params.tau_content < -1 || params.tau_content > 1 || params.tau_style < -1 || params.tau_style > 1)
            throw InvalidArgument("mine: absolute thresholds must lie in [-1, 1]");
        ctx.thresholds = {params.tau_content, params.tau_style};
    } else {
        const auto targets = corpus.ids_with_role(corpus::Role::target);
        if (targets.empty() || style_db.empty() || semantics_db.empty())
            throw InvalidArgument("mine: quantile thresholds need all three pools populated");
        ctx.thresholds.tau_content = quantile(cross_similarities(ctx.content, targets, style_db), params.quantile);
        ctx.thresholds.tau_style = quantile(cross_similarities(ctx.style, targets, semantics_db), params.quantile);
    }
    return ctx;
}

inline Triplet mine_triplet(ItemId x_id, const MiningContext& ctx, std::size_t k) {
    if (ctx.style_index.empty() || ctx.content_index.empty()) throw InvalidArgument("mine_triplet: empty index");
    Triplet t;
    t.x_id = x_id;
    bool found_s = false;
    for (const auto& cand : ctx.style_index.knn(ctx.style_of(x_id), k).neighbors) {
        const double cross = embed::similarity(ctx.content_of(cand.id), ctx.content_of(x_id));
        if (cross <= ctx.thresholds.tau_content) {
            t.s_id = cand.id;
            t.style_sim = cand.similarity;
            t.s_content_sim = cross;
            found_s = true;
            break;
        }
    }
    if (!found_s) throw NoCandidate("style", x_id);
    bool found_y = false;
    for (const auto& cand : ctx.content_index.knn(ctx.content_of(x_id), k).neighbors) {
        const double cross = embed::similarity(ctx.style_of(cand.id), ctx.style_of(x_id));
        if (cross <= ctx.thresholds.tau_style) {
            t.y_id = cand.id;
            t.content_sim = cand.similarity;
            t.y_style_sim = cross;
            found_y = true;
            break;
        }
    }
    if (!found_y) throw NoCandidate("content", x_id);
    return t;
}

struct Histogram {
    double lo = -1.0;
    double hi = 1.0;
    std::vector<long> counts = std::vector<long>(20, 0);

    void add(double v) {
        const double f = (v - lo) / (hi - lo);
        auto bin = static_cast<long>(std::floor(f * static_cast<double>(counts.size())));
        bin = std::clamp<long>(bin, 0, static_cast<long>(counts.size()) - 1);
        ++counts[static_cast<std::size_t>(bin)];
    }
};

struct MineStats {
    std::size_t attempted = 0;
    std::size_t succeeded = 0;
    std::size_t no_style_candidate = 0;
    std::size_t no_content_candidate = 0;
    Thresholds thresholds;
    Histogram style_sim;
    Histogram content_sim;

    double success_rate() const {
        return attempted == 0 ? 0.0 : static_cast<double>(succeeded) / static_cast<double>(attempted);
    }
};

struct TripletSet {
    std::vector<Triplet> triplets;
    MineStats stats;
    MineParams params;
    std::string corpus_hash;
};

inline TripletSet mine_dataset(const corpus::CorpusBundle& corpus, const embed::Encoders& enc, const MineParams& params) {
    const auto ctx = make_context(corpus, enc, params);
    TripletSet set;
    set.params = params;
    set.corpus_hash = corpus::corpus_hash(corpus);
    set.stats.thresholds = ctx.thresholds;
    for (ItemId x : corpus.ids_with_role(corpus::Role::target)) {
        ++set.stats.attempted;
        try {
            const Triplet t = mine_triplet(x, ctx, params.k);
            set.stats.style_sim.add(t.style_sim);
            set.stats.content_sim.add(t.content_sim);
            set.triplets.push_back(t);
            ++set.stats.succeeded;
        } catch (const NoCandidate& e) {
            if (e.modality() == "style")
                ++set.stats.no_style_candidate;
            else
                ++set.stats.no_content_candidate;
        }
    }
    return set;
}

inline io::json to_json(const TripletSet& set) {
    io::json j;
    j["format"] = "parasol-triplets";
    j["corpus_hash"] = set.corpus_hash;
    j["params"] = {{"k", set.params.k},
                   {"threshold_mode", set.params.threshold_mode == ThresholdMode::absolute ? "absolute" : "quantile"},
                   {"quantile", set.params.quantile},
                   {"tau_content", set.stats.thresholds.tau_content},
                   {"tau_style", set.stats.thresholds.tau_style}};
    j["stats"] = {{"attempted", set.stats.attempted},
                  {"succeeded", set.stats.succeeded},
                  {"success_rate", set.stats.success_rate()},
                  {"no_style_candidate", set.stats.no_style_candidate},
                  {"no_content_candidate", set.stats.no_content_candidate},
                  {"style_sim_histogram", set.stats.style_sim.counts},
                  {"content_sim_histogram", set.stats.content_sim.counts}};
    io::json arr = io::json::array();
    for (const auto& t : set.triplets)
        arr.push_back({{"x_id", t.x_id},
                       {"y_id", t.y_id},
                       {"s_id", t.s_id},
                       {"style_sim", t.style_sim},
                       {"content_sim", t.content_sim},
                       {"s_content_sim", t.s_content_sim},
                       {"y_style_sim", t.y_style_sim}});
    j["triplets"] = arr;
    return j;
}

inline TripletSet triplets_from_json(const io::json& j) {
    if (j.value("format", "") != "parasol-triplets") throw ArtifactError("not a triplet file");
    TripletSet set;
    set.corpus_hash = j.at("corpus_hash").get<std::string>();
    const auto& p = j.at("params");
    set.params.k = p.at("k").get<std::size_t>();
    set.params.threshold_mode = p.at("threshold_mode") == "absolute" ? ThresholdMode::absolute : ThresholdMode::quantile;
    set.params.quantile = p.at("quantile").get<double>();
    set.stats.thresholds = {p.at("tau_content").get<double>(), p.at("tau_style").get<double>()};
    const auto& s = j.at("stats");
    set.stats.attempted = s.at("attempted").get<std::size_t>();
    set.stats.succeeded = s.at("succeeded").get<std::size_t>();
    set.stats.no_style_candidate = s.at("no_style_candidate").get<std::size_t>();
    set.stats.no_content_candidate = s.at("no_content_candidate").get<std::size_t>();
    set.stats.style_sim.counts = s.at("style_sim_histogram").get<std::vector<long>>();
    set.stats.content_sim.counts = s.at("content_sim_histogram").get<std::vector<long>>();
    for (const auto& t : j.at("triplets"))
        set.triplets.push_back({t.at("x_id").get<ItemId>(), t.at("y_id").get<ItemId>(), t.at("s_id").get<ItemId>(),
                                t.at("style_sim").get<double>(), t.at("content_sim").get<double>(),
                                t.at("s_content_sim").get<double>(), t.at("y_style_sim").get<double>()});
    return set;
}

}  // namespace parasol::mine
