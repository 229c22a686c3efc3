#pragma once

// Frozen encoders fitted once on a corpus: a PCA autoencoder for the diffusion
// latent space, plus affine content and style encoders regressed onto the
// ground-truth factors. All maps are affine, so their Jacobians are the stored
// matrices.

#include "parasol/corpus.hpp"

#include <iostream>

namespace parasol::embed {

struct Autoencoder {
    Matrix mean;   // 1 x D
    Matrix basis;  // D x d, orthonormal columns
    int rank = 0;  // numerical rank of the centred fitting data

    int latent_dim() const { return static_cast<int>(basis.cols()); }
    int data_dim() const { return static_cast<int>(basis.rows()); }

    /// Rows of x are items; returns rows of latents.
    Matrix encode(const Matrix& x) const {
        if (x.cols() != data_dim()) throw InvalidArgument("encode: item dimension mismatch");
        Matrix centred = x.rowwise() - mean.row(0);
        return matmul(centred, basis);
    }
    Matrix decode(const Matrix& z) const {
        if (z.cols() != latent_dim()) throw InvalidArgument("decode: latent dimension mismatch");
        Matrix out = matmul_nt(z, basis);
        out.rowwise() += mean.row(0);
        return out;
    }
};

/// y = W x + b, applied to rows.
struct AffineEncoder {
    Matrix weight;  // out x D
    Matrix bias;    // 1 x out

    int out_dim() const { return static_cast<int>(weight.rows()); }
    int in_dim() const { return static_cast<int>(weight.cols()); }

    Matrix apply(const Matrix& x) const {
        if (x.cols() != in_dim()) throw InvalidArgument("encoder: item dimension mismatch");
        Matrix y = matmul_nt(x, weight);
        y.rowwise() += bias.row(0);
        return y;
    }
    std::vector<double> apply(std::span<const double> item) const {
        Matrix x(1, static_cast<Eigen::Index>(item.size()));
        std::copy(item.begin(), item.end(), x.data());
        return to_std(apply(x));
    }
};

using ContentEncoder = AffineEncoder;
using StyleEncoder = AffineEncoder;

inline Autoencoder fit_autoencoder(const Matrix& items, int d) {
    const auto n = items.rows();
    const auto dim = items.cols();
    if (d < 1 || d > dim)
        throw InvalidArgument("fit_autoencoder: latent dimension " + std::to_string(d) + " exceeds item dimension " +
                              std::to_string(dim));
    if (n < d) throw InvalidArgument("fit_autoencoder: corpus has fewer items than latent dimensions");
    Autoencoder ae;
    ae.mean = items.colwise().mean();
    const Matrix centred = items.rowwise() - ae.mean.row(0);
    const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericalError("fit_autoencoder: eigendecomposition failed");
    const auto& values = solver.eigenvalues();  // ascending
    const double top = std::max(values(dim - 1), 0.0);
    ae.rank = 0;
    for (Eigen::Index i = 0; i < dim; ++i)
        if (values(i) > 1e-12 * top && values(i) > 0.0) ++ae.rank;
    ae.basis.resize(dim, d);
    for (int k = 0; k < d; ++k) {
        Eigen::VectorXd col = solver.eigenvectors().col(dim - 1 - k);
        Eigen::Index arg = 0;
        col.cwiseAbs().maxCoeff(&arg);
        if (col(arg) < 0) col = -col;
        ae.basis.col(k) = col;
    }
    if (ae.rank < d)
        std::cerr << "fit_autoencoder: centred corpus rank " << ae.rank << " is below latent dimension " << d
                  << "; trailing directions carry no variance\n";
    return ae;
}

inline Autoencoder fit_autoencoder(const corpus::CorpusBundle& corpus, int d) { return fit_autoencoder(corpus.items, d); }

/// Ridge regression of targets (rows) on items (rows) with an intercept.
inline AffineEncoder fit_ridge(const Matrix& items, const Matrix& targets, double ridge = 1e-6) {
    if (items.rows() != targets.rows()) throw InvalidArgument("fit_ridge: row counts differ");
    const Eigen::RowVectorXd x_mean = items.colwise().mean();
    const Eigen::RowVectorXd y_mean = targets.colwise().mean();
    const Eigen::MatrixXd xc = items.rowwise() - x_mean;
    const Eigen::MatrixXd yc = targets.rowwise() - y_mean;
    const Eigen::MatrixXd gram = xc.transpose() * xc;
    const Eigen::MatrixXd rhs = xc.transpose() * yc;
    for (int attempt = 0; attempt < 12; ++attempt, ridge *= 10.0) {
        Eigen::MatrixXd reg = gram;
        reg.diagonal().array() += ridge;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(reg);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
            const Eigen::MatrixXd w = ldlt.solve(rhs);  // D x out
            if (w.allFinite()) {
                AffineEncoder enc;
                enc.weight = w.transpose();
                enc.bias = y_mean - x_mean * w;
                return enc;
            }
        }
        std::cerr << "fit_ridge: normal equations singular at ridge " << ridge << ", increasing\n";
    }
    throw NumericalError("fit_ridge: could not solve the normal equations");
}

struct Encoders {
    ContentEncoder content;
    StyleEncoder style;
};

inline Encoders fit_encoders(const corpus::CorpusBundle& corpus, double ridge = 1e-6) {
    const auto n = static_cast<Eigen::Index>(corpus.size());
    Matrix gamma(n, corpus::kContentDim), sigma(n, corpus::kStyleDim);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto g = corpus.factors[static_cast<std::size_t>(i)].content.encode();
        const auto s = corpus.factors[static_cast<std::size_t>(i)].style.encode();
        for (int j = 0; j < corpus::kContentDim; ++j) gamma(i, j) = g[static_cast<std::size_t>(j)];
        for (int j = 0; j < corpus::kStyleDim; ++j) sigma(i, j) = s[static_cast<std::size_t>(j)];
    }
    return Encoders{fit_ridge(corpus.items, gamma, ridge), fit_ridge(corpus.items, sigma, ridge)};
}

inline std::vector<double> embed_content(const ContentEncoder& c, std::span<const double> item) { return c.apply(item); }
inline std::vector<double> embed_style(const StyleEncoder& a, std::span<const double> item) { return a.apply(item); }

enum class Metric { cosine, neg_mse };

inline std::vector<double> normalized(std::span<const double> v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) throw InvalidArgument("cosine similarity of a zero-norm vector");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= norm;
    return out;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

/// Cosine is evaluated as the dot product of the two normalized vectors; the
/// search index uses the same arithmetic so scores agree bit for bit.
inline double similarity(std::span<const double> u, std::span<const double> v, Metric metric = Metric::cosine) {
    if (u.size() != v.size()) throw InvalidArgument("similarity: length mismatch");
    if (metric == Metric::cosine) return dot(normalized(u), normalized(v));
    if (u.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] - v[i]) * (u[i] - v[i]);
    return -acc / static_cast<double>(u.size());
}

/// Everything fitted and frozen before training.
struct EncoderBundle {
    Autoencoder autoencoder;
    Encoders encoders;
    std::string corpus_hash;

    std::string params_hash() const {
        Fnv1a h;
        for (const Matrix* m : {&autoencoder.mean, &autoencoder.basis, &encoders.content.weight,
                                &encoders.content.bias, &encoders.style.weight, &encoders.style.bias})
            h.update(hash_matrix(*m));
        return h.hex();
    }
};

inline EncoderBundle fit_all(const corpus::CorpusBundle& corpus, int latent_dim) {
    return EncoderBundle{fit_autoencoder(corpus, latent_dim), fit_encoders(corpus), corpus::corpus_hash(corpus)};
}

// encoders.json + encoders.f64 (little-endian doubles, arrays in manifest order)
inline void save_encoders(const EncoderBundle& b, const io::fs::path& dir, const io::json& extra = io::json::object()) {
    const std::vector<std::pair<std::string, const Matrix*>> arrays{
        {"autoencoder.mean", &b.autoencoder.mean},   {"autoencoder.basis", &b.autoencoder.basis},
        {"content.weight", &b.encoders.content.weight}, {"content.bias", &b.encoders.content.bias},
        {"style.weight", &b.encoders.style.weight},     {"style.bias", &b.encoders.style.bias}};
    io::json m;
    m["format"] = "parasol-encoders";
    m["version"] = 1;
    m["latent_dim"] = b.autoencoder.latent_dim();
    m["data_dim"] = b.autoencoder.data_dim();
    m["rank"] = b.autoencoder.rank;
    m["corpus_hash"] = b.corpus_hash;
    m["params_hash"] = b.params_hash();
    std::vector<double> flat;
    for (const auto& [name, mat] : arrays) {
        m["arrays"].push_back({{"name", name}, {"shape", {mat->rows(), mat->cols()}}});
        flat.insert(flat.end(), mat->data(), mat->data() + mat->size());
    }
    m.update(extra);
    io::write_json(dir / "encoders.json", m);
    io::write_bytes(dir / "encoders.f64", io::pack<double>(flat));
}

inline EncoderBundle load_encoders(const io::fs::path& dir) {
    const auto m = io::read_json(dir / "encoders.json");
    if (m.value("format", "") != "parasol-encoders") throw ArtifactError("not an encoder manifest: " + dir.string());
    io::ArrayCursor cursor(io::unpack<double>(io::read_bytes(dir / "encoders.f64")));
    EncoderBundle b;
    std::vector<Matrix*> slots{&b.autoencoder.mean,   &b.autoencoder.basis, &b.encoders.content.weight,
                               &b.encoders.content.bias, &b.encoders.style.weight, &b.encoders.style.bias};
    const auto& arrays = m.at("arrays");
    if (arrays.size() != slots.size()) throw ArtifactError("encoder manifest lists an unexpected array count");
    for (std::size_t i = 0; i < slots.size(); ++i)
        *slots[i] = cursor.take(arrays[i]["shape"][0].get<Eigen::Index>(), arrays[i]["shape"][1].get<Eigen::Index>());
    if (!cursor.exhausted()) throw ArtifactError("encoders.f64 is longer than its manifest declares");
    b.autoencoder.rank = m.at("rank").get<int>();
    b.corpus_hash = m.at("corpus_hash").get<std::string>();
    if (b.params_hash() != m.at("params_hash").get<std::string>())
        throw ArtifactError("encoder parameters do not match their recorded hash");
    return b;
}

}  // namespace parasol::embed
