#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace parasol {

/// Row-major dense matrix used for every batch-of-rows tensor in the project.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Base of all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad arguments or inconsistent inputs supplied by the caller.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A numerical procedure could not produce a result (singular system, NaN loss, ...).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Artifacts on disk do not match each other (hash mismatch, bad manifest).
class ArtifactError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, std::string_view what) {
    if (!cond) throw InvalidArgument(std::string(what));
}

// splitmix64 finalizer; used to derive independent seed streams.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ index);
}

using Rng = std::mt19937_64;

inline Matrix standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

/// 64-bit FNV-1a, incremental.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return state_; }
    std::string hex() const {
        static constexpr char digits[] = "0123456789abcdef";
        std::string out(16, '0');
        auto v = state_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_matrix(const Matrix& m) {
    Fnv1a h;
    std::int64_t shape[2] = {m.rows(), m.cols()};
    h.update(shape, sizeof shape);
    h.update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return h.hex();
}

/// C = A * B with a fixed accumulation order per output row, so a row's result
/// does not depend on how many other rows are in the batch.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw InvalidArgument("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()));
    const Eigen::Index n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c = Matrix::Zero(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        double* crow = c.data() + i * m;
        const double* arow = a.data() + i * k;
        for (Eigen::Index p = 0; p < k; ++p) {
            const double s = arow[p];
            if (s == 0.0) continue;
            const double* brow = b.data() + p * m;
            for (Eigen::Index j = 0; j < m; ++j) crow[j] += s * brow[j];
        }
    }
    return c;
}

/// A * B^T, same ordering guarantee as matmul().
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix bt = b.transpose();
    return matmul(a, bt);
}

inline Matrix row_of(const std::vector<double>& v) {
    Matrix m(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
    return m;
}

inline std::vector<double> to_std(const Matrix& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

}  // namespace parasol
