#pragma once

// Minimal reverse-mode differentiation over row-batched matrices, a named
// parameter store with Adam, and a finite-difference gradient checker.

#include "parasol/io.hpp"

#include <functional>
#include <map>
#include <memory>
#include <numeric>

namespace parasol::diffnet {

enum class Init { zeros, ones, fan_in_normal, unit_normal };

struct Tensor {
    Matrix value;
    Matrix adam_m;
    Matrix adam_v;
};

using Gradients = std::map<std::string, Matrix>;

class ParamStore {
public:
    /// Weights are (out x in); fan-in is the column count.
    Matrix& create(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng) {
        if (tensors_.contains(name)) throw InvalidArgument("parameter already exists: " + name);
        Tensor t;
        switch (init) {
            case Init::zeros: t.value = Matrix::Zero(rows, cols); break;
            case Init::ones: t.value = Matrix::Ones(rows, cols); break;
            case Init::fan_in_normal:
                t.value = standard_normal(rng, rows, cols) / std::sqrt(static_cast<double>(cols));
                break;
            case Init::unit_normal: t.value = standard_normal(rng, rows, cols); break;
        }
        t.adam_m = Matrix::Zero(rows, cols);
        t.adam_v = Matrix::Zero(rows, cols);
        return tensors_.emplace(name, std::move(t)).first->second.value;
    }

    bool contains(const std::string& name) const { return tensors_.contains(name); }
    const Matrix& value(const std::string& name) const { return tensor(name).value; }
    Matrix& value(const std::string& name) { return tensor(name).value; }
    const Tensor& tensor(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw InvalidArgument("unknown parameter: " + name);
        return it->second;
    }
    Tensor& tensor(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw InvalidArgument("unknown parameter: " + name);
        return it->second;
    }
    const std::map<std::string, Tensor>& tensors() const { return tensors_; }
    std::map<std::string, Tensor>& tensors() { return tensors_; }

    long step() const { return step_; }
    void set_step(long s) { step_ = s; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : tensors_) n += static_cast<std::size_t>(t.value.size());
        return n;
    }

    /// Hash over names, shapes and values (not optimizer state).
    std::string hash() const {
        Fnv1a h;
        for (const auto& [name, t] : tensors_) {
            h.update(name);
            h.update(hash_matrix(t.value));
        }
        return h.hex();
    }

private:
    std::map<std::string, Tensor> tensors_;
    long step_ = 0;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

    /// The parameter's current value enters the tape once; repeated requests share the node.
    Var param(const ParamStore& store, const std::string& name) {
        if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
        Var v = push(store.value(name), true, nullptr);
        param_nodes_.emplace(name, v.id);
        return v;
    }

    Var push(Matrix value, bool needs_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(backward)});
        return {this, nodes_.size() - 1};
    }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

    void accumulate(std::size_t id, const Matrix& g) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse accumulation from a 1x1 loss. Every parameter in `store` receives
    /// an entry; parameters not reached by the loss get zeros.
    Gradients backward(Var loss, const ParamStore& store) {
        if (loss.tape != this) throw InvalidArgument("backward: loss belongs to another tape");
        if (value(loss.id).rows() != 1 || value(loss.id).cols() != 1)
            throw InvalidArgument("backward: loss must be a scalar");
        for (auto& n : nodes_) n.grad.resize(0, 0);
        nodes_[loss.id].grad = Matrix::Ones(1, 1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, i);
        }
        Gradients grads;
        for (const auto& [name, t] : store.tensors()) {
            auto it = param_nodes_.find(name);
            if (it != param_nodes_.end() && nodes_[it->second].grad.size() != 0)
                grads[name] = nodes_[it->second].grad;
            else
                grads[name] = Matrix::Zero(t.value.rows(), t.value.cols());
        }
        return grads;
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> param_nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline void same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw InvalidArgument("operands live on different tapes");
}
inline void same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InvalidArgument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
}

}  // namespace detail

// --- primitives -------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    detail::same_tape(a, b);
    Tape& t = *a.tape;
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    return t.push(parasol::matmul(a.value(), b.value()), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
        if (t.needs_grad(b)) t.accumulate(b, parasol::matmul(Matrix(t.value(a).transpose()), g));
    });
}

/// y = x W^T + b with W (out x in) and b (1 x out).
inline Var affine(Var w, Var b, Var x) {
    detail::same_tape(w, x);
    detail::same_tape(b, x);
    Tape& t = *x.tape;
    const Matrix& wv = w.value();
    if (x.cols() != wv.cols()) throw InvalidArgument("affine: input width does not match weight columns");
    if (b.rows() != 1 || b.cols() != wv.rows()) throw InvalidArgument("affine: bias shape mismatch");
    Matrix y = matmul_nt(x.value(), wv);
    y.rowwise() += b.value().row(0);
    const bool ng = t.needs_grad(w.id) || t.needs_grad(b.id) || t.needs_grad(x.id);
    return t.push(std::move(y), ng, [w = w.id, b = b.id, x = x.id](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(x)) t.accumulate(x, parasol::matmul(g, t.value(w)));
        if (t.needs_grad(w)) t.accumulate(w, parasol::matmul(Matrix(g.transpose()), t.value(x)));
        if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
    });
}

inline Var add(Var a, Var b) {
    detail::same_tape(a, b);
    detail::same_shape(a.value(), b.value(), "add");
    Tape& t = *a.tape;
    return t.push(a.value() + b.value(), t.needs_grad(a.id) || t.needs_grad(b.id),
                  [a = a.id, b = b.id](Tape& t, std::size_t self) {
                      t.accumulate(a, t.grad(self));
                      t.accumulate(b, t.grad(self));
                  });
}

inline Var sub(Var a, Var b) {
    detail::same_tape(a, b);
    detail::same_shape(a.value(), b.value(), "sub");
    Tape& t = *a.tape;
    return t.push(a.value() - b.value(), t.needs_grad(a.id) || t.needs_grad(b.id),
                  [a = a.id, b = b.id](Tape& t, std::size_t self) {
                      t.accumulate(a, t.grad(self));
                      if (t.needs_grad(b)) t.accumulate(b, -t.grad(self));
                  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    detail::same_tape(a, b);
    detail::same_shape(a.value(), b.value(), "mul");
    Tape& t = *a.tape;
    return t.push(a.value().cwiseProduct(b.value()), t.needs_grad(a.id) || t.needs_grad(b.id),
                  [a = a.id, b = b.id](Tape& t, std::size_t self) {
                      const Matrix& g = t.grad(self);
                      if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
                      if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
                  });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    return t.push(a.value() * s, t.needs_grad(a.id),
                  [a = a.id, s](Tape& t, std::size_t self) { t.accumulate(a, t.grad(self) * s); });
}

/// a (n x k) + r (1 x k) broadcast over rows.
inline Var add_row(Var a, Var r) {
    detail::same_tape(a, r);
    if (r.rows() != 1 || r.cols() != a.cols()) throw InvalidArgument("add_row: shape mismatch");
    Tape& t = *a.tape;
    Matrix y = a.value();
    y.rowwise() += r.value().row(0);
    return t.push(std::move(y), t.needs_grad(a.id) || t.needs_grad(r.id),
                  [a = a.id, r = r.id](Tape& t, std::size_t self) {
                      t.accumulate(a, t.grad(self));
                      if (t.needs_grad(r)) t.accumulate(r, t.grad(self).colwise().sum());
                  });
}

/// Repeats a 1 x k row n times.
inline Var broadcast_rows(Var r, Eigen::Index n) {
    if (r.rows() != 1) throw InvalidArgument("broadcast_rows: input must be a single row");
    Tape& t = *r.tape;
    Matrix y = r.value().replicate(n, 1);
    return t.push(std::move(y), t.needs_grad(r.id), [r = r.id](Tape& t, std::size_t self) {
        t.accumulate(r, t.grad(self).colwise().sum());
    });
}

/// c (n x 1) scales each row of a (n x k).
inline Var mul_col(Var c, Var a) {
    detail::same_tape(c, a);
    if (c.cols() != 1 || c.rows() != a.rows()) throw InvalidArgument("mul_col: shape mismatch");
    Tape& t = *a.tape;
    Matrix y = a.value().array().colwise() * c.value().col(0).array();
    return t.push(std::move(y), t.needs_grad(a.id) || t.needs_grad(c.id),
                  [c = c.id, a = a.id](Tape& t, std::size_t self) {
                      const Matrix& g = t.grad(self);
                      if (t.needs_grad(a)) t.accumulate(a, Matrix(g.array().colwise() * t.value(c).col(0).array()));
                      if (t.needs_grad(c)) t.accumulate(c, g.cwiseProduct(t.value(a)).rowwise().sum());
                  });
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Var silu(Var a) {
    Tape& t = *a.tape;
    Matrix y = a.value().unaryExpr([](double x) { return x * sigmoid(x); });
    return t.push(std::move(y), t.needs_grad(a.id), [a = a.id](Tape& t, std::size_t self) {
        Matrix d = t.value(a).unaryExpr([](double x) {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
        t.accumulate(a, t.grad(self).cwiseProduct(d));
    });
}

inline constexpr double kLayerNormEps = 1e-12;

/// Per-row normalisation to zero mean and unit variance, then gain g and bias b (both 1 x k).
inline Var layernorm(Var x, Var g, Var b) {
    detail::same_tape(x, g);
    detail::same_tape(x, b);
    const Matrix& xv = x.value();
    const auto k = xv.cols();
    if (g.rows() != 1 || g.cols() != k || b.rows() != 1 || b.cols() != k)
        throw InvalidArgument("layernorm: gain/bias shape mismatch");
    Matrix xhat(xv.rows(), k);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Matrix y = xhat.array().rowwise() * g.value().row(0).array();
    y.rowwise() += b.value().row(0);
    Tape& t = *x.tape;
    const bool ng = t.needs_grad(x.id) || t.needs_grad(g.id) || t.needs_grad(b.id);
    return t.push(std::move(y), ng,
                  [x = x.id, g = g.id, b = b.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                                    std::size_t self) {
                      const Matrix& gy = t.grad(self);
                      if (t.needs_grad(b)) t.accumulate(b, gy.colwise().sum());
                      if (t.needs_grad(g)) t.accumulate(g, gy.cwiseProduct(xhat).colwise().sum());
                      if (t.needs_grad(x)) {
                          const Matrix gx_hat = gy.array().rowwise() * t.value(g).row(0).array();
                          const double k = static_cast<double>(xhat.cols());
                          Matrix gx(xhat.rows(), xhat.cols());
                          for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                              const double mean_g = gx_hat.row(i).sum() / k;
                              const double mean_gx = gx_hat.row(i).dot(xhat.row(i)) / k;
                              gx.row(i) = inv_std(i) * (gx_hat.row(i).array() - mean_g - xhat.row(i).array() * mean_gx);
                          }
                          t.accumulate(x, gx);
                      }
                  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
    Tape& t = *parts.front().tape;
    const auto n = parts.front().rows();
    Eigen::Index total = 0;
    bool ng = false;
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        if (p.tape != &t || p.rows() != n) throw InvalidArgument("concat_cols: row mismatch");
        total += p.cols();
        ng = ng || t.needs_grad(p.id);
        ids.push_back(p.id);
    }
    Matrix y(n, total);
    Eigen::Index off = 0;
    for (const Var& p : parts) {
        y.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return t.push(std::move(y), ng, [ids](Tape& t, std::size_t self) {
        Eigen::Index off = 0;
        for (std::size_t id : ids) {
            const auto w = t.value(id).cols();
            if (t.needs_grad(id)) t.accumulate(id, t.grad(self).middleCols(off, w));
            off += w;
        }
    });
}

/// Sum over columns of a*b, per row: (n x k) . (n x k) -> n x 1.
inline Var row_dot(Var a, Var b) {
    detail::same_tape(a, b);
    detail::same_shape(a.value(), b.value(), "row_dot");
    Tape& t = *a.tape;
    Matrix y = a.value().cwiseProduct(b.value()).rowwise().sum();
    return t.push(std::move(y), t.needs_grad(a.id) || t.needs_grad(b.id),
                  [a = a.id, b = b.id](Tape& t, std::size_t self) {
                      const Matrix& g = t.grad(self);
                      if (t.needs_grad(a)) t.accumulate(a, Matrix(t.value(b).array().colwise() * g.col(0).array()));
                      if (t.needs_grad(b)) t.accumulate(b, Matrix(t.value(a).array().colwise() * g.col(0).array()));
                  });
}

inline Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    Matrix y(av.rows(), av.cols());
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
        const double m = av.row(i).maxCoeff();
        y.row(i) = (av.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    return t.push(y, t.needs_grad(a.id), [a = a.id](Tape& t, std::size_t self) {
        const Matrix& s = t.value(self);
        const Matrix& g = t.grad(self);
        Matrix gx(s.rows(), s.cols());
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double inner = g.row(i).dot(s.row(i));
            gx.row(i) = s.row(i).array() * (g.row(i).array() - inner);
        }
        t.accumulate(a, gx);
    });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidArgument("slice_cols: out of range");
    Tape& t = *a.tape;
    return t.push(a.value().middleCols(start, count), t.needs_grad(a.id),
                  [a = a.id, start, count](Tape& t, std::size_t self) {
                      Matrix g = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
                      g.middleCols(start, count) = t.grad(self);
                      t.accumulate(a, g);
                  });
}

/// Sum of squared entries, as a 1 x 1 node.
inline Var sum_square(Var a) {
    Tape& t = *a.tape;
    Matrix y(1, 1);
    y(0, 0) = a.value().squaredNorm();
    return t.push(std::move(y), t.needs_grad(a.id), [a = a.id](Tape& t, std::size_t self) {
        t.accumulate(a, t.value(a) * (2.0 * t.grad(self)(0, 0)));
    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    Matrix y(1, 1);
    y(0, 0) = a.value().sum();
    return t.push(std::move(y), t.needs_grad(a.id), [a = a.id](Tape& t, std::size_t self) {
        const Matrix& v = t.value(a);
        t.accumulate(a, Matrix::Constant(v.rows(), v.cols(), t.grad(self)(0, 0)));
    });
}

inline Var mean_square(Var a) {
    return scale(sum_square(a), a.value().size() == 0 ? 0.0 : 1.0 / static_cast<double>(a.value().size()));
}

inline Var mse(Var a, Var b) { return mean_square(sub(a, b)); }

// --- layers -----------------------------------------------------------------

/// Sinusoidal features: [2i] = sin(t / 10000^(2i/dim)), [2i+1] = cos(same).
inline std::vector<double> time_embed(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw InvalidArgument("time_embed: dim must be even and >= 2");
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, 2.0 * i / dim);
        e[static_cast<std::size_t>(2 * i)] = std::sin(t / freq);
        e[static_cast<std::size_t>(2 * i + 1)] = std::cos(t / freq);
    }
    return e;
}

inline Matrix time_embed_rows(std::span<const int> ts, int dim) {
    Matrix m(static_cast<Eigen::Index>(ts.size()), dim);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const auto e = time_embed(ts[i], dim);
        std::copy(e.begin(), e.end(), m.row(static_cast<Eigen::Index>(i)).data());
    }
    return m;
}

inline Var affine_layer(Tape& t, const ParamStore& store, const std::string& prefix, Var x) {
    return affine(t.param(store, prefix + ".w"), t.param(store, prefix + ".b"), x);
}

inline void create_affine(ParamStore& store, const std::string& prefix, Eigen::Index in, Eigen::Index out, Rng& rng) {
    store.create(prefix + ".w", out, in, Init::fan_in_normal, rng);
    store.create(prefix + ".b", 1, out, Init::zeros, rng);
}

struct AttentionShape {
    Eigen::Index hidden = 0;
    Eigen::Index token = 0;
    Eigen::Index key = 0;
    Eigen::Index value = 0;
};

inline void create_cross_attention(ParamStore& store, const std::string& prefix, const AttentionShape& s, Rng& rng) {
    store.create(prefix + ".wq", s.key, s.hidden, Init::fan_in_normal, rng);
    store.create(prefix + ".wk", s.key, s.token, Init::fan_in_normal, rng);
    store.create(prefix + ".wv", s.value, s.token, Init::fan_in_normal, rng);
    store.create(prefix + ".wo", s.hidden, s.value, Init::fan_in_normal, rng);
}

/// Each row of h attends over its own tokens (tokens[j] holds token j for every row):
///   q = Wq h, k_j = Wk tok_j, v_j = Wv tok_j, a = softmax_j(q.k_j / sqrt(d_k)),
///   out = h + Wo sum_j a_j v_j
inline Var cross_attention(Tape& t, const ParamStore& store, const std::string& prefix, Var h,
                           const std::vector<Var>& tokens) {
    if (tokens.empty()) throw InvalidArgument("cross_attention: needs at least one token");
    const Var wq = t.param(store, prefix + ".wq");
    const Var wk = t.param(store, prefix + ".wk");
    const Var wv = t.param(store, prefix + ".wv");
    const Var wo = t.param(store, prefix + ".wo");
    const Var q = affine(wq, t.constant(Matrix::Zero(1, wq.rows())), h);
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(wq.rows()));
    std::vector<Var> scores, values;
    const Matrix zero_bias_k = Matrix::Zero(1, wk.rows());
    const Matrix zero_bias_v = Matrix::Zero(1, wv.rows());
    for (const Var& tok : tokens) {
        const Var k = affine(wk, t.constant(zero_bias_k), tok);
        scores.push_back(scale(row_dot(q, k), inv_sqrt_dk));
        values.push_back(affine(wv, t.constant(zero_bias_v), tok));
    }
    const Var attn = softmax_rows(concat_cols(scores));
    Var mixed = mul_col(slice_cols(attn, 0, 1), values[0]);
    for (std::size_t j = 1; j < values.size(); ++j)
        mixed = add(mixed, mul_col(slice_cols(attn, static_cast<Eigen::Index>(j), 1), values[j]));
    const Var projected = affine(wo, t.constant(Matrix::Zero(1, wo.rows())), mixed);
    return add(h, projected);
}

// --- optimisation -----------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void adam_step(ParamStore& store, const Gradients& grads, const AdamConfig& cfg = {}) {
    for (const auto& [name, g] : grads) {
        const Tensor& t = store.tensor(name);
        if (g.rows() != t.value.rows() || g.cols() != t.value.cols())
            throw InvalidArgument("adam_step: gradient shape mismatch for " + name);
    }
    store.set_step(store.step() + 1);
    const double step = static_cast<double>(store.step());
    const double c1 = 1.0 - std::pow(cfg.beta1, step);
    const double c2 = 1.0 - std::pow(cfg.beta2, step);
    for (const auto& [name, g] : grads) {
        Tensor& t = store.tensor(name);
        t.adam_m = cfg.beta1 * t.adam_m + (1.0 - cfg.beta1) * g;
        t.adam_v = cfg.beta2 * t.adam_v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            const double m_hat = t.adam_m.data()[i] / c1;
            const double v_hat = t.adam_v.data()[i] / c2;
            t.value.data()[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

// --- verification -----------------------------------------------------------

struct FdReport {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_parameter;
    Eigen::Index worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Relative error uses max(|analytic|, |numeric|, floor) as denominator; below the
/// floor, central differences cannot resolve gradients in 64-bit arithmetic.
struct FdOptions {
    double h = 1e-5;
    std::size_t coordinates = 256;
    double floor = 1e-6;
    std::uint64_t seed = 0;
};

/// Compares `grads` with central differences of `loss` at randomly sampled coordinates.
/// `loss` is evaluated on `store` after in-place perturbation; values are restored.
inline FdReport fd_check(const std::function<double(const ParamStore&)>& loss, ParamStore& store,
                         const Gradients& grads, const FdOptions& opt = {}) {
    std::vector<std::pair<std::string, Eigen::Index>> all;
    for (const auto& [name, t] : store.tensors())
        for (Eigen::Index i = 0; i < t.value.size(); ++i) all.emplace_back(name, i);
    if (all.empty()) return {};
    std::vector<std::size_t> picks(all.size());
    std::iota(picks.begin(), picks.end(), 0);
    if (opt.coordinates < all.size()) {
        Rng rng(derive_seed(opt.seed, 0xFDC));
        std::shuffle(picks.begin(), picks.end(), rng);
        picks.resize(opt.coordinates);
        std::sort(picks.begin(), picks.end());
    }
    FdReport rep;
    for (std::size_t p : picks) {
        const auto& [name, idx] = all[p];
        double& x = store.value(name).data()[idx];
        const double saved = x;
        x = saved + opt.h;
        const double up = loss(store);
        x = saved - opt.h;
        const double down = loss(store);
        x = saved;
        const double numeric = (up - down) / (2.0 * opt.h);
        const double analytic = grads.at(name).data()[idx];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
        const double rel = std::abs(analytic - numeric) / denom;
        ++rep.coordinates;
        if (rel >= rep.max_relative_error) {
            rep.max_relative_error = rel;
            rep.worst_parameter = name;
            rep.worst_index = idx;
            rep.worst_analytic = analytic;
            rep.worst_numeric = numeric;
        }
    }
    return rep;
}

// --- checkpoint -------------------------------------------------------------

/// checkpoint.json (names, shapes, step, config echo) + checkpoint.f64 holding,
/// per tensor in name order, the value followed by both Adam moments.
inline void save_checkpoint(const ParamStore& store, const io::json& config_echo, const io::fs::path& dir) {
    io::json m;
    m["format"] = "parasol-checkpoint";
    m["version"] = 1;
    m["step"] = store.step();
    m["config"] = config_echo;
    m["params_hash"] = store.hash();
    std::vector<double> flat;
    for (const auto& [name, t] : store.tensors()) {
        m["tensors"].push_back({{"name", name}, {"shape", {t.value.rows(), t.value.cols()}}});
        for (const Matrix* a : {&t.value, &t.adam_m, &t.adam_v}) flat.insert(flat.end(), a->data(), a->data() + a->size());
    }
    io::write_json(dir / "checkpoint.json", m);
    io::write_bytes(dir / "checkpoint.f64", io::pack<double>(flat));
}

struct LoadedCheckpoint {
    ParamStore store;
    io::json config;
};

inline LoadedCheckpoint load_checkpoint(const io::fs::path& dir) {
    const auto m = io::read_json(dir / "checkpoint.json");
    if (m.value("format", "") != "parasol-checkpoint") throw ArtifactError("not a checkpoint: " + dir.string());
    io::ArrayCursor cursor(io::unpack<double>(io::read_bytes(dir / "checkpoint.f64")));
    LoadedCheckpoint out;
    Rng unused(0);
    for (const auto& entry : m.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto rows = entry.at("shape")[0].get<Eigen::Index>();
        const auto cols = entry.at("shape")[1].get<Eigen::Index>();
        out.store.create(name, rows, cols, Init::zeros, unused);
        Tensor& t = out.store.tensor(name);
        t.value = cursor.take(rows, cols);
        t.adam_m = cursor.take(rows, cols);
        t.adam_v = cursor.take(rows, cols);
    }
    if (!cursor.exhausted()) throw ArtifactError("checkpoint.f64 is longer than its manifest declares");
    out.store.set_step(m.at("step").get<long>());
    out.config = m.at("config");
    if (out.store.hash() != m.at("params_hash").get<std::string>())
        throw ArtifactError("checkpoint values do not match their recorded hash");
    return out;
}

}  // namespace parasol::diffnet
