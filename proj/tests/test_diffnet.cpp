#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace parasol;
using namespace parasol::diffnet;

TEST(Primitives, AffineIdentityAndSilu) {
    Tape t;
    Rng rng(1);
    const Matrix x = standard_normal(rng, 4, 3);
    const Var y = affine(t.constant(Matrix::Identity(3, 3)), t.constant(Matrix::Zero(1, 3)), t.constant(x));
    EXPECT_EQ(y.value(), x);
    EXPECT_EQ(silu(t.constant(Matrix::Zero(1, 1))).value()(0, 0), 0.0);
}

TEST(Primitives, LayernormStandardizesRows) {
    Tape t;
    Rng rng(2);
    const Matrix x = standard_normal(rng, 5, 16) * 3.0;
    const Var y = layernorm(t.constant(x), t.constant(Matrix::Ones(1, 16)), t.constant(Matrix::Zero(1, 16)));
    for (Eigen::Index i = 0; i < 5; ++i) {
        const double mu = y.value().row(i).mean();
        EXPECT_NEAR(mu, 0.0, 1e-10);
        EXPECT_NEAR((y.value().row(i).array() - mu).square().mean(), 1.0, 1e-10);
    }
}

namespace {

ParamStore attention_store(Eigen::Index hidden, Eigen::Index token, std::uint64_t seed) {
    ParamStore p;
    Rng rng(seed);
    create_cross_attention(p, "a", {hidden, token, 5, 4}, rng);
    return p;
}

}  // namespace

TEST(CrossAttention, SingleTokenGetsFullWeight) {
    const auto p = attention_store(6, 3, 4);
    Rng rng(5);
    const Matrix h = standard_normal(rng, 2, 6), tok = standard_normal(rng, 2, 3);
    Tape t;
    const Var out = cross_attention(t, p, "a", t.constant(h), {t.constant(tok)});
    const Matrix v = matmul_nt(tok, p.value("a.wv"));
    const Matrix expect = h + matmul_nt(v, p.value("a.wo"));
    EXPECT_LT((out.value() - expect).cwiseAbs().maxCoeff(), 1e-14);
    Tape t2;
    const Var twice = cross_attention(t2, p, "a", t2.constant(h), {t2.constant(tok), t2.constant(tok)});
    EXPECT_LT((twice.value() - out.value()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CrossAttention, MatchesDirectFormula) {
    const auto p = attention_store(7, 4, 6);
    Rng rng(7);
    const Matrix h = standard_normal(rng, 3, 7), t1 = standard_normal(rng, 3, 4), t2 = standard_normal(rng, 3, 4);
    Tape t;
    const Var out = cross_attention(t, p, "a", t.constant(h), {t.constant(t1), t.constant(t2)});
    for (Eigen::Index i = 0; i < 3; ++i) {
        const auto want = oracle::attention(p, "a", to_std(h.row(i)), {to_std(t1.row(i)), to_std(t2.row(i))});
        for (Eigen::Index j = 0; j < 7; ++j) EXPECT_NEAR(out.value()(i, j), want[j], 1e-12);
    }
}

TEST(Backward, LinearLossGradientIsOuterProduct) {
    ParamStore p;
    Rng rng(8);
    p.create("w", 1, 4, Init::unit_normal, rng);
    const Matrix x = standard_normal(rng, 1, 4);
    Tape t;
    const Var loss = sum(mul(t.param(p, "w"), t.constant(x)));
    const auto g = t.backward(loss, p);
    EXPECT_EQ(g.at("w"), x);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
    ParamStore p;
    Rng rng(9);
    p.create("w", 2, 3, Init::unit_normal, rng);
    p.create("b", 1, 3, Init::unit_normal, rng);
    Tape t;
    const auto g = t.backward(sum(t.constant(Matrix::Ones(2, 2))), p);
    EXPECT_EQ(g.at("w"), Matrix::Zero(2, 3));
    EXPECT_EQ(g.at("b"), Matrix::Zero(1, 3));
}

TEST(Backward, ThreeLayerNetMatchesFiniteDifferences) {
    ParamStore p;
    Rng rng(10);
    create_affine(p, "l1", 5, 8, rng);
    create_affine(p, "l2", 8, 8, rng);
    create_affine(p, "l3", 8, 2, rng);
    p.create("ln.g", 1, 8, Init::unit_normal, rng);
    p.create("ln.b", 1, 8, Init::unit_normal, rng);
    const Matrix x = standard_normal(rng, 6, 5), target = standard_normal(rng, 6, 2);
    auto build = [&](Tape& t, const ParamStore& q) {
        Var h = silu(affine_layer(t, q, "l1", t.constant(x)));
        h = layernorm(silu(affine_layer(t, q, "l2", h)), t.param(q, "ln.g"), t.param(q, "ln.b"));
        return mse(affine_layer(t, q, "l3", h), t.constant(target));
    };
    Tape t;
    const auto grads = t.backward(build(t, p), p);
    const auto rep = fd_check(
        [&](const ParamStore& q) {
            Tape tt;
            return build(tt, q).value()(0, 0);
        },
        p, grads, {1e-5, 1000, 1e-6, 0});
    EXPECT_EQ(rep.coordinates, p.parameter_count());
    EXPECT_LT(rep.max_relative_error, 1e-6) << rep.worst_parameter << "[" << rep.worst_index << "]";
}

TEST(Backward, RejectsNonScalarLoss) {
    ParamStore p;
    Tape t;
    EXPECT_THROW(t.backward(t.constant(Matrix::Ones(2, 1)), p), InvalidArgument);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParamStore p;
    Rng rng(11);
    const Matrix before = p.create("w", 3, 3, Init::unit_normal, rng);
    adam_step(p, {{"w", Matrix::Zero(3, 3)}});
    EXPECT_EQ(p.value("w"), before);
    EXPECT_EQ(p.step(), 1);
}

TEST(Adam, FirstStepMovesAgainstGradientSign) {
    ParamStore p;
    Rng rng(12);
    const Matrix before = p.create("w", 1, 4, Init::unit_normal, rng);
    Matrix g(1, 4);
    g << 3.0, -0.01, 1e-3, -50.0;
    adam_step(p, {{"w", g}}, {0.01});
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(p.value("w")(0, j) - before(0, j), -0.01 * (g(0, j) > 0 ? 1 : -1), 1e-7);
}

TEST(Adam, ScalarQuadraticConverges) {
    ParamStore p;
    Rng rng(13);
    p.create("x", 1, 1, Init::zeros, rng);
    const double target = 2.5;
    for (int i = 0; i < 500; ++i) {
        Matrix g(1, 1);
        g(0, 0) = 2.0 * (p.value("x")(0, 0) - target);
        adam_step(p, {{"x", g}}, {0.05});
    }
    EXPECT_LT(std::abs(p.value("x")(0, 0) - target), 1e-3);
}

TEST(Checkpoint, RoundTripKeepsValuesAndMoments) {
    const auto dir = io::fs::temp_directory_path() / "parasol_ckpt_test";
    io::fs::remove_all(dir);
    ParamStore p;
    Rng rng(14);
    create_affine(p, "l", 3, 2, rng);
    adam_step(p, {{"l.w", Matrix::Ones(2, 3)}, {"l.b", Matrix::Ones(1, 2)}});
    save_checkpoint(p, {{"note", 1}}, dir);
    const auto back = load_checkpoint(dir);
    EXPECT_EQ(back.store.hash(), p.hash());
    EXPECT_EQ(back.store.step(), 1);
    EXPECT_EQ(back.store.tensor("l.w").adam_v, p.tensor("l.w").adam_v);
    EXPECT_EQ(back.config.at("note"), 1);
    io::fs::remove_all(dir);
}

TEST(TimeEmbed, SinCosPairs) {
    const auto e = time_embed(7, 4);
    EXPECT_EQ(e[0], std::sin(7.0));
    EXPECT_EQ(e[1], std::cos(7.0));
    EXPECT_DOUBLE_EQ(e[2], std::sin(7.0 / 100.0));
    EXPECT_THROW(time_embed(1, 3), InvalidArgument);
}
