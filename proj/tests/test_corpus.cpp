#include "parasol/corpus.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace parasol;
using namespace parasol::corpus;

TEST(SampleFactors, SemanticsPoolUsesNeutralStyle) {
    const auto f = sample_factors(7, 1, Role::semantics_db);
    ASSERT_EQ(f.size(), 1u);
    EXPECT_EQ(f[0].style, kNeutralStyle);
}

TEST(SampleFactors, Deterministic) {
    const auto a = sample_factors(7, 3, Role::target), b = sample_factors(7, 3, Role::target);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i].content, b[i].content);
        EXPECT_EQ(a[i].style, b[i].style);
    }
}

TEST(SampleFactors, EveryFieldInRange) {
    for (const auto& f : sample_factors(7, 1000, Role::target)) {
        EXPECT_TRUE(f.content.in_range());
        EXPECT_TRUE(f.style.in_range());
    }
    EXPECT_THROW(sample_factors(7, 0, Role::target), InvalidArgument);
}

TEST(Render, LinearIsGeneratorMap) {
    const ContentFactors c{3, 0.25, 0.7, 0.2};
    const StyleFactors s{0.1, 0.8, 0.3, 0.9, 0.5, 2.0};
    const auto& basis = linear_basis();
    const auto g = c.encode();
    const auto sv = s.encode();
    Eigen::VectorXd gv(kContentDim), svv(kStyleDim);
    for (int j = 0; j < kContentDim; ++j) gv(j) = g[j];
    for (int j = 0; j < kStyleDim; ++j) svv(j) = sv[j];
    const Eigen::VectorXd expect = basis.content * gv + basis.style * svv;
    const Item item = render(c, s, Mode::linear);
    for (int i = 0; i < 64; ++i) EXPECT_NEAR(item.data[i], expect(i), 1e-14);
}

TEST(Render, LinearSuperposition) {
    const auto f = sample_factors(3, 4, Role::target);
    const auto& basis = linear_basis();
    for (const auto& fac : f) {
        const Item full = render(fac.content, fac.style, Mode::linear);
        const Item no_style = render(fac.content, StyleFactors{0, 0, 0, 0, 0, 0}, Mode::linear);
        const auto s = fac.style.encode();
        for (int i = 0; i < 64; ++i) {
            double ws = 0.0;
            for (int j = 0; j < kStyleDim; ++j) ws += basis.style(i, j) * s[j];
            EXPECT_NEAR(full.data[i] - no_style.data[i], ws, 1e-15);
        }
    }
}

TEST(Render, BasisOrthonormal) {
    const auto& b = linear_basis();
    Eigen::MatrixXd all(64, kContentDim + kStyleDim);
    all << b.content, b.style;
    EXPECT_LT((all.transpose() * all - Eigen::MatrixXd::Identity(14, 14)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Render, ZeroFrequencyTextureMatchesDirectFormula) {
    const ContentFactors c{2, 0.45, 0.55, 0.3};
    const StyleFactors s{0.3, 1.4, 0.9, 0.6, 0.35, 0.0};
    const Item item = render(c, s, Mode::render);
    ASSERT_EQ(item.data.size(), 12u * 12u * 3u);
    const double tint[3] = {s.tint_r, s.tint_g, s.tint_b};
    for (int row = 0; row < 12; ++row)
        for (int col = 0; col < 12; ++col) {
            const double u = (col + 0.5) / 12, v = (row + 0.5) / 12;
            // triangle: min over the three half-planes
            double d = 1e9;
            for (double deg : {90.0, 210.0, 330.0}) {
                const double a = deg * std::numbers::pi / 180;
                d = std::min(d, 0.5 * c.size - (std::cos(a) * (u - c.center_x) + std::sin(a) * (v - c.center_y)));
            }
            const double mask = 1.0 / (1.0 + std::exp(-20 * d));
            const double base = s.brightness + s.contrast * (mask - 0.5) + 0.5;
            for (int ch = 0; ch < 3; ++ch)
                EXPECT_NEAR(item.data[(row * 12 + col) * 3 + ch], std::clamp(tint[ch] * base, 0.0, 1.0), 1e-15);
        }
}

TEST(Render, ShapesDiffer) {
    StyleFactors s = kNeutralStyle;
    std::vector<std::vector<double>> items;
    for (int k = 0; k < kShapeClasses; ++k) items.push_back(render({k, 0.5, 0.5, 0.3}, s, Mode::render).data);
    for (int a = 0; a < kShapeClasses; ++a)
        for (int b = a + 1; b < kShapeClasses; ++b) EXPECT_NE(items[a], items[b]);
}

TEST(BuildCorpus, SmallCounts) {
    const auto b = build_corpus({1, 1, 1, Mode::render}, 11);
    ASSERT_EQ(b.size(), 3u);
    EXPECT_EQ(b.roles[2], Role::semantics_db);
    EXPECT_EQ(b.factors[2].style, kNeutralStyle);
    EXPECT_EQ(b.dim(), 432);
    EXPECT_THROW(build_corpus({0, 1, 1, Mode::linear}, 1), InvalidArgument);
}

TEST(BuildCorpus, DefaultHistogram) {
    const auto b = build_corpus({}, 1);
    EXPECT_EQ(b.size(), 6000u);
    EXPECT_EQ(b.ids_with_role(Role::target).size(), 2000u);
    EXPECT_EQ(b.ids_with_role(Role::style_db).size(), 2000u);
    EXPECT_EQ(b.ids_with_role(Role::semantics_db).size(), 2000u);
}

TEST(Container, ByteIdenticalAndRoundTrip) {
    const auto dir = io::fs::temp_directory_path() / "parasol_corpus_test";
    io::fs::remove_all(dir);
    const auto b = build_corpus({20, 20, 20, Mode::linear}, 5);
    save_corpus(b, dir / "a");
    save_corpus(build_corpus({20, 20, 20, Mode::linear}, 5), dir / "b");
    for (const char* f : {"manifest.json", "items.f32"})
        EXPECT_EQ(io::read_bytes(dir / "a" / f), io::read_bytes(dir / "b" / f));
    const auto back = load_corpus(dir / "a");
    EXPECT_EQ(corpus_hash(back), corpus_hash(b));
    EXPECT_EQ(back.roles, b.roles);
    EXPECT_EQ(back.items.cast<float>().cast<double>(), back.items);
    io::write_bytes(dir / "a" / "items.f32", "abcd");
    EXPECT_THROW(load_corpus(dir / "a"), ArtifactError);
    io::fs::remove_all(dir);
}
