#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "parco/encoder.hpp"
#include "parco/gradcheck.hpp"
#include "parco/rng.hpp"

using namespace parco;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_points(Rng& rng, std::size_t n) {
    Tensor t(n, 3);
    for (double& v : t.values()) v = uniform(rng, -1, 1);
    return t;
}

encoder::EncoderConfig small_config() {
    encoder::EncoderConfig c;
    c.m = 4;
    c.k = 3;
    c.d = 8;
    c.edge_conv_widths = {6, 5};
    c.window_T = 3;
    c.points_per_frame = 20;
    return c;
}

}  // namespace

TEST(Knn, MatchesBruteForceWithIndexTies) {
    Rng rng(1);
    const Tensor pts = random_points(rng, 60);
    const encoder::KnnGraph g = encoder::knn_graph(pts, 8);
    ASSERT_EQ(g.points(), 60u);
    for (std::size_t i = 0; i < 60; ++i) {
        std::vector<std::pair<double, std::uint32_t>> all;
        for (std::size_t j = 0; j < 60; ++j) {
            if (j == i) continue;
            double d = 0;
            for (int a = 0; a < 3; ++a) d += (pts(i, a) - pts(j, a)) * (pts(i, a) - pts(j, a));
            all.emplace_back(d, static_cast<std::uint32_t>(j));
        }
        std::sort(all.begin(), all.end());
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(g.at(i, j), all[j].second);
    }
}

TEST(Knn, EquidistantNeighborsOrderedByIndex) {
    // center point with four neighbors at equal distance
    const Tensor pts{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}, {5, 5, 5}};
    const encoder::KnnGraph g = encoder::knn_graph(pts, 3);
    EXPECT_EQ(g.at(0, 0), 1u);
    EXPECT_EQ(g.at(0, 1), 2u);
    EXPECT_EQ(g.at(0, 2), 3u);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NE(g.at(i, j), i);
}

TEST(Knn, RequiresMoreThanKPoints) {
    EXPECT_THROW(encoder::knn_graph(Tensor(4, 3), 4), std::invalid_argument);
}

TEST(FourierLift, CosBlockThenSinBlock) {
    Tape tape;
    const Tensor basis{{1, 0, 0}, {0, 0.5, 2}};
    const Tensor pts{{0.1, 0.2, 0.3}};
    const Tensor& out = encoder::fourier_lift(tape.constant(pts), tape.leaf(basis)).value();
    ASSERT_EQ(out.cols(), 4u);
    const double a0 = 2 * std::numbers::pi * 0.1;
    const double a1 = 2 * std::numbers::pi * (0.5 * 0.2 + 2 * 0.3);
    EXPECT_NEAR(out(0, 0), std::cos(a0), 1e-14);
    EXPECT_NEAR(out(0, 1), std::cos(a1), 1e-14);
    EXPECT_NEAR(out(0, 2), std::sin(a0), 1e-14);
    EXPECT_NEAR(out(0, 3), std::sin(a1), 1e-14);
}

TEST(EdgeConv, MatchesDirectDefinition) {
    Rng rng(2);
    const std::size_t m = 10, f = 4, fo = 3;
    const Tensor pts = random_points(rng, m);
    Tensor feat(m, f), ws(fo, f), wn(fo, f), b(1, fo);
    for (Tensor* t : {&feat, &ws, &wn, &b})
        for (double& v : t->values()) v = uniform(rng, -1, 1);
    const encoder::KnnGraph g = encoder::knn_graph(pts, 3);
    Tape tape;
    const Tensor out = encoder::edge_conv(tape.leaf(feat), g, {tape.leaf(ws), tape.leaf(wn), tape.leaf(b)}).value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < fo; ++c) {
            double best = -1.0;
            for (std::size_t jj = 0; jj < 3; ++jj) {
                const std::size_t j = g.at(i, jj);
                double h = b(0, c);
                for (std::size_t a = 0; a < f; ++a) h += ws(c, a) * feat(i, a) + wn(c, a) * (feat(j, a) - feat(i, a));
                best = std::max(best, std::max(h, 0.0));
            }
            EXPECT_NEAR(out(i, c), best, 1e-12);
        }
}

TEST(Attention, RowsAreConvexWeightsPlusResidual) {
    Rng rng(3);
    ParamStore store;
    encoder::EncoderConfig cfg = small_config();
    const encoder::EncoderLayout layout = encoder::register_encoder(store, cfg, rng);
    Tape tape;
    const encoder::EncoderWeights w = layout.bind(store.bind(tape));
    Tensor zt(3, cfg.d);
    for (double& v : zt.values()) v = uniform(rng, -1, 1);
    Var z = tape.constant(zt);
    Var attn;
    const Tensor out = encoder::self_attention_layer(z, w.attention[0], &attn).value();
    const Tensor& a = attn.value();
    ASSERT_EQ(a.rows(), 3u);
    ASSERT_EQ(a.cols(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += a(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const Tensor v = ad::matmul(z, w.attention[0].wv).value();
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < cfg.d; ++c) {
            double expect = zt(r, c);
            for (std::size_t s = 0; s < 3; ++s) expect += a(r, s) * v(s, c);
            EXPECT_NEAR(out(r, c), expect, 1e-12);
        }
}

TEST(Attention, SingleFrameWindowReducesToValueResidual) {
    // softmax over one key is 1, so the layer is z + z W_V
    Rng rng(4);
    ParamStore store;
    const encoder::EncoderConfig cfg = small_config();
    const encoder::EncoderLayout layout = encoder::register_encoder(store, cfg, rng);
    Tape tape;
    const encoder::EncoderWeights w = layout.bind(store.bind(tape));
    Tensor zt(1, cfg.d);
    for (double& v : zt.values()) v = uniform(rng, -1, 1);
    Var z = tape.constant(zt);
    const Tensor out = encoder::self_attention_layer(z, w.attention[0]).value();
    const Tensor zv = ad::matmul(z, w.attention[0].wv).value();
    for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(out(0, c), zt(0, c) + zv(0, c), 1e-14);
}

TEST(Encoder, ShapesAndInitialization) {
    Rng rng(5);
    ParamStore store;
    const encoder::EncoderConfig cfg;  // defaults
    encoder::register_encoder(store, cfg, rng);
    EXPECT_EQ(store[store.index_of("encoder.fourier_B")].shape(), (ad::Shape{32, 3}));
    EXPECT_EQ(store[store.index_of("encoder.edge_conv0.w_self")].shape(), (ad::Shape{64, 64}));
    EXPECT_EQ(store[store.index_of("encoder.edge_conv2.w_nbr")].shape(), (ad::Shape{128, 64}));
    EXPECT_EQ(store[store.index_of("encoder.proj.w")].shape(), (ad::Shape{128, 128}));
    EXPECT_TRUE(store.contains("encoder.attn1.wv"));
    EXPECT_FALSE(store.contains("encoder.attn2.wq"));
    // Fourier basis ~ N(0, 1): sample moments over 96 entries
    double mean = 0, var = 0;
    for (double v : store[store.index_of("encoder.fourier_B")].values()) mean += v / 96.0;
    for (double v : store[store.index_of("encoder.fourier_B")].values()) var += (v - mean) * (v - mean) / 95.0;
    EXPECT_NEAR(mean, 0.0, 0.35);
    EXPECT_NEAR(var, 1.0, 0.4);
}

TEST(Encoder, WindowCodeIsFiniteAndDeterministic) {
    Rng rng(6);
    ParamStore store;
    const encoder::EncoderConfig cfg = small_config();
    const encoder::EncoderLayout layout = encoder::register_encoder(store, cfg, rng);
    std::vector<Tensor> frames;
    for (int t = 0; t < 3; ++t) frames.push_back(random_points(rng, 20));
    auto run = [&](bool attention) {
        Tape tape;
        return encoder::aggregate_window(tape, frames, layout.bind(store.bind(tape)), cfg.k, attention).value();
    };
    const Tensor z = run(true);
    EXPECT_EQ(z.shape(), (ad::Shape{1, cfg.d}));
    EXPECT_TRUE(z.all_finite());
    EXPECT_EQ(run(true).values()[3], z.values()[3]);

    // without attention the code is the last frame's own code
    Tape tape;
    const Tensor last = encoder::encode_frame(tape, frames[2], layout.bind(store.bind(tape)), cfg.k).value();
    const Tensor plain = run(false);
    for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_EQ(plain(0, c), last(0, c));
}

TEST(Encoder, EarlierFramesInfluenceCodeOnlyThroughAttention) {
    Rng rng(7);
    ParamStore store;
    const encoder::EncoderConfig cfg = small_config();
    const encoder::EncoderLayout layout = encoder::register_encoder(store, cfg, rng);
    std::vector<Tensor> frames;
    for (int t = 0; t < 3; ++t) frames.push_back(random_points(rng, 20));
    std::vector<Tensor> changed = frames;
    changed[0] = random_points(rng, 20);
    auto run = [&](const std::vector<Tensor>& f, bool attention) {
        Tape tape;
        return encoder::aggregate_window(tape, f, layout.bind(store.bind(tape)), cfg.k, attention).value();
    };
    EXPECT_NE(run(frames, true)(0, 0), run(changed, true)(0, 0));
    EXPECT_EQ(run(frames, false)(0, 0), run(changed, false)(0, 0));
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
    gradcheck::SuiteOptions opts;
    opts.module = "encoder";
    opts.seed = 9;
    for (const auto& c : gradcheck::run_suite(opts)) EXPECT_LT(c.report.max_rel_err, gradcheck::kTolerance) << c.name;
}
