#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "parco/gradcheck.hpp"
#include "parco/params.hpp"
#include "parco/training.hpp"

using namespace parco;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

model::ModelConfig tiny_model() {
    model::ModelConfig c;
    c.encoder.points_per_frame = 64;
    c.encoder.window_T = 2;
    c.encoder.d = 16;
    c.encoder.edge_conv_widths = {16, 16};
    c.sdf.hidden_width = 16;
    c.sdf.modulator_width = 16;
    return c;
}

data::Sequence small_sequence(std::uint64_t seed = 3) {
    data::GenerationConfig g;
    g.n_frames = 4;
    g.n_points = 512;
    return data::generate_sequence(g, seed);
}

bool same_params(const model::Model& a, const model::Model& b) {
    for (std::size_t i = 0; i < a.params.size(); ++i)
        for (std::size_t j = 0; j < a.params[i].values().size(); ++j)
            if (a.params[i].values()[j] != b.params[i].values()[j]) return false;
    return true;
}

}  // namespace

TEST(Focal, ClosedFormValues) {
    EXPECT_NEAR(training::focal(1.0, 0.0, 2.0), 2.9524924420125593, 1e-12);
    EXPECT_EQ(training::focal(0.7, 0.7, 2.0), 0.0);
    EXPECT_EQ(training::focal(0.7, 0.7, 0.0), 0.0);
    EXPECT_NEAR(training::focal(-0.3, 0.4, 0.0), 0.7, 1e-15);
    // anti-parallel normal: residual 2
    EXPECT_NEAR(training::focal(-1.0, 1.0, 2.0), 81.64007567056586, 1e-12);
}

TEST(Focal, NonNegativeAndIncreasingInResidual) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double y = uniform(rng, -2, 2), a = uniform(rng, 0, 4);
        const double r1 = uniform(rng, 0, 3), r2 = r1 + uniform(rng, 1e-3, 1);
        const double f1 = training::focal(y + r1, y, a), f2 = training::focal(y - r2, y, a);
        EXPECT_GE(f1, 0.0);
        EXPECT_GT(f2, f1);
    }
}

TEST(Focal, TensorFormMatchesScalarAndClamps) {
    Tape tape;
    const Var r = tape.leaf(Tensor{{0.0, 0.25, 1.0, 2.0, 25.0}});
    const Tensor& out = training::focal(r, 2.0).value();
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out(0, c), training::focal(r.value()(0, c), 0.0, 2.0), 1e-12);
    const double clamped = std::pow(std::exp(training::kFocalClamp) - 1.0, 2.0) * 25.0;
    EXPECT_NEAR(out(0, 4) / clamped, 1.0, 1e-12);
}

TEST(SurfaceLoss, ExactFieldHasZeroLoss) {
    Tape tape;
    const Tensor normals{{0, 0, 1}, {1, 0, 0}};
    const training::SurfaceTerms t =
        training::surface_loss(tape.leaf(Tensor(2, 1)), tape.leaf(Tensor{{0, 0, 2}, {0.5, 0, 0}}), normals, {});
    // the guard in the normalization leaves a residual of about eps_g
    EXPECT_LT(t.total.value().item(), 1e-30);
}

TEST(SurfaceLoss, AntiParallelGradient) {
    Tape tape;
    const training::LossWeights w;
    const training::SurfaceTerms t =
        training::surface_loss(tape.leaf(Tensor{{0.0}}), tape.leaf(Tensor{{0, 0, -1}}), Tensor{{0, 0, 1}}, w);
    EXPECT_NEAR(t.normal.value().item() / (50.0 * 81.64007567056586), 1.0, 1e-11);
    EXPECT_EQ(t.zero_level.value().item(), 0.0);
}

TEST(SurfaceLoss, ZeroGradientIsGuarded) {
    Tape tape;
    Var g = tape.leaf(Tensor(1, 3));
    const training::SurfaceTerms t = training::surface_loss(tape.leaf(Tensor{{0.1}}), g, Tensor{{1, 0, 0}}, {});
    EXPECT_EQ(t.guarded, 1u);
    EXPECT_TRUE(std::isfinite(t.total.value().item()));
    tape.backward(t.total);
    EXPECT_TRUE(tape.grad(g).all_finite());
}

TEST(Eikonal, MeanAbsoluteDeviation) {
    Tape tape;
    const Var g = tape.leaf(Tensor{{3, 4, 0}, {0, 0, 1}, {0, 0.5, 0}});
    EXPECT_NEAR(training::eikonal_loss(g).value().item(), (4.0 + 0.0 + 0.5) / 3.0, 1e-15);
    EXPECT_EQ(training::latent_loss(tape.leaf(Tensor{{1, -2, 2}})).value().item(), 9.0);
    EXPECT_EQ(training::total_loss(1.0, 0.5, 9.0, {}), 1.0 + 25.0 + 0.009);
}

TEST(Eikonal, AnalyticTorusOracle) {
    Rng rng(8);
    Tensor g(2000, 3), doubled(2000, 3);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        const data::Point p(uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5));
        const data::Point n = data::analytic_torus_sdf_gradient(p);
        for (std::size_t k = 0; k < 3; ++k) {
            g(i, k) = n[k];
            doubled(i, k) = 2.0 * n[k];
        }
    }
    Tape tape;
    EXPECT_LT(training::eikonal_loss(tape.leaf(g)).value().item(), 1e-9);
    EXPECT_NEAR(training::eikonal_loss(tape.leaf(doubled)).value().item(), 1.0, 1e-12);
}

TEST(Adam, ThreeStepHandTrace) {
    std::vector<Tensor> p{Tensor{{1.0}}};
    training::AdamState s = training::AdamState::zeros_like(p);
    training::AdamConfig cfg;
    cfg.lr = 0.1;
    const double expected[] = {0.900000002, 0.8654394181165108, 0.8275002408356956};
    const double grads[] = {0.5, -0.2, 0.1};
    for (int i = 0; i < 3; ++i) {
        const std::vector<Tensor> g{Tensor{{grads[i]}}};
        training::adam_update(p, g, s, cfg);
        EXPECT_NEAR(p[0].item(), expected[i], 1e-15);
    }
    EXPECT_EQ(s.updates, 3u);
}

TEST(Adam, ZeroLearningRateLeavesParametersBitExact) {
    Rng rng(12);
    std::vector<Tensor> p{uniform_tensor(rng, 4, 3, 2.0), uniform_tensor(rng, 1, 7, 0.5)};
    const std::vector<Tensor> before = p;
    training::AdamState s = training::AdamState::zeros_like(p);
    training::AdamConfig cfg;
    cfg.lr = 0.0;
    for (int step = 0; step < 5; ++step) {
        const std::vector<Tensor> g{uniform_tensor(rng, 4, 3, 10.0), uniform_tensor(rng, 1, 7, 1e-6)};
        training::adam_update(p, g, s, cfg);
    }
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p[i].size(); ++j) EXPECT_EQ(p[i][j], before[i][j]);
    EXPECT_EQ(s.updates, 5u);
}

TEST(Queries, BatchContract) {
    const data::Sequence seq = small_sequence();
    const data::CompleteFrame& f = seq.frames[1];
    const training::QueryBatch b = training::sample_queries(f, 100, 400, 5);
    ASSERT_EQ(b.surface.rows(), 100u);
    ASSERT_EQ(b.queries.rows(), 400u);
    for (std::size_t i = 0; i < 100; ++i) {
        bool found = false;
        for (std::size_t j = 0; j < f.points.size() && !found; ++j)
            found = b.surface(i, 0) == f.points[j].x() && b.surface(i, 1) == f.points[j].y() &&
                    b.surface(i, 2) == f.points[j].z() && b.normals(i, 0) == f.normals[j].x();
        EXPECT_TRUE(found) << i;
    }
    double near_sum = 0;
    for (std::size_t i = 0; i < 400; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_LE(std::fabs(b.queries(i, k)), training::kQueryExtent);
        }
    // perturbed half: distance to the nearest surface point is about sigma
    for (std::size_t i = 200; i < 400; ++i) {
        double best = 1e9;
        for (const data::Point& p : f.points) best = std::min(best, (p - data::Point(b.queries(i, 0), b.queries(i, 1), b.queries(i, 2))).norm());
        near_sum += best;
    }
    EXPECT_LT(near_sum / 200, 0.1);
    const training::QueryBatch again = training::sample_queries(f, 100, 400, 5);
    EXPECT_EQ(again.queries(123, 1), b.queries(123, 1));
}

TEST(Queries, UniformHalfCoversTheBox) {
    const data::Sequence seq = small_sequence();
    const training::QueryBatch b = training::sample_queries(seq.frames[0], 16, 20000, 6);
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 10000; ++i) mean += b.queries(i, 0) / 10000;
    for (std::size_t i = 0; i < 10000; ++i) var += (b.queries(i, 0) - mean) * (b.queries(i, 0) - mean) / 10000;
    EXPECT_NEAR(mean, 0.0, 0.05);
    EXPECT_NEAR(var, 9.0 / 12.0, 0.05);  // U[-1.5, 1.5]
}

TEST(Objective, GradientsMatchFiniteDifferences) {
    gradcheck::SuiteOptions opts;
    opts.module = "loss";
    opts.seed = 5;
    for (const auto& c : gradcheck::run_suite(opts)) EXPECT_LT(c.report.max_rel_err, gradcheck::kTolerance) << c.name;
}

TEST(TrainStep, FrozenBatchLossDecreasesOnDeskConfig) {
    model::Model m = model::Model::create(model::ModelConfig{}, 7);
    const data::Sequence seq = small_sequence();
    const auto window = training::build_window(seq, 3, 4, 256, 11);
    const training::QueryBatch batch = training::sample_queries(seq.frames[3], 128, 128, 12);
    training::AdamState adam = training::AdamState::zeros_like(m.params.values());
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 10; ++i) {
        const training::StepResult r = training::train_step(m, adam, window, batch, {}, {});
        ASSERT_TRUE(r.applied);
        EXPECT_LT(r.parts.total, prev) << "step " << i;
        prev = r.parts.total;
    }
}

TEST(TrainStep, NonFiniteLossLeavesStateUnchanged) {
    model::Model m = model::Model::create(tiny_model(), 8);
    const data::Sequence seq = small_sequence();
    const auto window = training::build_window(seq, 1, 2, 64, 1);
    training::QueryBatch batch = training::sample_queries(seq.frames[1], 32, 32, 2);
    batch.surface(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const model::Model before = m;
    training::AdamState adam = training::AdamState::zeros_like(m.params.values());
    const training::StepResult r = training::train_step(m, adam, window, batch, {}, {});
    EXPECT_FALSE(r.applied);
    EXPECT_EQ(adam.updates, 0u);
    EXPECT_TRUE(same_params(m, before));
}

TEST(TrainLoop, PersistentNonFiniteLossThrows) {
    model::Model m = model::Model::create(tiny_model(), 9);
    m.params[m.sdf.siren_b.back()](0, 0) = std::numeric_limits<double>::infinity();
    const std::vector<data::Sequence> seqs{small_sequence()};
    training::TrainConfig cfg;
    cfg.steps = 20;
    cfg.surface_batch = cfg.query_batch = 16;
    training::TrainState st;
    std::size_t logged = 0;
    EXPECT_THROW(training::train_loop(m, st, seqs, cfg, {}, {[&](const nlohmann::json&) { ++logged; }, {}}),
                 training::NumericalFailure);
    EXPECT_EQ(logged, training::kMaxNonFiniteSteps);
}

TEST(TrainLoop, OneLogRecordPerStep) {
    model::Model m = model::Model::create(tiny_model(), 10);
    const std::vector<data::Sequence> seqs{small_sequence(), small_sequence(4)};
    training::TrainConfig cfg;
    cfg.steps = 5;
    cfg.surface_batch = cfg.query_batch = 32;
    training::TrainState st;
    std::vector<nlohmann::json> logs;
    training::train_loop(m, st, seqs, cfg, {}, {[&](const nlohmann::json& j) { logs.push_back(j); }, {}});
    ASSERT_EQ(logs.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(logs[i].at("step"), i);
        EXPECT_GE(logs[i].at("t").get<int>(), 1);
        EXPECT_TRUE(logs[i].at("loss").contains("eikonal"));
    }
    EXPECT_EQ(st.step, 5u);
}

TEST(TrainLoop, ResumeContinuesBitExactly) {
    const std::vector<data::Sequence> seqs{small_sequence()};
    training::TrainConfig cfg;
    cfg.surface_batch = cfg.query_batch = 32;
    cfg.seed = 21;

    model::Model straight = model::Model::create(tiny_model(), 11);
    training::TrainState s1;
    cfg.steps = 6;
    training::train_loop(straight, s1, seqs, cfg, {}, {});

    model::Model first = model::Model::create(tiny_model(), 11);
    training::TrainState s2;
    cfg.steps = 3;
    training::train_loop(first, s2, seqs, cfg, {}, {});
    const sdfnet::Checkpoint ck = training::training_checkpoint(first, s2);
    model::Model resumed = model::from_checkpoint(ck);
    training::TrainState s3 = training::load_train_state(ck, resumed);
    EXPECT_EQ(s3.step, 3u);
    cfg.steps = 6;
    training::train_loop(resumed, s3, seqs, cfg, {}, {});
    EXPECT_TRUE(same_params(straight, resumed));
}

TEST(TrainLoop, RejectsSequencesShorterThanWindow) {
    model::Model m = model::Model::create(tiny_model(), 12);
    data::GenerationConfig g;
    g.n_frames = 1;
    g.n_points = 256;
    const std::vector<data::Sequence> seqs{data::generate_sequence(g, 1)};
    training::TrainState st;
    EXPECT_THROW(training::train_loop(m, st, seqs, {}, {}, {}), std::invalid_argument);
}
