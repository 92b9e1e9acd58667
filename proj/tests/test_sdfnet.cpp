#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "parco/gradcheck.hpp"
#include "parco/model.hpp"
#include "parco/sdfnet.hpp"

using namespace parco;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (double& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

sdfnet::SdfConfig small_sdf() {
    sdfnet::SdfConfig c;
    c.hidden_width = 8;
    c.layers = 4;
    c.modulator_width = 6;
    return c;
}

struct Fixture {
    ParamStore store;
    sdfnet::SdfLayout layout;
    sdfnet::SdfConfig cfg;
    std::size_t latent = 5;

    explicit Fixture(sdfnet::SdfConfig c, std::uint64_t seed = 1) : cfg(c) {
        Rng rng(seed);
        layout = sdfnet::register_sdfnet(store, cfg, latent, rng);
        // nonzero modulator outputs so shifts depend on z
        for (const auto& l : layout.mod_w) store[l[2]] = uniform_tensor(rng, cfg.hidden_width, cfg.modulator_width, 0.3);
    }
};

}  // namespace

TEST(Siren, OneHiddenUnitClosedForm) {
    // h = sin(omega0 * w.x + b), d = 2h - 0.5; chosen so the sine argument is pi/2
    const double omega0 = 8.0;
    Tape tape;
    sdfnet::SirenWeights w;
    w.weight = {tape.leaf(Tensor{{std::numbers::pi / 2 / omega0, 0, 0}}), tape.leaf(Tensor{{2.0}})};
    w.bias = {tape.leaf(Tensor{{0.0}}), tape.leaf(Tensor{{-0.5}})};
    const std::vector<Var> shifts{tape.constant(Tensor{{0.0}})};
    const Var d = sdfnet::sdf_forward(tape, Tensor{{1.0, 0.3, -0.2}}, shifts, w, omega0);
    EXPECT_NEAR(d.value().item(), 1.5, 1e-15);
}

TEST(Siren, Omega0ScalesOnlyFirstLayer) {
    for (const double omega0 : {1.0, 8.0}) {
        Fixture f(small_sdf());
        Tape tape;
        const std::vector<Var> vars = f.store.bind(tape);
        const sdfnet::SirenWeights w = f.layout.bind_siren(vars);
        std::vector<Var> shifts;
        for (std::size_t l = 0; l + 1 < f.cfg.layers; ++l) shifts.push_back(tape.constant(Tensor(1, f.cfg.hidden_width)));
        Rng rng(2);
        const Tensor x = random(rng, 4, 3);
        sdfnet::SdfTrace trace;
        sdfnet::sdf_forward(tape, x, shifts, w, omega0, &trace);
        ASSERT_EQ(trace.pre_activations.size(), f.cfg.layers - 1);
        const Tensor& w0 = f.store[f.layout.siren_w[0]];
        const Tensor& b0 = f.store[f.layout.siren_b[0]];
        const Tensor& w1 = f.store[f.layout.siren_w[1]];
        const Tensor& b1 = f.store[f.layout.siren_b[1]];
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < f.cfg.hidden_width; ++c) {
                double pre = b0(0, c);
                for (std::size_t k = 0; k < 3; ++k) pre += omega0 * w0(c, k) * x(r, k);
                EXPECT_NEAR(trace.pre_activations[0](r, c), pre, 1e-13);
                double pre1 = b1(0, c);
                for (std::size_t k = 0; k < f.cfg.hidden_width; ++k)
                    pre1 += w1(c, k) * std::sin(trace.pre_activations[0](r, k));
                EXPECT_NEAR(trace.pre_activations[1](r, c), pre1, 1e-13);
            }
    }
}

TEST(Siren, InitializationRanges) {
    const sdfnet::SdfConfig cfg;  // width 64, L = 6
    ParamStore store;
    Rng rng(3);
    const sdfnet::SdfLayout layout = sdfnet::register_sdfnet(store, cfg, 128, rng);
    ASSERT_EQ(layout.siren_w.size(), 6u);
    ASSERT_EQ(layout.mod_w.size(), 5u);
    const auto max_abs = [](const Tensor& t) {
        double m = 0;
        for (double v : t.values()) m = std::max(m, std::fabs(v));
        return m;
    };
    const double first = max_abs(store[layout.siren_w[0]]);
    EXPECT_LE(first, 1.0 / 3.0);
    EXPECT_GT(first, 0.3);
    for (std::size_t l = 1; l < 6; ++l) {
        const double m = max_abs(store[layout.siren_w[l]]);
        EXPECT_LE(m, std::sqrt(6.0 / 64.0));
        EXPECT_GT(m, 0.25);
    }
    EXPECT_EQ(store[layout.siren_w[5]].shape(), (ad::Shape{1, 64}));
    for (const auto& l : layout.mod_w) EXPECT_EQ(max_abs(store[l[2]]), 0.0);
    for (const auto& l : layout.mod_b) EXPECT_EQ(max_abs(store[l[2]]), 0.0);
    EXPECT_EQ(sdfnet::shift_count(cfg), 320u);
}

TEST(Siren, FreshModulatorsGiveZeroShifts) {
    ParamStore store;
    Rng rng(4);
    const sdfnet::SdfLayout layout = sdfnet::register_sdfnet(store, small_sdf(), 5, rng);
    Tape tape;
    const std::vector<Var> vars = store.bind(tape);
    for (const Var& s : sdfnet::modulate(tape.constant(random(rng, 1, 5, -3, 3)), layout.bind_modulators(vars)))
        for (double v : s.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Siren, LatentEntersOnlyAsAdditiveShift) {
    Fixture f(small_sdf());
    Rng rng(5);
    const Tensor x = random(rng, 16, 3);
    const auto pre = [&](const Tensor& z) {
        Tape tape;
        const std::vector<Var> vars = f.store.bind(tape);
        const auto shifts = sdfnet::modulate(tape.constant(z), f.layout.bind_modulators(vars));
        sdfnet::SdfTrace trace;
        sdfnet::sdf_forward(tape, x, shifts, f.layout.bind_siren(vars), f.cfg.omega0, &trace);
        return trace.pre_activations[0];
    };
    const Tensor a = pre(random(rng, 1, 5));
    const Tensor b = pre(random(rng, 1, 5));
    bool any_change = false;
    for (std::size_t c = 0; c < f.cfg.hidden_width; ++c) {
        const double delta = a(0, c) - b(0, c);
        any_change = any_change || std::fabs(delta) > 1e-6;
        for (std::size_t r = 1; r < 16; ++r) EXPECT_NEAR(a(r, c) - b(r, c), delta, 1e-13);
    }
    EXPECT_TRUE(any_change);
}

TEST(Siren, ValueWithGradientIsBitIdentical) {
    Fixture f(small_sdf());
    Rng rng(6);
    const Tensor x = random(rng, 37, 3);
    Tape tape;
    const std::vector<Var> vars = f.store.bind(tape);
    const auto shifts = sdfnet::modulate(tape.constant(random(rng, 1, 5)), f.layout.bind_modulators(vars));
    const sdfnet::SirenWeights w = f.layout.bind_siren(vars);
    const Tensor plain = sdfnet::sdf_forward(tape, x, shifts, w, f.cfg.omega0).value();
    const sdfnet::SdfWithGrad both = sdfnet::sdf_forward_with_grad(tape, x, shifts, w, f.cfg.omega0);
    ASSERT_EQ(both.gradient.shape(), (ad::Shape{37, 3}));
    for (std::size_t r = 0; r < 37; ++r) EXPECT_EQ(both.value.value()(r, 0), plain(r, 0));
}

TEST(Siren, SpatialGradientMatchesFiniteDifferences) {
    Fixture f(small_sdf());
    Rng rng(7);
    const Tensor z = random(rng, 1, 5);
    const Tensor x = random(rng, 10, 3);
    const auto eval = [&](const Tensor& pts) { return sdfnet::batch_query(pts, z, f.store, f.layout, f.cfg); };
    Tape tape;
    const std::vector<Var> vars = f.store.bind(tape);
    const auto shifts = sdfnet::modulate(tape.constant(z), f.layout.bind_modulators(vars));
    const Tensor g = sdfnet::sdf_forward_with_grad(tape, x, shifts, f.layout.bind_siren(vars), f.cfg.omega0).gradient.value();
    const double h = 1e-5;
    for (std::size_t k = 0; k < 3; ++k) {
        Tensor xp = x, xm = x;
        for (std::size_t r = 0; r < 10; ++r) {
            xp(r, k) += h;
            xm(r, k) -= h;
        }
        const auto fp = eval(xp), fm = eval(xm);
        for (std::size_t r = 0; r < 10; ++r) EXPECT_NEAR(g(r, k), (fp[r] - fm[r]) / (2 * h), 1e-6);
    }
}

TEST(Siren, BatchQueryIndependentOfThreads) {
    Fixture f(small_sdf());
    Rng rng(8);
    const Tensor z = random(rng, 1, 5);
    const Tensor pts = random(rng, 5000, 3);
    const auto one = sdfnet::batch_query(pts, z, f.store, f.layout, f.cfg, 1);
    const auto four = sdfnet::batch_query(pts, z, f.store, f.layout, f.cfg, 4);
    ASSERT_EQ(one.size(), 5000u);
    for (std::size_t i = 0; i < one.size(); ++i) ASSERT_EQ(one[i], four[i]) << i;

    Tape tape;
    const std::vector<Var> vars = f.store.bind(tape);
    const auto shifts = sdfnet::modulate(tape.constant(z), f.layout.bind_modulators(vars));
    const Tensor direct = sdfnet::sdf_forward(tape, pts, shifts, f.layout.bind_siren(vars), f.cfg.omega0).value();
    for (std::size_t i = 0; i < one.size(); i += 97) EXPECT_EQ(one[i], direct(i, 0));
}

TEST(Siren, ParameterGradientsMatchFiniteDifferences) {
    gradcheck::SuiteOptions opts;
    opts.module = "sdfnet";
    opts.seed = 4;
    for (const auto& c : gradcheck::run_suite(opts)) EXPECT_LT(c.report.max_rel_err, gradcheck::kTolerance) << c.name;
}

TEST(Checkpoint, RoundTripIsExact) {
    model::ModelConfig mc;
    mc.encoder.window_T = 2;
    mc.sdf.hidden_width = 16;
    const model::Model m = model::Model::create(mc, 9);
    sdfnet::Checkpoint ck = model::to_checkpoint(m);
    ck.header["note"] = "extra";
    const auto path = std::filesystem::temp_directory_path() / "parco_ckpt_roundtrip.pcsd";
    sdfnet::save_checkpoint(path, ck);
    const sdfnet::Checkpoint back = sdfnet::load_checkpoint(path);
    EXPECT_EQ(back.header.at("note"), "extra");
    const model::Model m2 = model::from_checkpoint(back);
    EXPECT_EQ(m2.cfg.sdf.hidden_width, 16u);
    EXPECT_EQ(m2.cfg.encoder.window_T, 2u);
    ASSERT_EQ(m2.params.size(), m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        EXPECT_EQ(m2.params.name(i), m.params.name(i));
        EXPECT_EQ(m2.params[i].values().size(), m.params[i].values().size());
        for (std::size_t j = 0; j < m.params[i].values().size(); ++j)
            ASSERT_EQ(m2.params[i].values()[j], m.params[i].values()[j]);
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFiles) {
    const auto path = std::filesystem::temp_directory_path() / "parco_not_ckpt.pcsd";
    std::ofstream(path) << "hello world";
    EXPECT_THROW(sdfnet::load_checkpoint(path), std::runtime_error);
    std::filesystem::remove(path);
    EXPECT_THROW(sdfnet::load_checkpoint(path), std::runtime_error);
}
