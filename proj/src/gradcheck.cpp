#include "parco/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "parco/data.hpp"
#include "parco/encoder.hpp"
#include "parco/model.hpp"
#include "parco/rng.hpp"
#include "parco/sdfnet.hpp"
#include "parco/training.hpp"

namespace parco::gradcheck {

namespace {

using ad::Tape;
using ad::Tensor;
using ad::Var;

struct Case {
    std::string name;
    std::vector<Tensor> params;
    ad::LossBuilder fn;
};

Tensor random(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (double& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

// Magnitudes in [lo, hi] with random signs: keeps kinks at 0 out of reach of the FD step.
Tensor away_from_zero(Rng& rng, std::size_t r, std::size_t c, double lo = 0.1, double hi = 1.0) {
    Tensor t(r, c);
    for (double& v : t.values()) v = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, lo, hi);
    return t;
}

// Scalar read-out with fixed random weights so every output entry matters.
Var weighted(Tape& tape, Var y, std::uint64_t seed) {
    Rng rng(seed);
    return ad::reduce_sum(ad::mul(y, tape.constant(random(rng, y.shape().rows, y.shape().cols))));
}

std::vector<Case> autodiff_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Case> cs;
    auto unary_case = [&](std::string name, Tensor x, std::function<Var(Var)> op) {
        const std::uint64_t ws = rng();
        cs.push_back({std::move(name), {std::move(x)}, [op, ws](Tape& t, std::span<const Var> v) {
                          return weighted(t, op(v[0]), ws);
                      }});
    };
    auto binary_case = [&](std::string name, Tensor a, Tensor b, std::function<Var(Var, Var)> op) {
        const std::uint64_t ws = rng();
        cs.push_back({std::move(name), {std::move(a), std::move(b)}, [op, ws](Tape& t, std::span<const Var> v) {
                          return weighted(t, op(v[0], v[1]), ws);
                      }});
    };

    binary_case("matmul", random(rng, 4, 5), random(rng, 5, 3), [](Var a, Var b) { return ad::matmul(a, b); });
    binary_case("matmul_transposed", random(rng, 4, 5), random(rng, 3, 5),
                [](Var a, Var b) { return ad::matmul(a, b, ad::Trans::b); });
    binary_case("add", random(rng, 4, 3), random(rng, 4, 3), [](Var a, Var b) { return ad::add(a, b); });
    binary_case("add_row_broadcast", random(rng, 4, 3), random(rng, 1, 3), [](Var a, Var b) { return ad::add(a, b); });
    binary_case("sub", random(rng, 4, 3), random(rng, 1, 3), [](Var a, Var b) { return ad::sub(a, b); });
    binary_case("mul", random(rng, 4, 3), random(rng, 4, 3), [](Var a, Var b) { return ad::mul(a, b); });
    binary_case("div", random(rng, 4, 3), random(rng, 4, 3, 0.5, 1.5), [](Var a, Var b) { return ad::div(a, b); });
    unary_case("scale", random(rng, 4, 3), [](Var a) { return ad::scale(a, -2.5); });
    unary_case("add_scalar", random(rng, 4, 3), [](Var a) { return ad::square(ad::add_scalar(a, 0.75)); });
    unary_case("sin", random(rng, 4, 3, -3.0, 3.0), [](Var a) { return ad::sin(a); });
    unary_case("cos", random(rng, 4, 3, -3.0, 3.0), [](Var a) { return ad::cos(a); });
    unary_case("exp", random(rng, 4, 3), [](Var a) { return ad::exp(a); });
    unary_case("relu", away_from_zero(rng, 4, 3), [](Var a) { return ad::relu(a); });
    unary_case("square", random(rng, 4, 3), [](Var a) { return ad::square(a); });
    unary_case("abs", away_from_zero(rng, 4, 3), [](Var a) { return ad::abs(a); });
    unary_case("sqrt", random(rng, 4, 3, 0.2, 2.0), [](Var a) { return ad::sqrt(a); });
    unary_case("pow_scalar", random(rng, 4, 3, 0.2, 2.0), [](Var a) { return ad::pow_scalar(a, 2.5); });
    unary_case("clamp_max", away_from_zero(rng, 4, 3), [](Var a) { return ad::clamp_max(a, 0.0); });
    unary_case("softmax_rows", random(rng, 4, 5, -2.0, 2.0), [](Var a) { return ad::softmax_rows(a); });
    binary_case("concat_rows", random(rng, 2, 3), random(rng, 3, 3), [](Var a, Var b) {
        const std::array<Var, 2> parts{a, b};
        return ad::concat_rows(parts);
    });
    binary_case("concat_last_axis", random(rng, 4, 2), random(rng, 4, 3), [](Var a, Var b) {
        const std::array<Var, 2> parts{a, b};
        return ad::concat_last_axis(parts);
    });
    unary_case("gather_rows", random(rng, 5, 3), [](Var a) { return ad::gather_rows(a, {4, 0, 0, 2, 3, 4}); });
    unary_case("reduce_sum", random(rng, 4, 3), [](Var a) { return ad::square(ad::reduce_sum(a)); });
    unary_case("reduce_sum_last_axis", random(rng, 4, 3), [](Var a) { return ad::reduce_sum_last_axis(a); });
    unary_case("reduce_mean", random(rng, 4, 3), [](Var a) { return ad::square(ad::reduce_mean(a)); });
    {
        // distinct values per group, spaced well beyond the FD step
        Tensor x(6, 4);
        for (std::size_t c = 0; c < 4; ++c) {
            std::vector<double> vals{0.0, 0.25, 0.5};
            std::shuffle(vals.begin(), vals.end(), rng);
            std::vector<double> vals2{0.0, 0.25, 0.5};
            std::shuffle(vals2.begin(), vals2.end(), rng);
            for (std::size_t r = 0; r < 3; ++r) {
                x(r, c) = vals[r] + uniform(rng, -0.05, 0.05);
                x(r + 3, c) = vals2[r] + uniform(rng, -0.05, 0.05);
            }
        }
        unary_case("reduce_max_axis", x, [](Var a) { return ad::reduce_max_axis(a, 3); });
    }
    unary_case("l2_norm_rows", away_from_zero(rng, 4, 3, 0.3, 1.0), [](Var a) { return ad::l2_norm_rows(a); });
    return cs;
}

std::vector<std::string> indexed_names(const std::string& prefix, std::size_t n) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
    return names;
}

// Spatial Jacobian of a small dual network against central differences in x.
ad::GradReport spatial_check(std::size_t probes, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t width = 8, n = 12;
    std::vector<Tensor> w{random(rng, width, 3), random(rng, 1, width), random(rng, 1, width),
                          random(rng, width, width), random(rng, 1, width), random(rng, 1, width),
                          random(rng, 1, width), random(rng, 1, 1)};
    const double omega0 = 4.0;
    auto run = [&](const Tensor& x, bool with_grad, Tensor* grad) {
        Tape tape(false);
        std::vector<Var> v;
        for (const Tensor& t : w) v.push_back(tape.leaf(t));
        const std::vector<ad::DualLayer> layers{{ad::OpKind::matmul, v[0], v[1], v[2], omega0},
                                                {ad::OpKind::sin},
                                                {ad::OpKind::matmul, v[3], v[4], v[5], 1.0},
                                                {ad::OpKind::sin},
                                                {ad::OpKind::matmul, v[6], v[7], {}, 1.0}};
        ad::DualVar d = ad::dual_forward(tape, x, layers);
        if (with_grad) *grad = d.gradient().value();
        return d.value.value();
    };
    const Tensor x = random(rng, n, 3);
    Tensor analytic;
    run(x, true, &analytic);
    ad::GradReport r;
    r.params.push_back({"x", 0.0, 0.0, 0});
    double sum = 0.0;
    for (std::size_t p = 0; p < probes; ++p) {
        const auto row = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1));
        const auto k = static_cast<std::size_t>(uniform_int(rng, 0, 2));
        Tensor up = x, down = x;
        up(row, k) += kStep;
        down(row, k) -= kStep;
        const double fd = (run(up, false, nullptr)[row] - run(down, false, nullptr)[row]) / (2.0 * kStep);
        const double err = ad::relative_error(analytic(row, k), fd);
        r.max_rel_err = std::max(r.max_rel_err, err);
        sum += err;
    }
    r.probe_count = probes;
    r.mean_rel_err = probes ? sum / static_cast<double>(probes) : 0.0;
    r.params[0].max_rel_err = r.max_rel_err;
    r.params[0].mean_rel_err = r.mean_rel_err;
    r.params[0].probes = probes;
    return r;
}

Case dual_param_case(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t width = 8;
    std::vector<Tensor> w{random(rng, width, 3), random(rng, 1, width), random(rng, 1, width),
                          random(rng, width, width), random(rng, 1, width), random(rng, 1, width),
                          random(rng, 1, width), random(rng, 1, 1)};
    const Tensor x = random(rng, 10, 3);
    const std::uint64_t ws = rng();
    return {"dual_forward_params", w, [x, ws](Tape& t, std::span<const Var> v) {
                const std::vector<ad::DualLayer> layers{{ad::OpKind::matmul, v[0], v[1], v[2], 4.0},
                                                        {ad::OpKind::sin},
                                                        {ad::OpKind::matmul, v[3], v[4], v[5], 1.0},
                                                        {ad::OpKind::sin},
                                                        {ad::OpKind::matmul, v[6], v[7], {}, 1.0}};
                ad::DualVar d = ad::dual_forward(t, x, layers);
                return ad::add(weighted(t, d.value, ws), weighted(t, d.gradient(), ws + 1));
            }};
}

// Small model whose zero-initialized modulator outputs are replaced by random
// values, so the latent path carries gradient. Query and key weights are
// scaled up: at initialization the attention is almost uniform and their
// gradients sit near the finite-difference noise floor.
model::Model perturbed_model(const model::ModelConfig& cfg, std::uint64_t seed) {
    constexpr double kAttentionScale = 8.0;
    model::Model m = model::Model::create(cfg, seed);
    for (const auto& layer : m.enc.attention)
        for (std::size_t i : {layer[0], layer[1]})
            for (double& v : m.params[i].values()) v *= kAttentionScale;
    Rng rng(derive_seed(seed, 7));
    for (const auto& layer : m.sdf.mod_w) m.params[layer[2]] = random(rng, m.params[layer[2]].rows(), m.params[layer[2]].cols(), -0.1, 0.1);
    for (const auto& layer : m.sdf.mod_b) m.params[layer[2]] = random(rng, 1, m.params[layer[2]].cols(), -0.1, 0.1);
    return m;
}

std::vector<std::string> subset_names(const model::Model& m, const std::vector<std::size_t>& idx) {
    std::vector<std::string> names;
    for (std::size_t i : idx) names.push_back(m.params.name(i));
    return names;
}

data::Sequence small_sequence(std::size_t frames, std::uint64_t seed) {
    data::GenerationConfig g;
    g.n_frames = frames;
    g.n_points = 512;
    return data::generate_sequence(g, seed);
}

// Checks the full model objective restricted to the parameters in `subset`
// (others held fixed).
ad::GradReport model_check(const model::Model& m, const std::vector<std::size_t>& subset,
                           const std::function<Var(Tape&, const model::BoundModel&)>& loss, std::size_t probes,
                           std::uint64_t seed) {
    std::vector<Tensor> params;
    for (std::size_t i : subset) params.push_back(m.params[i]);
    const std::vector<std::string> names = subset_names(m, subset);
    auto fn = [&](Tape& tape, std::span<const Var> leaves) {
        std::vector<Var> vars(m.params.size());
        for (std::size_t i = 0; i < m.params.size(); ++i) vars[i] = tape.constant(m.params[i]);
        for (std::size_t j = 0; j < subset.size(); ++j) vars[subset[j]] = leaves[j];
        return loss(tape, model::bind(m, std::move(vars)));
    };
    return ad::finite_difference_check(fn, params, names, probes, kStep, seed);
}

std::vector<std::size_t> all_indices(const model::Model& m) {
    std::vector<std::size_t> idx(m.params.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

std::vector<std::size_t> with_prefix(const model::Model& m, const std::string& prefix) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.params.size(); ++i)
        if (m.params.name(i).rfind(prefix, 0) == 0) idx.push_back(i);
    return idx;
}

}  // namespace

void to_json(nlohmann::json& j, const CaseReport& c) {
    j = {{"module", c.module}, {"name", c.name}, {"passed", c.passed()}, {"requested", c.requested}, {"report", c.report}};
}

std::vector<CaseReport> run_suite(const SuiteOptions& options) {
    const auto& mods = module_names();
    if (options.module != "all" && std::find(mods.begin(), mods.end(), options.module) == mods.end())
        throw std::invalid_argument("unknown gradcheck module '" + options.module + "'");
    auto want = [&](const char* m) { return options.module == "all" || options.module == m; };
    std::vector<CaseReport> out;

    if (want("autodiff")) {
        for (Case& c : autodiff_cases(derive_seed(options.seed, 1))) {
            const auto names = indexed_names(c.name + ".in", c.params.size());
            out.push_back({"autodiff", c.name,
                           ad::finite_difference_check(c.fn, c.params, names, options.probes, kStep,
                                                       derive_seed(options.seed, 100 + out.size()))});
        }
    }
    if (want("dual")) {
        out.push_back({"dual", "spatial_jacobian", spatial_check(options.probes, derive_seed(options.seed, 2))});
        Case c = dual_param_case(derive_seed(options.seed, 3));
        const auto names = indexed_names("dual.w", c.params.size());
        out.push_back({"dual", c.name,
                       ad::finite_difference_check(c.fn, c.params, names, options.probes, kStep, derive_seed(options.seed, 4))});
    }

    // Tiny desk configuration: hidden width 16, M = 64, T = 2.
    model::ModelConfig cfg;
    cfg.encoder.points_per_frame = 64;
    cfg.encoder.window_T = 2;
    cfg.sdf.hidden_width = 16;
    cfg.sdf.modulator_width = 16;
    const model::Model m = perturbed_model(cfg, derive_seed(options.seed, 5));
    const data::Sequence seq = small_sequence(3, derive_seed(options.seed, 6));
    const std::vector<Tensor> window = training::build_window(seq, 2, 2, 64, derive_seed(options.seed, 8));
    const training::QueryBatch batch = training::sample_queries(seq.frames[2], 32, 32, derive_seed(options.seed, 9));

    if (want("encoder")) {
        const std::uint64_t ws = derive_seed(options.seed, 10);
        auto loss = [&](Tape& tape, const model::BoundModel& b) { return weighted(tape, model::encode(m, b, tape, window), ws); };
        out.push_back({"encoder", "latent_code", model_check(m, with_prefix(m, "encoder."), loss, options.probes,
                                                             derive_seed(options.seed, 11))});
    }
    if (want("sdfnet")) {
        Rng rng(derive_seed(options.seed, 12));
        const Tensor z = random(rng, 1, cfg.encoder.d, -0.5, 0.5);
        const Tensor x = random(rng, 16, 3, -1.2, 1.2);
        const std::uint64_t ws = derive_seed(options.seed, 13);
        auto loss = [&](Tape& tape, const model::BoundModel& b) {
            const auto shifts = sdfnet::modulate(tape.constant(z), b.mods);
            const sdfnet::SdfWithGrad r = sdfnet::sdf_forward_with_grad(tape, x, shifts, b.siren, cfg.sdf.omega0);
            return ad::add(weighted(tape, r.value, ws), weighted(tape, r.gradient, ws + 1));
        };
        std::vector<std::size_t> idx = with_prefix(m, "siren.");
        const std::vector<std::size_t> mod = with_prefix(m, "modulator");
        idx.insert(idx.end(), mod.begin(), mod.end());
        out.push_back({"sdfnet", "field_and_gradient", model_check(m, idx, loss, options.probes, derive_seed(options.seed, 14))});
    }
    if (want("loss")) {
        const training::LossWeights w;
        auto loss = [&](Tape& tape, const model::BoundModel& b) {
            return training::objective(m, b, tape, window, batch, w).total;
        };
        out.push_back({"loss", "total_objective", model_check(m, all_indices(m), loss, options.probes,
                                                              derive_seed(options.seed, 15))});
    }
    for (CaseReport& c : out) c.requested = options.probes;
    return out;
}

}  // namespace parco::gradcheck
