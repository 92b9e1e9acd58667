#include "parco/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>

#include "parco/rng.hpp"

namespace parco::training {

using ad::Tensor;
using ad::Var;

void LossWeights::validate() const {
    const std::pair<const char*, double> fields[] = {
        {"lambda_surface", surface}, {"lambda_normal", normal}, {"lambda_eik", eikonal},
        {"lambda_z", latent},        {"alpha", alpha}};
    for (const auto& [name, v] : fields)
        if (!(v >= 0.0)) throw std::invalid_argument(std::string("loss weight ") + name + " must be non-negative");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_surface", w.surface}, {"lambda_normal", w.normal}, {"lambda_eik", w.eikonal},
         {"lambda_z", w.latent},        {"alpha", w.alpha}};
}

double focal(double prediction, double target, double alpha) {
    const double r = std::fabs(prediction - target);
    return std::pow(std::exp(std::min(r, kFocalClamp)) - 1.0, alpha) * r;
}

Var focal(Var residual, double alpha) {
    Var grow = ad::add_scalar(ad::exp(ad::clamp_max(residual, kFocalClamp)), -1.0);
    return ad::mul(ad::pow_scalar(grow, alpha), residual);
}

namespace {

std::size_t count_above(const Tensor& t, double limit) {
    return static_cast<std::size_t>(std::count_if(t.values().begin(), t.values().end(), [limit](double v) { return v > limit; }));
}

}  // namespace

SurfaceTerms surface_loss(Var values, Var gradients, const Tensor& normals, const LossWeights& w) {
    const std::size_t n = values.shape().rows;
    if (values.shape().cols != 1 || gradients.shape() != ad::Shape{n, 3} || normals.shape() != ad::Shape{n, 3})
        throw ad::ShapeError("surface_loss: expected N x 1 values with N x 3 gradients and normals, got " +
                             values.shape().str() + ", " + gradients.shape().str() + ", " + normals.shape().str());
    ad::Tape& tape = *values.tape;
    SurfaceTerms out;

    Var r_zero = ad::abs(values);
    out.clamped += count_above(r_zero.value(), kFocalClamp);
    out.zero_level = ad::scale(ad::reduce_mean(focal(r_zero, w.alpha)), w.surface);

    Var norm = ad::l2_norm_rows(gradients);
    for (double v : norm.value().values()) out.guarded += v < kGradEps ? 1 : 0;
    Var dot = ad::reduce_sum_last_axis(ad::mul(gradients, tape.constant(normals)));
    Var cosine = ad::div(dot, ad::add_scalar(norm, kGradEps));
    Var r_normal = ad::abs(ad::add_scalar(cosine, -1.0));
    out.clamped += count_above(r_normal.value(), kFocalClamp);
    out.normal = ad::scale(ad::reduce_mean(focal(r_normal, w.alpha)), w.normal);

    out.total = ad::add(out.zero_level, out.normal);
    return out;
}

Var eikonal_loss(Var gradients) {
    if (gradients.shape().cols != 3) throw ad::ShapeError("eikonal_loss: expected N x 3, got " + gradients.shape().str());
    return ad::reduce_mean(ad::abs(ad::add_scalar(ad::l2_norm_rows(gradients), -1.0)));
}

Var latent_loss(Var z) { return ad::reduce_sum(ad::square(z)); }

Var total_loss(Var surface, Var eikonal, Var latent, const LossWeights& w) {
    return ad::add(ad::add(surface, ad::scale(eikonal, w.eikonal)), ad::scale(latent, w.latent));
}

double total_loss(double surface, double eikonal, double latent, const LossWeights& w) {
    return surface + w.eikonal * eikonal + w.latent * latent;
}

bool LossParts::finite() const {
    return std::isfinite(zero_level) && std::isfinite(normal) && std::isfinite(surface) && std::isfinite(eikonal) &&
           std::isfinite(latent) && std::isfinite(total);
}

void to_json(nlohmann::json& j, const LossParts& p) {
    j = {{"total", p.total},   {"surface", p.surface}, {"zero_level", p.zero_level}, {"normal", p.normal},
         {"eikonal", p.eikonal}, {"latent", p.latent}, {"guarded", p.guarded},       {"clamped", p.clamped}};
}

// ---- queries --------------------------------------------------------------

QueryBatch sample_queries(const data::CompleteFrame& frame, std::size_t n_surface, std::size_t n_queries,
                          std::uint64_t seed) {
    const std::size_t n = frame.points.size();
    if (n == 0) throw std::invalid_argument("sample_queries: empty frame");
    if (n_surface == 0 || n_queries == 0) throw std::invalid_argument("sample_queries: counts must be positive");
    if (frame.normals.size() != n) throw std::invalid_argument("sample_queries: frame has no normals");
    Rng rng(seed);
    const auto pick = [&] { return static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1)); };

    QueryBatch b;
    b.surface = Tensor(n_surface, 3);
    b.normals = Tensor(n_surface, 3);
    std::vector<std::size_t> rows(n_surface);
    if (n >= n_surface) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < n_surface; ++i) {
            const auto j = static_cast<std::size_t>(
                uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
            std::swap(idx[i], idx[j]);
            rows[i] = idx[i];
        }
    } else {
        for (auto& r : rows) r = pick();
    }
    for (std::size_t i = 0; i < n_surface; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            b.surface(i, k) = frame.points[rows[i]][static_cast<Eigen::Index>(k)];
            b.normals(i, k) = frame.normals[rows[i]][static_cast<Eigen::Index>(k)];
        }

    b.queries = Tensor(n_queries, 3);
    const std::size_t n_uniform = n_queries / 2;
    for (std::size_t i = 0; i < n_uniform; ++i)
        for (std::size_t k = 0; k < 3; ++k) b.queries(i, k) = uniform(rng, -kQueryExtent, kQueryExtent);
    for (std::size_t i = n_uniform; i < n_queries; ++i) {
        const data::Point& p = frame.points[pick()];
        for (std::size_t k = 0; k < 3; ++k)
            b.queries(i, k) = std::clamp(p[static_cast<Eigen::Index>(k)] + normal(rng, 0.0, kQueryNoise), -kQueryExtent,
                                         kQueryExtent);
    }
    return b;
}

// ---- Adam -----------------------------------------------------------------

AdamState AdamState::zeros_like(std::span<const Tensor> params) {
    AdamState s;
    for (const Tensor& p : params) {
        s.m.emplace_back(p.rows(), p.cols());
        s.v.emplace_back(p.rows(), p.cols());
    }
    return s;
}

void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
        throw std::invalid_argument("adam_update: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape())
            throw ad::ShapeError("adam_update: shape mismatch for parameter " + std::to_string(i));
    const double t = static_cast<double>(state.updates + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].values();
        auto g = grads[i].values();
        auto m = state.m[i].values();
        auto v = state.v[i].values();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    ++state.updates;
}

// ---- windows and steps ----------------------------------------------------

std::vector<Tensor> build_window(const data::Sequence& seq, std::size_t t_end, std::size_t window,
                                 std::size_t points_per_frame, std::uint64_t seed) {
    if (window == 0) throw std::invalid_argument("build_window: window must be positive");
    if (t_end >= seq.frames.size() || t_end + 1 < window)
        throw std::out_of_range("build_window: end index " + std::to_string(t_end) + " invalid for window " +
                                std::to_string(window) + " over " + std::to_string(seq.frames.size()) + " frames");
    constexpr int kMaxRedraws = 100;
    std::vector<Tensor> frames;
    for (std::size_t i = t_end + 1 - window; i <= t_end; ++i) {
        const std::uint64_t frame_seed = derive_seed(seed, i);
        data::PartialFrame partial;
        for (int attempt = 0; attempt < kMaxRedraws && partial.empty(); ++attempt)
            partial = data::augment(seq.frames[i],
                                    attempt == 0 ? frame_seed : derive_seed(frame_seed, 1000 + static_cast<std::uint64_t>(attempt)));
        if (partial.empty()) throw std::runtime_error("build_window: every augmentation of frame " + std::to_string(i) + " was empty");
        frames.push_back(data::to_tensor(data::resample_fixed(partial.points, points_per_frame, derive_seed(frame_seed, 2))));
    }
    return frames;
}

namespace {

Tensor stack_rows(const Tensor& a, const Tensor& b) {
    Tensor out(a.rows() + b.rows(), 3);
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

std::vector<std::uint32_t> row_range(std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> r(end - begin);
    std::iota(r.begin(), r.end(), static_cast<std::uint32_t>(begin));
    return r;
}

}  // namespace

Objective objective(const model::Model& model, const model::BoundModel& b, ad::Tape& tape,
                    std::span<const Tensor> window, const QueryBatch& batch, const LossWeights& w) {
    if (batch.surface.cols() != 3 || batch.queries.cols() != 3) throw ad::ShapeError("query batch must be N x 3");
    Objective f;
    f.z = model::encode(model, b, tape, window);
    const std::vector<Var> shifts = sdfnet::modulate(f.z, b.mods);
    const std::size_t s = batch.surface.rows();
    const std::size_t q = batch.queries.rows();
    const sdfnet::SdfWithGrad out =
        sdfnet::sdf_forward_with_grad(tape, stack_rows(batch.surface, batch.queries), shifts, b.siren, model.cfg.sdf.omega0);

    const std::vector<std::uint32_t> surf_rows = row_range(0, s);
    const SurfaceTerms st = surface_loss(ad::gather_rows(out.value, surf_rows), ad::gather_rows(out.gradient, surf_rows),
                                         batch.normals, w);
    Var eik = eikonal_loss(ad::gather_rows(out.gradient, row_range(s, s + q)));
    Var lat = latent_loss(f.z);
    f.total = total_loss(st.total, eik, lat, w);

    f.parts.zero_level = st.zero_level.value().item();
    f.parts.normal = st.normal.value().item();
    f.parts.surface = st.total.value().item();
    f.parts.eikonal = eik.value().item();
    f.parts.latent = lat.value().item();
    f.parts.total = f.total.value().item();
    f.parts.guarded = st.guarded;
    f.parts.clamped = st.clamped;
    return f;
}

StepResult evaluate_step(const model::Model& model, std::span<const Tensor> window, const QueryBatch& batch,
                         const LossWeights& w) {
    ad::Tape tape(false);
    const model::BoundModel b = model::bind(model, tape);
    const Objective f = objective(model, b, tape, window, batch, w);
    return {f.parts, std::sqrt(f.parts.latent), f.parts.finite()};
}

StepResult train_step(model::Model& model, AdamState& adam, std::span<const Tensor> window, const QueryBatch& batch,
                      const LossWeights& w, const AdamConfig& cfg) {
    ad::Tape tape;
    const model::BoundModel b = model::bind(model, tape);
    const Objective f = objective(model, b, tape, window, batch, w);
    StepResult r{f.parts, std::sqrt(f.parts.latent), false};
    if (!f.parts.finite()) return r;

    tape.backward(f.total);
    std::vector<Tensor> grads;
    grads.reserve(b.vars.size());
    for (Var v : b.vars) {
        grads.push_back(tape.grad(v));
        if (!grads.back().all_finite()) return r;
    }
    adam_update(model.params.values(), grads, adam, cfg);
    r.applied = true;
    return r;
}

void train_loop(model::Model& model, TrainState& state, std::span<const data::Sequence> sequences,
                const TrainConfig& cfg, const LossWeights& w, const LoopHooks& hooks) {
    if (sequences.empty()) throw std::invalid_argument("train_loop: no training sequences");
    const std::size_t window = model.cfg.encoder.window_T;
    for (const data::Sequence& s : sequences)
        if (s.frames.size() < window)
            throw std::invalid_argument("train_loop: sequence with " + std::to_string(s.frames.size()) +
                                        " frames is shorter than the window " + std::to_string(window));
    if (state.adam.m.empty()) state.adam = AdamState::zeros_like(model.params.values());

    std::size_t bad_streak = 0;
    for (; state.step < cfg.steps; ++state.step) {
        const std::uint64_t step_seed = derive_seed(cfg.seed, state.step);
        Rng rng(step_seed);
        const auto seq_index = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(sequences.size()) - 1));
        const data::Sequence& seq = sequences[seq_index];
        const auto t = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(window) - 1,
                                                            static_cast<std::int64_t>(seq.frames.size()) - 1));
        const std::vector<Tensor> frames =
            build_window(seq, t, window, model.cfg.encoder.points_per_frame, derive_seed(step_seed, 1));
        const QueryBatch batch = sample_queries(seq.frames[t], cfg.surface_batch, cfg.query_batch, derive_seed(step_seed, 2));
        const StepResult r = train_step(model, state.adam, frames, batch, w, cfg.adam);

        if (hooks.log) {
            nlohmann::json rec = {{"step", state.step}, {"sequence", seq_index}, {"t", t}, {"applied", r.applied},
                                  {"z_norm", r.z_norm}};
            rec["loss"] = r.parts;
            hooks.log(rec);
        }
        bad_streak = r.applied ? 0 : bad_streak + 1;
        if (bad_streak >= kMaxNonFiniteSteps)
            throw NumericalFailure("non-finite loss for " + std::to_string(bad_streak) + " consecutive steps (last step " +
                                   std::to_string(state.step) + ")");
        if (hooks.checkpoint && cfg.checkpoint_interval > 0 && (state.step + 1) % cfg.checkpoint_interval == 0 &&
            state.step + 1 < cfg.steps) {
            TrainState snapshot = state;
            ++snapshot.step;
            hooks.checkpoint(snapshot);
        }
    }
}

sdfnet::Checkpoint training_checkpoint(const model::Model& model, const TrainState& state) {
    sdfnet::Checkpoint c = model::to_checkpoint(model);
    if (!state.adam.m.empty()) {
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            c.names.push_back("adam.m." + model.params.name(i));
            c.tensors.push_back(state.adam.m[i]);
        }
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            c.names.push_back("adam.v." + model.params.name(i));
            c.tensors.push_back(state.adam.v[i]);
        }
    }
    c.header["train"] = {{"step", state.step}, {"adam_updates", state.adam.updates}};
    return c;
}

TrainState load_train_state(const sdfnet::Checkpoint& ckpt, const model::Model& model) {
    TrainState s;
    if (!ckpt.header.contains("train")) return s;
    s.step = ckpt.header.at("train").at("step").get<std::size_t>();
    s.adam.updates = ckpt.header.at("train").at("adam_updates").get<std::uint64_t>();
    std::unordered_map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) by_name[ckpt.names[i]] = i;
    if (!by_name.count("adam.m." + model.params.name(0))) {
        s.adam = AdamState::zeros_like(model.params.values());
        return s;
    }
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        for (const char* which : {"adam.m.", "adam.v."}) {
            const auto it = by_name.find(which + model.params.name(i));
            if (it == by_name.end()) throw std::runtime_error(std::string("checkpoint is missing ") + which + model.params.name(i));
            const Tensor& t = ckpt.tensors[it->second];
            if (t.shape() != model.params[i].shape())
                throw std::runtime_error("optimizer tensor shape mismatch for " + model.params.name(i));
            (which[5] == 'm' ? s.adam.m : s.adam.v).push_back(t);
        }
    }
    return s;
}

}  // namespace parco::training
