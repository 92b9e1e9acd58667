#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"
#include "parco/data.hpp"
#include "parco/model.hpp"
#include "parco/sdfnet.hpp"

// Training objective, query sampling, Adam, and the sliding-window loop.
//
//   L = L_surface + lambda_eik L_eik + lambda_z |z|^2
//   L_surface = mean_p [ lambda_surface focal(|f(p)|, 0)
//                      + lambda_normal  focal(<grad f / |grad f|, n_p>, 1) ]
//   focal(a, b) = (exp(|a - b|) - 1)^alpha |a - b|
namespace parco::training {

struct LossWeights {
    double surface = 3000.0;
    double normal = 50.0;
    double eikonal = 50.0;
    double latent = 0.001;
    double alpha = 2.0;

    void validate() const;  // throws std::invalid_argument on a negative weight
};

void to_json(nlohmann::json& j, const LossWeights& w);

/// Residuals above this value are clamped inside exp() only.
inline constexpr double kFocalClamp = 20.0;
/// Added to |grad f| before normalizing surface gradients.
inline constexpr double kGradEps = 1e-12;

double focal(double prediction, double target, double alpha);
/// Elementwise focal of non-negative residuals.
ad::Var focal(ad::Var residual, double alpha);

struct SurfaceTerms {
    ad::Var zero_level;  // mean lambda_surface * focal(|f|, 0)
    ad::Var normal;      // mean lambda_normal * focal(cos, 1)
    ad::Var total;       // zero_level + normal
    std::size_t guarded = 0;  // rows with |grad f| < kGradEps
    std::size_t clamped = 0;  // residuals clamped before exp
};

/// values: N x 1 field values at surface points, gradients: N x 3, normals: N x 3 unit.
SurfaceTerms surface_loss(ad::Var values, ad::Var gradients, const ad::Tensor& normals, const LossWeights& w);
/// mean | |grad f| - 1 | over rows of an N x 3 gradient matrix.
ad::Var eikonal_loss(ad::Var gradients);
/// |z|^2
ad::Var latent_loss(ad::Var z);
ad::Var total_loss(ad::Var surface, ad::Var eikonal, ad::Var latent, const LossWeights& w);
double total_loss(double surface, double eikonal, double latent, const LossWeights& w);

struct LossParts {
    double zero_level = 0.0;
    double normal = 0.0;
    double surface = 0.0;
    double eikonal = 0.0;
    double latent = 0.0;
    double total = 0.0;
    std::size_t guarded = 0;
    std::size_t clamped = 0;

    bool finite() const;
};

void to_json(nlohmann::json& j, const LossParts& p);

inline constexpr double kQueryExtent = 1.5;
inline constexpr double kQueryNoise = 0.05;

struct QueryBatch {
    ad::Tensor surface;  // S x 3
    ad::Tensor normals;  // S x 3
    ad::Tensor queries;  // Q x 3, inside [-1.5, 1.5]^3
};

/// Surface rows are a subsample of the frame (with replacement only when the
/// frame is smaller than n_surface). Queries: the first n_queries / 2 are
/// uniform in the box, the rest are frame points plus N(0, 0.05^2) noise,
/// clamped to the box.
QueryBatch sample_queries(const data::CompleteFrame& frame, std::size_t n_surface, std::size_t n_queries,
                          std::uint64_t seed);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<ad::Tensor> m, v;
    std::uint64_t updates = 0;

    static AdamState zeros_like(std::span<const ad::Tensor> params);
};

void adam_update(std::span<ad::Tensor> params, std::span<const ad::Tensor> grads, AdamState& state,
                 const AdamConfig& cfg);

/// Augmented, resampled M x 3 frames ending at t_end (oldest first). The
/// augmentation of frame i depends only on (seed, i); an empty draw is
/// redrawn with a derived seed.
std::vector<ad::Tensor> build_window(const data::Sequence& seq, std::size_t t_end, std::size_t window,
                                     std::size_t points_per_frame, std::uint64_t seed);

class NumericalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StepResult {
    LossParts parts;
    double z_norm = 0.0;
    bool applied = false;  // false when the loss or a gradient was non-finite
};

struct Objective {
    ad::Var total;
    ad::Var z;
    LossParts parts;
};

/// Full objective on an existing tape: encode the window, modulate, evaluate
/// field and spatial gradient at surface points and queries, combine terms.
Objective objective(const model::Model& model, const model::BoundModel& bound, ad::Tape& tape,
                    std::span<const ad::Tensor> window, const QueryBatch& batch, const LossWeights& w);

/// Loss of the current parameters without touching them.
StepResult evaluate_step(const model::Model& model, std::span<const ad::Tensor> window, const QueryBatch& batch,
                         const LossWeights& w);

/// One forward, one reverse pass and one Adam update. On a non-finite loss
/// or gradient the parameters and optimizer state are left unchanged.
StepResult train_step(model::Model& model, AdamState& adam, std::span<const ad::Tensor> window,
                      const QueryBatch& batch, const LossWeights& w, const AdamConfig& cfg);

struct TrainConfig {
    std::size_t steps = 1000;
    AdamConfig adam;
    std::size_t surface_batch = 512;
    std::size_t query_batch = 512;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
};

struct TrainState {
    AdamState adam;
    std::size_t step = 0;  // completed loop iterations
};

inline constexpr std::size_t kMaxNonFiniteSteps = 10;

struct LoopHooks {
    std::function<void(const nlohmann::json&)> log;            // one record per step
    std::function<void(const TrainState&)> checkpoint;         // at each interval
};

/// Runs steps state.step .. cfg.steps - 1. Step s draws everything from
/// derive_seed(cfg.seed, s), so a resumed run continues bit-exactly. Throws
/// NumericalFailure after kMaxNonFiniteSteps consecutive non-finite steps.
void train_loop(model::Model& model, TrainState& state, std::span<const data::Sequence> sequences,
                const TrainConfig& cfg, const LossWeights& w, const LoopHooks& hooks);

/// Model checkpoint plus optimizer moments ("adam.m." / "adam.v." tensors)
/// and loop position.
sdfnet::Checkpoint training_checkpoint(const model::Model& model, const TrainState& state);
TrainState load_train_state(const sdfnet::Checkpoint& ckpt, const model::Model& model);

}  // namespace parco::training
