#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"
#include "parco/params.hpp"

// FiLM-conditioned SIREN. Modulator networks map the latent code to one
// additive shift per hidden sine layer; the scaling factor omega0 multiplies
// only the first layer's pre-activation:
//   h1 = sin(omega0 W1 x + b1 + beta1)
//   hl = sin(Wl h(l-1) + bl + betal),  l = 2..L-1
//   d  = WL h(L-1) + bL
namespace parco::sdfnet {

struct SdfConfig {
    std::size_t hidden_width = 64;     // W
    std::size_t layers = 6;            // L: L-1 sine layers + linear output
    std::size_t modulator_width = 64;  // H
    double omega0 = 8.0;
};

void to_json(nlohmann::json& j, const SdfConfig& c);

struct SirenWeights {
    std::vector<ad::Var> weight;  // layer l: out x in
    std::vector<ad::Var> bias;    // layer l: 1 x out
};

struct ModulatorWeights {
    // per modulated layer: three affine maps d -> H -> H -> W (ReLU between)
    std::vector<std::array<ad::Var, 3>> weight;
    std::vector<std::array<ad::Var, 3>> bias;
};

struct SdfLayout {
    std::vector<std::size_t> siren_w, siren_b;
    std::vector<std::array<std::size_t, 3>> mod_w, mod_b;

    SirenWeights bind_siren(std::span<const ad::Var> vars) const;
    ModulatorWeights bind_modulators(std::span<const ad::Var> vars) const;
};

/// Registers SIREN ("siren.") and modulator ("modulator.") parameters.
/// Modulator output layers start at zero so training begins from the
/// unconditioned SIREN.
SdfLayout register_sdfnet(ParamStore& store, const SdfConfig& cfg, std::size_t latent_dim, Rng& rng);

/// beta_l = G_l(z) for l = 1..L-1; each shift is 1 x W.
std::vector<ad::Var> modulate(ad::Var z, const ModulatorWeights& mods);

/// Pre-activations of every sine layer, captured when requested.
struct SdfTrace {
    std::vector<ad::Tensor> pre_activations;
};

/// Signed distance at each row of x (N x 3). Returns N x 1.
ad::Var sdf_forward(ad::Tape& tape, const ad::Tensor& x, std::span<const ad::Var> shifts, const SirenWeights& w,
                    double omega0, SdfTrace* trace = nullptr);

struct SdfWithGrad {
    ad::Var value;     // N x 1, bit-identical to sdf_forward
    ad::Var gradient;  // N x 3, d value / d x, differentiable w.r.t. all weights
};

SdfWithGrad sdf_forward_with_grad(ad::Tape& tape, const ad::Tensor& x, std::span<const ad::Var> shifts,
                                  const SirenWeights& w, double omega0);

/// Evaluates the conditioned field at every grid point (rows of `points`,
/// N x 3) in order. The shifts are computed once from z and shared by all
/// chunks; chunks are independent and may run on `threads` workers.
std::vector<double> batch_query(const ad::Tensor& points, const ad::Tensor& z, const ParamStore& params,
                                const SdfLayout& layout, const SdfConfig& cfg, std::size_t threads = 1);

/// Number of per-instance conditioning values: (L - 1) * W.
constexpr std::size_t shift_count(const SdfConfig& c) { return (c.layers - 1) * c.hidden_width; }

// ---- checkpoint container -------------------------------------------------
//
// "PCSD" | u32 version | u64 header length | JSON header | f64 payload (LE)
// The header carries "tensors": [{name, shape, offset}] with byte offsets
// relative to the payload start, plus free-form metadata.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json header;  // metadata; "tensors" is managed by save/load
    std::vector<std::string> names;
    std::vector<ad::Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace parco::sdfnet
