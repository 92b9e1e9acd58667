#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"
#include "parco/encoder.hpp"
#include "parco/params.hpp"
#include "parco/sdfnet.hpp"

// The full conditioned model: temporal encoder, modulators and SIREN sharing
// one ParamStore.
namespace parco::model {

struct ModelConfig {
    encoder::EncoderConfig encoder;
    sdfnet::SdfConfig sdf;
    bool use_attention = true;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Readers for the JSON written by the matching to_json; missing keys keep
/// their defaults, unknown keys are ignored (strict checks live in config).
encoder::EncoderConfig encoder_config_from_json(const nlohmann::json& j);
sdfnet::SdfConfig sdf_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Model {
    ModelConfig cfg;
    ParamStore params;
    encoder::EncoderLayout enc;
    sdfnet::SdfLayout sdf;

    static Model create(const ModelConfig& cfg, std::uint64_t seed);
};

/// Parameters bound as leaves on one tape.
struct BoundModel {
    std::vector<ad::Var> vars;
    encoder::EncoderWeights enc;
    sdfnet::SirenWeights siren;
    sdfnet::ModulatorWeights mods;
};

BoundModel bind(const Model& model, ad::Tape& tape);
/// Wraps already-created leaves (one per parameter, registration order).
BoundModel bind(const Model& model, std::vector<ad::Var> vars);

/// z^t for a window of M x 3 frames ordered oldest to newest.
ad::Var encode(const Model& model, const BoundModel& bound, ad::Tape& tape, std::span<const ad::Tensor> window);

/// Inference-only latent code (1 x d).
ad::Tensor infer_latent(const Model& model, std::span<const ad::Tensor> window);

/// Signed distances at the rows of `points` for latent z.
std::vector<double> query(const Model& model, const ad::Tensor& z, const ad::Tensor& points, std::size_t threads = 1);

/// Parameters plus config header ("model" key); extra tensors/metadata may be
/// appended by the caller before saving.
sdfnet::Checkpoint to_checkpoint(const Model& model);
/// Rebuilds a model from a checkpoint; every model tensor must be present
/// with its registered shape.
Model from_checkpoint(const sdfnet::Checkpoint& ckpt);

}  // namespace parco::model
