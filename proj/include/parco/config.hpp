#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "parco/data.hpp"
#include "parco/evaluation.hpp"
#include "parco/model.hpp"
#include "parco/training.hpp"

// Run configuration: one JSON document with sections data, encoder, sdfnet,
// loss, optimizer, run and eval. Missing keys take the defaults below;
// unknown keys are rejected by name.
namespace parco::config {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataSection {
    std::size_t n_sequences = 5;
    std::size_t frames_per_sequence = 64;
    std::size_t n_points = 2048;
    std::uint64_t seed = 0;
    double amplitude_scale = 1.0;
    bool identity = false;
    double fill = 0.9;
};

struct RunSection {
    std::uint64_t seed = 0;  // training stream
    std::size_t surface_batch = 512;
    std::size_t query_batch = 512;
    std::size_t checkpoint_interval = 0;
    std::size_t holdout = 1;  // trailing sequences kept out of training
};

struct EvalSection {
    std::size_t grid_res = 64;
    double half_extent = 1.1;
    std::string cd_variant = geometry::kChamferVariant;
    std::uint64_t augment_seed = 0;
    std::size_t first = 0;
    std::size_t stride = 1;
    std::size_t max_frames = 0;
    double max_mean_cd = 0.05;  // --assert thresholds
    double min_tsr = 80.0;
};

struct RunConfig {
    DataSection data;
    model::ModelConfig model;
    training::LossWeights loss;
    training::AdamConfig adam;
    std::size_t steps = 2000;
    RunSection run;
    EvalSection eval;

    data::GenerationConfig generation() const;
    training::TrainConfig train() const;
    eval::EvalOptions eval_options(std::size_t threads) const;
};

/// Parses and validates; throws ConfigError naming the offending key.
RunConfig parse(const nlohmann::json& j);
RunConfig load(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

/// Writes the resolved configuration as config.json inside dir.
void echo(const RunConfig& c, const std::filesystem::path& dir);

}  // namespace parco::config
