#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "parco/autodiff.hpp"
#include "parco/data.hpp"
#include "parco/geometry.hpp"
#include "parco/model.hpp"

// Inference-side pipeline: window -> latent -> field grid -> mesh -> metrics.
namespace parco::eval {

struct ExtractionConfig {
    std::size_t grid_res = 64;
    double half_extent = 1.1;
    double iso = 0.0;
    std::size_t threads = 1;
};

geometry::ScalarGrid field_grid(const model::Model& model, const ad::Tensor& z, const ExtractionConfig& cfg);

struct Reconstruction {
    ad::Tensor z;
    geometry::ScalarGrid field;
    geometry::Mesh mesh;
};

Reconstruction reconstruct(const model::Model& model, std::span<const ad::Tensor> window, const ExtractionConfig& cfg);

/// Chamfer distance assigned to a frame whose mesh is empty: the diagonal of
/// the extraction box, an upper bound on any nearest-neighbor distance there.
double empty_mesh_chamfer(const ExtractionConfig& cfg);

geometry::FrameMetrics frame_metrics(const geometry::Mesh& mesh, const data::PointList& ground_truth, int t, int gt_genus,
                                     const ExtractionConfig& cfg);

/// d f / d x of the conditioned field at the rows of `points` (N x 3).
ad::Tensor field_gradients(const model::Model& model, const ad::Tensor& z, const ad::Tensor& points);

/// mean | |g_i| - 1 | over the rows of an N x 3 gradient matrix.
double eikonal_deviation(const ad::Tensor& gradients);

struct EvalOptions {
    ExtractionConfig extraction;
    std::uint64_t augment_seed = 0;
    std::size_t first = 0;       // earliest end index; raised to T - 1 when smaller
    std::size_t stride = 1;      // evaluate every stride-th end index
    std::size_t max_frames = 0;  // 0: no limit
};

/// End indices max(first, T-1), + stride, ... below n_frames (at most max_frames).
std::vector<std::size_t> eval_frames(std::size_t n_frames, std::size_t window, const EvalOptions& options);

using FrameCallback = std::function<void(std::size_t t, const Reconstruction&, const geometry::FrameMetrics&)>;

/// Genus ground truth is 1 for every torus frame. Windows use the same
/// augmentation seed scheme as training, keyed by options.augment_seed.
geometry::MetricsReport evaluate_sequence(const model::Model& model, const data::Sequence& seq, const EvalOptions& options,
                                          const FrameCallback& on_frame = {});

}  // namespace parco::eval
