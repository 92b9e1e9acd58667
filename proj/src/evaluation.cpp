#include "parco/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "parco/training.hpp"

namespace parco::eval {

using ad::Tensor;

geometry::ScalarGrid field_grid(const model::Model& model, const Tensor& z, const ExtractionConfig& cfg) {
    geometry::ScalarGrid grid = geometry::make_grid(cfg.grid_res, cfg.half_extent);
    grid.values = model::query(model, z, grid.points(), cfg.threads);
    return grid;
}

Reconstruction reconstruct(const model::Model& model, std::span<const Tensor> window, const ExtractionConfig& cfg) {
    Reconstruction r;
    r.z = model::infer_latent(model, window);
    r.field = field_grid(model, r.z, cfg);
    r.mesh = geometry::marching_cubes(r.field, cfg.iso);
    return r;
}

double empty_mesh_chamfer(const ExtractionConfig& cfg) { return 2.0 * cfg.half_extent * std::sqrt(3.0); }

geometry::FrameMetrics frame_metrics(const geometry::Mesh& mesh, const data::PointList& ground_truth, int t, int gt_genus,
                                     const ExtractionConfig& cfg) {
    geometry::FrameMetrics m;
    m.t = t;
    m.gt_genus = gt_genus;
    m.vertices = mesh.vertices.size();
    m.faces = mesh.faces.size();
    m.genus = geometry::genus(mesh);
    // an empty mesh has chi = 0, which would read as genus 1
    m.success = !mesh.empty() && m.genus == static_cast<double>(gt_genus);
    const geometry::ManifoldReport mr = geometry::manifold_check(mesh);
    m.genus_valid = !mr.empty && mr.closed && mr.orientable && m.genus >= 0.0 && m.genus == std::floor(m.genus);
    m.chamfer = mesh.vertices.empty() ? empty_mesh_chamfer(cfg) : geometry::chamfer(mesh.vertices, ground_truth, cfg.threads);
    return m;
}

ad::Tensor field_gradients(const model::Model& model, const ad::Tensor& z, const ad::Tensor& points) {
    ad::Tape tape(false);
    const model::BoundModel b = model::bind(model, tape);
    const auto shifts = sdfnet::modulate(tape.constant(z), b.mods);
    return sdfnet::sdf_forward_with_grad(tape, points, shifts, b.siren, model.cfg.sdf.omega0).gradient.value();
}

double eikonal_deviation(const ad::Tensor& gradients) {
    if (gradients.cols() != 3 || gradients.rows() == 0) throw ad::ShapeError("eikonal_deviation: expected N x 3, got " + gradients.shape().str());
    double sum = 0.0;
    for (std::size_t r = 0; r < gradients.rows(); ++r)
        sum += std::fabs(std::sqrt(gradients(r, 0) * gradients(r, 0) + gradients(r, 1) * gradients(r, 1) +
                                   gradients(r, 2) * gradients(r, 2)) -
                         1.0);
    return sum / static_cast<double>(gradients.rows());
}

std::vector<std::size_t> eval_frames(std::size_t n_frames, std::size_t window, const EvalOptions& options) {
    std::vector<std::size_t> out;
    const std::size_t stride = std::max<std::size_t>(1, options.stride);
    for (std::size_t t = std::max(options.first, window - 1); t < n_frames; t += stride) {
        if (options.max_frames && out.size() == options.max_frames) break;
        out.push_back(t);
    }
    return out;
}

geometry::MetricsReport evaluate_sequence(const model::Model& model, const data::Sequence& seq, const EvalOptions& options,
                                          const FrameCallback& on_frame) {
    constexpr int kTorusGenus = 1;
    const std::size_t window = model.cfg.encoder.window_T;
    geometry::MetricsReport report;
    for (std::size_t t : eval_frames(seq.frames.size(), window, options)) {
        const std::vector<Tensor> frames =
            training::build_window(seq, t, window, model.cfg.encoder.points_per_frame, options.augment_seed);
        const Reconstruction r = reconstruct(model, frames, options.extraction);
        const geometry::FrameMetrics m =
            frame_metrics(r.mesh, seq.frames[t].points, static_cast<int>(t), kTorusGenus, options.extraction);
        report.frames.push_back(m);
        if (on_frame) on_frame(t, r, m);
    }
    report.finalize();
    return report;
}

}  // namespace parco::eval
