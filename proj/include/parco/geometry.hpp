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
#include "parco/data.hpp"

// Iso-surface extraction and reconstruction metrics (Chamfer distance,
// Euler characteristic, genus, topology success rate).
namespace parco::geometry {

using data::Point;
using data::PointList;

/// Axis-aligned cubic grid of res^3 samples, x fastest.
struct ScalarGrid {
    std::size_t res = 0;
    Point lo = Point::Constant(-1.1);
    Point hi = Point::Constant(1.1);
    std::vector<double> values;

    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + res * (j + res * k); }
    Point point(std::size_t i, std::size_t j, std::size_t k) const;
    double voxel_size() const { return (hi.x() - lo.x()) / static_cast<double>(res - 1); }

    /// Grid sample positions as an (res^3) x 3 tensor in grid order.
    ad::Tensor points() const;
};

ScalarGrid make_grid(std::size_t res, double half_extent);

struct Mesh {
    PointList vertices;
    std::vector<std::array<std::uint32_t, 3>> faces;

    bool empty() const { return faces.empty(); }
    /// Unique undirected edges as sorted vertex pairs.
    std::vector<std::array<std::uint32_t, 2>> edges() const;
};

/// Classic 256-case marching cubes with linear edge interpolation. A corner
/// counts as inside when its value is below iso. Each sign-changing grid edge
/// yields exactly one shared vertex.
Mesh marching_cubes(const ScalarGrid& grid, double iso = 0.0);

long long euler_characteristic(const Mesh& mesh);
/// (2 - chi) / 2, applied literally whatever the mesh's connectivity.
double genus(const Mesh& mesh);

struct ManifoldReport {
    bool empty = false;
    bool closed = false;      // every edge on exactly two faces
    bool orientable = false;  // faces admit a consistent orientation
    std::size_t boundary_edges = 0;
    std::size_t nonmanifold_edges = 0;
    std::size_t components = 0;
};

ManifoldReport manifold_check(const Mesh& mesh);

/// Percentage of frames whose predicted genus equals the ground truth.
double tsr(std::span<const double> predicted_genus, std::span<const int> gt_genus);
/// Empty meshes never count as a success.
double tsr(std::span<const Mesh> meshes, std::span<const int> gt_genus);

/// Distance from each point of `from` to its nearest point in `to` (exact).
std::vector<double> nearest_distances(const PointList& from, const PointList& to, std::size_t threads = 1);

/// Symmetric mean nearest-neighbor Euclidean distance:
/// 0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|).
double chamfer(const PointList& a, const PointList& b, std::size_t threads = 1);

inline constexpr const char* kChamferVariant = "symmetric_mean_l2";

struct FrameMetrics {
    int t = 0;
    double chamfer = 0.0;
    double genus = 0.0;
    int gt_genus = 1;
    bool success = false;
    bool genus_valid = false;  // integral, non-negative, closed and orientable
    std::size_t vertices = 0;
    std::size_t faces = 0;
};

struct MetricsReport {
    std::vector<FrameMetrics> frames;
    double mean_cd = 0.0;
    double std_cd = 0.0;
    double tsr = 0.0;
    std::string cd_variant = kChamferVariant;

    void finalize();  // fills aggregates from frames
    std::string table() const;
};

void to_json(nlohmann::json& j, const FrameMetrics& f);
void to_json(nlohmann::json& j, const MetricsReport& r);

/// Wavefront OBJ (v / f records). With colors, vertices carry "v x y z r g b".
void write_obj(const std::filesystem::path& path, const Mesh& mesh, const std::vector<Point>* colors = nullptr);
Mesh read_obj(const std::filesystem::path& path);

/// Blue (low) to red (high) colors for per-vertex errors, scaled by `max_value`.
std::vector<Point> heatmap_colors(std::span<const double> values, double max_value);

}  // namespace parco::geometry
