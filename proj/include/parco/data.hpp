#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"

// Synthetic deformable-torus sequences, occlusion augmentation and the
// on-disk point-cloud formats (ASCII PLY frames + sequence.json manifest).
namespace parco::data {

using Point = Eigen::Vector3d;
using PointList = std::vector<Point>;

struct TorusShape {
    double major_radius = 1.0;        // centerline radius R
    double minor_radius = 1.0 / 3.0;  // tube radius r
};

/// Deformation state at one time step: stretch along x, bend about y (rad per
/// unit length), twist about x (rad per unit length).
struct DeformationParams {
    double stretch = 1.0;
    double bend = 0.0;
    double twist = 0.0;
};

inline constexpr double kStretchMin = 0.7, kStretchMax = 1.4;
inline constexpr double kBendLimit = 0.8;
inline constexpr double kTwistLimit = 1.2;

struct Sinusoid {
    double amplitude = 0.0;
    double cycles = 1.0;  // full periods over the normalized time range [0, 1)
    double phase = 0.0;
};

/// center + sum of at most three sinusoids in normalized time.
struct ChannelTrajectory {
    double center = 0.0;
    std::vector<Sinusoid> terms;

    double at(double tau) const;
};

struct DeformationTrajectory {
    ChannelTrajectory stretch{1.0, {}};
    ChannelTrajectory bend{0.0, {}};
    ChannelTrajectory twist{0.0, {}};

    DeformationParams at(double tau) const;

    static DeformationTrajectory identity() { return {}; }
    /// Random smooth trajectory whose channels stay inside their documented
    /// ranges; amplitude_scale in [0, 1] shrinks the excursions.
    static DeformationTrajectory random(std::uint64_t seed, double amplitude_scale = 1.0);
};

void to_json(nlohmann::json& j, const ChannelTrajectory& c);
void from_json(const nlohmann::json& j, ChannelTrajectory& c);
void to_json(nlohmann::json& j, const DeformationParams& p);
void from_json(const nlohmann::json& j, DeformationParams& p);
void to_json(nlohmann::json& j, const DeformationTrajectory& t);
void from_json(const nlohmann::json& j, DeformationTrajectory& t);

/// twist o bend o stretch applied to a rest-frame point.
Point warp(const Point& p, const DeformationParams& d);
Eigen::Matrix3d warp_jacobian(const Point& p, const DeformationParams& d);

/// Rest torus surface point and outward normal at parameters (u, v).
Point torus_point(double u, double v, const TorusShape& shape = {});
Point torus_normal(double u, double v);

class JacobianRejected : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CompleteFrame {
    PointList points;
    PointList normals;
    int t = 0;
    DeformationParams params;
};

/// Samples (u, v) uniformly on the rest torus, warps points, and maps normals
/// by cof(J) n. Throws JacobianRejected when det J <= 0 at any sample.
CompleteFrame sample_torus_frame(const DeformationParams& params, int t, std::size_t n_points, std::uint64_t seed,
                                 const TorusShape& shape = {});

/// Exact signed distance to the rest torus (negative inside the tube).
double analytic_torus_sdf(const Point& x, double major_radius = 1.0, double minor_radius = 1.0 / 3.0);
/// Closed-form gradient of analytic_torus_sdf; undefined on the medial axis.
Point analytic_torus_sdf_gradient(const Point& x, double major_radius = 1.0, double minor_radius = 1.0 / 3.0);

struct Normalization {
    Point center = Point::Zero();
    double scale = 1.0;  // normalized = (p - center) * scale

    Point apply(const Point& p) const { return (p - center) * scale; }
};

struct GenerationConfig {
    std::size_t n_frames = 8;
    std::size_t n_points = 2048;
    double amplitude_scale = 1.0;
    bool identity = false;  // zero deformation in every frame
    TorusShape torus;
    double fill = 0.9;  // largest half-extent maps to this value
};

struct Sequence {
    std::vector<CompleteFrame> frames;
    Normalization normalization;
    std::uint64_t seed = 0;
    DeformationTrajectory trajectory;
    TorusShape torus;
};

/// Deterministic in (cfg, seed). Frames share one normalization that maps the
/// sequence's bounding box into [-fill, fill]^3.
Sequence generate_sequence(const GenerationConfig& cfg, std::uint64_t seed);

struct SphereMask {
    Point center;
    double radius = 0.0;
};

struct PartialFrame {
    PointList points;
    std::vector<std::uint32_t> source_index;  // rows of the source CompleteFrame
    int t = 0;
    Point view = Point::Zero();
    std::vector<SphereMask> masks;

    bool empty() const { return points.empty(); }
};

inline constexpr int kMinMasks = 2, kMaxMasks = 6;
inline constexpr double kMinMaskRadius = 0.15, kMaxMaskRadius = 0.25;

/// Keeps exactly the points whose normals satisfy n . v < 0.
PartialFrame visibility_mask(const CompleteFrame& frame, const Point& view);
/// Removes points inside K ~ U{2..6} balls centered on retained points with
/// radii ~ U[0.15, 0.25]. An empty result is returned as-is; callers decide.
PartialFrame apply_spherical_masks(const PartialFrame& partial, std::uint64_t seed);
/// Visibility masking with v ~ U(S^2) followed by spherical masking.
PartialFrame augment(const CompleteFrame& frame, std::uint64_t seed);

/// Fixed-size resampling: without replacement when enough points exist,
/// otherwise with replacement.
PointList resample_fixed(const PointList& points, std::size_t m, std::uint64_t seed);

ad::Tensor to_tensor(const PointList& points);

// ---- files ----------------------------------------------------------------

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct PlyCloud {
    PointList points;
    PointList normals;  // empty when the file carries no normals
};

void save_frame_ply(const std::filesystem::path& path, const PointList& points, const PointList* normals = nullptr);
PlyCloud load_frame_ply(const std::filesystem::path& path);

inline constexpr int kManifestVersion = 1;

/// Writes frame_XXXX.ply files plus sequence.json into dir.
void save_sequence(const std::filesystem::path& dir, const Sequence& seq);
Sequence load_sequence(const std::filesystem::path& dir);

/// "%.17g" formatting used by every text format in the project.
std::string format_double(double v);

}  // namespace parco::data
