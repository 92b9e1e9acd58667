#include "parco/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "parco/rng.hpp"

namespace parco::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

ChannelTrajectory random_channel(Rng& rng, double center, double half_range, double amplitude_scale) {
    ChannelTrajectory c;
    c.center = center;
    constexpr int kTerms = 3;
    for (int i = 0; i < kTerms; ++i) {
        Sinusoid s;
        // sum of |amplitude| <= half_range keeps the channel inside its range
        s.amplitude = amplitude_scale * half_range * uniform(rng, 0.5, 1.0) / kTerms;
        if (uniform(rng, 0.0, 1.0) < 0.5) s.amplitude = -s.amplitude;
        s.cycles = uniform(rng, 0.5, 2.5);
        s.phase = uniform(rng, 0.0, kTwoPi);
        c.terms.push_back(s);
    }
    return c;
}

std::string frame_file_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu.ply", i);
    return buf;
}

}  // namespace

double ChannelTrajectory::at(double tau) const {
    double v = center;
    for (const Sinusoid& s : terms) v += s.amplitude * std::sin(kTwoPi * s.cycles * tau + s.phase);
    return v;
}

DeformationParams DeformationTrajectory::at(double tau) const {
    return {stretch.at(tau), bend.at(tau), twist.at(tau)};
}

DeformationTrajectory DeformationTrajectory::random(std::uint64_t seed, double amplitude_scale) {
    Rng rng(seed);
    DeformationTrajectory t;
    const double s_center = 0.5 * (kStretchMin + kStretchMax);
    const double s_half = 0.5 * (kStretchMax - kStretchMin);
    t.stretch = random_channel(rng, s_center, s_half, amplitude_scale);
    t.bend = random_channel(rng, 0.0, kBendLimit, amplitude_scale);
    t.twist = random_channel(rng, 0.0, kTwistLimit, amplitude_scale);
    return t;
}

void to_json(nlohmann::json& j, const ChannelTrajectory& c) {
    j = {{"center", c.center}, {"terms", nlohmann::json::array()}};
    for (const Sinusoid& s : c.terms)
        j["terms"].push_back({{"amplitude", s.amplitude}, {"cycles", s.cycles}, {"phase", s.phase}});
}

void from_json(const nlohmann::json& j, ChannelTrajectory& c) {
    c.center = j.at("center").get<double>();
    c.terms.clear();
    for (const auto& t : j.at("terms"))
        c.terms.push_back({t.at("amplitude").get<double>(), t.at("cycles").get<double>(), t.at("phase").get<double>()});
}

void to_json(nlohmann::json& j, const DeformationParams& p) {
    j = {{"stretch", p.stretch}, {"bend", p.bend}, {"twist", p.twist}};
}

void from_json(const nlohmann::json& j, DeformationParams& p) {
    p.stretch = j.at("stretch").get<double>();
    p.bend = j.at("bend").get<double>();
    p.twist = j.at("twist").get<double>();
}

void to_json(nlohmann::json& j, const DeformationTrajectory& t) {
    j = {{"stretch", t.stretch}, {"bend", t.bend}, {"twist", t.twist}};
}

void from_json(const nlohmann::json& j, DeformationTrajectory& t) {
    t.stretch = j.at("stretch").get<ChannelTrajectory>();
    t.bend = j.at("bend").get<ChannelTrajectory>();
    t.twist = j.at("twist").get<ChannelTrajectory>();
}

// ---- warp -----------------------------------------------------------------

Point warp(const Point& p, const DeformationParams& d) {
    Point q(d.stretch * p.x(), p.y(), p.z());
    if (d.bend != 0.0) {
        const double a = d.bend * q.x();
        const double sa = std::sin(a), ca = std::cos(a);
        const double sh = std::sin(0.5 * a);
        // (1/b - z) sin(bx) and 1/b - (1/b - z) cos(bx), written without cancellation
        q = Point(sa / d.bend - q.z() * sa, q.y(), 2.0 * sh * sh / d.bend + q.z() * ca);
    }
    const double phi = d.twist * q.x();
    const double sp = std::sin(phi), cp = std::cos(phi);
    return {q.x(), q.y() * cp - q.z() * sp, q.y() * sp + q.z() * cp};
}

Eigen::Matrix3d warp_jacobian(const Point& p, const DeformationParams& d) {
    Eigen::Matrix3d js = Eigen::Matrix3d::Identity();
    js(0, 0) = d.stretch;
    const Point p1(d.stretch * p.x(), p.y(), p.z());

    const double a = d.bend * p1.x();
    const double sa = std::sin(a), ca = std::cos(a);
    const double k = 1.0 - d.bend * p1.z();
    Eigen::Matrix3d jb;
    jb << k * ca, 0.0, -sa,  //
        0.0, 1.0, 0.0,       //
        k * sa, 0.0, ca;

    const Point p2 = warp(p, {d.stretch, d.bend, 0.0});
    const double phi = d.twist * p2.x();
    const double sp = std::sin(phi), cp = std::cos(phi);
    Eigen::Matrix3d jt;
    jt << 1.0, 0.0, 0.0,                                             //
        d.twist * (-p2.y() * sp - p2.z() * cp), cp, -sp,             //
        d.twist * (p2.y() * cp - p2.z() * sp), sp, cp;
    return jt * jb * js;
}

Point torus_point(double u, double v, const TorusShape& shape) {
    const double ring = shape.major_radius + shape.minor_radius * std::cos(v);
    return {ring * std::cos(u), ring * std::sin(u), shape.minor_radius * std::sin(v)};
}

Point torus_normal(double u, double v) {
    return {std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v)};
}

CompleteFrame sample_torus_frame(const DeformationParams& params, int t, std::size_t n_points, std::uint64_t seed,
                                 const TorusShape& shape) {
    if (n_points < 64) throw std::invalid_argument("sample_torus_frame: n_points must be >= 64");
    Rng rng(seed);
    CompleteFrame f;
    f.t = t;
    f.params = params;
    f.points.reserve(n_points);
    f.normals.reserve(n_points);
    for (std::size_t i = 0; i < n_points; ++i) {
        const double u = uniform(rng, 0.0, kTwoPi);
        const double v = uniform(rng, 0.0, kTwoPi);
        const Point rest = torus_point(u, v, shape);
        const Eigen::Matrix3d jac = warp_jacobian(rest, params);
        const double det = jac.determinant();
        if (!(det > 0.0))
            throw JacobianRejected("warp Jacobian determinant " + format_double(det) + " at sample " +
                                   std::to_string(i));
        // cof(J) = det(J) J^{-T}
        const Point n = (det * jac.inverse().transpose() * torus_normal(u, v)).normalized();
        f.points.push_back(warp(rest, params));
        f.normals.push_back(n);
    }
    return f;
}

double analytic_torus_sdf(const Point& x, double major_radius, double minor_radius) {
    const double q = std::hypot(x.x(), x.y()) - major_radius;
    return std::hypot(q, x.z()) - minor_radius;
}

Point analytic_torus_sdf_gradient(const Point& x, double major_radius, double /*minor_radius*/) {
    const double rho = std::hypot(x.x(), x.y());
    const double q = rho - major_radius;
    const double len = std::hypot(q, x.z());
    return Point(q * x.x() / rho, q * x.y() / rho, x.z()) / len;
}

Sequence generate_sequence(const GenerationConfig& cfg, std::uint64_t seed) {
    if (cfg.n_frames == 0) throw std::invalid_argument("generate_sequence: n_frames must be positive");
    constexpr int kMaxRetries = 100;
    Sequence seq;
    seq.seed = seed;
    seq.torus = cfg.torus;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
        seq.trajectory = cfg.identity ? DeformationTrajectory::identity()
                                      : DeformationTrajectory::random(derive_seed(seed, 1'000'000 + attempt),
                                                                      cfg.amplitude_scale);
        seq.frames.clear();
        try {
            for (std::size_t t = 0; t < cfg.n_frames; ++t) {
                const double tau = static_cast<double>(t) / static_cast<double>(cfg.n_frames);
                seq.frames.push_back(sample_torus_frame(seq.trajectory.at(tau), static_cast<int>(t), cfg.n_points,
                                                        derive_seed(seed, t), cfg.torus));
            }
            ok = true;
        } catch (const JacobianRejected&) {
        }
    }
    if (!ok) throw GenerationError("no orientation-preserving trajectory after 100 retries");

    Point lo = Point::Constant(std::numeric_limits<double>::infinity());
    Point hi = -lo;
    for (const CompleteFrame& f : seq.frames)
        for (const Point& p : f.points) {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
    seq.normalization.center = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo).maxCoeff();
    seq.normalization.scale = cfg.fill / half;
    for (CompleteFrame& f : seq.frames)
        for (Point& p : f.points) p = seq.normalization.apply(p);
    return seq;
}

// ---- augmentation ---------------------------------------------------------

PartialFrame visibility_mask(const CompleteFrame& frame, const Point& view) {
    if (std::fabs(view.norm() - 1.0) > 1e-9) throw std::invalid_argument("visibility_mask: view direction is not unit");
    PartialFrame out;
    out.t = frame.t;
    out.view = view;
    for (std::size_t i = 0; i < frame.points.size(); ++i) {
        if (frame.normals[i].dot(view) < 0.0) {
            out.points.push_back(frame.points[i]);
            out.source_index.push_back(static_cast<std::uint32_t>(i));
        }
    }
    return out;
}

PartialFrame apply_spherical_masks(const PartialFrame& partial, std::uint64_t seed) {
    if (partial.empty()) throw std::invalid_argument("apply_spherical_masks: empty input");
    Rng rng(seed);
    const int count = static_cast<int>(uniform_int(rng, kMinMasks, kMaxMasks));
    std::vector<SphereMask> masks;
    for (int k = 0; k < count; ++k) {
        const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(partial.points.size()) - 1));
        masks.push_back({partial.points[idx], uniform(rng, kMinMaskRadius, kMaxMaskRadius)});
    }
    PartialFrame out;
    out.t = partial.t;
    out.view = partial.view;
    out.masks = partial.masks;
    out.masks.insert(out.masks.end(), masks.begin(), masks.end());
    for (std::size_t i = 0; i < partial.points.size(); ++i) {
        const Point& p = partial.points[i];
        const bool keep = std::all_of(masks.begin(), masks.end(),
                                      [&](const SphereMask& m) { return (p - m.center).norm() > m.radius; });
        if (keep) {
            out.points.push_back(p);
            out.source_index.push_back(partial.source_index.empty() ? static_cast<std::uint32_t>(i)
                                                                    : partial.source_index[i]);
        }
    }
    return out;
}

PartialFrame augment(const CompleteFrame& frame, std::uint64_t seed) {
    Rng rng(seed);
    const double z = uniform(rng, -1.0, 1.0);
    const double phi = uniform(rng, 0.0, kTwoPi);
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Point view = Point(s * std::cos(phi), s * std::sin(phi), z).normalized();
    PartialFrame visible = visibility_mask(frame, view);
    if (visible.empty()) return visible;
    return apply_spherical_masks(visible, derive_seed(seed, 1));
}

PointList resample_fixed(const PointList& points, std::size_t m, std::uint64_t seed) {
    if (points.empty()) throw std::invalid_argument("resample_fixed: empty input");
    Rng rng(seed);
    PointList out;
    out.reserve(m);
    if (points.size() >= m) {
        std::vector<std::uint32_t> idx(points.size());
        std::iota(idx.begin(), idx.end(), 0u);
        for (std::size_t i = 0; i < m; ++i) {
            const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i),
                                                                static_cast<std::int64_t>(idx.size()) - 1));
            std::swap(idx[i], idx[j]);
            out.push_back(points[idx[i]]);
        }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            out.push_back(points[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(points.size()) - 1))]);
    }
    return out;
}

ad::Tensor to_tensor(const PointList& points) {
    ad::Tensor t(points.size(), 3);
    for (std::size_t i = 0; i < points.size(); ++i)
        for (int k = 0; k < 3; ++k) t(i, static_cast<std::size_t>(k)) = points[i][k];
    return t;
}

// ---- files ----------------------------------------------------------------

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ParseError::ParseError(const std::string& path, std::size_t line, const std::string& what)
    : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

void save_frame_ply(const std::filesystem::path& path, const PointList& points, const PointList* normals) {
    if (normals && normals->size() != points.size())
        throw std::invalid_argument("save_frame_ply: normal count does not match point count");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "ply\nformat ascii 1.0\nelement vertex " << points.size() << "\n";
    os << "property double x\nproperty double y\nproperty double z\n";
    if (normals) os << "property double nx\nproperty double ny\nproperty double nz\n";
    os << "end_header\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        os << format_double(points[i].x()) << ' ' << format_double(points[i].y()) << ' ' << format_double(points[i].z());
        if (normals) {
            const Point& n = (*normals)[i];
            os << ' ' << format_double(n.x()) << ' ' << format_double(n.y()) << ' ' << format_double(n.z());
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

PlyCloud load_frame_ply(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    const std::string name = path.string();
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> bool {
        if (!std::getline(is, line)) return false;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
    };

    if (!next() || line != "ply") throw ParseError(name, lineno, "missing 'ply' magic");
    if (!next() || line != "format ascii 1.0") throw ParseError(name, lineno, "expected 'format ascii 1.0'");

    std::optional<std::size_t> count;
    std::vector<std::string> props;
    bool header_done = false;
    while (next()) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "comment" || word.empty()) continue;
        if (word == "end_header") {
            header_done = true;
            break;
        }
        if (word == "element") {
            std::string ename;
            long long n = -1;
            ls >> ename >> n;
            if (ename != "vertex" || n < 0) throw ParseError(name, lineno, "unsupported element declaration: " + line);
            if (count) throw ParseError(name, lineno, "duplicate vertex element");
            count = static_cast<std::size_t>(n);
        } else if (word == "property") {
            std::string type, pname;
            ls >> type >> pname;
            if ((type != "double" && type != "float") || pname.empty())
                throw ParseError(name, lineno, "unsupported property: " + line);
            props.push_back(pname);
        } else {
            throw ParseError(name, lineno, "unexpected header line: " + line);
        }
    }
    if (!header_done) throw ParseError(name, lineno, "missing end_header");
    if (!count) throw ParseError(name, lineno, "missing 'element vertex' declaration");
    const std::vector<std::string> xyz{"x", "y", "z"};
    const std::vector<std::string> xyzn{"x", "y", "z", "nx", "ny", "nz"};
    const bool with_normals = props == xyzn;
    if (!with_normals && props != xyz) throw ParseError(name, lineno, "properties must be x y z [nx ny nz]");

    PlyCloud cloud;
    cloud.points.reserve(*count);
    for (std::size_t i = 0; i < *count; ++i) {
        if (!next())
            throw ParseError(name, lineno + 1,
                             "truncated: missing vertex " + std::to_string(i) + " of " + std::to_string(*count));
        std::istringstream ls(line);
        double v[6];
        for (std::size_t k = 0; k < props.size(); ++k)
            if (!(ls >> v[k])) throw ParseError(name, lineno, "vertex " + std::to_string(i) + ": malformed row");
        std::string extra;
        if (ls >> extra) throw ParseError(name, lineno, "vertex " + std::to_string(i) + ": too many values");
        cloud.points.emplace_back(v[0], v[1], v[2]);
        if (with_normals) cloud.normals.emplace_back(v[3], v[4], v[5]);
    }
    while (next())
        if (!line.empty()) throw ParseError(name, lineno, "trailing data after " + std::to_string(*count) + " vertices");
    return cloud;
}

void save_sequence(const std::filesystem::path& dir, const Sequence& seq) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["version"] = kManifestVersion;
    m["seed"] = seq.seed;
    m["n_frames"] = seq.frames.size();
    m["center"] = {seq.normalization.center.x(), seq.normalization.center.y(), seq.normalization.center.z()};
    m["scale"] = seq.normalization.scale;
    m["torus"] = {{"R", seq.torus.major_radius}, {"r", seq.torus.minor_radius}};
    m["params"] = seq.trajectory;
    m["genus"] = 1;
    auto& frames = m["frames"] = nlohmann::json::array();
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
        const CompleteFrame& f = seq.frames[i];
        const std::string file = frame_file_name(i);
        save_frame_ply(dir / file, f.points, &f.normals);
        frames.push_back({{"file", file}, {"t", f.t}, {"params", f.params}});
    }
    std::ofstream os(dir / "sequence.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
    os << m.dump(2) << '\n';
}

Sequence load_sequence(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "sequence.json";
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("missing manifest " + manifest_path.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(manifest_path.string(), 0, e.what());
    }
    if (m.at("version").get<int>() != kManifestVersion)
        throw std::runtime_error("unsupported manifest version in " + manifest_path.string());
    Sequence seq;
    seq.seed = m.at("seed").get<std::uint64_t>();
    const auto& c = m.at("center");
    seq.normalization.center = Point(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
    seq.normalization.scale = m.at("scale").get<double>();
    seq.torus.major_radius = m.at("torus").at("R").get<double>();
    seq.torus.minor_radius = m.at("torus").at("r").get<double>();
    seq.trajectory = m.at("params").get<DeformationTrajectory>();
    const auto& frames = m.at("frames");
    if (frames.size() != m.at("n_frames").get<std::size_t>())
        throw std::runtime_error("manifest frame count mismatch in " + manifest_path.string());
    int prev_t = -1;
    for (const auto& fj : frames) {
        PlyCloud cloud = load_frame_ply(dir / fj.at("file").get<std::string>());
        CompleteFrame f;
        f.t = fj.at("t").get<int>();
        if (f.t <= prev_t) throw std::runtime_error("frame time indices are not increasing in " + manifest_path.string());
        prev_t = f.t;
        f.params = fj.at("params").get<DeformationParams>();
        f.points = std::move(cloud.points);
        f.normals = std::move(cloud.normals);
        seq.frames.push_back(std::move(f));
    }
    return seq;
}

}  // namespace parco::data
