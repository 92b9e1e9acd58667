#include "parco/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mc_tables.hpp"

namespace parco::geometry {

using detail::kCorner;
using detail::kEdgeCorners;
using detail::kTriTable;

Point ScalarGrid::point(std::size_t i, std::size_t j, std::size_t k) const {
    const double n = static_cast<double>(res - 1);
    return {lo.x() + (hi.x() - lo.x()) * static_cast<double>(i) / n,
            lo.y() + (hi.y() - lo.y()) * static_cast<double>(j) / n,
            lo.z() + (hi.z() - lo.z()) * static_cast<double>(k) / n};
}

ad::Tensor ScalarGrid::points() const {
    ad::Tensor t(res * res * res, 3);
    for (std::size_t k = 0; k < res; ++k)
        for (std::size_t j = 0; j < res; ++j)
            for (std::size_t i = 0; i < res; ++i) {
                const Point p = point(i, j, k);
                const std::size_t r = index(i, j, k);
                t(r, 0) = p.x();
                t(r, 1) = p.y();
                t(r, 2) = p.z();
            }
    return t;
}

ScalarGrid make_grid(std::size_t res, double half_extent) {
    if (res < 2) throw std::invalid_argument("grid resolution must be >= 2");
    ScalarGrid g;
    g.res = res;
    g.lo = Point::Constant(-half_extent);
    g.hi = Point::Constant(half_extent);
    g.values.assign(res * res * res, 0.0);
    return g;
}

std::vector<std::array<std::uint32_t, 2>> Mesh::edges() const {
    std::vector<std::array<std::uint32_t, 2>> e;
    e.reserve(faces.size() * 3);
    for (const auto& f : faces)
        for (int s = 0; s < 3; ++s) {
            const std::uint32_t a = f[static_cast<std::size_t>(s)], b = f[static_cast<std::size_t>((s + 1) % 3)];
            e.push_back({std::min(a, b), std::max(a, b)});
        }
    std::sort(e.begin(), e.end());
    e.erase(std::unique(e.begin(), e.end()), e.end());
    return e;
}

Mesh marching_cubes(const ScalarGrid& grid, double iso) {
    const std::size_t n = grid.res;
    if (n < 2 || grid.values.size() != n * n * n) throw std::invalid_argument("marching_cubes: malformed grid");
    Mesh mesh;
    // one vertex slot per grid edge, keyed by (axis, lower grid point)
    std::array<std::vector<std::int32_t>, 3> slot;
    for (auto& s : slot) s.assign(n * n * n, -1);

    auto vertex_on = [&](std::size_t i0, std::size_t j0, std::size_t k0, int ca, int cb) -> std::uint32_t {
        const auto& a = kCorner[static_cast<std::size_t>(ca)];
        const auto& b = kCorner[static_cast<std::size_t>(cb)];
        int axis = 0;
        while (a[static_cast<std::size_t>(axis)] == b[static_cast<std::size_t>(axis)]) ++axis;
        const auto lower = [&](std::size_t d) {
            return static_cast<std::size_t>(std::min(a[d], b[d]));
        };
        const std::size_t li = i0 + lower(0), lj = j0 + lower(1), lk = k0 + lower(2);
        const std::size_t key = grid.index(li, lj, lk);
        std::int32_t& id = slot[static_cast<std::size_t>(axis)][key];
        if (id < 0) {
            const std::size_t ui = li + (axis == 0), uj = lj + (axis == 1), uk = lk + (axis == 2);
            const double va = grid.values[key];
            const double vb = grid.values[grid.index(ui, uj, uk)];
            const Point pa = grid.point(li, lj, lk);
            const Point pb = grid.point(ui, uj, uk);
            const double t = (iso - va) / (vb - va);
            id = static_cast<std::int32_t>(mesh.vertices.size());
            mesh.vertices.push_back(pa + t * (pb - pa));
        }
        return static_cast<std::uint32_t>(id);
    };

    for (std::size_t k = 0; k + 1 < n; ++k)
        for (std::size_t j = 0; j + 1 < n; ++j)
            for (std::size_t i = 0; i + 1 < n; ++i) {
                int mask = 0;
                for (int c = 0; c < 8; ++c) {
                    const auto& o = kCorner[static_cast<std::size_t>(c)];
                    const double v = grid.values[grid.index(i + static_cast<std::size_t>(o[0]),
                                                            j + static_cast<std::size_t>(o[1]),
                                                            k + static_cast<std::size_t>(o[2]))];
                    if (v < iso) mask |= 1 << c;
                }
                if (mask == 0 || mask == 255) continue;
                const std::int8_t* tri = kTriTable[mask];
                for (int t = 0; t < 16 && tri[t] >= 0; t += 3) {
                    std::array<std::uint32_t, 3> f{};
                    for (int s = 0; s < 3; ++s) {
                        const auto& e = kEdgeCorners[static_cast<std::size_t>(tri[t + s])];
                        f[static_cast<std::size_t>(s)] = vertex_on(i, j, k, e[0], e[1]);
                    }
                    mesh.faces.push_back(f);
                }
            }
    return mesh;
}

long long euler_characteristic(const Mesh& mesh) {
    return static_cast<long long>(mesh.vertices.size()) - static_cast<long long>(mesh.edges().size()) +
           static_cast<long long>(mesh.faces.size());
}

double genus(const Mesh& mesh) { return (2.0 - static_cast<double>(euler_characteristic(mesh))) / 2.0; }

ManifoldReport manifold_check(const Mesh& mesh) {
    ManifoldReport r;
    r.empty = mesh.faces.empty();
    if (r.empty) {
        r.closed = true;
        r.orientable = true;
        return r;
    }
    // undirected edge -> incident (face, traversal direction a<b)
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::pair<std::uint32_t, bool>>> incident;
    for (std::uint32_t fi = 0; fi < mesh.faces.size(); ++fi) {
        const auto& f = mesh.faces[fi];
        for (int s = 0; s < 3; ++s) {
            const std::uint32_t a = f[static_cast<std::size_t>(s)], b = f[static_cast<std::size_t>((s + 1) % 3)];
            incident[{std::min(a, b), std::max(a, b)}].push_back({fi, a < b});
        }
    }
    std::vector<std::vector<std::pair<std::uint32_t, bool>>> adj(mesh.faces.size());
    for (const auto& [edge, faces] : incident) {
        if (faces.size() == 1) ++r.boundary_edges;
        if (faces.size() > 2) ++r.nonmanifold_edges;
        if (faces.size() == 2) {
            // same traversal direction means the neighbor must be flipped to agree
            const bool flip = faces[0].second == faces[1].second;
            adj[faces[0].first].push_back({faces[1].first, flip});
            adj[faces[1].first].push_back({faces[0].first, flip});
        }
    }
    r.closed = r.boundary_edges == 0 && r.nonmanifold_edges == 0;

    std::vector<int> orient(mesh.faces.size(), -1);
    bool consistent = true;
    for (std::uint32_t seed = 0; seed < mesh.faces.size(); ++seed) {
        if (orient[seed] >= 0) continue;
        ++r.components;
        orient[seed] = 0;
        std::queue<std::uint32_t> q;
        q.push(seed);
        while (!q.empty()) {
            const std::uint32_t f = q.front();
            q.pop();
            for (const auto& [g, flip] : adj[f]) {
                const int want = orient[f] ^ static_cast<int>(flip);
                if (orient[g] < 0) {
                    orient[g] = want;
                    q.push(g);
                } else if (orient[g] != want) {
                    consistent = false;
                }
            }
        }
    }
    r.orientable = consistent && r.nonmanifold_edges == 0;
    return r;
}

double tsr(std::span<const double> predicted_genus, std::span<const int> gt_genus) {
    if (predicted_genus.size() != gt_genus.size()) throw std::invalid_argument("tsr: length mismatch");
    if (predicted_genus.empty()) throw std::invalid_argument("tsr: no frames");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted_genus.size(); ++i)
        if (predicted_genus[i] == static_cast<double>(gt_genus[i])) ++hits;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(predicted_genus.size());
}

double tsr(std::span<const Mesh> meshes, std::span<const int> gt_genus) {
    std::vector<double> g;
    g.reserve(meshes.size());
    for (const Mesh& m : meshes) g.push_back(m.empty() ? std::numeric_limits<double>::quiet_NaN() : genus(m));
    return tsr(g, gt_genus);
}

std::vector<double> nearest_distances(const PointList& from, const PointList& to, std::size_t threads) {
    if (to.empty()) throw std::invalid_argument("nearest_distances: empty target set");
    std::vector<double> out(from.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double best = std::numeric_limits<double>::infinity();
            const Point& a = from[i];
            for (const Point& b : to) best = std::min(best, (a - b).squaredNorm());
            out[i] = std::sqrt(best);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, from.size()));
    if (threads == 1) {
        work(0, from.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t per = (from.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t b = std::min(from.size(), t * per), e = std::min(from.size(), b + per);
            pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

double chamfer(const PointList& a, const PointList& b, std::size_t threads) {
    if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point set");
    const auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return 0.5 * (mean(nearest_distances(a, b, threads)) + mean(nearest_distances(b, a, threads)));
}

void MetricsReport::finalize() {
    if (frames.empty()) {
        mean_cd = std_cd = tsr = 0.0;
        return;
    }
    double s = 0.0;
    std::size_t hits = 0;
    for (const FrameMetrics& f : frames) {
        s += f.chamfer;
        hits += f.success ? 1 : 0;
    }
    const double n = static_cast<double>(frames.size());
    mean_cd = s / n;
    double var = 0.0;
    for (const FrameMetrics& f : frames) var += (f.chamfer - mean_cd) * (f.chamfer - mean_cd);
    std_cd = std::sqrt(var / n);
    tsr = 100.0 * static_cast<double>(hits) / n;
}

std::string MetricsReport::table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%6s  %12s  %7s  %3s  %7s  %8s  %8s\n", "t", "chamfer", "genus", "gt", "success",
                  "verts", "faces");
    os << buf;
    for (const FrameMetrics& f : frames) {
        std::snprintf(buf, sizeof(buf), "%6d  %12.6f  %7.1f  %3d  %7s  %8zu  %8zu\n", f.t, f.chamfer, f.genus, f.gt_genus,
                      f.success ? "yes" : "no", f.vertices, f.faces);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "frames %zu  mean CD %.6f  std CD %.6f  TSR %.2f%%  (%s)\n", frames.size(), mean_cd,
                  std_cd, tsr, cd_variant.c_str());
    os << buf;
    return os.str();
}

void to_json(nlohmann::json& j, const FrameMetrics& f) {
    j = {{"t", f.t},           {"chamfer", f.chamfer},       {"genus", f.genus},
         {"gt_genus", f.gt_genus}, {"success", f.success},   {"genus_valid", f.genus_valid},
         {"vertices", f.vertices}, {"faces", f.faces}};
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = {{"frames", r.frames}, {"mean_cd", r.mean_cd}, {"std_cd", r.std_cd}, {"tsr", r.tsr},
         {"cd_variant", r.cd_variant}, {"n_frames", r.frames.size()}};
}

void write_obj(const std::filesystem::path& path, const Mesh& mesh, const std::vector<Point>* colors) {
    if (colors && colors->size() != mesh.vertices.size())
        throw std::invalid_argument("write_obj: color count does not match vertex count");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Point& v = mesh.vertices[i];
        os << "v " << data::format_double(v.x()) << ' ' << data::format_double(v.y()) << ' '
           << data::format_double(v.z());
        if (colors) {
            const Point& c = (*colors)[i];
            os << ' ' << data::format_double(c.x()) << ' ' << data::format_double(c.y()) << ' '
               << data::format_double(c.z());
        }
        os << '\n';
    }
    for (const auto& f : mesh.faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

Mesh read_obj(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    Mesh m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) throw data::ParseError(path.string(), lineno, "malformed vertex");
            m.vertices.emplace_back(x, y, z);
        } else if (tag == "f") {
            std::array<std::uint32_t, 3> f{};
            for (auto& idx : f) {
                long long v = 0;
                if (!(ls >> v) || v < 1 || static_cast<std::size_t>(v) > m.vertices.size())
                    throw data::ParseError(path.string(), lineno, "malformed face");
                idx = static_cast<std::uint32_t>(v - 1);
            }
            m.faces.push_back(f);
        }
    }
    return m;
}

std::vector<Point> heatmap_colors(std::span<const double> values, double max_value) {
    std::vector<Point> c;
    c.reserve(values.size());
    for (double v : values) {
        const double s = max_value > 0.0 ? std::clamp(v / max_value, 0.0, 1.0) : 0.0;
        c.emplace_back(s, 0.0, 1.0 - s);
    }
    return c;
}

}  // namespace parco::geometry
