#pragma once

#include <cmath>
#include <functional>
#include <numbers>

#include "parco/data.hpp"
#include "parco/geometry.hpp"

// Hand-built meshes and analytic fields shared by the unit and acceptance tests.
namespace parco::fixtures {

using geometry::Mesh;
using geometry::Point;

/// Closed unit cube triangulation: V = 8, E = 18, F = 12.
inline Mesh cube_mesh(const Point& offset = Point::Zero()) {
    Mesh m;
    for (int i = 0; i < 8; ++i) m.vertices.push_back(offset + Point(i & 1, (i >> 1) & 1, (i >> 2) & 1));
    const std::uint32_t quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
    for (const auto& q : quads) {
        m.faces.push_back({q[0], q[1], q[2]});
        m.faces.push_back({q[0], q[2], q[3]});
    }
    return m;
}

/// n x k quad grid with both directions wrapped, split into triangles: chi = 0.
inline Mesh torus_mesh(std::uint32_t n, std::uint32_t k, double major = 1.0, double minor = 0.3) {
    Mesh m;
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < k; ++j) {
            const double u = 2 * std::numbers::pi * i / n, v = 2 * std::numbers::pi * j / k;
            m.vertices.emplace_back((major + minor * std::cos(v)) * std::cos(u), (major + minor * std::cos(v)) * std::sin(u),
                                    minor * std::sin(v));
        }
    const auto id = [&](std::uint32_t i, std::uint32_t j) { return (i % n) * k + (j % k); };
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < k; ++j) {
            m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    return m;
}

inline Mesh merge(const Mesh& a, const Mesh& b) {
    Mesh m = a;
    const auto base = static_cast<std::uint32_t>(a.vertices.size());
    m.vertices.insert(m.vertices.end(), b.vertices.begin(), b.vertices.end());
    for (const auto& f : b.faces) m.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
    return m;
}

inline geometry::ScalarGrid sample_grid(std::size_t res, double half_extent, const std::function<double(const Point&)>& f) {
    geometry::ScalarGrid g = geometry::make_grid(res, half_extent);
    for (std::size_t k = 0; k < res; ++k)
        for (std::size_t j = 0; j < res; ++j)
            for (std::size_t i = 0; i < res; ++i) g.values[g.index(i, j, k)] = f(g.point(i, j, k));
    return g;
}

inline data::PointList sphere_samples(double radius, std::size_t n) {
    data::PointList pts;
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < n; ++i) {
        const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        const double r = std::sqrt(1.0 - y * y);
        pts.emplace_back(radius * r * std::cos(golden * i), radius * y, radius * r * std::sin(golden * i));
    }
    return pts;
}

inline data::PointList torus_samples(double major, double minor, std::size_t n_u, std::size_t n_v) {
    data::PointList pts;
    for (std::size_t i = 0; i < n_u; ++i)
        for (std::size_t j = 0; j < n_v; ++j) {
            const double u = 2 * std::numbers::pi * i / n_u, v = 2 * std::numbers::pi * j / n_v;
            pts.emplace_back((major + minor * std::cos(v)) * std::cos(u), (major + minor * std::cos(v)) * std::sin(u),
                             minor * std::sin(v));
        }
    return pts;
}

}  // namespace parco::fixtures
