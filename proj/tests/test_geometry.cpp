#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "parco/evaluation.hpp"
#include "parco/geometry.hpp"

using namespace parco;
using geometry::Mesh;
using geometry::Point;

namespace {

double brute_chamfer(const data::PointList& a, const data::PointList& b) {
    const auto one_side = [](const data::PointList& from, const data::PointList& to) {
        double sum = 0;
        for (const Point& p : from) {
            double best = INFINITY;
            for (const Point& q : to) {
                const double dx = p.x() - q.x(), dy = p.y() - q.y(), dz = p.z() - q.z();
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            sum += std::sqrt(best);
        }
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (one_side(a, b) + one_side(b, a));
}

data::PointList random_cloud(Rng& rng, std::size_t n) {
    data::PointList p;
    for (std::size_t i = 0; i < n; ++i) p.emplace_back(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    return p;
}

}  // namespace

TEST(Euler, CubeIsSphereTopology) {
    const Mesh m = fixtures::cube_mesh();
    EXPECT_EQ(m.edges().size(), 18u);
    EXPECT_EQ(geometry::euler_characteristic(m), 2);
    EXPECT_EQ(geometry::genus(m), 0.0);
}

TEST(Euler, TorusTriangulation) {
    const Mesh m = fixtures::torus_mesh(12, 8);
    EXPECT_EQ(geometry::euler_characteristic(m), 0);
    EXPECT_EQ(geometry::genus(m), 1.0);
}

TEST(Euler, DisjointSpheresAddUp) {
    const Mesh m = fixtures::merge(fixtures::cube_mesh(), fixtures::cube_mesh(Point(3, 0, 0)));
    EXPECT_EQ(geometry::euler_characteristic(m), 4);
    EXPECT_EQ(geometry::genus(m), -1.0);
    EXPECT_EQ(geometry::manifold_check(m).components, 2u);
}

TEST(Manifold, ClosedOrientableCube) {
    const geometry::ManifoldReport r = geometry::manifold_check(fixtures::cube_mesh());
    EXPECT_TRUE(r.closed);
    EXPECT_TRUE(r.orientable);
    EXPECT_EQ(r.boundary_edges, 0u);
    EXPECT_EQ(r.components, 1u);
}

TEST(Manifold, DetectsBoundaryAndEmpty) {
    Mesh m = fixtures::cube_mesh();
    m.faces.pop_back();
    const geometry::ManifoldReport r = geometry::manifold_check(m);
    EXPECT_FALSE(r.closed);
    EXPECT_EQ(r.boundary_edges, 3u);
    EXPECT_TRUE(geometry::manifold_check(Mesh{}).empty);
}

TEST(MarchingCubes, SphereIsClosedGenusZero) {
    const double radius = 0.6;
    const auto grid = fixtures::sample_grid(64, 1.1, [&](const Point& p) { return p.norm() - radius; });
    const Mesh m = geometry::marching_cubes(grid);
    const geometry::ManifoldReport r = geometry::manifold_check(m);
    EXPECT_TRUE(r.closed);
    EXPECT_TRUE(r.orientable);
    EXPECT_EQ(r.components, 1u);
    EXPECT_EQ(geometry::genus(m), 0.0);
    for (const Point& v : m.vertices) EXPECT_NEAR(v.norm(), radius, 0.1 * grid.voxel_size());
    EXPECT_LE(geometry::chamfer(m.vertices, fixtures::sphere_samples(radius, 20000)), 1.5 * grid.voxel_size());
}

TEST(MarchingCubes, TorusIsClosedGenusOne) {
    const double major = 0.675, minor = 0.225;
    const auto grid = fixtures::sample_grid(64, 1.1, [&](const Point& p) {
        return data::analytic_torus_sdf(p, major, minor);
    });
    const Mesh m = geometry::marching_cubes(grid);
    EXPECT_TRUE(geometry::manifold_check(m).closed);
    EXPECT_EQ(geometry::genus(m), 1.0);
    EXPECT_LE(geometry::chamfer(m.vertices, fixtures::torus_samples(major, minor, 300, 100)), 1.5 * grid.voxel_size());
}

TEST(MarchingCubes, OneVertexPerSignChangingEdge) {
    const auto grid = fixtures::sample_grid(20, 1.0, [](const Point& p) { return p.norm() - 0.55; });
    std::size_t crossings = 0;
    const std::size_t n = grid.res;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                const bool in = grid.values[grid.index(i, j, k)] < 0;
                if (i + 1 < n && in != (grid.values[grid.index(i + 1, j, k)] < 0)) ++crossings;
                if (j + 1 < n && in != (grid.values[grid.index(i, j + 1, k)] < 0)) ++crossings;
                if (k + 1 < n && in != (grid.values[grid.index(i, j, k + 1)] < 0)) ++crossings;
            }
    EXPECT_EQ(geometry::marching_cubes(grid).vertices.size(), crossings);
}

TEST(MarchingCubes, NoCrossingGivesEmptyMesh) {
    const auto grid = fixtures::sample_grid(8, 1.0, [](const Point&) { return 1.0; });
    EXPECT_TRUE(geometry::marching_cubes(grid).empty());
}

TEST(Chamfer, MatchesBruteForceExactly) {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_cloud(rng, 100), b = random_cloud(rng, 100);
        EXPECT_EQ(geometry::chamfer(a, b), brute_chamfer(a, b));
        EXPECT_EQ(geometry::chamfer(a, b, 3), geometry::chamfer(a, b, 1));
        EXPECT_EQ(geometry::chamfer(a, b), geometry::chamfer(b, a));
    }
}

TEST(Chamfer, IdenticalCloudsAndShift) {
    Rng rng(4);
    const auto a = random_cloud(rng, 50);
    EXPECT_EQ(geometry::chamfer(a, a), 0.0);
    const data::PointList one{Point(0, 0, 0)}, other{Point(0, 3, 4)};
    EXPECT_EQ(geometry::chamfer(one, other), 5.0);
    EXPECT_THROW(geometry::chamfer(one, {}), std::invalid_argument);
}

TEST(Tsr, Arithmetic) {
    const std::vector<double> g{1, 1, 0, 2, 1, 1.5, -1, 1};
    const std::vector<int> gt(8, 1);
    EXPECT_EQ(geometry::tsr(g, gt), 50.0);
    const std::vector<double> all{1, 1, 1};
    EXPECT_EQ(geometry::tsr(all, std::vector<int>(3, 1)), 100.0);
    EXPECT_THROW(geometry::tsr(all, gt), std::invalid_argument);
    const std::vector<Mesh> meshes{fixtures::torus_mesh(6, 4), fixtures::cube_mesh(), fixtures::torus_mesh(8, 5)};
    EXPECT_NEAR(geometry::tsr(meshes, std::vector<int>(3, 1)), 200.0 / 3.0, 1e-12);
    const std::vector<Mesh> with_empty{fixtures::torus_mesh(6, 4), Mesh{}};
    EXPECT_EQ(geometry::genus(Mesh{}), 1.0);  // chi of nothing is 0
    EXPECT_EQ(geometry::tsr(with_empty, std::vector<int>(2, 1)), 50.0);
}

TEST(Metrics, FrameAndReportAggregates) {
    eval::ExtractionConfig cfg;
    const auto gt = fixtures::torus_samples(1.0, 0.3, 40, 20);
    const geometry::FrameMetrics ok = eval::frame_metrics(fixtures::torus_mesh(40, 20), gt, 3, 1, cfg);
    EXPECT_TRUE(ok.success);
    EXPECT_TRUE(ok.genus_valid);
    EXPECT_EQ(ok.chamfer, 0.0);
    const geometry::FrameMetrics empty = eval::frame_metrics(Mesh{}, gt, 4, 1, cfg);
    EXPECT_FALSE(empty.success);
    EXPECT_EQ(empty.chamfer, eval::empty_mesh_chamfer(cfg));
    EXPECT_NEAR(eval::empty_mesh_chamfer(cfg), 2.2 * std::sqrt(3.0), 1e-12);

    geometry::MetricsReport r;
    r.frames = {ok, empty};
    r.frames[0].chamfer = 0.1;
    r.frames[1].chamfer = 0.3;
    r.finalize();
    EXPECT_NEAR(r.mean_cd, 0.2, 1e-15);
    EXPECT_NEAR(r.std_cd, 0.1, 1e-15);
    EXPECT_EQ(r.tsr, 50.0);
}

TEST(EvalFrames, WindowAndStride) {
    eval::EvalOptions o;
    EXPECT_EQ(eval::eval_frames(6, 4, o), (std::vector<std::size_t>{3, 4, 5}));
    o.first = 4;
    o.stride = 2;
    EXPECT_EQ(eval::eval_frames(10, 4, o), (std::vector<std::size_t>{4, 6, 8}));
    o.max_frames = 2;
    EXPECT_EQ(eval::eval_frames(10, 4, o), (std::vector<std::size_t>{4, 6}));
}

TEST(Obj, RoundTripPreservesMesh) {
    const Mesh m = fixtures::torus_mesh(7, 5);
    const auto path = std::filesystem::temp_directory_path() / "parco_roundtrip.obj";
    geometry::write_obj(path, m);
    const Mesh back = geometry::read_obj(path);
    ASSERT_EQ(back.vertices.size(), m.vertices.size());
    ASSERT_EQ(back.faces, m.faces);
    for (std::size_t i = 0; i < m.vertices.size(); ++i) EXPECT_EQ(back.vertices[i], m.vertices[i]);

    std::vector<double> err(m.vertices.size());
    for (std::size_t i = 0; i < err.size(); ++i) err[i] = 0.01 * static_cast<double>(i);
    const auto colors = geometry::heatmap_colors(err, 0.05);
    for (const Point& c : colors)
        for (int k = 0; k < 3; ++k) {
            EXPECT_GE(c[k], 0.0);
            EXPECT_LE(c[k], 1.0);
        }
    geometry::write_obj(path, m, &colors);
    EXPECT_EQ(geometry::read_obj(path).faces.size(), m.faces.size());
    std::filesystem::remove(path);
}
