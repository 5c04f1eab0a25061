#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spde/gmrf.hpp"
#include "spde/precision.hpp"
#include "spde/rng.hpp"

#include <cstdio>
#include <fstream>
#include <numbers>

using namespace spde;

namespace {

DeformationCoeffs random_coeffs(Rng& rng, int L) {
    DeformationCoeffs c = DeformationCoeffs::zeros(L);
    for (int j = 0; j < 2; ++j) {
        for (auto& a : c.alpha[j]) a = rng.normal(0.0, 0.3);
        for (auto& a : c.e1[j]) a = rng.normal(0.0, 0.3);
        for (auto& a : c.e2[j]) a = rng.normal(0.0, 0.3);
    }
    c.drop_d = rng.uniform(0.3, 1.0);
    return c;
}

SphereMesh tagged_icosphere(int subdiv) {
    RegionMap map;
    std::vector<GeoPoint> ring;
    for (double lon = -180.0; lon <= 180.0; lon += 15.0) ring.push_back({0.0, lon});
    ring.push_back({89.999, 180.0});
    ring.push_back({89.999, -180.0});
    ring.push_back({0.0, -180.0});
    map.land_rings.push_back(ring);
    map.buffer_width_km = 400.0;
    return tag_regions(build_icosphere(subdiv), map);
}

/// Independent dense assembly by direct summation over edges, using
/// eval_metric directly (not the cached basis path).
Eigen::MatrixXd dense_Q_oracle(const SphereMesh& mesh, const DeformationCoeffs& c) {
    const int n = mesh.n_triangles();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    for (const auto& e : mesh.edges) {
        const int lo = std::min(e.tri_a, e.tri_b);
        RegionInfo where;
        if (mesh.region[e.tri_a] == mesh.region[e.tri_b]) {
            where.tag = mesh.region[e.tri_a];
            where.base = (where.tag == Region::buffer) ? mesh.base_domain[lo]
                         : (where.tag == Region::land) ? Domain::land
                                                       : Domain::sea;
        } else {
            where.tag = Region::buffer;
            where.base = mesh.base_domain[lo];
        }
        const LocalMetric lm = eval_metric(c, e.midpoint, where);
        const TangentBasis tb = TangentBasis::at(e.midpoint);
        const Vec2 n2 = tb.project(e.normal).normalized();
        const double dist = great_circle(mesh.centroids[e.tri_a], mesh.centroids[e.tri_b]);
        const double t = e.arc_length * n2.dot(lm.H * n2) / dist;
        A(e.tri_a, e.tri_b) += t;
        A(e.tri_b, e.tri_a) += t;
        A(e.tri_a, e.tri_a) -= t;
        A(e.tri_b, e.tri_b) -= t;
    }
    Eigen::VectorXd D(n);
    for (int i = 0; i < n; ++i) {
        RegionInfo where{mesh.region[i], mesh.base_domain[i]};
        const double rho = eval_rho(c, mesh.centroids[i], where);
        D[i] = mesh.areas[i] / (rho * rho);
    }
    const Eigen::MatrixXd M = Eigen::MatrixXd(D.asDiagonal()) - A;
    // Same white-noise convention as the library: noise variance 4 pi per
    // unit area, giving the stationary field near-unit marginal variance.
    const Eigen::VectorXd Linv = (4.0 * std::numbers::pi * D).cwiseInverse();
    return M.transpose() * Linv.asDiagonal() * M;
}

}  // namespace

TEST_CASE("icosahedron assembly matches the dense oracle") {
    const SphereMesh mesh = tagged_icosphere(0);
    REQUIRE(mesh.n_triangles() == 20);
    REQUIRE(mesh.edges.size() == 30);

    Rng rng(41);
    SUBCASE("identity deformation") {
        const DeformationCoeffs c = DeformationCoeffs::zeros(1);
        const PrecisionBuild pb = assemble_precision(mesh, c);
        const Eigen::MatrixXd oracle = dense_Q_oracle(mesh, c);
        CHECK((Eigen::MatrixXd(pb.Q) - oracle).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("random deformation") {
        for (int trial = 0; trial < 5; ++trial) {
            const DeformationCoeffs c = random_coeffs(rng, 1);
            const PrecisionBuild pb = assemble_precision(mesh, c);
            const Eigen::MatrixXd oracle = dense_Q_oracle(mesh, c);
            CHECK((Eigen::MatrixXd(pb.Q) - oracle).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
}

TEST_CASE("PrecisionBuild invariants on randomized meshes and coefficients") {
    Rng rng(43);
    for (int subdiv : {0, 1, 2}) {
        const SphereMesh mesh = tagged_icosphere(subdiv);
        const DeformationCoeffs c = random_coeffs(rng, 1);
        const PrecisionBuild pb = assemble_precision(mesh, c);
        const int n = mesh.n_triangles();

        const Eigen::MatrixXd A = Eigen::MatrixXd(pb.A_H);
        for (int i = 0; i < n; ++i) {
            CHECK(std::abs(A.row(i).sum()) < 1e-10);
            CHECK(A(i, i) <= 0.0);
            for (int j = 0; j < n; ++j)
                if (i != j) CHECK(A(i, j) >= 0.0);
        }
        // Q equals its factors entrywise
        const Eigen::MatrixXd M = Eigen::MatrixXd(pb.D.asDiagonal()) - A;
        const Eigen::MatrixXd Qf = M.transpose() * pb.L.cwiseInverse().asDiagonal() * M;
        CHECK((Eigen::MatrixXd(pb.Q) - Qf).cwiseAbs().maxCoeff() < 1e-12);
        // SPD
        CHECK_NOTHROW(factorize(pb.Q));
        // stencil bounds
        for (int i = 0; i < n; ++i) {
            int nnz_m = 0, nnz_q = 0;
            for (int j = 0; j < n; ++j) {
                if (M(i, j) != 0.0) ++nnz_m;
                if (Qf(i, j) != 0.0) ++nnz_q;
            }
            CHECK(nnz_m <= 4);
            CHECK(nnz_q <= 13);
        }
    }
}

TEST_CASE("identity deformation row sums equal |T_i| / (4 pi)") {
    // A_H rows sum to zero, so Q 1 = M^T L^{-1} D 1 = |T_i| / (4 pi) under the
    // unit-variance white-noise convention.
    const SphereMesh mesh = tagged_icosphere(1);
    const PrecisionBuild pb = assemble_precision(mesh, DeformationCoeffs::zeros(1));
    const Eigen::VectorXd rs = Eigen::MatrixXd(pb.Q).rowwise().sum();
    for (int i = 0; i < mesh.n_triangles(); ++i)
        CHECK(rs[i] == doctest::Approx(mesh.areas[i] / (4.0 * std::numbers::pi)).epsilon(1e-9));
}

TEST_CASE("untagged mesh rejected") {
    SphereMesh mesh = build_icosphere(1);
    mesh.region.clear();
    CHECK_THROWS_AS(assemble_precision(mesh, DeformationCoeffs::zeros(1)),
                    std::invalid_argument);
}

TEST_CASE("scaling law: constant factor on rho rescales D, L and the 0.5-correlation range") {
    const SphereMesh mesh = tagged_icosphere(3);  // 1280 triangles
    DeformationCoeffs c = DeformationCoeffs::zeros(0);
    const double sq4pi = 2.0 * std::sqrt(kPi);
    c.alpha[0][0] = c.alpha[1][0] = std::log(0.15) * sq4pi;
    const PrecisionBuild p1 = assemble_precision(mesh, c);
    c.alpha[0][0] = c.alpha[1][0] = std::log(0.30) * sq4pi;
    const PrecisionBuild p2 = assemble_precision(mesh, c);
    CHECK((p2.D - p1.D / 4.0).cwiseAbs().maxCoeff() < 1e-12 * p1.D.maxCoeff());

    auto half_range = [&](double rho) {
        const MaternTable t = matern_check(mesh, rho, 1.5, 600);
        for (size_t i = 1; i < t.rows.size(); ++i)
            if (t.rows[i].empirical < 0.5) return t.rows[i].distance;
        return 1.5;
    };
    const double r1 = half_range(0.15), r2 = half_range(0.30);
    CHECK(r2 / r1 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("matern_check basics and refinement convergence") {
    SUBCASE("too-coarse warning and r=0 row") {
        const MaternTable t = matern_check(tagged_icosphere(1), 0.4);
        CHECK(t.too_coarse);
        CHECK(t.rows.front().distance == 0.0);
        CHECK(t.rows.front().empirical == 1.0);
    }
    SUBCASE("monotone analytic curve, decent empirical agreement at 1280 triangles") {
        const MaternTable t = matern_check(tagged_icosphere(3), 0.3);
        CHECK_FALSE(t.too_coarse);
        for (size_t i = 1; i < t.rows.size(); ++i)
            CHECK(t.rows[i].analytic <= t.rows[i - 1].analytic + 1e-12);
        CHECK(t.max_abs_dev(0.1, 1.0) < 0.12);  // tight 0.05 bound checked at 5120 in acceptance
    }
    SUBCASE("Cauchy-style convergence under refinement") {
        // correlation at fixed pairs changes less with each refinement
        auto corr_at = [&](int subdiv, double r_target) {
            const MaternTable t = matern_check(tagged_icosphere(subdiv), 0.35, 1.2, 300);
            double best = 1e9, val = 0.0;
            for (const auto& row : t.rows)
                if (std::abs(row.distance - r_target) < best) {
                    best = std::abs(row.distance - r_target);
                    val = row.empirical - row.analytic;
                }
            return val;
        };
        const double d2 = std::abs(corr_at(2, 0.5)), d3 = std::abs(corr_at(3, 0.5)),
                     d4 = std::abs(corr_at(4, 0.5));
        CHECK(d3 <= d2 + 0.02);
        CHECK(d4 <= d3 + 0.01);
    }
}

TEST_CASE("coordinate text export") {
    const SphereMesh mesh = tagged_icosphere(0);
    const PrecisionBuild pb = assemble_precision(mesh, DeformationCoeffs::zeros(1));
    const std::string path = "q_coord.txt";
    save_matrix_coord(pb.Q, path);
    std::ifstream in(path);
    int r, c, nnz;
    in >> r >> c >> nnz;
    CHECK(r == 20);
    CHECK(nnz == pb.Q.nonZeros());
    std::remove(path.c_str());
}
