#include "spde/precision.hpp"

#include "spde/gmrf.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace spde {

AssemblyCache::AssemblyCache(const SphereMesh& mesh, int order_L)
    : n_tri_(mesh.n_triangles()), order_L_(order_L) {
    if (mesh.region.size() != static_cast<size_t>(n_tri_))
        throw std::invalid_argument("mesh must be tagged before assembly");

    const int na = (order_L + 1) * (order_L + 1);
    const int nv = na - 1;

    area_ = Eigen::Map<const Eigen::VectorXd>(mesh.areas.data(), n_tri_);
    cen_Y_.resize(na, n_tri_);
    tri_domain_.resize(n_tri_);
    tri_buffer_.resize(n_tri_);
    for (int i = 0; i < n_tri_; ++i) {
        const Vec3& c = mesh.centroids[i];
        for (int l = 0; l <= order_L; ++l)
            for (int m = -l; m <= l; ++m)
                cen_Y_(l * l + m + l, i) = real_sph_harmonic(l, m, c);
        const Region tag = mesh.region[i];
        tri_buffer_[i] = (tag == Region::buffer) ? 1 : 0;
        tri_domain_[i] = (tag == Region::land)  ? 0
                         : (tag == Region::sea) ? 1
                                                : static_cast<int>(mesh.base_domain[i]);
    }

    const int ne = static_cast<int>(mesh.edges.size());
    edge_.resize(ne);
    edge_grad_.setZero(2 * ne, std::max(nv, 1));
    edge_rot_.setZero(2 * ne, std::max(nv, 1));
    for (int e = 0; e < ne; ++e) {
        const MeshEdge& me = mesh.edges[e];
        EdgeData& ed = edge_[e];
        ed.a = me.tri_a;
        ed.b = me.tri_b;
        const double dist = great_circle(mesh.centroids[me.tri_a], mesh.centroids[me.tri_b]);
        ed.arc_over_dist = me.arc_length / dist;
        const TangentBasis tb = TangentBasis::at(me.midpoint);
        ed.normal = tb.project(me.normal).normalized();
        // Edge-domain rule: equal tags govern; disagreeing tags fall back to
        // the buffer rule with the lower-indexed triangle's base domain.
        const int lo = std::min(me.tri_a, me.tri_b);
        if (mesh.region[me.tri_a] == mesh.region[me.tri_b]) {
            const Region tag = mesh.region[me.tri_a];
            ed.domain = (tag == Region::land)  ? 0
                        : (tag == Region::sea) ? 1
                                               : static_cast<int>(mesh.base_domain[lo]);
        } else {
            ed.domain = static_cast<int>(mesh.base_domain[lo]);
        }
        for (int l = 1; l <= order_L; ++l)
            for (int m = -l; m <= l; ++m) {
                const int idx = l * l + m + l - 1;
                const Vec2 g = surf_gradient_Y(l, m, me.midpoint);
                edge_grad_(2 * e, idx) = g.x();
                edge_grad_(2 * e + 1, idx) = g.y();
                const Vec2 r = rotate90(g);
                edge_rot_(2 * e, idx) = r.x();
                edge_rot_(2 * e + 1, idx) = r.y();
            }
    }
}

Eigen::VectorXd AssemblyCache::centroid_rho(const DeformationCoeffs& c) const {
    if (c.order_L != order_L_) throw std::invalid_argument("coefficient order != cache order");
    Eigen::VectorXd rho(n_tri_);
    const Eigen::Map<const Eigen::VectorXd> a_land(c.alpha[0].data(), c.n_alpha());
    const Eigen::Map<const Eigen::VectorXd> a_sea(c.alpha[1].data(), c.n_alpha());
    for (int i = 0; i < n_tri_; ++i) {
        const auto y = cen_Y_.col(i);
        double lr = (tri_domain_[i] == 0) ? a_land.dot(y) : a_sea.dot(y);
        double r = std::exp(lr);
        if (tri_buffer_[i]) {
            if (c.drop_d <= 0.0)
                throw std::domain_error("drop_d = 0 makes the buffer metric degenerate");
            r *= c.drop_d;
        }
        rho[i] = r;
    }
    return rho;
}

PrecisionBuild AssemblyCache::assemble(const DeformationCoeffs& c) const {
    c.validate();
    PrecisionBuild out;
    const Eigen::VectorXd rho = centroid_rho(c);
    out.D = area_.array() / rho.array().square();
    // White-noise intensity normalized to the sphere's surface area (4 pi), so
    // the stationary solution has near-unit marginal variance. Correlations
    // are unaffected; only the field scale depends on this convention.
    out.L = 4.0 * kPi * out.D;

    const int ne = static_cast<int>(edge_.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(4 * ne);
    const int nv = (order_L_ + 1) * (order_L_ + 1) - 1;
    for (int e = 0; e < ne; ++e) {
        const EdgeData& ed = edge_[e];
        Vec2 v = Vec2::Zero();
        if (nv > 0) {
            const auto& e1 = c.e1[ed.domain];
            const auto& e2 = c.e2[ed.domain];
            for (int k = 0; k < nv; ++k) {
                v.x() += e1[k] * edge_grad_(2 * e, k) + e2[k] * edge_rot_(2 * e, k);
                v.y() += e1[k] * edge_grad_(2 * e + 1, k) + e2[k] * edge_rot_(2 * e + 1, k);
            }
        }
        // n^T H n with H = (I + v v^T)/sqrt(1+|v|^2) and unit n.
        const double vn = v.dot(ed.normal);
        const double hnn = (1.0 + vn * vn) / std::sqrt(1.0 + v.squaredNorm());
        const double t = ed.arc_over_dist * hnn;
        if (!(t > 0.0)) throw std::logic_error("non-positive transmissibility");
        trip.emplace_back(ed.a, ed.b, t);
        trip.emplace_back(ed.b, ed.a, t);
        trip.emplace_back(ed.a, ed.a, -t);
        trip.emplace_back(ed.b, ed.b, -t);
    }
    out.A_H.resize(n_tri_, n_tri_);
    out.A_H.setFromTriplets(trip.begin(), trip.end());

    SparseMat M = -out.A_H;
    for (int i = 0; i < n_tri_; ++i) M.coeffRef(i, i) += out.D[i];
    const Eigen::VectorXd linv = out.L.cwiseInverse();
    SparseMat Q = M.transpose() * linv.asDiagonal() * M;
    out.Q = 0.5 * (SparseMat(Q.transpose()) + Q);  // exact structural symmetry
    return out;
}

PrecisionBuild assemble_precision(const SphereMesh& mesh, const DeformationCoeffs& coeffs) {
    return AssemblyCache(mesh, coeffs.order_L).assemble(coeffs);
}

double MaternTable::max_abs_dev(double r_min, double r_max) const {
    double dev = 0.0;
    for (const auto& row : rows)
        if (row.distance >= r_min && row.distance <= r_max)
            dev = std::max(dev, std::abs(row.empirical - row.analytic));
    return dev;
}

MaternTable matern_check(const SphereMesh& mesh, double rho_const, double r_max,
                         int max_targets) {
    DeformationCoeffs c = DeformationCoeffs::zeros(0);
    const double a00 = std::log(rho_const) * 2.0 * std::sqrt(kPi);  // Y_0^0 = 1/(2 sqrt(pi))
    c.alpha[0][0] = c.alpha[1][0] = a00;

    MaternTable table;
    table.too_coarse = mesh.n_triangles() < 500;

    const PrecisionBuild pb = assemble_precision(mesh, c);
    const CholeskyFactor f = factorize(pb.Q);

    const int n = mesh.n_triangles();
    const int ref = mesh.locate(GeoPoint{0.0, 0.0});
    std::vector<double> dist(n);
    for (int i = 0; i < n; ++i) dist[i] = great_circle(mesh.centroids[ref], mesh.centroids[i]);

    // Stratified target sample over distance bins up to r_max.
    const int nbins = 48;
    std::vector<std::vector<int>> bins(nbins);
    for (int i = 0; i < n; ++i) {
        if (i == ref || dist[i] > r_max) continue;
        const int b = std::min(nbins - 1, static_cast<int>(dist[i] / r_max * nbins));
        bins[b].push_back(i);
    }
    std::vector<int> targets;
    const int per_bin = std::max(1, max_targets / nbins);
    for (auto& b : bins)
        for (int k = 0; k < static_cast<int>(b.size()) && k < per_bin; ++k)
            targets.push_back(b[k]);

    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, targets.size() + 1);
    rhs(ref, 0) = 1.0;
    for (size_t k = 0; k < targets.size(); ++k) rhs(targets[k], k + 1) = 1.0;
    const Eigen::MatrixXd cols = f.solve(rhs);  // columns of Q^{-1}

    const double var_ref = cols(ref, 0);
    auto analytic = [rho_const](double r) {
        if (r <= 0.0) return 1.0;
        const double x = r / rho_const;
        return x * std::cyl_bessel_k(1.0, x);
    };
    table.rows.push_back({0.0, 1.0, 1.0});
    for (size_t k = 0; k < targets.size(); ++k) {
        const int j = targets[k];
        const double var_j = cols(j, k + 1);
        MaternRow row;
        row.distance = dist[j];
        row.empirical = cols(j, 0) / std::sqrt(var_ref * var_j);
        row.analytic = analytic(dist[j]);
        table.rows.push_back(row);
    }
    std::sort(table.rows.begin(), table.rows.end(),
              [](const MaternRow& a, const MaternRow& b) { return a.distance < b.distance; });
    return table;
}

void save_matrix_coord(const SparseMat& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write matrix file: " + path);
    out.precision(17);
    out << m.rows() << ' ' << m.cols() << ' ' << m.nonZeros() << '\n';
    for (int k = 0; k < m.outerSize(); ++k)
        for (SparseMat::InnerIterator it(m, k); it; ++it)
            out << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

}  // namespace spde
