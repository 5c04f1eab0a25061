#pragma once

#include "spde/geo.hpp"
#include "spde/harmonics.hpp"
#include "spde/mesh.hpp"

#include <array>
#include <string>
#include <vector>

namespace spde {

/// Full spatial hyperparameter vector: per-domain harmonic expansions of
/// log rho and of the anisotropy vector field, the coastal buffer drop d,
/// and per-domain nuggets.
///
/// Flat (l,m) indexing: idx = l*l + (m+l). alpha covers l = 0..L,
/// e1/e2 cover l = 1..L (their arrays start at l = 1, i.e. idx-1).
struct DeformationCoeffs {
    int order_L = 1;
    std::array<std::vector<double>, 2> alpha;  // [domain][(L+1)^2]
    std::array<std::vector<double>, 2> e1;     // [domain][(L+1)^2 - 1]
    std::array<std::vector<double>, 2> e2;     // [domain][(L+1)^2 - 1]
    double drop_d = 1.0;                       // in [0, 1]
    std::array<double, 2> nugget = {1e-4, 1e-4};  // tau^2 per domain, > 0

    static DeformationCoeffs zeros(int order_L);
    void validate() const;

    int n_alpha() const { return (order_L + 1) * (order_L + 1); }
    int n_vec() const { return n_alpha() - 1; }
    /// 4(L^2+2L) vector-field + 2(L^2+2L+1) scalar + d + 2 nuggets
    /// = 6(L^2+2L) + 5 parameters in total.
    int n_params() const { return 2 * n_alpha() + 4 * n_vec() + 3; }
};

/// Local metric quantities at a point: the range rho(s), the anisotropy
/// vector v(s) in TangentBasis coordinates, the inverse deformation tensor
/// Ginv = rho^2 (I + v v^T)/sqrt(1+|v|^2) and its unit-determinant part H.
struct LocalMetric {
    double rho = 1.0;
    Vec2 v = Vec2::Zero();
    Mat2 Ginv = Mat2::Identity();
    Mat2 H = Mat2::Identity();
};

/// Region governing the expansion at a point: the tag plus the base domain
/// used when the tag is buffer.
struct RegionInfo {
    Region tag = Region::sea;
    Domain base = Domain::sea;
};

/// Evaluate rho(s) only (cheaper than the full metric).
double eval_rho(const DeformationCoeffs& c, const Vec3& s, const RegionInfo& where);

/// Evaluate the full local metric at s under the given region.
/// Throws if the buffer drop would make rho non-positive.
LocalMetric eval_metric(const DeformationCoeffs& c, const Vec3& s, const RegionInfo& where);

/// Flat key-value text fixture format: one of
///   alpha <domain> <l> <m> <value>
///   e1|e2 <domain> <l> <m> <value>
///   drop <value> / nugget <domain> <value> / order <L>
void save_coeffs(const DeformationCoeffs& c, const std::string& path);
DeformationCoeffs load_coeffs(const std::string& path);

}  // namespace spde
