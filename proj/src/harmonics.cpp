#include "spde/harmonics.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace spde {

namespace {

/// Fully normalized associated Legendre P̄_l^m(cos θ), m >= 0, such that
/// Y_l^0 = P̄_l^0 and Y_l^{m≠0} = sqrt(2) P̄_l^|m| {cos,sin}(|m|φ) are
/// orthonormal. Standard forward column recurrence.
double norm_assoc_legendre(int l, int m, double cos_t, double sin_t) {
    double pmm = std::sqrt(1.0 / (4.0 * kPi));
    for (int k = 1; k <= m; ++k)
        pmm *= -std::sqrt((2.0 * k + 1.0) / (2.0 * k)) * sin_t;
    if (l == m) return pmm;
    double pm1 = std::sqrt(2.0 * m + 3.0) * cos_t * pmm;  // l = m+1
    if (l == m + 1) return pm1;
    double pm2 = pmm;
    for (int k = m + 2; k <= l; ++k) {
        const double a = std::sqrt((4.0 * k * k - 1.0) / (double(k) * k - double(m) * m));
        const double b = std::sqrt(((k - 1.0) * (k - 1.0) - double(m) * m) /
                                   (4.0 * (k - 1.0) * (k - 1.0) - 1.0));
        const double p = a * (cos_t * pm1 - b * pm2);
        pm2 = pm1;
        pm1 = p;
    }
    return pm1;
}

/// d P̄_l^m(cos θ) / dθ via the stable relation
///   sinθ dP̄/dθ = l cosθ P̄_l^m - sqrt((l²-m²)(2l+1)/(2l-1)) P̄_{l-1}^m.
double norm_assoc_legendre_dtheta(int l, int m, double cos_t, double sin_t) {
    const double plm = norm_assoc_legendre(l, m, cos_t, sin_t);
    double plm1 = 0.0;
    if (l - 1 >= m) plm1 = norm_assoc_legendre(l - 1, m, cos_t, sin_t);
    const double c = std::sqrt((double(l) * l - double(m) * m) * (2.0 * l + 1.0) / (2.0 * l - 1.0));
    return (l * cos_t * plm - c * plm1) / sin_t;
}

struct Spherical {
    double cos_t, sin_t, phi;
};

Spherical to_spherical(const Vec3& s) {
    Spherical sp;
    const double r = s.norm();
    sp.cos_t = std::clamp(s.z() / r, -1.0, 1.0);
    sp.sin_t = std::sqrt(std::max(0.0, 1.0 - sp.cos_t * sp.cos_t));
    sp.phi = std::atan2(s.y(), s.x());
    return sp;
}

}  // namespace

double real_sph_harmonic(int l, int m, const Vec3& s) {
    if (l < 0 || std::abs(m) > l) throw std::invalid_argument("real_sph_harmonic: need |m| <= l");
    const Spherical sp = to_spherical(s);
    const int am = std::abs(m);
    const double p = norm_assoc_legendre(l, am, sp.cos_t, sp.sin_t);
    if (m == 0) return p;
    const double sq2 = std::sqrt(2.0);
    return (m > 0) ? sq2 * p * std::cos(am * sp.phi) : sq2 * p * std::sin(am * sp.phi);
}

Vec2 surf_gradient_Y(int l, int m, const Vec3& s) {
    if (l < 1) throw std::invalid_argument("surf_gradient_Y: l must be >= 1");
    if (std::abs(m) > l) throw std::invalid_argument("surf_gradient_Y: need |m| <= l");
    Spherical sp = to_spherical(s);
    // Deterministic nudge away from the exact poles where the east/north
    // frame (and 1/sinθ) degenerate.
    constexpr double kPoleEps = 1e-6;
    if (sp.sin_t < kPoleEps) {
        sp.sin_t = kPoleEps;
        sp.cos_t = std::copysign(std::sqrt(1.0 - kPoleEps * kPoleEps), sp.cos_t);
    }
    const int am = std::abs(m);
    const double dp = norm_assoc_legendre_dtheta(l, am, sp.cos_t, sp.sin_t);
    const double p = norm_assoc_legendre(l, am, sp.cos_t, sp.sin_t);
    const double sq2 = std::sqrt(2.0);

    // grad Y = e_theta dY/dθ + e_phi (1/sinθ) dY/dφ ;  north = -e_theta.
    double dtheta, dphi_over_sin;
    if (m == 0) {
        dtheta = dp;
        dphi_over_sin = 0.0;
    } else if (m > 0) {
        dtheta = sq2 * dp * std::cos(am * sp.phi);
        dphi_over_sin = sq2 * p * (-am * std::sin(am * sp.phi)) / sp.sin_t;
    } else {
        dtheta = sq2 * dp * std::sin(am * sp.phi);
        dphi_over_sin = sq2 * p * (am * std::cos(am * sp.phi)) / sp.sin_t;
    }
    return {dphi_over_sin, -dtheta};  // (east, north)
}

}  // namespace spde
