#pragma once

#include "spde/geo.hpp"

namespace spde {

/// Real-form spherical harmonic Y_l^m(s), orthonormal on the sphere:
/// integral of Y_l^m * Y_l'^m' over S^2 is delta_ll' delta_mm'.
/// Requires |m| <= l.
double real_sph_harmonic(int l, int m, const Vec3& s);

/// Surface gradient of Y_l^m at s, expressed as (east, north) components
/// in TangentBasis::at(s). Requires l >= 1 (the constant mode has no
/// gradient and is excluded from the vector-field basis).
Vec2 surf_gradient_Y(int l, int m, const Vec3& s);

/// 90-degree counterclockwise rotation in the tangent plane, i.e. the
/// field r_hat x grad(Y) given grad(Y).
inline Vec2 rotate90(const Vec2& v) { return {-v.y(), v.x()}; }

}  // namespace spde
