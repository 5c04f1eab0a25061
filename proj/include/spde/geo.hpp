#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

namespace spde {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kEarthRadiusKm = 6371.0;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Geographic point, latitude in [-90, 90], longitude in [-180, 180).
struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
};

inline Vec3 unit_vector(const GeoPoint& p) {
    const double L = deg2rad(p.lat), l = deg2rad(p.lon);
    return {std::cos(L) * std::cos(l), std::cos(L) * std::sin(l), std::sin(L)};
}

inline GeoPoint geo_point(const Vec3& u) {
    GeoPoint p;
    p.lat = rad2deg(std::asin(std::clamp(u.z() / u.norm(), -1.0, 1.0)));
    p.lon = rad2deg(std::atan2(u.y(), u.x()));
    if (p.lon >= 180.0) p.lon -= 360.0;
    return p;
}

/// Great-circle (geodesic) distance between two unit vectors, in radians.
inline double great_circle(const Vec3& a, const Vec3& b) {
    return std::atan2(a.cross(b).norm(), a.dot(b));
}

/// Local east-north orthonormal frame at a point on the sphere.
/// Near the poles (within ~1e-6 rad) the usual frame degenerates; a
/// deterministic fallback anchored to the x axis is used instead.
struct TangentBasis {
    Vec3 east;
    Vec3 north;

    static TangentBasis at(const Vec3& s) {
        TangentBasis tb;
        const Vec3 z(0, 0, 1);
        Vec3 e = z.cross(s);
        if (e.norm() < 1e-6) {
            e = Vec3(1, 0, 0).cross(s);  // pole fallback
        }
        tb.east = e.normalized();
        tb.north = s.cross(tb.east).normalized();
        return tb;
    }

    Vec2 project(const Vec3& w) const { return {east.dot(w), north.dot(w)}; }
    Vec3 lift(const Vec2& w) const { return w.x() * east + w.y() * north; }
};

/// Distance (radians) from point p to the geodesic arc [a, b].
inline double point_to_arc(const Vec3& p, const Vec3& a, const Vec3& b) {
    Vec3 n = a.cross(b);
    const double nn = n.norm();
    if (nn < 1e-15) return great_circle(p, a);  // degenerate segment
    n /= nn;
    // Foot of the perpendicular on the great circle through a,b.
    Vec3 foot = (p - p.dot(n) * n);
    const double fn = foot.norm();
    if (fn < 1e-15) return kPi / 2.0;  // p is a pole of the circle
    foot /= fn;
    // Inside the arc iff foot lies between a and b along the circle.
    const double ab = great_circle(a, b);
    if (great_circle(a, foot) <= ab && great_circle(b, foot) <= ab) {
        return great_circle(p, foot);
    }
    return std::min(great_circle(p, a), great_circle(p, b));
}

}  // namespace spde
