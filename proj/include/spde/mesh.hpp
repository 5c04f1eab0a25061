#pragma once

#include "spde/geo.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace spde {

enum class Region : std::uint8_t { land = 0, sea = 1, buffer = 2 };

/// The two base domains carrying separate harmonic expansions.
enum class Domain : std::uint8_t { land = 0, sea = 1 };

inline const char* to_string(Region r) {
    switch (r) {
        case Region::land: return "land";
        case Region::sea: return "sea";
        default: return "buffer";
    }
}

/// Shared edge between two triangles. `normal` is the unit outward normal
/// of the edge as seen from tri_a, lying in the tangent plane at `midpoint`.
/// Seen from tri_b the outward normal is -normal.
struct MeshEdge {
    int tri_a = -1;
    int tri_b = -1;
    int v0 = -1, v1 = -1;   // endpoint vertex indices
    double arc_length = 0;  // great-circle length of the edge
    Vec3 midpoint;          // unit vector at the geodesic edge midpoint
    Vec3 normal;            // outward from tri_a, tangent at midpoint
};

/// Geodesic triangulation of the unit sphere with per-triangle region tags.
/// Immutable after construction; locate() may be called concurrently.
struct SphereMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> centroids;        // spherical projection of barycenter
    std::vector<double> areas;          // steradians
    std::vector<MeshEdge> edges;
    std::vector<std::array<int, 3>> tri_edges;  // edge ids per triangle
    std::vector<Region> region;         // tag per triangle
    std::vector<Domain> base_domain;    // governing domain (for buffer tiles:
                                        // the domain of the underlying side)

    int n_triangles() const { return static_cast<int>(triangles.size()); }
    double total_area() const;

    /// Index of the triangle whose spherical region contains p.
    /// Ties on edges are broken by lowest triangle index.
    int locate(const Vec3& p) const;
    int locate(const GeoPoint& p) const { return locate(unit_vector(p)); }

    /// Exact spherical point-in-triangle test (inclusive of edges).
    bool contains(int tri, const Vec3& p, double tol = 1e-12) const;
};

/// Land classification: lon/lat polygon rings (even-odd rule in the
/// lon/lat plane) plus a coastal buffer width in km.
struct RegionMap {
    std::vector<std::vector<GeoPoint>> land_rings;
    double buffer_width_km = 200.0;

    bool is_land(const GeoPoint& p) const;
    /// Great-circle distance (radians) from p to the nearest coastline segment.
    double coast_distance(const Vec3& p) const;

    static RegionMap load_geojson(const std::string& path);
};

/// Icosahedron-based geodesic sphere with `subdivisions` 4-way face splits.
/// subdivisions must be <= 8.
SphereMesh build_icosphere(int subdivisions);

/// Lon/lat rectangle; lon_min > lon_max means the box wraps the dateline.
struct LonLatBox {
    double lon_min, lon_max, lat_min, lat_max;
    bool contains(const GeoPoint& p) const;
};

/// Split triangles whose centroid lies in `box` `levels` times, inserting
/// conforming (red-green) transition triangles at the box boundary.
SphereMesh refine_region(const SphereMesh& mesh, const LonLatBox& box, int levels);

/// Classify each triangle centroid as land/sea/buffer.
SphereMesh tag_regions(const SphereMesh& mesh, const RegionMap& map);

/// Plain-text export/import (header with counts, vertex/triangle/edge/tag lines).
void save_mesh(const SphereMesh& mesh, std::ostream& out);
void save_mesh(const SphereMesh& mesh, const std::string& path);
SphereMesh load_mesh(std::istream& in);
SphereMesh load_mesh_file(const std::string& path);

}  // namespace spde
