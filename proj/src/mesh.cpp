#include "spde/mesh.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace spde {

namespace {

double spherical_triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    // Van Oosterom & Strackee: tan(E/2) = |a.(b x c)| / (1 + a.b + b.c + c.a)
    const double num = std::abs(a.dot(b.cross(c)));
    const double den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    return 2.0 * std::atan2(num, den);
}

/// Recompute centroids, areas, edges and adjacency from vertices+triangles.
/// Also fixes triangle orientation to CCW seen from outside.
void finalize(SphereMesh& m) {
    const int nt = m.n_triangles();
    m.centroids.resize(nt);
    m.areas.resize(nt);
    for (int i = 0; i < nt; ++i) {
        auto& t = m.triangles[i];
        const Vec3 &a = m.vertices[t[0]], &b = m.vertices[t[1]], &c = m.vertices[t[2]];
        if (a.dot(b.cross(c)) < 0.0) std::swap(t[1], t[2]);
        const Vec3 &v1 = m.vertices[t[1]], &v2 = m.vertices[t[2]];
        m.centroids[i] = (a + v1 + v2).normalized();
        m.areas[i] = spherical_triangle_area(a, v1, v2);
        if (m.areas[i] <= 0.0) throw std::runtime_error("degenerate triangle in mesh");
    }

    std::map<std::pair<int, int>, std::pair<int, int>> edge_tris;  // (vmin,vmax) -> (tri_a, tri_b)
    for (int i = 0; i < nt; ++i) {
        const auto& t = m.triangles[i];
        for (int j = 0; j < 3; ++j) {
            auto key = std::minmax(t[j], t[(j + 1) % 3]);
            auto it = edge_tris.find(key);
            if (it == edge_tris.end()) {
                edge_tris[key] = {i, -1};
            } else {
                if (it->second.second != -1)
                    throw std::runtime_error("non-manifold edge in mesh");
                it->second.second = i;
            }
        }
    }

    m.edges.clear();
    m.edges.reserve(edge_tris.size());
    m.tri_edges.assign(nt, {-1, -1, -1});
    std::vector<int> slot(nt, 0);
    for (const auto& [key, tris] : edge_tris) {
        if (tris.second == -1) throw std::runtime_error("boundary edge: sphere mesh must be closed");
        MeshEdge e;
        e.tri_a = tris.first;
        e.tri_b = tris.second;
        e.v0 = key.first;
        e.v1 = key.second;
        const Vec3 &va = m.vertices[e.v0], &vb = m.vertices[e.v1];
        e.arc_length = great_circle(va, vb);
        e.midpoint = (va + vb).normalized();
        Vec3 tangent = (vb - va) - (vb - va).dot(e.midpoint) * e.midpoint;
        tangent.normalize();
        Vec3 n = e.midpoint.cross(tangent);
        // orient outward from tri_a
        if (n.dot(m.centroids[e.tri_a] - e.midpoint) > 0.0) n = -n;
        e.normal = n.normalized();
        const int id = static_cast<int>(m.edges.size());
        m.edges.push_back(e);
        m.tri_edges[e.tri_a][slot[e.tri_a]++] = id;
        m.tri_edges[e.tri_b][slot[e.tri_b]++] = id;
    }
    for (int i = 0; i < nt; ++i)
        if (slot[i] != 3) throw std::runtime_error("triangle without 3 edges");

    if (m.region.size() != static_cast<size_t>(nt)) m.region.assign(nt, Region::sea);
    if (m.base_domain.size() != static_cast<size_t>(nt)) m.base_domain.assign(nt, Domain::sea);
}

}  // namespace

double SphereMesh::total_area() const {
    return std::accumulate(areas.begin(), areas.end(), 0.0);
}

bool SphereMesh::contains(int tri, const Vec3& p, double tol) const {
    const auto& t = triangles[tri];
    for (int j = 0; j < 3; ++j) {
        const Vec3 &a = vertices[t[j]], &b = vertices[t[(j + 1) % 3]];
        if (a.dot(b.cross(p)) < -tol) return false;
    }
    return true;
}

int SphereMesh::locate(const Vec3& p) const {
    const Vec3 u = p.normalized();
    int best = 0;
    double best_margin = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_triangles(); ++i) {
        const auto& t = triangles[i];
        double margin = std::numeric_limits<double>::infinity();
        for (int j = 0; j < 3; ++j) {
            const Vec3 &a = vertices[t[j]], &b = vertices[t[(j + 1) % 3]];
            margin = std::min(margin, a.dot(b.cross(u)));
        }
        if (margin >= -1e-12) return i;  // lowest-index tie break
        if (margin > best_margin) {
            best_margin = margin;
            best = i;
        }
    }
    return best;  // numerically on an edge; nearest by margin
}

SphereMesh build_icosphere(int subdivisions) {
    if (subdivisions < 0) throw std::invalid_argument("subdivisions must be >= 0");
    if (subdivisions > 8) throw std::length_error("subdivisions > 8 exceeds capacity guard");

    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts = {
        {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
        {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
        {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
    for (auto& v : verts) v.normalize();
    std::vector<std::array<int, 3>> tris = {
        {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
        {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
        {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};

    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            verts.push_back((verts[a] + verts[b]).normalized());
            int id = static_cast<int>(verts.size()) - 1;
            midpoint[key] = id;
            return id;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(tris.size() * 4);
        for (const auto& t : tris) {
            const int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]), ca = mid(t[2], t[0]);
            next.push_back({t[0], ab, ca});
            next.push_back({t[1], bc, ab});
            next.push_back({t[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        tris = std::move(next);
    }

    SphereMesh m;
    m.vertices = std::move(verts);
    m.triangles = std::move(tris);
    finalize(m);
    return m;
}

bool LonLatBox::contains(const GeoPoint& p) const {
    if (p.lat < lat_min || p.lat > lat_max) return false;
    double lo = lon_min, hi = lon_max, x = p.lon;
    if (lo <= hi) return x >= lo && x <= hi;
    return x >= lo || x <= hi;  // dateline wrap
}

SphereMesh refine_region(const SphereMesh& mesh, const LonLatBox& box, int levels) {
    if (box.lat_min >= box.lat_max || box.lon_min == box.lon_max)
        throw std::invalid_argument("empty refinement box");
    if (levels < 0 || levels > 4) throw std::invalid_argument("levels must be in [0, 4]");
    if (levels == 0) return mesh;

    SphereMesh cur = mesh;
    for (int lev = 0; lev < levels; ++lev) {
        const int nt = cur.n_triangles();
        std::vector<char> red(nt, 0);
        for (int i = 0; i < nt; ++i)
            red[i] = box.contains(geo_point(cur.centroids[i])) ? 1 : 0;

        // Red-green closure: an edge splits when either owner is red;
        // a triangle with >= 2 split edges becomes red itself.
        bool changed = true;
        while (changed) {
            changed = false;
            for (int i = 0; i < nt; ++i) {
                if (red[i]) continue;
                int nsplit = 0;
                for (int eid : cur.tri_edges[i]) {
                    const auto& e = cur.edges[eid];
                    const int other = (e.tri_a == i) ? e.tri_b : e.tri_a;
                    if (red[other]) ++nsplit;
                }
                if (nsplit >= 2) {
                    red[i] = 1;
                    changed = true;
                }
            }
        }

        std::vector<Vec3> verts = cur.vertices;
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            verts.push_back((verts[a] + verts[b]).normalized());
            int id = static_cast<int>(verts.size()) - 1;
            midpoint[key] = id;
            return id;
        };

        SphereMesh next;
        const bool carry_tags = cur.region.size() == static_cast<size_t>(nt);
        auto emit = [&](const std::array<int, 3>& t, int parent) {
            next.triangles.push_back(t);
            if (carry_tags) {
                next.region.push_back(cur.region[parent]);
                next.base_domain.push_back(cur.base_domain[parent]);
            }
        };

        for (int i = 0; i < nt; ++i) {
            const auto& t = cur.triangles[i];
            if (red[i]) {
                const int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]), ca = mid(t[2], t[0]);
                emit({t[0], ab, ca}, i);
                emit({t[1], bc, ab}, i);
                emit({t[2], ca, bc}, i);
                emit({ab, bc, ca}, i);
                continue;
            }
            // Which single edge (if any) is split by a red neighbor?
            int split_edge = -1;
            for (int eid : cur.tri_edges[i]) {
                const auto& e = cur.edges[eid];
                const int other = (e.tri_a == i) ? e.tri_b : e.tri_a;
                if (red[other]) split_edge = eid;
            }
            if (split_edge < 0) {
                emit(t, i);
                continue;
            }
            // Green split: apex to the midpoint of the split edge.
            const auto& e = cur.edges[split_edge];
            int apex = -1;
            for (int v : t)
                if (v != e.v0 && v != e.v1) apex = v;
            const int mpt = mid(e.v0, e.v1);
            emit({apex, e.v0, mpt}, i);
            emit({apex, mpt, e.v1}, i);
        }
        next.vertices = std::move(verts);
        finalize(next);
        cur = std::move(next);
    }
    return cur;
}

bool RegionMap::is_land(const GeoPoint& p) const {
    // Even-odd rule in the lon/lat plane (rings are given in lon/lat
    // coordinates; adequate for the coarse coastlines shipped here).
    bool inside = false;
    for (const auto& ring : land_rings) {
        const size_t n = ring.size();
        for (size_t i = 0; i + 1 < n; ++i) {
            const GeoPoint &a = ring[i], &b = ring[i + 1];
            if ((a.lat > p.lat) == (b.lat > p.lat)) continue;
            const double x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if (x > p.lon) inside = !inside;
        }
    }
    return inside;
}

double RegionMap::coast_distance(const Vec3& p) const {
    double best = kPi;
    for (const auto& ring : land_rings) {
        const size_t n = ring.size();
        for (size_t i = 0; i + 1 < n; ++i) {
            const Vec3 a = unit_vector(ring[i]);
            const Vec3 b = unit_vector(ring[i + 1]);
            best = std::min(best, point_to_arc(p, a, b));
        }
    }
    return best;
}

RegionMap RegionMap::load_geojson(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open region map: " + path);
    nlohmann::json j;
    in >> j;

    RegionMap map;
    auto add_polygon = [&map](const nlohmann::json& coords) {
        for (const auto& ring : coords) {
            std::vector<GeoPoint> r;
            for (const auto& pt : ring)
                r.push_back({pt.at(1).get<double>(), pt.at(0).get<double>()});
            if (r.size() < 4) throw std::runtime_error("polygon ring with < 3 distinct points");
            if (std::abs(r.front().lat - r.back().lat) > 1e-12 ||
                std::abs(r.front().lon - r.back().lon) > 1e-12)
                throw std::runtime_error("open polygon ring in region map");
            map.land_rings.push_back(std::move(r));
        }
    };
    std::function<void(const nlohmann::json&)> walk = [&](const nlohmann::json& node) {
        const std::string type = node.value("type", "");
        if (type == "FeatureCollection") {
            for (const auto& f : node.at("features")) walk(f);
        } else if (type == "Feature") {
            walk(node.at("geometry"));
        } else if (type == "Polygon") {
            add_polygon(node.at("coordinates"));
        } else if (type == "MultiPolygon") {
            for (const auto& poly : node.at("coordinates")) add_polygon(poly);
        } else {
            throw std::runtime_error("unsupported GeoJSON node type: " + type);
        }
    };
    walk(j);
    return map;
}

SphereMesh tag_regions(const SphereMesh& mesh, const RegionMap& map) {
    for (const auto& ring : map.land_rings) {
        if (ring.size() < 4 || std::abs(ring.front().lat - ring.back().lat) > 1e-12 ||
            std::abs(ring.front().lon - ring.back().lon) > 1e-12)
            throw std::runtime_error("open polygon ring in region map");
    }
    const double buf_rad = map.buffer_width_km / kEarthRadiusKm;
    SphereMesh out = mesh;
    const int nt = out.n_triangles();
    out.region.resize(nt);
    out.base_domain.resize(nt);
    for (int i = 0; i < nt; ++i) {
        const GeoPoint g = geo_point(out.centroids[i]);
        const bool land = map.is_land(g);
        out.base_domain[i] = land ? Domain::land : Domain::sea;
        if (buf_rad > 0.0 && map.coast_distance(out.centroids[i]) <= buf_rad)
            out.region[i] = Region::buffer;
        else
            out.region[i] = land ? Region::land : Region::sea;
    }
    return out;
}

void save_mesh(const SphereMesh& m, std::ostream& out) {
    out.precision(17);
    out << "spheremesh 1\n";
    out << m.vertices.size() << ' ' << m.triangles.size() << ' ' << m.edges.size() << '\n';
    for (const auto& v : m.vertices)
        out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (int i = 0; i < m.n_triangles(); ++i) {
        const auto& t = m.triangles[i];
        out << "t " << t[0] << ' ' << t[1] << ' ' << t[2] << ' '
            << to_string(m.region[i]) << ' '
            << (m.base_domain[i] == Domain::land ? "land" : "sea") << '\n';
    }
    for (const auto& e : m.edges) {
        out << "e " << e.tri_a << ' ' << e.tri_b << ' ' << e.v0 << ' ' << e.v1 << ' '
            << e.arc_length << ' ' << e.midpoint.x() << ' ' << e.midpoint.y() << ' '
            << e.midpoint.z() << ' ' << e.normal.x() << ' ' << e.normal.y() << ' '
            << e.normal.z() << '\n';
    }
}

void save_mesh(const SphereMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write mesh file: " + path);
    save_mesh(mesh, out);
}

SphereMesh load_mesh(std::istream& in) {
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "spheremesh" || version != 1)
        throw std::runtime_error("not a spheremesh v1 file");
    size_t nv = 0, nt = 0, ne = 0;
    in >> nv >> nt >> ne;
    SphereMesh m;
    m.vertices.reserve(nv);
    m.triangles.reserve(nt);
    m.region.reserve(nt);
    m.base_domain.reserve(nt);
    std::string tag;
    for (size_t i = 0; i < nv; ++i) {
        double x, y, z;
        in >> tag >> x >> y >> z;
        if (tag != "v") throw std::runtime_error("malformed mesh file (vertex section)");
        m.vertices.emplace_back(x, y, z);
    }
    for (size_t i = 0; i < nt; ++i) {
        int a, b, c;
        std::string reg, base;
        in >> tag >> a >> b >> c >> reg >> base;
        if (tag != "t") throw std::runtime_error("malformed mesh file (triangle section)");
        m.triangles.push_back({a, b, c});
        m.region.push_back(reg == "land" ? Region::land
                                         : (reg == "sea" ? Region::sea : Region::buffer));
        m.base_domain.push_back(base == "land" ? Domain::land : Domain::sea);
    }
    // Edge lines exist for external consumers; adjacency is recomputed.
    finalize(m);
    if (m.edges.size() != ne)
        throw std::runtime_error("mesh file edge count mismatch");
    return m;
}

SphereMesh load_mesh_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mesh file: " + path);
    return load_mesh(in);
}

}  // namespace spde
