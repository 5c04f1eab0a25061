#pragma once

#include "spde/deform.hpp"
#include "spde/mesh.hpp"

#include <Eigen/Sparse>

#include <string>
#include <vector>

namespace spde {

using SparseMat = Eigen::SparseMatrix<double>;

/// Q = (D - A_H)^T L^{-1} (D - A_H) together with its factors.
/// D is diagonal with |T_i| / rho(x_i)^2; L = 4 pi D (white-noise variance
/// 4 pi per unit area, giving the stationary field near-unit variance).
struct PrecisionBuild {
    SparseMat Q;
    SparseMat A_H;
    Eigen::VectorXd D;
    Eigen::VectorXd L;
};

/// Mesh-dependent quantities that do not change with the hyperparameters:
/// harmonic basis values at centroids and basis gradients at edge midpoints,
/// plus the edge-domain assignment. Build once per mesh, reuse across the
/// optimizer's many assemblies.
class AssemblyCache {
  public:
    AssemblyCache(const SphereMesh& mesh, int order_L);

    PrecisionBuild assemble(const DeformationCoeffs& coeffs) const;

    /// rho at every triangle centroid (buffer drop applied).
    Eigen::VectorXd centroid_rho(const DeformationCoeffs& coeffs) const;

    int n_triangles() const { return n_tri_; }
    int order() const { return order_L_; }

    /// Governing domain index (0 = land, 1 = sea) of triangle i.
    int tri_domain(int i) const { return tri_domain_[i]; }
    bool tri_in_buffer(int i) const { return tri_buffer_[i] != 0; }

  private:
    int n_tri_;
    int order_L_;
    Eigen::VectorXd area_;
    // centroid basis: (n_alpha x n_tri)
    Eigen::MatrixXd cen_Y_;
    std::vector<int> tri_domain_;
    std::vector<char> tri_buffer_;
    // per edge
    struct EdgeData {
        int a, b;
        int domain;          // governing domain for v at the midpoint
        double arc_over_dist;
        Vec2 normal;         // unit outward normal from a, tangent frame at midpoint
    };
    std::vector<EdgeData> edge_;
    Eigen::MatrixXd edge_grad_;  // (2*n_edges x n_vec): gradY rows
    Eigen::MatrixXd edge_rot_;   // (2*n_edges x n_vec): rotated gradY rows
};

/// One-shot assembly (builds a throwaway cache).
PrecisionBuild assemble_precision(const SphereMesh& mesh, const DeformationCoeffs& coeffs);

/// Stationary sanity table: empirical correlations from Q^{-1} against the
/// analytic Matern (nu = 1) correlation C(r) = (r/rho) K_1(r/rho).
struct MaternRow {
    double distance;     // geodesic, radians
    double empirical;
    double analytic;
};
struct MaternTable {
    std::vector<MaternRow> rows;
    bool too_coarse = false;  // n_T < 500
    double max_abs_dev(double r_min, double r_max) const;
};
MaternTable matern_check(const SphereMesh& mesh, double rho_const,
                         double r_max = 1.2, int max_targets = 400);

/// Coordinate text export (row col value per line) for external oracles.
void save_matrix_coord(const SparseMat& m, const std::string& path);

}  // namespace spde
