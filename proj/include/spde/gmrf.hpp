#pragma once

#include "spde/precision.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

#include <cstdint>
#include <memory>
#include <vector>

namespace spde {

/// Sparse Cholesky factorization (fill-reducing AMD ordering) of an SPD
/// precision matrix. Solves against a finished factor are concurrent-safe.
class CholeskyFactor {
  public:
    explicit CholeskyFactor(const SparseMat& Q);

    int dim() const { return dim_; }
    double log_det() const { return log_det_; }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return llt_->solve(b); }
    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return llt_->solve(b); }

    /// x = P^{-1} L^{-T} z; for z ~ N(0, I) this gives x ~ N(0, Q^{-1}).
    Eigen::VectorXd backsolve_white(const Eigen::VectorXd& z) const;

  private:
    std::shared_ptr<Eigen::SimplicialLLT<SparseMat>> llt_;
    int dim_ = 0;
    double log_det_ = 0.0;
};

CholeskyFactor factorize(const SparseMat& Q);

/// `count` independent draws from N(0, Q^{-1}), one per column.
/// Deterministic given the seed.
Eigen::MatrixXd sample(const CholeskyFactor& factor, int count, std::uint64_t seed);

struct KrigingResult {
    Eigen::VectorXd mean;      // per target
    Eigen::VectorXd variance;  // per target (diagonal only)
    Eigen::MatrixXd samples;   // optional joint draws at targets (may be empty)
};

/// Conditional distribution of a GMRF with prior precision Q given noisy
/// observations y_i = x_{obs_idx[i]} + N(0, noise_var[i]). Zero noise is
/// treated as an exact constraint (via a large weight). All computations
/// go through sparse solves on the augmented precision.
KrigingResult krige(const SparseMat& Q, const std::vector<int>& obs_idx,
                    const Eigen::VectorXd& obs_values, const Eigen::VectorXd& noise_var,
                    const std::vector<int>& targets, int sample_count = 0,
                    std::uint64_t seed = 0);

/// KL divergence between mean-zero Gaussians N(0, Sigma0) and N(0, Sigma1):
/// 0.5 (tr(Sigma1^{-1} Sigma0) - n + ln det Sigma1 / det Sigma0).
double kld_gaussian(const Eigen::MatrixXd& sigma0, const Eigen::MatrixXd& sigma1);

}  // namespace spde
