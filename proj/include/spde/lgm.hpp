#pragma once

#include "spde/gmrf.hpp"
#include "spde/mesh.hpp"
#include "spde/precision.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace spde {

// ---------------------------------------------------------------------------
// Marginal families and links (pairings fixed: Gaussian-identity,
// Bernoulli-logit, Gamma-negative-inverse).
// ---------------------------------------------------------------------------

enum class Family { gaussian, bernoulli, gamma };

struct MarginalFamily {
    Family kind = Family::gaussian;
    double sigma2 = 1.0;  // Gaussian observation variance
    double shape = 1.0;   // Gamma shape

    static MarginalFamily gaussian_model(double sigma2);
    static MarginalFamily bernoulli_model();
    static MarginalFamily gamma_model(double shape);

    double link(double mu) const;       // g(mu)
    double inv_link(double eta) const;  // g^{-1}(eta)
    bool eta_valid(double eta) const;   // gamma requires eta < 0

    double loglik(double y, double eta) const;
    double dloglik(double y, double eta) const;
    double d2loglik(double y, double eta) const;  // always <= 0 here
};

// ---------------------------------------------------------------------------
// Step 1: per-location temporal fits (harmonic design, optional covariates)
// ---------------------------------------------------------------------------

struct LocationTemporalFit {
    Eigen::VectorXd beta;        // covariate coefficients (may be empty)
    Eigen::VectorXd zeta_sin;    // K entries
    Eigen::VectorXd zeta_cos;    // K entries
    Eigen::VectorXd fitted_eta;  // linear predictor at the fitted time points
    bool failed = false;         // rank-deficient design
    bool capped = false;         // divergence guard engaged (e.g. separation)
};

struct TemporalFit {
    int K = 0;
    int period = 365;  // delta; 365 or 366 for daily data
    std::vector<LocationTemporalFit> locations;

    /// Harmonic part of the linear predictor at (location, time t = 1, 2, ...).
    double eta(int location, double t) const;
    /// 2Kn
    int n_temporal_params() const { return 2 * K * static_cast<int>(locations.size()); }
};

/// series[loc][t]; NaN marks missing values. covariates, when present, give
/// per-location T x P design columns prepended to the harmonics.
TemporalFit fit_temporal(const std::vector<std::vector<double>>& series,
                         const MarginalFamily& family, int K, int period,
                         const std::vector<Eigen::MatrixXd>* covariates = nullptr);

/// Plain GLM on an explicit design: least squares for Gaussian, otherwise
/// IRLS with step halving (Gamma stays in the valid predictor range) and a
/// divergence cap against separation.
struct GlmFit {
    Eigen::VectorXd beta;
    bool failed = false;
    bool capped = false;
};
GlmFit fit_glm(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
               const MarginalFamily& family);

// ---------------------------------------------------------------------------
// Step 2: spatial hyperparameters via nested Laplace approximations
// ---------------------------------------------------------------------------

/// Which parts of the deformation are free: the four model variants.
///   order_L >= 1,  land_sea -> NS-LS    order_L >= 1, !land_sea -> NS
///   order_L == 0,  land_sea -> S-LS     order_L == 0, !land_sea -> S
struct ModelStructure {
    int order_L = 1;
    bool land_sea = true;

    int n_alpha() const { return (order_L + 1) * (order_L + 1); }
    int n_vec() const { return n_alpha() - 1; }
    int n_params() const;

    /// Transformed-scale layout: per-domain alpha, e1, e2 blocks, then
    /// logit(d) and log(tau^2) per domain (single domain when !land_sea).
    DeformationCoeffs to_coeffs(const Eigen::VectorXd& theta) const;
    Eigen::VectorXd to_theta(const DeformationCoeffs& coeffs) const;
};

/// Observation site: the triangle it falls in plus its nugget domain.
struct ObsSite {
    int triangle = 0;
    Domain domain = Domain::sea;
};

ObsSite site_for(const SphereMesh& mesh, const GeoPoint& p);
ObsSite site_for(const SphereMesh& mesh, const Vec3& p);

/// Observations mapped to sites. Replicates share the hyperparameters but
/// have independent latent fields (the spatial error is independent in time).
struct LgmData {
    std::vector<ObsSite> sites;
    std::vector<int> obs_site;
    std::vector<int> obs_replicate;
    Eigen::VectorXd obs_value;
    Eigen::VectorXd obs_offset;  // fixed (temporal/covariate) linear predictor part
    int n_replicates = 1;

    int n_sites() const { return static_cast<int>(sites.size()); }
    int n_obs() const { return static_cast<int>(obs_value.size()); }
    void validate() const;
};

struct InferenceConfig {
    int max_newton_iter = 50;
    double newton_grad_tol = 1e-9;
    int max_outer_iter = 120;
    double outer_grad_tol = 1e-4;
    double fd_step = 1e-5;
    double hessian_fd_step = 1e-3;
    double grid_step_sd = 0.75;   // step along standardized eigendirections
    double logpost_drop = 5.0;    // drop grid points this far below the mode
    int grid_max_steps = 6;
    int predictive_draws = 4000;
    std::uint64_t seed = 0;
};

struct NewtonDiagnostics {
    std::vector<double> objective;  // penalized log-likelihood per iterate
    double grad_norm = 0.0;
    bool converged = false;
};

struct GridPoint {
    Eigen::VectorXd theta;
    double log_post = 0.0;  // unnormalized log pi(theta | Y)
    double delta = 1.0;     // integration width
    double weight = 0.0;    // normalized; includes delta; sums to 1
};

class LgmEngine;

struct HyperPosterior {
    Eigen::VectorXd mode;
    double mode_log_post = 0.0;
    Eigen::VectorXd theta_sd;  // marginal posterior sd per component
    std::vector<GridPoint> grid;
    int n_invalid = 0;                     // grid points dropped for non-convergence
    std::vector<double> outer_objective;   // accepted quasi-Newton trajectory
    ModelStructure structure;
    std::shared_ptr<const LgmEngine> engine;

    Eigen::VectorXd posterior_mean_theta() const;
    DeformationCoeffs mode_coeffs() const { return structure.to_coeffs(mode); }
};

/// Inner/outer machinery, exposed so oracles can probe the pieces the
/// acceptance criteria name (inner Newton, outer objective).
class LgmEngine {
  public:
    LgmEngine(LgmData data, const SphereMesh& mesh, MarginalFamily family,
              ModelStructure structure, InferenceConfig cfg = {});

    /// Unnormalized log posterior of theta (Laplace-approximated likelihood
    /// plus the standard-normal prior). -inf when the configuration is
    /// invalid or the inner optimization fails.
    double log_posterior(const Eigen::VectorXd& theta) const;

    /// Laplace (exact for Gaussian) log marginal likelihood only.
    double log_marginal(const Eigen::VectorXd& theta) const;

    /// Inner Newton for one replicate; returns the latent conditional mode.
    Eigen::VectorXd inner_mode(const DeformationCoeffs& coeffs, int replicate,
                               NewtonDiagnostics* diag = nullptr) const;

    /// Conditional mean and (marginal) variance of the latent field at the
    /// given triangles, for one hyperparameter value and replicate.
    void conditional_moments(const Eigen::VectorXd& theta, int replicate,
                             const std::vector<int>& target_triangles,
                             Eigen::VectorXd& mean, Eigen::VectorXd& var) const;

    const LgmData& data() const { return data_; }
    const MarginalFamily& family() const { return family_; }
    const ModelStructure& structure() const { return structure_; }
    const InferenceConfig& config() const { return cfg_; }
    int n_latent() const { return n_latent_; }
    int n_triangles() const { return cache_.n_triangles(); }
    Domain triangle_domain(int tri) const {
        return cache_.tri_domain(tri) == 0 ? Domain::land : Domain::sea;
    }

  private:
    struct Conditional {
        Eigen::VectorXd mode;
        double log_det_H = 0.0;
        bool ok = false;
    };
    Conditional conditional(const SparseMat& P, int replicate,
                            NewtonDiagnostics* diag = nullptr) const;
    SparseMat prior_precision(const DeformationCoeffs& coeffs, double* log_det) const;
    double penalized_loglik(const SparseMat& P, const Eigen::VectorXd& u, int replicate) const;

    LgmData data_;
    AssemblyCache cache_;
    MarginalFamily family_;
    ModelStructure structure_;
    InferenceConfig cfg_;
    int n_latent_ = 0;
    std::vector<std::vector<int>> rep_obs_;  // observation ids per replicate
    mutable std::vector<Eigen::VectorXd> warm_;  // warm starts per replicate
};

HyperPosterior laplace_fit(const LgmData& data, const SphereMesh& mesh,
                           const MarginalFamily& family, const ModelStructure& structure,
                           const InferenceConfig& cfg = {});

// ---------------------------------------------------------------------------
// Posterior marginals and response-scale prediction
// ---------------------------------------------------------------------------

struct LatentPosterior {
    Eigen::VectorXd mean;
    Eigen::VectorXd sd;
    std::vector<double> probs;
    Eigen::MatrixXd quantiles;  // targets x probs
    // mixture pieces (per grid point) for the mixture-mean identity
    Eigen::MatrixXd component_means;  // targets x grid
    Eigen::VectorXd weights;
};

LatentPosterior latent_marginals(const HyperPosterior& hp,
                                 const std::vector<int>& target_triangles, int replicate = 0,
                                 const std::vector<double>& probs = {0.025, 0.5, 0.975});

struct PredictiveSummary {
    Eigen::VectorXd mean;
    Eigen::VectorXd sd;
    Eigen::VectorXd lower;  // 2.5%
    Eigen::VectorXd upper;  // 97.5%
};

/// Monte-Carlo predictive summaries on the response scale,
/// mu = g^{-1}(offset + latent + nugget), mixing over the theta grid.
PredictiveSummary predict_response(const HyperPosterior& hp, const SphereMesh& mesh,
                                   const std::vector<GeoPoint>& points,
                                   const Eigen::VectorXd& offsets, int replicate = 0,
                                   std::uint64_t seed = 1);

/// Fit report (theta*, grid table, diagnostics) as JSON.
void save_fit_report(const HyperPosterior& hp, const std::string& path);

}  // namespace spde
