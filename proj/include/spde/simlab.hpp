#pragma once

#include "spde/lgm.hpp"

#include <string>
#include <vector>

namespace spde {

// ---------------------------------------------------------------------------
// Model variants compared in the simulation studies
// ---------------------------------------------------------------------------

enum class ModelVariant { ns_ls, ns, s_ls, s };

const char* variant_name(ModelVariant v);
ModelVariant variant_from_name(const std::string& name);

/// NS-LS: full model. NS: single-domain coefficients, no buffer.
/// S-LS: order 0 per domain with buffer. S: order 0, single domain.
ModelStructure variant_structure(ModelVariant v, int order_L);

// ---------------------------------------------------------------------------
// Study configuration
// ---------------------------------------------------------------------------

/// Held-out test region: fixed spherical caps sized to hold ~8% of points.
struct SplitSpec {
    std::vector<GeoPoint> cap_centers = {{35.0, -100.0}, {-30.0, 150.0}, {10.0, -40.0}};
    double cap_radius = 0.327;  // radians; the three caps hold ~8% of the sphere
};

struct SimConfig {
    int n = 500;                              // sample locations
    int n_T = 500;                            // approximate triangle count
    std::vector<int> replicate_counts = {10, 40};  // consistency study
    int n_r_interp = 4;                       // replicates in interpolation study
    int n_s = 20;                             // simulations
    int order_L = 1;
    double sigma2 = 0.05;                     // Gaussian observation variance
    double theta_mean = 1.0;                  // truth draw law on transformed scale
    double theta_sd = 0.5;
    double buffer_km = 400.0;
    std::uint64_t seed = 1;
    int jobs = 1;
    SplitSpec split;
    InferenceConfig inference;

    void validate() const;
    static SimConfig desk();
};

// ---------------------------------------------------------------------------
// Results: tidy rows plus ROC curves on a common FPR grid
// ---------------------------------------------------------------------------

struct SimRow {
    int sim = 0;
    std::string variant;
    std::string metric;  // e.g. theta_mse, kld, mse_all, mse_test, auc_all, auc_test
    double arg = 0.0;    // n_r for consistency rows, 0 otherwise
    double value = 0.0;
};

struct SimResult {
    std::vector<SimRow> rows;
    int n_failed = 0;
    // ROC curves (Bernoulli study): tpr values on fpr_grid, one row per label
    Eigen::VectorXd fpr_grid;
    Eigen::MatrixXd roc_tpr;           // labels x grid
    std::vector<std::string> roc_labels;  // "<sim>:<variant>:<all|test>"

    std::vector<double> values(const std::string& metric, const std::string& variant,
                               double arg) const;
    double median(const std::string& metric, const std::string& variant, double arg) const;
};

void save_sim_csv(const SimResult& result, const std::string& path);
void save_roc_csv(const SimResult& result, const std::string& path);

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

/// Variable-resolution mesh of roughly n_T triangles, tagged with the study's
/// fixed geography (northern-hemisphere land and a coastal buffer).
SphereMesh make_sim_mesh(int n_T, double buffer_km);

/// Dense covariance of (field at the sites' triangles + per-site nugget).
Eigen::MatrixXd site_covariance(const SphereMesh& mesh, const DeformationCoeffs& coeffs,
                                const std::vector<ObsSite>& sites);

/// Posterior consistency: draw an NS-LS truth per simulation, fit the true
/// model family at increasing replicate counts, record hyperparameter MSE and
/// KLD between the true and fitted site covariances.
SimResult run_consistency(const SimConfig& cfg);

/// Interpolation comparison across the four variants under an NS-LS truth.
/// family = gaussian (MSE) or bernoulli (ROC/AUC).
SimResult run_interpolation(const SimConfig& cfg, Family family);

// ---------------------------------------------------------------------------
// Curve utilities
// ---------------------------------------------------------------------------

struct Roc {
    Eigen::VectorXd fpr;
    Eigen::VectorXd tpr;
    double auc = 0.0;
};

/// Empirical ROC of scores against binary labels (1 = positive); AUC is the
/// tie-corrected rank statistic.
Roc roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

/// Stepwise-maximum TPR at the requested FPR levels.
Eigen::VectorXd roc_on_grid(const Roc& roc, const Eigen::VectorXd& fpr_grid);

struct FunctionalBox {
    Eigen::VectorXd median;
    Eigen::VectorXd lo50, hi50;          // central 50% envelope
    Eigen::VectorXd lo_env, hi_env;      // non-outlying envelope (1.5x fence)
    std::vector<double> depth;           // modified band depth, order 2
    std::vector<int> order;              // curve indices, deepest first
    std::vector<int> outliers;
};

/// Functional boxplot of curves (one row per curve) on a shared grid.
FunctionalBox functional_box(const Eigen::MatrixXd& curves);

}  // namespace spde
