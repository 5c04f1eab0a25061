#pragma once

#include "spde/lgm.hpp"

#include <memory>
#include <string>
#include <vector>

namespace spde {

// ---------------------------------------------------------------------------
// Series tables (gridded model output and station gauges share one layout)
// ---------------------------------------------------------------------------

/// Daily series at a set of locations. values(i, t) in mm; NaN = missing.
struct SeriesTable {
    std::vector<std::string> ids;
    std::vector<GeoPoint> points;
    std::vector<std::string> dates;  // contiguous daily labels
    Eigen::MatrixXd values;          // locations x dates
    std::string provenance;

    int n_locations() const { return static_cast<int>(ids.size()); }
    int n_dates() const { return static_cast<int>(dates.size()); }
    void validate() const;  // shapes, non-negative values, contiguous dates
};

/// CSV schema: station_id,lon,lat,date,value (one row per observation).
SeriesTable load_series_csv(const std::string& path);
void save_series_csv(const SeriesTable& table, const std::string& path);

/// Gauge-capacity screening (600 mm): returns ids of locations with values
/// above the capacity. Violations are flagged, never silently dropped.
std::vector<std::string> capacity_flags(const SeriesTable& table, double capacity_mm = 600.0);

// ---------------------------------------------------------------------------
// Unit conversion and event construction
// ---------------------------------------------------------------------------

/// MRR rate in kg/(m^2 s) -> daily precipitation in mm (x 86,400).
double convert_mrr(double raw);
Eigen::MatrixXd convert_mrr(const Eigen::MatrixXd& raw);

/// occurrence(i,t) = 1 iff value > threshold; intensity(i,t) keeps the value
/// on wet days and is NaN on dry/missing days.
struct Events {
    Eigen::MatrixXd occurrence;
    Eigen::MatrixXd intensity;
    double wet_threshold = 0.1;
};
Events make_events(const Eigen::MatrixXd& values, double wet_threshold);

/// Method-of-moments Gamma shape: mean^2 / variance of the wet-day values.
double gamma_shape_moments(const std::vector<double>& wet_values);

// ---------------------------------------------------------------------------
// Application models: temporal harmonics (with intercept) + spatial LGM
// ---------------------------------------------------------------------------

struct DownscaleOptions {
    double wet_threshold = 0.1;  // mm; recorded in every report
    int K = 2;
    int period = 365;
    int subdivisions = 2;        // base mesh
    LonLatBox refine_box{-40.0, 40.0, -10.0, 50.0};  // study area, refined further
    int refine_levels = 2;
    double buffer_km = 400.0;
    int report_date = 0;         // date index for per-date report artifacts
    bool pooled = false;         // pooled regression instead of per-date
    std::uint64_t seed = 1;
    int jobs = 1;
    InferenceConfig inference;
};

/// Mesh for the study area: base icosphere, extra refinement inside the box,
/// tagged with the default geography (northern-hemisphere land + buffer).
SphereMesh make_downscale_mesh(const DownscaleOptions& opts);

/// Occurrence (Bernoulli/logit) and wet-day intensity (Gamma/negative
/// inverse) models fitted to a gridded table: pooled harmonic coefficients
/// (intercept + K harmonics) as the fixed temporal part, plus one static
/// latent spatial field per target via the LGM machinery.
struct ApplicationFit {
    double wet_threshold = 0.1;
    int K = 2;
    int period = 365;
    Eigen::VectorXd beta_occ;  // 1 + 2K pooled temporal coefficients
    Eigen::VectorXd beta_int;
    double gamma_shape = 1.0;
    HyperPosterior occ_post;
    HyperPosterior int_post;
    std::shared_ptr<const SphereMesh> mesh;

    double temporal_eta(bool occurrence, double t) const;  // t = 1-based day
};

ApplicationFit fit_application(const SeriesTable& grid, std::shared_ptr<const SphereMesh> mesh,
                               const DownscaleOptions& opts = {});

/// Model fields interpolated to arbitrary points: probability p(s,t) and
/// wet-day intensity Y(s,t), points x dates (1..n_dates).
Eigen::MatrixXd predict_probability(const ApplicationFit& fit,
                                    const std::vector<GeoPoint>& points, int n_dates);
Eigen::MatrixXd predict_intensity(const ApplicationFit& fit,
                                  const std::vector<GeoPoint>& points, int n_dates);

/// Per-location temporal-only fits (no spatial dependence): the station-side
/// responses and the nearest-cell baseline covariate.
struct SiteModels {
    int K = 2;
    int period = 365;
    double wet_threshold = 0.1;
    double gamma_shape = 1.0;
    std::vector<Eigen::VectorXd> beta_occ;  // per location, 1 + 2K; empty on failure
    std::vector<Eigen::VectorXd> beta_int;

    double eta(bool occurrence, int location, double t) const;
    bool ok(bool occurrence, int location) const;
};
SiteModels fit_sitewise(const SeriesTable& table, int K, int period, double wet_threshold);
Eigen::MatrixXd sitewise_probability(const SiteModels& m, int n_dates);
Eigen::MatrixXd sitewise_intensity(const SiteModels& m, int n_dates);

// ---------------------------------------------------------------------------
// Downscaling regressions and evaluation
// ---------------------------------------------------------------------------

/// OLS on transformed scales: logit-logit for occurrence probabilities
/// (clamped to [1e-6, 1-1e-6]), log-log for intensity.
struct DownscaleFit {
    std::string target;  // "occurrence" | "intensity"
    double beta0 = 0.0, beta1 = 0.0;
    double se0 = 0.0, se1 = 0.0;
    double sigma2 = 0.0;  // residual variance on the transformed scale
    double r2 = 0.0;
    int n = 0;
    bool pooled = false;
    double xbar = 0.0, sxx = 0.0;  // regressor summaries for prediction intervals
};

DownscaleFit fit_downscale(const Eigen::VectorXd& model_hat,
                           const Eigen::VectorXd& station_hat, const std::string& target);

/// Apply a fitted regression to model values (input and output on the
/// response scale).
Eigen::VectorXd apply_downscale(const DownscaleFit& fit, const Eigen::VectorXd& model_hat);

struct LoocvResult {
    double coverage = 0.0;  // fraction of 95% prediction intervals covering truth
    int n = 0;
};

/// Leave-one-station-out: refit the regression without station i, predict it
/// with a 95% t prediction interval on the transformed scale, count coverage.
LoocvResult loocv_coverage(const Eigen::VectorXd& model_hat,
                           const Eigen::VectorXd& station_hat, const std::string& target);

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

struct DownscaleReport {
    DownscaleOptions options;
    int n_stations = 0, n_grid = 0, n_dates = 0;
    std::vector<std::string> flagged_stations;
    std::vector<DownscaleFit> per_date_occ, per_date_int;
    DownscaleFit pooled_occ, pooled_int;
    double rmse_prob = 0.0, rmse_int = 0.0;                    // SPDE-interpolated mode
    double rmse_prob_baseline = 0.0, rmse_int_baseline = 0.0;  // nearest-cell mode
    double r2_prob = 0.0, r2_int = 0.0;
    LoocvResult loocv_prob, loocv_int;
    // prediction map at station locations
    std::vector<std::string> station_ids;
    std::vector<GeoPoint> station_points;
    Eigen::MatrixXd pred_prob, pred_int;        // stations x dates (downscaled)
    Eigen::MatrixXd prob_lo, prob_hi, int_lo, int_hi;  // 95% prediction bounds
    Eigen::MatrixXd prob_sd, int_sd;            // response-scale spread
};

DownscaleReport run_downscale(const SeriesTable& grid, const SeriesTable& stations,
                              const DownscaleOptions& opts = {});

void save_report_json(const DownscaleReport& report, const std::string& path);
void save_prediction_map_csv(const DownscaleReport& report, const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic truth for calibration tests and bundled fixtures
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int n_grid = 36;       // laid out as a regular lon/lat grid in the study box
    int n_stations = 30;
    int n_days = 180;
    int subdivisions = 2;  // truth mesh: same construction as the fitting mesh
    int refine_levels = 2;
    LonLatBox box{-40.0, 40.0, -10.0, 50.0};
    double buffer_km = 400.0;
    int K = 2;
    int period = 365;
    double wet_threshold = 0.1;
    // true ranges of the latent fields (the truth stays inside the model
    // class, so the field amplitude follows from the range)
    double field_rho_occ = 0.8, field_rho_int = 0.8;
    // true downscaling relation (transformed scales) and station scatter
    double beta0_occ = 0.3, beta1_occ = 0.9;
    double beta0_int = 0.2, beta1_int = 0.8;
    double reg_noise = 0.2;
    std::uint64_t seed = 1;
};

struct SyntheticData {
    SyntheticConfig cfg;
    SeriesTable grid;
    SeriesTable stations;
    Eigen::MatrixXd true_p_station;  // stations x days
    Eigen::MatrixXd true_y_station;  // wet-day mean intensity, stations x days
};

SyntheticData make_synthetic_downscale(const SyntheticConfig& cfg);

}  // namespace spde
