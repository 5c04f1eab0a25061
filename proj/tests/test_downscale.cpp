#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spde/downscale.hpp"
#include "spde/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace spde;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

InferenceConfig light_inference() {
    InferenceConfig cfg;
    cfg.max_outer_iter = 20;
    cfg.grid_max_steps = 1;
    cfg.predictive_draws = 300;
    return cfg;
}

SeriesTable tiny_table() {
    SeriesTable t;
    t.ids = {"A", "B"};
    t.points = {{10.0, 5.0}, {12.0, 7.0}};
    t.dates = {"2011-01-01", "2011-01-02", "2011-01-03"};
    t.values.resize(2, 3);
    t.values << 0.0, 1.5, kNaN, 3.25, 0.0, 700.0;
    return t;
}

std::string tmp_path(const std::string& name) {
    return std::string("/tmp/") + name;
}

}  // namespace

TEST_CASE("mrr conversion scales rates to daily millimetres") {
    CHECK(convert_mrr(0.0) == doctest::Approx(0.0));
    CHECK(convert_mrr(1.0 / 86400.0) == doctest::Approx(1.0));
    CHECK(convert_mrr(2.5e-4) == doctest::Approx(21.6));
    CHECK_THROWS_AS(convert_mrr(-1e-9), std::invalid_argument);

    Eigen::MatrixXd raw(1, 3);
    raw << 0.0, 1e-4, kNaN;
    const Eigen::MatrixXd mm = convert_mrr(raw);
    CHECK(mm(0, 1) == doctest::Approx(8.64));
    CHECK(std::isnan(mm(0, 2)));
}

TEST_CASE("event construction splits occurrence and wet-day intensity") {
    Eigen::MatrixXd v(2, 3);
    v << 0.05, 0.1, 2.0, kNaN, 0.0, 0.3;
    const Events ev = make_events(v, 0.1);
    // threshold itself counts as dry
    CHECK(ev.occurrence(0, 0) == 0.0);
    CHECK(ev.occurrence(0, 1) == 0.0);
    CHECK(ev.occurrence(0, 2) == 1.0);
    CHECK(std::isnan(ev.occurrence(1, 0)));
    CHECK(std::isnan(ev.intensity(0, 0)));
    CHECK(ev.intensity(0, 2) == doctest::Approx(2.0));
    CHECK(std::isnan(ev.intensity(1, 1)));
    CHECK_THROWS_AS(make_events(v, -0.5), std::invalid_argument);
}

TEST_CASE("moment-matched gamma shape recovers the truth") {
    Rng rng(42);
    const double shape = 0.826, scale = 0.184;
    std::vector<double> draws;
    for (int i = 0; i < 10000; ++i) draws.push_back(rng.gamma(shape, scale));
    const double est = gamma_shape_moments(draws);
    CHECK(std::abs(est - shape) / shape < 0.10);
    CHECK_THROWS_AS(gamma_shape_moments({1.0}), std::invalid_argument);
    CHECK_THROWS_AS(gamma_shape_moments({2.0, 2.0, 2.0}), std::invalid_argument);
}

TEST_CASE("series tables survive a CSV round trip and validate their shape") {
    const SeriesTable t = tiny_table();
    t.validate();
    const std::string path = tmp_path("spde_series.csv");
    save_series_csv(t, path);
    const SeriesTable back = load_series_csv(path);
    REQUIRE(back.n_locations() == 2);
    REQUIRE(back.n_dates() == 3);
    CHECK(back.ids == t.ids);
    CHECK(back.dates == t.dates);
    for (int i = 0; i < 2; ++i) {
        CHECK(back.points[i].lat == doctest::Approx(t.points[i].lat));
        CHECK(back.points[i].lon == doctest::Approx(t.points[i].lon));
        for (int d = 0; d < 3; ++d) {
            if (std::isnan(t.values(i, d)))
                CHECK(std::isnan(back.values(i, d)));
            else
                CHECK(back.values(i, d) == doctest::Approx(t.values(i, d)));
        }
    }

    SeriesTable bad = t;
    bad.dates[2] = "2011-01-05";  // gap
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = t;
    bad.values(0, 0) = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = t;
    bad.values.resize(2, 2);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    // integer date labels count as contiguous too
    SeriesTable ints = t;
    ints.dates = {"7", "8", "9"};
    ints.values = t.values;
    ints.validate();
}

TEST_CASE("gauge capacity screening flags but keeps offending stations") {
    const SeriesTable t = tiny_table();
    const auto flagged = capacity_flags(t);
    REQUIRE(flagged.size() == 1);
    CHECK(flagged[0] == "B");
    CHECK(capacity_flags(t, 1000.0).empty());
}

TEST_CASE("downscaling regression matches the normal-equations oracle") {
    Rng rng(7);
    const int n = 40;
    Eigen::VectorXd x(n), y(n);
    for (int i = 0; i < n; ++i) {
        const double lx = rng.normal(0.0, 1.0);
        const double ly = 0.4 + 0.8 * lx + rng.normal(0.0, 0.3);
        x[i] = logistic(lx);
        y[i] = logistic(ly);
    }
    const DownscaleFit fit = fit_downscale(x, y, "occurrence");

    // dense oracle on the transformed pairs
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) {
        const double lx = std::log(x[i] / (1.0 - x[i]));
        X(i, 0) = 1.0;
        X(i, 1) = lx;
        z[i] = std::log(y[i] / (1.0 - y[i]));
    }
    const Eigen::VectorXd beta = (X.transpose() * X).ldlt().solve(X.transpose() * z);
    CHECK(std::abs(fit.beta0 - beta[0]) < 1e-10);
    CHECK(std::abs(fit.beta1 - beta[1]) < 1e-10);
    const Eigen::VectorXd res = z - X * beta;
    const double s2 = res.squaredNorm() / (n - 2);
    CHECK(fit.sigma2 == doctest::Approx(s2).epsilon(1e-10));
    const Eigen::MatrixXd cov = s2 * (X.transpose() * X).inverse();
    CHECK(fit.se0 == doctest::Approx(std::sqrt(cov(0, 0))).epsilon(1e-8));
    CHECK(fit.se1 == doctest::Approx(std::sqrt(cov(1, 1))).epsilon(1e-8));

    // exact linear relation on the log scale -> R^2 = 1 and exact betas
    Eigen::VectorXd xi(5), yi(5);
    for (int i = 0; i < 5; ++i) {
        xi[i] = std::exp(0.2 * i - 0.5);
        yi[i] = std::exp(0.1 + 0.7 * (0.2 * i - 0.5));
    }
    const DownscaleFit exact = fit_downscale(xi, yi, "intensity");
    CHECK(exact.beta0 == doctest::Approx(0.1).epsilon(1e-10));
    CHECK(exact.beta1 == doctest::Approx(0.7).epsilon(1e-10));
    CHECK(exact.r2 == doctest::Approx(1.0).epsilon(1e-10));

    // application inverts the transform
    const Eigen::VectorXd applied = apply_downscale(exact, xi);
    for (int i = 0; i < 5; ++i) CHECK(applied[i] == doctest::Approx(yi[i]).epsilon(1e-10));

    // too few valid pairs is an error, NaNs are skipped
    Eigen::VectorXd two(4), twoy(4);
    two << 0.5, 0.4, kNaN, 0.3;
    twoy << 0.5, kNaN, 0.2, 0.4;
    CHECK_THROWS_AS(fit_downscale(two, twoy, "occurrence"), std::runtime_error);
    CHECK_THROWS_AS(fit_downscale(x, y, "banana"), std::invalid_argument);
}

TEST_CASE("leave-one-out coverage is near nominal for a well-specified line") {
    Rng rng(19);
    const int n = 400;
    Eigen::VectorXd x(n), y(n);
    for (int i = 0; i < n; ++i) {
        const double lx = rng.normal(0.0, 1.2);
        const double ly = -0.2 + 1.1 * lx + rng.normal(0.0, 0.4);
        x[i] = std::exp(lx);
        y[i] = std::exp(ly);
    }
    const LoocvResult res = loocv_coverage(x, y, "intensity");
    CHECK(res.n == n);
    CHECK(res.coverage > 0.90);
    CHECK(res.coverage < 0.99);
    Eigen::VectorXd small(3);
    small << 1.0, 2.0, 3.0;
    CHECK_THROWS_AS(loocv_coverage(small, small, "intensity"), std::runtime_error);
}

TEST_CASE("sitewise temporal fits are periodic and respect dry stations") {
    const int T = 400, period = 100;
    Rng rng(5);
    SeriesTable t;
    t.ids = {"wetdry", "dry"};
    t.points = {{20.0, 10.0}, {22.0, 12.0}};
    t.values.resize(2, T);
    for (int d = 0; d < T; ++d) {
        t.dates.push_back(std::to_string(d + 1));
        const double eta = -0.2 + 1.0 * std::sin(2.0 * kPi * (d + 1.0) / period);
        t.values(0, d) = rng.bernoulli(logistic(eta)) ? rng.gamma(2.0, 1.5) + 0.2 : 0.0;
        t.values(1, d) = 0.0;  // never wet
    }
    const SiteModels m = fit_sitewise(t, 1, period, 0.1);
    REQUIRE(m.ok(true, 0));
    // periodicity of the linear predictor
    CHECK(m.eta(true, 0, 13.0) == doctest::Approx(m.eta(true, 0, 13.0 + period)).epsilon(1e-12));
    // the dry station is pushed to (capped) near-zero probability
    const Eigen::MatrixXd p = sitewise_probability(m, T);
    if (m.ok(true, 1)) CHECK(p(1, 0) < 0.05);
    // intensity is undefined where the Gamma fit has no wet days
    CHECK_FALSE(m.ok(false, 1));
    const Eigen::MatrixXd y = sitewise_intensity(m, T);
    CHECK(std::isnan(y(1, 0)));
    CHECK(y(0, 0) > 0.0);
}

TEST_CASE("application fit recovers pooled seasonality and predicts in range") {
    SyntheticConfig cfg;
    cfg.n_grid = 16;
    cfg.n_stations = 8;
    cfg.n_days = 90;
    cfg.subdivisions = 1;
    cfg.refine_levels = 1;
    cfg.K = 1;
    cfg.period = 90;
    cfg.seed = 3;
    const SyntheticData syn = make_synthetic_downscale(cfg);

    DownscaleOptions opts;
    opts.K = 1;
    opts.period = 90;
    opts.subdivisions = 1;
    opts.refine_levels = 1;
    opts.inference = light_inference();
    auto mesh = std::make_shared<const SphereMesh>(make_downscale_mesh(opts));
    const ApplicationFit fit = fit_application(syn.grid, mesh, opts);

    CHECK(fit.beta_occ.size() == 3);
    CHECK(fit.beta_int.size() == 3);
    CHECK(fit.gamma_shape > 0.5);
    CHECK(fit.gamma_shape < 8.0);
    // periodic temporal part
    CHECK(fit.temporal_eta(true, 4.0) ==
          doctest::Approx(fit.temporal_eta(true, 94.0)).epsilon(1e-12));

    const Eigen::MatrixXd p = predict_probability(fit, syn.stations.points, cfg.n_days);
    const Eigen::MatrixXd y = predict_intensity(fit, syn.stations.points, cfg.n_days);
    REQUIRE(p.rows() == cfg.n_stations);
    for (int i = 0; i < p.rows(); ++i)
        for (int d = 0; d < p.cols(); ++d) {
            CHECK(p(i, d) > 0.0);
            CHECK(p(i, d) < 1.0);
            CHECK(y(i, d) > 0.0);
            CHECK(std::isfinite(y(i, d)));
        }

    // the pooled harmonics track the truth's leading seasonal signal: the
    // fitted occurrence probability should move in the same direction as the
    // truth between the seasonal peak and trough
    const double peak = fit.temporal_eta(true, 90.0 / 4.0);
    const double trough = fit.temporal_eta(true, 3.0 * 90.0 / 4.0);
    CHECK(peak > trough);
}

TEST_CASE("end-to-end pipeline produces calibrated reports deterministically") {
    SyntheticConfig cfg;
    cfg.n_grid = 16;
    cfg.n_stations = 14;
    cfg.n_days = 120;
    cfg.subdivisions = 1;
    cfg.refine_levels = 1;
    cfg.K = 1;
    cfg.period = 120;
    cfg.seed = 11;
    const SyntheticData syn = make_synthetic_downscale(cfg);

    DownscaleOptions opts;
    opts.K = 1;
    opts.period = 120;
    opts.subdivisions = 1;
    opts.refine_levels = 1;
    opts.jobs = 2;
    opts.inference = light_inference();
    const DownscaleReport rep = run_downscale(syn.grid, syn.stations, opts);

    CHECK(rep.n_stations == cfg.n_stations);
    CHECK(rep.n_grid == cfg.n_grid);
    CHECK(rep.n_dates == cfg.n_days);
    CHECK(std::isfinite(rep.rmse_prob));
    CHECK(std::isfinite(rep.rmse_int));
    CHECK(rep.rmse_prob > 0.0);
    CHECK_FALSE(rep.per_date_occ.empty());
    CHECK_FALSE(rep.per_date_int.empty());
    CHECK(rep.pooled_occ.pooled);
    CHECK(rep.pooled_occ.n > rep.per_date_occ.front().n);
    // slope should be positive: model and station fields share the signal
    CHECK(rep.pooled_occ.beta1 > 0.0);
    CHECK(rep.pooled_int.beta1 > 0.0);
    CHECK(rep.loocv_prob.coverage >= 0.0);
    CHECK(rep.loocv_prob.coverage <= 1.0);

    // prediction map: finite, ordered bounds wherever predictions exist
    for (int i = 0; i < rep.n_stations; ++i)
        for (int d = 0; d < rep.n_dates; ++d)
            if (std::isfinite(rep.pred_prob(i, d))) {
                CHECK(rep.prob_lo(i, d) <= rep.pred_prob(i, d) + 1e-12);
                CHECK(rep.pred_prob(i, d) <= rep.prob_hi(i, d) + 1e-12);
                CHECK(rep.prob_sd(i, d) >= 0.0);
            }

    // artifacts
    const std::string jpath = tmp_path("spde_downscale_report.json");
    const std::string cpath = tmp_path("spde_downscale_map.csv");
    save_report_json(rep, jpath);
    save_prediction_map_csv(rep, cpath);
    std::ifstream jin(jpath);
    std::stringstream jbuf;
    jbuf << jin.rdbuf();
    CHECK(jbuf.str().find("rmse_probability") != std::string::npos);
    std::ifstream cin(cpath);
    std::string header;
    std::getline(cin, header);
    CHECK(header.rfind("lon,lat,date,probability,intensity", 0) == 0);

    // rerun with a different job count: identical numbers
    DownscaleOptions opts1 = opts;
    opts1.jobs = 1;
    const DownscaleReport rep1 = run_downscale(syn.grid, syn.stations, opts1);
    CHECK(rep1.rmse_prob == rep.rmse_prob);
    CHECK(rep1.rmse_int == rep.rmse_int);
    CHECK((rep1.pred_prob - rep.pred_prob).array().abs().maxCoeff() == 0.0);
}

TEST_CASE("synthetic generator honors its own regression truth") {
    SyntheticConfig cfg;
    cfg.n_grid = 16;
    cfg.n_stations = 10;
    cfg.n_days = 60;
    cfg.subdivisions = 1;
    cfg.refine_levels = 1;
    cfg.seed = 2;
    const SyntheticData syn = make_synthetic_downscale(cfg);
    syn.grid.validate();
    syn.stations.validate();
    CHECK(syn.grid.n_locations() == cfg.n_grid);
    CHECK(syn.stations.n_locations() == cfg.n_stations);
    CHECK(syn.grid.n_dates() == cfg.n_days);
    CHECK(syn.true_p_station.rows() == cfg.n_stations);
    for (int i = 0; i < cfg.n_stations; ++i)
        for (int d = 0; d < cfg.n_days; ++d) {
            CHECK(syn.true_p_station(i, d) > 0.0);
            CHECK(syn.true_p_station(i, d) < 1.0);
            CHECK(syn.true_y_station(i, d) > 0.0);
        }
    // deterministic regeneration
    const SyntheticData again = make_synthetic_downscale(cfg);
    CHECK((again.grid.values - syn.grid.values).array().abs().maxCoeff() == 0.0);
    CHECK((again.stations.values - syn.stations.values).array().abs().maxCoeff() == 0.0);
}
