#include "spde/downscale.hpp"

#include "spde/gmrf.hpp"
#include "spde/parallel.hpp"
#include "spde/rng.hpp"
#include "spde/simlab.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace spde {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kProbClamp = 1e-6;

double logit(double p) {
    const double c = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    return std::log(c / (1.0 - c));
}
double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Serial day number: plain integers count as-is; ISO dates via the civil
/// calendar (days since 1970-01-01).
long long date_serial(const std::string& s) {
    if (!s.empty() && s.find('-', 1) == std::string::npos) {
        size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos == s.size()) return v;
    }
    int y, m, d;
    char dash1, dash2;
    std::istringstream in(s);
    if (!(in >> y >> dash1 >> m >> dash2 >> d) || dash1 != '-' || dash2 != '-' || m < 1 ||
        m > 12 || d < 1 || d > 31)
        throw std::invalid_argument("unparseable date: " + s);
    // days-from-civil
    y -= m <= 2;
    const long long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

/// 1 + 2K harmonic design row (intercept, then sin/cos pairs) at day t.
Eigen::VectorXd design_row(int K, int period, double t) {
    Eigen::VectorXd row(1 + 2 * K);
    row[0] = 1.0;
    for (int k = 1; k <= K; ++k) {
        const double w = 2.0 * kPi * k * t / period;
        row[1 + 2 * (k - 1)] = std::sin(w);
        row[2 + 2 * (k - 1)] = std::cos(w);
    }
    return row;
}

double t_quantile_975(int df) {
    if (df < 1) throw std::invalid_argument("t quantile: df must be >= 1");
    const double z = 1.9599639845400545;
    // Cornish-Fisher expansion; accurate to ~1e-3 for df >= 5
    return z + (z * z * z + z) / (4.0 * df) +
           (5 * std::pow(z, 5) + 16 * z * z * z + 3 * z) / (96.0 * df * df);
}

}  // namespace

// ---------------------------------------------------------------------------
// Series tables
// ---------------------------------------------------------------------------

void SeriesTable::validate() const {
    const int nl = n_locations(), nd = n_dates();
    if (static_cast<int>(points.size()) != nl)
        throw std::invalid_argument("SeriesTable: ids/points size mismatch");
    if (values.rows() != nl || values.cols() != nd)
        throw std::invalid_argument("SeriesTable: values shape mismatch");
    for (int i = 0; i < nl; ++i)
        for (int t = 0; t < nd; ++t)
            if (std::isfinite(values(i, t)) && values(i, t) < 0.0)
                throw std::invalid_argument("SeriesTable: negative precipitation value");
    for (int t = 1; t < nd; ++t)
        if (date_serial(dates[t]) != date_serial(dates[t - 1]) + 1)
            throw std::invalid_argument("SeriesTable: dates must be contiguous daily");
}

SeriesTable load_series_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_series_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_series_csv: empty file " + path);
    if (line.rfind("station_id,lon,lat,date,value", 0) != 0)
        throw std::runtime_error("load_series_csv: unexpected header: " + line);

    struct Rec {
        int loc;
        long long serial;
        std::string date;
        double value;
    };
    std::vector<Rec> recs;
    std::map<std::string, int> loc_of;
    SeriesTable table;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, lon_s, lat_s, date, val_s;
        if (!std::getline(row, id, ',') || !std::getline(row, lon_s, ',') ||
            !std::getline(row, lat_s, ',') || !std::getline(row, date, ',') ||
            !std::getline(row, val_s))
            throw std::runtime_error("load_series_csv: bad row at line " +
                                     std::to_string(line_no));
        const GeoPoint p{std::stod(lat_s), std::stod(lon_s)};
        auto it = loc_of.find(id);
        if (it == loc_of.end()) {
            it = loc_of.emplace(id, static_cast<int>(table.ids.size())).first;
            table.ids.push_back(id);
            table.points.push_back(p);
        }
        double v = kNaN;
        if (!val_s.empty() && val_s != "nan" && val_s != "NA") v = std::stod(val_s);
        recs.push_back({it->second, date_serial(date), date, v});
    }
    // dates sorted by serial, unique
    std::map<long long, std::string> date_map;
    for (const auto& r : recs) date_map.emplace(r.serial, r.date);
    std::map<long long, int> date_idx;
    for (const auto& [serial, label] : date_map) {
        date_idx.emplace(serial, static_cast<int>(table.dates.size()));
        table.dates.push_back(label);
    }
    table.values = Eigen::MatrixXd::Constant(table.n_locations(), table.n_dates(), kNaN);
    for (const auto& r : recs) table.values(r.loc, date_idx.at(r.serial)) = r.value;
    table.provenance = path;
    table.validate();
    return table;
}

void save_series_csv(const SeriesTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_series_csv: cannot open " + path);
    out << "station_id,lon,lat,date,value\n";
    char buf[128];
    for (int i = 0; i < table.n_locations(); ++i)
        for (int t = 0; t < table.n_dates(); ++t) {
            if (!std::isfinite(table.values(i, t))) continue;
            std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%s,%.10g\n",
                          table.ids[i].c_str(), table.points[i].lon, table.points[i].lat,
                          table.dates[t].c_str(), table.values(i, t));
            out << buf;
        }
}

std::vector<std::string> capacity_flags(const SeriesTable& table, double capacity_mm) {
    std::vector<std::string> flagged;
    for (int i = 0; i < table.n_locations(); ++i)
        for (int t = 0; t < table.n_dates(); ++t)
            if (std::isfinite(table.values(i, t)) && table.values(i, t) > capacity_mm) {
                flagged.push_back(table.ids[i]);
                break;
            }
    return flagged;
}

// ---------------------------------------------------------------------------
// Conversion and events
// ---------------------------------------------------------------------------

double convert_mrr(double raw) {
    if (!(raw >= 0.0)) throw std::invalid_argument("convert_mrr: negative rate");
    return raw * 86400.0;
}

Eigen::MatrixXd convert_mrr(const Eigen::MatrixXd& raw) {
    Eigen::MatrixXd out(raw.rows(), raw.cols());
    for (int i = 0; i < raw.rows(); ++i)
        for (int j = 0; j < raw.cols(); ++j)
            out(i, j) = std::isfinite(raw(i, j)) ? convert_mrr(raw(i, j)) : kNaN;
    return out;
}

Events make_events(const Eigen::MatrixXd& values, double wet_threshold) {
    if (!(wet_threshold >= 0.0))
        throw std::invalid_argument("make_events: threshold must be >= 0");
    Events ev;
    ev.wet_threshold = wet_threshold;
    ev.occurrence = Eigen::MatrixXd::Constant(values.rows(), values.cols(), kNaN);
    ev.intensity = Eigen::MatrixXd::Constant(values.rows(), values.cols(), kNaN);
    for (int i = 0; i < values.rows(); ++i)
        for (int t = 0; t < values.cols(); ++t) {
            const double v = values(i, t);
            if (!std::isfinite(v)) continue;
            const bool wet = v > wet_threshold;
            ev.occurrence(i, t) = wet ? 1.0 : 0.0;
            if (wet) ev.intensity(i, t) = v;
        }
    return ev;
}

double gamma_shape_moments(const std::vector<double>& wet_values) {
    if (wet_values.size() < 2)
        throw std::invalid_argument("gamma_shape_moments: need >= 2 wet values");
    double mean = 0.0;
    for (double v : wet_values) mean += v;
    mean /= wet_values.size();
    double var = 0.0;
    for (double v : wet_values) var += (v - mean) * (v - mean);
    var /= (wet_values.size() - 1.0);
    if (!(var > 0.0))
        throw std::invalid_argument("gamma_shape_moments: zero variance");
    return mean * mean / var;
}

// ---------------------------------------------------------------------------
// Application models
// ---------------------------------------------------------------------------

SphereMesh make_downscale_mesh(const DownscaleOptions& opts) {
    SphereMesh mesh = build_icosphere(opts.subdivisions);
    if (opts.refine_levels > 0)
        mesh = refine_region(mesh, opts.refine_box, opts.refine_levels);
    RegionMap map;
    map.buffer_width_km = opts.buffer_km;
    std::vector<GeoPoint> ring;
    for (double lon = -180.0; lon <= 180.0; lon += 5.0) ring.push_back({0.0, lon});
    ring.push_back({89.999, 180.0});
    ring.push_back({89.999, -180.0});
    ring.push_back({0.0, -180.0});
    map.land_rings.push_back(ring);
    return tag_regions(mesh, map);
}

double ApplicationFit::temporal_eta(bool occurrence, double t) const {
    const Eigen::VectorXd& b = occurrence ? beta_occ : beta_int;
    return b.dot(design_row(K, period, t));
}

namespace {

/// Pooled GLM over all (location, day) cells with finite response.
Eigen::VectorXd pooled_temporal(const Eigen::MatrixXd& response, const MarginalFamily& fam,
                                int K, int period) {
    std::vector<int> loc, day;
    for (int i = 0; i < response.rows(); ++i)
        for (int t = 0; t < response.cols(); ++t)
            if (std::isfinite(response(i, t))) {
                loc.push_back(i);
                day.push_back(t + 1);
            }
    const int n = static_cast<int>(loc.size());
    if (n < 2 * K + 2) throw std::runtime_error("pooled_temporal: too few observations");
    Eigen::MatrixXd X(n, 1 + 2 * K);
    Eigen::VectorXd y(n);
    for (int r = 0; r < n; ++r) {
        X.row(r) = design_row(K, period, day[r]).transpose();
        y[r] = response(loc[r], day[r] - 1);
    }
    const GlmFit fit = fit_glm(X, y, fam);
    if (fit.failed) throw std::runtime_error("pooled_temporal: fit failed");
    return fit.beta;
}

/// Static latent field: all dates enter one replicate with date offsets.
HyperPosterior fit_static_field(const Eigen::MatrixXd& response,
                                const Eigen::VectorXd& beta, const MarginalFamily& fam,
                                const std::vector<ObsSite>& sites, const SphereMesh& mesh,
                                int K, int period, const ModelStructure& st,
                                const InferenceConfig& inference) {
    LgmData data;
    data.sites = sites;
    data.n_replicates = 1;
    std::vector<double> vals, offs;
    for (int i = 0; i < response.rows(); ++i)
        for (int t = 0; t < response.cols(); ++t)
            if (std::isfinite(response(i, t))) {
                data.obs_site.push_back(i);
                data.obs_replicate.push_back(0);
                vals.push_back(response(i, t));
                offs.push_back(beta.dot(design_row(K, period, t + 1.0)));
            }
    data.obs_value = Eigen::Map<Eigen::VectorXd>(vals.data(), vals.size());
    data.obs_offset = Eigen::Map<Eigen::VectorXd>(offs.data(), offs.size());
    return laplace_fit(data, mesh, fam, st, inference);
}

}  // namespace

ApplicationFit fit_application(const SeriesTable& grid, std::shared_ptr<const SphereMesh> mesh,
                               const DownscaleOptions& opts) {
    grid.validate();
    if (!mesh) throw std::invalid_argument("fit_application: null mesh");
    const Events ev = make_events(grid.values, opts.wet_threshold);

    ApplicationFit fit;
    fit.wet_threshold = opts.wet_threshold;
    fit.K = opts.K;
    fit.period = opts.period;
    fit.mesh = mesh;

    fit.beta_occ =
        pooled_temporal(ev.occurrence, MarginalFamily::bernoulli_model(), opts.K, opts.period);

    std::vector<double> wet;
    for (int i = 0; i < ev.intensity.rows(); ++i)
        for (int t = 0; t < ev.intensity.cols(); ++t)
            if (std::isfinite(ev.intensity(i, t))) wet.push_back(ev.intensity(i, t));
    fit.gamma_shape = gamma_shape_moments(wet);
    const MarginalFamily gam = MarginalFamily::gamma_model(fit.gamma_shape);
    fit.beta_int = pooled_temporal(ev.intensity, gam, opts.K, opts.period);

    std::vector<ObsSite> sites;
    for (const auto& p : grid.points) sites.push_back(site_for(*mesh, p));
    const ModelStructure st{1, true};
    fit.occ_post = fit_static_field(ev.occurrence, fit.beta_occ,
                                    MarginalFamily::bernoulli_model(), sites, *mesh, opts.K,
                                    opts.period, st, opts.inference);
    fit.int_post = fit_static_field(ev.intensity, fit.beta_int, gam, sites, *mesh, opts.K,
                                    opts.period, st, opts.inference);
    return fit;
}

namespace {

Eigen::MatrixXd predict_field(const ApplicationFit& fit, const std::vector<GeoPoint>& points,
                              int n_dates, bool occurrence) {
    const HyperPosterior& hp = occurrence ? fit.occ_post : fit.int_post;
    std::vector<int> tris;
    for (const auto& p : points) tris.push_back(fit.mesh->locate(p));
    const LatentPosterior lp = latent_marginals(hp, tris, 0, {0.5});
    Eigen::MatrixXd out(points.size(), n_dates);
    for (int t = 0; t < n_dates; ++t) {
        const double eta_t = fit.temporal_eta(occurrence, t + 1.0);
        for (size_t i = 0; i < points.size(); ++i) {
            const double eta = eta_t + lp.mean[static_cast<int>(i)];
            out(static_cast<int>(i), t) =
                occurrence ? expit(eta) : -1.0 / std::min(eta, -1e-6);
        }
    }
    return out;
}

}  // namespace

Eigen::MatrixXd predict_probability(const ApplicationFit& fit,
                                    const std::vector<GeoPoint>& points, int n_dates) {
    return predict_field(fit, points, n_dates, true);
}

Eigen::MatrixXd predict_intensity(const ApplicationFit& fit,
                                  const std::vector<GeoPoint>& points, int n_dates) {
    return predict_field(fit, points, n_dates, false);
}

// ---------------------------------------------------------------------------
// Per-location temporal-only models
// ---------------------------------------------------------------------------

SiteModels fit_sitewise(const SeriesTable& table, int K, int period, double wet_threshold) {
    table.validate();
    const Events ev = make_events(table.values, wet_threshold);
    const int nl = table.n_locations(), nd = table.n_dates();

    SiteModels m;
    m.K = K;
    m.period = period;
    m.wet_threshold = wet_threshold;

    std::vector<double> wet;
    for (int i = 0; i < nl; ++i)
        for (int t = 0; t < nd; ++t)
            if (std::isfinite(ev.intensity(i, t))) wet.push_back(ev.intensity(i, t));
    m.gamma_shape = wet.size() >= 2 ? gamma_shape_moments(wet) : 1.0;

    std::vector<std::vector<double>> occ(nl, std::vector<double>(nd)),
        inten(nl, std::vector<double>(nd));
    for (int i = 0; i < nl; ++i)
        for (int t = 0; t < nd; ++t) {
            occ[i][t] = ev.occurrence(i, t);
            inten[i][t] = ev.intensity(i, t);
        }
    std::vector<Eigen::MatrixXd> ones(nl, Eigen::MatrixXd::Ones(nd, 1));
    const TemporalFit focc =
        fit_temporal(occ, MarginalFamily::bernoulli_model(), K, period, &ones);
    const TemporalFit fint =
        fit_temporal(inten, MarginalFamily::gamma_model(m.gamma_shape), K, period, &ones);

    auto pack = [K](const LocationTemporalFit& lf) {
        Eigen::VectorXd b(1 + 2 * K);
        b[0] = lf.beta[0];
        for (int k = 0; k < K; ++k) {
            b[1 + 2 * k] = lf.zeta_sin[k];
            b[2 + 2 * k] = lf.zeta_cos[k];
        }
        return b;
    };
    m.beta_occ.resize(nl);
    m.beta_int.resize(nl);
    for (int i = 0; i < nl; ++i) {
        if (!focc.locations[i].failed) m.beta_occ[i] = pack(focc.locations[i]);
        if (!fint.locations[i].failed) m.beta_int[i] = pack(fint.locations[i]);
    }
    return m;
}

double SiteModels::eta(bool occurrence, int location, double t) const {
    const Eigen::VectorXd& b =
        occurrence ? beta_occ.at(location) : beta_int.at(location);
    if (b.size() == 0) return kNaN;
    return b.dot(design_row(K, period, t));
}

bool SiteModels::ok(bool occurrence, int location) const {
    const auto& v = occurrence ? beta_occ : beta_int;
    return v.at(location).size() > 0;
}

Eigen::MatrixXd sitewise_probability(const SiteModels& m, int n_dates) {
    Eigen::MatrixXd out(m.beta_occ.size(), n_dates);
    for (size_t i = 0; i < m.beta_occ.size(); ++i)
        for (int t = 0; t < n_dates; ++t)
            out(static_cast<int>(i), t) =
                m.ok(true, static_cast<int>(i))
                    ? expit(m.eta(true, static_cast<int>(i), t + 1.0))
                    : kNaN;
    return out;
}

Eigen::MatrixXd sitewise_intensity(const SiteModels& m, int n_dates) {
    Eigen::MatrixXd out(m.beta_int.size(), n_dates);
    for (size_t i = 0; i < m.beta_int.size(); ++i)
        for (int t = 0; t < n_dates; ++t) {
            if (!m.ok(false, static_cast<int>(i))) {
                out(static_cast<int>(i), t) = kNaN;
                continue;
            }
            const double eta = m.eta(false, static_cast<int>(i), t + 1.0);
            out(static_cast<int>(i), t) = -1.0 / std::min(eta, -1e-6);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Downscaling regression
// ---------------------------------------------------------------------------

namespace {

double transform_value(double v, const std::string& target) {
    if (target == "occurrence") return logit(v);
    if (target == "intensity") return std::log(std::max(v, 1e-12));
    throw std::invalid_argument("unknown downscale target: " + target);
}

double back_transform(double x, const std::string& target) {
    return target == "occurrence" ? expit(x) : std::exp(x);
}

void valid_pairs(const Eigen::VectorXd& model_hat, const Eigen::VectorXd& station_hat,
                 const std::string& target, std::vector<double>& x, std::vector<double>& y) {
    if (model_hat.size() != station_hat.size())
        throw std::invalid_argument("fit_downscale: length mismatch");
    for (int i = 0; i < model_hat.size(); ++i) {
        const double a = model_hat[i], b = station_hat[i];
        if (!std::isfinite(a) || !std::isfinite(b)) continue;
        if (target == "intensity" && (a <= 0.0 || b <= 0.0)) continue;
        x.push_back(transform_value(a, target));
        y.push_back(transform_value(b, target));
    }
}

}  // namespace

DownscaleFit fit_downscale(const Eigen::VectorXd& model_hat,
                           const Eigen::VectorXd& station_hat, const std::string& target) {
    std::vector<double> x, y;
    valid_pairs(model_hat, station_hat, target, x, y);
    const int n = static_cast<int>(x.size());
    if (n < 3) throw std::runtime_error("fit_downscale: fewer than 3 valid pairs");

    double xbar = 0.0, ybar = 0.0;
    for (int i = 0; i < n; ++i) {
        xbar += x[i];
        ybar += y[i];
    }
    xbar /= n;
    ybar /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
        sxx += (x[i] - xbar) * (x[i] - xbar);
        sxy += (x[i] - xbar) * (y[i] - ybar);
        syy += (y[i] - ybar) * (y[i] - ybar);
    }
    if (!(sxx > 0.0)) throw std::runtime_error("fit_downscale: degenerate regressor");

    DownscaleFit fit;
    fit.target = target;
    fit.n = n;
    fit.beta1 = sxy / sxx;
    fit.beta0 = ybar - fit.beta1 * xbar;
    double ssr = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r = y[i] - fit.beta0 - fit.beta1 * x[i];
        ssr += r * r;
    }
    fit.sigma2 = n > 2 ? ssr / (n - 2) : 0.0;
    fit.r2 = syy > 0.0 ? std::clamp(1.0 - ssr / syy, 0.0, 1.0) : 1.0;
    fit.se1 = std::sqrt(fit.sigma2 / sxx);
    fit.se0 = std::sqrt(fit.sigma2 * (1.0 / n + xbar * xbar / sxx));
    fit.xbar = xbar;
    fit.sxx = sxx;
    return fit;
}

Eigen::VectorXd apply_downscale(const DownscaleFit& fit, const Eigen::VectorXd& model_hat) {
    Eigen::VectorXd out(model_hat.size());
    for (int i = 0; i < model_hat.size(); ++i) {
        const double v = model_hat[i];
        if (!std::isfinite(v) || (fit.target == "intensity" && v <= 0.0)) {
            out[i] = kNaN;
            continue;
        }
        out[i] = back_transform(fit.beta0 + fit.beta1 * transform_value(v, fit.target),
                                fit.target);
    }
    return out;
}

LoocvResult loocv_coverage(const Eigen::VectorXd& model_hat,
                           const Eigen::VectorXd& station_hat, const std::string& target) {
    std::vector<double> x, y;
    valid_pairs(model_hat, station_hat, target, x, y);
    const int n = static_cast<int>(x.size());
    if (n < 5) throw std::runtime_error("loocv_coverage: fewer than 5 valid pairs");

    LoocvResult res;
    res.n = n;
    int covered = 0;
    for (int leave = 0; leave < n; ++leave) {
        const int m = n - 1;
        double xbar = 0.0, ybar = 0.0;
        for (int i = 0; i < n; ++i)
            if (i != leave) {
                xbar += x[i];
                ybar += y[i];
            }
        xbar /= m;
        ybar /= m;
        double sxx = 0.0, sxy = 0.0;
        for (int i = 0; i < n; ++i)
            if (i != leave) {
                sxx += (x[i] - xbar) * (x[i] - xbar);
                sxy += (x[i] - xbar) * (y[i] - ybar);
            }
        const double b1 = sxy / sxx;
        const double b0 = ybar - b1 * xbar;
        double ssr = 0.0;
        for (int i = 0; i < n; ++i)
            if (i != leave) {
                const double r = y[i] - b0 - b1 * x[i];
                ssr += r * r;
            }
        const double s2 = ssr / (m - 2);
        const double pred = b0 + b1 * x[leave];
        const double half =
            t_quantile_975(m - 2) *
            std::sqrt(s2 * (1.0 + 1.0 / m + (x[leave] - xbar) * (x[leave] - xbar) / sxx));
        if (y[leave] >= pred - half && y[leave] <= pred + half) ++covered;
    }
    res.coverage = static_cast<double>(covered) / n;
    return res;
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

namespace {

struct PairStats {
    double rmse = kNaN;
    double r2 = kNaN;
};

/// Response-scale RMSE and R^2 of predictions against reference values over
/// all finite pairs.
PairStats pair_stats(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref) {
    double ssr = 0.0, sst = 0.0, mean = 0.0;
    int n = 0;
    for (int i = 0; i < pred.rows(); ++i)
        for (int t = 0; t < pred.cols(); ++t)
            if (std::isfinite(pred(i, t)) && std::isfinite(ref(i, t))) {
                mean += ref(i, t);
                ++n;
            }
    if (n == 0) return {};
    mean /= n;
    for (int i = 0; i < pred.rows(); ++i)
        for (int t = 0; t < pred.cols(); ++t)
            if (std::isfinite(pred(i, t)) && std::isfinite(ref(i, t))) {
                ssr += (pred(i, t) - ref(i, t)) * (pred(i, t) - ref(i, t));
                sst += (ref(i, t) - mean) * (ref(i, t) - mean);
            }
    PairStats st;
    st.rmse = std::sqrt(ssr / n);
    st.r2 = sst > 0.0 ? 1.0 - ssr / sst : kNaN;
    return st;
}

}  // namespace

DownscaleReport run_downscale(const SeriesTable& grid, const SeriesTable& stations,
                              const DownscaleOptions& opts) {
    grid.validate();
    stations.validate();

    DownscaleReport rep;
    rep.options = opts;
    rep.n_stations = stations.n_locations();
    rep.n_grid = grid.n_locations();
    rep.n_dates = stations.n_dates();
    rep.flagged_stations = capacity_flags(stations);
    rep.station_ids = stations.ids;
    rep.station_points = stations.points;
    const int T = rep.n_dates;

    auto mesh = std::make_shared<const SphereMesh>(make_downscale_mesh(opts));
    const ApplicationFit app = fit_application(grid, mesh, opts);

    // station-side responses (temporal-only, no spatial dependence)
    const SiteModels sm = fit_sitewise(stations, opts.K, opts.period, opts.wet_threshold);
    const Eigen::MatrixXd p_G = sitewise_probability(sm, T);
    const Eigen::MatrixXd y_G = sitewise_intensity(sm, T);

    // model covariates: SPDE-interpolated and nearest-cell baseline
    const Eigen::MatrixXd p_S = predict_probability(app, stations.points, T);
    const Eigen::MatrixXd y_S = predict_intensity(app, stations.points, T);
    const SiteModels gm = fit_sitewise(grid, opts.K, opts.period, opts.wet_threshold);
    const Eigen::MatrixXd p_cells = sitewise_probability(gm, T);
    const Eigen::MatrixXd y_cells = sitewise_intensity(gm, T);
    Eigen::MatrixXd p_B(rep.n_stations, T), y_B(rep.n_stations, T);
    for (int i = 0; i < rep.n_stations; ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        const Vec3 s = unit_vector(stations.points[i]);
        for (int g = 0; g < grid.n_locations(); ++g) {
            const double d = great_circle(s, unit_vector(grid.points[g]));
            if (d < best_d) {
                best_d = d;
                best = g;
            }
        }
        p_B.row(i) = p_cells.row(best);
        y_B.row(i) = y_cells.row(best);
    }

    // per-date regressions (and pooled)
    std::vector<DownscaleFit> occ_fits(T), int_fits(T);
    std::vector<char> occ_ok(T, 0), int_ok(T, 0);
    std::vector<DownscaleFit> occ_base(T), int_base(T);
    std::vector<char> occ_base_ok(T, 0), int_base_ok(T, 0);
    parallel_for(T, opts.jobs, [&](int t) {
        try {
            occ_fits[t] = fit_downscale(p_S.col(t), p_G.col(t), "occurrence");
            occ_ok[t] = 1;
        } catch (const std::exception&) {}
        try {
            int_fits[t] = fit_downscale(y_S.col(t), y_G.col(t), "intensity");
            int_ok[t] = 1;
        } catch (const std::exception&) {}
        try {
            occ_base[t] = fit_downscale(p_B.col(t), p_G.col(t), "occurrence");
            occ_base_ok[t] = 1;
        } catch (const std::exception&) {}
        try {
            int_base[t] = fit_downscale(y_B.col(t), y_G.col(t), "intensity");
            int_base_ok[t] = 1;
        } catch (const std::exception&) {}
    });
    for (int t = 0; t < T; ++t) {
        if (occ_ok[t]) rep.per_date_occ.push_back(occ_fits[t]);
        if (int_ok[t]) rep.per_date_int.push_back(int_fits[t]);
    }
    {
        const Eigen::Map<const Eigen::VectorXd> ps(p_S.data(), p_S.size()),
            pg(p_G.data(), p_G.size()), ys(y_S.data(), y_S.size()),
            yg(y_G.data(), y_G.size());
        rep.pooled_occ = fit_downscale(ps, pg, "occurrence");
        rep.pooled_occ.pooled = true;
        rep.pooled_int = fit_downscale(ys, yg, "intensity");
        rep.pooled_int.pooled = true;
    }

    // downscaled predictions with per-date (or pooled) coefficients
    rep.pred_prob = Eigen::MatrixXd::Constant(rep.n_stations, T, kNaN);
    rep.pred_int = Eigen::MatrixXd::Constant(rep.n_stations, T, kNaN);
    rep.prob_lo = rep.pred_prob;
    rep.prob_hi = rep.pred_prob;
    rep.int_lo = rep.pred_prob;
    rep.int_hi = rep.pred_prob;
    rep.prob_sd = rep.pred_prob;
    rep.int_sd = rep.pred_prob;
    Eigen::MatrixXd base_prob = Eigen::MatrixXd::Constant(rep.n_stations, T, kNaN);
    Eigen::MatrixXd base_int = base_prob;

    for (int t = 0; t < T; ++t) {
        const DownscaleFit& fo = opts.pooled ? rep.pooled_occ
                                 : occ_ok[t] ? occ_fits[t]
                                             : rep.pooled_occ;
        const DownscaleFit& fi = opts.pooled ? rep.pooled_int
                                 : int_ok[t] ? int_fits[t]
                                             : rep.pooled_int;
        const double t_occ = t_quantile_975(std::max(fo.n - 2, 1));
        const double t_int = t_quantile_975(std::max(fi.n - 2, 1));
        for (int i = 0; i < rep.n_stations; ++i) {
            if (std::isfinite(p_S(i, t))) {
                const double x = transform_value(p_S(i, t), "occurrence");
                const double mid = fo.beta0 + fo.beta1 * x;
                const double half =
                    t_occ * std::sqrt(fo.sigma2 * (1.0 + 1.0 / fo.n +
                                                   (x - fo.xbar) * (x - fo.xbar) / fo.sxx));
                rep.pred_prob(i, t) = expit(mid);
                rep.prob_lo(i, t) = expit(mid - half);
                rep.prob_hi(i, t) = expit(mid + half);
                rep.prob_sd(i, t) = (rep.prob_hi(i, t) - rep.prob_lo(i, t)) / (2.0 * t_occ);
            }
            if (std::isfinite(y_S(i, t)) && y_S(i, t) > 0.0) {
                const double x = std::log(y_S(i, t));
                const double mid = fi.beta0 + fi.beta1 * x;
                const double half =
                    t_int * std::sqrt(fi.sigma2 * (1.0 + 1.0 / fi.n +
                                                   (x - fi.xbar) * (x - fi.xbar) / fi.sxx));
                rep.pred_int(i, t) = std::exp(mid);
                rep.int_lo(i, t) = std::exp(mid - half);
                rep.int_hi(i, t) = std::exp(mid + half);
                rep.int_sd(i, t) = (rep.int_hi(i, t) - rep.int_lo(i, t)) / (2.0 * t_int);
            }
            // baseline predictions through their own regressions
            const DownscaleFit* bo = occ_base_ok[t] ? &occ_base[t] : nullptr;
            if (bo && std::isfinite(p_B(i, t)))
                base_prob(i, t) =
                    expit(bo->beta0 + bo->beta1 * transform_value(p_B(i, t), "occurrence"));
            const DownscaleFit* bi = int_base_ok[t] ? &int_base[t] : nullptr;
            if (bi && std::isfinite(y_B(i, t)) && y_B(i, t) > 0.0)
                base_int(i, t) = std::exp(bi->beta0 + bi->beta1 * std::log(y_B(i, t)));
        }
    }

    const PairStats sp = pair_stats(rep.pred_prob, p_G);
    const PairStats si = pair_stats(rep.pred_int, y_G);
    const PairStats bp = pair_stats(base_prob, p_G);
    const PairStats bi = pair_stats(base_int, y_G);
    rep.rmse_prob = sp.rmse;
    rep.r2_prob = sp.r2;
    rep.rmse_int = si.rmse;
    rep.r2_int = si.r2;
    rep.rmse_prob_baseline = bp.rmse;
    rep.rmse_int_baseline = bi.rmse;

    const int rd = std::clamp(opts.report_date, 0, T - 1);
    rep.loocv_prob = loocv_coverage(p_S.col(rd), p_G.col(rd), "occurrence");
    rep.loocv_int = loocv_coverage(y_S.col(rd), y_G.col(rd), "intensity");
    return rep;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

nlohmann::json fit_json(const DownscaleFit& f) {
    return {{"target", f.target}, {"beta0", f.beta0}, {"beta1", f.beta1},
            {"se0", f.se0},       {"se1", f.se1},     {"sigma2", f.sigma2},
            {"r2", f.r2},         {"n", f.n},         {"pooled", f.pooled}};
}

}  // namespace

void save_report_json(const DownscaleReport& rep, const std::string& path) {
    nlohmann::json j;
    j["config"] = {{"wet_threshold", rep.options.wet_threshold},
                   {"K", rep.options.K},
                   {"period", rep.options.period},
                   {"subdivisions", rep.options.subdivisions},
                   {"refine_levels", rep.options.refine_levels},
                   {"buffer_km", rep.options.buffer_km},
                   {"pooled", rep.options.pooled},
                   {"report_date", rep.options.report_date},
                   {"seed", rep.options.seed}};
    j["n_stations"] = rep.n_stations;
    j["n_grid"] = rep.n_grid;
    j["n_dates"] = rep.n_dates;
    j["flagged_stations"] = rep.flagged_stations;
    j["pooled_occ"] = fit_json(rep.pooled_occ);
    j["pooled_int"] = fit_json(rep.pooled_int);
    auto& per_occ = j["per_date_occ"] = nlohmann::json::array();
    for (const auto& f : rep.per_date_occ) per_occ.push_back(fit_json(f));
    auto& per_int = j["per_date_int"] = nlohmann::json::array();
    for (const auto& f : rep.per_date_int) per_int.push_back(fit_json(f));
    j["metrics"] = {{"rmse_probability", rep.rmse_prob},
                    {"rmse_intensity", rep.rmse_int},
                    {"rmse_probability_baseline", rep.rmse_prob_baseline},
                    {"rmse_intensity_baseline", rep.rmse_int_baseline},
                    {"r2_probability", rep.r2_prob},
                    {"r2_intensity", rep.r2_int},
                    {"loocv_coverage_probability", rep.loocv_prob.coverage},
                    {"loocv_coverage_intensity", rep.loocv_int.coverage},
                    {"loocv_n_probability", rep.loocv_prob.n},
                    {"loocv_n_intensity", rep.loocv_int.n}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_report_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

void save_prediction_map_csv(const DownscaleReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_prediction_map_csv: cannot open " + path);
    out << "lon,lat,date,probability,intensity,prob_sd,int_sd,prob_lo,prob_hi,int_lo,int_"
           "hi\n";
    char buf[256];
    for (int i = 0; i < rep.n_stations; ++i)
        for (int t = 0; t < rep.pred_prob.cols(); ++t) {
            std::snprintf(buf, sizeof(buf),
                          "%.10g,%.10g,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                          rep.station_points[i].lon, rep.station_points[i].lat, t + 1,
                          rep.pred_prob(i, t), rep.pred_int(i, t), rep.prob_sd(i, t),
                          rep.int_sd(i, t), rep.prob_lo(i, t), rep.prob_hi(i, t),
                          rep.int_lo(i, t), rep.int_hi(i, t));
            out << buf;
        }
}

// ---------------------------------------------------------------------------
// Synthetic truth
// ---------------------------------------------------------------------------

SyntheticData make_synthetic_downscale(const SyntheticConfig& cfg) {
    if (cfg.n_grid < 4 || cfg.n_stations < 5 || cfg.n_days < 30)
        throw std::invalid_argument("make_synthetic_downscale: sizes too small");

    DownscaleOptions mesh_opts;
    mesh_opts.subdivisions = cfg.subdivisions;
    mesh_opts.refine_levels = cfg.refine_levels;
    mesh_opts.refine_box = cfg.box;
    mesh_opts.buffer_km = cfg.buffer_km;
    const SphereMesh mesh = make_downscale_mesh(mesh_opts);

    Rng rng(cfg.seed);

    // latent truth fields drawn from the model's own precision, shrunk below
    // unit scale so the intensity link (mu = -1/eta with eta capped at -0.15)
    // stays in its well-behaved range
    Eigen::MatrixXd fields(mesh.n_triangles(), 2);
    for (int c = 0; c < 2; ++c) {
        DeformationCoeffs truth_coeffs = DeformationCoeffs::zeros(1);
        const double rho = c == 0 ? cfg.field_rho_occ : cfg.field_rho_int;
        truth_coeffs.alpha[0][0] = truth_coeffs.alpha[1][0] =
            std::log(rho) * 2.0 * std::sqrt(kPi);
        truth_coeffs.nugget = {1e-6, 1e-6};
        const PrecisionBuild pb = assemble_precision(mesh, truth_coeffs);
        const CholeskyFactor f = factorize(pb.Q);
        fields.col(c) =
            sample(f, 1, Rng::derive(cfg.seed, 11 + c)) / std::sqrt(4.0 * kPi);
    }

    // temporal truth
    Eigen::VectorXd zeta_occ(1 + 2 * cfg.K), zeta_int(1 + 2 * cfg.K);
    zeta_occ.setZero();
    zeta_int.setZero();
    zeta_occ[0] = -0.3;
    zeta_occ[1] = 0.8;
    zeta_occ[2] = 0.4;
    zeta_int[0] = -0.6;
    zeta_int[1] = 0.2;
    zeta_int[2] = 0.15;
    if (cfg.K >= 2) {
        zeta_occ[3] = 0.2;
        zeta_occ[4] = -0.1;
        zeta_int[3] = 0.05;
    }
    const double gamma_shape = 1.0;

    auto eta_true = [&](bool occ, int tri, double t) {
        const Eigen::VectorXd& z = occ ? zeta_occ : zeta_int;
        const double field = fields(tri, occ ? 0 : 1);
        double eta = z.dot(design_row(cfg.K, cfg.period, t)) + field;
        if (!occ) eta = std::min(eta, -0.15);
        return eta;
    };

    SyntheticData out;
    out.cfg = cfg;

    // regular grid in the box (interior, away from the edges)
    const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.n_grid))));
    SeriesTable& grid = out.grid;
    for (int a = 0; a < g && static_cast<int>(grid.ids.size()) < cfg.n_grid; ++a)
        for (int b = 0; b < g && static_cast<int>(grid.ids.size()) < cfg.n_grid; ++b) {
            const double lon =
                cfg.box.lon_min + (a + 0.5) / g * (cfg.box.lon_max - cfg.box.lon_min);
            const double lat =
                cfg.box.lat_min + (b + 0.5) / g * (cfg.box.lat_max - cfg.box.lat_min);
            char id[16];
            std::snprintf(id, sizeof(id), "G%03d", static_cast<int>(grid.ids.size()));
            grid.ids.push_back(id);
            grid.points.push_back({lat, lon});
        }
    SeriesTable& stations = out.stations;
    for (int i = 0; i < cfg.n_stations; ++i) {
        const double lon = rng.uniform(cfg.box.lon_min + 2.0, cfg.box.lon_max - 2.0);
        const double lat = rng.uniform(cfg.box.lat_min + 2.0, cfg.box.lat_max - 2.0);
        char id[16];
        std::snprintf(id, sizeof(id), "S%03d", i);
        stations.ids.push_back(id);
        stations.points.push_back({lat, lon});
    }
    for (int t = 1; t <= cfg.n_days; ++t) {
        grid.dates.push_back(std::to_string(t));
        stations.dates.push_back(std::to_string(t));
    }

    // grid observations straight from the truth model
    grid.values = Eigen::MatrixXd::Zero(cfg.n_grid, cfg.n_days);
    for (int i = 0; i < cfg.n_grid; ++i) {
        const int tri = mesh.locate(grid.points[i]);
        for (int t = 1; t <= cfg.n_days; ++t) {
            const bool wet = rng.bernoulli(expit(eta_true(true, tri, t)));
            double v = 0.0;
            if (wet) {
                const double mu = -1.0 / eta_true(false, tri, t);
                v = rng.gamma(gamma_shape, mu / gamma_shape);
            }
            grid.values(i, t - 1) = v;
        }
    }
    grid.provenance = "synthetic";

    // station truth through the downscaling relation, plus station scatter
    out.true_p_station.resize(cfg.n_stations, cfg.n_days);
    out.true_y_station.resize(cfg.n_stations, cfg.n_days);
    stations.values = Eigen::MatrixXd::Zero(cfg.n_stations, cfg.n_days);
    for (int i = 0; i < cfg.n_stations; ++i) {
        const int tri = mesh.locate(stations.points[i]);
        const double eps_occ = rng.normal(0.0, cfg.reg_noise);
        const double eps_int = rng.normal(0.0, cfg.reg_noise);
        for (int t = 1; t <= cfg.n_days; ++t) {
            const double lp_grid = eta_true(true, tri, t);  // logit p at the station site
            const double lp_station = cfg.beta0_occ + cfg.beta1_occ * lp_grid + eps_occ;
            const double p_station = expit(lp_station);
            out.true_p_station(i, t - 1) = p_station;
            const double ly_grid = std::log(-1.0 / eta_true(false, tri, t));
            const double ly_station = cfg.beta0_int + cfg.beta1_int * ly_grid + eps_int;
            const double y_station = std::exp(ly_station);
            out.true_y_station(i, t - 1) = y_station;
            double v = 0.0;
            if (rng.bernoulli(p_station))
                v = rng.gamma(gamma_shape, y_station / gamma_shape);
            stations.values(i, t - 1) = v;
        }
    }
    stations.provenance = "synthetic";
    grid.validate();
    stations.validate();
    return out;
}

}  // namespace spde
