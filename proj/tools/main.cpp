// spde: nonstationary spatial fields on the sphere.
//
// Subcommands: mesh, simulate, fit, krige, simstudy, downscale.
// Every run is deterministic given (config, seed) and writes the resolved
// configuration next to its outputs.

#include <CLI11.hpp>
#include <json.hpp>

#include "spde/downscale.hpp"
#include "spde/gmrf.hpp"
#include "spde/rng.hpp"
#include "spde/simlab.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using nlohmann::json;
using namespace spde;

int default_jobs() {
    if (const char* env = std::getenv("SPDE_JOBS")) {
        const int j = std::atoi(env);
        if (j >= 1) return j;
    }
    return 1;
}

/// A JSON config file overrides flag values: every registered key that
/// appears in the file replaces the parsed flag.
class ConfigKeys {
  public:
    template <typename T>
    void bind(const std::string& key, T* slot) {
        setters_[key] = [slot](const json& v) { *slot = v.get<T>(); };
    }
    void apply(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        json j;
        in >> j;
        for (auto it = j.begin(); it != j.end(); ++it) {
            auto s = setters_.find(it.key());
            if (s == setters_.end())
                throw std::runtime_error("unknown config key: " + it.key());
            s->second(it.value());
        }
    }

  private:
    std::map<std::string, std::function<void(const json&)>> setters_;
};

void write_resolved(const json& resolved, const std::string& next_to) {
    const std::filesystem::path p(next_to);
    std::filesystem::path out = p;
    if (std::filesystem::is_directory(p))
        out /= "config.json";
    else
        out = p.string() + ".config.json";
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write resolved config: " + out.string());
    f << resolved.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Shared mesh construction
// ---------------------------------------------------------------------------

struct MeshArgs {
    std::string mesh_file;  // load instead of building
    int subdivisions = 2;
    std::vector<double> refine_box;  // lon_min lon_max lat_min lat_max
    int refine_levels = 0;
    double buffer_km = 400.0;
    std::string land_geojson;  // default geography when empty

    void add_flags(CLI::App* cmd, ConfigKeys& keys) {
        cmd->add_option("--mesh", mesh_file, "Load a mesh file instead of building one")
            ->capture_default_str();
        cmd->add_option("--subdivisions", subdivisions, "Icosphere subdivision levels")
            ->capture_default_str();
        cmd->add_option("--refine-box", refine_box,
                        "Refinement box: lon_min lon_max lat_min lat_max")
            ->expected(4);
        cmd->add_option("--refine-levels", refine_levels, "Extra levels inside the box")
            ->capture_default_str();
        cmd->add_option("--buffer-km", buffer_km, "Coastal buffer width in km")
            ->capture_default_str();
        cmd->add_option("--land-geojson", land_geojson,
                        "Coastline polygons (GeoJSON); default geography when omitted")
            ->capture_default_str();
        keys.bind("mesh", &mesh_file);
        keys.bind("subdivisions", &subdivisions);
        keys.bind("refine_box", &refine_box);
        keys.bind("refine_levels", &refine_levels);
        keys.bind("buffer_km", &buffer_km);
        keys.bind("land_geojson", &land_geojson);
    }

    json resolved() const {
        return {{"mesh", mesh_file},
                {"subdivisions", subdivisions},
                {"refine_box", refine_box},
                {"refine_levels", refine_levels},
                {"buffer_km", buffer_km},
                {"land_geojson", land_geojson}};
    }

    SphereMesh build() const {
        if (!mesh_file.empty()) return load_mesh_file(mesh_file);
        if (!land_geojson.empty()) {
            SphereMesh mesh = build_icosphere(subdivisions);
            if (refine_levels > 0 && refine_box.size() == 4)
                mesh = refine_region(
                    mesh, {refine_box[0], refine_box[1], refine_box[2], refine_box[3]},
                    refine_levels);
            RegionMap map = RegionMap::load_geojson(land_geojson);
            map.buffer_width_km = buffer_km;
            return tag_regions(mesh, map);
        }
        DownscaleOptions opts;
        opts.subdivisions = subdivisions;
        opts.refine_levels = refine_box.size() == 4 ? refine_levels : 0;
        if (refine_box.size() == 4)
            opts.refine_box = {refine_box[0], refine_box[1], refine_box[2], refine_box[3]};
        opts.buffer_km = buffer_km;
        return make_downscale_mesh(opts);
    }
};

struct InferArgs {
    int max_outer = 120;
    int max_newton = 50;
    double outer_tol = 1e-4;
    double newton_tol = 1e-9;
    double grid_step = 0.75;
    int grid_max_steps = 6;
    int draws = 4000;

    void add_flags(CLI::App* cmd, ConfigKeys& keys) {
        cmd->add_option("--max-outer", max_outer, "Outer quasi-Newton iteration cap")
            ->capture_default_str();
        cmd->add_option("--max-newton", max_newton, "Inner Newton iteration cap")
            ->capture_default_str();
        cmd->add_option("--outer-tol", outer_tol, "Outer gradient tolerance")
            ->capture_default_str();
        cmd->add_option("--newton-tol", newton_tol, "Inner gradient tolerance")
            ->capture_default_str();
        cmd->add_option("--grid-step", grid_step, "Grid step in posterior sd units")
            ->capture_default_str();
        cmd->add_option("--grid-max-steps", grid_max_steps, "Grid points per direction")
            ->capture_default_str();
        cmd->add_option("--draws", draws, "Monte-Carlo draws for predictive summaries")
            ->capture_default_str();
        keys.bind("max_outer", &max_outer);
        keys.bind("max_newton", &max_newton);
        keys.bind("outer_tol", &outer_tol);
        keys.bind("newton_tol", &newton_tol);
        keys.bind("grid_step", &grid_step);
        keys.bind("grid_max_steps", &grid_max_steps);
        keys.bind("draws", &draws);
    }

    json resolved() const {
        return {{"max_outer", max_outer},   {"max_newton", max_newton},
                {"outer_tol", outer_tol},   {"newton_tol", newton_tol},
                {"grid_step", grid_step},   {"grid_max_steps", grid_max_steps},
                {"draws", draws}};
    }

    InferenceConfig to_config(std::uint64_t seed) const {
        InferenceConfig cfg;
        cfg.max_outer_iter = max_outer;
        cfg.max_newton_iter = max_newton;
        cfg.outer_grad_tol = outer_tol;
        cfg.newton_grad_tol = newton_tol;
        cfg.grid_step_sd = grid_step;
        cfg.grid_max_steps = grid_max_steps;
        cfg.predictive_draws = draws;
        cfg.seed = seed;
        return cfg;
    }
};

MarginalFamily family_from(const std::string& name, double sigma2, double shape) {
    if (name == "gaussian") return MarginalFamily::gaussian_model(sigma2);
    if (name == "bernoulli") return MarginalFamily::bernoulli_model();
    if (name == "gamma") return MarginalFamily::gamma_model(shape);
    throw std::runtime_error("unknown family: " + name);
}

// ---------------------------------------------------------------------------
// Observation CSV (lon,lat,replicate,value) shared by simulate/fit/krige
// ---------------------------------------------------------------------------

struct ObsTable {
    std::vector<GeoPoint> points;        // unique sites, first-seen order
    std::vector<int> obs_site;
    std::vector<int> obs_replicate;
    std::vector<double> obs_value;
    int n_replicates = 1;
};

ObsTable load_obs_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open observations: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("lon,lat,replicate,value", 0) != 0)
        throw std::runtime_error("observations must start with lon,lat,replicate,value");
    ObsTable t;
    std::map<std::pair<std::string, std::string>, int> site_of;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string lon, lat, rep, val;
        if (!std::getline(row, lon, ',') || !std::getline(row, lat, ',') ||
            !std::getline(row, rep, ',') || !std::getline(row, val))
            throw std::runtime_error("bad observation row: " + line);
        auto it = site_of.find({lon, lat});
        if (it == site_of.end()) {
            it = site_of.emplace(std::make_pair(lon, lat),
                                 static_cast<int>(t.points.size()))
                     .first;
            t.points.push_back({std::stod(lat), std::stod(lon)});
        }
        t.obs_site.push_back(it->second);
        t.obs_replicate.push_back(std::stoi(rep));
        t.obs_value.push_back(std::stod(val));
        t.n_replicates = std::max(t.n_replicates, std::stoi(rep) + 1);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Subcommand state and runners
// ---------------------------------------------------------------------------

struct App {
    // shared
    std::string config_path;
    std::uint64_t seed = 1;
    int jobs = default_jobs();
    std::string out;

    MeshArgs mesh;
    InferArgs infer;

    // simulate / fit / krige
    std::string family = "gaussian";
    double sigma2 = 0.05;
    double shape = 1.0;
    std::string coeffs_file;
    double rho = 0.3;
    double nugget = 1e-4;
    int n_sites = 200;
    int replicates = 1;
    std::string variant = "NS-LS";
    int order_L = 1;
    std::string obs_file;
    std::string targets_file;
    int krige_samples = 0;

    // simstudy
    std::string preset = "table1-desk";
    int n_s = -1;
    int study_n = -1;
    int study_n_t = -1;

    // downscale
    std::string grid_file;
    std::string stations_file;
    double wet_threshold = 0.1;
    int harmonics_K = 2;
    int period = 365;
    bool pooled = false;
    bool synthetic = false;
    int syn_stations = 30;
    int syn_grid = 36;
    int syn_days = 180;
};

DeformationCoeffs coeffs_for(const App& a) {
    if (!a.coeffs_file.empty()) return load_coeffs(a.coeffs_file);
    DeformationCoeffs c = DeformationCoeffs::zeros(a.order_L);
    const double a00 = std::log(a.rho) * 2.0 * std::sqrt(kPi);
    c.alpha[0][0] = c.alpha[1][0] = a00;
    c.nugget = {a.nugget, a.nugget};
    return c;
}

int run_mesh(const App& a) {
    const SphereMesh mesh = a.mesh.build();
    save_mesh(mesh, a.out);
    json resolved = a.mesh.resolved();
    resolved["command"] = "mesh";
    resolved["out"] = a.out;
    resolved["n_triangles"] = mesh.n_triangles();
    write_resolved(resolved, a.out);
    std::cout << "mesh: " << mesh.n_triangles() << " triangles -> " << a.out << "\n";
    return 0;
}

int run_simulate(const App& a) {
    const SphereMesh mesh = a.mesh.build();
    const DeformationCoeffs coeffs = coeffs_for(a);
    const MarginalFamily fam = family_from(a.family, a.sigma2, a.shape);

    const PrecisionBuild pb = assemble_precision(mesh, coeffs);
    const CholeskyFactor factor = factorize(pb.Q);
    const Eigen::MatrixXd fields = sample(factor, a.replicates, Rng::derive(a.seed, 1));

    Rng rng(Rng::derive(a.seed, 2));
    std::vector<GeoPoint> sites;
    std::vector<int> tri;
    while (static_cast<int>(sites.size()) < a.n_sites) {
        Vec3 p(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0));
        if (p.norm() < 1e-6) continue;
        p.normalize();
        sites.push_back(geo_point(p));
        tri.push_back(mesh.locate(p));
    }

    std::ofstream outf(a.out);
    if (!outf) throw std::runtime_error("cannot open output: " + a.out);
    outf << "lon,lat,replicate,value\n";
    char buf[160];
    for (int r = 0; r < a.replicates; ++r)
        for (int i = 0; i < a.n_sites; ++i) {
            const Domain dom = mesh.base_domain[tri[i]];
            const double eta =
                fields(tri[i], r) + rng.normal(0.0, std::sqrt(coeffs.nugget[int(dom)]));
            double y = 0.0;
            switch (fam.kind) {
                case Family::gaussian:
                    y = eta + rng.normal(0.0, std::sqrt(fam.sigma2));
                    break;
                case Family::bernoulli:
                    y = rng.bernoulli(fam.inv_link(eta)) ? 1.0 : 0.0;
                    break;
                case Family::gamma: {
                    const double mu = fam.inv_link(std::min(eta, -1e-6));
                    y = rng.gamma(fam.shape, mu / fam.shape);
                    break;
                }
            }
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%d,%.10g\n", sites[i].lon,
                          sites[i].lat, r, y);
            outf << buf;
        }

    json resolved = a.mesh.resolved();
    resolved["command"] = "simulate";
    resolved["family"] = a.family;
    resolved["sigma2"] = a.sigma2;
    resolved["shape"] = a.shape;
    resolved["rho"] = a.rho;
    resolved["nugget"] = a.nugget;
    resolved["coeffs"] = a.coeffs_file;
    resolved["n_sites"] = a.n_sites;
    resolved["replicates"] = a.replicates;
    resolved["seed"] = a.seed;
    resolved["out"] = a.out;
    write_resolved(resolved, a.out);
    std::cout << "simulate: " << a.n_sites << " sites x " << a.replicates
              << " replicates -> " << a.out << "\n";
    return 0;
}

int run_fit(const App& a) {
    const SphereMesh mesh = a.mesh.build();
    const ObsTable obs = load_obs_csv(a.obs_file);
    const MarginalFamily fam = family_from(a.family, a.sigma2, a.shape);
    std::string vname = a.variant;
    for (char& c : vname) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    const ModelStructure st = variant_structure(variant_from_name(vname), a.order_L);

    LgmData data;
    for (const auto& p : obs.points) data.sites.push_back(site_for(mesh, p));
    data.obs_site = obs.obs_site;
    data.obs_replicate = obs.obs_replicate;
    data.obs_value = Eigen::Map<const Eigen::VectorXd>(obs.obs_value.data(),
                                                       obs.obs_value.size());
    data.obs_offset = Eigen::VectorXd::Zero(data.obs_value.size());
    data.n_replicates = obs.n_replicates;

    const HyperPosterior hp = laplace_fit(data, mesh, fam, st, a.infer.to_config(a.seed));
    save_fit_report(hp, a.out);

    json resolved = a.mesh.resolved();
    resolved.update(a.infer.resolved());
    resolved["command"] = "fit";
    resolved["observations"] = a.obs_file;
    resolved["family"] = a.family;
    resolved["sigma2"] = a.sigma2;
    resolved["shape"] = a.shape;
    resolved["variant"] = a.variant;
    resolved["order_L"] = a.order_L;
    resolved["seed"] = a.seed;
    resolved["out"] = a.out;
    write_resolved(resolved, a.out);
    std::cout << "fit: mode log-posterior " << hp.mode_log_post << ", "
              << hp.grid.size() << " grid points -> " << a.out << "\n";
    return 0;
}

int run_krige(const App& a) {
    const SphereMesh mesh = a.mesh.build();
    const DeformationCoeffs coeffs = coeffs_for(a);
    const ObsTable obs = load_obs_csv(a.obs_file);

    std::ifstream tin(a.targets_file);
    if (!tin) throw std::runtime_error("cannot open targets: " + a.targets_file);
    std::string line;
    if (!std::getline(tin, line) || line.rfind("lon,lat", 0) != 0)
        throw std::runtime_error("targets must start with lon,lat");
    std::vector<GeoPoint> targets;
    while (std::getline(tin, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string lon, lat;
        std::getline(row, lon, ',');
        std::getline(row, lat, ',');
        targets.push_back({std::stod(lat), std::stod(lon)});
    }

    const PrecisionBuild pb = assemble_precision(mesh, coeffs);
    std::vector<int> obs_idx, target_idx;
    Eigen::VectorXd values(obs.obs_site.size()), noise(obs.obs_site.size());
    for (size_t i = 0; i < obs.obs_site.size(); ++i) {
        const GeoPoint& p = obs.points[obs.obs_site[i]];
        const int tri = mesh.locate(p);
        obs_idx.push_back(tri);
        values[static_cast<int>(i)] = obs.obs_value[i];
        noise[static_cast<int>(i)] = coeffs.nugget[int(mesh.base_domain[tri])];
    }
    for (const auto& p : targets) target_idx.push_back(mesh.locate(p));
    const KrigingResult kr =
        krige(pb.Q, obs_idx, values, noise, target_idx, a.krige_samples, a.seed);

    std::ofstream outf(a.out);
    if (!outf) throw std::runtime_error("cannot open output: " + a.out);
    outf << "lon,lat,mean,variance\n";
    char buf[160];
    for (size_t i = 0; i < targets.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%.10g\n", targets[i].lon,
                      targets[i].lat, kr.mean[static_cast<int>(i)],
                      kr.variance[static_cast<int>(i)]);
        outf << buf;
    }

    json resolved = a.mesh.resolved();
    resolved["command"] = "krige";
    resolved["observations"] = a.obs_file;
    resolved["targets"] = a.targets_file;
    resolved["rho"] = a.rho;
    resolved["nugget"] = a.nugget;
    resolved["coeffs"] = a.coeffs_file;
    resolved["samples"] = a.krige_samples;
    resolved["seed"] = a.seed;
    resolved["out"] = a.out;
    write_resolved(resolved, a.out);
    std::cout << "krige: " << targets.size() << " targets -> " << a.out << "\n";
    return 0;
}

int run_simstudy(const App& a) {
    SimConfig cfg = SimConfig::desk();
    std::string kind;  // consistency | gaussian | bernoulli
    if (a.preset == "table1-desk") {
        kind = "consistency";
    } else if (a.preset == "table2-desk") {
        kind = "gaussian";
    } else if (a.preset == "roc-desk") {
        kind = "bernoulli";
    } else {
        throw std::runtime_error("unknown preset: " + a.preset +
                                 " (expected table1-desk, table2-desk, roc-desk)");
    }
    if (a.study_n > 0) cfg.n = a.study_n;
    if (a.study_n_t > 0) cfg.n_T = a.study_n_t;
    if (a.n_s > 0) cfg.n_s = a.n_s;
    cfg.seed = a.seed;
    cfg.jobs = a.jobs;

    std::filesystem::create_directories(a.out);
    const SimResult result = kind == "consistency"
                                 ? run_consistency(cfg)
                                 : run_interpolation(cfg, kind == "gaussian"
                                                              ? Family::gaussian
                                                              : Family::bernoulli);
    const std::string results_path = (std::filesystem::path(a.out) / "results.csv").string();
    save_sim_csv(result, results_path);
    if (kind == "bernoulli")
        save_roc_csv(result, (std::filesystem::path(a.out) / "roc.csv").string());

    json resolved = {{"command", "simstudy"}, {"preset", a.preset},
                     {"n", cfg.n},            {"n_T", cfg.n_T},
                     {"n_s", cfg.n_s},        {"seed", a.seed},
                     {"jobs", a.jobs},        {"out", a.out}};
    write_resolved(resolved, a.out);
    std::cout << "simstudy " << a.preset << ": " << result.rows.size() << " rows, "
              << result.n_failed << " failed fits -> " << results_path << "\n";
    return 0;
}

int run_downscale(const App& a) {
    std::filesystem::create_directories(a.out);

    if (a.synthetic) {
        SyntheticConfig cfg;
        cfg.n_grid = a.syn_grid;
        cfg.n_stations = a.syn_stations;
        cfg.n_days = a.syn_days;
        cfg.seed = a.seed;
        cfg.K = a.harmonics_K;
        cfg.wet_threshold = a.wet_threshold;
        const SyntheticData syn = make_synthetic_downscale(cfg);
        const auto dir = std::filesystem::path(a.out);
        save_series_csv(syn.grid, (dir / "grid.csv").string());
        save_series_csv(syn.stations, (dir / "stations.csv").string());
        json resolved = {{"command", "downscale"},       {"synthetic", true},
                         {"n_grid", cfg.n_grid},         {"n_stations", cfg.n_stations},
                         {"n_days", cfg.n_days},         {"seed", a.seed},
                         {"wet_threshold", a.wet_threshold}, {"K", a.harmonics_K},
                         {"out", a.out}};
        write_resolved(resolved, a.out);
        std::cout << "downscale: synthetic fixtures -> " << a.out << "\n";
        return 0;
    }

    const SeriesTable grid = load_series_csv(a.grid_file);
    const SeriesTable stations = load_series_csv(a.stations_file);
    DownscaleOptions opts;
    opts.wet_threshold = a.wet_threshold;
    opts.K = a.harmonics_K;
    opts.period = a.period;
    opts.subdivisions = a.mesh.subdivisions;
    opts.refine_levels = a.mesh.refine_levels;
    if (a.mesh.refine_box.size() == 4)
        opts.refine_box = {a.mesh.refine_box[0], a.mesh.refine_box[1], a.mesh.refine_box[2],
                           a.mesh.refine_box[3]};
    opts.buffer_km = a.mesh.buffer_km;
    opts.pooled = a.pooled;
    opts.seed = a.seed;
    opts.jobs = a.jobs;
    opts.inference = a.infer.to_config(a.seed);

    const DownscaleReport rep = run_downscale(grid, stations, opts);
    const auto dir = std::filesystem::path(a.out);
    save_report_json(rep, (dir / "report.json").string());
    save_prediction_map_csv(rep, (dir / "map.csv").string());

    json resolved = a.mesh.resolved();
    resolved.update(a.infer.resolved());
    resolved["command"] = "downscale";
    resolved["grid"] = a.grid_file;
    resolved["stations"] = a.stations_file;
    resolved["wet_threshold"] = a.wet_threshold;
    resolved["K"] = a.harmonics_K;
    resolved["period"] = a.period;
    resolved["pooled"] = a.pooled;
    resolved["seed"] = a.seed;
    resolved["jobs"] = a.jobs;
    resolved["out"] = a.out;
    write_resolved(resolved, a.out);
    std::cout << "downscale: rmse(prob) " << rep.rmse_prob << " vs baseline "
              << rep.rmse_prob_baseline << ", rmse(int) " << rep.rmse_int
              << " vs baseline " << rep.rmse_int_baseline << " -> " << a.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    App a;
    CLI::App app{"spde: locally deformed spatial fields on the sphere"};
    app.require_subcommand(1);

    std::map<CLI::App*, ConfigKeys> keys;
    std::map<CLI::App*, int (*)(const App&)> runners;

    auto common = [&](CLI::App* cmd) -> ConfigKeys& {
        ConfigKeys& k = keys[cmd];
        cmd->add_option("--config", a.config_path,
                        "JSON config file; its keys override flag values");
        cmd->add_option("--seed", a.seed, "Master random seed")->capture_default_str();
        cmd->add_option("--jobs", a.jobs, "Worker parallelism cap (env SPDE_JOBS)")
            ->capture_default_str();
        k.bind("seed", &a.seed);
        k.bind("jobs", &a.jobs);
        return k;
    };

    {
        CLI::App* cmd = app.add_subcommand("mesh", "Build and save a sphere mesh");
        ConfigKeys& k = common(cmd);
        a.mesh.add_flags(cmd, k);
        cmd->add_option("--out", a.out, "Output mesh file")->required();
        k.bind("out", &a.out);
        runners[cmd] = run_mesh;
    }
    {
        CLI::App* cmd =
            app.add_subcommand("simulate", "Sample observations from a known field");
        ConfigKeys& k = common(cmd);
        a.mesh.add_flags(cmd, k);
        cmd->add_option("--family", a.family, "gaussian | bernoulli | gamma")
            ->capture_default_str();
        cmd->add_option("--sigma2", a.sigma2, "Gaussian observation variance")
            ->capture_default_str();
        cmd->add_option("--shape", a.shape, "Gamma shape")->capture_default_str();
        cmd->add_option("--coeffs", a.coeffs_file, "Deformation coefficient file")
            ->capture_default_str();
        cmd->add_option("--rho", a.rho, "Stationary range when no coefficient file")
            ->capture_default_str();
        cmd->add_option("--nugget", a.nugget, "Nugget variance")->capture_default_str();
        cmd->add_option("--n", a.n_sites, "Number of sites")->capture_default_str();
        cmd->add_option("--replicates", a.replicates, "Independent replicates")
            ->capture_default_str();
        cmd->add_option("--out", a.out, "Output CSV (lon,lat,replicate,value)")->required();
        k.bind("family", &a.family);
        k.bind("sigma2", &a.sigma2);
        k.bind("shape", &a.shape);
        k.bind("coeffs", &a.coeffs_file);
        k.bind("rho", &a.rho);
        k.bind("nugget", &a.nugget);
        k.bind("n", &a.n_sites);
        k.bind("replicates", &a.replicates);
        k.bind("out", &a.out);
        runners[cmd] = run_simulate;
    }
    {
        CLI::App* cmd = app.add_subcommand("fit", "Fit hyperparameters to observations");
        ConfigKeys& k = common(cmd);
        a.mesh.add_flags(cmd, k);
        a.infer.add_flags(cmd, k);
        cmd->add_option("--obs", a.obs_file, "Observations CSV (lon,lat,replicate,value)")
            ->required();
        cmd->add_option("--family", a.family, "gaussian | bernoulli | gamma")
            ->capture_default_str();
        cmd->add_option("--sigma2", a.sigma2, "Gaussian observation variance")
            ->capture_default_str();
        cmd->add_option("--shape", a.shape, "Gamma shape")->capture_default_str();
        cmd->add_option("--variant", a.variant, "NS-LS | NS | S-LS | S")
            ->capture_default_str();
        cmd->add_option("--order", a.order_L, "Harmonic order of the deformation")
            ->capture_default_str();
        cmd->add_option("--out", a.out, "Fit report JSON")->required();
        k.bind("obs", &a.obs_file);
        k.bind("family", &a.family);
        k.bind("sigma2", &a.sigma2);
        k.bind("shape", &a.shape);
        k.bind("variant", &a.variant);
        k.bind("order", &a.order_L);
        k.bind("out", &a.out);
        runners[cmd] = run_fit;
    }
    {
        CLI::App* cmd = app.add_subcommand("krige", "Spatial interpolation at fixed field");
        ConfigKeys& k = common(cmd);
        a.mesh.add_flags(cmd, k);
        cmd->add_option("--obs", a.obs_file, "Observations CSV (lon,lat,replicate,value)")
            ->required();
        cmd->add_option("--targets", a.targets_file, "Target points CSV (lon,lat)")
            ->required();
        cmd->add_option("--coeffs", a.coeffs_file, "Deformation coefficient file")
            ->capture_default_str();
        cmd->add_option("--rho", a.rho, "Stationary range when no coefficient file")
            ->capture_default_str();
        cmd->add_option("--nugget", a.nugget, "Observation noise variance")
            ->capture_default_str();
        cmd->add_option("--samples", a.krige_samples, "Joint posterior draws at targets")
            ->capture_default_str();
        cmd->add_option("--out", a.out, "Output CSV (lon,lat,mean,variance)")->required();
        k.bind("obs", &a.obs_file);
        k.bind("targets", &a.targets_file);
        k.bind("coeffs", &a.coeffs_file);
        k.bind("rho", &a.rho);
        k.bind("nugget", &a.nugget);
        k.bind("samples", &a.krige_samples);
        k.bind("out", &a.out);
        runners[cmd] = run_krige;
    }
    {
        CLI::App* cmd = app.add_subcommand("simstudy", "Run a simulation study preset");
        ConfigKeys& k = common(cmd);
        cmd->add_option("--preset", a.preset,
                        "table1-desk (consistency) | table2-desk (Gaussian) | roc-desk "
                        "(Bernoulli)")
            ->capture_default_str();
        cmd->add_option("--n", a.study_n, "Override: sample locations");
        cmd->add_option("--n-t", a.study_n_t, "Override: target triangle count");
        cmd->add_option("--n-s", a.n_s, "Override: number of simulations");
        cmd->add_option("--out", a.out, "Output directory")->required();
        k.bind("preset", &a.preset);
        k.bind("n", &a.study_n);
        k.bind("n_t", &a.study_n_t);
        k.bind("n_s", &a.n_s);
        k.bind("out", &a.out);
        runners[cmd] = run_simstudy;
    }
    {
        CLI::App* cmd =
            app.add_subcommand("downscale", "Station-level precipitation downscaling");
        ConfigKeys& k = common(cmd);
        a.mesh.add_flags(cmd, k);
        a.infer.add_flags(cmd, k);
        cmd->add_option("--grid", a.grid_file, "Gridded model series CSV");
        cmd->add_option("--stations", a.stations_file, "Station gauge series CSV");
        cmd->add_option("--wet-threshold", a.wet_threshold, "Wet-day threshold (mm)")
            ->capture_default_str();
        cmd->add_option("--harmonics", a.harmonics_K, "Seasonal harmonics K")
            ->capture_default_str();
        cmd->add_option("--period", a.period, "Seasonal period (days)")
            ->capture_default_str();
        cmd->add_flag("--pooled", a.pooled, "Pool the regression across dates");
        cmd->add_flag("--synthetic", a.synthetic, "Generate synthetic fixtures instead");
        cmd->add_option("--synthetic-grid", a.syn_grid, "Synthetic grid cells")
            ->capture_default_str();
        cmd->add_option("--synthetic-stations", a.syn_stations, "Synthetic stations")
            ->capture_default_str();
        cmd->add_option("--synthetic-days", a.syn_days, "Synthetic days")
            ->capture_default_str();
        cmd->add_option("--out", a.out, "Output directory")->required();
        k.bind("grid", &a.grid_file);
        k.bind("stations", &a.stations_file);
        k.bind("wet_threshold", &a.wet_threshold);
        k.bind("harmonics", &a.harmonics_K);
        k.bind("period", &a.period);
        k.bind("pooled", &a.pooled);
        k.bind("synthetic", &a.synthetic);
        k.bind("synthetic_grid", &a.syn_grid);
        k.bind("synthetic_stations", &a.syn_stations);
        k.bind("synthetic_days", &a.syn_days);
        k.bind("out", &a.out);
        runners[cmd] = run_downscale;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        if (!a.config_path.empty()) keys[cmd].apply(a.config_path);
        if (a.jobs < 1) {
            std::cerr << "--jobs must be >= 1\n";
            return 2;
        }
        if (cmd->get_name() == "downscale" && !a.synthetic &&
            (a.grid_file.empty() || a.stations_file.empty())) {
            std::cerr << "downscale needs --grid and --stations (or --synthetic)\n";
            return 2;
        }
        return runners[cmd](a);
    } catch (const std::exception& e) {
        nlohmann::json err = {{"error", e.what()}, {"command", cmd->get_name()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
