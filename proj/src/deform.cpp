#include "spde/deform.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spde {

DeformationCoeffs DeformationCoeffs::zeros(int order_L) {
    if (order_L < 0 || order_L > 4)
        throw std::invalid_argument("order_L must be in [0, 4]");
    DeformationCoeffs c;
    c.order_L = order_L;
    for (int j = 0; j < 2; ++j) {
        c.alpha[j].assign(c.n_alpha(), 0.0);
        c.e1[j].assign(c.n_vec(), 0.0);
        c.e2[j].assign(c.n_vec(), 0.0);
    }
    return c;
}

void DeformationCoeffs::validate() const {
    if (drop_d < 0.0 || drop_d > 1.0)
        throw std::invalid_argument("drop_d must be in [0, 1]");
    for (int j = 0; j < 2; ++j) {
        if (!(nugget[j] > 0.0)) throw std::invalid_argument("nuggets must be positive");
        if (alpha[j].size() != static_cast<size_t>(n_alpha()) ||
            e1[j].size() != static_cast<size_t>(n_vec()) ||
            e2[j].size() != static_cast<size_t>(n_vec()))
            throw std::invalid_argument("coefficient array size mismatch");
    }
}

namespace {

int governing_domain(const RegionInfo& where) {
    if (where.tag == Region::land) return 0;
    if (where.tag == Region::sea) return 1;
    return static_cast<int>(where.base);  // buffer: nearest non-buffer domain
}

}  // namespace

double eval_rho(const DeformationCoeffs& c, const Vec3& s, const RegionInfo& where) {
    const int j = governing_domain(where);
    double log_rho = 0.0;
    for (int l = 0; l <= c.order_L; ++l)
        for (int m = -l; m <= l; ++m)
            log_rho += c.alpha[j][l * l + m + l] * real_sph_harmonic(l, m, s);
    double rho = std::exp(log_rho);
    if (where.tag == Region::buffer) {
        if (c.drop_d <= 0.0)
            throw std::domain_error("drop_d = 0 makes the buffer metric degenerate");
        rho *= c.drop_d;
    }
    return rho;
}

LocalMetric eval_metric(const DeformationCoeffs& c, const Vec3& s, const RegionInfo& where) {
    LocalMetric out;
    out.rho = eval_rho(c, s, where);
    const int j = governing_domain(where);
    Vec2 v = Vec2::Zero();
    for (int l = 1; l <= c.order_L; ++l) {
        for (int m = -l; m <= l; ++m) {
            const int idx = l * l + m + l - 1;
            const Vec2 g = surf_gradient_Y(l, m, s);
            v += c.e1[j][idx] * g + c.e2[j][idx] * rotate90(g);
        }
    }
    out.v = v;
    const double s1v = std::sqrt(1.0 + v.squaredNorm());
    out.H = (Mat2::Identity() + v * v.transpose()) / s1v;
    out.Ginv = out.rho * out.rho * out.H;
    return out;
}

void save_coeffs(const DeformationCoeffs& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write coefficient file: " + path);
    out.precision(17);
    const char* dom[2] = {"land", "sea"};
    out << "order " << c.order_L << "\n";
    out << "drop " << c.drop_d << "\n";
    for (int j = 0; j < 2; ++j) out << "nugget " << dom[j] << ' ' << c.nugget[j] << "\n";
    for (int j = 0; j < 2; ++j)
        for (int l = 0; l <= c.order_L; ++l)
            for (int m = -l; m <= l; ++m)
                out << "alpha " << dom[j] << ' ' << l << ' ' << m << ' '
                    << c.alpha[j][l * l + m + l] << "\n";
    for (int j = 0; j < 2; ++j)
        for (int l = 1; l <= c.order_L; ++l)
            for (int m = -l; m <= l; ++m) {
                const int idx = l * l + m + l - 1;
                out << "e1 " << dom[j] << ' ' << l << ' ' << m << ' ' << c.e1[j][idx] << "\n";
                out << "e2 " << dom[j] << ' ' << l << ' ' << m << ' ' << c.e2[j][idx] << "\n";
            }
}

DeformationCoeffs load_coeffs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open coefficient file: " + path);
    DeformationCoeffs c = DeformationCoeffs::zeros(1);
    bool sized = false;
    std::string line;
    auto domain_index = [](const std::string& d) {
        if (d == "land") return 0;
        if (d == "sea") return 1;
        throw std::runtime_error("unknown domain in coefficient file: " + d);
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "order") {
            int L;
            ls >> L;
            c = DeformationCoeffs::zeros(L);
            sized = true;
        } else if (key == "drop") {
            ls >> c.drop_d;
        } else if (key == "nugget") {
            std::string d;
            double v;
            ls >> d >> v;
            c.nugget[domain_index(d)] = v;
        } else if (key == "alpha" || key == "e1" || key == "e2") {
            if (!sized) throw std::runtime_error("coefficient file must state order first");
            std::string d;
            int l, m;
            double v;
            ls >> d >> l >> m >> v;
            if (l < 0 || std::abs(m) > l || l > c.order_L)
                throw std::runtime_error("coefficient (l,m) out of range");
            const int j = domain_index(d);
            if (key == "alpha") {
                c.alpha[j][l * l + m + l] = v;
            } else {
                if (l < 1) throw std::runtime_error("vector-field coefficient needs l >= 1");
                (key == "e1" ? c.e1[j] : c.e2[j])[l * l + m + l - 1] = v;
            }
        } else {
            throw std::runtime_error("unknown key in coefficient file: " + key);
        }
    }
    c.validate();
    return c;
}

}  // namespace spde
