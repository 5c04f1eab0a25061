#include "spde/gmrf.hpp"

#include "spde/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace spde {

CholeskyFactor::CholeskyFactor(const SparseMat& Q)
    : llt_(std::make_shared<Eigen::SimplicialLLT<SparseMat>>()) {
    if (Q.rows() != Q.cols()) throw std::invalid_argument("factorize: matrix must be square");
    dim_ = static_cast<int>(Q.rows());
    llt_->compute(Q);
    if (llt_->info() != Eigen::Success)
        throw std::runtime_error("factorize: matrix is not positive definite");
    const SparseMat L = llt_->matrixL();
    log_det_ = 0.0;
    for (int i = 0; i < dim_; ++i) log_det_ += 2.0 * std::log(L.coeff(i, i));
    if (!std::isfinite(log_det_))
        throw std::runtime_error("factorize: non-finite log-determinant");
}

Eigen::VectorXd CholeskyFactor::backsolve_white(const Eigen::VectorXd& z) const {
    Eigen::VectorXd y = llt_->matrixU().solve(z);
    return llt_->permutationPinv() * y;
}

CholeskyFactor factorize(const SparseMat& Q) { return CholeskyFactor(Q); }

Eigen::MatrixXd sample(const CholeskyFactor& factor, int count, std::uint64_t seed) {
    if (count <= 0) throw std::invalid_argument("sample: count must be positive");
    Rng rng(seed);
    Eigen::MatrixXd out(factor.dim(), count);
    Eigen::VectorXd z(factor.dim());
    for (int c = 0; c < count; ++c) {
        for (int i = 0; i < factor.dim(); ++i) z[i] = rng.normal();
        out.col(c) = factor.backsolve_white(z);
    }
    return out;
}

KrigingResult krige(const SparseMat& Q, const std::vector<int>& obs_idx,
                    const Eigen::VectorXd& obs_values, const Eigen::VectorXd& noise_var,
                    const std::vector<int>& targets, int sample_count, std::uint64_t seed) {
    const int n = static_cast<int>(Q.rows());
    const int m = static_cast<int>(obs_idx.size());
    if (obs_values.size() != m || noise_var.size() != m)
        throw std::invalid_argument("krige: observation arrays must have equal length");
    {
        std::vector<char> seen(n, 0);
        for (int k = 0; k < m; ++k) {
            const int i = obs_idx[k];
            if (i < 0 || i >= n) throw std::out_of_range("krige: observation index out of range");
            if (noise_var[k] < 0.0) throw std::invalid_argument("krige: negative noise variance");
            if (seen[i] && noise_var[k] == 0.0)
                throw std::invalid_argument("krige: repeated index needs positive noise");
            seen[i] = 1;
        }
    }

    constexpr double kExactWeight = 1e12;
    SparseMat Qp = Q;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < m; ++k) {
        const double w = noise_var[k] > 0.0 ? 1.0 / noise_var[k] : kExactWeight;
        Qp.coeffRef(obs_idx[k], obs_idx[k]) += w;
        rhs[obs_idx[k]] += w * obs_values[k];
    }

    CholeskyFactor f = [&] {
        try {
            return factorize(Qp);
        } catch (const std::runtime_error&) {
            throw std::runtime_error("krige: singular augmented system");
        }
    }();

    const Eigen::VectorXd mean_full = f.solve(rhs);

    KrigingResult out;
    const int nt = static_cast<int>(targets.size());
    out.mean.resize(nt);
    out.variance.resize(nt);
    for (int k = 0; k < nt; ++k) {
        const int t = targets[k];
        if (t < 0 || t >= n) throw std::out_of_range("krige: target index out of range");
        out.mean[k] = mean_full[t];
        Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
        e[t] = 1.0;
        out.variance[k] = std::max(0.0, f.solve(e)[t]);
    }
    if (sample_count > 0 && nt > 0) {
        const Eigen::MatrixXd draws = sample(f, sample_count, seed);
        out.samples.resize(nt, sample_count);
        for (int k = 0; k < nt; ++k)
            out.samples.row(k) = draws.row(targets[k]).array() + out.mean[k];
    }
    return out;
}

double kld_gaussian(const Eigen::MatrixXd& sigma0, const Eigen::MatrixXd& sigma1) {
    const int n = static_cast<int>(sigma0.rows());
    if (sigma0.cols() != n || sigma1.rows() != n || sigma1.cols() != n)
        throw std::invalid_argument("kld_gaussian: dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> l0(sigma0), l1(sigma1);
    if (l0.info() != Eigen::Success || l1.info() != Eigen::Success)
        throw std::invalid_argument("kld_gaussian: inputs must be SPD");
    const double tr = l1.solve(sigma0).trace();
    double logdet0 = 0.0, logdet1 = 0.0;
    for (int i = 0; i < n; ++i) {
        logdet0 += 2.0 * std::log(l0.matrixL()(i, i));
        logdet1 += 2.0 * std::log(l1.matrixL()(i, i));
    }
    return 0.5 * (tr - n + logdet1 - logdet0);
}

}  // namespace spde
