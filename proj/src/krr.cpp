#include "oar/krr.hpp"

#include <Eigen/Dense>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace oar {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_matrix(const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
    MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = flat[i * cols + j];
    return m;
}

VectorXd to_vector(const std::vector<double>& v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
    return out;
}

std::vector<double> from_vector(const VectorXd& v) {
    std::vector<double> out(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = v(i);
    return out;
}

/** LDLT solve of (A + maybe jitter I) z = b, retried once with jitter. */
VectorXd solve_spd(const MatrixXd& a, const VectorXd& b, bool* jittered) {
    if (jittered) *jittered = false;
    Eigen::LDLT<MatrixXd> ldlt(a);
    if (ldlt.info() == Eigen::Success) {
        VectorXd z = ldlt.solve(b);
        if (z.allFinite()) return z;
    }
    MatrixXd bumped = a;
    bumped.diagonal().array() += 1e-10;
    Eigen::LDLT<MatrixXd> retry(bumped);
    if (retry.info() != Eigen::Success)
        throw std::runtime_error("kernel system factorization failed even with jitter");
    VectorXd z = retry.solve(b);
    if (!z.allFinite())
        throw std::runtime_error("kernel system solve produced non-finite coefficients");
    if (jittered) *jittered = true;
    return z;
}

std::vector<double> query_grid(const Dataset& data, std::size_t n_query) {
    if (data.d != 1)
        throw std::invalid_argument("query grid construction expects univariate inputs");
    if (n_query == 0) throw std::invalid_argument("n_query must be positive");
    auto [lo_it, hi_it] = std::minmax_element(data.x.begin(), data.x.end());
    double lo = *lo_it - 0.5;
    double hi = *hi_it + 0.5;
    std::vector<double> xq(n_query);
    if (n_query == 1) {
        xq[0] = 0.5 * (lo + hi);
        return xq;
    }
    for (std::size_t i = 0; i < n_query; ++i)
        xq[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_query - 1);
    return xq;
}

std::vector<double> oracle_overlap_weights(const NuisanceEstimates& oracle) {
    std::vector<double> w(oracle.pi_raw.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        double pi = oracle.pi_raw[i];
        w[i] = pi * (1.0 - pi);
        if (!(w[i] > 0.0))
            throw std::invalid_argument("push-through check needs overlap weights in (0, 1/4]");
    }
    return w;
}

} // namespace

double rbf_kernel(const double* x, const double* xp, std::size_t d, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("kernel bandwidth must be positive");
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double diff = x[j] - xp[j];
        sq += diff * diff;
    }
    return std::exp(-sq / (2.0 * h * h));
}

std::vector<double> kernel_matrix(const std::vector<double>& x, std::size_t n,
                                  std::size_t d, const KernelConfig& kernel) {
    if (x.size() != n * d) throw std::invalid_argument("kernel_matrix: input size mismatch");
    std::vector<double> k(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        k[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = rbf_kernel(&x[i * d], &x[j * d], d, kernel.bandwidth);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    return k;
}

std::vector<double> kernel_cross(const std::vector<double>& xq, std::size_t m,
                                 const std::vector<double>& x, std::size_t n,
                                 std::size_t d, const KernelConfig& kernel) {
    if (xq.size() != m * d || x.size() != n * d)
        throw std::invalid_argument("kernel_cross: input size mismatch");
    std::vector<double> k(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            k[i * n + j] = rbf_kernel(&xq[i * d], &x[j * d], d, kernel.bandwidth);
    return k;
}

std::vector<double> krr_dual(const std::vector<double>& x, std::size_t n, std::size_t d,
                             const std::vector<double>& rho,
                             const std::vector<double>& level,
                             const std::vector<double>& phi_centered,
                             const KernelConfig& kernel, bool* jittered) {
    if (n == 0) throw std::invalid_argument("krr_dual: empty training set");
    if (x.size() != n * d || rho.size() != n || level.size() != n || phi_centered.size() != n)
        throw std::invalid_argument("krr_dual: input size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        if (!(rho[i] > 0.0))
            throw std::invalid_argument("krr_dual: row weight must be positive");
        if (level[i] < 0.0)
            throw std::invalid_argument("krr_dual: ridge level must be non-negative");
    }
    MatrixXd a = to_matrix(kernel_matrix(x, n, d, kernel), n, n);
    for (std::size_t i = 0; i < n; ++i)
        a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) +=
            static_cast<double>(n) * level[i] / rho[i];
    VectorXd z = solve_spd(a, to_vector(phi_centered), jittered);
    return from_vector(z);
}

KrrModel fit_krr_oar(const Dataset& train, const NuisanceEstimates& est,
                     Learner learner, const RegSchedule& reg,
                     const KernelConfig& kernel) {
    std::size_t n = train.n;
    if (n == 0) throw std::invalid_argument("fit_krr_oar: empty training set");
    if (est.pi_hat.size() != n || est.trim.size() != n)
        throw std::invalid_argument("fit_krr_oar: nuisance estimates do not match the data");
    if (reg.base < 0.0)
        throw std::invalid_argument("fit_krr_oar: base ridge level must be non-negative");

    KrrModel model;
    model.n = n;
    model.d = train.d;
    model.x = train.x;
    model.kernel = kernel;
    model.rho.resize(n);
    std::vector<double> phi(n);
    for (std::size_t i = 0; i < n; ++i) {
        NuisanceRow row{est.mu0_hat[i], est.mu1_hat[i], est.pi_hat[i]};
        int a = static_cast<int>(train.a[i]);
        model.rho[i] = weight_rho(learner, a, row.pi);
        phi[i] = pseudo_outcome(learner, a, train.y[i], row);
        if (!(model.rho[i] > 0.0))
            throw std::invalid_argument(
                "fit_krr_oar: a zero row weight makes the ridge system singular");
    }
    model.intercept = intercept_c_star(model.rho, phi);
    model.phi_centered.resize(n);
    for (std::size_t i = 0; i < n; ++i) model.phi_centered[i] = phi[i] - model.intercept;

    if (reg.mode == RegMode::CR) {
        model.level.assign(n, reg.base);
    } else {
        std::vector<double> raw(n);
        for (std::size_t i = 0; i < n; ++i) raw[i] = lambda_fn(reg.kind, est.nu_hat[i]);
        bool degenerate = false;
        model.level = rescale_lambda(raw, est.trim, reg.base, reg.gamma, &degenerate);
        model.degenerate_schedule = degenerate;
    }

    model.dual = krr_dual(model.x, n, model.d, model.rho, model.level,
                          model.phi_centered, kernel, &model.jittered);
    return model;
}

std::vector<double> predict_krr(const KrrModel& model, const std::vector<double>& xq,
                                std::size_t m) {
    if (xq.size() != m * model.d)
        throw std::invalid_argument("predict_krr: query size mismatch");
    std::vector<double> cross = kernel_cross(xq, m, model.x, model.n, model.d, model.kernel);
    std::vector<double> out(m, model.intercept);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < model.n; ++j) acc += cross[i * model.n + j] * model.dual[j];
        out[i] += acc;
    }
    return out;
}

double krr_objective(const KrrModel& model, const std::vector<double>& alpha) {
    std::size_t n = model.n;
    if (alpha.size() != n) throw std::invalid_argument("krr_objective: dual size mismatch");
    std::vector<double> k = kernel_matrix(model.x, n, model.d, model.kernel);
    double quad = 0.0;
    double lin = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += k[i * n + j] * alpha[j];
        row += static_cast<double>(n) * model.level[i] / model.rho[i] * alpha[i];
        quad += alpha[i] * row;
        lin += alpha[i] * model.phi_centered[i];
    }
    return 0.5 * quad - lin;
}

namespace {

/** K_qX (diag(w) K + n I)^{-1} diag(w) t, solved without symmetrizing. */
VectorXd smoother_weighted(const MatrixXd& k, const MatrixXd& cross,
                           const std::vector<double>& w, const std::vector<double>& t) {
    std::size_t n = static_cast<std::size_t>(k.rows());
    double dn = static_cast<double>(n);
    MatrixXd lhs = k;
    VectorXd rhs(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        lhs.row(static_cast<Eigen::Index>(i)) *= w[i];
        lhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += dn;
        rhs(static_cast<Eigen::Index>(i)) = w[i] * t[i];
    }
    return cross * lhs.partialPivLu().solve(rhs);
}

/** K_qX (K + n diag(level))^{-1} t via the symmetric factorization. */
VectorXd smoother_levels(const MatrixXd& k, const MatrixXd& cross,
                         const std::vector<double>& level, const std::vector<double>& t) {
    std::size_t n = static_cast<std::size_t>(k.rows());
    double dn = static_cast<double>(n);
    MatrixXd lhs = k;
    for (std::size_t i = 0; i < n; ++i)
        lhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += dn * level[i];
    bool jittered = false;
    return cross * solve_spd(lhs, to_vector(t), &jittered);
}

} // namespace

double pushthrough_deviation(const std::vector<double>& x, std::size_t n, std::size_t d,
                             const std::vector<double>& w, const std::vector<double>& t,
                             const KernelConfig& kernel,
                             const std::vector<double>& xq, std::size_t m) {
    if (x.size() != n * d || w.size() != n || t.size() != n || xq.size() != m * d)
        throw std::invalid_argument("pushthrough_deviation: input size mismatch");
    for (double wi : w)
        if (!(wi > 0.0))
            throw std::invalid_argument("pushthrough_deviation: weights must be positive");

    MatrixXd k = to_matrix(kernel_matrix(x, n, d, kernel), n, n);
    MatrixXd cross = to_matrix(kernel_cross(xq, m, x, n, d, kernel), m, n);
    std::vector<double> inv_w(n);
    for (std::size_t i = 0; i < n; ++i) inv_w[i] = 1.0 / w[i];
    VectorXd pred_w = smoother_weighted(k, cross, w, t);
    VectorXd pred_l = smoother_levels(k, cross, inv_w, t);
    return (pred_w - pred_l).cwiseAbs().maxCoeff();
}

double pushthrough_check(const Dataset& data, const NuisanceEstimates& oracle,
                         const KernelConfig& kernel, std::size_t n_query) {
    std::vector<double> w = oracle_overlap_weights(oracle);
    std::vector<double> t(data.n);
    for (std::size_t i = 0; i < data.n; ++i) t[i] = oracle.mu1_hat[i] - oracle.mu0_hat[i];
    std::vector<double> xq = query_grid(data, n_query);
    return pushthrough_deviation(data.x, data.n, data.d, w, t, kernel, xq, n_query);
}

double pushthrough_break(const Dataset& data, const NuisanceEstimates& oracle,
                         Learner learner, const KernelConfig& kernel,
                         std::size_t n_query) {
    std::size_t n = data.n;
    std::vector<double> rho(n), phi(n), phi_dr(n), inv_nu(n);
    for (std::size_t i = 0; i < n; ++i) {
        double pi = oracle.pi_raw[i];
        if (!(pi > 0.0) || !(pi < 1.0))
            throw std::invalid_argument("push-through break needs propensities in (0, 1)");
        NuisanceRow row{oracle.mu0_hat[i], oracle.mu1_hat[i], pi};
        int a = static_cast<int>(data.a[i]);
        rho[i] = weight_rho(learner, a, pi);
        phi[i] = pseudo_outcome(learner, a, data.y[i], row);
        phi_dr[i] = pseudo_outcome(Learner::DR, a, data.y[i], row);
        inv_nu[i] = 1.0 / (pi * (1.0 - pi));
        if (!(rho[i] > 0.0))
            throw std::invalid_argument("push-through break needs positive row weights");
    }
    std::vector<double> xq = query_grid(data, n_query);
    MatrixXd k = to_matrix(kernel_matrix(data.x, n, data.d, kernel), n, n);
    MatrixXd cross = to_matrix(kernel_cross(xq, n_query, data.x, n, data.d, kernel),
                               n_query, n);
    VectorXd lhs = smoother_weighted(k, cross, rho, phi);
    VectorXd rhs = smoother_levels(k, cross, inv_nu, phi_dr);
    return (lhs - rhs).cwiseAbs().maxCoeff();
}

void save_krr(const KrrModel& model, const std::string& path_stem) {
    std::ofstream csv(path_stem + ".csv");
    if (!csv) throw std::runtime_error("save_krr: cannot open " + path_stem + ".csv");
    csv << "x0";
    for (std::size_t j = 1; j < model.d; ++j) csv << ",x" << j;
    csv << ",dual,rho,level,phi_centered\n";
    char buf[512];
    for (std::size_t i = 0; i < model.n; ++i) {
        std::string line;
        for (std::size_t j = 0; j < model.d; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g,", model.x[i * model.d + j]);
            line += buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", model.dual[i],
                      model.rho[i], model.level[i], model.phi_centered[i]);
        line += buf;
        csv << line;
    }
    csv.close();

    nlohmann::json manifest;
    manifest["n"] = model.n;
    manifest["d"] = model.d;
    manifest["intercept"] = model.intercept;
    manifest["kernel"] = {{"kind", "rbf"}, {"bandwidth", model.kernel.bandwidth}};
    manifest["jittered"] = model.jittered;
    manifest["degenerate_schedule"] = model.degenerate_schedule;
    std::ofstream js(path_stem + ".json");
    if (!js) throw std::runtime_error("save_krr: cannot open " + path_stem + ".json");
    js << manifest.dump(2) << "\n";
}

KrrModel load_krr(const std::string& path_stem) {
    std::ifstream js(path_stem + ".json");
    if (!js) throw std::runtime_error("load_krr: cannot open " + path_stem + ".json");
    nlohmann::json manifest = nlohmann::json::parse(js);

    KrrModel model;
    model.n = manifest.at("n").get<std::size_t>();
    model.d = manifest.at("d").get<std::size_t>();
    model.intercept = manifest.at("intercept").get<double>();
    std::string kind = manifest.at("kernel").at("kind").get<std::string>();
    if (kind != "rbf") throw std::runtime_error("load_krr: unknown kernel kind " + kind);
    model.kernel.kind = KernelConfig::Kind::RBF;
    model.kernel.bandwidth = manifest.at("kernel").at("bandwidth").get<double>();
    model.jittered = manifest.at("jittered").get<bool>();
    model.degenerate_schedule = manifest.at("degenerate_schedule").get<bool>();

    std::ifstream csv(path_stem + ".csv");
    if (!csv) throw std::runtime_error("load_krr: cannot open " + path_stem + ".csv");
    std::string line;
    if (!std::getline(csv, line)) throw std::runtime_error("load_krr: empty csv");
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
        if (cells.size() != model.d + 4)
            throw std::runtime_error("load_krr: malformed csv row");
        for (std::size_t j = 0; j < model.d; ++j) model.x.push_back(cells[j]);
        model.dual.push_back(cells[model.d]);
        model.rho.push_back(cells[model.d + 1]);
        model.level.push_back(cells[model.d + 2]);
        model.phi_centered.push_back(cells[model.d + 3]);
    }
    if (model.dual.size() != model.n)
        throw std::runtime_error("load_krr: row count does not match the manifest");
    return model;
}

} // namespace oar
