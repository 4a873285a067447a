#pragma once

#include "oar/dataset.hpp"
#include "oar/learners.hpp"
#include "oar/nuisance.hpp"
#include "oar/regfun.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace oar {

/** Kernel family and bandwidth for the closed-form ridge path. */
struct KernelConfig {
    enum class Kind { RBF } kind = Kind::RBF;
    double bandwidth = 0.1;
};

/**
 * Closed-form overlap-adaptive kernel ridge fit. The dual coefficients
 * solve (K + n diag(level_i / rho_i)) alpha = phi - c_hat, which is the
 * weighted system (R K + n Lambda) alpha = R (phi - c_hat) with every row
 * weight divided out, so it requires rho_i > 0 for all rows.
 */
struct KrrModel {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> x;             // training inputs, row-major n * d
    std::vector<double> dual;          // alpha, length n
    double intercept = 0.0;            // c_hat = sum(rho phi) / sum(rho)
    KernelConfig kernel;
    std::vector<double> phi_centered;  // phi - c_hat, length n
    std::vector<double> rho;           // row weights, length n
    std::vector<double> level;         // per-row ridge levels lambda~, length n
    bool jittered = false;             // solve needed the 1e-10 diagonal bump
    bool degenerate_schedule = false;  // level rescaling fell back to the base
};

/** Gaussian kernel exp(-||x - xp||^2 / (2 h^2)) on d-vectors. */
double rbf_kernel(const double* x, const double* xp, std::size_t d, double h);

/** Dense n x n kernel Gram matrix of the training inputs, row-major. */
std::vector<double> kernel_matrix(const std::vector<double>& x, std::size_t n,
                                  std::size_t d, const KernelConfig& kernel);

/** Dense m x n cross-kernel matrix between query and training inputs. */
std::vector<double> kernel_cross(const std::vector<double>& xq, std::size_t m,
                                 const std::vector<double>& x, std::size_t n,
                                 std::size_t d, const KernelConfig& kernel);

/**
 * Solve (K + n diag(level_i / rho_i)) alpha = phi_centered by LDLT,
 * retrying once with a 1e-10 diagonal jitter if the factorization fails.
 * Throws std::invalid_argument on non-positive rho or negative level and
 * std::runtime_error if the jittered solve still fails.
 */
std::vector<double> krr_dual(const std::vector<double>& x, std::size_t n, std::size_t d,
                             const std::vector<double>& rho,
                             const std::vector<double>& level,
                             const std::vector<double>& phi_centered,
                             const KernelConfig& kernel, bool* jittered = nullptr);

/**
 * Fit the kernel ridge stage on estimated nuisances: per-row levels come
 * from lambda_fn + rescale_lambda under the schedule (CR mode pins the
 * constant base), the intercept is the rho-weighted mean of the
 * pseudo-outcomes, and the dual solves the system above on the centered
 * pseudo-outcomes.
 */
KrrModel fit_krr_oar(const Dataset& train, const NuisanceEstimates& est,
                     Learner learner, const RegSchedule& reg,
                     const KernelConfig& kernel);

/** Predict at m query points (row-major m * d): K_qX alpha + intercept. */
std::vector<double> predict_krr(const KrrModel& model, const std::vector<double>& xq,
                                std::size_t m);

/**
 * Dual-form objective whose unique stationary point is the fitted dual:
 * J(alpha) = 1/2 alpha' (K + n diag(level/rho)) alpha - alpha' phi_centered.
 * Used by the optimality diagnostics.
 */
double krr_objective(const KrrModel& model, const std::vector<double>& alpha);

/**
 * Max absolute deviation between the weighted ridge smoother
 * K_qX (W K + n I)^{-1} W t and the unweighted inverse-level form
 * K_qX (K + n diag(1/w_i))^{-1} t over the query points. Zero (up to
 * conditioning) for any t because the two systems are a push-through
 * of the same resolvent.
 */
double pushthrough_deviation(const std::vector<double>& x, std::size_t n, std::size_t d,
                             const std::vector<double>& w, const std::vector<double>& t,
                             const KernelConfig& kernel,
                             const std::vector<double>& xq, std::size_t m);

/**
 * Push-through identity check on a dataset with oracle nuisances: weights
 * are the oracle overlap nu(x), the target is mu1 - mu0, and the query grid
 * is n_query points spanning the covariate range (univariate inputs only).
 * Returns the max absolute deviation between the two smoother forms.
 */
double pushthrough_check(const Dataset& data, const NuisanceEstimates& oracle,
                         const KernelConfig& kernel, std::size_t n_query);

/**
 * Plug-in counterpart of pushthrough_check: the weighted side uses the
 * retargeted learner's row weights rho and pseudo-outcomes, the level side
 * uses inverse-overlap levels 1/nu on the doubly-robust pseudo-outcomes.
 * Because rho(a, pi) differs from nu(pi) row by row, the two smoothers are
 * no longer a push-through of the same system and the returned deviation is
 * materially non-zero; it quantifies the gap.
 */
double pushthrough_break(const Dataset& data, const NuisanceEstimates& oracle,
                         Learner learner, const KernelConfig& kernel,
                         std::size_t n_query);

/**
 * Serialize the fitted model: <path>.csv holds one row per training point
 * (inputs, dual, rho, level, centered pseudo-outcome) and <path>.json holds
 * the intercept, kernel, and shape metadata.
 */
void save_krr(const KrrModel& model, const std::string& path_stem);

/** Load a model saved by save_krr from the same path stem. */
KrrModel load_krr(const std::string& path_stem);

} // namespace oar
