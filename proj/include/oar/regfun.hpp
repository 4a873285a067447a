#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace oar {

enum class RegKind { Multiplicative, Logarithmic, SquaredMultiplicative };
enum class RegMode { CR, OAR, dOAR };

/**
 * Regularization schedule for the second stage: the regularization-function
 * kind, the nominal base level (lambda for noise / RKHS, p for dropout),
 * the adaptivity coefficient gamma, and the training mode.
 */
struct RegSchedule {
    RegKind kind = RegKind::Multiplicative;
    double base = 1.0;
    double gamma = 1.0;
    RegMode mode = RegMode::OAR;
    double trim_lo = 0.05;
    double clip_alpha = 1.0;
};

/** Overlap-adaptive regularization level lambda(nu), nu in (0, 1/4]. */
double lambda_fn(RegKind kind, double nu);

/** Dropout probability p(nu) = lambda(nu) / (lambda(nu) + 1), in [0, 1). */
double dropout_p(RegKind kind, double nu);

/** Mean of raw over rows with trim == 1. Throws if no row is trimmed in. */
double trimmed_mean(const std::vector<double>& raw, const std::vector<std::uint8_t>& trim);

/**
 * Affine rescaling of per-row lambda values so the trimmed-in mean equals
 * base_lambda: out_i = base + gamma * trim_i * (base / m_hat) * (raw_i - m_hat).
 * Trimmed-out rows get exactly base_lambda. m_hat == 0 degrades to the
 * constant base level (degenerate != nullptr reports it).
 */
std::vector<double> rescale_lambda(const std::vector<double>& raw,
                                   const std::vector<std::uint8_t>& trim,
                                   double base_lambda, double gamma,
                                   bool* degenerate = nullptr);

/**
 * Rescaling for dropout probabilities with slope
 * s = min(base_p / m_hat, (1 - base_p) / (1 - m_hat)), keeping outputs in
 * [0, 1). m_hat in {0, 1} degrades to the constant base level with
 * *degenerate set. Branch 1 is taken on slope ties.
 */
std::vector<double> rescale_p(const std::vector<double>& raw_p,
                              const std::vector<std::uint8_t>& trim,
                              double base_p, double gamma,
                              bool* degenerate = nullptr);

/**
 * Delta-smoothed influence-function kernel of lambda(nu(x)) evaluated at the
 * sample's own covariate: the pathwise derivative of lambda(nu(pi_t)) along
 * pi_t = pi + t (a - pi) at t = 0.
 */
double score_kernel_lambda(RegKind kind, int a, double pi);

/** Same as score_kernel_lambda but for the dropout probability p(nu(x)). */
double score_kernel_p(RegKind kind, int a, double pi);

/**
 * Influence-function kernel of the rescaled level lambda~(nu(x)): with
 * k = score_kernel_lambda, lv = lambda_fn(nu) and if_mean = k + lv - m_hat,
 * returns gamma * base * (k / m_hat - lv * if_mean / m_hat^2).
 */
double rescaled_score_lambda(RegKind kind, int a, double pi,
                             double m_hat, double base_lambda, double gamma);

/**
 * Influence-function kernel of the rescaled dropout probability p~(nu(x)),
 * differentiating the same min-slope branch that rescale_p uses.
 */
double rescaled_score_p(RegKind kind, int a, double pi,
                        double m_hat, double base_p, double gamma);

/** Names used in config files and reports: multiplicative | logarithmic | squared. */
std::string to_string(RegKind kind);
RegKind reg_kind_from_string(const std::string& name);

/** Names used in config files and reports: cr | oar | doar. */
std::string to_string(RegMode mode);
RegMode reg_mode_from_string(const std::string& name);

} // namespace oar
