#pragma once

#include <string>
#include <vector>

namespace oar {

enum class Learner { DR, R, IVW };

/** Per-row nuisance estimates feeding the second stage. */
struct NuisanceRow {
    double mu0 = 0.0;  // outcome mean under control
    double mu1 = 0.0;  // outcome mean under treatment
    double pi = 0.5;   // propensity, trimmed into (0, 1)

    double mu() const { return (1.0 - pi) * mu0 + pi * mu1; }
    double nu() const { return pi * (1.0 - pi); }
};

/** Population weight w(pi) of the learner's weighted risk. */
double weight_w(Learner kind, double pi);

/** Observation weight rho(a, pi) = (a - pi) w'(pi) + w(pi). */
double weight_rho(Learner kind, int a, double pi);

/**
 * Pseudo-outcome whose rho-weighted conditional mean is the treatment effect.
 * DR and IVW share (a - pi)(y - mu_a)/nu + mu1 - mu0; R uses (y - mu)/(a - pi).
 */
double pseudo_outcome(Learner kind, int a, double y, const NuisanceRow& row);

/** Weighted mean of phi with weights rho: the fully over-regularized fit. */
double intercept_c_star(const std::vector<double>& rho, const std::vector<double>& phi);

/** Names used in config files and reports: dr | r | ivw. */
std::string to_string(Learner kind);
Learner learner_from_string(const std::string& name);

} // namespace oar
