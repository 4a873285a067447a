#include "oar/learners.hpp"

#include <cmath>
#include <stdexcept>

namespace oar {

namespace {

void check_pi(double pi) {
    if (!(pi > 0.0) || !(pi < 1.0)) {
        throw std::domain_error("pi must lie strictly inside (0, 1), got " + std::to_string(pi));
    }
}

} // namespace

double weight_w(Learner kind, double pi) {
    check_pi(pi);
    switch (kind) {
        case Learner::DR:  return 1.0;
        case Learner::R:
        case Learner::IVW: return pi * (1.0 - pi);
    }
    throw std::logic_error("unreachable");
}

double weight_rho(Learner kind, int a, double pi) {
    check_pi(pi);
    switch (kind) {
        case Learner::DR:  return 1.0;
        case Learner::R:
        case Learner::IVW: {
            double d = a - pi;
            return d * d;
        }
    }
    throw std::logic_error("unreachable");
}

double pseudo_outcome(Learner kind, int a, double y, const NuisanceRow& row) {
    check_pi(row.pi);
    switch (kind) {
        case Learner::DR:
        case Learner::IVW: {
            double mu_a = a ? row.mu1 : row.mu0;
            return (a - row.pi) * (y - mu_a) / row.nu() + row.mu1 - row.mu0;
        }
        case Learner::R: {
            double d = a - row.pi;
            if (std::abs(d) < 1e-12) {
                throw std::domain_error("propensity coincides with the treatment value; "
                                        "residualized pseudo-outcome is degenerate");
            }
            return (y - row.mu()) / d;
        }
    }
    throw std::logic_error("unreachable");
}

double intercept_c_star(const std::vector<double>& rho, const std::vector<double>& phi) {
    if (rho.size() != phi.size()) {
        throw std::invalid_argument("rho and phi vectors must have equal length");
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < rho.size(); ++i) {
        num += rho[i] * phi[i];
        den += rho[i];
    }
    if (!(den > 0.0)) {
        throw std::invalid_argument("total weight must be positive to form the intercept");
    }
    return num / den;
}

std::string to_string(Learner kind) {
    switch (kind) {
        case Learner::DR:  return "dr";
        case Learner::R:   return "r";
        case Learner::IVW: return "ivw";
    }
    throw std::logic_error("unreachable");
}

Learner learner_from_string(const std::string& name) {
    if (name == "dr") return Learner::DR;
    if (name == "r") return Learner::R;
    if (name == "ivw") return Learner::IVW;
    throw std::invalid_argument("unknown learner: " + name);
}

} // namespace oar
