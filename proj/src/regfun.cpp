#include "oar/regfun.hpp"

#include <cmath>
#include <stdexcept>

namespace oar {

namespace {

void check_nu(double nu) {
    if (!(nu > 0.0) || nu > 0.25) {
        throw std::domain_error("nu must lie in (0, 1/4], got " + std::to_string(nu));
    }
}

void check_pi(double pi) {
    if (!(pi > 0.0) || !(pi < 1.0)) {
        throw std::domain_error("pi must lie strictly inside (0, 1), got " + std::to_string(pi));
    }
}

} // namespace

double lambda_fn(RegKind kind, double nu) {
    check_nu(nu);
    switch (kind) {
        case RegKind::Multiplicative:        return 1.0 / (4.0 * nu) - 1.0;
        case RegKind::Logarithmic:           return -std::log(4.0 * nu);
        case RegKind::SquaredMultiplicative: return 1.0 / (16.0 * nu * nu) - 1.0;
    }
    throw std::logic_error("unreachable");
}

double dropout_p(RegKind kind, double nu) {
    check_nu(nu);
    switch (kind) {
        case RegKind::Multiplicative:        return 1.0 - 4.0 * nu;
        case RegKind::Logarithmic:           return 1.0 - 1.0 / (1.0 - std::log(4.0 * nu));
        case RegKind::SquaredMultiplicative: return 1.0 - 16.0 * nu * nu;
    }
    throw std::logic_error("unreachable");
}

double trimmed_mean(const std::vector<double>& raw, const std::vector<std::uint8_t>& trim) {
    if (raw.size() != trim.size()) {
        throw std::invalid_argument("raw and trim vectors must have equal length");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (trim[i]) {
            sum += raw[i];
            ++count;
        }
    }
    if (count == 0) {
        throw std::invalid_argument("all rows are trimmed out; cannot form the rescaling mean");
    }
    return sum / static_cast<double>(count);
}

std::vector<double> rescale_lambda(const std::vector<double>& raw,
                                   const std::vector<std::uint8_t>& trim,
                                   double base_lambda, double gamma,
                                   bool* degenerate) {
    double m_hat = trimmed_mean(raw, trim);
    if (degenerate) *degenerate = false;
    if (gamma == 0.0 || m_hat == 0.0) {
        if (degenerate && m_hat == 0.0) *degenerate = true;
        return std::vector<double>(raw.size(), base_lambda);
    }
    std::vector<double> out(raw.size());
    double slope = gamma * base_lambda / m_hat;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out[i] = trim[i] ? base_lambda + slope * (raw[i] - m_hat) : base_lambda;
    }
    return out;
}

std::vector<double> rescale_p(const std::vector<double>& raw_p,
                              const std::vector<std::uint8_t>& trim,
                              double base_p, double gamma,
                              bool* degenerate) {
    double m_hat = trimmed_mean(raw_p, trim);
    if (degenerate) *degenerate = false;
    if (m_hat == 0.0 || m_hat == 1.0) {
        if (degenerate) *degenerate = true;
        return std::vector<double>(raw_p.size(), base_p);
    }
    if (gamma == 0.0) {
        return std::vector<double>(raw_p.size(), base_p);
    }
    double s = std::min(base_p / m_hat, (1.0 - base_p) / (1.0 - m_hat));
    std::vector<double> out(raw_p.size());
    for (std::size_t i = 0; i < raw_p.size(); ++i) {
        out[i] = trim[i] ? base_p + gamma * s * (raw_p[i] - m_hat) : base_p;
    }
    return out;
}

double score_kernel_lambda(RegKind kind, int a, double pi) {
    check_pi(pi);
    double nu = pi * (1.0 - pi);
    double core = (a - pi) * (2.0 * pi - 1.0);
    switch (kind) {
        case RegKind::Multiplicative:        return core / (4.0 * nu * nu);
        case RegKind::Logarithmic:           return core / nu;
        case RegKind::SquaredMultiplicative: return core / (8.0 * nu * nu * nu);
    }
    throw std::logic_error("unreachable");
}

double score_kernel_p(RegKind kind, int a, double pi) {
    check_pi(pi);
    double nu = pi * (1.0 - pi);
    double core = (a - pi) * (2.0 * pi - 1.0);
    switch (kind) {
        case RegKind::Multiplicative:
            return 4.0 * core;
        case RegKind::Logarithmic: {
            double denom = 1.0 - std::log(4.0 * nu);
            return core / (nu * denom * denom);
        }
        case RegKind::SquaredMultiplicative:
            return 32.0 * nu * core;
    }
    throw std::logic_error("unreachable");
}

double rescaled_score_lambda(RegKind kind, int a, double pi,
                             double m_hat, double base_lambda, double gamma) {
    if (!(m_hat > 0.0)) {
        throw std::invalid_argument("m_hat must be positive for rescaled scores");
    }
    if (gamma == 0.0) return 0.0;
    double k = score_kernel_lambda(kind, a, pi);
    double lv = lambda_fn(kind, pi * (1.0 - pi));
    double if_mean = k + lv - m_hat;
    return gamma * base_lambda * (k / m_hat - lv * if_mean / (m_hat * m_hat));
}

double rescaled_score_p(RegKind kind, int a, double pi,
                        double m_hat, double base_p, double gamma) {
    if (!(m_hat > 0.0) || !(m_hat < 1.0)) {
        throw std::invalid_argument("m_hat must lie strictly inside (0, 1) for rescaled dropout scores");
    }
    if (gamma == 0.0) return 0.0;
    double k = score_kernel_p(kind, a, pi);
    double pv = dropout_p(kind, pi * (1.0 - pi));
    double if_mean = k + pv - m_hat;
    bool branch1 = base_p / m_hat <= (1.0 - base_p) / (1.0 - m_hat);
    if (branch1) {
        return gamma * base_p * (k / m_hat - pv * if_mean / (m_hat * m_hat));
    }
    double q = 1.0 - m_hat;
    return gamma * (1.0 - base_p) * (k / q - (1.0 - pv) * if_mean / (q * q));
}

std::string to_string(RegKind kind) {
    switch (kind) {
        case RegKind::Multiplicative:        return "multiplicative";
        case RegKind::Logarithmic:           return "logarithmic";
        case RegKind::SquaredMultiplicative: return "squared";
    }
    throw std::logic_error("unreachable");
}

RegKind reg_kind_from_string(const std::string& name) {
    if (name == "multiplicative") return RegKind::Multiplicative;
    if (name == "logarithmic") return RegKind::Logarithmic;
    if (name == "squared") return RegKind::SquaredMultiplicative;
    throw std::invalid_argument("unknown regularization kind: " + name);
}

std::string to_string(RegMode mode) {
    switch (mode) {
        case RegMode::CR:   return "cr";
        case RegMode::OAR:  return "oar";
        case RegMode::dOAR: return "doar";
    }
    throw std::logic_error("unreachable");
}

RegMode reg_mode_from_string(const std::string& name) {
    if (name == "cr") return RegMode::CR;
    if (name == "oar") return RegMode::OAR;
    if (name == "doar") return RegMode::dOAR;
    throw std::invalid_argument("unknown regularization mode: " + name);
}

} // namespace oar
