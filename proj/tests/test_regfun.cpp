#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <oar/regfun.hpp>
#include <oar/rng.hpp>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

using oar::RegKind;
using oar::dropout_p;
using oar::lambda_fn;
using oar::rescale_lambda;
using oar::rescale_p;
using oar::rescaled_score_lambda;
using oar::rescaled_score_p;
using oar::score_kernel_lambda;
using oar::score_kernel_p;
using oar::trimmed_mean;

namespace {

const RegKind kKinds[] = {RegKind::Multiplicative, RegKind::Logarithmic,
                          RegKind::SquaredMultiplicative};

/** Central difference of f along t with step h. */
template <typename F>
double central_diff(F f, double h) {
    return (f(h) - f(-h)) / (2.0 * h);
}

/**
 * Finite discrete covariate distribution: atom weights q (summing to one)
 * and per-atom treatment probabilities e. Used as an exactly computable
 * stand-in for expectations over the covariate law.
 */
struct DiscreteInstance {
    std::vector<double> q;
    std::vector<double> e;
};

DiscreteInstance random_instance(oar::Philox& rng, std::size_t n_atoms) {
    DiscreteInstance d;
    d.q.resize(n_atoms);
    d.e.resize(n_atoms);
    double total = 0.0;
    for (std::size_t j = 0; j < n_atoms; ++j) {
        d.q[j] = 0.05 + rng.uniform();
        total += d.q[j];
        d.e[j] = 0.05 + 0.9 * rng.uniform();
    }
    for (auto& w : d.q) w /= total;
    return d;
}

/**
 * Atom probabilities and treatment rates after mixing weight t toward a
 * point mass at (atom jstar, treatment a): the one-dimensional submodel whose
 * derivative at t = 0 defines the influence function of a functional.
 */
void perturb(const DiscreteInstance& d, std::size_t jstar, int a, double t,
             std::vector<double>& q_t, std::vector<double>& e_t) {
    std::size_t m = d.q.size();
    q_t.resize(m);
    e_t.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        q_t[j] = (1.0 - t) * d.q[j] + (j == jstar ? t : 0.0);
        e_t[j] = d.e[j];
    }
    e_t[jstar] = ((1.0 - t) * d.q[jstar] * d.e[jstar] + t * a) / q_t[jstar];
}

double mean_level_t(const DiscreteInstance& d, RegKind kind, bool use_p,
                    std::size_t jstar, int a, double t) {
    std::vector<double> q_t, e_t;
    perturb(d, jstar, a, t, q_t, e_t);
    double m_hat = 0.0;
    for (std::size_t j = 0; j < d.q.size(); ++j) {
        double nu = e_t[j] * (1.0 - e_t[j]);
        m_hat += q_t[j] * (use_p ? dropout_p(kind, nu) : lambda_fn(kind, nu));
    }
    return m_hat;
}

double rescaled_level_t(const DiscreteInstance& d, RegKind kind, bool use_p,
                        std::size_t jstar, int a, double base, double gamma, double t) {
    std::vector<double> q_t, e_t;
    perturb(d, jstar, a, t, q_t, e_t);
    std::size_t m = d.q.size();
    std::vector<double> level(m);
    double m_hat = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        double nu = e_t[j] * (1.0 - e_t[j]);
        level[j] = use_p ? dropout_p(kind, nu) : lambda_fn(kind, nu);
        m_hat += q_t[j] * level[j];
    }
    double slope = use_p ? std::min(base / m_hat, (1.0 - base) / (1.0 - m_hat))
                         : base / m_hat;
    return base + gamma * slope * (level[jstar] - m_hat);
}

} // namespace

TEST_CASE("regularization levels at reference points") {
    CHECK(lambda_fn(RegKind::Multiplicative, 0.25) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lambda_fn(RegKind::Logarithmic, 0.25) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lambda_fn(RegKind::SquaredMultiplicative, 0.25) == doctest::Approx(0.0).epsilon(1e-15));

    CHECK(lambda_fn(RegKind::Multiplicative, 0.16) == doctest::Approx(0.5625).epsilon(1e-14));
    CHECK(lambda_fn(RegKind::Logarithmic, 0.16) ==
          doctest::Approx(0.4462871026284195).epsilon(1e-14));
    CHECK(lambda_fn(RegKind::SquaredMultiplicative, 0.16) ==
          doctest::Approx(1.44140625).epsilon(1e-14));

    CHECK(dropout_p(RegKind::Multiplicative, 0.16) == doctest::Approx(0.36).epsilon(1e-14));
    CHECK(dropout_p(RegKind::SquaredMultiplicative, 0.16) ==
          doctest::Approx(0.5904).epsilon(1e-14));
    CHECK(dropout_p(RegKind::Multiplicative, 0.25) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("dropout probability equals lambda / (lambda + 1)") {
    oar::Philox rng(101);
    for (int i = 0; i < 1000; ++i) {
        double nu = 0.002 + 0.248 * rng.uniform();
        for (RegKind kind : kKinds) {
            double lv = lambda_fn(kind, nu);
            double pv = dropout_p(kind, nu);
            CHECK(std::abs(pv - lv / (lv + 1.0)) <= 1e-12 * std::max(1.0, std::abs(pv)));
        }
    }
}

TEST_CASE("levels are decreasing in overlap and vanish at maximal overlap") {
    for (RegKind kind : kKinds) {
        double prev_l = lambda_fn(kind, 0.01);
        double prev_p = dropout_p(kind, 0.01);
        for (double nu = 0.02; nu <= 0.2501; nu += 0.01) {
            double nu_c = std::min(nu, 0.25);
            double lv = lambda_fn(kind, nu_c);
            double pv = dropout_p(kind, nu_c);
            CHECK(lv < prev_l);
            CHECK(pv < prev_p);
            CHECK(lv >= 0.0);
            CHECK(pv >= 0.0);
            CHECK(pv < 1.0);
            prev_l = lv;
            prev_p = pv;
        }
    }
}

TEST_CASE("domain errors on invalid overlap or propensity") {
    CHECK_THROWS_AS(lambda_fn(RegKind::Multiplicative, 0.0), std::domain_error);
    CHECK_THROWS_AS(lambda_fn(RegKind::Logarithmic, -0.1), std::domain_error);
    CHECK_THROWS_AS(lambda_fn(RegKind::SquaredMultiplicative, 0.26), std::domain_error);
    CHECK_THROWS_AS(dropout_p(RegKind::Multiplicative, 0.3), std::domain_error);
    CHECK_THROWS_AS(score_kernel_lambda(RegKind::Multiplicative, 1, 0.0), std::domain_error);
    CHECK_THROWS_AS(score_kernel_p(RegKind::Logarithmic, 0, 1.0), std::domain_error);
}

TEST_CASE("trimmed mean basics and failure modes") {
    CHECK(trimmed_mean({1.0, 2.0, 30.0}, {1, 1, 0}) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(trimmed_mean({5.0}, {1}) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK_THROWS_AS(trimmed_mean({1.0, 2.0}, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(trimmed_mean({1.0, 2.0}, {1}), std::invalid_argument);
}

TEST_CASE("lambda rescaling reference example") {
    auto out = rescale_lambda({0.0, 2.0}, {1, 1}, 1.0, 1.0);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("dropout rescaling reference example") {
    auto out = rescale_p({0.2, 0.6}, {1, 1}, 0.3, 1.0);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == doctest::Approx(0.15).epsilon(1e-14));
    CHECK(out[1] == doctest::Approx(0.45).epsilon(1e-14));
}

TEST_CASE("rescaling preserves the trimmed-in mean at the base level") {
    oar::Philox rng(202);
    for (int rep = 0; rep < 200; ++rep) {
        std::size_t n = 2 + rng.uniform_index(40);
        std::vector<double> raw(n), raw_p(n);
        std::vector<std::uint8_t> trim(n);
        bool any_in = false;
        for (std::size_t i = 0; i < n; ++i) {
            raw[i] = 3.0 * rng.uniform();
            raw_p[i] = 0.98 * rng.uniform();
            trim[i] = rng.bernoulli(0.8) ? 1 : 0;
            any_in = any_in || trim[i];
        }
        if (!any_in) trim[0] = 1;
        double gamma = rng.uniform();
        double base_l = 0.1 + 2.0 * rng.uniform();
        double base_p = 0.05 + 0.9 * rng.uniform();

        auto out_l = rescale_lambda(raw, trim, base_l, gamma);
        auto out_p = rescale_p(raw_p, trim, base_p, gamma);
        CHECK(std::abs(trimmed_mean(out_l, trim) - base_l) <= 1e-12 * std::max(1.0, base_l));
        CHECK(std::abs(trimmed_mean(out_p, trim) - base_p) <= 1e-12);

        for (std::size_t i = 0; i < n; ++i) {
            if (!trim[i]) {
                CHECK(out_l[i] == base_l);
                CHECK(out_p[i] == base_p);
            }
            CHECK(out_l[i] >= -1e-15);           // gamma in [0,1] keeps levels non-negative
            CHECK(out_p[i] >= -1e-15);
            CHECK(out_p[i] <= 1.0 + 1e-15);      // min-slope keeps probabilities in [0,1]
        }
    }
}

TEST_CASE("zero adaptivity or a degenerate mean collapse to the constant base") {
    auto flat = rescale_lambda({0.3, 1.7, 0.9}, {1, 1, 1}, 1.25, 0.0);
    for (double v : flat) CHECK(v == 1.25);

    bool degenerate = false;
    auto zero_mean = rescale_lambda({0.0, 0.0}, {1, 1}, 0.7, 1.0, &degenerate);
    CHECK(degenerate);
    for (double v : zero_mean) CHECK(v == 0.7);

    degenerate = false;
    auto zero_mean_p = rescale_p({0.0, 0.0}, {1, 1}, 0.4, 1.0, &degenerate);
    CHECK(degenerate);
    for (double v : zero_mean_p) CHECK(v == 0.4);

    auto flat_p = rescale_p({0.2, 0.6}, {1, 1}, 0.3, 0.0);
    for (double v : flat_p) CHECK(v == 0.3);
}

TEST_CASE("score kernels at reference points") {
    CHECK(score_kernel_lambda(RegKind::Multiplicative, 1, 0.8) ==
          doctest::Approx(1.171875).epsilon(1e-13));
    CHECK(score_kernel_lambda(RegKind::Multiplicative, 0, 0.8) ==
          doctest::Approx(-4.6875).epsilon(1e-13));
    CHECK(score_kernel_lambda(RegKind::Logarithmic, 1, 0.8) ==
          doctest::Approx(0.75).epsilon(1e-13));
    CHECK(score_kernel_lambda(RegKind::SquaredMultiplicative, 1, 0.8) ==
          doctest::Approx(3.662109375).epsilon(1e-13));
    CHECK(score_kernel_p(RegKind::Multiplicative, 1, 0.8) ==
          doctest::Approx(0.48).epsilon(1e-13));
    CHECK(score_kernel_p(RegKind::SquaredMultiplicative, 1, 0.8) ==
          doctest::Approx(0.6144).epsilon(1e-13));
}

TEST_CASE("score kernels are conditionally mean-zero") {
    oar::Philox rng(303);
    for (int i = 0; i < 1000; ++i) {
        double pi = 0.05 + 0.9 * rng.uniform();
        for (RegKind kind : kKinds) {
            double m_l = (1.0 - pi) * score_kernel_lambda(kind, 0, pi) +
                         pi * score_kernel_lambda(kind, 1, pi);
            double m_p = (1.0 - pi) * score_kernel_p(kind, 0, pi) +
                         pi * score_kernel_p(kind, 1, pi);
            double scale_l = std::max(1.0, std::abs(score_kernel_lambda(kind, 1, pi)));
            double scale_p = std::max(1.0, std::abs(score_kernel_p(kind, 1, pi)));
            CHECK(std::abs(m_l) <= 1e-12 * scale_l);
            CHECK(std::abs(m_p) <= 1e-12 * scale_p);
        }
    }
}

TEST_CASE("score kernels match the pathwise derivative of the level") {
    oar::Philox rng(404);
    const double h = 1e-6;
    for (int i = 0; i < 200; ++i) {
        double pi = 0.05 + 0.9 * rng.uniform();
        int a = rng.bernoulli(0.5);
        for (RegKind kind : kKinds) {
            double fd_l = central_diff(
                [&](double t) {
                    double pit = pi + t * (a - pi);
                    return lambda_fn(kind, pit * (1.0 - pit));
                },
                h);
            double k_l = score_kernel_lambda(kind, a, pi);
            CHECK(std::abs(fd_l - k_l) <= 1e-6 * std::max(1.0, std::abs(k_l)));

            double fd_p = central_diff(
                [&](double t) {
                    double pit = pi + t * (a - pi);
                    return dropout_p(kind, pit * (1.0 - pit));
                },
                h);
            double k_p = score_kernel_p(kind, a, pi);
            CHECK(std::abs(fd_p - k_p) <= 1e-6 * std::max(1.0, std::abs(k_p)));
        }
    }
}

TEST_CASE("rescaled score reference value") {
    // Hand chain-rule evaluation at (multiplicative, a=1, pi=0.8, m_hat=1):
    // k = 1.171875, level = 0.5625, mean-score = k + level - 1 = 0.734375,
    // value = k - level * mean-score = 0.7587890625.
    CHECK(rescaled_score_lambda(RegKind::Multiplicative, 1, 0.8, 1.0, 1.0, 1.0) ==
          doctest::Approx(0.7587890625).epsilon(1e-13));
}

TEST_CASE("rescaled scores vanish identically at zero adaptivity") {
    oar::Philox rng(505);
    for (int i = 0; i < 100; ++i) {
        double pi = 0.05 + 0.9 * rng.uniform();
        int a = rng.bernoulli(0.5);
        double m_hat = 0.1 + rng.uniform();
        for (RegKind kind : kKinds) {
            CHECK(rescaled_score_lambda(kind, a, pi, m_hat, 1.0, 0.0) == 0.0);
            CHECK(rescaled_score_p(kind, a, pi, std::min(m_hat, 0.9), 0.5, 0.0) == 0.0);
        }
    }
}

TEST_CASE("rescaled scores require a usable mean level") {
    CHECK_THROWS_AS(rescaled_score_lambda(RegKind::Multiplicative, 1, 0.5, 0.0, 1.0, 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(rescaled_score_p(RegKind::Multiplicative, 1, 0.5, 0.0, 0.5, 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(rescaled_score_p(RegKind::Multiplicative, 1, 0.5, 1.0, 0.5, 1.0),
                    std::invalid_argument);
}

TEST_CASE("mean-level influence function matches the discrete-perturbation derivative") {
    oar::Philox rng(606);
    const double h = 1e-6;
    for (int rep = 0; rep < 30; ++rep) {
        auto d = random_instance(rng, 2 + rng.uniform_index(8));
        std::size_t jstar = rng.uniform_index(d.q.size());
        int a = rng.bernoulli(0.5);
        for (RegKind kind : kKinds) {
            for (bool use_p : {false, true}) {
                double m0 = mean_level_t(d, kind, use_p, jstar, a, 0.0);
                double fd = central_diff(
                    [&](double t) { return mean_level_t(d, kind, use_p, jstar, a, t); }, h);
                double pi = d.e[jstar];
                double nu = pi * (1.0 - pi);
                double k = use_p ? score_kernel_p(kind, a, pi)
                                 : score_kernel_lambda(kind, a, pi);
                double level = use_p ? dropout_p(kind, nu) : lambda_fn(kind, nu);
                double expect = k + level - m0;
                CHECK(std::abs(fd - expect) <= 1e-5 * std::max(1.0, std::abs(expect)));
            }
        }
    }
}

TEST_CASE("rescaled lambda score matches the discrete-perturbation derivative") {
    oar::Philox rng(707);
    const double h = 1e-6;
    for (int rep = 0; rep < 30; ++rep) {
        auto d = random_instance(rng, 2 + rng.uniform_index(8));
        std::size_t jstar = rng.uniform_index(d.q.size());
        int a = rng.bernoulli(0.5);
        double base = 0.2 + 1.5 * rng.uniform();
        double gamma = 0.1 + 0.9 * rng.uniform();
        for (RegKind kind : kKinds) {
            double m0 = mean_level_t(d, kind, false, jstar, a, 0.0);
            double fd = central_diff(
                [&](double t) {
                    return rescaled_level_t(d, kind, false, jstar, a, base, gamma, t);
                },
                h);
            double pi = d.e[jstar];
            double k = score_kernel_lambda(kind, a, pi);
            // The point-mass component of the derivative carries the inverse
            // atom weight; the smoothed kernel reports it without that factor.
            double local_delta = gamma * (base / m0) * k * (1.0 / d.q[jstar] - 1.0);
            double expect = rescaled_score_lambda(kind, a, pi, m0, base, gamma) + local_delta;
            CHECK(std::abs(fd - expect) <= 1e-5 * std::max(1.0, std::abs(expect)));
        }
    }
}

TEST_CASE("rescaled dropout score matches the discrete-perturbation derivative") {
    oar::Philox rng(808);
    const double h = 1e-6;
    for (int rep = 0; rep < 30; ++rep) {
        auto d = random_instance(rng, 2 + rng.uniform_index(8));
        std::size_t jstar = rng.uniform_index(d.q.size());
        int a = rng.bernoulli(0.5);
        double gamma = 0.1 + 0.9 * rng.uniform();
        for (RegKind kind : kKinds) {
            double m0 = mean_level_t(d, kind, true, jstar, a, 0.0);
            for (double base : {0.08, 0.85}) {  // exercise both slope branches
                bool branch1 = base / m0 <= (1.0 - base) / (1.0 - m0);
                double fd = central_diff(
                    [&](double t) {
                        return rescaled_level_t(d, kind, true, jstar, a, base, gamma, t);
                    },
                    h);
                double pi = d.e[jstar];
                double k = score_kernel_p(kind, a, pi);
                double local_coef = branch1 ? gamma * base / m0
                                            : gamma * (1.0 - base) / (1.0 - m0);
                double local_delta = local_coef * k * (1.0 / d.q[jstar] - 1.0);
                double expect = rescaled_score_p(kind, a, pi, m0, base, gamma) + local_delta;
                CHECK(std::abs(fd - expect) <= 1e-5 * std::max(1.0, std::abs(expect)));
            }
        }
    }
}

TEST_CASE("mean log level equals the marginal-balance and divergence decomposition") {
    // For the logarithmic level, the population mean decomposes exactly into
    // -log(4 p0 p1) plus the divergences of the covariate law from each
    // treatment arm's covariate law. Verified by exhaustive summation on
    // finite instances.
    oar::Philox rng(909);
    for (int rep = 0; rep < 50; ++rep) {
        auto d = random_instance(rng, 2 + rng.uniform_index(28));
        double p1 = 0.0;
        for (std::size_t j = 0; j < d.q.size(); ++j) p1 += d.q[j] * d.e[j];
        double p0 = 1.0 - p1;

        double lhs = 0.0;
        for (std::size_t j = 0; j < d.q.size(); ++j) {
            lhs += d.q[j] * lambda_fn(RegKind::Logarithmic, d.e[j] * (1.0 - d.e[j]));
        }

        double kl0 = 0.0, kl1 = 0.0;
        for (std::size_t j = 0; j < d.q.size(); ++j) {
            kl0 += d.q[j] * std::log(p0 / (1.0 - d.e[j]));
            kl1 += d.q[j] * std::log(p1 / d.e[j]);
        }
        double rhs = -std::log(4.0 * p0 * p1) + kl0 + kl1;
        CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}
