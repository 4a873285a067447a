#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace oar {

/**
 * Immutable observational sample: covariate matrix, binary treatment,
 * outcome, and (when known) the generating truth for evaluation.
 */
struct Dataset {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> x;            // row-major, n * d
    std::vector<std::uint8_t> a;      // strictly {0, 1}
    std::vector<double> y;
    std::vector<double> oracle_cate;  // empty when unknown
    std::vector<double> oracle_pi;    // empty when unknown
    std::uint64_t seed = 0;

    double x_at(std::size_t i, std::size_t j) const { return x[i * d + j]; }
    bool has_oracle_cate() const { return !oracle_cate.empty(); }
    bool has_oracle_pi() const { return !oracle_pi.empty(); }
};

/** Low-overlap synthetic benchmark configuration; b shifts the treated arm. */
struct SyntheticConfig {
    std::size_t n = 250;
    double b = 2.0;
    std::uint64_t seed = 0;
};

/** Parse error carrying the offending 1-based data row (0 = header/file level). */
struct CsvError : std::runtime_error {
    CsvError(const std::string& msg, std::size_t row_index)
        : std::runtime_error(msg), row(row_index) {}
    std::size_t row;
};

/** Column names to read; empty oracle names mean the column is absent. */
struct CsvSchema {
    std::vector<std::string> x;
    std::string a = "a";
    std::string y = "y";
    std::string oracle_cate;
    std::string oracle_pi;
};

/** True propensity of the synthetic generator at covariate value x. */
double synthetic_pi(double x, double b);

/** Conditional outcome mean of the synthetic generator (same for both arms). */
double synthetic_outcome_mean(double x);

/**
 * One-dimensional two-component Gaussian mixture with a logistic propensity
 * whose overlap shrinks as |b| grows; the true effect is identically zero.
 * Bit-reproducible for a fixed (n, b, seed).
 */
Dataset generate_synthetic(const SyntheticConfig& cfg);

/**
 * Write header + rows with 17 significant digits, plus a <path>.meta.json
 * sidecar recording seed and shape (and, when given, a JSON config object).
 */
void save_csv(const Dataset& ds, const std::string& path,
              const std::string& config_json = "");

/** Read the schema's columns; malformed cells raise CsvError with the row. */
Dataset load_csv(const std::string& path, const CsvSchema& schema);

/** Rows of ds at the given indices, in the given order. */
Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx);

/**
 * Deterministic disjoint (train, test) split; the test side receives
 * round(n * test_fraction) rows chosen by a seeded shuffle.
 */
std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction,
                                  std::uint64_t seed);

} // namespace oar
