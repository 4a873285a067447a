#pragma once

#include "oar/dataset.hpp"
#include "oar/neuralnet.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace oar {

/**
 * Per-row first-stage estimates feeding the second stage. The trimming
 * indicator is decided on the raw propensity BEFORE clamping, so clamping
 * never changes which rows count as trimmed-in.
 */
struct NuisanceEstimates {
    std::vector<double> mu0_hat;
    std::vector<double> mu1_hat;
    std::vector<double> pi_raw;
    std::vector<double> pi_hat;   // clamped into [trim_lo, 1 - trim_lo]
    std::vector<double> nu_hat;   // pi_hat (1 - pi_hat)
    std::vector<double> mu_hat;   // (1 - pi_hat) mu0 + pi_hat mu1
    std::vector<std::uint8_t> trim;
    double trim_lo = 0.05;
    bool degenerate_overlap = false;  // propensity training saw a single arm
    bool uncovered_arm = false;       // an outcome head received no samples
};

/** Stage-1 training configuration shared by both nuisance fits. */
struct StageOneConfig {
    std::size_t prop_hidden = 0;   // 0 = twice the covariate dimension
    std::size_t repr_width = 2;    // shared representation width
    std::size_t head_hidden = 4;   // per-arm head hidden width
    std::size_t epochs = 200;
    std::size_t batch = 64;
    double lr = 0.005;
    double weight_decay = 0.01;
    // The two stage-1 models are configured independently, so the propensity
    // optimizer can differ from the outcome optimizer. Sentinel values
    // (0 / 0 / negative) inherit the shared settings above.
    std::size_t prop_batch = 0;        // 0 = inherit batch
    double prop_lr = 0.0;              // 0 = inherit lr
    double prop_weight_decay = -1.0;   // negative = inherit weight_decay
    std::uint64_t seed = 0;
    std::size_t cross_fit_folds = 0;  // 0 or 1 = same-sample fitting
};

/** Propensity model: logit-output MLP; predictions pass through a sigmoid. */
struct PropensityModel {
    MlpSpec spec;
    MlpParams params;
    InputScaler scaler;
    bool degenerate = false;
};

/**
 * Two-headed outcome model: a shared linear+ELU representation feeding one
 * head per arm. Both arms' networks carry identical first-layer weights.
 */
struct OutcomeModel {
    MlpSpec spec;        // full per-arm architecture {d, repr, head, 1}
    MlpParams arm0;
    MlpParams arm1;
    InputScaler scaler;
    bool uncovered_arm = false;
};

PropensityModel fit_propensity(const Dataset& train, const StageOneConfig& cfg);

OutcomeModel fit_outcomes(const Dataset& train, const StageOneConfig& cfg);

/** Raw propensities sigma(logit) for each row of ds. */
std::vector<double> predict_propensity(const PropensityModel& model, const Dataset& ds);

/** Per-arm conditional outcome means for each row of ds. */
void predict_outcomes(const OutcomeModel& model, const Dataset& ds,
                      std::vector<double>& mu0, std::vector<double>& mu1);

NuisanceEstimates predict_nuisance(const PropensityModel& prop, const OutcomeModel& outcome,
                                   const Dataset& ds, double trim_lo);

/**
 * Fit both nuisance models and score ds; with cross_fit_folds >= 2 each
 * fold is scored by models fit on its complement.
 */
NuisanceEstimates estimate_nuisances(const Dataset& ds, const StageOneConfig& cfg,
                                     double trim_lo);

/**
 * Ground-truth nuisances of the synthetic generator: recorded propensities
 * and the closed-form outcome mean (identical in both arms).
 */
NuisanceEstimates oracle_nuisance_synthetic(const Dataset& ds, double trim_lo);

/** Audit export: one row per observation with all estimate columns. */
void save_nuisance_csv(const NuisanceEstimates& est, const std::string& path);

} // namespace oar
