#include "oar/nuisance.hpp"

#include "oar/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace oar {

namespace {

void shuffle_indices(std::vector<std::size_t>& idx, Philox& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(idx[i - 1], idx[j]);
    }
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

std::vector<std::size_t> epoch_order(std::size_t n, Philox& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle_indices(idx, rng);
    return idx;
}

void gather_rows(const std::vector<double>& xsrc, std::size_t d,
                 const std::vector<std::size_t>& idx,
                 std::size_t begin, std::size_t end, std::vector<double>& x) {
    x.resize((end - begin) * d);
    for (std::size_t r = begin; r < end; ++r)
        for (std::size_t j = 0; j < d; ++j)
            x[(r - begin) * d + j] = xsrc[idx[r] * d + j];
}

} // namespace

PropensityModel fit_propensity(const Dataset& train, const StageOneConfig& cfg) {
    if (train.n == 0) throw std::invalid_argument("fit_propensity: empty dataset");
    PropensityModel model;
    const std::size_t hidden = cfg.prop_hidden == 0 ? 2 * train.d : cfg.prop_hidden;
    model.spec.widths = {train.d, hidden, 1};
    model.spec.validate();

    bool any0 = false, any1 = false;
    for (std::uint8_t a : train.a) (a ? any1 : any0) = true;
    model.degenerate = !(any0 && any1);

    model.scaler.fit(train.x, train.n, train.d);
    std::vector<double> xstd = train.x;
    model.scaler.apply(xstd, train.n);

    const double lr = cfg.prop_lr > 0.0 ? cfg.prop_lr : cfg.lr;
    const double wd =
        cfg.prop_weight_decay >= 0.0 ? cfg.prop_weight_decay : cfg.weight_decay;
    Philox rng(cfg.seed, 101);
    model.params = init_params(model.spec, rng);
    OptimizerState opt = init_optimizer(model.spec, AdamWConfig{lr, 0.9, 0.999, 1e-8, wd});

    const std::size_t b =
        std::max<std::size_t>(1, cfg.prop_batch > 0 ? cfg.prop_batch : cfg.batch);
    std::vector<double> xb, logits, upstream;
    Grads grads;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(train.n, rng);
        for (std::size_t start = 0; start < train.n; start += b) {
            const std::size_t stop = std::min(train.n, start + b);
            const std::size_t bsz = stop - start;
            gather_rows(xstd, train.d, order, start, stop, xb);
            ForwardCache cache;
            logits = forward(model.spec, model.params, xb, bsz, PerturbKind::None,
                             nullptr, &cache);
            upstream.resize(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                const double a = static_cast<double>(train.a[order[start + i]]);
                upstream[i] = (sigmoid(logits[i]) - a) / static_cast<double>(bsz);
            }
            grads = zero_grads(model.spec);
            backward(model.spec, model.params, cache, upstream, &grads, nullptr, nullptr);
            adamw_step(model.params, grads, opt);
        }
    }
    return model;
}

OutcomeModel fit_outcomes(const Dataset& train, const StageOneConfig& cfg) {
    if (train.n == 0) throw std::invalid_argument("fit_outcomes: empty dataset");
    OutcomeModel model;
    model.spec.widths = {train.d, cfg.repr_width, cfg.head_hidden, 1};
    model.spec.validate();

    model.scaler.fit(train.x, train.n, train.d);
    std::vector<double> xstd = train.x;
    model.scaler.apply(xstd, train.n);

    Philox rng(cfg.seed, 102);
    model.arm0 = init_params(model.spec, rng);
    model.arm1 = init_params(model.spec, rng);
    // The first layer is a shared representation: tie it at initialization
    // and keep the copies identical after every optimizer step.
    model.arm1.w[0] = model.arm0.w[0];
    model.arm1.b[0] = model.arm0.b[0];

    std::size_t count0 = 0, count1 = 0;
    for (std::uint8_t a : train.a) (a ? count1 : count0) += 1;
    const bool has0 = count0 > 0, has1 = count1 > 0;
    model.uncovered_arm = !(has0 && has1);

    const AdamWConfig acfg{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    OptimizerState opt0 = init_optimizer(model.spec, acfg);
    OptimizerState opt1 = init_optimizer(model.spec, acfg);

    const std::size_t b = std::max<std::size_t>(1, cfg.batch);
    std::vector<double> x0, x1, y0, y1, out, upstream;
    Grads g0, g1;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(train.n, rng);
        for (std::size_t start = 0; start < train.n; start += b) {
            const std::size_t stop = std::min(train.n, start + b);
            const double bsz = static_cast<double>(stop - start);
            x0.clear(); x1.clear(); y0.clear(); y1.clear();
            for (std::size_t r = start; r < stop; ++r) {
                const std::size_t i = order[r];
                std::vector<double>& xs = train.a[i] ? x1 : x0;
                for (std::size_t j = 0; j < train.d; ++j) xs.push_back(xstd[i * train.d + j]);
                (train.a[i] ? y1 : y0).push_back(train.y[i]);
            }
            g0 = zero_grads(model.spec);
            g1 = zero_grads(model.spec);
            for (int arm = 0; arm < 2; ++arm) {
                const std::vector<double>& xs = arm ? x1 : x0;
                const std::vector<double>& ys = arm ? y1 : y0;
                if (ys.empty()) continue;
                MlpParams& params = arm ? model.arm1 : model.arm0;
                ForwardCache cache;
                out = forward(model.spec, params, xs, ys.size(), PerturbKind::None,
                              nullptr, &cache);
                upstream.resize(ys.size());
                for (std::size_t i = 0; i < ys.size(); ++i)
                    upstream[i] = 2.0 * (out[i] - ys[i]) / bsz;
                backward(model.spec, params, cache, upstream,
                         arm ? &g1 : &g0, nullptr, nullptr);
            }
            // Accumulate the shared layer's gradient into the covered arm and
            // re-tie the first-layer copies after stepping. An arm with no
            // samples anywhere in the dataset is never stepped, so its head
            // stays exactly at initialization.
            if (has0 && has1) {
                for (std::size_t k = 0; k < g0.w[0].size(); ++k) g0.w[0][k] += g1.w[0][k];
                for (std::size_t k = 0; k < g0.b[0].size(); ++k) g0.b[0][k] += g1.b[0][k];
                std::fill(g1.w[0].begin(), g1.w[0].end(), 0.0);
                std::fill(g1.b[0].begin(), g1.b[0].end(), 0.0);
                adamw_step(model.arm0, g0, opt0);
                adamw_step(model.arm1, g1, opt1);
                model.arm1.w[0] = model.arm0.w[0];
                model.arm1.b[0] = model.arm0.b[0];
            } else if (has0) {
                adamw_step(model.arm0, g0, opt0);
                model.arm1.w[0] = model.arm0.w[0];
                model.arm1.b[0] = model.arm0.b[0];
            } else {
                adamw_step(model.arm1, g1, opt1);
                model.arm0.w[0] = model.arm1.w[0];
                model.arm0.b[0] = model.arm1.b[0];
            }
        }
    }
    return model;
}

std::vector<double> predict_propensity(const PropensityModel& model, const Dataset& ds) {
    if (ds.d != model.spec.widths.front())
        throw std::invalid_argument("predict_propensity: covariate dimension mismatch");
    std::vector<double> xstd = ds.x;
    model.scaler.apply(xstd, ds.n);
    std::vector<double> out = forward(model.spec, model.params, xstd, ds.n);
    for (double& v : out) v = sigmoid(v);
    return out;
}

void predict_outcomes(const OutcomeModel& model, const Dataset& ds,
                      std::vector<double>& mu0, std::vector<double>& mu1) {
    if (ds.d != model.spec.widths.front())
        throw std::invalid_argument("predict_outcomes: covariate dimension mismatch");
    std::vector<double> xstd = ds.x;
    model.scaler.apply(xstd, ds.n);
    mu0 = forward(model.spec, model.arm0, xstd, ds.n);
    mu1 = forward(model.spec, model.arm1, xstd, ds.n);
}

NuisanceEstimates predict_nuisance(const PropensityModel& prop, const OutcomeModel& outcome,
                                   const Dataset& ds, double trim_lo) {
    if (!(trim_lo > 0.0 && trim_lo < 0.5))
        throw std::invalid_argument("predict_nuisance: trim_lo must lie in (0, 0.5)");
    NuisanceEstimates est;
    est.trim_lo = trim_lo;
    est.degenerate_overlap = prop.degenerate;
    est.uncovered_arm = outcome.uncovered_arm;
    est.pi_raw = predict_propensity(prop, ds);
    predict_outcomes(outcome, ds, est.mu0_hat, est.mu1_hat);
    est.pi_hat.resize(ds.n);
    est.nu_hat.resize(ds.n);
    est.mu_hat.resize(ds.n);
    est.trim.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        const double raw = est.pi_raw[i];
        est.trim[i] = (raw >= trim_lo && raw <= 1.0 - trim_lo) ? 1 : 0;
        const double clamped = std::min(std::max(raw, trim_lo), 1.0 - trim_lo);
        est.pi_hat[i] = clamped;
        est.nu_hat[i] = clamped * (1.0 - clamped);
        est.mu_hat[i] = (1.0 - clamped) * est.mu0_hat[i] + clamped * est.mu1_hat[i];
    }
    return est;
}

NuisanceEstimates estimate_nuisances(const Dataset& ds, const StageOneConfig& cfg,
                                     double trim_lo) {
    if (cfg.cross_fit_folds <= 1) {
        const PropensityModel prop = fit_propensity(ds, cfg);
        const OutcomeModel outcome = fit_outcomes(ds, cfg);
        return predict_nuisance(prop, outcome, ds, trim_lo);
    }
    const std::size_t k = cfg.cross_fit_folds;
    if (ds.n < k)
        throw std::invalid_argument("estimate_nuisances: more folds than rows");
    NuisanceEstimates est;
    est.trim_lo = trim_lo;
    est.mu0_hat.resize(ds.n); est.mu1_hat.resize(ds.n);
    est.pi_raw.resize(ds.n);  est.pi_hat.resize(ds.n);
    est.nu_hat.resize(ds.n);  est.mu_hat.resize(ds.n);
    est.trim.resize(ds.n);
    Philox rng(cfg.seed, 103);
    std::vector<std::size_t> order = epoch_order(ds.n, rng);
    for (std::size_t fold = 0; fold < k; ++fold) {
        std::vector<std::size_t> hold, rest;
        for (std::size_t r = 0; r < ds.n; ++r)
            (r % k == fold ? hold : rest).push_back(order[r]);
        std::sort(hold.begin(), hold.end());
        std::sort(rest.begin(), rest.end());
        const Dataset fit_ds = subset(ds, rest);
        const Dataset score_ds = subset(ds, hold);
        StageOneConfig fold_cfg = cfg;
        fold_cfg.cross_fit_folds = 0;
        fold_cfg.seed = cfg.seed + 1000003 * (fold + 1);
        const PropensityModel prop = fit_propensity(fit_ds, fold_cfg);
        const OutcomeModel outcome = fit_outcomes(fit_ds, fold_cfg);
        const NuisanceEstimates part = predict_nuisance(prop, outcome, score_ds, trim_lo);
        est.degenerate_overlap = est.degenerate_overlap || part.degenerate_overlap;
        est.uncovered_arm = est.uncovered_arm || part.uncovered_arm;
        for (std::size_t r = 0; r < hold.size(); ++r) {
            const std::size_t i = hold[r];
            est.mu0_hat[i] = part.mu0_hat[r];
            est.mu1_hat[i] = part.mu1_hat[r];
            est.pi_raw[i] = part.pi_raw[r];
            est.pi_hat[i] = part.pi_hat[r];
            est.nu_hat[i] = part.nu_hat[r];
            est.mu_hat[i] = part.mu_hat[r];
            est.trim[i] = part.trim[r];
        }
    }
    return est;
}

NuisanceEstimates oracle_nuisance_synthetic(const Dataset& ds, double trim_lo) {
    if (!ds.has_oracle_pi())
        throw std::invalid_argument("oracle_nuisance_synthetic: dataset lacks oracle propensities");
    if (!(trim_lo > 0.0 && trim_lo < 0.5))
        throw std::invalid_argument("oracle_nuisance_synthetic: trim_lo must lie in (0, 0.5)");
    if (ds.d != 1)
        throw std::invalid_argument("oracle_nuisance_synthetic: synthetic generator is univariate");
    NuisanceEstimates est;
    est.trim_lo = trim_lo;
    est.mu0_hat.resize(ds.n); est.mu1_hat.resize(ds.n);
    est.pi_raw.resize(ds.n);  est.pi_hat.resize(ds.n);
    est.nu_hat.resize(ds.n);  est.mu_hat.resize(ds.n);
    est.trim.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        const double m = synthetic_outcome_mean(ds.x_at(i, 0));
        est.mu0_hat[i] = m;
        est.mu1_hat[i] = m;
        const double raw = ds.oracle_pi[i];
        est.pi_raw[i] = raw;
        est.trim[i] = (raw >= trim_lo && raw <= 1.0 - trim_lo) ? 1 : 0;
        const double clamped = std::min(std::max(raw, trim_lo), 1.0 - trim_lo);
        est.pi_hat[i] = clamped;
        est.nu_hat[i] = clamped * (1.0 - clamped);
        est.mu_hat[i] = m;
    }
    return est;
}

void save_nuisance_csv(const NuisanceEstimates& est, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("save_nuisance_csv: cannot open " + path);
    std::fprintf(f, "mu0_hat,mu1_hat,pi_raw,pi_hat,nu_hat,mu_hat,trim\n");
    for (std::size_t i = 0; i < est.pi_raw.size(); ++i)
        std::fprintf(f, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%u\n",
                     est.mu0_hat[i], est.mu1_hat[i], est.pi_raw[i], est.pi_hat[i],
                     est.nu_hat[i], est.mu_hat[i], static_cast<unsigned>(est.trim[i]));
    std::fclose(f);
}

} // namespace oar
