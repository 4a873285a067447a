#include "oar/second_stage.hpp"

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

} // namespace

std::string to_string(Injector inj) {
    return inj == Injector::NoiseReg ? "noise" : "dropout";
}

Injector injector_from_string(const std::string& name) {
    if (name == "noise") return Injector::NoiseReg;
    if (name == "dropout") return Injector::Dropout;
    throw std::invalid_argument("unknown injector: " + name);
}

double oar_empirical_loss(const std::vector<double>& rho,
                          const std::vector<std::uint8_t>& trim,
                          const std::vector<double>& phi,
                          const std::vector<double>& g,
                          bool strict_drop) {
    const std::size_t n = rho.size();
    if (trim.size() != n || phi.size() != n || g.size() != n)
        throw std::invalid_argument("oar_empirical_loss: length mismatch");
    double acc = 0.0;
    std::size_t denom = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (strict_drop && !trim[i]) continue;
        const double r = static_cast<double>(trim[i]) * phi[i] - g[i];
        acc += rho[i] * r * r;
        denom += 1;
    }
    if (!strict_drop) denom = n;
    return denom == 0 ? 0.0 : acc / static_cast<double>(denom);
}

double dropout_mask_score(const std::vector<std::uint8_t>& keep, double p) {
    if (!(p > 0.0 && p < 1.0))
        throw std::invalid_argument("dropout_mask_score: p must lie in (0, 1)");
    double s = 0.0;
    for (std::uint8_t k : keep)
        s += k ? -1.0 / (1.0 - p) : 1.0 / p;
    return s;
}

double bias_correction_noise(double w, double delta_mu, double g_perturbed,
                             double tangent, double lambda, double k_tilde,
                             bool linear_scale) {
    if (lambda == 0.0) return 0.0;
    const double resid = delta_mu - g_perturbed;
    const double d = linear_scale ? tangent : tangent / (2.0 * std::sqrt(lambda));
    return -2.0 * w * resid * d * k_tilde;
}

double bias_correction_dropout(double w, double delta_mu, double g_masked,
                               double tangent, double p, double score,
                               double k_tilde) {
    if (p == 0.0) return 0.0;
    const double resid = delta_mu - g_masked;
    const double d = tangent / ((1.0 - p) * (1.0 - p));
    return w * k_tilde * (resid * resid * score - 2.0 * resid * d);
}

TrainedTarget fit_target(const Dataset& ds, const NuisanceEstimates& est,
                         const SecondStageSpec& spec) {
    const std::size_t n = ds.n;
    if (n == 0) throw std::invalid_argument("fit_target: empty dataset");
    if (est.pi_hat.size() != n || est.mu0_hat.size() != n || est.mu1_hat.size() != n ||
        est.trim.size() != n || est.nu_hat.size() != n)
        throw std::invalid_argument("fit_target: estimate length mismatch");
    spec.target.validate();
    if (spec.target.injection_index < 0)
        throw std::invalid_argument("fit_target: target network needs an injection interface");
    if (spec.batch == 0) throw std::invalid_argument("fit_target: batch must be positive");
    if (!(spec.kappa >= 0.0 && spec.kappa <= 1.0))
        throw std::invalid_argument("fit_target: kappa must lie in [0, 1]");
    if (spec.injector == Injector::Dropout &&
        !(spec.reg.base >= 0.0 && spec.reg.base < 1.0))
        throw std::invalid_argument("fit_target: dropout base must lie in [0, 1)");
    if (spec.injector == Injector::NoiseReg && !(spec.reg.base >= 0.0))
        throw std::invalid_argument("fit_target: noise base must be non-negative");

    const bool dropout = spec.injector == Injector::Dropout;

    // Per-row learner quantities.
    std::vector<double> w(n), rho(n), phi(n), dmu(n);
    for (std::size_t i = 0; i < n; ++i) {
        const NuisanceRow row{est.mu0_hat[i], est.mu1_hat[i], est.pi_hat[i]};
        w[i] = weight_w(spec.learner, est.pi_hat[i]);
        rho[i] = weight_rho(spec.learner, ds.a[i], est.pi_hat[i]);
        phi[i] = pseudo_outcome(spec.learner, ds.a[i], ds.y[i], row);
        dmu[i] = est.mu1_hat[i] - est.mu0_hat[i];
    }

    // Per-row regularization levels.
    TrainedTarget model;
    model.spec = spec.target;
    if (spec.standardize) {
        double ss = 0.0;
        std::size_t k = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!est.trim[i]) continue;
            ss += rho[i] * phi[i] * phi[i];
            ++k;
        }
        if (k > 0) {
            const double s = std::sqrt(ss / static_cast<double>(k));
            if (std::isfinite(s) && s > 0.0) model.target_scale = s;
        }
        for (std::size_t i = 0; i < n; ++i) {
            phi[i] /= model.target_scale;
            dmu[i] /= model.target_scale;
        }
    }
    std::vector<double> level(n, spec.reg.base);
    std::vector<double> ktilde(n, 0.0);
    bool correct = false;
    if (spec.reg.mode != RegMode::CR) {
        std::vector<double> raw(n);
        for (std::size_t i = 0; i < n; ++i)
            raw[i] = dropout ? dropout_p(spec.reg.kind, est.nu_hat[i])
                             : lambda_fn(spec.reg.kind, est.nu_hat[i]);
        bool degenerate = false;
        level = dropout ? rescale_p(raw, est.trim, spec.reg.base, spec.reg.gamma, &degenerate)
                        : rescale_lambda(raw, est.trim, spec.reg.base, spec.reg.gamma, &degenerate);
        model.degenerate_schedule = degenerate;
        correct = spec.reg.mode == RegMode::dOAR && spec.reg.gamma != 0.0 && !degenerate;
        if (correct) {
            const double m_hat = trimmed_mean(raw, est.trim);
            for (std::size_t i = 0; i < n; ++i) {
                if (!est.trim[i]) continue;
                ktilde[i] = dropout
                    ? rescaled_score_p(spec.reg.kind, ds.a[i], est.pi_hat[i],
                                       m_hat, spec.reg.base, spec.reg.gamma)
                    : rescaled_score_lambda(spec.reg.kind, ds.a[i], est.pi_hat[i],
                                            m_hat, spec.reg.base, spec.reg.gamma);
            }
        }
    }

    const std::size_t k_inj = static_cast<std::size_t>(spec.target.injection_index);
    const std::size_t d_if = spec.target.interface_width(k_inj);
    const PerturbKind kind = dropout ? PerturbKind::Multiplicative : PerturbKind::Additive;

    if (spec.scale_inputs) model.scaler.fit(ds.x, n, ds.d);
    std::vector<double> xstd = ds.x;
    model.scaler.apply(xstd, n);

    Philox rng(spec.seed, 201);
    MlpParams params = init_params(spec.target, rng);
    OptimizerState opt = init_optimizer(spec.target,
        AdamWConfig{spec.lr, 0.9, 0.999, 1e-8, spec.weight_decay});
    EmaState ema = init_ema(params, spec.kappa);
    if (spec.record_param_trace) model.param_trace.push_back(params);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t b = spec.batch;

    std::vector<double> xb, xi, dir, gout, upstream, brho, bphi, up_g2, up_t2, tout;
    std::vector<std::uint8_t> btrim, keep;
    Grads grads, cgrads;

    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        shuffle_indices(order, rng);
        double loss_sum = 0.0, corr_sum = 0.0;
        std::size_t gate_count = 0, batch_count = 0;
        for (std::size_t start = 0; start < n; start += b) {
            const std::size_t stop = std::min(n, start + b);
            const std::size_t bsz = stop - start;

            xb.resize(bsz * ds.d);
            for (std::size_t r = 0; r < bsz; ++r)
                for (std::size_t j = 0; j < ds.d; ++j)
                    xb[r * ds.d + j] = xstd[order[start + r] * ds.d + j];

            // The perturbation draw count per row is fixed by the injector
            // alone, so runs with different schedules consume identical
            // random streams.
            xi.resize(bsz * d_if);
            dir.resize(bsz * d_if);
            if (dropout) keep.resize(bsz * d_if);
            for (std::size_t r = 0; r < bsz; ++r) {
                const std::size_t gi = order[start + r];
                const double lv = level[gi];
                if (dropout) {
                    for (std::size_t j = 0; j < d_if; ++j) {
                        const bool drop = rng.bernoulli(lv);
                        const std::uint8_t kp = drop ? 0 : 1;
                        keep[r * d_if + j] = kp;
                        dir[r * d_if + j] = static_cast<double>(kp);
                        xi[r * d_if + j] = kp ? 1.0 / (1.0 - lv) : 0.0;
                    }
                } else {
                    const double scale = spec.noise_linear_scale ? lv : std::sqrt(lv);
                    for (std::size_t j = 0; j < d_if; ++j) {
                        const double e = rng.normal();
                        dir[r * d_if + j] = e;
                        xi[r * d_if + j] = scale * e;
                    }
                }
            }

            ForwardCache cache;
            gout = forward(spec.target, params, xb, bsz, kind, &xi, &cache);

            brho.resize(bsz); bphi.resize(bsz); btrim.resize(bsz);
            for (std::size_t r = 0; r < bsz; ++r) {
                const std::size_t gi = order[start + r];
                brho[r] = rho[gi];
                bphi[r] = phi[gi];
                btrim[r] = est.trim[gi];
            }
            const double loss = oar_empirical_loss(brho, btrim, bphi, gout, spec.strict_drop);

            std::size_t kept = bsz;
            if (spec.strict_drop) {
                kept = 0;
                for (std::size_t r = 0; r < bsz; ++r) kept += btrim[r];
                if (kept == 0) continue;  // nothing to fit in this batch
            }
            upstream.resize(bsz);
            for (std::size_t r = 0; r < bsz; ++r) {
                if (spec.strict_drop && !btrim[r]) { upstream[r] = 0.0; continue; }
                const double target_r = static_cast<double>(btrim[r]) * bphi[r];
                upstream[r] = 2.0 * brho[r] * (gout[r] - target_r) / static_cast<double>(kept);
            }
            grads = zero_grads(spec.target);
            backward(spec.target, params, cache, upstream, &grads, nullptr, nullptr);

            double realized = loss;
            double cbatch = 0.0;
            bool gate = false;
            if (correct) {
                TangentCache tc;
                tout = forward_tangent(spec.target, params, cache, dir, &tc);
                up_g2.assign(bsz, 0.0);
                up_t2.assign(bsz, 0.0);
                const double inv_b = 1.0 / static_cast<double>(bsz);
                for (std::size_t r = 0; r < bsz; ++r) {
                    const std::size_t gi = order[start + r];
                    if (!est.trim[gi]) continue;
                    const double lv = level[gi];
                    const double resid = dmu[gi] - gout[r];
                    if (dropout) {
                        if (lv == 0.0) continue;
                        std::vector<std::uint8_t> rkeep(keep.begin() + r * d_if,
                                                        keep.begin() + (r + 1) * d_if);
                        const double s = dropout_mask_score(rkeep, lv);
                        cbatch += inv_b * bias_correction_dropout(
                            w[gi], dmu[gi], gout[r], tout[r], lv, s, ktilde[gi]);
                        const double d = tout[r] / ((1.0 - lv) * (1.0 - lv));
                        up_g2[r] = inv_b * w[gi] * ktilde[gi] * (-2.0 * resid * s + 2.0 * d);
                        up_t2[r] = inv_b * w[gi] * ktilde[gi] *
                                   (-2.0 * resid / ((1.0 - lv) * (1.0 - lv)));
                    } else {
                        if (lv == 0.0) continue;
                        cbatch += inv_b * bias_correction_noise(
                            w[gi], dmu[gi], gout[r], tout[r], lv, ktilde[gi],
                            spec.noise_linear_scale);
                        const double q = spec.noise_linear_scale
                            ? -2.0 * w[gi] * ktilde[gi]
                            : -w[gi] * ktilde[gi] / std::sqrt(lv);
                        up_g2[r] = inv_b * q * (-tout[r]);
                        up_t2[r] = inv_b * q * resid;
                    }
                }
                // The absolute clip is calibrated for unstandardized losses,
                // so the correction is compared to alpha in original units;
                // the relative part is scale-free.
                const double s2 = model.target_scale * model.target_scale;
                gate = std::fabs(cbatch) * s2 <= spec.reg.clip_alpha &&
                       std::fabs(cbatch) <= loss;
                if (gate) {
                    // The reverse passes overwrite their output, so the
                    // correction gradient lands in its own buffer first.
                    backward_second_order(spec.target, params, cache, tc,
                                          up_g2, up_t2, &cgrads);
                    for (std::size_t l = 0; l < grads.w.size(); ++l) {
                        for (std::size_t k = 0; k < grads.w[l].size(); ++k)
                            grads.w[l][k] += cgrads.w[l][k];
                        for (std::size_t k = 0; k < grads.b[l].size(); ++k)
                            grads.b[l][k] += cgrads.b[l][k];
                    }
                    realized = loss + cbatch;
                }
            }

            adamw_step(params, grads, opt);
            ema_update(ema, params);
            if (spec.record_param_trace) model.param_trace.push_back(params);

            loss_sum += realized;
            corr_sum += std::fabs(cbatch);
            gate_count += gate ? 1 : 0;
            batch_count += 1;
        }
        TraceRow row;
        row.epoch = epoch;
        if (batch_count > 0) {
            row.loss = loss_sum / static_cast<double>(batch_count);
            row.correction = corr_sum / static_cast<double>(batch_count);
            row.clip_rate = static_cast<double>(gate_count) / static_cast<double>(batch_count);
        }
        model.trace.push_back(row);
    }

    model.raw = params;
    model.params = ema_params(ema);
    return model;
}

std::vector<double> predict_cate(const TrainedTarget& model,
                                 const std::vector<double>& x, std::size_t n) {
    std::vector<double> xstd = x;
    model.scaler.apply(xstd, n);
    std::vector<double> out = forward(model.spec, model.params, xstd, n);
    if (model.target_scale != 1.0)
        for (double& v : out) v *= model.target_scale;
    return out;
}

std::vector<double> predict_cate(const TrainedTarget& model, const Dataset& ds) {
    return predict_cate(model, ds.x, ds.n);
}

void save_trace_csv(const TrainedTarget& model, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("save_trace_csv: cannot open " + path);
    std::fprintf(f, "epoch,loss,correction,clip_rate\n");
    for (const TraceRow& r : model.trace)
        std::fprintf(f, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.loss, r.correction, r.clip_rate);
    std::fclose(f);
}

} // namespace oar
