#pragma once

#include "oar/rng.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace oar {

/**
 * Dense feed-forward network: ELU on hidden layers, identity output.
 * Interfaces are numbered 0 (raw input) through widths.size()-2 (after the
 * last hidden activation); a perturbation may be injected at exactly one
 * interface, which is where regularizing noise or dropout masks enter.
 */
struct MlpSpec {
    std::vector<std::size_t> widths;  // input, hidden..., output
    int injection_index = -1;         // -1 = no injection interface

    std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
    std::size_t interface_width(std::size_t k) const { return widths.at(k); }
    void validate() const;
};

/** Per-layer dense weights (row-major, out x in) and biases. */
struct MlpParams {
    std::vector<std::vector<double>> w;
    std::vector<std::vector<double>> b;
};

/**
 * Per-column affine input scaler fit on training covariates; fitted models
 * carry one so raw covariates can be passed to every predict call.
 */
struct InputScaler {
    std::vector<double> mean;    // empty = identity
    std::vector<double> inv_sd;

    void fit(const std::vector<double>& x, std::size_t n, std::size_t d);
    /** Standardize row-major n x d covariates in place; no-op if unfit. */
    void apply(std::vector<double>& x, std::size_t n) const;
};

enum class PerturbKind { None, Additive, Multiplicative };

/**
 * Forward cache: every interface activation (post-injection at the injected
 * interface), every pre-activation, and the pre-injection interface values,
 * enough for exact first- and second-order reverse passes.
 */
struct ForwardCache {
    std::size_t bsz = 0;
    PerturbKind kind = PerturbKind::None;
    std::vector<double> xi;                  // injected variable, bsz x iface width
    std::vector<std::vector<double>> acts;   // acts[k]: interface k values, bsz x widths[k]
    std::vector<std::vector<double>> zs;     // zs[l]: layer l pre-activations
    std::vector<double> iface_pre;           // interface values before injection
};

/** Tangent (directional-derivative) states mirroring a ForwardCache. */
struct TangentCache {
    std::vector<double> dir;                 // the direction injected at the interface
    std::vector<std::vector<double>> t_acts; // t_acts[k]: tangents of interface k
    std::vector<std::vector<double>> t_zs;   // t_zs[l]: tangents of pre-activations
};

/** Parameter-shaped accumulator of loss gradients. */
struct Grads {
    std::vector<std::vector<double>> w;
    std::vector<std::vector<double>> b;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct OptimizerState {
    AdamWConfig cfg;
    long long step = 0;
    std::vector<std::vector<double>> m_w, v_w, m_b, v_b;
};

struct EmaState {
    double kappa = 0.995;
    std::vector<std::vector<double>> w, b;
};

/** Fan-in-scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)). */
MlpParams init_params(const MlpSpec& spec, Philox& rng);

Grads zero_grads(const MlpSpec& spec);

/**
 * Batch forward pass. x is row-major bsz x widths[0]. xi, when non-null, is
 * the injected variable at spec.injection_index (row-major, bsz x interface
 * width): added for Additive, multiplied for Multiplicative. Returns the
 * outputs (bsz x output width) and fills the cache when given.
 */
std::vector<double> forward(const MlpSpec& spec, const MlpParams& params,
                            const std::vector<double>& x, std::size_t bsz,
                            PerturbKind kind = PerturbKind::None,
                            const std::vector<double>* xi = nullptr,
                            ForwardCache* cache = nullptr);

/**
 * Exact reverse pass for upstream = dLoss/dOutputs. Any of the output
 * pointers may be null. injected_grad is dLoss/dxi for the injected variable
 * (unit Jacobian for additive injection; scaled by the pre-injection
 * interface values for multiplicative injection).
 */
void backward(const MlpSpec& spec, const MlpParams& params, const ForwardCache& cache,
              const std::vector<double>& upstream, Grads* param_grads,
              std::vector<double>* input_grad, std::vector<double>* injected_grad);

/**
 * Directional derivative of the outputs with respect to the injected
 * variable, along dir (bsz x interface width): the tangent seed is dir for
 * additive injection and (pre-injection interface) ∘ dir for multiplicative
 * injection. Returns the output tangents and fills tcache for the
 * second-order reverse pass.
 */
std::vector<double> forward_tangent(const MlpSpec& spec, const MlpParams& params,
                                    const ForwardCache& cache,
                                    const std::vector<double>& dir,
                                    TangentCache* tcache);

/**
 * Joint reverse pass for a scalar loss depending on both the outputs g and
 * their injected-direction tangents t: upstream_g = dL/dg, upstream_t =
 * dL/dt. Accumulates exact parameter gradients including the second-order
 * terms that flow through the tangent computation (and, for multiplicative
 * injection, through the parameter-dependent tangent seed).
 */
void backward_second_order(const MlpSpec& spec, const MlpParams& params,
                           const ForwardCache& cache, const TangentCache& tcache,
                           const std::vector<double>& upstream_g,
                           const std::vector<double>& upstream_t,
                           Grads* param_grads);

OptimizerState init_optimizer(const MlpSpec& spec, const AdamWConfig& cfg);

/** Decoupled-weight-decay Adam update, in place. */
void adamw_step(MlpParams& params, const Grads& grads, OptimizerState& state);

/** Shadow initialized to a copy of the starting parameters. */
EmaState init_ema(const MlpParams& params, double kappa);

/** shadow <- kappa * shadow + (1 - kappa) * params, elementwise. */
void ema_update(EmaState& ema, const MlpParams& params);

/** Materialize the shadow as usable parameters. */
MlpParams ema_params(const EmaState& ema);

/** Flat binary checkpoint of doubles plus a <path>.shape.json manifest. */
void save_checkpoint(const MlpParams& params, const std::string& path);
MlpParams load_checkpoint(const std::string& path);

} // namespace oar
