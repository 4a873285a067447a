#include "oar/neuralnet.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace oar {

namespace {

double elu(double z) { return z > 0.0 ? z : std::expm1(z); }
double elu_d1(double z) { return z > 0.0 ? 1.0 : std::exp(z); }
double elu_d2(double z) { return z > 0.0 ? 0.0 : std::exp(z); }

void check_shapes(const MlpSpec& spec, const MlpParams& params) {
    spec.validate();
    std::size_t L = spec.layers();
    if (params.w.size() != L || params.b.size() != L) {
        throw std::invalid_argument("parameter layer count does not match the architecture");
    }
    for (std::size_t l = 0; l < L; ++l) {
        if (params.w[l].size() != spec.widths[l + 1] * spec.widths[l] ||
            params.b[l].size() != spec.widths[l + 1]) {
            throw std::invalid_argument("parameter shapes do not match the architecture");
        }
    }
}

void apply_injection(PerturbKind kind, const std::vector<double>& xi,
                     std::vector<double>& vals, std::vector<double>& pre) {
    pre = vals;
    if (kind == PerturbKind::Additive) {
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] += xi[i];
    } else {
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] *= xi[i];
    }
}

// out[i, o] += sum_in W[o, in] * a[i, in]  (+ bias), batch-major loops.
void linear_forward(const std::vector<double>& W, const std::vector<double>* B,
                    const std::vector<double>& a, std::size_t bsz,
                    std::size_t nin, std::size_t nout, std::vector<double>& out) {
    out.assign(bsz * nout, 0.0);
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* ai = a.data() + i * nin;
        double* oi = out.data() + i * nout;
        for (std::size_t o = 0; o < nout; ++o) {
            double s = B ? (*B)[o] : 0.0;
            const double* wrow = W.data() + o * nin;
            for (std::size_t in = 0; in < nin; ++in) s += wrow[in] * ai[in];
            oi[o] = s;
        }
    }
}

// abar_prev[i, in] = sum_o zbar[i, o] * W[o, in]
void linear_backward_input(const std::vector<double>& W, const std::vector<double>& zbar,
                           std::size_t bsz, std::size_t nin, std::size_t nout,
                           std::vector<double>& abar_prev) {
    abar_prev.assign(bsz * nin, 0.0);
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* zi = zbar.data() + i * nout;
        double* pi = abar_prev.data() + i * nin;
        for (std::size_t o = 0; o < nout; ++o) {
            const double* wrow = W.data() + o * nin;
            for (std::size_t in = 0; in < nin; ++in) pi[in] += zi[o] * wrow[in];
        }
    }
}

// Wbar[o, in] += sum_i zbar[i, o] * a[i, in];  bbar[o] += sum_i zbar[i, o]
void accumulate_param_grads(const std::vector<double>& zbar, const std::vector<double>& a,
                            std::size_t bsz, std::size_t nin, std::size_t nout,
                            std::vector<double>& wbar, std::vector<double>* bbar) {
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* zi = zbar.data() + i * nout;
        const double* ai = a.data() + i * nin;
        for (std::size_t o = 0; o < nout; ++o) {
            double* wrow = wbar.data() + o * nin;
            for (std::size_t in = 0; in < nin; ++in) wrow[in] += zi[o] * ai[in];
            if (bbar) (*bbar)[o] += zi[o];
        }
    }
}

} // namespace

void MlpSpec::validate() const {
    if (widths.size() < 2) {
        throw std::invalid_argument("network needs at least one layer (two widths)");
    }
    for (std::size_t w : widths) {
        if (w == 0) throw std::invalid_argument("layer widths must be positive");
    }
    if (injection_index >= 0 && injection_index + 1 >= static_cast<int>(widths.size())) {
        throw std::invalid_argument("injection interface must precede the output layer");
    }
}

void InputScaler::fit(const std::vector<double>& x, std::size_t n, std::size_t d) {
    if (n == 0 || d == 0 || x.size() != n * d)
        throw std::invalid_argument("InputScaler: bad covariate shape");
    mean.assign(d, 0.0);
    inv_sd.assign(d, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) {
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = x[i * d + j] - mean[j];
            ss += c * c;
        }
        const double sd = std::sqrt(ss / static_cast<double>(n));
        if (sd > 0.0 && std::isfinite(sd)) inv_sd[j] = 1.0 / sd;
    }
}

void InputScaler::apply(std::vector<double>& x, std::size_t n) const {
    if (mean.empty()) return;
    const std::size_t d = mean.size();
    if (x.size() != n * d)
        throw std::invalid_argument("InputScaler: covariate dimension mismatch");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            x[i * d + j] = (x[i * d + j] - mean[j]) * inv_sd[j];
}

MlpParams init_params(const MlpSpec& spec, Philox& rng) {
    spec.validate();
    MlpParams p;
    std::size_t L = spec.layers();
    p.w.resize(L);
    p.b.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        std::size_t nin = spec.widths[l], nout = spec.widths[l + 1];
        double scale = 1.0 / std::sqrt(static_cast<double>(nin));
        p.w[l].resize(nout * nin);
        for (auto& v : p.w[l]) v = scale * (2.0 * rng.uniform() - 1.0);
        p.b[l].resize(nout);
        for (auto& v : p.b[l]) v = scale * (2.0 * rng.uniform() - 1.0);
    }
    return p;
}

Grads zero_grads(const MlpSpec& spec) {
    Grads g;
    std::size_t L = spec.layers();
    g.w.resize(L);
    g.b.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        g.w[l].assign(spec.widths[l + 1] * spec.widths[l], 0.0);
        g.b[l].assign(spec.widths[l + 1], 0.0);
    }
    return g;
}

std::vector<double> forward(const MlpSpec& spec, const MlpParams& params,
                            const std::vector<double>& x, std::size_t bsz,
                            PerturbKind kind, const std::vector<double>* xi,
                            ForwardCache* cache) {
    check_shapes(spec, params);
    std::size_t L = spec.layers();
    if (x.size() != bsz * spec.widths[0]) {
        throw std::invalid_argument("input batch does not match the input width");
    }
    int k_inj = spec.injection_index;
    if (kind != PerturbKind::None) {
        if (k_inj < 0) {
            throw std::invalid_argument("perturbation given but the architecture has no "
                                        "injection interface");
        }
        if (!xi || xi->size() != bsz * spec.widths[std::size_t(k_inj)]) {
            throw std::invalid_argument("perturbation does not match the injected interface");
        }
    }

    std::vector<std::vector<double>> acts(L + 1), zs(L);
    std::vector<double> iface_pre;
    acts[0] = x;
    if (kind != PerturbKind::None && k_inj == 0) {
        apply_injection(kind, *xi, acts[0], iface_pre);
    }
    for (std::size_t l = 0; l < L; ++l) {
        std::size_t nin = spec.widths[l], nout = spec.widths[l + 1];
        linear_forward(params.w[l], &params.b[l], acts[l], bsz, nin, nout, zs[l]);
        acts[l + 1].resize(bsz * nout);
        if (l + 1 < L) {
            for (std::size_t i = 0; i < zs[l].size(); ++i) acts[l + 1][i] = elu(zs[l][i]);
        } else {
            acts[l + 1] = zs[l];
        }
        if (kind != PerturbKind::None && k_inj == static_cast<int>(l + 1)) {
            apply_injection(kind, *xi, acts[l + 1], iface_pre);
        }
    }

    std::vector<double> out = acts[L];
    if (cache) {
        cache->bsz = bsz;
        cache->kind = kind;
        cache->xi = (kind != PerturbKind::None) ? *xi : std::vector<double>{};
        cache->acts = std::move(acts);
        cache->zs = std::move(zs);
        cache->iface_pre = std::move(iface_pre);
    }
    return out;
}

void backward(const MlpSpec& spec, const MlpParams& params, const ForwardCache& cache,
              const std::vector<double>& upstream, Grads* param_grads,
              std::vector<double>* input_grad, std::vector<double>* injected_grad) {
    check_shapes(spec, params);
    std::size_t L = spec.layers();
    std::size_t bsz = cache.bsz;
    if (cache.acts.size() != L + 1 || cache.zs.size() != L) {
        throw std::invalid_argument("forward cache does not match the architecture");
    }
    if (upstream.size() != bsz * spec.widths[L]) {
        throw std::invalid_argument("upstream gradient does not match the output width");
    }
    int k_inj = spec.injection_index;
    bool injected = cache.kind != PerturbKind::None;

    if (param_grads) *param_grads = zero_grads(spec);

    auto cross_injection = [&](std::vector<double>& abar) {
        if (injected_grad) {
            injected_grad->resize(abar.size());
            if (cache.kind == PerturbKind::Additive) {
                *injected_grad = abar;
            } else {
                for (std::size_t i = 0; i < abar.size(); ++i) {
                    (*injected_grad)[i] = abar[i] * cache.iface_pre[i];
                }
            }
        }
        if (cache.kind == PerturbKind::Multiplicative) {
            for (std::size_t i = 0; i < abar.size(); ++i) abar[i] *= cache.xi[i];
        }
    };

    std::vector<double> abar = upstream;
    std::vector<double> zbar, abar_prev;
    for (std::size_t li = L; li-- > 0;) {
        if (injected && k_inj == static_cast<int>(li + 1)) cross_injection(abar);
        std::size_t nin = spec.widths[li], nout = spec.widths[li + 1];
        if (li + 1 < L) {
            zbar.resize(abar.size());
            for (std::size_t i = 0; i < abar.size(); ++i) {
                zbar[i] = abar[i] * elu_d1(cache.zs[li][i]);
            }
        } else {
            zbar = abar;
        }
        if (param_grads) {
            accumulate_param_grads(zbar, cache.acts[li], bsz, nin, nout,
                                   param_grads->w[li], &param_grads->b[li]);
        }
        linear_backward_input(params.w[li], zbar, bsz, nin, nout, abar_prev);
        abar = abar_prev;
    }
    if (injected && k_inj == 0) cross_injection(abar);
    if (input_grad) *input_grad = abar;
}

std::vector<double> forward_tangent(const MlpSpec& spec, const MlpParams& params,
                                    const ForwardCache& cache,
                                    const std::vector<double>& dir,
                                    TangentCache* tcache) {
    check_shapes(spec, params);
    std::size_t L = spec.layers();
    std::size_t bsz = cache.bsz;
    int k_inj = spec.injection_index;
    if (cache.kind == PerturbKind::None || k_inj < 0) {
        throw std::invalid_argument("tangent pass needs a perturbed forward cache");
    }
    std::size_t kw = spec.widths[std::size_t(k_inj)];
    if (dir.size() != bsz * kw) {
        throw std::invalid_argument("direction does not match the injected interface");
    }

    std::vector<std::vector<double>> t_acts(L + 1), t_zs(L);
    for (std::size_t k = 0; k <= L; ++k) t_acts[k].assign(bsz * spec.widths[k], 0.0);
    for (std::size_t l = 0; l < L; ++l) t_zs[l].assign(bsz * spec.widths[l + 1], 0.0);

    auto& seed = t_acts[std::size_t(k_inj)];
    if (cache.kind == PerturbKind::Additive) {
        seed = dir;
    } else {
        for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = cache.iface_pre[i] * dir[i];
    }

    for (std::size_t l = std::size_t(k_inj); l < L; ++l) {
        std::size_t nin = spec.widths[l], nout = spec.widths[l + 1];
        linear_forward(params.w[l], nullptr, t_acts[l], bsz, nin, nout, t_zs[l]);
        if (l + 1 < L) {
            for (std::size_t i = 0; i < t_zs[l].size(); ++i) {
                t_acts[l + 1][i] = elu_d1(cache.zs[l][i]) * t_zs[l][i];
            }
        } else {
            t_acts[l + 1] = t_zs[l];
        }
    }

    std::vector<double> out = t_acts[L];
    if (tcache) {
        tcache->dir = dir;
        tcache->t_acts = std::move(t_acts);
        tcache->t_zs = std::move(t_zs);
    }
    return out;
}

void backward_second_order(const MlpSpec& spec, const MlpParams& params,
                           const ForwardCache& cache, const TangentCache& tcache,
                           const std::vector<double>& upstream_g,
                           const std::vector<double>& upstream_t,
                           Grads* param_grads) {
    check_shapes(spec, params);
    std::size_t L = spec.layers();
    std::size_t bsz = cache.bsz;
    int k_inj = spec.injection_index;
    if (cache.kind == PerturbKind::None || k_inj < 0) {
        throw std::invalid_argument("second-order pass needs a perturbed forward cache");
    }
    if (tcache.t_acts.size() != L + 1) {
        throw std::invalid_argument("tangent cache does not match the architecture");
    }
    if (!param_grads) return;
    *param_grads = zero_grads(spec);

    std::vector<double> abar = upstream_g;
    std::vector<double> tbar = upstream_t;
    bool tangent_active = true;
    std::vector<double> zbar, tzbar, abar_prev, tbar_prev;

    for (std::size_t li = L; li-- > 0;) {
        if (static_cast<int>(li + 1) == k_inj) {
            // Crossing the injected interface: the primal adjoint passes
            // through the injection map, the tangent seed contributes its
            // parameter-dependent part (only multiplicative seeds depend on
            // the interface values), and the tangent stops below.
            if (cache.kind == PerturbKind::Multiplicative) {
                for (std::size_t i = 0; i < abar.size(); ++i) {
                    abar[i] = abar[i] * cache.xi[i] + tbar[i] * tcache.dir[i];
                }
            }
            tangent_active = false;
        }
        std::size_t nin = spec.widths[li], nout = spec.widths[li + 1];
        if (li + 1 < L) {
            zbar.resize(abar.size());
            for (std::size_t i = 0; i < abar.size(); ++i) {
                double zb = abar[i] * elu_d1(cache.zs[li][i]);
                if (tangent_active) {
                    zb += tbar[i] * elu_d2(cache.zs[li][i]) * tcache.t_zs[li][i];
                }
                zbar[i] = zb;
            }
        } else {
            zbar = abar;
        }
        accumulate_param_grads(zbar, cache.acts[li], bsz, nin, nout,
                               param_grads->w[li], &param_grads->b[li]);
        linear_backward_input(params.w[li], zbar, bsz, nin, nout, abar_prev);

        if (tangent_active) {
            if (li + 1 < L) {
                tzbar.resize(tbar.size());
                for (std::size_t i = 0; i < tbar.size(); ++i) {
                    tzbar[i] = tbar[i] * elu_d1(cache.zs[li][i]);
                }
            } else {
                tzbar = tbar;
            }
            accumulate_param_grads(tzbar, tcache.t_acts[li], bsz, nin, nout,
                                   param_grads->w[li], nullptr);
            linear_backward_input(params.w[li], tzbar, bsz, nin, nout, tbar_prev);
            tbar = tbar_prev;
        }
        abar = abar_prev;
    }
    // An injection at the raw-input interface leaves no parameters below the
    // tangent seed, so no extra contribution arises there.
}

OptimizerState init_optimizer(const MlpSpec& spec, const AdamWConfig& cfg) {
    OptimizerState s;
    s.cfg = cfg;
    Grads z = zero_grads(spec);
    s.m_w = z.w;
    s.v_w = z.w;
    s.m_b = z.b;
    s.v_b = z.b;
    return s;
}

namespace {

void adamw_tensor(std::vector<double>& theta, const std::vector<double>& g,
                  std::vector<double>& m, std::vector<double>& v,
                  const AdamWConfig& cfg, double bc1, double bc2) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        theta[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                              cfg.weight_decay * theta[i]);
    }
}

} // namespace

void adamw_step(MlpParams& params, const Grads& grads, OptimizerState& state) {
    if (params.w.size() != grads.w.size() || params.w.size() != state.m_w.size()) {
        throw std::invalid_argument("optimizer state does not match the parameters");
    }
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.cfg.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(state.cfg.beta2, double(state.step));
    for (std::size_t l = 0; l < params.w.size(); ++l) {
        adamw_tensor(params.w[l], grads.w[l], state.m_w[l], state.v_w[l], state.cfg, bc1, bc2);
        adamw_tensor(params.b[l], grads.b[l], state.m_b[l], state.v_b[l], state.cfg, bc1, bc2);
    }
}

EmaState init_ema(const MlpParams& params, double kappa) {
    if (!(kappa >= 0.0) || !(kappa <= 1.0)) {
        throw std::invalid_argument("EMA decay must lie in [0, 1]");
    }
    EmaState e;
    e.kappa = kappa;
    e.w = params.w;
    e.b = params.b;
    return e;
}

void ema_update(EmaState& ema, const MlpParams& params) {
    if (ema.w.size() != params.w.size()) {
        throw std::invalid_argument("EMA shadow does not match the parameters");
    }
    for (std::size_t l = 0; l < params.w.size(); ++l) {
        for (std::size_t i = 0; i < params.w[l].size(); ++i) {
            ema.w[l][i] = ema.kappa * ema.w[l][i] + (1.0 - ema.kappa) * params.w[l][i];
        }
        for (std::size_t i = 0; i < params.b[l].size(); ++i) {
            ema.b[l][i] = ema.kappa * ema.b[l][i] + (1.0 - ema.kappa) * params.b[l][i];
        }
    }
}

MlpParams ema_params(const EmaState& ema) {
    MlpParams p;
    p.w = ema.w;
    p.b = ema.b;
    return p;
}

void save_checkpoint(const MlpParams& params, const std::string& path) {
    std::ofstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open '" + path + "' for writing");
    std::ostringstream manifest;
    manifest << "{\n  \"layers\": [";
    for (std::size_t l = 0; l < params.w.size(); ++l) {
        std::size_t nout = params.b[l].size();
        std::size_t nin = nout ? params.w[l].size() / nout : 0;
        if (nin * nout != params.w[l].size()) {
            throw std::invalid_argument("parameter shapes are not rectangular");
        }
        manifest << (l ? ", " : "") << "{\"out\": " << nout << ", \"in\": " << nin << "}";
        bin.write(reinterpret_cast<const char*>(params.w[l].data()),
                  std::streamsize(params.w[l].size() * sizeof(double)));
        bin.write(reinterpret_cast<const char*>(params.b[l].data()),
                  std::streamsize(params.b[l].size() * sizeof(double)));
    }
    manifest << "]\n}\n";
    std::ofstream meta(path + ".shape.json");
    if (!meta) throw std::runtime_error("cannot open '" + path + ".shape.json' for writing");
    meta << manifest.str();
}

MlpParams load_checkpoint(const std::string& path) {
    std::ifstream meta(path + ".shape.json");
    if (!meta) throw std::runtime_error("cannot open '" + path + ".shape.json'");
    std::string blob((std::istreambuf_iterator<char>(meta)), {});

    // Minimal parse of {"out": o, "in": i} pairs, in order.
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    std::size_t pos = 0;
    while ((pos = blob.find("\"out\"", pos)) != std::string::npos) {
        std::size_t out_v = 0, in_v = 0;
        if (std::sscanf(blob.c_str() + pos, "\"out\": %zu, \"in\": %zu", &out_v, &in_v) != 2) {
            throw std::runtime_error("malformed shape manifest for '" + path + "'");
        }
        shapes.emplace_back(out_v, in_v);
        ++pos;
    }
    if (shapes.empty()) throw std::runtime_error("empty shape manifest for '" + path + "'");

    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open '" + path + "'");
    MlpParams p;
    for (auto [nout, nin] : shapes) {
        std::vector<double> w(nout * nin), b(nout);
        bin.read(reinterpret_cast<char*>(w.data()), std::streamsize(w.size() * sizeof(double)));
        bin.read(reinterpret_cast<char*>(b.data()), std::streamsize(b.size() * sizeof(double)));
        if (!bin) throw std::runtime_error("checkpoint '" + path + "' is shorter than its manifest");
        p.w.push_back(std::move(w));
        p.b.push_back(std::move(b));
    }
    char extra;
    if (bin.read(&extra, 1)) {
        throw std::runtime_error("checkpoint '" + path + "' is longer than its manifest");
    }
    return p;
}

} // namespace oar
