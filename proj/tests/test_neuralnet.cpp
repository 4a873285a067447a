#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <oar/neuralnet.hpp>
#include <oar/rng.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

using namespace oar;

namespace {

struct Instance {
    MlpSpec spec;
    MlpParams params;
    std::vector<double> x;
    std::size_t bsz = 0;
    PerturbKind kind = PerturbKind::None;
    std::vector<double> xi;
};

/**
 * Random architecture whose cached pre-activations stay away from the ELU
 * kink, so finite differences with step 1e-5 never cross a branch.
 */
Instance random_instance(Philox& rng, PerturbKind kind) {
    Instance inst;
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::size_t depth = 1 + rng.uniform_index(4);
        inst.spec.widths.clear();
        for (std::size_t k = 0; k <= depth; ++k) {
            inst.spec.widths.push_back(1 + rng.uniform_index(6));
        }
        inst.spec.injection_index =
            kind == PerturbKind::None ? -1 : int(rng.uniform_index(depth));
        inst.bsz = 1 + rng.uniform_index(8);
        inst.params = init_params(inst.spec, rng);
        inst.x.resize(inst.bsz * inst.spec.widths[0]);
        for (auto& v : inst.x) v = rng.normal();
        inst.kind = kind;
        if (kind != PerturbKind::None) {
            std::size_t kw = inst.spec.widths[std::size_t(inst.spec.injection_index)];
            inst.xi.resize(inst.bsz * kw);
            for (auto& v : inst.xi) {
                v = kind == PerturbKind::Additive ? 0.3 * rng.normal()
                                                  : 0.5 + rng.uniform();
            }
        }
        ForwardCache cache;
        forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind,
                inst.kind == PerturbKind::None ? nullptr : &inst.xi, &cache);
        bool safe = true;
        for (const auto& z : cache.zs) {
            for (double v : z) safe = safe && std::abs(v) > 1e-3;
        }
        if (safe) return inst;
    }
    REQUIRE_MESSAGE(false, "could not build a kink-safe random architecture");
    return inst;
}

double quadratic_loss(const Instance& inst, const MlpParams& params) {
    auto out = forward(inst.spec, params, inst.x, inst.bsz, inst.kind,
                       inst.kind == PerturbKind::None ? nullptr : &inst.xi, nullptr);
    double loss = 0.0;
    for (double v : out) loss += 0.5 * v * v;
    return loss;
}

} // namespace

TEST_CASE("single linear layer computes W x + b") {
    MlpSpec spec{{3, 2}, -1};
    MlpParams p;
    p.w = {{1.0, -2.0, 0.5, 0.0, 3.0, 1.0}};
    p.b = {{0.25, -1.0}};
    std::vector<double> x = {1.0, 2.0, 4.0};
    auto out = forward(spec, p, x, 1);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == doctest::Approx(1.0 - 4.0 + 2.0 + 0.25).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(6.0 + 4.0 - 1.0).epsilon(1e-15));
}

TEST_CASE("neutral perturbations do not change the forward pass") {
    Philox rng(1);
    auto inst = random_instance(rng, PerturbKind::Additive);
    auto base = forward(inst.spec, inst.params, inst.x, inst.bsz);

    std::vector<double> zeros(inst.xi.size(), 0.0);
    auto with_zero = forward(inst.spec, inst.params, inst.x, inst.bsz,
                             PerturbKind::Additive, &zeros, nullptr);
    CHECK(with_zero == base);

    std::vector<double> ones(inst.xi.size(), 1.0);
    auto with_ones = forward(inst.spec, inst.params, inst.x, inst.bsz,
                             PerturbKind::Multiplicative, &ones, nullptr);
    CHECK(with_ones == base);
}

TEST_CASE("shape mismatches are rejected") {
    MlpSpec spec{{2, 3, 1}, 1};
    Philox rng(2);
    auto p = init_params(spec, rng);
    std::vector<double> x = {0.1, 0.2};
    CHECK_THROWS_AS(forward(spec, p, x, 2), std::invalid_argument);
    std::vector<double> bad_xi = {1.0};
    CHECK_THROWS_AS(forward(spec, p, x, 1, PerturbKind::Additive, &bad_xi, nullptr),
                    std::invalid_argument);
    MlpSpec no_iface{{2, 3, 1}, -1};
    std::vector<double> xi3 = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(forward(no_iface, p, x, 1, PerturbKind::Additive, &xi3, nullptr),
                    std::invalid_argument);
    MlpSpec bad_inj{{2, 3, 1}, 2};
    CHECK_THROWS_AS(bad_inj.validate(), std::invalid_argument);
}

TEST_CASE("parameter gradients match central finite differences") {
    Philox rng(3);
    const double h = 1e-5;
    for (int arch = 0; arch < 20; ++arch) {
        PerturbKind kind = arch % 3 == 0 ? PerturbKind::None
                          : arch % 3 == 1 ? PerturbKind::Additive
                                          : PerturbKind::Multiplicative;
        auto inst = random_instance(rng, kind);

        ForwardCache cache;
        auto out = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind,
                           kind == PerturbKind::None ? nullptr : &inst.xi, &cache);
        Grads grads;
        backward(inst.spec, inst.params, cache, out, &grads, nullptr, nullptr);

        double max_rel = 0.0;
        for (std::size_t l = 0; l < inst.params.w.size(); ++l) {
            for (int which = 0; which < 2; ++which) {
                auto& tensor = which ? inst.params.b[l] : inst.params.w[l];
                const auto& g = which ? grads.b[l] : grads.w[l];
                for (std::size_t i = 0; i < tensor.size(); ++i) {
                    MlpParams probe = inst.params;
                    auto& pt = which ? probe.b[l] : probe.w[l];
                    pt[i] = tensor[i] + h;
                    double up = quadratic_loss(inst, probe);
                    pt[i] = tensor[i] - h;
                    double dn = quadratic_loss(inst, probe);
                    double fd = (up - dn) / (2.0 * h);
                    double rel = std::abs(fd - g[i]) / std::max(1.0, std::abs(g[i]));
                    max_rel = std::max(max_rel, rel);
                }
            }
        }
        CHECK(max_rel < 1e-5);
    }
}

TEST_CASE("input and injected gradients match central finite differences") {
    Philox rng(4);
    const double h = 1e-5;
    for (int arch = 0; arch < 12; ++arch) {
        PerturbKind kind = arch % 2 ? PerturbKind::Additive : PerturbKind::Multiplicative;
        auto inst = random_instance(rng, kind);

        ForwardCache cache;
        auto out = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &inst.xi,
                           &cache);
        Grads grads;
        std::vector<double> input_grad, injected_grad;
        backward(inst.spec, inst.params, cache, out, &grads, &input_grad, &injected_grad);

        auto loss_at = [&](const std::vector<double>& x, const std::vector<double>& xi) {
            auto o = forward(inst.spec, inst.params, x, inst.bsz, inst.kind, &xi, nullptr);
            double loss = 0.0;
            for (double v : o) loss += 0.5 * v * v;
            return loss;
        };

        for (std::size_t i = 0; i < inst.x.size(); ++i) {
            auto xp = inst.x, xm = inst.x;
            xp[i] += h;
            xm[i] -= h;
            double fd = (loss_at(xp, inst.xi) - loss_at(xm, inst.xi)) / (2.0 * h);
            CHECK(std::abs(fd - input_grad[i]) <= 1e-5 * std::max(1.0, std::abs(input_grad[i])));
        }
        for (std::size_t i = 0; i < inst.xi.size(); ++i) {
            auto xp = inst.xi, xm = inst.xi;
            xp[i] += h;
            xm[i] -= h;
            double fd = (loss_at(inst.x, xp) - loss_at(inst.x, xm)) / (2.0 * h);
            CHECK(std::abs(fd - injected_grad[i]) <=
                  1e-5 * std::max(1.0, std::abs(injected_grad[i])));
        }
    }
}

TEST_CASE("zero upstream gradient produces zero gradients everywhere") {
    Philox rng(5);
    auto inst = random_instance(rng, PerturbKind::Additive);
    ForwardCache cache;
    auto out = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &inst.xi, &cache);
    std::vector<double> upstream(out.size(), 0.0);
    Grads grads;
    std::vector<double> input_grad, injected_grad;
    backward(inst.spec, inst.params, cache, upstream, &grads, &input_grad, &injected_grad);
    for (const auto& t : grads.w) {
        for (double v : t) CHECK(v == 0.0);
    }
    for (const auto& t : grads.b) {
        for (double v : t) CHECK(v == 0.0);
    }
    for (double v : input_grad) CHECK(v == 0.0);
    for (double v : injected_grad) CHECK(v == 0.0);
}

TEST_CASE("output tangents match finite differences along the injected direction") {
    Philox rng(6);
    const double h = 1e-6;
    for (int arch = 0; arch < 12; ++arch) {
        PerturbKind kind = arch % 2 ? PerturbKind::Additive : PerturbKind::Multiplicative;
        auto inst = random_instance(rng, kind);

        ForwardCache cache;
        forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &inst.xi, &cache);
        std::vector<double> dir(inst.xi.size());
        for (auto& v : dir) v = rng.normal();
        TangentCache tcache;
        auto t_out = forward_tangent(inst.spec, inst.params, cache, dir, &tcache);

        auto xi_p = inst.xi, xi_m = inst.xi;
        for (std::size_t i = 0; i < dir.size(); ++i) {
            xi_p[i] += h * dir[i];
            xi_m[i] -= h * dir[i];
        }
        auto out_p = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &xi_p, nullptr);
        auto out_m = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &xi_m, nullptr);
        for (std::size_t i = 0; i < t_out.size(); ++i) {
            double fd = (out_p[i] - out_m[i]) / (2.0 * h);
            CHECK(std::abs(fd - t_out[i]) <= 1e-5 * std::max(1.0, std::abs(t_out[i])));
        }
    }
}

TEST_CASE("second-order reverse pass matches finite differences of tangent losses") {
    // Loss mixing outputs and their injected-direction tangents, with
    // nonlinear coupling: L = sum_i (alpha_i g_i + beta_i t_i + g_i^2 t_i).
    Philox rng(7);
    const double h = 1e-5;
    for (int arch = 0; arch < 12; ++arch) {
        PerturbKind kind = arch % 2 ? PerturbKind::Additive : PerturbKind::Multiplicative;
        auto inst = random_instance(rng, kind);

        std::vector<double> dir(inst.xi.size());
        for (auto& v : dir) v = rng.normal();
        std::size_t out_n = 0;
        {
            ForwardCache probe;
            out_n = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &inst.xi,
                            &probe).size();
        }
        std::vector<double> alpha(out_n), beta(out_n);
        for (auto& v : alpha) v = rng.normal();
        for (auto& v : beta) v = rng.normal();

        auto loss_at = [&](const MlpParams& params) {
            ForwardCache cache;
            auto g = forward(inst.spec, params, inst.x, inst.bsz, inst.kind, &inst.xi, &cache);
            auto t = forward_tangent(inst.spec, params, cache, dir, nullptr);
            double loss = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                loss += alpha[i] * g[i] + beta[i] * t[i] + g[i] * g[i] * t[i];
            }
            return loss;
        };

        ForwardCache cache;
        auto g = forward(inst.spec, inst.params, inst.x, inst.bsz, inst.kind, &inst.xi, &cache);
        TangentCache tcache;
        auto t = forward_tangent(inst.spec, inst.params, cache, dir, &tcache);
        std::vector<double> ug(out_n), ut(out_n);
        for (std::size_t i = 0; i < out_n; ++i) {
            ug[i] = alpha[i] + 2.0 * g[i] * t[i];
            ut[i] = beta[i] + g[i] * g[i];
        }
        Grads grads;
        backward_second_order(inst.spec, inst.params, cache, tcache, ug, ut, &grads);

        double max_rel = 0.0;
        for (std::size_t l = 0; l < inst.params.w.size(); ++l) {
            for (int which = 0; which < 2; ++which) {
                auto& tensor = which ? inst.params.b[l] : inst.params.w[l];
                const auto& gr = which ? grads.b[l] : grads.w[l];
                for (std::size_t i = 0; i < tensor.size(); ++i) {
                    MlpParams probe = inst.params;
                    auto& pt = which ? probe.b[l] : probe.w[l];
                    pt[i] = tensor[i] + h;
                    double up = loss_at(probe);
                    pt[i] = tensor[i] - h;
                    double dn = loss_at(probe);
                    double fd = (up - dn) / (2.0 * h);
                    double rel = std::abs(fd - gr[i]) / std::max(1.0, std::abs(gr[i]));
                    max_rel = std::max(max_rel, rel);
                }
            }
        }
        CHECK(max_rel < 1e-5);
    }
}

TEST_CASE("optimizer reproduces the closed-form first step") {
    MlpSpec spec{{2, 2}, -1};
    Philox rng(8);
    auto p = init_params(spec, rng);
    auto before = p;

    AdamWConfig cfg;
    cfg.lr = 0.01;
    auto state = init_optimizer(spec, cfg);
    Grads g = zero_grads(spec);
    for (auto& v : g.w[0]) v = rng.normal();
    for (auto& v : g.b[0]) v = rng.normal();
    adamw_step(p, g, state);
    for (std::size_t i = 0; i < p.w[0].size(); ++i) {
        double expect = before.w[0][i] -
                        cfg.lr * g.w[0][i] / (std::abs(g.w[0][i]) + cfg.eps);
        CHECK(p.w[0][i] == doctest::Approx(expect).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < p.b[0].size(); ++i) {
        double expect = before.b[0][i] -
                        cfg.lr * g.b[0][i] / (std::abs(g.b[0][i]) + cfg.eps);
        CHECK(p.b[0][i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("optimizer degenerate updates") {
    MlpSpec spec{{3, 2}, -1};
    Philox rng(9);
    auto p = init_params(spec, rng);
    auto before = p;
    Grads zero = zero_grads(spec);

    AdamWConfig plain;
    auto s1 = init_optimizer(spec, plain);
    adamw_step(p, zero, s1);
    CHECK(p.w == before.w);
    CHECK(p.b == before.b);

    AdamWConfig decay;
    decay.lr = 0.05;
    decay.weight_decay = 0.1;
    auto s2 = init_optimizer(spec, decay);
    adamw_step(p, zero, s2);
    for (std::size_t i = 0; i < p.w[0].size(); ++i) {
        CHECK(p.w[0][i] == doctest::Approx(before.w[0][i] * (1.0 - 0.05 * 0.1)).epsilon(1e-14));
    }
}

TEST_CASE("moving average follows its recurrence") {
    MlpSpec spec{{1, 1}, -1};
    MlpParams p;
    p.w = {{2.0}};
    p.b = {{2.0}};

    auto frozen = init_ema(p, 1.0);
    MlpParams moved;
    moved.w = {{5.0}};
    moved.b = {{-3.0}};
    ema_update(frozen, moved);
    CHECK(frozen.w[0][0] == 2.0);

    auto tracking = init_ema(p, 0.0);
    ema_update(tracking, moved);
    CHECK(tracking.w[0][0] == 5.0);
    CHECK(tracking.b[0][0] == -3.0);

    EmaState half;
    half.kappa = 0.5;
    half.w = {{0.0}};
    half.b = {{0.0}};
    ema_update(half, p);
    CHECK(half.w[0][0] == 1.0);

    auto copied = init_ema(p, 0.995);
    CHECK(ema_params(copied).w == p.w);
}

TEST_CASE("checkpoints round-trip bitwise") {
    Philox rng(10);
    MlpSpec spec{{4, 3, 2}, -1};
    auto p = init_params(spec, rng);
    std::string path = "/tmp/oar_nn_test_ckpt.bin";
    save_checkpoint(p, path);
    auto back = load_checkpoint(path);
    CHECK(back.w == p.w);
    CHECK(back.b == p.b);
    std::remove(path.c_str());
    std::remove((path + ".shape.json").c_str());
    CHECK_THROWS_AS(load_checkpoint("/tmp/oar_nn_test_missing.bin"), std::runtime_error);
}

TEST_CASE("training steps are deterministic for a fixed seed") {
    MlpSpec spec{{2, 4, 1}, 0};
    auto run = [&]() {
        Philox rng(77);
        auto p = init_params(spec, rng);
        auto state = init_optimizer(spec, AdamWConfig{});
        std::vector<double> x = {0.3, -0.2, 1.0, 0.4, -0.7, 0.9};
        for (int step = 0; step < 25; ++step) {
            ForwardCache cache;
            auto out = forward(spec, p, x, 3, PerturbKind::None, nullptr, &cache);
            Grads g;
            backward(spec, p, cache, out, &g, nullptr, nullptr);
            adamw_step(p, g, state);
        }
        return p;
    };
    auto a = run();
    auto b = run();
    CHECK(a.w == b.w);
    CHECK(a.b == b.b);
}
