#include "oar/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace oar {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/** Run fn(i) for i in [0, count) on a pool of `jobs` workers. */
template <typename Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count == 0 ? 1 : count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (std::size_t t = 0; t < jobs; ++t)
        workers.emplace_back([&]() {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        });
    for (auto& w : workers) w.join();
}

nlohmann::json result_json(const RunResult& r) {
    return nlohmann::json{{"fingerprint", r.fingerprint}, {"seed", r.seed},
                          {"rpehe_out", r.rpehe_out},     {"rpehe_in", r.rpehe_in},
                          {"wall_seconds", r.wall_seconds}, {"failed", r.failed},
                          {"error", r.error}};
}

RunResult result_from_json(const nlohmann::json& j) {
    RunResult r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.rpehe_out = j.at("rpehe_out").get<double>();
    r.rpehe_in = j.at("rpehe_in").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.failed = j.at("failed").get<bool>();
    r.error = j.at("error").get<std::string>();
    return r;
}

std::string cell_display_name(const std::string& fingerprint) {
    std::size_t bar = fingerprint.find('|');
    return bar == std::string::npos ? fingerprint : fingerprint.substr(0, bar);
}

/** Everything one seed's tasks share: the draws and the nuisance fits. */
struct SeedContext {
    Dataset train;
    Dataset test;
    NuisanceEstimates fitted;
    bool has_fitted = false;
    std::string fit_error;  // stage-1 failure, reported by every estimated cell
    NuisanceEstimates oracle;
    bool has_oracle = false;
};

struct MeanSd {
    std::size_t n = 0;
    double mean = 0.0;
    double sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& values) {
    MeanSd out;
    out.n = values.size();
    if (out.n == 0) return out;
    double acc = 0.0;
    for (double v : values) acc += v;
    out.mean = acc / static_cast<double>(out.n);
    if (out.n >= 2) {
        double sq = 0.0;
        for (double v : values) sq += (v - out.mean) * (v - out.mean);
        out.sd = std::sqrt(sq / static_cast<double>(out.n - 1));
    }
    return out;
}

} // namespace

double rpehe(const std::vector<double>& estimates, const std::vector<double>& oracle_cate) {
    if (oracle_cate.empty())
        throw std::invalid_argument("rpehe: oracle effects are missing");
    if (estimates.size() != oracle_cate.size())
        throw std::invalid_argument("rpehe: estimate and oracle lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        double diff = estimates[i] - oracle_cate[i];
        acc += diff * diff;
    }
    return std::sqrt(acc / static_cast<double>(estimates.size()));
}

std::string cell_fingerprint(const ExperimentConfig& config, const ExperimentCell& cell) {
    std::ostringstream ss;
    ss << cell.name << "|learner=" << to_string(cell.learner)
       << "|mode=" << static_cast<int>(cell.reg.mode)
       << "|kind=" << static_cast<int>(cell.reg.kind)
       << "|base=" << fmt_double(cell.reg.base)
       << "|gamma=" << fmt_double(cell.reg.gamma)
       << "|trim=" << fmt_double(cell.reg.trim_lo)
       << "|clip=" << fmt_double(cell.reg.clip_alpha)
       << "|inj=" << to_string(cell.injector)
       << "|oracle=" << (cell.oracle_nuisance ? 1 : 0)
       << "|n=" << config.data.n << "|b=" << fmt_double(config.data.b)
       << "|ntest=" << config.n_test << "|toff=" << config.test_seed_offset
       << "|s1=" << config.stage1.prop_hidden << "," << config.stage1.repr_width << ","
       << config.stage1.head_hidden << "," << config.stage1.epochs << ","
       << config.stage1.batch << "," << fmt_double(config.stage1.lr) << ","
       << fmt_double(config.stage1.weight_decay) << "," << config.stage1.cross_fit_folds
       << "|s1p=" << config.stage1.prop_batch << "," << fmt_double(config.stage1.prop_lr)
       << "," << fmt_double(config.stage1.prop_weight_decay)
       << "|s2=";
    for (std::size_t i = 0; i < config.stage2.target.widths.size(); ++i)
        ss << (i ? "-" : "") << config.stage2.target.widths[i];
    ss << "@" << config.stage2.target.injection_index << "," << config.stage2.epochs << ","
       << config.stage2.batch << "," << fmt_double(config.stage2.lr) << ","
       << fmt_double(config.stage2.weight_decay) << "," << fmt_double(config.stage2.kappa)
       << "," << (config.stage2.noise_linear_scale ? 1 : 0) << ","
       << (config.stage2.strict_drop ? 1 : 0);
    return ss.str();
}

std::vector<ExperimentCell> default_cells() {
    std::vector<ExperimentCell> cells;
    auto add = [&cells](const std::string& name, RegMode mode, Injector inj, double base,
                        bool oracle) {
        ExperimentCell c;
        c.name = name;
        c.learner = Learner::DR;
        c.reg.kind = RegKind::Multiplicative;
        c.reg.mode = mode;
        c.reg.base = base;
        c.reg.gamma = 1.0;
        c.injector = inj;
        c.oracle_nuisance = oracle;
        cells.push_back(c);
    };
    add("cr_dropout", RegMode::CR, Injector::Dropout, 0.5, false);
    add("oar_dropout", RegMode::OAR, Injector::Dropout, 0.5, false);
    add("doar_dropout", RegMode::dOAR, Injector::Dropout, 0.5, false);
    add("cr_noise", RegMode::CR, Injector::NoiseReg, 1.0, false);
    add("oar_noise", RegMode::OAR, Injector::NoiseReg, 1.0, false);
    add("doar_noise", RegMode::dOAR, Injector::NoiseReg, 1.0, false);
    add("oracle", RegMode::OAR, Injector::Dropout, 0.5, true);
    return cells;
}

std::vector<RunResult> load_results(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_results: cannot open " + path);
    std::vector<RunResult> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(result_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error("load_results: malformed line " +
                                     std::to_string(line_no) + " in " + path + ": " +
                                     e.what());
        }
    }
    return out;
}

std::vector<RunResult> run_experiment(const ExperimentConfig& config) {
    if (config.cells.empty())
        throw std::invalid_argument("run_experiment: no grid cells");
    if (config.n_seeds == 0)
        throw std::invalid_argument("run_experiment: n_seeds must be positive");
    {
        std::set<std::string> names;
        for (const auto& c : config.cells) {
            if (c.name.empty() || c.name.find('|') != std::string::npos)
                throw std::invalid_argument("run_experiment: cell names must be non-empty "
                                            "and free of '|'");
            if (!names.insert(c.name).second)
                throw std::invalid_argument("run_experiment: duplicate cell name " + c.name);
            if (c.reg.trim_lo != config.cells.front().reg.trim_lo)
                throw std::invalid_argument(
                    "run_experiment: all cells must share one trimming threshold because "
                    "stage 1 is fit once per seed");
        }
    }
    double trim_lo = config.cells.front().reg.trim_lo;

    std::vector<std::string> fingerprints(config.cells.size());
    for (std::size_t c = 0; c < config.cells.size(); ++c)
        fingerprints[c] = cell_fingerprint(config, config.cells[c]);

    // Previously persisted tasks are reused, never recomputed.
    std::map<std::pair<std::string, std::uint64_t>, RunResult> done;
    if (!config.results_path.empty()) {
        std::ifstream probe(config.results_path);
        if (probe.good()) {
            probe.close();
            for (RunResult& r : load_results(config.results_path))
                done.emplace(std::make_pair(r.fingerprint, r.seed), std::move(r));
        }
    }

    struct Task {
        std::size_t seed_index;
        std::size_t cell_index;
        std::uint64_t seed;
        bool resumed;
    };
    std::vector<Task> tasks;
    tasks.reserve(config.n_seeds * config.cells.size());
    std::vector<RunResult> results(config.n_seeds * config.cells.size());
    std::vector<bool> seed_needs_fit(config.n_seeds, false);
    std::vector<bool> seed_needs_oracle(config.n_seeds, false);
    std::vector<bool> seed_needs_data(config.n_seeds, false);
    for (std::size_t si = 0; si < config.n_seeds; ++si) {
        std::uint64_t seed = config.seed0 + si;
        for (std::size_t ci = 0; ci < config.cells.size(); ++ci) {
            Task t{si, ci, seed, false};
            auto hit = done.find(std::make_pair(fingerprints[ci], seed));
            if (hit != done.end()) {
                results[si * config.cells.size() + ci] = hit->second;
                t.resumed = true;
            } else {
                seed_needs_data[si] = true;
                if (config.cells[ci].oracle_nuisance)
                    seed_needs_oracle[si] = true;
                else
                    seed_needs_fit[si] = true;
            }
            tasks.push_back(t);
        }
    }

    // Phase 1: per-seed draws and nuisance fits, shared by that seed's cells.
    std::vector<SeedContext> contexts(config.n_seeds);
    std::vector<std::size_t> active_seeds;
    for (std::size_t si = 0; si < config.n_seeds; ++si)
        if (seed_needs_data[si]) active_seeds.push_back(si);
    parallel_for(active_seeds.size(), config.jobs, [&](std::size_t k) {
        std::size_t si = active_seeds[k];
        std::uint64_t seed = config.seed0 + si;
        SeedContext& ctx = contexts[si];
        SyntheticConfig train_cfg = config.data;
        train_cfg.seed = seed;
        ctx.train = generate_synthetic(train_cfg);
        SyntheticConfig test_cfg = config.data;
        test_cfg.n = config.n_test;
        test_cfg.seed = seed + config.test_seed_offset;
        ctx.test = generate_synthetic(test_cfg);
        if (seed_needs_oracle[si]) {
            ctx.oracle = oracle_nuisance_synthetic(ctx.train, trim_lo);
            ctx.has_oracle = true;
        }
        if (seed_needs_fit[si]) {
            try {
                StageOneConfig s1 = config.stage1;
                s1.seed = seed;
                ctx.fitted = estimate_nuisances(ctx.train, s1, trim_lo);
                ctx.has_fitted = true;
            } catch (const std::exception& e) {
                ctx.fit_error = std::string("stage-1 fit failed: ") + e.what();
            }
        }
    });

    // Phase 2: one task per (cell, seed), appended to the sink as they finish.
    std::ofstream sink;
    std::mutex sink_mutex;
    if (!config.results_path.empty()) {
        sink.open(config.results_path, std::ios::app);
        if (!sink)
            throw std::runtime_error("run_experiment: cannot open results file " +
                                     config.results_path);
    }
    parallel_for(tasks.size(), config.jobs, [&](std::size_t ti) {
        const Task& task = tasks[ti];
        if (task.resumed) return;
        const ExperimentCell& cell = config.cells[task.cell_index];
        const SeedContext& ctx = contexts[task.seed_index];
        RunResult r;
        r.fingerprint = fingerprints[task.cell_index];
        r.seed = task.seed;
        auto started = std::chrono::steady_clock::now();
        try {
            const NuisanceEstimates* est = nullptr;
            if (cell.oracle_nuisance) {
                est = &ctx.oracle;
            } else if (ctx.has_fitted) {
                est = &ctx.fitted;
            } else {
                throw std::runtime_error(ctx.fit_error.empty() ? "stage-1 fit unavailable"
                                                               : ctx.fit_error);
            }
            SecondStageSpec spec = config.stage2;
            if (spec.target.widths.empty()) {
                spec.target.widths = {ctx.train.d, 48, 48, 1};
                spec.target.injection_index = 1;
            }
            spec.learner = cell.learner;
            spec.reg = cell.reg;
            spec.injector = cell.injector;
            spec.seed = task.seed;
            TrainedTarget model = fit_target(ctx.train, *est, spec);
            r.rpehe_out = rpehe(predict_cate(model, ctx.test), ctx.test.oracle_cate);
            r.rpehe_in = rpehe(predict_cate(model, ctx.train), ctx.train.oracle_cate);
        } catch (const std::exception& e) {
            r.failed = true;
            r.error = e.what();
        } catch (...) {
            r.failed = true;
            r.error = "unknown error";
        }
        r.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                .count();
        results[ti] = r;
        if (sink.is_open()) {
            std::lock_guard<std::mutex> lock(sink_mutex);
            sink << result_json(r).dump() << "\n";
            sink.flush();
        }
    });
    return results;
}

std::vector<SummaryRow> summarize(const std::vector<RunResult>& results,
                                  const std::string& baseline_name) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<double>> values;
    std::map<std::string, std::size_t> failures;
    for (const RunResult& r : results) {
        if (values.find(r.fingerprint) == values.end()) {
            order.push_back(r.fingerprint);
            values[r.fingerprint] = {};
            failures[r.fingerprint] = 0;
        }
        if (r.failed)
            ++failures[r.fingerprint];
        else
            values[r.fingerprint].push_back(r.rpehe_out);
    }

    std::vector<SummaryRow> rows;
    const SummaryRow* baseline = nullptr;
    for (const std::string& fp : order) {
        SummaryRow row;
        row.fingerprint = fp;
        row.name = cell_display_name(fp);
        row.n_failed = failures[fp];
        MeanSd ms = mean_sd(values[fp]);
        row.n = ms.n;
        row.mean = ms.mean;
        row.sd = ms.sd;
        row.se = ms.n > 0 ? ms.sd / std::sqrt(static_cast<double>(ms.n)) : 0.0;
        rows.push_back(row);
    }
    for (const SummaryRow& row : rows)
        if (row.name == baseline_name) {
            baseline = &row;
            break;
        }
    if (!baseline)
        throw std::invalid_argument("summarize: baseline cell '" + baseline_name +
                                    "' not present in the results");
    double base_mean = baseline->mean;
    for (SummaryRow& row : rows) row.delta = row.mean - base_mean;
    return rows;
}

PairedDelta paired_delta(const std::vector<RunResult>& results, const std::string& name_a,
                         const std::string& name_b) {
    std::map<std::uint64_t, double> a, b;
    for (const RunResult& r : results) {
        if (r.failed) continue;
        std::string name = cell_display_name(r.fingerprint);
        if (name == name_a) a[r.seed] = r.rpehe_out;
        if (name == name_b) b[r.seed] = r.rpehe_out;
    }
    std::vector<double> diffs;
    for (const auto& [seed, va] : a) {
        auto hit = b.find(seed);
        if (hit != b.end()) diffs.push_back(va - hit->second);
    }
    PairedDelta out;
    MeanSd ms = mean_sd(diffs);
    out.n = ms.n;
    out.mean_diff = ms.mean;
    out.sd_diff = ms.sd;
    if (ms.n >= 2 && ms.sd > 0.0)
        out.t_stat = ms.mean / (ms.sd / std::sqrt(static_cast<double>(ms.n)));
    return out;
}

std::string summary_table(const std::vector<SummaryRow>& rows) {
    std::ostringstream ss;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-16s %5s %5s %10s %10s %10s %10s\n", "cell", "n",
                  "fail", "mean", "sd", "se", "delta");
    ss << buf;
    for (const SummaryRow& row : rows) {
        std::snprintf(buf, sizeof buf, "%-16s %5zu %5zu %10.4f %10.4f %10.4f %+10.4f\n",
                      row.name.c_str(), row.n, row.n_failed, row.mean, row.sd, row.se,
                      row.delta);
        ss << buf;
    }
    return ss.str();
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream ss;
    ss << "cell,n,n_failed,mean,sd,se,delta_vs_baseline\n";
    for (const SummaryRow& row : rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.17g,%.17g,%.17g,%.17g\n",
                      row.name.c_str(), row.n, row.n_failed, row.mean, row.sd, row.se,
                      row.delta);
        ss << buf;
    }
    return ss.str();
}

} // namespace oar
