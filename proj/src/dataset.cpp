#include "oar/dataset.hpp"

#include "oar/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace oar {

namespace {

void check_invariants(const Dataset& ds) {
    if (ds.d == 0) throw std::invalid_argument("dataset needs at least one covariate");
    if (ds.x.size() != ds.n * ds.d || ds.a.size() != ds.n || ds.y.size() != ds.n) {
        throw std::invalid_argument("dataset row counts are inconsistent");
    }
    if (!ds.oracle_cate.empty() && ds.oracle_cate.size() != ds.n) {
        throw std::invalid_argument("oracle effect column has the wrong length");
    }
    if (!ds.oracle_pi.empty() && ds.oracle_pi.size() != ds.n) {
        throw std::invalid_argument("oracle propensity column has the wrong length");
    }
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string trim_ws(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_cell(const std::string& raw, std::size_t row, const std::string& col) {
    std::string s = trim_ws(raw);
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw CsvError("row " + std::to_string(row) + ": cell '" + raw +
                       "' in column '" + col + "' is not a number", row);
    }
    if (std::isnan(value)) {
        throw CsvError("row " + std::to_string(row) + ": column '" + col + "' is NaN", row);
    }
    return value;
}

} // namespace

double synthetic_pi(double x, double b) {
    // Density ratio of the two mixture components collapses to a logistic form.
    return 1.0 / (1.0 + std::exp(-0.5 * b * (b - 2.0 * x)));
}

double synthetic_outcome_mean(double x) {
    double phase = 3.0 * x * x - 2.0 * x + 0.5;
    return 3.0 * std::cos(phase) - 2.5 * std::sin(phase);
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n < 2) throw std::invalid_argument("synthetic datasets need n >= 2");
    Dataset ds;
    ds.n = cfg.n;
    ds.d = 1;
    ds.seed = cfg.seed;
    ds.x.resize(cfg.n);
    ds.a.resize(cfg.n);
    ds.y.resize(cfg.n);
    ds.oracle_cate.assign(cfg.n, 0.0);
    ds.oracle_pi.resize(cfg.n);

    Philox rng(cfg.seed);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        int comp = rng.bernoulli(0.5);
        double x = rng.normal() + (comp ? cfg.b : 0.0);
        double pi = synthetic_pi(x, cfg.b);
        int a = rng.bernoulli(pi);
        double y = synthetic_outcome_mean(x) + rng.normal();
        ds.x[i] = x;
        ds.a[i] = static_cast<std::uint8_t>(a);
        ds.y[i] = y;
        ds.oracle_pi[i] = pi;
    }
    return ds;
}

void save_csv(const Dataset& ds, const std::string& path, const std::string& config_json) {
    check_invariants(ds);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");

    for (std::size_t j = 0; j < ds.d; ++j) out << "x" << j << ",";
    out << "a,y";
    if (ds.has_oracle_cate()) out << ",oracle_cate";
    if (ds.has_oracle_pi()) out << ",oracle_pi";
    out << "\n";

    for (std::size_t i = 0; i < ds.n; ++i) {
        for (std::size_t j = 0; j < ds.d; ++j) out << format_double(ds.x_at(i, j)) << ",";
        out << int(ds.a[i]) << "," << format_double(ds.y[i]);
        if (ds.has_oracle_cate()) out << "," << format_double(ds.oracle_cate[i]);
        if (ds.has_oracle_pi()) out << "," << format_double(ds.oracle_pi[i]);
        out << "\n";
    }
    out.close();

    std::ofstream meta(path + ".meta.json");
    if (!meta) throw std::runtime_error("cannot open '" + path + ".meta.json' for writing");
    meta << "{\n  \"seed\": " << ds.seed << ",\n  \"n\": " << ds.n
         << ",\n  \"d\": " << ds.d;
    if (!config_json.empty()) meta << ",\n  \"config\": " << config_json;
    meta << "\n}\n";
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    if (schema.x.empty()) throw std::invalid_argument("schema needs at least one covariate column");
    std::ifstream in(path);
    if (!in) throw CsvError("cannot open '" + path + "'", 0);

    std::string line;
    if (!std::getline(in, line)) throw CsvError("'" + path + "' is empty", 0);
    auto header = split_line(line);
    for (auto& h : header) h = trim_ws(h);

    auto column_index = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw CsvError("missing column '" + name + "' in '" + path + "'", 0);
        }
        return static_cast<std::size_t>(it - header.begin());
    };

    std::vector<std::size_t> x_idx;
    for (const auto& name : schema.x) x_idx.push_back(column_index(name));
    std::size_t a_idx = column_index(schema.a);
    std::size_t y_idx = column_index(schema.y);
    std::size_t cate_idx = schema.oracle_cate.empty() ? 0 : column_index(schema.oracle_cate);
    std::size_t pi_idx = schema.oracle_pi.empty() ? 0 : column_index(schema.oracle_pi);

    Dataset ds;
    ds.d = schema.x.size();
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim_ws(line).empty()) continue;
        ++row;
        auto cells = split_line(line);
        if (cells.size() != header.size()) {
            throw CsvError("row " + std::to_string(row) + ": expected " +
                           std::to_string(header.size()) + " cells, got " +
                           std::to_string(cells.size()), row);
        }
        for (std::size_t j = 0; j < ds.d; ++j) {
            ds.x.push_back(parse_cell(cells[x_idx[j]], row, schema.x[j]));
        }
        std::string a_cell = trim_ws(cells[a_idx]);
        if (a_cell == "0") {
            ds.a.push_back(0);
        } else if (a_cell == "1") {
            ds.a.push_back(1);
        } else {
            throw CsvError("row " + std::to_string(row) + ": treatment '" + a_cell +
                           "' is not the literal 0 or 1", row);
        }
        ds.y.push_back(parse_cell(cells[y_idx], row, schema.y));
        if (!schema.oracle_cate.empty()) {
            ds.oracle_cate.push_back(parse_cell(cells[cate_idx], row, schema.oracle_cate));
        }
        if (!schema.oracle_pi.empty()) {
            double pi = parse_cell(cells[pi_idx], row, schema.oracle_pi);
            if (!(pi > 0.0) || !(pi < 1.0)) {
                throw CsvError("row " + std::to_string(row) +
                               ": oracle propensity must lie inside (0, 1)", row);
            }
            ds.oracle_pi.push_back(pi);
        }
        ++ds.n;
    }
    if (ds.n == 0) throw CsvError("'" + path + "' has no data rows", 0);
    check_invariants(ds);
    return ds;
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
    check_invariants(ds);
    Dataset out;
    out.d = ds.d;
    out.n = idx.size();
    out.seed = ds.seed;
    out.x.reserve(idx.size() * ds.d);
    for (std::size_t i : idx) {
        if (i >= ds.n) throw std::out_of_range("subset index beyond dataset rows");
        for (std::size_t j = 0; j < ds.d; ++j) out.x.push_back(ds.x_at(i, j));
        out.a.push_back(ds.a[i]);
        out.y.push_back(ds.y[i]);
        if (ds.has_oracle_cate()) out.oracle_cate.push_back(ds.oracle_cate[i]);
        if (ds.has_oracle_pi()) out.oracle_pi.push_back(ds.oracle_pi[i]);
    }
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction,
                                  std::uint64_t seed) {
    check_invariants(ds);
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0)) {
        throw std::invalid_argument("test fraction must lie strictly inside (0, 1)");
    }
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * double(ds.n)));
    if (n_test == 0 || n_test >= ds.n) {
        throw std::invalid_argument("test fraction leaves an empty split");
    }

    std::vector<std::size_t> idx(ds.n);
    std::iota(idx.begin(), idx.end(), 0);
    Philox rng(seed);
    for (std::size_t i = ds.n - 1; i > 0; --i) {
        std::size_t j = rng.uniform_index(i + 1);
        std::swap(idx[i], idx[j]);
    }
    std::vector<std::size_t> test_idx(idx.begin(), idx.begin() + n_test);
    std::vector<std::size_t> train_idx(idx.begin() + n_test, idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    return {subset(ds, train_idx), subset(ds, test_idx)};
}

} // namespace oar
