#pragma once

// Seeded sweeps over grammar parameters and total sample budgets.
//
// For every parameter combination (a cell) and trial t, the grammar, training
// streams and test set come from derive_seed(seed, cell, t), so a trial is
// reproducible on its own and independent of scheduling. Every budget in the
// N grid is trained on the same grammar and test set of that trial.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/grammar.hpp"
#include "rhm/learner.hpp"
#include "rhm/oracle.hpp"
#include "rhm/random.hpp"
#include "rhm/ridge.hpp"

namespace rhm {

struct SweepConfig {
    std::vector<int> L{2}, s{2}, V{8}, m{2};
    std::vector<long long> N{1000};
    int trials = 1;
    std::uint64_t seed = 0;
    int test_size = 1000;
    ScheduleMultipliers multipliers = default_multipliers();
    /// Also fit the single-map baseline on each trial's full training sentences.
    bool shallow = false;
    double shallow_sigma = 2.0;
    double shallow_lambda = 0.0;  // 0 selects 1/(V m)

    static ScheduleMultipliers default_multipliers() {
        ScheduleMultipliers m;
        m.C_sigma = 2.0;
        m.M = 512;
        return m;
    }

    void validate() const {
        if (L.empty() || s.empty() || V.empty() || m.empty() || N.empty())
            throw ParameterError("sweep: every grid must be nonempty");
        if (trials < 1) throw ParameterError("sweep: trials must be >= 1");
        if (test_size < 1) throw ParameterError("sweep: test_size must be >= 1");
        for (long long n : N)
            if (n < 1) throw ParameterError("sweep: budgets must be >= 1");
        for (const auto& p : cells()) p.validate();
    }

    /// Cartesian product in (L, s, V, m) order, L slowest.
    std::vector<RhmParams> cells() const {
        std::vector<RhmParams> out;
        for (int l : L)
            for (int b : s)
                for (int v : V)
                    for (int r : m) out.push_back(RhmParams{l, b, v, r, seed});
        return out;
    }
};

namespace detail {

template <class T>
std::vector<T> grid(const nlohmann::json& j, const char* key, const std::string& path, std::vector<T> fallback) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    const std::string at = path + "." + key;
    if (a.is_number_integer()) return {a.get<T>()};
    if (!a.is_array()) throw ParseError(at + ": expected an integer or an array of integers");
    std::vector<T> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number_integer()) throw ParseError(at + "[" + std::to_string(i) + "]: expected an integer");
        out.push_back(a[i].get<T>());
    }
    return out;
}

}  // namespace detail

inline SweepConfig sweep_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("$: expected an object");
    static const char* known[] = {"L", "s", "V", "m", "N", "trials", "seed", "test_size", "multipliers",
                                  "shallow", "shallow_sigma", "shallow_lambda"};
    for (const auto& [k, v] : j.items())
        if (std::find_if(std::begin(known), std::end(known), [&](const char* x) { return k == x; }) == std::end(known))
            throw ParseError("$." + k + ": unknown field");
    SweepConfig c;
    c.L = detail::grid<int>(j, "L", "$", c.L);
    c.s = detail::grid<int>(j, "s", "$", c.s);
    c.V = detail::grid<int>(j, "V", "$", c.V);
    c.m = detail::grid<int>(j, "m", "$", c.m);
    c.N = detail::grid<long long>(j, "N", "$", c.N);
    if (j.contains("trials")) c.trials = static_cast<int>(detail::as_int(j.at("trials"), "$.trials"));
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned()) throw ParseError("$.seed: expected a nonnegative integer");
        c.seed = j.at("seed").get<std::uint64_t>();
    }
    if (j.contains("test_size")) c.test_size = static_cast<int>(detail::as_int(j.at("test_size"), "$.test_size"));
    if (j.contains("multipliers")) {
        const auto defaults = multipliers_to_json(c.multipliers);
        nlohmann::json merged = defaults;
        merged.update(j.at("multipliers"));
        c.multipliers = multipliers_from_json(merged, "$.multipliers");
    }
    if (j.contains("shallow")) {
        if (!j.at("shallow").is_boolean()) throw ParseError("$.shallow: expected a boolean");
        c.shallow = j.at("shallow").get<bool>();
    }
    for (auto [key, dst] : {std::pair{"shallow_sigma", &c.shallow_sigma}, std::pair{"shallow_lambda", &c.shallow_lambda}}) {
        if (!j.contains(key)) continue;
        if (!j.at(key).is_number()) throw ParseError(std::string("$.") + key + ": expected a number");
        *dst = j.at(key).get<double>();
    }
    try {
        c.validate();
    } catch (const ParameterError& e) {
        throw ParseError(std::string("$: ") + e.what());
    }
    return c;
}

inline nlohmann::json sweep_config_to_json(const SweepConfig& c) {
    return nlohmann::json{{"L", c.L},
                          {"s", c.s},
                          {"V", c.V},
                          {"m", c.m},
                          {"N", c.N},
                          {"trials", c.trials},
                          {"seed", c.seed},
                          {"test_size", c.test_size},
                          {"multipliers", multipliers_to_json(c.multipliers)},
                          {"shallow", c.shallow},
                          {"shallow_sigma", c.shallow_sigma},
                          {"shallow_lambda", c.shallow_lambda}};
}

struct SweepRow {
    RhmParams params;
    int cell = 0;
    long long N_total = 0;
    int trial = 0;
    /// Per-level budgets, levels L..1.
    std::vector<long long> N_level;
    double test_accuracy = 0.0;
    /// Exact decoder on the same test set; 1 by non-ambiguity.
    double oracle_accuracy = 0.0;
    std::optional<double> shallow_accuracy;
    std::vector<LevelDiagnostics> diagnostics;
    /// "ok", or the failure message.
    std::string status = "ok";
    double wall_seconds = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
};

/// Single random-feature map over all s^L one-hots, one ridge regression to the label.
inline double shallow_baseline(std::span<const Sample> train, std::span<const Sample> test, int V, int M,
                               double sigma, double lambda, Stream& rng) {
    if (train.empty()) throw UndefinedModel("shallow baseline: no training samples");
    if (test.empty()) return 0.0;
    const std::size_t len = train.front().tokens.size();
    auto encode = [&](std::span<const Sample> set) {
        RowMatrix H = RowMatrix::Zero(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(len) * V);
        for (std::size_t i = 0; i < set.size(); ++i) {
            if (set[i].tokens.size() != len) throw ShapeError("shallow baseline: ragged sentences");
            for (std::size_t k = 0; k < len; ++k) {
                const Token t = set[i].tokens[k];
                if (t < 0 || t >= V) throw ShapeError("shallow baseline: token outside the vocabulary");
                H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k) * V + t) = 1.0;
            }
        }
        return H;
    };
    const auto map = sample_feature_map(static_cast<int>(len) * V, M, sigma, rng);
    std::vector<int> labels;
    for (const auto& smp : train) labels.push_back(smp.label);
    const RidgeData data = RidgeData::from_samples(map.apply_rows(encode(train)), labels, V);
    const Eigen::MatrixXd W = solve_closed_form(data, lambda);
    const RowMatrix scores = map.apply_rows(encode(test)) * W.transpose();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        Eigen::Index best = 0;
        scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
        hits += static_cast<Token>(best) == test[i].label ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

namespace detail {

enum : std::uint64_t { kGrammarStream = 1, kTestStream = 2, kTrainStream = 3, kShallowStream = 4 };

inline std::vector<SweepRow> run_trial(const SweepConfig& cfg, int cell, const RhmParams& base, int trial) {
    const std::uint64_t trial_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(cell), static_cast<std::uint64_t>(trial));
    RhmParams p = base;
    p.seed = derive_seed(trial_seed, kGrammarStream);
    const RhmInstance inst = sample_instance(p);
    const TransitionStats st = compute_stats(inst);
    const SignalProfile sig = signal_profile(p, st);

    Stream test_rng(derive_seed(trial_seed, kTestStream));
    std::vector<Sample> test;
    for (int i = 0; i < cfg.test_size; ++i) test.push_back(generate_sample(inst, test_rng));
    std::size_t decoded = 0;
    for (const auto& smp : test) decoded += decode(inst, smp.tokens) == smp.label ? 1 : 0;
    const double oracle = static_cast<double>(decoded) / static_cast<double>(test.size());

    std::vector<SweepRow> rows;
    for (std::size_t k = 0; k < cfg.N.size(); ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        SweepRow row;
        row.params = p;
        row.cell = cell;
        row.N_total = cfg.N[k];
        row.trial = trial;
        row.oracle_accuracy = oracle;
        try {
            const auto configs = make_schedule(p, sig, cfg.multipliers, cfg.N[k]);
            for (const auto& c : configs) row.N_level.push_back(c.N);
            Stream rng(derive_seed(trial_seed, kTrainStream, k));
            const TrainedModel model = train_layerwise(inst, configs, rng);
            row.diagnostics = model.diagnostics;
            row.test_accuracy = accuracy(model, test);
        } catch (const Error& e) {
            row.status = e.what();
            row.test_accuracy = 0.0;
        }
        if (cfg.shallow) {
            Stream rng(derive_seed(trial_seed, kShallowStream, k));
            std::vector<Sample> train;
            for (long long i = 0; i < cfg.N[k]; ++i) train.push_back(generate_sample(inst, rng));
            const double lambda = cfg.shallow_lambda > 0 ? cfg.shallow_lambda : 1.0 / (p.V * p.m);
            try {
                row.shallow_accuracy = shallow_baseline(train, test, p.V, cfg.multipliers.M, cfg.shallow_sigma, lambda, rng);
            } catch (const Error& e) {
                if (row.status == "ok") row.status = std::string("shallow: ") + e.what();
            }
        }
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

/// Runs every (cell, trial) on up to `jobs` threads; rows come back in
/// (cell, trial, N) order regardless of the thread count.
inline SweepResult run_sweep(const SweepConfig& cfg, int jobs = 1) {
    cfg.validate();
    const auto cells = cfg.cells();
    const std::size_t tasks = cells.size() * static_cast<std::size_t>(cfg.trials);
    std::vector<std::vector<SweepRow>> slots(tasks);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks; i = next++) {
            const int cell = static_cast<int>(i / static_cast<std::size_t>(cfg.trials));
            const int trial = static_cast<int>(i % static_cast<std::size_t>(cfg.trials));
            slots[i] = detail::run_trial(cfg, cell, cells[static_cast<std::size_t>(cell)], trial);
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(tasks)));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    SweepResult res;
    for (auto& s : slots)
        for (auto& r : s) res.rows.push_back(std::move(r));
    return res;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw EmptyResult("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Smallest grid budget whose median test accuracy over trials reaches `target`
/// for the given cell; nullopt if none does. No interpolation.
inline std::optional<long long> threshold_budget(const SweepResult& res, int cell, double target) {
    std::vector<long long> budgets;
    for (const auto& r : res.rows)
        if (r.cell == cell && std::find(budgets.begin(), budgets.end(), r.N_total) == budgets.end())
            budgets.push_back(r.N_total);
    std::sort(budgets.begin(), budgets.end());
    for (long long n : budgets) {
        std::vector<double> acc;
        for (const auto& r : res.rows)
            if (r.cell == cell && r.N_total == n) acc.push_back(r.test_accuracy);
        if (median(acc) >= target) return n;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV

/// Column order of export_csv. Per-level columns hold ';'-joined values, levels L..1.
inline const std::vector<std::string>& csv_header(bool timing = false) {
    static const std::vector<std::string> base{
        "cell",  "L",        "s",     "V",     "m",         "seed",      "N_total",   "trial",  "N_level",
        "test_accuracy", "oracle_accuracy", "shallow_accuracy", "eps_S", "eps_O", "out_intra", "out_inter", "status"};
    static const std::vector<std::string> timed = [] {
        auto h = base;
        h.push_back("wall_seconds");
        return h;
    }();
    return timing ? timed : base;
}

namespace detail {

inline std::string num17(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    if (std::isnan(x)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

template <class F>
std::string join_levels(const std::vector<LevelDiagnostics>& d, F f) {
    std::string out;
    for (std::size_t i = 0; i < d.size(); ++i) out += (i ? ";" : "") + num17(f(d[i]));
    return out;
}

}  // namespace detail

inline std::string to_csv(const SweepResult& res, bool timing = false) {
    if (res.rows.empty()) throw EmptyResult("sweep result has no rows");
    std::string out;
    const auto& header = csv_header(timing);
    for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\r\n";
    for (const auto& r : res.rows) {
        std::string nl;
        for (std::size_t i = 0; i < r.N_level.size(); ++i) nl += (i ? ";" : "") + std::to_string(r.N_level[i]);
        std::vector<std::string> f{std::to_string(r.cell),
                                   std::to_string(r.params.L),
                                   std::to_string(r.params.s),
                                   std::to_string(r.params.V),
                                   std::to_string(r.params.m),
                                   std::to_string(r.params.seed),
                                   std::to_string(r.N_total),
                                   std::to_string(r.trial),
                                   nl,
                                   detail::num17(r.test_accuracy),
                                   detail::num17(r.oracle_accuracy),
                                   r.shallow_accuracy ? detail::num17(*r.shallow_accuracy) : std::string(),
                                   detail::join_levels(r.diagnostics, [](const auto& d) { return d.eps_S; }),
                                   detail::join_levels(r.diagnostics, [](const auto& d) { return d.eps_O; }),
                                   detail::join_levels(r.diagnostics, [](const auto& d) { return d.out_intra; }),
                                   detail::join_levels(r.diagnostics, [](const auto& d) { return d.out_inter; }),
                                   r.status};
        if (timing) f.push_back(detail::num17(r.wall_seconds));
        for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + detail::csv_field(f[i]);
        out += "\r\n";
    }
    return out;
}

/// Writes to_csv(res) to `path`.
inline void export_csv(const SweepResult& res, const std::string& path, bool timing = false) {
    const std::string text = to_csv(res, timing);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << text;
    if (!f.flush()) throw IoError("failed writing " + path);
}

}  // namespace rhm
