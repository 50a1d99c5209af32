#pragma once

// Deep quadratic boolean functions on {-1, +1}^d and their layerwise learner.
//
// A target is a forest of monomials: level-1 terms are disjoint pairs of inputs,
// and every level-(k+1) term is the product of two level-k terms. The learner
// sees (x, f(x)) pairs and recovers the forest bottom-up. At level l it takes
// the units recovered at level l-1 (inputs for l = 1), estimates the correlation
// of the unexplained residual with every product of two units, keeps those above
// c_min / 2 subject to disjointness, and subtracts the new terms.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/random.hpp"

namespace rhm {

struct DeepQuadTarget {
    int d = 0;
    /// sets[k][j]: sorted input indices of the j-th term of degree 2^(k+1).
    std::vector<std::vector<std::vector<int>>> sets;
    /// coef[k][j]: its Fourier coefficient.
    std::vector<std::vector<double>> coef;

    std::size_t terms() const {
        std::size_t n = 0;
        for (const auto& l : sets) n += l.size();
        return n;
    }
};

/// Throws InvariantError unless the target satisfies the deep-quadratic conditions:
/// level-k sets have size 2^k, are disjoint within a level, and (above level 1)
/// are each the union of two sets of the level below.
inline void validate_target(const DeepQuadTarget& t) {
    if (t.d < 1) throw InvariantError("deep quad: d must be >= 1");
    if (t.sets.size() != t.coef.size()) throw InvariantError("deep quad: sets and coef differ in depth");
    for (std::size_t k = 0; k < t.sets.size(); ++k) {
        const std::string at = "level " + std::to_string(k + 1);
        const std::size_t size = std::size_t{2} << k;
        if (t.sets[k].size() != t.coef[k].size()) throw InvariantError(at + ": sets and coef differ in length");
        std::vector<int> owner(static_cast<std::size_t>(t.d), -1);
        for (std::size_t j = 0; j < t.sets[k].size(); ++j) {
            const auto& S = t.sets[k][j];
            if (S.size() != size) throw InvariantError(at + ": set " + std::to_string(j) + " has size " + std::to_string(S.size()));
            if (!std::is_sorted(S.begin(), S.end())) throw InvariantError(at + ": set " + std::to_string(j) + " is not sorted");
            for (int i : S) {
                if (i < 0 || i >= t.d) throw InvariantError(at + ": index " + std::to_string(i) + " out of range");
                if (owner[static_cast<std::size_t>(i)] >= 0)
                    throw InvariantError(at + ": index " + std::to_string(i) + " appears in two sets");
                owner[static_cast<std::size_t>(i)] = static_cast<int>(j);
            }
            if (t.coef[k][j] == 0 || !std::isfinite(t.coef[k][j]))
                throw InvariantError(at + ": coefficient " + std::to_string(j) + " must be nonzero and finite");
            if (k == 0) continue;
            // Both halves must be level-k sets; disjointness makes the split unique.
            const auto& below = t.sets[k - 1];
            std::size_t covered = 0;
            for (const auto& B : below)
                if (std::includes(S.begin(), S.end(), B.begin(), B.end())) covered += B.size();
            if (covered != S.size())
                throw InvariantError(at + ": set " + std::to_string(j) + " is not a union of two lower sets");
        }
    }
}

/// Figure structure on d = 12 (0-based): pairs {0,1},...,{10,11}; quadruples
/// {0..3}, {4..7}, {8..11}; and {0..7}. Every coefficient is `c`.
inline DeepQuadTarget figure_target(double c = 1.0) {
    DeepQuadTarget t;
    t.d = 12;
    t.sets = {{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}, {10, 11}},
              {{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11}},
              {{0, 1, 2, 3, 4, 5, 6, 7}}};
    for (const auto& l : t.sets) t.coef.emplace_back(l.size(), c);
    return t;
}

/// Random forest with level_sizes[k] terms of degree 2^(k+1): a random disjoint
/// pairing of inputs, then random pairings of the units one level down.
/// Coefficients are uniform on [-1, -c_min] u [c_min, 1].
inline DeepQuadTarget sample_target(int d, std::span<const int> level_sizes, double c_min, Stream& rng) {
    if (d < 2) throw ParameterError("deep quad: d must be >= 2");
    if (!(c_min > 0) || c_min > 1) throw ParameterError("deep quad: c_min must lie in (0, 1]");
    int avail = d;
    for (std::size_t k = 0; k < level_sizes.size(); ++k) {
        if (level_sizes[k] < 1) throw ParameterError("deep quad: level sizes must be >= 1");
        if (2 * level_sizes[k] > avail)
            throw ParameterError("deep quad: level " + std::to_string(k + 1) + " needs " +
                                 std::to_string(2 * level_sizes[k]) + " units, only " + std::to_string(avail) +
                                 " available");
        avail = level_sizes[k];
    }
    DeepQuadTarget t;
    t.d = d;
    std::vector<std::vector<int>> units;
    for (int i = 0; i < d; ++i) units.push_back({i});
    for (int size : level_sizes) {
        shuffle(units, rng);
        auto& level = t.sets.emplace_back();
        auto& coef = t.coef.emplace_back();
        for (int j = 0; j < size; ++j) {
            std::vector<int> S = units[static_cast<std::size_t>(2 * j)];
            const auto& B = units[static_cast<std::size_t>(2 * j + 1)];
            S.insert(S.end(), B.begin(), B.end());
            std::sort(S.begin(), S.end());
            level.push_back(std::move(S));
            const double mag = rng.uniform(c_min, 1.0);
            coef.push_back(rng.below(2) ? mag : -mag);
        }
        units = level;
    }
    validate_target(t);
    return t;
}

namespace detail {

inline void check_pm1(std::span<const double> x, int d) {
    if (static_cast<int>(x.size()) != d)
        throw ShapeError("deep quad: expected " + std::to_string(d) + " inputs, got " + std::to_string(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] != 1.0 && x[i] != -1.0)
            throw DomainError("deep quad: x[" + std::to_string(i) + "] = " + std::to_string(x[i]) + " is not +-1");
}

inline double chi(std::span<const int> S, std::span<const double> x) {
    double p = 1.0;
    for (int i : S) p *= x[static_cast<std::size_t>(i)];
    return p;
}

}  // namespace detail

/// f(x) = sum_S coef_S prod_{i in S} x_i.
inline double eval_target(const DeepQuadTarget& t, std::span<const double> x) {
    detail::check_pm1(x, t.d);
    double f = 0.0;
    for (std::size_t k = 0; k < t.sets.size(); ++k)
        for (std::size_t j = 0; j < t.sets[k].size(); ++j) f += t.coef[k][j] * detail::chi(t.sets[k][j], x);
    return f;
}

// ---------------------------------------------------------------------------
// Learner

struct DeepQuadLevel {
    /// pairs[j] = (a, b), a < b: indices of the two units of the level below
    /// (inputs for level 1) whose product is the j-th unit of this level.
    std::vector<std::pair<int, int>> pairs;
    std::vector<double> coef;
};

struct DeepQuadModel {
    int d = 0;
    double c_min = 0.0;
    std::vector<DeepQuadLevel> levels;

    /// Input index sets of the recovered units, sorted, per level.
    std::vector<std::vector<std::vector<int>>> sets() const {
        std::vector<std::vector<std::vector<int>>> out;
        std::vector<std::vector<int>> below;
        for (int i = 0; i < d; ++i) below.push_back({i});
        for (const auto& lv : levels) {
            auto& cur = out.emplace_back();
            for (auto [a, b] : lv.pairs) {
                std::vector<int> S = below[static_cast<std::size_t>(a)];
                S.insert(S.end(), below[static_cast<std::size_t>(b)].begin(), below[static_cast<std::size_t>(b)].end());
                std::sort(S.begin(), S.end());
                cur.push_back(std::move(S));
            }
            below = cur;
        }
        return out;
    }
};

/// Unit values y^(l) for every level at x.
inline std::vector<std::vector<double>> unit_values(const DeepQuadModel& model, std::span<const double> x) {
    std::vector<std::vector<double>> out;
    std::vector<double> below(x.begin(), x.end());
    for (const auto& lv : model.levels) {
        auto& cur = out.emplace_back();
        for (auto [a, b] : lv.pairs) cur.push_back(below[static_cast<std::size_t>(a)] * below[static_cast<std::size_t>(b)]);
        below = cur;
    }
    return out;
}

inline double eval_model(const DeepQuadModel& model, std::span<const double> x) {
    detail::check_pm1(x, model.d);
    double f = 0.0;
    const auto y = unit_values(model, x);
    for (std::size_t l = 0; l < y.size(); ++l)
        for (std::size_t j = 0; j < y[l].size(); ++j) f += model.levels[l].coef[j] * y[l][j];
    return f;
}

/// A weighted set of (x, f(x)) pairs; weights sum to one. Rows of X are +-1 inputs.
struct QuadBatch {
    Eigen::MatrixXd X;
    Eigen::VectorXd f;
    Eigen::VectorXd w;
};

/// Supplies the batch for a level (0-based), or for the final refit (index = -1).
using QuadBatchSource = std::function<QuadBatch(int level)>;

/// N i.i.d. uniform inputs per call, labelled by `fn`.
inline QuadBatchSource iid_source(int d, long long N, std::function<double(std::span<const double>)> fn, Stream& rng) {
    if (N < 1) throw ParameterError("deep quad: N must be >= 1");
    return [d, N, fn = std::move(fn), &rng](int) {
        QuadBatch b;
        b.X.resize(N, d);
        b.f.resize(N);
        b.w = Eigen::VectorXd::Constant(N, 1.0 / static_cast<double>(N));
        std::vector<double> x(static_cast<std::size_t>(d));
        for (long long i = 0; i < N; ++i) {
            for (int k = 0; k < d; ++k) {
                x[static_cast<std::size_t>(k)] = rng.below(2) ? 1.0 : -1.0;
                b.X(i, k) = x[static_cast<std::size_t>(k)];
            }
            b.f(i) = fn(x);
        }
        return b;
    };
}

/// All 2^d inputs with weight 2^-d, so empirical means are exact expectations.
inline QuadBatchSource exhaustive_source(int d, std::function<double(std::span<const double>)> fn) {
    if (d < 1 || d > 24) throw ParameterError("deep quad: exhaustive enumeration needs 1 <= d <= 24");
    const long long n = 1LL << d;
    QuadBatch b;
    b.X.resize(n, d);
    b.f.resize(n);
    b.w = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    std::vector<double> x(static_cast<std::size_t>(d));
    for (long long r = 0; r < n; ++r) {
        for (int k = 0; k < d; ++k) {
            x[static_cast<std::size_t>(k)] = (r >> k) & 1 ? -1.0 : 1.0;
            b.X(r, k) = x[static_cast<std::size_t>(k)];
        }
        b.f(r) = fn(x);
    }
    return [b = std::move(b)](int) { return b; };
}

struct DeepQuadOptions {
    /// Re-estimate every coefficient jointly by least squares over the recovered
    /// monomials on a fresh batch. The target lies in their span, so this is exact
    /// whenever the support is.
    bool refit = true;
    int max_levels = 30;
};

namespace detail {

/// Unit values of every row at every recovered level; values[l] is n x units.
inline std::vector<Eigen::MatrixXd> batch_units(const DeepQuadModel& model, const Eigen::MatrixXd& X) {
    std::vector<Eigen::MatrixXd> out;
    const Eigen::MatrixXd* below = &X;
    for (const auto& lv : model.levels) {
        Eigen::MatrixXd cur(X.rows(), static_cast<Eigen::Index>(lv.pairs.size()));
        for (std::size_t j = 0; j < lv.pairs.size(); ++j)
            cur.col(static_cast<Eigen::Index>(j)) =
                below->col(lv.pairs[j].first).cwiseProduct(below->col(lv.pairs[j].second));
        out.push_back(std::move(cur));
        below = &out.back();
    }
    return out;
}

inline void check_batch(const QuadBatch& b, int d) {
    if (b.X.cols() != d || b.f.size() != b.X.rows() || b.w.size() != b.X.rows() || b.X.rows() < 1)
        throw ShapeError("deep quad: malformed batch");
    if (!b.f.allFinite() || !b.w.allFinite()) throw NumericError("deep quad: non-finite batch");
    if (((b.X.array() != 1.0) && (b.X.array() != -1.0)).any()) throw DomainError("deep quad: inputs must be +-1");
}

}  // namespace detail

/// Layerwise support recovery. Candidates above c_min / 2 are accepted in order of
/// decreasing |c| while both units are unused; a rejected candidate with |c| >= c_min
/// cannot be explained as noise and raises AmbiguousSupport.
inline DeepQuadModel learn_layerwise(const QuadBatchSource& source, int d, double c_min,
                                     const DeepQuadOptions& opt = {}) {
    if (d < 1) throw ParameterError("deep quad: d must be >= 1");
    if (!(c_min > 0)) throw ParameterError("deep quad: c_min must be positive");
    DeepQuadModel model;
    model.d = d;
    model.c_min = c_min;
    for (int level = 0; level < opt.max_levels; ++level) {
        const QuadBatch b = source(level);
        detail::check_batch(b, d);
        const auto units = detail::batch_units(model, b.X);
        Eigen::VectorXd residual = b.f;
        for (std::size_t l = 0; l < units.size(); ++l)
            residual -= units[l] * Eigen::Map<const Eigen::VectorXd>(model.levels[l].coef.data(),
                                                                     static_cast<Eigen::Index>(model.levels[l].coef.size()));
        const Eigen::MatrixXd& U = units.empty() ? b.X : units.back();
        const Eigen::Index D = U.cols();
        if (D < 2) break;

        // c_ab = E[residual u_a u_b] for all a < b.
        const Eigen::MatrixXd WU = (b.w.cwiseProduct(residual)).asDiagonal() * U;
        const Eigen::MatrixXd C = U.transpose() * WU;
        struct Cand {
            double c;
            int a, b;
        };
        std::vector<Cand> cands;
        for (Eigen::Index a = 0; a < D; ++a)
            for (Eigen::Index c = a + 1; c < D; ++c)
                if (std::abs(C(a, c)) > c_min / 2) cands.push_back({C(a, c), static_cast<int>(a), static_cast<int>(c)});
        if (cands.empty()) break;
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return std::abs(x.c) > std::abs(y.c); });

        DeepQuadLevel lv;
        std::vector<bool> used(static_cast<std::size_t>(D), false);
        for (const auto& c : cands) {
            if (used[static_cast<std::size_t>(c.a)] || used[static_cast<std::size_t>(c.b)]) {
                if (std::abs(c.c) >= c_min)
                    throw AmbiguousSupport("deep quad level " + std::to_string(level + 1) + ": pair (" + std::to_string(c.a) +
                                           "," + std::to_string(c.b) + ") with coefficient " + std::to_string(c.c) +
                                           " overlaps a stronger pair");
                continue;
            }
            used[static_cast<std::size_t>(c.a)] = used[static_cast<std::size_t>(c.b)] = true;
            lv.pairs.emplace_back(c.a, c.b);
            lv.coef.push_back(c.c);
        }
        // Canonical order: by first unit index.
        std::vector<std::size_t> order(lv.pairs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return lv.pairs[x] < lv.pairs[y]; });
        DeepQuadLevel sorted;
        for (auto i : order) {
            sorted.pairs.push_back(lv.pairs[i]);
            sorted.coef.push_back(lv.coef[i]);
        }
        model.levels.push_back(std::move(sorted));
    }

    if (opt.refit && !model.levels.empty()) {
        const QuadBatch b = source(-1);
        detail::check_batch(b, d);
        const auto units = detail::batch_units(model, b.X);
        Eigen::Index cols = 0;
        for (const auto& u : units) cols += u.cols();
        if (b.X.rows() >= cols) {
            Eigen::MatrixXd F(b.X.rows(), cols);
            Eigen::Index at = 0;
            for (const auto& u : units) {
                F.middleCols(at, u.cols()) = u;
                at += u.cols();
            }
            const Eigen::VectorXd s = b.w.cwiseSqrt();
            const Eigen::VectorXd beta = (s.asDiagonal() * F).colPivHouseholderQr().solve(s.cwiseProduct(b.f));
            at = 0;
            for (auto& lv : model.levels)
                for (auto& c : lv.coef) c = beta(at++);
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Serialization. Index sets are sorted integer arrays.

inline nlohmann::json target_to_json(const DeepQuadTarget& t) {
    nlohmann::json levels = nlohmann::json::array();
    for (std::size_t k = 0; k < t.sets.size(); ++k) levels.push_back({{"sets", t.sets[k]}, {"coef", t.coef[k]}});
    return nlohmann::json{{"d", t.d}, {"levels", std::move(levels)}};
}

inline DeepQuadTarget target_from_json(const nlohmann::json& j) {
    DeepQuadTarget t;
    try {
        t.d = j.at("d").get<int>();
        for (const auto& l : j.at("levels")) {
            t.sets.push_back(l.at("sets").get<std::vector<std::vector<int>>>());
            t.coef.push_back(l.at("coef").get<std::vector<double>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("deep quad target: ") + e.what());
    }
    validate_target(t);
    return t;
}

inline nlohmann::json model_to_json(const DeepQuadModel& m) {
    nlohmann::json levels = nlohmann::json::array();
    const auto sets = m.sets();
    for (std::size_t l = 0; l < m.levels.size(); ++l) {
        nlohmann::json pairs = nlohmann::json::array();
        for (auto [a, b] : m.levels[l].pairs) pairs.push_back({a, b});
        levels.push_back({{"pairs", std::move(pairs)}, {"sets", sets[l]}, {"coef", m.levels[l].coef}});
    }
    return nlohmann::json{{"d", m.d}, {"c_min", m.c_min}, {"levels", std::move(levels)}};
}

inline DeepQuadModel deepquad_model_from_json(const nlohmann::json& j) {
    DeepQuadModel m;
    try {
        m.d = j.at("d").get<int>();
        m.c_min = j.at("c_min").get<double>();
        std::size_t below = static_cast<std::size_t>(m.d);
        for (const auto& l : j.at("levels")) {
            DeepQuadLevel lv;
            for (const auto& p : l.at("pairs")) {
                const auto ab = p.get<std::vector<int>>();
                if (ab.size() != 2 || ab[0] < 0 || ab[1] <= ab[0] || static_cast<std::size_t>(ab[1]) >= below)
                    throw ParseError("deep quad model: invalid pair");
                lv.pairs.emplace_back(ab[0], ab[1]);
            }
            lv.coef = l.at("coef").get<std::vector<double>>();
            if (lv.coef.size() != lv.pairs.size()) throw ParseError("deep quad model: coef and pairs differ in length");
            below = lv.pairs.size();
            m.levels.push_back(std::move(lv));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("deep quad model: ") + e.what());
    }
    return m;
}

/// True when the model's recovered forest equals the target's, level by level, as sets.
inline bool same_support(const DeepQuadModel& m, const DeepQuadTarget& t) {
    auto got = m.sets();
    auto want = t.sets;
    if (got.size() != want.size()) return false;
    for (std::size_t k = 0; k < got.size(); ++k) {
        std::sort(got[k].begin(), got[k].end());
        std::sort(want[k].begin(), want[k].end());
        if (got[k] != want[k]) return false;
    }
    return true;
}

/// Largest |model coefficient - target coefficient| over matching sets; +inf if supports differ.
inline double max_coefficient_error(const DeepQuadModel& m, const DeepQuadTarget& t) {
    if (!same_support(m, t)) return std::numeric_limits<double>::infinity();
    const auto sets = m.sets();
    double err = 0.0;
    for (std::size_t k = 0; k < sets.size(); ++k)
        for (std::size_t j = 0; j < sets[k].size(); ++j) {
            const auto it = std::find(t.sets[k].begin(), t.sets[k].end(), sets[k][j]);
            err = std::max(err, std::abs(m.levels[k].coef[j] - t.coef[k][static_cast<std::size_t>(it - t.sets[k].begin())]));
        }
    return err;
}

}  // namespace rhm
