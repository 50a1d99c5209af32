#pragma once

// Exact statistics of a grammar through the first-token chain.
//
// P_l[nu][mu] is the probability that the first level-l token is mu given that
// the first level-(l-1) token is nu. Since the first level-l patch depends on
// the label only through its parent nu (the first level-(l-1) token), the label
// posterior given the patch is the Bayes-normalized column nu of P_1 ... P_{l-1}.

#include <cmath>
#include <limits>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/grammar.hpp"

namespace rhm {

struct LevelStats {
    int level = 1;
    /// Label posterior for each patch of P_l, in the instance's canonical patch order.
    std::vector<Eigen::VectorXd> q;
    /// Probability that the first level-l patch is each patch of P_l.
    std::vector<double> p_patch;
    /// Minimum ||q_mu - q_mu'|| over non-synonym pairs (+inf if there are none).
    double rho_emp = std::numeric_limits<double>::infinity();
    /// Same minimum over pairs whose posteriors actually differ (+inf if there are none).
    double rho_separable = std::numeric_limits<double>::infinity();
};

struct TransitionStats {
    /// P[l - 1] holds P_l, l in [1, L].
    std::vector<Eigen::MatrixXd> P;
    /// pi[l] is the marginal of the first level-l token, l in [0, L]; pi[0] is uniform.
    std::vector<Eigen::VectorXd> pi;
    /// prefix[l - 1] = P_1 ... P_{l-1} (identity for l = 1).
    std::vector<Eigen::MatrixXd> prefix;
    std::vector<LevelStats> levels;
    double kappa = 1.0;
    double K_rho_emp = std::numeric_limits<double>::infinity();

    const LevelStats& level(int l) const { return levels.at(static_cast<std::size_t>(l - 1)); }
};

inline std::vector<Eigen::MatrixXd> transition_matrices(const RhmInstance& inst) {
    const int V = inst.V();
    std::vector<Eigen::MatrixXd> out;
    for (int r = 0; r < inst.L(); ++r) {
        Eigen::MatrixXd P = Eigen::MatrixXd::Zero(V, V);
        for (int nu = 0; nu < V; ++nu) {
            const auto& list = inst.rules(r)[static_cast<std::size_t>(nu)];
            if (list.empty()) continue;
            const double w = 1.0 / static_cast<double>(list.size());
            for (PatchCode c : list) P(nu, first_token(c, inst.params())) += w;
        }
        out.push_back(std::move(P));
    }
    return out;
}

/// Distances at or below this are treated as exact coincidences.
inline constexpr double kSameTolerance = 1e-12;

namespace detail {

/// Minimum non-synonym distance, overall and over pairs at positive distance.
inline std::pair<double, double> min_non_synonym_distance(const RhmInstance& inst, int level,
                                                          const std::vector<Eigen::VectorXd>& q) {
    const auto& patches = inst.patches(level);
    std::vector<Token> parent(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) parent[i] = inst.lookup(level, patches[i])->parent;
    double best = std::numeric_limits<double>::infinity();
    double best_pos = best;
    for (std::size_t i = 0; i < q.size(); ++i)
        for (std::size_t j = i + 1; j < q.size(); ++j)
            if (parent[i] != parent[j]) {
                const double d = (q[i] - q[j]).norm();
                best = std::min(best, d);
                if (d > kSameTolerance) best_pos = std::min(best_pos, d);
            }
    return {best, best_pos};
}

}  // namespace detail

inline TransitionStats compute_stats(const RhmInstance& inst) {
    const int V = inst.V();
    const int L = inst.L();
    TransitionStats st;
    st.P = transition_matrices(inst);
    st.pi.push_back(Eigen::VectorXd::Constant(V, 1.0 / V));
    for (int l = 1; l <= L; ++l) st.pi.push_back((st.pi.back().transpose() * st.P[static_cast<std::size_t>(l - 1)]).transpose());

    Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(V, V);
    for (int l = 1; l <= L; ++l) {
        st.prefix.push_back(acc);
        acc = acc * st.P[static_cast<std::size_t>(l - 1)];
    }

    st.kappa = 0.0;
    st.K_rho_emp = std::numeric_limits<double>::infinity();
    for (int l = 1; l <= L; ++l) {
        const auto& prefix = st.prefix[static_cast<std::size_t>(l - 1)];
        // One posterior per parent so synonyms share a bitwise-identical vector.
        std::vector<Eigen::VectorXd> by_parent(static_cast<std::size_t>(V));
        for (int nu = 0; nu < V; ++nu) {
            Eigen::VectorXd joint = st.pi[0].cwiseProduct(prefix.col(nu));
            const double z = joint.sum();
            by_parent[static_cast<std::size_t>(nu)] = z > 0 ? Eigen::VectorXd(joint / z) : joint;
        }
        LevelStats ls;
        ls.level = l;
        const auto& patches = inst.patches(l);
        const double n_patches = static_cast<double>(patches.size());
        for (PatchCode c : patches) {
            const Token nu = inst.lookup(l, c)->parent;
            ls.q.push_back(by_parent[static_cast<std::size_t>(nu)]);
            const double m_nu = static_cast<double>(inst.rules(l - 1)[static_cast<std::size_t>(nu)].size());
            const double p = st.pi[static_cast<std::size_t>(l - 1)](nu) / m_nu;
            ls.p_patch.push_back(p);
            st.kappa = std::max(st.kappa, p > 0 ? 1.0 / (p * n_patches) : std::numeric_limits<double>::infinity());
        }
        std::tie(ls.rho_emp, ls.rho_separable) = detail::min_non_synonym_distance(inst, l, ls.q);
        st.K_rho_emp = std::min(st.K_rho_emp, ls.rho_emp * std::pow(static_cast<double>(inst.m()), l / 2.0));
        st.levels.push_back(std::move(ls));
    }
    return st;
}

/// Label posterior given the first level-l patch.
inline const Eigen::VectorXd& cond_label_given_patch(const RhmInstance& inst, const TransitionStats& st, int level,
                                                     PatchCode patch) {
    if (level < 1 || level > inst.L()) throw UnknownPatch("level " + std::to_string(level) + " out of range");
    auto slot = inst.lookup(level, patch);
    if (!slot)
        throw UnknownPatch("patch " + detail::join_tokens(inst.tokens_of(patch)) + " is not in P_" +
                           std::to_string(level));
    return st.level(level).q[static_cast<std::size_t>(slot->index)];
}

inline double patch_probability(const RhmInstance& inst, const TransitionStats& st, int level, PatchCode patch) {
    auto slot = inst.lookup(level, patch);
    if (!slot) throw UnknownPatch("patch is not in P_" + std::to_string(level));
    return st.level(level).p_patch[static_cast<std::size_t>(slot->index)];
}

// ---------------------------------------------------------------------------
// Assumption audit

struct AuditLevel {
    int l = 1;
    double rho_emp = 0.0;
    /// Signal lower bound (20 m)^(-(l-1)/2) for randomly sampled first-token-uniform rules.
    double bound = 1.0;
    bool pass = true;
};

struct AuditReport {
    double kappa = 1.0;
    std::vector<AuditLevel> levels;
    double K_rho_emp = 0.0;
    bool synonym_q_equal = true;

    bool all_levels_pass() const {
        for (const auto& l : levels)
            if (!l.pass) return false;
        return true;
    }
};

inline double signal_bound(int m, int level) { return std::pow(20.0 * m, -(level - 1) / 2.0); }

inline AuditReport audit_assumptions(const RhmInstance& inst, const TransitionStats& st) {
    AuditReport rep;
    rep.kappa = st.kappa;
    rep.K_rho_emp = st.K_rho_emp;
    for (const auto& ls : st.levels) {
        AuditLevel a;
        a.l = ls.level;
        a.rho_emp = ls.rho_emp;
        a.bound = signal_bound(inst.m(), ls.level);
        a.pass = ls.rho_emp >= a.bound;
        rep.levels.push_back(a);

        const auto& patches = inst.patches(ls.level);
        for (std::size_t i = 0; i < patches.size(); ++i)
            for (std::size_t j = i + 1; j < patches.size(); ++j)
                if (inst.synonyms(ls.level, patches[i], patches[j]) && ls.q[i] != ls.q[j]) rep.synonym_q_equal = false;
    }
    return rep;
}

namespace detail {
inline nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(); }
}  // namespace detail

/// {kappa, levels:[{l, rho_emp, bound, pass}], K_rho_emp, synonym_q_equal}; non-finite values become null.
inline nlohmann::json audit_to_json(const AuditReport& rep) {
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& l : rep.levels)
        levels.push_back({{"l", l.l}, {"rho_emp", detail::finite_or_null(l.rho_emp)}, {"bound", l.bound}, {"pass", l.pass}});
    return nlohmann::json{{"kappa", detail::finite_or_null(rep.kappa)},
                          {"levels", std::move(levels)},
                          {"K_rho_emp", detail::finite_or_null(rep.K_rho_emp)},
                          {"synonym_q_equal", rep.synonym_q_equal}};
}

}  // namespace rhm
