#pragma once

// Random Hierarchy Model grammars: (V,m)-uniform, non-ambiguous, CFG-induced
// instances with uniform label distribution and uniform rule choice.
//
// Levels are numbered from the root: level 0 holds the label, level L the
// observed tokens. rules(r) rewrites level-r symbols into level-(r+1) patches,
// so level l in [1, L] has patch set P_l produced by rules(l - 1).

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/random.hpp"

namespace rhm {

using Token = int;
/// A patch of s tokens packed as a base-V integer, first token most significant.
using PatchCode = std::uint64_t;

namespace detail {

/// base^exp, or nullopt if it exceeds limit.
inline std::optional<std::uint64_t> checked_pow(std::uint64_t base, int exp,
                                                std::uint64_t limit = std::numeric_limits<std::uint64_t>::max()) {
    std::uint64_t r = 1;
    for (int i = 0; i < exp; ++i) {
        if (base != 0 && r > limit / base) return std::nullopt;
        r *= base;
    }
    return r;
}

inline std::string join_tokens(std::span<const Token> t) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? "," : "") << t[i];
    os << ')';
    return os.str();
}

}  // namespace detail

struct RhmParams {
    int L = 1;
    int s = 2;
    int V = 2;
    int m = 1;
    std::uint64_t seed = 0;

    /// Throws ParameterError unless 1 <= L, 2 <= s, 1 <= V, 1 <= m <= V^(s-1), V^s < 2^63.
    void validate() const {
        if (L < 1) throw ParameterError("L must be >= 1 (got " + std::to_string(L) + ")");
        if (s < 2) throw ParameterError("s must be >= 2 (got " + std::to_string(s) + ")");
        if (V < 1) throw ParameterError("V must be >= 1 (got " + std::to_string(V) + ")");
        if (m < 1) throw ParameterError("m must be >= 1 (got " + std::to_string(m) + ")");
        if (!detail::checked_pow(static_cast<std::uint64_t>(V), s, std::uint64_t{1} << 62))
            throw ParameterError("V^s overflows the patch code space");
        const auto suffixes = *detail::checked_pow(static_cast<std::uint64_t>(V), s - 1);
        if (static_cast<std::uint64_t>(m) > suffixes)
            throw ParameterError("m must be <= V^(s-1) = " + std::to_string(suffixes) + " (got " +
                                 std::to_string(m) + ")");
        if (!detail::checked_pow(static_cast<std::uint64_t>(s), L, std::uint64_t{1} << 40))
            throw ParameterError("s^L is too large");
    }

    std::uint64_t patch_space() const { return *detail::checked_pow(static_cast<std::uint64_t>(V), s); }
    std::uint64_t suffix_space() const { return *detail::checked_pow(static_cast<std::uint64_t>(V), s - 1); }
    /// Number of tokens in a sentence, s^L.
    std::size_t sentence_length() const { return static_cast<std::size_t>(*detail::checked_pow(s, L)); }
    /// |P_l| for a valid instance.
    int patches_per_level() const { return V * m; }

    friend bool operator==(const RhmParams&, const RhmParams&) = default;
};

inline void to_json(nlohmann::json& j, const RhmParams& p) {
    j = nlohmann::json{{"L", p.L}, {"s", p.s}, {"V", p.V}, {"m", p.m}, {"seed", p.seed}};
}

inline PatchCode encode_patch(std::span<const Token> tokens, int V) {
    PatchCode code = 0;
    for (Token t : tokens) code = code * static_cast<PatchCode>(V) + static_cast<PatchCode>(t);
    return code;
}

inline std::vector<Token> decode_patch(PatchCode code, int s, int V) {
    std::vector<Token> out(static_cast<std::size_t>(s));
    for (int i = s - 1; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = static_cast<Token>(code % static_cast<PatchCode>(V));
        code /= static_cast<PatchCode>(V);
    }
    return out;
}

inline Token first_token(PatchCode code, const RhmParams& p) {
    return static_cast<Token>(code / p.suffix_space());
}

/// Where a patch sits in its level: its parent symbol and its position in the
/// canonical patch order (parent-major, rule order within a parent).
struct PatchSlot {
    Token parent;
    int index;
};

/// A sampled grammar. Immutable after construction; safe to share across threads.
///
/// The constructor accepts any shape-valid rule table (ragged or ambiguous tables
/// included) so that validate() can report on them; decode maps keep the first
/// parent seen for a patch.
class RhmInstance {
public:
    using RuleTable = std::vector<std::vector<std::vector<PatchCode>>>;

    RhmInstance(RhmParams params, RuleTable rules) : params_(params), rules_(std::move(rules)) {
        if (static_cast<int>(rules_.size()) != params_.L)
            throw InvariantError("rules: expected " + std::to_string(params_.L) + " levels, got " +
                                 std::to_string(rules_.size()));
        const auto space = params_.patch_space();
        decode_.resize(rules_.size());
        patches_.resize(rules_.size());
        for (std::size_t r = 0; r < rules_.size(); ++r) {
            if (static_cast<int>(rules_[r].size()) != params_.V)
                throw InvariantError("rules[" + std::to_string(r) + "]: expected " + std::to_string(params_.V) +
                                     " symbols, got " + std::to_string(rules_[r].size()));
            for (std::size_t nu = 0; nu < rules_[r].size(); ++nu) {
                for (PatchCode c : rules_[r][nu]) {
                    if (c >= space)
                        throw InvariantError("rules[" + std::to_string(r) + "][" + std::to_string(nu) +
                                             "]: patch code out of range");
                    const int idx = static_cast<int>(patches_[r].size());
                    patches_[r].push_back(c);
                    decode_[r].try_emplace(c, PatchSlot{static_cast<Token>(nu), idx});
                }
            }
        }
    }

    /// Builds from explicit token tuples, rules[r][nu][i] = s tokens in [0, V).
    static RhmInstance from_tokens(RhmParams params, const std::vector<std::vector<std::vector<std::vector<Token>>>>& rules) {
        RuleTable table(rules.size());
        for (std::size_t r = 0; r < rules.size(); ++r) {
            table[r].resize(rules[r].size());
            for (std::size_t nu = 0; nu < rules[r].size(); ++nu) {
                for (std::size_t i = 0; i < rules[r][nu].size(); ++i) {
                    const auto& t = rules[r][nu][i];
                    const std::string where = "rules[" + std::to_string(r) + "][" + std::to_string(nu) + "][" +
                                              std::to_string(i) + "]";
                    if (static_cast<int>(t.size()) != params.s)
                        throw InvariantError(where + ": expected " + std::to_string(params.s) + " tokens");
                    for (Token x : t)
                        if (x < 0 || x >= params.V) throw InvariantError(where + ": token out of range");
                    table[r][nu].push_back(encode_patch(t, params.V));
                }
            }
        }
        return RhmInstance(params, std::move(table));
    }

    const RhmParams& params() const noexcept { return params_; }
    int L() const noexcept { return params_.L; }
    int s() const noexcept { return params_.s; }
    int V() const noexcept { return params_.V; }
    int m() const noexcept { return params_.m; }

    /// Rules rewriting level-r symbols, r in [0, L-1]; rules(r)[nu] is nu's synonym class in P_{r+1}.
    const RuleTable::value_type& rules(int r) const { return rules_.at(static_cast<std::size_t>(r)); }
    const RuleTable& rule_table() const noexcept { return rules_; }

    /// All patches of level l in [1, L], parent-major.
    const std::vector<PatchCode>& patches(int level) const { return patches_.at(static_cast<std::size_t>(level - 1)); }

    /// Parent and canonical index of a level-l patch, or nullopt if no rule produces it.
    std::optional<PatchSlot> lookup(int level, PatchCode code) const {
        const auto& map = decode_.at(static_cast<std::size_t>(level - 1));
        auto it = map.find(code);
        if (it == map.end()) return std::nullopt;
        return it->second;
    }

    std::vector<Token> tokens_of(PatchCode code) const { return decode_patch(code, params_.s, params_.V); }

    bool synonyms(int level, PatchCode a, PatchCode b) const {
        auto pa = lookup(level, a);
        auto pb = lookup(level, b);
        return pa && pb && pa->parent == pb->parent;
    }

    friend bool operator==(const RhmInstance& a, const RhmInstance& b) {
        return a.params_ == b.params_ && a.rules_ == b.rules_;
    }

private:
    RhmParams params_;
    RuleTable rules_;
    std::vector<std::unordered_map<PatchCode, PatchSlot>> decode_;
    std::vector<std::vector<PatchCode>> patches_;
};

struct Sample {
    std::vector<Token> tokens;
    Token label = 0;
    /// When present, intermediates[l] is the level-l sequence (length s^l) for l in [0, L-1].
    std::optional<std::vector<std::vector<Token>>> intermediates;
};

namespace detail {

/// m distinct values from [0, n) in draw order.
inline std::vector<std::uint64_t> sample_distinct(std::uint64_t n, int m, Stream& rng,
                                                  std::vector<std::uint64_t>& scratch) {
    std::vector<std::uint64_t> out;
    out.reserve(static_cast<std::size_t>(m));
    if (n <= (std::uint64_t{1} << 24)) {
        scratch.resize(static_cast<std::size_t>(n));
        for (std::uint64_t i = 0; i < n; ++i) scratch[i] = i;
        for (int i = 0; i < m; ++i) {
            const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(n - static_cast<std::uint64_t>(i)));
            std::swap(scratch[static_cast<std::size_t>(i)], scratch[j]);
            out.push_back(scratch[static_cast<std::size_t>(i)]);
        }
    } else {
        std::unordered_set<std::uint64_t> seen;
        while (static_cast<int>(out.size()) < m) {
            const auto v = rng.below(n);
            if (seen.insert(v).second) out.push_back(v);
        }
    }
    return out;
}

}  // namespace detail

/// Samples a grammar level by level: for every first token draw m distinct
/// suffixes without replacement, pool the V*m candidate patches, shuffle the
/// pool and hand consecutive blocks of m to the parent symbols.
inline RhmInstance sample_instance(const RhmParams& params, Stream& rng) {
    params.validate();
    const auto suffixes = params.suffix_space();
    RhmInstance::RuleTable rules(static_cast<std::size_t>(params.L));
    std::vector<std::uint64_t> scratch;
    for (int r = 0; r < params.L; ++r) {
        std::vector<PatchCode> pool;
        pool.reserve(static_cast<std::size_t>(params.V * params.m));
        for (int mu = 0; mu < params.V; ++mu) {
            for (auto suffix : detail::sample_distinct(suffixes, params.m, rng, scratch))
                pool.push_back(static_cast<PatchCode>(mu) * suffixes + suffix);
        }
        shuffle(pool, rng);
        auto& level = rules[static_cast<std::size_t>(r)];
        level.resize(static_cast<std::size_t>(params.V));
        for (int nu = 0; nu < params.V; ++nu) {
            const auto begin = pool.begin() + static_cast<std::ptrdiff_t>(nu * params.m);
            level[static_cast<std::size_t>(nu)].assign(begin, begin + params.m);
        }
    }
    return RhmInstance(params, std::move(rules));
}

/// Convenience overload seeding the stream from params.seed.
inline RhmInstance sample_instance(const RhmParams& params) {
    Stream rng(params.seed);
    return sample_instance(params, rng);
}

inline Sample generate_sample(const RhmInstance& inst, Stream& rng, bool keep_intermediates = false) {
    const int s = inst.s();
    Sample out;
    out.label = static_cast<Token>(rng.below(static_cast<std::uint64_t>(inst.V())));
    std::vector<Token> current{out.label};
    if (keep_intermediates) out.intermediates.emplace().push_back(current);
    for (int r = 0; r < inst.L(); ++r) {
        std::vector<Token> next;
        next.reserve(current.size() * static_cast<std::size_t>(s));
        const auto& level = inst.rules(r);
        for (Token t : current) {
            const auto& options = level[static_cast<std::size_t>(t)];
            PatchCode code = options[static_cast<std::size_t>(rng.below(options.size()))];
            const std::size_t at = next.size();
            next.resize(at + static_cast<std::size_t>(s));
            for (int i = s - 1; i >= 0; --i) {
                next[at + static_cast<std::size_t>(i)] = static_cast<Token>(code % static_cast<PatchCode>(inst.V()));
                code /= static_cast<PatchCode>(inst.V());
            }
        }
        current = std::move(next);
        if (keep_intermediates && r + 1 < inst.L()) out.intermediates->push_back(current);
    }
    out.tokens = std::move(current);
    return out;
}

/// Reduces one level: each consecutive s-tuple of level-`level` tokens to its parent.
inline std::vector<Token> decode_level(const RhmInstance& inst, int level, std::span<const Token> tokens) {
    const auto s = static_cast<std::size_t>(inst.s());
    if (tokens.size() % s != 0) throw ShapeError("decode: sequence length not a multiple of s");
    std::vector<Token> up(tokens.size() / s);
    for (std::size_t k = 0; k < up.size(); ++k) {
        auto patch = tokens.subspan(k * s, s);
        for (Token t : patch)
            if (t < 0 || t >= inst.V())
                throw UndecodableInput("token " + std::to_string(t) + " outside the vocabulary");
        auto slot = inst.lookup(level, encode_patch(patch, inst.V()));
        if (!slot)
            throw UndecodableInput("level-" + std::to_string(level) + " patch " + detail::join_tokens(patch) +
                                   " at position " + std::to_string(k) + " is produced by no rule");
        up[k] = slot->parent;
    }
    return up;
}

/// Exact bottom-up inference of the label.
inline Token decode(const RhmInstance& inst, std::span<const Token> tokens) {
    if (tokens.size() != inst.params().sentence_length())
        throw ShapeError("decode: expected " + std::to_string(inst.params().sentence_length()) + " tokens, got " +
                         std::to_string(tokens.size()));
    std::vector<Token> cur(tokens.begin(), tokens.end());
    for (int level = inst.L(); level >= 1; --level) cur = decode_level(inst, level, cur);
    return cur.front();
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationCheck {
    std::string name;
    bool pass = true;
    std::string counterexample;
};

struct ValidationReport {
    std::vector<ValidationCheck> checks;

    bool ok() const {
        return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.pass; });
    }
    const ValidationCheck* find(std::string_view name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }
    /// First failing check, or nullptr.
    const ValidationCheck* first_failure() const {
        for (const auto& c : checks)
            if (!c.pass) return &c;
        return nullptr;
    }
};

inline ValidationReport validate(const RhmInstance& inst) {
    const auto& p = inst.params();
    ValidationReport report;
    auto fail_once = [](ValidationCheck& c, std::string why) {
        if (c.pass) {
            c.pass = false;
            c.counterexample = std::move(why);
        }
    };
    auto tokens = [&](PatchCode c) { return detail::join_tokens(inst.tokens_of(c)); };

    ValidationCheck uniform{"uniformity", true, {}}, unambiguous{"non_ambiguity", true, {}}, count{"patch_count", true, {}},
        first{"first_token_uniform", true, {}};
    for (int r = 0; r < p.L; ++r) {
        const int level = r + 1;
        const std::string at = "level " + std::to_string(level);
        std::unordered_map<PatchCode, Token> owner;
        std::unordered_set<PatchCode> distinct;
        for (int nu = 0; nu < p.V; ++nu) {
            const auto& list = inst.rules(r)[static_cast<std::size_t>(nu)];
            std::unordered_set<PatchCode> mine(list.begin(), list.end());
            if (static_cast<int>(list.size()) != p.m || static_cast<int>(mine.size()) != p.m)
                fail_once(uniform, "level-" + std::to_string(r) + " symbol " + std::to_string(nu) + " owns " +
                                       std::to_string(list.size()) + " rules, " + std::to_string(mine.size()) +
                                       " distinct (expected " + std::to_string(p.m) + ")");
            for (PatchCode c : mine) {
                auto [it, fresh] = owner.try_emplace(c, nu);
                if (!fresh)
                    fail_once(unambiguous, at + " patch " + tokens(c) + " is produced by symbols " +
                                               std::to_string(it->second) + " and " + std::to_string(nu));
                distinct.insert(c);
            }
        }
        if (static_cast<int>(distinct.size()) != p.V * p.m)
            fail_once(count, at + " has " + std::to_string(distinct.size()) + " distinct patches (expected " +
                                 std::to_string(p.V * p.m) + ")");
        std::vector<int> firsts(static_cast<std::size_t>(p.V), 0);
        for (PatchCode c : distinct) ++firsts[static_cast<std::size_t>(first_token(c, p))];
        for (int mu = 0; mu < p.V; ++mu)
            if (firsts[static_cast<std::size_t>(mu)] != p.m)
                fail_once(first, at + " token " + std::to_string(mu) + " starts " +
                                     std::to_string(firsts[static_cast<std::size_t>(mu)]) + " patches (expected " +
                                     std::to_string(p.m) + ")");
    }
    report.checks = {uniform, unambiguous, count, first};
    return report;
}

// ---------------------------------------------------------------------------
// Serialization: {params:{L,s,V,m,seed}, rules: rules[l][nu][i] = [s tokens]}

inline nlohmann::json instance_to_json(const RhmInstance& inst) {
    nlohmann::json rules = nlohmann::json::array();
    for (int r = 0; r < inst.L(); ++r) {
        nlohmann::json level = nlohmann::json::array();
        for (const auto& list : inst.rules(r)) {
            nlohmann::json sym = nlohmann::json::array();
            for (PatchCode c : list) sym.push_back(inst.tokens_of(c));
            level.push_back(std::move(sym));
        }
        rules.push_back(std::move(level));
    }
    return nlohmann::json{{"params", inst.params()}, {"rules", std::move(rules)}};
}

inline std::string save_instance(const RhmInstance& inst) { return instance_to_json(inst).dump() + "\n"; }

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.is_object()) throw ParseError(path + ": expected an object");
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(path + "." + key + ": missing");
    return *it;
}

inline long long as_int(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ParseError(path + ": expected an integer");
    return j.get<long long>();
}

inline const nlohmann::json& as_array(const nlohmann::json& j, const std::string& path) {
    if (!j.is_array()) throw ParseError(path + ": expected an array");
    return j;
}

inline nlohmann::json parse_json(std::string_view text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + ": " + e.what());
    }
}

}  // namespace detail

inline RhmParams params_from_json(const nlohmann::json& j, const std::string& path = "params") {
    RhmParams p;
    p.L = static_cast<int>(detail::as_int(detail::field(j, "L", path), path + ".L"));
    p.s = static_cast<int>(detail::as_int(detail::field(j, "s", path), path + ".s"));
    p.V = static_cast<int>(detail::as_int(detail::field(j, "V", path), path + ".V"));
    p.m = static_cast<int>(detail::as_int(detail::field(j, "m", path), path + ".m"));
    const auto& seed = detail::field(j, "seed", path);
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0))
        throw ParseError(path + ".seed: expected a nonnegative integer");
    p.seed = seed.get<std::uint64_t>();
    try {
        p.validate();
    } catch (const ParameterError& e) {
        throw ParseError(path + ": " + e.what());
    }
    return p;
}

inline RhmInstance instance_from_json(const nlohmann::json& j) {
    const RhmParams p = params_from_json(detail::field(j, "params", "$"), "$.params");
    const auto& rules = detail::as_array(detail::field(j, "rules", "$"), "$.rules");
    std::vector<std::vector<std::vector<std::vector<Token>>>> table;
    for (std::size_t r = 0; r < rules.size(); ++r) {
        const std::string pr = "$.rules[" + std::to_string(r) + "]";
        auto& level = table.emplace_back();
        for (std::size_t nu = 0; nu < detail::as_array(rules[r], pr).size(); ++nu) {
            const std::string pn = pr + "[" + std::to_string(nu) + "]";
            auto& sym = level.emplace_back();
            for (std::size_t i = 0; i < detail::as_array(rules[r][nu], pn).size(); ++i) {
                const std::string pi = pn + "[" + std::to_string(i) + "]";
                auto& patch = sym.emplace_back();
                for (std::size_t k = 0; k < detail::as_array(rules[r][nu][i], pi).size(); ++k)
                    patch.push_back(static_cast<Token>(
                        detail::as_int(rules[r][nu][i][k], pi + "[" + std::to_string(k) + "]")));
            }
        }
    }
    RhmInstance inst = RhmInstance::from_tokens(p, table);
    const auto report = validate(inst);
    if (const auto* bad = report.first_failure())
        throw InvariantError("grammar violates " + bad->name + ": " + bad->counterexample);
    return inst;
}

inline RhmInstance load_instance(std::string_view text) {
    return instance_from_json(detail::parse_json(text, "grammar"));
}

}  // namespace rhm
