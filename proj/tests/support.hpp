#pragma once

// Helpers shared by the unit tests and the acceptance binary: an exhaustive
// generation-path oracle and a few file utilities.

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhm/grammar.hpp"

namespace rhm::testing {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// joint[l - 1][patch](zeta) = P(label = zeta, first level-l patch = patch), summed
/// over every complete derivation tree. Uses nothing but the rule table.
struct PathOracle {
    std::vector<std::map<PatchCode, Eigen::VectorXd>> joint;
    long long paths = 0;

    Eigen::VectorXd q(int level, PatchCode c) const {
        const Eigen::VectorXd& j = joint.at(static_cast<std::size_t>(level - 1)).at(c);
        return j / j.sum();
    }
    double p(int level, PatchCode c) const { return joint.at(static_cast<std::size_t>(level - 1)).at(c).sum(); }
};

inline PathOracle enumerate_paths(const RhmInstance& inst, long long max_paths = 1000000) {
    const int L = inst.L(), s = inst.s(), V = inst.V();
    PathOracle out;
    out.joint.resize(static_cast<std::size_t>(L));

    // Expands `level` (a full level-r sequence) one symbol at a time; `next` collects
    // the level-(r+1) sequence, `firsts` the first patch at each finished level.
    std::function<void(int, const std::vector<Token>&, std::size_t, std::vector<Token>&, double, Token,
                       std::vector<PatchCode>&)>
        expand = [&](int r, const std::vector<Token>& level, std::size_t k, std::vector<Token>& next, double w,
                     Token label, std::vector<PatchCode>& firsts) {
            if (k == level.size()) {
                firsts.push_back(encode_patch(std::span<const Token>(next).first(static_cast<std::size_t>(s)), V));
                if (r + 1 == L) {
                    if (++out.paths > max_paths) throw std::runtime_error("path enumeration too large");
                    for (int l = 1; l <= L; ++l) {
                        auto& slot = out.joint[static_cast<std::size_t>(l - 1)][firsts[static_cast<std::size_t>(l - 1)]];
                        if (slot.size() == 0) slot = Eigen::VectorXd::Zero(V);
                        slot(label) += w;
                    }
                } else {
                    std::vector<Token> deeper;
                    expand(r + 1, next, 0, deeper, w, label, firsts);
                }
                firsts.pop_back();
                return;
            }
            const auto& options = inst.rules(r)[static_cast<std::size_t>(level[k])];
            for (PatchCode c : options) {
                const auto toks = inst.tokens_of(c);
                next.insert(next.end(), toks.begin(), toks.end());
                expand(r, level, k + 1, next, w / static_cast<double>(options.size()), label, firsts);
                next.resize(next.size() - toks.size());
            }
        };
    for (Token z = 0; z < V; ++z) {
        std::vector<Token> root{z}, next;
        std::vector<PatchCode> firsts;
        expand(0, root, 0, next, 1.0 / V, z, firsts);
    }
    return out;
}

/// Rebuilds the instance with level-`k` symbols renamed by `perm` (k in [0, L]).
inline RhmInstance relabel(const RhmInstance& inst, int k, const std::vector<Token>& perm) {
    std::vector<std::vector<std::vector<std::vector<Token>>>> table(static_cast<std::size_t>(inst.L()));
    for (int r = 0; r < inst.L(); ++r) {
        auto& level = table[static_cast<std::size_t>(r)];
        level.resize(static_cast<std::size_t>(inst.V()));
        for (int nu = 0; nu < inst.V(); ++nu) {
            const int owner = r == k ? perm[static_cast<std::size_t>(nu)] : nu;
            for (PatchCode c : inst.rules(r)[static_cast<std::size_t>(nu)]) {
                auto toks = inst.tokens_of(c);
                if (r + 1 == k)
                    for (auto& t : toks) t = perm[static_cast<std::size_t>(t)];
                level[static_cast<std::size_t>(owner)].push_back(toks);
            }
        }
    }
    return RhmInstance::from_tokens(inst.params(), table);
}

}  // namespace rhm::testing
