#include <cmath>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "rhm/oracle.hpp"
#include "support.hpp"

namespace {

using rhm::RhmInstance;
using rhm::RhmParams;
using rhm::Token;

TEST(TransitionMatrices, SingleRuleRowsAreOneHot) {
    const auto inst = rhm::sample_instance({3, 2, 5, 1, 2});
    for (const auto& P : rhm::transition_matrices(inst))
        for (int r = 0; r < P.rows(); ++r) {
            EXPECT_EQ(P.row(r).maxCoeff(), 1.0);
            EXPECT_EQ((P.row(r).array() == 0.0).count(), P.cols() - 1);
        }
}

TEST(TransitionMatrices, RowAndColumnStochastic) {
    for (const RhmParams& p : {RhmParams{3, 2, 8, 2, 1}, RhmParams{2, 3, 6, 5, 2}, RhmParams{4, 2, 10, 7, 3}}) {
        for (const auto& P : rhm::transition_matrices(rhm::sample_instance(p))) {
            EXPECT_GE(P.minCoeff(), 0.0);
            for (int i = 0; i < P.rows(); ++i) {
                EXPECT_NEAR(P.row(i).sum(), 1.0, 1e-12);
                EXPECT_NEAR(P.col(i).sum(), 1.0, 1e-12);
            }
        }
    }
}

TEST(TransitionMatrices, MatchBruteForceCount) {
    const auto inst = rhm::sample_instance({2, 2, 2, 2, 5});
    const auto P = rhm::transition_matrices(inst);
    for (int r = 0; r < 2; ++r)
        for (int nu = 0; nu < 2; ++nu) {
            int hits[2] = {0, 0};
            for (auto c : inst.rules(r)[nu]) ++hits[inst.tokens_of(c)[0]];
            for (int mu = 0; mu < 2; ++mu) EXPECT_EQ(P[r](nu, mu), hits[mu] / 2.0);
        }
}

TEST(CondLabel, LevelOneIsParentOneHot) {
    const auto inst = rhm::sample_instance({3, 2, 6, 3, 4});
    const auto st = rhm::compute_stats(inst);
    for (auto c : inst.patches(1)) {
        const auto& q = rhm::cond_label_given_patch(inst, st, 1, c);
        EXPECT_EQ(q, Eigen::VectorXd::Unit(6, inst.lookup(1, c)->parent));
    }
    EXPECT_NEAR(st.level(1).rho_emp, std::sqrt(2.0), 1e-12);
}

TEST(CondLabel, UnknownPatchThrows) {
    const auto inst = rhm::sample_instance({2, 2, 4, 2, 1});
    const auto st = rhm::compute_stats(inst);
    for (rhm::PatchCode c = 0; c < 16; ++c)
        if (!inst.lookup(2, c)) {
            EXPECT_THROW(rhm::cond_label_given_patch(inst, st, 2, c), rhm::UnknownPatch);
            break;
        }
    EXPECT_THROW(rhm::cond_label_given_patch(inst, st, 3, inst.patches(1)[0]), rhm::UnknownPatch);
}

class PathEnumeration : public ::testing::TestWithParam<RhmParams> {};

TEST_P(PathEnumeration, MatchesExhaustiveOracle) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        RhmParams p = GetParam();
        p.seed = seed;
        const auto inst = rhm::sample_instance(p);
        const auto st = rhm::compute_stats(inst);
        const auto oracle = rhm::testing::enumerate_paths(inst);
        for (int l = 1; l <= p.L; ++l) {
            ASSERT_EQ(oracle.joint[l - 1].size(), inst.patches(l).size());
            for (auto c : inst.patches(l)) {
                const Eigen::VectorXd want = oracle.q(l, c);
                const auto& got = rhm::cond_label_given_patch(inst, st, l, c);
                EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12) << "level " << l;
                EXPECT_NEAR(rhm::patch_probability(inst, st, l, c), oracle.p(l, c), 1e-12);
            }
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Shapes, PathEnumeration,
                         ::testing::Values(RhmParams{2, 2, 3, 2, 0}, RhmParams{2, 2, 4, 3, 0}, RhmParams{3, 2, 3, 2, 0},
                                           RhmParams{2, 3, 3, 3, 0}, RhmParams{3, 2, 4, 2, 0},
                                           RhmParams{3, 2, 5, 3, 0}));

TEST(CondLabel, MatchesMonteCarlo) {
    const auto inst = rhm::sample_instance({2, 2, 3, 2, 6});
    const auto st = rhm::compute_stats(inst);
    rhm::Stream rng(31);
    std::map<rhm::PatchCode, Eigen::VectorXd> counts;
    for (int i = 0; i < 1000000; ++i) {
        const auto smp = rhm::generate_sample(inst, rng);
        const auto c = rhm::encode_patch(std::span<const Token>(smp.tokens).first(2), 3);
        auto& v = counts[c];
        if (v.size() == 0) v = Eigen::VectorXd::Zero(3);
        v(smp.label) += 1;
    }
    for (const auto& [c, v] : counts) {
        const Eigen::VectorXd freq = v / v.sum();
        EXPECT_LE((freq - rhm::cond_label_given_patch(inst, st, 2, c)).cwiseAbs().maxCoeff(), 5e-3);
    }
}

TEST(PatchProbability, UniformUnderFirstTokenUniformity) {
    const auto inst = rhm::sample_instance({3, 2, 7, 3, 8});
    const auto st = rhm::compute_stats(inst);
    for (int l = 1; l <= 3; ++l) {
        double total = 0;
        for (double p : st.level(l).p_patch) {
            EXPECT_NEAR(p, 1.0 / 21, 1e-15);
            total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    EXPECT_EQ(st.kappa, 1.0);
}

TEST(PatchProbability, NonUniformInstanceMatchesMonteCarlo) {
    // Token 0 starts three of the six level-1 patches, so level-2 marginals skew.
    const auto inst = RhmInstance::from_tokens({2, 2, 3, 2, 0}, {{{{0, 0}, {0, 1}}, {{0, 2}, {1, 0}}, {{1, 1}, {2, 2}}},
                                                                 {{{0, 1}, {2, 0}}, {{0, 0}, {1, 2}}, {{0, 2}, {1, 1}}}});
    ASSERT_FALSE(rhm::validate(inst).find("first_token_uniform")->pass);
    ASSERT_TRUE(rhm::validate(inst).find("non_ambiguity")->pass);
    const auto st = rhm::compute_stats(inst);
    const auto oracle = rhm::testing::enumerate_paths(inst);
    rhm::Stream rng(4);
    const int n = 1000000;
    std::map<rhm::PatchCode, int> hits;
    for (int i = 0; i < n; ++i) {
        const auto smp = rhm::generate_sample(inst, rng);
        ++hits[rhm::encode_patch(std::span<const Token>(smp.tokens).first(2), 3)];
    }
    double total = 0;
    for (auto c : inst.patches(2)) {
        const double p = rhm::patch_probability(inst, st, 2, c);
        total += p;
        EXPECT_NEAR(p, oracle.p(2, c), 1e-12);
        EXPECT_NEAR(hits[c], n * p, 3 * std::sqrt(n * p * (1 - p)));
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_GT(st.kappa, 1.0);
}

TEST(Stats, SynonymPosteriorsAreBitwiseEqual) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto inst = rhm::sample_instance({3, 2, 8, 2, seed});
        const auto st = rhm::compute_stats(inst);
        for (int l = 1; l <= 3; ++l) {
            const auto& pats = inst.patches(l);
            for (std::size_t i = 0; i < pats.size(); ++i)
                for (std::size_t j = 0; j < pats.size(); ++j)
                    if (inst.synonyms(l, pats[i], pats[j])) ASSERT_EQ(st.level(l).q[i], st.level(l).q[j]);
        }
        EXPECT_TRUE(rhm::audit_assumptions(inst, st).synonym_q_equal);
    }
}

TEST(Stats, ProbabilityConservation) {
    const auto inst = rhm::sample_instance({4, 2, 6, 4, 3});
    const auto st = rhm::compute_stats(inst);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(6, 6);
    for (const auto& P : st.P) {
        acc = acc * P;
        for (int mu = 0; mu < 6; ++mu) EXPECT_NEAR(acc.col(mu).sum(), 1.0, 1e-12);
    }
    for (const auto& lv : st.levels)
        for (const auto& q : lv.q) {
            EXPECT_NEAR(q.sum(), 1.0, 1e-12);
            EXPECT_GE(q.minCoeff(), 0.0);
        }
}

TEST(Stats, PermutationEquivariance) {
    const auto inst = rhm::sample_instance({3, 2, 6, 3, 9});
    const auto st = rhm::compute_stats(inst);
    rhm::Stream rng(5);
    for (int k = 0; k <= 3; ++k) {
        std::vector<Token> perm(6);
        std::iota(perm.begin(), perm.end(), 0);
        rhm::shuffle(perm, rng);
        const auto other = rhm::testing::relabel(inst, k, perm);
        ASSERT_TRUE(rhm::validate(other).ok());
        const auto st2 = rhm::compute_stats(other);
        EXPECT_NEAR(st2.kappa, st.kappa, 1e-12);
        for (int l = 1; l <= 3; ++l) EXPECT_NEAR(st2.level(l).rho_emp, st.level(l).rho_emp, 1e-12) << "k=" << k;
        EXPECT_NEAR(st2.K_rho_emp, st.K_rho_emp, 1e-12);
    }
}

TEST(Audit, FirstTokenUniformInstance) {
    const auto inst = rhm::sample_instance({2, 2, 4, 2, 1});
    const auto st = rhm::compute_stats(inst);
    const auto rep = rhm::audit_assumptions(inst, st);
    EXPECT_EQ(rep.kappa, 1.0);
    ASSERT_EQ(rep.levels.size(), 2u);
    EXPECT_NEAR(rep.levels[0].rho_emp, std::sqrt(2.0), 1e-12);
    EXPECT_EQ(rep.levels[0].bound, 1.0);
    EXPECT_TRUE(rep.levels[0].pass);
    EXPECT_NEAR(rep.levels[1].bound, 1 / std::sqrt(40.0), 1e-15);
}

TEST(Audit, JsonShape) {
    const auto inst = rhm::sample_instance({2, 2, 4, 2, 1});
    const auto j = rhm::audit_to_json(rhm::audit_assumptions(inst, rhm::compute_stats(inst)));
    EXPECT_EQ(j["kappa"], 1.0);
    ASSERT_EQ(j["levels"].size(), 2u);
    for (const char* key : {"l", "rho_emp", "bound", "pass"}) EXPECT_TRUE(j["levels"][0].contains(key));
    EXPECT_TRUE(j.contains("K_rho_emp"));
}

TEST(Audit, SingleParentLevelReportsNull) {
    const auto inst = rhm::sample_instance({1, 2, 1, 1, 0});
    const auto st = rhm::compute_stats(inst);
    EXPECT_TRUE(std::isinf(st.level(1).rho_emp));
    const auto j = rhm::audit_to_json(rhm::audit_assumptions(inst, st));
    EXPECT_TRUE(j["levels"][0]["rho_emp"].is_null());
}

}  // namespace
