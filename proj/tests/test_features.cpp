#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "rhm/features.hpp"

namespace {

using Eigen::VectorXd;

VectorXd random_vector(int d, rhm::Stream& rng, double scale = 1.0) {
    VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = scale * rng.normal();
    return v;
}

TEST(FeatureMap, RejectsBadParameters) {
    rhm::Stream rng(1);
    EXPECT_THROW(rhm::sample_feature_map(4, 0, 1.0, rng), rhm::ParameterError);
    EXPECT_THROW(rhm::sample_feature_map(4, 8, 0.0, rng), rhm::ParameterError);
    EXPECT_THROW(rhm::sample_feature_map(4, 8, -1.0, rng), rhm::ParameterError);
}

TEST(FeatureMap, UnitNormOnRandomInputs) {
    rhm::Stream rng(2);
    const auto map = rhm::sample_feature_map(6, 300, 0.7, rng);
    EXPECT_EQ(map.output_dim(), 600);
    for (int i = 0; i < 10000; ++i) {
        const VectorXd h = random_vector(6, rng, 3.0);
        const VectorXd x = map.apply(h);
        ASSERT_NEAR(x.norm(), 1.0, 1e-12);
        ASSERT_NEAR(x.dot(x), 1.0, 1e-12);
    }
}

TEST(FeatureMap, ZeroInputInterleavesCosSin) {
    rhm::Stream rng(3);
    const auto map = rhm::sample_feature_map(5, 16, 1.3, rng);
    const VectorXd x = map.apply(VectorXd::Zero(5));
    for (int k = 0; k < 16; ++k) {
        EXPECT_DOUBLE_EQ(x(2 * k), 0.25);
        EXPECT_DOUBLE_EQ(x(2 * k + 1), 0.0);
    }
}

TEST(FeatureMap, ShapeMismatchThrows) {
    rhm::Stream rng(4);
    const auto map = rhm::sample_feature_map(5, 16, 1.0, rng);
    EXPECT_THROW(map.apply(VectorXd::Zero(4)), rhm::ShapeError);
    EXPECT_THROW(map.apply_rows(rhm::RowMatrix::Zero(3, 6)), rhm::ShapeError);
}

TEST(FeatureMap, RowApplyMatchesVectorApply) {
    rhm::Stream rng(5);
    const auto map = rhm::sample_feature_map(3, 40, 0.5, rng);
    rhm::RowMatrix H(7, 3);
    for (int i = 0; i < 7; ++i) H.row(i) = random_vector(3, rng).transpose();
    const rhm::RowMatrix X = map.apply_rows(H);
    for (int i = 0; i < 7; ++i) EXPECT_EQ(VectorXd(X.row(i).transpose()), map.apply(H.row(i).transpose()));
}

TEST(FeatureMap, FrequencyVariance) {
    rhm::Stream rng(6);
    const double sigma = 0.4;
    const auto map = rhm::sample_feature_map(1, 100000, sigma, rng);
    const auto& w = map.omega();
    const double mean = w.mean();
    const double var = (w.array() - mean).square().sum() / (w.size() - 1);
    EXPECT_NEAR(var * sigma * sigma, 1.0, 0.02);
}

TEST(FeatureMap, InnerProductApproximatesKernel) {
    const double sigma = 0.8;
    rhm::Stream rng(7);
    VectorXd dir = random_vector(6, rng);
    dir.normalize();
    const VectorXd h = random_vector(6, rng);
    for (double dist : {0.0, sigma, 2 * sigma}) {
        const VectorXd h2 = h + dist * dir;
        double mean = 0;
        for (int t = 0; t < 50; ++t) {
            const auto map = rhm::sample_feature_map(6, 2048, sigma, rng);
            mean += map.apply(h).dot(map.apply(h2)) / 50;
        }
        EXPECT_NEAR(mean, std::exp(-dist * dist / (2 * sigma * sigma)), 0.02) << "distance " << dist;
    }
}

TEST(FeatureMap, InnerProductSymmetricAndBounded) {
    rhm::Stream rng(8);
    const auto map = rhm::sample_feature_map(4, 64, 0.3, rng);
    for (int i = 0; i < 200; ++i) {
        const VectorXd a = map.apply(random_vector(4, rng)), b = map.apply(random_vector(4, rng));
        EXPECT_EQ(a.dot(b), b.dot(a));
        EXPECT_LE(std::abs(a.dot(b)), 1.0 + 1e-12);
    }
}

TEST(RbfKernel, AnalyticValues) {
    const double sigma = 1.7;
    const VectorXd h = VectorXd::Zero(3);
    EXPECT_EQ(rhm::rbf_kernel(sigma, h, h), 1.0);
    EXPECT_NEAR(rhm::rbf_kernel(sigma, h, VectorXd::Unit(3, 1) * sigma * std::sqrt(2 * std::numbers::ln2)), 0.5, 1e-15);
    EXPECT_NEAR(rhm::rbf_kernel(sigma, h, VectorXd::Unit(3, 2) * 2 * sigma), std::exp(-2.0), 1e-15);
    EXPECT_NEAR(std::exp(-2.0), 0.135335, 1e-6);
}

TEST(RbfKernel, FactorizesOverBlocks) {
    rhm::Stream rng(9);
    const double sigma = 0.9;
    for (int t = 0; t < 20; ++t) {
        const VectorXd a = random_vector(6, rng), b = random_vector(6, rng);
        double prod = 1;
        for (int k = 0; k < 3; ++k) prod *= rhm::rbf_kernel(sigma, a.segment(2 * k, 2), b.segment(2 * k, 2));
        EXPECT_NEAR(rhm::rbf_kernel(sigma, a, b), prod, 1e-12);
    }
}

TEST(RbfKernel, IncreasingInBandwidth) {
    const VectorXd a = VectorXd::Zero(2), b = VectorXd::Ones(2);
    double prev = 0;
    for (double sigma = 0.1; sigma < 5; sigma *= 1.3) {
        const double k = rhm::rbf_kernel(sigma, a, b);
        EXPECT_GT(k, prev);
        EXPECT_LE(k, 1.0);
        prev = k;
    }
}

TEST(FeatureMap, UnbiasedOverIndependentMaps) {
    rhm::Stream rng(10);
    const double sigma = 1.0;
    for (int pair = 0; pair < 20; ++pair) {
        const VectorXd a = random_vector(4, rng, 0.5), b = random_vector(4, rng, 0.5);
        double s1 = 0, s2 = 0;
        for (int t = 0; t < 200; ++t) {
            const auto map = rhm::sample_feature_map(4, 32, sigma, rng);
            const double v = map.apply(a).dot(map.apply(b));
            s1 += v;
            s2 += v * v;
        }
        const double mean = s1 / 200, se = std::sqrt((s2 / 200 - mean * mean) / 199);
        EXPECT_LE(std::abs(mean - rhm::rbf_kernel(sigma, a, b)), 3 * se + 1e-12) << "pair " << pair;
    }
}

TEST(Diagnostics, OrthogonalAndDuplicated) {
    std::vector<std::vector<VectorXd>> groups;
    for (int i = 0; i < 4; ++i) groups.push_back({VectorXd::Unit(4, i)});
    auto d = rhm::measure_embedding_diagnostics(groups);
    EXPECT_EQ(d.eps_O, 0.0);
    EXPECT_EQ(d.eps_S, 0.0);
    groups[2].push_back(VectorXd::Unit(4, 2));
    d = rhm::measure_embedding_diagnostics(groups);
    EXPECT_EQ(d.eps_S, 0.0);
    groups[1].push_back(VectorXd::Unit(4, 2));
    d = rhm::measure_embedding_diagnostics(groups);
    EXPECT_NEAR(d.eps_S, std::sqrt(2.0), 1e-15);
    EXPECT_EQ(d.eps_O, 1.0);
}

// One-hot leaf patches (s = 2, V = 4) through maps with the separation bandwidth
// sigma^2 = rho^2 / (2 log(2 / eps_O)), rho = sqrt 2, and M from the random-feature
// count formula scaled by 0.1.
TEST(Diagnostics, CalibratedFeatureCountMeetsOrthogonalityTarget) {
    const int V = 4, s = 2, d_h = s * V;
    const double eps_O = 0.1, eps_rf = eps_O / 2, delta = 0.05;
    const double sigma = std::sqrt(2.0 / (2 * std::log(2 / eps_O)));
    std::vector<std::vector<VectorXd>> probes;
    for (int a = 0; a < V; ++a)
        for (int b = 0; b < V; ++b) {
            VectorXd h = VectorXd::Zero(d_h);
            h(a) = 1;
            h(V + b) = 1;
            probes.push_back({h});
        }
    const double formula = d_h / (eps_rf * eps_rf) * std::log(d_h / (sigma * sigma * eps_rf * eps_rf * delta));
    const int M = static_cast<int>(std::ceil(0.1 * formula));
    rhm::Stream rng(11);
    int ok = 0;
    for (int t = 0; t < 100; ++t) {
        rhm::Stream child = rng.split();
        const auto map = rhm::sample_feature_map(d_h, M, sigma, child);
        const auto diag = rhm::measure_diagnostics(map, probes);
        EXPECT_EQ(diag.eps_S, 0.0);
        ok += diag.eps_O <= eps_O;
    }
    EXPECT_GE(ok, 95) << "M = " << M;

    const int candidates[] = {M / 16, M / 8, M / 4, M / 2, M};
    rhm::Stream cal(12);
    const int chosen = rhm::calibrate_feature_count(d_h, sigma, probes, eps_O, candidates, 100, 0.95, cal);
    EXPECT_GT(chosen, 0);
    EXPECT_LE(chosen, M);
}

TEST(FeatureMap, JsonRoundTripIsBitExact) {
    rhm::Stream rng(13);
    const auto map = rhm::sample_feature_map(5, 33, 0.123456789, rng);
    const auto back = rhm::feature_map_from_json(nlohmann::json::parse(rhm::feature_map_to_json(map).dump()), "$");
    EXPECT_TRUE(back == map);
}

}  // namespace
