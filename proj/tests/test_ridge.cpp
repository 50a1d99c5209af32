#include <cmath>

#include <gtest/gtest.h>

#include "rhm/ridge.hpp"

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// N unit-norm rows in dimension D with labels in [0, V).
rhm::RidgeData random_dataset(int N, int D, int V, rhm::Stream& rng) {
    rhm::RowMatrix X(N, D);
    std::vector<int> y(N);
    for (int i = 0; i < N; ++i) {
        for (int k = 0; k < D; ++k) X(i, k) = rng.normal();
        X.row(i).normalize();
        y[i] = static_cast<int>(rng.below(V));
    }
    return rhm::RidgeData::from_samples(std::move(X), y, V);
}

MatrixXd random_matrix(int r, int c, rhm::Stream& rng) {
    MatrixXd A(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) A(i, j) = rng.normal();
    return A;
}

TEST(Ridge, GradientMatchesCentralDifferences) {
    rhm::Stream rng(1);
    const auto d = random_dataset(40, 12, 4, rng);
    const double lambda = 0.125;
    for (int probe = 0; probe < 20; ++probe) {
        const MatrixXd W = random_matrix(4, 12, rng);
        const MatrixXd D = random_matrix(4, 12, rng);
        const double h = 1e-4;
        const double fd = (rhm::ridge_loss(d, W + h * D, lambda) - rhm::ridge_loss(d, W - h * D, lambda)) / (2 * h);
        const double an = rhm::ridge_gradient(d, W, lambda).cwiseProduct(D).sum();
        EXPECT_LE(std::abs(fd - an) / std::abs(an), 1e-6);
    }
}

TEST(Ridge, LossAtZeroIsOneHalf) {
    rhm::Stream rng(2);
    const auto d = random_dataset(10, 5, 3, rng);
    EXPECT_DOUBLE_EQ(rhm::ridge_loss(d, MatrixXd::Zero(3, 5), 0.3), 0.5);
}

TEST(Ridge, GradientVanishesAtClosedForm) {
    rhm::Stream rng(3);
    const auto d = random_dataset(30, 8, 3, rng);
    const MatrixXd W = rhm::solve_closed_form(d, 0.2);
    EXPECT_LE(rhm::ridge_gradient(d, W, 0.2).norm(), 1e-12);
}

TEST(Ridge, SingleSampleRankOne) {
    rhm::Stream rng(4);
    rhm::RowMatrix X(1, 6);
    for (int k = 0; k < 6; ++k) X(0, k) = rng.normal();
    X.row(0).normalize();
    const VectorXd x = X.row(0).transpose();
    const std::vector<int> y{2};
    const auto d = rhm::RidgeData::from_samples(X, y, 4);
    const double lambda = 0.25;
    const MatrixXd want = VectorXd::Unit(4, 2) * x.transpose() / (1 + lambda);
    for (auto route : {rhm::RidgeRoute::Primal, rhm::RidgeRoute::Dual})
        EXPECT_LE((rhm::solve_closed_form(d, lambda, route) - want).norm(), 1e-14);
}

TEST(Ridge, NormBoundForLargeLambda) {
    rhm::Stream rng(5);
    const auto d = random_dataset(50, 10, 5, rng);
    for (double lambda : {1.0, 10.0, 1e3, 1e6}) EXPECT_LE(rhm::solve_closed_form(d, lambda).norm(), 1 / lambda);
}

TEST(Ridge, OrthonormalPatchesGiveShrunkPosteriors) {
    // Patch mu has embedding e_mu, empirical frequency p_mu and label histogram q_mu.
    const int P = 5, V = 3;
    const int counts[P][V] = {{3, 1, 0}, {0, 2, 2}, {1, 1, 1}, {0, 0, 4}, {5, 0, 0}};
    rhm::RowMatrix X(P, P);
    X.setIdentity();
    rhm::RidgeData d;
    d.X = X;
    d.weight.resize(P);
    d.counts.resize(P, V);
    for (int mu = 0; mu < P; ++mu) {
        for (int c = 0; c < V; ++c) d.counts(mu, c) = counts[mu][c];
        d.weight(mu) = d.counts.row(mu).sum();
    }
    const double N = d.n(), lambda = 0.2;
    const MatrixXd W = rhm::solve_closed_form(d, lambda);
    for (int mu = 0; mu < P; ++mu) {
        const double p = d.weight(mu) / N;
        const VectorXd q = d.counts.row(mu).transpose() / d.weight(mu);
        const VectorXd out = W * VectorXd::Unit(P, mu);
        EXPECT_LE((out - p / (p + lambda) * q).cwiseAbs().maxCoeff(), 1e-14);
        EXPECT_LE((out / out.sum() - q).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Ridge, PrimalAndDualAgree) {
    rhm::Stream rng(6);
    for (auto [N, D] : {std::pair{20, 64}, std::pair{80, 16}, std::pair{33, 33}}) {
        const auto d = random_dataset(N, D, 4, rng);
        const MatrixXd a = rhm::solve_closed_form(d, 0.1, rhm::RidgeRoute::Primal);
        const MatrixXd b = rhm::solve_closed_form(d, 0.1, rhm::RidgeRoute::Dual);
        EXPECT_LE((a - b).norm() / a.norm(), 1e-8);
    }
}

TEST(Ridge, WeightedRowsEqualExpandedSamples) {
    rhm::Stream rng(7);
    const auto base = random_dataset(6, 5, 3, rng);
    rhm::RowMatrix X(0, 5);
    std::vector<int> y;
    rhm::RidgeData w;
    w.X = base.X;
    w.weight = VectorXd::Zero(6);
    w.counts = rhm::RowMatrix::Zero(6, 3);
    for (int u = 0; u < 6; ++u)
        for (int rep = 0; rep <= u; ++rep) {
            const int label = (u + rep) % 3;
            X.conservativeResize(X.rows() + 1, 5);
            X.row(X.rows() - 1) = base.X.row(u);
            y.push_back(label);
            w.weight(u) += 1;
            w.counts(u, label) += 1;
        }
    const auto expanded = rhm::RidgeData::from_samples(X, y, 3);
    EXPECT_LE((rhm::solve_closed_form(w, 0.3) - rhm::solve_closed_form(expanded, 0.3)).norm(), 1e-12);
    const MatrixXd W = random_matrix(3, 5, rng);
    EXPECT_NEAR(rhm::ridge_loss(w, W, 0.3), rhm::ridge_loss(expanded, W, 0.3), 1e-12);
}

TEST(Ridge, RejectsBadInput) {
    rhm::Stream rng(8);
    auto d = random_dataset(5, 4, 2, rng);
    EXPECT_THROW(rhm::solve_closed_form(d, 0.0), rhm::ParameterError);
    d.X(1, 1) = std::nan("");
    EXPECT_THROW(rhm::solve_closed_form(d, 0.1), rhm::NumericError);
    rhm::RidgeData empty;
    empty.X.resize(0, 3);
    EXPECT_THROW(rhm::solve_closed_form(empty, 0.1), rhm::UndefinedModel);
}

class GdBound : public ::testing::TestWithParam<int> {};

// The convergence bound with |P| = V m, eta = 2|P|/(|P|+1), lambda = 1/|P|.
TEST_P(GdBound, WithinExponentialEnvelope) {
    const int V = 4, m = 2, P = V * m;
    rhm::Stream rng(100 + GetParam());
    const int N = 10 + 15 * GetParam();
    const int D = GetParam() % 2 ? 12 : 96;
    const auto d = random_dataset(N, D, V, rng);
    const double lambda = 1.0 / P;
    const MatrixXd Wstar = rhm::solve_closed_form(d, lambda);
    for (int T : {1, P, 5 * P}) {
        rhm::GdOptions opt;
        opt.steps = T;
        opt.eta = 2.0 * P / (P + 1);
        opt.lambda = lambda;
        const auto res = rhm::train_gd(d, opt);
        EXPECT_FALSE(res.fell_back);
        EXPECT_LE((res.W - Wstar).norm(), std::exp(-static_cast<double>(T) / P) * P) << "T = " << T;
    }
}

INSTANTIATE_TEST_SUITE_P(Datasets, GdBound, ::testing::Range(0, 5));

TEST(Gd, ZeroStepsGiveZero) {
    rhm::Stream rng(9);
    const auto d = random_dataset(10, 6, 3, rng);
    rhm::GdOptions opt;
    opt.steps = 0;
    opt.lambda = 0.1;
    EXPECT_EQ(rhm::train_gd(d, opt).W, MatrixXd::Zero(3, 6));
}

TEST(Gd, ConvergesToClosedForm) {
    rhm::Stream rng(10);
    const int P = 6;
    for (int D : {8, 200}) {
        const auto d = random_dataset(30, D, 3, rng);
        rhm::GdOptions opt;
        opt.lambda = 1.0 / P;
        opt.eta = 2.0 * P / (P + 1);
        opt.steps = static_cast<int>(std::ceil(P * std::log(P / 1e-6)));
        EXPECT_LE((rhm::train_gd(d, opt).W - rhm::solve_closed_form(d, opt.lambda)).norm(), 1e-6);
    }
}

TEST(Gd, LossTraceIsMonotone) {
    rhm::Stream rng(11);
    const auto d = random_dataset(60, 10, 4, rng);
    rhm::GdOptions opt;
    opt.lambda = 0.125;
    opt.eta = 16.0 / 9;
    opt.steps = 100;
    opt.record_trace = true;
    const auto res = rhm::train_gd(d, opt);
    ASSERT_EQ(res.trace.size(), 101u);
    for (std::size_t t = 1; t < res.trace.size(); ++t) EXPECT_LE(res.trace[t], res.trace[t - 1] + 1e-15);
    EXPECT_NEAR(res.trace.back(), rhm::ridge_loss(d, res.W, opt.lambda), 1e-12);
}

TEST(Gd, DivergenceFallsBackThenFails) {
    rhm::Stream rng(12);
    auto d = random_dataset(20, 5, 3, rng);
    rhm::GdOptions opt;
    opt.lambda = 0.1;
    opt.eta = 5.0;
    opt.steps = 200;
    const auto res = rhm::train_gd(d, opt);
    EXPECT_TRUE(res.fell_back);
    EXPECT_DOUBLE_EQ(res.eta_used, 1 / 1.1);

    d.X *= 10.0;  // smoothness 100: even the fallback step diverges
    EXPECT_THROW(rhm::train_gd(d, opt), rhm::StepSizeError);
}

}  // namespace
