#pragma once

// Ridge regression onto one-hot labels,
//     L(W) = 1/(2N) sum_i ||e_{y_i} - W x_i||^2 + lambda/2 ||W||_F^2,
// over a weighted dataset: identical embeddings are stored once with their
// multiplicity and per-label counts. The weighted objective is identical to the
// one over the expanded sample list.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhm/errors.hpp"
#include "rhm/features.hpp"

namespace rhm {

struct RidgeData {
    /// One embedding per row (U x D).
    RowMatrix X;
    /// Multiplicity of each row (U); sums to N.
    Eigen::VectorXd weight;
    /// counts(u, c): samples at row u with label c (U x V).
    RowMatrix counts;

    Eigen::Index rows() const { return X.rows(); }
    Eigen::Index dim() const { return X.cols(); }
    Eigen::Index classes() const { return counts.cols(); }
    double n() const { return weight.sum(); }

    /// One row per sample.
    static RidgeData from_samples(RowMatrix X, std::span<const int> labels, int classes) {
        if (static_cast<std::size_t>(X.rows()) != labels.size()) throw ShapeError("ridge: rows/labels mismatch");
        RidgeData d;
        d.X = std::move(X);
        d.weight = Eigen::VectorXd::Ones(d.X.rows());
        d.counts = RowMatrix::Zero(d.X.rows(), classes);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= classes) throw ShapeError("ridge: label out of range");
            d.counts(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
        }
        return d;
    }

    void check() const {
        if (X.rows() < 1) throw UndefinedModel("ridge: empty dataset");
        if (weight.size() != X.rows() || counts.rows() != X.rows()) throw ShapeError("ridge: inconsistent dataset");
        if (!X.allFinite() || !weight.allFinite() || !counts.allFinite()) throw NumericError("ridge: non-finite input");
        if ((weight.array() <= 0).any()) throw ShapeError("ridge: row weights must be positive");
    }
};

namespace detail {

/// Sigma = X^T diag(w) X / N and B = C^T X / N.
inline void moments(const RidgeData& d, Eigen::MatrixXd& sigma, Eigen::MatrixXd& B) {
    const double n = d.n();
    const RowMatrix WX = d.weight.asDiagonal() * d.X;
    sigma = (d.X.transpose() * WX) / n;
    B = (d.counts.transpose() * d.X) / n;
}

}  // namespace detail

enum class RidgeRoute { Auto, Primal, Dual };

/// Exact minimizer W = B (Sigma + lambda I)^(-1). Auto picks the dual (Gram)
/// form when the embedding dimension exceeds the number of rows.
inline Eigen::MatrixXd solve_closed_form(const RidgeData& d, double lambda, RidgeRoute route = RidgeRoute::Auto) {
    d.check();
    if (!(lambda > 0) || !std::isfinite(lambda)) throw ParameterError("ridge: lambda_W must be positive");
    if (route == RidgeRoute::Auto) route = d.dim() > d.rows() ? RidgeRoute::Dual : RidgeRoute::Primal;
    const double n = d.n();
    Eigen::MatrixXd W;
    if (route == RidgeRoute::Primal) {
        Eigen::MatrixXd sigma, B;
        detail::moments(d, sigma, B);
        sigma.diagonal().array() += lambda;
        W = sigma.llt().solve(B.transpose()).transpose();
    } else {
        // W = C^T S^-1 (S G S + lambda N I)^-1 S X with S = diag(sqrt(w)), G = X X^T.
        const Eigen::VectorXd s = d.weight.cwiseSqrt();
        const RowMatrix SX = s.asDiagonal() * d.X;
        Eigen::MatrixXd K = SX * SX.transpose();
        K.diagonal().array() += lambda * n;
        const Eigen::MatrixXd CS = d.counts.transpose() * s.cwiseInverse().asDiagonal();
        const Eigen::MatrixXd A = K.llt().solve(CS.transpose()).transpose();
        W = A * SX;
    }
    if (!W.allFinite()) throw NumericError("ridge: solution is not finite");
    return W;
}

inline double ridge_loss(const RidgeData& d, const Eigen::MatrixXd& W, double lambda) {
    const RowMatrix Y = d.X * W.transpose();  // U x V predictions
    double fit = 0.0;
    for (Eigen::Index u = 0; u < d.rows(); ++u)
        fit += d.weight(u) * (1.0 + Y.row(u).squaredNorm()) - 2.0 * d.counts.row(u).dot(Y.row(u));
    return 0.5 * fit / d.n() + 0.5 * lambda * W.squaredNorm();
}

/// Analytic gradient W (Sigma + lambda I) - B, evaluated from the rows.
inline Eigen::MatrixXd ridge_gradient(const RidgeData& d, const Eigen::MatrixXd& W, double lambda) {
    const RowMatrix Y = d.X * W.transpose();
    const RowMatrix R = d.weight.asDiagonal() * Y - d.counts;  // U x V residual weights
    return (R.transpose() * d.X) / d.n() + lambda * W;
}

struct GdOptions {
    int steps = 0;
    double eta = 1.0;
    double lambda = 1.0;
    /// Consecutive loss increases that count as divergence.
    int divergence_window = 10;
    bool record_trace = false;
};

struct GdResult {
    Eigen::MatrixXd W;
    double eta_used = 0.0;
    bool fell_back = false;
    /// Loss at W_0, ..., W_T when requested.
    std::vector<double> trace;
};

namespace detail {

/// Plain full-batch GD from W = 0. Returns false on divergence.
inline bool run_gd(const RidgeData& d, const GdOptions& opt, double eta, GdResult& out) {
    const double n = d.n();
    const double lambda = opt.lambda;
    out.trace.clear();
    int rising = 0;
    double prev = 0.5;  // loss at W = 0
    auto observe = [&](double loss) {
        if (!std::isfinite(loss)) return false;
        if (opt.record_trace) out.trace.push_back(loss);
        rising = loss > prev ? rising + 1 : 0;
        prev = loss;
        return rising < opt.divergence_window;
    };
    if (opt.record_trace) out.trace.push_back(prev);

    if (d.dim() <= d.rows()) {
        Eigen::MatrixXd H, B;
        moments(d, H, B);
        H.diagonal().array() += lambda;
        Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d.classes(), d.dim());
        for (int t = 0; t < opt.steps; ++t) {
            W -= eta * (W * H - B);
            const double loss = 0.5 * (W * H).cwiseProduct(W).sum() - B.cwiseProduct(W).sum() + 0.5;
            if (!observe(loss)) return false;
        }
        out.W = std::move(W);
    } else {
        // Iterates stay in the row space of X: W_t = A_t X.
        const Eigen::MatrixXd G = d.X * d.X.transpose();
        const Eigen::MatrixXd Ct = d.counts.transpose();
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(d.classes(), d.rows());
        for (int t = 0; t < opt.steps; ++t) {
            const Eigen::MatrixXd AG = A * G;  // predictions, V x U
            A -= eta * ((AG * d.weight.asDiagonal() - Ct) / n + lambda * A);
            const Eigen::MatrixXd Y = A * G;
            double fit = 0.0;
            for (Eigen::Index u = 0; u < d.rows(); ++u)
                fit += d.weight(u) * (1.0 + Y.col(u).squaredNorm()) - 2.0 * Ct.col(u).dot(Y.col(u));
            const double loss = 0.5 * fit / n + 0.5 * lambda * (A * G).cwiseProduct(A).sum();
            if (!observe(loss)) return false;
        }
        out.W = A * d.X;
    }
    out.eta_used = eta;
    return out.W.allFinite();
}

}  // namespace detail

/// T steps of full-batch gradient descent from W = 0. If the loss rises for
/// `divergence_window` consecutive steps the run restarts with eta = 1/(1 + lambda);
/// a second divergence throws StepSizeError.
inline GdResult train_gd(const RidgeData& d, const GdOptions& opt) {
    d.check();
    if (!(opt.lambda > 0)) throw ParameterError("gd: lambda_W must be positive");
    if (!(opt.eta > 0)) throw ParameterError("gd: eta must be positive");
    if (opt.steps < 0) throw ParameterError("gd: T must be >= 0");
    GdResult res;
    if (detail::run_gd(d, opt, opt.eta, res)) return res;
    const double fallback = 1.0 / (1.0 + opt.lambda);
    if (opt.eta != fallback && detail::run_gd(d, opt, fallback, res)) {
        res.fell_back = true;
        return res;
    }
    throw StepSizeError("gradient descent diverged (eta = " + std::to_string(opt.eta) + ")");
}

}  // namespace rhm
