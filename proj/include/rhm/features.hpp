#pragma once

// Random Fourier features for the Gaussian (RBF) kernel
//     psi_sigma(h, h') = exp(-||h - h'||^2 / (2 sigma^2)).
// Phi(h) = M^(-1/2) (cos(w_1.h), sin(w_1.h), ..., cos(w_M.h), sin(w_M.h)) with
// w_k ~ N(0, sigma^-2 I). The (cos, sin) pairs are interleaved; serialized
// models depend on this layout.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/random.hpp"

namespace rhm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class FeatureMap {
public:
    FeatureMap() = default;
    FeatureMap(double sigma, RowMatrix omega) : sigma_(sigma), omega_(std::move(omega)) {
        if (!(sigma_ > 0) || !std::isfinite(sigma_)) throw ParameterError("feature map: sigma must be positive");
        if (omega_.rows() < 1) throw ParameterError("feature map: M must be >= 1");
        if (!omega_.allFinite()) throw NumericError("feature map: non-finite frequency");
    }

    double sigma() const noexcept { return sigma_; }
    int M() const noexcept { return static_cast<int>(omega_.rows()); }
    int input_dim() const noexcept { return static_cast<int>(omega_.cols()); }
    int output_dim() const noexcept { return 2 * M(); }
    /// Frequencies, one row per feature.
    const RowMatrix& omega() const noexcept { return omega_; }

    Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& h) const {
        if (h.size() != omega_.cols())
            throw ShapeError("feature map: input dimension " + std::to_string(h.size()) + ", expected " +
                             std::to_string(omega_.cols()));
        const Eigen::VectorXd z = omega_ * h;
        return interleave(z);
    }

    /// Row-wise apply: one input per row of H.
    RowMatrix apply_rows(const Eigen::Ref<const RowMatrix>& H) const {
        if (H.cols() != omega_.cols()) throw ShapeError("feature map: input dimension mismatch");
        const RowMatrix Z = H * omega_.transpose();
        RowMatrix out(H.rows(), 2 * M());
        const double scale = 1.0 / std::sqrt(static_cast<double>(M()));
        for (Eigen::Index i = 0; i < Z.rows(); ++i)
            for (Eigen::Index k = 0; k < Z.cols(); ++k) {
                out(i, 2 * k) = scale * std::cos(Z(i, k));
                out(i, 2 * k + 1) = scale * std::sin(Z(i, k));
            }
        return out;
    }

    friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
        return a.sigma_ == b.sigma_ && a.omega_.rows() == b.omega_.rows() && a.omega_.cols() == b.omega_.cols() &&
               a.omega_ == b.omega_;
    }

private:
    Eigen::VectorXd interleave(const Eigen::VectorXd& z) const {
        Eigen::VectorXd out(2 * z.size());
        const double scale = 1.0 / std::sqrt(static_cast<double>(z.size()));
        for (Eigen::Index k = 0; k < z.size(); ++k) {
            out(2 * k) = scale * std::cos(z(k));
            out(2 * k + 1) = scale * std::sin(z(k));
        }
        return out;
    }

    double sigma_ = 1.0;
    RowMatrix omega_;
};

/// Draws omega row by row, each entry a Box-Muller normal scaled by 1/sigma.
inline FeatureMap sample_feature_map(int input_dim, int M, double sigma, Stream& rng) {
    if (M < 1) throw ParameterError("feature map: M must be >= 1 (got " + std::to_string(M) + ")");
    if (!(sigma > 0) || !std::isfinite(sigma)) throw ParameterError("feature map: sigma must be positive");
    if (input_dim < 1) throw ParameterError("feature map: input dimension must be >= 1");
    RowMatrix omega(M, input_dim);
    for (int k = 0; k < M; ++k)
        for (int j = 0; j < input_dim; ++j) omega(k, j) = rng.normal() / sigma;
    return FeatureMap(sigma, std::move(omega));
}

inline double rbf_kernel(double sigma, const Eigen::Ref<const Eigen::VectorXd>& h,
                         const Eigen::Ref<const Eigen::VectorXd>& h2) {
    if (h.size() != h2.size()) throw ShapeError("rbf_kernel: dimension mismatch");
    return std::exp(-(h - h2).squaredNorm() / (2.0 * sigma * sigma));
}

struct FeatureDiagnostics {
    /// Max |<Phi(h), Phi(h')> - psi(h, h')| over the probed pairs.
    double eps_rf = 0.0;
    /// Max |<x, x'>| across groups.
    double eps_O = 0.0;
    /// Max ||x - x'|| within a group.
    double eps_S = 0.0;
};

/// Exact scan over already-embedded vectors grouped by patch. eps_rf is left at 0.
inline FeatureDiagnostics measure_embedding_diagnostics(const std::vector<std::vector<Eigen::VectorXd>>& groups) {
    FeatureDiagnostics d;
    for (std::size_t a = 0; a < groups.size(); ++a) {
        const auto& ga = groups[a];
        for (std::size_t i = 0; i < ga.size(); ++i)
            for (std::size_t j = i + 1; j < ga.size(); ++j) d.eps_S = std::max(d.eps_S, (ga[i] - ga[j]).norm());
        for (std::size_t b = a + 1; b < groups.size(); ++b)
            for (const auto& x : ga)
                for (const auto& y : groups[b]) d.eps_O = std::max(d.eps_O, std::abs(x.dot(y)));
    }
    return d;
}

/// Embeds pre-feature inputs grouped by patch and measures all three errors by exact scan.
inline FeatureDiagnostics measure_diagnostics(const FeatureMap& map,
                                              const std::vector<std::vector<Eigen::VectorXd>>& inputs) {
    std::vector<std::vector<Eigen::VectorXd>> embedded(inputs.size());
    std::vector<const Eigen::VectorXd*> flat_in;
    std::vector<const Eigen::VectorXd*> flat_out;
    for (std::size_t g = 0; g < inputs.size(); ++g)
        for (const auto& h : inputs[g]) embedded[g].push_back(map.apply(h));
    for (std::size_t g = 0; g < inputs.size(); ++g)
        for (std::size_t i = 0; i < inputs[g].size(); ++i) {
            flat_in.push_back(&inputs[g][i]);
            flat_out.push_back(&embedded[g][i]);
        }
    FeatureDiagnostics d = measure_embedding_diagnostics(embedded);
    for (std::size_t i = 0; i < flat_in.size(); ++i)
        for (std::size_t j = i; j < flat_in.size(); ++j)
            d.eps_rf = std::max(d.eps_rf, std::abs(flat_out[i]->dot(*flat_out[j]) -
                                                   rbf_kernel(map.sigma(), *flat_in[i], *flat_in[j])));
    return d;
}

/// Smallest M in `candidates` (ascending) for which at least `quantile` of `trials`
/// independent maps reach eps_O <= target on the probe groups. Returns 0 if none does.
inline int calibrate_feature_count(int input_dim, double sigma, const std::vector<std::vector<Eigen::VectorXd>>& probes,
                                   double target_eps_O, std::span<const int> candidates, int trials, double quantile,
                                   Stream& rng) {
    for (int M : candidates) {
        int ok = 0;
        for (int t = 0; t < trials; ++t) {
            Stream child = rng.split();
            const auto map = sample_feature_map(input_dim, M, sigma, child);
            if (measure_diagnostics(map, probes).eps_O <= target_eps_O) ++ok;
        }
        if (ok >= quantile * trials) return M;
    }
    return 0;
}

// {sigma, M, omega: [[...] x M]} with rows of length input_dim.
inline nlohmann::json feature_map_to_json(const FeatureMap& map) {
    nlohmann::json omega = nlohmann::json::array();
    for (int k = 0; k < map.M(); ++k) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < map.input_dim(); ++j) row.push_back(map.omega()(k, j));
        omega.push_back(std::move(row));
    }
    return nlohmann::json{{"sigma", map.sigma()}, {"M", map.M()}, {"omega", std::move(omega)}};
}

inline FeatureMap feature_map_from_json(const nlohmann::json& j, const std::string& path) {
    auto need = [&](const char* k) -> const nlohmann::json& {
        if (!j.is_object() || !j.contains(k)) throw ParseError(path + "." + k + ": missing");
        return j.at(k);
    };
    const auto& sigma = need("sigma");
    if (!sigma.is_number()) throw ParseError(path + ".sigma: expected a number");
    const auto& M = need("M");
    if (!M.is_number_integer() || M.get<long long>() < 1) throw ParseError(path + ".M: expected a positive integer");
    const auto& omega = need("omega");
    if (!omega.is_array() || omega.size() != M.get<std::size_t>())
        throw ParseError(path + ".omega: expected " + std::to_string(M.get<long long>()) + " rows");
    const std::size_t dim = omega.empty() || !omega[0].is_array() ? 0 : omega[0].size();
    if (dim == 0) throw ParseError(path + ".omega[0]: expected a nonempty array");
    RowMatrix w(static_cast<Eigen::Index>(omega.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < omega.size(); ++k) {
        if (!omega[k].is_array() || omega[k].size() != dim)
            throw ParseError(path + ".omega[" + std::to_string(k) + "]: expected " + std::to_string(dim) + " entries");
        for (std::size_t c = 0; c < dim; ++c) {
            if (!omega[k][c].is_number())
                throw ParseError(path + ".omega[" + std::to_string(k) + "][" + std::to_string(c) + "]: expected a number");
            w(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = omega[k][c].get<double>();
        }
    }
    try {
        return FeatureMap(sigma.get<double>(), std::move(w));
    } catch (const Error& e) {
        throw ParseError(path + ": " + e.what());
    }
}

}  // namespace rhm
