#pragma once

// The L-level convolutional learner. Level l (from L at the leaves down to 1)
// embeds each patch of s token embeddings, applies W^(l) and normalizes the
// result by its coordinate sum; the normalized vectors are the level-(l-1)
// token embeddings. Levels are trained one at a time, bottom-up, each fit by
// ridge regression on the first level-l patch against the one-hot label.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rhm/errors.hpp"
#include "rhm/features.hpp"
#include "rhm/grammar.hpp"
#include "rhm/oracle.hpp"
#include "rhm/random.hpp"
#include "rhm/ridge.hpp"

namespace rhm {

/// Guard on |<1, Wx>| below which a level output cannot be normalized.
inline constexpr double kNormalizationGuard = 1e-9;

enum class Solver { ClosedForm, GradientDescent };

struct LayerConfig {
    long long N = 1;
    int T = 0;
    double eta = 1.0;
    double lambda_W = 1.0;
    int M = 256;
    double sigma = 1.0;
    double eps_target = 0.1;
    Solver solver = Solver::ClosedForm;

    void validate() const {
        if (N < 1) throw ParameterError("layer config: N must be >= 1");
        if (T < 0) throw ParameterError("layer config: T must be >= 0");
        if (!(eta > 0)) throw ParameterError("layer config: eta must be positive");
        if (!(lambda_W > 0)) throw ParameterError("layer config: lambda_W must be positive");
        if (M < 1) throw ParameterError("layer config: M must be >= 1");
        if (!(sigma > 0)) throw ParameterError("layer config: sigma must be positive");
        if (!(eps_target > 0)) throw ParameterError("layer config: eps_target must be positive");
    }
};

inline nlohmann::json layer_config_to_json(const LayerConfig& c) {
    return nlohmann::json{{"N", c.N},           {"T", c.T},         {"eta", c.eta},
                          {"lambda_W", c.lambda_W}, {"M", c.M},     {"sigma", c.sigma},
                          {"eps_target", c.eps_target},
                          {"solver", c.solver == Solver::ClosedForm ? "closed_form" : "gd"}};
}

inline LayerConfig layer_config_from_json(const nlohmann::json& j, const std::string& path) {
    if (!j.is_object()) throw ParseError(path + ": expected an object");
    LayerConfig c;
    auto num = [&](const char* k, auto& dst) {
        if (!j.contains(k)) throw ParseError(path + "." + k + ": missing");
        if (!j.at(k).is_number()) throw ParseError(path + "." + k + ": expected a number");
        dst = j.at(k).get<std::remove_reference_t<decltype(dst)>>();
    };
    num("N", c.N);
    num("T", c.T);
    num("eta", c.eta);
    num("lambda_W", c.lambda_W);
    num("M", c.M);
    num("sigma", c.sigma);
    num("eps_target", c.eps_target);
    const std::string solver = j.value("solver", std::string("closed_form"));
    if (solver == "closed_form")
        c.solver = Solver::ClosedForm;
    else if (solver == "gd")
        c.solver = Solver::GradientDescent;
    else
        throw ParseError(path + ".solver: expected \"closed_form\" or \"gd\"");
    return c;
}

// ---------------------------------------------------------------------------
// Single-level primitives

/// x = Phi(h_1 o ... o h_s).
inline Eigen::VectorXd embed_patch(const FeatureMap& map, std::span<const Eigen::VectorXd> tokens) {
    Eigen::Index total = 0;
    for (const auto& t : tokens) total += t.size();
    if (total != map.input_dim())
        throw ShapeError("embed_patch: concatenated dimension " + std::to_string(total) + ", map expects " +
                         std::to_string(map.input_dim()));
    Eigen::VectorXd h(total);
    Eigen::Index at = 0;
    for (const auto& t : tokens) {
        h.segment(at, t.size()) = t;
        at += t.size();
    }
    return map.apply(h);
}

/// h_1 (x) ... (x) h_s, first factor most significant.
inline Eigen::VectorXd tensor_product(std::span<const Eigen::VectorXd> tokens) {
    Eigen::VectorXd acc = Eigen::VectorXd::Ones(1);
    for (const auto& t : tokens) {
        Eigen::VectorXd next(acc.size() * t.size());
        for (Eigen::Index i = 0; i < acc.size(); ++i) next.segment(i * t.size(), t.size()) = acc(i) * t;
        acc = std::move(next);
    }
    return acc;
}

/// (W x) / <1, W x>; entries sum to one but may be negative.
inline Eigen::VectorXd forward_level(const Eigen::MatrixXd& W, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (W.cols() != x.size())
        throw ShapeError("forward_level: W has " + std::to_string(W.cols()) + " columns, input has " +
                         std::to_string(x.size()));
    const Eigen::VectorXd y = W * x;
    const double z = y.sum();
    if (!(std::abs(z) >= kNormalizationGuard))
        throw DegenerateNormalization("|<1, Wx>| = " + std::to_string(std::abs(z)) + " is below the guard");
    return y / z;
}

// ---------------------------------------------------------------------------
// Model

enum class EmbeddingKind {
    /// Random Fourier features of the concatenated token embeddings.
    RandomFeatures,
    /// Tensor product of the token embeddings (exact one-hot inputs only).
    Tensor,
    /// Each token snapped to the one-hot of its nearest centroid, then tensor product.
    SnappedTensor,
};

struct Level {
    int level = 1;
    EmbeddingKind kind = EmbeddingKind::RandomFeatures;
    FeatureMap map;
    /// Columns are the per-symbol centroids for SnappedTensor.
    Eigen::MatrixXd centroids;
    Eigen::MatrixXd W;
    LayerConfig config;

    Eigen::VectorXd embed(std::span<const Eigen::VectorXd> tokens) const {
        switch (kind) {
            case EmbeddingKind::RandomFeatures:
                return embed_patch(map, tokens);
            case EmbeddingKind::Tensor:
                return tensor_product(tokens);
            case EmbeddingKind::SnappedTensor: {
                std::vector<Eigen::VectorXd> snapped;
                for (const auto& t : tokens) {
                    Eigen::Index best = 0;
                    (centroids.colwise() - t).colwise().squaredNorm().minCoeff(&best);
                    snapped.push_back(Eigen::VectorXd::Unit(centroids.cols(), best));
                }
                return tensor_product(snapped);
            }
        }
        return {};
    }

    Eigen::VectorXd forward(std::span<const Eigen::VectorXd> tokens) const { return forward_level(W, embed(tokens)); }
};

struct LevelDiagnostics {
    int level = 1;
    long long n_train = 0;
    long long unique_inputs = 0;
    /// Patch-embedding errors on the training inputs, grouped by the true first patch.
    double eps_S = 0.0;
    double eps_O = 0.0;
    /// Max distance between outputs of synonym patches, min distance between non-synonym outputs.
    double out_intra = 0.0;
    double out_inter = std::numeric_limits<double>::infinity();
    double eta_used = 0.0;
    bool gd_fell_back = false;
};

struct TrainedModel {
    RhmParams params;
    /// Ordered from level L down to level 1.
    std::vector<Level> levels;
    std::vector<LevelDiagnostics> diagnostics;

    int V() const { return params.V; }
    int s() const { return params.s; }
};

inline std::vector<Eigen::VectorXd> one_hot_tokens(std::span<const Token> tokens, int V) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t < 0 || t >= V) throw ShapeError("token " + std::to_string(t) + " outside the vocabulary");
        out.push_back(Eigen::VectorXd::Unit(V, t));
    }
    return out;
}

/// Applies `levels` in order to a token-embedding sequence; each pass shrinks it by a factor s.
inline std::vector<Eigen::VectorXd> propagate(std::span<const Level> levels, std::vector<Eigen::VectorXd> seq, int s) {
    for (const auto& lv : levels) {
        if (seq.size() % static_cast<std::size_t>(s) != 0) throw ShapeError("propagate: length not a multiple of s");
        std::vector<Eigen::VectorXd> next(seq.size() / static_cast<std::size_t>(s));
        for (std::size_t k = 0; k < next.size(); ++k) {
            std::span<const Eigen::VectorXd> patch(seq.data() + k * static_cast<std::size_t>(s), static_cast<std::size_t>(s));
            try {
                next[k] = lv.forward(patch);
            } catch (const DegenerateNormalization& e) {
                throw DegenerateNormalization("level " + std::to_string(lv.level) + ": " + e.what(), lv.level);
            }
        }
        seq = std::move(next);
    }
    return seq;
}

/// Level-1 output h^(0)_1 for a full sentence.
inline Eigen::VectorXd model_output(const TrainedModel& model, std::span<const Token> tokens) {
    if (tokens.size() != model.params.sentence_length())
        throw ShapeError("expected " + std::to_string(model.params.sentence_length()) + " tokens, got " +
                         std::to_string(tokens.size()));
    if (static_cast<int>(model.levels.size()) != model.params.L) throw UndefinedModel("model is missing levels");
    auto out = propagate(model.levels, one_hot_tokens(tokens, model.V()), model.s());
    return out.front();
}

/// Argmax of the level-1 output; ties go to the lowest index.
inline Token predict(const TrainedModel& model, std::span<const Token> tokens) {
    const Eigen::VectorXd out = model_output(model, tokens);
    Token best = 0;
    for (Eigen::Index i = 1; i < out.size(); ++i)
        if (out(i) > out(best)) best = static_cast<Token>(i);
    return best;
}

inline double accuracy(const TrainedModel& model, std::span<const Sample> samples) {
    if (samples.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& s : samples) hits += predict(model, s.tokens) == s.label ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Output-cluster diagnostics with oracle intermediates

struct ClusterReport {
    int level = 1;
    double intra = 0.0;
    double inter = std::numeric_limits<double>::infinity();
};

namespace detail {

inline ClusterReport cluster_spread(int level, const std::vector<std::pair<Token, Eigen::VectorXd>>& outputs) {
    ClusterReport r;
    r.level = level;
    for (std::size_t i = 0; i < outputs.size(); ++i)
        for (std::size_t j = i + 1; j < outputs.size(); ++j) {
            const double dist = (outputs[i].second - outputs[j].second).norm();
            if (outputs[i].first == outputs[j].first)
                r.intra = std::max(r.intra, dist);
            else
                r.inter = std::min(r.inter, dist);
        }
    return r;
}

}  // namespace detail

/// For each level, the outputs at every patch of the given samples grouped by the
/// true parent symbol: max within-group and min between-group distances.
/// Samples must carry intermediates.
inline std::vector<ClusterReport> level_cluster_report(const TrainedModel& model, std::span<const Sample> samples) {
    const int L = model.params.L;
    const auto s = static_cast<std::size_t>(model.s());
    std::vector<std::vector<std::pair<Token, Eigen::VectorXd>>> by_level(static_cast<std::size_t>(L));
    for (const auto& smp : samples) {
        if (!smp.intermediates) throw ParameterError("cluster report needs samples with intermediates");
        auto seq = one_hot_tokens(smp.tokens, model.V());
        for (std::size_t li = 0; li < model.levels.size(); ++li) {
            const int level = model.levels[li].level;
            seq = propagate(std::span<const Level>(&model.levels[li], 1), std::move(seq), model.s());
            const auto& parents = (*smp.intermediates)[static_cast<std::size_t>(level - 1)];
            for (std::size_t k = 0; k < seq.size(); ++k)
                by_level[static_cast<std::size_t>(level - 1)].emplace_back(parents[k], seq[k]);
        }
        (void)s;
    }
    std::vector<ClusterReport> out;
    for (int level = L; level >= 1; --level)
        out.push_back(detail::cluster_spread(level, by_level[static_cast<std::size_t>(level - 1)]));
    return out;
}

// ---------------------------------------------------------------------------
// Layerwise training

/// Draws one labeled sentence. Intermediates are optional and used only for diagnostics.
using SampleSource = std::function<Sample(Stream&)>;

inline SampleSource instance_source(const RhmInstance& inst) {
    return [&inst](Stream& rng) { return generate_sample(inst, rng, true); };
}

struct TrainOptions {
    /// Per-patch cap on training inputs used for the eps_S / eps_O scan.
    int diagnostic_rows_per_patch = 8;
};

namespace detail {

inline Token first_patch_parent_key(const Sample& smp, int level, int s, int V, PatchCode& code) {
    const auto& seq = level == static_cast<int>(smp.intermediates->size()) ? smp.tokens
                                                                           : (*smp.intermediates)[static_cast<std::size_t>(level)];
    code = encode_patch(std::span<const Token>(seq.data(), static_cast<std::size_t>(s)), V);
    return (*smp.intermediates)[static_cast<std::size_t>(level - 1)][0];
}

}  // namespace detail

/// Trains levels L..1 in turn; `configs[0]` configures level L. Each stage draws
/// N fresh samples, pushes the leaves under the first level-l patch through the
/// trained levels, embeds that patch and fits W^(l).
inline TrainedModel train_layerwise(const SampleSource& source, const RhmParams& params,
                                    std::span<const LayerConfig> configs, Stream& rng, const TrainOptions& opt = {}) {
    params.validate();
    const int L = params.L, s = params.s, V = params.V;
    if (static_cast<int>(configs.size()) != L)
        throw ParameterError("expected " + std::to_string(L) + " layer configs, got " + std::to_string(configs.size()));
    TrainedModel model;
    model.params = params;

    for (int level = L; level >= 1; --level) {
        const LayerConfig& cfg = configs[static_cast<std::size_t>(L - level)];
        cfg.validate();
        Stream stage_rng = rng.split();
        const std::size_t leaves = static_cast<std::size_t>(*detail::checked_pow(s, L - level + 1));

        // Deduplicate on the leaves under the first patch: equal leaves give equal embeddings.
        std::map<std::vector<Token>, int> index;
        std::vector<std::vector<Token>> keys;
        std::vector<std::vector<int>> label_rows;
        std::vector<long long> weight;
        std::map<PatchCode, std::pair<Token, std::vector<int>>> groups;  // true first patch -> (parent, rows)
        for (long long i = 0; i < cfg.N; ++i) {
            const Sample smp = source(stage_rng);
            if (smp.tokens.size() != params.sentence_length()) throw ShapeError("sample has the wrong length");
            std::vector<Token> key(smp.tokens.begin(), smp.tokens.begin() + static_cast<std::ptrdiff_t>(leaves));
            auto [it, fresh] = index.try_emplace(std::move(key), static_cast<int>(keys.size()));
            if (fresh) {
                keys.push_back(it->first);
                label_rows.emplace_back(static_cast<std::size_t>(V), 0);
                weight.push_back(0);
                if (smp.intermediates) {
                    PatchCode code = 0;
                    const Token parent = detail::first_patch_parent_key(smp, level, s, V, code);
                    auto& g = groups.try_emplace(code, parent, std::vector<int>{}).first->second;
                    if (static_cast<int>(g.second.size()) < opt.diagnostic_rows_per_patch) g.second.push_back(it->second);
                }
            }
            ++label_rows[static_cast<std::size_t>(it->second)][static_cast<std::size_t>(smp.label)];
            ++weight[static_cast<std::size_t>(it->second)];
        }

        const auto U = static_cast<Eigen::Index>(keys.size());
        const int d_h = s * V;
        RowMatrix H(U, d_h);
        try {
            for (Eigen::Index u = 0; u < U; ++u) {
                auto toks = propagate(model.levels, one_hot_tokens(keys[static_cast<std::size_t>(u)], V), s);
                for (int k = 0; k < s; ++k) H.row(u).segment(k * V, V) = toks[static_cast<std::size_t>(k)].transpose();
            }
        } catch (const DegenerateNormalization& e) {
            throw StageFailure(e.level(), e.what());
        }

        Level lv;
        lv.level = level;
        lv.kind = EmbeddingKind::RandomFeatures;
        lv.config = cfg;
        lv.map = sample_feature_map(d_h, cfg.M, cfg.sigma, stage_rng);

        RidgeData data;
        data.X = lv.map.apply_rows(H);
        data.weight.resize(U);
        data.counts.resize(U, V);
        for (Eigen::Index u = 0; u < U; ++u) {
            data.weight(u) = static_cast<double>(weight[static_cast<std::size_t>(u)]);
            for (int c = 0; c < V; ++c)
                data.counts(u, c) = label_rows[static_cast<std::size_t>(u)][static_cast<std::size_t>(c)];
        }

        LevelDiagnostics diag;
        diag.level = level;
        diag.n_train = cfg.N;
        diag.unique_inputs = U;
        if (cfg.solver == Solver::ClosedForm) {
            lv.W = solve_closed_form(data, cfg.lambda_W);
        } else {
            GdOptions g;
            g.steps = cfg.T;
            g.eta = cfg.eta;
            g.lambda = cfg.lambda_W;
            auto res = train_gd(data, g);
            lv.W = std::move(res.W);
            diag.eta_used = res.eta_used;
            diag.gd_fell_back = res.fell_back;
        }

        if (!groups.empty()) {
            std::vector<std::vector<Eigen::VectorXd>> emb;
            std::vector<std::pair<Token, Eigen::VectorXd>> outs;
            for (const auto& [code, g] : groups) {
                auto& bucket = emb.emplace_back();
                for (int u : g.second) {
                    bucket.push_back(data.X.row(u).transpose());
                    try {
                        outs.emplace_back(g.first, forward_level(lv.W, data.X.row(u).transpose()));
                    } catch (const DegenerateNormalization& e) {
                        throw StageFailure(level, e.what());
                    }
                }
            }
            const auto fd = measure_embedding_diagnostics(emb);
            diag.eps_S = fd.eps_S;
            diag.eps_O = fd.eps_O;
            const auto cr = detail::cluster_spread(level, outs);
            diag.out_intra = cr.intra;
            diag.out_inter = cr.inter;
        }

        model.levels.push_back(std::move(lv));
        model.diagnostics.push_back(diag);
    }
    return model;
}

inline TrainedModel train_layerwise(const RhmInstance& inst, std::span<const LayerConfig> configs, Stream& rng,
                                    const TrainOptions& opt = {}) {
    return train_layerwise(instance_source(inst), inst.params(), configs, rng, opt);
}

// ---------------------------------------------------------------------------
// Schedules

/// Multipliers on the theory-shaped schedules. The shapes are fixed: N^(l) grows
/// like m^l, eps^(l)_* like K_rho m^(-l/2) / sqrt(V^2 m^2 s L log m), and sigma^(l)
/// follows the random-feature separation condition for the level's input spread.
struct ScheduleMultipliers {
    double C_N = 1.0;
    double C_eps = 1.0;
    double C_sigma = 1.0;
    /// Constant in front of the near-orthogonality target eps_O = eps_* / (C_O |P|^2 kappa sqrt(V)).
    double C_O = 600.0;
    int M = 1024;
    double C_T = 1.0;
    Solver solver = Solver::ClosedForm;
};

inline nlohmann::json multipliers_to_json(const ScheduleMultipliers& m) {
    return nlohmann::json{{"C_N", m.C_N}, {"C_eps", m.C_eps}, {"C_sigma", m.C_sigma}, {"C_O", m.C_O},
                          {"M", m.M},     {"C_T", m.C_T},     {"solver", m.solver == Solver::ClosedForm ? "closed_form" : "gd"}};
}

inline ScheduleMultipliers multipliers_from_json(const nlohmann::json& j, const std::string& path = "multipliers") {
    ScheduleMultipliers m;
    if (!j.is_object()) throw ParseError(path + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        const std::string at = path + "." + k;
        if (k == "solver") {
            if (v == "closed_form")
                m.solver = Solver::ClosedForm;
            else if (v == "gd")
                m.solver = Solver::GradientDescent;
            else
                throw ParseError(at + ": expected \"closed_form\" or \"gd\"");
            continue;
        }
        if (!v.is_number()) throw ParseError(at + ": expected a number");
        if (k == "C_N") m.C_N = v.get<double>();
        else if (k == "C_eps") m.C_eps = v.get<double>();
        else if (k == "C_sigma") m.C_sigma = v.get<double>();
        else if (k == "C_O") m.C_O = v.get<double>();
        else if (k == "M") m.M = v.get<int>();
        else if (k == "C_T") m.C_T = v.get<double>();
        else throw ParseError(at + ": unknown multiplier");
    }
    return m;
}

/// Signal levels feeding the schedules. rho[l - 1] is the level-l separation:
/// the smallest nonzero distance between non-synonym posteriors, since exact
/// coincidences cannot be separated by any bandwidth.
struct SignalProfile {
    std::vector<double> rho;
    double kappa = 1.0;
    /// min_l rho^(l) m^(l/2).
    double K_rho = 0.0;
};

inline SignalProfile signal_profile(const RhmParams& p, std::vector<double> rho, double kappa) {
    if (static_cast<int>(rho.size()) != p.L) throw ParameterError("signal profile: expected one rho per level");
    SignalProfile sp;
    sp.kappa = kappa;
    sp.K_rho = std::numeric_limits<double>::infinity();
    for (int l = 1; l <= p.L; ++l) {
        double& r = rho[static_cast<std::size_t>(l - 1)];
        if (std::isnan(r) || r <= 0) throw ParameterError("signal profile: rho must be positive");
        // A level with a single posterior class carries no separation constraint.
        if (!std::isfinite(r)) r = std::sqrt(2.0);
        sp.K_rho = std::min(sp.K_rho, r * std::pow(static_cast<double>(p.m), l / 2.0));
    }
    sp.rho = std::move(rho);
    return sp;
}

inline SignalProfile signal_profile(const RhmParams& p, const TransitionStats& st) {
    std::vector<double> rho;
    for (const auto& ls : st.levels) rho.push_back(ls.rho_separable);
    return signal_profile(p, std::move(rho), st.kappa);
}

/// eps^(l)_* = K_rho m^(-l/2) / sqrt(C_eps V^2 m^2 s L log m), with log m floored at log 2.
inline double target_accuracy(const RhmParams& p, double K_rho, int level, double C_eps) {
    const double m = p.m;
    const double logm = std::log(std::max(m, 2.0));
    return K_rho * std::pow(m, -level / 2.0) / std::sqrt(C_eps * p.V * p.V * m * m * p.s * p.L * logm);
}

/// Bandwidth for level l: sigma^2 = 2 rho_in^2 / log(2 / eps_O), where rho_in is the
/// input separation (sqrt 2 for one-hot leaves, rho^(l+1)/2 above them) and
/// eps_O = eps_* / (C_O |P|^2 kappa sqrt V).
inline double bandwidth(const RhmParams& p, const SignalProfile& sig, int level, const ScheduleMultipliers& mult) {
    const double eps = target_accuracy(p, sig.K_rho, level, mult.C_eps);
    const double patches = static_cast<double>(p.V) * p.m;
    const double eps_O = eps / (mult.C_O * patches * patches * sig.kappa * std::sqrt(static_cast<double>(p.V)));
    const double rho_in = level == p.L ? std::sqrt(2.0) : sig.rho.at(static_cast<std::size_t>(level)) / 2.0;
    return mult.C_sigma * std::sqrt(2.0 * rho_in * rho_in / std::log(2.0 / eps_O));
}

/// Splits a total budget geometrically: N^(l) = floor(N_total m^l / sum_k m^k).
inline std::vector<long long> allocate_budget(const RhmParams& p, long long N_total) {
    std::vector<double> w;
    double z = 0;
    for (int l = 1; l <= p.L; ++l) {
        w.push_back(std::pow(static_cast<double>(p.m), l));
        z += w.back();
    }
    std::vector<long long> out(static_cast<std::size_t>(p.L));
    for (int l = 1; l <= p.L; ++l)
        out[static_cast<std::size_t>(l - 1)] = static_cast<long long>(std::floor(static_cast<double>(N_total) * w[static_cast<std::size_t>(l - 1)] / z));
    // Floating rounding must never overshoot the budget.
    long long sum = 0;
    for (auto n : out) sum += n;
    for (std::size_t i = out.size(); sum > N_total && i-- > 0;) {
        const long long cut = std::min(out[i], sum - N_total);
        out[i] -= cut;
        sum -= cut;
    }
    return out;
}

/// Per-level configs, ordered L..1. When `N_total` is set the sample sizes come
/// from allocate_budget; otherwise N^(l) = C_N kappa V^2 m^2 s L log^2(V m kappa) K_rho^-2 m^l.
inline std::vector<LayerConfig> make_schedule(const RhmParams& p, const SignalProfile& sig,
                                              const ScheduleMultipliers& mult,
                                              std::optional<long long> N_total = std::nullopt) {
    p.validate();
    if (static_cast<int>(sig.rho.size()) != p.L) throw ParameterError("schedule: signal profile has the wrong depth");
    const double patches = static_cast<double>(p.V) * p.m;
    std::vector<long long> budget;
    if (N_total) budget = allocate_budget(p, *N_total);
    std::vector<LayerConfig> out;
    for (int level = p.L; level >= 1; --level) {
        LayerConfig c;
        c.eps_target = target_accuracy(p, sig.K_rho, level, mult.C_eps);
        c.lambda_W = 1.0 / patches;
        c.eta = 2.0 * patches / (patches + 1.0);
        c.M = mult.M;
        c.sigma = bandwidth(p, sig, level, mult);
        c.T = static_cast<int>(std::ceil(mult.C_T * patches *
                                         std::log(100.0 * patches * sig.kappa * std::sqrt(static_cast<double>(p.V)) /
                                                  c.eps_target)));
        if (N_total) {
            c.N = std::max<long long>(1, budget[static_cast<std::size_t>(level - 1)]);
        } else {
            const double lg = std::log(p.V * p.m * sig.kappa);
            c.N = static_cast<long long>(std::ceil(mult.C_N * sig.kappa * p.V * p.V * p.m * p.m * p.s * p.L *
                                                   std::max(lg * lg, 1.0) / (sig.K_rho * sig.K_rho) *
                                                   std::pow(static_cast<double>(p.m), level)));
        }
        c.solver = mult.solver;
        out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hand-built models

enum class ConstructionVariant { IntermediateOneHots = 1, ConditionalProbabilities = 2, RandomFeatures = 3 };

/// Variant 1 maps each patch to the one-hot of its parent. Variant 2 maps it to
/// q^(l) through exact one-hot patch embeddings (tokens snapped to the nearest
/// level-(l+1) posterior). Variant 3 swaps the exact embedding for random features
/// with `mult` bandwidths and W = m^-1 sum_mu q_mu Phi(h_mu)^T.
inline TrainedModel build_construction_model(const RhmInstance& inst, const TransitionStats& st,
                                             ConstructionVariant variant, Stream& rng,
                                             const ScheduleMultipliers& mult = {}) {
    const int L = inst.L(), s = inst.s(), V = inst.V(), m = inst.m();
    TrainedModel model;
    model.params = inst.params();
    const SignalProfile sig = signal_profile(inst.params(), st);
    for (int level = L; level >= 1; --level) {
        Level lv;
        lv.level = level;
        const auto& patches = inst.patches(level);
        // Canonical embedding of each level-l token: one-hot at the leaves, or the
        // posterior of the patches it produces above them.
        auto token_embedding = [&](Token t) -> Eigen::VectorXd {
            if (level == L || variant == ConstructionVariant::IntermediateOneHots) return Eigen::VectorXd::Unit(V, t);
            const auto& produced = inst.rules(level)[static_cast<std::size_t>(t)];
            return cond_label_given_patch(inst, st, level + 1, produced.front());
        };
        auto targets = [&](PatchCode c) -> Eigen::VectorXd {
            if (variant == ConstructionVariant::IntermediateOneHots) return Eigen::VectorXd::Unit(V, inst.lookup(level, c)->parent);
            return cond_label_given_patch(inst, st, level, c);
        };
        auto patch_inputs = [&](PatchCode c) {
            std::vector<Eigen::VectorXd> toks;
            for (Token t : inst.tokens_of(c)) toks.push_back(token_embedding(t));
            return toks;
        };

        const double scale = variant == ConstructionVariant::IntermediateOneHots ? 1.0 : 1.0 / m;
        switch (variant) {
            case ConstructionVariant::IntermediateOneHots:
                lv.kind = EmbeddingKind::Tensor;
                break;
            case ConstructionVariant::ConditionalProbabilities:
                lv.kind = level == L ? EmbeddingKind::Tensor : EmbeddingKind::SnappedTensor;
                if (level < L) {
                    lv.centroids.resize(V, V);
                    for (int t = 0; t < V; ++t) lv.centroids.col(t) = token_embedding(t);
                }
                break;
            case ConstructionVariant::RandomFeatures: {
                lv.kind = EmbeddingKind::RandomFeatures;
                lv.config.M = mult.M;
                lv.config.sigma = bandwidth(inst.params(), sig, level, mult);
                lv.map = sample_feature_map(s * V, lv.config.M, lv.config.sigma, rng);
                break;
            }
        }
        const int D = lv.kind == EmbeddingKind::RandomFeatures ? lv.map.output_dim()
                                                               : static_cast<int>(*detail::checked_pow(V, s));
        lv.W = Eigen::MatrixXd::Zero(V, D);
        for (PatchCode c : patches) {
            const auto toks = patch_inputs(c);
            const Eigen::VectorXd x = lv.embed(toks);
            lv.W += scale * targets(c) * x.transpose();
        }
        lv.config.lambda_W = 1.0 / (V * m);
        model.levels.push_back(std::move(lv));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Serialization: {params, levels:[{level, embedding, sigma, M, omega, W, config_snapshot}], diagnostics}

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& A) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < A.cols(); ++j) row.push_back(A(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& path) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw ParseError(path + ": expected a nonempty 2-d array");
    const std::size_t cols = j[0].size();
    Eigen::MatrixXd A(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols)
            throw ParseError(path + "[" + std::to_string(i) + "]: expected " + std::to_string(cols) + " entries");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[i][c].is_number())
                throw ParseError(path + "[" + std::to_string(i) + "][" + std::to_string(c) + "]: expected a number");
            A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = j[i][c].get<double>();
        }
    }
    return A;
}

inline const char* kind_name(EmbeddingKind k) {
    switch (k) {
        case EmbeddingKind::RandomFeatures: return "rff";
        case EmbeddingKind::Tensor: return "tensor";
        case EmbeddingKind::SnappedTensor: return "snapped_tensor";
    }
    return "rff";
}

}  // namespace detail

inline nlohmann::json model_to_json(const TrainedModel& model) {
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& lv : model.levels) {
        nlohmann::json j;
        j["level"] = lv.level;
        j["embedding"] = detail::kind_name(lv.kind);
        if (lv.kind == EmbeddingKind::RandomFeatures) {
            auto fm = feature_map_to_json(lv.map);
            j["sigma"] = fm["sigma"];
            j["M"] = fm["M"];
            j["omega"] = std::move(fm["omega"]);
        }
        if (lv.kind == EmbeddingKind::SnappedTensor) j["centroids"] = detail::matrix_to_json(lv.centroids);
        j["W"] = detail::matrix_to_json(lv.W);
        j["config_snapshot"] = layer_config_to_json(lv.config);
        levels.push_back(std::move(j));
    }
    nlohmann::json diags = nlohmann::json::array();
    for (const auto& d : model.diagnostics)
        diags.push_back({{"level", d.level},
                         {"n_train", d.n_train},
                         {"unique_inputs", d.unique_inputs},
                         {"eps_S", d.eps_S},
                         {"eps_O", d.eps_O},
                         {"out_intra", d.out_intra},
                         {"out_inter", detail::finite_or_null(d.out_inter)},
                         {"eta_used", d.eta_used},
                         {"gd_fell_back", d.gd_fell_back}});
    return nlohmann::json{{"params", model.params}, {"levels", std::move(levels)}, {"diagnostics", std::move(diags)}};
}

inline std::string save_model(const TrainedModel& model) { return model_to_json(model).dump() + "\n"; }

inline TrainedModel model_from_json(const nlohmann::json& j) {
    TrainedModel model;
    model.params = params_from_json(detail::field(j, "params", "$"), "$.params");
    const auto& levels = detail::as_array(detail::field(j, "levels", "$"), "$.levels");
    if (static_cast<int>(levels.size()) != model.params.L)
        throw ParseError("$.levels: expected " + std::to_string(model.params.L) + " levels");
    const int V = model.params.V, s = model.params.s;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const std::string path = "$.levels[" + std::to_string(i) + "]";
        const auto& lj = levels[i];
        Level lv;
        lv.level = static_cast<int>(detail::as_int(detail::field(lj, "level", path), path + ".level"));
        if (lv.level != model.params.L - static_cast<int>(i)) throw ParseError(path + ".level: levels must run L..1");
        const std::string kind = lj.value("embedding", std::string("rff"));
        if (kind == "rff") {
            lv.kind = EmbeddingKind::RandomFeatures;
            lv.map = feature_map_from_json(lj, path);
            if (lv.map.input_dim() != s * V) throw ParseError(path + ".omega: rows must have s*V entries");
        } else if (kind == "tensor") {
            lv.kind = EmbeddingKind::Tensor;
        } else if (kind == "snapped_tensor") {
            lv.kind = EmbeddingKind::SnappedTensor;
            lv.centroids = detail::matrix_from_json(detail::field(lj, "centroids", path), path + ".centroids");
            if (lv.centroids.rows() != V) throw ParseError(path + ".centroids: expected V rows");
        } else {
            throw ParseError(path + ".embedding: unknown kind \"" + kind + "\"");
        }
        lv.W = detail::matrix_from_json(detail::field(lj, "W", path), path + ".W");
        const Eigen::Index D = lv.kind == EmbeddingKind::RandomFeatures ? lv.map.output_dim()
                                                                        : static_cast<Eigen::Index>(*detail::checked_pow(V, s));
        if (lv.W.rows() != V || lv.W.cols() != D)
            throw ParseError(path + ".W: expected " + std::to_string(V) + " x " + std::to_string(D));
        lv.config = layer_config_from_json(detail::field(lj, "config_snapshot", path), path + ".config_snapshot");
        model.levels.push_back(std::move(lv));
    }
    if (j.contains("diagnostics")) {
        const auto& dj = detail::as_array(j.at("diagnostics"), "$.diagnostics");
        for (std::size_t i = 0; i < dj.size(); ++i) {
            const auto& d = dj[i];
            const std::string path = "$.diagnostics[" + std::to_string(i) + "]";
            if (!d.is_object()) throw ParseError(path + ": expected an object");
            LevelDiagnostics ld;
            ld.level = d.value("level", 0);
            ld.n_train = d.value("n_train", 0LL);
            ld.unique_inputs = d.value("unique_inputs", 0LL);
            ld.eps_S = d.value("eps_S", 0.0);
            ld.eps_O = d.value("eps_O", 0.0);
            ld.out_intra = d.value("out_intra", 0.0);
            ld.out_inter = d.contains("out_inter") && d.at("out_inter").is_number() ? d.at("out_inter").get<double>()
                                                                                     : std::numeric_limits<double>::infinity();
            ld.eta_used = d.value("eta_used", 0.0);
            ld.gd_fell_back = d.value("gd_fell_back", false);
            model.diagnostics.push_back(ld);
        }
    }
    return model;
}

inline TrainedModel load_model(std::string_view text) { return model_from_json(detail::parse_json(text, "model")); }

}  // namespace rhm
