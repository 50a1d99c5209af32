// rhm_lab: command-line front end for grammar generation, sampling, audits,
// training, evaluation, sweeps and the deep-quadratic task.
//
// Exit codes: 0 success, 1 usage or parameter error, 2 runtime error.
// Every subcommand echoes its resolved configuration as one JSON line on stderr.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rhm/deepquad.hpp"
#include "rhm/experiments.hpp"
#include "rhm/grammar.hpp"
#include "rhm/learner.hpp"
#include "rhm/oracle.hpp"

namespace {

using nlohmann::json;

// Sub-seed purposes under --seed.
enum : std::uint64_t { kSampleStream = 11, kTrainStream = 12, kDeepQuadStream = 13 };

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw rhm::IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        std::cout.flush();
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw rhm::IoError("cannot open " + path + " for writing");
    f << text;
    if (!f.flush()) throw rhm::IoError("failed writing " + path);
}

void echo_config(const std::string& cmd, json cfg) {
    cfg["command"] = cmd;
    std::cerr << cfg.dump() << "\n";
}

int default_jobs() {
    if (const char* env = std::getenv("RHM_LAB_JOBS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (const std::exception&) {
        }
        throw rhm::ParameterError("RHM_LAB_JOBS must be a positive integer");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

json sample_to_json(const rhm::Sample& s) {
    json j{{"tokens", s.tokens}, {"label", s.label}};
    if (s.intermediates) j["intermediates"] = *s.intermediates;
    return j;
}

std::vector<rhm::Sample> read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw rhm::IoError("cannot open " + path);
    std::vector<rhm::Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        const json j = rhm::detail::parse_json(line, where);
        rhm::Sample s;
        try {
            s.tokens = j.at("tokens").get<std::vector<rhm::Token>>();
            s.label = j.at("label").get<rhm::Token>();
        } catch (const json::exception& e) {
            throw rhm::ParseError(where + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

struct GenOpts {
    rhm::RhmParams p{2, 2, 8, 2, 0};
    std::string out;
};

struct SampleOpts {
    std::string grammar, out;
    long long n = 1000;
    std::uint64_t seed = 0;
    bool intermediates = false;
};

struct AuditOpts {
    std::string grammar, out;
};

struct TrainOpts {
    std::string grammar, out, schedule;
    std::uint64_t seed = 0;
    long long N = 10000;
    rhm::ScheduleMultipliers mult = rhm::SweepConfig::default_multipliers();
    std::string solver = "closed_form";
};

struct EvalOpts {
    std::string model, data;
};

struct SweepOpts {
    std::string config, out;
    int jobs = 1;
    bool timing = false;
};

struct DeepQuadOpts {
    int d = 12;
    std::vector<int> sizes;
    bool figure = false;
    double c_min = 0.5;
    long long N = 10000;
    int seeds = 10;
    std::uint64_t seed = 0;
    bool exhaustive = false;
    bool no_refit = false;
    std::string out;
};

int run_gen(const GenOpts& o) {
    echo_config("gen", {{"params", o.p}, {"out", o.out}});
    o.p.validate();
    const auto inst = rhm::sample_instance(o.p);
    write_output(o.out, rhm::save_instance(inst));
    return 0;
}

int run_sample(const SampleOpts& o) {
    echo_config("sample", {{"grammar", o.grammar}, {"n", o.n}, {"seed", o.seed}, {"intermediates", o.intermediates}, {"out", o.out}});
    if (o.n < 0) throw rhm::ParameterError("--n must be >= 0");
    const auto inst = rhm::load_instance(read_file(o.grammar));
    rhm::Stream rng(rhm::derive_seed(o.seed, kSampleStream));
    std::string text;
    for (long long i = 0; i < o.n; ++i) text += sample_to_json(rhm::generate_sample(inst, rng, o.intermediates)).dump() + "\n";
    write_output(o.out, text);
    return 0;
}

int run_audit(const AuditOpts& o) {
    echo_config("audit", {{"grammar", o.grammar}, {"out", o.out}});
    const auto inst = rhm::load_instance(read_file(o.grammar));
    const auto st = rhm::compute_stats(inst);
    const auto rep = rhm::audit_assumptions(inst, st);
    std::printf("kappa      %.17g\n", rep.kappa);
    std::printf("K_rho_emp  %.17g\n", rep.K_rho_emp);
    std::printf("synonym_q_equal  %s\n", rep.synonym_q_equal ? "yes" : "no");
    std::printf("%-6s %-22s %-22s %s\n", "level", "rho_emp", "bound", "pass");
    for (const auto& l : rep.levels) std::printf("%-6d %-22.17g %-22.17g %s\n", l.l, l.rho_emp, l.bound, l.pass ? "yes" : "no");
    std::fflush(stdout);
    if (!o.out.empty()) write_output(o.out, rhm::audit_to_json(rep).dump() + "\n");
    return 0;
}

int run_train(TrainOpts o, const CLI::App& sub) {
    if (!o.schedule.empty()) {
        // File values are the base; flags given on the command line win.
        auto file = rhm::multipliers_from_json(rhm::detail::parse_json(read_file(o.schedule), o.schedule), "schedule");
        if (!sub.count("--M")) o.mult.M = file.M;
        if (!sub.count("--C-sigma")) o.mult.C_sigma = file.C_sigma;
        if (!sub.count("--C-eps")) o.mult.C_eps = file.C_eps;
        if (!sub.count("--C-O")) o.mult.C_O = file.C_O;
        if (!sub.count("--C-T")) o.mult.C_T = file.C_T;
        if (!sub.count("--solver")) o.solver = file.solver == rhm::Solver::ClosedForm ? "closed_form" : "gd";
    }
    o.mult.solver = o.solver == "gd" ? rhm::Solver::GradientDescent : rhm::Solver::ClosedForm;
    echo_config("train", {{"grammar", o.grammar}, {"seed", o.seed}, {"N", o.N}, {"multipliers", rhm::multipliers_to_json(o.mult)},
                          {"schedule", o.schedule}, {"out", o.out}});
    if (o.N < 1) throw rhm::ParameterError("--N must be >= 1");
    const auto inst = rhm::load_instance(read_file(o.grammar));
    const auto st = rhm::compute_stats(inst);
    const auto configs = rhm::make_schedule(inst.params(), rhm::signal_profile(inst.params(), st), o.mult, o.N);
    rhm::Stream rng(rhm::derive_seed(o.seed, kTrainStream));
    const auto model = rhm::train_layerwise(inst, configs, rng);
    write_output(o.out, rhm::save_model(model));
    return 0;
}

int run_eval(const EvalOpts& o) {
    echo_config("eval", {{"model", o.model}, {"data", o.data}});
    const auto model = rhm::load_model(read_file(o.model));
    const auto data = read_dataset(o.data);
    if (data.empty()) throw rhm::EmptyResult("dataset " + o.data + " is empty");
    std::printf("accuracy=%.17g\n", rhm::accuracy(model, data));
    return 0;
}

int run_sweep(const SweepOpts& o) {
    const auto cfg = rhm::sweep_config_from_json(rhm::detail::parse_json(read_file(o.config), o.config));
    echo_config("sweep", {{"config", rhm::sweep_config_to_json(cfg)}, {"jobs", o.jobs}, {"timing", o.timing}, {"out", o.out}});
    if (o.jobs < 1) throw rhm::ParameterError("--jobs must be >= 1");
    const auto res = rhm::run_sweep(cfg, o.jobs);
    if (o.out.empty() || o.out == "-")
        write_output(o.out, rhm::to_csv(res, o.timing));
    else
        rhm::export_csv(res, o.out, o.timing);
    return 0;
}

int run_deepquad(const DeepQuadOpts& o) {
    echo_config("deepquad", {{"d", o.d}, {"levels", o.sizes}, {"figure", o.figure}, {"c_min", o.c_min}, {"N", o.N},
                             {"seeds", o.seeds}, {"seed", o.seed}, {"exhaustive", o.exhaustive}, {"no_refit", o.no_refit},
                             {"out", o.out}});
    if (o.seeds < 1) throw rhm::ParameterError("--seeds must be >= 1");
    if (!o.figure && o.sizes.empty()) throw rhm::ParameterError("give --levels or --figure");
    std::string csv = "trial,seed,d,N,exhaustive,terms,support_recovered,max_coef_error,levels_recovered\r\n";
    for (int trial = 0; trial < o.seeds; ++trial) {
        const std::uint64_t seed = rhm::derive_seed(o.seed, kDeepQuadStream, static_cast<std::uint64_t>(trial));
        rhm::Stream rng(seed);
        const rhm::DeepQuadTarget target = o.figure ? rhm::figure_target() : rhm::sample_target(o.d, o.sizes, o.c_min, rng);
        auto fn = [&](std::span<const double> x) { return rhm::eval_target(target, x); };
        rhm::DeepQuadOptions dq;
        dq.refit = !o.no_refit;
        const auto model = o.exhaustive ? rhm::learn_layerwise(rhm::exhaustive_source(target.d, fn), target.d, o.c_min, dq)
                                        : rhm::learn_layerwise(rhm::iid_source(target.d, o.N, fn, rng), target.d, o.c_min, dq);
        const bool ok = rhm::same_support(model, target);
        csv += std::to_string(trial) + "," + std::to_string(seed) + "," + std::to_string(target.d) + "," +
               std::to_string(o.exhaustive ? (1LL << target.d) : o.N) + "," + (o.exhaustive ? "1" : "0") + "," +
               std::to_string(target.terms()) + "," + (ok ? "1" : "0") + "," +
               rhm::detail::num17(rhm::max_coefficient_error(model, target)) + "," + std::to_string(model.levels.size()) +
               "\r\n";
    }
    write_output(o.out, csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Random Hierarchy Model laboratory"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    GenOpts gen;
    auto* g = app.add_subcommand("gen", "Sample a grammar and write it as JSON");
    g->add_option("--L", gen.p.L, "Number of levels");
    g->add_option("--s", gen.p.s, "Branching factor");
    g->add_option("--V", gen.p.V, "Vocabulary size per level");
    g->add_option("--m", gen.p.m, "Rules per symbol");
    g->add_option("--seed", gen.p.seed, "Grammar seed");
    g->add_option("-o,--out", gen.out, "Output path (stdout if empty)")->default_str("stdout");

    SampleOpts smp;
    auto* sa = app.add_subcommand("sample", "Generate a JSON-lines dataset from a grammar");
    sa->add_option("grammar", smp.grammar, "Grammar JSON")->required();
    sa->add_option("--n", smp.n, "Number of samples");
    sa->add_option("--seed", smp.seed, "Sampling seed");
    sa->add_flag("--intermediates", smp.intermediates, "Include intermediate-level sequences")->default_str("false");
    sa->add_option("-o,--out", smp.out, "Output path (stdout if empty)")->default_str("stdout");

    AuditOpts aud;
    auto* au = app.add_subcommand("audit", "Exact statistics and assumption audit of a grammar");
    au->add_option("grammar", aud.grammar, "Grammar JSON")->required();
    au->add_option("-o,--out", aud.out, "Also write the report as JSON to this path")->default_str("none");

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "Train the layerwise learner on fresh samples from a grammar");
    t->add_option("grammar", tr.grammar, "Grammar JSON")->required();
    t->add_option("--seed", tr.seed, "Training seed");
    t->add_option("--N", tr.N, "Total sample budget, split geometrically across levels");
    t->add_option("--schedule", tr.schedule, "JSON file of schedule multipliers")->default_str("none");
    t->add_option("--M", tr.mult.M, "Random features per level");
    t->add_option("--C-sigma", tr.mult.C_sigma, "Bandwidth multiplier");
    t->add_option("--C-eps", tr.mult.C_eps, "Target-accuracy constant");
    t->add_option("--C-O", tr.mult.C_O, "Near-orthogonality constant");
    t->add_option("--C-T", tr.mult.C_T, "Gradient-step multiplier");
    t->add_option("--solver", tr.solver, "closed_form or gd")->check(CLI::IsMember({"closed_form", "gd"}));
    t->add_option("-o,--out", tr.out, "Output path (stdout if empty)")->default_str("stdout");

    EvalOpts ev;
    auto* e = app.add_subcommand("eval", "Accuracy of a model on a JSON-lines dataset");
    e->add_option("model", ev.model, "Model JSON")->required();
    e->add_option("data", ev.data, "Dataset (JSON lines)")->required();

    SweepOpts sw;
    sw.jobs = 0;
    auto* s = app.add_subcommand("sweep", "Run a sample-complexity sweep and write CSV");
    s->add_option("config", sw.config, "Sweep config JSON")->required();
    s->add_option("-o,--out", sw.out, "CSV path (stdout if empty)")->default_str("stdout");
    s->add_option("--jobs", sw.jobs, "Worker threads (0: RHM_LAB_JOBS, else logical cores)");
    s->add_flag("--timing", sw.timing, "Add a wall_seconds column (output is then not byte-stable)")->default_str("false");

    DeepQuadOpts dq;
    auto* d = app.add_subcommand("deepquad", "Deep quadratic recovery over seeds, as CSV");
    d->add_option("--d", dq.d, "Input dimension");
    d->add_option("--levels", dq.sizes, "Terms per level, e.g. --levels 4 2 1");
    d->add_flag("--figure", dq.figure, "Use the fixed 12-input figure target")->default_str("false");
    d->add_option("--c-min", dq.c_min, "Coefficient magnitude floor");
    d->add_option("--N", dq.N, "Samples per level");
    d->add_option("--seeds", dq.seeds, "Number of trials");
    d->add_option("--seed", dq.seed, "Base seed");
    d->add_flag("--exhaustive", dq.exhaustive, "Use all 2^d inputs instead of samples")->default_str("false");
    d->add_flag("--no-refit", dq.no_refit, "Keep the layerwise coefficient estimates")->default_str("false");
    d->add_option("-o,--out", dq.out, "CSV path (stdout if empty)")->default_str("stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*g) return run_gen(gen);
        if (*sa) return run_sample(smp);
        if (*au) return run_audit(aud);
        if (*t) return run_train(tr, *t);
        if (*e) return run_eval(ev);
        if (*s) {
            if (sw.jobs == 0) sw.jobs = default_jobs();
            return run_sweep(sw);
        }
        if (*d) return run_deepquad(dq);
    } catch (const rhm::ParameterError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 1;
}
