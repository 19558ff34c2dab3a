// mfl: synthetic continual-learning lab for head-wise MoE routing analysis.
//
// Subcommands: gen-data, train-seq, analyze-probes, analyze-heads,
// analyze-grads, analyze-routes, verify-theory, report.
// Exit codes: 0 success, 2 configuration error, 3 numeric failure,
// 4 theory-check violation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfl/config.hpp"
#include "mfl/data.hpp"
#include "mfl/error.hpp"
#include "mfl/report.hpp"
#include "mfl/routing.hpp"
#include "mfl/runner.hpp"
#include "mfl/theory.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitTheory = 4;

struct RunContext {
    mfl::LoadedRun run;
    std::vector<mfl::TaskData> tasks;
    mfl::TaskData pretrain;
};

RunContext load_context(const std::string& run_dir) {
    RunContext ctx;
    ctx.run = mfl::load_run_dir(run_dir);
    const auto& cfg = ctx.run.config;
    auto defs = mfl::default_task_defs(cfg.data.spec, cfg.data.n_tasks, cfg.data.sequences_per_task);
    const auto perm = mfl::task_order_permutation(ctx.run.order, cfg.data.n_tasks);
    std::vector<mfl::TaskDef> ordered;
    for (const auto idx : perm) ordered.push_back(defs[static_cast<std::size_t>(idx)]);
    ctx.tasks = mfl::task_sequence(ordered, cfg.data.spec, ctx.run.stats, cfg.seed);
    ctx.pretrain = mfl::split_task(mfl::pretrain_task_def(cfg.data.spec, cfg.data.pretrain_sequences),
                                   cfg.data.spec, ctx.run.stats, cfg.seed);
    return ctx;
}

int cmd_gen_data(const std::string& spec_path, std::uint64_t seed, const std::string& out_dir) {
    mfl::ExperimentConfig cfg = mfl::parse_config_file(spec_path);
    cfg.seed = seed;
    fs::create_directories(out_dir);

    const auto stats = mfl::build_corpus_stats(cfg.data.spec, cfg.seed);
    mfl::save_manifest(out_dir + "/manifest.json", cfg.data.spec, cfg.seed, stats);

    const auto pretrain = mfl::pretrain_task_def(cfg.data.spec, cfg.data.pretrain_sequences);
    mfl::save_corpus(out_dir + "/corpus_pretrain.jsonl",
                     mfl::generate_task(pretrain, cfg.data.spec, stats, cfg.seed));
    for (const auto& def :
         mfl::default_task_defs(cfg.data.spec, cfg.data.n_tasks, cfg.data.sequences_per_task)) {
        mfl::save_corpus(out_dir + "/corpus_task_" + std::to_string(def.id) + ".jsonl",
                         mfl::generate_task(def, cfg.data.spec, stats, cfg.seed));
    }
    std::cout << "wrote manifest and " << (cfg.data.n_tasks + 1) << " corpora to " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_train_seq(const std::string& config_path, const std::string& arch, const std::string& order,
                  const std::string& out_dir) {
    const mfl::ExperimentConfig cfg = mfl::parse_config_file(config_path);
    const mfl::ExperimentRun run = mfl::run_experiment(cfg, arch, order);
    mfl::write_run_dir(out_dir, run);
    const auto n = static_cast<std::int64_t>(run.tasks.size());
    std::cout << "arch=" << arch << " order=" << order
              << " activated_params=" << run.result.activated_params_per_token
              << " pretrain_acc=" << run.pretrain_eval_accuracy
              << " OP=" << mfl::op_metric(run.result.scores, n)
              << " BWT=" << mfl::bwt_metric(run.result.scores, n) << "\n";
    std::cout << "run written to " << out_dir << "\n";
    return kExitOk;
}

int cmd_analyze_probes(const std::string& run_dir, const std::string& out_dir, bool heads_only) {
    RunContext ctx = load_context(run_dir);
    fs::create_directories(out_dir);
    const auto report =
        mfl::analyze_probe_suite(ctx.run.final_model, ctx.pretrain.eval, ctx.run.config.data.spec,
                                 ctx.run.config.analysis, ctx.run.config.seed);
    if (heads_only) {
        mfl::write_head_shares_csv(out_dir + "/head_shares.csv", report);
        mfl::plot_head_shares(out_dir + "/fig6_head_shares.svg", report);
        for (const auto& t : report.head_tables) {
            std::cout << t.feature << " shares:";
            for (const double s : t.shares) std::cout << " " << s;
            std::cout << "\n";
        }
    } else {
        mfl::write_probe_report_csv(out_dir + "/probe_report.csv", report);
        mfl::plot_probe_accuracy(out_dir + "/fig1a_probe_accuracy.svg", report);
        mfl::plot_overlap_matrix(out_dir + "/fig1b_subspace_overlap.svg", report);
        for (const auto& r : report.rows)
            std::cout << r.feature << " accuracy=" << r.accuracy << " chance=" << r.chance
                      << " rank=" << r.rank << "\n";
    }
    return kExitOk;
}

int cmd_analyze_grads(const std::string& run_dir, const std::string& out_dir) {
    RunContext ctx = load_context(run_dir);
    fs::create_directories(out_dir);
    const auto report = mfl::analyze_grad_alignment(ctx.run.final_model, ctx.pretrain.eval,
                                                    ctx.run.config.analysis, ctx.run.config.seed);
    mfl::write_grad_report_csv(out_dir, report);
    mfl::plot_grad_histograms(out_dir + "/fig2_grad_alignment.svg", report);
    std::cout << "within=" << report.study.mean_within << " between=" << report.study.mean_between
              << " gap=" << report.study.gap << " null_gap=" << report.permuted_null.gap << "\n";
    return kExitOk;
}

int cmd_analyze_routes(const std::string& run_dir, const std::string& out_dir, bool reroute,
                       const std::string& horizon) {
    RunContext ctx = load_context(run_dir);
    fs::create_directories(out_dir);
    const auto conditioning =
        reroute ? mfl::RouteConditioning::RerouteAtNew : mfl::RouteConditioning::FreezeAtOld;
    const auto h = horizon == "final" ? mfl::RouteHorizon::FinalModel : mfl::RouteHorizon::NextTask;
    const auto report = mfl::analyze_route_forgetting(
        ctx.run.traces, ctx.tasks, ctx.run.checkpoints, mfl::RouteGranularity::FullTuple,
        ctx.run.config.analysis.mass_bins, conditioning, h);
    mfl::write_route_report_csv(out_dir, report);
    mfl::plot_neff_bins(out_dir + "/fig4_neff_vs_delta_loss.svg", report);
    std::cout << "routes=" << report.pooled.size()
              << " mass_weighted_neff=" << report.mass_weighted_neff
              << " spearman=" << report.bins.rank_correlation.r
              << " p=" << report.bins.rank_correlation.p_value << "\n";
    return kExitOk;
}

int cmd_verify_theory(std::int64_t trials, std::uint64_t seed, const std::string& out_path) {
    std::ostringstream report;
    bool violated = false;
    mfl::Rng rng(mfl::mix_seed(seed, 0x5448454f5259ull));  // "THEORY"

    // Lemma 1 over random Dirichlet distributions.
    std::int64_t lemma_checked = 0, lemma_failed = 0;
    const double alphas[] = {0.1, 0.5, 1.0, 2.0};
    for (std::int64_t i = 0; i < 10000; ++i) {
        const std::int64_t dim = 2 + rng.uniform_int(63);
        const double alpha = alphas[rng.uniform_int(4)];
        const auto p = rng.dirichlet(std::vector<double>(static_cast<std::size_t>(dim), alpha));
        for (const std::int64_t m : {1, 2, 4}) {
            const auto res = mfl::lemma1_check({p, m});
            ++lemma_checked;
            if (!res.holds) {
                ++lemma_failed;
                violated = true;
            }
        }
    }
    report << "lemma1 checks=" << lemma_checked << " violations=" << lemma_failed << " holds="
           << (lemma_failed == 0 ? "yes" : "NO") << "\n";

    // Step-1 uniform bound on random draws.
    std::int64_t step_checked = 0;
    for (std::int64_t i = 0; i < 1000; ++i) {
        const std::int64_t dim = 4 + rng.uniform_int(12);
        std::vector<double> star(static_cast<std::size_t>(dim)), theta(static_cast<std::size_t>(dim)),
            dir(static_cast<std::size_t>(dim));
        for (auto& v : star) v = rng.normal();
        for (auto& v : theta) v = 0.2 * rng.normal();
        for (auto& v : dir) v = rng.normal();
        double n = mfl::norm2(dir);
        for (auto& v : dir) v /= n;
        const mfl::QuadraticObjective f{star};
        const double g = f.grad_norm(theta) + 0.1;
        try {
            mfl::one_step_uniform_lower_bound(f, theta, 0.1, dir, g, 1.0);
            ++step_checked;
        } catch (const mfl::NumericError&) {
            violated = true;
        }
    }
    report << "step-bound checks=" << step_checked << " holds=" << (step_checked == 1000 ? "yes" : "NO")
           << "\n";

    // Theorem 1 on the designed family, sweeping N_eff.
    double prev_rhs = -1e30;
    bool monotone = true;
    for (const std::int64_t n_comp : {4, 8, 16, 32}) {
        const auto inst = mfl::make_designed_instance(n_comp, 2, 8, 0.1, seed);
        const auto res = mfl::theorem1_simulate(inst, trials, mfl::mix_seed(seed, n_comp));
        const std::uint64_t ihash = mfl::mix_seed(seed, static_cast<std::uint64_t>(n_comp));
        report << "theorem1 instance=" << std::hex << ihash << std::dec << " n_eff=" << res.n_eff
               << " rho=" << res.rho << " kappa=" << res.kappa << " lhs=" << res.lhs_mean << " (se "
               << res.lhs_se << ")"
               << " rhs=" << res.rhs << " rhs_conservative=" << res.rhs_conservative
               << " assumptions=" << (res.assumptions_ok ? "ok" : res.rejection_reason)
               << " holds=" << (res.holds_within_ci ? "yes" : "NO") << "\n";
        if (!res.assumptions_ok || !res.holds_within_ci) violated = true;
        if (res.rhs < prev_rhs - 1e-12) monotone = false;
        prev_rhs = res.rhs;
    }
    report << "theorem1 rhs nondecreasing in n_eff: " << (monotone ? "yes" : "NO") << "\n";
    if (!monotone) violated = true;

    std::cout << report.str();
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        out << report.str();
    }
    return violated ? kExitTheory : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mfl: compositional continual-learning lab for MoE routing analysis"};
    app.require_subcommand(1);

    std::string spec_path, config_path, run_dir, out_dir, order = "default", arch = "mhmoe";
    std::string theory_out, horizon = "next";
    std::uint64_t seed = 1;
    std::int64_t trials = 100000;
    bool reroute = false;

    auto* gen = app.add_subcommand("gen-data", "Generate corpora and the frozen stats manifest");
    gen->add_option("--spec", spec_path, "Config file with the data section")->required();
    gen->add_option("--seed", seed, "Data seed");
    gen->add_option("--out", out_dir, "Output directory")->required();

    auto* train = app.add_subcommand("train-seq", "Sequential continual training");
    train->add_option("--config", config_path, "Experiment config file")->required();
    train->add_option("--arch", arch, "Architecture")->check(CLI::IsMember({"moe", "mhmoe", "dense"}));
    train->add_option("--order", order, "Task order")->check(CLI::IsMember({"default", "1", "2", "3"}));
    train->add_option("--out", out_dir, "Run output directory")->required();

    auto* probes = app.add_subcommand("analyze-probes", "Probe router inputs and subspace overlap");
    probes->add_option("--run", run_dir)->required();
    probes->add_option("--out", out_dir)->required();

    auto* heads = app.add_subcommand("analyze-heads", "Head-wise causal importance via ablation");
    heads->add_option("--run", run_dir)->required();
    heads->add_option("--out", out_dir)->required();

    auto* grads = app.add_subcommand("analyze-grads", "Composition-conditioned gradient alignment");
    grads->add_option("--run", run_dir)->required();
    grads->add_option("--out", out_dir)->required();

    auto* routes = app.add_subcommand("analyze-routes", "Route stats, N_eff and forgetting");
    routes->add_option("--run", run_dir)->required();
    routes->add_option("--out", out_dir)->required();
    routes->add_flag("--reroute", reroute, "Group by theta_new's routes instead of frozen ones");
    routes->add_option("--horizon", horizon, "theta_new choice")->check(CLI::IsMember({"next", "final"}));

    auto* theory = app.add_subcommand("verify-theory", "Executable bound verification");
    theory->add_option("--trials", trials, "Monte-Carlo trials per instance");
    theory->add_option("--seed", seed, "Verification seed");
    theory->add_option("--out", theory_out, "Also write the report to this file");

    auto* report = app.add_subcommand("report", "All analyses: CSV tables + SVG figures");
    report->add_option("--run", run_dir)->required();
    report->add_option("--out", out_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(spec_path, seed, out_dir);
        if (train->parsed()) return cmd_train_seq(config_path, arch, order, out_dir);
        if (probes->parsed()) return cmd_analyze_probes(run_dir, out_dir, false);
        if (heads->parsed()) return cmd_analyze_probes(run_dir, out_dir, true);
        if (grads->parsed()) return cmd_analyze_grads(run_dir, out_dir);
        if (routes->parsed()) return cmd_analyze_routes(run_dir, out_dir, reroute, horizon);
        if (theory->parsed()) return cmd_verify_theory(trials, seed, theory_out);
        if (report->parsed()) {
            mfl::emit_run_report(run_dir, out_dir);
            std::cout << "report written to " << out_dir << "\n";
            return kExitOk;
        }
    } catch (const mfl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const mfl::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
