#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfl/config.hpp"
#include "mfl/data.hpp"
#include "mfl/grad_analysis.hpp"
#include "mfl/model.hpp"
#include "mfl/probes.hpp"
#include "mfl/routing.hpp"
#include "mfl/runner.hpp"

namespace mfl {

inline constexpr const char* kFeatureNames[4] = {"domain", "label", "frequency", "position"};

// ---- probing pipeline (Fig. 1 / Fig. 6 analogs) ----

struct ProbeReport {
    struct FeatureRow {
        std::string feature;
        std::int64_t classes = 0;
        double accuracy = 0.0;  // held-out accuracy
        double chance = 0.0;
        std::int64_t rank = 0;
    };
    std::vector<FeatureRow> rows;
    std::vector<std::vector<double>> overlap;  // pairwise, diagonal = 1
    std::vector<HeadImportance> head_tables;   // one per feature
    std::vector<std::string> block_labels;     // h0..h{H-1}, residual
    std::int64_t tokens = 0;
};

// Trains one probe per feature on router inputs collected over `sequences`,
// computes decoding-subspace overlaps, and head-ablation importances on the
// post-projection additive head decomposition.
ProbeReport analyze_probe_suite(const ToyLm& model, std::span<const Sequence> sequences,
                                const FeatureSpec& spec, const AnalysisConfig& cfg,
                                std::uint64_t seed);

// ---- gradient pipeline (Fig. 2 analog) ----

struct GradReport {
    WithinBetweenResult study;
    WithinBetweenResult permuted_null;
    std::int64_t samples = 0;
    std::int64_t compositions = 0;
};

GradReport analyze_grad_alignment(const ToyLm& model, std::span<const Sequence> sequences,
                                  const AnalysisConfig& cfg, std::uint64_t seed);

// ---- routing pipeline (Figs. 3-5 analogs) ----

enum class RouteConditioning {
    FreezeAtOld,  // tokens keep the route recorded at theta_old (default)
    RerouteAtNew  // group by the routes theta_new assigns
};

enum class RouteHorizon {
    NextTask,   // theta_new = checkpoint after the following task (default)
    FinalModel  // theta_new = checkpoint after the whole stream
};

struct RouteReport {
    RouteGranularity granularity = RouteGranularity::FullTuple;
    RouteConditioning conditioning = RouteConditioning::FreezeAtOld;
    RouteHorizon horizon = RouteHorizon::NextTask;
    std::vector<RouteStats> pooled;  // across old tasks, masses renormalized
    BinnedSummary bins;
    double mass_weighted_neff = 0.0;
    std::int64_t old_tasks = 0;
};

// Per old task j < n-1: route stats from the theta_j traces over task j's
// eval split, re-scored under theta_new (the next task's checkpoint by
// default, or the final one); pooled across old tasks.
RouteReport analyze_route_forgetting(const std::vector<std::vector<TraceRecord>>& traces,
                                     const std::vector<TaskData>& tasks,
                                     std::span<const Checkpoint> checkpoints,
                                     RouteGranularity granularity, std::int64_t n_bins,
                                     RouteConditioning conditioning = RouteConditioning::FreezeAtOld,
                                     RouteHorizon horizon = RouteHorizon::NextTask);

// Mass-weighted N_eff of one trace set at a granularity (Fig. 3/5 analogs).
double trace_mass_weighted_neff(std::span<const TraceRecord> traces, RouteGranularity granularity);

// ---- emitters ----

void write_probe_report_csv(const std::string& path, const ProbeReport& report);
void write_head_shares_csv(const std::string& path, const ProbeReport& report);
void write_grad_report_csv(const std::string& dir, const GradReport& report);
void write_route_report_csv(const std::string& dir, const RouteReport& report);

// Standalone SVG plots.
void plot_probe_accuracy(const std::string& path, const ProbeReport& report);
void plot_overlap_matrix(const std::string& path, const ProbeReport& report);
void plot_head_shares(const std::string& path, const ProbeReport& report);
void plot_grad_histograms(const std::string& path, const GradReport& report);
void plot_neff_bins(const std::string& path, const RouteReport& report);
void plot_mass_weighted_neff(const std::string& path, std::span<const std::string> labels,
                             std::span<const double> values);

// Full report for one run directory: every analysis above, CSV + SVG.
void emit_run_report(const std::string& run_dir, const std::string& out_dir);

}  // namespace mfl
