#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mfl/data.hpp"
#include "mfl/model.hpp"
#include "mfl/stats.hpp"

namespace mfl {

enum class RouteGranularity { SingleRoute, PerHead, FullTuple };

std::string granularity_name(RouteGranularity g);

// Identity of an update destination. Expert sets are canonical (ascending);
// SingleRoute requires single-head traces, PerHead carries the head index,
// FullTuple keys on the whole per-head tuple.
struct RouteKey {
    std::int64_t layer = 0;
    RouteGranularity granularity = RouteGranularity::FullTuple;
    std::int64_t head = -1;                       // PerHead only
    std::vector<std::vector<std::int64_t>> sets;  // 1 set unless FullTuple

    auto operator<=>(const RouteKey&) const = default;
    std::string str() const;
};

// One token crossing the MoE layer: position in its sequence, ground-truth
// composition, the routing decision and the per-token loss at the
// parameters that produced the trace.
struct TraceRecord {
    std::int64_t step = 0;
    std::int64_t task = 0;
    std::int64_t seq = 0;
    std::int64_t position = 0;
    FeatureComposition composition;
    std::vector<std::vector<std::int64_t>> route_sets;
    std::vector<std::vector<double>> gates;
    double loss = 0.0;
};

void save_traces(const std::string& path, std::span<const TraceRecord> traces);
std::vector<TraceRecord> load_traces(const std::string& path);

// Keys a trace record at the requested granularity; PerHead yields one key
// per head, the others one key per token.
std::vector<RouteKey> route_keys_of(const TraceRecord& trace, RouteGranularity g,
                                    std::int64_t layer = 0);

using CompositionCounts = std::map<FeatureComposition, std::int64_t>;
using RouteCounts = std::map<RouteKey, CompositionCounts>;

RouteCounts collect_routes(std::span<const TraceRecord> traces, RouteGranularity g,
                           std::int64_t layer = 0);

// Inverse Simpson index; contract error unless p is a distribution.
double neff(std::span<const double> p);
double neff_of_counts(const CompositionCounts& counts);

struct RouteStats {
    RouteKey key;
    std::int64_t tokens = 0;
    double mass_old = 0.0;
    double n_eff = 1.0;
    double loss_old = 0.0;   // route-conditioned loss at theta_old
    double loss_new = 0.0;   // same tokens under theta_new, routes frozen
    double delta_l = 0.0;
    bool loss_new_known = false;
};

// Mean per-token loss grouped by the route recorded at theta_old. `losses`
// must align index-wise with `traces` (the same tokens re-evaluated under
// another parameter vector); pass the trace's own losses for theta_old.
std::map<RouteKey, double> route_old_loss(std::span<const TraceRecord> traces,
                                          std::span<const double> losses, RouteGranularity g,
                                          std::int64_t layer = 0);

// Full per-route table: composition mixing under the old distribution plus
// the old/new loss pair. Routes with zero old-task tokens cannot occur by
// construction (keys come from the traces themselves).
std::vector<RouteStats> build_route_stats(std::span<const TraceRecord> traces,
                                          std::span<const double> losses_new, RouteGranularity g,
                                          std::int64_t layer = 0);

std::vector<double> delta_l(std::span<const RouteStats> stats);

struct MassBin {
    double mass = 0.0;
    std::int64_t routes = 0;
    double mean_neff = 0.0;
    double mean_delta_l = 0.0;
    double se_delta_l = 0.0;
};

struct BinnedSummary {
    std::vector<MassBin> bins;
    Correlation rank_correlation;  // Spearman of (N_eff, delta_l) over routes
    bool reduced_bins = false;     // n_bins exceeded the route count
};

// Routes sorted by N_eff, cut at cumulative old-mass quantiles so each bin
// holds comparable old-task token mass. A heavy route can straddle cut
// points; it stays in the bin where it starts, so bins can be empty.
BinnedSummary mass_quantile_bins(std::span<const RouteStats> stats, std::int64_t n_bins);

double layer_mass_weighted_neff(std::span<const RouteStats> stats);

// Pools per-group route tables (e.g., one per old task); masses are
// renormalized so the pooled masses again sum to one.
std::vector<RouteStats> pool_route_stats(const std::vector<std::vector<RouteStats>>& groups);

}  // namespace mfl
