#include "mfl/routing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mfl/error.hpp"

namespace mfl {

std::string granularity_name(RouteGranularity g) {
    switch (g) {
        case RouteGranularity::SingleRoute: return "single";
        case RouteGranularity::PerHead: return "per-head";
        case RouteGranularity::FullTuple: return "tuple";
    }
    return "?";
}

std::string RouteKey::str() const {
    std::string s = "L" + std::to_string(layer) + ":" + granularity_name(granularity);
    if (head >= 0) s += ":h" + std::to_string(head);
    s += ":";
    for (std::size_t m = 0; m < sets.size(); ++m) {
        if (m) s += "|";
        for (std::size_t j = 0; j < sets[m].size(); ++j) {
            if (j) s += ",";
            s += std::to_string(sets[m][j]);
        }
    }
    return s;
}

void save_traces(const std::string& path, std::span<const TraceRecord> traces) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StateError("save_traces: cannot open '" + path + "'");
    for (const auto& t : traces) {
        nlohmann::json j;
        j["step"] = t.step;
        j["task"] = t.task;
        j["seq"] = t.seq;
        j["position"] = t.position;
        j["composition"] = {t.composition.y[0], t.composition.y[1], t.composition.y[2],
                            t.composition.y[3]};
        j["route_tuple"] = t.route_sets;
        j["gates"] = t.gates;
        j["per_token_loss"] = t.loss;
        out << j.dump() << '\n';
    }
}

std::vector<TraceRecord> load_traces(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StateError("load_traces: cannot open '" + path + "'");
    std::vector<TraceRecord> traces;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        TraceRecord t;
        t.step = j.at("step").get<std::int64_t>();
        t.task = j.at("task").get<std::int64_t>();
        t.seq = j.at("seq").get<std::int64_t>();
        t.position = j.at("position").get<std::int64_t>();
        const auto& comp = j.at("composition");
        for (std::size_t i = 0; i < 4; ++i) t.composition.y[i] = comp.at(i).get<std::int16_t>();
        t.route_sets = j.at("route_tuple").get<std::vector<std::vector<std::int64_t>>>();
        t.gates = j.at("gates").get<std::vector<std::vector<double>>>();
        t.loss = j.at("per_token_loss").get<double>();
        traces.push_back(std::move(t));
    }
    return traces;
}

std::vector<RouteKey> route_keys_of(const TraceRecord& trace, RouteGranularity g,
                                    std::int64_t layer) {
    const auto heads = static_cast<std::int64_t>(trace.route_sets.size());
    if (heads == 0) throw ValueError("route_keys_of: trace has no routing decision");
    std::vector<RouteKey> keys;
    switch (g) {
        case RouteGranularity::SingleRoute: {
            if (heads != 1)
                throw ValueError("route_keys_of: single-route granularity requires single-head traces");
            RouteKey key;
            key.layer = layer;
            key.granularity = g;
            key.sets = {trace.route_sets[0]};
            keys.push_back(std::move(key));
            break;
        }
        case RouteGranularity::PerHead: {
            for (std::int64_t m = 0; m < heads; ++m) {
                RouteKey key;
                key.layer = layer;
                key.granularity = g;
                key.head = m;
                key.sets = {trace.route_sets[static_cast<std::size_t>(m)]};
                keys.push_back(std::move(key));
            }
            break;
        }
        case RouteGranularity::FullTuple: {
            RouteKey key;
            key.layer = layer;
            key.granularity = g;
            key.sets = trace.route_sets;
            keys.push_back(std::move(key));
            break;
        }
    }
    return keys;
}

RouteCounts collect_routes(std::span<const TraceRecord> traces, RouteGranularity g,
                           std::int64_t layer) {
    RouteCounts counts;
    for (const auto& t : traces)
        for (auto& key : route_keys_of(t, g, layer)) ++counts[std::move(key)][t.composition];
    return counts;
}

double neff(std::span<const double> p) {
    if (p.empty()) throw ValueError("neff: empty distribution");
    double total = 0.0, sq = 0.0;
    for (const double v : p) {
        if (v < 0.0) throw ValueError("neff: negative probability");
        total += v;
        sq += v * v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValueError("neff: distribution does not sum to 1");
    return 1.0 / sq;
}

double neff_of_counts(const CompositionCounts& counts) {
    double total = 0.0;
    for (const auto& [comp, n] : counts) total += static_cast<double>(n);
    if (total <= 0.0) throw ValueError("neff_of_counts: empty route");
    double sq = 0.0;
    for (const auto& [comp, n] : counts) {
        const double p = static_cast<double>(n) / total;
        sq += p * p;
    }
    return 1.0 / sq;
}

std::map<RouteKey, double> route_old_loss(std::span<const TraceRecord> traces,
                                          std::span<const double> losses, RouteGranularity g,
                                          std::int64_t layer) {
    if (traces.size() != losses.size())
        throw ShapeError("route_old_loss: need one loss per trace record");
    std::map<RouteKey, double> sums;
    std::map<RouteKey, std::int64_t> counts;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        for (auto& key : route_keys_of(traces[i], g, layer)) {
            sums[key] += losses[i];
            ++counts[key];
        }
    }
    for (auto& [key, total] : sums) total /= static_cast<double>(counts[key]);
    return sums;
}

std::vector<RouteStats> build_route_stats(std::span<const TraceRecord> traces,
                                          std::span<const double> losses_new, RouteGranularity g,
                                          std::int64_t layer) {
    if (!losses_new.empty() && losses_new.size() != traces.size())
        throw ShapeError("build_route_stats: losses_new must align with traces");

    RouteCounts counts = collect_routes(traces, g, layer);
    std::vector<double> old_losses(traces.size());
    for (std::size_t i = 0; i < traces.size(); ++i) old_losses[i] = traces[i].loss;
    auto loss_old = route_old_loss(traces, old_losses, g, layer);
    std::map<RouteKey, double> loss_new;
    if (!losses_new.empty()) loss_new = route_old_loss(traces, losses_new, g, layer);

    double total_tokens = 0.0;
    for (const auto& [key, comp_counts] : counts)
        for (const auto& [comp, n] : comp_counts) total_tokens += static_cast<double>(n);

    std::vector<RouteStats> out;
    for (const auto& [key, comp_counts] : counts) {
        RouteStats s;
        s.key = key;
        for (const auto& [comp, n] : comp_counts) s.tokens += n;
        s.mass_old = static_cast<double>(s.tokens) / total_tokens;
        s.n_eff = neff_of_counts(comp_counts);
        s.loss_old = loss_old.at(key);
        if (!losses_new.empty()) {
            s.loss_new = loss_new.at(key);
            s.delta_l = s.loss_new - s.loss_old;
            s.loss_new_known = true;
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> delta_l(std::span<const RouteStats> stats) {
    std::vector<double> out;
    out.reserve(stats.size());
    for (const auto& s : stats) {
        if (!s.loss_new_known) throw StateError("delta_l: loss under theta_new is missing");
        out.push_back(s.loss_new - s.loss_old);
    }
    return out;
}

BinnedSummary mass_quantile_bins(std::span<const RouteStats> stats, std::int64_t n_bins) {
    if (stats.empty()) throw ValueError("mass_quantile_bins: no routes");
    BinnedSummary out;
    if (n_bins > static_cast<std::int64_t>(stats.size())) {
        n_bins = static_cast<std::int64_t>(stats.size());
        out.reduced_bins = true;
    }
    if (n_bins <= 0) throw ValueError("mass_quantile_bins: n_bins must be positive");

    std::vector<const RouteStats*> sorted;
    sorted.reserve(stats.size());
    for (const auto& s : stats) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](const RouteStats* a, const RouteStats* b) {
        if (a->n_eff != b->n_eff) return a->n_eff < b->n_eff;
        return a->key < b->key;  // deterministic order under ties
    });

    double total_mass = 0.0;
    for (const auto* s : sorted) total_mass += s->mass_old;

    std::vector<std::vector<const RouteStats*>> bins(static_cast<std::size_t>(n_bins));
    double cum = 0.0;
    for (const auto* s : sorted) {
        // Tiny nudge keeps accumulated-rounding noise from flipping routes
        // that start exactly on a cut point.
        auto b = static_cast<std::int64_t>(
            std::floor((cum / total_mass + 1e-12) * static_cast<double>(n_bins)));
        b = std::clamp<std::int64_t>(b, 0, n_bins - 1);
        bins[static_cast<std::size_t>(b)].push_back(s);
        cum += s->mass_old;
    }

    for (const auto& bin : bins) {
        MassBin mb;
        mb.routes = static_cast<std::int64_t>(bin.size());
        std::vector<double> dls;
        for (const auto* s : bin) {
            mb.mass += s->mass_old;
            mb.mean_neff += s->n_eff;
            if (s->loss_new_known) dls.push_back(s->delta_l);
        }
        if (!bin.empty()) mb.mean_neff /= static_cast<double>(bin.size());
        if (!dls.empty()) {
            mb.mean_delta_l = vec_mean(dls);
            mb.se_delta_l = vec_standard_error(dls);
        }
        out.bins.push_back(mb);
    }

    std::vector<double> neffs, dls;
    for (const auto* s : sorted) {
        if (!s->loss_new_known) continue;
        neffs.push_back(s->n_eff);
        dls.push_back(s->delta_l);
    }
    if (neffs.size() >= 3) out.rank_correlation = spearman(neffs, dls);
    return out;
}

double layer_mass_weighted_neff(std::span<const RouteStats> stats) {
    if (stats.empty()) throw ValueError("layer_mass_weighted_neff: empty layer");
    double acc = 0.0;
    for (const auto& s : stats) acc += s.mass_old * s.n_eff;
    return acc;
}

std::vector<RouteStats> pool_route_stats(const std::vector<std::vector<RouteStats>>& groups) {
    std::vector<RouteStats> out;
    if (groups.empty()) return out;
    const double scale = 1.0 / static_cast<double>(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (RouteStats s : groups[g]) {
            s.key.layer = static_cast<std::int64_t>(g);  // keep pooled keys distinct
            s.mass_old *= scale;
            out.push_back(std::move(s));
        }
    }
    return out;
}

}  // namespace mfl
