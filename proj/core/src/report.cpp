#include "mfl/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfl/error.hpp"

namespace mfl {

namespace fs = std::filesystem;

// ---- minimal SVG plotting ----

namespace {

class Svg {
public:
    Svg(double width, double height) : w_(width), h_(height) {}

    void rect(double x, double y, double w, double h, const std::string& fill,
              double opacity = 1.0) {
        body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
              << "\" fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double width = 1.0) {
        body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
              << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
    }
    void circle(double cx, double cy, double r, const std::string& fill) {
        body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\" fill=\"" << fill
              << "\"/>\n";
    }
    void text(double x, double y, const std::string& s, double size = 11,
              const std::string& anchor = "start", const std::string& color = "#333") {
        body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
              << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\" fill=\"" << color
              << "\">" << s << "</text>\n";
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw StateError("svg: cannot open '" + path + "'");
        out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
            << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n"
            << "<rect width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"white\"/>\n"
            << body_.str() << "</svg>\n";
    }

private:
    double w_, h_;
    std::ostringstream body_;
};

std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
    if (!(hi > lo)) hi = lo + 1.0;
    const double raw = (hi - lo) / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (const double m : {1.0, 2.0, 5.0, 10.0}) {
        if (raw <= m * mag) {
            step = m * mag;
            break;
        }
    }
    std::vector<double> ticks;
    for (double t = std::ceil(lo / step) * step; t <= hi + 1e-12; t += step) ticks.push_back(t);
    return ticks;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

struct Axes {
    double x0 = 60, y0 = 40, x1 = 560, y1 = 320;  // pixel box (y grows down)
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;

    double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0); }
    double py(double y) const { return y1 - (y - ymin) / (ymax - ymin) * (y1 - y0); }

    void frame(Svg& svg, const std::string& title, const std::string& xlabel,
               const std::string& ylabel) const {
        svg.line(x0, y1, x1, y1, "#333");
        svg.line(x0, y0, x0, y1, "#333");
        for (const double t : nice_ticks(xmin, xmax)) {
            svg.line(px(t), y1, px(t), y1 + 4, "#333");
            svg.text(px(t), y1 + 16, fmt(t), 10, "middle");
        }
        for (const double t : nice_ticks(ymin, ymax)) {
            svg.line(x0 - 4, py(t), x0, py(t), "#333");
            svg.text(x0 - 7, py(t) + 4, fmt(t), 10, "end");
        }
        svg.text((x0 + x1) / 2, y0 - 14, title, 13, "middle", "#111");
        svg.text((x0 + x1) / 2, y1 + 32, xlabel, 11, "middle");
        svg.text(14, (y0 + y1) / 2, ylabel, 11, "middle");
    }
};

void pad_range(double& lo, double& hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
        return;
    }
    const double pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;
}

}  // namespace

// ---- probing pipeline ----

namespace {

struct CollectedReps {
    Tensor reps;    // [N, d]
    Tensor blocks;  // [N, H, d]
    std::array<std::vector<std::int64_t>, 4> labels;
    std::int64_t n = 0;
};

CollectedReps collect_router_inputs(const ToyLm& model, std::span<const Sequence> sequences,
                                    std::int64_t max_tokens) {
    const std::int64_t d = model.config().d_model;
    const std::int64_t heads = model.config().attn_heads;
    // Post-projection head contributions plus the residual stream: the
    // blocks sum exactly to the router input.
    const std::int64_t n_blocks = heads + 1;
    std::vector<double> reps, blocks;
    CollectedReps out;
    for (const auto& seq : sequences) {
        if (out.n >= max_tokens) break;
        const auto attn = model.attention_output(seq.tokens);
        const auto t_len = static_cast<std::int64_t>(seq.tokens.size());
        for (std::int64_t t = 0; t < t_len && out.n < max_tokens; ++t, ++out.n) {
            for (std::int64_t m = 0; m < heads; ++m) {
                const auto c = attn.contributions[static_cast<std::size_t>(m)].data();
                blocks.insert(blocks.end(), c.begin() + t * d, c.begin() + (t + 1) * d);
            }
            const auto r = attn.residual.data();
            blocks.insert(blocks.end(), r.begin() + t * d, r.begin() + (t + 1) * d);
            const auto h = attn.h.data();
            reps.insert(reps.end(), h.begin() + t * d, h.begin() + (t + 1) * d);
            const auto& comp = seq.records[static_cast<std::size_t>(t)].composition;
            for (std::size_t f = 0; f < 4; ++f) out.labels[f].push_back(comp.y[f]);
        }
    }
    if (out.n == 0) throw ValueError("collect_router_inputs: no tokens collected");
    out.reps = Tensor::from_data({out.n, d}, std::move(reps));
    out.blocks = Tensor::from_data({out.n, n_blocks, d}, std::move(blocks));
    return out;
}

}  // namespace

ProbeReport analyze_probe_suite(const ToyLm& model, std::span<const Sequence> sequences,
                                const FeatureSpec& spec, const AnalysisConfig& cfg,
                                std::uint64_t seed) {
    const CollectedReps data = collect_router_inputs(model, sequences, cfg.probe_max_tokens);
    const std::int64_t class_counts[4] = {spec.n_domains, spec.n_labels, spec.freq_buckets,
                                          spec.pos_buckets};

    ProbeReport report;
    report.tokens = data.n;
    std::vector<LinearProbe> probes;
    std::vector<DecodingSubspace> subspaces;
    for (std::size_t f = 0; f < 4; ++f) {
        ProbeConfig pcfg;
        pcfg.steps = cfg.probe_steps;
        pcfg.lr = cfg.probe_lr;
        pcfg.l2 = cfg.probe_l2;
        pcfg.seed = mix_seed(seed, static_cast<std::uint64_t>(f));
        LinearProbe probe = train_probe(data.reps, data.labels[f], class_counts[f], pcfg);
        probe.feature = kFeatureNames[f];

        ProbeReport::FeatureRow row;
        row.feature = probe.feature;
        row.classes = class_counts[f];
        row.accuracy = probe.val_accuracy;
        row.chance = 1.0 / static_cast<double>(class_counts[f]);
        DecodingSubspace sub = decoding_subspace(probe);
        row.rank = sub.rank;
        report.rows.push_back(std::move(row));
        subspaces.push_back(std::move(sub));
        probes.push_back(std::move(probe));
    }

    report.overlap.assign(4, std::vector<double>(4, 0.0));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            report.overlap[i][j] = subspace_overlap(subspaces[i], subspaces[j]);

    for (std::int64_t m = 0; m + 1 < data.blocks.dim(1); ++m)
        report.block_labels.push_back("h" + std::to_string(m));
    report.block_labels.push_back("residual");

    // Head ablation over each probe's own training split (the split also
    // defines the replacement means).
    const std::int64_t heads = data.blocks.dim(1);
    const std::int64_t d = data.blocks.dim(2);
    for (std::size_t f = 0; f < 4; ++f) {
        const auto& idx = probes[f].train_indices;
        const auto n_sub = static_cast<std::int64_t>(idx.size());
        std::vector<double> sub_blocks(static_cast<std::size_t>(n_sub * heads * d));
        std::vector<std::int64_t> sub_labels(static_cast<std::size_t>(n_sub));
        const auto src = data.blocks.data();
        for (std::int64_t i = 0; i < n_sub; ++i) {
            const std::int64_t row = idx[static_cast<std::size_t>(i)];
            std::copy_n(src.data() + row * heads * d, heads * d, sub_blocks.data() + i * heads * d);
            sub_labels[static_cast<std::size_t>(i)] = data.labels[f][static_cast<std::size_t>(row)];
        }
        HeadImportance imp = head_ablation_importance(
            probes[f], Tensor::from_data({n_sub, heads, d}, std::move(sub_blocks)), sub_labels);
        imp.feature = kFeatureNames[f];
        report.head_tables.push_back(std::move(imp));
    }
    return report;
}

// ---- gradient pipeline ----

GradReport analyze_grad_alignment(const ToyLm& model, std::span<const Sequence> sequences,
                                  const AnalysisConfig& cfg, std::uint64_t seed) {
    GradSamplesByComposition groups;
    std::int64_t total = 0;
    for (const auto& seq : sequences) {
        const auto t_len = static_cast<std::int64_t>(seq.tokens.size());
        for (std::int64_t t = 0; t + 1 < t_len; ++t) {
            const auto& comp = seq.records[static_cast<std::size_t>(t)].composition;
            auto it = groups.find(comp);
            if (it == groups.end()) {
                if (static_cast<std::int64_t>(groups.size()) >= cfg.grad_max_compositions) continue;
                it = groups.emplace(comp, std::vector<GradSample>{}).first;
            }
            if (static_cast<std::int64_t>(it->second.size()) >= cfg.grad_samples_per_composition)
                continue;
            it->second.push_back(token_gradient(model, seq.tokens, t, "moe", comp));
            ++total;
        }
    }

    StudyConfig scfg;
    scfg.min_support = cfg.grad_min_support;
    scfg.max_between_pairs = cfg.grad_max_pairs;
    scfg.seed = mix_seed(seed, 0x4752414453ull);  // "GRADS"

    GradReport report;
    report.samples = total;
    report.compositions = static_cast<std::int64_t>(groups.size());
    report.study = within_between_study(groups, scfg);
    const auto permuted = permute_composition_labels(groups, scfg.seed);
    report.permuted_null = within_between_study(permuted, scfg);
    return report;
}

// ---- routing pipeline ----

RouteReport analyze_route_forgetting(const std::vector<std::vector<TraceRecord>>& traces,
                                     const std::vector<TaskData>& tasks,
                                     std::span<const Checkpoint> checkpoints,
                                     RouteGranularity granularity, std::int64_t n_bins,
                                     RouteConditioning conditioning, RouteHorizon horizon) {
    if (traces.size() != tasks.size())
        throw ShapeError("analyze_route_forgetting: traces and tasks must align");
    if (checkpoints.size() != tasks.size())
        throw ShapeError("analyze_route_forgetting: need one checkpoint per task");
    const auto n = static_cast<std::int64_t>(tasks.size());
    if (n < 2) throw ValueError("analyze_route_forgetting: need at least two tasks");

    RouteReport report;
    report.granularity = granularity;
    report.conditioning = conditioning;
    report.horizon = horizon;
    report.old_tasks = n - 1;

    ToyLm final_model;
    if (horizon == RouteHorizon::FinalModel)
        final_model = model_from_checkpoint(checkpoints[checkpoints.size() - 1]);

    std::vector<std::vector<RouteStats>> groups;
    for (std::int64_t j = 0; j + 1 < n; ++j) {
        const auto& task = tasks[static_cast<std::size_t>(j)];
        const auto& old_traces = traces[static_cast<std::size_t>(j)];
        ToyLm next_model;
        if (horizon == RouteHorizon::NextTask)
            next_model = model_from_checkpoint(checkpoints[static_cast<std::size_t>(j + 1)]);
        const ToyLm& new_model = horizon == RouteHorizon::NextTask ? next_model : final_model;
        const std::vector<double> new_losses = eval_token_losses(new_model, task.eval);
        if (new_losses.size() != old_traces.size())
            throw ShapeError("analyze_route_forgetting: loss/trace misalignment on task " +
                             std::to_string(j));
        if (conditioning == RouteConditioning::FreezeAtOld) {
            groups.push_back(build_route_stats(old_traces, new_losses, granularity));
        } else {
            // Re-routed variant: group by theta_new's routes; the
            // loss-at-trace slot carries the old loss so delta stays
            // new - old.
            std::vector<TraceRecord> rerouted = collect_traces(new_model, task.eval, -1);
            for (std::size_t i = 0; i < rerouted.size(); ++i)
                rerouted[i].loss = old_traces[i].loss;
            groups.push_back(build_route_stats(rerouted, new_losses, granularity));
        }
    }
    report.pooled = pool_route_stats(groups);
    report.bins = mass_quantile_bins(report.pooled, n_bins);
    report.mass_weighted_neff = layer_mass_weighted_neff(report.pooled);
    return report;
}

double trace_mass_weighted_neff(std::span<const TraceRecord> traces, RouteGranularity granularity) {
    const RouteCounts counts = collect_routes(traces, granularity);
    double total = 0.0;
    for (const auto& [key, comps] : counts)
        for (const auto& [comp, c] : comps) total += static_cast<double>(c);
    double acc = 0.0;
    for (const auto& [key, comps] : counts) {
        double route_tokens = 0.0;
        for (const auto& [comp, c] : comps) route_tokens += static_cast<double>(c);
        acc += route_tokens / total * neff_of_counts(comps);
    }
    return acc;
}

// ---- emitters ----

void write_probe_report_csv(const std::string& path, const ProbeReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StateError("write_probe_report_csv: cannot open '" + path + "'");
    out << "feature,classes,accuracy,chance,rank";
    for (std::size_t j = 0; j < report.rows.size(); ++j) out << ",overlap_" << report.rows[j].feature;
    out << "\n";
    out.precision(10);
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        out << r.feature << ',' << r.classes << ',' << r.accuracy << ',' << r.chance << ',' << r.rank;
        for (std::size_t j = 0; j < report.rows.size(); ++j) out << ',' << report.overlap[i][j];
        out << "\n";
    }
}

void write_head_shares_csv(const std::string& path, const ProbeReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StateError("write_head_shares_csv: cannot open '" + path + "'");
    out << "feature,block,base_accuracy,ablated_accuracy,importance,share\n";
    out.precision(10);
    for (const auto& table : report.head_tables)
        for (std::size_t m = 0; m < table.shares.size(); ++m)
            out << table.feature << ','
                << (m < report.block_labels.size() ? report.block_labels[m] : std::to_string(m))
                << ',' << table.base_accuracy << ',' << table.ablated_accuracy[m] << ','
                << table.importance[m] << ',' << table.shares[m] << "\n";
}

void write_grad_report_csv(const std::string& dir, const GradReport& report) {
    {
        std::ofstream out(dir + "/grad_hist.csv", std::ios::trunc);
        if (!out) throw StateError("write_grad_report_csv: cannot open grad_hist.csv");
        out << "bin_lo,bin_hi,within_count,between_count\n";
        const auto edges = report.study.within_hist.edges();
        for (std::size_t b = 0; b < report.study.within_hist.counts.size(); ++b)
            out << edges[b] << ',' << edges[b + 1] << ',' << report.study.within_hist.counts[b]
                << ',' << report.study.between_hist.counts[b] << "\n";
    }
    {
        std::ofstream out(dir + "/grad_summary.csv", std::ios::trunc);
        out << "quantity,real,permuted_null\n";
        out.precision(10);
        out << "mean_within," << report.study.mean_within << ',' << report.permuted_null.mean_within
            << "\n";
        out << "mean_between," << report.study.mean_between << ','
            << report.permuted_null.mean_between << "\n";
        out << "gap," << report.study.gap << ',' << report.permuted_null.gap << "\n";
        out << "compositions," << report.study.within.size() << ','
            << report.permuted_null.within.size() << "\n";
        out << "samples," << report.samples << ',' << report.samples << "\n";
    }
}

void write_route_report_csv(const std::string& dir, const RouteReport& report) {
    {
        std::ofstream out(dir + "/route_stats.csv", std::ios::trunc);
        if (!out) throw StateError("write_route_report_csv: cannot open route_stats.csv");
        out << "layer,granularity,route,tokens,mass_old,n_eff,loss_old,loss_new,delta_l\n";
        out.precision(10);
        for (const auto& s : report.pooled)
            out << s.key.layer << ',' << granularity_name(s.key.granularity) << ',' << '"'
                << s.key.str() << '"' << ',' << s.tokens << ',' << s.mass_old << ',' << s.n_eff
                << ',' << s.loss_old << ',' << s.loss_new << ',' << s.delta_l << "\n";
    }
    {
        std::ofstream out(dir + "/neff_bins.csv", std::ios::trunc);
        out << "bin,mass,routes,mean_neff,mean_delta_l,se_delta_l\n";
        out.precision(10);
        for (std::size_t b = 0; b < report.bins.bins.size(); ++b) {
            const auto& bin = report.bins.bins[b];
            out << b << ',' << bin.mass << ',' << bin.routes << ',' << bin.mean_neff << ','
                << bin.mean_delta_l << ',' << bin.se_delta_l << "\n";
        }
        out << "# spearman_r=" << report.bins.rank_correlation.r
            << " p=" << report.bins.rank_correlation.p_value
            << " n=" << report.bins.rank_correlation.n
            << " mass_weighted_neff=" << report.mass_weighted_neff << "\n";
    }
}

// ---- plots ----

void plot_probe_accuracy(const std::string& path, const ProbeReport& report) {
    Svg svg(620, 380);
    Axes ax;
    ax.xmin = 0;
    ax.xmax = static_cast<double>(report.rows.size());
    ax.ymin = 0;
    ax.ymax = 1.05;
    ax.frame(svg, "Linear probe accuracy on router inputs", "feature", "accuracy");
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        const double cx = static_cast<double>(i) + 0.5;
        const double w = 0.6;
        svg.rect(ax.px(cx - w / 2), ax.py(r.accuracy), ax.px(cx + w / 2) - ax.px(cx - w / 2),
                 ax.py(0) - ax.py(r.accuracy), "#4b7bb5", 0.9);
        svg.line(ax.px(cx - w / 2), ax.py(r.chance), ax.px(cx + w / 2), ax.py(r.chance), "#c44",
                 2.0);
        svg.text(ax.px(cx), ax.py(0) + 16, r.feature, 11, "middle");
        svg.text(ax.px(cx), ax.py(r.accuracy) - 4, fmt(r.accuracy), 10, "middle");
    }
    svg.text(ax.px(ax.xmax) - 4, ax.py(ax.ymax) + 12, "red line = chance", 10, "end", "#c44");
    svg.save(path);
}

void plot_overlap_matrix(const std::string& path, const ProbeReport& report) {
    const auto n = report.rows.size();
    Svg svg(520, 460);
    const double cell = 80, x0 = 120, y0 = 80;
    svg.text(260, 40, "Pairwise decoding-subspace overlap", 13, "middle", "#111");
    for (std::size_t i = 0; i < n; ++i) {
        svg.text(x0 - 8, y0 + cell * (static_cast<double>(i) + 0.55), report.rows[i].feature, 11, "end");
        svg.text(x0 + cell * (static_cast<double>(i) + 0.5), y0 - 8, report.rows[i].feature, 11, "middle");
        for (std::size_t j = 0; j < n; ++j) {
            const double v = report.overlap[i][j];
            const int shade = static_cast<int>(255.0 * (1.0 - v));
            std::ostringstream color;
            color << "rgb(" << shade << "," << shade << ",255)";
            svg.rect(x0 + cell * static_cast<double>(j), y0 + cell * static_cast<double>(i),
                     cell - 2, cell - 2, color.str());
            svg.text(x0 + cell * (static_cast<double>(j) + 0.5),
                     y0 + cell * (static_cast<double>(i) + 0.58), fmt(v), 11, "middle",
                     v > 0.5 ? "#fff" : "#333");
        }
    }
    svg.save(path);
}

void plot_head_shares(const std::string& path, const ProbeReport& report) {
    const auto n_features = report.head_tables.size();
    const auto heads = n_features ? report.head_tables[0].shares.size() : 0;
    const double cell = std::min(60.0, 420.0 / std::max<std::size_t>(heads, 1));
    Svg svg(140 + cell * static_cast<double>(heads) + 40, 110 + 0.75 * cell * static_cast<double>(n_features) + 30);
    const double x0 = 130, y0 = 70, ch = 0.75 * cell;
    svg.text(x0 + cell * static_cast<double>(heads) / 2, 36, "Head importance shares per feature", 13,
             "middle", "#111");
    for (std::size_t m = 0; m < heads; ++m)
        svg.text(x0 + cell * (static_cast<double>(m) + 0.5), y0 - 8,
                 m < report.block_labels.size() ? report.block_labels[m] : std::to_string(m), 10,
                 "middle");
    for (std::size_t f = 0; f < n_features; ++f) {
        const auto& table = report.head_tables[f];
        svg.text(x0 - 8, y0 + ch * (static_cast<double>(f) + 0.6), table.feature, 11, "end");
        for (std::size_t m = 0; m < heads; ++m) {
            const double v = table.shares[m];
            const int shade = static_cast<int>(255.0 * (1.0 - std::min(1.0, v * 1.6)));
            std::ostringstream color;
            color << "rgb(255," << shade << "," << shade << ")";
            svg.rect(x0 + cell * static_cast<double>(m), y0 + ch * static_cast<double>(f), cell - 2,
                     ch - 2, color.str());
            svg.text(x0 + cell * (static_cast<double>(m) + 0.5),
                     y0 + ch * (static_cast<double>(f) + 0.62), fmt(v), 9, "middle",
                     v > 0.45 ? "#fff" : "#333");
        }
    }
    svg.save(path);
}

void plot_grad_histograms(const std::string& path, const GradReport& report) {
    Svg svg(620, 380);
    Axes ax;
    ax.xmin = -1.0;
    ax.xmax = 1.0;
    double peak = 1.0;
    auto frac = [](const Histogram& h, std::size_t b) {
        return h.total ? static_cast<double>(h.counts[b]) / static_cast<double>(h.total) : 0.0;
    };
    for (std::size_t b = 0; b < report.study.within_hist.counts.size(); ++b)
        peak = std::max({peak, frac(report.study.within_hist, b) * 100,
                         frac(report.study.between_hist, b) * 100});
    ax.ymin = 0;
    ax.ymax = peak * 1.1;
    ax.frame(svg, "Composition-conditioned gradient direction cosine", "cosine", "% of pairs");
    const auto edges = report.study.within_hist.edges();
    for (std::size_t b = 0; b < report.study.within_hist.counts.size(); ++b) {
        const double lo = edges[b], hi = edges[b + 1];
        const double wv = frac(report.study.within_hist, b) * 100;
        const double bv = frac(report.study.between_hist, b) * 100;
        svg.rect(ax.px(lo), ax.py(bv), ax.px(hi) - ax.px(lo), ax.py(0) - ax.py(bv), "#999", 0.65);
        svg.rect(ax.px(lo), ax.py(wv), ax.px(hi) - ax.px(lo), ax.py(0) - ax.py(wv), "#3a8f4f", 0.65);
    }
    svg.text(ax.px(-0.95), ax.py(ax.ymax) + 14,
             "within (green) mean=" + fmt(report.study.mean_within) + "   between (gray) mean=" +
                 fmt(report.study.mean_between) + "   gap=" + fmt(report.study.gap),
             11, "start");
    svg.save(path);
}

void plot_neff_bins(const std::string& path, const RouteReport& report) {
    Svg svg(620, 380);
    Axes ax;
    double xlo = 1e30, xhi = -1e30, ylo = 1e30, yhi = -1e30;
    for (const auto& b : report.bins.bins) {
        if (b.routes == 0) continue;
        xlo = std::min(xlo, b.mean_neff);
        xhi = std::max(xhi, b.mean_neff);
        ylo = std::min(ylo, b.mean_delta_l - b.se_delta_l);
        yhi = std::max(yhi, b.mean_delta_l + b.se_delta_l);
    }
    pad_range(xlo, xhi);
    pad_range(ylo, yhi);
    ax.xmin = xlo;
    ax.xmax = xhi;
    ax.ymin = std::min(ylo, 0.0);
    ax.ymax = yhi;
    ax.frame(svg, "Route-wise forgetting vs composition mixing", "N_eff (bin mean)",
             "delta L_old");
    if (ax.ymin < 0.0 && ax.ymax > 0.0)
        svg.line(ax.px(ax.xmin), ax.py(0), ax.px(ax.xmax), ax.py(0), "#bbb", 1.0);
    double prev_x = 0, prev_y = 0;
    bool have_prev = false;
    for (const auto& b : report.bins.bins) {
        if (b.routes == 0) continue;
        const double x = ax.px(b.mean_neff), y = ax.py(b.mean_delta_l);
        svg.line(x, ax.py(b.mean_delta_l - b.se_delta_l), x, ax.py(b.mean_delta_l + b.se_delta_l),
                 "#4b7bb5", 1.5);
        svg.circle(x, y, 4, "#4b7bb5");
        if (have_prev) svg.line(prev_x, prev_y, x, y, "#4b7bb5", 1.0);
        prev_x = x;
        prev_y = y;
        have_prev = true;
    }
    svg.text(ax.px(ax.xmin) + 4, ax.py(ax.ymax) + 14,
             "spearman r=" + fmt(report.bins.rank_correlation.r) +
                 " (p=" + fmt(report.bins.rank_correlation.p_value) + ", " +
                 std::to_string(report.bins.rank_correlation.n) + " routes)",
             11, "start");
    svg.save(path);
}

void plot_mass_weighted_neff(const std::string& path, std::span<const std::string> labels,
                             std::span<const double> values) {
    Svg svg(620, 380);
    Axes ax;
    ax.xmin = 0;
    ax.xmax = static_cast<double>(labels.size());
    double hi = 1.0;
    for (const double v : values) hi = std::max(hi, v);
    ax.ymin = 0;
    ax.ymax = hi * 1.15;
    ax.frame(svg, "Mass-weighted effective composition number", "", "N_eff");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double cx = static_cast<double>(i) + 0.5, w = 0.6;
        svg.rect(ax.px(cx - w / 2), ax.py(values[i]), ax.px(cx + w / 2) - ax.px(cx - w / 2),
                 ax.py(0) - ax.py(values[i]), "#b5764b", 0.9);
        svg.text(ax.px(cx), ax.py(0) + 16, labels[i], 11, "middle");
        svg.text(ax.px(cx), ax.py(values[i]) - 4, fmt(values[i]), 10, "middle");
    }
    svg.save(path);
}

void emit_run_report(const std::string& run_dir, const std::string& out_dir) {
    fs::create_directories(out_dir);
    LoadedRun run = load_run_dir(run_dir);
    const ExperimentConfig& cfg = run.config;
    const FeatureSpec& spec = cfg.data.spec;

    auto defs = default_task_defs(spec, cfg.data.n_tasks, cfg.data.sequences_per_task);
    const auto perm = task_order_permutation(run.order, cfg.data.n_tasks);
    std::vector<TaskDef> ordered;
    for (const auto idx : perm) ordered.push_back(defs[static_cast<std::size_t>(idx)]);
    const auto tasks = task_sequence(ordered, spec, run.stats, cfg.seed);
    const TaskData pretrain =
        split_task(pretrain_task_def(spec, cfg.data.pretrain_sequences), spec, run.stats, cfg.seed);

    const ProbeReport probes =
        analyze_probe_suite(run.final_model, pretrain.eval, spec, cfg.analysis, cfg.seed);
    write_probe_report_csv(out_dir + "/probe_report.csv", probes);
    write_head_shares_csv(out_dir + "/head_shares.csv", probes);
    plot_probe_accuracy(out_dir + "/fig1a_probe_accuracy.svg", probes);
    plot_overlap_matrix(out_dir + "/fig1b_subspace_overlap.svg", probes);
    plot_head_shares(out_dir + "/fig6_head_shares.svg", probes);

    const GradReport grads =
        analyze_grad_alignment(run.final_model, pretrain.eval, cfg.analysis, cfg.seed);
    write_grad_report_csv(out_dir, grads);
    plot_grad_histograms(out_dir + "/fig2_grad_alignment.svg", grads);

    const RouteReport routes =
        analyze_route_forgetting(run.traces, tasks, run.checkpoints, RouteGranularity::FullTuple,
                                 cfg.analysis.mass_bins);
    write_route_report_csv(out_dir, routes);
    plot_neff_bins(out_dir + "/fig4_neff_vs_delta_loss.svg", routes);

    // Fig. 3 analog: pooled mixing per old task; Fig. 5 analog: mixing by
    // routing granularity for this run's layer.
    {
        std::vector<std::string> labels;
        std::vector<double> values;
        for (std::size_t j = 0; j + 1 < run.traces.size(); ++j) {
            labels.push_back("task" + std::to_string(j));
            values.push_back(trace_mass_weighted_neff(run.traces[j], RouteGranularity::FullTuple));
        }
        plot_mass_weighted_neff(out_dir + "/fig3_neff_by_old_task.svg", labels, values);
    }
    {
        std::vector<std::string> labels{"tuple"};
        std::vector<double> values{routes.mass_weighted_neff};
        if (run.final_model.mh_moe() != nullptr) {
            labels.push_back("per-head");
            std::vector<std::vector<RouteStats>> groups;
            for (std::size_t j = 0; j + 1 < run.traces.size(); ++j)
                groups.push_back(build_route_stats(run.traces[j], {}, RouteGranularity::PerHead));
            const auto pooled = pool_route_stats(groups);
            values.push_back(layer_mass_weighted_neff(pooled));
        }
        plot_mass_weighted_neff(out_dir + "/fig5_granularity_neff.svg", labels, values);
        std::ofstream out(out_dir + "/neff_summary.csv", std::ios::trunc);
        out << "granularity,mass_weighted_neff\n";
        out.precision(10);
        for (std::size_t i = 0; i < labels.size(); ++i) out << labels[i] << ',' << values[i] << "\n";
    }
}

}  // namespace mfl
