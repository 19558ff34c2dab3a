#include "mfl/grad_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <utility>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"

namespace mfl {

GradSample token_gradient(const ToyLm& model, std::span<const std::int64_t> tokens,
                          std::int64_t position, const std::string& block,
                          const FeatureComposition& composition) {
    const auto t_len = static_cast<std::int64_t>(tokens.size());
    if (position < 0 || position >= t_len - 1)
        throw ValueError("token_gradient: position must predict a following token");
    ParamList block_params = model.block_params(block);  // throws on unknown block

    // Enable grads on the block for the duration of the sweep regardless of
    // freeze flags, and restore afterwards.
    std::vector<bool> saved;
    saved.reserve(block_params.size());
    for (auto& p : block_params) {
        saved.push_back(p.tensor.requires_grad());
        p.tensor.set_requires_grad(true);
        p.tensor.zero_grad();
    }

    ComputationRecord record;
    {
        RecordScope scope(record);
        LmForward fwd = model.forward(tokens);
        const std::int64_t pick[1] = {position};
        Tensor row = take_rows(fwd.logits, pick);
        const std::int64_t target[1] = {tokens[static_cast<std::size_t>(position + 1)]};
        Tensor loss = cross_entropy(row, target);
        backward(loss);
    }

    GradSample out;
    out.composition = composition;
    for (auto& p : block_params) {
        if (p.tensor.has_grad()) {
            const auto g = p.tensor.grad();
            out.grad.insert(out.grad.end(), g.begin(), g.end());
        } else {
            out.grad.insert(out.grad.end(), static_cast<std::size_t>(p.tensor.numel()), 0.0);
        }
    }
    for (std::size_t i = 0; i < block_params.size(); ++i) {
        block_params[i].tensor.zero_grad();
        block_params[i].tensor.set_requires_grad(saved[i]);
    }
    out.norm = norm2(out.grad);
    return out;
}

MeanDirection mean_direction(std::span<const GradSample> samples, double epsilon) {
    if (samples.empty()) throw ValueError("mean_direction: empty sample set");
    MeanDirection out;
    out.composition = samples[0].composition;
    out.epsilon = epsilon;
    out.count = static_cast<std::int64_t>(samples.size());
    out.direction.assign(samples[0].grad.size(), 0.0);
    for (const auto& s : samples) {
        if (s.grad.size() != out.direction.size())
            throw ShapeError("mean_direction: gradient sizes differ across samples");
        const double scale = 1.0 / (s.norm + epsilon);
        for (std::size_t i = 0; i < s.grad.size(); ++i) out.direction[i] += scale * s.grad[i];
    }
    for (auto& v : out.direction) v /= static_cast<double>(samples.size());
    return out;
}

double comp_cosine(const MeanDirection& a, const MeanDirection& b) {
    return cosine(a.direction, b.direction);  // throws on zero vectors
}

WithinBetweenResult within_between_study(const GradSamplesByComposition& samples,
                                         const StudyConfig& cfg) {
    WithinBetweenResult out;
    Rng rng(mix_seed(cfg.seed, 0x5742ull));  // "WB"

    // Both sides of the comparison use half-sample mean directions so the
    // two estimators carry the same sampling noise; otherwise the
    // label-permutation null gap would be biased negative (half-sample
    // means are noisier than full-sample ones).
    std::vector<MeanDirection> half_a, half_b;
    for (const auto& [comp, group] : samples) {
        if (static_cast<std::int64_t>(group.size()) < cfg.min_support) {
            ++out.excluded_compositions;
            continue;
        }
        std::vector<std::int64_t> order(group.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        const std::size_t half = group.size() / 2;
        std::vector<GradSample> a_samples, b_samples;
        for (std::size_t i = 0; i < group.size(); ++i) {
            const auto& sample = group[static_cast<std::size_t>(order[i])];
            (i < half ? a_samples : b_samples).push_back(sample);
        }
        half_a.push_back(mean_direction(a_samples));
        half_b.push_back(mean_direction(b_samples));
    }
    if (static_cast<std::int64_t>(half_a.size()) < cfg.min_compositions)
        throw ValueError("within_between_study: need at least " +
                         std::to_string(cfg.min_compositions) + " compositions with support >= " +
                         std::to_string(cfg.min_support));

    // Within: split-half agreement per composition.
    const auto n = static_cast<std::int64_t>(half_a.size());
    for (std::int64_t i = 0; i < n; ++i)
        out.within.push_back(comp_cosine(half_a[static_cast<std::size_t>(i)], half_b[static_cast<std::size_t>(i)]));

    // Between: distinct pairs (sampled when over budget), on matched
    // half-sample estimates.
    auto between_of = [&](std::int64_t i, std::int64_t j) {
        return comp_cosine(half_a[static_cast<std::size_t>(i)], half_b[static_cast<std::size_t>(j)]);
    };
    const std::int64_t total_pairs = n * (n - 1) / 2;
    if (total_pairs <= cfg.max_between_pairs) {
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j) out.between.push_back(between_of(i, j));
    } else {
        std::set<std::pair<std::int64_t, std::int64_t>> picked;
        while (static_cast<std::int64_t>(picked.size()) < cfg.max_between_pairs) {
            std::int64_t i = rng.uniform_int(n);
            std::int64_t j = rng.uniform_int(n);
            if (i == j) continue;
            if (i > j) std::swap(i, j);
            if (!picked.insert({i, j}).second) continue;
        }
        for (const auto& [i, j] : picked) out.between.push_back(between_of(i, j));
    }

    out.mean_within = vec_mean(out.within);
    out.mean_between = vec_mean(out.between);
    out.gap = out.mean_within - out.mean_between;
    out.within_hist = make_histogram(out.within, -1.0, 1.0, cfg.histogram_bins);
    out.between_hist = make_histogram(out.between, -1.0, 1.0, cfg.histogram_bins);
    return out;
}

GradSamplesByComposition permute_composition_labels(const GradSamplesByComposition& samples,
                                                    std::uint64_t seed) {
    std::vector<const GradSample*> flat;
    std::vector<FeatureComposition> labels;
    for (const auto& [comp, group] : samples) {
        for (const auto& s : group) {
            flat.push_back(&s);
            labels.push_back(comp);
        }
    }
    Rng rng(mix_seed(seed, 0x5045524dull));  // "PERM"
    rng.shuffle(labels);
    GradSamplesByComposition out;
    for (std::size_t i = 0; i < flat.size(); ++i) {
        GradSample s = *flat[i];
        s.composition = labels[i];
        out[labels[i]].push_back(std::move(s));
    }
    return out;
}

}  // namespace mfl
