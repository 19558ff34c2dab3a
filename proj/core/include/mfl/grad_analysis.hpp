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

// Token-level gradient of a single-position next-token loss w.r.t. one
// named parameter block, flattened in parameter-name order.
struct GradSample {
    FeatureComposition composition;
    std::vector<double> grad;
    double norm = 0.0;
};

GradSample token_gradient(const ToyLm& model, std::span<const std::int64_t> tokens,
                          std::int64_t position, const std::string& block,
                          const FeatureComposition& composition);

struct MeanDirection {
    FeatureComposition composition;
    std::vector<double> direction;  // mean of unit-normalized gradients
    std::int64_t count = 0;
    double epsilon = 1e-12;
};

MeanDirection mean_direction(std::span<const GradSample> samples, double epsilon = 1e-12);

double comp_cosine(const MeanDirection& a, const MeanDirection& b);

struct StudyConfig {
    std::int64_t min_support = 20;   // samples per composition
    std::int64_t min_compositions = 5;
    std::int64_t max_between_pairs = 2000;
    std::int64_t histogram_bins = 40;
    std::uint64_t seed = 0;
};

struct WithinBetweenResult {
    std::vector<double> within;   // split-half cosines, one per kept composition
    std::vector<double> between;  // sampled distinct-pair cosines
    double mean_within = 0.0;
    double mean_between = 0.0;
    double gap = 0.0;
    std::int64_t excluded_compositions = 0;  // below min support
    Histogram within_hist, between_hist;
};

using GradSamplesByComposition = std::map<FeatureComposition, std::vector<GradSample>>;

WithinBetweenResult within_between_study(const GradSamplesByComposition& samples,
                                         const StudyConfig& cfg);

// Reassigns composition labels by a random permutation across samples;
// the null model for the within/between gap.
GradSamplesByComposition permute_composition_labels(const GradSamplesByComposition& samples,
                                                    std::uint64_t seed);

}  // namespace mfl
