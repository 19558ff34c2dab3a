#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfl/tensor.hpp"

namespace mfl {

struct ProbeConfig {
    std::int64_t steps = 500;
    double lr = 0.1;
    double l2 = 1e-4;
    double val_fraction = 0.2;
    std::int64_t patience = 50;  // early stop on validation plateau
    std::uint64_t seed = 0;
};

// Multinomial logistic probe on frozen representations.
struct LinearProbe {
    std::string feature;
    std::int64_t layer = 0;
    std::int64_t n_classes = 0;
    Tensor w;  // [|Y|, d]
    Tensor b;  // [|Y|]
    std::int64_t steps_run = 0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    std::vector<std::int64_t> train_indices;  // rows of the fit's training split
};

// Full-batch gradient descent with L2 penalty on an 80/20 split.
// Requires N >= 10 * |Y| and at least two observed classes.
LinearProbe train_probe(const Tensor& reps, std::span<const std::int64_t> labels,
                        std::int64_t n_classes, const ProbeConfig& cfg);

// Argmax accuracy; prediction ties resolved toward the lowest class index.
double probe_accuracy(const LinearProbe& probe, const Tensor& reps,
                      std::span<const std::int64_t> labels);

struct DecodingSubspace {
    std::string feature;
    std::int64_t layer = 0;
    Tensor basis;  // [rank, d], orthonormal rows spanning row-space of W
    std::int64_t rank = 0;
};

// Orthonormal basis of span(W^T); numerical rank at 1e-8 * sigma_max.
DecodingSubspace decoding_subspace(const LinearProbe& probe);

// |P_A P_B|_F^2 / min(rank_A, rank_B); symmetric, in [0, 1].
double subspace_overlap(const DecodingSubspace& a, const DecodingSubspace& b);

struct HeadImportance {
    std::string feature;
    std::int64_t layer = 0;
    double base_accuracy = 0.0;
    std::vector<double> ablated_accuracy;  // per head
    std::vector<double> importance;        // drops, floored at 0
    std::vector<double> shares;            // normalized, sums to 1
    double epsilon = 1e-8;
};

// Mean-replacement head ablation: the router input must decompose
// additively into per-head blocks (reps_by_head is [N, H, D] flattened and
// its head-sum equals the probed representation). Each head block is
// replaced by its dataset mean and the probe accuracy drop recorded.
HeadImportance head_ablation_importance(const LinearProbe& probe, const Tensor& reps_by_head,
                                        std::span<const std::int64_t> labels);

}  // namespace mfl
