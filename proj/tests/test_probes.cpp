#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mfl/error.hpp"
#include "mfl/probes.hpp"
#include "mfl/rng.hpp"
#include "mfl/stats.hpp"

using namespace mfl;

namespace {

struct Blobs {
    Tensor reps;
    std::vector<std::int64_t> labels;
};

// Two well-separated gaussian blobs in d dims.
Blobs separable_blobs(std::int64_t n, std::int64_t d, double gap, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> reps;
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t y = rng.uniform_int(2);
        labels.push_back(y);
        for (std::int64_t j = 0; j < d; ++j)
            reps.push_back(rng.normal() + (j == 0 ? (y == 0 ? -gap : gap) : 0.0));
    }
    return {Tensor::from_data({n, d}, std::move(reps)), std::move(labels)};
}

ProbeConfig quick_config(std::uint64_t seed) {
    ProbeConfig cfg;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("linearly separable blobs reach near-perfect accuracy") {
    const Blobs data = separable_blobs(400, 8, 4.0, 1);
    const LinearProbe probe = train_probe(data.reps, data.labels, 2, quick_config(1));
    CHECK(probe.val_accuracy >= 0.99);
    CHECK(probe_accuracy(probe, data.reps, data.labels) >= 0.99);
}

TEST_CASE("shuffled labels collapse to chance") {
    Blobs data = separable_blobs(600, 8, 4.0, 2);
    Rng rng(3);
    rng.shuffle(data.labels);
    const LinearProbe probe = train_probe(data.reps, data.labels, 2, quick_config(2));
    CHECK(probe.val_accuracy == doctest::Approx(0.5).epsilon(0.12));
    CHECK(probe_accuracy(probe, data.reps, data.labels) == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("training accuracy is no worse than validation minus slack") {
    const Blobs data = separable_blobs(300, 6, 1.0, 4);
    const LinearProbe probe = train_probe(data.reps, data.labels, 2, quick_config(4));
    CHECK(probe.train_accuracy >= probe.val_accuracy - 0.1);
}

TEST_CASE("all-zero probe predicts class zero everywhere") {
    LinearProbe probe;
    probe.n_classes = 3;
    probe.w = Tensor::zeros({3, 4});
    probe.b = Tensor::zeros({3});
    Rng rng(5);
    std::vector<double> reps;
    std::vector<std::int64_t> labels;
    std::int64_t zeros = 0;
    for (std::int64_t i = 0; i < 90; ++i) {
        const std::int64_t y = rng.uniform_int(3);
        labels.push_back(y);
        zeros += y == 0;
        for (std::int64_t j = 0; j < 4; ++j) reps.push_back(rng.normal());
    }
    const double acc = probe_accuracy(probe, Tensor::from_data({90, 4}, std::move(reps)), labels);
    CHECK(acc == doctest::Approx(static_cast<double>(zeros) / 90.0).epsilon(1e-12));
}

TEST_CASE("oracle features give perfect accuracy") {
    // Representations are one-hot in the label.
    std::vector<double> reps;
    std::vector<std::int64_t> labels;
    Rng rng(6);
    for (std::int64_t i = 0; i < 120; ++i) {
        const std::int64_t y = rng.uniform_int(3);
        labels.push_back(y);
        for (std::int64_t j = 0; j < 3; ++j) reps.push_back(j == y ? 1.0 : 0.0);
    }
    const Tensor x = Tensor::from_data({120, 3}, std::move(reps));
    const LinearProbe probe = train_probe(x, labels, 3, quick_config(6));
    CHECK(probe_accuracy(probe, x, labels) == 1.0);
}

TEST_CASE("degenerate single-class data is rejected") {
    Rng rng(7);
    std::vector<double> reps(200 * 4);
    for (auto& v : reps) v = rng.normal();
    std::vector<std::int64_t> labels(200, 1);
    CHECK_THROWS_AS(train_probe(Tensor::from_data({200, 4}, std::move(reps)), labels, 2, quick_config(7)),
                    ValueError);
}

TEST_CASE("too few samples per class is rejected") {
    Rng rng(8);
    std::vector<double> reps(12 * 4);
    for (auto& v : reps) v = rng.normal();
    std::vector<std::int64_t> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    CHECK_THROWS_AS(train_probe(Tensor::from_data({12, 4}, std::move(reps)), labels, 2, quick_config(8)),
                    ValueError);
}

TEST_CASE("decoding subspace of orthogonal rows has full rank") {
    LinearProbe probe;
    probe.n_classes = 3;
    probe.w = Tensor::from_data({3, 6}, {2, 0, 0, 0, 0, 0,
                                         0, 0, 3, 0, 0, 0,
                                         0, 0, 0, 0, 5, 0});
    probe.b = Tensor::zeros({3});
    const DecodingSubspace sub = decoding_subspace(probe);
    CHECK(sub.rank == 3);
    // Basis spans the same axes.
    for (std::int64_t r = 0; r < 3; ++r) {
        double on_axes = 0;
        for (const std::int64_t j : {0, 2, 4}) on_axes += std::abs(sub.basis.at(r, j));
        double off_axes = 0;
        for (const std::int64_t j : {1, 3, 5}) off_axes += std::abs(sub.basis.at(r, j));
        CHECK(on_axes > 0.99);
        CHECK(off_axes < 1e-9);
    }
}

TEST_CASE("duplicated probe rows collapse the rank") {
    LinearProbe probe;
    probe.n_classes = 3;
    probe.w = Tensor::from_data({3, 4}, {1, 2, 0, 1,
                                         1, 2, 0, 1,
                                         0, 1, 1, 0});
    probe.b = Tensor::zeros({3});
    CHECK(decoding_subspace(probe).rank == 2);
}

TEST_CASE("zero probe weights give an empty-subspace error") {
    LinearProbe probe;
    probe.n_classes = 2;
    probe.w = Tensor::zeros({2, 4});
    probe.b = Tensor::zeros({2});
    CHECK_THROWS_AS(decoding_subspace(probe), ValueError);
}

TEST_CASE("projector onto the basis reproduces random probe rows") {
    Rng rng(9);
    std::vector<double> w(3 * 16);
    for (auto& v : w) v = rng.normal();
    LinearProbe probe;
    probe.n_classes = 3;
    probe.w = Tensor::from_data({3, 16}, w);
    probe.b = Tensor::zeros({3});
    const DecodingSubspace sub = decoding_subspace(probe);
    CHECK(sub.rank == 3);
    // P row = row for every probe row.
    for (std::int64_t r = 0; r < 3; ++r) {
        std::vector<double> projected(16, 0.0);
        for (std::int64_t bidx = 0; bidx < sub.rank; ++bidx) {
            double coef = 0;
            for (std::int64_t j = 0; j < 16; ++j)
                coef += sub.basis.at(bidx, j) * probe.w.at(r, j);
            for (std::int64_t j = 0; j < 16; ++j) projected[static_cast<std::size_t>(j)] += coef * sub.basis.at(bidx, j);
        }
        for (std::int64_t j = 0; j < 16; ++j)
            CHECK(std::abs(projected[static_cast<std::size_t>(j)] - probe.w.at(r, j)) < 1e-8);
    }
    // Basis orthonormality.
    for (std::int64_t i = 0; i < sub.rank; ++i)
        for (std::int64_t j = 0; j < sub.rank; ++j) {
            double dot_ij = 0;
            for (std::int64_t k = 0; k < 16; ++k) dot_ij += sub.basis.at(i, k) * sub.basis.at(j, k);
            CHECK(std::abs(dot_ij - (i == j ? 1.0 : 0.0)) < 1e-10);
        }
}

TEST_CASE("subspace overlap endpoints and the rank-1 angle law") {
    auto rank1 = [](double angle) {
        DecodingSubspace s;
        s.rank = 1;
        s.basis = Tensor::from_data({1, 2}, {std::cos(angle), std::sin(angle)});
        return s;
    };
    const DecodingSubspace a = rank1(0.0);
    CHECK(subspace_overlap(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(subspace_overlap(a, rank1(std::numbers::pi / 2)) == doctest::Approx(0.0).epsilon(1e-12));
    for (const double theta : {0.3, 0.7, 1.1}) {
        const double overlap = subspace_overlap(a, rank1(theta));
        CHECK(overlap == doctest::Approx(std::cos(theta) * std::cos(theta)).epsilon(1e-10));
        CHECK(overlap == doctest::Approx(subspace_overlap(rank1(theta), a)).epsilon(1e-12));
    }
}

TEST_CASE("subspace overlap rejects mismatched ambient dimensions") {
    DecodingSubspace a, b;
    a.rank = b.rank = 1;
    a.basis = Tensor::from_data({1, 2}, {1, 0});
    b.basis = Tensor::from_data({1, 3}, {1, 0, 0});
    CHECK_THROWS_AS(subspace_overlap(a, b), ShapeError);
}

namespace {

// Head-block builder: blocks [N, H, D] whose head-sum carries the feature.
struct HeadData {
    Tensor blocks;
    std::vector<std::int64_t> labels;
    Tensor summed;
};

HeadData feature_in_heads(std::int64_t n, std::int64_t heads, std::int64_t d,
                          const std::vector<std::int64_t>& carrying, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> blocks(static_cast<std::size_t>(n * heads * d));
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t y = rng.uniform_int(2);
        labels.push_back(y);
        for (std::int64_t m = 0; m < heads; ++m) {
            const bool carries =
                std::find(carrying.begin(), carrying.end(), m) != carrying.end();
            for (std::int64_t j = 0; j < d; ++j) {
                double v = 0.3 * rng.normal();
                if (carries && j == 0) v += y == 0 ? -2.0 : 2.0;
                blocks[static_cast<std::size_t>((i * heads + m) * d + j)] = v;
            }
        }
    }
    std::vector<double> summed(static_cast<std::size_t>(n * d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t m = 0; m < heads; ++m)
            for (std::int64_t j = 0; j < d; ++j)
                summed[static_cast<std::size_t>(i * d + j)] +=
                    blocks[static_cast<std::size_t>((i * heads + m) * d + j)];
    return {Tensor::from_data({n, heads, d}, std::move(blocks)), std::move(labels),
            Tensor::from_data({n, d}, std::move(summed))};
}

}  // namespace

TEST_CASE("head ablation attributes a single-head feature to that head") {
    const HeadData data = feature_in_heads(500, 4, 6, {3}, 11);
    LinearProbe probe = train_probe(data.summed, data.labels, 2, quick_config(11));
    const HeadImportance imp = head_ablation_importance(probe, data.blocks, data.labels);
    CHECK(imp.shares[3] > 0.9);
    for (const std::int64_t m : {0, 1, 2}) CHECK(imp.shares[static_cast<std::size_t>(m)] < 0.05);
    double total = 0;
    for (const double s : imp.shares) total += s;
    CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("a fully redundant feature yields small drops and near-uniform shares") {
    const HeadData data = feature_in_heads(500, 4, 6, {0, 1, 2, 3}, 12);
    LinearProbe probe = train_probe(data.summed, data.labels, 2, quick_config(12));
    const HeadImportance imp = head_ablation_importance(probe, data.blocks, data.labels);
    // Ablating one of four redundant carriers barely hurts: the remaining
    // three still separate the classes.
    for (const double i : imp.importance) CHECK(i < 0.1);
    double total = 0;
    for (const double s : imp.shares) total += s;
    CHECK(std::abs(total - 1.0) < 1e-6);
    for (const double s : imp.shares) CHECK(s < 0.6);
}

TEST_CASE("replacing a constant head block changes nothing") {
    HeadData data = feature_in_heads(300, 3, 5, {0}, 13);
    // Make head 2's block constant.
    auto b = data.blocks.mutable_data();
    for (std::int64_t i = 0; i < 300; ++i)
        for (std::int64_t j = 0; j < 5; ++j) b[static_cast<std::size_t>((i * 3 + 2) * 5 + j)] = 0.77;
    std::vector<double> summed(300 * 5, 0.0);
    for (std::int64_t i = 0; i < 300; ++i)
        for (std::int64_t m = 0; m < 3; ++m)
            for (std::int64_t j = 0; j < 5; ++j)
                summed[static_cast<std::size_t>(i * 5 + j)] += b[static_cast<std::size_t>((i * 3 + m) * 5 + j)];
    Tensor summed_t = Tensor::from_data({300, 5}, std::move(summed));
    LinearProbe probe = train_probe(summed_t, data.labels, 2, quick_config(13));
    const HeadImportance imp = head_ablation_importance(probe, data.blocks, data.labels);
    CHECK(imp.importance[2] == 0.0);
    CHECK(imp.ablated_accuracy[2] == imp.base_accuracy);
}

TEST_CASE("mean replacement preserves the dataset mean of the representation") {
    const HeadData data = feature_in_heads(200, 3, 4, {1}, 14);
    const auto blocks = data.blocks.data();
    for (std::int64_t m = 0; m < 3; ++m) {
        // mu_m over the dataset.
        std::vector<double> mu(4, 0.0);
        for (std::int64_t i = 0; i < 200; ++i)
            for (std::int64_t j = 0; j < 4; ++j)
                mu[static_cast<std::size_t>(j)] += blocks[static_cast<std::size_t>((i * 3 + m) * 4 + j)] / 200.0;
        // Dataset mean of full rep before and after replacing block m.
        std::vector<double> mean_before(4, 0.0), mean_after(4, 0.0);
        for (std::int64_t i = 0; i < 200; ++i) {
            for (std::int64_t h = 0; h < 3; ++h) {
                for (std::int64_t j = 0; j < 4; ++j) {
                    const double v = blocks[static_cast<std::size_t>((i * 3 + h) * 4 + j)];
                    mean_before[static_cast<std::size_t>(j)] += v / 200.0;
                    mean_after[static_cast<std::size_t>(j)] +=
                        (h == m ? mu[static_cast<std::size_t>(j)] : v) / 200.0;
                }
            }
        }
        for (std::int64_t j = 0; j < 4; ++j)
            CHECK(mean_after[static_cast<std::size_t>(j)] ==
                  doctest::Approx(mean_before[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
}

TEST_CASE("head ablation validates its inputs") {
    const HeadData data = feature_in_heads(100, 2, 4, {0}, 15);
    LinearProbe probe = train_probe(data.summed, data.labels, 2, quick_config(15));
    std::vector<std::int64_t> bad_labels(50, 0);
    CHECK_THROWS_AS(head_ablation_importance(probe, data.blocks, bad_labels), ShapeError);
}
