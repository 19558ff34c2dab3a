#include "mfl/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"
#include "mfl/stats.hpp"

namespace mfl {

namespace {

// logits[i, :] = W x_i + b, softmax in place, returns mean NLL.
double probe_forward(std::span<const double> x, std::int64_t n, std::int64_t d,
                     std::span<const double> w, std::span<const double> b, std::int64_t c,
                     std::span<const std::int64_t> labels, std::span<double> probs) {
    double nll = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double* row = probs.data() + i * c;
        const double* xi = x.data() + i * d;
        for (std::int64_t j = 0; j < c; ++j) {
            const double* wj = w.data() + j * d;
            double acc = b[static_cast<std::size_t>(j)];
            for (std::int64_t k = 0; k < d; ++k) acc += wj[k] * xi[k];
            row[j] = acc;
        }
        double mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (std::int64_t j = 0; j < c; ++j) row[j] /= total;
        nll -= std::log(std::max(row[labels[static_cast<std::size_t>(i)]], 1e-300));
    }
    return nll / static_cast<double>(n);
}

std::int64_t argmax_lowest(const double* row, std::int64_t c) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

double accuracy_from(std::span<const double> x, std::int64_t n, std::int64_t d,
                     std::span<const double> w, std::span<const double> b, std::int64_t c,
                     std::span<const std::int64_t> labels) {
    std::int64_t hits = 0;
    std::vector<double> row(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* xi = x.data() + i * d;
        for (std::int64_t j = 0; j < c; ++j) {
            const double* wj = w.data() + j * d;
            double acc = b[static_cast<std::size_t>(j)];
            for (std::int64_t k = 0; k < d; ++k) acc += wj[k] * xi[k];
            row[static_cast<std::size_t>(j)] = acc;
        }
        if (argmax_lowest(row.data(), c) == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

LinearProbe train_probe(const Tensor& reps, std::span<const std::int64_t> labels,
                        std::int64_t n_classes, const ProbeConfig& cfg) {
    if (reps.ndim() != 2) throw ShapeError("train_probe: representations must be [N, d]");
    const std::int64_t n = reps.dim(0), d = reps.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("train_probe: need one label per representation");
    if (n_classes < 2) throw ValueError("train_probe: need at least two classes");
    if (n < 10 * n_classes)
        throw ValueError("train_probe: need at least 10 samples per class, got " + std::to_string(n));
    std::set<std::int64_t> seen;
    for (const auto l : labels) {
        if (l < 0 || l >= n_classes) throw IndexError("train_probe: label out of range");
        seen.insert(l);
    }
    if (seen.size() < 2) throw ValueError("train_probe: degenerate data, single observed class");

    // Shuffled 80/20 train/val split.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 0x50524f4245ull));  // "PROBE"
    rng.shuffle(order);
    const auto n_val = static_cast<std::int64_t>(std::llround(static_cast<double>(n) * cfg.val_fraction));
    const std::int64_t n_train = n - n_val;

    const auto src = reps.data();
    std::vector<double> x_train(static_cast<std::size_t>(n_train * d));
    std::vector<double> x_val(static_cast<std::size_t>(n_val * d));
    std::vector<std::int64_t> y_train(static_cast<std::size_t>(n_train));
    std::vector<std::int64_t> y_val(static_cast<std::size_t>(n_val));
    for (std::int64_t i = 0; i < n_train; ++i) {
        const std::int64_t s = order[static_cast<std::size_t>(i)];
        std::copy_n(src.data() + s * d, d, x_train.data() + i * d);
        y_train[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(s)];
    }
    for (std::int64_t i = 0; i < n_val; ++i) {
        const std::int64_t s = order[static_cast<std::size_t>(n_train + i)];
        std::copy_n(src.data() + s * d, d, x_val.data() + i * d);
        y_val[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(s)];
    }

    std::vector<double> w(static_cast<std::size_t>(n_classes * d), 0.0);
    std::vector<double> b(static_cast<std::size_t>(n_classes), 0.0);
    std::vector<double> best_w = w, best_b = b;
    double best_val = -1.0;
    std::int64_t best_step = 0;

    std::vector<double> probs(static_cast<std::size_t>(n_train * n_classes));
    std::vector<double> gw(w.size()), gb(b.size());
    std::int64_t step = 0;
    for (; step < cfg.steps; ++step) {
        probe_forward(x_train, n_train, d, w, b, n_classes, y_train, probs);
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::int64_t i = 0; i < n_train; ++i) {
            const double* row = probs.data() + i * n_classes;
            const double* xi = x_train.data() + i * d;
            for (std::int64_t j = 0; j < n_classes; ++j) {
                const double delta =
                    (row[j] - (y_train[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0)) /
                    static_cast<double>(n_train);
                gb[static_cast<std::size_t>(j)] += delta;
                if (delta == 0.0) continue;
                double* gwj = gw.data() + j * d;
                for (std::int64_t k = 0; k < d; ++k) gwj[k] += delta * xi[k];
            }
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.lr * (gw[i] + cfg.l2 * w[i]);
        for (std::size_t i = 0; i < b.size(); ++i) b[i] -= cfg.lr * gb[i];

        if (n_val > 0) {
            const double val = accuracy_from(x_val, n_val, d, w, b, n_classes, y_val);
            if (val > best_val) {
                best_val = val;
                best_w = w;
                best_b = b;
                best_step = step;
            } else if (step - best_step >= cfg.patience) {
                break;  // validation plateau
            }
        }
    }
    if (n_val == 0) {
        best_w = w;
        best_b = b;
        best_val = 0.0;
    }

    LinearProbe probe;
    probe.n_classes = n_classes;
    probe.w = Tensor::from_data({n_classes, d}, std::move(best_w));
    probe.b = Tensor::from_data({n_classes}, std::move(best_b));
    probe.train_indices.assign(order.begin(), order.begin() + n_train);
    probe.steps_run = step;
    probe.train_accuracy = accuracy_from(x_train, n_train, d, probe.w.data(), probe.b.data(),
                                         n_classes, y_train);
    probe.val_accuracy = best_val;
    return probe;
}

double probe_accuracy(const LinearProbe& probe, const Tensor& reps,
                      std::span<const std::int64_t> labels) {
    if (reps.ndim() != 2 || reps.dim(1) != probe.w.dim(1))
        throw ShapeError("probe_accuracy: representation width mismatch");
    if (static_cast<std::int64_t>(labels.size()) != reps.dim(0))
        throw ShapeError("probe_accuracy: need one label per representation");
    return accuracy_from(reps.data(), reps.dim(0), reps.dim(1), probe.w.data(), probe.b.data(),
                         probe.n_classes, labels);
}

DecodingSubspace decoding_subspace(const LinearProbe& probe) {
    const std::int64_t c = probe.w.dim(0), d = probe.w.dim(1);
    const auto w = probe.w.data();

    // Row space of W via the spectrum of W W^T (c is small).
    std::vector<double> gram(static_cast<std::size_t>(c * c), 0.0);
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = i; j < c; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < d; ++k) acc += w[static_cast<std::size_t>(i * d + k)] * w[static_cast<std::size_t>(j * d + k)];
            gram[static_cast<std::size_t>(i * c + j)] = acc;
            gram[static_cast<std::size_t>(j * c + i)] = acc;
        }
    const SymEig eig = sym_eig(gram, c);
    const double sigma_max = std::sqrt(std::max(eig.values[0], 0.0));
    if (sigma_max == 0.0) throw ValueError("decoding_subspace: probe weights span an empty subspace");
    const double tol = 1e-8 * sigma_max;

    std::vector<double> basis;
    std::int64_t rank = 0;
    for (std::int64_t i = 0; i < c; ++i) {
        const double sigma = std::sqrt(std::max(eig.values[static_cast<std::size_t>(i)], 0.0));
        if (sigma <= tol) continue;
        // v = W^T u / sigma
        std::vector<double> v(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t r = 0; r < c; ++r) {
            const double u = eig.vectors[static_cast<std::size_t>(i * c + r)];
            if (u == 0.0) continue;
            for (std::int64_t k = 0; k < d; ++k) v[static_cast<std::size_t>(k)] += u * w[static_cast<std::size_t>(r * d + k)];
        }
        for (auto& value : v) value /= sigma;
        // Modified Gram-Schmidt pass against earlier rows for safety.
        for (std::int64_t r = 0; r < rank; ++r) {
            const double* br = basis.data() + r * d;
            double proj = 0.0;
            for (std::int64_t k = 0; k < d; ++k) proj += br[k] * v[static_cast<std::size_t>(k)];
            for (std::int64_t k = 0; k < d; ++k) v[static_cast<std::size_t>(k)] -= proj * br[k];
        }
        const double nrm = norm2(v);
        if (nrm <= tol) continue;
        for (auto& value : v) value /= nrm;
        basis.insert(basis.end(), v.begin(), v.end());
        ++rank;
    }
    if (rank == 0) throw ValueError("decoding_subspace: probe weights span an empty subspace");

    DecodingSubspace out;
    out.feature = probe.feature;
    out.layer = probe.layer;
    out.rank = rank;
    out.basis = Tensor::from_data({rank, d}, std::move(basis));
    return out;
}

double subspace_overlap(const DecodingSubspace& a, const DecodingSubspace& b) {
    if (a.basis.dim(1) != b.basis.dim(1))
        throw ShapeError("subspace_overlap: ambient dimensions differ");
    const std::int64_t ra = a.rank, rb = b.rank, d = a.basis.dim(1);
    const auto ba = a.basis.data();
    const auto bb = b.basis.data();
    double fro2 = 0.0;
    for (std::int64_t i = 0; i < ra; ++i) {
        for (std::int64_t j = 0; j < rb; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < d; ++k) acc += ba[static_cast<std::size_t>(i * d + k)] * bb[static_cast<std::size_t>(j * d + k)];
            fro2 += acc * acc;
        }
    }
    return std::clamp(fro2 / static_cast<double>(std::min(ra, rb)), 0.0, 1.0);
}

HeadImportance head_ablation_importance(const LinearProbe& probe, const Tensor& reps_by_head,
                                        std::span<const std::int64_t> labels) {
    if (reps_by_head.ndim() != 3)
        throw ShapeError("head_ablation_importance: expected [N, H, D] head blocks");
    const std::int64_t n = reps_by_head.dim(0);
    const std::int64_t h = reps_by_head.dim(1);
    const std::int64_t d = reps_by_head.dim(2);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("head_ablation_importance: inconsistent N between blocks and labels");
    if (d != probe.w.dim(1))
        throw ShapeError("head_ablation_importance: block width must match the probe input");

    const auto blocks = reps_by_head.data();
    // Router input reconstructed as the head-sum (the additive ablation site).
    std::vector<double> full(static_cast<std::size_t>(n * d), 0.0);
    std::vector<double> mu(static_cast<std::size_t>(h * d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t m = 0; m < h; ++m)
            for (std::int64_t k = 0; k < d; ++k) {
                const double v = blocks[static_cast<std::size_t>((i * h + m) * d + k)];
                full[static_cast<std::size_t>(i * d + k)] += v;
                mu[static_cast<std::size_t>(m * d + k)] += v;
            }
    for (auto& v : mu) v /= static_cast<double>(n);

    HeadImportance out;
    out.feature = probe.feature;
    out.layer = probe.layer;
    Tensor full_t = Tensor::from_data({n, d}, full);
    out.base_accuracy = probe_accuracy(probe, full_t, labels);

    for (std::int64_t m = 0; m < h; ++m) {
        std::vector<double> ablated = full;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t k = 0; k < d; ++k)
                ablated[static_cast<std::size_t>(i * d + k)] +=
                    mu[static_cast<std::size_t>(m * d + k)] -
                    blocks[static_cast<std::size_t>((i * h + m) * d + k)];
        const double acc = probe_accuracy(probe, Tensor::from_data({n, d}, std::move(ablated)), labels);
        out.ablated_accuracy.push_back(acc);
        out.importance.push_back(std::max(0.0, out.base_accuracy - acc));
    }

    double total = 0.0;
    for (const double v : out.importance) total += v;
    out.shares.resize(static_cast<std::size_t>(h));
    if (total > out.epsilon) {
        for (std::int64_t m = 0; m < h; ++m)
            out.shares[static_cast<std::size_t>(m)] = out.importance[static_cast<std::size_t>(m)] / total;
    } else {
        // No measurable importance anywhere; attribute uniformly so shares
        // still form a distribution.
        std::fill(out.shares.begin(), out.shares.end(), 1.0 / static_cast<double>(h));
    }
    return out;
}

}  // namespace mfl
