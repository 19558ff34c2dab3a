#include "mfl/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfl/error.hpp"

namespace mfl {

double vec_mean(std::span<const double> v) {
    if (v.empty()) throw ValueError("vec_mean: empty input");
    double acc = 0.0;
    for (const double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double vec_stddev(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = vec_mean(v);
    double acc = 0.0;
    for (const double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double vec_standard_error(std::span<const double> v) {
    if (v.empty()) throw ValueError("vec_standard_error: empty input");
    return vec_stddev(v) / std::sqrt(static_cast<double>(v.size()));
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw ValueError("cosine: undefined direction (zero vector)");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> out(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // midrank, 1-based
        for (std::size_t k = i; k <= j; ++k) out[order[k]] = r;
        i = j + 1;
    }
    return out;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("pearson: size mismatch");
    const auto n = static_cast<std::int64_t>(x.size());
    if (n < 3) throw ValueError("pearson: need at least 3 points");
    const double mx = vec_mean(x), my = vec_mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double dx = x[static_cast<std::size_t>(i)] - mx;
        const double dy = y[static_cast<std::size_t>(i)] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Correlation c;
    c.n = n;
    if (sxx == 0.0 || syy == 0.0) {
        c.r = 0.0;
        c.p_value = 1.0;
        return c;
    }
    c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double dof = static_cast<double>(n - 2);
    if (std::abs(c.r) >= 1.0) {
        c.p_value = 0.0;
    } else {
        const double t = c.r * std::sqrt(dof / (1.0 - c.r * c.r));
        c.p_value = 2.0 * student_t_sf(std::abs(t), dof);
    }
    return c;
}

Correlation spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    return pearson(rx, ry);
}

// ---- special functions (series / continued-fraction forms) ----

namespace {

double gamma_p_series(double a, double x) {
    double term = 1.0 / a;
    double total = term;
    for (int n = 1; n < 500; ++n) {
        term *= x / (a + n);
        total += term;
        if (std::abs(term) < std::abs(total) * 1e-15) break;
    }
    return total * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q_contfrac(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double beta_contfrac(double a, double b, double x) {
    const double tiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m < 500; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return h;
}

}  // namespace

double gamma_q(double a, double x) {
    if (a <= 0.0 || x < 0.0) throw ValueError("gamma_q: invalid arguments");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
    return gamma_q_contfrac(a, x);
}

double chi2_sf(double x, double k) { return gamma_q(0.5 * k, 0.5 * x); }

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_contfrac(a, b, x) / a;
    return 1.0 - front * beta_contfrac(b, a, 1.0 - x) / b;
}

double student_t_sf(double t, double dof) {
    if (dof <= 0.0) throw ValueError("student_t_sf: dof must be positive");
    const double x = dof / (dof + t * t);
    const double half_tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
    return t >= 0.0 ? half_tail : 1.0 - half_tail;
}

Histogram make_histogram(std::span<const double> values, double lo, double hi, std::int64_t bins) {
    if (bins <= 0 || !(hi > lo)) throw ValueError("make_histogram: bad bin spec");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (const double v : values) {
        auto idx = static_cast<std::int64_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
        idx = std::clamp<std::int64_t>(idx, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(idx)];
        ++h.total;
    }
    return h;
}

std::vector<double> Histogram::edges() const {
    const auto bins = static_cast<std::int64_t>(counts.size());
    std::vector<double> e(static_cast<std::size_t>(bins + 1));
    for (std::int64_t i = 0; i <= bins; ++i)
        e[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    return e;
}

SymEig sym_eig(std::span<const double> matrix, std::int64_t n) {
    if (static_cast<std::int64_t>(matrix.size()) != n * n) throw ShapeError("sym_eig: bad matrix size");
    std::vector<double> a(matrix.begin(), matrix.end());
    std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;

    auto idx = [n](std::int64_t r, std::int64_t c) { return static_cast<std::size_t>(r * n + c); };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) off += a[idx(p, q)] * a[idx(p, q)];
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a[idx(p, q)];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = a[idx(k, p)], akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = a[idx(p, k)], aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double vpk = v[idx(p, k)], vqk = v[idx(q, k)];
                    v[idx(p, k)] = c * vpk - s * vqk;
                    v[idx(q, k)] = s * vpk + c * vqk;
                }
            }
        }
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::int64_t x, std::int64_t y) { return a[idx(x, x)] > a[idx(y, y)]; });

    SymEig out;
    out.n = n;
    out.values.resize(static_cast<std::size_t>(n));
    out.vectors.resize(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i) {
        out.values[static_cast<std::size_t>(i)] = a[idx(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)])];
        for (std::int64_t k = 0; k < n; ++k)
            out.vectors[idx(i, k)] = v[idx(order[static_cast<std::size_t>(i)], k)];
    }
    return out;
}

}  // namespace mfl
