#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mfl {

double vec_mean(std::span<const double> v);
double vec_stddev(std::span<const double> v);       // sample stddev (n-1)
double vec_standard_error(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double cosine(std::span<const double> a, std::span<const double> b);  // error on zero vector

// Midranks with tie averaging.
std::vector<double> ranks(std::span<const double> v);

struct Correlation {
    double r = 0.0;
    double p_value = 1.0;  // two-sided, t approximation
    std::int64_t n = 0;
};

Correlation pearson(std::span<const double> x, std::span<const double> y);
Correlation spearman(std::span<const double> x, std::span<const double> y);

// Regularized incomplete gamma Q(a, x) and survival functions built on it.
double gamma_q(double a, double x);
double chi2_sf(double x, double k);
// Regularized incomplete beta I_x(a, b); Student-t survival via it.
double incomplete_beta(double a, double b, double x);
double student_t_sf(double t, double dof);  // P(T > t)

struct Histogram {
    double lo = 0.0, hi = 0.0;
    std::vector<std::int64_t> counts;
    std::int64_t total = 0;
    std::vector<double> edges() const;
};

Histogram make_histogram(std::span<const double> values, double lo, double hi, std::int64_t bins);

// Eigen-decomposition of a small symmetric matrix (row-major n x n) via
// cyclic Jacobi. Eigenvalues descending; eigenvectors are rows of `vectors`.
struct SymEig {
    std::vector<double> values;
    std::vector<double> vectors;  // row i is the eigenvector for values[i]
    std::int64_t n = 0;
};

SymEig sym_eig(std::span<const double> matrix, std::int64_t n);

}  // namespace mfl
