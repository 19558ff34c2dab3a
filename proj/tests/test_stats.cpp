#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"
#include "mfl/stats.hpp"

using namespace mfl;

TEST_CASE("ranks average ties") {
    const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
    const auto r = ranks(v);
    CHECK(r[0] == doctest::Approx(3.5));
    CHECK(r[1] == doctest::Approx(1.0));
    CHECK(r[2] == doctest::Approx(3.5));
    CHECK(r[3] == doctest::Approx(2.0));
}

TEST_CASE("spearman of a monotone map is one") {
    std::vector<double> x, y;
    for (int i = 0; i < 20; ++i) {
        x.push_back(i);
        y.push_back(std::exp(0.3 * i));
    }
    const auto c = spearman(x, y);
    CHECK(c.r == doctest::Approx(1.0));
    CHECK(c.p_value < 1e-6);
}

TEST_CASE("spearman of independent noise is near zero with large p") {
    Rng rng(5);
    std::vector<double> x, y;
    for (int i = 0; i < 40; ++i) {
        x.push_back(rng.normal());
        y.push_back(rng.normal());
    }
    const auto c = spearman(x, y);
    CHECK(std::abs(c.r) < 0.4);
    CHECK(c.p_value > 0.01);
}

TEST_CASE("chi-square survival function endpoints") {
    CHECK(chi2_sf(0.0, 4.0) == doctest::Approx(1.0));
    // Known value: chi2 sf at x = k for k = 2 is exp(-1).
    CHECK(chi2_sf(2.0, 2.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-10));
    CHECK(chi2_sf(100.0, 4.0) < 1e-15);
}

TEST_CASE("student t survival function matches known quantiles") {
    // t = 2.776 at 4 dof is the two-sided 5% quantile.
    CHECK(2.0 * student_t_sf(2.776, 4.0) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(student_t_sf(0.0, 10.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(student_t_sf(-3.0, 10.0) + student_t_sf(3.0, 10.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("incomplete beta is a cdf in x") {
    CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
    CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
    CHECK(incomplete_beta(1.0, 1.0, 0.37) == doctest::Approx(0.37).epsilon(1e-12));
    CHECK(incomplete_beta(2.0, 3.0, 0.3) > incomplete_beta(2.0, 3.0, 0.2));
}

TEST_CASE("histogram covers the range and clamps edges") {
    const std::vector<double> v{-1.0, -0.999, 0.0, 0.5, 1.0};
    const auto h = make_histogram(v, -1.0, 1.0, 4);
    CHECK(h.total == 5);
    std::int64_t total = 0;
    for (const auto c : h.counts) total += c;
    CHECK(total == 5);
    CHECK(h.counts[0] == 2);
    CHECK(h.counts[3] == 2);  // 1.0 clamps into the last bin
    CHECK(h.edges().front() == -1.0);
    CHECK(h.edges().back() == 1.0);
}

TEST_CASE("sym_eig recovers a known spectrum") {
    // A = Q diag(9, 4, 1) Q^T for a hand-built orthogonal Q (Householder).
    const std::vector<double> diag{9.0, 4.0, 1.0};
    std::vector<double> q{2.0 / 3, -2.0 / 3, 1.0 / 3,
                          2.0 / 3, 1.0 / 3, -2.0 / 3,
                          1.0 / 3, 2.0 / 3, 2.0 / 3};
    std::vector<double> a(9, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) a[i * 3 + j] += q[i * 3 + k] * diag[k] * q[j * 3 + k];

    const auto eig = sym_eig(a, 3);
    CHECK(eig.values[0] == doctest::Approx(9.0).epsilon(1e-10));
    CHECK(eig.values[1] == doctest::Approx(4.0).epsilon(1e-10));
    CHECK(eig.values[2] == doctest::Approx(1.0).epsilon(1e-10));
    // Eigenvectors reproduce A v = lambda v.
    for (int e = 0; e < 3; ++e) {
        for (int i = 0; i < 3; ++i) {
            double av = 0;
            for (int j = 0; j < 3; ++j) av += a[i * 3 + j] * eig.vectors[e * 3 + j];
            CHECK(av == doctest::Approx(eig.values[e] * eig.vectors[e * 3 + i]).epsilon(1e-8));
        }
    }
}

TEST_CASE("cosine rejects zero vectors") {
    const std::vector<double> z{0.0, 0.0};
    const std::vector<double> v{1.0, 0.0};
    CHECK_THROWS_AS(cosine(z, v), ValueError);
}

TEST_CASE("standard error shrinks as sqrt(n)") {
    Rng rng(9);
    std::vector<double> small, large;
    for (int i = 0; i < 100; ++i) small.push_back(rng.normal());
    for (int i = 0; i < 10000; ++i) large.push_back(rng.normal());
    CHECK(vec_standard_error(large) < vec_standard_error(small));
}
