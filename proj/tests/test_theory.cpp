#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"
#include "mfl/stats.hpp"
#include "mfl/theory.hpp"

using namespace mfl;

TEST_CASE("lemma 1 on the uniform-16 m=4 case") {
    MixingInstance inst;
    inst.p.assign(16, 1.0 / 16.0);
    inst.m = 4;
    const auto res = lemma1_check(inst);
    CHECK(res.n_eff == doctest::Approx(16.0));
    CHECK(res.worst_actual == doctest::Approx(0.75));
    CHECK(res.bound == doctest::Approx(0.5));
    CHECK(res.holds);
}

TEST_CASE("lemma 1 point mass holds with equality") {
    MixingInstance inst;
    inst.p = {1.0, 0.0, 0.0};
    inst.m = 1;
    const auto res = lemma1_check(inst);
    CHECK(res.worst_actual == doctest::Approx(0.0));
    CHECK(res.bound == doctest::Approx(0.0));
    CHECK(res.holds);
}

TEST_CASE("lemma 1 over random dirichlet draws never fails") {
    Rng rng(31);
    const double alphas[] = {0.1, 0.5, 1.0, 2.0};
    for (int i = 0; i < 1000; ++i) {
        const std::int64_t dim = 2 + rng.uniform_int(40);
        const double alpha = alphas[rng.uniform_int(4)];
        MixingInstance inst;
        inst.p = rng.dirichlet(std::vector<double>(static_cast<std::size_t>(dim), alpha));
        for (const std::int64_t m : {1, 2, 4}) {
            inst.m = m;
            CHECK(lemma1_check(inst).holds);
        }
    }
}

TEST_CASE("lemma 1 rejects nonpositive m") {
    MixingInstance inst;
    inst.p = {0.5, 0.5};
    inst.m = 0;
    CHECK_THROWS_AS(lemma1_check(inst), ValueError);
}

TEST_CASE("one-step bound at eta zero is exactly zero") {
    QuadraticObjective f{{1.0, 0.0}};
    const std::vector<double> theta{0.0, 0.0};
    const std::vector<double> u{1.0, 0.0};
    const auto res = one_step_uniform_lower_bound(f, theta, 0.0, u, 1.0, 1.0);
    CHECK(res.bound == 0.0);
    CHECK(res.actual == 0.0);
}

TEST_CASE("one-step bound along the gradient matches the closed form") {
    // F(theta) = 0.5|theta - t*|^2, grad = theta - t*; stepping along the
    // normalized gradient gives delta = -eta*|g| + eta^2/2.
    QuadraticObjective f{{2.0, 0.0}};
    const std::vector<double> theta{0.0, 0.0};
    std::vector<double> u{-1.0, 0.0};  // grad = -t* = (-2, 0); normalized = (-1, 0)
    const double eta = 0.3;
    const auto res = one_step_uniform_lower_bound(f, theta, eta, u, 2.0, 1.0);
    CHECK(res.actual == doctest::Approx(-eta * 2.0 + 0.5 * eta * eta).epsilon(1e-12));
    CHECK(res.actual >= res.bound);
}

TEST_CASE("one-step bound never fires on random admissible draws") {
    Rng rng(32);
    for (int i = 0; i < 1000; ++i) {
        const std::int64_t dim = 3 + rng.uniform_int(10);
        QuadraticObjective f;
        f.theta_star.resize(static_cast<std::size_t>(dim));
        for (auto& v : f.theta_star) v = rng.normal();
        std::vector<double> theta(static_cast<std::size_t>(dim));
        for (auto& v : theta) v = 0.3 * rng.normal();
        std::vector<double> u(static_cast<std::size_t>(dim));
        for (auto& v : u) v = rng.normal();
        const double n = norm2(u);
        for (auto& v : u) v /= n;
        const double g = f.grad_norm(theta);
        CHECK_NOTHROW(one_step_uniform_lower_bound(f, theta, 0.2, u, g + 1e-9, 1.0));
    }
}

TEST_CASE("one-step bound rejects non-unit directions") {
    QuadraticObjective f{{1.0}};
    const std::vector<double> theta{0.0};
    const std::vector<double> u{0.5};
    CHECK_THROWS_AS(one_step_uniform_lower_bound(f, theta, 0.1, u, 1.0, 1.0), ValueError);
}

TEST_CASE("designed theorem instance holds with margin") {
    const auto inst = make_designed_instance(16, 2, 8, 0.1, 5);
    const auto res = theorem1_simulate(inst, 20000, 6);
    REQUIRE(res.assumptions_ok);
    CHECK(res.rho > 0.9);
    // Tail condition is strictly stronger than the bound's dead zone.
    CHECK(res.rho * res.kappa >
          (1.0 - res.rho) * (inst.eta * inst.grad_bound + 0.5 * inst.smoothness * inst.eta * inst.eta));
    CHECK(res.rhs > 0.0);
    CHECK(res.holds_within_ci);
    CHECK(res.lhs_lower_ci >= res.rhs_conservative);
}

TEST_CASE("theorem right side is nondecreasing in n_eff") {
    double prev = -1e30;
    for (const std::int64_t n : {4, 8, 16, 32}) {
        const auto inst = make_designed_instance(n, 2, 8, 0.1, 5);
        const auto res = theorem1_simulate(inst, 5000, 7);
        REQUIRE(res.assumptions_ok);
        CHECK(res.rhs >= prev - 1e-12);
        prev = res.rhs;
        CHECK(res.holds_within_ci);
    }
    // Positivity threshold: rhs > 0 iff N_eff > m (given the tail margin).
    const double rhs_at_m = theorem1_rhs(2.0, 2, 0.99, 0.055, 0.1, 1.0, 1.0);
    CHECK(rhs_at_m == 0.0);
    const double rhs_above = theorem1_rhs(2.5, 2, 0.99, 0.055, 0.1, 1.0, 1.0);
    CHECK(rhs_above > 0.0);
}

TEST_CASE("instances with n_eff <= m hold trivially via the clamp") {
    // Skewed p with N_eff < m = 2; all targets face the update so every
    // delta is nonnegative.
    TheoremInstance inst;
    Rng rng(8);
    std::vector<double> u0(6);
    for (auto& v : u0) v = rng.normal();
    const double n0 = norm2(u0);
    for (auto& v : u0) v /= n0;
    for (int c = 0; c < 3; ++c) inst.objectives.push_back({u0});
    inst.p = {0.9, 0.05, 0.05};
    inst.protected_set = {0, 1};
    inst.theta.assign(6, 0.0);
    inst.eta = 0.1;
    inst.grad_bound = 1.0;
    inst.smoothness = 1.0;
    inst.kappa = 0.05;
    inst.tilt_direction = u0;
    inst.tilt_sigma = 0.1;
    const auto res = theorem1_simulate(inst, 4000, 9);
    REQUIRE(res.assumptions_ok);
    CHECK(res.a > 1.0);
    CHECK(res.rhs == 0.0);
    CHECK(res.holds_within_ci);
}

TEST_CASE("assumption verification rejects bad instances") {
    auto inst = make_designed_instance(8, 2, 8, 0.1, 10);

    SUBCASE("gradient bound violated") {
        inst.grad_bound = 0.5;  // targets have norm 1
        const auto res = theorem1_simulate(inst, 1000, 11);
        CHECK_FALSE(res.assumptions_ok);
        CHECK(!res.rejection_reason.empty());
    }
    SUBCASE("unreachable kappa fails the tail condition") {
        inst.kappa = 100.0;
        const auto res = theorem1_simulate(inst, 1000, 12);
        CHECK_FALSE(res.assumptions_ok);
    }
    SUBCASE("nonpositive kappa is rejected") {
        inst.kappa = 0.0;
        const auto res = theorem1_simulate(inst, 1000, 13);
        CHECK_FALSE(res.assumptions_ok);
    }
}

TEST_CASE("measured rho reflects the direction distribution") {
    // Isotropic directions: for a target on the sphere the tail event
    // u . t* >= 0.5 is rare in 8 dims, so rho collapses and with it the
    // usable bound.
    auto inst = make_designed_instance(16, 2, 8, 0.1, 14);
    inst.tilt_direction.clear();  // isotropic mode
    const auto res = theorem1_simulate(inst, 2000, 15);
    if (res.assumptions_ok) {
        CHECK(res.rho < 0.2);
        CHECK(res.holds_within_ci);  // weak rhs, lhs ~ eta^2/2 > 0
    } else {
        CHECK(res.rejection_reason.find("rho") != std::string::npos);
    }
}
