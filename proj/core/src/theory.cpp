#include "mfl/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"
#include "mfl/stats.hpp"

namespace mfl {

namespace {

double distribution_neff(std::span<const double> p) {
    double total = 0.0, sq = 0.0;
    for (const double v : p) {
        if (v < 0.0) throw ValueError("theory: negative probability");
        total += v;
        sq += v * v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValueError("theory: distribution does not sum to 1");
    return 1.0 / sq;
}

std::vector<double> draw_direction(Rng& rng, std::int64_t dim,
                                   std::span<const double> tilt, double sigma) {
    std::vector<double> u(static_cast<std::size_t>(dim));
    for (auto& v : u) v = rng.normal();
    if (!tilt.empty()) {
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = tilt[i] + sigma * u[i];
    }
    const double n = norm2(u);
    for (auto& v : u) v /= n;
    return u;
}

}  // namespace

Lemma1Result lemma1_check(const MixingInstance& instance) {
    if (instance.m <= 0) throw ValueError("lemma1_check: m must be positive");
    Lemma1Result out;
    out.n_eff = distribution_neff(instance.p);

    // Sorting argument: Pr[C in S] is maximized by the m largest masses.
    std::vector<double> sorted(instance.p.begin(), instance.p.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double top = 0.0;
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(instance.m), sorted.size());
    for (std::size_t i = 0; i < take; ++i) top += sorted[i];

    out.worst_actual = 1.0 - std::min(top, 1.0);
    out.bound = 1.0 - std::sqrt(static_cast<double>(instance.m) / out.n_eff);
    out.holds = out.worst_actual >= out.bound - 1e-12;
    return out;
}

double QuadraticObjective::value(std::span<const double> theta) const {
    if (theta.size() != theta_star.size()) throw ShapeError("quadratic: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta[i] - theta_star[i];
        acc += d * d;
    }
    return 0.5 * acc;
}

double QuadraticObjective::grad_norm(std::span<const double> theta) const {
    if (theta.size() != theta_star.size()) throw ShapeError("quadratic: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta[i] - theta_star[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

double theorem1_rhs(double n_eff, std::int64_t m, double rho, double kappa, double eta, double g,
                    double l) {
    const double a = std::sqrt(static_cast<double>(m) / n_eff);
    const double gate = std::max(0.0, 1.0 - a);
    return gate * (rho * kappa - (1.0 - rho) * (eta * g + 0.5 * l * eta * eta));
}

TheoremResult theorem1_simulate(const TheoremInstance& instance, std::int64_t trials,
                                std::uint64_t seed) {
    TheoremResult out;
    out.trials = trials;
    out.kappa = instance.kappa;
    const auto n_comp = static_cast<std::int64_t>(instance.objectives.size());
    if (n_comp == 0 || instance.p.size() != instance.objectives.size())
        throw ValueError("theorem1_simulate: objectives and p must align");
    if (trials < 2) throw ValueError("theorem1_simulate: need at least 2 trials");
    out.n_eff = distribution_neff(instance.p);
    const auto m = static_cast<std::int64_t>(instance.protected_set.size());
    out.a = std::sqrt(static_cast<double>(m) / out.n_eff);

    // Assumption 1: gradient bound at the evaluation point, every c.
    for (const auto& f : instance.objectives) {
        if (f.grad_norm(instance.theta) > instance.grad_bound + 1e-9) {
            out.rejection_reason = "gradient bound violated at the evaluation point";
            return out;
        }
    }
    if (instance.kappa <= 0.0) {
        out.rejection_reason = "kappa must be positive";
        return out;
    }
    std::set<std::int64_t> protected_set(instance.protected_set.begin(),
                                         instance.protected_set.end());
    for (const auto c : instance.protected_set)
        if (c < 0 || c >= n_comp) throw ValueError("theorem1_simulate: protected index out of range");

    const auto dim = static_cast<std::int64_t>(instance.theta.size());
    auto delta_for = [&](const QuadraticObjective& f, std::span<const double> u) {
        std::vector<double> moved(instance.theta.begin(), instance.theta.end());
        for (std::int64_t i = 0; i < dim; ++i) moved[static_cast<std::size_t>(i)] -= instance.eta * u[static_cast<std::size_t>(i)];
        return f.value(moved) - f.value(instance.theta);
    };

    // Assumption 2: measured tail condition Pr(Delta_c >= kappa) >= rho for
    // every unprotected composition, on an independent draw budget.
    {
        Rng rng(mix_seed(seed, 0x52484full));  // "RHO"
        std::vector<std::int64_t> tail_hits(static_cast<std::size_t>(n_comp), 0);
        for (std::int64_t d = 0; d < instance.rho_measure_draws; ++d) {
            const auto u = draw_direction(rng, dim, instance.tilt_direction, instance.tilt_sigma);
            for (std::int64_t c = 0; c < n_comp; ++c) {
                if (protected_set.contains(c)) continue;
                if (delta_for(instance.objectives[static_cast<std::size_t>(c)], u) >= instance.kappa)
                    ++tail_hits[static_cast<std::size_t>(c)];
            }
        }
        double rho = 1.0;
        bool any_unprotected = false;
        for (std::int64_t c = 0; c < n_comp; ++c) {
            if (protected_set.contains(c)) continue;
            any_unprotected = true;
            rho = std::min(rho, static_cast<double>(tail_hits[static_cast<std::size_t>(c)]) /
                                    static_cast<double>(instance.rho_measure_draws));
        }
        if (!any_unprotected) {
            out.rejection_reason = "no unprotected compositions";
            return out;
        }
        if (rho <= 0.0) {
            out.rejection_reason = "tail condition failed: measured rho = 0";
            return out;
        }
        out.rho = rho;
        const double draws = static_cast<double>(instance.rho_measure_draws);
        // Rule-of-three floor keeps the margin honest when rho measures 1.
        const double se = std::max(std::sqrt(rho * (1.0 - rho) / draws), 1.0 / draws);
        out.rho_conservative = std::max(0.0, rho - 3.0 * se);
    }

    out.assumptions_ok = true;
    out.rhs = theorem1_rhs(out.n_eff, m, out.rho, instance.kappa, instance.eta,
                           instance.grad_bound, instance.smoothness);
    out.rhs_conservative = theorem1_rhs(out.n_eff, m, out.rho_conservative, instance.kappa,
                                        instance.eta, instance.grad_bound, instance.smoothness);

    // Main comparison: E[F_r(theta+) - F_r(theta)] over update draws, with
    // the composition mixture taken exactly.
    Rng rng(mix_seed(seed, 0x4c4853ull));  // "LHS"
    std::vector<double> draws(static_cast<std::size_t>(trials));
    for (std::int64_t t = 0; t < trials; ++t) {
        const auto u = draw_direction(rng, dim, instance.tilt_direction, instance.tilt_sigma);
        double lhs = 0.0;
        for (std::int64_t c = 0; c < n_comp; ++c)
            lhs += instance.p[static_cast<std::size_t>(c)] *
                   delta_for(instance.objectives[static_cast<std::size_t>(c)], u);
        draws[static_cast<std::size_t>(t)] = lhs;
    }
    out.lhs_mean = vec_mean(draws);
    out.lhs_se = vec_standard_error(draws);
    out.lhs_lower_ci = out.lhs_mean - 1.96 * out.lhs_se;
    out.holds_within_ci = out.lhs_lower_ci >= out.rhs_conservative - 1e-12;
    return out;
}

StepBoundResult one_step_uniform_lower_bound(const QuadraticObjective& f,
                                             std::span<const double> theta, double eta,
                                             std::span<const double> u_hat, double g, double l) {
    const double un = norm2(u_hat);
    if (std::abs(un - 1.0) > 1e-9)
        throw ValueError("one_step_uniform_lower_bound: direction must be a unit vector");
    if (f.grad_norm(theta) > g + 1e-9)
        throw ValueError("one_step_uniform_lower_bound: gradient bound violated at theta");

    StepBoundResult out;
    out.bound = -eta * g - 0.5 * l * eta * eta;
    std::vector<double> moved(theta.begin(), theta.end());
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] -= eta * u_hat[i];
    out.actual = f.value(moved) - f.value(theta);
    if (out.actual < out.bound - 1e-9)
        throw NumericError("one_step_uniform_lower_bound: smoothness bound violated");
    return out;
}

TheoremInstance make_designed_instance(std::int64_t n_compositions, std::int64_t m,
                                       std::int64_t dim, double eta, std::uint64_t seed) {
    if (n_compositions < 2 || m < 0 || m >= n_compositions)
        throw ValueError("make_designed_instance: need 0 <= m < n_compositions >= 2");
    TheoremInstance inst;
    Rng rng(mix_seed(seed, 0x494e5354ull));  // "INST"

    std::vector<double> u0(static_cast<std::size_t>(dim));
    for (auto& v : u0) v = rng.normal();
    {
        const double n = norm2(u0);
        for (auto& v : u0) v /= n;
    }

    // Per-coordinate spread scaled by 1/sqrt(dim) so the angular scatter is
    // dimension-independent.
    const double spread = 0.35 / std::sqrt(static_cast<double>(dim));
    for (std::int64_t c = 0; c < n_compositions; ++c) {
        std::vector<double> star(static_cast<std::size_t>(dim));
        if (c < m) {
            // Protected targets sit orthogonal to the update, so their
            // one-step change stays ~ +eta^2/2 >= 0. (Targets improving
            // strongly would sit outside the bound's validity envelope:
            // the mixture can then dip below the stated right side.)
            for (auto& v : star) v = rng.normal();
            const double along = dot(star, u0);
            for (std::size_t i = 0; i < star.size(); ++i) star[i] -= along * u0[i];
        } else {
            // Unprotected targets face away from the parameter movement:
            // the step -eta*u increases their loss.
            for (std::size_t i = 0; i < star.size(); ++i)
                star[i] = u0[i] + spread * rng.normal();
        }
        const double n = norm2(star);
        for (auto& v : star) v /= n;  // grad norm at theta = 0 is exactly G = 1
        inst.objectives.push_back({std::move(star)});
    }

    inst.p.assign(static_cast<std::size_t>(n_compositions),
                  1.0 / static_cast<double>(n_compositions));
    for (std::int64_t c = 0; c < m; ++c) inst.protected_set.push_back(c);
    inst.theta.assign(static_cast<std::size_t>(dim), 0.0);
    inst.eta = eta;
    inst.grad_bound = 1.0;
    inst.smoothness = 1.0;
    // Tail event: u . theta_star >= 0.5, i.e. Delta >= eta/2 + eta^2/2.
    inst.kappa = 0.5 * eta + 0.5 * eta * eta;
    inst.tilt_direction = u0;
    inst.tilt_sigma = 0.3 / std::sqrt(static_cast<double>(dim));
    return inst;
}

}  // namespace mfl
