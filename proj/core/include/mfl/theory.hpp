#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mfl {

// Composition distribution within a route plus a protection budget m.
struct MixingInstance {
    std::vector<double> p;
    std::int64_t m = 1;
};

struct Lemma1Result {
    double worst_actual = 0.0;  // min over |S| <= m of Pr[C not in S]
    double bound = 0.0;         // 1 - sqrt(m / N_eff)
    double n_eff = 1.0;
    bool holds = false;
};

// The minimizing S is exactly the m largest masses, so the worst case is
// computed in closed form rather than by subset enumeration.
Lemma1Result lemma1_check(const MixingInstance& instance);

// F(theta) = 0.5 * |theta - theta_star|^2; L-smooth with L = 1 and
// gradient norm |theta - theta_star| at the evaluation point.
struct QuadraticObjective {
    std::vector<double> theta_star;
    double value(std::span<const double> theta) const;
    double grad_norm(std::span<const double> theta) const;
};

struct TheoremInstance {
    std::vector<QuadraticObjective> objectives;  // one per composition
    std::vector<double> p;                       // composition distribution
    std::vector<std::int64_t> protected_set;     // S, |S| <= m
    std::vector<double> theta;                   // evaluation point
    double eta = 0.1;
    double grad_bound = 1.0;   // G, verified at theta
    double smoothness = 1.0;   // L (exact for quadratics)
    double kappa = 0.0;        // per-composition rise threshold
    std::vector<double> tilt_direction;  // empty -> isotropic directions
    double tilt_sigma = 0.3;
    std::int64_t rho_measure_draws = 10000;
};

struct TheoremResult {
    bool assumptions_ok = false;
    std::string rejection_reason;
    double n_eff = 0.0;
    double a = 0.0;        // sqrt(m / N_eff)
    double rho = 0.0;      // measured min tail probability over c not in S
    double rho_conservative = 0.0;
    double kappa = 0.0;
    double rhs = 0.0;               // at measured rho
    double rhs_conservative = 0.0;  // at rho_conservative
    double lhs_mean = 0.0;
    double lhs_se = 0.0;
    double lhs_lower_ci = 0.0;  // 95%
    bool holds_within_ci = false;
    std::int64_t trials = 0;
};

// Monte-Carlo check of the susceptibility lower bound. The tail condition
// (rho, kappa) is measured on its own draw budget before the main
// comparison; instances whose assumptions fail are rejected, not counted
// as violations.
TheoremResult theorem1_simulate(const TheoremInstance& instance, std::int64_t trials,
                                std::uint64_t seed);

// (1 - sqrt(m/N_eff))_+ * (rho*kappa - (1-rho)*(eta*G + L*eta^2/2)).
double theorem1_rhs(double n_eff, std::int64_t m, double rho, double kappa, double eta, double g,
                    double l);

struct StepBoundResult {
    double bound = 0.0;   // -eta*G - L*eta^2/2
    double actual = 0.0;  // F(theta - eta*u) - F(theta)
};

// Verifies the one-step smoothness bound; NumericError if violated
// (which would mean the instance breaks its own preconditions).
StepBoundResult one_step_uniform_lower_bound(const QuadraticObjective& f,
                                             std::span<const double> theta, double eta,
                                             std::span<const double> u_hat, double g, double l);

// Quadratic family with targets on the unit sphere: protected compositions
// sit opposite the update direction, the rest face it. Uniform p, so
// N_eff equals the composition count.
TheoremInstance make_designed_instance(std::int64_t n_compositions, std::int64_t m,
                                       std::int64_t dim, double eta, std::uint64_t seed);

}  // namespace mfl
