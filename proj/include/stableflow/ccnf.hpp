#pragma once

// Closed forms of the scalar stable conditional flow.
//
// State x = (z, tau) with z in R^d and a scalar pseudo-time tau. The
// conditional field toward a target x' = (z', tau') is the negative gradient of
// the quadratic potential H'(x | x') = 1/2 (x - x')^T A (x - x') with
// A = diag(lambda_z I, lambda_tau):
//
//   v'(x | x')      = (-lambda_z (z - z'), -lambda_tau (tau - tau'))
//   psi'(x, t | x') = (z' + e^{-lambda_z t} (z - z'), tau' + e^{-lambda_tau t} (tau - tau'))
//
// Eliminating t through the tau flow gives fields and interpolants that are
// functions of tau alone; they are written in terms of the interpolation
// weight  r(tau) = ((tau - tau1) / (tau0 - tau1))^(lambda_z / lambda_tau).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include "stableflow/diffkit.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/rng.hpp"

namespace stableflow {

inline const double kLn10 = std::numbers::ln10;

struct AugmentedState {
    Vector z;
    double tau = 0.0;

    Eigen::Index dim() const { return z.size(); }

    Vector stacked() const {
        Vector x(z.size() + 1);
        x.head(z.size()) = z;
        x[z.size()] = tau;
        return x;
    }

    static AugmentedState from_stacked(const Vector& x) {
        return {x.head(x.size() - 1), x[x.size() - 1]};
    }

    bool all_finite() const { return z.allFinite() && std::isfinite(tau); }
};

struct GaussianParams {
    Vector mean;
    Vector cov_diag;
};

/// Parameters of the semi-scalar stable conditional flow.
struct StableCcnfParams {
    double lambda_z = kLn10;
    double lambda_tau = kLn10;
    double tau0 = 0.0;
    double tau1 = 1.0;
    Vector z0_mean;
    Vector sigma0_diag;

    /// Standard-normal base in d dimensions with the default rates.
    static StableCcnfParams standard(Eigen::Index d) {
        StableCcnfParams p;
        p.z0_mean = Vector::Zero(d);
        p.sigma0_diag = Vector::Ones(d);
        return p;
    }

    Eigen::Index dim() const { return z0_mean.size(); }
    double rate_ratio() const { return lambda_z / lambda_tau; }

    void validate() const {
        if (!(lambda_z > 0.0) || !std::isfinite(lambda_z)) {
            throw ConfigError("lambda_z", "must be > 0 for A to be positive definite");
        }
        if (!(lambda_tau > 0.0) || !std::isfinite(lambda_tau)) {
            throw ConfigError("lambda_tau", "must be > 0 for A to be positive definite");
        }
        if (!std::isfinite(tau0) || !std::isfinite(tau1)) {
            throw ConfigError("tau0", "tau0 and tau1 must be finite");
        }
        if (tau0 == tau1) throw ConfigError("tau1", "must differ from tau0");
        if (sigma0_diag.size() != z0_mean.size()) {
            throw ConfigError("sigma0_diag", "length must match z0_mean");
        }
        if (!z0_mean.allFinite()) throw ConfigError("z0_mean", "entries must be finite");
        for (Eigen::Index i = 0; i < sigma0_diag.size(); ++i) {
            if (!(sigma0_diag[i] >= 0.0) || !std::isfinite(sigma0_diag[i])) {
                throw ConfigError("sigma0_diag", "entries must be finite and >= 0");
            }
        }
    }
};

namespace detail {

inline void require_dim(const Vector& v, Eigen::Index d, const char* what) {
    if (v.size() != d) {
        throw DimensionError(std::string(what) + " has dimension " + std::to_string(v.size()) +
                             ", expected " + std::to_string(d));
    }
}

}  // namespace detail

/// (tau - tau1) / (tau0 - tau1): 1 at tau0, 0 at tau1. Values a few ulps
/// outside [0, 1] are clamped; anything further out is a domain error.
inline double tau_fraction(const StableCcnfParams& p, double tau) {
    const double frac = (tau - p.tau1) / (p.tau0 - p.tau1);
    constexpr double slack = 64.0 * std::numeric_limits<double>::epsilon();
    if (!(frac >= -slack && frac <= 1.0 + slack)) {
        throw DomainError("tau = " + std::to_string(tau) + " outside the interval between tau0 and tau1");
    }
    return std::clamp(frac, 0.0, 1.0);
}

/// frac^exponent with frac in [0, 1]; 0 maps to 0.
inline double fraction_power(double frac, double exponent) {
    if (frac == 0.0) return 0.0;
    if (exponent == 1.0) return frac;
    return std::exp(exponent * std::log(frac));
}

/// Weight of the starting point in the tau-parameterized interpolant.
inline double interpolation_weight(const StableCcnfParams& p, double tau) {
    return fraction_power(tau_fraction(p, tau), p.rate_ratio());
}

/// H'(x | x') = 1/2 (x - x')^T A (x - x').
inline double quadratic_potential(const StableCcnfParams& p, const AugmentedState& x,
                                  const AugmentedState& target) {
    detail::require_dim(target.z, x.dim(), "target z");
    const double dt = x.tau - target.tau;
    return 0.5 * (p.lambda_z * (x.z - target.z).squaredNorm() + p.lambda_tau * dt * dt);
}

inline Vector quadratic_potential_grad(const StableCcnfParams& p, const AugmentedState& x,
                                       const AugmentedState& target) {
    detail::require_dim(target.z, x.dim(), "target z");
    Vector g(x.dim() + 1);
    g.head(x.dim()) = p.lambda_z * (x.z - target.z);
    g[x.dim()] = p.lambda_tau * (x.tau - target.tau);
    return g;
}

/// Conditional field v'(x | x') = -A (x - x').
inline Vector ccnf_vf(const StableCcnfParams& p, const AugmentedState& x,
                      const AugmentedState& target) {
    detail::require_dim(target.z, x.dim(), "target z");
    Vector v(x.dim() + 1);
    v.head(x.dim()) = -p.lambda_z * (x.z - target.z);
    v[x.dim()] = -p.lambda_tau * (x.tau - target.tau);
    return v;
}

/// Conditional flow map psi'(x, t | x').
inline AugmentedState ccnf_flow(const StableCcnfParams& p, const AugmentedState& x, double t,
                                const AugmentedState& target) {
    if (!(t >= 0.0)) throw DomainError("flow time must be >= 0");
    detail::require_dim(target.z, x.dim(), "target z");
    if (t == 0.0) return x;
    AugmentedState out;
    out.z = target.z + std::exp(-p.lambda_z * t) * (x.z - target.z);
    out.tau = target.tau + std::exp(-p.lambda_tau * t) * (x.tau - target.tau);
    return out;
}

/// tau(t) = tau1 + e^{-lambda_tau t} (tau0 - tau1).
inline double tau_flow(const StableCcnfParams& p, double t) {
    if (!(t >= 0.0)) throw DomainError("flow time must be >= 0");
    return p.tau1 + std::exp(-p.lambda_tau * t) * (p.tau0 - p.tau1);
}

/// Time at which the tau flow started at tau0 reaches `tau`.
inline double tau_flow_inverse(const StableCcnfParams& p, double tau) {
    if (tau == p.tau1) throw DomainError("tau = tau1 is reached only as t -> infinity");
    const double frac = tau_fraction(p, tau);
    if (frac == 0.0) throw DomainError("tau within rounding of tau1 is reached only as t -> infinity");
    return -std::log(frac) / p.lambda_tau;
}

/// Mean and diagonal covariance of the z-marginal of the conditional
/// interpolant at pseudo-time tau for target z'.
inline GaussianParams interpolant_params(const StableCcnfParams& p, double tau,
                                         const Vector& z_target) {
    detail::require_dim(z_target, p.dim(), "z_target");
    const double frac = tau_fraction(p, tau);
    const double w = fraction_power(frac, p.rate_ratio());
    const double w2 = fraction_power(frac, 2.0 * p.rate_ratio());
    GaussianParams g;
    g.mean = z_target + w * (p.z0_mean - z_target);
    g.cov_diag = w2 * p.sigma0_diag;
    return g;
}

inline Vector sample_interpolant(const StableCcnfParams& p, double tau, const Vector& z_target,
                                 Rng& rng) {
    const GaussianParams g = interpolant_params(p, tau, z_target);
    Vector z = g.mean;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double eps = rng.normal();
        if (g.cov_diag[i] > 0.0) z[i] += std::sqrt(g.cov_diag[i]) * eps;
    }
    return z;
}

/// Straight-line conditional path psi_OT = (1 - (1 - sigma_min) t) x + t x1.
inline Vector ot_flow(const Vector& x, double t, const Vector& x1, double sigma_min) {
    detail::require_dim(x1, x.size(), "x1");
    return (1.0 - (1.0 - sigma_min) * t) * x + t * x1;
}

/// v_OT = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t), evaluated at state x.
inline Vector ot_vf(const Vector& x, double t, const Vector& x1, double sigma_min) {
    detail::require_dim(x1, x.size(), "x1");
    const double denom = 1.0 - (1.0 - sigma_min) * t;
    if (!(denom > 0.0)) throw DomainError("OT field is singular: 1 - (1 - sigma_min) t <= 0");
    return (x1 - (1.0 - sigma_min) * x) / denom;
}

/// Conditional z-flow written as a function of tau, started from z at tau0.
inline Vector reparam_stable_flow(const StableCcnfParams& p, const Vector& z, double tau,
                                  const Vector& z_target) {
    detail::require_dim(z_target, z.size(), "z_target");
    return z_target + interpolation_weight(p, tau) * (z - z_target);
}

/// dz/dtau along the conditional flow: v'_z / v'_tau.
inline Vector reparam_stable_vf(const StableCcnfParams& p, const Vector& z, double tau,
                                const Vector& z_target) {
    detail::require_dim(z_target, z.size(), "z_target");
    const double denom = p.lambda_tau * (p.tau1 - tau);
    if (denom == 0.0) throw DomainError("tau-parameterized field is singular at tau = tau1");
    return p.lambda_z * (z_target - z) / denom;
}

struct Rates {
    double lambda_tau;
    double lambda_z;
};

/// Smallest rates for which the conditional flow is within eps_tau of tau1 and
/// eps_z of z1 at time T: lambda = -ln(eps / distance) / T.
inline Rates min_rates(double T, double eps_tau, double eps_z, double tau_distance,
                       double z_distance) {
    if (!(T > 0.0)) throw DomainError("T must be > 0");
    if (!(eps_tau > 0.0) || !(eps_z > 0.0)) throw DomainError("tolerances must be > 0");
    if (!(eps_tau < tau_distance)) {
        throw DomainError("eps_tau >= |tau0 - tau1|: no decay needed, and a zero rate is not positive definite");
    }
    if (!(eps_z < z_distance)) {
        throw DomainError("eps_z >= ||z0 - z1||: no decay needed, and a zero rate is not positive definite");
    }
    return {-std::log(eps_tau / tau_distance) / T, -std::log(eps_z / z_distance) / T};
}

}  // namespace stableflow
