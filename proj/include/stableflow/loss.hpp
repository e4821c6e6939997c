#pragma once

// Flow-matching losses and the exact marginal field of an empirical target.
//
// Stable losses regress the gradient field v = -grad H onto the conditional
// target (-lambda_z (z - z'), -lambda_tau (tau - tau1)) with
//   tau ~ U[tau0, tau1], z' ~ data, z ~ N(mu(tau | z'), Sigma(tau)).
// The normalized variant divides each term by |v'_tau| = lambda_tau |tau1 - tau|
// and truncates tau to [tau0, tau1 - eps].
//
// The OT baseline regresses a free field v(z, t) onto x1 - (1 - sigma_min) x0
// along the straight path (1 - (1 - sigma_min) t) x0 + t x1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "stableflow/ccnf.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/model.hpp"
#include "stableflow/parallel.hpp"
#include "stableflow/rng.hpp"

namespace stableflow {

enum class LossKind { cfm_ot, auto_normalized, auto_unnormalized };

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::cfm_ot: return "cfm_ot";
        case LossKind::auto_normalized: return "auto";
        case LossKind::auto_unnormalized: return "auto_unnormalized";
    }
    return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "cfm_ot") return LossKind::cfm_ot;
    if (s == "auto") return LossKind::auto_normalized;
    if (s == "auto_unnormalized") return LossKind::auto_unnormalized;
    throw ConfigError("loss.loss_kind", "expected one of cfm_ot, auto, auto_unnormalized; got '" + s + "'");
}

struct LossBatchSpec {
    int batch_size = 512;
    LossKind loss_kind = LossKind::auto_unnormalized;
    double sigma_min = 0.0;
    double eps_tau_guard = 1e-3;

    void validate() const {
        if (batch_size < 1) throw ConfigError("loss.batch_size", "must be >= 1");
        if (!(sigma_min >= 0.0 && sigma_min < 1.0)) throw ConfigError("loss.sigma_min", "must lie in [0, 1)");
        if (!(eps_tau_guard >= 0.0)) throw ConfigError("loss.eps_tau_guard", "must be >= 0");
    }

    void validate(const StableCcnfParams& p) const {
        validate();
        if (!(eps_tau_guard < std::abs(p.tau1 - p.tau0))) {
            throw ConfigError("loss.eps_tau_guard", "must be smaller than |tau1 - tau0|");
        }
        if (loss_kind == LossKind::auto_normalized && eps_tau_guard == 0.0) {
            throw ConfigError("loss.eps_tau_guard",
                              "normalized loss is undefined at tau = tau1; eps_tau_guard must be > 0");
        }
    }
};

/// Empirical target measure: uniform over the columns of `points` (d x n).
struct EmpiricalTarget {
    Matrix points;

    Eigen::Index dim() const { return points.rows(); }
    Eigen::Index size() const { return points.cols(); }

    void validate() const {
        if (points.cols() == 0 || points.rows() == 0) throw ConfigError("data", "empirical target is empty");
        if (!points.allFinite()) throw ConfigError("data", "empirical target has non-finite entries");
    }

    static EmpiricalTarget from_points(const std::vector<Vector>& pts) {
        EmpiricalTarget t;
        if (pts.empty()) return t;
        t.points.resize(pts.front().size(), static_cast<Eigen::Index>(pts.size()));
        for (std::size_t i = 0; i < pts.size(); ++i) t.points.col(static_cast<Eigen::Index>(i)) = pts[i];
        return t;
    }
};

/// Draws behind one loss evaluation. For the stable losses `time` holds tau
/// and `states` the stacked (z; tau) inputs; for the OT loss `time` holds t,
/// `states` the network inputs and `base` the x0 draws.
struct LossSamples {
    RowVector time;
    std::vector<Eigen::Index> target_index;
    Matrix states;
    Matrix targets;
    RowVector weights;
    Matrix base;
};

struct LossResult {
    double loss = 0.0;
    LayerParams grad;
    RowVector values;
    LossSamples samples;
};

/// Columns per gradient chunk. Chunks are reduced in index order.
inline constexpr Eigen::Index kGradChunk = 128;

namespace detail {

inline void check_finite_terms(const RowVector& values, const LossSamples& s) {
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream os;
            os << "non-finite loss term at sample " << i << " (time " << s.time[i] << ", state ["
               << s.states.col(i).transpose() << "])";
            throw NumericFault(os.str());
        }
    }
}

template <class ChunkFn>
LossAndGrad chunked_sum(Eigen::Index batch, ChunkFn&& chunk_fn) {
    const Eigen::Index n_chunks = (batch + kGradChunk - 1) / kGradChunk;
    std::vector<LossAndGrad> parts(static_cast<std::size_t>(n_chunks));
    parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t c) {
        const Eigen::Index begin = static_cast<Eigen::Index>(c) * kGradChunk;
        const Eigen::Index len = std::min(kGradChunk, batch - begin);
        parts[c] = chunk_fn(begin, len);
    });
    LossAndGrad out;
    out.values.resize(batch);
    for (Eigen::Index c = 0; c < n_chunks; ++c) {
        auto& part = parts[static_cast<std::size_t>(c)];
        out.values.segment(c * kGradChunk, part.values.size()) = part.values;
        if (c == 0) {
            out.grad = std::move(part.grad);
        } else {
            add_into(out.grad, part.grad);
        }
    }
    // Plain left-to-right sum so the loss can be recomputed from the terms.
    out.loss = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) out.loss += out.values[i];
    return out;
}

}  // namespace detail

/// Weighted gradient-field regression: sum_i w_i || -grad H(x_i) - target_i ||^2
/// and its parameter gradient.
template <GradientPotential M>
LossAndGrad gradient_regression_sum(const M& m, const Matrix& states, const Matrix& targets,
                                    const RowVector& weights) {
    return detail::chunked_sum(states.cols(), [&](Eigen::Index begin, Eigen::Index len) {
        const auto tgt = targets.middleCols(begin, len);
        const auto w = weights.segment(begin, len);
        LossEvaluator eval = [&](const Matrix&, const Matrix& grad_h) {
            const Matrix residual = -grad_h - tgt;
            LossPartials p;
            p.values = (residual.array().square().colwise().sum() * w.array()).matrix();
            p.d_input_grad = -2.0 * (residual.array().rowwise() * w.array()).matrix();
            return p;
        };
        return potential_loss_grad_sum(m, states.middleCols(begin, len), eval);
    });
}

namespace detail {

template <GradientPotential M>
LossResult stable_loss(const M& m, const StableCcnfParams& p, const EmpiricalTarget& data,
                       const LossBatchSpec& spec, Rng& rng, bool normalized) {
    p.validate();
    spec.validate(p);
    data.validate();
    const Eigen::Index d = p.dim();
    if (data.dim() != d) throw DimensionError("data dimension does not match z0_mean");
    if (state_dim(m) != d + 1) throw DimensionError("potential input must be (z, tau)");

    const Eigen::Index batch = spec.batch_size;
    const double direction = p.tau1 > p.tau0 ? 1.0 : -1.0;
    const double tau_hi = normalized ? p.tau1 - direction * spec.eps_tau_guard : p.tau1;

    LossSamples s;
    s.time.resize(batch);
    s.target_index.resize(static_cast<std::size_t>(batch));
    s.states.resize(d + 1, batch);
    s.targets.resize(d + 1, batch);
    s.weights.resize(batch);
    for (Eigen::Index i = 0; i < batch; ++i) {
        const double tau = p.tau0 + (tau_hi - p.tau0) * rng.uniform_closed();
        const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(data.size())));
        const Vector z_target = data.points.col(j);
        const Vector z = sample_interpolant(p, tau, z_target, rng);
        s.time[i] = tau;
        s.target_index[static_cast<std::size_t>(i)] = j;
        s.states.col(i).head(d) = z;
        s.states(d, i) = tau;
        s.targets.col(i).head(d) = -p.lambda_z * (z - z_target);
        s.targets(d, i) = -p.lambda_tau * (tau - p.tau1);
        s.weights[i] = normalized ? 1.0 / std::abs(p.lambda_tau * (p.tau1 - tau)) : 1.0;
    }

    LossAndGrad sum = gradient_regression_sum(m, s.states, s.targets, s.weights);
    detail::check_finite_terms(sum.values, s);
    LossResult out;
    const double inv = 1.0 / static_cast<double>(batch);
    out.loss = sum.loss * inv;
    out.grad = std::move(sum.grad);
    scale(out.grad, inv);
    out.values = std::move(sum.values);
    out.samples = std::move(s);
    return out;
}

}  // namespace detail

/// Unnormalized autonomous loss; tau is drawn from the closed interval, so the
/// stable endpoint tau1 is part of the regression.
template <GradientPotential M>
LossResult auto_cfm_loss_unnormalized(const M& m, const StableCcnfParams& p,
                                      const EmpiricalTarget& data, const LossBatchSpec& spec,
                                      Rng& rng) {
    return detail::stable_loss(m, p, data, spec, rng, false);
}

/// Autonomous loss with each term divided by lambda_tau |tau1 - tau|.
template <GradientPotential M>
LossResult auto_cfm_loss(const M& m, const StableCcnfParams& p, const EmpiricalTarget& data,
                         const LossBatchSpec& spec, Rng& rng) {
    return detail::stable_loss(m, p, data, spec, rng, true);
}

inline Matrix field_inputs(const FieldNet& m, const Matrix& z, const RowVector& t) {
    if (!m.time_input) return z;
    Matrix in(z.rows() + 1, z.cols());
    in.topRows(z.rows()) = z;
    in.row(z.rows()) = t;
    return in;
}

/// Conditional OT flow matching loss for the baseline field network.
inline LossResult cfm_ot_loss(const FieldNet& m, const EmpiricalTarget& data,
                              const LossBatchSpec& spec, Rng& rng) {
    spec.validate();
    data.validate();
    const Eigen::Index d = data.dim();
    if (m.dim() != d) throw DimensionError("field network dimension does not match data");
    const Eigen::Index batch = spec.batch_size;
    const double shrink = 1.0 - spec.sigma_min;

    LossSamples s;
    s.time.resize(batch);
    s.target_index.resize(static_cast<std::size_t>(batch));
    s.base.resize(d, batch);
    s.targets.resize(d, batch);
    Matrix z(d, batch);
    for (Eigen::Index i = 0; i < batch; ++i) {
        const double t = rng.uniform();
        Vector x0(d);
        for (Eigen::Index k = 0; k < d; ++k) x0[k] = rng.normal();
        const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(data.size())));
        const Vector x1 = data.points.col(j);
        s.time[i] = t;
        s.target_index[static_cast<std::size_t>(i)] = j;
        s.base.col(i) = x0;
        z.col(i) = ot_flow(x0, t, x1, spec.sigma_min);
        s.targets.col(i) = x1 - shrink * x0;
    }
    s.states = field_inputs(m, z, s.time);
    s.weights = RowVector::Ones(batch);

    LossAndGrad sum = detail::chunked_sum(batch, [&](Eigen::Index begin, Eigen::Index len) {
        const auto tgt = s.targets.middleCols(begin, len);
        LossEvaluator eval = [&](const Matrix& out, const Matrix&) {
            const Matrix residual = out - tgt;
            LossPartials p;
            p.values = residual.array().square().colwise().sum().matrix();
            p.d_output = 2.0 * residual;
            return p;
        };
        return output_param_grad_sum(Tape::record(m.net, s.states.middleCols(begin, len),
                                                  TapeMode::first_order),
                                     eval);
    });
    detail::check_finite_terms(sum.values, s);
    LossResult out;
    const double inv = 1.0 / static_cast<double>(batch);
    out.loss = sum.loss * inv;
    out.grad = std::move(sum.grad);
    scale(out.grad, inv);
    out.values = std::move(sum.values);
    out.samples = std::move(s);
    return out;
}

struct MarginalField {
    Vector velocity;  // (d + 1)
    Vector weights;   // posterior weight of each data point
};

/// Exact autonomous marginal field of the empirical target: the
/// posterior-weighted average of the conditional fields toward (z'_i, tau1),
/// with weights proportional to N(z; mu(tau | z'_i), Sigma(tau)).
inline MarginalField exact_marginal_vf(const StableCcnfParams& p, const EmpiricalTarget& data,
                                       const Vector& z, double tau) {
    data.validate();
    const Eigen::Index d = p.dim();
    detail::require_dim(z, d, "z");
    if (data.dim() != d) throw DimensionError("data dimension does not match z0_mean");
    if (tau == p.tau1) throw DomainError("marginal field is degenerate at tau = tau1 (zero covariance)");
    const double frac = tau_fraction(p, tau);
    const double w = fraction_power(frac, p.rate_ratio());
    const double w2 = fraction_power(frac, 2.0 * p.rate_ratio());
    const Vector cov = w2 * p.sigma0_diag;
    for (Eigen::Index k = 0; k < d; ++k) {
        if (!(cov[k] > 0.0)) throw DomainError("marginal field is degenerate: interpolant covariance is zero");
    }
    const Vector inv_cov = cov.cwiseInverse();

    const Eigen::Index n = data.size();
    Vector log_w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector mean = data.points.col(i) + w * (p.z0_mean - data.points.col(i));
        log_w[i] = -0.5 * (z - mean).cwiseAbs2().dot(inv_cov);
    }
    const double max_log = log_w.maxCoeff();
    if (!std::isfinite(max_log)) throw NumericFault("marginal field weights are not finite");
    Vector weights = (log_w.array() - max_log).exp().matrix();
    const double total = weights.sum();
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericFault("marginal field weights underflowed");
    weights /= total;

    MarginalField out;
    out.velocity.resize(d + 1);
    out.velocity.head(d) = -p.lambda_z * (z - data.points * weights);
    out.velocity[d] = -p.lambda_tau * (tau - p.tau1);
    out.weights = std::move(weights);
    return out;
}

/// The two sides of the loss-gradient equivalence on a deterministic
/// conditional path (Sigma0 = 0, one target point): the time integral of the
/// regression error along t in [0, T], and the same integral in tau with the
/// 1 / |v'_tau| factor, T being the time at which tau reaches tau1 - eps.
struct GradientPair {
    double loss_time = 0.0;
    double loss_tau = 0.0;
    LayerParams grad_time;
    LayerParams grad_tau;
    double max_rel_err = 0.0;
};

namespace detail {

inline double max_rel_discrepancy(const LayerParams& a, const LayerParams& b) {
    const Vector fa = flatten(a);
    const Vector fb = flatten(b);
    const double scale = std::max(fa.cwiseAbs().maxCoeff(), fb.cwiseAbs().maxCoeff());
    const double diff = (fa - fb).cwiseAbs().maxCoeff();
    if (scale == 0.0) return diff;
    return diff / scale;
}

}  // namespace detail

/// Trapezoid quadrature of both sides. The t-grid is uniform; the tau-grid is
/// geometrically graded toward tau1, where the 1 / |v'_tau| factor peaks.
template <GradientPotential M>
GradientPair quadrature_gradients(const M& m, const StableCcnfParams& p_in, const Vector& z_single,
                                  int quadrature_n, double eps) {
    if (quadrature_n < 64) throw ConfigError("quadrature_n", "must be >= 64");
    StableCcnfParams p = p_in;
    p.sigma0_diag = Vector::Zero(p.dim());
    p.validate();
    detail::require_dim(z_single, p.dim(), "z_single");
    const double span = std::abs(p.tau1 - p.tau0);
    if (!(eps > 0.0 && eps < span)) throw ConfigError("eps", "must lie in (0, |tau1 - tau0|)");

    const Eigen::Index d = p.dim();
    const Eigen::Index n_nodes = quadrature_n + 1;
    const AugmentedState start{p.z0_mean, p.tau0};
    const AugmentedState target{z_single, p.tau1};
    const double direction = p.tau1 > p.tau0 ? 1.0 : -1.0;
    const double horizon = tau_flow_inverse(p, p.tau1 - direction * eps);

    Matrix states_t(d + 1, n_nodes), targets_t(d + 1, n_nodes);
    RowVector weights_t(n_nodes);
    const double h = horizon / quadrature_n;
    for (Eigen::Index i = 0; i < n_nodes; ++i) {
        const double t = i == quadrature_n ? horizon : h * static_cast<double>(i);
        const AugmentedState x = ccnf_flow(p, start, t, target);
        states_t.col(i) = x.stacked();
        targets_t.col(i) = ccnf_vf(p, x, target);
        weights_t[i] = (i == 0 || i == quadrature_n) ? 0.5 * h : h;
    }

    Matrix states_tau(d + 1, n_nodes), targets_tau(d + 1, n_nodes);
    RowVector weights_tau(n_nodes);
    std::vector<double> taus(static_cast<std::size_t>(n_nodes));
    const double end_frac = eps / span;
    for (Eigen::Index j = 0; j < n_nodes; ++j) {
        const double frac = std::pow(end_frac, static_cast<double>(j) / quadrature_n);
        taus[static_cast<std::size_t>(j)] = j == 0 ? p.tau0 : p.tau1 + frac * (p.tau0 - p.tau1);
    }
    taus.back() = p.tau1 - direction * eps;
    for (Eigen::Index j = 0; j < n_nodes; ++j) {
        const double tau = taus[static_cast<std::size_t>(j)];
        const AugmentedState x{reparam_stable_flow(p, p.z0_mean, tau, z_single), tau};
        states_tau.col(j) = x.stacked();
        targets_tau.col(j) = ccnf_vf(p, x, target);
        const double left = j == 0 ? tau : taus[static_cast<std::size_t>(j - 1)];
        const double right = j + 1 == n_nodes ? tau : taus[static_cast<std::size_t>(j + 1)];
        weights_tau[j] = 0.5 * std::abs(right - left) / std::abs(p.lambda_tau * (p.tau1 - tau));
    }

    LossAndGrad a = gradient_regression_sum(m, states_t, targets_t, weights_t);
    LossAndGrad b = gradient_regression_sum(m, states_tau, targets_tau, weights_tau);
    GradientPair out;
    out.loss_time = a.loss;
    out.loss_tau = b.loss;
    out.grad_time = std::move(a.grad);
    out.grad_tau = std::move(b.grad);
    out.max_rel_err = detail::max_rel_discrepancy(out.grad_time, out.grad_tau);
    return out;
}

struct GradEquivalenceReport {
    std::string check = "grad_equivalence";
    double max_rel_err = 0.0;
    double max_rel_err_refined = 0.0;  // at 2 * quadrature_n
    double loss_time = 0.0;
    double loss_tau = 0.0;
    int quadrature_n = 0;
    double eps = 0.0;
    double tolerance = 1e-3;
    bool converging = false;
    bool pass = false;
};

/// Checks that the time-parameterized and tau-parameterized losses have the
/// same parameter gradient on a small randomly initialized potential network.
inline GradEquivalenceReport grad_equivalence_check(const StableCcnfParams& p, const Vector& z_single,
                                                    int quadrature_n, std::uint64_t net_seed,
                                                    double eps = 1e-3, int hidden_layers = 2,
                                                    int hidden_width = 8, double tolerance = 1e-3) {
    const PotentialNet net =
        init_potential(net_seed, static_cast<int>(p.dim()), hidden_layers, hidden_width);
    const GradientPair coarse = quadrature_gradients(net, p, z_single, quadrature_n, eps);
    const GradientPair fine = quadrature_gradients(net, p, z_single, 2 * quadrature_n, eps);
    GradEquivalenceReport r;
    r.max_rel_err = coarse.max_rel_err;
    r.max_rel_err_refined = fine.max_rel_err;
    r.loss_time = coarse.loss_time;
    r.loss_tau = coarse.loss_tau;
    r.quadrature_n = quadrature_n;
    r.eps = eps;
    r.tolerance = tolerance;
    r.converging = fine.max_rel_err < coarse.max_rel_err;
    r.pass = r.max_rel_err < tolerance && r.converging;
    return r;
}

}  // namespace stableflow
