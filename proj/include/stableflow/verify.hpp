#pragma once

// Property suites behind `stableflow verify`. Every check runs on fixed seeds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stableflow/ccnf.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/loss.hpp"
#include "stableflow/model.hpp"
#include "stableflow/rng.hpp"
#include "stableflow/serialization.hpp"

namespace stableflow {

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;      // measured quantity
    double tolerance = 0.0;  // threshold it is compared against
    std::string detail;
    double seconds = 0.0;
};

struct VerifyReport {
    std::string suite;
    std::vector<CheckResult> checks;

    bool pass() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
    }

    std::vector<std::string> failing() const {
        std::vector<std::string> out;
        for (const auto& c : checks) {
            if (!c.pass) out.push_back(c.name);
        }
        return out;
    }
};

inline Json to_json(const CheckResult& c) {
    return Json{{"check", c.name},  {"pass", c.pass},     {"value", c.value},
                {"tolerance", c.tolerance}, {"detail", c.detail}, {"seconds", c.seconds}};
}

inline Json to_json(const VerifyReport& r) {
    Json checks = Json::array();
    for (const auto& c : r.checks) checks.push_back(to_json(c));
    return Json{{"suite", r.suite}, {"pass", r.pass()}, {"failing", r.failing()}, {"checks", checks}};
}

namespace verify {

// value <= tolerance passes; exceptions become failures carrying the message.
inline CheckResult run_check(const std::string& name, double tolerance,
                             const std::function<double(std::string&)>& body) {
    CheckResult c;
    c.name = name;
    c.tolerance = tolerance;
    const auto start = std::chrono::steady_clock::now();
    try {
        c.value = body(c.detail);
        c.pass = std::isfinite(c.value) && c.value <= tolerance;
    } catch (const std::exception& e) {
        c.pass = false;
        c.value = std::numeric_limits<double>::quiet_NaN();
        c.detail = e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return c;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Vector& a, const Vector& b, double floor = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i], floor));
    return worst;
}

/// Rates must be positive for A to be positive definite.
inline CheckResult rate_positivity(const StableCcnfParams& p) {
    return run_check("rate_positivity", 0.0, [&](std::string& detail) {
        detail = "lambda_z = " + std::to_string(p.lambda_z) + ", lambda_tau = " + std::to_string(p.lambda_tau);
        return (p.lambda_z > 0.0 && p.lambda_tau > 0.0) ? 0.0 : 1.0;
    });
}

/// Max |stable - OT| for flow and field over a 100 x 100 (z, tau) grid.
inline CheckResult ot_equivalence() {
    return run_check("ot_equivalence", 1e-12, [](std::string& detail) {
        StableCcnfParams p = StableCcnfParams::standard(1);
        double worst = 0.0;
        const Vector z_target = Vector::Constant(1, 0.7);
        for (int i = 0; i < 100; ++i) {
            const Vector z = Vector::Constant(1, -3.0 + 6.0 * i / 99.0);
            for (int j = 0; j < 100; ++j) {
                const double tau = 0.99 * j / 99.0;
                worst = std::max(worst, (reparam_stable_flow(p, z, tau, z_target) - ot_flow(z, tau, z_target, 0.0))
                                            .cwiseAbs()
                                            .maxCoeff());
                worst = std::max(worst, (reparam_stable_vf(p, z, tau, z_target) - ot_vf(z, tau, z_target, 0.0))
                                            .cwiseAbs()
                                            .maxCoeff());
            }
        }
        detail = "lambda_z = lambda_tau, tau in [0, 0.99], z in [-3, 3]";
        return worst;
    });
}

inline CheckResult tau_bijection() {
    return run_check("tau_bijection", 1e-9, [](std::string& detail) {
        const StableCcnfParams p = StableCcnfParams::standard(1);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
            const double t = 5.0 * i / 999.0;
            worst = std::max(worst, std::abs(tau_flow_inverse(p, tau_flow(p, t)) - t));
            const double tau = p.tau0 + (p.tau1 - p.tau0) * (i + 0.5) / 1000.0;
            worst = std::max(worst, std::abs(tau_flow(p, tau_flow_inverse(p, tau)) - tau));
        }
        detail = "1000 points each way, t in [0, 5]";
        return worst;
    });
}

inline CheckResult convergence_rate() {
    return run_check("convergence_rate", 1e-6, [](std::string& detail) {
        const Rates r = min_rates(1.0, 0.1, 0.1, 1.0, 1.0);
        StableCcnfParams p = StableCcnfParams::standard(1);
        p.lambda_tau = r.lambda_tau;
        const PointField tau_field = [&](double, const Vector& x) {
            return Vector::Constant(1, -p.lambda_tau * (x[0] - p.tau1));
        };
        const Trajectory tr = integrate(tau_field, Vector::Constant(1, p.tau0), 0.0, 1.0, 1e-3, Method::rk4);
        const double gap = std::abs(tr.states.back()[0] - p.tau1);
        const double rate_err = std::abs(r.lambda_tau - kLn10);
        detail = "lambda_tau error " + std::to_string(rate_err) + ", |tau(T) - tau1| = " + std::to_string(gap);
        if (rate_err > 1e-12) return 1.0;
        return std::abs(gap - 0.1);
    });
}

inline CheckResult interpolant_ordering() {
    return run_check("interpolant_ordering", 1e-12, [](std::string& detail) {
        // A larger rate ratio shrinks r^ratio, so the mean sits nearer the
        // target: distance to z' must be non-increasing in the ratio.
        StableCcnfParams p = StableCcnfParams::standard(1);
        const Vector z_target = Vector::Constant(1, 1.0);
        double worst = 0.0;
        for (int j = 1; j < 100; ++j) {
            const double tau = j / 100.0;
            double prev = -1.0;
            for (double ratio : {1.0, 2.0, 3.0, 4.0}) {
                p.lambda_z = ratio * p.lambda_tau;
                const double dist = std::abs(interpolant_params(p, tau, z_target).mean[0] - z_target[0]);
                if (prev >= 0.0) worst = std::max(worst, dist - prev);
                prev = dist;
            }
        }
        detail = "ratios 1..4 on 99 interior tau nodes";
        return worst;
    });
}

inline CheckResult marginal_convexity(int queries = 10000) {
    return run_check("marginal_convex_hull", 1e-12, [queries](std::string& detail) {
        Rng rng(17);
        double worst = 0.0;
        for (int q = 0; q < queries; ++q) {
            const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(6));
            StableCcnfParams p = StableCcnfParams::standard(2);
            p.lambda_z = 0.5 + 3.0 * rng.uniform();
            p.lambda_tau = 0.5 + 3.0 * rng.uniform();
            EmpiricalTarget data{Matrix(2, n)};
            for (Eigen::Index i = 0; i < n; ++i) data.points.col(i) = Vector::NullaryExpr(2, [&] { return 2.0 * rng.normal(); });
            const Vector z = Vector::NullaryExpr(2, [&] { return 2.0 * rng.normal(); });
            const double tau = 0.999 * rng.uniform();
            const MarginalField f = exact_marginal_vf(p, data, z, tau);
            if ((f.weights.array() < 0.0).any()) return 1.0;
            worst = std::max(worst, std::abs(f.weights.sum() - 1.0));
        }
        detail = std::to_string(queries) + " randomized queries";
        return worst;
    });
}

inline CheckResult marginal_single_point() {
    return run_check("marginal_single_point", 1e-12, [](std::string& detail) {
        Rng rng(23);
        StableCcnfParams p = StableCcnfParams::standard(2);
        p.lambda_z = 1.7;
        double worst = 0.0;
        for (int q = 0; q < 1000; ++q) {
            const Vector target = Vector::NullaryExpr(2, [&] { return rng.normal(); });
            const Vector z = Vector::NullaryExpr(2, [&] { return rng.normal(); });
            const double tau = 0.99 * rng.uniform();
            const MarginalField f = exact_marginal_vf(p, EmpiricalTarget{target}, z, tau);
            const Vector cond = ccnf_vf(p, {z, tau}, {target, p.tau1});
            worst = std::max(worst, (f.velocity - cond).cwiseAbs().maxCoeff());
        }
        detail = "1000 random single-point targets";
        return worst;
    });
}

inline CheckResult lyapunov_random_nets() {
    return run_check("lyapunov_random_nets", 1e-12, [](std::string& detail) {
        double worst = -std::numeric_limits<double>::infinity();
        Rng rng(31);
        Matrix pts(3, 10000);
        for (Eigen::Index j = 0; j < pts.cols(); ++j) {
            for (Eigen::Index k = 0; k < 3; ++k) pts(k, j) = 3.0 * rng.normal();
        }
        for (std::uint64_t seed : {1, 2, 3}) {
            const PotentialNet m = init_potential(seed, 2, 2, 16);
            worst = std::max(worst, lyapunov_scan(m, pts).max_derivative);
        }
        detail = "3 random 2x16 potentials, 10^4 points";
        return worst;
    });
}

inline Matrix random_batch(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
    }
    return m;
}

inline CheckResult input_grad_fd() {
    return run_check("input_grad_fd", 1e-6, [](std::string& detail) {
        double worst = 0.0;
        for (std::uint64_t seed : {1, 2, 3}) {
            const PotentialNet m = init_potential(seed, 2, 3, 32);
            Rng rng(seed + 100);
            for (int q = 0; q < 10; ++q) {
                const Vector x = random_batch(rng, 3, 1).col(0);
                const Vector g = input_grad(m.net, x);
                const Vector fd = finite_diff_grad([&](const Vector& y) { return forward(m.net, y)[0]; }, x, 1e-5);
                worst = std::max(worst, max_rel_err(g, fd));
            }
        }
        detail = "3 seeds, 3x32 softplus nets, h = 1e-5";
        return worst;
    });
}

/// Central differences over every parameter of `net` for a loss recomputed
/// from scratch with the same seed.
template <class LossFn>
double param_grad_fd_error(DenseNet& net, const LossFn& loss_at, const LayerParams& analytic) {
    const Vector theta = flatten(net.layers());
    const Vector a = flatten(analytic);
    const Vector fd = finite_diff_grad(
        [&](const Vector& t) {
            unflatten(t, net.layers());
            return loss_at();
        },
        theta, 1e-5);
    unflatten(theta, net.layers());
    return max_rel_err(a, fd, 1e-4);
}

inline CheckResult loss_grad_fd(LossKind kind) {
    return run_check("loss_grad_fd_" + to_string(kind), 1e-4, [kind](std::string& detail) {
        Rng data_rng(5);
        const EmpiricalTarget data{random_batch(data_rng, 2, 8)};
        LossBatchSpec spec;
        spec.batch_size = 16;
        spec.loss_kind = kind;
        spec.sigma_min = kind == LossKind::cfm_ot ? 0.01 : 0.0;
        const std::uint64_t loss_seed = 77;
        if (kind == LossKind::cfm_ot) {
            FieldNet m = init_field(9, 2, 4, 8);
            Rng rng(loss_seed);
            const LossResult r = cfm_ot_loss(m, data, spec, rng);
            detail = "4x8 field net, batch 16";
            return param_grad_fd_error(m.net, [&] { Rng again(loss_seed); return cfm_ot_loss(m, data, spec, again).loss; },
                                       r.grad);
        }
        PotentialNet m = init_potential(9, 2, 4, 8);
        const StableCcnfParams p = StableCcnfParams::standard(2);
        auto eval = [&](Rng& rng) {
            return kind == LossKind::auto_normalized ? auto_cfm_loss(m, p, data, spec, rng)
                                                     : auto_cfm_loss_unnormalized(m, p, data, spec, rng);
        };
        Rng rng(loss_seed);
        const LossResult r = eval(rng);
        detail = "4x8 potential net, batch 16";
        return param_grad_fd_error(m.net, [&] { Rng again(loss_seed); return eval(again).loss; }, r.grad);
    });
}

inline CheckResult grad_equivalence(const StableCcnfParams& base) {
    return run_check("grad_equivalence", 1e-3, [&](std::string& detail) {
        StableCcnfParams p = base;
        const Vector z_single = (Vector(p.dim()) << Vector::LinSpaced(p.dim(), 1.0, 0.5)).finished();
        const GradEquivalenceReport r = grad_equivalence_check(p, z_single, 512, 4);
        detail = "n = 512: " + std::to_string(r.max_rel_err) + ", n = 1024: " + std::to_string(r.max_rel_err_refined) +
                 (r.converging ? " (converging)" : " (not converging)");
        return r.converging ? r.max_rel_err : std::numeric_limits<double>::infinity();
    });
}

/// Samples pushed through the exact marginal field of a 2-point target end
/// within 1e-2 of a data point; returns the share of samples that do not.
inline CheckResult marginal_push_forward() {
    return run_check("marginal_push_forward", 0.01, [](std::string& detail) {
        StableCcnfParams p = StableCcnfParams::standard(2);
        const EmpiricalTarget data{(Matrix(2, 2) << -1.0, 1.0, 0.5, -0.5).finished()};
        Rng rng(41);
        const Eigen::Index n = 200;
        Matrix x0(3, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            x0.col(j).head(2) = sample_normal(rng, p.z0_mean, p.sigma0_diag);
            x0(2, j) = p.tau0;
        }
        // tau1 itself is reached only as t -> infinity; t = 6 leaves tau1 - tau ~ 1e-6.
        const BatchTrajectory tr = integrate_batch(marginal_field(p, data), x0, 0.0, 6.0, 0.01, Method::rk4);
        Eigen::Index far = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const Vector z = tr.final_states().col(j).head(2);
            const double d = std::min((z - data.points.col(0)).norm(), (z - data.points.col(1)).norm());
            if (d > 1e-2) ++far;
        }
        detail = std::to_string(far) + " of " + std::to_string(n) + " samples farther than 1e-2 at t = 6";
        return static_cast<double>(far) / static_cast<double>(n);
    });
}

}  // namespace verify

/// Suites: math, grad, oracle, all. `p` supplies the rates under test.
inline VerifyReport run_verify(const std::string& suite, const StableCcnfParams& p) {
    if (suite != "math" && suite != "grad" && suite != "oracle" && suite != "all") {
        throw ConfigError("suite", "expected math, grad, oracle or all; got '" + suite + "'");
    }
    VerifyReport r;
    r.suite = suite;
    const bool all = suite == "all";
    r.checks.push_back(verify::rate_positivity(p));
    if (all || suite == "math") {
        r.checks.push_back(verify::ot_equivalence());
        r.checks.push_back(verify::tau_bijection());
        r.checks.push_back(verify::convergence_rate());
        r.checks.push_back(verify::interpolant_ordering());
        r.checks.push_back(verify::lyapunov_random_nets());
    }
    if (all || suite == "grad") {
        r.checks.push_back(verify::input_grad_fd());
        for (LossKind k : {LossKind::auto_unnormalized, LossKind::auto_normalized, LossKind::cfm_ot}) {
            r.checks.push_back(verify::loss_grad_fd(k));
        }
        if (p.lambda_z > 0.0 && p.lambda_tau > 0.0) r.checks.push_back(verify::grad_equivalence(p));
    }
    if (all || suite == "oracle") {
        r.checks.push_back(verify::marginal_convexity());
        r.checks.push_back(verify::marginal_single_point());
        r.checks.push_back(verify::marginal_push_forward());
    }
    return r;
}

}  // namespace stableflow
