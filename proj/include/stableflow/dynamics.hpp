#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "stableflow/ccnf.hpp"
#include "stableflow/csv.hpp"
#include "stableflow/data.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/loss.hpp"
#include "stableflow/model.hpp"
#include "stableflow/parallel.hpp"

namespace stableflow {

enum class Method { euler, rk4 };

inline Method method_from_string(const std::string& s) {
    if (s == "euler") return Method::euler;
    if (s == "rk4") return Method::rk4;
    throw ConfigError("method", "expected euler or rk4, got '" + s + "'");
}

/// States whose Euclidean norm exceeds this are treated as diverged.
inline constexpr double kDivergenceNorm = 1e6;

struct Trajectory {
    std::vector<double> times;
    std::vector<Vector> states;
};

/// Field over a batch of states (columns) at time t.
using BatchField = std::function<Matrix(double t, const Matrix& states)>;
using PointField = std::function<Vector(double t, const Vector& state)>;

namespace detail {

// Grid t_0 = t_start, t_k = t_start + k dt, last node exactly t_end.
inline std::vector<double> time_grid(double t_start, double t_end, double dt) {
    if (!(dt > 0.0)) throw DomainError("dt must be > 0");
    if (!(t_end > t_start)) throw DomainError("t_end must be > t_start");
    const double steps = (t_end - t_start) / dt;
    auto n = static_cast<std::int64_t>(std::ceil(steps - 1e-9));
    n = std::max<std::int64_t>(n, 1);
    std::vector<double> grid(static_cast<std::size_t>(n + 1));
    for (std::int64_t k = 0; k < n; ++k) grid[static_cast<std::size_t>(k)] = t_start + static_cast<double>(k) * dt;
    grid.back() = t_end;
    return grid;
}

inline Matrix step(const BatchField& f, Method method, double t, double h, const Matrix& x) {
    if (method == Method::euler) return x + h * f(t, x);
    const Matrix k1 = f(t, x);
    const Matrix k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
    const Matrix k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
    const Matrix k4 = f(t + h, x + h * k3);
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline bool column_diverged(const Matrix& x, Eigen::Index j, double threshold) {
    const auto col = x.col(j);
    return !col.allFinite() || col.norm() > threshold;
}

}  // namespace detail

/// Fixed-step integration of a single state. Throws DivergenceError carrying
/// the time at which the state became non-finite or left the norm bound.
inline Trajectory integrate(const PointField& field, const Vector& x0, double t_start, double t_end,
                            double dt, Method method = Method::rk4,
                            double divergence_norm = kDivergenceNorm) {
    const std::vector<double> grid = detail::time_grid(t_start, t_end, dt);
    const BatchField batch = [&](double t, const Matrix& x) -> Matrix { return field(t, x.col(0)); };
    Trajectory traj;
    traj.times.reserve(grid.size());
    traj.states.reserve(grid.size());
    Matrix x = x0;
    traj.times.push_back(grid[0]);
    traj.states.push_back(x0);
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        x = detail::step(batch, method, grid[k], grid[k + 1] - grid[k], x);
        if (detail::column_diverged(x, 0, divergence_norm)) {
            throw DivergenceError(grid[k + 1], "trajectory diverged at t = " + std::to_string(grid[k + 1]));
        }
        traj.times.push_back(grid[k + 1]);
        traj.states.push_back(x.col(0));
    }
    return traj;
}

/// Many independent trajectories integrated together. Columns that diverge
/// are frozen at their last finite state and flagged.
struct BatchTrajectory {
    std::vector<double> times;
    std::vector<Matrix> states;             // one (dim x n) matrix per recorded time
    std::vector<double> divergence_time;    // NaN when the sample stayed bounded

    Eigen::Index num_samples() const { return states.empty() ? 0 : states.front().cols(); }

    std::size_t num_diverged() const {
        return static_cast<std::size_t>(
            std::count_if(divergence_time.begin(), divergence_time.end(), [](double t) { return !std::isnan(t); }));
    }

    bool diverged(Eigen::Index j) const { return !std::isnan(divergence_time[static_cast<std::size_t>(j)]); }

    // Whether sample j was still bounded at recorded time index k.
    bool alive_at(Eigen::Index j, std::size_t k) const {
        const double td = divergence_time[static_cast<std::size_t>(j)];
        return std::isnan(td) || times[k] < td;
    }

    const Matrix& final_states() const { return states.back(); }

    /// Index of the recorded time closest to t.
    std::size_t index_of(double t) const {
        std::size_t best = 0;
        for (std::size_t k = 1; k < times.size(); ++k) {
            if (std::abs(times[k] - t) < std::abs(times[best] - t)) best = k;
        }
        return best;
    }

    /// States at recorded index k of the samples still bounded at that time.
    Matrix bounded_states(std::size_t k) const {
        std::vector<Eigen::Index> keep;
        for (Eigen::Index j = 0; j < num_samples(); ++j) {
            if (alive_at(j, k)) keep.push_back(j);
        }
        Matrix out(states[k].rows(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t i = 0; i < keep.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = states[k].col(keep[i]);
        return out;
    }
};

/// Integrates every column of `x0`. Samples are split into fixed blocks that
/// may run on separate threads; each block is integrated independently, so
/// results do not depend on the thread count.
inline BatchTrajectory integrate_batch(const BatchField& field, const Matrix& x0, double t_start,
                                       double t_end, double dt, Method method = Method::rk4,
                                       double divergence_norm = kDivergenceNorm,
                                       Eigen::Index block = 256) {
    const std::vector<double> grid = detail::time_grid(t_start, t_end, dt);
    BatchTrajectory out;
    out.times = grid;
    out.states.assign(grid.size(), Matrix(x0.rows(), x0.cols()));
    out.divergence_time.assign(static_cast<std::size_t>(x0.cols()), std::numeric_limits<double>::quiet_NaN());
    const Eigen::Index n = x0.cols();
    const Eigen::Index n_blocks = (n + block - 1) / block;
    parallel_for(static_cast<std::size_t>(n_blocks), [&](std::size_t b) {
        const Eigen::Index begin = static_cast<Eigen::Index>(b) * block;
        const Eigen::Index len = std::min(block, n - begin);
        Matrix x = x0.middleCols(begin, len);
        std::vector<bool> dead(static_cast<std::size_t>(len), false);
        out.states[0].middleCols(begin, len) = x;
        for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
            Matrix next = detail::step(field, method, grid[k], grid[k + 1] - grid[k], x);
            for (Eigen::Index j = 0; j < len; ++j) {
                if (dead[static_cast<std::size_t>(j)]) {
                    next.col(j) = x.col(j);
                } else if (detail::column_diverged(next, j, divergence_norm)) {
                    dead[static_cast<std::size_t>(j)] = true;
                    out.divergence_time[static_cast<std::size_t>(begin + j)] = grid[k + 1];
                    next.col(j) = x.col(j);
                }
            }
            x = std::move(next);
            out.states[k + 1].middleCols(begin, len) = x;
        }
    });
    return out;
}

struct PushForwardResult {
    BatchTrajectory trajectory;
    std::size_t n_diverged = 0;

    const Matrix& final_states() const { return trajectory.final_states(); }
};

/// Samples (z ~ N(z0_mean, Sigma0), tau = tau0) pushed through the autonomous
/// gradient field of `m`.
template <GradientPotential M>
PushForwardResult push_forward(const M& m, const StableCcnfParams& p, Eigen::Index n, double t_end,
                               double dt, Rng& rng, Method method = Method::rk4) {
    p.validate();
    const Eigen::Index d = p.dim();
    if (state_dim(m) != d + 1) throw DimensionError("potential input must be (z, tau)");
    PushForwardResult out;
    if (n == 0) return out;
    Matrix x0(d + 1, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        x0.col(j).head(d) = sample_normal(rng, p.z0_mean, p.sigma0_diag);
        x0(d, j) = p.tau0;
    }
    const BatchField field = [&m](double, const Matrix& x) -> Matrix { return -potential_gradients(m, x); };
    out.trajectory = integrate_batch(field, x0, 0.0, t_end, dt, method);
    out.n_diverged = out.trajectory.num_diverged();
    return out;
}

/// Standard-normal samples pushed through the time-dependent baseline field.
inline PushForwardResult push_forward(const FieldNet& m, Eigen::Index n, double t_end, double dt,
                                      Rng& rng, Method method = Method::rk4) {
    const Eigen::Index d = m.dim();
    PushForwardResult out;
    if (n == 0) return out;
    Matrix x0(d, n);
    for (Eigen::Index j = 0; j < n; ++j) x0.col(j) = sample_normal(rng, Vector::Zero(d), Vector::Ones(d));
    const BatchField field = [&m](double t, const Matrix& x) -> Matrix {
        return forward_batch(m.net, field_inputs(m, x, RowVector::Constant(x.cols(), t)));
    };
    out.trajectory = integrate_batch(field, x0, 0.0, t_end, dt, method);
    out.n_diverged = out.trajectory.num_diverged();
    return out;
}

/// Exact marginal field of an empirical target as a batch field over (z; tau).
inline BatchField marginal_field(const StableCcnfParams& p, const EmpiricalTarget& data) {
    return [p, data](double, const Matrix& x) -> Matrix {
        const Eigen::Index d = p.dim();
        Matrix v(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            v.col(j) = exact_marginal_vf(p, data, x.col(j).head(d), x(d, j)).velocity;
        }
        return v;
    };
}

struct LyapunovReport {
    double max_derivative = 0.0;   // max over points of grad H . v
    double min_derivative = 0.0;
    double stationary_fraction = 0.0;  // share of points with ||grad H|| < tolerance
    double tolerance = 1e-8;
    Eigen::Index n_points = 0;
};

/// Evaluates the Lie derivative grad H(x) . v(x) with v = -grad H at every
/// column of `points`.
template <GradientPotential M>
LyapunovReport lyapunov_scan(const M& m, const Matrix& points, double tolerance = 1e-8) {
    LyapunovReport r;
    r.tolerance = tolerance;
    r.n_points = points.cols();
    if (points.cols() == 0) return r;
    const Matrix grad_h = potential_gradients(m, points);
    const Matrix field = -potential_gradients(m, points);
    const RowVector lie = grad_h.cwiseProduct(field).colwise().sum();
    r.max_derivative = lie.maxCoeff();
    r.min_derivative = lie.minCoeff();
    Eigen::Index stationary = 0;
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
        if (grad_h.col(j).norm() < tolerance) ++stationary;
    }
    r.stationary_fraction = static_cast<double>(stationary) / static_cast<double>(points.cols());
    return r;
}

/// Mean over samples of the Euclidean distance to the nearest data point.
inline double support_distance(const Matrix& samples, const EmpiricalTarget& data) {
    data.validate();
    if (samples.rows() != data.dim()) throw DimensionError("samples and data dimensions differ");
    const Eigen::Index n = samples.cols();
    if (n == 0) return 0.0;
    std::vector<double> nearest(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t j) {
        const auto s = samples.col(static_cast<Eigen::Index>(j));
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < data.size(); ++i) {
            best = std::min(best, (data.points.col(i) - s).squaredNorm());
        }
        nearest[j] = std::sqrt(best);
    });
    double total = 0.0;
    for (double v : nearest) total += v;
    return total / static_cast<double>(n);
}

struct GridBounds {
    double z1_min = -3.0, z1_max = 3.0;
    double z2_min = -3.0, z2_max = 3.0;
};

/// Field sampled on a regular 2-D grid at a fixed tau (or t). Node (i, j) has
/// coordinates (axis1[i], axis2[j]) and is stored at index j * axis1.size() + i.
struct FieldGrid {
    Vector axis1;
    Vector axis2;
    double slice = 0.0;
    std::vector<Vector> vectors;
    std::vector<double> magnitudes;  // norm of the z-components
    bool has_tau = false;
};

/// `field(z, slice)` returns either d or d + 1 components; the trailing one is
/// treated as the tau-velocity when present.
inline FieldGrid field_grid(const std::function<Vector(const Vector&, double)>& field,
                            const GridBounds& bounds, int res1, int res2, double slice) {
    if (res1 < 2 || res2 < 2) throw ConfigError("resolution", "must be >= 2 per axis");
    FieldGrid g;
    g.slice = slice;
    g.axis1 = Vector::LinSpaced(res1, bounds.z1_min, bounds.z1_max);
    g.axis2 = Vector::LinSpaced(res2, bounds.z2_min, bounds.z2_max);
    g.vectors.resize(static_cast<std::size_t>(res1) * static_cast<std::size_t>(res2));
    g.magnitudes.resize(g.vectors.size());
    for (int j = 0; j < res2; ++j) {
        for (int i = 0; i < res1; ++i) {
            const Vector z = (Vector(2) << g.axis1[i], g.axis2[j]).finished();
            Vector v = field(z, slice);
            if (v.size() != 2 && v.size() != 3) throw DimensionError("grid field must return 2 or 3 components");
            const std::size_t idx = static_cast<std::size_t>(j) * static_cast<std::size_t>(res1) +
                                    static_cast<std::size_t>(i);
            g.has_tau = v.size() == 3;
            g.magnitudes[idx] = v.head(2).norm();
            g.vectors[idx] = std::move(v);
        }
    }
    return g;
}

inline std::string field_grid_csv(const FieldGrid& g) {
    std::string out = g.has_tau ? "z1,z2,v1,v2,vtau,mag\n" : "z1,z2,v1,v2,mag\n";
    const auto res1 = static_cast<std::size_t>(g.axis1.size());
    for (std::size_t idx = 0; idx < g.vectors.size(); ++idx) {
        const auto i = static_cast<Eigen::Index>(idx % res1);
        const auto j = static_cast<Eigen::Index>(idx / res1);
        std::vector<double> row{g.axis1[i], g.axis2[j]};
        for (Eigen::Index k = 0; k < g.vectors[idx].size(); ++k) row.push_back(g.vectors[idx][k]);
        row.push_back(g.magnitudes[idx]);
        csv::append_row(out, row);
    }
    return out;
}

/// `sample_id,t,z1,...,zd[,tau]`; one row per (sample, recorded time) while the
/// sample stays bounded. `with_tau` marks the last state row as tau.
inline std::string trajectory_csv(const BatchTrajectory& traj, bool with_tau, Eigen::Index dim) {
    std::string out = "sample_id,t";
    const Eigen::Index d = with_tau ? dim - 1 : dim;
    for (Eigen::Index k = 0; k < d; ++k) out += ",z" + std::to_string(k + 1);
    if (with_tau) out += ",tau";
    out += '\n';
    for (Eigen::Index j = 0; j < traj.num_samples(); ++j) {
        for (std::size_t k = 0; k < traj.times.size(); ++k) {
            if (!traj.alive_at(j, k)) break;
            std::vector<double> row{static_cast<double>(j), traj.times[k]};
            for (Eigen::Index c = 0; c < dim; ++c) row.push_back(traj.states[k](c, j));
            csv::append_row(out, row);
        }
    }
    return out;
}

}  // namespace stableflow
