#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "stableflow/csv.hpp"
#include "stableflow/dynamics.hpp"
#include "test_util.hpp"

using namespace stableflow;

namespace {

Vector v1(double a) { return Vector::Constant(1, a); }

const PointField kDecay = [](double, const Vector& x) -> Vector { return -x; };

double final_error(Method m, double dt) {
    const Trajectory tr = integrate(kDecay, v1(1.0), 0.0, 1.0, dt, m);
    return std::abs(tr.states.back()[0] - std::exp(-1.0));
}

}  // namespace

TEST(Method, Names) {
    EXPECT_EQ(method_from_string("euler"), Method::euler);
    EXPECT_EQ(method_from_string("rk4"), Method::rk4);
    EXPECT_THROW(method_from_string("midpoint"), ConfigError);
}

TEST(Integrate, Rk4ExponentialDecay) {
    const Trajectory tr = integrate(kDecay, v1(1.0), 0.0, 1.0, 0.01, Method::rk4);
    EXPECT_EQ(tr.times.size(), 101u);
    EXPECT_EQ(tr.times.back(), 1.0);
    EXPECT_NEAR(tr.states.back()[0], std::exp(-1.0), 1e-8);
}

TEST(Integrate, ConvergenceOrders) {
    const double rk4_ratio = final_error(Method::rk4, 0.1) / final_error(Method::rk4, 0.05);
    EXPECT_NEAR(std::log2(rk4_ratio), 4.0, 0.2);
    const double euler_ratio = final_error(Method::euler, 0.01) / final_error(Method::euler, 0.005);
    EXPECT_NEAR(std::log2(euler_ratio), 1.0, 0.1);
}

TEST(Integrate, GridEndsExactlyAtTEnd) {
    const Trajectory tr = integrate(kDecay, v1(1.0), 0.0, 1.0, 0.3, Method::euler);
    ASSERT_EQ(tr.times.size(), 5u);
    EXPECT_DOUBLE_EQ(tr.times[3], 0.9);
    EXPECT_EQ(tr.times.back(), 1.0);
    EXPECT_THROW(integrate(kDecay, v1(1.0), 0.0, 1.0, 0.0), DomainError);
    EXPECT_THROW(integrate(kDecay, v1(1.0), 1.0, 1.0, 0.1), DomainError);
}

TEST(Integrate, ZeroFieldKeepsState) {
    const PointField zero = [](double, const Vector& x) -> Vector { return Vector::Zero(x.size()); };
    const Vector x0 = (Vector(3) << 1.0, -2.0, 0.5).finished();
    const Trajectory tr = integrate(zero, x0, 0.0, 2.0, 0.1);
    for (const Vector& s : tr.states) EXPECT_EQ(s, x0);
}

TEST(Integrate, DivergenceReportsTime) {
    const PointField blowup = [](double, const Vector& x) -> Vector { return x.cwiseAbs2(); };
    try {
        integrate(blowup, v1(1.0), 0.0, 2.0, 1e-3, Method::rk4);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        // exact blow-up at t = 1; the discrete solution crosses the bound within a few steps of it
        EXPECT_GT(e.time(), 0.99);
        EXPECT_LE(e.time(), 1.01);
    }
    const PointField nan_field = [](double t, const Vector& x) -> Vector {
        return t > 0.5 ? Vector::Constant(x.size(), std::numeric_limits<double>::quiet_NaN()) : Vector(-x);
    };
    try {
        integrate(nan_field, v1(1.0), 0.0, 1.0, 0.1, Method::euler);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_NEAR(e.time(), 0.7, 1e-12);
    }
}

TEST(IntegrateBatch, FreezesDivergedColumns) {
    const BatchField f = [](double, const Matrix& x) -> Matrix { return x.cwiseAbs2(); };
    const Matrix x0 = (Matrix(1, 3) << 1.0, -1.0, 0.0).finished();
    const BatchTrajectory tr = integrate_batch(f, x0, 0.0, 2.0, 1e-3);
    EXPECT_EQ(tr.num_diverged(), 1u);
    EXPECT_TRUE(tr.diverged(0));
    EXPECT_FALSE(tr.diverged(1));
    EXPECT_TRUE(tr.final_states().allFinite());
    EXPECT_EQ(tr.final_states()(0, 2), 0.0);
    const std::size_t k = tr.index_of(1.5);
    EXPECT_FALSE(tr.alive_at(0, k));
    EXPECT_EQ(tr.bounded_states(k).cols(), 2);
    EXPECT_TRUE(tr.alive_at(0, tr.index_of(0.5)));
}

TEST(IntegrateBatch, BlockSizeDoesNotChangeResult) {
    Rng rng(1);
    const Matrix x0 = test::normal_matrix(rng, 2, 100);
    const BatchField f = [](double t, const Matrix& x) -> Matrix { return -x * (1.0 + t) + x.cwiseAbs2() * 0.1; };
    const BatchTrajectory a = integrate_batch(f, x0, 0.0, 1.0, 0.05, Method::rk4, kDivergenceNorm, 7);
    const BatchTrajectory b = integrate_batch(f, x0, 0.0, 1.0, 0.05, Method::rk4, kDivergenceNorm, 256);
    EXPECT_EQ(a.final_states(), b.final_states());
}

TEST(PushForward, QuadraticPotentialMatchesClosedFormFlow) {
    StableCcnfParams p = StableCcnfParams::standard(2);
    p.lambda_z = 1.6;
    const Vector zt = (Vector(2) << 0.5, -0.25).finished();
    const QuadraticPotential q = QuadraticPotential::conditional(p.lambda_z, p.lambda_tau, zt, p.tau1);
    Rng rng(2);
    const PushForwardResult r = push_forward(q, p, 20, 1.0, 1e-3, rng);
    EXPECT_EQ(r.n_diverged, 0u);
    for (Eigen::Index j = 0; j < 20; ++j) {
        const AugmentedState x0 = AugmentedState::from_stacked(r.trajectory.states[0].col(j));
        EXPECT_EQ(x0.tau, p.tau0);
        const Vector exact = ccnf_flow(p, x0, 1.0, {zt, p.tau1}).stacked();
        EXPECT_LT((r.final_states().col(j) - exact).cwiseAbs().maxCoeff(), 1e-7);
    }
}

TEST(PushForward, EmptyBatch) {
    Rng rng(3);
    const PushForwardResult r = push_forward(init_potential(1, 2, 1, 4), StableCcnfParams::standard(2), 0, 1.0, 0.1, rng);
    EXPECT_EQ(r.trajectory.num_samples(), 0);
    EXPECT_EQ(r.n_diverged, 0u);
    const PushForwardResult b = push_forward(init_field(1, 2, 1, 4), 0, 1.0, 0.1, rng);
    EXPECT_EQ(b.trajectory.num_samples(), 0);
}

TEST(PushForward, SameSeedSameTrajectories) {
    const PotentialNet m = init_potential(4, 2, 2, 16);
    const StableCcnfParams p = StableCcnfParams::standard(2);
    Rng a(5), b(5);
    EXPECT_EQ(push_forward(m, p, 50, 1.0, 0.05, a).final_states(),
              push_forward(m, p, 50, 1.0, 0.05, b).final_states());
    const FieldNet f = init_field(4, 2, 2, 16);
    Rng c(6), d(6);
    EXPECT_EQ(push_forward(f, 50, 1.0, 0.05, c).final_states(), push_forward(f, 50, 1.0, 0.05, d).final_states());
}

TEST(PushForward, PotentialDecreasesAlongTrajectories) {
    const PotentialNet m = init_potential(7, 2, 3, 32);
    const StableCcnfParams p = StableCcnfParams::standard(2);
    Rng rng(8);
    const PushForwardResult r = push_forward(m, p, 100, 3.0, 0.01, rng);
    for (std::size_t k = 0; k + 1 < r.trajectory.times.size(); ++k) {
        const Matrix h0 = potential_values(m, r.trajectory.states[k]);
        const Matrix h1 = potential_values(m, r.trajectory.states[k + 1]);
        ASSERT_LE((h1 - h0).maxCoeff(), 1e-12) << "step " << k;
    }
}

TEST(PushForward, ExactMarginalFieldReachesTwoPointTarget) {
    const StableCcnfParams p = StableCcnfParams::standard(2);
    const EmpiricalTarget data = EmpiricalTarget::from_points(
        {(Vector(2) << -1.0, 0.0).finished(), (Vector(2) << 1.0, 0.0).finished()});
    Rng rng(9);
    Matrix x0(3, 200);
    x0.topRows(2) = test::normal_matrix(rng, 2, 200);
    x0.row(2).setConstant(p.tau0);
    const BatchTrajectory tr = integrate_batch(marginal_field(p, data), x0, 0.0, 6.0, 0.01);
    EXPECT_EQ(tr.num_diverged(), 0u);
    const Matrix z = tr.final_states().topRows(2);
    EXPECT_LT(support_distance(z, data), 1e-3);
}

TEST(SupportDistance, Examples) {
    const EmpiricalTarget data = EmpiricalTarget::from_points({Vector::Zero(2), (Vector(2) << 10.0, 0.0).finished()});
    EXPECT_EQ(support_distance(data.points, data), 0.0);
    const Matrix s = (Matrix(2, 2) << 3.0, 10.0, 4.0, 1.0).finished();
    EXPECT_DOUBLE_EQ(support_distance(s, data), 3.0);
    EXPECT_EQ(support_distance(Matrix(2, 0), data), 0.0);
    EXPECT_THROW(support_distance(Matrix::Zero(3, 1), data), DimensionError);
    EXPECT_THROW(support_distance(s, EmpiricalTarget{}), ConfigError);
}

TEST(SupportDistance, MatchesBruteForce) {
    Rng rng(10);
    const EmpiricalTarget data{test::normal_matrix(rng, 2, 300)};
    const Matrix s = 2.0 * test::normal_matrix(rng, 2, 200);
    double total = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < data.size(); ++i) best = std::min(best, (s.col(j) - data.points.col(i)).norm());
        total += best;
    }
    EXPECT_NEAR(support_distance(s, data), total / 200.0, 1e-12);
}

TEST(FieldGrid, LayoutAndMagnitude) {
    const auto f = [](const Vector& z, double slice) -> Vector {
        return (Vector(3) << -z[0], -2.0 * z[1], slice).finished();
    };
    const FieldGrid g = field_grid(f, GridBounds{-1.0, 1.0, 0.0, 2.0}, 3, 2, 0.4);
    ASSERT_EQ(g.vectors.size(), 6u);
    EXPECT_TRUE(g.has_tau);
    EXPECT_EQ(g.axis1, (Vector(3) << -1.0, 0.0, 1.0).finished());
    EXPECT_EQ(g.axis2, (Vector(2) << 0.0, 2.0).finished());
    // node (i = 2, j = 1) sits at z = (1, 2)
    EXPECT_EQ(g.vectors[5], (Vector(3) << -1.0, -4.0, 0.4).finished());
    EXPECT_DOUBLE_EQ(g.magnitudes[5], std::sqrt(17.0));
    EXPECT_THROW(field_grid(f, GridBounds{}, 1, 5, 0.0), ConfigError);
}

TEST(FieldGrid, CsvRows) {
    const auto f = [](const Vector& z, double) -> Vector { return -z; };
    const FieldGrid g = field_grid(f, GridBounds{}, 2, 2, 0.0);
    EXPECT_FALSE(g.has_tau);
    const csv::Table t = csv::parse(field_grid_csv(g));
    EXPECT_EQ(t.header, (std::vector<std::string>{"z1", "z2", "v1", "v2", "mag"}));
    ASSERT_EQ(t.rows.size(), 4u);
    EXPECT_EQ(t.rows[1], (std::vector<double>{3.0, -3.0, -3.0, 3.0, std::sqrt(18.0)}));
}

TEST(TrajectoryCsv, HeaderAndTruncationAfterDivergence) {
    const BatchField f = [](double, const Matrix& x) -> Matrix { return x.cwiseAbs2(); };
    Matrix x0(2, 2);
    x0 << 10.0, 0.0, 0.5, 0.5;
    const BatchTrajectory tr = integrate_batch(f, x0, 0.0, 1.5, 0.1, Method::euler);
    const csv::Table with_tau = csv::parse(trajectory_csv(tr, true, 2));
    EXPECT_EQ(with_tau.header, (std::vector<std::string>{"sample_id", "t", "z1", "tau"}));
    std::size_t rows0 = 0, rows1 = 0;
    for (const auto& row : with_tau.rows) (row[0] == 0.0 ? rows0 : rows1)++;
    EXPECT_EQ(rows1, tr.times.size());
    EXPECT_LT(rows0, tr.times.size());
    const csv::Table plain = csv::parse(trajectory_csv(BatchTrajectory{}, false, 2));
    EXPECT_EQ(plain.header, (std::vector<std::string>{"sample_id", "t", "z1", "z2"}));
    EXPECT_TRUE(plain.rows.empty());
}
