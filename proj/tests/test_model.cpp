#include <gtest/gtest.h>

#include "stableflow/ccnf.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/model.hpp"
#include "test_util.hpp"

using namespace stableflow;

TEST(Init, PotentialShapesAtLargeScale) {
    const PotentialNet m = init_potential(0, 2, 4, 500);
    EXPECT_EQ(m.net.layer_dims(), (std::vector<int>{3, 500, 500, 500, 500, 1}));
    EXPECT_EQ(m.net.output_activation(), Activation::softplus);
    EXPECT_EQ(m.dim(), 2);
}

TEST(Init, FieldShapes) {
    const FieldNet with_t = init_field(0, 2, 4, 500);
    EXPECT_EQ(with_t.net.layer_dims(), (std::vector<int>{3, 500, 500, 500, 500, 2}));
    EXPECT_EQ(with_t.net.output_activation(), Activation::identity);
    const FieldNet no_t = init_field(0, 2, 2, 16, false);
    EXPECT_EQ(no_t.net.layer_dims(), (std::vector<int>{2, 16, 16, 2}));
}

TEST(Init, SameSeedSameWeights) {
    EXPECT_TRUE(init_potential(5, 2, 3, 32).net == init_potential(5, 2, 3, 32).net);
    EXPECT_FALSE(init_potential(5, 2, 3, 32).net == init_potential(6, 2, 3, 32).net);
    EXPECT_TRUE(init_field(5, 2, 3, 32).net == init_field(5, 2, 3, 32).net);
}

TEST(Init, RejectsEmptyStack) {
    EXPECT_THROW(init_potential(0, 2, 0, 10), ConfigError);
    EXPECT_THROW(init_field(0, 2, 2, 0), ConfigError);
}

TEST(Model, VariantAccessors) {
    Model m = init(1, 2, 2, 8, ModelKind::potential);
    EXPECT_EQ(kind_of(m), ModelKind::potential);
    EXPECT_EQ(network(m).input_dim(), 3);
    m = init(1, 2, 2, 8, ModelKind::field);
    EXPECT_EQ(kind_of(m), ModelKind::field);
    EXPECT_EQ(network(m).output_dim(), 2);
    EXPECT_EQ(to_string(ModelKind::potential), "potential");
}

TEST(Model, FromNetContracts) {
    EXPECT_THROW(PotentialNet::from_net(DenseNet({3, 4, 2}, Activation::softplus, Activation::softplus)),
                 ContractError);
    EXPECT_THROW(PotentialNet::from_net(DenseNet({3, 4, 1}, Activation::softplus, Activation::identity)),
                 ContractError);
    EXPECT_THROW(FieldNet::from_net(DenseNet({2, 4, 2}, Activation::softplus, Activation::identity), true),
                 ContractError);
}

TEST(PotentialNet, PositiveEverywhere) {
    const PotentialNet m = init_potential(3, 2, 3, 32);
    Rng rng(2);
    const Matrix pts = 10.0 * test::normal_matrix(rng, 3, 2000);
    EXPECT_GT(potential_values(m, pts).minCoeff(), 0.0);
}

TEST(PotentialNet, GradFieldMatchesFiniteDifferences) {
    const PotentialNet m = init_potential(4, 2, 3, 16);
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const Vector z = test::normal_matrix(rng, 2, 1).col(0);
        const double tau = rng.uniform();
        const Vector x = detail::stack_input(z, tau);
        const auto h = [&](const Vector& s) { return potential(m, s.head(2), s[2]); };
        const Vector fd = finite_diff_grad(h, x, 1e-5);
        EXPECT_LT(test::max_rel_err(-fd, grad_field(m, z, tau), 1e-6), 1e-6);
    }
    EXPECT_THROW(grad_field(m, Vector::Zero(3), 0.0), DimensionError);
}

TEST(PotentialNet, BatchMatchesPointwise) {
    const PotentialNet m = init_potential(4, 2, 2, 16);
    Rng rng(4);
    const Matrix pts = test::normal_matrix(rng, 3, 10);
    const Matrix v = grad_field_batch(m, pts);
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
        EXPECT_LT((v.col(j) - grad_field(m, pts.col(j).head(2), pts(2, j))).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(PotentialNet, LieDerivativeNonPositive) {
    Rng rng(5);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const PotentialNet m = init_potential(seed, 2, 3, 32);
        const LyapunovReport r = lyapunov_scan(m, 3.0 * test::normal_matrix(rng, 3, 1000));
        EXPECT_LE(r.max_derivative, 0.0);
    }
}

TEST(FieldNet, TimeInputToggle) {
    const FieldNet a = init_field(2, 2, 2, 8, true);
    const FieldNet b = init_field(2, 2, 2, 8, false);
    const Vector z = (Vector(2) << 0.3, -0.1).finished();
    EXPECT_NE(baseline_field(a, z, 0.0), baseline_field(a, z, 0.9));
    EXPECT_EQ(baseline_field(b, z, 0.0), baseline_field(b, z, 0.9));
    EXPECT_EQ(baseline_field(a, z, 0.0).size(), 2);
}

TEST(QuadraticPotential, FieldIsConditionalField) {
    const StableCcnfParams p = StableCcnfParams::standard(2);
    const Vector zt = (Vector(2) << 0.5, -1.0).finished();
    const QuadraticPotential q = QuadraticPotential::conditional(p.lambda_z, p.lambda_tau, zt, p.tau1);
    Rng rng(6);
    const Matrix pts = test::normal_matrix(rng, 3, 50);
    const Matrix g = potential_gradients(q, pts);
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
        const Vector v = ccnf_vf(p, AugmentedState::from_stacked(pts.col(j)), {zt, p.tau1});
        EXPECT_LT((-g.col(j) - v).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(QuadraticPotential, UnitCurvatureAtOriginGivesMinusState) {
    const QuadraticPotential q = QuadraticPotential::conditional(1.0, 1.0, Vector::Zero(2), 0.0);
    const Matrix x = (Matrix(3, 1) << 0.4, -2.0, 0.7).finished();
    EXPECT_EQ(-potential_gradients(q, x), -x);
    EXPECT_DOUBLE_EQ(potential_values(q, x)(0, 0), 0.5 * x.squaredNorm());
    const LyapunovReport r = lyapunov_scan(q, x);
    EXPECT_DOUBLE_EQ(r.max_derivative, -x.squaredNorm());
}

TEST(QuadraticPotential, StationaryOnlyAtCenter) {
    const QuadraticPotential q = QuadraticPotential::conditional(2.0, 1.0, Vector::Ones(2), 1.0);
    Matrix pts(3, 2);
    pts.col(0) = q.center;
    pts.col(1) = q.center + Vector::Constant(3, 0.1);
    const LyapunovReport r = lyapunov_scan(q, pts);
    EXPECT_EQ(r.max_derivative, 0.0);
    EXPECT_LT(r.min_derivative, 0.0);
    EXPECT_DOUBLE_EQ(r.stationary_fraction, 0.5);
}

TEST(GradientPotentialConcept, BothModelsQualify) {
    static_assert(GradientPotential<PotentialNet>);
    static_assert(GradientPotential<QuadraticPotential>);
    static_assert(!GradientPotential<FieldNet>);
    SUCCEED();
}
