#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "stableflow/csv.hpp"
#include "stableflow/data.hpp"
#include "stableflow/rng.hpp"
#include "test_util.hpp"

using namespace stableflow;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
}

TEST(Rng, StreamsAreDistinctAndReproducible) {
    Rng s0 = Rng::stream(7, 0), s1 = Rng::stream(7, 1), s1b = Rng::stream(7, 1);
    EXPECT_TRUE(s1 == s1b);
    EXPECT_FALSE(s0 == s1);
    EXPECT_NE(s0.next_u64(), s1.next_u64());
}

TEST(Rng, UniformEquidistribution) {
    Rng rng(1);
    const int n = 1000000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
        sum2 += u * u;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    // 4 standard errors: sd(U) = 1/sqrt(12); sd(U^2 estimate) ~ sqrt(1/180) / sqrt(n).
    EXPECT_NEAR(mean, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
    EXPECT_NEAR(var, 1.0 / 12.0, 4.0 * std::sqrt(1.0 / 180.0 / n));
}

TEST(Rng, ClosedUniformAndBelow) {
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform_closed();
        ASSERT_GE(u, 0.0);
        ASSERT_LE(u, 1.0);
        ASSERT_LT(rng.below(7), 7u);
    }
}

TEST(SampleNormal, MomentsWithinClt) {
    Rng rng(2);
    const int n = 100000;
    Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sum2 = Eigen::Vector2d::Zero();
    for (int i = 0; i < n; ++i) {
        const Vector x = sample_normal(rng, Vector::Zero(2), Vector::Ones(2));
        sum += x;
        sum2 += x.cwiseAbs2();
    }
    for (int k = 0; k < 2; ++k) {
        const double mean = sum[k] / n;
        EXPECT_LT(std::abs(mean), 0.013);
        EXPECT_LT(std::abs(sum2[k] / n - mean * mean - 1.0), 0.02);
    }
}

TEST(SampleNormal, ZeroCovarianceReturnsMeanAndSeedsRepeat) {
    Rng rng(3);
    const Vector mean = (Vector(3) << 1.0, -2.0, 0.5).finished();
    EXPECT_EQ(sample_normal(rng, mean, Vector::Zero(3)), mean);
    Rng a(4), b(4);
    EXPECT_EQ(sample_normal(a, mean, Vector::Ones(3)), sample_normal(b, mean, Vector::Ones(3)));
    EXPECT_THROW(sample_normal(rng, mean, -Vector::Ones(3)), DomainError);
}

TEST(Moons, NoiselessPointsLieOnArcs) {
    Rng rng(5);
    const Dataset ds = make_moons(2000, 0.0, rng);
    ASSERT_EQ(ds.size(), 2000);
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        const double x = ds.points(0, i), y = ds.points(1, i);
        double residual;
        if (ds.labels[static_cast<std::size_t>(i)] == 0) {
            residual = std::abs(std::hypot(x, y) - 1.0) + std::max(0.0, -y);
        } else {
            residual = std::abs(std::hypot(1.0 - x, 0.5 - y) - 1.0) + std::max(0.0, y - 0.5);
        }
        ASSERT_LT(residual, 1e-12) << "point " << i;
    }
}

TEST(Moons, SampleMeanMatchesArcAverage) {
    Rng rng(6);
    const int n = 100000;
    const Dataset ds = make_moons(n, 0.05, rng);
    const Eigen::Vector2d mean = ds.points.rowwise().mean();
    // Arc average (0.5, 0.25); standard errors from the empirical variance.
    const Eigen::Vector2d var = (ds.points.colwise() - mean).array().square().rowwise().mean();
    EXPECT_NEAR(mean[0], 0.5, 4.0 * std::sqrt(var[0] / n));
    EXPECT_NEAR(mean[1], 0.25, 4.0 * std::sqrt(var[1] / n));
}

TEST(Moons, LargeScaleCounts) {
    const Dataset ds = make_dataset("moons", 100000, 0.05, 1);
    EXPECT_EQ(ds.size(), 100000);
    EXPECT_TRUE(ds.points.allFinite());
    EXPECT_EQ(ds.noise_std, 0.05);
}

TEST(Circles, NoiselessRadii) {
    Rng rng(7);
    const Dataset ds = make_circles(5000, 0.0, rng);
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        const double r = ds.points.col(i).norm();
        const double expected = ds.labels[static_cast<std::size_t>(i)] == 0 ? 1.0 : 0.5;
        ASSERT_NEAR(r, expected, 1e-15);
    }
}

TEST(Circles, BalanceAndMean) {
    Rng rng(8);
    const int n = 100000;
    const Dataset ds = make_circles(n, 0.05, rng);
    int ones = 0;
    for (int l : ds.labels) ones += l;
    EXPECT_NEAR(ones, n / 2.0, 4.0 * std::sqrt(n * 0.25));
    const Eigen::Vector2d mean = ds.points.rowwise().mean();
    const Eigen::Vector2d var = (ds.points.colwise() - mean).array().square().rowwise().mean();
    EXPECT_NEAR(mean[0], 0.0, 4.0 * std::sqrt(var[0] / n));
    EXPECT_NEAR(mean[1], 0.0, 4.0 * std::sqrt(var[1] / n));
}

TEST(Dataset, ValidationAndNames) {
    Rng rng(1);
    EXPECT_THROW(make_moons(0, 0.1, rng), ConfigError);
    EXPECT_THROW(make_circles(10, -1.0, rng), ConfigError);
    EXPECT_THROW(make_dataset("spirals", 10, 0.1, 1), ConfigError);
}

TEST(Dataset, SeedToBytesIsPure) {
    test::TempDir dir("data");
    save_dataset(make_dataset("moons", 500, 0.05, 11), dir.file("a.csv"));
    save_dataset(make_dataset("moons", 500, 0.05, 11), dir.file("b.csv"));
    EXPECT_EQ(csv::read_file(dir.file("a.csv")), csv::read_file(dir.file("b.csv")));
    EXPECT_EQ(csv::read_file(dir.file("a.json")), csv::read_file(dir.file("b.json")));
}

TEST(Dataset, CsvRoundTripIsExact) {
    test::TempDir dir("data");
    const Dataset ds = make_dataset("circles", 300, 0.05, 3);
    save_dataset(ds, dir.file("c.csv"));
    EXPECT_EQ(csv::read_file(dir.file("c.csv")).substr(0, 6), "z1,z2\n");
    const Dataset back = load_dataset(dir.file("c.csv"));
    EXPECT_TRUE(back.points == ds.points);
    EXPECT_EQ(back.name, "circles");
    EXPECT_EQ(back.seed, 3u);
    EXPECT_EQ(back.noise_std, 0.05);
}

TEST(Csv, ParseErrorsCarryOffsets) {
    try {
        csv::parse("a,b\n1,2\n3,x\n");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 10u);
    }
    EXPECT_THROW(csv::parse("a,b\n1\n"), ParseError);
    EXPECT_THROW(csv::parse(""), ParseError);
    const csv::Table t = csv::parse("a\r\n1.5\r\n");
    ASSERT_EQ(t.rows.size(), 1u);
    EXPECT_EQ(t.rows[0][0], 1.5);
}

TEST(Csv, FormatDoubleRoundTrips) {
    Rng rng(12);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, static_cast<int>(rng.below(20)) - 10);
        EXPECT_EQ(std::stod(csv::format_double(v)), v);
    }
}
