#pragma once

// Synthetic 2-D targets and base-distribution sampling.
//
// moons:   class 0 on (cos a, sin a), class 1 on (1 - cos a, 0.5 - sin a), a ~ U[0, pi]
// circles: class 0 on radius 1.0, class 1 on radius 0.5, angle ~ U[0, 2 pi)
// Each point draws, in order: class, angle, then one normal per coordinate for
// the isotropic noise.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "stableflow/csv.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/loss.hpp"
#include "stableflow/rng.hpp"

namespace stableflow {

struct Dataset {
    std::string name;
    Matrix points;  // (2 x n)
    std::vector<int> labels;
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    Eigen::Index size() const { return points.cols(); }
    EmpiricalTarget target() const { return {points}; }
};

namespace detail {

inline void check_dataset_args(Eigen::Index n, double noise_std) {
    if (n < 1) throw ConfigError("data.n", "must be >= 1");
    if (!(noise_std >= 0.0)) throw ConfigError("data.noise_std", "must be >= 0");
}

}  // namespace detail

inline Dataset make_moons(Eigen::Index n, double noise_std, Rng& rng) {
    detail::check_dataset_args(n, noise_std);
    Dataset ds;
    ds.name = "moons";
    ds.noise_std = noise_std;
    ds.points.resize(2, n);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.below(2));
        const double a = std::numbers::pi * rng.uniform_closed();
        double x = 0.0, y = 0.0;
        if (label == 0) {
            x = std::cos(a);
            y = std::sin(a);
        } else {
            x = 1.0 - std::cos(a);
            y = 0.5 - std::sin(a);
        }
        const double nx = rng.normal();
        const double ny = rng.normal();
        ds.points(0, i) = x + noise_std * nx;
        ds.points(1, i) = y + noise_std * ny;
        ds.labels[static_cast<std::size_t>(i)] = label;
    }
    return ds;
}

inline Dataset make_circles(Eigen::Index n, double noise_std, Rng& rng) {
    detail::check_dataset_args(n, noise_std);
    Dataset ds;
    ds.name = "circles";
    ds.noise_std = noise_std;
    ds.points.resize(2, n);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.below(2));
        const double radius = label == 0 ? 1.0 : 0.5;
        const double a = 2.0 * std::numbers::pi * rng.uniform();
        const double nx = rng.normal();
        const double ny = rng.normal();
        ds.points(0, i) = radius * std::cos(a) + noise_std * nx;
        ds.points(1, i) = radius * std::sin(a) + noise_std * ny;
        ds.labels[static_cast<std::size_t>(i)] = label;
    }
    return ds;
}

inline Dataset make_dataset(const std::string& name, Eigen::Index n, double noise_std,
                            std::uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    if (name == "moons") {
        ds = make_moons(n, noise_std, rng);
    } else if (name == "circles") {
        ds = make_circles(n, noise_std, rng);
    } else {
        throw ConfigError("data.name", "expected moons or circles, got '" + name + "'");
    }
    ds.seed = seed;
    return ds;
}

/// mean + sqrt(cov_diag) * eps, eps standard normal (one draw per coordinate).
inline Vector sample_normal(Rng& rng, const Vector& mean, const Vector& cov_diag) {
    if (mean.size() != cov_diag.size()) throw DimensionError("mean and cov_diag lengths differ");
    Vector out = mean;
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        if (!(cov_diag[i] >= 0.0)) throw DomainError("cov_diag entries must be >= 0");
        const double eps = rng.normal();
        if (cov_diag[i] > 0.0) out[i] += std::sqrt(cov_diag[i]) * eps;
    }
    return out;
}

inline std::string sidecar_path(const std::string& csv_path) {
    std::filesystem::path p(csv_path);
    p.replace_extension(".json");
    return p.string();
}

/// Writes `z1,z2` rows to `csv_path` and {"name","n","noise_std","seed"} to the
/// sidecar next to it (same stem, .json extension).
inline void save_dataset(const Dataset& ds, const std::string& csv_path) {
    std::string out = "z1,z2\n";
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        csv::append_row(out, {ds.points(0, i), ds.points(1, i)});
    }
    csv::write_file(csv_path, out);
    nlohmann::ordered_json meta;
    meta["name"] = ds.name;
    meta["n"] = ds.size();
    meta["noise_std"] = ds.noise_std;
    meta["seed"] = ds.seed;
    csv::write_file(sidecar_path(csv_path), meta.dump(2) + "\n");
}

/// Loads a `z1,...,zd` CSV; metadata is read from the sidecar when present.
inline Dataset load_dataset(const std::string& csv_path) {
    const csv::Table table = csv::parse(csv::read_file(csv_path));
    for (std::size_t k = 0; k < table.header.size(); ++k) {
        if (table.header[k] != "z" + std::to_string(k + 1)) {
            throw ParseError(0, "dataset header must be z1,...,zd");
        }
    }
    Dataset ds;
    ds.points.resize(static_cast<Eigen::Index>(table.header.size()),
                     static_cast<Eigen::Index>(table.rows.size()));
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        for (std::size_t k = 0; k < table.header.size(); ++k) {
            ds.points(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = table.rows[i][k];
        }
    }
    const std::string meta_path = sidecar_path(csv_path);
    if (std::filesystem::exists(meta_path)) {
        try {
            const auto meta = nlohmann::json::parse(csv::read_file(meta_path));
            ds.name = meta.value("name", "");
            ds.noise_std = meta.value("noise_std", 0.0);
            ds.seed = meta.value("seed", std::uint64_t{0});
            if (meta.contains("n") && meta["n"].get<Eigen::Index>() != ds.size()) {
                throw ParseError(0, "sidecar n does not match CSV row count");
            }
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(e.byte, std::string("dataset sidecar: ") + e.what());
        }
    }
    return ds;
}

}  // namespace stableflow
