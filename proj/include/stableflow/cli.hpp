#pragma once

// Command implementations for the `stableflow` executable.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or config error,
// 3 numeric fault.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "stableflow/csv.hpp"
#include "stableflow/data.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/parallel.hpp"
#include "stableflow/serialization.hpp"
#include "stableflow/train.hpp"
#include "stableflow/verify.hpp"

#ifndef STABLEFLOW_VERSION
#define STABLEFLOW_VERSION "0.1.0"
#endif

namespace stableflow::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumericFault = 3 };

struct CommonOptions {
    std::string config;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
    std::string scale = "desk";
};

/// Run record written next to every command's outputs.
class RunManifest {
public:
    RunManifest(std::string command, const CommonOptions& opts)
        : command_(std::move(command)), opts_(opts), start_(std::chrono::system_clock::now()) {}

    void set_config(Json config) { config_ = std::move(config); }
    void set_seed(std::uint64_t seed) { seed_ = seed; }
    void add_artifact(const std::string& key, const std::string& path) { artifacts_[key] = path; }
    Json& metrics() { return metrics_; }
    void warn(const std::string& w) { warnings_.push_back(w); }

    std::string write(bool success) {
        const auto end = std::chrono::system_clock::now();
        Json j;
        j["command"] = command_;
        j["version"] = STABLEFLOW_VERSION;
        j["success"] = success;
        j["seed"] = seed_ ? Json(*seed_) : Json(nullptr);
        j["deterministic"] = opts_.deterministic;
        j["scale"] = opts_.scale;
        j["threads"] = worker_count();
        j["config"] = config_;
        j["artifacts"] = artifacts_;
        j["metrics"] = metrics_;
        j["warnings"] = warnings_;
        j["started_utc"] = iso_time(start_);
        j["finished_utc"] = iso_time(end);
        j["wall_seconds"] = std::chrono::duration<double>(end - start_).count();
        const std::string path = (std::filesystem::path(opts_.out) / "manifest.json").string();
        csv::write_file(path, j.dump(2) + "\n");
        return path;
    }

private:
    static std::string iso_time(std::chrono::system_clock::time_point tp) {
        const std::time_t t = std::chrono::system_clock::to_time_t(tp);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    std::string command_;
    CommonOptions opts_;
    std::chrono::system_clock::time_point start_;
    Json config_ = nullptr;
    std::optional<std::uint64_t> seed_;
    Json artifacts_ = Json::object();
    Json metrics_ = Json::object();
    std::vector<std::string> warnings_;
};

inline std::string out_path(const CommonOptions& o, const std::string& name) {
    return (std::filesystem::path(o.out) / name).string();
}

inline void ensure_out_dir(const CommonOptions& o) {
    std::error_code ec;
    std::filesystem::create_directories(o.out, ec);
    if (ec || !std::filesystem::is_directory(o.out)) throw ConfigError("out", "cannot create directory '" + o.out + "'");
}

inline TrainConfig resolve_config(const CommonOptions& o) {
    TrainConfig base;
    if (o.scale == "desk") {
        base = TrainConfig::desk();
    } else if (o.scale == "paper") {
        base = TrainConfig::paper();
    } else {
        throw ConfigError("scale", "expected desk or paper");
    }
    TrainConfig cfg = o.config.empty() ? base : load_train_config(o.config, base);
    if (o.seed) cfg.seed = *o.seed;
    if (o.deterministic) cfg.deterministic = true;
    cfg.validate();
    return cfg;
}

inline Dataset resolve_dataset(const DataSpec& spec) {
    if (!spec.path.empty()) return load_dataset(spec.path);
    return make_dataset(spec.name, spec.n, spec.noise_std, spec.seed);
}

inline int cmd_gen_data(const CommonOptions& o, const std::string& name, Eigen::Index n, double noise,
                        std::ostream& out) {
    ensure_out_dir(o);
    RunManifest m("gen-data", o);
    const std::uint64_t seed = o.seed.value_or(1);
    m.set_seed(seed);
    const Dataset ds = make_dataset(name, n, noise, seed);
    const std::string path = out_path(o, "data.csv");
    save_dataset(ds, path);
    m.set_config(Json{{"name", name}, {"n", n}, {"noise_std", noise}, {"seed", seed}});
    m.add_artifact("dataset", path);
    m.add_artifact("dataset_meta", sidecar_path(path));
    out << "wrote " << ds.size() << " points to " << path << "\n";
    m.write(true);
    return kOk;
}

inline int cmd_train(const CommonOptions& o, std::ostream& out) {
    const TrainConfig cfg = resolve_config(o);
    ensure_out_dir(o);
    RunManifest m("train", o);
    m.set_config(to_json(cfg));
    m.set_seed(cfg.seed);
    const Dataset ds = resolve_dataset(cfg.data);
    const EmpiricalTarget data = ds.target();
    data.validate();
    const int d = static_cast<int>(data.dim());
    if (cfg.model_kind() == ModelKind::potential && cfg.ccnf.dim() != d) {
        throw ConfigError("ccnf.z0_mean", "dimension does not match the data");
    }
    Model model = cfg.model_kind() == ModelKind::potential
                      ? Model(init_potential(cfg.seed, d, cfg.net.hidden_layers, cfg.net.hidden_width))
                      : Model(init_field(cfg.seed, d, cfg.net.hidden_layers, cfg.net.hidden_width,
                                         cfg.baseline_time_input));
    Rng rng = Rng::stream(cfg.seed, 1);

    const std::string fault_path = out_path(o, "checkpoint_fault.json");
    TrainHooks hooks;
    hooks.on_log = [&out](int step, double loss) { out << "step " << step << " loss " << loss << "\n"; };
    hooks.on_fault = [&](const Vector& params) {
        Model snapshot = model;
        unflatten(params, network(snapshot).layers());
        save_checkpoint(snapshot, cfg, fault_path);
        return fault_path;
    };
    try {
        TrainResult r = train(model, data, cfg, rng, hooks);
        const std::string ckpt = out_path(o, "checkpoint.json");
        const std::string hist = out_path(o, "loss_history.csv");
        save_checkpoint(r.model, cfg, ckpt);
        csv::write_file(hist, r.history.csv());
        m.add_artifact("checkpoint", ckpt);
        m.add_artifact("loss_history", hist);
        if (!r.history.losses.empty()) {
            m.metrics()["initial_loss"] = r.history.losses.front();
            m.metrics()["final_loss"] = r.history.losses.back();
            m.metrics()["smoothed_initial_loss"] = r.history.head_mean(100);
            m.metrics()["smoothed_final_loss"] = r.history.tail_mean(100);
        }
        m.write(true);
        out << "checkpoint " << ckpt << "\n";
        return kOk;
    } catch (const TrainingFault& f) {
        if (!f.checkpoint_path().empty()) m.add_artifact("fault_checkpoint", f.checkpoint_path());
        m.metrics()["fault"] = f.what();
        m.metrics()["fault_step"] = f.step();
        m.write(false);
        throw;
    }
}

inline StableCcnfParams checkpoint_ccnf(const Checkpoint& c) {
    StableCcnfParams p = c.config.ccnf;
    const Eigen::Index d = network(c.model).input_dim() - 1;
    if (p.dim() != d) throw ConfigError("ccnf.z0_mean", "checkpoint config does not match the network");
    return p;
}

inline PushForwardResult push_checkpoint(const Checkpoint& c, Eigen::Index n, double t_end, double dt, Rng& rng) {
    if (const auto* pot = std::get_if<PotentialNet>(&c.model)) {
        return push_forward(*pot, checkpoint_ccnf(c), n, t_end, dt, rng);
    }
    return push_forward(std::get<FieldNet>(c.model), n, t_end, dt, rng);
}

inline int cmd_sample(const CommonOptions& o, const std::string& checkpoint, Eigen::Index n, double t_end,
                      double dt, std::string csv_path, std::ostream& out) {
    if (n < 0) throw ConfigError("n", "must be >= 0");
    const Checkpoint c = load_checkpoint(checkpoint);
    ensure_out_dir(o);
    RunManifest m("sample", o);
    const std::uint64_t seed = o.seed.value_or(c.config.seed);
    m.set_seed(seed);
    m.set_config(Json{{"checkpoint", checkpoint}, {"n", n}, {"t_end", t_end}, {"dt", dt}});
    Rng rng = Rng::stream(seed, 2);
    const PushForwardResult pf = push_checkpoint(c, n, t_end, dt, rng);
    const bool with_tau = kind_of(c.model) == ModelKind::potential;
    const Eigen::Index dim = with_tau ? network(c.model).input_dim() : network(c.model).output_dim();
    if (csv_path.empty()) csv_path = out_path(o, "trajectories.csv");
    std::string text;
    if (n == 0) {
        BatchTrajectory empty;
        text = trajectory_csv(empty, with_tau, dim);
    } else {
        text = trajectory_csv(pf.trajectory, with_tau, dim);
    }
    csv::write_file(csv_path, text);
    m.add_artifact("trajectories", csv_path);
    m.metrics()["n"] = n;
    m.metrics()["n_diverged"] = pf.n_diverged;
    const double frac = n > 0 ? static_cast<double>(pf.n_diverged) / static_cast<double>(n) : 0.0;
    m.metrics()["divergence_fraction"] = frac;
    if (pf.n_diverged > 0) {
        m.warn(std::to_string(pf.n_diverged) + " of " + std::to_string(n) + " trajectories diverged");
        out << "warning: " << pf.n_diverged << " of " << n << " trajectories diverged\n";
    }
    m.metrics()["divergence_warning"] = frac > 0.5;
    m.write(true);
    return kOk;
}

inline int cmd_grid(const CommonOptions& o, const std::string& checkpoint, std::vector<double> bounds,
                    std::vector<int> resolution, double slice, std::string csv_path, std::ostream& out) {
    if (bounds.size() != 4) throw ConfigError("bounds", "expected z1_min,z1_max,z2_min,z2_max");
    if (resolution.size() != 2) throw ConfigError("resolution", "expected res1,res2");
    const Checkpoint c = load_checkpoint(checkpoint);
    ensure_out_dir(o);
    RunManifest m("grid", o);
    m.set_config(Json{{"checkpoint", checkpoint}, {"bounds", bounds}, {"resolution", resolution}, {"slice", slice}});
    std::function<Vector(const Vector&, double)> field;
    if (const auto* pot = std::get_if<PotentialNet>(&c.model)) {
        if (pot->dim() != 2) throw ConfigError("checkpoint", "grid export needs a 2-D model");
        field = [pot](const Vector& z, double s) { return grad_field(*pot, z, s); };
    } else {
        const auto* f = std::get_if<FieldNet>(&c.model);
        if (f->dim() != 2) throw ConfigError("checkpoint", "grid export needs a 2-D model");
        field = [f](const Vector& z, double s) { return baseline_field(*f, z, s); };
    }
    const FieldGrid g = field_grid(field, {bounds[0], bounds[1], bounds[2], bounds[3]}, resolution[0],
                                   resolution[1], slice);
    if (csv_path.empty()) csv_path = out_path(o, "grid.csv");
    csv::write_file(csv_path, field_grid_csv(g));
    m.add_artifact("grid", csv_path);
    double max_mag = 0.0, mean_mag = 0.0;
    for (double v : g.magnitudes) {
        max_mag = std::max(max_mag, v);
        mean_mag += v;
    }
    m.metrics()["max_magnitude"] = max_mag;
    m.metrics()["mean_magnitude"] = mean_mag / static_cast<double>(g.magnitudes.size());
    m.write(true);
    out << "grid " << csv_path << "\n";
    return kOk;
}

inline int cmd_verify(const CommonOptions& o, const std::string& suite, std::ostream& out) {
    StableCcnfParams p = StableCcnfParams::standard(2);
    if (!o.config.empty()) {
        // Rates come from the config unvalidated so that bad values surface as
        // a failed check rather than a usage error.
        Json j;
        try {
            j = Json::parse(csv::read_file(o.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config", "invalid JSON at byte " + std::to_string(e.byte));
        } catch (const Error& e) {
            throw ConfigError("config", e.what());
        }
        if (j.contains("ccnf")) p = ccnf_params_from_json(j.at("ccnf"), 2);
    }
    ensure_out_dir(o);
    RunManifest m("verify", o);
    m.set_config(Json{{"suite", suite}, {"ccnf", to_json(p)}});
    const VerifyReport r = run_verify(suite, p);
    const std::string path = out_path(o, "verify_report.json");
    csv::write_file(path, to_json(r).dump(2) + "\n");
    m.add_artifact("report", path);
    m.metrics()["pass"] = r.pass();
    m.metrics()["failing"] = r.failing();
    m.write(true);
    for (const auto& c : r.checks) {
        out << (c.pass ? "PASS " : "FAIL ") << c.name << " value=" << c.value << " tol=" << c.tolerance;
        if (!c.detail.empty()) out << " (" << c.detail << ")";
        out << "\n";
    }
    return r.pass() ? kOk : kVerifyFailed;
}

struct EvalOptions {
    std::string checkpoint;
    std::string dataset;
    Eigen::Index n = 2000;
    double dt = 0.01;
};

inline Json evaluate_checkpoint(const Checkpoint& c, const EmpiricalTarget& data, Eigen::Index n, double dt,
                                std::uint64_t seed) {
    data.validate();
    Rng rng = Rng::stream(seed, 3);
    const PushForwardResult pf = push_checkpoint(c, n, 1.5, dt, rng);
    const BatchTrajectory& tr = pf.trajectory;
    const Eigen::Index d = data.dim();
    Json dist = Json::object();
    Json alive = Json::object();
    std::vector<double> values;
    for (double t : {1.0, 1.25, 1.5}) {
        const Matrix s = tr.bounded_states(tr.index_of(t));
        const double v = support_distance(s.topRows(d), data);
        values.push_back(v);
        dist[csv::format_double(t)] = v;
        alive[csv::format_double(t)] = s.cols();
    }
    Json j;
    j["n"] = n;
    j["support_distance"] = dist;
    j["bounded_samples"] = alive;
    j["divergence_fraction"] = n > 0 ? static_cast<double>(pf.n_diverged) / static_cast<double>(n) : 0.0;
    j["ratio_1p5_to_1p0"] = values[2] / values[0];
    if (const auto* pot = std::get_if<PotentialNet>(&c.model)) {
        Matrix pts(d + 1, 0);
        for (double t : {0.0, 1.0, 1.5}) {
            const Matrix s = tr.bounded_states(tr.index_of(t));
            pts.conservativeResize(Eigen::NoChange, pts.cols() + s.cols());
            pts.rightCols(s.cols()) = s;
        }
        const LyapunovReport lr = lyapunov_scan(*pot, pts);
        j["lyapunov"] = Json{{"points", lr.n_points},
                             {"max_derivative", lr.max_derivative},
                             {"min_derivative", lr.min_derivative},
                             {"stationary_fraction", lr.stationary_fraction}};
    } else {
        j["lyapunov"] = nullptr;
    }
    return j;
}

inline int cmd_eval(const CommonOptions& o, const EvalOptions& e, std::ostream& out) {
    const Checkpoint c = load_checkpoint(e.checkpoint);
    const Dataset ds = e.dataset.empty() ? resolve_dataset(c.config.data) : load_dataset(e.dataset);
    ensure_out_dir(o);
    RunManifest m("eval", o);
    const std::uint64_t seed = o.seed.value_or(c.config.seed);
    m.set_seed(seed);
    m.set_config(Json{{"checkpoint", e.checkpoint}, {"dataset", e.dataset}, {"n", e.n}, {"dt", e.dt}});
    const Json report = evaluate_checkpoint(c, ds.target(), e.n, e.dt, seed);
    const std::string path = out_path(o, "eval.json");
    csv::write_file(path, report.dump(2) + "\n");
    m.add_artifact("eval", path);
    m.metrics() = report;
    if (report["divergence_fraction"].get<double>() > 0.5) m.warn("more than half of the samples diverged");
    m.write(true);
    out << report.dump(2) << "\n";
    return kOk;
}

/// Parses `args` (without the program name) and runs the selected command.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Stable autonomous flow matching"};
    app.require_subcommand(1);
    CommonOptions o;
    std::uint64_t seed_value = 0;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON config file");
        sub->add_option("--out", o.out, "Output directory");
        sub->add_option("--seed", seed_value, "Seed override");
        sub->add_flag("--deterministic", o.deterministic, "Fixed-order reductions (always on; recorded in the manifest)");
        sub->add_option("--scale", o.scale, "Preset scale")->check(CLI::IsMember({"desk", "paper"}));
    };

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic 2-D dataset");
    add_common(gen);
    std::string gen_name = "moons";
    Eigen::Index gen_n = 20000;
    double gen_noise = 0.05;
    gen->add_option("--name", gen_name)->check(CLI::IsMember({"moons", "circles"}));
    gen->add_option("--n", gen_n);
    gen->add_option("--noise", gen_noise);

    auto* tr = app.add_subcommand("train", "Train a model");
    add_common(tr);

    auto* smp = app.add_subcommand("sample", "Push base samples through a trained field");
    add_common(smp);
    std::string checkpoint, csv_out;
    Eigen::Index smp_n = 100;
    double t_end = 1.5, dt = 0.01;
    smp->add_option("--checkpoint", checkpoint)->required();
    smp->add_option("--n", smp_n);
    smp->add_option("--t-end", t_end);
    smp->add_option("--dt", dt);
    smp->add_option("--csv", csv_out, "Trajectory CSV path (default OUT/trajectories.csv)");

    auto* grd = app.add_subcommand("grid", "Evaluate a trained field on a grid");
    add_common(grd);
    std::vector<double> bounds{-3.0, 3.0, -3.0, 3.0};
    std::vector<int> resolution{32, 32};
    double slice = 1.0;
    grd->add_option("--checkpoint", checkpoint)->required();
    grd->add_option("--bounds", bounds, "z1_min,z1_max,z2_min,z2_max")->delimiter(',');
    grd->add_option("--resolution", resolution, "res1,res2")->delimiter(',');
    grd->add_option("--slice", slice, "tau (stable) or t (baseline)");
    grd->add_option("--csv", csv_out, "Grid CSV path (default OUT/grid.csv)");

    auto* ver = app.add_subcommand("verify", "Run property suites");
    add_common(ver);
    std::string suite = "all";
    ver->add_option("--suite", suite)->check(CLI::IsMember({"math", "grad", "oracle", "all"}));

    auto* ev = app.add_subcommand("eval", "Support distance and stability metrics");
    add_common(ev);
    EvalOptions eo;
    ev->add_option("--checkpoint", eo.checkpoint)->required();
    ev->add_option("--dataset", eo.dataset, "Dataset CSV (default: regenerate from the checkpoint config)");
    ev->add_option("--n", eo.n);
    ev->add_option("--dt", eo.dt);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }
    for (auto* sub : app.get_subcommands()) {
        if (sub->count("--seed") > 0) o.seed = seed_value;
    }

    try {
        if (*gen) return cmd_gen_data(o, gen_name, gen_n, gen_noise, out);
        if (*tr) return cmd_train(o, out);
        if (*smp) return cmd_sample(o, checkpoint, smp_n, t_end, dt, csv_out, out);
        if (*grd) return cmd_grid(o, checkpoint, bounds, resolution, slice, csv_out, out);
        if (*ver) return cmd_verify(o, suite, out);
        if (*ev) return cmd_eval(o, eo, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << "\n";
        return kUsage;
    } catch (const TrainingFault& e) {
        err << "numeric fault: " << e.what();
        if (!e.checkpoint_path().empty()) err << " (last good parameters in " << e.checkpoint_path() << ")";
        err << "\n";
        return kNumericFault;
    } catch (const NumericFault& e) {
        err << "numeric fault: " << e.what() << "\n";
        return kNumericFault;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}

}  // namespace stableflow::cli
