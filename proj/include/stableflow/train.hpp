#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stableflow/csv.hpp"
#include "stableflow/data.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/loss.hpp"
#include "stableflow/model.hpp"
#include "stableflow/serialization.hpp"

namespace stableflow {

struct NetShape {
    int hidden_layers = 4;
    int hidden_width = 64;
};

struct DataSpec {
    std::string name = "moons";
    Eigen::Index n = 20000;
    double noise_std = 0.05;
    std::uint64_t seed = 1;
    std::string path;  // CSV to load instead of generating, when set
};

/// Training run description. JSON field names mirror the member names.
struct TrainConfig {
    int iterations = 3000;
    int batch_size = 512;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    LossBatchSpec loss;
    StableCcnfParams ccnf = StableCcnfParams::standard(2);
    NetShape net;
    int log_every = 100;
    DataSpec data;
    bool baseline_time_input = true;
    bool deterministic = true;

    ModelKind model_kind() const {
        return loss.loss_kind == LossKind::cfm_ot ? ModelKind::field : ModelKind::potential;
    }

    /// Minutes-scale defaults: 4x64 net, batch 512, 3000 iterations, 20000 points.
    static TrainConfig desk() { return {}; }

    /// 4x500 net, batch 10000, 20000 iterations, lr 1e-3, 100000 points, noise 0.05.
    static TrainConfig paper() {
        TrainConfig c;
        c.iterations = 20000;
        c.batch_size = 10000;
        c.loss.batch_size = 10000;
        c.net = {4, 500};
        c.data.n = 100000;
        return c;
    }

    void validate() const {
        if (iterations < 0) throw ConfigError("iterations", "must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
        if (loss.batch_size != batch_size) throw ConfigError("loss.batch_size", "must equal batch_size");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
        if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be > 0");
        if (log_every < 1) throw ConfigError("log_every", "must be >= 1");
        if (net.hidden_layers < 1) throw ConfigError("net.hidden_layers", "must be >= 1");
        if (net.hidden_width < 1) throw ConfigError("net.hidden_width", "must be >= 1");
        if (data.path.empty()) {
            if (data.name != "moons" && data.name != "circles") {
                throw ConfigError("data.name", "expected moons or circles");
            }
            if (data.n < 1) throw ConfigError("data.n", "must be >= 1");
            if (!(data.noise_std >= 0.0)) throw ConfigError("data.noise_std", "must be >= 0");
        }
        if (model_kind() == ModelKind::potential) {
            try {
                ccnf.validate();
            } catch (const ConfigError& e) {
                throw ConfigError("ccnf." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
            }
            loss.validate(ccnf);
        } else {
            loss.validate();
        }
    }
};

inline Json to_json(const TrainConfig& c) {
    Json j;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_eps"] = c.adam_eps;
    j["seed"] = c.seed;
    j["loss"] = to_json(c.loss);
    if (c.model_kind() == ModelKind::potential) {
        j["ccnf"] = to_json(c.ccnf);
    } else {
        j["sigma_min"] = c.loss.sigma_min;
    }
    j["net"] = Json{{"hidden_layers", c.net.hidden_layers}, {"hidden_width", c.net.hidden_width}};
    j["log_every"] = c.log_every;
    Json data{{"name", c.data.name}, {"n", c.data.n}, {"noise_std", c.data.noise_std}, {"seed", c.data.seed}};
    if (!c.data.path.empty()) data["path"] = c.data.path;
    j["data"] = std::move(data);
    j["baseline_time_input"] = c.baseline_time_input;
    j["deterministic"] = c.deterministic;
    return j;
}

/// Parses and validates a config. Missing fields take the preset defaults;
/// unknown fields are rejected.
inline TrainConfig train_config_from_json(const Json& j, TrainConfig base = TrainConfig::desk()) {
    using detail::read_optional;
    detail::reject_unknown(j,
                           {"iterations", "batch_size", "learning_rate", "weight_decay", "adam_beta1",
                            "adam_beta2", "adam_eps", "seed", "loss", "ccnf", "sigma_min", "net",
                            "log_every", "data", "baseline_time_input", "deterministic"},
                           "");
    TrainConfig c = std::move(base);
    read_optional(j, "iterations", "", c.iterations);
    read_optional(j, "batch_size", "", c.batch_size);
    read_optional(j, "learning_rate", "", c.learning_rate);
    read_optional(j, "weight_decay", "", c.weight_decay);
    read_optional(j, "adam_beta1", "", c.adam_beta1);
    read_optional(j, "adam_beta2", "", c.adam_beta2);
    read_optional(j, "adam_eps", "", c.adam_eps);
    read_optional(j, "seed", "", c.seed);
    read_optional(j, "log_every", "", c.log_every);
    read_optional(j, "baseline_time_input", "", c.baseline_time_input);
    read_optional(j, "deterministic", "", c.deterministic);
    c.loss.batch_size = c.batch_size;
    if (j.contains("loss")) {
        LossBatchSpec s = loss_spec_from_json(j.at("loss"));
        if (!j.at("loss").contains("batch_size")) s.batch_size = c.batch_size;
        c.loss = s;
    }
    if (j.contains("sigma_min")) c.loss.sigma_min = detail::read_field<double>(j, "sigma_min", "");
    if (j.contains("net")) {
        const Json& n = j.at("net");
        detail::reject_unknown(n, {"hidden_layers", "hidden_width"}, "net.");
        read_optional(n, "hidden_layers", "net.", c.net.hidden_layers);
        read_optional(n, "hidden_width", "net.", c.net.hidden_width);
    }
    if (j.contains("data")) {
        const Json& d = j.at("data");
        detail::reject_unknown(d, {"name", "n", "noise_std", "seed", "path"}, "data.");
        read_optional(d, "name", "data.", c.data.name);
        read_optional(d, "n", "data.", c.data.n);
        read_optional(d, "noise_std", "data.", c.data.noise_std);
        read_optional(d, "seed", "data.", c.data.seed);
        read_optional(d, "path", "data.", c.data.path);
    }
    if (j.contains("ccnf")) c.ccnf = ccnf_params_from_json(j.at("ccnf"), 2);
    c.validate();
    return c;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = TrainConfig::desk()) {
    std::string text;
    try {
        text = csv::read_file(path);
    } catch (const Error& e) {
        throw ConfigError("config", e.what());
    }
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config", "invalid JSON at byte " + std::to_string(e.byte));
    }
    return train_config_from_json(j, std::move(base));
}

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    static AdamConfig from(const TrainConfig& c) {
        return {c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay};
    }
};

struct AdamState {
    Vector first_moment;
    Vector second_moment;
    std::int64_t step_count = 0;

    static AdamState zeros(Eigen::Index n) { return {Vector::Zero(n), Vector::Zero(n), 0}; }
};

/// One Adam update with decoupled weight decay:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   params <- params (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
inline void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamConfig& cfg) {
    if (grads.size() != params.size()) throw DimensionError("gradient and parameter sizes differ");
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw DimensionError("Adam state does not match parameter size");
    }
    for (Eigen::Index i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw NumericFault("non-finite gradient at parameter " + std::to_string(i) + " on step " +
                               std::to_string(state.step_count + 1));
        }
    }
    state.step_count += 1;
    const auto t = static_cast<double>(state.step_count);
    state.first_moment = cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grads;
    state.second_moment = cfg.beta2 * state.second_moment + (1.0 - cfg.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    if (cfg.weight_decay != 0.0) params *= (1.0 - cfg.learning_rate * cfg.weight_decay);
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double m_hat = state.first_moment[i] / c1;
        const double v_hat = state.second_moment[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

struct LossHistory {
    std::vector<double> losses;  // loss at step 1, 2, ...

    std::string csv() const {
        std::string out = "step,loss\n";
        for (std::size_t i = 0; i < losses.size(); ++i) {
            out += std::to_string(i + 1) + "," + csv::format_double(losses[i]) + "\n";
        }
        return out;
    }

    /// Mean of the first / last `window` entries.
    double head_mean(std::size_t window) const {
        const std::size_t n = std::min(window, losses.size());
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += losses[i];
        return n ? s / static_cast<double>(n) : 0.0;
    }

    double tail_mean(std::size_t window) const {
        const std::size_t n = std::min(window, losses.size());
        double s = 0.0;
        for (std::size_t i = losses.size() - n; i < losses.size(); ++i) s += losses[i];
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

/// Raised when training hits a numeric fault; the last good parameters were
/// written to `checkpoint_path` when one was configured.
class TrainingFault : public NumericFault {
public:
    TrainingFault(int step, std::string checkpoint_path, const std::string& message)
        : NumericFault("training fault at step " + std::to_string(step) + ": " + message),
          step_(step),
          checkpoint_path_(std::move(checkpoint_path)) {}

    int step() const noexcept { return step_; }
    const std::string& checkpoint_path() const noexcept { return checkpoint_path_; }

private:
    int step_;
    std::string checkpoint_path_;
};

/// Objective over a flat parameter vector: returns (loss, gradient).
using Objective = std::function<std::pair<double, Vector>(const Vector& params)>;

struct TrainHooks {
    std::function<void(int step, double loss)> on_log;
    // Called with the last good parameters when a numeric fault aborts the run;
    // returns the checkpoint path it wrote (or empty).
    std::function<std::string(const Vector& params)> on_fault;
};

/// Adam over `iterations` steps of `objective`. Returns the loss at each step
/// (evaluated before that step's update).
inline LossHistory optimize(Vector& params, const Objective& objective, const AdamConfig& adam,
                            int iterations, int log_every = 100, const TrainHooks& hooks = {}) {
    LossHistory history;
    history.losses.reserve(static_cast<std::size_t>(std::max(iterations, 0)));
    AdamState state = AdamState::zeros(params.size());
    for (int step = 1; step <= iterations; ++step) {
        const Vector last_good = params;
        try {
            auto [loss, grad] = objective(params);
            if (!std::isfinite(loss)) throw NumericFault("non-finite loss " + std::to_string(loss));
            adam_step(params, grad, state, adam);
            if (!params.allFinite()) throw NumericFault("non-finite parameter after update");
            history.losses.push_back(loss);
            if (hooks.on_log && (step % log_every == 0 || step == 1 || step == iterations)) {
                hooks.on_log(step, loss);
            }
        } catch (const NumericFault& e) {
            params = last_good;
            std::string path = hooks.on_fault ? hooks.on_fault(params) : std::string();
            throw TrainingFault(step, std::move(path), e.what());
        }
    }
    return history;
}

struct TrainResult {
    Model model;
    LossHistory history;
};

/// Minibatch training of the model selected by cfg.loss.loss_kind.
inline TrainResult train(Model model, const EmpiricalTarget& data, const TrainConfig& cfg, Rng& rng,
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    data.validate();
    DenseNet& net = network(model);
    LayerParams shape = net.layers();
    Vector params = flatten(net.layers());

    Objective objective;
    if (auto* pot = std::get_if<PotentialNet>(&model)) {
        if (cfg.model_kind() != ModelKind::potential) throw ConfigError("loss.loss_kind", "potential model needs a stable loss");
        objective = [&, pot](const Vector& theta) {
            unflatten(theta, pot->net.layers());
            LossResult r = cfg.loss.loss_kind == LossKind::auto_normalized
                               ? auto_cfm_loss(*pot, cfg.ccnf, data, cfg.loss, rng)
                               : auto_cfm_loss_unnormalized(*pot, cfg.ccnf, data, cfg.loss, rng);
            return std::pair{r.loss, flatten(r.grad)};
        };
    } else {
        auto* field = std::get_if<FieldNet>(&model);
        if (cfg.model_kind() != ModelKind::field) throw ConfigError("loss.loss_kind", "field model needs cfm_ot");
        objective = [&, field](const Vector& theta) {
            unflatten(theta, field->net.layers());
            LossResult r = cfm_ot_loss(*field, data, cfg.loss, rng);
            return std::pair{r.loss, flatten(r.grad)};
        };
    }
    TrainResult out{model, {}};
    try {
        out.history = optimize(params, objective, AdamConfig::from(cfg), cfg.iterations, cfg.log_every, hooks);
    } catch (...) {
        unflatten(params, net.layers());
        throw;
    }
    unflatten(params, net.layers());
    out.model = std::move(model);
    return out;
}

/// Stored model plus the configuration it was trained with.
struct Checkpoint {
    Model model;
    TrainConfig config;
};

inline Json checkpoint_json(const Model& model, const TrainConfig& cfg) {
    Json j;
    j["kind"] = to_string(kind_of(model));
    const DenseNet& net = network(model);
    j["d"] = kind_of(model) == ModelKind::potential ? net.input_dim() - 1 : net.output_dim();
    if (const auto* f = std::get_if<FieldNet>(&model)) j["time_input"] = f->time_input;
    const Json net_json = to_json(net);
    for (const auto& [k, v] : net_json.items()) j[k] = v;
    j["config"] = to_json(cfg);
    return j;
}

inline void save_checkpoint(const Model& model, const TrainConfig& cfg, const std::string& path) {
    csv::write_file(path, checkpoint_json(model, cfg).dump() + "\n");
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::min<std::size_t>(e.byte, text.size()), "malformed checkpoint");
    }
    try {
        const std::string kind = detail::read_field<std::string>(j, "kind", "");
        DenseNet net = dense_net_from_json(j);
        Checkpoint c;
        if (kind == "potential") {
            c.model = PotentialNet::from_net(std::move(net));
        } else if (kind == "field") {
            c.model = FieldNet::from_net(std::move(net), j.value("time_input", true));
        } else {
            throw ConfigError("kind", "expected potential or field");
        }
        const auto d = detail::read_field<Eigen::Index>(j, "d", "");
        if (d != (kind == "potential" ? network(c.model).input_dim() - 1 : network(c.model).output_dim())) {
            throw ConfigError("d", "does not match the network shape");
        }
        if (j.contains("config")) c.config = train_config_from_json(j.at("config"));
        return c;
    } catch (const Error& e) {
        if (dynamic_cast<const ParseError*>(&e)) throw;
        throw ParseError(text.size(), std::string("invalid checkpoint contents: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(text.size(), std::string("invalid checkpoint contents: ") + e.what());
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_string(csv::read_file(path));
}

}  // namespace stableflow
