#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "stableflow/ccnf.hpp"
#include "stableflow/diffkit.hpp"
#include "stableflow/errors.hpp"
#include "stableflow/loss.hpp"
#include "stableflow/model.hpp"

namespace stableflow {

using Json = nlohmann::ordered_json;

namespace detail {

inline Json vector_json(const Vector& v) {
    Json a = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

// Reads `key` from `obj` as T, reporting `prefix + key` on a type mismatch.
template <class T>
T read_field(const Json& obj, const std::string& key, const std::string& prefix) {
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(prefix + key, std::string("missing or wrong type (") + e.what() + ")");
    }
}

template <class T>
void read_optional(const Json& obj, const std::string& key, const std::string& prefix, T& out) {
    if (obj.contains(key)) out = read_field<T>(obj, key, prefix);
}

inline Vector read_vector(const Json& obj, const std::string& key, const std::string& prefix) {
    const auto values = read_field<std::vector<double>>(obj, key, prefix);
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline void reject_unknown(const Json& obj, const std::set<std::string>& known, const std::string& prefix) {
    if (!obj.is_object()) throw ConfigError(prefix.empty() ? "config" : prefix, "expected a JSON object");
    for (const auto& item : obj.items()) {
        if (!known.contains(item.key())) throw ConfigError(prefix + item.key(), "unknown field");
    }
}

}  // namespace detail

inline Json to_json(const StableCcnfParams& p) {
    Json j;
    j["lambda_z"] = p.lambda_z;
    j["lambda_tau"] = p.lambda_tau;
    j["tau0"] = p.tau0;
    j["tau1"] = p.tau1;
    j["z0_mean"] = detail::vector_json(p.z0_mean);
    j["sigma0_diag"] = detail::vector_json(p.sigma0_diag);
    return j;
}

/// Missing entries keep the defaults of StableCcnfParams::standard(d).
inline StableCcnfParams ccnf_params_from_json(const Json& j, Eigen::Index d, const std::string& prefix = "ccnf.") {
    detail::reject_unknown(j, {"lambda_z", "lambda_tau", "tau0", "tau1", "z0_mean", "sigma0_diag"}, prefix);
    StableCcnfParams p = StableCcnfParams::standard(d);
    detail::read_optional(j, "lambda_z", prefix, p.lambda_z);
    detail::read_optional(j, "lambda_tau", prefix, p.lambda_tau);
    detail::read_optional(j, "tau0", prefix, p.tau0);
    detail::read_optional(j, "tau1", prefix, p.tau1);
    if (j.contains("z0_mean")) p.z0_mean = detail::read_vector(j, "z0_mean", prefix);
    if (j.contains("sigma0_diag")) p.sigma0_diag = detail::read_vector(j, "sigma0_diag", prefix);
    return p;
}

inline Json to_json(const LossBatchSpec& s) {
    Json j;
    j["batch_size"] = s.batch_size;
    j["loss_kind"] = to_string(s.loss_kind);
    j["sigma_min"] = s.sigma_min;
    j["eps_tau_guard"] = s.eps_tau_guard;
    return j;
}

inline LossBatchSpec loss_spec_from_json(const Json& j, const std::string& prefix = "loss.") {
    detail::reject_unknown(j, {"batch_size", "loss_kind", "sigma_min", "eps_tau_guard"}, prefix);
    LossBatchSpec s;
    detail::read_optional(j, "batch_size", prefix, s.batch_size);
    if (j.contains("loss_kind")) s.loss_kind = loss_kind_from_string(detail::read_field<std::string>(j, "loss_kind", prefix));
    detail::read_optional(j, "sigma_min", prefix, s.sigma_min);
    detail::read_optional(j, "eps_tau_guard", prefix, s.eps_tau_guard);
    return s;
}

/// {"layer_dims", "hidden_activation", "output_activation", "layers": [{"w", "b"}]}
inline Json to_json(const DenseNet& net) {
    Json j;
    j["layer_dims"] = net.layer_dims();
    j["hidden_activation"] = to_string(net.hidden_activation());
    j["output_activation"] = to_string(net.output_activation());
    Json layers = Json::array();
    for (const auto& l : net.layers()) {
        Json w = Json::array();
        for (Eigen::Index r = 0; r < l.w.rows(); ++r) {
            Json row = Json::array();
            for (Eigen::Index c = 0; c < l.w.cols(); ++c) row.push_back(l.w(r, c));
            w.push_back(std::move(row));
        }
        layers.push_back(Json{{"w", std::move(w)}, {"b", detail::vector_json(l.b)}});
    }
    j["layers"] = std::move(layers);
    return j;
}

inline DenseNet dense_net_from_json(const Json& j) {
    const auto dims = detail::read_field<std::vector<int>>(j, "layer_dims", "");
    const auto hidden = activation_from_string(detail::read_field<std::string>(j, "hidden_activation", ""));
    const auto output = activation_from_string(detail::read_field<std::string>(j, "output_activation", ""));
    if (hidden != Activation::softplus) throw ConfigError("hidden_activation", "only softplus is supported");
    DenseNet net(dims, hidden, output);
    const Json& layers = j.at("layers");
    if (!layers.is_array() || layers.size() != net.num_layers()) {
        throw ConfigError("layers", "expected one entry per weight layer");
    }
    for (std::size_t k = 0; k < net.num_layers(); ++k) {
        auto& l = net.layers()[k];
        const auto w = detail::read_field<std::vector<std::vector<double>>>(layers[k], "w", "layers.");
        const auto b = detail::read_field<std::vector<double>>(layers[k], "b", "layers.");
        if (static_cast<Eigen::Index>(w.size()) != l.w.rows() ||
            static_cast<Eigen::Index>(b.size()) != l.b.size()) {
            throw ConfigError("layers", "layer " + std::to_string(k) + " has the wrong shape");
        }
        for (Eigen::Index r = 0; r < l.w.rows(); ++r) {
            if (static_cast<Eigen::Index>(w[static_cast<std::size_t>(r)].size()) != l.w.cols()) {
                throw ConfigError("layers", "layer " + std::to_string(k) + " has a ragged weight row");
            }
            for (Eigen::Index c = 0; c < l.w.cols(); ++c) l.w(r, c) = w[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            l.b[r] = b[static_cast<std::size_t>(r)];
        }
    }
    if (!net.all_finite()) throw ConfigError("layers", "non-finite weight");
    return net;
}

inline Json to_json(const GradEquivalenceReport& r) {
    Json details;
    details["max_rel_err_refined"] = r.max_rel_err_refined;
    details["converging"] = r.converging;
    details["loss_time"] = r.loss_time;
    details["loss_tau"] = r.loss_tau;
    details["quadrature_n"] = r.quadrature_n;
    details["eps"] = r.eps;
    details["tolerance"] = r.tolerance;
    return Json{{"check", r.check}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}, {"details", details}};
}

}  // namespace stableflow
