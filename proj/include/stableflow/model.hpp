#pragma once

#include <concepts>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "stableflow/diffkit.hpp"

namespace stableflow {

/// Scalar potential H(z, tau) > 0 whose negative gradient is the learned
/// autonomous field.
struct PotentialNet {
    DenseNet net;

    Eigen::Index dim() const { return net.input_dim() - 1; }

    static PotentialNet from_net(DenseNet net) {
        if (net.output_dim() != 1) throw ContractError("potential network must have scalar output");
        if (net.output_activation() != Activation::softplus) {
            throw ContractError("potential network needs a softplus output for positivity");
        }
        if (net.input_dim() < 2) throw ContractError("potential network input must be (z, tau)");
        return {std::move(net)};
    }
};

/// Time-conditioned baseline field v(z, t) with no stability structure. With
/// `time_input` off the network sees z only.
struct FieldNet {
    DenseNet net;
    bool time_input = true;

    Eigen::Index dim() const { return net.output_dim(); }

    static FieldNet from_net(DenseNet net, bool time_input) {
        const int expected_in = net.output_dim() + (time_input ? 1 : 0);
        if (net.input_dim() != expected_in) {
            throw ContractError("field network input must be z" + std::string(time_input ? " plus t" : ""));
        }
        return {std::move(net), time_input};
    }
};

enum class ModelKind { potential, field };

inline std::string to_string(ModelKind k) { return k == ModelKind::potential ? "potential" : "field"; }

using Model = std::variant<PotentialNet, FieldNet>;

namespace detail {

inline Vector stack_input(const Vector& z, double s) {
    Vector x(z.size() + 1);
    x.head(z.size()) = z;
    x[z.size()] = s;
    return x;
}

}  // namespace detail

inline double potential(const PotentialNet& m, const Vector& z, double tau) {
    if (z.size() != m.dim()) throw DimensionError("z has wrong dimension for potential network");
    return forward(m.net, detail::stack_input(z, tau))[0];
}

/// v(z, tau) = -grad_{(z, tau)} H(z, tau); length d + 1.
inline Vector grad_field(const PotentialNet& m, const Vector& z, double tau) {
    if (z.size() != m.dim()) throw DimensionError("z has wrong dimension for potential network");
    return -input_grad(m.net, detail::stack_input(z, tau));
}

/// Batched grad_field over stacked (z; tau) columns.
inline Matrix grad_field_batch(const PotentialNet& m, const Matrix& states) {
    return -input_grad_batch(m.net, states);
}

inline Vector baseline_field(const FieldNet& m, const Vector& z, double t) {
    if (z.size() != m.dim()) throw DimensionError("z has wrong dimension for field network");
    if (!m.time_input) return forward(m.net, z);
    return forward(m.net, detail::stack_input(z, t));
}

/// H(x) = 1/2 sum_k a_k (x_k - c_k)^2 over the stacked state x = (z, tau).
/// With a = (lambda_z, ..., lambda_z, lambda_tau) and c = (z', tau1) its
/// negative gradient is exactly the conditional field toward (z', tau1). The
/// curvature a and center c are its parameters, packed as one layer with
/// w = a (1 x D) and b = c.
struct QuadraticPotential {
    Vector curvature;
    Vector center;

    Eigen::Index dim() const { return center.size() - 1; }

    static QuadraticPotential conditional(double lambda_z, double lambda_tau, const Vector& z_target,
                                          double tau_target) {
        QuadraticPotential q;
        q.curvature = Vector::Constant(z_target.size() + 1, lambda_z);
        q.curvature[z_target.size()] = lambda_tau;
        q.center = detail::stack_input(z_target, tau_target);
        return q;
    }
};

/// Anything usable as a gradient-field potential by the losses and the
/// stability diagnostics.
template <class M>
concept GradientPotential = requires(const M& m, const Matrix& states, const LossEvaluator& e) {
    { state_dim(m) } -> std::convertible_to<Eigen::Index>;
    { potential_values(m, states) } -> std::convertible_to<Matrix>;
    { potential_gradients(m, states) } -> std::convertible_to<Matrix>;
    { potential_loss_grad_sum(m, states, e) } -> std::same_as<LossAndGrad>;
};

inline Eigen::Index state_dim(const PotentialNet& m) { return m.net.input_dim(); }

inline Matrix potential_values(const PotentialNet& m, const Matrix& states) {
    return forward_batch(m.net, states);
}

inline Matrix potential_gradients(const PotentialNet& m, const Matrix& states) {
    return input_grad_batch(m.net, states);
}

inline LossAndGrad potential_loss_grad_sum(const PotentialNet& m, const Matrix& states,
                                           const LossEvaluator& e) {
    return loss_param_grad_sum(Tape::record(m.net, states, TapeMode::second_order), e);
}

inline Eigen::Index state_dim(const QuadraticPotential& q) { return q.center.size(); }

inline Matrix potential_values(const QuadraticPotential& q, const Matrix& states) {
    if (states.rows() != q.center.size()) throw DimensionError("state has wrong dimension");
    const Matrix diff = states.colwise() - q.center;
    return 0.5 * (diff.array().square().colwise() * q.curvature.array()).colwise().sum().matrix();
}

inline Matrix potential_gradients(const QuadraticPotential& q, const Matrix& states) {
    if (states.rows() != q.center.size()) throw DimensionError("state has wrong dimension");
    return ((states.colwise() - q.center).array().colwise() * q.curvature.array()).matrix();
}

inline LossAndGrad potential_loss_grad_sum(const QuadraticPotential& q, const Matrix& states,
                                           const LossEvaluator& e) {
    const Matrix diff = states.colwise() - q.center;
    LossPartials p = e(potential_values(q, states), potential_gradients(q, states));
    LossAndGrad out;
    out.grad = {DenseLayer{Matrix::Zero(1, q.curvature.size()), Vector::Zero(q.center.size())}};
    const Eigen::Index batch = states.cols();
    for (Eigen::Index i = 0; i < batch; ++i) {
        const double h_bar = p.d_output.size() > 0 ? p.d_output(0, i) : 0.0;
        for (Eigen::Index k = 0; k < q.center.size(); ++k) {
            const double g_bar = p.d_input_grad.size() > 0 ? p.d_input_grad(k, i) : 0.0;
            out.grad[0].w(0, k) += g_bar * diff(k, i) + h_bar * 0.5 * diff(k, i) * diff(k, i);
            out.grad[0].b[k] -= q.curvature[k] * (g_bar + h_bar * diff(k, i));
        }
    }
    out.loss = p.values.sum();
    out.values = std::move(p.values);
    return out;
}

inline std::vector<int> hidden_stack_dims(int in, int hidden_layers, int hidden_width, int out) {
    if (hidden_layers < 1 || hidden_width < 1) {
        throw ConfigError("net", "hidden_layers and hidden_width must be >= 1");
    }
    std::vector<int> dims{in};
    for (int i = 0; i < hidden_layers; ++i) dims.push_back(hidden_width);
    dims.push_back(out);
    return dims;
}

inline PotentialNet init_potential(std::uint64_t seed, int d, int hidden_layers, int hidden_width) {
    Rng rng(seed);
    return PotentialNet::from_net(DenseNet::glorot_uniform(
        hidden_stack_dims(d + 1, hidden_layers, hidden_width, 1), Activation::softplus,
        Activation::softplus, rng));
}

inline FieldNet init_field(std::uint64_t seed, int d, int hidden_layers, int hidden_width,
                           bool time_input = true) {
    Rng rng(seed);
    return FieldNet::from_net(
        DenseNet::glorot_uniform(hidden_stack_dims(d + (time_input ? 1 : 0), hidden_layers,
                                                   hidden_width, d),
                                 Activation::softplus, Activation::identity, rng),
        time_input);
}

inline Model init(std::uint64_t seed, int d, int hidden_layers, int hidden_width, ModelKind kind) {
    if (kind == ModelKind::potential) return init_potential(seed, d, hidden_layers, hidden_width);
    return init_field(seed, d, hidden_layers, hidden_width);
}

inline const DenseNet& network(const Model& m) {
    return std::visit([](const auto& x) -> const DenseNet& { return x.net; }, m);
}

inline DenseNet& network(Model& m) {
    return std::visit([](auto& x) -> DenseNet& { return x.net; }, m);
}

inline ModelKind kind_of(const Model& m) {
    return std::holds_alternative<PotentialNet>(m) ? ModelKind::potential : ModelKind::field;
}

}  // namespace stableflow
