#pragma once

// Dense softplus networks with exact first- and second-order derivatives.
//
// Inputs are stored column-wise: a batch is an (input_dim x batch) matrix.
// Besides the usual forward pass, a Tape in second-order mode also records
// the reverse sweep that produces the input gradient dH/dx of a scalar
// network. Losses that depend on that input gradient (the gradient-field
// losses) are then differentiated with respect to the weights by running a
// reverse sweep through the recorded reverse sweep.

#include <cmath>
#include <limits>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stableflow/errors.hpp"
#include "stableflow/rng.hpp"

namespace stableflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation { softplus, identity };

inline std::string to_string(Activation a) {
    return a == Activation::softplus ? "softplus" : "identity";
}

inline Activation activation_from_string(const std::string& name) {
    if (name == "softplus") return Activation::softplus;
    if (name == "identity") return Activation::identity;
    throw ConfigError("activation", "unknown activation '" + name + "'");
}

namespace detail {

// log(1 + e^x) without overflow for large |x|. Floored at the smallest
// positive subnormal so the result stays strictly positive below x ~ -745.
inline double softplus(double x) {
    const double v = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return std::max(v, std::numeric_limits<double>::denorm_min());
}

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Matrix apply(Activation a, const Matrix& pre) {
    if (a == Activation::identity) return pre;
    return pre.unaryExpr([](double v) { return softplus(v); });
}

inline Matrix first_derivative(Activation a, const Matrix& pre) {
    if (a == Activation::identity) return Matrix::Ones(pre.rows(), pre.cols());
    return pre.unaryExpr([](double v) { return logistic(v); });
}

inline Matrix second_derivative(Activation a, const Matrix& pre) {
    if (a == Activation::identity) return Matrix::Zero(pre.rows(), pre.cols());
    return pre.unaryExpr([](double v) {
        const double s = logistic(v);
        return s * (1.0 - s);
    });
}

}  // namespace detail

struct DenseLayer {
    Matrix w;  // (out x in)
    Vector b;  // (out)
};

/// Parameter-shaped container; used for both weights and their gradients.
using LayerParams = std::vector<DenseLayer>;

/// Fully connected network. Layer k maps layer_dims[k] -> layer_dims[k+1];
/// every layer but the last uses the hidden activation.
class DenseNet {
public:
    DenseNet() = default;

    DenseNet(std::vector<int> layer_dims, Activation hidden, Activation output)
        : dims_(std::move(layer_dims)), hidden_(hidden), output_(output) {
        if (dims_.size() < 2) throw ContractError("DenseNet needs at least input and output dims");
        for (int d : dims_) {
            if (d <= 0) throw ContractError("DenseNet layer dims must be positive");
        }
        for (std::size_t k = 0; k + 1 < dims_.size(); ++k) {
            layers_.push_back({Matrix::Zero(dims_[k + 1], dims_[k]), Vector::Zero(dims_[k + 1])});
        }
    }

    /// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
    static DenseNet glorot_uniform(std::vector<int> layer_dims, Activation hidden,
                                   Activation output, Rng& rng) {
        DenseNet net(std::move(layer_dims), hidden, output);
        for (auto& layer : net.layers_) {
            const double a = std::sqrt(6.0 / static_cast<double>(layer.w.rows() + layer.w.cols()));
            for (Eigen::Index j = 0; j < layer.w.cols(); ++j) {
                for (Eigen::Index i = 0; i < layer.w.rows(); ++i) {
                    layer.w(i, j) = rng.uniform(-a, a);
                }
            }
        }
        return net;
    }

    const std::vector<int>& layer_dims() const noexcept { return dims_; }
    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    std::size_t num_layers() const noexcept { return layers_.size(); }
    Activation hidden_activation() const noexcept { return hidden_; }
    Activation output_activation() const noexcept { return output_; }

    Activation activation(std::size_t layer) const {
        return layer + 1 == layers_.size() ? output_ : hidden_;
    }

    const LayerParams& layers() const noexcept { return layers_; }
    LayerParams& layers() noexcept { return layers_; }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
        return n;
    }

    bool all_finite() const {
        for (const auto& l : layers_) {
            if (!l.w.allFinite() || !l.b.allFinite()) return false;
        }
        return true;
    }

    bool operator==(const DenseNet& other) const {
        if (dims_ != other.dims_ || hidden_ != other.hidden_ || output_ != other.output_) return false;
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            if (layers_[k].w != other.layers_[k].w || layers_[k].b != other.layers_[k].b) return false;
        }
        return true;
    }

private:
    std::vector<int> dims_;
    Activation hidden_ = Activation::softplus;
    Activation output_ = Activation::identity;
    LayerParams layers_;
};

/// Zero-valued parameters with the same shapes as `net`.
inline LayerParams zeros_like(const DenseNet& net) {
    LayerParams out;
    for (const auto& l : net.layers()) {
        out.push_back({Matrix::Zero(l.w.rows(), l.w.cols()), Vector::Zero(l.b.size())});
    }
    return out;
}

// Flat ordering: for each layer, w in column-major order, then b.
inline Vector flatten(const LayerParams& params) {
    std::size_t n = 0;
    for (const auto& l : params) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    Vector out(static_cast<Eigen::Index>(n));
    Eigen::Index pos = 0;
    for (const auto& l : params) {
        out.segment(pos, l.w.size()) = l.w.reshaped();
        pos += l.w.size();
        out.segment(pos, l.b.size()) = l.b;
        pos += l.b.size();
    }
    return out;
}

inline void unflatten(const Vector& flat, LayerParams& params) {
    Eigen::Index pos = 0;
    for (auto& l : params) {
        if (pos + l.w.size() + l.b.size() > flat.size()) {
            throw DimensionError("flat parameter vector too short");
        }
        l.w.reshaped() = flat.segment(pos, l.w.size());
        pos += l.w.size();
        l.b = flat.segment(pos, l.b.size());
        pos += l.b.size();
    }
    if (pos != flat.size()) throw DimensionError("flat parameter vector too long");
}

inline void add_into(LayerParams& acc, const LayerParams& x) {
    for (std::size_t k = 0; k < acc.size(); ++k) {
        acc[k].w += x[k].w;
        acc[k].b += x[k].b;
    }
}

inline void scale(LayerParams& p, double s) {
    for (auto& l : p) {
        l.w *= s;
        l.b *= s;
    }
}

enum class TapeMode { first_order, second_order };

/// Recorded evaluation of a network on a batch of inputs.
///
/// first_order: forward activations only; supports parameter gradients of
/// losses that depend on the network output.
/// second_order: additionally records the reverse sweep for dH/dx (requires a
/// scalar-output network); supports parameter gradients of losses that depend
/// on the input gradient as well.
///
/// A Tape refers to the network it was recorded from; the network must
/// outlive the tape and stay unmodified.
class Tape {
public:
    static Tape record(const DenseNet& net, const Matrix& inputs, TapeMode mode) {
        if (inputs.rows() != net.input_dim()) {
            throw DimensionError("input has " + std::to_string(inputs.rows()) +
                                 " rows, network expects " + std::to_string(net.input_dim()));
        }
        if (mode == TapeMode::second_order && net.output_dim() != 1) {
            throw ContractError("input gradient requires a scalar-output network");
        }
        Tape tape;
        tape.net_ = &net;
        tape.mode_ = mode;
        tape.inputs_ = inputs;
        const std::size_t n_layers = net.num_layers();
        tape.pre_.resize(n_layers);
        tape.act_.resize(n_layers);
        const Matrix* prev = &tape.inputs_;
        for (std::size_t k = 0; k < n_layers; ++k) {
            const auto& l = net.layers()[k];
            tape.pre_[k] = (l.w * *prev).colwise() + l.b;
            tape.act_[k] = detail::apply(net.activation(k), tape.pre_[k]);
            prev = &tape.act_[k];
        }
        if (mode == TapeMode::second_order) {
            // delta_k = dH/dpre_k; u_k = W_{k+1}^T delta_{k+1} = dH/da_k.
            tape.delta_.resize(n_layers);
            tape.upstream_.resize(n_layers);
            const std::size_t last = n_layers - 1;
            tape.upstream_[last] = Matrix::Ones(1, inputs.cols());
            tape.delta_[last] = detail::first_derivative(net.activation(last), tape.pre_[last]);
            for (std::size_t k = last; k-- > 0;) {
                tape.upstream_[k] = net.layers()[k + 1].w.transpose() * tape.delta_[k + 1];
                tape.delta_[k] = detail::first_derivative(net.activation(k), tape.pre_[k])
                                     .cwiseProduct(tape.upstream_[k]);
            }
            tape.input_grad_ = net.layers()[0].w.transpose() * tape.delta_[0];
        }
        return tape;
    }

    TapeMode mode() const noexcept { return mode_; }
    const DenseNet& net() const noexcept { return *net_; }
    const Matrix& inputs() const noexcept { return inputs_; }
    Eigen::Index batch_size() const noexcept { return inputs_.cols(); }

    // (output_dim x batch)
    const Matrix& output() const { return act_.back(); }

    // (input_dim x batch); gradient of the scalar output per column.
    const Matrix& input_grad() const {
        if (mode_ != TapeMode::second_order) {
            throw ContractError("input gradient needs a second_order tape");
        }
        return input_grad_;
    }

    /// Re-runs the forward pass and checks it reproduces the recorded output
    /// bit for bit.
    bool replay_matches() const {
        Tape again = record(*net_, inputs_, TapeMode::first_order);
        return again.output() == output();
    }

private:
    friend struct TapeAccess;

    const DenseNet* net_ = nullptr;
    TapeMode mode_ = TapeMode::first_order;
    Matrix inputs_;
    std::vector<Matrix> pre_;
    std::vector<Matrix> act_;
    std::vector<Matrix> delta_;
    std::vector<Matrix> upstream_;
    Matrix input_grad_;
};

struct TapeAccess {
    static const std::vector<Matrix>& pre(const Tape& t) { return t.pre_; }
    static const std::vector<Matrix>& act(const Tape& t) { return t.act_; }
    static const std::vector<Matrix>& delta(const Tape& t) { return t.delta_; }
    static const std::vector<Matrix>& upstream(const Tape& t) { return t.upstream_; }
};

inline Vector forward(const DenseNet& net, const Vector& x) {
    return Tape::record(net, x, TapeMode::first_order).output().col(0);
}

inline Matrix forward_batch(const DenseNet& net, const Matrix& inputs) {
    return Tape::record(net, inputs, TapeMode::first_order).output();
}

inline Vector input_grad(const DenseNet& net, const Vector& x) {
    if (net.output_dim() != 1) throw ContractError("input gradient requires a scalar-output network");
    return Tape::record(net, x, TapeMode::second_order).input_grad().col(0);
}

inline Matrix input_grad_batch(const DenseNet& net, const Matrix& inputs) {
    return Tape::record(net, inputs, TapeMode::second_order).input_grad();
}

/// Per-sample loss values and their partial derivatives with respect to the
/// recorded network output and (second order only) the input gradient.
struct LossPartials {
    RowVector values;      // (batch)
    Matrix d_output;       // (output_dim x batch), may be empty when unused
    Matrix d_input_grad;   // (input_dim x batch), empty for first-order losses
};

/// Evaluator signature: (output, input_grad) -> partials. For first-order
/// tapes the input_grad argument is an empty matrix.
using LossEvaluator = std::function<LossPartials(const Matrix& output, const Matrix& input_grad)>;

struct LossAndGrad {
    double loss = 0.0;  // sum of per-sample values (mean for the batch-mean wrappers)
    LayerParams grad;   // d(loss)/d(params), same reduction as `loss`
    RowVector values;   // per-sample values
};

namespace detail {

// Adds the parameter gradient of sum_i l_i to `grad`, given dl/dH and dl/dg per
// column, where g = dH/dx is the recorded reverse sweep.
inline void accumulate_param_grad(const Tape& tape, const Matrix& d_output,
                                  const Matrix& d_input_grad, LayerParams& grad) {
    const DenseNet& net = tape.net();
    const auto& pre = TapeAccess::pre(tape);
    const auto& act = TapeAccess::act(tape);
    const std::size_t n_layers = net.num_layers();
    const Eigen::Index batch = tape.batch_size();

    // Adjoints of the pre-activations collected from the reverse-sweep part.
    std::vector<Matrix> pre_bar(n_layers);
    for (std::size_t k = 0; k < n_layers; ++k) pre_bar[k] = Matrix::Zero(pre[k].rows(), batch);

    if (d_input_grad.size() > 0) {
        const auto& delta = TapeAccess::delta(tape);
        const auto& upstream = TapeAccess::upstream(tape);
        // g = W_0^T delta_0
        grad[0].w.noalias() += delta[0] * d_input_grad.transpose();
        Matrix delta_bar = net.layers()[0].w * d_input_grad;
        for (std::size_t k = 0; k < n_layers; ++k) {
            const Matrix s1 = detail::first_derivative(net.activation(k), pre[k]);
            const Matrix s2 = detail::second_derivative(net.activation(k), pre[k]);
            // delta_k = s'(pre_k) * u_k
            pre_bar[k] += s2.cwiseProduct(upstream[k]).cwiseProduct(delta_bar);
            if (k + 1 == n_layers) break;
            const Matrix up_bar = s1.cwiseProduct(delta_bar);
            // u_k = W_{k+1}^T delta_{k+1}
            grad[k + 1].w.noalias() += delta[k + 1] * up_bar.transpose();
            delta_bar = net.layers()[k + 1].w * up_bar;
        }
    }

    // Ordinary backpropagation through the forward pass.
    Matrix act_bar = d_output.size() > 0 ? d_output : Matrix::Zero(net.output_dim(), batch);
    for (std::size_t k = n_layers; k-- > 0;) {
        pre_bar[k] += detail::first_derivative(net.activation(k), pre[k]).cwiseProduct(act_bar);
        grad[k].b += pre_bar[k].rowwise().sum();
        const Matrix& below = k == 0 ? tape.inputs() : act[k - 1];
        grad[k].w.noalias() += pre_bar[k] * below.transpose();
        if (k > 0) act_bar = net.layers()[k].w.transpose() * pre_bar[k];
    }
}

inline void check_partials(const Tape& tape, const LossPartials& p) {
    const Eigen::Index batch = tape.batch_size();
    if (p.values.size() != batch) throw DimensionError("loss evaluator returned wrong number of values");
    if (p.d_output.size() > 0 &&
        (p.d_output.rows() != tape.net().output_dim() || p.d_output.cols() != batch)) {
        throw DimensionError("loss evaluator returned wrong d_output shape");
    }
    if (p.d_input_grad.size() > 0 &&
        (p.d_input_grad.rows() != tape.net().input_dim() || p.d_input_grad.cols() != batch)) {
        throw DimensionError("loss evaluator returned wrong d_input_grad shape");
    }
}

}  // namespace detail

/// Parameter gradient of a loss that may depend on the input gradient of a
/// scalar network. Requires a second_order tape. Returns the gradient of the
/// *sum* of per-sample values; callers divide by the batch size.
inline LossAndGrad loss_param_grad_sum(const Tape& tape, const LossEvaluator& evaluator) {
    if (tape.mode() != TapeMode::second_order) {
        throw ContractError("loss_param_grad requires a tape recorded in second_order mode");
    }
    LossPartials p = evaluator(tape.output(), tape.input_grad());
    detail::check_partials(tape, p);
    LossAndGrad out;
    out.grad = zeros_like(tape.net());
    detail::accumulate_param_grad(tape, p.d_output, p.d_input_grad, out.grad);
    out.loss = p.values.sum();
    out.values = std::move(p.values);
    return out;
}

/// Mean-loss version of loss_param_grad_sum over a batch of inputs.
inline LossAndGrad loss_param_grad(const DenseNet& net, const Matrix& inputs,
                                   const LossEvaluator& evaluator) {
    Tape tape = Tape::record(net, inputs, TapeMode::second_order);
    LossAndGrad out = loss_param_grad_sum(tape, evaluator);
    const double inv = 1.0 / static_cast<double>(inputs.cols());
    out.loss *= inv;
    scale(out.grad, inv);
    return out;
}

/// Parameter gradient for losses of the network output only (works on any tape).
inline LossAndGrad output_param_grad_sum(const Tape& tape, const LossEvaluator& evaluator) {
    LossPartials p = evaluator(tape.output(), Matrix());
    detail::check_partials(tape, p);
    if (p.d_input_grad.size() > 0) {
        throw ContractError("first-order loss returned an input-gradient partial");
    }
    LossAndGrad out;
    out.grad = zeros_like(tape.net());
    detail::accumulate_param_grad(tape, p.d_output, Matrix(), out.grad);
    out.loss = p.values.sum();
    out.values = std::move(p.values);
    return out;
}

inline LossAndGrad output_param_grad(const DenseNet& net, const Matrix& inputs,
                                     const LossEvaluator& evaluator) {
    Tape tape = Tape::record(net, inputs, TapeMode::first_order);
    LossAndGrad out = output_param_grad_sum(tape, evaluator);
    const double inv = 1.0 / static_cast<double>(inputs.cols());
    out.loss *= inv;
    scale(out.grad, inv);
    return out;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x,
                               double h) {
    if (!(h > 0.0)) throw DomainError("finite difference step must be positive");
    Vector grad(x.size());
    Vector probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericFault("non-finite function value in finite difference at coordinate " +
                               std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace stableflow
