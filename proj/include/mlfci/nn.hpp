#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mlfci/common.hpp"
#include "mlfci/panel.hpp"
#include "mlfci/rng.hpp"

namespace mlfci::nn {

enum class Activation { ReLU };
enum class InitScheme { HeUniform };

struct MlpArchitecture {
    int input_dim = 1;
    std::vector<int> hidden_widths{4, 4, 4};
    Activation activation = Activation::ReLU;

    void validate() const {
        if (input_dim <= 0) throw UsageError("mlp: input_dim must be positive");
        if (hidden_widths.empty()) throw UsageError("mlp: need at least one hidden layer");
        for (int w : hidden_widths)
            if (w <= 0) throw UsageError("mlp: hidden widths must be positive");
    }

    /// Layer sizes including input and the scalar output.
    std::vector<int> sizes() const {
        std::vector<int> s{input_dim};
        s.insert(s.end(), hidden_widths.begin(), hidden_widths.end());
        s.push_back(1);
        return s;
    }

    bool operator==(const MlpArchitecture&) const = default;
};

struct TrainConfig {
    double learning_rate = 0.001;
    int epochs = 100;
    int batch_size = 10000;  // clamped to the sample size
    double l2_penalty = 0.0;
    std::uint64_t seed = 0;
    InitScheme init_scheme = InitScheme::HeUniform;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw UsageError("train: learning_rate must be finite and > 0");
        if (epochs < 0) throw UsageError("train: epochs must be >= 0");
        if (batch_size <= 0) throw UsageError("train: batch_size must be positive");
        if (!(l2_penalty >= 0.0)) throw UsageError("train: l2_penalty must be >= 0");
    }
};

struct Layer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

/// Adam first/second moments mirror the layer shapes.
struct AdamState {
    std::vector<Layer> m;
    std::vector<Layer> v;
    std::int64_t step = 0;
};

struct TrainingMeta {
    int epochs_run = 0;
    double final_mse = 0.0;
    std::vector<double> epoch_loss;  // mean mini-batch loss per epoch
};

struct MlpModel {
    MlpArchitecture arch;
    std::vector<Layer> layers;
    AdamState adam;
    TrainingMeta meta;
    std::uint64_t seed = 0;

    std::size_t n_params() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }

    bool all_finite() const {
        for (const auto& l : layers)
            if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
        return true;
    }
};

namespace detail {

inline std::vector<Layer> zero_like(const std::vector<Layer>& layers) {
    std::vector<Layer> out;
    out.reserve(layers.size());
    for (const auto& l : layers)
        out.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
    return out;
}

constexpr std::uint64_t kInitStream = 0x5eed'1417'0000ULL;  // salt for the initialisation stream

// Forward pass over a column batch (d x B), keeping pre-activations.
struct Trace {
    const Matrix* input = nullptr;
    std::vector<Matrix> pre;   // pre-activation per layer
    std::vector<Matrix> post;  // post[l] = activation of layer l (hidden layers only)

    const Matrix& layer_input(std::size_t l) const { return l == 0 ? *input : post[l - 1]; }
};

inline Eigen::RowVectorXd forward(const std::vector<Layer>& layers, const Matrix& x, Trace* trace) {
    if (trace) {
        trace->input = &x;
        trace->pre.resize(layers.size());
        trace->post.resize(layers.size() - 1);
    }
    Matrix a;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Matrix z = layers[l].weight * (l == 0 ? x : a);
        z.colwise() += layers[l].bias;
        if (l + 1 == layers.size()) {
            if (trace) trace->pre[l] = z;
            return z.row(0);
        }
        a = z.cwiseMax(0.0);
        if (trace) {
            trace->pre[l] = std::move(z);
            trace->post[l] = a;
        }
    }
    return {};
}

// Gradient of mean squared error plus l2 * sum ||W||^2 (weights only).
inline double loss_and_grad(const std::vector<Layer>& layers, const Trace& tr, const Eigen::RowVectorXd& yhat,
                            const Eigen::RowVectorXd& y, double l2, std::vector<Layer>& grad) {
    const double B = static_cast<double>(y.size());
    const Eigen::RowVectorXd resid = yhat - y;
    double loss = resid.squaredNorm() / B;
    Matrix delta = (2.0 / B) * resid;  // 1 x B
    for (std::size_t l = layers.size(); l-- > 0;) {
        grad[l].weight.noalias() = delta * tr.layer_input(l).transpose();
        grad[l].bias = delta.rowwise().sum().transpose();
        if (l2 > 0.0) {
            grad[l].weight += 2.0 * l2 * layers[l].weight;
            loss += l2 * layers[l].weight.squaredNorm();
        }
        if (l > 0) {
            Matrix back = layers[l].weight.transpose() * delta;
            delta = back.cwiseProduct((tr.pre[l - 1].array() > 0.0).cast<double>().matrix());
        }
    }
    return loss;
}

inline void adam_update(std::vector<Layer>& layers, AdamState& st, const std::vector<Layer>& grad,
                        const TrainConfig& cfg) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const double step = cfg.learning_rate * std::sqrt(bc2) / bc1;
    const double eps = cfg.epsilon * std::sqrt(bc2);
    auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        param.array() -= step * m.array() / (v.array().sqrt() + eps);
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
        update(layers[l].weight, st.m[l].weight, st.v[l].weight, grad[l].weight);
        update(layers[l].bias, st.m[l].bias, st.v[l].bias, grad[l].bias);
    }
}

inline void check_features(const Panel& panel, const MlpArchitecture& arch) {
    if (panel.n_obs() == 0) throw DataError("train: empty panel");
    if (panel.dim() != arch.input_dim)
        throw UsageError("train: panel has " + std::to_string(panel.dim()) + " characteristics, architecture expects " +
                         std::to_string(arch.input_dim));
    panel.validate_finite();
}

inline void run_epochs(MlpModel& model, const Panel& panel, int epochs, const TrainConfig& cfg) {
    const Eigen::Index n = panel.n_obs();
    const Eigen::Index batch = std::min<Eigen::Index>(cfg.batch_size, n);
    const Matrix& X = panel.features();
    const Eigen::RowVectorXd Y = panel.returns().transpose();
    std::vector<Layer> grad = zero_like(model.layers);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    Trace tr;
    Matrix xb;
    Eigen::RowVectorXd yb;
    for (int e = 0; e < epochs; ++e) {
        const int epoch_index = model.meta.epochs_run;
        double loss_sum = 0.0;
        int n_batches = 0;
        if (batch == n) {
            const Eigen::RowVectorXd yhat = forward(model.layers, X, &tr);
            loss_sum += loss_and_grad(model.layers, tr, yhat, Y, cfg.l2_penalty, grad);
            adam_update(model.layers, model.adam, grad, cfg);
            n_batches = 1;
        } else {
            for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
            Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch_index)));
            rng.shuffle(order);
            for (Eigen::Index start = 0; start < n; start += batch) {
                const Eigen::Index len = std::min(batch, n - start);
                xb.resize(X.rows(), len);
                yb.resize(len);
                for (Eigen::Index j = 0; j < len; ++j) {
                    const Eigen::Index src = order[static_cast<std::size_t>(start + j)];
                    xb.col(j) = X.col(src);
                    yb(j) = Y(src);
                }
                const Eigen::RowVectorXd yhat = forward(model.layers, xb, &tr);
                loss_sum += loss_and_grad(model.layers, tr, yhat, yb, cfg.l2_penalty, grad);
                adam_update(model.layers, model.adam, grad, cfg);
                ++n_batches;
            }
        }
        model.meta.epoch_loss.push_back(loss_sum / n_batches);
        ++model.meta.epochs_run;
    }
    if (!model.all_finite()) throw NumericalError("train: parameters became non-finite");
}

}  // namespace detail

/// Untrained network with He-uniform weights and zero biases.
inline MlpModel initialize(const MlpArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    MlpModel model;
    model.arch = arch;
    model.seed = seed;
    Rng rng(derive_seed(seed, detail::kInitStream));
    const auto sizes = arch.sizes();
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const int fan_in = sizes[l], fan_out = sizes[l + 1];
        const double limit = std::sqrt(6.0 / fan_in);
        Layer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = rng.uniform(-limit, limit);
        model.layers.push_back(std::move(layer));
    }
    model.adam.m = detail::zero_like(model.layers);
    model.adam.v = detail::zero_like(model.layers);
    return model;
}

/// Predictions for a column batch of features (d x n).
inline Vector predict_columns(const MlpModel& model, const Matrix& features_by_col) {
    if (features_by_col.rows() != model.arch.input_dim)
        throw UsageError("predict: feature dimension " + std::to_string(features_by_col.rows()) +
                         " does not match model input " + std::to_string(model.arch.input_dim));
    return detail::forward(model.layers, features_by_col, nullptr).transpose();
}

/// g-hat evaluated on each row of an N x d feature matrix.
inline Vector predict(const MlpModel& model, const Matrix& features) {
    if (!features.allFinite()) throw DataError("predict: non-finite feature value");
    if (features.cols() != model.arch.input_dim)
        throw UsageError("predict: feature dimension " + std::to_string(features.cols()) +
                         " does not match model input " + std::to_string(model.arch.input_dim));
    return predict_columns(model, features.transpose());
}

inline Vector fitted_values(const MlpModel& model, const Panel& panel) {
    return predict_columns(model, panel.features());
}

inline double in_sample_mse(const MlpModel& model, const Panel& panel) {
    return (panel.returns() - fitted_values(model, panel)).squaredNorm() / static_cast<double>(panel.n_obs());
}

/// Pooled least-squares fit of the network with Adam.
inline MlpModel train(const Panel& panel, const MlpArchitecture& arch, const TrainConfig& cfg) {
    cfg.validate();
    arch.validate();
    detail::check_features(panel, arch);
    MlpModel model = initialize(arch, cfg.seed);
    detail::run_epochs(model, panel, cfg.epochs, cfg);
    model.meta.final_mse = in_sample_mse(model, panel);
    return model;
}

/// Warm start: exactly k more epochs from the model's parameters and Adam
/// state. The shuffle for each epoch is keyed by (cfg.seed, epoch index), so
/// train(m) followed by continue_training(k) equals train(m + k).
inline MlpModel continue_training(const MlpModel& model, const Panel& panel, int k, const TrainConfig& cfg) {
    cfg.validate();
    if (k < 0) throw UsageError("continue_training: k must be >= 0");
    detail::check_features(panel, model.arch);
    MlpModel out = model;
    if (k == 0) return out;
    detail::run_epochs(out, panel, k, cfg);
    out.meta.final_mse = in_sample_mse(out, panel);
    return out;
}

/// Loss (MSE + l2 * sum ||W||^2) and its backprop gradient on a row batch.
inline double loss_gradient(const MlpModel& model, const Matrix& features, const Vector& targets, double l2,
                            std::vector<Layer>& grad) {
    const Matrix x = features.transpose();
    detail::Trace tr;
    const Eigen::RowVectorXd yhat = detail::forward(model.layers, x, &tr);
    grad = detail::zero_like(model.layers);
    return detail::loss_and_grad(model.layers, tr, yhat, targets.transpose(), l2, grad);
}

/// Compares the backprop gradient against central differences (step 1e-5)
/// on a random subset of parameters. Parameters whose perturbation moves a
/// ReLU across its kink are skipped, since the loss is not differentiable
/// there. Relative error is |a - b| / max(|a| + |b|, 1e-7).
inline double gradient_check(const MlpModel& model, const Matrix& features, const Vector& targets, double l2,
                             std::uint64_t seed, int subset = 32) {
    if (features.rows() == 0) throw UsageError("gradient_check: empty batch");
    constexpr double h = 1e-5;
    std::vector<Layer> grad;
    loss_gradient(model, features, targets, l2, grad);

    const Matrix x = features.transpose();
    auto loss_at = [&](const MlpModel& m, Eigen::Array<bool, Eigen::Dynamic, 1>* pattern) {
        detail::Trace tr;
        const Eigen::RowVectorXd yhat = detail::forward(m.layers, x, &tr);
        if (pattern) {
            Eigen::Index total = 0;
            for (std::size_t l = 0; l + 1 < tr.pre.size(); ++l) total += tr.pre[l].size();
            pattern->resize(total);
            Eigen::Index k = 0;
            for (std::size_t l = 0; l + 1 < tr.pre.size(); ++l)
                for (Eigen::Index i = 0; i < tr.pre[l].size(); ++i) (*pattern)(k++) = tr.pre[l](i) > 0.0;
        }
        double loss = (yhat - targets.transpose()).squaredNorm() / static_cast<double>(targets.size());
        for (const auto& layer : m.layers) loss += l2 * layer.weight.squaredNorm();
        return loss;
    };

    Rng rng(seed);
    const std::size_t total = model.n_params();
    double worst = 0.0;
    MlpModel probe = model;
    for (int s = 0; s < subset; ++s) {
        std::size_t flat = static_cast<std::size_t>(rng.below(total));
        // locate parameter
        double* slot = nullptr;
        double analytic = 0.0;
        for (std::size_t l = 0; l < probe.layers.size() && !slot; ++l) {
            auto& L = probe.layers[l];
            const auto nw = static_cast<std::size_t>(L.weight.size());
            if (flat < nw) {
                slot = L.weight.data() + flat;
                analytic = grad[l].weight.data()[flat];
            } else {
                flat -= nw;
                const auto nb = static_cast<std::size_t>(L.bias.size());
                if (flat < nb) {
                    slot = L.bias.data() + flat;
                    analytic = grad[l].bias.data()[flat];
                } else {
                    flat -= nb;
                }
            }
        }
        const double orig = *slot;
        Eigen::Array<bool, Eigen::Dynamic, 1> pat_plus, pat_minus;
        *slot = orig + h;
        const double lp = loss_at(probe, &pat_plus);
        *slot = orig - h;
        const double lm = loss_at(probe, &pat_minus);
        *slot = orig;
        if ((pat_plus != pat_minus).any()) continue;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-7);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace mlfci::nn
