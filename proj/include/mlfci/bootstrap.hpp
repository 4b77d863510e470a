#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mlfci/common.hpp"
#include "mlfci/fourier.hpp"
#include "mlfci/nn.hpp"
#include "mlfci/panel.hpp"
#include "mlfci/parallel.hpp"
#include "mlfci/rng.hpp"

namespace mlfci::bootstrap {

/// How wild-bootstrap multipliers are shared across observations.
///   TimeClustered   one eta_t per period, shared by all assets
///   CrossSectional  one eta_i per asset, shared by all periods
///   IID             one eta_{i,t} per observation
enum class Scheme { TimeClustered, CrossSectional, IID };

inline const char* to_string(Scheme s) {
    switch (s) {
        case Scheme::TimeClustered: return "time_clustered";
        case Scheme::CrossSectional: return "cross_sectional";
        case Scheme::IID: return "iid";
    }
    return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
    if (s == "time_clustered") return Scheme::TimeClustered;
    if (s == "cross_sectional") return Scheme::CrossSectional;
    if (s == "iid") return Scheme::IID;
    throw UsageError("unknown bootstrap scheme '" + s + "' (time_clustered, cross_sectional, iid)");
}

struct BootstrapConfig {
    int replicates = 100;
    int k = 10;
    Scheme scheme = Scheme::TimeClustered;
    std::uint64_t seed = 0;
    double level = 0.95;
    unsigned threads = 1;

    void validate() const {
        if (replicates < 2) throw UsageError("bootstrap: need at least 2 replicates");
        if (k < 1) throw UsageError("bootstrap: k must be >= 1");
        if (!(level > 0.0 && level < 1.0)) throw UsageError("bootstrap: level must lie in (0,1)");
    }
};

/// Type-7 sample quantile: linear interpolation between order statistics
/// at position (n-1)p.
inline double quantile(std::vector<double> sample, double p) {
    if (sample.empty()) throw UsageError("quantile: empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw UsageError("quantile: p must lie in [0,1]");
    std::sort(sample.begin(), sample.end());
    const double h = (static_cast<double>(sample.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sample.size() - 1);
    return sample[lo] + (h - static_cast<double>(lo)) * (sample[hi] - sample[lo]);
}

inline double quantile(const Vector& sample, double p) {
    return quantile(std::vector<double>(sample.data(), sample.data() + sample.size()), p);
}

/// z_{0.75} - z_{0.25} of the standard normal.
inline double normal_iqr() { return normal_quantile(0.75) - normal_quantile(0.25); }

/// IQR of the bootstrap draws scaled to a normal standard deviation.
inline double sigma_star(const Vector& draws) {
    return (quantile(draws, 0.75) - quantile(draws, 0.25)) / normal_iqr();
}

/// One multiplier per observation, shared according to the scheme.
inline Vector draw_multipliers(const Panel& panel, Scheme scheme, Rng& rng) {
    Vector eta(panel.n_obs());
    switch (scheme) {
        case Scheme::TimeClustered:
            for (int t = 0; t < panel.n_periods(); ++t) {
                const double e = rng.normal();
                const auto [b, end] = panel.period_range(t);
                eta.segment(b, end - b).setConstant(e);
            }
            break;
        case Scheme::CrossSectional: {
            Vector per_asset(panel.n_assets());
            for (Eigen::Index i = 0; i < per_asset.size(); ++i) per_asset(i) = rng.normal();
            for (Eigen::Index k = 0; k < eta.size(); ++k) eta(k) = per_asset(panel.assets()[static_cast<std::size_t>(k)]);
            break;
        }
        case Scheme::IID:
            for (Eigen::Index k = 0; k < eta.size(); ++k) eta(k) = rng.normal();
            break;
    }
    return eta;
}

/// y* = fitted + (y - fitted) * eta; characteristics are unchanged.
inline Panel apply_multipliers(const Panel& panel, const Vector& fitted, const Vector& eta) {
    if (fitted.size() != panel.n_obs() || eta.size() != panel.n_obs())
        throw UsageError("resample: fitted values / multipliers do not match the panel");
    return panel.with_returns(fitted + (panel.returns() - fitted).cwiseProduct(eta));
}

inline Panel resample(const Panel& panel, const Vector& fitted, Scheme scheme, Rng& rng) {
    return apply_multipliers(panel, fitted, draw_multipliers(panel, scheme, rng));
}

inline Panel resample(const Panel& panel, const nn::MlpModel& model, Scheme scheme, Rng& rng) {
    if (panel.dim() != model.arch.input_dim) throw UsageError("resample: model does not match panel");
    return resample(panel, nn::fitted_values(model, panel), scheme, rng);
}

/// Steps 1-2 of the k-step bootstrap: replicate b resamples with seed
/// derive_seed(seed, b), warm-starts from the trained model (parameters and
/// Adam state) and trains k epochs. Returns the B replicate networks.
inline std::vector<nn::MlpModel> replicate_models(const Panel& panel, const nn::MlpModel& model,
                                                  const nn::TrainConfig& nn_cfg, const BootstrapConfig& cfg) {
    cfg.validate();
    if (panel.dim() != model.arch.input_dim) throw UsageError("bootstrap: model does not match panel");
    const Vector fitted = nn::fitted_values(model, panel);
    std::vector<nn::MlpModel> out(static_cast<std::size_t>(cfg.replicates));
    parallel_for(out.size(), cfg.threads, [&](std::size_t b) {
        const std::uint64_t rep_seed = derive_seed(cfg.seed, b);
        Rng rng(rep_seed);
        const Panel star = resample(panel, fitted, cfg.scheme, rng);
        nn::TrainConfig c = nn_cfg;
        c.seed = rep_seed;
        try {
            out[b] = nn::continue_training(model, star, cfg.k, c);
        } catch (const NumericalError& e) {
            throw NumericalError("bootstrap: replicate " + std::to_string(b) + " (seed " + std::to_string(rep_seed) +
                                 "): " + e.what());
        }
    });
    return out;
}

/// Replicate predictions for every forecast asset.
struct AssetReplicates {
    Vector base;       // g-hat(x_{i,T}) of the original model
    Matrix forecasts;  // B x N, row b = g-hat*^b(x_{i,T})
};

inline AssetReplicates predict_replicates(const nn::MlpModel& model, const std::vector<nn::MlpModel>& reps,
                                          const Matrix& forecast_features) {
    AssetReplicates out;
    out.base = nn::predict(model, forecast_features);
    out.forecasts.resize(static_cast<Eigen::Index>(reps.size()), forecast_features.rows());
    const Matrix fcols = forecast_features.transpose();
    for (std::size_t b = 0; b < reps.size(); ++b) {
        const Vector pred = nn::predict_columns(reps[b], fcols);
        if (!pred.allFinite())
            throw NumericalError("bootstrap: replicate " + std::to_string(b) + " produced a non-finite forecast");
        out.forecasts.row(static_cast<Eigen::Index>(b)) = pred.transpose();
    }
    return out;
}

inline AssetReplicates replicate_assets(const Panel& panel, const nn::MlpModel& model,
                                        const Matrix& forecast_features, const nn::TrainConfig& nn_cfg,
                                        const BootstrapConfig& cfg) {
    if (forecast_features.cols() != model.arch.input_dim)
        throw UsageError("bootstrap: forecast features have wrong width");
    const auto reps = replicate_models(panel, model, nn_cfg, cfg);
    try {
        return predict_replicates(model, reps, forecast_features);
    } catch (const NumericalError&) {
        for (std::size_t b = 0; b < reps.size(); ++b)
            if (!nn::predict(reps[b], forecast_features).allFinite())
                throw NumericalError("bootstrap: replicate " + std::to_string(b) + " (seed " +
                                     std::to_string(derive_seed(cfg.seed, b)) + ") produced a non-finite forecast");
        throw;
    }
}

struct BootstrapResult {
    Vector replicate_forecasts;  // sum_i w_i g*^b(x_{i,T}), b = 1..B
    double point_forecast = 0.0;
    double level = 0.95;
    double q_alpha = 0.0;
    double sigma_star = 0.0;
    fourier::Interval interval;
};

/// q*_alpha and sigma* from replicate forecasts around the point forecast.
inline BootstrapResult summarize(Vector replicate_forecasts, double point_forecast, double level) {
    BootstrapResult r;
    r.point_forecast = point_forecast;
    r.level = level;
    r.replicate_forecasts = std::move(replicate_forecasts);
    const Vector dev = (r.replicate_forecasts.array() - point_forecast).abs().matrix();
    r.q_alpha = quantile(dev, level);
    r.sigma_star = sigma_star(r.replicate_forecasts);
    r.interval = {point_forecast - r.q_alpha, point_forecast + r.q_alpha};
    return r;
}

/// Full k-step bootstrap FCI for the portfolio forecast sum_i w_i g(x_{i,T}).
inline BootstrapResult run(const Panel& panel, const nn::MlpModel& model, const Vector& weights,
                           const Matrix& forecast_features, const nn::TrainConfig& nn_cfg,
                           const BootstrapConfig& cfg) {
    if (weights.size() != forecast_features.rows()) throw UsageError("bootstrap: weights/assets mismatch");
    const AssetReplicates reps = replicate_assets(panel, model, forecast_features, nn_cfg, cfg);
    return summarize(reps.forecasts * weights, reps.base.dot(weights), cfg.level);
}

/// Per-asset sigma* and q*_alpha.
struct AssetBootstrap {
    Vector base;
    Vector sigma_star;
    Vector q_alpha;
};

inline AssetBootstrap per_asset(const AssetReplicates& reps, double level) {
    const Eigen::Index N = reps.base.size();
    AssetBootstrap out{reps.base, Vector(N), Vector(N)};
    for (Eigen::Index i = 0; i < N; ++i) {
        const Vector col = reps.forecasts.col(i);
        out.sigma_star(i) = sigma_star(col);
        out.q_alpha(i) = quantile(Vector((col.array() - reps.base(i)).abs()), level);
    }
    return out;
}

}  // namespace mlfci::bootstrap
