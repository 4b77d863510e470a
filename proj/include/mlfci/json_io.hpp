#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlfci/backtest.hpp"
#include "mlfci/bootstrap.hpp"
#include "mlfci/common.hpp"
#include "mlfci/fourier.hpp"
#include "mlfci/nn.hpp"
#include "mlfci/simulate.hpp"

namespace mlfci::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Strict config reading: every key must be consumed, otherwise the first
// unknown one is reported with its full path.

class ConfigReader {
public:
    ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw UsageError("config: " + where() + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    T get(const std::string& key, T fallback) {
        used_.insert(key);
        if (!j_.contains(key)) return fallback;
        return convert<T>(key);
    }

    template <class T>
    T require(const std::string& key) {
        used_.insert(key);
        if (!j_.contains(key)) throw UsageError("config: missing required key '" + child(key) + "'");
        return convert<T>(key);
    }

    ConfigReader object(const std::string& key) {
        used_.insert(key);
        static const json empty = json::object();
        return ConfigReader(j_.contains(key) ? j_.at(key) : empty, child(key));
    }

    const json& raw(const std::string& key) {
        used_.insert(key);
        if (!j_.contains(key)) throw UsageError("config: missing required key '" + child(key) + "'");
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw UsageError("config: unknown key '" + child(k) + "'");
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "top level" : "'" + path_ + "'"; }

private:
    template <class T>
    T convert(const std::string& key) const {
        try {
            return j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw UsageError("config: key '" + child(key) + "' has the wrong type");
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("'" + path + "' is not valid JSON: " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Eigen <-> JSON (matrices row-major as nested arrays).

inline json to_json(const Vector& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline json to_json(const Matrix& m) {
    json a = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        a.push_back(std::move(row));
    }
    return a;
}

inline Vector vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw UsageError(what + " must be an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw UsageError(what + "[" + std::to_string(i) + "] is not a number");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline Matrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw UsageError(what + " must be a non-empty array of rows");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw UsageError(what + " rows must have equal length");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number()) throw UsageError(what + " has a non-numeric entry");
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Network.

inline json model_to_json(const nn::MlpModel& m) {
    json layers = json::array();
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        layers.push_back({{"weight", to_json(m.layers[l].weight)},
                          {"bias", to_json(m.layers[l].bias)},
                          {"adam_m_weight", to_json(m.adam.m[l].weight)},
                          {"adam_m_bias", to_json(m.adam.m[l].bias)},
                          {"adam_v_weight", to_json(m.adam.v[l].weight)},
                          {"adam_v_bias", to_json(m.adam.v[l].bias)}});
    }
    return {{"architecture",
             {{"input_dim", m.arch.input_dim}, {"hidden_widths", m.arch.hidden_widths}, {"activation", "relu"}}},
            {"layers", layers},
            {"adam_step", m.adam.step},
            {"seed", m.seed},
            {"epochs_run", m.meta.epochs_run},
            {"final_mse", m.meta.final_mse},
            {"epoch_loss", m.meta.epoch_loss}};
}

inline nn::MlpModel model_from_json(const json& j) {
    ConfigReader top(j, "");
    nn::MlpModel m;
    {
        ConfigReader a = top.object("architecture");
        m.arch.input_dim = a.require<int>("input_dim");
        m.arch.hidden_widths = a.require<std::vector<int>>("hidden_widths");
        if (a.get<std::string>("activation", "relu") != "relu") throw UsageError("model: only relu is supported");
        a.finish();
    }
    m.arch.validate();
    const auto sizes = m.arch.sizes();
    const json& layers = top.raw("layers");
    if (!layers.is_array() || layers.size() + 1 != sizes.size())
        throw UsageError("model: layer count does not match the architecture");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        ConfigReader L(layers[l], "layers[" + std::to_string(l) + "]");
        nn::Layer p{matrix_from_json(L.raw("weight"), "weight"), vector_from_json(L.raw("bias"), "bias")};
        nn::Layer mm{matrix_from_json(L.raw("adam_m_weight"), "adam_m_weight"),
                     vector_from_json(L.raw("adam_m_bias"), "adam_m_bias")};
        nn::Layer vv{matrix_from_json(L.raw("adam_v_weight"), "adam_v_weight"),
                     vector_from_json(L.raw("adam_v_bias"), "adam_v_bias")};
        L.finish();
        for (const nn::Layer* x : {&p, &mm, &vv})
            if (x->weight.rows() != sizes[l + 1] || x->weight.cols() != sizes[l] || x->bias.size() != sizes[l + 1])
                throw UsageError("model: layer " + std::to_string(l) + " has the wrong shape");
        m.layers.push_back(std::move(p));
        m.adam.m.push_back(std::move(mm));
        m.adam.v.push_back(std::move(vv));
    }
    m.adam.step = top.get<std::int64_t>("adam_step", 0);
    m.seed = top.get<std::uint64_t>("seed", 0);
    m.meta.epochs_run = top.get<int>("epochs_run", 0);
    m.meta.final_mse = top.get<double>("final_mse", 0.0);
    m.meta.epoch_loss = top.get<std::vector<double>>("epoch_loss", {});
    top.finish();
    if (!m.all_finite()) throw DataError("model: non-finite parameter");
    return m;
}

// ---------------------------------------------------------------------------
// Results.

inline json se_result_to_json(const fourier::SeResult& se, double point, double level) {
    const auto ci = fourier::fci(point, se.se, level);
    return {{"point_forecast", point},
            {"se", se.se},
            {"level", level},
            {"lower", ci.lower},
            {"upper", ci.upper},
            {"per_period_terms", to_json(se.per_period_terms)}};
}

inline json bootstrap_result_to_json(const bootstrap::BootstrapResult& r, const bootstrap::BootstrapConfig& cfg) {
    return {{"scheme", bootstrap::to_string(cfg.scheme)},
            {"replicates", cfg.replicates},
            {"k", cfg.k},
            {"level", r.level},
            {"point_forecast", r.point_forecast},
            {"q_alpha", r.q_alpha},
            {"sigma_star", r.sigma_star},
            {"lower", r.interval.lower},
            {"upper", r.interval.upper},
            {"replicate_forecasts", to_json(r.replicate_forecasts)}};
}

// ---------------------------------------------------------------------------
// Config sections.

inline nn::MlpArchitecture read_architecture(ConfigReader r, nn::MlpArchitecture a) {
    a.hidden_widths = r.get("hidden_widths", a.hidden_widths);
    if (r.get<std::string>("activation", "relu") != "relu") throw UsageError("config: only relu is supported");
    r.finish();
    return a;
}

inline nn::TrainConfig read_train(ConfigReader r, nn::TrainConfig c) {
    c.learning_rate = r.get("learning_rate", c.learning_rate);
    c.epochs = r.get("epochs", c.epochs);
    c.batch_size = r.get("batch_size", c.batch_size);
    c.l2_penalty = r.get("l2_penalty", c.l2_penalty);
    c.beta1 = r.get("beta1", c.beta1);
    c.beta2 = r.get("beta2", c.beta2);
    c.epsilon = r.get("epsilon", c.epsilon);
    const auto init = r.get<std::string>("init", "he_uniform");
    if (init != "he_uniform") throw UsageError("config: " + r.child("init") + " must be \"he_uniform\"");
    r.finish();
    c.validate();
    return c;
}

inline bootstrap::BootstrapConfig read_bootstrap(ConfigReader r, bootstrap::BootstrapConfig c) {
    c.replicates = r.get("replicates", c.replicates);
    c.k = r.get("k", c.k);
    c.scheme = bootstrap::scheme_from_string(r.get<std::string>("scheme", bootstrap::to_string(c.scheme)));
    c.level = r.get("level", c.level);
    r.finish();
    c.validate();
    return c;
}

inline simulate::SimConfig read_sim(ConfigReader r, simulate::SimConfig c) {
    c.N = r.get("N", c.N);
    c.T = r.get("T", c.T);
    c.d = r.get("d", c.d);
    c.ar_coef = r.get("ar_coef", c.ar_coef);
    c.innovation_scale = r.get("innovation_scale", c.innovation_scale);
    if (r.has("factor_mean")) {
        const Vector v = vector_from_json(r.raw("factor_mean"), r.child("factor_mean"));
        if (v.size() != 3) throw UsageError("config: " + r.child("factor_mean") + " must have 3 entries");
        c.factor_mean = v;
    }
    if (r.has("factor_cov")) {
        const Matrix m = matrix_from_json(r.raw("factor_cov"), r.child("factor_cov"));
        if (m.rows() != 3 || m.cols() != 3) throw UsageError("config: " + r.child("factor_cov") + " must be 3x3");
        c.factor_cov = m;
    }
    c.target_idio_share = r.get("target_idio_share", c.target_idio_share);
    if (r.has("s_range")) {
        const auto s = r.require<std::vector<double>>("s_range");
        if (s.size() != 2) throw UsageError("config: " + r.child("s_range") + " must be [lo, hi]");
        c.s_lo = s[0];
        c.s_hi = s[1];
    }
    c.idio_sigma = r.get("idio_sigma", c.idio_sigma);
    r.finish();
    c.validate();
    return c;
}

inline backtest::SplitPlan read_plan(ConfigReader r) {
    backtest::SplitPlan p;
    p.train_start = r.get("train_start", p.train_start);
    p.train_end = r.require<int>("train_end");
    p.val_years = r.get("val_years", p.val_years);
    p.test_start = r.get("test_start", p.train_end + 12 * p.val_years);
    p.test_end = r.require<int>("test_end");
    p.retrain_every_months = r.get("retrain_every_months", p.retrain_every_months);
    r.finish();
    return p;
}

inline backtest::StrategyConfig read_strategy(ConfigReader r) {
    backtest::StrategyConfig s;
    s.strategies = r.get("strategies", s.strategies);
    s.ua_levels = r.get("ua_levels", s.ua_levels);
    s.gamma = r.get("gamma", s.gamma);
    s.vol_target = r.get("vol_target", s.vol_target);
    s.gmvp_target = r.get("gmvp_target", s.gmvp_target);
    s.portfolio_size = r.get("portfolio_size", s.portfolio_size);
    s.fdr_alpha = r.get("fdr_alpha", s.fdr_alpha);
    s.bonferroni = r.get("bonferroni", s.bonferroni);
    s.se_mode = backtest::se_mode_from_string(r.get<std::string>("se_mode", backtest::to_string(s.se_mode)));
    s.cov_window = r.get("cov_window", s.cov_window);
    s.cov_shrinkage = r.get("cov_shrinkage", s.cov_shrinkage);
    s.l2_grid = r.get("l2_grid", s.l2_grid);
    s.fourier_order = r.get("fourier_order", s.fourier_order);
    s.min_assets = r.get("min_assets", s.min_assets);
    r.finish();
    s.validate();
    return s;
}

}  // namespace mlfci::io
