#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mlfci/bootstrap.hpp"
#include "mlfci/common.hpp"
#include "mlfci/csv.hpp"
#include "mlfci/fourier.hpp"
#include "mlfci/nn.hpp"
#include "mlfci/panel.hpp"
#include "mlfci/portfolio.hpp"
#include "mlfci/selection.hpp"

namespace mlfci::backtest {

// ---------------------------------------------------------------------------
// Months are integer codes year * 12 + (month - 1).

inline int parse_month(const std::string& s) {
    int y = 0, m = 0;
    if (s.size() != 7 || s[4] != '-' || std::sscanf(s.c_str(), "%4d-%2d", &y, &m) != 2 || m < 1 || m > 12)
        throw DataError("bad month '" + s + "' (expected YYYY-MM)");
    return y * 12 + (m - 1);
}

inline std::string format_month(int code) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02d", code / 12, code % 12 + 1);
    return buf;
}

/// Average ranks / n of the finite entries; NaN entries stay NaN.
inline Vector average_rank(const Vector& x) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (std::isfinite(x(i))) idx.push_back(i);
    Vector out = Vector::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
    std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a) < x(b); });
    const auto n = static_cast<double>(idx.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x(idx[j + 1]) == x(idx[i])) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // average of ranks i+1 .. j+1
        for (std::size_t k = i; k <= j; ++k) out(idx[k]) = r / n;
        i = j + 1;
    }
    return out;
}

/// Firm-month data on a dense month x asset grid. chars[m] row i is NaN
/// when asset i has no row in month m; returns(m, i) is NaN when the return
/// is absent. Characteristics of a month predict the next month's return.
struct MonthlyPanel {
    std::vector<std::string> asset_ids;
    std::vector<std::string> char_names;
    std::vector<int> months;
    std::vector<Matrix> chars;   // per month, n_assets x d, rank-normalised to (0,1]
    Matrix returns;              // n_months x n_assets
    int imputed_cells = 0;
    int missing_returns = 0;

    int n_months() const { return static_cast<int>(months.size()); }
    int n_assets() const { return static_cast<int>(asset_ids.size()); }
    int dim() const { return static_cast<int>(char_names.size()); }
    bool present(int m, int i) const { return std::isfinite(chars[static_cast<std::size_t>(m)](i, 0)); }
    bool has_return(int m, int i) const { return std::isfinite(returns(m, i)); }
    /// Month m has a predecessor one calendar month earlier.
    bool has_lag(int m) const { return m > 0 && months[static_cast<std::size_t>(m)] == months[static_cast<std::size_t>(m) - 1] + 1; }
};

/// Parses the panel CSV: asset_id, month (YYYY-MM), excess_return, then one
/// column per characteristic. Rows must be ordered by month. Characteristics
/// are rank-normalised within each month with average ranks; missing cells
/// become 0.5. A row with a missing return still supplies characteristics
/// for the following month.
inline MonthlyPanel parse_panel(const csv::Table& t) {
    if (t.header.size() < 4 || t.header[0] != "asset_id" || t.header[1] != "month" || t.header[2] != "excess_return")
        throw DataError("panel csv: header must start with asset_id,month,excess_return and name >= 1 characteristic");
    MonthlyPanel p;
    p.char_names.assign(t.header.begin() + 3, t.header.end());
    const auto d = static_cast<Eigen::Index>(p.char_names.size());
    std::unordered_map<std::string, int> asset_index;
    std::vector<int> row_month(t.rows.size()), row_asset(t.rows.size());
    int last_month = std::numeric_limits<int>::min();
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = "line " + std::to_string(t.line_numbers[r]);
        if (row[0].empty()) throw DataError("panel csv: empty asset_id at " + where);
        const int month = parse_month(row[1]);
        if (month < last_month)
            throw DataError("panel csv: months are not in non-decreasing order at " + where + " (" + row[1] + ")");
        if (month != last_month) p.months.push_back(month);
        last_month = month;
        auto [it, inserted] = asset_index.try_emplace(row[0], static_cast<int>(p.asset_ids.size()));
        if (inserted) p.asset_ids.push_back(row[0]);
        row_month[r] = static_cast<int>(p.months.size()) - 1;
        row_asset[r] = it->second;
    }
    const int M = p.n_months(), A = p.n_assets();
    p.chars.assign(static_cast<std::size_t>(M), Matrix::Constant(A, d, std::numeric_limits<double>::quiet_NaN()));
    p.returns = Matrix::Constant(M, A, std::numeric_limits<double>::quiet_NaN());
    std::vector<Matrix> raw = p.chars;
    std::set<std::pair<int, int>> seen;
    std::vector<std::vector<int>> month_rows(static_cast<std::size_t>(M));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = "line " + std::to_string(t.line_numbers[r]);
        const int m = row_month[r], i = row_asset[r];
        if (!seen.emplace(m, i).second)
            throw DataError("panel csv: duplicate key (" + row[0] + ", " + row[1] + ") at " + where);
        month_rows[static_cast<std::size_t>(m)].push_back(i);
        p.returns(m, i) = csv::parse_number(row[2], where);
        if (std::isnan(p.returns(m, i))) ++p.missing_returns;
        for (Eigen::Index k = 0; k < d; ++k)
            raw[static_cast<std::size_t>(m)](i, k) = csv::parse_number(row[static_cast<std::size_t>(3 + k)], where);
    }
    // Rank each month's characteristics among the assets that have a value.
    for (int m = 0; m < M; ++m) {
        const Matrix& x = raw[static_cast<std::size_t>(m)];
        Matrix& out = p.chars[static_cast<std::size_t>(m)];
        const std::vector<int>& rows = month_rows[static_cast<std::size_t>(m)];
        Vector col(static_cast<Eigen::Index>(rows.size()));
        for (Eigen::Index k = 0; k < d; ++k) {
            for (std::size_t j = 0; j < rows.size(); ++j) col(static_cast<Eigen::Index>(j)) = x(rows[j], k);
            const Vector rk = average_rank(col);
            for (std::size_t j = 0; j < rows.size(); ++j) {
                double v = rk(static_cast<Eigen::Index>(j));
                if (std::isnan(v)) {
                    v = 0.5;
                    ++p.imputed_cells;
                }
                out(rows[j], k) = v;
            }
        }
    }
    return p;
}

inline MonthlyPanel load_panel(const std::string& path) { return parse_panel(csv::read_file(path)); }

/// Training sample of (x_{i,m-1}, y_{i,m}) for return months m in [begin, end).
inline Panel training_panel(const MonthlyPanel& p, int begin, int end) {
    std::vector<Vector> feats;
    std::vector<double> ys;
    std::vector<int> period, asset;
    for (int m = std::max(begin, 0); m < end; ++m) {
        if (!p.has_lag(m)) continue;
        for (int i = 0; i < p.n_assets(); ++i) {
            if (!p.has_return(m, i) || !p.present(m - 1, i)) continue;
            feats.push_back(p.chars[static_cast<std::size_t>(m - 1)].row(i).transpose());
            ys.push_back(p.returns(m, i));
            period.push_back(m);
            asset.push_back(i);
        }
    }
    if (ys.empty()) throw DataError("backtest: no usable observations in months [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ")");
    Matrix X(p.dim(), static_cast<Eigen::Index>(ys.size()));
    for (std::size_t k = 0; k < feats.size(); ++k) X.col(static_cast<Eigen::Index>(k)) = feats[k];
    return Panel::from_observations(X, Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size())),
                                    period, asset, p.n_assets());
}

// ---------------------------------------------------------------------------
// Rolling plan.

/// Indices are positions in MonthlyPanel::months and refer to return months.
/// Retraining j uses training months [train_start, train_end + j*step),
/// validation months [train_end + j*step, +12*val_years) and tests months
/// [test_start + j*step, +step) clipped to test_end, with
/// test_start = train_end + 12*val_years.
struct SplitPlan {
    int train_start = 1;
    int train_end = 0;
    int val_years = 10;
    int test_start = 0;
    int test_end = 0;
    int retrain_every_months = 12;

    void validate(int n_months) const {
        if (train_start < 1) throw UsageError("split: train_start must be >= 1 (month 0 has no lagged characteristics)");
        if (train_end <= train_start) throw UsageError("split: empty training window");
        if (val_years < 0) throw UsageError("split: val_years must be >= 0");
        if (test_start != train_end + 12 * val_years)
            throw UsageError("split: test_start must equal train_end + 12*val_years");
        if (test_end <= test_start) throw UsageError("split: empty test window");
        if (test_end > n_months) throw UsageError("split: test window extends past the data");
        if (retrain_every_months < 1) throw UsageError("split: retrain_every_months must be >= 1");
    }
};

enum class SeMode { Analytic, Bootstrap, Max };

inline SeMode se_mode_from_string(const std::string& s) {
    if (s == "analytic") return SeMode::Analytic;
    if (s == "bootstrap") return SeMode::Bootstrap;
    if (s == "max") return SeMode::Max;
    throw UsageError("unknown se mode '" + s + "' (analytic, bootstrap, max)");
}

inline const char* to_string(SeMode m) {
    switch (m) {
        case SeMode::Analytic: return "analytic";
        case SeMode::Bootstrap: return "bootstrap";
        case SeMode::Max: return "max";
    }
    return "?";
}

inline const std::vector<std::string>& all_strategies() {
    static const std::vector<std::string> names{"UA25", "UA50", "UA75", "MVE", "GMVP",
                                                "EW",   "FCI-FDR", "Highest-K", "Naive-FDR"};
    return names;
}

struct StrategyConfig {
    std::vector<std::string> strategies = all_strategies();
    std::vector<double> ua_levels{0.25, 0.50, 0.75};  // confidence of UA25/UA50/UA75
    double gamma = 1.0;
    double vol_target = 0.20;    // annualised in-sample volatility for MVE and UA
    double gmvp_target = -1.0;   // < 0: same as vol_target
    int portfolio_size = 50;     // K of the long-only strategies
    double fdr_alpha = 0.05;
    bool bonferroni = false;
    SeMode se_mode = SeMode::Analytic;
    int cov_window = 60;         // months of history for Sigma and the naive t
    double cov_shrinkage = -1.0; // < 0: automatic intensity
    std::vector<double> l2_grid{1e-5, 1e-3};
    int fourier_order = 3;
    int min_assets = 2;

    void validate() const {
        for (const auto& s : strategies)
            if (std::find(all_strategies().begin(), all_strategies().end(), s) == all_strategies().end())
                throw UsageError("unknown strategy '" + s + "'");
        if (ua_levels.size() != 3) throw UsageError("ua_levels must list the UA25/UA50/UA75 confidence levels");
        for (double l : ua_levels)
            if (!(l > 0.0 && l < 1.0)) throw UsageError("ua_levels must lie in (0,1)");
        if (!(gamma > 0.0)) throw UsageError("gamma must be positive");
        if (!(vol_target > 0.0)) throw UsageError("vol_target must be positive");
        if (portfolio_size < 1) throw UsageError("portfolio_size must be >= 1");
        if (!(fdr_alpha > 0.0 && fdr_alpha < 1.0)) throw UsageError("fdr_alpha must lie in (0,1)");
        if (cov_window < 2) throw UsageError("cov_window must be >= 2");
        if (cov_shrinkage > 1.0) throw UsageError("cov_shrinkage must be <= 1");
        if (l2_grid.empty()) throw UsageError("l2_grid must not be empty");
        for (double l : l2_grid)
            if (!(l >= 0.0)) throw UsageError("l2_grid entries must be >= 0");
        if (fourier_order < 1) throw UsageError("fourier_order must be >= 1");
        if (min_assets < 1) throw UsageError("min_assets must be >= 1");
    }
};

/// Portfolio held over one test month.
struct Holding {
    std::vector<int> assets;  // universe (asset indices)
    Vector weights;
};

/// Data provenance of one decision: everything used is dated <= data_max.
struct Decision {
    int month = 0;     // return month index being predicted
    int data_max = 0;  // latest month index whose data entered the decision
};

struct Retrain {
    int first_test_month = 0;
    double l2 = 0.0;
    double validation_mse = 0.0;
    std::vector<double> grid_mse;
};

struct BacktestResult {
    std::vector<std::string> strategies;
    std::vector<int> months;                    // return month indices actually traded
    Matrix returns;                             // months x strategies
    std::vector<std::vector<Holding>> holdings; // [month][strategy]
    std::vector<Decision> decisions;
    std::vector<Retrain> retrains;
    std::vector<std::string> warnings;
    Matrix zero_fraction;                       // months x 3, share of zero UA25/50/75 weights
};

namespace detail {

inline void assert_no_lookahead(const Decision& d) {
    if (d.data_max >= d.month)
        throw std::logic_error("backtest: look-ahead, decision for month " + std::to_string(d.month) +
                               " used data from month " + std::to_string(d.data_max));
}

// Scale weights so the in-sample portfolio volatility (annualised) hits target.
inline Vector vol_scale(const Vector& w, const Matrix& history, double target) {
    const Vector r = history * w;
    if (r.size() < 2) return w;
    const double mean = r.mean();
    const double sd = std::sqrt((r.array() - mean).square().sum() / static_cast<double>(r.size() - 1)) * std::sqrt(12.0);
    if (!(sd > 0.0)) return Vector::Zero(w.size());
    return w * (target / sd);
}

}  // namespace detail

/// Walks the plan: per retraining date choose the L2 penalty by validation
/// MSE, fit the network and the Fourier regression on the training window,
/// then for each test month build every strategy from data dated before it
/// and record the realised return.
inline BacktestResult rolling_run(const MonthlyPanel& data, const SplitPlan& plan, const StrategyConfig& sc,
                                  const nn::MlpArchitecture& arch_in, const nn::TrainConfig& nn_cfg,
                                  const bootstrap::BootstrapConfig& bs_cfg) {
    plan.validate(data.n_months());
    sc.validate();
    nn_cfg.validate();
    // Only the UA and FCI-FDR strategies consume standard errors.
    bool need_se = false;
    for (const auto& name : sc.strategies) need_se = need_se || name.rfind("UA", 0) == 0 || name == "FCI-FDR";
    const bool need_boot = need_se && sc.se_mode != SeMode::Analytic;
    const bool need_fourier = need_se && sc.se_mode != SeMode::Bootstrap;
    if (need_boot) bs_cfg.validate();
    nn::MlpArchitecture arch = arch_in;
    arch.input_dim = data.dim();

    BacktestResult res;
    res.strategies = sc.strategies;
    const auto S = static_cast<Eigen::Index>(sc.strategies.size());
    std::vector<std::vector<double>> rets;
    std::vector<std::array<double, 3>> zero_frac;
    const double gmvp_target = sc.gmvp_target < 0.0 ? sc.vol_target : sc.gmvp_target;

    for (int block = plan.test_start, j = 0; block < plan.test_end; block += plan.retrain_every_months, ++j) {
        const int train_end = plan.train_end + j * plan.retrain_every_months;
        const int val_end = train_end + 12 * plan.val_years;
        const Panel train = training_panel(data, plan.train_start, train_end);
        Retrain rt;
        rt.first_test_month = block;
        nn::MlpModel model;
        if (plan.val_years > 0 && sc.l2_grid.size() > 1) {
            const Panel val = training_panel(data, train_end, val_end);
            double best = std::numeric_limits<double>::infinity();
            for (double l2 : sc.l2_grid) {
                nn::TrainConfig c = nn_cfg;
                c.l2_penalty = l2;
                c.seed = derive_seed(nn_cfg.seed, static_cast<std::uint64_t>(j));
                nn::MlpModel m = nn::train(train, arch, c);
                const double mse = nn::in_sample_mse(m, val);
                rt.grid_mse.push_back(mse);
                if (mse < best) {
                    best = mse;
                    rt.l2 = l2;
                    rt.validation_mse = mse;
                    model = std::move(m);
                }
            }
        } else {
            nn::TrainConfig c = nn_cfg;
            c.l2_penalty = sc.l2_grid.front();
            c.seed = derive_seed(nn_cfg.seed, static_cast<std::uint64_t>(j));
            model = nn::train(train, arch, c);
            rt.l2 = c.l2_penalty;
        }
        res.retrains.push_back(rt);

        fourier::FourierBasis basis;
        basis.order = sc.fourier_order;
        basis.input_dim = data.dim();
        fourier::OlsFit fit;
        if (need_fourier) fit = fourier::fit_ols(train, basis);
        std::vector<nn::MlpModel> reps;
        if (need_boot) {
            bootstrap::BootstrapConfig bc = bs_cfg;
            bc.seed = derive_seed(bs_cfg.seed, static_cast<std::uint64_t>(j));
            nn::TrainConfig c = nn_cfg;
            c.l2_penalty = rt.l2;
            reps = bootstrap::replicate_models(train, model, c, bc);
        }
        const int data_max_fit = val_end - 1;

        const int block_end = std::min(block + plan.retrain_every_months, plan.test_end);
        for (int m = block; m < block_end; ++m) {
            const std::string stamp = format_month(data.months[static_cast<std::size_t>(m)]);
            if (!data.has_lag(m) || m - sc.cov_window < 0) {
                res.warnings.push_back(stamp + ": skipped (no lagged month or short history)");
                continue;
            }
            // Universe: present last month, full return history over the
            // covariance window, realised return this month.
            std::vector<int> uni;
            for (int i = 0; i < data.n_assets(); ++i) {
                if (!data.present(m - 1, i) || !data.has_return(m, i)) continue;
                bool full = true;
                for (int h = m - sc.cov_window; h < m && full; ++h) full = data.has_return(h, i);
                if (full) uni.push_back(i);
            }
            if (static_cast<int>(uni.size()) < sc.min_assets) {
                res.warnings.push_back(stamp + ": skipped (" + std::to_string(uni.size()) + " eligible assets)");
                continue;
            }
            const auto R = static_cast<Eigen::Index>(uni.size());
            Decision dec{m, std::max(data_max_fit, m - 1)};
            detail::assert_no_lookahead(dec);
            res.decisions.push_back(dec);

            Matrix X(R, data.dim());
            Matrix hist(sc.cov_window, R);
            Vector realised(R);
            for (Eigen::Index a = 0; a < R; ++a) {
                const int i = uni[static_cast<std::size_t>(a)];
                X.row(a) = data.chars[static_cast<std::size_t>(m - 1)].row(i);
                for (int h = 0; h < sc.cov_window; ++h) hist(h, a) = data.returns(m - sc.cov_window + h, i);
                realised(a) = data.returns(m, i);
            }
            const Vector z = nn::predict(model, X);
            Vector se = need_fourier ? fourier::asset_se(fit, basis, X) : Vector::Zero(R);
            if (need_boot) {
                const auto ab = bootstrap::per_asset(bootstrap::predict_replicates(model, reps, X), bs_cfg.level);
                se = sc.se_mode == SeMode::Bootstrap ? ab.sigma_star : se.cwiseMax(ab.sigma_star);
            }
            portfolio::CovarianceEstimate cov;
            try {
                cov = sc.cov_shrinkage < 0.0 ? portfolio::estimate_covariance_auto(hist)
                                             : portfolio::estimate_covariance(hist, sc.cov_shrinkage);
            } catch (const Error& e) {
                res.warnings.push_back(stamp + ": skipped (" + e.what() + ")");
                res.decisions.pop_back();
                continue;
            }

            std::vector<double> row(static_cast<std::size_t>(S), 0.0);
            std::vector<Holding> held(static_cast<std::size_t>(S));
            std::array<double, 3> zf{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                                     std::numeric_limits<double>::quiet_NaN()};
            for (Eigen::Index s = 0; s < S; ++s) {
                const std::string& name = sc.strategies[static_cast<std::size_t>(s)];
                Vector w;
                try {
                    if (name == "UA25" || name == "UA50" || name == "UA75") {
                        const std::size_t li = name == "UA25" ? 0 : name == "UA50" ? 1 : 2;
                        portfolio::UaProblem p{z, portfolio::confidence_to_q(se, sc.ua_levels[li], sc.bonferroni),
                                               cov.sigma, sc.gamma, false};
                        w = portfolio::ua_weights(p).omega;
                        zf[li] = static_cast<double>((w.array() == 0.0).count()) / static_cast<double>(R);
                        w = detail::vol_scale(w, hist, sc.vol_target);
                    } else if (name == "MVE") {
                        w = detail::vol_scale(portfolio::mv_weights(z, cov.sigma, sc.gamma).omega, hist, sc.vol_target);
                    } else if (name == "GMVP") {
                        w = detail::vol_scale(portfolio::gmvp(cov.sigma), hist, gmvp_target);
                    } else if (name == "EW") {
                        w = Vector::Constant(R, 1.0 / static_cast<double>(R));
                    } else if (name == "FCI-FDR") {
                        w = selection::strategy_fci_fdr(z, se.cwiseMax(std::numeric_limits<double>::min()),
                                                        sc.fdr_alpha, sc.portfolio_size)
                                .weights;
                    } else if (name == "Highest-K") {
                        w = selection::strategy_highest_k(z, sc.portfolio_size).weights;
                    } else {
                        w = selection::strategy_naive_fdr(hist, sc.fdr_alpha, sc.portfolio_size, z).weights;
                    }
                } catch (const Error& e) {
                    throw NumericalError(stamp + " " + name + ": " + e.what());
                }
                row[static_cast<std::size_t>(s)] = w.dot(realised);
                held[static_cast<std::size_t>(s)] = {uni, w};
            }
            res.months.push_back(m);
            rets.push_back(std::move(row));
            res.holdings.push_back(std::move(held));
            zero_frac.push_back(zf);
        }
    }
    res.returns.resize(static_cast<Eigen::Index>(rets.size()), S);
    res.zero_fraction.resize(static_cast<Eigen::Index>(rets.size()), 3);
    for (std::size_t t = 0; t < rets.size(); ++t) {
        for (Eigen::Index s = 0; s < S; ++s) res.returns(static_cast<Eigen::Index>(t), s) = rets[t][static_cast<std::size_t>(s)];
        for (Eigen::Index k = 0; k < 3; ++k) res.zero_fraction(static_cast<Eigen::Index>(t), k) = zero_frac[t][static_cast<std::size_t>(k)];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Performance statistics.

struct PerfStats {
    double ann_mean = 0.0;
    double ann_sd = 0.0;
    double sharpe = 0.0;
    double sortino = 0.0;
    double max_drawdown = 0.0;
    double best_month = 0.0;
    double worst_month = 0.0;
    double zero_min = std::numeric_limits<double>::quiet_NaN();
    double zero_median = std::numeric_limits<double>::quiet_NaN();
    double zero_max = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double ratio_or_sentinel(double num, double den) {
    if (den > 0.0) return num / den;
    if (num > 0.0) return std::numeric_limits<double>::infinity();
    if (num < 0.0) return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

/// Monthly decimal returns in, annualised figures out:
///   ann_mean = 12 mean, ann_sd = sqrt(12) sd (T-1 denominator),
///   sortino = ann_mean / (sqrt(12) sqrt(mean(min(r,0)^2))),
///   max_drawdown on compounded wealth starting at 1.
/// A zero denominator yields +/-inf by the sign of the numerator.
inline PerfStats perf_stats(const Vector& r, const Vector& zero_fraction = Vector()) {
    if (r.size() < 2) throw DataError("perf_stats: need at least 2 months");
    if (!r.allFinite()) throw DataError("perf_stats: non-finite return");
    const auto n = static_cast<double>(r.size());
    PerfStats s;
    const double mean = r.mean();
    const double sd = std::sqrt((r.array() - mean).square().sum() / (n - 1.0));
    s.ann_mean = 12.0 * mean;
    s.ann_sd = std::sqrt(12.0) * sd;
    s.sharpe = detail::ratio_or_sentinel(s.ann_mean, s.ann_sd);
    const double downside = std::sqrt(r.array().min(0.0).square().sum() / n);
    s.sortino = detail::ratio_or_sentinel(s.ann_mean, std::sqrt(12.0) * downside);
    double wealth = 1.0, peak = 1.0;
    for (Eigen::Index t = 0; t < r.size(); ++t) {
        wealth *= 1.0 + r(t);
        peak = std::max(peak, wealth);
        s.max_drawdown = std::max(s.max_drawdown, (peak - wealth) / peak);
    }
    s.max_drawdown = std::min(s.max_drawdown, 1.0);
    s.best_month = r.maxCoeff();
    s.worst_month = r.minCoeff();
    std::vector<double> z;
    for (Eigen::Index t = 0; t < zero_fraction.size(); ++t)
        if (std::isfinite(zero_fraction(t))) z.push_back(zero_fraction(t));
    if (!z.empty()) {
        std::sort(z.begin(), z.end());
        s.zero_min = z.front();
        s.zero_max = z.back();
        const std::size_t h = z.size() / 2;
        s.zero_median = z.size() % 2 ? z[h] : 0.5 * (z[h - 1] + z[h]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Factor alphas.

struct FactorTable {
    std::vector<int> months;
    std::map<std::string, Vector> columns;

    const Vector& column(const std::string& name) const {
        const auto it = columns.find(name);
        if (it == columns.end()) throw DataError("factor table has no column '" + name + "'");
        return it->second;
    }
};

/// Factor CSV: month (YYYY-MM) followed by factor columns, decimal returns.
inline FactorTable parse_factors(const csv::Table& t) {
    if (t.header.empty() || t.header[0] != "month") throw DataError("factor csv: first column must be 'month'");
    FactorTable f;
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    for (std::size_t c = 1; c < t.header.size(); ++c) f.columns[t.header[c]] = Vector(n);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string where = "line " + std::to_string(t.line_numbers[r]);
        const int m = parse_month(t.rows[r][0]);
        if (!f.months.empty() && m <= f.months.back())
            throw DataError("factor csv: months must be strictly increasing at " + where);
        f.months.push_back(m);
        for (std::size_t c = 1; c < t.header.size(); ++c) {
            const double v = csv::parse_number(t.rows[r][c], where);
            if (std::isnan(v)) throw DataError("factor csv: missing value in '" + t.header[c] + "' at " + where);
            f.columns[t.header[c]](static_cast<Eigen::Index>(r)) = v;
        }
    }
    return f;
}

inline FactorTable load_factors(const std::string& path) { return parse_factors(csv::read_file(path)); }

inline const std::vector<std::pair<std::string, std::vector<std::string>>>& factor_models() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> models{
        {"CAPM", {"mkt_rf"}},
        {"FF3", {"mkt_rf", "smb", "hml"}},
        {"FF4", {"mkt_rf", "smb", "hml", "mom"}},
        {"FF5", {"mkt_rf", "smb", "hml", "rmw", "cma"}},
        {"FF6", {"mkt_rf", "smb", "hml", "rmw", "cma", "mom"}},
        {"FF6+", {"mkt_rf", "smb", "hml", "rmw", "cma", "mom", "st_rev"}},
    };
    return models;
}

struct OlsResult {
    Vector coef;     // intercept first
    Vector se_hc1;
    Vector t_stat;
};

/// OLS of y on [1, X] with HC1 standard errors
///   (X'X)^{-1} X' diag(e^2) X (X'X)^{-1} * n / (n - k).
inline OlsResult ols_hc1(const Vector& y, const Matrix& X) {
    const Eigen::Index n = y.size(), k = X.cols() + 1;
    if (X.rows() != n) throw UsageError("ols: regressors and response differ in length");
    if (n <= k) throw DataError("ols: need more observations than regressors");
    Matrix Z(n, k);
    Z.col(0).setOnes();
    Z.rightCols(X.cols()) = X;
    const Matrix G = Z.transpose() * Z;
    const Eigen::ColPivHouseholderQR<Matrix> qr(Z);
    if (qr.rank() < k) throw NumericalError("ols: regressors are collinear");
    OlsResult r;
    r.coef = qr.solve(y);
    const Vector e = y - Z * r.coef;
    const Matrix Ginv = G.inverse();
    const Matrix meat = Z.transpose() * e.array().square().matrix().asDiagonal() * Z;
    const Matrix V = Ginv * meat * Ginv * (static_cast<double>(n) / static_cast<double>(n - k));
    r.se_hc1 = V.diagonal().cwiseSqrt();
    r.t_stat = r.coef.cwiseQuotient(r.se_hc1);
    return r;
}

/// *** p < 0.01, ** p < 0.05, * p < 0.10 (two-sided, normal reference).
inline std::string stars(double t) {
    if (std::isnan(t)) return "";
    const double p = 2.0 * normal_sf(std::abs(t));
    return p < 0.01 ? "***" : p < 0.05 ? "**" : p < 0.10 ? "*" : "";
}

struct AlphaRow {
    std::string model;
    double alpha_pct = 0.0;  // monthly alpha in percent
    double t_stat = 0.0;
    std::string stars;
    Vector betas;
};

using AlphaReport = std::vector<AlphaRow>;

/// Regresses strategy excess returns (decimal, dated by months) on each
/// factor model's columns.
inline AlphaReport alpha_regressions(const Vector& returns, const std::vector<int>& months, const FactorTable& f,
                                     const std::vector<std::string>& models = {"CAPM", "FF3", "FF4", "FF5", "FF6",
                                                                               "FF6+"}) {
    if (static_cast<Eigen::Index>(months.size()) != returns.size())
        throw UsageError("alpha: returns and months differ in length");
    std::vector<Eigen::Index> rows;
    for (int m : months) {
        const auto it = std::lower_bound(f.months.begin(), f.months.end(), m);
        if (it == f.months.end() || *it != m) throw DataError("alpha: factor table has no month " + format_month(m));
        rows.push_back(it - f.months.begin());
    }
    AlphaReport out;
    for (const auto& name : models) {
        const auto it = std::find_if(factor_models().begin(), factor_models().end(),
                                     [&](const auto& p) { return p.first == name; });
        if (it == factor_models().end()) throw UsageError("alpha: unknown factor model '" + name + "'");
        Matrix X(returns.size(), static_cast<Eigen::Index>(it->second.size()));
        for (std::size_t c = 0; c < it->second.size(); ++c) {
            const Vector& col = f.column(it->second[c]);
            for (std::size_t r = 0; r < rows.size(); ++r)
                X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = col(rows[r]);
        }
        const OlsResult o = ols_hc1(returns, X);
        AlphaRow row;
        row.model = name;
        row.alpha_pct = 100.0 * o.coef(0);
        row.t_stat = o.t_stat(0);
        row.stars = stars(row.t_stat);
        row.betas = o.coef.tail(o.coef.size() - 1);
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace mlfci::backtest
