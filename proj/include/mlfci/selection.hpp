#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mlfci/common.hpp"

namespace mlfci::selection {

enum class Side { OneSidedPositive, TwoSided };

/// p-value of a t statistic under the normal reference distribution.
inline double p_value(double t, Side side) {
    if (std::isnan(t)) throw DataError("p_value: NaN statistic");
    return side == Side::OneSidedPositive ? normal_sf(t) : 2.0 * normal_sf(std::abs(t));
}

struct TestPanel {
    std::vector<int> asset_ids;
    Vector t_stats;
    Vector p_values;
    Side side = Side::OneSidedPositive;
};

inline TestPanel make_tests(const Vector& t_stats, Side side = Side::OneSidedPositive) {
    TestPanel tp;
    tp.asset_ids.resize(static_cast<std::size_t>(t_stats.size()));
    std::iota(tp.asset_ids.begin(), tp.asset_ids.end(), 0);
    tp.t_stats = t_stats;
    tp.side = side;
    tp.p_values.resize(t_stats.size());
    for (Eigen::Index i = 0; i < t_stats.size(); ++i) tp.p_values(i) = p_value(t_stats(i), side);
    return tp;
}

struct SelectionResult {
    std::vector<bool> rejected;
    double cutoff = 0.0;          // c0 = p_(K), 0 if nothing is rejected
    int k_bh = 0;                 // number of BH rejections
    std::vector<int> chosen;      // indices in the long portfolio
    Vector weights;               // 1/|chosen| on chosen assets
    TestPanel tests;
};

/// Benjamini-Hochberg step-up: K = max{i : p_(i) <= alpha i / R}, reject
/// every p <= p_(K). Equal p-values are therefore treated alike.
inline SelectionResult bh_select(const Vector& p_values, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("bh_select: alpha must lie in [0,1]");
    const auto R = static_cast<std::size_t>(p_values.size());
    for (Eigen::Index i = 0; i < p_values.size(); ++i)
        if (!(p_values(i) >= 0.0 && p_values(i) <= 1.0))
            throw DataError("bh_select: p-value " + std::to_string(i) + " outside [0,1]");
    std::vector<double> sorted(p_values.data(), p_values.data() + R);
    std::sort(sorted.begin(), sorted.end());
    std::size_t K = 0;
    for (std::size_t i = R; i > 0; --i) {
        if (sorted[i - 1] <= alpha * static_cast<double>(i) / static_cast<double>(R)) {
            K = i;
            break;
        }
    }
    SelectionResult out;
    out.rejected.assign(R, false);
    if (K > 0) {
        out.cutoff = sorted[K - 1];
        for (std::size_t i = 0; i < R; ++i) out.rejected[i] = p_values(static_cast<Eigen::Index>(i)) <= out.cutoff;
    }
    out.k_bh = static_cast<int>(std::count(out.rejected.begin(), out.rejected.end(), true));
    out.weights = Vector::Zero(static_cast<Eigen::Index>(R));
    return out;
}

namespace detail {

// Indices sorted by z descending, ties by index ascending.
inline std::vector<int> rank_by_forecast(const Vector& z_hat, const std::vector<int>& candidates) {
    std::vector<int> order = candidates;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (z_hat(a) != z_hat(b)) return z_hat(a) > z_hat(b);
        return a < b;
    });
    return order;
}

inline void choose_top(SelectionResult& s, const Vector& z_hat, const std::vector<int>& candidates, int k) {
    std::vector<int> order = rank_by_forecast(z_hat, candidates);
    if (static_cast<int>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    s.chosen = order;
    s.weights = Vector::Zero(z_hat.size());
    for (int i : order) s.weights(i) = 1.0 / static_cast<double>(order.size());
}

inline std::vector<int> rejected_indices(const SelectionResult& s) {
    std::vector<int> out;
    for (std::size_t i = 0; i < s.rejected.size(); ++i)
        if (s.rejected[i]) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace detail

/// Long the (at most) k highest forecasts among assets whose t = z/se is
/// significant after BH at level alpha. An empty choice is a valid outcome.
inline SelectionResult strategy_fci_fdr(const Vector& z_hat, const Vector& se, double alpha, int k,
                                        Side side = Side::OneSidedPositive) {
    if (se.size() != z_hat.size()) throw UsageError("fci_fdr: se length differs from z_hat");
    if (k < 1) throw UsageError("fci_fdr: portfolio size must be >= 1");
    if ((se.array() <= 0.0).any()) throw DataError("fci_fdr: standard errors must be positive");
    const TestPanel tests = make_tests(z_hat.cwiseQuotient(se), side);
    SelectionResult s = bh_select(tests.p_values, alpha);
    s.tests = tests;
    detail::choose_top(s, z_hat, detail::rejected_indices(s), k);
    return s;
}

/// Long the k highest forecasts; ties go to the lower index.
inline SelectionResult strategy_highest_k(const Vector& z_hat, int k) {
    if (k < 1) throw UsageError("highest_k: portfolio size must be >= 1");
    SelectionResult s;
    std::vector<int> all(static_cast<std::size_t>(z_hat.size()));
    std::iota(all.begin(), all.end(), 0);
    s.rejected.assign(all.size(), false);
    detail::choose_top(s, z_hat, all, k);
    return s;
}

/// t statistics of time-series means, mean / (sd / sqrt(T)), one per column.
/// A zero-variance column gets +inf / -inf by the sign of its mean and NaN
/// when the mean is zero too.
inline Vector naive_t_stats(const Matrix& history) {
    const Eigen::Index T = history.rows();
    if (T < 2) throw DataError("naive t: need at least 2 periods");
    Vector t(history.cols());
    for (Eigen::Index i = 0; i < history.cols(); ++i) {
        const auto col = history.col(i);
        const double mean = col.mean();
        const double var = (col.array() - mean).square().sum() / static_cast<double>(T - 1);
        if (var > 0.0) {
            t(i) = mean / std::sqrt(var / static_cast<double>(T));
        } else {
            t(i) = mean > 0.0   ? std::numeric_limits<double>::infinity()
                   : mean < 0.0 ? -std::numeric_limits<double>::infinity()
                                : std::numeric_limits<double>::quiet_NaN();
        }
    }
    return t;
}

/// BH on historical-mean t statistics, then the k highest forecasts among
/// the rejected assets. Columns with a NaN statistic are excluded (p = 1).
inline SelectionResult strategy_naive_fdr(const Matrix& history, double alpha, int k, const Vector& z_hat,
                                          Side side = Side::OneSidedPositive) {
    if (history.cols() != z_hat.size()) throw UsageError("naive_fdr: history columns differ from z_hat");
    if (k < 1) throw UsageError("naive_fdr: portfolio size must be >= 1");
    const Vector t = naive_t_stats(history);
    TestPanel tests;
    tests.asset_ids.resize(static_cast<std::size_t>(t.size()));
    std::iota(tests.asset_ids.begin(), tests.asset_ids.end(), 0);
    tests.t_stats = t;
    tests.side = side;
    tests.p_values.resize(t.size());
    for (Eigen::Index i = 0; i < t.size(); ++i) tests.p_values(i) = std::isnan(t(i)) ? 1.0 : p_value(t(i), side);
    SelectionResult s = bh_select(tests.p_values, alpha);
    s.tests = tests;
    std::vector<int> cand;
    for (int i : detail::rejected_indices(s))
        if (!std::isnan(t(i))) cand.push_back(i);
    detail::choose_top(s, z_hat, cand, k);
    return s;
}

}  // namespace mlfci::selection
