#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mlfci/common.hpp"

namespace mlfci {

/// Pooled training sample: each observation pairs lagged characteristics
/// x_{i,t-1} with the return y_{i,t}. Observations are stored grouped by
/// period t (0-based), which is what time-clustered statistics need.
/// Balanced panels have exactly n_assets observations per period, but
/// nothing here requires it.
class Panel {
public:
    Panel() = default;

    /// Build from a balanced layout. chars[t] is N x d (t = 0..T-1 are
    /// the lagged characteristics); returns is N x T with returns(i, t)
    /// the return realised in period t+1.
    static Panel from_balanced(const std::vector<Matrix>& chars, const Matrix& returns) {
        const auto T = static_cast<std::size_t>(returns.cols());
        const auto N = static_cast<std::size_t>(returns.rows());
        if (chars.size() < T) throw UsageError("panel: need one characteristics slice per return period");
        if (T == 0 || N == 0) throw DataError("panel: empty");
        const auto d = chars.front().cols();
        Panel p;
        p.features_.resize(d, static_cast<Eigen::Index>(N * T));
        p.returns_.resize(static_cast<Eigen::Index>(N * T));
        p.period_.resize(N * T);
        p.asset_.resize(N * T);
        for (std::size_t t = 0; t < T; ++t) {
            if (chars[t].rows() != static_cast<Eigen::Index>(N) || chars[t].cols() != d)
                throw UsageError("panel: characteristics slice " + std::to_string(t) + " has wrong shape");
            for (std::size_t i = 0; i < N; ++i) {
                const auto k = static_cast<Eigen::Index>(t * N + i);
                p.features_.col(k) = chars[t].row(static_cast<Eigen::Index>(i)).transpose();
                p.returns_(k) = returns(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
                p.period_[static_cast<std::size_t>(k)] = static_cast<int>(t);
                p.asset_[static_cast<std::size_t>(k)] = static_cast<int>(i);
            }
        }
        p.n_assets_ = static_cast<int>(N);
        p.finish();
        return p;
    }

    /// Build from loose observations; they are stably sorted by period.
    static Panel from_observations(Matrix features, Vector returns, std::vector<int> period,
                                   std::vector<int> asset, int n_assets) {
        const auto n = static_cast<std::size_t>(returns.size());
        if (features.cols() != returns.size() || period.size() != n || asset.size() != n)
            throw UsageError("panel: observation arrays disagree in length");
        if (n == 0) throw DataError("panel: empty");
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return period[a] < period[b]; });
        Panel p;
        p.features_.resize(features.rows(), features.cols());
        p.returns_.resize(returns.size());
        p.period_.resize(n);
        p.asset_.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            const auto src = static_cast<Eigen::Index>(order[k]);
            p.features_.col(static_cast<Eigen::Index>(k)) = features.col(src);
            p.returns_(static_cast<Eigen::Index>(k)) = returns(src);
            p.period_[k] = period[order[k]];
            p.asset_[k] = asset[order[k]];
        }
        // Renumber periods densely from 0.
        int next = -1, last = std::numeric_limits<int>::min();
        for (auto& t : p.period_) {
            if (t != last) {
                last = t;
                ++next;
            }
            t = next;
        }
        p.n_assets_ = n_assets;
        p.finish();
        return p;
    }

    const Matrix& features() const { return features_; }
    const Vector& returns() const { return returns_; }
    const std::vector<int>& periods() const { return period_; }
    const std::vector<int>& assets() const { return asset_; }

    Eigen::Index n_obs() const { return returns_.size(); }
    Eigen::Index dim() const { return features_.rows(); }
    int n_periods() const { return static_cast<int>(period_start_.size()) - 1; }
    int n_assets() const { return n_assets_; }

    /// Observation index range [begin, end) of period t.
    std::pair<Eigen::Index, Eigen::Index> period_range(int t) const {
        return {static_cast<Eigen::Index>(period_start_[static_cast<std::size_t>(t)]),
                static_cast<Eigen::Index>(period_start_[static_cast<std::size_t>(t) + 1])};
    }

    /// Same features and grouping, different targets.
    Panel with_returns(Vector y) const {
        if (y.size() != returns_.size()) throw UsageError("panel: replacement returns have wrong length");
        Panel p = *this;
        p.returns_ = std::move(y);
        return p;
    }

    bool same_shape(const Panel& other) const {
        return n_obs() == other.n_obs() && dim() == other.dim() && period_ == other.period_;
    }

    void validate_finite() const {
        if (!features_.allFinite()) throw DataError("panel: non-finite characteristic value");
        if (!returns_.allFinite()) throw DataError("panel: non-finite return value");
    }

private:
    void finish() {
        const int T = period_.empty() ? 0 : period_.back() + 1;
        period_start_.assign(static_cast<std::size_t>(T) + 1, 0);
        for (int t : period_) ++period_start_[static_cast<std::size_t>(t) + 1];
        for (std::size_t t = 1; t < period_start_.size(); ++t) period_start_[t] += period_start_[t - 1];
        for (int a : asset_)
            if (a < 0 || a >= n_assets_) throw UsageError("panel: asset index out of range");
    }

    Matrix features_;  // d x n_obs
    Vector returns_;
    std::vector<int> period_;
    std::vector<int> asset_;
    std::vector<std::size_t> period_start_;
    int n_assets_ = 0;
};

}  // namespace mlfci
