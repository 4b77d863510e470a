#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "mlfci/selection.hpp"
#include "oracles.hpp"

using namespace mlfci;
using namespace mlfci::selection;
using Catch::Approx;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

std::vector<double> stdvec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector random_p(Rng& rng, Eigen::Index R, bool ties) {
    Vector p(R);
    for (Eigen::Index i = 0; i < R; ++i) {
        p(i) = rng.uniform() * (rng.uniform() < 0.3 ? 0.01 : 1.0);
        if (ties) p(i) = std::round(p(i) * 50.0) / 50.0;
    }
    return p;
}

}  // namespace

TEST_CASE("BH examples") {
    const auto a = bh_select(vec({0.001, 0.01, 0.02, 0.5}), 0.05);
    CHECK(a.k_bh == 3);
    CHECK(a.cutoff == 0.02);
    CHECK(a.rejected == std::vector<bool>{true, true, true, false});
    CHECK(a.rejected == oracle::naive_bh({0.001, 0.01, 0.02, 0.5}, 0.05));

    const auto b = bh_select(vec({0.9, 0.95}), 0.05);
    CHECK(b.k_bh == 0);
    CHECK(b.cutoff == 0.0);
    CHECK(b.rejected == std::vector<bool>{false, false});

    const auto c = bh_select(Vector::Zero(5), 0.05);
    CHECK(c.k_bh == 5);

    // p_(1) = 0.04 misses 0.025 but step-up rejects it with p_(2)
    const auto d = bh_select(vec({0.04, 0.045}), 0.05);
    CHECK(d.k_bh == 2);

    CHECK_THROWS_AS(bh_select(vec({0.1, 1.5}), 0.05), DataError);
    CHECK_THROWS_AS(bh_select(vec({0.1}), -0.1), UsageError);
}

TEST_CASE("BH agrees with the unsorted oracle") {
    Rng rng(42);
    for (int rep = 0; rep < 2000; ++rep) {
        const Eigen::Index R = 1 + static_cast<Eigen::Index>(rng.below(60));
        const Vector p = random_p(rng, R, rep % 2 == 0);
        const double alpha = rep % 3 == 0 ? 0.05 : 0.2 * rng.uniform();
        const auto s = bh_select(p, alpha);
        REQUIRE(s.rejected == oracle::naive_bh(stdvec(p), alpha));
        for (Eigen::Index i = 0; i < R; ++i) CHECK(s.rejected[static_cast<std::size_t>(i)] == (p(i) <= s.cutoff && s.k_bh > 0));
    }
}

TEST_CASE("BH rejections grow with alpha and ignore the order of assets") {
    Rng rng(7);
    for (int rep = 0; rep < 200; ++rep) {
        const Eigen::Index R = 2 + static_cast<Eigen::Index>(rng.below(40));
        const Vector p = random_p(rng, R, rep % 2 == 1);
        std::vector<bool> last(static_cast<std::size_t>(R), false);
        for (double alpha : {0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0}) {
            const auto s = bh_select(p, alpha);
            for (std::size_t i = 0; i < last.size(); ++i) CHECK((!last[i] || s.rejected[i]));
            last = s.rejected;
        }
        std::vector<int> perm(static_cast<std::size_t>(R));
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        Vector q(R);
        for (Eigen::Index i = 0; i < R; ++i) q(i) = p(perm[static_cast<std::size_t>(i)]);
        const auto a = bh_select(p, 0.1), b = bh_select(q, 0.1);
        CHECK(a.cutoff == b.cutoff);
        for (Eigen::Index i = 0; i < R; ++i)
            CHECK(b.rejected[static_cast<std::size_t>(i)] == a.rejected[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    }
}

TEST_CASE("BH controls the FDR under the global null") {
    Rng rng(2024);
    const int reps = 1000, R = 200;
    const double alpha = 0.05;
    double fdp_sum = 0.0;
    for (int r = 0; r < reps; ++r) {
        Vector t(R);
        for (int i = 0; i < R; ++i) t(i) = rng.normal();
        const auto s = bh_select(make_tests(t).p_values, alpha);
        fdp_sum += s.k_bh > 0 ? 1.0 : 0.0;
    }
    const double fdr = fdp_sum / reps;
    CHECK(fdr <= alpha + 3.0 * std::sqrt(alpha * (1 - alpha) / reps));
}

TEST_CASE("p-values") {
    CHECK(p_value(0.0, Side::OneSidedPositive) == Approx(0.5));
    CHECK(p_value(1.959964, Side::TwoSided) == Approx(0.05).margin(1e-7));
    CHECK(p_value(-1.959964, Side::TwoSided) == Approx(0.05).margin(1e-7));
    CHECK(p_value(1.644854, Side::OneSidedPositive) == Approx(0.05).margin(1e-7));
    CHECK(p_value(std::numeric_limits<double>::infinity(), Side::OneSidedPositive) == 0.0);
    CHECK_THROWS_AS(p_value(std::nan(""), Side::TwoSided), DataError);
}

TEST_CASE("FCI-FDR strategy") {
    const auto s = strategy_fci_fdr(vec({0.05, 0.04, 0.03}), vec({0.001, 0.001, 10.0}), 0.05, 2);
    CHECK(s.chosen == std::vector<int>{0, 1});
    CHECK(s.weights(0) == 0.5);
    CHECK(s.weights(2) == 0.0);

    CHECK(strategy_fci_fdr(vec({-0.1, -0.2}), vec({0.01, 0.01}), 0.05, 2).chosen.empty());
    CHECK(strategy_fci_fdr(vec({-0.1, -0.2}), vec({0.01, 0.01}), 0.05, 2).weights.sum() == 0.0);

    const auto one = strategy_fci_fdr(vec({0.0, 0.5, 0.0}), vec({1.0, 0.01, 1.0}), 0.05, 1);
    CHECK(one.chosen == std::vector<int>{1});
    CHECK(one.weights(1) == 1.0);

    CHECK_THROWS_AS(strategy_fci_fdr(vec({0.1}), vec({0.0}), 0.05, 1), DataError);
    CHECK_THROWS_AS(strategy_fci_fdr(vec({0.1}), vec({1.0}), 0.05, 0), UsageError);

    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        const Eigen::Index R = 1 + static_cast<Eigen::Index>(rng.below(30));
        const Vector z = oracle::random_vector(rng, R, 0.05);
        Vector se(R);
        for (Eigen::Index i = 0; i < R; ++i) se(i) = 0.001 + 0.03 * rng.uniform();
        const int k = 1 + static_cast<int>(rng.below(10));
        const auto f = strategy_fci_fdr(z, se, 0.1, k);
        CHECK(static_cast<int>(f.chosen.size()) == std::min(k, f.k_bh));
        for (int i : f.chosen) CHECK(f.rejected[static_cast<std::size_t>(i)]);
        // every rejected asset left out has a forecast no larger than the chosen ones
        for (std::size_t i = 0; i < f.rejected.size(); ++i)
            if (f.rejected[i] && std::find(f.chosen.begin(), f.chosen.end(), static_cast<int>(i)) == f.chosen.end())
                for (int c : f.chosen) CHECK(z(static_cast<Eigen::Index>(i)) <= z(c));
        if (!f.chosen.empty()) CHECK(f.weights.sum() == Approx(1.0));
    }
}

TEST_CASE("Highest-K strategy") {
    CHECK(strategy_highest_k(vec({3, 1, 2}), 2).chosen == std::vector<int>{0, 2});
    CHECK(strategy_highest_k(vec({3, 1, 2}), 5).chosen == std::vector<int>{0, 1, 2});
    CHECK(strategy_highest_k(vec({1, 1, 1}), 2).chosen == std::vector<int>{0, 1});
    CHECK_THROWS_AS(strategy_highest_k(vec({1}), 0), UsageError);

    Rng rng(10);
    for (int rep = 0; rep < 100; ++rep) {
        const Eigen::Index R = 1 + static_cast<Eigen::Index>(rng.below(50));
        const Vector z = oracle::random_vector(rng, R);
        const int k = 1 + static_cast<int>(rng.below(20));
        std::vector<int> idx(static_cast<std::size_t>(R));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) { return z(a) > z(b); });
        idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k)));
        std::sort(idx.begin(), idx.end());
        CHECK(strategy_highest_k(z, k).chosen == idx);
    }
}

TEST_CASE("Naive-FDR strategy") {
    SECTION("zero-variance columns") {
        Matrix h(5, 3);
        h.col(0).setConstant(0.01);
        h.col(1).setConstant(-0.01);
        h.col(2).setZero();
        const Vector t = naive_t_stats(h);
        CHECK(t(0) == std::numeric_limits<double>::infinity());
        CHECK(t(1) == -std::numeric_limits<double>::infinity());
        CHECK(std::isnan(t(2)));
        const auto s = strategy_naive_fdr(h, 0.05, 3, vec({0.0, 1.0, 2.0}));
        CHECK(s.chosen == std::vector<int>{0});
    }
    SECTION("t statistic of the mean") {
        Rng rng(1);
        Matrix h(30, 2);
        for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = rng.normal();
        const Vector t = naive_t_stats(h);
        std::vector<double> col = oracle::column(h, 1);
        CHECK(t(1) == Approx(oracle::mean(col) / (oracle::sample_sd(col) / std::sqrt(30.0))).epsilon(1e-12));
        CHECK_THROWS_AS(naive_t_stats(h.topRows(1)), DataError);
    }
    SECTION("calibration and power") {
        Rng rng(99);
        const int draws = 1000, T = 60, R = 10;
        int null_rejections = 0, signal_hits = 0;
        for (int d = 0; d < draws; ++d) {
            Matrix h(T, R);
            for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = rng.normal();
            null_rejections += bh_select(make_tests(naive_t_stats(h)).p_values, 0.05).k_bh;
            // a single column whose mean is 5 standard errors
            Matrix one = h.leftCols(1);
            one.array() += 5.0 / std::sqrt(double(T));
            const auto s = strategy_naive_fdr(one, 0.05, 1, Vector::Zero(1));
            signal_hits += s.rejected[0] ? 1 : 0;
        }
        CHECK(double(null_rejections) / (double(draws) * R) < 0.10);
        CHECK(double(signal_hits) / draws > 0.99);
    }
}
