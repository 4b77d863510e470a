#include <catch_amalgamated.hpp>

#include <algorithm>

#include "mlfci/simulate.hpp"
#include "oracles.hpp"

using namespace mlfci;
using namespace mlfci::simulate;
using Catch::Approx;

namespace {

SimConfig small_config(std::uint64_t seed) {
    SimConfig c;
    c.N = 30;
    c.T = 24;
    c.d = 3;
    c.seed = seed;
    return c;
}

double lag1_autocorrelation(const std::vector<double>& x) {
    const double m = oracle::mean(x);
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        den += (x[t] - m) * (x[t] - m);
        if (t > 0) num += (x[t] - m) * (x[t - 1] - m);
    }
    return num / den;
}

}  // namespace

TEST_CASE("rank normalisation") {
    Rng rng(1);
    Matrix x(7, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.normal();
    const Matrix r = rank_normalize(x);
    for (Eigen::Index k = 0; k < 3; ++k) {
        std::vector<double> col = oracle::column(r, k);
        std::sort(col.begin(), col.end());
        for (std::size_t i = 0; i < col.size(); ++i) CHECK(col[i] == static_cast<double>(i + 1) / 7.0);
        for (Eigen::Index i = 0; i < 7; ++i)
            for (Eigen::Index j = 0; j < 7; ++j)
                if (x(i, k) < x(j, k)) CHECK(r(i, k) < r(j, k));
    }
    // ties go to the lower row index
    const Matrix t = rank_normalize(Matrix::Constant(3, 1, 2.0));
    CHECK(t(0, 0) == Approx(1.0 / 3));
    CHECK(t(2, 0) == 1.0);
}

TEST_CASE("characteristics follow the latent AR(1)") {
    SimConfig c;
    c.N = 6;
    c.T = 3000;
    c.d = 2;
    Rng rng(3);
    const Characteristics ch = gen_characteristics(c, rng);
    REQUIRE(ch.latent.size() == 3001);
    REQUIRE(ch.ranked.size() == 3001);
    for (Eigen::Index i = 0; i < 3; ++i) {
        std::vector<double> path;
        for (const auto& m : ch.latent) path.push_back(m(i, 0));
        CHECK(std::abs(lag1_autocorrelation(path) - 0.7) <= 0.05);
    }
    std::vector<double> a, b;
    for (const auto& m : ch.latent) {
        a.push_back(m(0, 1));
        b.push_back(m(1, 1));
    }
    // independent AR(1) paths: the correlation's sd is inflated by (1 + a^2) / (1 - a^2)
    const double ma = oracle::mean(a), mb = oracle::mean(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        sab += (a[t] - ma) * (b[t] - mb);
        saa += (a[t] - ma) * (a[t] - ma);
        sbb += (b[t] - mb) * (b[t] - mb);
    }
    const double inflate = std::sqrt((1 + 0.49) / (1 - 0.49));
    CHECK(std::abs(sab / std::sqrt(saa * sbb)) <= 3.0 * inflate / std::sqrt(3001.0));
    for (const auto& m : ch.ranked) {
        std::vector<double> col = oracle::column(m, 1);
        std::sort(col.begin(), col.end());
        for (std::size_t i = 0; i < col.size(); ++i) CHECK(col[i] == static_cast<double>(i + 1) / 6.0);
    }
}

TEST_CASE("beta functions") {
    Eigen::RowVectorXd x(4);
    x << 0.25, 0.5, 1.0, 0.75;
    const Eigen::Vector3d b = beta_functions(x);
    CHECK(b(0) == 0.125);
    CHECK(b(1) == Approx((0.0625 + 0.25 + 1.0 + 0.5625) / 4));
    CHECK(b(2) == Approx(0.625));
    Eigen::RowVectorXd odd(3);
    odd << 0.9, 0.1, 0.4;
    CHECK(beta_functions(odd)(2) == 0.4);
}

TEST_CASE("simulated panel") {
    const SimConfig c = small_config(11);
    const SimPanel sp = simulate_panel(c);
    CHECK(sp.panel.n_obs() == c.N * c.T);
    CHECK(sp.characteristics.size() == static_cast<std::size_t>(c.T + 1));
    CHECK(sp.factors.rows() == c.T);

    SECTION("returns reconstruct from the stored pieces") {
        const Matrix y = sp.reconstruct_returns();
        for (int t = 0; t < c.T; ++t) {
            const auto [b, e] = sp.panel.period_range(t);
            for (Eigen::Index k = b; k < e; ++k)
                CHECK(std::abs(sp.panel.returns()(k) - y(k - b, t)) <= 1e-12);
        }
    }
    SECTION("lagged characteristics feed the betas") {
        for (int t = 0; t < c.T; ++t)
            CHECK((sp.betas[static_cast<std::size_t>(t)] - beta_matrix(sp.characteristics[static_cast<std::size_t>(t)]))
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
        CHECK((sp.true_expected_returns - beta_matrix(sp.forecast_features) * c.factor_mean).cwiseAbs().maxCoeff() <=
              1e-15);
    }
    SECTION("reproducible bit for bit") {
        const SimPanel again = simulate_panel(c);
        CHECK(again.panel.returns() == sp.panel.returns());
        CHECK(again.factors == sp.factors);
        CHECK(again.sigma == sp.sigma);
    }
    SECTION("scales lie in the configured range") {
        CHECK(sp.s.minCoeff() >= c.s_lo);
        CHECK(sp.s.maxCoeff() <= c.s_hi);
    }
}

TEST_CASE("idiosyncratic share calibration") {
    SimConfig c;
    c.N = 200;
    c.T = 120;
    c.d = 20;
    c.seed = 5;
    const SimPanel sp = simulate_panel(c);
    CHECK(sp.achieved_idio_share >= 0.49);
    CHECK(sp.achieved_idio_share <= 0.51);
    // independent recomputation of the median share
    std::vector<double> shares;
    const Matrix y = sp.reconstruct_returns();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const std::vector<double> row = oracle::row(y, i);
        const double sd = oracle::sample_sd(row);
        shares.push_back(sp.s(i) * sp.s(i) * sp.sigma * sp.sigma / (sd * sd));
    }
    std::nth_element(shares.begin(), shares.begin() + 100, shares.end());
    const double upper = shares[100];
    std::nth_element(shares.begin(), shares.begin() + 99, shares.end());
    CHECK(0.5 * (upper + shares[99]) == Approx(sp.achieved_idio_share).epsilon(1e-10));
}

TEST_CASE("degenerate and noise-free panels") {
    SECTION("no factors and no noise gives zero returns") {
        SimConfig c = small_config(2);
        c.factor_cov.setZero();
        c.factor_mean.setZero();
        c.idio_sigma = 0.0;
        CHECK(simulate_panel(c).panel.returns().cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("without noise the return variance is the factor variance") {
        SimConfig c;
        c.N = 4;
        c.T = 2;
        c.d = 3;
        c.idio_sigma = 0.0;
        Rng rng(9);
        const Characteristics ch = gen_characteristics(c, rng);
        const Eigen::Vector3d g = beta_matrix(ch.ranked[0]).row(2).transpose();
        const int draws = 20000;
        std::vector<double> y;
        for (int k = 0; k < draws; ++k) y.push_back(gen_returns(c, ch, rng).panel.returns()(2));
        const double var = g.dot(c.factor_cov * g);
        const double sd = oracle::sample_sd(y);
        // sampling sd of a normal sample variance is var * sqrt(2 / (n - 1))
        CHECK(std::abs(sd * sd - var) <= 4.0 * var * std::sqrt(2.0 / (draws - 1)));
        CHECK(std::abs(oracle::mean(y) - g.dot(c.factor_mean)) <= 4.0 * std::sqrt(var / draws));
    }
}

TEST_CASE("configuration validation") {
    SimConfig c = small_config(1);
    c.d = 1;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = small_config(1);
    c.target_idio_share = 1.0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = small_config(1);
    c.factor_cov(0, 0) = -1.0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    CoverageConfig cc;
    cc.replications = 49;
    CHECK_THROWS_AS(cc.validate(), UsageError);
    cc.replications = 0;
    CHECK_THROWS_AS(coverage_experiment(small_config(1), cc), UsageError);
    CHECK(method_from_string("time_clustered") == Method::TimeClustered);
    CHECK_THROWS_AS(method_from_string("wild"), UsageError);
}

TEST_CASE("small coverage experiment") {
    SimConfig sim = small_config(21);
    sim.N = 40;
    sim.T = 30;
    CoverageConfig cc;
    cc.replications = 60;
    cc.methods = {Method::Analytic, Method::Oracle, Method::TimeClustered};
    cc.arch = nn::MlpArchitecture{0, {4, 4}};
    cc.train.epochs = 150;
    cc.train.learning_rate = 0.01;
    cc.train.batch_size = 1 << 30;
    cc.boot.replicates = 30;
    cc.boot.k = 5;
    cc.fourier_order = 2;
    cc.threads = 2;
    const CoverageReport rep = coverage_experiment(sim, cc);
    REQUIRE(rep.summaries.size() == 3);
    CHECK(rep.failures == 0);
    for (const auto& r : rep.replications) {
        CHECK(r.seed == derive_seed(sim.seed, static_cast<std::uint64_t>(r.index)));
        for (double s : r.scale) CHECK(s > 0.0);
    }

    const MethodSummary& oracle_m = rep.summaries[1];
    const double band = 3.0 * std::sqrt(0.95 * 0.05 / oracle_m.n);
    CHECK(std::abs(oracle_m.coverage95 - 0.95) <= band);
    CHECK(oracle_m.coverage90 <= oracle_m.coverage95);
    CHECK(oracle_m.coverage95 <= oracle_m.coverage99);
    CHECK(rep.forecast_sd > 0.0);

    SECTION("summary statistics agree with a direct recomputation") {
        std::vector<double> t;
        for (const auto& r : rep.replications) t.push_back(r.t_stat[0]);
        CHECK(rep.summaries[0].mean == Approx(oracle::mean(t)).margin(1e-14));
        CHECK(rep.summaries[0].sd == Approx(oracle::sample_sd(t)).epsilon(1e-12));
        const double c = oracle::normal_quantile(0.975);
        const auto inside = std::count_if(t.begin(), t.end(), [&](double v) { return std::abs(v) <= c; });
        CHECK(rep.summaries[0].coverage95 == Approx(double(inside) / t.size()));
    }
    SECTION("thread count does not change the report") {
        CoverageConfig one = cc;
        one.threads = 1;
        const CoverageReport again = coverage_experiment(sim, one);
        for (std::size_t i = 0; i < rep.replications.size(); ++i)
            CHECK(again.replications[i].t_stat == rep.replications[i].t_stat);
    }
}

TEST_CASE("KS distance") {
    CHECK(std::isnan(ks_distance({})));
    CHECK(ks_distance({0.0}) == Approx(0.5));
    Rng rng(4);
    std::vector<double> x(5000);
    for (auto& v : x) v = rng.normal();
    CHECK(ks_distance(x) < 1.36 / std::sqrt(5000.0) * 1.5);
    for (auto& v : x) v *= 3.0;
    CHECK(ks_distance(x) > 0.1);
}
