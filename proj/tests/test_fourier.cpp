#include <catch_amalgamated.hpp>

#include "mlfci/fourier.hpp"
#include "oracles.hpp"

using namespace mlfci;
using Catch::Approx;

namespace {

Panel random_panel(int N, int T, int d, Rng& rng, double noise = 1.0) {
    std::vector<Matrix> chars;
    Matrix y(N, T);
    for (int t = 0; t < T; ++t) {
        Matrix x(N, d);
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < d; ++k) x(i, k) = rng.uniform();
        chars.push_back(x);
        for (int i = 0; i < N; ++i) y(i, t) = 0.3 * x(i, 0) + noise * rng.normal();
    }
    return Panel::from_balanced(chars, y);
}

Matrix random_features(Eigen::Index n, Eigen::Index d, Rng& rng) {
    Matrix x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < d; ++k) x(i, k) = rng.uniform();
    return x;
}

}  // namespace

TEST_CASE("expand evaluates the trigonometric basis") {
    SECTION("x = 0, J = 1") {
        const Matrix phi = fourier::expand({1, 1}, Matrix::Zero(1, 1));
        REQUIRE(phi.cols() == 3);
        CHECK(phi(0, 0) == 1.0);
        CHECK(phi(0, 1) == 0.0);
        CHECK(phi(0, 2) == 1.0);
    }
    SECTION("x = 1, J = 3") {
        const Matrix phi = fourier::expand({3, 1}, Matrix::Ones(1, 1));
        const double h = std::sqrt(0.5);
        const double expect[] = {1.0, h, h, 1.0, 0.0, h, -h};
        REQUIRE(phi.cols() == 7);
        for (int c = 0; c < 7; ++c) CHECK(phi(0, c) == Approx(expect[c]).margin(1e-15));
    }
    SECTION("entries are bounded and ordered feature-major") {
        Rng rng(3);
        const Matrix x = random_features(50, 4, rng);
        const fourier::FourierBasis b{3, 4};
        const Matrix phi = fourier::expand(b, x);
        CHECK(phi.cols() == 1 + 2 * 3 * 4);
        CHECK(phi.rightCols(phi.cols() - 1).cwiseAbs().maxCoeff() <= 1.0);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const auto ref = oracle::fourier_row(oracle::row(x, r), 3);
            for (Eigen::Index c = 0; c < phi.cols(); ++c) CHECK(phi(r, c) == ref[static_cast<std::size_t>(c)]);
        }
        CHECK(fourier::expand_columns(b, x.transpose()) == phi);
    }
    SECTION("non-finite input") {
        Matrix x = Matrix::Zero(2, 1);
        x(1, 0) = std::nan("");
        CHECK_THROWS_AS(fourier::expand({1, 1}, x), DataError);
    }
}

TEST_CASE("OLS recovers a representable target") {
    Rng rng(11);
    const fourier::FourierBasis b{2, 2};
    const Panel p0 = random_panel(30, 10, 2, rng);
    Vector theta(b.dim());
    for (Eigen::Index k = 0; k < theta.size(); ++k) theta(k) = rng.normal();
    const Panel p = p0.with_returns(fourier::expand_columns(b, p0.features()) * theta);
    const auto fit = fourier::fit_ols(p, b);
    CHECK((fit.coefficients - theta).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(fit.residuals.cwiseAbs().maxCoeff() <= 1e-10);

    SECTION("zero residuals give zero standard error") {
        const Matrix xT = random_features(30, 2, rng);
        const auto se = fourier::analytic_se(fit, b, Vector::Constant(30, 1.0 / 30), xT);
        CHECK(se.se <= 1e-9);
    }
}

TEST_CASE("OLS matches an independent normal-equation solve") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const Panel p = random_panel(3, 4, 1, rng);
        const auto fit = fourier::fit_ols(p, {1, 1});
        const auto ref = oracle::ols_normal_equations(p, 1);
        for (std::size_t k = 0; k < ref.theta.size(); ++k)
            CHECK(fit.coefficients(static_cast<Eigen::Index>(k)) == Approx(static_cast<double>(ref.theta[k])).margin(1e-10));
        // residuals are orthogonal to the design
        const Matrix psi = fourier::expand_columns({1, 1}, p.features());
        CHECK((psi.transpose() * fit.residuals).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + p.returns().norm()));
    }
}

TEST_CASE("constant target is fitted exactly") {
    Rng rng(8);
    const Panel p0 = random_panel(20, 6, 2, rng);
    const Panel p = p0.with_returns(Vector::Constant(p0.n_obs(), 0.7));
    const fourier::FourierBasis b{3, 2};
    const auto fit = fourier::fit_ols(p, b);
    CHECK(((fourier::expand_columns(b, p.features()) * fit.coefficients).array() - 0.7).abs().maxCoeff() <= 1e-8);
}

TEST_CASE("rank deficiency is reported") {
    // Every observation has the same characteristic value.
    std::vector<Matrix> chars(5, Matrix::Constant(4, 1, 0.5));
    Matrix y = Matrix::Random(4, 5);
    const Panel p = Panel::from_balanced(chars, y);
    try {
        fourier::fit_ols(p, {2, 1});
        FAIL("expected a singular Gram matrix");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("singular") != std::string::npos);
        CHECK(std::string(e.what()).find("condition") != std::string::npos);
    }
    CHECK_THROWS_AS(fourier::fit_ols(Panel::from_balanced({Matrix::Constant(1, 1, 0.2)}, Matrix::Ones(1, 1)), {1, 1}),
                    NumericalError);
}

TEST_CASE("analytic SE matches the brute-force sandwich") {
    Rng rng(21);
    for (int rep = 0; rep < 25; ++rep) {
        const Panel p = random_panel(4, 6, 1, rng);
        const fourier::FourierBasis b{1, 1};
        const auto fit = fourier::fit_ols(p, b);
        const Matrix xT = random_features(4, 1, rng);
        const Vector w = oracle::random_vector(rng, 4);
        const auto se = fourier::analytic_se(fit, b, w, xT);
        const double ref = oracle::brute_force_se(p, 1, w, xT);
        CHECK(se.se == Approx(ref).margin(1e-12));
        CHECK(se.per_period_terms.size() == 6);
        CHECK(std::sqrt(se.per_period_terms.squaredNorm()) == Approx(se.se).margin(1e-14));
    }
}

TEST_CASE("analytic SE on larger unbalanced panels") {
    Rng rng(4);
    for (int rep = 0; rep < 5; ++rep) {
        const int d = 3, n = 400;
        Matrix x(d, n);
        Vector y(n);
        std::vector<int> period(n), asset(n);
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < d; ++j) x(j, k) = rng.uniform();
            y(k) = x(0, k) * x(1, k) + rng.normal();
            period[static_cast<std::size_t>(k)] = static_cast<int>(rng.below(15));
            asset[static_cast<std::size_t>(k)] = static_cast<int>(rng.below(40));
        }
        const Panel p = Panel::from_observations(x, y, period, asset, 40);
        const Matrix xT = random_features(10, d, rng);
        const Vector w = oracle::random_vector(rng, 10);
        const fourier::FourierBasis b{2, d};
        const auto se = fourier::analytic_se(fourier::fit_ols(p, b), b, w, xT);
        CHECK(se.se == Approx(oracle::brute_force_se(p, 2, w, xT)).epsilon(1e-10));
    }
}

TEST_CASE("SE is linear in the weights") {
    Rng rng(31);
    const Panel p = random_panel(10, 8, 2, rng);
    const fourier::FourierBasis b{2, 2};
    const auto fit = fourier::fit_ols(p, b);
    const Matrix xT = random_features(10, 2, rng);
    const Vector w = oracle::random_vector(rng, 10);
    const double base = fourier::analytic_se(fit, b, w, xT).se;
    for (double c : {-3.0, 0.5, 2.0, 10.0})
        CHECK(fourier::analytic_se(fit, b, c * w, xT).se == Approx(std::abs(c) * base).epsilon(1e-12));
    CHECK(fourier::analytic_se(fit, b, Vector::Zero(10), xT).se == 0.0);
}

TEST_CASE("critical values and interval width") {
    CHECK(two_sided_critical(0.95) == Approx(1.959964).margin(1e-6));
    CHECK(two_sided_critical(0.50) == Approx(0.674490).margin(1e-6));
    for (double level : {0.5, 0.8, 0.9, 0.95, 0.99, 0.999})
        CHECK(two_sided_critical(level) == Approx(oracle::normal_quantile(0.5 + level / 2)).margin(1e-12));

    const auto degenerate = fourier::fci(0.3, 0.0, 0.95);
    CHECK(degenerate.lower == 0.3);
    CHECK(degenerate.upper == 0.3);

    double last = 0.0;
    for (double level = 0.05; level < 0.999; level += 0.05) {
        const auto ci = fourier::fci(1.0, 0.2, level);
        CHECK(ci.upper - ci.lower > last);
        CHECK(0.5 * (ci.upper + ci.lower) == Approx(1.0));
        last = ci.upper - ci.lower;
    }
    CHECK_THROWS_AS(fourier::fci(0.0, 1.0, 1.0), UsageError);
    CHECK_THROWS_AS(fourier::fci(0.0, 1.0, 0.0), UsageError);
    CHECK_THROWS_AS(fourier::fci(0.0, -1.0, 0.9), UsageError);
}

TEST_CASE("per-asset SE equals the single-asset portfolio SE") {
    Rng rng(2);
    const Panel p = random_panel(12, 9, 2, rng);
    const fourier::FourierBasis b{2, 2};
    const auto fit = fourier::fit_ols(p, b);
    const Matrix xT = random_features(5, 2, rng);
    const Vector se = fourier::asset_se(fit, b, xT);
    for (Eigen::Index i = 0; i < 5; ++i) {
        Vector e = Vector::Zero(5);
        e(i) = 1.0;
        CHECK(se(i) == Approx(fourier::analytic_se(fit, b, e, xT).se).epsilon(1e-12));
    }
}
