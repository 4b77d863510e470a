#include <catch_amalgamated.hpp>

#include "mlfci/nn.hpp"
#include "oracles.hpp"

using namespace mlfci;
using Catch::Approx;

namespace {

// Balanced panel with uniform characteristics and y = f(x) (+ noise).
template <class F>
Panel make_panel(int N, int T, int d, std::uint64_t seed, F f, double noise = 0.0) {
    Rng rng(seed);
    std::vector<Matrix> chars;
    Matrix y(N, T);
    for (int t = 0; t < T; ++t) {
        Matrix x(N, d);
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < d; ++k) x(i, k) = rng.uniform();
        for (int i = 0; i < N; ++i) y(i, t) = f(x.row(i)) + noise * rng.normal();
        chars.push_back(x);
    }
    return Panel::from_balanced(chars, y);
}

nn::MlpModel random_model(const std::vector<int>& widths, int d, Rng& rng, double bias_scale = 0.1) {
    nn::MlpArchitecture arch{d, widths};
    nn::MlpModel m = nn::initialize(arch, rng());
    for (auto& l : m.layers)
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = bias_scale * rng.normal();
    return m;
}

bool same_parameters(const nn::MlpModel& a, const nn::MlpModel& b, double tol) {
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if ((a.layers[l].weight - b.layers[l].weight).cwiseAbs().maxCoeff() > tol) return false;
        if ((a.layers[l].bias - b.layers[l].bias).cwiseAbs().maxCoeff() > tol) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("zero targets are fitted to near zero loss") {
    const Panel p = make_panel(20, 10, 3, 1, [](auto) { return 0.0; });
    nn::TrainConfig cfg;
    cfg.epochs = 50;
    cfg.learning_rate = 0.01;
    cfg.batch_size = 16;
    cfg.seed = 3;
    const auto m = nn::train(p, {3, {4, 4}}, cfg);
    CHECK(m.meta.final_mse <= 1e-4);
    CHECK(m.meta.epochs_run == 50);
    CHECK(m.meta.epoch_loss.size() == 50);
}

TEST_CASE("linear target is recovered out of sample") {
    auto f = [](const auto& x) { return 0.5 * x(0); };
    const Panel p = make_panel(100, 50, 3, 7, f);
    nn::TrainConfig cfg;
    cfg.epochs = 500;
    cfg.learning_rate = 0.01;
    cfg.batch_size = 1000;
    cfg.seed = 11;
    const auto m = nn::train(p, {3, {8, 4}}, cfg);

    Rng rng(99);
    Matrix fresh(2000, 3);
    for (Eigen::Index r = 0; r < fresh.rows(); ++r)
        for (int k = 0; k < 3; ++k) fresh(r, k) = rng.uniform();
    const Vector pred = nn::predict(m, fresh);
    const Vector truth = 0.5 * fresh.col(0);
    CHECK((pred - truth).squaredNorm() / 2000.0 <= 1e-3);
    CHECK((pred - truth).cwiseAbs().maxCoeff() <= 0.05);
}

TEST_CASE("warm start continues the same trajectory") {
    const Panel p = make_panel(30, 12, 4, 5, [](const auto& x) { return x(1) - 0.3 * x(2); }, 0.1);
    nn::TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 64;
    cfg.learning_rate = 0.005;
    cfg.l2_penalty = 1e-4;
    cfg.seed = 17;
    const nn::MlpArchitecture arch{4, {6, 5, 3}};
    const auto m20 = nn::train(p, arch, cfg);
    const auto m27 = nn::continue_training(m20, p, 7, cfg);
    nn::TrainConfig cfg27 = cfg;
    cfg27.epochs = 27;
    const auto direct = nn::train(p, arch, cfg27);
    CHECK(same_parameters(m27, direct, 1e-10));
    CHECK(m27.adam.step == direct.adam.step);
    CHECK(m27.meta.epochs_run == 27);

    SECTION("k = 0 is the identity") {
        const auto same = nn::continue_training(m20, p, 0, cfg);
        CHECK(same_parameters(same, m20, 0.0));
    }
    SECTION("the input model is not modified") {
        const auto copy = m20;
        (void)nn::continue_training(m20, p, 3, cfg);
        CHECK(same_parameters(copy, m20, 0.0));
    }
}

TEST_CASE("training is a deterministic function of the seed") {
    const Panel p = make_panel(15, 8, 2, 9, [](const auto& x) { return x(0) * x(1); }, 0.05);
    nn::TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 16;
    cfg.seed = 4;
    const auto a = nn::train(p, {2, {4, 4}}, cfg);
    const auto b = nn::train(p, {2, {4, 4}}, cfg);
    CHECK(same_parameters(a, b, 0.0));
    cfg.seed = 5;
    const auto c = nn::train(p, {2, {4, 4}}, cfg);
    CHECK_FALSE(same_parameters(a, c, 0.0));
}

TEST_CASE("trained network beats the best constant predictor") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Panel p = make_panel(40, 10, 3, 100 + s, [](const auto& x) { return 0.02 + 0.1 * x(2); }, 0.2);
        nn::TrainConfig cfg;
        cfg.epochs = 3000;
        cfg.learning_rate = 0.002;
        cfg.seed = s;
        const auto m = nn::train(p, {3, {4, 4, 4}}, cfg);
        const double mean = p.returns().mean();
        const double best_const = (p.returns().array() - mean).square().mean();
        CHECK(nn::in_sample_mse(m, p) <= best_const + 1e-8);
    }
}

TEST_CASE("a bootstrap warm start does not degrade the fit") {
    const Panel p = make_panel(50, 20, 5, 21, [](const auto& x) { return 0.05 * x(0) - 0.02 * x(3); }, 0.1);
    nn::TrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 0.01;
    cfg.seed = 8;
    const auto m = nn::train(p, {5, {4, 4, 4}}, cfg);
    const Vector fitted = nn::fitted_values(m, p);
    Rng rng(31);
    for (int rep = 0; rep < 5; ++rep) {
        Vector eta(p.n_obs());
        for (int t = 0; t < p.n_periods(); ++t) {
            const double e = rng.normal();
            const auto [b, end] = p.period_range(t);
            eta.segment(b, end - b).setConstant(e);
        }
        const Panel star = p.with_returns(fitted + (p.returns() - fitted).cwiseProduct(eta));
        const double before = nn::in_sample_mse(m, star);
        cfg.seed = 1000 + static_cast<std::uint64_t>(rep);
        const auto warm = nn::continue_training(m, star, 10, cfg);
        CHECK(warm.all_finite());
        CHECK(nn::in_sample_mse(warm, star) <= 1.01 * before);
    }
}

TEST_CASE("predict on hand-built networks") {
    SECTION("zero weights give zero output") {
        nn::MlpModel m = nn::initialize({2, {3, 2}}, 1);
        for (auto& l : m.layers) {
            l.weight.setZero();
            l.bias.setZero();
        }
        Matrix x(4, 2);
        x << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8;
        CHECK(nn::predict(m, x).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("single ReLU unit") {
        nn::MlpModel m = nn::initialize({2, {1}}, 1);
        m.layers[0].weight << 2.0, -1.0;
        m.layers[0].bias << 0.5;
        m.layers[1].weight << 3.0;
        m.layers[1].bias << -0.25;
        Matrix x(2, 2);
        x << 1.0, 0.5,   // relu(2 - 0.5 + 0.5) = 2 -> 3*2 - 0.25
            0.0, 1.0;    // relu(-1 + 0.5) = 0 -> -0.25
        const Vector y = nn::predict(m, x);
        CHECK(y(0) == Approx(5.75).margin(1e-15));
        CHECK(y(1) == Approx(-0.25).margin(1e-15));
    }
    SECTION("dimension and finiteness errors") {
        nn::MlpModel m = nn::initialize({2, {3}}, 1);
        CHECK_THROWS_AS(nn::predict(m, Matrix::Zero(3, 4)), UsageError);
        Matrix bad = Matrix::Zero(1, 2);
        bad(0, 1) = std::nan("");
        CHECK_THROWS_AS(nn::predict(m, bad), DataError);
    }
}

TEST_CASE("train rejects bad inputs") {
    const Panel p = make_panel(5, 4, 2, 1, [](auto) { return 0.0; });
    nn::TrainConfig cfg;
    CHECK_THROWS_AS(nn::train(p, {3, {4}}, cfg), UsageError);
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(nn::train(p, {2, {4}}, cfg), UsageError);
    cfg.learning_rate = 0.01;
    CHECK_THROWS_AS(nn::train(p, {2, {}}, cfg), UsageError);
    Vector y = p.returns();
    y(0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(nn::train(p.with_returns(y), {2, {4}}, cfg), DataError);
}

TEST_CASE("backprop gradient matches central differences") {
    Rng rng(2024);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int d = 1 + static_cast<int>(rng.below(5));
        std::vector<int> widths;
        const int depth = 1 + static_cast<int>(rng.below(3));
        for (int l = 0; l < depth; ++l) widths.push_back(1 + static_cast<int>(rng.below(6)));
        const auto m = random_model(widths, d, rng);
        const int n = 1 + static_cast<int>(rng.below(20));
        Matrix x(n, d);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (int k = 0; k < d; ++k) x(r, k) = rng.uniform();
        const Vector y = oracle::random_vector(rng, n);
        const double l2 = rng.uniform() < 0.5 ? 0.0 : 0.01 * rng.uniform();
        worst = std::max(worst, nn::gradient_check(m, x, y, l2, rng()));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("pure penalty gradient is exactly 2 lambda theta") {
    // Zero output weights and biases make the prediction identically 0, so
    // with zero targets the data term contributes nothing.
    Rng rng(5);
    auto m = random_model({5, 3}, 4, rng, 0.0);
    m.layers.back().weight.setZero();
    Matrix x(10, 4);
    for (Eigen::Index r = 0; r < 10; ++r)
        for (int k = 0; k < 4; ++k) x(r, k) = rng.uniform();
    const Vector y = Vector::Zero(10);
    const double l2 = 0.3;
    std::vector<nn::Layer> grad;
    nn::loss_gradient(m, x, y, l2, grad);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        CHECK((grad[l].weight - 2.0 * l2 * m.layers[l].weight).cwiseAbs().maxCoeff() == 0.0);
        CHECK(grad[l].bias.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("gradient check away from ReLU kinks is tight") {
    // Positive weights, positive inputs and positive biases keep every
    // pre-activation well above 0.
    Rng rng(77);
    nn::MlpModel m = nn::initialize({3, {4, 3}}, 1);
    for (auto& l : m.layers) {
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight(i) = 0.2 + 0.5 * rng.uniform();
        l.bias.setConstant(0.5);
    }
    Matrix x(8, 3);
    for (Eigen::Index r = 0; r < 8; ++r)
        for (int k = 0; k < 3; ++k) x(r, k) = 0.1 + rng.uniform();
    const Vector y = oracle::random_vector(rng, 8);
    CHECK(nn::gradient_check(m, x, y, 0.01, 3, 1000) < 1e-5);
}
