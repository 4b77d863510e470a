#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mlfci/bootstrap.hpp"
#include "mlfci/common.hpp"
#include "mlfci/fourier.hpp"
#include "mlfci/nn.hpp"
#include "mlfci/parallel.hpp"
#include "mlfci/panel.hpp"
#include "mlfci/rng.hpp"

namespace mlfci::simulate {

/// Conditional three-factor data-generating process with AR(1) latent
/// characteristics that are cross-sectionally rank-normalised.
///
/// Factor moments default to FF3-like monthly values (market, size, value;
/// decimal returns). They are illustrative, not a calibration target.
struct SimConfig {
    int N = 200;
    int T = 120;
    int d = 20;
    double ar_coef = 0.7;
    double innovation_scale = 0.5;
    Eigen::Vector3d factor_mean{0.008, -0.001, -0.002};
    Eigen::Matrix3d factor_cov = default_factor_cov();
    double target_idio_share = 0.5;
    double s_lo = 0.1;
    double s_hi = 0.9;
    double idio_sigma = -1.0;  // >= 0 fixes sigma and skips calibration
    std::uint64_t seed = 0;

    static Eigen::Matrix3d default_factor_cov() {
        const Eigen::Vector3d sd{0.030, 0.024, 0.020};
        Eigen::Matrix3d corr;
        corr << 1.00, 0.30, 0.05,  //
            0.30, 1.00, -0.05,     //
            0.05, -0.05, 1.00;
        return sd.asDiagonal() * corr * sd.asDiagonal();
    }

    void validate() const {
        if (N < 2) throw UsageError("simulate: N must be >= 2");
        if (T < 2) throw UsageError("simulate: T must be >= 2");
        if (d < 2) throw UsageError("simulate: d must be >= 2 (the first beta uses two characteristics)");
        if (!(std::abs(ar_coef) < 1.0)) throw UsageError("simulate: |ar_coef| must be < 1");
        if (!(innovation_scale > 0.0)) throw UsageError("simulate: innovation_scale must be > 0");
        if (!(target_idio_share > 0.0 && target_idio_share < 1.0))
            throw UsageError("simulate: target_idio_share must lie in (0,1)");
        if (!(s_lo > 0.0 && s_hi >= s_lo)) throw UsageError("simulate: need 0 < s_lo <= s_hi");
        if (!((factor_cov - factor_cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12))
            throw UsageError("simulate: factor_cov must be symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(factor_cov);
        if (es.eigenvalues().minCoeff() < -1e-14) throw UsageError("simulate: factor_cov must be PSD");
    }
};

struct Characteristics {
    std::vector<Matrix> latent;  // T+1 slices, N x d
    std::vector<Matrix> ranked;  // rank / N per (t, k)
};

/// Cross-sectional rank / N of each column; ties broken by row index.
inline Matrix rank_normalize(const Matrix& x) {
    const Eigen::Index N = x.rows();
    Matrix out(N, x.cols());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a, k) < x(b, k); });
        for (Eigen::Index r = 0; r < N; ++r)
            out(idx[static_cast<std::size_t>(r)], k) = static_cast<double>(r + 1) / static_cast<double>(N);
    }
    return out;
}

/// Periods 0..T of latent AR(1) characteristics started from the
/// stationary law N(0, s^2 / (1 - a^2)), and their rank-normalised version.
inline Characteristics gen_characteristics(const SimConfig& cfg, Rng& rng) {
    cfg.validate();
    Characteristics c;
    const double stationary_sd = cfg.innovation_scale / std::sqrt(1.0 - cfg.ar_coef * cfg.ar_coef);
    Matrix x(cfg.N, cfg.d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = stationary_sd * rng.normal();
    c.latent.push_back(x);
    for (int t = 1; t <= cfg.T; ++t) {
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = cfg.ar_coef * x(i) + cfg.innovation_scale * rng.normal();
        c.latent.push_back(x);
    }
    c.ranked.reserve(c.latent.size());
    for (const auto& l : c.latent) c.ranked.push_back(rank_normalize(l));
    return c;
}

/// The three beta functions: x1*x2, mean of squares, median.
inline Eigen::Vector3d beta_functions(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    const Eigen::Index d = x.size();
    std::vector<double> v(x.data(), x.data() + d);
    std::sort(v.begin(), v.end());
    const double median = d % 2 ? v[static_cast<std::size_t>(d / 2)]
                                : 0.5 * (v[static_cast<std::size_t>(d / 2 - 1)] + v[static_cast<std::size_t>(d / 2)]);
    return {x(0) * x(1), x.squaredNorm() / static_cast<double>(d), median};
}

inline Matrix beta_matrix(const Matrix& x) {
    Matrix b(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) b.row(i) = beta_functions(x.row(i)).transpose();
    return b;
}

struct SimPanel {
    Panel panel;
    std::vector<Matrix> characteristics;  // ranked, periods 0..T
    Matrix forecast_features;             // x_T, N x d
    Vector true_expected_returns;         // g(x_{i,T}) = g_beta(x_{i,T})' E f
    Matrix factors;                       // T x 3, row t-1 = f_t
    std::vector<Matrix> betas;            // T slices N x 3, slice t-1 = g_beta(x_{t-1})
    Matrix idiosyncratic;                 // N x T
    Vector s;                             // per-asset idiosyncratic scale
    double sigma = 0.0;
    double achieved_idio_share = 0.0;
    Eigen::Vector3d factor_mean;
    Eigen::Matrix3d factor_cov;

    /// Period-by-period reconstruction y_{i,t} = beta' f_t + u_{i,t}.
    Matrix reconstruct_returns() const {
        const Eigen::Index N = idiosyncratic.rows(), T = idiosyncratic.cols();
        Matrix y(N, T);
        for (Eigen::Index t = 0; t < T; ++t)
            y.col(t) = betas[static_cast<std::size_t>(t)] * factors.row(t).transpose() + idiosyncratic.col(t);
        return y;
    }

    /// Realised portfolio-weighted true expected return z_{T+1|T}.
    double true_forecast_target(const Vector& w) const { return w.dot(true_expected_returns); }
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double sample_var(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    const double m = x.mean();
    return (x.array() - m).square().sum() / static_cast<double>(x.size() - 1);
}

}  // namespace detail

/// Median over assets of s_i^2 sigma^2 / Var-hat(y_i), with y_i the time
/// series of asset i built from the systematic part plus sigma * s_i * z.
inline double idio_share(const Matrix& systematic, const Matrix& z, const Vector& s, double sigma) {
    std::vector<double> shares(static_cast<std::size_t>(systematic.rows()));
    for (Eigen::Index i = 0; i < systematic.rows(); ++i) {
        const Eigen::RowVectorXd y = systematic.row(i) + sigma * s(i) * z.row(i);
        const double v = detail::sample_var(y);
        shares[static_cast<std::size_t>(i)] = v > 0.0 ? s(i) * s(i) * sigma * sigma / v : 0.0;
    }
    return detail::median(shares);
}

/// Factor returns, idiosyncratic noise calibrated to the target median
/// idiosyncratic variance share, and the returns y_{i,t} = g_beta(x_{i,t-1})'f_t + u_{i,t}.
inline SimPanel gen_returns(const SimConfig& cfg, const Characteristics& chars, Rng& rng) {
    cfg.validate();
    const int N = cfg.N, T = cfg.T;
    if (static_cast<int>(chars.ranked.size()) != T + 1) throw UsageError("simulate: characteristics span mismatch");
    SimPanel sp;
    sp.factor_mean = cfg.factor_mean;
    sp.factor_cov = cfg.factor_cov;
    sp.characteristics = chars.ranked;

    // f_t = mean + L z with L a PSD square root (robust to singular covariances).
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cfg.factor_cov);
    const Eigen::Matrix3d root =
        es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
    sp.factors.resize(T, 3);
    for (int t = 0; t < T; ++t) {
        const Eigen::Vector3d zf{rng.normal(), rng.normal(), rng.normal()};
        sp.factors.row(t) = (cfg.factor_mean + root * zf).transpose();
    }
    sp.s.resize(N);
    for (int i = 0; i < N; ++i) sp.s(i) = rng.uniform(cfg.s_lo, cfg.s_hi);
    Matrix z(N, T);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < N; ++i) z(i, t) = rng.normal();

    Matrix systematic(N, T);
    sp.betas.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        sp.betas.push_back(beta_matrix(chars.ranked[static_cast<std::size_t>(t)]));
        systematic.col(t) = sp.betas.back() * sp.factors.row(t).transpose();
    }

    if (cfg.idio_sigma >= 0.0) {
        sp.sigma = cfg.idio_sigma;
    } else {
        double lo = 0.0, hi = 1e-3;
        int guard = 0;
        while (idio_share(systematic, z, sp.s, hi) < cfg.target_idio_share) {
            hi *= 2.0;
            if (++guard > 200) throw NumericalError("simulate: cannot bracket idiosyncratic sigma");
        }
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + hi);
            (idio_share(systematic, z, sp.s, mid) < cfg.target_idio_share ? lo : hi) = mid;
        }
        sp.sigma = 0.5 * (lo + hi);
    }
    sp.achieved_idio_share = sp.sigma > 0.0 ? idio_share(systematic, z, sp.s, sp.sigma) : 0.0;
    if (cfg.idio_sigma < 0.0 && std::abs(sp.achieved_idio_share - cfg.target_idio_share) > 0.01)
        throw NumericalError("simulate: idiosyncratic share calibration failed (achieved " +
                             std::to_string(sp.achieved_idio_share) + ")");

    sp.idiosyncratic = sp.sigma * (sp.s.asDiagonal() * z);
    const Matrix y = systematic + sp.idiosyncratic;
    sp.panel = Panel::from_balanced(chars.ranked, y);
    sp.forecast_features = chars.ranked[static_cast<std::size_t>(T)];
    sp.true_expected_returns = beta_matrix(sp.forecast_features) * cfg.factor_mean;
    return sp;
}

inline SimPanel simulate_panel(const SimConfig& cfg) {
    Rng rng(cfg.seed);
    const Characteristics c = gen_characteristics(cfg, rng);
    return gen_returns(cfg, c, rng);
}

/// Population version of the Fourier forecast standard error, using the
/// known betas and factor covariance in place of the residual products:
///   se^2 = sum_t H' Phi_{t-1}' B_{t-1} Cov(f) B_{t-1}' Phi_{t-1} H.
inline double population_se(const fourier::OlsFit& fit, const fourier::FourierBasis& basis, const SimPanel& sim,
                            const Vector& weights) {
    const Matrix phi_T = fourier::expand(basis, sim.forecast_features);
    const Vector H = fit.solve(phi_T.transpose() * weights);
    double total = 0.0;
    for (std::size_t t = 0; t < sim.betas.size(); ++t) {
        const Matrix phi = fourier::expand(basis, sim.characteristics[t]);
        const Eigen::Vector3d a = sim.betas[t].transpose() * (phi * H);
        total += a.dot(sim.factor_cov * a);
    }
    return std::sqrt(total);
}

// ---------------------------------------------------------------------------
// Monte Carlo coverage of the forecast confidence intervals.

/// What standardises the forecast error in the coverage experiment.
///   Analytic        NN forecast, Fourier-residual SE
///   Oracle          Fourier forecast, population SE from the known betas and Cov(f)
///   TimeClustered,
///   CrossSectional,
///   IID             NN forecast, bootstrap sigma* under that multiplier scheme
enum class Method { Analytic, Oracle, TimeClustered, CrossSectional, IID };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::Analytic: return "analytic";
        case Method::Oracle: return "oracle";
        case Method::TimeClustered: return "time_clustered";
        case Method::CrossSectional: return "cross_sectional";
        case Method::IID: return "iid";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::Analytic, Method::Oracle, Method::TimeClustered, Method::CrossSectional, Method::IID})
        if (s == to_string(m)) return m;
    throw UsageError("unknown coverage method '" + s +
                     "' (analytic, oracle, time_clustered, cross_sectional, iid)");
}

inline std::optional<bootstrap::Scheme> scheme_of(Method m) {
    switch (m) {
        case Method::TimeClustered: return bootstrap::Scheme::TimeClustered;
        case Method::CrossSectional: return bootstrap::Scheme::CrossSectional;
        case Method::IID: return bootstrap::Scheme::IID;
        default: return std::nullopt;
    }
}

struct CoverageConfig {
    int replications = 200;
    std::vector<Method> methods{Method::Analytic, Method::Oracle, Method::TimeClustered, Method::CrossSectional,
                                Method::IID};
    nn::MlpArchitecture arch{};     // input_dim is taken from the simulation
    nn::TrainConfig train{};
    bootstrap::BootstrapConfig boot{};
    int fourier_order = 3;
    unsigned threads = 1;           // replications run in parallel
    double max_failure_fraction = 0.01;

    void validate() const {
        if (replications < 50) throw UsageError("coverage: replications must be >= 50");
        if (methods.empty()) throw UsageError("coverage: no methods selected");
        if (fourier_order < 1) throw UsageError("coverage: fourier_order must be >= 1");
        train.validate();
        boot.validate();
    }
};

/// One replication's numbers. Failed replications keep their seed and
/// message and have NaN statistics.
struct Replication {
    int index = 0;
    std::uint64_t seed = 0;
    double truth = 0.0;          // sum_i w_i g(x_{i,T})' E f
    double nn_forecast = 0.0;
    double fourier_forecast = 0.0;
    std::vector<double> scale;   // per method: SE or sigma*
    std::vector<double> t_stat;  // per method
    std::vector<double> q_alpha; // per method, bootstrap only (NaN otherwise)
    double train_mse = 0.0;
    std::string error;
};

struct MethodSummary {
    Method method = Method::Analytic;
    int n = 0;
    double mean = 0.0;
    double sd = 0.0;
    double ks = 0.0;                       // sup |F_n - Phi|
    double coverage90 = 0.0, coverage95 = 0.0, coverage99 = 0.0;
    double mean_scale = 0.0;
    double qalpha_coverage = std::numeric_limits<double>::quiet_NaN();  // |zhat - z| <= q*_alpha
};

struct CoverageReport {
    SimConfig sim;
    CoverageConfig config;
    std::vector<Replication> replications;
    std::vector<MethodSummary> summaries;
    int failures = 0;
    double forecast_sd = 0.0;  // sd of (nn forecast - truth) across replications
};

inline double ks_distance(std::vector<double> x) {
    if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(x.begin(), x.end());
    const auto n = static_cast<double>(x.size());
    double d = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double F = normal_cdf(x[i]);
        d = std::max({d, std::abs(static_cast<double>(i + 1) / n - F), std::abs(F - static_cast<double>(i) / n)});
    }
    return d;
}

inline MethodSummary summarize_method(Method m, const std::vector<Replication>& reps, std::size_t slot) {
    MethodSummary s;
    s.method = m;
    std::vector<double> t, sc;
    int qa_hits = 0, qa_n = 0;
    for (const auto& r : reps) {
        if (!r.error.empty()) continue;
        t.push_back(r.t_stat[slot]);
        sc.push_back(r.scale[slot]);
        if (!std::isnan(r.q_alpha[slot])) {
            ++qa_n;
            if (std::abs(r.nn_forecast - r.truth) <= r.q_alpha[slot]) ++qa_hits;
        }
    }
    s.n = static_cast<int>(t.size());
    if (s.n == 0) return s;
    const auto n = static_cast<double>(s.n);
    s.mean = std::accumulate(t.begin(), t.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : t) ss += (v - s.mean) * (v - s.mean);
    s.sd = s.n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    s.ks = ks_distance(t);
    auto cover = [&](double level) {
        const double c = two_sided_critical(level);
        return static_cast<double>(std::count_if(t.begin(), t.end(), [&](double v) { return std::abs(v) <= c; })) / n;
    };
    s.coverage90 = cover(0.90);
    s.coverage95 = cover(0.95);
    s.coverage99 = cover(0.99);
    s.mean_scale = std::accumulate(sc.begin(), sc.end(), 0.0) / n;
    if (qa_n > 0) s.qalpha_coverage = static_cast<double>(qa_hits) / qa_n;
    return s;
}

/// One replication: simulate, fit the network and the Fourier regression,
/// then standardise the equal-weight forecast error by each method's scale.
inline Replication run_replication(const SimConfig& base, const CoverageConfig& cc, int index) {
    Replication r;
    r.index = index;
    r.seed = derive_seed(base.seed, static_cast<std::uint64_t>(index));
    const std::size_t M = cc.methods.size();
    r.scale.assign(M, std::numeric_limits<double>::quiet_NaN());
    r.t_stat = r.scale;
    r.q_alpha = r.scale;

    SimConfig sc = base;
    sc.seed = r.seed;
    const SimPanel sim = simulate_panel(sc);
    const Vector w = Vector::Constant(sc.N, 1.0 / sc.N);
    r.truth = sim.true_forecast_target(w);

    nn::MlpArchitecture arch = cc.arch;
    arch.input_dim = sc.d;
    nn::TrainConfig tc = cc.train;
    tc.seed = derive_seed(r.seed, 1);
    const nn::MlpModel model = nn::train(sim.panel, arch, tc);
    r.train_mse = model.meta.final_mse;
    r.nn_forecast = nn::predict(model, sim.forecast_features).dot(w);

    fourier::FourierBasis basis;
    basis.order = cc.fourier_order;
    basis.input_dim = sc.d;
    const fourier::OlsFit fit = fourier::fit_ols(sim.panel, basis);
    r.fourier_forecast = fourier::predict(fit, basis, sim.forecast_features).dot(w);

    for (std::size_t m = 0; m < M; ++m) {
        const Method method = cc.methods[m];
        double point = r.nn_forecast;
        if (method == Method::Analytic) {
            r.scale[m] = fourier::analytic_se(fit, basis, w, sim.forecast_features).se;
        } else if (method == Method::Oracle) {
            point = r.fourier_forecast;
            r.scale[m] = population_se(fit, basis, sim, w);
        } else {
            bootstrap::BootstrapConfig bc = cc.boot;
            bc.scheme = *scheme_of(method);
            bc.seed = derive_seed(r.seed, 2 + static_cast<std::uint64_t>(method));
            bc.threads = 1;
            const auto res = bootstrap::run(sim.panel, model, w, sim.forecast_features, tc, bc);
            r.scale[m] = res.sigma_star;
            r.q_alpha[m] = res.q_alpha;
        }
        if (!(r.scale[m] > 0.0))
            throw NumericalError("coverage: method " + std::string(to_string(method)) + " produced scale " +
                                 std::to_string(r.scale[m]));
        r.t_stat[m] = (point - r.truth) / r.scale[m];
    }
    return r;
}

/// Runs the replications (in parallel over cfg.threads, each fully
/// determined by derive_seed(sim.seed, index)), then summarises every
/// method. Aborts if more than max_failure_fraction of them fail.
inline CoverageReport coverage_experiment(const SimConfig& sim, const CoverageConfig& cc,
                                          const std::function<void(int)>& progress = {}) {
    sim.validate();
    cc.validate();
    CoverageReport rep;
    rep.sim = sim;
    rep.config = cc;
    rep.replications.resize(static_cast<std::size_t>(cc.replications));
    std::atomic<int> done{0};
    std::mutex progress_mutex;
    parallel_for(rep.replications.size(), cc.threads, [&](std::size_t i) {
        try {
            rep.replications[i] = run_replication(sim, cc, static_cast<int>(i));
        } catch (const Error& e) {
            Replication& r = rep.replications[i];
            r = Replication{};
            r.index = static_cast<int>(i);
            r.seed = derive_seed(sim.seed, i);
            r.error = e.what();
        }
        const int k = ++done;
        if (progress) {
            std::lock_guard<std::mutex> lock(progress_mutex);
            progress(k);
        }
    });
    for (const auto& r : rep.replications)
        if (!r.error.empty()) ++rep.failures;
    if (rep.failures > cc.max_failure_fraction * cc.replications) {
        const auto& first = *std::find_if(rep.replications.begin(), rep.replications.end(),
                                          [](const Replication& r) { return !r.error.empty(); });
        throw NumericalError("coverage: " + std::to_string(rep.failures) + " of " +
                             std::to_string(cc.replications) + " replications failed; first was " +
                             std::to_string(first.index) + " (seed " + std::to_string(first.seed) +
                             "): " + first.error);
    }
    for (std::size_t m = 0; m < cc.methods.size(); ++m)
        rep.summaries.push_back(summarize_method(cc.methods[m], rep.replications, m));
    std::vector<double> err;
    for (const auto& r : rep.replications)
        if (r.error.empty()) err.push_back(r.nn_forecast - r.truth);
    if (err.size() > 1) {
        const double mu = std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
        double ss = 0.0;
        for (double e : err) ss += (e - mu) * (e - mu);
        rep.forecast_sd = std::sqrt(ss / static_cast<double>(err.size() - 1));
    }
    return rep;
}

}  // namespace mlfci::simulate
