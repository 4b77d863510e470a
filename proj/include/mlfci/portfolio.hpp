#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mlfci/common.hpp"

namespace mlfci::portfolio {

struct Weights {
    Vector omega;
    std::vector<int> active;     // indices with omega != 0
    double objective = 0.0;
    int iterations = 0;
    double kkt_residual = 0.0;
    double multiplier = 0.0;     // budget multiplier nu (0 without a budget)
};

namespace detail {

inline void check_square(const Matrix& sigma, Eigen::Index R, const char* who) {
    if (sigma.rows() != R || sigma.cols() != R)
        throw UsageError(std::string(who) + ": covariance must be " + std::to_string(R) + "x" + std::to_string(R));
    if (!sigma.allFinite()) throw DataError(std::string(who) + ": non-finite covariance entry");
    const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw UsageError(std::string(who) + ": covariance is not symmetric");
}

inline Eigen::LLT<Matrix> factor_pd(const Matrix& sigma, const char* who) {
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(who) + ": covariance is not positive definite");
    const Vector d = llt.matrixL().toDenseMatrix().diagonal();
    if (d.minCoeff() <= 1e-12 * d.maxCoeff())
        throw NumericalError(std::string(who) + ": covariance is numerically singular");
    return llt;
}

inline std::vector<int> support(const Vector& w) {
    std::vector<int> out;
    for (Eigen::Index i = 0; i < w.size(); ++i)
        if (w(i) != 0.0) out.push_back(static_cast<int>(i));
    return out;
}

// sgn(x) (|x| - q)_+ with the kink sent to zero.
inline double soft_threshold(double x, double q) {
    if (std::abs(x) <= q) return 0.0;
    return x > 0.0 ? x - q : x + q;
}

}  // namespace detail

/// omega = Sigma^{-1} z / gamma.
inline Weights mv_weights(const Vector& z_hat, const Matrix& sigma, double gamma) {
    if (!(gamma > 0.0)) throw UsageError("mv_weights: gamma must be positive");
    detail::check_square(sigma, z_hat.size(), "mv_weights");
    const auto llt = detail::factor_pd(sigma, "mv_weights");
    Weights w;
    w.omega = llt.solve(z_hat) / gamma;
    w.active = detail::support(w.omega);
    w.objective = 0.5 * gamma * w.omega.dot(sigma * w.omega) - w.omega.dot(z_hat);
    return w;
}

/// Mean-variance weights subject to sum(omega) = 1.
inline Weights mv_budget_weights(const Vector& z_hat, const Matrix& sigma, double gamma) {
    if (!(gamma > 0.0)) throw UsageError("mv_budget_weights: gamma must be positive");
    detail::check_square(sigma, z_hat.size(), "mv_budget_weights");
    const auto llt = detail::factor_pd(sigma, "mv_budget_weights");
    const Vector a = llt.solve(z_hat);
    const Vector b = llt.solve(Vector::Ones(z_hat.size()));
    Weights w;
    w.multiplier = (gamma - a.sum()) / b.sum();
    w.omega = (a + w.multiplier * b) / gamma;
    w.active = detail::support(w.omega);
    w.objective = 0.5 * gamma * w.omega.dot(sigma * w.omega) - w.omega.dot(z_hat);
    return w;
}

/// Global minimum-variance portfolio Sigma^{-1} 1 / (1' Sigma^{-1} 1).
inline Vector gmvp(const Matrix& sigma) {
    detail::check_square(sigma, sigma.rows(), "gmvp");
    const Vector b = detail::factor_pd(sigma, "gmvp").solve(Vector::Ones(sigma.rows()));
    return b / b.sum();
}

struct UaProblem {
    Vector z_hat;
    Vector q_alpha;
    Matrix sigma;
    double gamma = 1.0;
    bool budget_constraint = false;

    void validate() const {
        const auto R = z_hat.size();
        if (R == 0) throw UsageError("ua: no assets");
        if (q_alpha.size() != R) throw UsageError("ua: q_alpha length differs from z_hat");
        if (!z_hat.allFinite() || !q_alpha.allFinite()) throw DataError("ua: non-finite forecast or quantile");
        if ((q_alpha.array() < 0.0).any()) throw UsageError("ua: q_alpha must be non-negative");
        if (!(gamma > 0.0)) throw UsageError("ua: gamma must be positive");
        if (budget_constraint && R < 2) throw UsageError("ua: the budget-constrained problem needs at least 2 assets");
        detail::check_square(sigma, R, "ua");
    }
};

struct CdOptions {
    double tolerance = 1e-10;   // max coordinate change per sweep
    int max_sweeps = 10000;
    double budget_tolerance = 1e-10;
    int max_bisections = 200;
    const Vector* warm_start = nullptr;
};

/// (gamma/2) w' Sigma w - w' z + sum_i q_i |w_i|
inline double ua_objective(const UaProblem& p, const Vector& omega) {
    return 0.5 * p.gamma * omega.dot(p.sigma * omega) - omega.dot(p.z_hat) + p.q_alpha.dot(omega.cwiseAbs());
}

/// Largest violation of the optimality conditions
///   gamma (Sigma w)_i - z_i - nu + q_i sgn(w_i) = 0   if w_i != 0
///   |gamma (Sigma w)_i - z_i - nu| <= q_i              if w_i == 0
/// plus |sum(w) - 1| when the budget applies.
inline double kkt_residual(const UaProblem& p, const Vector& omega, double nu) {
    const Vector g = p.gamma * (p.sigma * omega) - p.z_hat - Vector::Constant(omega.size(), nu);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < omega.size(); ++i) {
        const double r = omega(i) != 0.0 ? std::abs(g(i) + p.q_alpha(i) * (omega(i) > 0.0 ? 1.0 : -1.0))
                                         : std::max(0.0, std::abs(g(i)) - p.q_alpha(i));
        worst = std::max(worst, r);
    }
    if (p.budget_constraint) worst = std::max(worst, std::abs(omega.sum() - 1.0));
    return worst;
}

namespace detail {

// Cyclic coordinate descent on (gamma/2) w'Sw - w'(z + nu 1) + sum q|w|.
inline int coordinate_descent(const UaProblem& p, double nu, Vector& w, const CdOptions& opt) {
    const Eigen::Index R = w.size();
    Vector sw = p.sigma * w;
    for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        double max_change = 0.0;
        for (Eigen::Index i = 0; i < R; ++i) {
            const double sii = p.sigma(i, i);
            const double partial = p.z_hat(i) + nu - p.gamma * (sw(i) - sii * w(i));
            const double next = soft_threshold(partial, p.q_alpha(i)) / (p.gamma * sii);
            const double delta = next - w(i);
            if (delta != 0.0) {
                sw += delta * p.sigma.col(i);
                w(i) = next;
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        if (max_change < opt.tolerance) return sweep;
    }
    return -1;
}

// Re-solve the stationarity equations on the support of w with its signs
// fixed. Returns false if the solution flips a sign.
inline bool polish(const UaProblem& p, Vector& w, double& nu) {
    const std::vector<int> act = support(w);
    const auto A = static_cast<Eigen::Index>(act.size());
    if (A == 0) return !p.budget_constraint;
    const Eigen::Index n = A + (p.budget_constraint ? 1 : 0);
    Matrix K = Matrix::Zero(n, n);
    Vector rhs(n);
    for (Eigen::Index a = 0; a < A; ++a) {
        const int i = act[static_cast<std::size_t>(a)];
        for (Eigen::Index b = 0; b < A; ++b) K(a, b) = p.gamma * p.sigma(i, act[static_cast<std::size_t>(b)]);
        rhs(a) = p.z_hat(i) - p.q_alpha(i) * (w(i) > 0.0 ? 1.0 : -1.0);
    }
    if (p.budget_constraint) {
        K.block(0, A, A, 1).setConstant(-1.0);
        K.block(A, 0, 1, A).setConstant(1.0);
        rhs(A) = 1.0;
    }
    const Eigen::FullPivLU<Matrix> lu(K);
    if (!lu.isInvertible()) return false;
    const Vector sol = lu.solve(rhs);
    Vector out = Vector::Zero(w.size());
    for (Eigen::Index a = 0; a < A; ++a) {
        const int i = act[static_cast<std::size_t>(a)];
        if ((sol(a) > 0.0) != (w(i) > 0.0) || sol(a) == 0.0) return false;
        out(i) = sol(a);
    }
    w = out;
    if (p.budget_constraint) nu = sol(A);
    return true;
}

}  // namespace detail

/// Uncertainty-averse mean-variance weights: the adaptive-Lasso problem
///   min (gamma/2) w' Sigma w - w' z + sum_i q_i |w_i|
/// by cyclic coordinate descent. With a budget constraint the multiplier nu
/// on sum(w) = 1 is found by bisection (sum(w(nu)) is non-decreasing in nu).
/// The coordinate-descent answer is finally re-solved exactly on its support
/// and kept if that lowers the KKT residual.
inline Weights ua_weights(const UaProblem& p, const CdOptions& opt = {}) {
    p.validate();
    detail::factor_pd(p.sigma, "ua_weights");
    const Eigen::Index R = p.z_hat.size();
    Vector w = Vector::Zero(R);
    if (opt.warm_start) {
        if (opt.warm_start->size() != R) throw UsageError("ua_weights: warm start has wrong length");
        w = *opt.warm_start;
    }
    int iters = 0;
    double nu = 0.0;
    auto solve_at = [&](double v) {
        const int it = detail::coordinate_descent(p, v, w, opt);
        if (it < 0)
            throw NumericalError("ua_weights: coordinate descent did not converge in " +
                                 std::to_string(opt.max_sweeps) + " sweeps (KKT residual " +
                                 std::to_string(kkt_residual(p, w, v)) + ")");
        iters += it;
        return w.sum();
    };
    if (!p.budget_constraint) {
        solve_at(0.0);
    } else {
        double lo = -1.0, hi = 1.0;
        const double scale = std::max(1.0, p.z_hat.cwiseAbs().maxCoeff() + p.q_alpha.maxCoeff());
        lo *= scale;
        hi *= scale;
        int guard = 0;
        while (solve_at(lo) > 1.0) {
            hi = lo;
            lo *= 2.0;
            if (++guard > 200) throw NumericalError("ua_weights: cannot bracket the budget multiplier");
        }
        while (solve_at(hi) < 1.0) {
            lo = hi;
            hi *= 2.0;
            if (++guard > 400) throw NumericalError("ua_weights: cannot bracket the budget multiplier");
        }
        for (int k = 0; k < opt.max_bisections; ++k) {
            nu = 0.5 * (lo + hi);
            const double s = solve_at(nu);
            if (std::abs(s - 1.0) <= opt.budget_tolerance || hi - lo <= 1e-15 * scale) break;
            (s < 1.0 ? lo : hi) = nu;
        }
    }
    Weights out;
    out.kkt_residual = kkt_residual(p, w, nu);
    Vector wp = w;
    double nup = nu;
    if (detail::polish(p, wp, nup)) {
        const double r = kkt_residual(p, wp, nup);
        if (r <= out.kkt_residual) {
            w = wp;
            nu = nup;
            out.kkt_residual = r;
        }
    }
    out.omega = w;
    out.multiplier = nu;
    out.active = detail::support(w);
    out.objective = ua_objective(p, w);
    out.iterations = iters;
    return out;
}

/// Single-asset (or decoupled) closed form sgn(w_MV)(|w_MV| - q/(gamma sigma2))_+.
inline double soft_threshold_weight(double z_hat, double q_alpha, double sigma2, double gamma) {
    if (!(sigma2 > 0.0)) throw UsageError("soft_threshold_weight: sigma2 must be positive");
    if (!(gamma > 0.0)) throw UsageError("soft_threshold_weight: gamma must be positive");
    if (!(q_alpha >= 0.0)) throw UsageError("soft_threshold_weight: q_alpha must be non-negative");
    const double mv = z_hat / (gamma * sigma2);
    const double lambda = q_alpha / (gamma * sigma2);
    return detail::soft_threshold(mv, lambda);
}

/// Design of the equivalent least-squares Lasso: Sigma = L L',
/// X = sqrt(gamma) L', Y = L^{-1} z / sqrt(gamma). Then
/// 0.5 ||Y - X w||^2 + sum q|w| equals ua_objective plus 0.5 ||Y||^2.
struct LassoDesign {
    Matrix X;
    Vector Y;
};

inline LassoDesign cholesky_lasso_design(const Matrix& sigma, const Vector& z_hat, double gamma) {
    if (!(gamma > 0.0)) throw UsageError("cholesky_lasso_design: gamma must be positive");
    detail::check_square(sigma, z_hat.size(), "cholesky_lasso_design");
    const auto llt = detail::factor_pd(sigma, "cholesky_lasso_design");
    const Matrix L = llt.matrixL();
    LassoDesign d;
    d.X = std::sqrt(gamma) * L.transpose();
    d.Y = L.triangularView<Eigen::Lower>().solve(z_hat) / std::sqrt(gamma);
    return d;
}

inline double lasso_objective(const LassoDesign& d, const Vector& q_alpha, const Vector& omega) {
    return 0.5 * (d.Y - d.X * omega).squaredNorm() + q_alpha.dot(omega.cwiseAbs());
}

// ---------------------------------------------------------------------------
// Two risky assets, no risk-free asset.

/// Which piece of the piecewise-linear map w_MV -> w1 applies. With
/// c0 = 1 / (gamma Var(z1 - z2)) the breakpoints on w1_MV are
///   a = -c0(q1+q2) <= b = c0(q1-q2) <= c = 1 + b <= d = 1 + c0(q1+q2).
enum class TwoAssetBranch {
    ShortFirst,   // w1_MV < a:        w1 = w1_MV + c0(q1+q2) < 0
    OnlySecond,   // a <= w1_MV <= b:  w1 = 0
    Interior,     // b < w1_MV < c:    w1 = w1_MV - c0(q1-q2)
    OnlyFirst,    // c <= w1_MV <= d:  w1 = 1
    ShortSecond,  // w1_MV > d:        w1 = w1_MV - c0(q1+q2) > 1
};

inline const char* to_string(TwoAssetBranch b) {
    switch (b) {
        case TwoAssetBranch::ShortFirst: return "short_first";
        case TwoAssetBranch::OnlySecond: return "only_second";
        case TwoAssetBranch::Interior: return "interior";
        case TwoAssetBranch::OnlyFirst: return "only_first";
        case TwoAssetBranch::ShortSecond: return "short_second";
    }
    return "?";
}

struct TwoAssetResult {
    Weights weights;
    TwoAssetBranch branch = TwoAssetBranch::Interior;
    double c0 = 0.0;
    double w1_mv = 0.0;
};

inline TwoAssetResult two_asset_no_riskfree(const Vector& z_hat, const Vector& q_alpha, const Matrix& sigma,
                                            double gamma) {
    if (z_hat.size() != 2 || q_alpha.size() != 2) throw UsageError("two_asset: need exactly two assets");
    if (!(gamma > 0.0)) throw UsageError("two_asset: gamma must be positive");
    if ((q_alpha.array() < 0.0).any()) throw UsageError("two_asset: q_alpha must be non-negative");
    detail::check_square(sigma, 2, "two_asset");
    const double var_diff = sigma(0, 0) + sigma(1, 1) - 2.0 * sigma(0, 1);
    if (!(var_diff > 0.0)) throw NumericalError("two_asset: Var(z1 - z2) is not positive");
    const double q1 = q_alpha(0), q2 = q_alpha(1);
    TwoAssetResult r;
    r.c0 = 1.0 / (gamma * var_diff);
    r.w1_mv = r.c0 * (z_hat(0) - z_hat(1) - gamma * (sigma(0, 1) - sigma(1, 1)));
    const double a = -r.c0 * (q1 + q2), b = r.c0 * (q1 - q2);
    const double c = 1.0 + b, d = 1.0 + r.c0 * (q1 + q2);
    double w1;
    if (r.w1_mv < a) {
        r.branch = TwoAssetBranch::ShortFirst;
        w1 = r.w1_mv + r.c0 * (q1 + q2);
    } else if (r.w1_mv <= b) {
        r.branch = TwoAssetBranch::OnlySecond;
        w1 = 0.0;
    } else if (r.w1_mv < c) {
        r.branch = TwoAssetBranch::Interior;
        w1 = r.w1_mv - r.c0 * (q1 - q2);
    } else if (r.w1_mv <= d) {
        r.branch = TwoAssetBranch::OnlyFirst;
        w1 = 1.0;
    } else {
        r.branch = TwoAssetBranch::ShortSecond;
        w1 = r.w1_mv - r.c0 * (q1 + q2);
    }
    r.weights.omega = Vector(2);
    r.weights.omega << w1, 1.0 - w1;
    r.weights.active = detail::support(r.weights.omega);
    const UaProblem p{z_hat, q_alpha, sigma, gamma, true};
    r.weights.objective = ua_objective(p, r.weights.omega);
    return r;
}

// ---------------------------------------------------------------------------
// Risk-sensitive weights under a g-prior on the expected returns.

struct RsProblem {
    Vector z_hat;
    Matrix fse2;       // forecast covariance SE^2
    Vector prior_mean; // pi
    double prior_scale = 1.0;  // g, prior covariance v = g Sigma
    Matrix sigma;
    double gamma = 1.0;
    double tau = 1.0;

    void validate() const {
        const auto R = z_hat.size();
        if (R == 0) throw UsageError("rs: no assets");
        if (prior_mean.size() != R) throw UsageError("rs: prior mean length differs from z_hat");
        if (fse2.rows() != R || fse2.cols() != R) throw UsageError("rs: SE^2 must be RxR");
        if (!(prior_scale > 0.0) || !(gamma > 0.0) || !(tau > 0.0))
            throw UsageError("rs: g, gamma and tau must be positive");
        if (!fse2.allFinite() || !z_hat.allFinite() || !prior_mean.allFinite())
            throw DataError("rs: non-finite input");
        detail::check_square(sigma, R, "rs");
    }
};

struct RsResult {
    Weights weights;
    Matrix W1;          // SE^2 (SE^2 + v)^{-1}
    Vector z_tilde;     // (I - W1) z + W1 pi
    Matrix sigma_tilde; // Sigma + v W1'
};

inline RsResult rs_weights(const RsProblem& p) {
    p.validate();
    const Eigen::Index R = p.z_hat.size();
    const Matrix v = p.prior_scale * p.sigma;
    RsResult r;
    // W1 = S (S + v)^{-1}, i.e. (S + v)' W1' = S'.
    const Eigen::FullPivLU<Matrix> lu((p.fse2 + v).transpose());
    if (!lu.isInvertible()) throw NumericalError("rs_weights: SE^2 + v is singular");
    r.W1 = lu.solve(p.fse2.transpose()).transpose();
    r.z_tilde = (Matrix::Identity(R, R) - r.W1) * p.z_hat + r.W1 * p.prior_mean;
    r.sigma_tilde = p.sigma + v * r.W1.transpose();
    const Eigen::FullPivLU<Matrix> st(r.sigma_tilde);
    if (!st.isInvertible()) throw NumericalError("rs_weights: adjusted covariance is singular");
    r.weights.omega = st.solve(r.z_tilde) / (p.tau + p.gamma);
    r.weights.active = detail::support(r.weights.omega);
    return r;
}

/// The same weights written as a double shrinkage of two MV portfolios:
///   gamma/(tau+gamma) Sigma~^{-1} Sigma [(I - W1)' w_MV + W1' w_MV(pi)].
inline Vector rs_weights_shrinkage_form(const RsProblem& p) {
    p.validate();
    const Eigen::Index R = p.z_hat.size();
    const Matrix v = p.prior_scale * p.sigma;
    const Matrix W1 = (p.fse2 + v).transpose().fullPivLu().solve(p.fse2.transpose()).transpose();
    const Matrix sigma_tilde = p.sigma + v * W1.transpose();
    const Vector w_mv = mv_weights(p.z_hat, p.sigma, p.gamma).omega;
    const Vector w_pi = mv_weights(p.prior_mean, p.sigma, p.gamma).omega;
    const Vector inner = (Matrix::Identity(R, R) - W1).transpose() * w_mv + W1.transpose() * w_pi;
    return p.gamma / (p.tau + p.gamma) * sigma_tilde.fullPivLu().solve(p.sigma * inner);
}

// ---------------------------------------------------------------------------
// Covariance and uncertainty quantiles.

struct CovarianceEstimate {
    Matrix sigma;
    double shrinkage = 0.0;
};

namespace detail {

inline Matrix demeaned(const Matrix& returns) {
    return returns.rowwise() - returns.colwise().mean();
}

}  // namespace detail

/// (1 - delta) S + delta (tr(S)/R) I with S the unbiased sample covariance
/// of a T x R return matrix.
inline CovarianceEstimate estimate_covariance(const Matrix& returns, double shrinkage) {
    if (returns.rows() < 2) throw DataError("estimate_covariance: need at least 2 periods");
    if (!returns.allFinite()) throw DataError("estimate_covariance: non-finite return");
    if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw UsageError("estimate_covariance: shrinkage must lie in [0,1]");
    const Eigen::Index R = returns.cols();
    const Matrix X = detail::demeaned(returns);
    const Matrix S = X.transpose() * X / static_cast<double>(returns.rows() - 1);
    const double mu = S.trace() / static_cast<double>(R);
    bool constant_column = false;
    for (Eigen::Index j = 0; j < R; ++j)
        constant_column = constant_column || (returns.col(j).array() == returns(0, j)).all();
    if (shrinkage == 0.0 && constant_column)
        throw DataError("estimate_covariance: constant return column with no shrinkage");
    if (!(mu > 0.0)) throw DataError("estimate_covariance: all return columns are constant");
    return {(1.0 - shrinkage) * S + shrinkage * mu * Matrix::Identity(R, R), shrinkage};
}

/// Shrinkage intensity toward the scaled identity chosen by the usual
/// plug-in estimate of the optimal weight:
///   d2 = ||S - mu I||^2 / R,  b2 = min(d2, sum_t ||x_t x_t' - S||^2 / (R T^2)),
///   delta = b2 / d2.
/// The intensity is computed with the 1/T covariance and applied to the
/// unbiased one.
inline CovarianceEstimate estimate_covariance_auto(const Matrix& returns) {
    if (returns.rows() < 2) throw DataError("estimate_covariance: need at least 2 periods");
    if (!returns.allFinite()) throw DataError("estimate_covariance: non-finite return");
    const auto T = static_cast<double>(returns.rows());
    const Eigen::Index R = returns.cols();
    const Matrix X = detail::demeaned(returns);
    const Matrix S = X.transpose() * X / T;
    const double mu = S.trace() / static_cast<double>(R);
    const double d2 = (S - mu * Matrix::Identity(R, R)).squaredNorm() / static_cast<double>(R);
    double b2 = 0.0;
    for (Eigen::Index t = 0; t < X.rows(); ++t) {
        const Vector x = X.row(t).transpose();
        b2 += (x * x.transpose() - S).squaredNorm();
    }
    b2 /= static_cast<double>(R) * T * T;
    const double delta = d2 > 0.0 ? std::min(b2, d2) / d2 : 1.0;
    return estimate_covariance(returns, delta);
}

/// q = eps * se with eps the two-sided normal critical value; with
/// n_tests > 1 the level is Bonferroni-adjusted to 1 - (1 - level)/n_tests.
inline double bonferroni_level(double level, int n_tests) {
    if (!(level > 0.0 && level < 1.0)) throw UsageError("confidence level must lie in (0,1)");
    if (n_tests < 1) throw UsageError("Bonferroni: number of tests must be >= 1");
    return 1.0 - (1.0 - level) / n_tests;
}

inline double confidence_to_q(double se, double level, int n_tests = 1) {
    if (!(se >= 0.0)) throw UsageError("confidence_to_q: se must be >= 0");
    return two_sided_critical(bonferroni_level(level, n_tests)) * se;
}

inline Vector confidence_to_q(const Vector& se, double level, bool bonferroni = false) {
    Vector q(se.size());
    const int n = bonferroni ? static_cast<int>(se.size()) : 1;
    for (Eigen::Index i = 0; i < se.size(); ++i) q(i) = confidence_to_q(se(i), level, n);
    return q;
}

}  // namespace mlfci::portfolio
