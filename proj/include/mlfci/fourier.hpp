#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mlfci/common.hpp"
#include "mlfci/panel.hpp"

namespace mlfci::fourier {

/// Additive Fourier expansion: intercept, then for each feature k and each
/// frequency j = 1..order the pair sin(j*scale*x_k), cos(j*scale*x_k).
struct FourierBasis {
    int order = 3;
    int input_dim = 1;
    double scale = M_PI / 4.0;
    bool include_intercept = true;

    Eigen::Index dim() const { return (include_intercept ? 1 : 0) + 2 * order * input_dim; }

    void validate() const {
        if (order <= 0) throw UsageError("fourier: order must be positive");
        if (input_dim <= 0) throw UsageError("fourier: input_dim must be positive");
        if (!std::isfinite(scale)) throw UsageError("fourier: scale must be finite");
    }
};

namespace detail {

template <class Col, class Out>
inline void expand_one(const FourierBasis& basis, const Col& x, Out&& out) {
    Eigen::Index c = 0;
    if (basis.include_intercept) out(c++) = 1.0;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        for (int j = 1; j <= basis.order; ++j) {
            const double arg = j * basis.scale * x(k);
            out(c++) = std::sin(arg);
            out(c++) = std::cos(arg);
        }
    }
}

}  // namespace detail

/// Row r of the result is Phi(features.row(r)).
inline Matrix expand(const FourierBasis& basis, const Matrix& features) {
    basis.validate();
    if (features.cols() != basis.input_dim)
        throw UsageError("fourier: features have " + std::to_string(features.cols()) + " columns, basis expects " +
                         std::to_string(basis.input_dim));
    if (!features.allFinite()) throw DataError("fourier: non-finite feature value");
    Matrix out(features.rows(), basis.dim());
    for (Eigen::Index r = 0; r < features.rows(); ++r) detail::expand_one(basis, features.row(r), out.row(r));
    return out;
}

/// Same as expand() for a d x n column layout; returns n x dim.
inline Matrix expand_columns(const FourierBasis& basis, const Matrix& features_by_col) {
    basis.validate();
    if (features_by_col.rows() != basis.input_dim)
        throw UsageError("fourier: feature dimension mismatch");
    if (!features_by_col.allFinite()) throw DataError("fourier: non-finite feature value");
    Matrix out(features_by_col.cols(), basis.dim());
    for (Eigen::Index r = 0; r < features_by_col.cols(); ++r)
        detail::expand_one(basis, features_by_col.col(r), out.row(r));
    return out;
}

struct OlsFit {
    Vector coefficients;
    Matrix gram;            // Psi' Psi
    Vector residuals;       // y - Psi theta, per observation
    Matrix period_scores;   // dim x T, column t = sum_{i in t} Phi(x_{i,t-1}) e_{i,t}
    Matrix r_factor;        // R of Psi P = Q R (upper triangular)
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic> permutation;
    double condition = 0.0; // estimate of cond(Psi' Psi) from the diagonal of R

    /// (Psi' Psi)^{-1} rhs = P R^{-1} R^{-T} P' rhs.
    Matrix solve(const Matrix& rhs) const {
        Matrix tmp = permutation.transpose() * rhs;
        r_factor.triangularView<Eigen::Upper>().transpose().solveInPlace(tmp);
        r_factor.triangularView<Eigen::Upper>().solveInPlace(tmp);
        return permutation * tmp;
    }
};

/// |r_ii| / |r_11| below this marks Psi as rank deficient, i.e. a Gram
/// condition number beyond 1e20.
constexpr double kRankTolerance = 1e-10;

/// Pooled OLS of returns on Phi(x_{i,t-1}).
///
/// Solved by column-pivoted Householder QR of Psi rather than through the
/// normal equations: the sin/cos terms are strongly collinear on (0,1], and
/// squaring the condition number would cost most of the available digits.
inline OlsFit fit_ols(const Panel& panel, const FourierBasis& basis) {
    basis.validate();
    panel.validate_finite();
    if (panel.n_obs() < basis.dim())
        throw NumericalError("fourier: " + std::to_string(panel.n_obs()) + " observations cannot identify " +
                             std::to_string(basis.dim()) + " coefficients");
    const Matrix psi = expand_columns(basis, panel.features());
    Eigen::ColPivHouseholderQR<Matrix> qr(psi);
    qr.setThreshold(kRankTolerance);
    const Vector rdiag = qr.matrixR().diagonal().cwiseAbs();
    const double rmax = rdiag.maxCoeff(), rmin = rdiag.minCoeff();
    const double condition = rmin > 0.0 ? (rmax / rmin) * (rmax / rmin) : std::numeric_limits<double>::infinity();
    if (qr.rank() < basis.dim())
        throw NumericalError("fourier: Gram matrix is singular (rank " + std::to_string(qr.rank()) + " of " +
                             std::to_string(basis.dim()) + ", condition estimate " + std::to_string(condition) + ")");
    OlsFit fit;
    fit.condition = condition;
    fit.r_factor = qr.matrixR().topLeftCorner(basis.dim(), basis.dim()).triangularView<Eigen::Upper>();
    fit.permutation = qr.colsPermutation();
    fit.gram = psi.transpose() * psi;
    fit.coefficients = qr.solve(panel.returns());
    fit.residuals = panel.returns() - psi * fit.coefficients;
    const int T = panel.n_periods();
    fit.period_scores.setZero(basis.dim(), T);
    for (int t = 0; t < T; ++t) {
        const auto [b, e] = panel.period_range(t);
        fit.period_scores.col(t) = psi.middleRows(b, e - b).transpose() * fit.residuals.segment(b, e - b);
    }
    return fit;
}

inline Vector predict(const OlsFit& fit, const FourierBasis& basis, const Matrix& features) {
    return expand(basis, features) * fit.coefficients;
}

struct SeResult {
    double se = 0.0;
    Vector H;                 // (Psi'Psi)^{-1} Phi_T' W
    Vector per_period_terms;  // H' Phi_{t-1}' e_t, one per period
};

/// Time-clustered forecast standard error of the portfolio forecast
/// sum_i w_i g(x_{i,T}):
///   H = (Psi'Psi)^{-1} Phi_T' W,  se^2 = sum_t (H' Phi_{t-1}' e_t)^2
/// with e the residuals of the Fourier fit.
inline SeResult analytic_se(const OlsFit& fit, const FourierBasis& basis, const Vector& weights,
                            const Matrix& forecast_features) {
    if (weights.size() != forecast_features.rows())
        throw UsageError("analytic_se: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(forecast_features.rows()) + " assets");
    if (!weights.allFinite()) throw DataError("analytic_se: non-finite weight");
    const Matrix phi_T = expand(basis, forecast_features);
    SeResult out;
    out.H = fit.solve(phi_T.transpose() * weights);
    out.per_period_terms = fit.period_scores.transpose() * out.H;
    out.se = std::sqrt(out.per_period_terms.squaredNorm());
    return out;
}

/// Panel-taking overload matching the usual call shape; the panel must be
/// the one the fit was computed on.
inline SeResult analytic_se(const OlsFit& fit, const FourierBasis& basis, const Panel& panel, const Vector& weights,
                            const Matrix& forecast_features) {
    if (panel.n_obs() != fit.residuals.size() || panel.n_periods() != fit.period_scores.cols())
        throw UsageError("analytic_se: panel does not match the fit");
    return analytic_se(fit, basis, weights, forecast_features);
}

/// Per-asset standard errors (W = unit vector e_i for each row).
inline Vector asset_se(const OlsFit& fit, const FourierBasis& basis, const Matrix& forecast_features) {
    const Matrix phi_T = expand(basis, forecast_features);
    const Matrix G = fit.solve(fit.period_scores);  // dim x T
    return (phi_T * G).rowwise().norm();
}

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

/// [forecast - c*se, forecast + c*se] with c the two-sided normal critical value.
inline Interval fci(double point_forecast, double se, double level) {
    if (!(se >= 0.0)) throw UsageError("fci: standard error must be >= 0");
    const double c = two_sided_critical(level);
    return {point_forecast - c * se, point_forecast + c * se};
}

}  // namespace mlfci::fourier
