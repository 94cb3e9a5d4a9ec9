#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "bqd/berkson.hpp"
#include "bqd/dataio.hpp"
#include "bqd/estimator.hpp"

namespace bqd {

// ---------------------------------------------------------------------------
// Kernels

enum class KernelType { epanechnikov, biweight };

[[nodiscard]] std::string to_string(KernelType k);
[[nodiscard]] KernelType kernel_from_string(const std::string& s);

/// K(u); both kernels are symmetric densities supported on [-1, 1].
[[nodiscard]] double kernel_value(KernelType k, double u);

/// Kernel autocorrelation kappa(delta) = integral of K(x) K(x + delta) dx,
/// zero for |delta| >= 2. Evaluated by Gauss-Legendre on the overlap, which
/// is exact for these polynomial kernels.
[[nodiscard]] double kernel_autocorrelation(KernelType k, double delta);

/// Gauss-Legendre nodes and weights on [-1, 1].
[[nodiscard]] QuadratureRule gauss_legendre(int n);

/// 1.06 * sd * n^(-1/5) (sample sd with n - 1 denominator).
[[nodiscard]] double rule_of_thumb_bandwidth(std::span<const double> x);

/// Affine map of x onto [0, 1] using the sample minimum and maximum.
[[nodiscard]] std::vector<double> rescale_unit(std::span<const double> x);

struct KernelSpec {
    KernelType kernel = KernelType::epanechnikov;
    /// Fixed bandwidth on the [0, 1] scale; empty selects the rule of thumb
    /// per coordinate.
    std::optional<double> bandwidth;
};

/// f(w) = (1 / n h) sum_i K((x_i - w) / h) at each evaluation point.
[[nodiscard]] std::vector<double> kde_1d(std::span<const double> x, KernelType k, double h,
                                         std::span<const double> eval);

/// Weighted version: (1 / n h) sum_i m_i K((x_i - w) / h). With m_i the
/// indicator masses this is S_n.
[[nodiscard]] std::vector<double> weighted_kde_1d(std::span<const double> x,
                                                  std::span<const double> m, KernelType k, double h,
                                                  std::span<const double> eval);

/// Product-kernel estimate on the tensor grid eval_y x eval_w:
/// (1 / n hy hw) sum_i m_i K((y_i - y) / hy) K((w_i - w) / hw), returned as a
/// matrix indexed (y, w). Pass m empty for the plain density.
[[nodiscard]] Eigen::MatrixXd kde_2d(std::span<const double> y, std::span<const double> w,
                                     std::span<const double> m, KernelType k, double hy, double hw,
                                     std::span<const double> eval_y,
                                     std::span<const double> eval_w);

// ---------------------------------------------------------------------------
// Indicator masses and the statistic

struct IndicatorOptions {
    int n_nodes = 41;
    /// Locate sign changes of G^-1(P + eps, Y, Q) - tau and integrate the
    /// normal mass between them instead of applying the rule to the step.
    bool refine_roots = false;
};

/// m_i = integral of I[G^-1(P_i + eps, Y_i, Q_i) <= tau] f_eps(eps) d eps
/// under `berkson` (per-region sigma, times its global factor).
[[nodiscard]] std::vector<double> indicator_masses(const FittedModel& model, const Dataset& data,
                                                   double tau, const BerksonSpec& berkson,
                                                   const IndicatorOptions& options = {});

/// Midpoints of n equal cells of [0, 1].
[[nodiscard]] std::vector<double> midpoint_grid(std::size_t n);

/// n h * sum_g (S(w_g) - tau f(w_g))^2 / G on the midpoint grid.
[[nodiscard]] double t_n_1d(std::span<const double> w, std::span<const double> m, double tau,
                            KernelType k, double h, std::size_t grid);

/// n hy hw * sum (S - tau f)^2 / G^2 on the G x G midpoint grid.
[[nodiscard]] double t_n_2d(std::span<const double> y, std::span<const double> w,
                            std::span<const double> m, double tau, KernelType k, double hy,
                            double hw, std::size_t grid);

// ---------------------------------------------------------------------------
// Covariance operator and the weighted chi-square null

/// Nystrom matrix of the covariance operator on the midpoint grid:
/// tau (1 - tau) sqrt(f_g f_g') kappa((x_g - x_g') / h) / G. Symmetric with the
/// same eigenvalues as the f(x_1)-weighted form.
[[nodiscard]] Eigen::MatrixXd covariance_matrix_1d(std::span<const double> fhat, double tau,
                                                   KernelType k, double h);

/// Bivariate counterpart on the G x G grid, rows ordered (y index, w index)
/// with w fastest. Dense: intended for small grids and tests.
[[nodiscard]] Eigen::MatrixXd covariance_matrix_2d(const Eigen::MatrixXd& fhat, double tau,
                                                   KernelType k, double hy, double hw);

enum class LnRule { quarter_power, trace_fraction, fixed };

[[nodiscard]] std::string to_string(LnRule r);
[[nodiscard]] LnRule ln_rule_from_string(const std::string& s);

struct EigenOptions {
    LnRule rule = LnRule::quarter_power;
    double trace_fraction = 0.999;  ///< for trace_fraction
    std::size_t fixed = 0;          ///< for fixed
};

struct EigenSummary {
    std::vector<double> eigenvalues;  ///< non-increasing, clipped at 0
    double trace = 0.0;               ///< trace of the assembled matrix
};

/// Number of eigenvalues kept for sample size n given the full spectrum
/// (descending).
[[nodiscard]] std::size_t eigen_count(const EigenOptions& options, std::size_t n,
                                      std::span<const double> spectrum, double trace);

/// Leading eigenvalues of a symmetric matrix by dense solve.
[[nodiscard]] std::vector<double> symmetric_eigenvalues_desc(const Eigen::MatrixXd& a);

/// Leading k eigenvalues of a symmetric operator given by its matvec, by
/// Lanczos with full reorthogonalization.
[[nodiscard]] std::vector<double> lanczos_top(
    std::size_t dim, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& matvec,
    std::size_t k, std::uint64_t seed);

[[nodiscard]] EigenSummary covariance_eigenvalues_1d(std::span<const double> fhat, double tau,
                                                     KernelType k, double h, std::size_t n,
                                                     const EigenOptions& options);

[[nodiscard]] EigenSummary covariance_eigenvalues_2d(const Eigen::MatrixXd& fhat, double tau,
                                                     KernelType k, double hy, double hw,
                                                     std::size_t n, const EigenOptions& options);

/// Monte-Carlo draws of sum_j lambda_j chi2_1, sorted ascending.
struct WeightedChiSquare {
    std::vector<double> draws;

    /// Interpolated (1 - level) quantile.
    [[nodiscard]] double critical_value(double level) const;
    /// Fraction of draws >= t.
    [[nodiscard]] double p_value(double t) const;
};

/// Draws come in batches of 10,000; batch b uses derive_seed(seed, "exogtest/mc", b)
/// so the result does not depend on the worker count.
[[nodiscard]] WeightedChiSquare simulate_weighted_chi_square(std::span<const double> eigenvalues,
                                                             std::size_t draws, std::uint64_t seed);

// ---------------------------------------------------------------------------
// The test

enum class TestVariant { univariate, bivariate };

[[nodiscard]] std::string to_string(TestVariant v);
[[nodiscard]] TestVariant test_variant_from_string(const std::string& s);

/// Income range in dollars, [lo, hi).
struct IncomeStratum {
    double lo = 0.0;
    double hi = 0.0;
    [[nodiscard]] std::string label() const;
};

struct ExogTestConfig {
    double tau = 0.5;
    TestVariant variant = TestVariant::univariate;
    /// Empty runs one test on the whole sample.
    std::vector<IncomeStratum> strata = {{35000, 50000}, {50000, 65000}, {65000, 80000}};
    KernelSpec kernel;
    EigenOptions eigen;
    std::size_t mc_draws = 100000;
    std::size_t grid_1d = 256;
    std::size_t grid_2d = 64;
    IndicatorOptions indicator;
    /// One sigma for every household in the indicator integral; empty uses the
    /// model's per-region values.
    std::optional<double> common_sigma = 0.033;
    double factor = 1.0;  ///< multiplies the Berkson sigma
    double level = 0.05;
    std::uint64_t seed = 0;
};

struct ExogTestResult {
    std::string stratum;
    std::size_t n = 0;
    double factor = 1.0;
    double t_n = 0.0;
    std::vector<double> eigenvalues;
    double trace = 0.0;
    double crit_value = 0.0;
    double p_value = 1.0;
    bool reject = false;
    double bandwidth_y = 0.0;  ///< 0 for the univariate variant
    double bandwidth_w = 0.0;
};

/// Berkson spec used for the indicator integral under `config`.
[[nodiscard]] BerksonSpec test_berkson(const FittedModel& model, const Dataset& data,
                                       const ExogTestConfig& config);

/// Runs the test on `sample` as one group. Every record needs an instrument.
[[nodiscard]] ExogTestResult run_test_sample(const FittedModel& model, const Dataset& sample,
                                             const ExogTestConfig& config, const std::string& label,
                                             std::uint64_t seed);

/// One result per stratum (or one for the whole sample). Throws
/// ValidationError naming any stratum with fewer than two households.
[[nodiscard]] std::vector<ExogTestResult> run_test(const FittedModel& model, const Dataset& data,
                                                   const ExogTestConfig& config);

/// Per-test level 1 - (1 - level)^(1/k) that keeps the joint level at `level`.
[[nodiscard]] double joint_cutoff(std::size_t k, double level);

/// {"level", "joint_cutoff", "joint_reject", "strata": [{stratum, n, factor,
/// t_n, crit_5pct, p_value, reject}, ...]}.
[[nodiscard]] nlohmann::json results_to_json(const std::vector<ExogTestResult>& results,
                                             double level);

}  // namespace bqd
