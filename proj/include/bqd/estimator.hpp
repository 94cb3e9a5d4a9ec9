#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "bqd/basis.hpp"
#include "bqd/berkson.hpp"
#include "bqd/dataio.hpp"

namespace bqd {

/// Sieve coefficients theta, in BasisSpec index order.
using CoefficientVector = Eigen::VectorXd;

/// Throws ValidationError unless theta has length J and finite entries.
void validate_coefficients(const CoefficientVector& theta, const BasisSpec& basis);

/// sum_j theta_j Psi_j(p, y, q).
[[nodiscard]] double g_inv(const CoefficientVector& theta, const BasisSpec& basis, double p,
                           double y, double q);

[[nodiscard]] double g_inv_deriv(const CoefficientVector& theta, const BasisSpec& basis, double p,
                                 double y, double q, Axis wrt);

/// Least-squares coefficients of f on an oversampled tensor Chebyshev grid;
/// exact (to rounding) when f lies in the span of the basis.
[[nodiscard]] CoefficientVector project_onto_basis(
    const BasisSpec& basis, const std::function<double(double, double, double)>& f);

/// Coefficients of margin + (1 - 2 margin) u + tilt u (1 - u) r with
/// u = (q - q_lo) / (q_hi - q_lo) and r = (p - p_lo) / (p_hi - p_lo).
/// With margin in (0, 1/2) and |tilt| < 1 - 2 margin this is strictly monotone in q
/// and strictly inside (0, 1) on the box; a positive tilt gives a strictly
/// positive price derivative at interior q.
[[nodiscard]] CoefficientVector initial_coefficients(const BasisSpec& basis, double margin = 0.01,
                                                     double tilt = 0.1);

/// Expected q-derivative of the basis at each household, stored in factored
/// form: row i of the n x J matrix A is kron(price_factor.row(i), income_quantity.row(i)).
struct LikelihoodDesign {
    Eigen::MatrixXd price_factor;  ///< n x (deg_p + 1): E_eps T_a(map(P_i + eps))
    Eigen::MatrixXd
        income_quantity;  ///< n x (deg_y + 1)(deg_q + 1): T_b(map Y_i) d/dq T_c(map Q_i)

    [[nodiscard]] std::size_t households() const {
        return static_cast<std::size_t>(price_factor.rows());
    }
    /// The dense n x J matrix A.
    [[nodiscard]] Eigen::MatrixXd full() const;
    /// d_i(theta) = A_i theta, the implied density of Q at Q_i.
    [[nodiscard]] Eigen::VectorXd densities(const CoefficientVector& theta) const;
};

[[nodiscard]] LikelihoodDesign build_likelihood_design(const Dataset& data, const BasisSpec& basis,
                                                       const BerksonSpec& berkson);

/// sum_i log d_i(theta). Throws NumericalError naming the first household with d_i <= 0.
[[nodiscard]] double log_likelihood(const CoefficientVector& theta, const LikelihoodDesign& design);
[[nodiscard]] double log_likelihood(const CoefficientVector& theta, const Dataset& data,
                                    const BasisSpec& basis, const BerksonSpec& berkson);

/// sum_i A_i / d_i(theta).
[[nodiscard]] Eigen::VectorXd log_likelihood_grad(const CoefficientVector& theta,
                                                  const LikelihoodDesign& design);
[[nodiscard]] Eigen::VectorXd log_likelihood_grad(const CoefficientVector& theta,
                                                  const Dataset& data, const BasisSpec& basis,
                                                  const BerksonSpec& berkson);

enum class ShapeRegime { unconstrained, slutsky };

[[nodiscard]] std::string to_string(ShapeRegime regime);
[[nodiscard]] ShapeRegime shape_regime_from_string(const std::string& s);

/// Households where the Slutsky inequality is imposed: log_q between two
/// unconditional percentiles, log price in [log_p_lo, log_p_hi] and income
/// (in dollars) in [income_lo, income_hi].
struct SlutskyRegion {
    double q_lo_pct = 0.10;
    double q_hi_pct = 0.90;
    double log_p_lo = 0.20;
    double log_p_hi = 0.36;
    double income_lo = 20000.0;
    double income_hi = 90000.0;
};

struct ConstraintGridSpec {
    int n_p = 9;
    int n_y = 5;
    int n_q = 17;
    double delta_floor = 1e-6;
    /// Impose G^-1(., ., q_lo) = 0 and G^-1(., ., q_hi) = 1 on the (p, y) grid.
    bool pin_boundary = false;
    /// Data rows bound the Berkson-expected q-derivative at each household
    /// (its likelihood density). With this set, the raw q-derivative is bounded
    /// at every quadrature node P_i + eps_k instead, which also constrains the
    /// fit far outside the observed prices.
    bool per_node_monotonicity = false;
    SlutskyRegion slutsky;
};

struct GridPoint {
    double p = 0.0, y = 0.0, q = 0.0;
};

enum class RowKind : std::uint8_t {
    monotone_data,
    monotone_grid,
    bound_lower,
    bound_upper,
    slutsky
};

/// Linear inequality rows R theta >= lower, plus optional equality pins.
/// Monotonicity rows at the data points are kept factored like
/// LikelihoodDesign; all others are dense.
struct ConstraintSet {
    ShapeRegime regime = ShapeRegime::unconstrained;
    double delta_floor = 1e-6;
    std::vector<GridPoint> mono_grid;  ///< regular grid (data-quadrature points are implicit)
    std::vector<GridPoint> bound_grid;
    std::vector<std::size_t> slutsky_points;  ///< household indices
    std::vector<double> slutsky_shares;       ///< S_i for each selected household

    /// rows x (deg_p + 1): E_eps T_a(map(P_i + eps)), or T_a(map(P_i + eps_k))
    /// per node
    Eigen::MatrixXd data_price_factor;
    std::vector<std::size_t> data_row_offsets;  ///< household i owns rows [off[i], off[i+1])
    Eigen::MatrixXd data_income_quantity;       ///< n x (deg_y + 1)(deg_q + 1)

    Eigen::MatrixXd dense_rows;
    Eigen::VectorXd dense_lower;
    std::vector<RowKind> dense_kinds;

    Eigen::MatrixXd pin_rows;
    Eigen::VectorXd pin_values;

    [[nodiscard]] std::size_t data_rows() const {
        return static_cast<std::size_t>(data_price_factor.rows());
    }
    [[nodiscard]] std::size_t inequality_count() const {
        return data_rows() + static_cast<std::size_t>(dense_rows.rows());
    }
    [[nodiscard]] std::size_t count(RowKind kind) const;
    /// R theta - lower for every inequality row, data-quadrature rows first.
    [[nodiscard]] Eigen::VectorXd slacks(const CoefficientVector& theta) const;
    /// All inequality rows as a dense matrix, in the same order as slacks().
    [[nodiscard]] Eigen::MatrixXd materialize() const;
    [[nodiscard]] Eigen::VectorXd lower() const;
    [[nodiscard]] std::vector<RowKind> kinds() const;
};

/// Indices of households inside the Slutsky region.
[[nodiscard]] std::vector<std::size_t> select_slutsky_households(const Dataset& data,
                                                                 const SlutskyRegion& region);

[[nodiscard]] ConstraintSet build_constraints(const Dataset& data, const BasisSpec& basis,
                                              const BerksonSpec& berkson, ShapeRegime regime,
                                              const ConstraintGridSpec& grid = {});

struct FitOptions {
    /// Stop once the barrier duality bound (rows / t) is below this.
    double gap_tol = 1e-5;
    /// Lagrangian-gradient infinity norm required for `converged`.
    double kkt_tol = 1e-6;
    double violation_tol = 1e-8;
    double barrier_growth = 20.0;
    int max_newton = 600;
    double init_margin = 0.01;
    double init_tilt = 0.1;
    std::optional<CoefficientVector> initial_theta;
};

struct ConstraintSummary {
    ShapeRegime regime = ShapeRegime::unconstrained;
    double delta_floor = 1e-6;
    std::size_t monotone_data = 0;
    std::size_t monotone_grid = 0;
    std::size_t bound = 0;
    std::size_t slutsky = 0;
    std::size_t pins = 0;
    double min_monotone_slack = 0.0;  ///< min over monotonicity rows of value - delta_floor
    double min_bound_slack = 0.0;
    std::optional<double> min_slutsky_slack;  ///< empty when there are no Slutsky rows
    double max_violation = 0.0;
};

struct FittedModel {
    CoefficientVector theta;
    BasisSpec basis;
    BerksonSpec berkson;
    ConstraintSummary constraints;
    double loglik = 0.0;
    bool converged = false;
    int iterations = 0;
    double kkt_stationarity = 0.0;
    double duality_gap = 0.0;

    [[nodiscard]] double g_inv(double p, double y, double q) const {
        return bqd::g_inv(theta, basis, p, y, q);
    }
    [[nodiscard]] double g_inv_deriv(double p, double y, double q, Axis wrt) const {
        return bqd::g_inv_deriv(theta, basis, p, y, q, wrt);
    }
};

/// Model wrapper around fixed coefficients (no fit): used for injected truths
/// and synthetic checks.
[[nodiscard]] FittedModel model_from_coefficients(CoefficientVector theta, BasisSpec basis,
                                                  BerksonSpec berkson = {});

[[nodiscard]] ConstraintSummary summarize_constraints(const ConstraintSet& constraints,
                                                      const CoefficientVector& theta);

/// Maximizes the log-likelihood over the constraint polyhedron with a
/// log-barrier Newton method. Throws ValidationError if the start is not
/// strictly feasible; returns converged = false if the Newton budget runs out.
[[nodiscard]] FittedModel fit(const Dataset& data, const BasisSpec& basis,
                              const BerksonSpec& berkson, const ConstraintSet& constraints,
                              const FitOptions& options = {});

/// Everything needed to refit on a new sample.
struct FitConfig {
    BasisSpec basis;
    BerksonSpec berkson;
    ShapeRegime regime = ShapeRegime::unconstrained;
    ConstraintGridSpec grid;
    FitOptions options;
};

[[nodiscard]] FittedModel fit(const Dataset& data, const FitConfig& config);

/// Household indices for bootstrap replicate `rep` (n draws with replacement).
[[nodiscard]] std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed,
                                                         std::size_t rep);

struct BootstrapReplicate {
    std::size_t rep = 0;
    std::vector<std::size_t> indices;
    std::optional<FittedModel> model;
    std::vector<double> statistics;
    std::string error;  ///< nonempty when the refit failed
};

using BootstrapStatistic = std::function<std::vector<double>(const FittedModel&, const Dataset&)>;

/// Nonparametric bootstrap: resample households, refit with the same config
/// and optionally reduce each fit to statistics. Failures are recorded per
/// replicate. Replicates run through parallel_for.
[[nodiscard]] std::vector<BootstrapReplicate> bootstrap(const Dataset& data,
                                                        const FitConfig& config, int n_reps,
                                                        std::uint64_t seed,
                                                        const BootstrapStatistic& statistic = {},
                                                        bool keep_models = true);

struct PercentileInterval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Equal-tailed percentile interval at `level` (e.g. 0.90), interpolated quantiles.
[[nodiscard]] PercentileInterval percentile_interval(std::vector<double> stats, double level);

void to_json(nlohmann::json& j, const ConstraintSummary& s);
void from_json(const nlohmann::json& j, ConstraintSummary& s);
void to_json(nlohmann::json& j, const FittedModel& m);
void from_json(const nlohmann::json& j, FittedModel& m);

}  // namespace bqd
