#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bqd/dataio.hpp"

namespace bqd {

/// log q = intercept + price_coef * log p + income_coef * log y.
struct LogLogFit {
    double intercept = 0.0;
    double price_coef = 0.0;
    double income_coef = 0.0;
    std::optional<double> tau;  ///< empty for OLS
    /// Classical standard errors (intercept, price, income); OLS only.
    std::optional<std::array<double, 3>> std_errors;
    /// Sum of squared residuals (OLS) or check loss (quantile fit).
    double objective = 0.0;
    std::size_t n = 0;

    [[nodiscard]] std::array<double, 3> coefficients() const {
        return {intercept, price_coef, income_coef};
    }
};

/// Least squares through a column-pivoted Householder QR. Throws
/// ValidationError for n < 3 or a rank-deficient design.
[[nodiscard]] LogLogFit ols_loglog(const Dataset& data);

/// log_q - fitted value for each household.
[[nodiscard]] std::vector<double> loglog_residuals(const Dataset& data, const LogLogFit& fit);

/// rho_tau(r) = r (tau - I[r < 0]) summed over households.
[[nodiscard]] double check_loss(const Dataset& data, double tau, const std::array<double, 3>& b);

struct QuantileRegOptions {
    /// Extra starts from random bases; the returned fit is the best of all.
    int restarts = 5;
    std::uint64_t seed = 0;
    int max_pivots = 100000;
};

/// Check-loss minimisation by exterior-point simplex descent over vertices
/// (bases of three households with zero residual), starting from the
/// households nearest the OLS fit. Throws ValidationError for tau outside
/// (0, 1) or a degenerate design, ConvergenceError if the pivot budget runs
/// out.
[[nodiscard]] LogLogFit qr_loglog(const Dataset& data, double tau,
                                  const QuantileRegOptions& options = {});

/// Check-loss values reached from the default start and from each random
/// restart, in that order.
[[nodiscard]] std::vector<double> qr_restart_objectives(const Dataset& data, double tau,
                                                        const QuantileRegOptions& options = {});

/// CSV with one row per fit:
/// model,tau,intercept,price_coef,income_coef,intercept_se,price_se,income_se,objective,n
[[nodiscard]] std::string baseline_table_csv(const std::vector<LogLogFit>& fits);

[[nodiscard]] nlohmann::json to_json_value(const LogLogFit& fit);

}  // namespace bqd
