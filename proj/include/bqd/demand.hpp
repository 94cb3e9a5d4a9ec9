#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "bqd/dataio.hpp"
#include "bqd/estimator.hpp"

namespace bqd {

/// Budget share exp(log_p + log_q - log_y).
[[nodiscard]] double budget_share(const HouseholdRecord& record);

/// Indices of households whose budget share exceeds 1. Each one is passed to
/// `warn` (when given) so callers can log or drop it.
std::vector<std::size_t> check_budget_shares(
    const Dataset& data, const std::function<void(std::size_t, double)>& warn = {});

/// Result of solving G^-1(p, y, q) = tau for q.
struct Inversion {
    double log_q = 0.0;
    /// tau lies outside [G^-1(p, y, q_lo), G^-1(p, y, q_hi)]; log_q is then
    /// the nearer box edge.
    bool out_of_range = false;
};

/// Bisection on [q_lo, q_hi] to an absolute width below 1e-9 (in practice
/// run to machine resolution).
[[nodiscard]] Inversion invert_g(const FittedModel& model, double p, double y, double tau);

struct DemandPoint {
    double log_p = 0.0;
    double log_q = 0.0;
    bool out_of_range = false;
};

struct QuantileDemandCurve {
    double tau = 0.5;
    double log_income = 0.0;
    std::vector<DemandPoint> points;
};

/// n evenly spaced values from lo to hi inclusive.
[[nodiscard]] std::vector<double> linear_grid(double lo, double hi, std::size_t n);

[[nodiscard]] QuantileDemandCurve demand_curve(const FittedModel& model, double tau,
                                               double log_income,
                                               const std::vector<double>& log_price_grid);

struct Elasticities {
    double price = 0.0;
    double income = 0.0;
};

/// Implicit-function derivatives of log demand at the tau quantile. Throws
/// NumericalError when dG^-1/dq is not positive at the inverted point.
[[nodiscard]] Elasticities elasticities(const FittedModel& model, double p, double y, double tau);

/// CSV with header tau,log_income,log_price,log_quantity.
[[nodiscard]] std::string curves_csv(const std::vector<QuantileDemandCurve>& curves);

}  // namespace bqd
