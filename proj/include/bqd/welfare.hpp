#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bqd/common.hpp"
#include "bqd/dataio.hpp"
#include "bqd/estimator.hpp"

namespace bqd {

/// Straight-line path in price levels: p(t) = p0 + t (p1 - p0), t in [0, 1].
struct PricePath {
    double p0 = 1.0;
    double p1 = 1.0;

    [[nodiscard]] double at(double t) const { return p0 + t * (p1 - p0); }
    /// Throws ValidationError unless both prices are positive and finite.
    void validate() const;
};

/// Marshallian demand in levels, H(price, income).
using LevelDemand = std::function<double(double price, double income)>;

/// Raised by a LevelDemand when (price, income) leaves the model's domain.
class DomainExit : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// exp(G^(log p, log y, tau)): the fitted tau-quantile demand in levels.
/// Throws DomainExit outside the model's price/income box.
[[nodiscard]] LevelDemand model_demand(const FittedModel& model, double tau);

inline constexpr int kDefaultOdeSteps = 200;

/// Solves de/dt = H(p(t), e(t)) p'(t), e(0) = y0 with classical fixed-step
/// RK4 and returns e(1). A DomainExit inside H is rethrown as NumericalError
/// naming the path parameter t where it happened.
[[nodiscard]] double expenditure_path(const LevelDemand& demand, const PricePath& path, double y0,
                                      int steps = kDefaultOdeSteps);
[[nodiscard]] double expenditure_path(const FittedModel& model, double tau, const PricePath& path,
                                      double y0, int steps = kDefaultOdeSteps);

struct DwlResult {
    double expenditure = 0.0;           ///< e(1)
    double dwl = 0.0;                   ///< e(1) - y0 - (p1 - p0) H(p1, e(1))
    double tax_revenue = 0.0;           ///< (p1 - p0) H(p1, e(1))
    std::optional<double> dwl_per_tax;  ///< empty when the revenue is zero
    double dwl_per_income = 0.0;        ///< dwl / y0
};

[[nodiscard]] DwlResult deadweight_loss(const LevelDemand& demand, const PricePath& path, double y0,
                                        int steps = kDefaultOdeSteps);
[[nodiscard]] DwlResult deadweight_loss(const FittedModel& model, double tau, const PricePath& path,
                                        double y0, int steps = kDefaultOdeSteps);

/// (e_{N/2} - e_N) / (e_N - e_{2N}) for N = steps. Close to 16 for a
/// fourth-order method on a smooth problem; NaN when the differences vanish.
[[nodiscard]] double richardson_ratio(const LevelDemand& demand, const PricePath& path, double y0,
                                      int steps);

/// exp of the 5th and 95th interpolated percentiles of log price.
[[nodiscard]] PricePath price_change_5_95(const Dataset& data);

/// One cell of the deadweight-loss table.
struct DwlCell {
    double tau = 0.5;
    double income = 0.0;  ///< y0 in dollars
    std::string column;   ///< e.g. "berkson-with_unconstrained"
    DwlResult result;
};

/// CSV mirroring the published layout: one block per tau, one row per
/// (income, measure) with measure in {dwl, dwl_per_tax, dwl_per_income_x1e4},
/// one column per regime label (in order of first appearance).
[[nodiscard]] std::string dwl_table_csv(const std::vector<DwlCell>& cells);

}  // namespace bqd
