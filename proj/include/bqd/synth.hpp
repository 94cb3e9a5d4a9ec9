#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bqd/basis.hpp"
#include "bqd/dataio.hpp"
#include "bqd/demand.hpp"
#include "bqd/estimator.hpp"
#include "bqd/welfare.hpp"

namespace bqd {

enum class DgpFamily { linear, quadratic_price, custom };

[[nodiscard]] std::string to_string(DgpFamily f);
[[nodiscard]] DgpFamily dgp_family_from_string(const std::string& s);

/// log Q = intercept + U + price * log P* + price_sq * (log P*)^2 + income * log Y
/// for the linear and quadratic-price families (price_sq is ignored by the
/// linear family).
struct DgpBeta {
    double intercept = 0.0;
    double price = -0.8;
    double income = 0.3;
    double price_sq = 0.0;
};

/// Truth given directly as sieve coefficients of G^-1 (clipped to [0, 1]).
struct CustomTruth {
    BasisSpec basis;
    CoefficientVector theta;
};

struct DgpSpec {
    DgpFamily family = DgpFamily::linear;
    DgpBeta beta;
    std::optional<CustomTruth> custom;
    /// Regions are assigned uniformly at random among the map's keys.
    std::map<std::string, double> sigma_by_region = {{"all", 0.05}};
    /// Observed log price is uniform on [log_p_lo, log_p_hi].
    double log_p_lo = 0.03;
    double log_p_hi = 0.53;
    /// Log income is uniform on [log_y_lo, log_y_hi].
    double log_y_lo = 10.308952660644293;  // log 30000
    double log_y_hi = 11.407564949312402;  // log 90000
    /// Correlation between the latent taste and the part of the price not
    /// moved by the instrument. Zero means the instrument is valid for U.
    double rho = 0.0;
    /// Standard deviation of the instrument's own noise.
    double instrument_noise = 0.5;
    std::size_t n = 2000;
    std::uint64_t seed = 0;

    /// Throws ValidationError for bad ranges, rho outside [-1, 1], negative
    /// sigma, a missing custom truth, or a truth that is not increasing in u.
    void validate() const;
};

void to_json(nlohmann::json& j, const DgpSpec& spec);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, DgpSpec& spec);

/// Known structural functions of a DGP.
class GroundTruth {
public:
    GroundTruth() = default;
    explicit GroundTruth(DgpSpec spec);

    [[nodiscard]] const DgpSpec& spec() const { return spec_; }

    /// True conditional CDF of U at (log p*, log y, log q), clipped to [0, 1].
    [[nodiscard]] double g_inv(double p, double y, double q) const;
    /// Log quantity of a household with taste u at (log p*, log y).
    [[nodiscard]] double g(double p, double y, double u) const;
    /// d log q / d log p and d log q / d log y at fixed u = tau.
    [[nodiscard]] Elasticities elasticities(double p, double y, double tau) const;
    /// tau-quantile demand in levels.
    [[nodiscard]] LevelDemand demand(double tau) const;
    /// Closed-form welfare loss for families without income effects and with
    /// constant price elasticity; empty otherwise.
    [[nodiscard]] std::optional<DwlResult> analytic_deadweight_loss(double tau,
                                                                    const PricePath& path,
                                                                    double y0) const;

private:
    DgpSpec spec_;
};

struct Simulation {
    Dataset data;
    GroundTruth truth;
    std::vector<double> u;           ///< latent taste of each household
    std::vector<double> true_log_p;  ///< P + eps
};

/// Same spec and seed give a bit-identical result.
[[nodiscard]] Simulation simulate(const DgpSpec& spec);

/// Berkson spec with the DGP's per-region sigma.
[[nodiscard]] BerksonSpec berkson_of(const DgpSpec& spec);

struct OracleGrid {
    /// Fraction of the model's price and income ranges kept, centred.
    double interior = 0.8;
    std::size_t n_p = 9;
    std::size_t n_y = 5;
    std::size_t n_q = 33;
    /// Points are kept when the true G^-1 lies in [u_lo, u_hi], which stays
    /// away from where the truth is clipped.
    double u_lo = 0.1;
    double u_hi = 0.9;
    std::vector<double> elasticity_taus = {0.25, 0.5, 0.75};
};

struct OracleReport {
    std::size_t points = 0;
    double max_abs = 0.0;
    double rms = 0.0;
    std::size_t elasticity_points = 0;
    double max_price_elasticity_error = 0.0;
    double max_income_elasticity_error = 0.0;
    /// Least-squares slope of the fitted median curve in log price at the
    /// middle income, over the interior price range.
    double median_price_slope = 0.0;
};

/// Compares a fitted model with the truth on the interior of the model's box.
[[nodiscard]] OracleReport oracle_check(const GroundTruth& truth, const FittedModel& model,
                                        const OracleGrid& grid = {});

[[nodiscard]] nlohmann::json oracle_to_json(const OracleReport& r);

/// Slope of log q on log p along the fitted tau-quantile curve at one income.
[[nodiscard]] double curve_price_slope(const FittedModel& model, double tau, double log_income,
                                       double log_p_lo, double log_p_hi, std::size_t points = 33);

struct CdfCheckReport {
    std::size_t cells = 0;
    std::size_t within = 0;  ///< cells within `band` binomial standard errors
    [[nodiscard]] double fraction() const {
        return cells == 0 ? 0.0 : static_cast<double>(within) / static_cast<double>(cells);
    }
};

/// Splits households into price x income quantile bins. In each bin and at
/// the bin's 10%..90% quantity deciles, compares the empirical CDF of Q with
/// the bin average of E_eps[G^-1(P + eps, Y, z)].
[[nodiscard]] CdfCheckReport conditional_cdf_check(const Simulation& sim, std::size_t bins_p = 4,
                                                   std::size_t bins_y = 4, double band = 2.0,
                                                   int n_nodes = 41);

}  // namespace bqd
