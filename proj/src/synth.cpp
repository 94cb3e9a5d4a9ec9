#include "bqd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bqd/berkson.hpp"
#include "bqd/common.hpp"

namespace bqd {

namespace {

bool has_income_effect(const DgpSpec& s) {
    return s.family == DgpFamily::custom || s.beta.income != 0.0;
}

double price_sq_coef(const DgpSpec& s) {
    return s.family == DgpFamily::quadratic_price ? s.beta.price_sq : 0.0;
}

double custom_raw(const CustomTruth& c, double p, double y, double q) {
    return bqd::g_inv(c.theta, c.basis, p, y, q);
}

// Bisection for the custom family; returns a box edge when u is outside the
// range of G^-1 along q.
double custom_g(const CustomTruth& c, double p, double y, double u) {
    const auto& box = c.basis.box;
    auto f = [&](double q) { return std::clamp(custom_raw(c, p, y, q), 0.0, 1.0) - u; };
    double lo = box.q_lo, hi = box.q_hi;
    if (f(lo) >= 0.0) {
        return lo;
    }
    if (f(hi) <= 0.0) {
        return hi;
    }
    for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) {
            break;
        }
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

void check_custom_monotone(const DgpSpec& s) {
    const CustomTruth& c = *s.custom;
    for (int ip = 0; ip < 5; ++ip) {
        const double p = s.log_p_lo + (s.log_p_hi - s.log_p_lo) * ip / 4.0;
        for (int iy = 0; iy < 5; ++iy) {
            const double y = s.log_y_lo + (s.log_y_hi - s.log_y_lo) * iy / 4.0;
            double prev = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < 101; ++k) {
                const double u = (k + 0.5) / 101.0;
                const double q = custom_g(c, p, y, u);
                const bool interior = q > c.basis.box.q_lo && q < c.basis.box.q_hi;
                const double dq = bqd::g_inv_deriv(c.theta, c.basis, p, y, q, Axis::q);
                if (!(q > prev) || (interior && !(dq > 0.0))) {
                    throw ValidationError(
                        "custom truth is not strictly increasing in u at (log p, log y) = (" +
                        format_double(p) + ", " + format_double(y) + ")");
                }
                prev = q;
            }
        }
    }
}

}  // namespace

std::string to_string(DgpFamily f) {
    switch (f) {
        case DgpFamily::linear: return "linear";
        case DgpFamily::quadratic_price: return "quadratic_price";
        case DgpFamily::custom: return "custom";
    }
    return "linear";
}

DgpFamily dgp_family_from_string(const std::string& s) {
    if (s == "linear") {
        return DgpFamily::linear;
    }
    if (s == "quadratic_price" || s == "quadratic-price") {
        return DgpFamily::quadratic_price;
    }
    if (s == "custom" || s == "custom-coefficients") {
        return DgpFamily::custom;
    }
    throw ValidationError("unknown DGP family '" + s + "'");
}

void DgpSpec::validate() const {
    if (!(log_p_hi > log_p_lo) || !std::isfinite(log_p_lo) || !std::isfinite(log_p_hi)) {
        throw ValidationError("DGP price range must be finite with log_p_hi > log_p_lo");
    }
    if (!(log_y_hi > log_y_lo) || !std::isfinite(log_y_lo) || !std::isfinite(log_y_hi)) {
        throw ValidationError("DGP income range must be finite with log_y_hi > log_y_lo");
    }
    if (!(rho >= -1.0 && rho <= 1.0)) {
        throw ValidationError("rho must lie in [-1, 1]");
    }
    if (!(instrument_noise >= 0.0) || !std::isfinite(instrument_noise)) {
        throw ValidationError("instrument noise must be finite and non-negative");
    }
    if (n == 0) {
        throw ValidationError("DGP sample size must be positive");
    }
    if (sigma_by_region.empty()) {
        throw ValidationError("DGP needs at least one region");
    }
    for (const auto& [region, sigma] : sigma_by_region) {
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
            throw ValidationError("Berkson sigma for region '" + region +
                                  "' must be finite and non-negative");
        }
    }
    for (double b : {beta.intercept, beta.price, beta.income, beta.price_sq}) {
        if (!std::isfinite(b)) {
            throw ValidationError("DGP coefficients must be finite");
        }
    }
    if (family == DgpFamily::custom) {
        if (!custom) {
            throw ValidationError("custom DGP family needs coefficients");
        }
        custom->basis.validate();
        if (static_cast<std::size_t>(custom->theta.size()) != custom->basis.size()) {
            throw ValidationError("custom DGP coefficients do not match the basis size");
        }
        check_custom_monotone(*this);
    }
}

void to_json(nlohmann::json& j, const DgpSpec& s) {
    j = nlohmann::json{{"family", to_string(s.family)},
                       {"beta",
                        {{"intercept", s.beta.intercept},
                         {"price", s.beta.price},
                         {"income", s.beta.income},
                         {"price_sq", s.beta.price_sq}}},
                       {"sigma_by_region", s.sigma_by_region},
                       {"log_p_lo", s.log_p_lo},
                       {"log_p_hi", s.log_p_hi},
                       {"log_y_lo", s.log_y_lo},
                       {"log_y_hi", s.log_y_hi},
                       {"rho", s.rho},
                       {"instrument_noise", s.instrument_noise},
                       {"n", s.n},
                       {"seed", s.seed}};
    if (s.custom) {
        std::vector<double> theta(s.custom->theta.data(),
                                  s.custom->theta.data() + s.custom->theta.size());
        j["custom"] = {{"basis", s.custom->basis}, {"theta", theta}};
    }
}

void from_json(const nlohmann::json& j, DgpSpec& s) {
    check_keys(j,
               {"family", "beta", "custom", "sigma_by_region", "log_p_lo", "log_p_hi", "log_y_lo",
                "log_y_hi", "rho", "instrument_noise", "n", "seed"},
               "DGP spec");
    DgpSpec out;
    try {
        if (j.contains("family")) {
            out.family = dgp_family_from_string(j.at("family").get<std::string>());
        }
        if (j.contains("beta")) {
            const auto& b = j.at("beta");
            check_keys(b, {"intercept", "price", "income", "price_sq"}, "DGP beta");
            out.beta.intercept = b.value("intercept", out.beta.intercept);
            out.beta.price = b.value("price", out.beta.price);
            out.beta.income = b.value("income", out.beta.income);
            out.beta.price_sq = b.value("price_sq", out.beta.price_sq);
        }
        if (j.contains("custom")) {
            const auto& c = j.at("custom");
            check_keys(c, {"basis", "theta"}, "custom DGP truth");
            CustomTruth ct;
            ct.basis = c.at("basis").get<BasisSpec>();
            const auto theta = c.at("theta").get<std::vector<double>>();
            ct.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(),
                                                         static_cast<Eigen::Index>(theta.size()));
            out.custom = std::move(ct);
        }
        if (j.contains("sigma_by_region")) {
            out.sigma_by_region = j.at("sigma_by_region").get<std::map<std::string, double>>();
        }
        out.log_p_lo = j.value("log_p_lo", out.log_p_lo);
        out.log_p_hi = j.value("log_p_hi", out.log_p_hi);
        out.log_y_lo = j.value("log_y_lo", out.log_y_lo);
        out.log_y_hi = j.value("log_y_hi", out.log_y_hi);
        out.rho = j.value("rho", out.rho);
        out.instrument_noise = j.value("instrument_noise", out.instrument_noise);
        out.n = j.value("n", out.n);
        out.seed = j.value("seed", out.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid DGP spec: ") + e.what());
    }
    s = std::move(out);
}

// ---------------------------------------------------------------------------

GroundTruth::GroundTruth(DgpSpec spec) : spec_(std::move(spec)) {}

double GroundTruth::g_inv(double p, double y, double q) const {
    if (spec_.family == DgpFamily::custom) {
        return std::clamp(custom_raw(*spec_.custom, p, y, q), 0.0, 1.0);
    }
    const auto& b = spec_.beta;
    const double u = q - b.intercept - b.price * p - price_sq_coef(spec_) * p * p - b.income * y;
    return std::clamp(u, 0.0, 1.0);
}

double GroundTruth::g(double p, double y, double u) const {
    if (spec_.family == DgpFamily::custom) {
        return custom_g(*spec_.custom, p, y, u);
    }
    const auto& b = spec_.beta;
    return b.intercept + u + b.price * p + price_sq_coef(spec_) * p * p + b.income * y;
}

Elasticities GroundTruth::elasticities(double p, double y, double tau) const {
    if (spec_.family == DgpFamily::custom) {
        const auto& c = *spec_.custom;
        const double q = custom_g(c, p, y, tau);
        const double dq = bqd::g_inv_deriv(c.theta, c.basis, p, y, q, Axis::q);
        if (!(dq > 0.0)) {
            throw NumericalError("true G^-1 is flat in q at the requested point");
        }
        return {-bqd::g_inv_deriv(c.theta, c.basis, p, y, q, Axis::p) / dq,
                -bqd::g_inv_deriv(c.theta, c.basis, p, y, q, Axis::y) / dq};
    }
    return {spec_.beta.price + 2.0 * price_sq_coef(spec_) * p, spec_.beta.income};
}

LevelDemand GroundTruth::demand(double tau) const {
    return [this, tau](double price, double income) {
        if (!(price > 0.0) || !(income > 0.0)) {
            throw DomainExit("non-positive price or income");
        }
        return std::exp(g(std::log(price), std::log(income), tau));
    };
}

std::optional<DwlResult> GroundTruth::analytic_deadweight_loss(double tau, const PricePath& path,
                                                               double y0) const {
    if (has_income_effect(spec_) || price_sq_coef(spec_) != 0.0) {
        return std::nullopt;
    }
    path.validate();
    const double a = std::exp(spec_.beta.intercept + tau);
    const double b = spec_.beta.price;
    // Without income effects e(1) - y0 is the area under the demand curve.
    double area = 0.0;
    if (b == -1.0) {
        area = a * std::log(path.p1 / path.p0);
    } else {
        area = a * (std::pow(path.p1, b + 1.0) - std::pow(path.p0, b + 1.0)) / (b + 1.0);
    }
    DwlResult r;
    r.expenditure = y0 + area;
    r.tax_revenue = (path.p1 - path.p0) * a * std::pow(path.p1, b);
    r.dwl = area - r.tax_revenue;
    if (r.tax_revenue != 0.0) {
        r.dwl_per_tax = r.dwl / r.tax_revenue;
    }
    r.dwl_per_income = r.dwl / y0;
    return r;
}

BerksonSpec berkson_of(const DgpSpec& spec) {
    BerksonSpec b;
    b.sigma_by_region = spec.sigma_by_region;
    return b;
}

Simulation simulate(const DgpSpec& spec) {
    spec.validate();
    Simulation sim;
    sim.truth = GroundTruth(spec);
    std::vector<std::pair<std::string, double>> regions(spec.sigma_by_region.begin(),
                                                        spec.sigma_by_region.end());
    Rng rng(derive_seed(spec.seed, "synth/simulate", 0));
    const double c = std::sqrt(std::max(0.0, 1.0 - spec.rho * spec.rho));
    sim.data.records.reserve(spec.n);
    sim.u.reserve(spec.n);
    sim.true_log_p.reserve(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        // Fixed draw order per household keeps the stream layout stable.
        const double z = standard_normal(rng);
        const double xi = standard_normal(rng);
        const double nu = standard_normal(rng);
        const double eta = standard_normal(rng);
        const double uy = uniform01(rng);
        const double ur = uniform01(rng);
        const double e = standard_normal(rng);

        const double s = (z + xi) / std::numbers::sqrt2;
        const double p = spec.log_p_lo + (spec.log_p_hi - spec.log_p_lo) * normal_cdf(s);
        const double w = z + spec.instrument_noise * nu;
        const double u = normal_cdf(spec.rho * xi + c * eta);
        const double y = spec.log_y_lo + (spec.log_y_hi - spec.log_y_lo) * uy;
        const auto ri = std::min(
            regions.size() - 1, static_cast<std::size_t>(ur * static_cast<double>(regions.size())));
        const double p_star = p + regions[ri].second * e;

        HouseholdRecord r;
        r.log_p = p;
        r.log_y = y;
        r.log_q = sim.truth.g(p_star, y, u);
        r.instrument = w;
        r.region = regions[ri].first;
        sim.data.records.push_back(std::move(r));
        sim.u.push_back(u);
        sim.true_log_p.push_back(p_star);
    }
    return sim;
}

// ---------------------------------------------------------------------------

double curve_price_slope(const FittedModel& model, double tau, double log_income, double log_p_lo,
                         double log_p_hi, std::size_t points) {
    if (points < 2) {
        throw ValidationError("slope needs at least two curve points");
    }
    const auto curve =
        demand_curve(model, tau, log_income, linear_grid(log_p_lo, log_p_hi, points));
    double sx = 0.0, sy = 0.0, m = 0.0;
    for (const auto& pt : curve.points) {
        if (!pt.out_of_range) {
            sx += pt.log_p;
            sy += pt.log_q;
            m += 1.0;
        }
    }
    if (m < 2.0) {
        throw NumericalError("fitted curve leaves the quantity range at almost every price");
    }
    const double mx = sx / m, my = sy / m;
    double sxy = 0.0, sxx = 0.0;
    for (const auto& pt : curve.points) {
        if (!pt.out_of_range) {
            sxy += (pt.log_p - mx) * (pt.log_q - my);
            sxx += (pt.log_p - mx) * (pt.log_p - mx);
        }
    }
    return sxy / sxx;
}

OracleReport oracle_check(const GroundTruth& truth, const FittedModel& model,
                          const OracleGrid& grid) {
    if (!(grid.interior > 0.0 && grid.interior <= 1.0)) {
        throw ValidationError("oracle interior fraction must lie in (0, 1]");
    }
    const auto& box = model.basis.box;
    // Price and income ranges are those the DGP samples, cut to the model box;
    // the box's price extension only serves the quadrature.
    const DgpSpec& spec = truth.spec();
    const double p_lo = std::max(box.p_lo, spec.log_p_lo), p_hi = std::min(box.p_hi, spec.log_p_hi);
    const double y_lo = std::max(box.y_lo, spec.log_y_lo), y_hi = std::min(box.y_hi, spec.log_y_hi);
    if (!(p_lo < p_hi && y_lo < y_hi)) {
        throw ValidationError("model box does not overlap the DGP support");
    }
    const double pc = 0.5 * (p_lo + p_hi), ph = 0.5 * grid.interior * (p_hi - p_lo);
    const double yc = 0.5 * (y_lo + y_hi), yh = 0.5 * grid.interior * (y_hi - y_lo);
    const auto ps = linear_grid(pc - ph, pc + ph, grid.n_p);
    const auto ys = linear_grid(yc - yh, yc + yh, grid.n_y);
    const auto qs = linear_grid(box.q_lo, box.q_hi, grid.n_q);

    OracleReport r;
    double ss = 0.0;
    for (double p : ps) {
        for (double y : ys) {
            for (double q : qs) {
                const double t = truth.g_inv(p, y, q);
                if (t < grid.u_lo || t > grid.u_hi) {
                    continue;
                }
                const double d = std::abs(model.g_inv(p, y, q) - t);
                r.max_abs = std::max(r.max_abs, d);
                ss += d * d;
                ++r.points;
            }
            for (double tau : grid.elasticity_taus) {
                const Inversion inv = invert_g(model, p, y, tau);
                const double tq = truth.g(p, y, tau);
                if (inv.out_of_range || tq <= box.q_lo || tq >= box.q_hi) {
                    continue;
                }
                try {
                    const Elasticities em = elasticities(model, p, y, tau);
                    const Elasticities et = truth.elasticities(p, y, tau);
                    r.max_price_elasticity_error =
                        std::max(r.max_price_elasticity_error, std::abs(em.price - et.price));
                    r.max_income_elasticity_error =
                        std::max(r.max_income_elasticity_error, std::abs(em.income - et.income));
                    ++r.elasticity_points;
                } catch (const NumericalError&) {
                    // flat fitted slice: no elasticity at this point
                }
            }
        }
    }
    r.rms = r.points > 0 ? std::sqrt(ss / static_cast<double>(r.points)) : 0.0;
    r.median_price_slope = curve_price_slope(model, 0.5, yc, pc - ph, pc + ph);
    return r;
}

nlohmann::json oracle_to_json(const OracleReport& r) {
    return {{"points", r.points},
            {"max_abs", r.max_abs},
            {"rms", r.rms},
            {"elasticity_points", r.elasticity_points},
            {"max_price_elasticity_error", r.max_price_elasticity_error},
            {"max_income_elasticity_error", r.max_income_elasticity_error},
            {"median_price_slope", r.median_price_slope}};
}

CdfCheckReport conditional_cdf_check(const Simulation& sim, std::size_t bins_p, std::size_t bins_y,
                                     double band, int n_nodes) {
    const auto& recs = sim.data.records;
    if (recs.empty() || bins_p == 0 || bins_y == 0) {
        throw ValidationError("CDF check needs data and at least one bin per axis");
    }
    std::vector<double> lp, ly;
    for (const auto& r : recs) {
        lp.push_back(r.log_p);
        ly.push_back(r.log_y);
    }
    std::sort(lp.begin(), lp.end());
    std::sort(ly.begin(), ly.end());
    auto cuts = [](const std::vector<double>& sorted, std::size_t k) {
        std::vector<double> c;
        for (std::size_t j = 1; j < k; ++j) {
            c.push_back(quantile_sorted(sorted, static_cast<double>(j) / static_cast<double>(k)));
        }
        return c;
    };
    const auto cp = cuts(lp, bins_p);
    const auto cy = cuts(ly, bins_y);
    std::vector<std::vector<std::size_t>> members(bins_p * bins_y);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto bp = static_cast<std::size_t>(
            std::upper_bound(cp.begin(), cp.end(), recs[i].log_p) - cp.begin());
        const auto by = static_cast<std::size_t>(
            std::upper_bound(cy.begin(), cy.end(), recs[i].log_y) - cy.begin());
        members[bp * bins_y + by].push_back(i);
    }
    const auto& sigmas = sim.truth.spec().sigma_by_region;
    CdfCheckReport rep;
    for (const auto& bin : members) {
        if (bin.size() < 2) {
            continue;
        }
        std::vector<double> qs;
        for (std::size_t i : bin) {
            qs.push_back(recs[i].log_q);
        }
        std::sort(qs.begin(), qs.end());
        const double nb = static_cast<double>(bin.size());
        for (int j = 1; j <= 9; ++j) {
            const double z = quantile_sorted(qs, j / 10.0);
            const double emp =
                static_cast<double>(std::upper_bound(qs.begin(), qs.end(), z) - qs.begin()) / nb;
            double pred = 0.0;
            for (std::size_t i : bin) {
                const auto& r = recs[i];
                const QuadratureRule rule = make_rule(sigmas.at(r.region), n_nodes);
                pred += expect_eps(
                    rule, [&](double e) { return sim.truth.g_inv(r.log_p + e, r.log_y, z); });
            }
            pred /= nb;
            const double se = std::sqrt(pred * (1.0 - pred) / nb);
            ++rep.cells;
            if (std::abs(emp - pred) <= band * se) {
                ++rep.within;
            }
        }
    }
    return rep;
}

}  // namespace bqd
