#include <doctest.h>

#include <cmath>

#include "bqd/demand.hpp"
#include "bqd/synth.hpp"
#include "support.hpp"

using namespace bqd;
using testing::affine_in_q;
using testing::basis_with;
using testing::record;

namespace {

DomainBox demand_box() {
    DomainBox box;
    box.p_lo = -0.2;
    box.p_hi = 0.8;
    box.y_lo = 10.3;
    box.y_hi = 11.4;
    box.q_lo = 2.0;
    box.q_hi = 6.0;
    return box;
}

/// G^-1 = (q + 0.8 p - 0.3 y - c) / 4, linear on the box, so log demand at
/// quantile tau is c + 4 tau - 0.8 p + 0.3 y.
FittedModel linear_model(double c) {
    const BasisSpec b = basis_with(1, 1, 1, demand_box());
    const CoefficientVector theta = project_onto_basis(
        b, [c](double p, double y, double q) { return (q + 0.8 * p - 0.3 * y - c) / 4.0; });
    return model_from_coefficients(theta, b);
}

/// Nonlinear but strictly increasing in q: a cubic in q with p and y
/// interactions.
FittedModel curved_model() {
    const BasisSpec b = basis_with(2, 2, 3, demand_box());
    const CoefficientVector theta = project_onto_basis(b, [](double p, double y, double q) {
        const double u = (q - 2.0) / 4.0;
        return u + 0.1 * u * (1 - u) * (p - 0.3) + 0.05 * u * (1 - u) * (y - 10.8) +
               0.05 * u * (1 - u) * (u - 0.5) * p * p;
    });
    return model_from_coefficients(theta, b);
}

}  // namespace

TEST_CASE("inversion of the affine model") {
    const BasisSpec b = basis_with(3, 3, 7, demand_box());
    const FittedModel m = model_from_coefficients(affine_in_q(b), b);
    for (double tau : {0.01, 0.25, 0.5, 0.9}) {
        const Inversion inv = invert_g(m, 0.3, 10.9, tau);
        CHECK_FALSE(inv.out_of_range);
        CHECK(std::abs(inv.log_q - (2.0 + 4.0 * tau)) < 1e-9);
    }
    CHECK_THROWS_AS((void)invert_g(m, 0.3, 10.9, 0.0), ValidationError);
    CHECK_THROWS_AS((void)invert_g(m, 0.3, 10.9, 1.0), ValidationError);
}

TEST_CASE("round trip and monotonicity in tau") {
    const FittedModel m = curved_model();
    for (double p : {-0.1, 0.3, 0.7}) {
        for (double y : {10.4, 10.9, 11.3}) {
            double prev = -1e300;
            for (int k = 1; k <= 21; ++k) {
                const double tau = k / 22.0;
                const Inversion inv = invert_g(m, p, y, tau);
                CHECK(std::abs(m.g_inv(p, y, inv.log_q) - tau) < 1e-8);
                CHECK(inv.log_q >= prev);
                prev = inv.log_q;
            }
        }
    }
}

TEST_CASE("quantiles outside the attained range return the box edge with a flag") {
    // G^-1 ranges over [0.2, 0.7] on this box.
    const BasisSpec b = basis_with(0, 0, 1, demand_box());
    CoefficientVector theta(2);
    theta << 0.45, 0.25;
    const FittedModel m = model_from_coefficients(theta, b);
    const Inversion low = invert_g(m, 0.1, 11.0, 0.1);
    CHECK(low.out_of_range);
    CHECK(low.log_q == 2.0);
    const Inversion high = invert_g(m, 0.1, 11.0, 0.9);
    CHECK(high.out_of_range);
    CHECK(high.log_q == 6.0);
    CHECK_FALSE(invert_g(m, 0.1, 11.0, 0.5).out_of_range);
}

TEST_CASE("demand curves") {
    SUBCASE("a model without price dependence gives a flat curve") {
        const BasisSpec b = basis_with(3, 3, 7, demand_box());
        const FittedModel m = model_from_coefficients(affine_in_q(b), b);
        const auto curve = demand_curve(m, 0.5, 10.9, linear_grid(0.2, 0.36, 33));
        REQUIRE(curve.points.size() == 33);
        for (const auto& pt : curve.points) {
            CHECK(pt.log_q == doctest::Approx(curve.points[0].log_q).epsilon(1e-12));
        }
        CHECK(curve.points.front().log_p == 0.2);
        CHECK(curve.points.back().log_p == 0.36);
    }
    SUBCASE("linear model: slope -0.8 in log price") {
        const FittedModel m = linear_model(-1.0);
        const auto curve = demand_curve(m, 0.5, 10.9, linear_grid(0.0, 0.6, 13));
        for (std::size_t i = 1; i < curve.points.size(); ++i) {
            const double dq = curve.points[i].log_q - curve.points[i - 1].log_q;
            const double dp = curve.points[i].log_p - curve.points[i - 1].log_p;
            CHECK(dq / dp == doctest::Approx(-0.8).epsilon(1e-7));
        }
        CHECK(curve_price_slope(m, 0.5, 10.9, 0.0, 0.6) == doctest::Approx(-0.8).epsilon(1e-7));
    }
    SUBCASE("CSV layout") {
        const FittedModel m = linear_model(-1.0);
        const std::string csv = curves_csv({demand_curve(m, 0.25, 10.9, {0.1, 0.2})});
        CHECK(csv.rfind("tau,log_income,log_price,log_quantity\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    }
}

TEST_CASE("elasticities") {
    SUBCASE("linear model") {
        const Elasticities e = elasticities(linear_model(-1.0), 0.3, 10.9, 0.4);
        CHECK(e.price == doctest::Approx(-0.8).epsilon(1e-10));
        CHECK(e.income == doctest::Approx(0.3).epsilon(1e-10));
    }
    SUBCASE("no price dependence") {
        const BasisSpec b = basis_with(3, 3, 7, demand_box());
        const Elasticities e =
            elasticities(model_from_coefficients(affine_in_q(b), b), 0.3, 10.9, 0.4);
        CHECK(std::abs(e.price) < 1e-12);
        CHECK(std::abs(e.income) < 1e-12);
    }
    SUBCASE("implicit derivatives agree with differenced inversions") {
        const FittedModel m = curved_model();
        const double h = 1e-5;
        for (double tau : {0.2, 0.5, 0.8}) {
            for (double p : {0.0, 0.4}) {
                const double y = 10.8;
                const Elasticities e = elasticities(m, p, y, tau);
                const double fp =
                    (invert_g(m, p + h, y, tau).log_q - invert_g(m, p - h, y, tau).log_q) / (2 * h);
                const double fy =
                    (invert_g(m, p, y + h, tau).log_q - invert_g(m, p, y - h, tau).log_q) / (2 * h);
                CHECK(std::abs(e.price - fp) < 1e-4);
                CHECK(std::abs(e.income - fy) < 1e-4);
            }
        }
    }
    SUBCASE("a flat quantity direction is reported") {
        const BasisSpec b = basis_with(0, 0, 1, demand_box());
        CoefficientVector theta(2);
        theta << 0.5, 0.0;
        const FittedModel flat = model_from_coefficients(theta, b);
        CHECK_THROWS_AS((void)elasticities(flat, 0.1, 10.8, 0.5), NumericalError);
    }
}

TEST_CASE("Slutsky rows carry over to the elasticities at the enforcement points") {
    DgpSpec spec;
    spec.n = 1500;
    spec.seed = 41;
    const Simulation sim = simulate(spec);
    BasisSpec b;
    b.box = box_from_data(sim.data, 4.0 * 0.05);
    const BerksonSpec bs = berkson_of(spec);
    const ConstraintSet cs = build_constraints(sim.data, b, bs, ShapeRegime::slutsky);
    const FittedModel m = fit(sim.data, b, bs, cs);
    REQUIRE(m.converged);
    REQUIRE_FALSE(cs.slutsky_points.empty());
    for (std::size_t k = 0; k < cs.slutsky_points.size(); ++k) {
        const auto& r = sim.data.records[cs.slutsky_points[k]];
        const double tau = m.g_inv(r.log_p, r.log_y, r.log_q);
        if (!(tau > 0.0 && tau < 1.0)) {
            continue;
        }
        const Elasticities e = elasticities(m, r.log_p, r.log_y, tau);
        // d/dp + S d/dy of G^-1 >= 0 divided by -dG^-1/dq.
        const double dq = m.g_inv_deriv(r.log_p, r.log_y, r.log_q, Axis::q);
        CHECK(e.price + cs.slutsky_shares[k] * e.income <= 1e-6 + 1e-8 / dq);
    }
}

TEST_CASE("budget shares") {
    CHECK(budget_share(record(1.0, 0.5, 1.5)) == 1.0);
    const double s = budget_share(record(7.127, 0.286, 11.054));
    CHECK(s == doctest::Approx(std::exp(-3.641)).epsilon(1e-12));
    CHECK(std::abs(s - 0.0263) < 1e-4);
    Dataset d;
    d.records = {record(1.0, 0.5, 1.5), record(2.0, 0.5, 1.5), record(0.1, 0.2, 11.0)};
    std::vector<std::size_t> warned;
    const auto flagged = check_budget_shares(d, [&](std::size_t i, double s) {
        warned.push_back(i);
        CHECK(s > 1.0);
    });
    CHECK(flagged == std::vector<std::size_t>{1});
    CHECK(warned == flagged);
}
