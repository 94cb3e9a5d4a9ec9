#include <doctest.h>

#include <chrono>
#include <cmath>

#include "bqd/synth.hpp"
#include "bqd/welfare.hpp"
#include "support.hpp"

using namespace bqd;
using testing::basis_with;
using testing::record;

namespace {

/// Log-linear model without income effects: log q = c + 1 + 4 tau - 0.8 log p
/// on the box, so level demand is exp(c + 1 + 4 tau) p^-0.8.
FittedModel constant_elasticity_model(double c) {
    DomainBox box;
    box.p_lo = -0.5;
    box.p_hi = 1.0;
    box.y_lo = 9.5;
    box.y_hi = 12.0;
    box.q_lo = 1.0;
    box.q_hi = 5.0;
    const BasisSpec b = basis_with(1, 0, 1, box);
    const CoefficientVector theta = project_onto_basis(
        b, [c](double p, double, double q) { return (q + 0.8 * p - c - 1.0) / 4.0; });
    return model_from_coefficients(theta, b);
}

/// Income-elastic demand, smooth enough for the order-of-convergence check.
double income_elastic(double p, double y) {
    return 0.02 * std::pow(y, 0.6) * std::pow(p, -1.2);
}

}  // namespace

TEST_CASE("a zero-length path changes nothing") {
    const PricePath path{1.5, 1.5};
    CHECK(expenditure_path(income_elastic, path, 50000.0) == 50000.0);
    const DwlResult r = deadweight_loss(income_elastic, path, 50000.0);
    CHECK(r.dwl == 0.0);
    CHECK(r.tax_revenue == 0.0);
    CHECK_FALSE(r.dwl_per_tax.has_value());
    CHECK(r.dwl_per_income == 0.0);
}

TEST_CASE("constant demand integrates exactly") {
    const LevelDemand flat = [](double, double) { return 700.0; };
    const PricePath path{1.2, 1.9};
    CHECK(expenditure_path(flat, path, 40000.0) ==
          doctest::Approx(40000.0 + 700.0 * 0.7).epsilon(1e-13));
    CHECK(std::abs(deadweight_loss(flat, path, 40000.0).dwl) < 1e-9);
}

TEST_CASE("Harberger triangle for linear demand without income effects") {
    const double a = 1500.0, b = 400.0;
    const LevelDemand linear = [=](double p, double) { return a - b * p; };
    for (const PricePath path : {PricePath{1.2, 1.9}, PricePath{2.0, 1.4}}) {
        const DwlResult r = deadweight_loss(linear, path, 60000.0);
        const double dp = path.p1 - path.p0;
        CHECK(r.dwl == doctest::Approx(b * dp * dp / 2.0).epsilon(1e-4));
        CHECK(r.tax_revenue == doctest::Approx(dp * (a - b * path.p1)).epsilon(1e-12));
        REQUIRE(r.dwl_per_tax.has_value());
        CHECK(*r.dwl_per_tax == doctest::Approx(r.dwl / r.tax_revenue));
        CHECK(r.dwl_per_income == doctest::Approx(r.dwl / 60000.0));
    }
}

TEST_CASE("fourth-order convergence and reversibility") {
    const PricePath path{1.1, 2.4};
    const double y0 = 30000.0;
    SUBCASE("Richardson ratio near 16") {
        const double ratio = richardson_ratio(income_elastic, path, y0, 8);
        CHECK(ratio > 8.0);
        CHECK(ratio < 24.0);
    }
    SUBCASE("halving 200 steps changes little") {
        const double e200 = expenditure_path(income_elastic, path, y0, 200);
        const double e100 = expenditure_path(income_elastic, path, y0, 100);
        CHECK(std::abs(e200 - e100) / e200 < 1e-8);
    }
    SUBCASE("running the path backwards returns to y0") {
        const double e1 = expenditure_path(income_elastic, path, y0);
        const double back = expenditure_path(income_elastic, PricePath{path.p1, path.p0}, e1);
        CHECK(std::abs(back - y0) / y0 < 1e-8);
    }
}

TEST_CASE("model-based welfare matches the closed form for constant elasticity") {
    const double c = 0.9;
    const double tau = 0.5;
    const FittedModel m = constant_elasticity_model(c);
    const PricePath path{std::exp(0.2), std::exp(0.36)};
    const double y0 = 57500.0;

    DgpSpec spec;
    spec.beta.intercept = c + 1.0 + 4.0 * tau - tau;
    spec.beta.price = -0.8;
    spec.beta.income = 0.0;
    const GroundTruth truth(spec);
    const auto exact = truth.analytic_deadweight_loss(tau, path, y0);
    REQUIRE(exact.has_value());

    const auto t0 = std::chrono::steady_clock::now();
    const DwlResult r = deadweight_loss(m, tau, path, y0);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(seconds < 1.0);
    CHECK(r.dwl == doctest::Approx(exact->dwl).epsilon(1e-4));
    CHECK(r.expenditure == doctest::Approx(exact->expenditure).epsilon(1e-9));
    CHECK(r.dwl >= 0.0);

    const LevelDemand h = model_demand(m, tau);
    const double expected = std::exp(c + 1.0 + 4 * tau) * std::pow(1.3, -0.8);
    CHECK(h(1.3, 50000.0) == doctest::Approx(expected).epsilon(1e-8));
}

TEST_CASE("leaving the model box is reported with the path parameter") {
    const FittedModel m = constant_elasticity_model(0.9);
    // exp(1.0) is the top of the price box.
    const PricePath path{2.0, 3.5};
    CHECK_THROWS_AS((void)model_demand(m, 0.5)(3.5, 50000.0), DomainExit);
    try {
        (void)expenditure_path(m, 0.5, path, 50000.0);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("t = ") != std::string::npos);
    }
}

TEST_CASE("invalid paths are rejected") {
    CHECK_THROWS_AS(PricePath({0.0, 1.0}).validate(), ValidationError);
    CHECK_THROWS_AS(PricePath({1.0, -2.0}).validate(), ValidationError);
    CHECK_THROWS_AS((void)expenditure_path(income_elastic, PricePath{1.0, 2.0}, -5.0),
                    ValidationError);
}

TEST_CASE("the 5th-95th percentile price change") {
    SUBCASE("constant price") {
        Dataset d;
        d.records.assign(10, record(1.0, 0.3, 11.0));
        const PricePath path = price_change_5_95(d);
        CHECK(path.p0 == path.p1);
    }
    SUBCASE("uniform log price") {
        Dataset d;
        const int n = 100001;
        for (int i = 0; i < n; ++i) {
            d.records.push_back(record(1.0, 0.2 + 0.16 * i / (n - 1.0), 11.0));
        }
        const PricePath path = price_change_5_95(d);
        CHECK(path.p0 == doctest::Approx(std::exp(0.208)).epsilon(1e-9));
        CHECK(path.p1 == doctest::Approx(std::exp(0.352)).epsilon(1e-9));
    }
    SUBCASE("same convention as the shared quantile helper") {
        Dataset d;
        std::vector<double> lp;
        Rng rng(5);
        for (int i = 0; i < 37; ++i) {
            lp.push_back(uniform01(rng));
            d.records.push_back(record(1.0, lp.back(), 11.0));
        }
        const PricePath path = price_change_5_95(d);
        CHECK(path.p0 == std::exp(quantile(lp, 0.05)));
        CHECK(path.p1 == std::exp(quantile(lp, 0.95)));
    }
}

TEST_CASE("DWL table layout") {
    DwlResult a;
    a.dwl = 10.0;
    a.dwl_per_tax = 0.1;
    a.dwl_per_income = 2e-4;
    DwlResult z;
    const std::vector<DwlCell> cells = {{0.5, 42500.0, "berkson-with_unconstrained", a},
                                        {0.5, 42500.0, "berkson-without_unconstrained", z}};
    const std::string csv = dwl_table_csv(cells);
    CHECK(csv.rfind("tau,income,measure,berkson-with_unconstrained,berkson-without_unconstrained\n",
                    0) == 0);
    CHECK(csv.find("0.5,42500,dwl,10,0\n") != std::string::npos);
    CHECK(csv.find("dwl_per_tax,0.10000000000000001,NA") != std::string::npos);
    CHECK(csv.find("dwl_per_income_x1e4,2") != std::string::npos);
}
