#include <doctest.h>

#include <cmath>
#include <numeric>

#include "bqd/demand.hpp"
#include "bqd/estimator.hpp"
#include "bqd/synth.hpp"
#include "support.hpp"

using namespace bqd;
using testing::affine_in_q;
using testing::basis_with;
using testing::record;
using testing::unit_box;

namespace {

BerksonSpec sigma_spec(double sigma) {
    BerksonSpec s;
    s.sigma_by_region = {{"all", sigma}};
    return s;
}

DomainBox wide_box() {
    DomainBox box;
    box.p_lo = -0.3;
    box.p_hi = 0.9;
    box.y_lo = 10.2;
    box.y_hi = 11.5;
    box.q_lo = -0.6;
    box.q_hi = 1.2;
    return box;
}

/// Small linear-DGP sample with a matching default basis.
struct SmallProblem {
    Simulation sim;
    BasisSpec basis;
    BerksonSpec berkson;
};

SmallProblem small_problem(double sigma, std::size_t n, std::uint64_t seed) {
    DgpSpec spec;
    spec.n = n;
    spec.seed = seed;
    spec.sigma_by_region = {{"all", sigma}};
    SmallProblem out{simulate(spec), {}, {}};
    out.basis.box = box_from_data(out.sim.data, 4.0 * sigma);
    out.berkson = berkson_of(spec);
    return out;
}

/// Strictly feasible, non-trivial coefficient vectors for gradient checks.
std::vector<CoefficientVector> random_feasible(const BasisSpec& basis,
                                               const LikelihoodDesign& design, int count,
                                               std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CoefficientVector> out;
    while (static_cast<int>(out.size()) < count) {
        const double margin = 0.02 + 0.2 * uniform01(rng);
        const double tilt = (uniform01(rng) - 0.5) * (1.0 - 2.0 * margin);
        CoefficientVector theta = initial_coefficients(basis, margin, tilt);
        for (Eigen::Index j = 0; j < theta.size(); ++j) {
            theta[j] += 1e-3 * standard_normal(rng);
        }
        if (design.densities(theta).minCoeff() > 1e-3) {
            out.push_back(theta);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("g_inv is the coefficient-weighted basis sum") {
    const BasisSpec b = basis_with(3, 3, 7, wide_box());
    CoefficientVector e1 = CoefficientVector::Zero(128);
    e1[0] = 1.0;
    CHECK(g_inv(e1, b, 0.1, 10.9, 0.3) == 1.0);
    CHECK(g_inv(e1, b, -2.0, 12.0, 5.0) == 1.0);

    const CoefficientVector aff = affine_in_q(b);
    const double q25 = b.box.q_lo + 0.25 * (b.box.q_hi - b.box.q_lo);
    CHECK(g_inv(aff, b, 0.3, 10.7, q25) == doctest::Approx(0.25).epsilon(1e-14));

    Rng rng(3);
    CoefficientVector theta(128);
    for (Eigen::Index j = 0; j < 128; ++j) {
        theta[j] = standard_normal(rng);
    }
    const auto psi = basis_eval(b, 0.2, 11.0, 0.5);
    const double dot = std::inner_product(psi.begin(), psi.end(), theta.data(), 0.0);
    CHECK(g_inv(theta, b, 0.2, 11.0, 0.5) == doctest::Approx(dot).epsilon(1e-13));

    CHECK_THROWS_AS(validate_coefficients(CoefficientVector::Zero(5), b), ValidationError);
    theta[4] = std::nan("");
    CHECK_THROWS_AS(validate_coefficients(theta, b), ValidationError);
}

TEST_CASE("basis projection reproduces functions in the span") {
    const BasisSpec b = basis_with(2, 1, 3, wide_box());
    auto f = [](double p, double y, double q) { return 0.3 - p * p * q + 0.1 * y * q * q * q; };
    const CoefficientVector theta = project_onto_basis(b, f);
    for (double p : {-0.2, 0.4}) {
        for (double q : {-0.5, 0.0, 1.1}) {
            CHECK(g_inv(theta, b, p, 10.5, q) == doctest::Approx(f(p, 10.5, q)).epsilon(1e-10));
        }
    }
}

TEST_CASE("log-likelihood closed forms") {
    SUBCASE("uniform density on the box") {
        const BasisSpec b = basis_with(3, 3, 7, wide_box());
        Dataset d;
        d.records = {record(0.4, 0.2, 10.8)};
        const double ll = log_likelihood(affine_in_q(b), d, b, sigma_spec(0.0));
        CHECK(ll == doctest::Approx(-std::log(1.8)).epsilon(1e-13));
    }
    SUBCASE("unit-length box gives density one") {
        const BasisSpec b = basis_with(1, 1, 3, unit_box());
        Dataset d;
        d.records = {record(0.1, 0.2, 0.3), record(0.9, 0.7, 0.5)};
        CHECK(std::abs(log_likelihood(affine_in_q(b), d, b, sigma_spec(0.0))) < 1e-14);
    }
    SUBCASE("price errors do not matter when only quantity terms are used") {
        const BasisSpec b = basis_with(3, 3, 7, wide_box());
        CoefficientVector theta = CoefficientVector::Zero(128);
        theta[static_cast<Eigen::Index>(b.index(0, 0, 0))] = 0.5;
        theta[static_cast<Eigen::Index>(b.index(0, 0, 1))] = 0.45;
        theta[static_cast<Eigen::Index>(b.index(0, 0, 3))] = 0.04;
        Dataset d;
        d.records = {record(0.4, 0.2, 10.8), record(-0.1, 0.5, 11.1), record(1.0, 0.0, 10.3)};
        const double a = log_likelihood(theta, d, b, sigma_spec(0.0));
        const double c = log_likelihood(theta, d, b, sigma_spec(0.1));
        CHECK(a == doctest::Approx(c).epsilon(1e-13));
    }
    SUBCASE("non-positive density names the household") {
        const BasisSpec b = basis_with(0, 0, 1, unit_box());
        CoefficientVector theta(2);
        theta << 0.5, -0.5;
        Dataset d;
        d.records = {record(0.5, 0.5, 0.5), record(0.2, 0.5, 0.5)};
        try {
            (void)log_likelihood(theta, d, b, sigma_spec(0.0));
            FAIL("expected NumericalError");
        } catch (const NumericalError& e) {
            CHECK(std::string(e.what()).find("household 0") != std::string::npos);
        }
    }
}

TEST_CASE("gradient of a one-parameter density is n / theta") {
    LikelihoodDesign design;
    design.price_factor = Eigen::MatrixXd::Ones(7, 1);
    design.income_quantity = Eigen::MatrixXd::Constant(7, 1, 0.37);
    CoefficientVector theta(1);
    theta << 2.5;
    CHECK(log_likelihood_grad(theta, design)[0] == doctest::Approx(7.0 / 2.5).epsilon(1e-14));
    CHECK(log_likelihood(theta, design) == doctest::Approx(7.0 * std::log(2.5 * 0.37)));
}

TEST_CASE("factored design equals the dense expected-derivative matrix") {
    const SmallProblem prob = small_problem(0.05, 40, 9);
    const LikelihoodDesign design =
        build_likelihood_design(prob.sim.data, prob.basis, prob.berkson);
    const Eigen::MatrixXd a = design.full();
    const QuadratureRule rule = make_rule(prob.berkson, "all");
    for (std::size_t i : {0u, 17u, 39u}) {
        const auto& r = prob.sim.data.records[i];
        for (std::size_t j : {0u, 5u, 77u, 127u}) {
            const double direct = expect_eps(rule, [&](double e) {
                return basis_deriv(prob.basis, r.log_p + e, r.log_y, r.log_q, Axis::q)[j];
            });
            CHECK(a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) ==
                  doctest::Approx(direct).epsilon(1e-12));
        }
    }
}

TEST_CASE("analytic gradient matches central differences") {
    for (double sigma : {0.0, 0.05}) {
        CAPTURE(sigma);
        const SmallProblem prob = small_problem(sigma, 300, 21);
        const LikelihoodDesign design =
            build_likelihood_design(prob.sim.data, prob.basis, prob.berkson);
        const Eigen::MatrixXd a = design.full();
        double worst = 0.0;
        for (const CoefficientVector& theta : random_feasible(prob.basis, design, 10, 5)) {
            const double dmin = design.densities(theta).minCoeff();
            const Eigen::VectorXd g = log_likelihood_grad(theta, design);
            const Eigen::VectorXd g_data =
                log_likelihood_grad(theta, prob.sim.data, prob.basis, prob.berkson);
            CHECK((g - g_data).norm() <= 1e-10 * g.norm());
            for (Eigen::Index j = 0; j < theta.size(); ++j) {
                // Five-point stencil. The step moves no density by more than
                // 0.3% of the smallest one; the truncation error scales with
                // the fourth power of that fraction.
                const double amax = a.col(j).cwiseAbs().maxCoeff();
                const double h = amax > 0.0 ? 3e-3 * dmin / amax : 1e-4;
                auto at = [&](double step) {
                    CoefficientVector t = theta;
                    t[j] += step;
                    return log_likelihood(t, design);
                };
                const double fd = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12.0 * h);
                worst = std::max(worst, std::abs(fd - g[j]) / std::max(1.0, std::abs(g[j])));
            }
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("the log-likelihood is concave along feasible segments") {
    const SmallProblem prob = small_problem(0.05, 300, 8);
    const LikelihoodDesign design =
        build_likelihood_design(prob.sim.data, prob.basis, prob.berkson);
    const auto pts = random_feasible(prob.basis, design, 6, 77);
    for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
        for (double lambda : {0.1, 0.5, 0.8}) {
            const CoefficientVector mid = lambda * pts[k] + (1.0 - lambda) * pts[k + 1];
            CHECK(log_likelihood(mid, design) >=
                  lambda * log_likelihood(pts[k], design) +
                      (1.0 - lambda) * log_likelihood(pts[k + 1], design) - 1e-10);
        }
    }
}

TEST_CASE("constraint assembly") {
    const SmallProblem prob = small_problem(0.05, 200, 4);
    SUBCASE("unconstrained regime has no Slutsky rows") {
        const ConstraintSet cs =
            build_constraints(prob.sim.data, prob.basis, prob.berkson, ShapeRegime::unconstrained);
        CHECK(cs.count(RowKind::slutsky) == 0);
        CHECK(cs.count(RowKind::monotone_data) == prob.sim.data.size());
        CHECK(cs.count(RowKind::monotone_grid) == 9 * 5 * 17);
        CHECK(cs.count(RowKind::bound_lower) == 9 * 5 * 17);
        CHECK(cs.count(RowKind::bound_upper) == 9 * 5 * 17);
    }
    SUBCASE("per-node monotonicity adds one row per quadrature node") {
        ConstraintGridSpec grid;
        grid.per_node_monotonicity = true;
        const ConstraintSet cs = build_constraints(prob.sim.data, prob.basis, prob.berkson,
                                                   ShapeRegime::unconstrained, grid);
        CHECK(cs.count(RowKind::monotone_data) == prob.sim.data.size() * 21);
    }
    SUBCASE("rows are linear in theta") {
        const ConstraintSet cs =
            build_constraints(prob.sim.data, prob.basis, prob.berkson, ShapeRegime::slutsky);
        const Eigen::MatrixXd r = cs.materialize();
        const CoefficientVector theta = initial_coefficients(prob.basis, 0.05, 0.2);
        const Eigen::VectorXd direct = r * theta - cs.lower();
        CHECK((direct - cs.slacks(theta)).cwiseAbs().maxCoeff() < 1e-11);
        const LikelihoodDesign design =
            build_likelihood_design(prob.sim.data, prob.basis, prob.berkson);
        // The data rows are the likelihood densities themselves.
        const Eigen::VectorXd dens = design.densities(theta);
        for (Eigen::Index i = 0; i < dens.size(); ++i) {
            CHECK(direct[i] + cs.delta_floor == doctest::Approx(dens[i]).epsilon(1e-12));
        }
    }
    SUBCASE("the Slutsky row carries the household budget share") {
        Dataset d;
        d.records = {record(std::log(0.05) - 0.28 + 11.0, 0.28, 11.0)};
        SlutskyRegion region;
        region.q_lo_pct = 0.0;
        region.q_hi_pct = 1.0;
        ConstraintGridSpec grid;
        grid.slutsky = region;
        const BasisSpec b = basis_with(3, 3, 7, wide_box());
        const ConstraintSet cs =
            build_constraints(d, b, sigma_spec(0.0), ShapeRegime::slutsky, grid);
        REQUIRE(cs.slutsky_points.size() == 1);
        CHECK(cs.slutsky_shares[0] == doctest::Approx(0.05).epsilon(1e-12));
        const auto r = d.records[0];
        const auto dp = basis_deriv(b, r.log_p, r.log_y, r.log_q, Axis::p);
        const auto dy = basis_deriv(b, r.log_p, r.log_y, r.log_q, Axis::y);
        const Eigen::MatrixXd all = cs.materialize();
        const auto kinds = cs.kinds();
        const auto row = static_cast<Eigen::Index>(
            std::find(kinds.begin(), kinds.end(), RowKind::slutsky) - kinds.begin());
        for (std::size_t j = 0; j < b.size(); ++j) {
            CHECK(all(row, static_cast<Eigen::Index>(j)) ==
                  doctest::Approx(dp[j] + 0.05 * dy[j]).epsilon(1e-12));
        }
    }
    SUBCASE("Slutsky selection follows the region box") {
        Dataset d;
        for (int i = 0; i < 100; ++i) {
            d.records.push_back(record(i * 0.01, 0.15 + i * 0.003, std::log(15000.0 + i * 1000.0)));
        }
        for (std::size_t i : select_slutsky_households(d, SlutskyRegion{})) {
            const auto& r = d.records[i];
            CHECK(r.log_p >= 0.20);
            CHECK(r.log_p <= 0.36);
            CHECK(std::exp(r.log_y) >= 20000.0 - 1e-6);
            CHECK(std::exp(r.log_y) <= 90000.0 + 1e-6);
        }
        CHECK_FALSE(select_slutsky_households(d, SlutskyRegion{}).empty());
    }
}

TEST_CASE("fit recovers a uniform density without price errors") {
    DgpSpec spec;
    spec.family = DgpFamily::custom;
    spec.sigma_by_region = {{"all", 0.0}};
    spec.n = 2000;
    spec.seed = 202;
    DomainBox truth_box = wide_box();
    truth_box.p_lo = spec.log_p_lo;
    truth_box.p_hi = spec.log_p_hi;
    truth_box.y_lo = spec.log_y_lo;
    truth_box.y_hi = spec.log_y_hi;
    truth_box.q_lo = 6.0;
    truth_box.q_hi = 8.0;
    const BasisSpec tb = basis_with(0, 0, 1, truth_box);
    spec.custom = CustomTruth{tb, affine_in_q(tb)};
    const Simulation sim = simulate(spec);

    const BerksonSpec none = sigma_spec(0.0);
    const DomainBox data_box = box_from_data(sim.data, 0.0);

    // The uniform truth lies in the quantity-only sieve; the error here is
    // estimation noise of a degree-7 density on 2000 draws.
    const BasisSpec qonly = basis_with(0, 0, 7, data_box);
    const ConstraintSet cs = build_constraints(sim.data, qonly, none, ShapeRegime::unconstrained);
    const FittedModel m = fit(sim.data, qonly, none, cs);
    CHECK(m.converged);
    double worst = 0.0;
    for (const auto& g : cs.bound_grid) {
        worst = std::max(worst, std::abs(m.g_inv(g.p, g.y, g.q) - (g.q - 6.0) / 2.0));
    }
    CHECK(worst < 0.02);

    // With the full sieve the truth is one feasible point, so the optimum
    // can be no worse.
    BasisSpec full;
    full.box = data_box;
    const CoefficientVector truth =
        project_onto_basis(full, [](double, double, double q) { return (q - 6.0) / 2.0; });
    const ConstraintSet cs_full =
        build_constraints(sim.data, full, none, ShapeRegime::unconstrained);
    REQUIRE(cs_full.slacks(truth).minCoeff() >= 0.0);
    const FittedModel mf = fit(sim.data, full, none, cs_full);
    CHECK(mf.converged);
    CHECK(mf.loglik >= log_likelihood(truth, sim.data, full, none) - 1e-9);
}

TEST_CASE("fitted models satisfy their constraints and do not cross") {
    const SmallProblem prob = small_problem(0.05, 1000, 31);
    for (ShapeRegime regime : {ShapeRegime::unconstrained, ShapeRegime::slutsky}) {
        CAPTURE(to_string(regime));
        const ConstraintSet cs = build_constraints(prob.sim.data, prob.basis, prob.berkson, regime);
        const FittedModel m = fit(prob.sim.data, prob.basis, prob.berkson, cs);
        REQUIRE(m.converged);
        CHECK(m.kkt_stationarity < 1e-6);
        CHECK(m.constraints.max_violation <= 1e-8);
        CHECK(m.constraints.min_monotone_slack >= -1e-8);
        CHECK(m.constraints.min_bound_slack >= -1e-8);
        if (regime == ShapeRegime::slutsky) {
            REQUIRE(m.constraints.min_slutsky_slack.has_value());
            CHECK(*m.constraints.min_slutsky_slack >= -1e-8);
        }
        const Eigen::VectorXd s = cs.slacks(m.theta);
        CHECK(s.minCoeff() >= -1e-8);
        CHECK(m.loglik ==
              doctest::Approx(log_likelihood(m.theta, prob.sim.data, m.basis, m.berkson))
                  .epsilon(1e-12));

        const DomainBox& box = m.basis.box;
        for (int i = 0; i < 9; ++i) {
            for (int j = 0; j < 5; ++j) {
                const double p = box.p_lo + (box.p_hi - box.p_lo) * i / 8.0;
                const double y = box.y_lo + (box.y_hi - box.y_lo) * j / 4.0;
                double prev = -1e300;
                for (int k = 1; k <= 21; ++k) {
                    const double q = invert_g(m, p, y, k / 22.0).log_q;
                    CHECK(q >= prev);
                    prev = q;
                }
            }
        }
    }
}

TEST_CASE("different feasible starts reach the same optimum") {
    const SmallProblem prob = small_problem(0.05, 600, 12);
    const ConstraintSet cs =
        build_constraints(prob.sim.data, prob.basis, prob.berkson, ShapeRegime::unconstrained);
    FitOptions a;
    FitOptions b;
    b.init_margin = 0.05;
    b.init_tilt = -0.3;
    const FittedModel ma = fit(prob.sim.data, prob.basis, prob.berkson, cs, a);
    const FittedModel mb = fit(prob.sim.data, prob.basis, prob.berkson, cs, b);
    REQUIRE(ma.converged);
    REQUIRE(mb.converged);
    CHECK(std::abs(ma.loglik - mb.loglik) < 1e-6);
}

TEST_CASE("a vanishing sigma matches the error-free fit") {
    const SmallProblem prob = small_problem(0.0, 600, 13);
    const BerksonSpec tiny = sigma_spec(1e-8);
    const BerksonSpec zero = sigma_spec(0.0);
    const FittedModel m0 =
        fit(prob.sim.data, prob.basis, zero,
            build_constraints(prob.sim.data, prob.basis, zero, ShapeRegime::unconstrained));
    const FittedModel m1 =
        fit(prob.sim.data, prob.basis, tiny,
            build_constraints(prob.sim.data, prob.basis, tiny, ShapeRegime::unconstrained));
    CHECK(std::abs(m0.loglik - m1.loglik) < 1e-4);
}

TEST_CASE("an infeasible start is rejected") {
    const SmallProblem prob = small_problem(0.05, 100, 14);
    const ConstraintSet cs =
        build_constraints(prob.sim.data, prob.basis, prob.berkson, ShapeRegime::unconstrained);
    FitOptions o;
    o.initial_theta = -affine_in_q(prob.basis);
    CHECK_THROWS_AS((void)fit(prob.sim.data, prob.basis, prob.berkson, cs, o), ValidationError);
}

TEST_CASE("bootstrap") {
    SUBCASE("replicate indices are reproducible") {
        CHECK(bootstrap_indices(50, 99, 3) == bootstrap_indices(50, 99, 3));
        CHECK(bootstrap_indices(50, 99, 3) != bootstrap_indices(50, 99, 4));
        for (std::size_t i : bootstrap_indices(50, 99, 0)) {
            CHECK(i < 50);
        }
    }
    SUBCASE("replicates are reproducible for a fixed seed") {
        const SmallProblem prob = small_problem(0.0, 300, 15);
        FitConfig cfg;
        cfg.basis = basis_with(1, 1, 3, prob.basis.box);
        cfg.berkson = sigma_spec(0.0);
        auto stat = [](const FittedModel& m, const Dataset&) {
            return std::vector<double>{m.loglik};
        };
        const auto reps = bootstrap(prob.sim.data, cfg, 3, 17, stat, false);
        const auto again = bootstrap(prob.sim.data, cfg, 3, 17, stat, false);
        REQUIRE(reps.size() == 3);
        for (std::size_t r = 0; r < reps.size(); ++r) {
            CHECK(reps[r].error.empty());
            CHECK(reps[r].indices == again[r].indices);
            CHECK(reps[r].statistics == again[r].statistics);
            CHECK_FALSE(reps[r].model.has_value());
        }
    }
    SUBCASE("identical records give identical replicate fits") {
        Dataset same;
        same.records.assign(50, record(0.5, 0.25, 10.8));
        FitConfig cfg;
        cfg.basis = basis_with(1, 1, 3, wide_box());
        cfg.berkson = sigma_spec(0.0);
        cfg.options.max_newton = 80;
        const auto reps = bootstrap(same, cfg, 4, 3);
        REQUIRE(reps.size() == 4);
        for (const auto& rep : reps) {
            REQUIRE(rep.model.has_value());
            CHECK(rep.model->theta == reps[0].model->theta);
            CHECK(rep.model->loglik == reps[0].model->loglik);
        }
    }
    SUBCASE("percentile interval uses interpolated quantiles") {
        std::vector<double> stats(100);
        std::iota(stats.begin(), stats.end(), 1.0);
        const PercentileInterval ci = percentile_interval(stats, 0.90);
        CHECK(ci.lo == doctest::Approx(5.95).epsilon(1e-12));
        CHECK(ci.hi == doctest::Approx(95.05).epsilon(1e-12));
    }
}

TEST_CASE("fitted model JSON round trip") {
    const SmallProblem prob = small_problem(0.05, 200, 16);
    FitConfig cfg;
    cfg.basis = prob.basis;
    cfg.berkson = prob.berkson;
    const FittedModel m = fit(prob.sim.data, cfg);
    const nlohmann::json j = m;
    for (const char* key : {"theta", "basis", "berkson", "constraints", "loglik", "converged"}) {
        CHECK(j.contains(key));
    }
    const FittedModel back = j.get<FittedModel>();
    CHECK(back.theta == m.theta);
    CHECK(back.loglik == m.loglik);
    CHECK(back.converged == m.converged);
    CHECK(back.basis.box.q_hi == m.basis.box.q_hi);
}
