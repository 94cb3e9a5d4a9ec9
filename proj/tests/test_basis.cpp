#include <doctest.h>

#include <cmath>
#include <set>

#include "bqd/basis.hpp"
#include "bqd/common.hpp"
#include "support.hpp"

using namespace bqd;
using testing::basis_with;
using testing::unit_box;

namespace {

// T_n(t) = cos(n acos t) on [-1, 1]; an oracle independent of the recurrence.
double cheb_trig(int n, double t) {
    return std::cos(n * std::acos(t));
}

DomainBox skewed_box() {
    DomainBox box;
    box.p_lo = -0.2;
    box.p_hi = 0.7;
    box.y_lo = 10.0;
    box.y_hi = 11.5;
    box.q_lo = 5.0;
    box.q_hi = 9.0;
    return box;
}

}  // namespace

TEST_CASE("affine_map") {
    CHECK(affine_map(2.0, 2.0, 6.0) == -1.0);
    CHECK(affine_map(6.0, 2.0, 6.0) == 1.0);
    CHECK(affine_map(4.0, 2.0, 6.0) == 0.0);
    CHECK(affine_map(2.0 - 2.0, 2.0, 6.0) == -2.0);
    CHECK_THROWS_AS((void)affine_map(1.0, 3.0, 3.0), ValidationError);
    CHECK_THROWS_AS((void)affine_map(1.0, 4.0, 3.0), ValidationError);
}

TEST_CASE("Chebyshev values") {
    for (double t : {-3.0, -1.0, 0.2, 1.7}) {
        CHECK(cheb_eval(0, t) == 1.0);
    }
    CHECK(cheb_eval(1, 0.7) == 0.7);
    CHECK(cheb_eval(3, 0.5) == doctest::Approx(-1.0).epsilon(1e-15));
    for (int n = 0; n <= 9; ++n) {
        for (double t = -1.0; t <= 1.0; t += 0.05) {
            CHECK(cheb_eval(n, t) == doctest::Approx(cheb_trig(n, t)).epsilon(1e-12));
            CHECK(std::abs(cheb_eval(n, t)) <= 1.0 + 1e-14);
        }
    }
    // Outside [-1, 1] the recurrence is the polynomial 4t^3 - 3t.
    CHECK(cheb_eval(3, 1.5) == doctest::Approx(4 * 3.375 - 4.5).epsilon(1e-14));
    CHECK(cheb_eval(3, -2.0) == doctest::Approx(-32.0 + 6.0).epsilon(1e-14));
}

TEST_CASE("Chebyshev derivatives match n U_{n-1}") {
    std::vector<double> d(8);
    for (double t : {-0.9, -0.3, 0.0, 0.45, 0.99}) {
        cheb_derivs(7, t, d);
        for (int n = 1; n <= 7; ++n) {
            // U_{n-1}(cos a) = sin(n a) / sin(a)
            const double a = std::acos(t);
            CHECK(d[static_cast<std::size_t>(n)] ==
                  doctest::Approx(n * std::sin(n * a) / std::sin(a)).epsilon(1e-11));
        }
        CHECK(d[0] == 0.0);
    }
}

TEST_CASE("basis_eval follows the documented index order") {
    SUBCASE("constant basis") {
        const auto v = basis_eval(basis_with(0, 0, 0, unit_box()), 0.3, 0.4, 0.5);
        REQUIRE(v.size() == 1);
        CHECK(v[0] == 1.0);
    }
    SUBCASE("linear in price at the box midpoint") {
        const auto v = basis_eval(basis_with(1, 0, 0, unit_box()), 0.5, 0.2, 0.9);
        REQUIRE(v.size() == 2);
        CHECK(v[0] == 1.0);
        CHECK(v[1] == 0.0);
    }
    SUBCASE("degrees (1,1,1) against brute-force products") {
        // Mapped coordinates (0.5, -0.5, 1) on the unit box.
        const BasisSpec b = basis_with(1, 1, 1, unit_box());
        const auto v = basis_eval(b, 0.75, 0.25, 1.0);
        REQUIRE(v.size() == 8);
        const double tp[2] = {1.0, 0.5}, ty[2] = {1.0, -0.5}, tq[2] = {1.0, 1.0};
        for (int a = 0; a < 2; ++a) {
            for (int bb = 0; bb < 2; ++bb) {
                for (int c = 0; c < 2; ++c) {
                    CHECK(v[b.index(a, bb, c)] == doctest::Approx(tp[a] * ty[bb] * tq[c]));
                }
            }
        }
    }
    SUBCASE("default spec: size, bijective index, trigonometric oracle") {
        BasisSpec b;
        b.box = skewed_box();
        CHECK(b.size() == 128);
        std::set<std::size_t> seen;
        for (int a = 0; a <= b.deg_p; ++a) {
            for (int bb = 0; bb <= b.deg_y; ++bb) {
                for (int c = 0; c <= b.deg_q; ++c) {
                    seen.insert(b.index(a, bb, c));
                }
            }
        }
        CHECK(seen.size() == 128);
        CHECK(*seen.rbegin() == 127);

        const double p = 0.1, y = 10.9, q = 6.1;
        const auto v = basis_eval(b, p, y, q);
        const double tp = affine_map(p, b.box.p_lo, b.box.p_hi);
        const double ty = affine_map(y, b.box.y_lo, b.box.y_hi);
        const double tq = affine_map(q, b.box.q_lo, b.box.q_hi);
        for (int a = 0; a <= 3; ++a) {
            for (int bb = 0; bb <= 3; ++bb) {
                for (int c = 0; c <= 7; ++c) {
                    CHECK(v[b.index(a, bb, c)] ==
                          doctest::Approx(cheb_trig(a, tp) * cheb_trig(bb, ty) * cheb_trig(c, tq))
                              .epsilon(1e-12));
                }
            }
        }
        CHECK(basis_eval(b, p, y, q) == v);
    }
}

TEST_CASE("basis_deriv") {
    SUBCASE("constant basis has zero derivative") {
        for (Axis ax : {Axis::p, Axis::y, Axis::q}) {
            CHECK(basis_deriv(basis_with(0, 0, 0, unit_box()), 0.3, 0.3, 0.3, ax)[0] == 0.0);
        }
    }
    SUBCASE("chain rule factor") {
        DomainBox box = unit_box();
        box.q_hi = 2.0;
        const auto d = basis_deriv(basis_with(0, 0, 1, box), 0.4, 0.4, 1.3, Axis::q);
        CHECK(d[0] == 0.0);
        CHECK(d[1] == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("finite differences on a 5^3 interior grid of the default spec") {
        BasisSpec b;
        b.box = skewed_box();
        const double h = 1e-6;
        double worst = 0.0;
        for (int i = 1; i <= 5; ++i) {
            for (int j = 1; j <= 5; ++j) {
                for (int k = 1; k <= 5; ++k) {
                    const double p = b.box.p_lo + (b.box.p_hi - b.box.p_lo) * i / 6.0;
                    const double y = b.box.y_lo + (b.box.y_hi - b.box.y_lo) * j / 6.0;
                    const double q = b.box.q_lo + (b.box.q_hi - b.box.q_lo) * k / 6.0;
                    for (Axis ax : {Axis::p, Axis::y, Axis::q}) {
                        const double width = ax == Axis::p   ? b.box.p_hi - b.box.p_lo
                                             : ax == Axis::y ? b.box.y_hi - b.box.y_lo
                                                             : b.box.q_hi - b.box.q_lo;
                        const double step = h * width;
                        auto shifted = [&](double s) {
                            return basis_eval(b, p + (ax == Axis::p ? s : 0.0),
                                              y + (ax == Axis::y ? s : 0.0),
                                              q + (ax == Axis::q ? s : 0.0));
                        };
                        const auto plus = shifted(step);
                        const auto minus = shifted(-step);
                        const auto d = basis_deriv(b, p, y, q, ax);
                        // Scale: derivative of a unit-bounded product over the mapped width.
                        const double scale = 2.0 / width * 49.0;
                        for (std::size_t jj = 0; jj < d.size(); ++jj) {
                            const double fd = (plus[jj] - minus[jj]) / (2.0 * step);
                            worst = std::max(worst, std::abs(fd - d[jj]) / scale);
                        }
                    }
                }
            }
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("box validation and data box") {
    DomainBox box = unit_box();
    CHECK_NOTHROW(box.validate());
    box.y_hi = box.y_lo;
    CHECK_THROWS_AS(box.validate(), ValidationError);

    Dataset d;
    d.records = {testing::record(1.0, 0.2, 10.0), testing::record(3.0, 0.4, 11.0)};
    const DomainBox db = box_from_data(d, 0.1);
    CHECK(db.p_lo == doctest::Approx(0.1));
    CHECK(db.p_hi == doctest::Approx(0.5));
    CHECK(db.q_lo == 1.0);
    CHECK(db.q_hi == 3.0);
    CHECK(db.y_lo == 10.0);
}

TEST_CASE("basis spec JSON round trip") {
    BasisSpec b;
    b.deg_p = 2;
    b.box = skewed_box();
    nlohmann::json j = b;
    CHECK(j.contains("deg_p"));
    CHECK(j.contains("box"));
    const BasisSpec back = j.get<BasisSpec>();
    CHECK(back.deg_p == 2);
    CHECK(back.deg_q == 7);
    CHECK(back.box.q_hi == 9.0);
}
