#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "bqd/common.hpp"

using namespace bqd;

TEST_CASE("interpolated quantiles follow h = (n - 1) p") {
    std::vector<double> v(100);
    std::iota(v.begin(), v.end(), 1.0);
    CHECK(quantile(v, 0.0) == 1.0);
    CHECK(quantile(v, 1.0) == 100.0);
    CHECK(quantile(v, 0.05) == doctest::Approx(5.95).epsilon(1e-12));
    CHECK(quantile(v, 0.95) == doctest::Approx(95.05).epsilon(1e-12));
    CHECK(quantile({3.0, 1.0, 2.0}, 0.5) == 2.0);
}

TEST_CASE("seed derivation separates purposes and indices") {
    std::set<std::uint64_t> seen;
    for (const char* purpose : {"synth/draws", "exogtest/mc", "estimator/bootstrap"}) {
        for (std::uint64_t i = 0; i < 50; ++i) {
            seen.insert(derive_seed(7, purpose, i));
        }
    }
    CHECK(seen.size() == 150);
    CHECK(derive_seed(7, "a", 3) == derive_seed(7, "a", 3));
    CHECK(derive_seed(7, "a", 3) != derive_seed(8, "a", 3));
}

TEST_CASE("parallel_for visits each index once whatever the worker count") {
    for (std::size_t workers : {1u, 3u, 8u}) {
        set_workers(workers);
        std::vector<int> hits(1000, 0);
        parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
        CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    }
    set_workers(0);
}

TEST_CASE("parallel_for rethrows a task exception") {
    set_workers(4);
    CHECK_THROWS_AS(parallel_for(100,
                                 [](std::size_t i) {
                                     if (i == 37) {
                                         throw NumericalError("boom");
                                     }
                                 }),
                    NumericalError);
    set_workers(0);
}

TEST_CASE("normal cdf and quantile are inverse to each other") {
    CHECK(normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(normal_cdf(1.959963984540054) == doctest::Approx(0.975).epsilon(1e-12));
    for (double p : {1e-6, 0.01, 0.3, 0.5, 0.8, 0.999}) {
        CHECK(normal_cdf(normal_quantile(p)) == doctest::Approx(p).epsilon(1e-9));
    }
}

TEST_CASE("standard normal draws have unit variance") {
    Rng rng(11);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = standard_normal(rng);
        s += z;
        s2 += z * z;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("check_keys rejects unknown keys and names them") {
    const nlohmann::json ok = {{"a", 1}, {"b", 2}};
    CHECK_NOTHROW(check_keys(ok, {"a", "b", "c"}, "section"));
    const nlohmann::json bad = {{"a", 1}, {"sigma_factr", 2}};
    try {
        check_keys(bad, {"a"}, "section");
        FAIL("expected a ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("sigma_factr") != std::string::npos);
    }
    CHECK_THROWS_AS(check_keys(nlohmann::json::array(), {"a"}, "x"), ValidationError);
}

TEST_CASE("format_double round-trips") {
    for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567}) {
        CHECK(std::stod(format_double(x)) == x);
    }
}
