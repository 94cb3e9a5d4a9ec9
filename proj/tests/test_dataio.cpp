#include <doctest.h>

#include <cmath>

#include "bqd/common.hpp"
#include "bqd/dataio.hpp"
#include "support.hpp"

using namespace bqd;
using testing::record;
using testing::TempDir;
using testing::write_text;

namespace {

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const ValidationError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("loading a three-row file gives three records in order") {
    TempDir dir;
    write_text(dir / "d.csv",
               "log_q,log_p,log_y,region\n"
               "7.1,0.25,11.0,CA\n"
               "6.9,0.30,10.8,TX\n"
               "7.4,0.28,11.2,CA\n");
    const Dataset d = load_dataset(dir / "d.csv", ColumnSchema{});
    REQUIRE(d.size() == 3);
    CHECK(d.records[1].log_q == 6.9);
    CHECK(d.records[1].region == "TX");
    CHECK(d.records[2].log_y == 11.2);
    CHECK_FALSE(d.records[0].instrument.has_value());
    CHECK(d.trim_fraction == 0.0);
}

TEST_CASE("a non-numeric value is reported with its row") {
    TempDir dir;
    write_text(dir / "d.csv",
               "log_q,log_p,log_y\n"
               "7.1,0.25,11.0\n"
               "6.9,abc,10.8\n");
    const std::string msg = error_of([&] { (void)load_dataset(dir / "d.csv", ColumnSchema{}); });
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("log_p") != std::string::npos);
}

TEST_CASE("unknown region tags are listed") {
    TempDir dir;
    write_text(dir / "d.csv",
               "log_q,log_p,log_y,region\n"
               "7.1,0.25,11.0,CA\n"
               "6.9,0.30,10.8,XX\n");
    const std::set<std::string> known = {"CA", "TX"};
    const std::string msg =
        error_of([&] { (void)load_dataset(dir / "d.csv", ColumnSchema{}, &known); });
    CHECK(msg.find("XX") != std::string::npos);
}

TEST_CASE("missing file and missing column are validation errors") {
    TempDir dir;
    CHECK_THROWS_AS((void)load_dataset(dir / "none.csv", ColumnSchema{}), ValidationError);
    write_text(dir / "d.csv", "log_q,log_p\n1,2\n");
    const std::string msg = error_of([&] { (void)load_dataset(dir / "d.csv", ColumnSchema{}); });
    CHECK(msg.find("log_y") != std::string::npos);
}

TEST_CASE("schema maps custom headers, delimiters and levels") {
    TempDir dir;
    write_text(dir / "d.tsv",
               "gallons\tprice\tincome\tdist\n"
               "1000\t1.5\t50000\t3.5\n");
    ColumnSchema s;
    s.log_q = "gallons";
    s.log_p = "price";
    s.log_y = "income";
    s.instrument = "dist";
    s.delimiter = '\t';
    s.q_in_levels = s.p_in_levels = s.y_in_levels = true;
    const Dataset d = load_dataset(dir / "d.tsv", s);
    REQUIRE(d.size() == 1);
    CHECK(d.records[0].log_q == doctest::Approx(std::log(1000.0)));
    CHECK(d.records[0].log_p == doctest::Approx(std::log(1.5)));
    CHECK(d.records[0].log_y == doctest::Approx(std::log(50000.0)));
    REQUIRE(d.records[0].instrument.has_value());
    CHECK(*d.records[0].instrument == 3.5);
    CHECK(d.records[0].region == "all");
}

TEST_CASE("trimming") {
    Dataset d;
    for (int i = 1; i <= 100; ++i) {
        d.records.push_back(record(i, 0.0, 0.0));
    }

    SUBCASE("fraction 0 is the identity") {
        const Dataset t = trim_quantity(d, 0.0);
        REQUIRE(t.size() == d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            CHECK(t.records[i].log_q == d.records[i].log_q);
        }
    }
    SUBCASE("one percent each side of 1..100 keeps 2..99") {
        // Interpolated 1% and 99% quantiles are 1.99 and 99.01.
        const Dataset t = trim_quantity(d, 0.01);
        REQUIRE(t.size() == 98);
        CHECK(t.records.front().log_q == 2.0);
        CHECK(t.records.back().log_q == 99.0);
        CHECK(t.trim_fraction == 0.01);
    }
    SUBCASE("fractions of one half or more are rejected") {
        CHECK_THROWS_AS((void)trim_quantity(d, 0.6), ValidationError);
        CHECK_THROWS_AS((void)trim_quantity(d, 0.5), ValidationError);
        CHECK_THROWS_AS((void)trim_quantity(d, -0.1), ValidationError);
    }
}

TEST_CASE("summary statistics") {
    SUBCASE("two records") {
        Dataset d;
        d.records = {record(0.0, 1.0, 5.0), record(2.0, 1.0, 7.0)};
        const auto s = summary_stats(d);
        REQUIRE(s.size() == 3);
        CHECK(s[0].field == "log_q");
        CHECK(s[0].mean == 1.0);
        REQUIRE(s[0].sd.has_value());
        CHECK(*s[0].sd == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
        CHECK(*s[1].sd == 0.0);
        CHECK(s[0].n == 2);
    }
    SUBCASE("a single record has no standard deviation") {
        Dataset d;
        d.records = {record(3.0, 1.0, 5.0)};
        const auto s = summary_stats(d);
        CHECK(s[0].mean == 3.0);
        CHECK_FALSE(s[0].sd.has_value());
        const nlohmann::json j = summary_to_json(s);
        CHECK(j.dump().find("null") != std::string::npos);
    }
    SUBCASE("instrument appears when present") {
        Dataset d;
        d.records = {record(0.0, 1.0, 5.0), record(2.0, 1.0, 7.0)};
        d.records[0].instrument = 1.0;
        d.records[1].instrument = 3.0;
        const auto s = summary_stats(d);
        REQUIRE(s.size() == 4);
        CHECK(s[3].field == "instrument");
        CHECK(s[3].mean == 2.0);
    }
}

TEST_CASE("write then load round-trips bit for bit") {
    TempDir dir;
    Dataset d;
    d.records = {record(7.123456789012345, 0.1 / 3.0, 11.05, "CA"),
                 record(-1e-17, 0.333333333333333, 9.5, "TX")};
    d.records[1].instrument = 2.0 / 7.0;
    write_dataset(dir / "out.csv", d);
    const Dataset back = load_dataset(dir / "out.csv", ColumnSchema{});
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.records[i].log_q == d.records[i].log_q);
        CHECK(back.records[i].log_p == d.records[i].log_p);
        CHECK(back.records[i].log_y == d.records[i].log_y);
        CHECK(back.records[i].region == d.records[i].region);
        CHECK(back.records[i].instrument == d.records[i].instrument);
    }
    write_dataset(dir / "again.csv", back);
    CHECK(testing::read_text(dir / "out.csv") == testing::read_text(dir / "again.csv"));
    CHECK(regions_of(back) == std::set<std::string>{"CA", "TX"});
}
