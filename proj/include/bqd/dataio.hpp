#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace bqd {

/// One household. Quantity, price and income are stored in logs.
struct HouseholdRecord {
    double log_q = 0.0;
    double log_p = 0.0;
    double log_y = 0.0;
    std::optional<double> instrument;
    std::string region;
};

struct Dataset {
    std::vector<HouseholdRecord> records;
    /// Fraction trimmed from each tail of log_q (0 for an untrimmed sample).
    double trim_fraction = 0.0;

    [[nodiscard]] std::size_t size() const { return records.size(); }
    [[nodiscard]] bool empty() const { return records.empty(); }
};

/// Binds logical fields to header names of a delimited file.
struct ColumnSchema {
    std::string log_q = "log_q";
    std::string log_p = "log_p";
    std::string log_y = "log_y";
    std::string instrument = "instrument";  ///< optional column; absent in file is fine
    std::string region = "region";          ///< optional column; absent => default_region
    std::string default_region = "all";
    char delimiter = ',';
    // Columns given in levels are log-transformed on load.
    bool q_in_levels = false;
    bool p_in_levels = false;
    bool y_in_levels = false;
};

/// Reads a delimited file with one header row. Row order is preserved and the
/// result is untrimmed. Rows are reported 1-based, counting data rows only.
/// When known_regions is given, every region tag must be a member.
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema,
                                   const std::set<std::string>* known_regions = nullptr);

/// Writes log_q,log_p,log_y,instrument,region with round-trip precision.
void write_dataset(const std::filesystem::path& path, const Dataset& data, char delimiter = ',');

/// Drops records whose log_q lies strictly outside the [fraction, 1 - fraction]
/// empirical quantiles (linear interpolation) of the input sample.
[[nodiscard]] Dataset trim_quantity(const Dataset& data, double fraction);

struct FieldSummary {
    std::string field;
    double mean = 0.0;
    std::optional<double> sd;  ///< n - 1 denominator; empty when n < 2
    std::size_t n = 0;
};

/// Per-field mean, standard deviation and count for log_q, log_p, log_y and,
/// when any record carries one, the instrument.
[[nodiscard]] std::vector<FieldSummary> summary_stats(const Dataset& data);

[[nodiscard]] nlohmann::json summary_to_json(const std::vector<FieldSummary>& stats);

/// Set of region tags present in the data.
[[nodiscard]] std::set<std::string> regions_of(const Dataset& data);

}  // namespace bqd
