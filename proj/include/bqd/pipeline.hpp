#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bqd/basis.hpp"
#include "bqd/berkson.hpp"
#include "bqd/dataio.hpp"
#include "bqd/estimator.hpp"
#include "bqd/exogtest.hpp"
#include "bqd/synth.hpp"
#include "bqd/welfare.hpp"

namespace bqd {

struct SimulateSection {
    DgpSpec dgp;  ///< its seed is replaced by one derived from the master seed
    std::string data_file = "data.csv";
    std::string truth_file = "truth.json";
};

struct DataSection {
    /// Empty means the simulated file in the output directory.
    std::string path;
    ColumnSchema schema;
    double trim_fraction = 0.0;
};

struct BasisSection {
    int deg_p = 3;
    int deg_y = 3;
    int deg_q = 7;
    /// The price range of the box is widened by this many (largest) Berkson
    /// standard deviations on each side.
    double price_extension_sd = 4.0;
};

struct EstimateSection {
    std::vector<bool> with_berkson = {true, false};
    std::vector<ShapeRegime> shapes = {ShapeRegime::unconstrained, ShapeRegime::slutsky};
    /// Multipliers of the Berkson sigma; values other than 1 add suffixed
    /// model files.
    std::vector<double> factors = {1.0};
    ConstraintGridSpec grid;
    FitOptions options;
    bool allow_nonconverged = false;
};

struct ReportSection {
    std::vector<double> taus = {0.25, 0.5, 0.75};
    std::vector<double> incomes = {40000.0, 60000.0, 80000.0};
    std::size_t price_points = 33;
    /// Price levels for the welfare path; empty uses the 5th and 95th data
    /// percentiles.
    std::optional<PricePath> welfare_path;
    int ode_steps = kDefaultOdeSteps;
};

struct TestSection {
    ExogTestConfig config;
    std::vector<double> factors = {0.8, 1.0, 1.2};
};

struct BaselineSection {
    std::vector<double> taus = {0.25, 0.5, 0.75};
    int restarts = 5;
};

struct RunConfig {
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 0;
    std::optional<SimulateSection> simulate;
    DataSection data;
    BasisSection basis;
    /// Empty falls back to the simulated DGP's sigma map.
    std::optional<BerksonSpec> berkson;
    EstimateSection estimate;
    ReportSection report;
    TestSection test;
    BaselineSection baseline;
};

/// Parses a configuration object. Unknown keys anywhere are rejected with
/// ValidationError.
[[nodiscard]] RunConfig parse_run_config(const nlohmann::json& j);
[[nodiscard]] RunConfig load_run_config(const std::filesystem::path& path);
/// Raw configuration object; ValidationError if unreadable or malformed.
[[nodiscard]] nlohmann::json load_config_json(const std::filesystem::path& path);

/// Label of one fitted cell, e.g. "berkson-with_slutsky" or
/// "berkson-with_unconstrained_factor-0.8".
[[nodiscard]] std::string model_label(bool with_berkson, ShapeRegime shape, double factor);
[[nodiscard]] std::filesystem::path model_path(const RunConfig& config, const std::string& label);

/// Effective data file path.
[[nodiscard]] std::filesystem::path data_path(const RunConfig& config);

/// Loads and trims the dataset, checking region tags against the Berkson map.
[[nodiscard]] Dataset load_pipeline_data(const RunConfig& config);

/// Berkson spec used for estimation (configured or simulated).
[[nodiscard]] BerksonSpec pipeline_berkson(const RunConfig& config);

/// Shared domain box for every model fitted on `data`.
[[nodiscard]] DomainBox pipeline_box(const RunConfig& config, const Dataset& data,
                                     double max_sigma);

void cmd_simulate(const RunConfig& config);
void cmd_estimate(const RunConfig& config);
void cmd_report(const RunConfig& config);
void cmd_test(const RunConfig& config);
void cmd_baseline(const RunConfig& config);
/// simulate (when configured), estimate, report, test and baseline.
void cmd_all(const RunConfig& config);

/// Checks that the files a command reads exist before any work starts.
void validate_inputs(const RunConfig& config, const std::string& command);

/// Dispatches by name; throws ValidationError for an unknown command.
void run_command(const std::string& command, const RunConfig& config);

}  // namespace bqd
