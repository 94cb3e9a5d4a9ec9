#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "bqd/common.hpp"
#include "bqd/pipeline.hpp"

namespace {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kValidation = 2,
    kConvergence = 3,
    kNumerical = 4,
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantile demand estimation with Berkson price errors"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::optional<std::string> output_dir;
    bool allow_nonconverged = false;

    const std::pair<const char*, const char*> commands[] = {
        {"simulate", "Draw a synthetic data set and write data.csv and truth.json"},
        {"estimate", "Fit the sieve models and write one model_<label>.json per fit"},
        {"report", "Quantile curves, elasticities and deadweight loss from fitted models"},
        {"test", "Exogeneity test of the price, written to exogeneity.json"},
        {"baseline", "Log-log least squares and quantile regressions"},
        {"all", "simulate (when configured), estimate, report, test and baseline"},
    };
    for (const auto& [name, description] : commands) {
        auto* sub = app.add_subcommand(name, description);
        sub->add_option("-c,--config", config_path, "JSON configuration file")->required();
        sub->add_option("--seed", seed, "Override the master seed");
        sub->add_option("--workers", workers, "Worker threads (default: BQD_WORKERS or 1)");
        sub->add_option("-o,--output-dir", output_dir, "Override the output directory");
        sub->add_flag("--allow-nonconverged", allow_nonconverged,
                      "Keep going when a fit does not converge");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kValidation;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (workers) {
            if (*workers == 0) {
                throw bqd::ValidationError("--workers must be positive");
            }
            bqd::set_workers(*workers);
        }
        // Overrides go into the raw object so they pass the same validation
        // as values from the file.
        nlohmann::json json = bqd::load_config_json(config_path);
        if (seed) {
            json["seed"] = *seed;
        }
        if (output_dir) {
            json["output_dir"] = *output_dir;
        }
        if (allow_nonconverged) {
            json["estimate"]["allow_nonconverged"] = true;
        }
        const bqd::RunConfig config = bqd::parse_run_config(json);
        bqd::run_command(command, config);
    } catch (const bqd::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const bqd::ConvergenceError& e) {
        std::cerr << "convergence failure: " << e.what() << '\n';
        return kConvergence;
    } catch (const bqd::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kOk;
}
