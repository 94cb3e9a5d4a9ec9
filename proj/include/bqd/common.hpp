#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace bqd {

/// Bad input or configuration. Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An optimizer ran out of iterations or could not reach its tolerances. Exit code 3.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values, infeasible points, degenerate designs. Exit code 4.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Empirical quantile with linear interpolation between order statistics
/// (h = (n - 1) * prob). `sorted` must be ascending and nonempty.
[[nodiscard]] double quantile_sorted(std::span<const double> sorted, double prob);

/// Same as quantile_sorted but sorts a copy first.
[[nodiscard]] double quantile(std::vector<double> values, double prob);

/// Seed derivation tree: every random stream is identified by the master seed,
/// a purpose label (module + use) and an index.
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                        std::uint64_t index = 0);

/// Worker count from BQD_WORKERS, defaulting to 1.
[[nodiscard]] std::size_t default_workers();

/// Override the process-wide worker count (0 restores the environment default).
void set_workers(std::size_t workers);

/// Runs fn(i) for i in [0, count). Each index is processed exactly once and
/// callers write results into per-index slots, so output never depends on the
/// number of workers. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

using Rng = std::mt19937_64;

/// Uniform on [0, 1) from the top 53 bits of one draw.
[[nodiscard]] double uniform01(Rng& rng);
/// Uniform on (0, 1).
[[nodiscard]] double uniform_open01(Rng& rng);
/// Box-Muller from two draws. Spelled out here (rather than
/// std::normal_distribution) so streams agree across standard libraries.
[[nodiscard]] double standard_normal(Rng& rng);

[[nodiscard]] double normal_cdf(double x);
/// Inverse of normal_cdf for p in (0, 1).
[[nodiscard]] double normal_quantile(double p);

/// Throws ValidationError if `j` is not an object or has a key outside
/// `allowed`. `context` names the object in the message.
void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                std::string_view context);

/// printf-style "%.17g"; round-trips every finite double.
[[nodiscard]] std::string format_double(double x);

}  // namespace bqd
