#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bqd/common.hpp"

namespace bqd {

/// Distribution of the Berkson price error eps (true log price = observed + eps).
/// Only the normal family is supported. sigma is multiplied by global_factor.
struct BerksonSpec {
    std::string family = "normal";
    std::map<std::string, double> sigma_by_region;
    int n_nodes = 21;
    double global_factor = 1.0;

    void validate() const;
    /// Effective sigma (times global_factor); throws for an unknown region.
    [[nodiscard]] double sigma(std::string_view region) const;
    [[nodiscard]] double max_sigma() const;
    /// Same regions, every sigma zero: the "no Berkson error" counterpart.
    [[nodiscard]] BerksonSpec without_error() const;
};

/// Nodes and probability weights for an expectation over eps.
struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Gauss-Hermite rule for the standard normal: ascending nodes, weights
/// summing to 1, exact for polynomials up to degree 2n - 1.
[[nodiscard]] QuadratureRule standard_normal_rule(int n_nodes);

/// Rule for the region's error distribution. sigma = 0 gives the single node 0.
[[nodiscard]] QuadratureRule make_rule(const BerksonSpec& spec, std::string_view region);

/// Same construction with an explicit sigma and node count.
[[nodiscard]] QuadratureRule make_rule(double sigma, int n_nodes);

/// sum_i w_i g(eps_i). Throws NumericalError if g is not finite at a node.
template <class F>
[[nodiscard]] double expect_eps(const QuadratureRule& rule, F&& g) {
    double acc = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
        const double v = g(rule.nodes[i]);
        if (!std::isfinite(v)) {
            throw NumericalError("integrand not finite at eps = " + std::to_string(rule.nodes[i]) +
                                 " (domain box misconfigured?)");
        }
        acc += rule.weights[i] * v;
    }
    return acc;
}

void to_json(nlohmann::json& j, const BerksonSpec& spec);
void from_json(const nlohmann::json& j, BerksonSpec& spec);

}  // namespace bqd
