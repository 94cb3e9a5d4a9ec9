#include "bqd/berkson.hpp"

#include <algorithm>
#include <numbers>

namespace bqd {

void BerksonSpec::validate() const {
    if (family != "normal") {
        throw ValidationError("unsupported Berkson family '" + family + "' (only 'normal')");
    }
    if (n_nodes < 1 || n_nodes % 2 == 0) {
        throw ValidationError("Berkson quadrature needs an odd node count >= 1");
    }
    if (!(global_factor >= 0.0) || !std::isfinite(global_factor)) {
        throw ValidationError("Berkson global_factor must be finite and nonnegative");
    }
    for (const auto& [region, s] : sigma_by_region) {
        if (!(s >= 0.0) || !std::isfinite(s)) {
            throw ValidationError("Berkson sigma for region '" + region +
                                  "' must be finite and nonnegative");
        }
    }
}

double BerksonSpec::sigma(std::string_view region) const {
    auto it = sigma_by_region.find(std::string(region));
    if (it == sigma_by_region.end()) {
        throw ValidationError("no Berkson sigma for region '" + std::string(region) + "'");
    }
    return it->second * global_factor;
}

double BerksonSpec::max_sigma() const {
    double m = 0.0;
    for (const auto& [region, s] : sigma_by_region) {
        m = std::max(m, s * global_factor);
    }
    return m;
}

BerksonSpec BerksonSpec::without_error() const {
    BerksonSpec out = *this;
    for (auto& [region, s] : out.sigma_by_region) {
        s = 0.0;
    }
    return out;
}

QuadratureRule standard_normal_rule(int n_nodes) {
    if (n_nodes < 1) {
        throw ValidationError("quadrature needs at least one node");
    }
    // Newton iteration on the orthonormal Hermite recurrence (physicists'
    // weight exp(-x^2)), then rescaled to the standard normal.
    const int n = n_nodes;
    const double pim4 = 1.0 / std::pow(std::numbers::pi, 0.25);
    std::vector<double> x(n + 1), w(n + 1);
    const int m = (n + 1) / 2;
    double z = 0.0;
    for (int i = 1; i <= m; ++i) {
        if (i == 1) {
            z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
        } else if (i == 2) {
            z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
        } else if (i == 3) {
            z = 1.86 * z - 0.86 * x[1];
        } else if (i == 4) {
            z = 1.91 * z - 0.91 * x[2];
        } else {
            z = 2.0 * z - x[i - 2];
        }
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p1 = pim4;
            double p2 = 0.0;
            for (int j = 1; j <= n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) {
                break;
            }
        }
        x[i] = z;
        x[n + 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n + 1 - i] = w[i];
    }
    if (n % 2 == 1) {
        x[m] = 0.0;
    }
    QuadratureRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    // x[1] is the largest root; store ascending.
    for (int i = 0; i < n; ++i) {
        rule.nodes[i] = std::numbers::sqrt2 * x[n - i];
        rule.weights[i] = w[n - i];
    }
    // Pairwise-symmetric summation keeps the normalization symmetric too.
    double total = 0.0;
    for (int i = 0; i < n / 2; ++i) {
        total += rule.weights[i] + rule.weights[n - 1 - i];
    }
    if (n % 2 == 1) {
        total += rule.weights[n / 2];
    }
    for (auto& wi : rule.weights) {
        wi /= total;
    }
    return rule;
}

QuadratureRule make_rule(double sigma, int n_nodes) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
        throw ValidationError("Berkson sigma must be finite and nonnegative");
    }
    if (sigma == 0.0) {
        return QuadratureRule{{0.0}, {1.0}};
    }
    QuadratureRule rule = standard_normal_rule(n_nodes);
    for (auto& x : rule.nodes) {
        x *= sigma;
    }
    return rule;
}

QuadratureRule make_rule(const BerksonSpec& spec, std::string_view region) {
    return make_rule(spec.sigma(region), spec.n_nodes);
}

void to_json(nlohmann::json& j, const BerksonSpec& spec) {
    j = {{"family", spec.family},
         {"sigma_by_region", spec.sigma_by_region},
         {"n_nodes", spec.n_nodes},
         {"global_factor", spec.global_factor}};
}

void from_json(const nlohmann::json& j, BerksonSpec& spec) {
    check_keys(j, {"family", "sigma_by_region", "n_nodes", "global_factor"}, "berkson");
    spec.family = j.value("family", std::string("normal"));
    j.at("sigma_by_region").get_to(spec.sigma_by_region);
    spec.n_nodes = j.value("n_nodes", 21);
    spec.global_factor = j.value("global_factor", 1.0);
    spec.validate();
}

}  // namespace bqd
