#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

namespace bqd {

struct Dataset;

/// Normalization box for the Chebyshev arguments (all coordinates in logs).
struct DomainBox {
    double p_lo = 0.0, p_hi = 1.0;
    double y_lo = 0.0, y_hi = 1.0;
    double q_lo = 0.0, q_hi = 1.0;

    /// Throws ValidationError unless every lo < hi.
    void validate() const;
};

/// Data range in each coordinate, with the price range widened by
/// price_extension on both sides (room for Berkson-shifted prices).
[[nodiscard]] DomainBox box_from_data(const Dataset& data, double price_extension = 0.0);

enum class Axis { p, y, q };

/// Tensor-product Chebyshev sieve. Index order: the quantity degree runs
/// fastest, then income, then price: j = (a * (deg_y + 1) + b) * (deg_q + 1) + c.
struct BasisSpec {
    int deg_p = 3;
    int deg_y = 3;
    int deg_q = 7;
    DomainBox box;

    [[nodiscard]] std::size_t size() const {
        return static_cast<std::size_t>(deg_p + 1) * static_cast<std::size_t>(deg_y + 1) *
               static_cast<std::size_t>(deg_q + 1);
    }
    [[nodiscard]] std::size_t index(int a, int b, int c) const {
        return (static_cast<std::size_t>(a) * static_cast<std::size_t>(deg_y + 1) +
                static_cast<std::size_t>(b)) *
                   static_cast<std::size_t>(deg_q + 1) +
               static_cast<std::size_t>(c);
    }
    void validate() const;
};

/// 2 (x - lo) / (hi - lo) - 1. Points outside [lo, hi] map outside [-1, 1].
[[nodiscard]] double affine_map(double x, double lo, double hi);

/// T_n(t) by the three-term recurrence. Valid (polynomial extension) for any t.
[[nodiscard]] double cheb_eval(int degree, double t);

/// Fills t_out[0..degree] with T_k(t).
void cheb_values(int degree, double t, std::span<double> t_out);

/// Fills d_out[0..degree] with T'_k(t) = k U_{k-1}(t).
void cheb_derivs(int degree, double t, std::span<double> d_out);

/// Psi_j(p, y, q) for every j, in the documented index order.
[[nodiscard]] std::vector<double> basis_eval(const BasisSpec& spec, double p, double y, double q);
void basis_eval_into(const BasisSpec& spec, double p, double y, double q, std::span<double> out);

/// Exact partial derivative of each Psi_j with respect to the unmapped
/// coordinate `wrt`, including the 2 / (hi - lo) chain-rule factor.
[[nodiscard]] std::vector<double> basis_deriv(const BasisSpec& spec, double p, double y, double q,
                                              Axis wrt);
void basis_deriv_into(const BasisSpec& spec, double p, double y, double q, Axis wrt,
                      std::span<double> out);

void to_json(nlohmann::json& j, const DomainBox& box);
void from_json(const nlohmann::json& j, DomainBox& box);
void to_json(nlohmann::json& j, const BasisSpec& spec);
void from_json(const nlohmann::json& j, BasisSpec& spec);

}  // namespace bqd
