#include "bqd/demand.hpp"

#include <cmath>
#include <sstream>

#include "bqd/common.hpp"

namespace bqd {

namespace {

// Coefficients of G^-1(p, y, .) in the Chebyshev-in-q basis, so repeated
// evaluation along q costs O(deg_q).
std::vector<double> quantity_slice(const FittedModel& model, double p, double y) {
    const auto& basis = model.basis;
    const auto& box = basis.box;
    std::vector<double> tp(basis.deg_p + 1), ty(basis.deg_y + 1);
    cheb_values(basis.deg_p, affine_map(p, box.p_lo, box.p_hi), tp);
    cheb_values(basis.deg_y, affine_map(y, box.y_lo, box.y_hi), ty);
    std::vector<double> coef(basis.deg_q + 1, 0.0);
    for (int a = 0; a <= basis.deg_p; ++a) {
        for (int b = 0; b <= basis.deg_y; ++b) {
            const double w = tp[a] * ty[b];
            for (int c = 0; c <= basis.deg_q; ++c) {
                coef[c] += w * model.theta(static_cast<Eigen::Index>(basis.index(a, b, c)));
            }
        }
    }
    return coef;
}

double clenshaw(const std::vector<double>& coef, double t) {
    double b1 = 0.0, b2 = 0.0;
    for (std::size_t k = coef.size(); k-- > 1;) {
        const double b0 = coef[k] + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    return coef[0] + t * b1 - b2;
}

}  // namespace

double budget_share(const HouseholdRecord& record) {
    return std::exp(record.log_p + record.log_q - record.log_y);
}

std::vector<std::size_t> check_budget_shares(const Dataset& data,
                                             const std::function<void(std::size_t, double)>& warn) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double s = budget_share(data.records[i]);
        if (s > 1.0) {
            out.push_back(i);
            if (warn) {
                warn(i, s);
            }
        }
    }
    return out;
}

Inversion invert_g(const FittedModel& model, double p, double y, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw ValidationError("tau must lie in (0, 1)");
    }
    const auto& box = model.basis.box;
    const auto coef = quantity_slice(model, p, y);
    auto f = [&](double q) { return clenshaw(coef, affine_map(q, box.q_lo, box.q_hi)) - tau; };
    double lo = box.q_lo;
    double hi = box.q_hi;
    if (f(lo) > 0.0) {
        return {lo, true};
    }
    if (f(hi) < 0.0) {
        return {hi, true};
    }
    for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) {
            break;
        }
        if (f(mid) < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return {0.5 * (lo + hi), false};
}

std::vector<double> linear_grid(double lo, double hi, std::size_t n) {
    if (n == 0) {
        return {};
    }
    if (n == 1) {
        return {lo};
    }
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        g[i] =
            i + 1 == n ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return g;
}

QuantileDemandCurve demand_curve(const FittedModel& model, double tau, double log_income,
                                 const std::vector<double>& log_price_grid) {
    QuantileDemandCurve curve;
    curve.tau = tau;
    curve.log_income = log_income;
    curve.points.reserve(log_price_grid.size());
    for (double p : log_price_grid) {
        const Inversion inv = invert_g(model, p, log_income, tau);
        curve.points.push_back({p, inv.log_q, inv.out_of_range});
    }
    return curve;
}

Elasticities elasticities(const FittedModel& model, double p, double y, double tau) {
    const Inversion inv = invert_g(model, p, y, tau);
    const double dq = model.g_inv_deriv(p, y, inv.log_q, Axis::q);
    if (!(dq > 0.0)) {
        std::ostringstream msg;
        msg << "degenerate point (p = " << p << ", y = " << y << ", tau = " << tau
            << "): dG^-1/dq = " << dq;
        throw NumericalError(msg.str());
    }
    return {-model.g_inv_deriv(p, y, inv.log_q, Axis::p) / dq,
            -model.g_inv_deriv(p, y, inv.log_q, Axis::y) / dq};
}

std::string curves_csv(const std::vector<QuantileDemandCurve>& curves) {
    std::string out = "tau,log_income,log_price,log_quantity\n";
    for (const auto& c : curves) {
        for (const auto& pt : c.points) {
            out += format_double(c.tau) + "," + format_double(c.log_income) + "," +
                   format_double(pt.log_p) + "," + format_double(pt.log_q) + "\n";
        }
    }
    return out;
}

}  // namespace bqd
