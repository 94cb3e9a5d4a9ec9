#include "bqd/basis.hpp"

#include <algorithm>
#include <array>
#include <limits>

#include "bqd/common.hpp"
#include "bqd/dataio.hpp"

namespace bqd {

void DomainBox::validate() const {
    if (!(p_lo < p_hi) || !(y_lo < y_hi) || !(q_lo < q_hi)) {
        throw ValidationError("domain box needs lo < hi in every coordinate");
    }
}

DomainBox box_from_data(const Dataset& data, double price_extension) {
    if (data.empty()) {
        throw ValidationError("cannot derive a domain box from an empty dataset");
    }
    constexpr double inf = std::numeric_limits<double>::infinity();
    DomainBox b{inf, -inf, inf, -inf, inf, -inf};
    for (const auto& r : data.records) {
        b.p_lo = std::min(b.p_lo, r.log_p);
        b.p_hi = std::max(b.p_hi, r.log_p);
        b.y_lo = std::min(b.y_lo, r.log_y);
        b.y_hi = std::max(b.y_hi, r.log_y);
        b.q_lo = std::min(b.q_lo, r.log_q);
        b.q_hi = std::max(b.q_hi, r.log_q);
    }
    b.p_lo -= price_extension;
    b.p_hi += price_extension;
    b.validate();
    return b;
}

void BasisSpec::validate() const {
    if (deg_p < 0 || deg_y < 0 || deg_q < 0) {
        throw ValidationError("basis degrees must be nonnegative");
    }
    box.validate();
}

double affine_map(double x, double lo, double hi) {
    if (!(lo < hi)) {
        throw ValidationError("affine_map needs lo < hi");
    }
    return 2.0 * (x - lo) / (hi - lo) - 1.0;
}

double cheb_eval(int degree, double t) {
    if (degree == 0) {
        return 1.0;
    }
    double prev = 1.0;
    double cur = t;
    for (int k = 1; k < degree; ++k) {
        const double next = 2.0 * t * cur - prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

void cheb_values(int degree, double t, std::span<double> t_out) {
    t_out[0] = 1.0;
    if (degree >= 1) {
        t_out[1] = t;
    }
    for (int k = 2; k <= degree; ++k) {
        t_out[k] = 2.0 * t * t_out[k - 1] - t_out[k - 2];
    }
}

void cheb_derivs(int degree, double t, std::span<double> d_out) {
    // U_k by its own recurrence; T'_k = k U_{k-1}.
    d_out[0] = 0.0;
    double u_prev = 0.0;  // U_{-1}
    double u_cur = 1.0;   // U_0
    for (int k = 1; k <= degree; ++k) {
        d_out[k] = static_cast<double>(k) * u_cur;
        const double u_next = 2.0 * t * u_cur - u_prev;
        u_prev = u_cur;
        u_cur = u_next;
    }
}

namespace {

constexpr int kMaxDegree = 63;

struct AxisFactors {
    std::array<double, kMaxDegree + 1> p{}, y{}, q{};
};

void check_degrees(const BasisSpec& spec) {
    if (spec.deg_p > kMaxDegree || spec.deg_y > kMaxDegree || spec.deg_q > kMaxDegree) {
        throw ValidationError("basis degree above the supported maximum of 63");
    }
}

void tensor(const BasisSpec& spec, const AxisFactors& f, std::span<double> out) {
    std::size_t j = 0;
    for (int a = 0; a <= spec.deg_p; ++a) {
        for (int b = 0; b <= spec.deg_y; ++b) {
            const double ab = f.p[a] * f.y[b];
            for (int c = 0; c <= spec.deg_q; ++c) {
                out[j++] = ab * f.q[c];
            }
        }
    }
}

}  // namespace

void basis_eval_into(const BasisSpec& spec, double p, double y, double q, std::span<double> out) {
    check_degrees(spec);
    const auto& box = spec.box;
    AxisFactors f;
    cheb_values(spec.deg_p, affine_map(p, box.p_lo, box.p_hi), f.p);
    cheb_values(spec.deg_y, affine_map(y, box.y_lo, box.y_hi), f.y);
    cheb_values(spec.deg_q, affine_map(q, box.q_lo, box.q_hi), f.q);
    tensor(spec, f, out);
}

std::vector<double> basis_eval(const BasisSpec& spec, double p, double y, double q) {
    std::vector<double> out(spec.size());
    basis_eval_into(spec, p, y, q, out);
    return out;
}

void basis_deriv_into(const BasisSpec& spec, double p, double y, double q, Axis wrt,
                      std::span<double> out) {
    check_degrees(spec);
    const auto& box = spec.box;
    const double tp = affine_map(p, box.p_lo, box.p_hi);
    const double ty = affine_map(y, box.y_lo, box.y_hi);
    const double tq = affine_map(q, box.q_lo, box.q_hi);
    AxisFactors f;
    cheb_values(spec.deg_p, tp, f.p);
    cheb_values(spec.deg_y, ty, f.y);
    cheb_values(spec.deg_q, tq, f.q);
    auto scale = [](std::span<double> v, int deg, double s) {
        for (int k = 0; k <= deg; ++k) {
            v[k] *= s;
        }
    };
    switch (wrt) {
        case Axis::p:
            cheb_derivs(spec.deg_p, tp, f.p);
            scale(f.p, spec.deg_p, 2.0 / (box.p_hi - box.p_lo));
            break;
        case Axis::y:
            cheb_derivs(spec.deg_y, ty, f.y);
            scale(f.y, spec.deg_y, 2.0 / (box.y_hi - box.y_lo));
            break;
        case Axis::q:
            cheb_derivs(spec.deg_q, tq, f.q);
            scale(f.q, spec.deg_q, 2.0 / (box.q_hi - box.q_lo));
            break;
    }
    tensor(spec, f, out);
}

std::vector<double> basis_deriv(const BasisSpec& spec, double p, double y, double q, Axis wrt) {
    std::vector<double> out(spec.size());
    basis_deriv_into(spec, p, y, q, wrt, out);
    return out;
}

void to_json(nlohmann::json& j, const DomainBox& box) {
    j = {{"p_lo", box.p_lo}, {"p_hi", box.p_hi}, {"y_lo", box.y_lo},
         {"y_hi", box.y_hi}, {"q_lo", box.q_lo}, {"q_hi", box.q_hi}};
}

void from_json(const nlohmann::json& j, DomainBox& box) {
    j.at("p_lo").get_to(box.p_lo);
    j.at("p_hi").get_to(box.p_hi);
    j.at("y_lo").get_to(box.y_lo);
    j.at("y_hi").get_to(box.y_hi);
    j.at("q_lo").get_to(box.q_lo);
    j.at("q_hi").get_to(box.q_hi);
    box.validate();
}

void to_json(nlohmann::json& j, const BasisSpec& spec) {
    j = {{"deg_p", spec.deg_p}, {"deg_y", spec.deg_y}, {"deg_q", spec.deg_q}, {"box", spec.box}};
}

void from_json(const nlohmann::json& j, BasisSpec& spec) {
    j.at("deg_p").get_to(spec.deg_p);
    j.at("deg_y").get_to(spec.deg_y);
    j.at("deg_q").get_to(spec.deg_q);
    j.at("box").get_to(spec.box);
    spec.validate();
}

}  // namespace bqd
