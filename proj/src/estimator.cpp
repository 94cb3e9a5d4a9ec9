#include "bqd/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "bqd/common.hpp"
#include "bqd/demand.hpp"

namespace bqd {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t price_size(const BasisSpec& basis) {
    return static_cast<std::size_t>(basis.deg_p + 1);
}

std::size_t income_quantity_size(const BasisSpec& basis) {
    return static_cast<std::size_t>(basis.deg_y + 1) * static_cast<std::size_t>(basis.deg_q + 1);
}

// T_b(map y) * d/dq T_c(map q), c fastest: the (y, q) part of every
// q-derivative row, which does not depend on the price shift.
void income_quantity_row(const BasisSpec& basis, double y, double q, double* out) {
    const auto& box = basis.box;
    std::vector<double> ty(basis.deg_y + 1), dq(basis.deg_q + 1);
    cheb_values(basis.deg_y, affine_map(y, box.y_lo, box.y_hi), ty);
    cheb_derivs(basis.deg_q, affine_map(q, box.q_lo, box.q_hi), dq);
    const double chain = 2.0 / (box.q_hi - box.q_lo);
    std::size_t k = 0;
    for (int b = 0; b <= basis.deg_y; ++b) {
        for (int c = 0; c <= basis.deg_q; ++c) {
            out[k++] = ty[b] * dq[c] * chain;
        }
    }
}

std::map<std::string, QuadratureRule> rules_for(const Dataset& data, const BerksonSpec& berkson) {
    std::map<std::string, QuadratureRule> rules;
    for (const auto& r : data.records) {
        if (rules.find(r.region) == rules.end()) {
            rules.emplace(r.region, make_rule(berkson, r.region));
        }
    }
    return rules;
}

std::vector<GridPoint> regular_grid(const DomainBox& box, int n_p, int n_y, int n_q) {
    auto coord = [](double lo, double hi, int n, int i) {
        if (n == 1) {
            return 0.5 * (lo + hi);
        }
        return i == n - 1 ? hi : lo + (hi - lo) * static_cast<double>(i) / (n - 1);
    };
    std::vector<GridPoint> pts;
    pts.reserve(static_cast<std::size_t>(n_p) * n_y * n_q);
    for (int i = 0; i < n_p; ++i) {
        for (int j = 0; j < n_y; ++j) {
            for (int k = 0; k < n_q; ++k) {
                pts.push_back({coord(box.p_lo, box.p_hi, n_p, i), coord(box.y_lo, box.y_hi, n_y, j),
                               coord(box.q_lo, box.q_hi, n_q, k)});
            }
        }
    }
    return pts;
}

}  // namespace

void validate_coefficients(const CoefficientVector& theta, const BasisSpec& basis) {
    if (static_cast<std::size_t>(theta.size()) != basis.size()) {
        throw ValidationError("coefficient vector has length " + std::to_string(theta.size()) +
                              ", basis needs " + std::to_string(basis.size()));
    }
    if (!theta.allFinite()) {
        throw ValidationError("coefficient vector has non-finite entries");
    }
}

double g_inv(const CoefficientVector& theta, const BasisSpec& basis, double p, double y, double q) {
    std::vector<double> psi(basis.size());
    basis_eval_into(basis, p, y, q, psi);
    return Eigen::Map<const Eigen::VectorXd>(psi.data(), static_cast<Eigen::Index>(psi.size()))
        .dot(theta);
}

double g_inv_deriv(const CoefficientVector& theta, const BasisSpec& basis, double p, double y,
                   double q, Axis wrt) {
    std::vector<double> psi(basis.size());
    basis_deriv_into(basis, p, y, q, wrt, psi);
    return Eigen::Map<const Eigen::VectorXd>(psi.data(), static_cast<Eigen::Index>(psi.size()))
        .dot(theta);
}

CoefficientVector project_onto_basis(const BasisSpec& basis,
                                     const std::function<double(double, double, double)>& f) {
    basis.validate();
    const auto& box = basis.box;
    // Chebyshev-Gauss points, twice the degree plus one per axis.
    auto nodes = [](int deg, double lo, double hi) {
        const int m = 2 * deg + 3;
        std::vector<double> x(m);
        for (int i = 0; i < m; ++i) {
            const double t = std::cos(std::numbers::pi * (i + 0.5) / m);
            x[i] = lo + 0.5 * (t + 1.0) * (hi - lo);
        }
        return x;
    };
    const auto xp = nodes(basis.deg_p, box.p_lo, box.p_hi);
    const auto xy = nodes(basis.deg_y, box.y_lo, box.y_hi);
    const auto xq = nodes(basis.deg_q, box.q_lo, box.q_hi);
    const std::size_t rows = xp.size() * xy.size() * xq.size();
    Eigen::MatrixXd design(rows, basis.size());
    Eigen::VectorXd target(rows);
    std::vector<double> psi(basis.size());
    Eigen::Index r = 0;
    for (double p : xp) {
        for (double y : xy) {
            for (double q : xq) {
                basis_eval_into(basis, p, y, q, psi);
                for (std::size_t j = 0; j < psi.size(); ++j) {
                    design(r, static_cast<Eigen::Index>(j)) = psi[j];
                }
                target(r) = f(p, y, q);
                ++r;
            }
        }
    }
    return design.colPivHouseholderQr().solve(target);
}

CoefficientVector initial_coefficients(const BasisSpec& basis, double margin, double tilt) {
    if (!(margin >= 0.0 && margin < 0.5)) {
        throw ValidationError("initial margin must lie in [0, 0.5)");
    }
    if (!(std::abs(tilt) < 1.0 - 2.0 * margin)) {
        throw ValidationError("initial tilt too large for a monotone start");
    }
    const auto& box = basis.box;
    return project_onto_basis(basis, [&](double p, double, double q) {
        const double u = (q - box.q_lo) / (box.q_hi - box.q_lo);
        const double r = (p - box.p_lo) / (box.p_hi - box.p_lo);
        return margin + (1.0 - 2.0 * margin) * u + tilt * u * (1.0 - u) * r;
    });
}

// ---------------------------------------------------------------------------
// Likelihood

Eigen::MatrixXd LikelihoodDesign::full() const {
    const Eigen::Index n = price_factor.rows();
    const Eigen::Index np = price_factor.cols();
    const Eigen::Index nb = income_quantity.cols();
    Eigen::MatrixXd a(n, np * nb);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < np; ++k) {
            a.row(i).segment(k * nb, nb) = price_factor(i, k) * income_quantity.row(i);
        }
    }
    return a;
}

Eigen::VectorXd LikelihoodDesign::densities(const CoefficientVector& theta) const {
    const Eigen::Index np = price_factor.cols();
    const Eigen::Index nb = income_quantity.cols();
    if (theta.size() != np * nb) {
        throw ValidationError("coefficient vector does not match the likelihood design");
    }
    Eigen::Map<const RowMajorMatrix> coef(theta.data(), np, nb);
    const Eigen::MatrixXd c = income_quantity * coef.transpose();
    return price_factor.cwiseProduct(c).rowwise().sum();
}

LikelihoodDesign build_likelihood_design(const Dataset& data, const BasisSpec& basis,
                                         const BerksonSpec& berkson) {
    basis.validate();
    berkson.validate();
    const auto rules = rules_for(data, berkson);
    const std::size_t n = data.size();
    LikelihoodDesign design;
    design.price_factor.setZero(n, price_size(basis));
    design.income_quantity.resize(n, income_quantity_size(basis));
    std::vector<double> tp(basis.deg_p + 1);
    std::vector<double> iq(income_quantity_size(basis));
    const auto& box = basis.box;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& rec = data.records[i];
        const auto& rule = rules.at(rec.region);
        for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
            cheb_values(basis.deg_p, affine_map(rec.log_p + rule.nodes[k], box.p_lo, box.p_hi), tp);
            for (int a = 0; a <= basis.deg_p; ++a) {
                design.price_factor(i, a) += rule.weights[k] * tp[a];
            }
        }
        income_quantity_row(basis, rec.log_y, rec.log_q, iq.data());
        for (std::size_t b = 0; b < iq.size(); ++b) {
            design.income_quantity(i, b) = iq[b];
        }
    }
    return design;
}

double log_likelihood(const CoefficientVector& theta, const LikelihoodDesign& design) {
    const Eigen::VectorXd d = design.densities(theta);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (!(d(i) > 0.0)) {
            std::ostringstream msg;
            msg << "implied density is not positive at household " << i << " (d = " << d(i)
                << "); coefficients are infeasible";
            throw NumericalError(msg.str());
        }
        acc += std::log(d(i));
    }
    return acc;
}

double log_likelihood(const CoefficientVector& theta, const Dataset& data, const BasisSpec& basis,
                      const BerksonSpec& berkson) {
    validate_coefficients(theta, basis);
    return log_likelihood(theta, build_likelihood_design(data, basis, berkson));
}

Eigen::VectorXd log_likelihood_grad(const CoefficientVector& theta,
                                    const LikelihoodDesign& design) {
    const Eigen::VectorXd d = design.densities(theta);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (!(d(i) > 0.0)) {
            throw NumericalError("implied density is not positive at household " +
                                 std::to_string(i));
        }
    }
    const Eigen::MatrixXd u = design.price_factor.array().colwise() / d.array();
    const Eigen::MatrixXd g = u.transpose() * design.income_quantity;  // P x B
    Eigen::VectorXd out(g.size());
    Eigen::Map<RowMajorMatrix>(out.data(), g.rows(), g.cols()) = g;
    return out;
}

Eigen::VectorXd log_likelihood_grad(const CoefficientVector& theta, const Dataset& data,
                                    const BasisSpec& basis, const BerksonSpec& berkson) {
    validate_coefficients(theta, basis);
    return log_likelihood_grad(theta, build_likelihood_design(data, basis, berkson));
}

// ---------------------------------------------------------------------------
// Constraints

std::string to_string(ShapeRegime regime) {
    return regime == ShapeRegime::slutsky ? "slutsky" : "unconstrained";
}

ShapeRegime shape_regime_from_string(const std::string& s) {
    if (s == "unconstrained") {
        return ShapeRegime::unconstrained;
    }
    if (s == "slutsky") {
        return ShapeRegime::slutsky;
    }
    throw ValidationError("unknown constraint regime '" + s + "' (expected unconstrained|slutsky)");
}

std::size_t ConstraintSet::count(RowKind kind) const {
    if (kind == RowKind::monotone_data) {
        return data_rows();
    }
    return static_cast<std::size_t>(std::count(dense_kinds.begin(), dense_kinds.end(), kind));
}

Eigen::VectorXd ConstraintSet::slacks(const CoefficientVector& theta) const {
    const Eigen::Index np = data_price_factor.cols();
    const Eigen::Index nb = data_income_quantity.cols();
    Eigen::VectorXd s(static_cast<Eigen::Index>(inequality_count()));
    if (data_rows() > 0) {
        Eigen::Map<const RowMajorMatrix> coef(theta.data(), np, nb);
        const Eigen::MatrixXd c = data_income_quantity * coef.transpose();
        for (std::size_t i = 0; i + 1 < data_row_offsets.size(); ++i) {
            for (std::size_t r = data_row_offsets[i]; r < data_row_offsets[i + 1]; ++r) {
                s(static_cast<Eigen::Index>(r)) =
                    data_price_factor.row(static_cast<Eigen::Index>(r))
                        .dot(c.row(static_cast<Eigen::Index>(i))) -
                    delta_floor;
            }
        }
    }
    if (dense_rows.rows() > 0) {
        s.tail(dense_rows.rows()) = dense_rows * theta - dense_lower;
    }
    return s;
}

Eigen::MatrixXd ConstraintSet::materialize() const {
    const Eigen::Index nb = data_income_quantity.cols();
    const Eigen::Index np = data_price_factor.cols();
    const Eigen::Index j = dense_rows.rows() > 0 ? dense_rows.cols() : np * nb;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(inequality_count()), j);
    for (std::size_t i = 0; i + 1 < data_row_offsets.size(); ++i) {
        for (std::size_t r = data_row_offsets[i]; r < data_row_offsets[i + 1]; ++r) {
            for (Eigen::Index a = 0; a < np; ++a) {
                out.row(static_cast<Eigen::Index>(r)).segment(a * nb, nb) =
                    data_price_factor(static_cast<Eigen::Index>(r), a) *
                    data_income_quantity.row(static_cast<Eigen::Index>(i));
            }
        }
    }
    if (dense_rows.rows() > 0) {
        out.bottomRows(dense_rows.rows()) = dense_rows;
    }
    return out;
}

Eigen::VectorXd ConstraintSet::lower() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(inequality_count()));
    out.head(static_cast<Eigen::Index>(data_rows())).setConstant(delta_floor);
    if (dense_rows.rows() > 0) {
        out.tail(dense_rows.rows()) = dense_lower;
    }
    return out;
}

std::vector<RowKind> ConstraintSet::kinds() const {
    std::vector<RowKind> out(data_rows(), RowKind::monotone_data);
    out.insert(out.end(), dense_kinds.begin(), dense_kinds.end());
    return out;
}

std::vector<std::size_t> select_slutsky_households(const Dataset& data,
                                                   const SlutskyRegion& region) {
    if (data.empty()) {
        return {};
    }
    std::vector<double> qs;
    qs.reserve(data.size());
    for (const auto& r : data.records) {
        qs.push_back(r.log_q);
    }
    std::sort(qs.begin(), qs.end());
    const double q_lo = quantile_sorted(qs, region.q_lo_pct);
    const double q_hi = quantile_sorted(qs, region.q_hi_pct);
    const double ly_lo = std::log(region.income_lo);
    const double ly_hi = std::log(region.income_hi);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& r = data.records[i];
        if (r.log_q >= q_lo && r.log_q <= q_hi && r.log_p >= region.log_p_lo &&
            r.log_p <= region.log_p_hi && r.log_y >= ly_lo && r.log_y <= ly_hi) {
            out.push_back(i);
        }
    }
    return out;
}

ConstraintSet build_constraints(const Dataset& data, const BasisSpec& basis,
                                const BerksonSpec& berkson, ShapeRegime regime,
                                const ConstraintGridSpec& grid) {
    basis.validate();
    berkson.validate();
    if (grid.n_p < 1 || grid.n_y < 1 || grid.n_q < 2) {
        throw ValidationError("constraint grid needs n_p, n_y >= 1 and n_q >= 2");
    }
    if (!(grid.delta_floor > 0.0)) {
        throw ValidationError("delta_floor must be positive");
    }
    ConstraintSet cs;
    cs.regime = regime;
    cs.delta_floor = grid.delta_floor;
    const std::size_t nj = basis.size();
    const auto& box = basis.box;

    // Data monotonicity rows, factored.
    const auto rules = rules_for(data, berkson);
    const bool per_node = grid.per_node_monotonicity;
    std::size_t total = 0;
    cs.data_row_offsets.reserve(data.size() + 1);
    cs.data_row_offsets.push_back(0);
    for (const auto& r : data.records) {
        total += per_node ? rules.at(r.region).nodes.size() : 1;
        cs.data_row_offsets.push_back(total);
    }
    cs.data_price_factor.setZero(static_cast<Eigen::Index>(total), price_size(basis));
    cs.data_income_quantity.resize(static_cast<Eigen::Index>(data.size()),
                                   income_quantity_size(basis));
    std::vector<double> tp(basis.deg_p + 1);
    std::vector<double> iq(income_quantity_size(basis));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& rec = data.records[i];
        const auto& rule = rules.at(rec.region);
        for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
            cheb_values(basis.deg_p, affine_map(rec.log_p + rule.nodes[k], box.p_lo, box.p_hi), tp);
            const auto row = static_cast<Eigen::Index>(cs.data_row_offsets[i] + (per_node ? k : 0));
            const double w = per_node ? 1.0 : rule.weights[k];
            for (int a = 0; a <= basis.deg_p; ++a) {
                cs.data_price_factor(row, a) += w * tp[a];
            }
        }
        income_quantity_row(basis, rec.log_y, rec.log_q, iq.data());
        for (std::size_t b = 0; b < iq.size(); ++b) {
            cs.data_income_quantity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) =
                iq[b];
        }
    }

    // Grid rows.
    cs.mono_grid = regular_grid(box, grid.n_p, grid.n_y, grid.n_q);
    for (const auto& g : cs.mono_grid) {
        const bool edge = g.q == box.q_lo || g.q == box.q_hi;
        if (!(grid.pin_boundary && edge)) {
            cs.bound_grid.push_back(g);
        }
    }
    if (regime == ShapeRegime::slutsky) {
        cs.slutsky_points = select_slutsky_households(data, grid.slutsky);
        for (std::size_t i : cs.slutsky_points) {
            cs.slutsky_shares.push_back(budget_share(data.records[i]));
        }
    }
    const std::size_t dense =
        cs.mono_grid.size() + 2 * cs.bound_grid.size() + cs.slutsky_points.size();
    cs.dense_rows.resize(static_cast<Eigen::Index>(dense), static_cast<Eigen::Index>(nj));
    cs.dense_lower.resize(static_cast<Eigen::Index>(dense));
    cs.dense_kinds.reserve(dense);
    std::vector<double> row(nj), row2(nj);
    Eigen::Index r = 0;
    auto put = [&](const std::vector<double>& v, double lo, RowKind kind) {
        for (std::size_t j = 0; j < nj; ++j) {
            cs.dense_rows(r, static_cast<Eigen::Index>(j)) = v[j];
        }
        cs.dense_lower(r) = lo;
        cs.dense_kinds.push_back(kind);
        ++r;
    };
    for (const auto& g : cs.mono_grid) {
        basis_deriv_into(basis, g.p, g.y, g.q, Axis::q, row);
        put(row, grid.delta_floor, RowKind::monotone_grid);
    }
    for (const auto& g : cs.bound_grid) {
        basis_eval_into(basis, g.p, g.y, g.q, row);
        put(row, 0.0, RowKind::bound_lower);
        for (auto& v : row) {
            v = -v;
        }
        put(row, -1.0, RowKind::bound_upper);
    }
    for (std::size_t k = 0; k < cs.slutsky_points.size(); ++k) {
        const auto& rec = data.records[cs.slutsky_points[k]];
        basis_deriv_into(basis, rec.log_p, rec.log_y, rec.log_q, Axis::p, row);
        basis_deriv_into(basis, rec.log_p, rec.log_y, rec.log_q, Axis::y, row2);
        for (std::size_t j = 0; j < nj; ++j) {
            row[j] += cs.slutsky_shares[k] * row2[j];
        }
        put(row, 0.0, RowKind::slutsky);
    }

    if (grid.pin_boundary) {
        const auto edges = regular_grid(box, grid.n_p, grid.n_y, 2);
        cs.pin_rows.resize(static_cast<Eigen::Index>(edges.size()), static_cast<Eigen::Index>(nj));
        cs.pin_values.resize(static_cast<Eigen::Index>(edges.size()));
        for (std::size_t e = 0; e < edges.size(); ++e) {
            basis_eval_into(basis, edges[e].p, edges[e].y, edges[e].q, row);
            for (std::size_t j = 0; j < nj; ++j) {
                cs.pin_rows(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(j)) = row[j];
            }
            cs.pin_values(static_cast<Eigen::Index>(e)) = edges[e].q == box.q_lo ? 0.0 : 1.0;
        }
    }
    return cs;
}

ConstraintSummary summarize_constraints(const ConstraintSet& constraints,
                                        const CoefficientVector& theta) {
    ConstraintSummary s;
    s.regime = constraints.regime;
    s.delta_floor = constraints.delta_floor;
    s.monotone_data = constraints.count(RowKind::monotone_data);
    s.monotone_grid = constraints.count(RowKind::monotone_grid);
    s.bound = constraints.count(RowKind::bound_lower) + constraints.count(RowKind::bound_upper);
    s.slutsky = constraints.count(RowKind::slutsky);
    s.pins = static_cast<std::size_t>(constraints.pin_rows.rows());
    const Eigen::VectorXd slack = constraints.slacks(theta);
    const auto kinds = constraints.kinds();
    constexpr double inf = std::numeric_limits<double>::infinity();
    double mono = inf, bound = inf, slutsky = inf;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        const double v = slack(static_cast<Eigen::Index>(k));
        switch (kinds[k]) {
            case RowKind::monotone_data:
            case RowKind::monotone_grid: mono = std::min(mono, v); break;
            case RowKind::bound_lower:
            case RowKind::bound_upper: bound = std::min(bound, v); break;
            case RowKind::slutsky: slutsky = std::min(slutsky, v); break;
        }
    }
    s.min_monotone_slack = std::isfinite(mono) ? mono : 0.0;
    s.min_bound_slack = std::isfinite(bound) ? bound : 0.0;
    if (std::isfinite(slutsky)) {
        s.min_slutsky_slack = slutsky;
    }
    double viol = slack.size() > 0 ? std::max(0.0, -slack.minCoeff()) : 0.0;
    if (constraints.pin_rows.rows() > 0) {
        viol = std::max(
            viol, (constraints.pin_rows * theta - constraints.pin_values).cwiseAbs().maxCoeff());
    }
    s.max_violation = viol;
    return s;
}

FittedModel model_from_coefficients(CoefficientVector theta, BasisSpec basis, BerksonSpec berkson) {
    validate_coefficients(theta, basis);
    FittedModel m;
    m.theta = std::move(theta);
    m.basis = std::move(basis);
    m.berkson = std::move(berkson);
    m.converged = true;
    return m;
}

// ---------------------------------------------------------------------------
// Barrier Newton solver

namespace {

// Maximizes phi_t(theta) = t * sum_i log d_i + sum_k log s_k over the affine
// set theta = base + N z, for an increasing sequence of t.
class BarrierSolver {
public:
    BarrierSolver(const LikelihoodDesign& lik, const ConstraintSet& cons)
        : lik_(lik),
          cons_(cons),
          np_(lik.price_factor.cols()),
          nb_(lik.income_quantity.cols()),
          nj_(np_ * nb_) {}

    struct Values {
        Eigen::VectorXd d;        // densities
        Eigen::VectorXd s_data;   // data-quadrature monotonicity slacks
        Eigen::VectorXd s_dense;  // dense-row slacks
    };

    // Linear maps of theta; with offsets = false the constant parts are
    // dropped so the result is the directional change along theta.
    Values evaluate(const Eigen::VectorXd& theta, bool offsets) const {
        Values v;
        Eigen::Map<const RowMajorMatrix> coef(theta.data(), np_, nb_);
        const Eigen::MatrixXd c = lik_.income_quantity * coef.transpose();
        v.d = lik_.price_factor.cwiseProduct(c).rowwise().sum();
        const std::size_t n = lik_.households();
        v.s_data.resize(static_cast<Eigen::Index>(cons_.data_rows()));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t r = cons_.data_row_offsets[i]; r < cons_.data_row_offsets[i + 1];
                 ++r) {
                v.s_data(static_cast<Eigen::Index>(r)) =
                    cons_.data_price_factor.row(static_cast<Eigen::Index>(r))
                        .dot(c.row(static_cast<Eigen::Index>(i)));
            }
        }
        if (cons_.dense_rows.rows() > 0) {
            v.s_dense = cons_.dense_rows * theta;
        } else {
            v.s_dense.resize(0);
        }
        if (offsets) {
            v.s_data.array() -= cons_.delta_floor;
            v.s_dense -= cons_.dense_lower;
        }
        return v;
    }

    static double min_value(const Values& v) {
        double m = v.d.size() > 0 ? v.d.minCoeff() : std::numeric_limits<double>::infinity();
        if (v.s_data.size() > 0) {
            m = std::min(m, v.s_data.minCoeff());
        }
        if (v.s_dense.size() > 0) {
            m = std::min(m, v.s_dense.minCoeff());
        }
        return m;
    }

    // Gradient of phi_t and the Hessian of -phi_t, both in theta coordinates.
    // With barrier = false only the t-scaled log-likelihood part is formed.
    void derivatives(const Values& v, double t, Eigen::VectorXd& grad, Eigen::MatrixXd& hess,
                     bool barrier = true) const {
        const Eigen::Index n = static_cast<Eigen::Index>(lik_.households());
        Eigen::MatrixXd u(n, np_);
        // m(i, pair) holds M_i(a, a') for a <= a'.
        const Eigen::Index pairs = np_ * (np_ + 1) / 2;
        Eigen::MatrixXd m(n, pairs);
        Eigen::VectorXd pf(np_);
        Eigen::MatrixXd mi(np_, np_);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double di = v.d(i);
            pf = lik_.price_factor.row(i).transpose();
            u.row(i) = (t / di) * pf.transpose();
            mi.noalias() = (t / (di * di)) * pf * pf.transpose();
            if (barrier) {
                const auto lo = static_cast<Eigen::Index>(cons_.data_row_offsets[i]);
                const auto hi = static_cast<Eigen::Index>(cons_.data_row_offsets[i + 1]);
                for (Eigen::Index r = lo; r < hi; ++r) {
                    const double sr = v.s_data(r);
                    pf = cons_.data_price_factor.row(r).transpose();
                    u.row(i) += (1.0 / sr) * pf.transpose();
                    mi.noalias() += (1.0 / (sr * sr)) * pf * pf.transpose();
                }
            }
            Eigen::Index k = 0;
            for (Eigen::Index a = 0; a < np_; ++a) {
                for (Eigen::Index b = a; b < np_; ++b) {
                    m(i, k++) = mi(a, b);
                }
            }
        }
        const Eigen::MatrixXd& vq = lik_.income_quantity;
        const Eigen::MatrixXd gblocks = u.transpose() * vq;  // P x B
        grad.resize(nj_);
        Eigen::Map<RowMajorMatrix>(grad.data(), np_, nb_) = gblocks;

        hess.setZero(nj_, nj_);
        Eigen::MatrixXd weighted(n, nb_);
        Eigen::Index k = 0;
        for (Eigen::Index a = 0; a < np_; ++a) {
            for (Eigen::Index b = a; b < np_; ++b) {
                weighted = vq.array().colwise() * m.col(k).array();
                const Eigen::MatrixXd block = vq.transpose() * weighted;
                hess.block(a * nb_, b * nb_, nb_, nb_) = block;
                if (b != a) {
                    hess.block(b * nb_, a * nb_, nb_, nb_) = block.transpose();
                }
                ++k;
            }
        }
        if (barrier && cons_.dense_rows.rows() > 0) {
            const Eigen::VectorXd inv = v.s_dense.cwiseInverse();
            grad.noalias() += cons_.dense_rows.transpose() * inv;
            const Eigen::MatrixXd scaled = inv.asDiagonal() * cons_.dense_rows;
            hess.noalias() += scaled.transpose() * scaled;
        }
    }

    // Change in sum log d + barrier_weight * (sum log s) along dir, computed
    // from relative changes so it stays accurate when t * loglik is huge.
    // Returns -inf when the trial point leaves the interior. Rows flagged in
    // `skip` are ignored (used for rows held at equality).
    static double delta_phi(const Values& v, const Values& dv, double t, double alpha,
                            bool barrier = true) {
        auto part = [alpha](const Eigen::VectorXd& x, const Eigen::VectorXd& dx) {
            double acc = 0.0;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                const double rel = alpha * dx(i) / x(i);
                if (!(rel > -1.0)) {
                    return -std::numeric_limits<double>::infinity();
                }
                acc += std::log1p(rel);
            }
            return acc;
        };
        const double a = part(v.d, dv.d);
        if (!barrier) {
            return t * a;
        }
        const double b = part(v.s_data, dv.s_data);
        const double c = part(v.s_dense, dv.s_dense);
        return t * a + b + c;
    }

    // Largest alpha keeping every value positive.
    static double max_step(const Values& v, const Values& dv) {
        double amax = std::numeric_limits<double>::infinity();
        auto scan = [&amax](const Eigen::VectorXd& x, const Eigen::VectorXd& dx) {
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                if (dx(i) < 0.0) {
                    amax = std::min(amax, -x(i) / dx(i));
                }
            }
        };
        scan(v.d, dv.d);
        scan(v.s_data, dv.s_data);
        scan(v.s_dense, dv.s_dense);
        return amax;
    }

    // Inequality row k (data rows first) as a dense vector.
    Eigen::VectorXd row(std::size_t k) const {
        if (k < cons_.data_rows()) {
            const auto it =
                std::upper_bound(cons_.data_row_offsets.begin(), cons_.data_row_offsets.end(), k);
            const auto i = static_cast<Eigen::Index>(it - cons_.data_row_offsets.begin() - 1);
            Eigen::VectorXd out(nj_);
            for (Eigen::Index a = 0; a < np_; ++a) {
                out.segment(a * nb_, nb_) =
                    cons_.data_price_factor(static_cast<Eigen::Index>(k), a) *
                    lik_.income_quantity.row(i).transpose();
            }
            return out;
        }
        return cons_.dense_rows.row(static_cast<Eigen::Index>(k - cons_.data_rows())).transpose();
    }

    double lower(std::size_t k) const {
        return k < cons_.data_rows()
                   ? cons_.delta_floor
                   : cons_.dense_lower(static_cast<Eigen::Index>(k - cons_.data_rows()));
    }

    static Eigen::VectorXd slacks(const Values& v) {
        Eigen::VectorXd s(v.s_data.size() + v.s_dense.size());
        s << v.s_data, v.s_dense;
        return s;
    }

    std::size_t inequality_count() const { return cons_.inequality_count(); }
    Eigen::Index dim() const { return nj_; }

private:
    const LikelihoodDesign& lik_;
    const ConstraintSet& cons_;
    Eigen::Index np_, nb_, nj_;
};

// Orthonormal basis of the null space of e, treating singular values below
// rel_tol * sigma_max as zero.
Eigen::MatrixXd null_space(const Eigen::MatrixXd& e, Eigen::Index dim, double rel_tol = 1e-10) {
    if (e.rows() == 0) {
        return Eigen::MatrixXd::Identity(dim, dim);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double tol = sv.size() > 0 ? sv(0) * rel_tol : 0.0;
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > tol) {
            ++rank;
        }
    }
    return svd.matrixV().rightCols(e.cols() - rank);
}

// Lawson-Hanson non-negative least squares: argmin ||m x - b|| over x >= 0.
Eigen::VectorXd nnls(const Eigen::MatrixXd& m, const Eigen::VectorXd& b) {
    const Eigen::Index k = m.cols();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(k);
    std::vector<bool> passive(static_cast<std::size_t>(k), false);
    const double tol =
        1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff());
    for (int outer = 0; outer < 3 * k + 10; ++outer) {
        const Eigen::VectorXd w = m.transpose() * (b - m * x);
        Eigen::Index best = -1;
        double wmax = tol;
        for (Eigen::Index j = 0; j < k; ++j) {
            if (!passive[static_cast<std::size_t>(j)] && w(j) > wmax) {
                wmax = w(j);
                best = j;
            }
        }
        if (best < 0) {
            break;
        }
        passive[static_cast<std::size_t>(best)] = true;
        for (int inner = 0; inner < 3 * k + 10; ++inner) {
            std::vector<Eigen::Index> idx;
            for (Eigen::Index j = 0; j < k; ++j) {
                if (passive[static_cast<std::size_t>(j)]) {
                    idx.push_back(j);
                }
            }
            Eigen::MatrixXd sub(m.rows(), static_cast<Eigen::Index>(idx.size()));
            for (std::size_t c = 0; c < idx.size(); ++c) {
                sub.col(static_cast<Eigen::Index>(c)) = m.col(idx[c]);
            }
            const Eigen::VectorXd z = sub.completeOrthogonalDecomposition().solve(b);
            bool all_positive = true;
            for (Eigen::Index c = 0; c < z.size(); ++c) {
                if (z(c) <= 0.0) {
                    all_positive = false;
                }
            }
            if (all_positive) {
                for (std::size_t c = 0; c < idx.size(); ++c) {
                    x(idx[c]) = z(static_cast<Eigen::Index>(c));
                }
                break;
            }
            double alpha = 1.0;
            for (std::size_t c = 0; c < idx.size(); ++c) {
                const double zc = z(static_cast<Eigen::Index>(c));
                if (zc <= 0.0) {
                    alpha = std::min(alpha, x(idx[c]) / (x(idx[c]) - zc));
                }
            }
            for (std::size_t c = 0; c < idx.size(); ++c) {
                x(idx[c]) += alpha * (z(static_cast<Eigen::Index>(c)) - x(idx[c]));
                if (x(idx[c]) <= 1e-15 * std::max(1.0, std::abs(x(idx[c])))) {
                    x(idx[c]) = 0.0;
                    passive[static_cast<std::size_t>(idx[c])] = false;
                }
            }
        }
    }
    return x;
}

struct PolishOutcome {
    bool ok = false;
    Eigen::VectorXd theta;
    double stationarity = std::numeric_limits<double>::infinity();
    double complementarity = 0.0;
    int newton = 0;
};

// Newton on the face where `active` rows hold with equality. A step blocked
// by another row adds that row; at a face optimum, rows with zero NNLS
// multiplier are released, except those the next Newton direction would
// immediately push through (a degenerate face can give a zero multiplier to a
// row that is still needed).
PolishOutcome polish_face(const BarrierSolver& solver, const ConstraintSet& cons,
                          const Eigen::VectorXd& theta_start, std::vector<std::size_t> active,
                          const FitOptions& options) {
    PolishOutcome out;
    const Eigen::Index nj = solver.dim();
    const Eigen::MatrixXd pin_null = null_space(cons.pin_rows, nj);
    BarrierSolver::Values vals = solver.evaluate(theta_start, true);
    Eigen::VectorXd s = BarrierSolver::slacks(vals);
    const std::size_t m = static_cast<std::size_t>(s.size());
    std::vector<bool> is_active(m, false);
    for (std::size_t k : active) {
        is_active[k] = true;
    }

    Eigen::VectorXd theta = theta_start;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    Eigen::VectorXd lambda;

    // Equality system of pins and the given rows; optionally moves theta onto it.
    auto face_of = [&](const std::vector<std::size_t>& rows, Eigen::VectorXd* project) {
        const Eigen::Index n_eq = cons.pin_rows.rows() + static_cast<Eigen::Index>(rows.size());
        if (n_eq == 0) {
            return Eigen::MatrixXd(Eigen::MatrixXd::Identity(nj, nj));
        }
        Eigen::MatrixXd e(n_eq, nj);
        Eigen::VectorXd rhs(n_eq);
        if (cons.pin_rows.rows() > 0) {
            e.topRows(cons.pin_rows.rows()) = cons.pin_rows;
            rhs.head(cons.pin_rows.rows()) = cons.pin_values;
        }
        for (std::size_t c = 0; c < rows.size(); ++c) {
            const Eigen::Index r = cons.pin_rows.rows() + static_cast<Eigen::Index>(c);
            e.row(r) = solver.row(rows[c]).transpose();
            rhs(r) = solver.lower(rows[c]);
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeFullV);
        svd.setThreshold(1e-9);
        if (project != nullptr) {
            *project -= svd.solve(e * *project - rhs);
        }
        return Eigen::MatrixXd(svd.matrixV().rightCols(nj - svd.rank()));
    };
    // Newton step on a face at the current iterate; dec < 0 flags failure.
    auto newton_step = [&](const Eigen::MatrixXd& face, double& dec) {
        solver.derivatives(vals, 1.0, grad, hess, false);
        const Eigen::VectorXd gr = face.transpose() * grad;
        if (gr.size() == 0) {
            dec = 0.0;
            return Eigen::VectorXd(Eigen::VectorXd::Zero(nj));
        }
        const Eigen::MatrixXd hr = face.transpose() * hess * face;
        const Eigen::VectorXd dz = hr.ldlt().solve(gr);
        dec = gr.dot(dz);
        if (!(dec >= 0.0) || !dz.allFinite()) {
            dec = -1.0;
        }
        return Eigen::VectorXd(face * dz);
    };

    for (int round = 0; round < 60; ++round) {
        const Eigen::MatrixXd face = face_of(active, &theta);
        vals = solver.evaluate(theta, true);
        if (!(vals.d.minCoeff() > 0.0)) {
            return out;
        }

        bool blocked = false;
        for (int it = 0; it < 60; ++it) {
            double dec = 0.0;
            const Eigen::VectorXd step = newton_step(face, dec);
            if (dec < 0.0) {
                return out;
            }
            if (dec < 1e-20) {
                break;
            }
            const BarrierSolver::Values dv = solver.evaluate(step, false);
            // Step bound from the inactive rows only.
            double amax = 1.0;
            std::size_t arg = m;
            const Eigen::VectorXd ds = BarrierSolver::slacks(dv);
            s = BarrierSolver::slacks(vals);
            for (std::size_t k = 0; k < m; ++k) {
                if (!is_active[k] && ds(static_cast<Eigen::Index>(k)) < 0.0) {
                    const double a = std::max(0.0, s(static_cast<Eigen::Index>(k))) /
                                     -ds(static_cast<Eigen::Index>(k));
                    if (a < amax) {
                        amax = a;
                        arg = k;
                    }
                }
            }
            ++out.newton;
            if (arg < m && amax <= 1e-14) {
                active.push_back(arg);
                is_active[arg] = true;
                blocked = true;
                break;
            }
            double alpha = amax;
            while (alpha > 1e-16 &&
                   BarrierSolver::delta_phi(vals, dv, 1.0, alpha, false) < 1e-4 * alpha * dec) {
                alpha *= 0.5;
            }
            if (alpha <= 1e-16) {
                break;
            }
            theta += alpha * step;
            vals = solver.evaluate(theta, true);
            if (arg < m && alpha == amax) {
                active.push_back(arg);
                is_active[arg] = true;
                blocked = true;
                break;
            }
        }
        if (blocked) {
            continue;
        }

        // Multipliers for the active rows by NNLS in the pin null space.
        solver.derivatives(vals, 1.0, grad, hess, false);
        Eigen::MatrixXd rows_t(nj, static_cast<Eigen::Index>(active.size()));
        for (std::size_t c = 0; c < active.size(); ++c) {
            rows_t.col(static_cast<Eigen::Index>(c)) = solver.row(active[c]);
        }
        const Eigen::MatrixXd pm = pin_null.transpose() * rows_t;
        const Eigen::VectorXd pg = pin_null.transpose() * grad;
        lambda = active.empty() ? Eigen::VectorXd() : nnls(pm, -pg);
        const Eigen::VectorXd resid =
            pin_null * (active.empty() ? pg : Eigen::VectorXd(pg + pm * lambda));
        out.stationarity = resid.size() > 0 ? resid.cwiseAbs().maxCoeff() : 0.0;
        if (out.stationarity <= options.kkt_tol) {
            break;
        }

        std::vector<bool> release(active.size(), false);
        for (std::size_t c = 0; c < active.size(); ++c) {
            release[c] = !(lambda(static_cast<Eigen::Index>(c)) > 0.0);
        }
        std::vector<std::size_t> kept;
        for (int guard = 0; guard < 20; ++guard) {
            kept.clear();
            for (std::size_t c = 0; c < active.size(); ++c) {
                if (!release[c]) {
                    kept.push_back(active[c]);
                }
            }
            if (kept.size() == active.size()) {
                break;
            }
            double dec = 0.0;
            const Eigen::VectorXd step = newton_step(face_of(kept, nullptr), dec);
            if (dec < 0.0) {
                return out;
            }
            const double scale = std::max(1e-300, step.cwiseAbs().maxCoeff());
            bool changed = false;
            for (std::size_t c = 0; c < active.size(); ++c) {
                if (release[c] && solver.row(active[c]).dot(step) < -1e-12 * scale) {
                    release[c] = false;
                    changed = true;
                }
            }
            if (!changed) {
                break;
            }
        }
        if (kept.size() == active.size()) {
            break;
        }
        for (std::size_t c = 0; c < active.size(); ++c) {
            if (release[c]) {
                is_active[active[c]] = false;
            }
        }
        active = std::move(kept);
    }

    s = BarrierSolver::slacks(vals);
    const double viol = s.size() > 0 ? std::max(0.0, -s.minCoeff()) : 0.0;
    double pin_viol = 0.0;
    if (cons.pin_rows.rows() > 0) {
        pin_viol = (cons.pin_rows * theta - cons.pin_values).cwiseAbs().maxCoeff();
    }
    double comp = 0.0;
    for (std::size_t c = 0; c < active.size() && c < static_cast<std::size_t>(lambda.size()); ++c) {
        comp += lambda(static_cast<Eigen::Index>(c)) *
                std::abs(s(static_cast<Eigen::Index>(active[c])));
    }
    out.complementarity = comp;
    out.theta = theta;
    out.ok = out.stationarity <= options.kkt_tol && viol <= options.violation_tol &&
             pin_viol <= options.violation_tol && vals.d.minCoeff() > 0.0;
    return out;
}

// Active-set refinement of a barrier iterate. The barrier leaves active rows
// with slacks far below the rest but the split is not always a clean jump, so
// the cut is tried at each wide gap among the small slacks, widest first.
PolishOutcome polish(const BarrierSolver& solver, const ConstraintSet& cons,
                     const Eigen::VectorXd& theta_start, const FitOptions& options) {
    const BarrierSolver::Values vals = solver.evaluate(theta_start, true);
    const Eigen::VectorXd s = BarrierSolver::slacks(vals);
    const std::size_t m = static_cast<std::size_t>(s.size());
    std::vector<std::size_t> order(m);
    for (std::size_t k = 0; k < m; ++k) {
        order[k] = k;
    }
    const std::size_t scan =
        std::min<std::size_t>(m, 4 * static_cast<std::size_t>(solver.dim()) + 200);
    std::partial_sort(
        order.begin(), order.begin() + static_cast<std::ptrdiff_t>(scan), order.end(),
        [&](std::size_t a, std::size_t b) { return s(a) < s(b) || (s(a) == s(b) && a < b); });

    std::vector<std::pair<double, std::size_t>> cuts;  // (gap ratio, active count)
    if (scan == 0 || s(order[0]) >= 1e-5) {
        cuts.emplace_back(0.0, 0);
    }
    for (std::size_t k = 0; k + 1 < scan; ++k) {
        const double lo = std::max(s(order[k]), 1e-300);
        if (lo >= 1e-5) {
            break;
        }
        const double ratio = s(order[k + 1]) / lo;
        if (ratio > 5.0) {
            cuts.emplace_back(ratio, k + 1);
        }
    }
    std::stable_sort(cuts.begin(), cuts.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    constexpr std::size_t kMaxCuts = 6;
    if (cuts.size() > kMaxCuts) {
        cuts.resize(kMaxCuts);
    }

    PolishOutcome best;
    int newton = 0;
    for (const auto& cut : cuts) {
        PolishOutcome pol =
            polish_face(solver, cons, theta_start,
                        std::vector<std::size_t>(
                            order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut.second)),
                        options);
        newton += pol.newton;
        if (pol.ok) {
            best = std::move(pol);
            break;
        }
    }
    best.newton = newton;
    return best;
}

}  // namespace

FittedModel fit(const Dataset& data, const BasisSpec& basis, const BerksonSpec& berkson,
                const ConstraintSet& constraints, const FitOptions& options) {
    if (data.empty()) {
        throw ValidationError("cannot fit an empty dataset");
    }
    if (constraints.data_income_quantity.rows() != static_cast<Eigen::Index>(data.size())) {
        throw ValidationError("constraint set was built for a different dataset");
    }
    if (!(options.gap_tol > 0.0) || !(options.barrier_growth > 1.0) || options.max_newton < 1) {
        throw ValidationError("invalid fit options");
    }
    const LikelihoodDesign lik = build_likelihood_design(data, basis, berkson);
    const bool pinned = constraints.pin_rows.rows() > 0;

    Eigen::VectorXd theta;
    if (options.initial_theta) {
        theta = *options.initial_theta;
        validate_coefficients(theta, basis);
    } else {
        theta = initial_coefficients(basis, pinned ? 0.0 : options.init_margin, options.init_tilt);
    }
    const Eigen::MatrixXd nspace =
        null_space(constraints.pin_rows, static_cast<Eigen::Index>(basis.size()));

    BarrierSolver solver(lik, constraints);
    BarrierSolver::Values vals = solver.evaluate(theta, true);
    if (!(BarrierSolver::min_value(vals) > 0.0)) {
        throw ValidationError("starting coefficients are not strictly feasible (minimum slack " +
                              format_double(BarrierSolver::min_value(vals)) + ")");
    }

    const double m_rows = static_cast<double>(solver.inequality_count());
    const double n = static_cast<double>(data.size());
    double t = std::max(1.0, m_rows / n);
    int newton = 0;
    bool budget_exhausted = false;
    bool stalled = false;
    constexpr int kMaxWandering = 30;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    constexpr double kDecrementTol = 1e-10;

    while (true) {
        // Centering. Stops at a tiny Newton decrement, or once the decrement
        // stalls at rounding level.
        double prev_dec = std::numeric_limits<double>::infinity();
        int wandering = 0;
        for (;;) {
            solver.derivatives(vals, t, grad, hess);
            const Eigen::VectorXd rg = nspace.transpose() * grad;
            Eigen::MatrixXd rh = nspace.transpose() * hess * nspace;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(rh);
            Eigen::VectorXd dz = ldlt.solve(rg);
            double dec = rg.dot(dz);
            // Rounding can leave the factorization indefinite late on the
            // path; a growing ridge restores a descent direction.
            const double diag = std::max(1.0, rh.diagonal().cwiseAbs().maxCoeff());
            for (double ridge = 1e-12;
                 (ldlt.info() != Eigen::Success || !dz.allFinite() || !(dec >= 0.0)) &&
                 ridge < 1e-3;
                 ridge *= 100.0) {
                Eigen::MatrixXd damped = rh;
                damped.diagonal().array() += ridge * diag;
                ldlt.compute(damped);
                dz = ldlt.solve(rg);
                dec = rg.dot(dz);
            }
            if (!(dec >= 0.0) || !dz.allFinite()) {
                if (newton == 0) {
                    throw NumericalError("barrier Newton system is singular");
                }
                stalled = true;
                break;
            }
            if (dec / 2.0 <= kDecrementTol || (dec < 1e-6 && dec > 0.25 * prev_dec)) {
                break;
            }
            if (newton >= options.max_newton) {
                budget_exhausted = true;
                break;
            }
            // Deep in the barrier path the Hessian is too ill-conditioned for
            // the decrement to settle; hand over to the active-set polish.
            if (dec < 1e-2 && ++wandering >= kMaxWandering) {
                stalled = true;
                break;
            }
            prev_dec = dec;
            const Eigen::VectorXd step = nspace * dz;
            const BarrierSolver::Values dv = solver.evaluate(step, false);
            double alpha = std::min(1.0, 0.99 * BarrierSolver::max_step(vals, dv));
            bool accepted = false;
            while (alpha > 1e-14) {
                if (BarrierSolver::delta_phi(vals, dv, t, alpha) >= 0.01 * alpha * dec) {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            ++newton;
            if (!accepted) {
                break;
            }
            theta += alpha * step;
            vals = solver.evaluate(theta, true);
        }
        if (budget_exhausted || stalled || m_rows / t <= options.gap_tol) {
            break;
        }
        t = std::min(t * options.barrier_growth, m_rows / options.gap_tol);
    }

    FittedModel model;
    model.basis = basis;
    model.berkson = berkson;
    model.iterations = newton;
    const double barrier_loglik = log_likelihood(theta, lik);

    PolishOutcome pol;
    if (!budget_exhausted) {
        pol = polish(solver, constraints, theta, options);
        model.iterations += pol.newton;
    }
    if (pol.ok && log_likelihood(pol.theta, lik) >=
                      barrier_loglik - 1e-9 * std::max(1.0, std::abs(barrier_loglik))) {
        model.theta = pol.theta;
        model.kkt_stationarity = pol.stationarity;
        model.duality_gap = pol.complementarity;
    } else {
        model.theta = theta;
        solver.derivatives(vals, t, grad, hess);
        model.kkt_stationarity = (nspace * (nspace.transpose() * grad) / t).cwiseAbs().maxCoeff();
        model.duality_gap = m_rows / t;
    }
    model.constraints = summarize_constraints(constraints, model.theta);
    model.loglik = log_likelihood(model.theta, lik);
    model.converged = !budget_exhausted && model.kkt_stationarity < options.kkt_tol &&
                      model.duality_gap <= options.gap_tol * (1.0 + 1e-12) &&
                      model.constraints.max_violation <= options.violation_tol;
    return model;
}

FittedModel fit(const Dataset& data, const FitConfig& config) {
    const ConstraintSet cs =
        build_constraints(data, config.basis, config.berkson, config.regime, config.grid);
    return fit(data, config.basis, config.berkson, cs, config.options);
}

// ---------------------------------------------------------------------------
// Bootstrap

std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed, std::size_t rep) {
    if (n == 0) {
        throw ValidationError("cannot resample an empty dataset");
    }
    std::mt19937_64 rng(derive_seed(seed, "estimator/bootstrap", rep));
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) {
        // Rejection-free modulo mapping on 64-bit draws is biased only at
        // the 2^-64 level; a fixed mapping keeps results portable across
        // standard libraries, unlike uniform_int_distribution.
        i = static_cast<std::size_t>(rng() % n);
    }
    return idx;
}

std::vector<BootstrapReplicate> bootstrap(const Dataset& data, const FitConfig& config, int n_reps,
                                          std::uint64_t seed, const BootstrapStatistic& statistic,
                                          bool keep_models) {
    if (n_reps < 1) {
        throw ValidationError("bootstrap needs n_reps >= 1");
    }
    std::vector<BootstrapReplicate> out(static_cast<std::size_t>(n_reps));
    parallel_for(out.size(), [&](std::size_t rep) {
        BootstrapReplicate& r = out[rep];
        r.rep = rep;
        r.indices = bootstrap_indices(data.size(), seed, rep);
        Dataset sample;
        sample.trim_fraction = data.trim_fraction;
        sample.records.reserve(data.size());
        for (std::size_t i : r.indices) {
            sample.records.push_back(data.records[i]);
        }
        try {
            FittedModel m = fit(sample, config);
            if (statistic) {
                r.statistics = statistic(m, sample);
            }
            if (keep_models) {
                r.model = std::move(m);
            }
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });
    return out;
}

PercentileInterval percentile_interval(std::vector<double> stats, double level) {
    if (stats.empty()) {
        throw ValidationError("percentile interval needs at least one statistic");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw ValidationError("interval level must lie in (0, 1)");
    }
    std::sort(stats.begin(), stats.end());
    const double tail = 0.5 * (1.0 - level);
    return {quantile_sorted(stats, tail), quantile_sorted(stats, 1.0 - tail)};
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const ConstraintSummary& s) {
    j = {{"regime", to_string(s.regime)},
         {"delta_floor", s.delta_floor},
         {"monotone_data_rows", s.monotone_data},
         {"monotone_grid_rows", s.monotone_grid},
         {"bound_rows", s.bound},
         {"slutsky_rows", s.slutsky},
         {"pins", s.pins},
         {"min_monotone_slack", s.min_monotone_slack},
         {"min_bound_slack", s.min_bound_slack},
         {"min_slutsky_slack", nullptr},
         {"max_violation", s.max_violation}};
    if (s.min_slutsky_slack) {
        j["min_slutsky_slack"] = *s.min_slutsky_slack;
    }
}

void from_json(const nlohmann::json& j, ConstraintSummary& s) {
    s.regime = shape_regime_from_string(j.at("regime").get<std::string>());
    j.at("delta_floor").get_to(s.delta_floor);
    j.at("monotone_data_rows").get_to(s.monotone_data);
    j.at("monotone_grid_rows").get_to(s.monotone_grid);
    j.at("bound_rows").get_to(s.bound);
    j.at("slutsky_rows").get_to(s.slutsky);
    j.at("pins").get_to(s.pins);
    j.at("min_monotone_slack").get_to(s.min_monotone_slack);
    j.at("min_bound_slack").get_to(s.min_bound_slack);
    if (j.at("min_slutsky_slack").is_null()) {
        s.min_slutsky_slack.reset();
    } else {
        s.min_slutsky_slack = j.at("min_slutsky_slack").get<double>();
    }
    j.at("max_violation").get_to(s.max_violation);
}

void to_json(nlohmann::json& j, const FittedModel& m) {
    std::vector<double> theta(m.theta.data(), m.theta.data() + m.theta.size());
    j = {{"theta", theta},
         {"basis", m.basis},
         {"berkson", m.berkson},
         {"constraints", m.constraints},
         {"loglik", m.loglik},
         {"converged", m.converged},
         {"iterations", m.iterations},
         {"kkt_stationarity", m.kkt_stationarity},
         {"duality_gap", m.duality_gap}};
}

void from_json(const nlohmann::json& j, FittedModel& m) {
    j.at("basis").get_to(m.basis);
    j.at("berkson").get_to(m.berkson);
    const auto theta = j.at("theta").get<std::vector<double>>();
    m.theta =
        Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    validate_coefficients(m.theta, m.basis);
    j.at("constraints").get_to(m.constraints);
    j.at("loglik").get_to(m.loglik);
    j.at("converged").get_to(m.converged);
    j.at("iterations").get_to(m.iterations);
    j.at("kkt_stationarity").get_to(m.kkt_stationarity);
    j.at("duality_gap").get_to(m.duality_gap);
}

}  // namespace bqd
