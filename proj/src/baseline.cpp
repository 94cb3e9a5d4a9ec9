#include "bqd/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "bqd/common.hpp"

namespace bqd {

namespace {

struct Design {
    Eigen::MatrixXd x;  // n x 3: 1, log p, log y
    Eigen::VectorXd y;
};

Design make_design(const Dataset& data) {
    Design d;
    const auto n = static_cast<Eigen::Index>(data.size());
    d.x.resize(n, 3);
    d.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = data.records[static_cast<std::size_t>(i)];
        d.x(i, 0) = 1.0;
        d.x(i, 1) = r.log_p;
        d.x(i, 2) = r.log_y;
        d.y(i) = r.log_q;
    }
    return d;
}

double rho(double r, double tau) {
    return r < 0.0 ? (tau - 1.0) * r : tau * r;
}

double objective(const Design& d, const Eigen::Vector3d& b, double tau) {
    const Eigen::VectorXd r = d.y - d.x * b;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        acc += rho(r(i), tau);
    }
    return acc;
}

using Basis = std::array<Eigen::Index, 3>;

Eigen::Matrix3d basis_rows(const Design& d, const Basis& h) {
    Eigen::Matrix3d m;
    for (int k = 0; k < 3; ++k) {
        m.row(k) = d.x.row(h[static_cast<std::size_t>(k)]);
    }
    return m;
}

bool nonsingular(const Eigen::Matrix3d& m) {
    Eigen::FullPivLU<Eigen::Matrix3d> lu(m);
    lu.setThreshold(1e-10);
    return lu.rank() == 3;
}

// Greedy basis from the households with the smallest |residual| at b0.
Basis basis_near(const Design& d, const Eigen::Vector3d& b0) {
    const Eigen::VectorXd r = d.y - d.x * b0;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(r.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return std::abs(r(a)) < std::abs(r(b));
    });
    std::vector<Eigen::Index> chosen;
    for (Eigen::Index i : order) {
        Eigen::MatrixXd rows(static_cast<Eigen::Index>(chosen.size() + 1), 3);
        for (std::size_t k = 0; k < chosen.size(); ++k) {
            rows.row(static_cast<Eigen::Index>(k)) = d.x.row(chosen[k]);
        }
        rows.row(static_cast<Eigen::Index>(chosen.size())) = d.x.row(i);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(rows);
        lu.setThreshold(1e-10);
        if (lu.rank() == static_cast<Eigen::Index>(chosen.size() + 1)) {
            chosen.push_back(i);
            if (chosen.size() == 3) {
                return {chosen[0], chosen[1], chosen[2]};
            }
        }
    }
    throw ValidationError("quantile regression design is degenerate");
}

Basis random_basis(const Design& d, Rng& rng) {
    const auto n = static_cast<std::uint64_t>(d.x.rows());
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Basis h{};
        for (auto& v : h) {
            v = static_cast<Eigen::Index>(rng() % n);
        }
        if (h[0] == h[1] || h[0] == h[2] || h[1] == h[2]) {
            continue;
        }
        if (nonsingular(basis_rows(d, h))) {
            return h;
        }
    }
    throw ValidationError("quantile regression design is degenerate");
}

struct VertexResult {
    Eigen::Vector3d b;
    double objective = 0.0;
};

// Descends along edges of the check-loss polyhedron until no edge out of
// the current vertex decreases the objective.
VertexResult descend(const Design& d, double tau, Basis h, int max_pivots) {
    const Eigen::Index n = d.x.rows();
    std::vector<std::pair<double, Eigen::Index>> breaks;
    breaks.reserve(static_cast<std::size_t>(n));
    for (int pivot = 0; pivot <= max_pivots; ++pivot) {
        const Eigen::Matrix3d xh = basis_rows(d, h);
        Eigen::FullPivLU<Eigen::Matrix3d> lu(xh);
        Eigen::Vector3d yh;
        for (int k = 0; k < 3; ++k) {
            yh(k) = d.y(h[static_cast<std::size_t>(k)]);
        }
        const Eigen::Vector3d b = lu.solve(yh);
        const Eigen::Matrix3d xinv = lu.inverse();
        Eigen::VectorXd r = d.y - d.x * b;
        std::vector<char> in_basis(static_cast<std::size_t>(n), 0);
        for (auto i : h) {
            r(i) = 0.0;
            in_basis[static_cast<std::size_t>(i)] = 1;
        }

        double best_slope = 0.0;
        int best_k = -1;
        Eigen::VectorXd best_a;
        for (int k = 0; k < 3; ++k) {
            for (double s : {1.0, -1.0}) {
                const Eigen::Vector3d delta = s * xinv.col(k);
                const Eigen::VectorXd a = d.x * delta;
                double slope = s > 0.0 ? 1.0 - tau : tau;
                double scale = 1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (in_basis[static_cast<std::size_t>(i)]) {
                        continue;
                    }
                    const bool goes_negative = r(i) < 0.0 || (r(i) == 0.0 && a(i) > 0.0);
                    slope += goes_negative ? (1.0 - tau) * a(i) : -tau * a(i);
                    scale += std::abs(a(i));
                }
                // slopes within rounding of zero are not descent directions
                if (slope < -1e-12 * scale && slope < best_slope) {
                    best_slope = slope;
                    best_k = k;
                    best_a = a;
                }
            }
        }
        if (best_k < 0) {
            return {b, objective(d, b, tau)};
        }
        breaks.clear();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (in_basis[static_cast<std::size_t>(i)] || best_a(i) == 0.0 || r(i) == 0.0) {
                continue;
            }
            const double t = r(i) / best_a(i);
            if (t > 0.0) {
                breaks.emplace_back(t, i);
            }
        }
        std::sort(breaks.begin(), breaks.end());
        double slope = best_slope;
        Eigen::Index entering = -1;
        for (const auto& [t, i] : breaks) {
            slope += std::abs(best_a(i));
            if (slope >= 0.0) {
                entering = i;
                break;
            }
        }
        if (entering < 0) {
            throw NumericalError("quantile regression objective is unbounded along an edge");
        }
        h[static_cast<std::size_t>(best_k)] = entering;
    }
    throw ConvergenceError("quantile regression exceeded its pivot budget");
}

void check_tau(double tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw ValidationError("quantile level must lie in (0, 1)");
    }
}

}  // namespace

LogLogFit ols_loglog(const Dataset& data) {
    if (data.size() < 3) {
        throw ValidationError("OLS needs at least three households");
    }
    const Design d = make_design(data);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.x);
    if (qr.rank() < 3) {
        throw ValidationError("OLS design is rank deficient");
    }
    const Eigen::Vector3d b = qr.solve(d.y);
    const Eigen::VectorXd r = d.y - d.x * b;
    LogLogFit fit;
    fit.intercept = b(0);
    fit.price_coef = b(1);
    fit.income_coef = b(2);
    fit.objective = r.squaredNorm();
    fit.n = data.size();
    if (data.size() > 3) {
        const double s2 = fit.objective / static_cast<double>(data.size() - 3);
        const Eigen::Matrix3d xtx_inv = (d.x.transpose() * d.x).inverse();
        fit.std_errors =
            std::array<double, 3>{std::sqrt(s2 * xtx_inv(0, 0)), std::sqrt(s2 * xtx_inv(1, 1)),
                                  std::sqrt(s2 * xtx_inv(2, 2))};
    }
    if (!std::isfinite(fit.intercept) || !std::isfinite(fit.price_coef) ||
        !std::isfinite(fit.income_coef)) {
        throw NumericalError("OLS produced non-finite coefficients");
    }
    return fit;
}

std::vector<double> loglog_residuals(const Dataset& data, const LogLogFit& fit) {
    std::vector<double> out;
    out.reserve(data.size());
    for (const auto& r : data.records) {
        out.push_back(r.log_q - fit.intercept - fit.price_coef * r.log_p -
                      fit.income_coef * r.log_y);
    }
    return out;
}

double check_loss(const Dataset& data, double tau, const std::array<double, 3>& b) {
    double acc = 0.0;
    for (const auto& r : data.records) {
        acc += rho(r.log_q - b[0] - b[1] * r.log_p - b[2] * r.log_y, tau);
    }
    return acc;
}

std::vector<double> qr_restart_objectives(const Dataset& data, double tau,
                                          const QuantileRegOptions& options) {
    check_tau(tau);
    if (data.size() < 3) {
        throw ValidationError("quantile regression needs at least three households");
    }
    if (options.restarts < 0) {
        throw ValidationError("restart count must be non-negative");
    }
    const Design d = make_design(data);
    const LogLogFit ols = ols_loglog(data);
    std::vector<double> out;
    out.push_back(
        descend(d, tau,
                basis_near(d, Eigen::Vector3d(ols.intercept, ols.price_coef, ols.income_coef)),
                options.max_pivots)
            .objective);
    for (int k = 0; k < options.restarts; ++k) {
        Rng rng(derive_seed(options.seed, "baseline/qr_restart", static_cast<std::uint64_t>(k)));
        out.push_back(descend(d, tau, random_basis(d, rng), options.max_pivots).objective);
    }
    return out;
}

LogLogFit qr_loglog(const Dataset& data, double tau, const QuantileRegOptions& options) {
    check_tau(tau);
    if (data.size() < 3) {
        throw ValidationError("quantile regression needs at least three households");
    }
    if (options.restarts < 0) {
        throw ValidationError("restart count must be non-negative");
    }
    const Design d = make_design(data);
    const LogLogFit ols = ols_loglog(data);
    VertexResult best = descend(
        d, tau, basis_near(d, Eigen::Vector3d(ols.intercept, ols.price_coef, ols.income_coef)),
        options.max_pivots);
    for (int k = 0; k < options.restarts; ++k) {
        Rng rng(derive_seed(options.seed, "baseline/qr_restart", static_cast<std::uint64_t>(k)));
        VertexResult v = descend(d, tau, random_basis(d, rng), options.max_pivots);
        if (v.objective < best.objective) {
            best = v;
        }
    }
    LogLogFit fit;
    fit.intercept = best.b(0);
    fit.price_coef = best.b(1);
    fit.income_coef = best.b(2);
    fit.tau = tau;
    fit.objective = best.objective;
    fit.n = data.size();
    return fit;
}

std::string baseline_table_csv(const std::vector<LogLogFit>& fits) {
    std::string out =
        "model,tau,intercept,price_coef,income_coef,intercept_se,price_se,income_se,objective,n\n";
    for (const auto& f : fits) {
        out += f.tau ? "quantile" : "ols";
        out += ",";
        out += f.tau ? format_double(*f.tau) : "NA";
        out += "," + format_double(f.intercept) + "," + format_double(f.price_coef) + "," +
               format_double(f.income_coef);
        for (int k = 0; k < 3; ++k) {
            out += ",";
            out +=
                f.std_errors ? format_double((*f.std_errors)[static_cast<std::size_t>(k)]) : "NA";
        }
        out += "," + format_double(f.objective) + "," + std::to_string(f.n) + "\n";
    }
    return out;
}

nlohmann::json to_json_value(const LogLogFit& f) {
    nlohmann::json j = {{"model", f.tau ? "quantile" : "ols"},
                        {"intercept", f.intercept},
                        {"price_coef", f.price_coef},
                        {"income_coef", f.income_coef},
                        {"objective", f.objective},
                        {"n", f.n}};
    j["tau"] = f.tau ? nlohmann::json(*f.tau) : nlohmann::json(nullptr);
    if (f.std_errors) {
        j["std_errors"] = {{"intercept", (*f.std_errors)[0]},
                           {"price_coef", (*f.std_errors)[1]},
                           {"income_coef", (*f.std_errors)[2]}};
    } else {
        j["std_errors"] = nullptr;
    }
    return j;
}

}  // namespace bqd
