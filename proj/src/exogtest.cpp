#include "bqd/exogtest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "bqd/basis.hpp"
#include "bqd/common.hpp"

namespace bqd {

namespace {

constexpr std::size_t kMcBatch = 10000;

void check_bandwidth(double h) {
    if (!(h > 0.0) || !std::isfinite(h)) {
        throw ValidationError("bandwidth must be positive and finite");
    }
}

void check_tau(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ValidationError("tau must lie in [0, 1]");
    }
}

// n x G matrix of K((x_i - e_g) / h).
Eigen::MatrixXd kernel_weights(std::span<const double> x, std::span<const double> eval,
                               KernelType k, double h) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(x.size()),
                        static_cast<Eigen::Index>(eval.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t g = 0; g < eval.size(); ++g) {
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) =
                kernel_value(k, (x[i] - eval[g]) / h);
        }
    }
    return out;
}

// G x G matrix kappa((x_g - x_g') / h) on the midpoint grid.
Eigen::MatrixXd autocorrelation_matrix(std::size_t grid, KernelType k, double h) {
    const auto x = midpoint_grid(grid);
    const auto G = static_cast<Eigen::Index>(grid);
    Eigen::MatrixXd out(G, G);
    for (Eigen::Index a = 0; a < G; ++a) {
        for (Eigen::Index b = a; b < G; ++b) {
            const double v = kernel_autocorrelation(k, (x[a] - x[b]) / h);
            out(a, b) = v;
            out(b, a) = v;
        }
    }
    return out;
}

std::vector<double> sorted_clipped(std::vector<double> v) {
    for (double& x : v) {
        x = std::max(x, 0.0);
    }
    std::sort(v.begin(), v.end(), std::greater<>());
    return v;
}

std::string format_bound(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.15g", x);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(KernelType k) {
    return k == KernelType::epanechnikov ? "epanechnikov" : "biweight";
}

KernelType kernel_from_string(const std::string& s) {
    if (s == "epanechnikov") {
        return KernelType::epanechnikov;
    }
    if (s == "biweight") {
        return KernelType::biweight;
    }
    throw ValidationError("unknown kernel '" + s + "'");
}

double kernel_value(KernelType k, double u) {
    if (std::abs(u) > 1.0) {
        return 0.0;
    }
    const double a = 1.0 - u * u;
    return k == KernelType::epanechnikov ? 0.75 * a : 0.9375 * a * a;
}

QuadratureRule gauss_legendre(int n) {
    if (n < 1) {
        throw ValidationError("Gauss-Legendre needs at least one node");
    }
    QuadratureRule rule;
    rule.nodes.resize(static_cast<std::size_t>(n));
    rule.weights.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int j = 2; j <= n; ++j) {
                const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                p0 = p1;
                p1 = p2;
            }
            const double pn = n == 1 ? x : p1;
            const double pnm1 = n == 1 ? 1.0 : p0;
            dp = n * (x * pn - pnm1) / (x * x - 1.0);
            const double dx = pn / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) {
                break;
            }
        }
        // recompute the derivative at the converged node for the weight
        double p0 = 1.0, p1 = x;
        for (int j = 2; j <= n; ++j) {
            const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
            p0 = p1;
            p1 = p2;
        }
        dp = n == 1 ? 1.0 : n * (x * p1 - p0) / (x * x - 1.0);
        const auto slot = static_cast<std::size_t>(n - 1 - i);
        rule.nodes[slot] = x;
        rule.weights[slot] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    return rule;
}

double kernel_autocorrelation(KernelType k, double delta) {
    if (std::abs(delta) >= 2.0) {
        return 0.0;
    }
    static const QuadratureRule gl = gauss_legendre(8);
    const double lo = std::max(-1.0, -1.0 - delta);
    const double hi = std::min(1.0, 1.0 - delta);
    const double mid = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    double acc = 0.0;
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
        const double x = mid + half * gl.nodes[i];
        acc += gl.weights[i] * kernel_value(k, x) * kernel_value(k, x + delta);
    }
    return acc * half;
}

double rule_of_thumb_bandwidth(std::span<const double> x) {
    if (x.size() < 2) {
        throw ValidationError("bandwidth rule needs at least two observations");
    }
    double mean = 0.0;
    for (double v : x) {
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) {
        ss += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(x.size() - 1));
    const double h = 1.06 * sd * std::pow(static_cast<double>(x.size()), -0.2);
    if (!(h > 0.0)) {
        throw ValidationError("bandwidth rule gives zero: the variable is constant");
    }
    return h;
}

std::vector<double> rescale_unit(std::span<const double> x) {
    if (x.empty()) {
        return {};
    }
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    const double lo = *mn;
    const double span = *mx - lo;
    if (!(span > 0.0)) {
        throw ValidationError("cannot rescale a constant variable to [0, 1]");
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = (x[i] - lo) / span;
    }
    return out;
}

std::vector<double> kde_1d(std::span<const double> x, KernelType k, double h,
                           std::span<const double> eval) {
    const std::vector<double> ones(x.size(), 1.0);
    return weighted_kde_1d(x, ones, k, h, eval);
}

std::vector<double> weighted_kde_1d(std::span<const double> x, std::span<const double> m,
                                    KernelType k, double h, std::span<const double> eval) {
    check_bandwidth(h);
    if (x.empty()) {
        throw ValidationError("density estimate needs data");
    }
    if (m.size() != x.size()) {
        throw ValidationError("weights and data differ in length");
    }
    const double scale = 1.0 / (static_cast<double>(x.size()) * h);
    std::vector<double> out(eval.size(), 0.0);
    for (std::size_t g = 0; g < eval.size(); ++g) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            acc += m[i] * kernel_value(k, (x[i] - eval[g]) / h);
        }
        out[g] = acc * scale;
    }
    return out;
}

Eigen::MatrixXd kde_2d(std::span<const double> y, std::span<const double> w,
                       std::span<const double> m, KernelType k, double hy, double hw,
                       std::span<const double> eval_y, std::span<const double> eval_w) {
    check_bandwidth(hy);
    check_bandwidth(hw);
    if (y.empty() || y.size() != w.size()) {
        throw ValidationError("bivariate density needs matching nonempty coordinates");
    }
    if (!m.empty() && m.size() != y.size()) {
        throw ValidationError("weights and data differ in length");
    }
    Eigen::MatrixXd ky = kernel_weights(y, eval_y, k, hy);
    const Eigen::MatrixXd kw = kernel_weights(w, eval_w, k, hw);
    if (!m.empty()) {
        for (std::size_t i = 0; i < m.size(); ++i) {
            ky.row(static_cast<Eigen::Index>(i)) *= m[i];
        }
    }
    const double scale = 1.0 / (static_cast<double>(y.size()) * hy * hw);
    return (ky.transpose() * kw) * scale;
}

// ---------------------------------------------------------------------------

std::vector<double> indicator_masses(const FittedModel& model, const Dataset& data, double tau,
                                     const BerksonSpec& berkson, const IndicatorOptions& options) {
    check_tau(tau);
    if (options.n_nodes < 1) {
        throw ValidationError("indicator quadrature needs at least one node");
    }
    const auto& basis = model.basis;
    const auto& box = basis.box;
    std::vector<double> out(data.size());
    std::vector<double> ty(basis.deg_y + 1), tq(basis.deg_q + 1), tp(basis.deg_p + 1);
    std::vector<double> coef(basis.deg_p + 1);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& r = data.records[i];
        cheb_values(basis.deg_y, affine_map(r.log_y, box.y_lo, box.y_hi), ty);
        cheb_values(basis.deg_q, affine_map(r.log_q, box.q_lo, box.q_hi), tq);
        std::fill(coef.begin(), coef.end(), 0.0);
        for (int a = 0; a <= basis.deg_p; ++a) {
            for (int b = 0; b <= basis.deg_y; ++b) {
                for (int c = 0; c <= basis.deg_q; ++c) {
                    coef[a] += ty[b] * tq[c] *
                               model.theta(static_cast<Eigen::Index>(basis.index(a, b, c)));
                }
            }
        }
        // G^-1 along the price error; prices are held inside the model box
        auto g = [&](double eps) {
            const double p = std::clamp(r.log_p + eps, box.p_lo, box.p_hi);
            cheb_values(basis.deg_p, affine_map(p, box.p_lo, box.p_hi), tp);
            double v = 0.0;
            for (int a = 0; a <= basis.deg_p; ++a) {
                v += coef[a] * tp[a];
            }
            // the sieve value is a CDF, so it saturates at 0 and 1
            return std::clamp(v, 0.0, 1.0);
        };
        const double sigma = berkson.sigma(r.region);
        if (sigma == 0.0) {
            out[i] = g(0.0) <= tau ? 1.0 : 0.0;
            continue;
        }
        if (!options.refine_roots) {
            const QuadratureRule rule = make_rule(sigma, options.n_nodes);
            double m = 0.0;
            for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
                if (g(rule.nodes[k]) <= tau) {
                    m += rule.weights[k];
                }
            }
            out[i] = m;
            continue;
        }
        constexpr int kScan = 160;
        const double reach = 8.0 * sigma;
        bool inside = g(-reach) <= tau;
        double m = 0.0;
        double seg_start = -std::numeric_limits<double>::infinity();
        double prev_e = -reach;
        for (int s = 1; s <= kScan; ++s) {
            const double e = -reach + 2.0 * reach * s / kScan;
            const bool now = g(e) <= tau;
            if (now != inside) {
                double lo = prev_e, hi = e;
                for (int it = 0; it < 80 && hi - lo > 1e-15 * sigma; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    if ((g(mid) <= tau) == inside) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                const double root = 0.5 * (lo + hi);
                if (inside) {
                    m += normal_cdf(root / sigma) -
                         (std::isinf(seg_start) ? 0.0 : normal_cdf(seg_start / sigma));
                }
                seg_start = root;
                inside = now;
            }
            prev_e = e;
        }
        if (inside) {
            m += 1.0 - (std::isinf(seg_start) ? 0.0 : normal_cdf(seg_start / sigma));
        }
        out[i] = std::clamp(m, 0.0, 1.0);
    }
    return out;
}

std::vector<double> midpoint_grid(std::size_t n) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    }
    return g;
}

double t_n_1d(std::span<const double> w, std::span<const double> m, double tau, KernelType k,
              double h, std::size_t grid) {
    check_tau(tau);
    if (grid == 0) {
        throw ValidationError("integration grid must be nonempty");
    }
    const auto eval = midpoint_grid(grid);
    const auto f = kde_1d(w, k, h, eval);
    const auto s = weighted_kde_1d(w, m, k, h, eval);
    double acc = 0.0;
    for (std::size_t g = 0; g < grid; ++g) {
        const double d = s[g] - tau * f[g];
        acc += d * d;
    }
    return static_cast<double>(w.size()) * h * acc / static_cast<double>(grid);
}

double t_n_2d(std::span<const double> y, std::span<const double> w, std::span<const double> m,
              double tau, KernelType k, double hy, double hw, std::size_t grid) {
    check_tau(tau);
    if (grid == 0) {
        throw ValidationError("integration grid must be nonempty");
    }
    const auto eval = midpoint_grid(grid);
    const Eigen::MatrixXd f = kde_2d(y, w, {}, k, hy, hw, eval, eval);
    const Eigen::MatrixXd s = kde_2d(y, w, m, k, hy, hw, eval, eval);
    const double g2 = static_cast<double>(grid) * static_cast<double>(grid);
    return static_cast<double>(y.size()) * hy * hw * (s - tau * f).squaredNorm() / g2;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd covariance_matrix_1d(std::span<const double> fhat, double tau, KernelType k,
                                     double h) {
    check_tau(tau);
    check_bandwidth(h);
    const std::size_t G = fhat.size();
    const Eigen::MatrixXd kap = autocorrelation_matrix(G, k, h);
    Eigen::VectorXd root(static_cast<Eigen::Index>(G));
    for (std::size_t g = 0; g < G; ++g) {
        root(static_cast<Eigen::Index>(g)) = std::sqrt(std::max(fhat[g], 0.0));
    }
    const double scale = tau * (1.0 - tau) / static_cast<double>(G);
    return (root.asDiagonal() * kap * root.asDiagonal()) * scale;
}

Eigen::MatrixXd covariance_matrix_2d(const Eigen::MatrixXd& fhat, double tau, KernelType k,
                                     double hy, double hw) {
    check_tau(tau);
    check_bandwidth(hy);
    check_bandwidth(hw);
    if (fhat.rows() != fhat.cols()) {
        throw ValidationError("bivariate covariance expects a square grid");
    }
    const Eigen::Index G = fhat.rows();
    const Eigen::MatrixXd ky = autocorrelation_matrix(static_cast<std::size_t>(G), k, hy);
    const Eigen::MatrixXd kw = autocorrelation_matrix(static_cast<std::size_t>(G), k, hw);
    const double scale = tau * (1.0 - tau) / static_cast<double>(G * G);
    Eigen::MatrixXd c(G * G, G * G);
    for (Eigen::Index i = 0; i < G; ++i) {
        for (Eigen::Index j = 0; j < G; ++j) {
            const double fij = std::sqrt(std::max(fhat(i, j), 0.0));
            for (Eigen::Index a = 0; a < G; ++a) {
                for (Eigen::Index b = 0; b < G; ++b) {
                    const double fab = std::sqrt(std::max(fhat(a, b), 0.0));
                    c(i * G + j, a * G + b) = scale * fij * fab * ky(i, a) * kw(j, b);
                }
            }
        }
    }
    return c;
}

std::string to_string(LnRule r) {
    switch (r) {
        case LnRule::quarter_power: return "quarter_power";
        case LnRule::trace_fraction: return "trace_fraction";
        case LnRule::fixed: return "fixed";
    }
    return "quarter_power";
}

LnRule ln_rule_from_string(const std::string& s) {
    if (s == "quarter_power") {
        return LnRule::quarter_power;
    }
    if (s == "trace_fraction") {
        return LnRule::trace_fraction;
    }
    if (s == "fixed") {
        return LnRule::fixed;
    }
    throw ValidationError("unknown L_n rule '" + s + "'");
}

std::size_t eigen_count(const EigenOptions& options, std::size_t n,
                        std::span<const double> spectrum, double trace) {
    std::size_t want = 0;
    switch (options.rule) {
        case LnRule::quarter_power:
            want = static_cast<std::size_t>(std::floor(std::pow(static_cast<double>(n), 0.25)));
            // guard against pow rounding just below an exact fourth power
            while ((want + 1) * (want + 1) * (want + 1) * (want + 1) <= n) {
                ++want;
            }
            want = std::max<std::size_t>(want, 1);
            break;
        case LnRule::fixed:
            if (options.fixed == 0) {
                throw ValidationError("fixed L_n rule needs a positive count");
            }
            want = options.fixed;
            break;
        case LnRule::trace_fraction: {
            if (!(options.trace_fraction > 0.0 && options.trace_fraction <= 1.0)) {
                throw ValidationError("trace fraction must lie in (0, 1]");
            }
            want = spectrum.size();
            double acc = 0.0;
            for (std::size_t j = 0; j < spectrum.size(); ++j) {
                acc += std::max(spectrum[j], 0.0);
                if (acc >= options.trace_fraction * trace) {
                    want = j + 1;
                    break;
                }
            }
            want = std::max<std::size_t>(want, 1);
            break;
        }
    }
    return std::min(want, spectrum.size());
}

std::vector<double> symmetric_eigenvalues_desc(const Eigen::MatrixXd& a) {
    if (a.rows() != a.cols()) {
        throw ValidationError("eigenvalues need a square matrix");
    }
    if (a.size() > 0) {
        const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
        if (asym > 1e-10) {
            throw NumericalError("covariance matrix is not symmetric (max asymmetry " +
                                 format_double(asym) + ")");
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) {
        throw NumericalError("symmetric eigensolver failed");
    }
    const Eigen::VectorXd ev = es.eigenvalues();
    std::vector<double> out(ev.data(), ev.data() + ev.size());
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

std::vector<double> lanczos_top(
    std::size_t dim, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& matvec,
    std::size_t k, std::uint64_t seed) {
    if (dim == 0 || k == 0) {
        return {};
    }
    const auto n = static_cast<Eigen::Index>(dim);
    const Eigen::Index steps = std::min<Eigen::Index>(n, static_cast<Eigen::Index>(k));
    Eigen::MatrixXd V(n, steps);
    std::vector<double> alpha, beta;
    Rng rng(seed);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(i) = standard_normal(rng);
    }
    v.normalize();
    Eigen::Index m = 0;
    for (; m < steps; ++m) {
        V.col(m) = v;
        Eigen::VectorXd w = matvec(v);
        const double a = v.dot(w);
        alpha.push_back(a);
        // two passes of classical Gram-Schmidt against every previous vector
        for (int pass = 0; pass < 2; ++pass) {
            w -= V.leftCols(m + 1) * (V.leftCols(m + 1).transpose() * w);
        }
        const double b = w.norm();
        if (m + 1 == steps || b <= 1e-12 * std::max(1.0, std::abs(a))) {
            ++m;
            break;
        }
        beta.push_back(b);
        v = w / b;
    }
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        T(i, i) = alpha[static_cast<std::size_t>(i)];
        if (i + 1 < m) {
            T(i, i + 1) = beta[static_cast<std::size_t>(i)];
            T(i + 1, i) = beta[static_cast<std::size_t>(i)];
        }
    }
    return symmetric_eigenvalues_desc(T);
}

EigenSummary covariance_eigenvalues_1d(std::span<const double> fhat, double tau, KernelType k,
                                       double h, std::size_t n, const EigenOptions& options) {
    const Eigen::MatrixXd c = covariance_matrix_1d(fhat, tau, k, h);
    EigenSummary out;
    out.trace = c.trace();
    const auto spectrum = sorted_clipped(symmetric_eigenvalues_desc(c));
    const std::size_t L = eigen_count(options, n, spectrum, out.trace);
    out.eigenvalues.assign(spectrum.begin(), spectrum.begin() + static_cast<std::ptrdiff_t>(L));
    return out;
}

EigenSummary covariance_eigenvalues_2d(const Eigen::MatrixXd& fhat, double tau, KernelType k,
                                       double hy, double hw, std::size_t n,
                                       const EigenOptions& options) {
    check_tau(tau);
    const Eigen::Index G = fhat.rows();
    if (G != fhat.cols() || G == 0) {
        throw ValidationError("bivariate covariance expects a nonempty square grid");
    }
    const auto dim = static_cast<std::size_t>(G * G);
    EigenSummary out;
    const double kap0 = kernel_autocorrelation(k, 0.0);
    const double scale = tau * (1.0 - tau) / static_cast<double>(G * G);
    Eigen::MatrixXd root = fhat.cwiseMax(0.0).cwiseSqrt();
    out.trace = scale * kap0 * kap0 * root.squaredNorm();

    if (dim <= 1024) {
        const auto spectrum =
            sorted_clipped(symmetric_eigenvalues_desc(covariance_matrix_2d(fhat, tau, k, hy, hw)));
        const std::size_t L = eigen_count(options, n, spectrum, out.trace);
        out.eigenvalues.assign(spectrum.begin(), spectrum.begin() + static_cast<std::ptrdiff_t>(L));
        return out;
    }

    const Eigen::MatrixXd ky = autocorrelation_matrix(static_cast<std::size_t>(G), k, hy);
    const Eigen::MatrixXd kw = autocorrelation_matrix(static_cast<std::size_t>(G), k, hw);
    // C = D^(1/2) (Ky kron Kw) D^(1/2) scale, applied as Ky X Kw on the G x G grid
    auto matvec = [&](const Eigen::VectorXd& v) {
        using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const RowMat> x(v.data(), G, G);
        const RowMat sx = root.cwiseProduct(x);
        RowMat y = (ky * sx * kw).cwiseProduct(root) * scale;
        return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(y.data(), G * G));
    };

    const std::uint64_t seed = 0x5eed1a2c3b4dULL;
    std::size_t steps = 0;
    switch (options.rule) {
        case LnRule::trace_fraction: steps = std::min<std::size_t>(dim, 300); break;
        default: {
            const std::size_t L = eigen_count(options, n, std::vector<double>(dim, 1.0), 1.0);
            steps = std::min(dim, std::max<std::size_t>(3 * L, L + 60));
        }
    }
    for (;;) {
        const auto spectrum = sorted_clipped(lanczos_top(dim, matvec, steps, seed));
        const std::size_t L = eigen_count(options, n, spectrum, out.trace);
        const bool enough = options.rule != LnRule::trace_fraction || L < spectrum.size() ||
                            steps >= dim || steps >= 2400;
        if (enough) {
            out.eigenvalues.assign(spectrum.begin(),
                                   spectrum.begin() + static_cast<std::ptrdiff_t>(L));
            return out;
        }
        steps = std::min<std::size_t>(dim, 2 * steps);
    }
}

double WeightedChiSquare::critical_value(double level) const {
    if (!(level > 0.0 && level < 1.0)) {
        throw ValidationError("test level must lie in (0, 1)");
    }
    if (draws.empty()) {
        throw ValidationError("no Monte-Carlo draws");
    }
    return quantile_sorted(draws, 1.0 - level);
}

double WeightedChiSquare::p_value(double t) const {
    if (draws.empty()) {
        throw ValidationError("no Monte-Carlo draws");
    }
    const auto it = std::lower_bound(draws.begin(), draws.end(), t);
    return static_cast<double>(draws.end() - it) / static_cast<double>(draws.size());
}

WeightedChiSquare simulate_weighted_chi_square(std::span<const double> eigenvalues,
                                               std::size_t draws, std::uint64_t seed) {
    if (draws < 1000) {
        throw ValidationError("weighted chi-square simulation needs at least 1000 draws");
    }
    for (double l : eigenvalues) {
        if (!(l >= 0.0) || !std::isfinite(l)) {
            throw ValidationError("eigenvalues must be finite and non-negative");
        }
    }
    WeightedChiSquare out;
    out.draws.assign(draws, 0.0);
    const std::size_t batches = (draws + kMcBatch - 1) / kMcBatch;
    parallel_for(batches, [&](std::size_t b) {
        Rng rng(derive_seed(seed, "exogtest/mc", b));
        const std::size_t end = std::min(draws, (b + 1) * kMcBatch);
        for (std::size_t d = b * kMcBatch; d < end; ++d) {
            double s = 0.0;
            for (double l : eigenvalues) {
                const double z = standard_normal(rng);
                s += l * (z * z);
            }
            out.draws[d] = s;
        }
    });
    std::sort(out.draws.begin(), out.draws.end());
    return out;
}

// ---------------------------------------------------------------------------

std::string to_string(TestVariant v) {
    return v == TestVariant::univariate ? "univariate" : "bivariate";
}

TestVariant test_variant_from_string(const std::string& s) {
    if (s == "univariate") {
        return TestVariant::univariate;
    }
    if (s == "bivariate") {
        return TestVariant::bivariate;
    }
    throw ValidationError("unknown test variant '" + s + "'");
}

std::string IncomeStratum::label() const {
    return format_bound(lo) + "-" + format_bound(hi);
}

BerksonSpec test_berkson(const FittedModel& model, const Dataset& data,
                         const ExogTestConfig& config) {
    if (!(config.factor >= 0.0) || !std::isfinite(config.factor)) {
        throw ValidationError("Berkson factor must be finite and non-negative");
    }
    BerksonSpec spec;
    if (config.common_sigma) {
        if (!(*config.common_sigma >= 0.0)) {
            throw ValidationError("common sigma must be non-negative");
        }
        std::set<std::string> regions;
        for (const auto& r : data.records) {
            regions.insert(r.region);
        }
        for (const auto& region : regions) {
            spec.sigma_by_region[region] = *config.common_sigma;
        }
        spec.global_factor = config.factor;
    } else {
        spec = model.berkson;
        spec.global_factor *= config.factor;
    }
    spec.n_nodes = std::max(config.indicator.n_nodes, spec.n_nodes);
    spec.validate();
    return spec;
}

ExogTestResult run_test_sample(const FittedModel& model, const Dataset& sample,
                               const ExogTestConfig& config, const std::string& label,
                               std::uint64_t seed) {
    check_tau(config.tau);
    const std::size_t n = sample.size();
    if (n < 2) {
        throw ValidationError("stratum " + label + " has fewer than two households");
    }
    std::vector<double> instrument(n), income(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = sample.records[i];
        if (!r.instrument) {
            throw ValidationError("stratum " + label + ": household " + std::to_string(i) +
                                  " has no instrument value");
        }
        instrument[i] = *r.instrument;
        income[i] = r.log_y;
    }
    const BerksonSpec berkson = test_berkson(model, sample, config);
    IndicatorOptions ind = config.indicator;
    ind.n_nodes = berkson.n_nodes;
    const auto masses = indicator_masses(model, sample, config.tau, berkson, ind);
    const KernelType k = config.kernel.kernel;

    ExogTestResult res;
    res.stratum = label;
    res.n = n;
    res.factor = config.factor;
    const auto w = rescale_unit(instrument);
    res.bandwidth_w =
        config.kernel.bandwidth ? *config.kernel.bandwidth : rule_of_thumb_bandwidth(w);
    EigenSummary eig;
    if (config.variant == TestVariant::univariate) {
        const auto grid = midpoint_grid(config.grid_1d);
        res.t_n = t_n_1d(w, masses, config.tau, k, res.bandwidth_w, config.grid_1d);
        const auto f = kde_1d(w, k, res.bandwidth_w, grid);
        eig = covariance_eigenvalues_1d(f, config.tau, k, res.bandwidth_w, n, config.eigen);
    } else {
        const auto y = rescale_unit(income);
        res.bandwidth_y =
            config.kernel.bandwidth ? *config.kernel.bandwidth : rule_of_thumb_bandwidth(y);
        const auto grid = midpoint_grid(config.grid_2d);
        res.t_n =
            t_n_2d(y, w, masses, config.tau, k, res.bandwidth_y, res.bandwidth_w, config.grid_2d);
        const Eigen::MatrixXd f = kde_2d(y, w, {}, k, res.bandwidth_y, res.bandwidth_w, grid, grid);
        eig = covariance_eigenvalues_2d(f, config.tau, k, res.bandwidth_y, res.bandwidth_w, n,
                                        config.eigen);
    }
    res.eigenvalues = std::move(eig.eigenvalues);
    res.trace = eig.trace;
    const WeightedChiSquare null =
        simulate_weighted_chi_square(res.eigenvalues, config.mc_draws, seed);
    res.crit_value = null.critical_value(config.level);
    res.p_value = null.p_value(res.t_n);
    res.reject = res.t_n > res.crit_value;
    return res;
}

std::vector<ExogTestResult> run_test(const FittedModel& model, const Dataset& data,
                                     const ExogTestConfig& config) {
    std::vector<ExogTestResult> out;
    if (config.strata.empty()) {
        out.push_back(run_test_sample(model, data, config, "all",
                                      derive_seed(config.seed, "exogtest/stratum", 0)));
        return out;
    }
    for (std::size_t s = 0; s < config.strata.size(); ++s) {
        const auto& st = config.strata[s];
        if (!(st.hi > st.lo)) {
            throw ValidationError("stratum " + st.label() + " has an empty income range");
        }
        Dataset sub;
        sub.trim_fraction = data.trim_fraction;
        for (const auto& r : data.records) {
            const double inc = std::exp(r.log_y);
            if (inc >= st.lo && inc < st.hi) {
                sub.records.push_back(r);
            }
        }
        if (sub.size() < 2) {
            throw ValidationError("stratum " + st.label() + " contains " +
                                  std::to_string(sub.size()) + " households (need at least 2)");
        }
        out.push_back(run_test_sample(model, sub, config, st.label(),
                                      derive_seed(config.seed, "exogtest/stratum", s)));
    }
    return out;
}

double joint_cutoff(std::size_t k, double level) {
    if (k == 0) {
        throw ValidationError("joint cutoff needs at least one test");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw ValidationError("test level must lie in (0, 1)");
    }
    return 1.0 - std::pow(1.0 - level, 1.0 / static_cast<double>(k));
}

nlohmann::json results_to_json(const std::vector<ExogTestResult>& results, double level) {
    nlohmann::json rows = nlohmann::json::array();
    bool joint_reject = false;
    const double cutoff = results.empty() ? level : joint_cutoff(results.size(), level);
    for (const auto& r : results) {
        rows.push_back({{"stratum", r.stratum},
                        {"n", r.n},
                        {"factor", r.factor},
                        {"t_n", r.t_n},
                        {"crit_5pct", r.crit_value},
                        {"p_value", r.p_value},
                        {"reject", r.reject}});
        joint_reject = joint_reject || r.p_value < cutoff;
    }
    return {{"level", level},
            {"joint_cutoff", cutoff},
            {"joint_reject", joint_reject},
            {"strata", rows}};
}

}  // namespace bqd
