#include "bqd/welfare.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "bqd/demand.hpp"

namespace bqd {

void PricePath::validate() const {
    if (!(p0 > 0.0) || !(p1 > 0.0) || !std::isfinite(p0) || !std::isfinite(p1)) {
        throw ValidationError("price path needs positive finite prices");
    }
}

LevelDemand model_demand(const FittedModel& model, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw ValidationError("tau must lie in (0, 1)");
    }
    return [model, tau](double price, double income) {
        const auto& box = model.basis.box;
        if (!(price > 0.0) || !(income > 0.0)) {
            throw DomainExit("non-positive price or income");
        }
        const double lp = std::log(price);
        const double ly = std::log(income);
        if (lp < box.p_lo || lp > box.p_hi || ly < box.y_lo || ly > box.y_hi) {
            std::ostringstream msg;
            msg << "(log p, log y) = (" << lp << ", " << ly << ") is outside the model box";
            throw DomainExit(msg.str());
        }
        return std::exp(invert_g(model, lp, ly, tau).log_q);
    };
}

double expenditure_path(const LevelDemand& demand, const PricePath& path, double y0, int steps) {
    path.validate();
    if (!(y0 > 0.0) || !std::isfinite(y0)) {
        throw ValidationError("initial expenditure must be positive");
    }
    if (steps < 1) {
        throw ValidationError("ODE needs at least one step");
    }
    if (path.p1 == path.p0) {
        return y0;
    }
    const double dp = path.p1 - path.p0;
    const double h = 1.0 / steps;
    double e = y0;
    double t = 0.0;
    auto rhs = [&](double tt, double ee) {
        try {
            return demand(path.at(tt), ee) * dp;
        } catch (const DomainExit& ex) {
            std::ostringstream msg;
            msg << "price path leaves the demand domain at t = " << tt << ": " << ex.what();
            throw NumericalError(msg.str());
        }
    };
    for (int k = 0; k < steps; ++k) {
        t = static_cast<double>(k) * h;
        const double k1 = rhs(t, e);
        const double k2 = rhs(t + 0.5 * h, e + 0.5 * h * k1);
        const double k3 = rhs(t + 0.5 * h, e + 0.5 * h * k2);
        const double k4 = rhs(t + h, e + h * k3);
        e += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return e;
}

double expenditure_path(const FittedModel& model, double tau, const PricePath& path, double y0,
                        int steps) {
    return expenditure_path(model_demand(model, tau), path, y0, steps);
}

DwlResult deadweight_loss(const LevelDemand& demand, const PricePath& path, double y0, int steps) {
    DwlResult r;
    r.expenditure = expenditure_path(demand, path, y0, steps);
    if (path.p1 == path.p0) {
        r.dwl = 0.0;
        r.tax_revenue = 0.0;
        r.dwl_per_income = 0.0;
        return r;
    }
    double h1 = 0.0;
    try {
        h1 = demand(path.p1, r.expenditure);
    } catch (const DomainExit& ex) {
        throw NumericalError(std::string("demand at the final price is outside the domain: ") +
                             ex.what());
    }
    r.tax_revenue = (path.p1 - path.p0) * h1;
    r.dwl = r.expenditure - y0 - r.tax_revenue;
    if (r.tax_revenue != 0.0) {
        r.dwl_per_tax = r.dwl / r.tax_revenue;
    }
    r.dwl_per_income = r.dwl / y0;
    return r;
}

DwlResult deadweight_loss(const FittedModel& model, double tau, const PricePath& path, double y0,
                          int steps) {
    return deadweight_loss(model_demand(model, tau), path, y0, steps);
}

double richardson_ratio(const LevelDemand& demand, const PricePath& path, double y0, int steps) {
    if (steps < 2 || steps % 2 != 0) {
        throw ValidationError("richardson_ratio needs an even step count >= 2");
    }
    const double coarse = expenditure_path(demand, path, y0, steps / 2);
    const double mid = expenditure_path(demand, path, y0, steps);
    const double fine = expenditure_path(demand, path, y0, 2 * steps);
    const double den = mid - fine;
    if (den == 0.0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return (coarse - mid) / den;
}

PricePath price_change_5_95(const Dataset& data) {
    if (data.empty()) {
        throw ValidationError("price change needs a nonempty dataset");
    }
    std::vector<double> lp;
    lp.reserve(data.size());
    for (const auto& r : data.records) {
        lp.push_back(r.log_p);
    }
    std::sort(lp.begin(), lp.end());
    return {std::exp(quantile_sorted(lp, 0.05)), std::exp(quantile_sorted(lp, 0.95))};
}

std::string dwl_table_csv(const std::vector<DwlCell>& cells) {
    std::vector<std::string> columns;
    std::vector<double> taus;
    std::map<double, std::vector<double>> incomes;
    std::map<std::tuple<double, double, std::string>, const DwlResult*> lookup;
    for (const auto& c : cells) {
        if (std::find(columns.begin(), columns.end(), c.column) == columns.end()) {
            columns.push_back(c.column);
        }
        if (std::find(taus.begin(), taus.end(), c.tau) == taus.end()) {
            taus.push_back(c.tau);
        }
        auto& inc = incomes[c.tau];
        if (std::find(inc.begin(), inc.end(), c.income) == inc.end()) {
            inc.push_back(c.income);
        }
        lookup[{c.tau, c.income, c.column}] = &c.result;
    }
    std::string out = "tau,income,measure";
    for (const auto& col : columns) {
        out += "," + col;
    }
    out += "\n";
    const char* measures[] = {"dwl", "dwl_per_tax", "dwl_per_income_x1e4"};
    for (double tau : taus) {
        for (double income : incomes[tau]) {
            for (int mi = 0; mi < 3; ++mi) {
                out += format_double(tau) + "," + format_double(income) + "," + measures[mi];
                for (const auto& col : columns) {
                    out += ",";
                    auto it = lookup.find({tau, income, col});
                    if (it == lookup.end()) {
                        continue;
                    }
                    const DwlResult& r = *it->second;
                    if (mi == 0) {
                        out += format_double(r.dwl);
                    } else if (mi == 1) {
                        out += r.dwl_per_tax ? format_double(*r.dwl_per_tax) : "NA";
                    } else {
                        out += format_double(r.dwl_per_income * 1e4);
                    }
                }
                out += "\n";
            }
        }
    }
    return out;
}

}  // namespace bqd
