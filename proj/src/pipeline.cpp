#include "bqd/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "bqd/baseline.hpp"
#include "bqd/common.hpp"
#include "bqd/demand.hpp"

namespace bqd {

namespace {

void log_line(const std::string& msg) {
    std::clog << "[bqd] " << msg << '\n';
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw ValidationError("failed while writing " + path.string());
    }
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string short_number(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

ColumnSchema parse_schema(const nlohmann::json& j) {
    check_keys(j,
               {"log_q", "log_p", "log_y", "instrument", "region", "default_region", "delimiter",
                "q_in_levels", "p_in_levels", "y_in_levels"},
               "data.schema");
    ColumnSchema s;
    s.log_q = get_or(j, "log_q", s.log_q);
    s.log_p = get_or(j, "log_p", s.log_p);
    s.log_y = get_or(j, "log_y", s.log_y);
    s.instrument = get_or(j, "instrument", s.instrument);
    s.region = get_or(j, "region", s.region);
    s.default_region = get_or(j, "default_region", s.default_region);
    if (j.contains("delimiter")) {
        const auto d = j.at("delimiter").get<std::string>();
        if (d.size() != 1) {
            throw ValidationError("data.schema.delimiter must be one character");
        }
        s.delimiter = d[0];
    }
    s.q_in_levels = get_or(j, "q_in_levels", s.q_in_levels);
    s.p_in_levels = get_or(j, "p_in_levels", s.p_in_levels);
    s.y_in_levels = get_or(j, "y_in_levels", s.y_in_levels);
    return s;
}

ConstraintGridSpec parse_grid(const nlohmann::json& j) {
    check_keys(
        j, {"n_p", "n_y", "n_q", "delta_floor", "pin_boundary", "per_node_monotonicity", "slutsky"},
        "estimate.grid");
    ConstraintGridSpec g;
    g.n_p = get_or(j, "n_p", g.n_p);
    g.n_y = get_or(j, "n_y", g.n_y);
    g.n_q = get_or(j, "n_q", g.n_q);
    g.delta_floor = get_or(j, "delta_floor", g.delta_floor);
    g.pin_boundary = get_or(j, "pin_boundary", g.pin_boundary);
    g.per_node_monotonicity = get_or(j, "per_node_monotonicity", g.per_node_monotonicity);
    if (j.contains("slutsky")) {
        const auto& s = j.at("slutsky");
        check_keys(s, {"q_lo_pct", "q_hi_pct", "log_p_lo", "log_p_hi", "income_lo", "income_hi"},
                   "estimate.grid.slutsky");
        auto& r = g.slutsky;
        r.q_lo_pct = get_or(s, "q_lo_pct", r.q_lo_pct);
        r.q_hi_pct = get_or(s, "q_hi_pct", r.q_hi_pct);
        r.log_p_lo = get_or(s, "log_p_lo", r.log_p_lo);
        r.log_p_hi = get_or(s, "log_p_hi", r.log_p_hi);
        r.income_lo = get_or(s, "income_lo", r.income_lo);
        r.income_hi = get_or(s, "income_hi", r.income_hi);
    }
    if (g.n_p < 2 || g.n_y < 2 || g.n_q < 2) {
        throw ValidationError("constraint grids need at least two points per axis");
    }
    return g;
}

FitOptions parse_options(const nlohmann::json& j) {
    check_keys(j,
               {"gap_tol", "kkt_tol", "violation_tol", "barrier_growth", "max_newton",
                "init_margin", "init_tilt"},
               "estimate.options");
    FitOptions o;
    o.gap_tol = get_or(j, "gap_tol", o.gap_tol);
    o.kkt_tol = get_or(j, "kkt_tol", o.kkt_tol);
    o.violation_tol = get_or(j, "violation_tol", o.violation_tol);
    o.barrier_growth = get_or(j, "barrier_growth", o.barrier_growth);
    o.max_newton = get_or(j, "max_newton", o.max_newton);
    o.init_margin = get_or(j, "init_margin", o.init_margin);
    o.init_tilt = get_or(j, "init_tilt", o.init_tilt);
    return o;
}

std::vector<double> positive_list(const nlohmann::json& j, const std::string& what) {
    auto v = j.get<std::vector<double>>();
    if (v.empty()) {
        throw ValidationError(what + " must be a nonempty list");
    }
    for (double x : v) {
        if (!(x > 0.0) || !std::isfinite(x)) {
            throw ValidationError(what + " entries must be positive and finite");
        }
    }
    return v;
}

std::vector<double> tau_list(const nlohmann::json& j, const std::string& what) {
    auto v = j.get<std::vector<double>>();
    if (v.empty()) {
        throw ValidationError(what + " must be a nonempty list");
    }
    for (double t : v) {
        if (!(t > 0.0 && t < 1.0)) {
            throw ValidationError(what + " entries must lie in (0, 1)");
        }
    }
    return v;
}

void parse_test(const nlohmann::json& j, TestSection& t) {
    check_keys(j,
               {"factors", "tau", "variant", "strata", "kernel", "bandwidth", "ln_rule",
                "trace_fraction", "ln_fixed", "mc_draws", "grid_1d", "grid_2d", "indicator_nodes",
                "refine_roots", "common_sigma", "level"},
               "test");
    auto& c = t.config;
    if (j.contains("factors")) {
        t.factors = j.at("factors").get<std::vector<double>>();
        if (t.factors.empty()) {
            throw ValidationError("test.factors must be nonempty");
        }
        for (double f : t.factors) {
            if (!(f >= 0.0) || !std::isfinite(f)) {
                throw ValidationError("test.factors entries must be finite and non-negative");
            }
        }
    }
    c.tau = get_or(j, "tau", c.tau);
    if (!(c.tau > 0.0 && c.tau < 1.0)) {
        throw ValidationError("test.tau must lie in (0, 1)");
    }
    if (j.contains("variant")) {
        c.variant = test_variant_from_string(j.at("variant").get<std::string>());
    }
    if (j.contains("strata")) {
        c.strata.clear();
        for (const auto& s : j.at("strata")) {
            const auto pair = s.get<std::vector<double>>();
            if (pair.size() != 2 || !(pair[1] > pair[0])) {
                throw ValidationError("test.strata entries must be [lo, hi] with hi > lo");
            }
            c.strata.push_back({pair[0], pair[1]});
        }
    }
    if (j.contains("kernel")) {
        c.kernel.kernel = kernel_from_string(j.at("kernel").get<std::string>());
    }
    if (j.contains("bandwidth") && !j.at("bandwidth").is_null()) {
        c.kernel.bandwidth = j.at("bandwidth").get<double>();
        if (!(*c.kernel.bandwidth > 0.0)) {
            throw ValidationError("test.bandwidth must be positive");
        }
    }
    if (j.contains("ln_rule")) {
        c.eigen.rule = ln_rule_from_string(j.at("ln_rule").get<std::string>());
    }
    c.eigen.trace_fraction = get_or(j, "trace_fraction", c.eigen.trace_fraction);
    c.eigen.fixed = get_or(j, "ln_fixed", c.eigen.fixed);
    c.mc_draws = get_or(j, "mc_draws", c.mc_draws);
    c.grid_1d = get_or(j, "grid_1d", c.grid_1d);
    c.grid_2d = get_or(j, "grid_2d", c.grid_2d);
    c.indicator.n_nodes = get_or(j, "indicator_nodes", c.indicator.n_nodes);
    c.indicator.refine_roots = get_or(j, "refine_roots", c.indicator.refine_roots);
    if (j.contains("common_sigma")) {
        if (j.at("common_sigma").is_null()) {
            c.common_sigma.reset();
        } else {
            c.common_sigma = j.at("common_sigma").get<double>();
        }
    }
    c.level = get_or(j, "level", c.level);
    if (!(c.level > 0.0 && c.level < 1.0)) {
        throw ValidationError("test.level must lie in (0, 1)");
    }
    if (c.mc_draws < 1000) {
        throw ValidationError("test.mc_draws must be at least 1000");
    }
}

struct Cell {
    bool with_berkson = true;
    ShapeRegime shape = ShapeRegime::unconstrained;
    double factor = 1.0;
    std::string label;
};

// The 2 x 2 (x factors) grid of fitted cells. The no-Berkson fits do not
// depend on the factor and are listed once.
std::vector<Cell> cells_of(const RunConfig& config) {
    std::vector<Cell> out;
    std::set<std::string> seen;
    for (double f : config.estimate.factors) {
        for (bool wb : config.estimate.with_berkson) {
            for (ShapeRegime s : config.estimate.shapes) {
                const double eff = wb ? f : 1.0;
                Cell c{wb, s, eff, model_label(wb, s, eff)};
                if (seen.insert(c.label).second) {
                    out.push_back(c);
                }
            }
        }
    }
    return out;
}

BerksonSpec cell_berkson(const RunConfig& config, const Cell& c) {
    BerksonSpec b = pipeline_berkson(config);
    if (!c.with_berkson) {
        return b.without_error();
    }
    b.global_factor *= c.factor;
    return b;
}

double max_factor(const std::vector<double>& factors) {
    double m = 0.0;
    for (double f : factors) {
        m = std::max(m, f);
    }
    return m;
}

BasisSpec make_basis(const RunConfig& config, const DomainBox& box) {
    BasisSpec b;
    b.deg_p = config.basis.deg_p;
    b.deg_y = config.basis.deg_y;
    b.deg_q = config.basis.deg_q;
    b.box = box;
    b.validate();
    return b;
}

void ensure_output_dir(const RunConfig& config) {
    std::error_code ec;
    std::filesystem::create_directories(config.output_dir, ec);
    if (ec) {
        throw ValidationError("cannot create output directory " + config.output_dir.string() +
                              ": " + ec.message());
    }
}

std::filesystem::path truth_path(const RunConfig& config) {
    return config.output_dir / config.simulate->truth_file;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig parse_run_config(const nlohmann::json& j) {
    check_keys(j,
               {"output_dir", "seed", "simulate", "data", "basis", "berkson", "estimate", "report",
                "test", "baseline"},
               "configuration");
    RunConfig c;
    try {
        if (j.contains("output_dir")) {
            c.output_dir = j.at("output_dir").get<std::string>();
        }
        c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
        if (j.contains("simulate")) {
            nlohmann::json s = j.at("simulate");
            if (!s.is_object()) {
                throw ValidationError("simulate must be a JSON object");
            }
            SimulateSection sec;
            if (s.contains("data_file")) {
                sec.data_file = s.at("data_file").get<std::string>();
                s.erase("data_file");
            }
            if (s.contains("truth_file")) {
                sec.truth_file = s.at("truth_file").get<std::string>();
                s.erase("truth_file");
            }
            if (s.contains("seed")) {
                throw ValidationError(
                    "simulate.seed is not accepted: the DGP seed derives from the master seed");
            }
            sec.dgp = s.get<DgpSpec>();
            c.simulate = std::move(sec);
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            check_keys(d, {"path", "schema", "trim_fraction"}, "data");
            c.data.path = get_or<std::string>(d, "path", "");
            if (d.contains("schema")) {
                c.data.schema = parse_schema(d.at("schema"));
            }
            c.data.trim_fraction = get_or(d, "trim_fraction", c.data.trim_fraction);
            if (!(c.data.trim_fraction >= 0.0 && c.data.trim_fraction < 0.5)) {
                throw ValidationError("data.trim_fraction must lie in [0, 0.5)");
            }
        }
        if (j.contains("basis")) {
            const auto& b = j.at("basis");
            check_keys(b, {"deg_p", "deg_y", "deg_q", "price_extension_sd"}, "basis");
            c.basis.deg_p = get_or(b, "deg_p", c.basis.deg_p);
            c.basis.deg_y = get_or(b, "deg_y", c.basis.deg_y);
            c.basis.deg_q = get_or(b, "deg_q", c.basis.deg_q);
            c.basis.price_extension_sd =
                get_or(b, "price_extension_sd", c.basis.price_extension_sd);
            if (c.basis.deg_p < 0 || c.basis.deg_y < 0 || c.basis.deg_q < 1) {
                throw ValidationError("basis degrees must be non-negative (deg_q at least 1)");
            }
            if (!(c.basis.price_extension_sd >= 0.0)) {
                throw ValidationError("basis.price_extension_sd must be non-negative");
            }
        }
        if (j.contains("berkson")) {
            const auto& b = j.at("berkson");
            check_keys(b, {"family", "sigma_by_region", "n_nodes", "global_factor"}, "berkson");
            c.berkson = b.get<BerksonSpec>();
        }
        if (j.contains("estimate")) {
            const auto& e = j.at("estimate");
            check_keys(e,
                       {"berkson_regimes", "shape_regimes", "factors", "grid", "options",
                        "allow_nonconverged"},
                       "estimate");
            if (e.contains("berkson_regimes")) {
                c.estimate.with_berkson.clear();
                for (const auto& r : e.at("berkson_regimes").get<std::vector<std::string>>()) {
                    if (r == "with") {
                        c.estimate.with_berkson.push_back(true);
                    } else if (r == "without") {
                        c.estimate.with_berkson.push_back(false);
                    } else {
                        throw ValidationError(
                            "estimate.berkson_regimes entries are 'with' or 'without'");
                    }
                }
            }
            if (e.contains("shape_regimes")) {
                c.estimate.shapes.clear();
                for (const auto& r : e.at("shape_regimes").get<std::vector<std::string>>()) {
                    c.estimate.shapes.push_back(shape_regime_from_string(r));
                }
            }
            if (e.contains("factors")) {
                c.estimate.factors = positive_list(e.at("factors"), "estimate.factors");
            }
            if (c.estimate.with_berkson.empty() || c.estimate.shapes.empty()) {
                throw ValidationError("estimate needs at least one Berkson and one shape regime");
            }
            if (e.contains("grid")) {
                c.estimate.grid = parse_grid(e.at("grid"));
            }
            if (e.contains("options")) {
                c.estimate.options = parse_options(e.at("options"));
            }
            c.estimate.allow_nonconverged =
                get_or(e, "allow_nonconverged", c.estimate.allow_nonconverged);
        }
        if (j.contains("report")) {
            const auto& r = j.at("report");
            check_keys(r, {"taus", "incomes", "price_points", "welfare_path", "ode_steps"},
                       "report");
            if (r.contains("taus")) {
                c.report.taus = tau_list(r.at("taus"), "report.taus");
            }
            if (r.contains("incomes")) {
                c.report.incomes = positive_list(r.at("incomes"), "report.incomes");
            }
            c.report.price_points = get_or(r, "price_points", c.report.price_points);
            if (c.report.price_points < 2) {
                throw ValidationError("report.price_points must be at least 2");
            }
            if (r.contains("welfare_path") && !r.at("welfare_path").is_null()) {
                const auto& w = r.at("welfare_path");
                check_keys(w, {"p0", "p1"}, "report.welfare_path");
                PricePath p{w.at("p0").get<double>(), w.at("p1").get<double>()};
                p.validate();
                c.report.welfare_path = p;
            }
            c.report.ode_steps = get_or(r, "ode_steps", c.report.ode_steps);
            if (c.report.ode_steps < 1) {
                throw ValidationError("report.ode_steps must be positive");
            }
        }
        if (j.contains("test")) {
            parse_test(j.at("test"), c.test);
        }
        if (j.contains("baseline")) {
            const auto& b = j.at("baseline");
            check_keys(b, {"taus", "restarts"}, "baseline");
            if (b.contains("taus")) {
                c.baseline.taus = tau_list(b.at("taus"), "baseline.taus");
            }
            c.baseline.restarts = get_or(b, "restarts", c.baseline.restarts);
            if (c.baseline.restarts < 0) {
                throw ValidationError("baseline.restarts must be non-negative");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid configuration: ") + e.what());
    }
    if (c.simulate) {
        c.simulate->dgp.seed = derive_seed(c.seed, "cli/simulate", 0);
        c.simulate->dgp.validate();
    }
    if (!c.berkson && !c.simulate) {
        throw ValidationError("configuration needs a berkson section (or a simulate section)");
    }
    return c;
}

nlohmann::json load_config_json(const std::filesystem::path& path) {
    return read_json(path);
}

RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_json(path));
}

std::string model_label(bool with_berkson, ShapeRegime shape, double factor) {
    std::string s =
        std::string("berkson-") + (with_berkson ? "with" : "without") + "_" + to_string(shape);
    if (with_berkson && factor != 1.0) {
        s += "_factor-" + short_number(factor);
    }
    return s;
}

std::filesystem::path model_path(const RunConfig& config, const std::string& label) {
    return config.output_dir / ("model_" + label + ".json");
}

std::filesystem::path data_path(const RunConfig& config) {
    if (!config.data.path.empty()) {
        return config.data.path;
    }
    if (config.simulate) {
        return config.output_dir / config.simulate->data_file;
    }
    throw ValidationError("data.path is required when nothing is simulated");
}

BerksonSpec pipeline_berkson(const RunConfig& config) {
    if (config.berkson) {
        return *config.berkson;
    }
    return berkson_of(config.simulate->dgp);
}

Dataset load_pipeline_data(const RunConfig& config) {
    const BerksonSpec b = pipeline_berkson(config);
    std::set<std::string> regions;
    for (const auto& [r, s] : b.sigma_by_region) {
        regions.insert(r);
    }
    Dataset d = load_dataset(data_path(config), config.data.schema, &regions);
    if (config.data.trim_fraction > 0.0) {
        d = trim_quantity(d, config.data.trim_fraction);
    }
    if (d.empty()) {
        throw ValidationError("dataset is empty after trimming");
    }
    return d;
}

DomainBox pipeline_box(const RunConfig& config, const Dataset& data, double max_sigma) {
    return box_from_data(data, config.basis.price_extension_sd * max_sigma);
}

void validate_inputs(const RunConfig& config, const std::string& command) {
    const bool simulated_first = command == "all" && config.simulate;
    if (command == "simulate" && !config.simulate) {
        throw ValidationError("simulate needs a simulate section in the configuration");
    }
    if (command != "simulate" && !simulated_first) {
        const auto p = data_path(config);
        if (!std::filesystem::exists(p)) {
            throw ValidationError("data file not found: " + p.string());
        }
    }
    if (command == "report") {
        for (const auto& c : cells_of(config)) {
            const auto p = model_path(config, c.label);
            if (!std::filesystem::exists(p)) {
                throw ValidationError("missing model file " + p.string() + " (run estimate first)");
            }
        }
    }
}

// ---------------------------------------------------------------------------

void cmd_simulate(const RunConfig& config) {
    if (!config.simulate) {
        throw ValidationError("simulate needs a simulate section in the configuration");
    }
    ensure_output_dir(config);
    const Simulation sim = simulate(config.simulate->dgp);
    const auto dp = config.output_dir / config.simulate->data_file;
    write_dataset(dp, sim.data);
    nlohmann::json truth = {{"dgp", config.simulate->dgp}};
    write_text(truth_path(config), truth.dump(2) + "\n");
    log_line("simulated " + std::to_string(sim.data.size()) + " households -> " + dp.string());
}

void cmd_estimate(const RunConfig& config) {
    ensure_output_dir(config);
    const Dataset data = load_pipeline_data(config);
    const BerksonSpec base = pipeline_berkson(config);
    const DomainBox box =
        pipeline_box(config, data, base.max_sigma() * max_factor(config.estimate.factors));
    const BasisSpec basis = make_basis(config, box);
    std::vector<std::string> failed;
    for (const auto& c : cells_of(config)) {
        FitConfig fc;
        fc.basis = basis;
        fc.berkson = cell_berkson(config, c);
        fc.regime = c.shape;
        fc.grid = config.estimate.grid;
        fc.options = config.estimate.options;
        const auto t0 = std::chrono::steady_clock::now();
        const FittedModel m = fit(data, fc);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        nlohmann::json j = m;
        write_text(model_path(config, c.label), j.dump(2) + "\n");
        std::ostringstream msg;
        msg << c.label << ": logL " << format_double(m.loglik) << ", "
            << (m.converged ? "converged" : "NOT converged") << " in " << m.iterations
            << " Newton steps, " << short_number(secs) << " s";
        log_line(msg.str());
        if (!m.converged) {
            failed.push_back(c.label);
        }
    }
    if (!failed.empty() && !config.estimate.allow_nonconverged) {
        std::string list;
        for (const auto& f : failed) {
            list += (list.empty() ? "" : ", ") + f;
        }
        throw ConvergenceError("fits did not converge: " + list +
                               " (use --allow-nonconverged to keep them)");
    }
}

void cmd_report(const RunConfig& config) {
    validate_inputs(config, "report");
    const Dataset data = load_pipeline_data(config);
    const auto cells = cells_of(config);
    std::vector<FittedModel> models;
    for (const auto& c : cells) {
        models.push_back(read_json(model_path(config, c.label)).get<FittedModel>());
    }

    std::vector<double> lp;
    for (const auto& r : data.records) {
        lp.push_back(r.log_p);
    }
    std::sort(lp.begin(), lp.end());
    const auto price_grid = linear_grid(quantile_sorted(lp, 0.05), quantile_sorted(lp, 0.95),
                                        config.report.price_points);
    const PricePath path =
        config.report.welfare_path ? *config.report.welfare_path : price_change_5_95(data);

    std::vector<DwlCell> dwl;
    nlohmann::json model_rows = nlohmann::json::array();
    std::optional<GroundTruth> truth;
    if (config.simulate && std::filesystem::exists(truth_path(config))) {
        const auto tj = read_json(truth_path(config));
        truth = GroundTruth(tj.at("dgp").get<DgpSpec>());
    }
    for (std::size_t k = 0; k < cells.size(); ++k) {
        const auto& m = models[k];
        const auto& box = m.basis.box;
        std::vector<QuantileDemandCurve> curves;
        for (double tau : config.report.taus) {
            for (double inc : config.report.incomes) {
                const double ly = std::log(inc);
                if (ly < box.y_lo || ly > box.y_hi) {
                    throw ValidationError("report income " + short_number(inc) +
                                          " lies outside the model's income range");
                }
                curves.push_back(demand_curve(m, tau, ly, price_grid));
                dwl.push_back({tau, inc, cells[k].label,
                               deadweight_loss(m, tau, path, inc, config.report.ode_steps)});
            }
        }
        write_text(config.output_dir / ("curves_" + cells[k].label + ".csv"), curves_csv(curves));
        nlohmann::json row = {{"label", cells[k].label},
                              {"loglik", m.loglik},
                              {"converged", m.converged},
                              {"iterations", m.iterations},
                              {"kkt_stationarity", m.kkt_stationarity},
                              {"duality_gap", m.duality_gap},
                              {"constraints", m.constraints}};
        if (truth) {
            row["oracle"] = oracle_to_json(oracle_check(*truth, m));
        }
        model_rows.push_back(row);
    }
    write_text(config.output_dir / "dwl_table.csv", dwl_table_csv(dwl));
    nlohmann::json report = {{"n", data.size()},
                             {"data_summary", summary_to_json(summary_stats(data))},
                             {"welfare_path", {{"p0", path.p0}, {"p1", path.p1}}},
                             {"models", model_rows}};
    write_text(config.output_dir / "report.json", report.dump(2) + "\n");
    log_line("report written for " + std::to_string(cells.size()) + " models");
}

void cmd_test(const RunConfig& config) {
    ensure_output_dir(config);
    const Dataset data = load_pipeline_data(config);
    const auto& tc = config.test;
    BerksonSpec spec;
    if (tc.config.common_sigma) {
        for (const auto& r : regions_of(data)) {
            spec.sigma_by_region[r] = *tc.config.common_sigma;
        }
    } else {
        spec = pipeline_berkson(config);
    }
    const DomainBox box = pipeline_box(config, data, spec.max_sigma() * max_factor(tc.factors));
    const BasisSpec basis = make_basis(config, box);
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t fi = 0; fi < tc.factors.size(); ++fi) {
        const double f = tc.factors[fi];
        FitConfig fc;
        fc.basis = basis;
        fc.berkson = spec;
        fc.berkson.global_factor *= f;
        fc.regime = ShapeRegime::unconstrained;
        fc.grid = config.estimate.grid;
        fc.options = config.estimate.options;
        const FittedModel m = fit(data, fc);
        if (!m.converged && !config.estimate.allow_nonconverged) {
            throw ConvergenceError("exogeneity-test fit at factor " + short_number(f) +
                                   " did not converge");
        }
        ExogTestConfig ec = tc.config;
        ec.factor = f;
        ec.seed = derive_seed(config.seed, "cli/test", fi);
        const auto results = run_test(m, data, ec);
        nlohmann::json run = results_to_json(results, ec.level);
        run["factor"] = f;
        runs.push_back(run);
        for (const auto& r : results) {
            log_line("test factor " + short_number(f) + " stratum " + r.stratum + ": T_n " +
                     short_number(r.t_n) + ", crit " + short_number(r.crit_value) + ", p " +
                     short_number(r.p_value));
        }
    }
    nlohmann::json out = {{"variant", to_string(tc.config.variant)},
                          {"tau", tc.config.tau},
                          {"ln_rule", to_string(tc.config.eigen.rule)},
                          {"runs", runs}};
    write_text(config.output_dir / "exogeneity.json", out.dump(2) + "\n");
}

void cmd_baseline(const RunConfig& config) {
    ensure_output_dir(config);
    const Dataset data = load_pipeline_data(config);
    std::vector<LogLogFit> fits;
    fits.push_back(ols_loglog(data));
    QuantileRegOptions qo;
    qo.restarts = config.baseline.restarts;
    qo.seed = derive_seed(config.seed, "cli/baseline", 0);
    for (double tau : config.baseline.taus) {
        fits.push_back(qr_loglog(data, tau, qo));
    }
    write_text(config.output_dir / "baseline.csv", baseline_table_csv(fits));
    log_line("baseline fits written");
}

void cmd_all(const RunConfig& config) {
    if (config.simulate) {
        cmd_simulate(config);
    }
    cmd_estimate(config);
    cmd_report(config);
    cmd_test(config);
    cmd_baseline(config);
}

void run_command(const std::string& command, const RunConfig& config) {
    static const std::set<std::string> known = {"simulate", "estimate", "report",
                                                "test",     "baseline", "all"};
    if (!known.count(command)) {
        throw ValidationError("unknown command '" + command + "'");
    }
    validate_inputs(config, command);
    if (command == "simulate") {
        cmd_simulate(config);
    } else if (command == "estimate") {
        cmd_estimate(config);
    } else if (command == "report") {
        cmd_report(config);
    } else if (command == "test") {
        cmd_test(config);
    } else if (command == "baseline") {
        cmd_baseline(config);
    } else {
        cmd_all(config);
    }
}

}  // namespace bqd
