#include "bqd/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bqd/common.hpp"

namespace bqd {

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
        s = s.substr(1, s.size() - 2);
    }
    return s;
}

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, delim)) {
        out.push_back(trim(field));
    }
    if (!line.empty() && line.back() == delim) {
        out.emplace_back();
    }
    return out;
}

std::optional<double> parse_real(const std::string& s) {
    if (s.empty()) {
        return std::nullopt;
    }
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

std::string row_label(std::size_t row, const std::string& column) {
    return "row " + std::to_string(row) + ", column '" + column + "'";
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema,
                     const std::set<std::string>* known_regions) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open data file: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw ValidationError("data file has no header row: " + path.string());
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = split(line, schema.delimiter);
    auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
        if (name.empty()) {
            return std::nullopt;
        }
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            return std::nullopt;
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    auto require_col = [&](const std::string& name) {
        auto c = find_col(name);
        if (!c) {
            throw ValidationError("data file " + path.string() + " lacks column '" + name + "'");
        }
        return *c;
    };
    const std::size_t col_q = require_col(schema.log_q);
    const std::size_t col_p = require_col(schema.log_p);
    const std::size_t col_y = require_col(schema.log_y);
    const auto col_w = find_col(schema.instrument);
    const auto col_r = find_col(schema.region);

    Dataset data;
    std::set<std::string> unknown;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (trim(line).empty()) {
            continue;
        }
        ++row;
        const auto fields = split(line, schema.delimiter);
        auto numeric = [&](std::size_t col, const std::string& name, bool levels) {
            if (col >= fields.size() || fields[col].empty()) {
                throw ValidationError(row_label(row, name) + ": missing value");
            }
            auto v = parse_real(fields[col]);
            if (!v) {
                throw ValidationError(row_label(row, name) + ": not a finite number ('" +
                                      fields[col] + "')");
            }
            if (levels) {
                if (*v <= 0.0) {
                    throw ValidationError(row_label(row, name) +
                                          ": level value must be positive to take logs");
                }
                return std::log(*v);
            }
            return *v;
        };
        HouseholdRecord rec;
        rec.log_q = numeric(col_q, schema.log_q, schema.q_in_levels);
        rec.log_p = numeric(col_p, schema.log_p, schema.p_in_levels);
        rec.log_y = numeric(col_y, schema.log_y, schema.y_in_levels);
        if (col_w && *col_w < fields.size() && !fields[*col_w].empty()) {
            auto w = parse_real(fields[*col_w]);
            if (!w) {
                throw ValidationError(row_label(row, schema.instrument) +
                                      ": not a finite number ('" + fields[*col_w] + "')");
            }
            rec.instrument = *w;
        }
        if (col_r) {
            if (*col_r >= fields.size() || fields[*col_r].empty()) {
                throw ValidationError(row_label(row, schema.region) + ": missing value");
            }
            rec.region = fields[*col_r];
        } else {
            rec.region = schema.default_region;
        }
        if (known_regions && !known_regions->contains(rec.region)) {
            unknown.insert(rec.region);
        }
        data.records.push_back(std::move(rec));
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& r : unknown) {
            list += (list.empty() ? "" : ", ") + r;
        }
        throw ValidationError("region tags without a Berkson sigma: " + list);
    }
    return data;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data, char delimiter) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ValidationError("cannot write data file: " + path.string());
    }
    const char d = delimiter;
    out << "log_q" << d << "log_p" << d << "log_y" << d << "instrument" << d << "region\n";
    for (const auto& r : data.records) {
        out << format_double(r.log_q) << d << format_double(r.log_p) << d << format_double(r.log_y)
            << d << (r.instrument ? format_double(*r.instrument) : std::string{}) << d << r.region
            << '\n';
    }
}

Dataset trim_quantity(const Dataset& data, double fraction) {
    if (!(fraction >= 0.0 && fraction < 0.5)) {
        throw ValidationError("trim fraction must lie in [0, 0.5)");
    }
    if (data.empty()) {
        throw ValidationError("cannot trim an empty dataset");
    }
    Dataset out;
    out.trim_fraction = fraction;
    if (fraction == 0.0) {
        out.records = data.records;
        out.trim_fraction = data.trim_fraction;
        return out;
    }
    std::vector<double> q;
    q.reserve(data.size());
    for (const auto& r : data.records) {
        q.push_back(r.log_q);
    }
    std::sort(q.begin(), q.end());
    const double lo = quantile_sorted(q, fraction);
    const double hi = quantile_sorted(q, 1.0 - fraction);
    for (const auto& r : data.records) {
        if (r.log_q >= lo && r.log_q <= hi) {
            out.records.push_back(r);
        }
    }
    if (out.size() < 2) {
        throw ValidationError("trimming left fewer than two records");
    }
    return out;
}

std::vector<FieldSummary> summary_stats(const Dataset& data) {
    if (data.empty()) {
        throw ValidationError("summary of an empty dataset");
    }
    auto summarize = [](std::string name, const std::vector<double>& v) {
        FieldSummary s;
        s.field = std::move(name);
        s.n = v.size();
        double sum = 0.0;
        for (double x : v) {
            sum += x;
        }
        s.mean = sum / static_cast<double>(v.size());
        if (v.size() >= 2) {
            double ss = 0.0;
            for (double x : v) {
                ss += (x - s.mean) * (x - s.mean);
            }
            s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        return s;
    };
    std::vector<double> q, p, y, w;
    for (const auto& r : data.records) {
        q.push_back(r.log_q);
        p.push_back(r.log_p);
        y.push_back(r.log_y);
        if (r.instrument) {
            w.push_back(*r.instrument);
        }
    }
    std::vector<FieldSummary> out{summarize("log_q", q), summarize("log_p", p),
                                  summarize("log_y", y)};
    if (!w.empty()) {
        out.push_back(summarize("instrument", w));
    }
    return out;
}

nlohmann::json summary_to_json(const std::vector<FieldSummary>& stats) {
    auto arr = nlohmann::json::array();
    for (const auto& s : stats) {
        arr.push_back({{"field", s.field},
                       {"mean", s.mean},
                       {"sd", s.sd ? nlohmann::json(*s.sd) : nlohmann::json(nullptr)},
                       {"n", s.n}});
    }
    return arr;
}

std::set<std::string> regions_of(const Dataset& data) {
    std::set<std::string> out;
    for (const auto& r : data.records) {
        out.insert(r.region);
    }
    return out;
}

}  // namespace bqd
