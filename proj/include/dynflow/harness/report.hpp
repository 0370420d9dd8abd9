#pragma once

// Run reports and their CSV, JSON and plot-data renderings.

#include <Eigen/Core>

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <locale>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "dynflow/error.hpp"
#include "dynflow/mms.hpp"

namespace dynflow::harness {

inline constexpr const char* kVersion = "1.0.0";

struct Series {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    void add(std::vector<double> row) {
        if (row.size() != columns.size()) throw DimensionError("series " + name + ": row width does not match the header");
        rows.push_back(std::move(row));
    }
    bool operator==(const Series& o) const = default;
};

struct CheckOutcome {
    std::string name;
    std::string invariant;  // relation being checked, in terms of worst and tolerance
    double tolerance = 0.0;
    double worst = 0.0;
    bool pass = false;
    bool operator==(const CheckOutcome& o) const = default;
};

struct Provenance {
    std::string command;
    std::string config_hash;  // FNV-1a 64 of the echoed configuration
    std::uint64_t seed = 0;
    std::string version = kVersion;
    std::vector<std::pair<std::string, std::string>> libraries;
    std::string config;  // echoed configuration
    bool operator==(const Provenance& o) const = default;
};

struct RunReport {
    std::string scenario;
    std::string flow;
    std::vector<Series> series;
    std::vector<CheckOutcome> checks;
    ConvergenceTable table;
    Provenance provenance;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
    const Series* find_series(const std::string& name) const {
        for (const auto& s : series)
            if (s.name == name) return &s;
        return nullptr;
    }
    const CheckOutcome* find_check(const std::string& name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }
};

inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::vector<std::pair<std::string, std::string>> library_versions() {
    auto v = [](int a, int b, int c) { return std::to_string(a) + "." + std::to_string(b) + "." + std::to_string(c); };
    return {{"eigen", v(EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)},
            {"nlohmann_json", v(NLOHMANN_JSON_VERSION_MAJOR, NLOHMANN_JSON_VERSION_MINOR, NLOHMANN_JSON_VERSION_PATCH)},
            {"tomlplusplus", v(TOML_LIB_MAJOR, TOML_LIB_MINOR, TOML_LIB_PATCH)}};
}

// 17 significant digits, '.' decimal point regardless of the global locale.
inline std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(17);
    os << x;
    return os.str();
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline nlohmann::json number_json(double x) {
    if (std::isfinite(x)) return x;
    return nullptr;
}

inline double json_number(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunReport& r) {
    using nlohmann::json;
    json j;
    j["scenario"] = r.scenario;
    j["flow"] = r.flow;
    j["passed"] = r.passed();
    json series = json::array();
    for (const auto& s : r.series) {
        json rows = json::array();
        for (const auto& row : s.rows) {
            json jr = json::array();
            for (double x : row) jr.push_back(detail::number_json(x));
            rows.push_back(std::move(jr));
        }
        series.push_back({{"name", s.name}, {"columns", s.columns}, {"rows", std::move(rows)}});
    }
    j["series"] = std::move(series);
    json checks = json::array();
    for (const auto& c : r.checks)
        checks.push_back({{"name", c.name},
                          {"invariant", c.invariant},
                          {"tolerance", detail::number_json(c.tolerance)},
                          {"worst", detail::number_json(c.worst)},
                          {"pass", c.pass}});
    j["checks"] = std::move(checks);
    json rows = json::array();
    for (const auto& row : r.table.rows)
        rows.push_back({{"h", detail::number_json(row.h)}, {"error", detail::number_json(row.error)}, {"order", detail::number_json(row.order)}});
    j["convergence"] = {{"rows", std::move(rows)}, {"fitted_order", detail::number_json(r.table.fitted_order)}};
    json libs = json::object();
    for (const auto& [k, v] : r.provenance.libraries) libs[k] = v;
    j["provenance"] = {{"command", r.provenance.command},
                       {"config_hash", r.provenance.config_hash},
                       {"seed", r.provenance.seed},
                       {"version", r.provenance.version},
                       {"libraries", std::move(libs)},
                       {"config", r.provenance.config}};
    return j;
}

inline RunReport from_json(const nlohmann::json& j) {
    RunReport r;
    try {
        r.scenario = j.at("scenario").get<std::string>();
        r.flow = j.at("flow").get<std::string>();
        for (const auto& js : j.at("series")) {
            Series s;
            s.name = js.at("name").get<std::string>();
            s.columns = js.at("columns").get<std::vector<std::string>>();
            for (const auto& jr : js.at("rows")) {
                std::vector<double> row;
                for (const auto& x : jr) row.push_back(detail::json_number(x));
                s.rows.push_back(std::move(row));
            }
            r.series.push_back(std::move(s));
        }
        for (const auto& jc : j.at("checks"))
            r.checks.push_back({jc.at("name").get<std::string>(), jc.at("invariant").get<std::string>(), detail::json_number(jc.at("tolerance")),
                                detail::json_number(jc.at("worst")), jc.at("pass").get<bool>()});
        const auto& conv = j.at("convergence");
        for (const auto& jr : conv.at("rows"))
            r.table.rows.push_back({detail::json_number(jr.at("h")), detail::json_number(jr.at("error")), detail::json_number(jr.at("order"))});
        r.table.fitted_order = detail::json_number(conv.at("fitted_order"));
        const auto& p = j.at("provenance");
        r.provenance.command = p.at("command").get<std::string>();
        r.provenance.config_hash = p.at("config_hash").get<std::string>();
        r.provenance.seed = p.at("seed").get<std::uint64_t>();
        r.provenance.version = p.at("version").get<std::string>();
        for (const auto& [k, v] : p.at("libraries").items()) r.provenance.libraries.emplace_back(k, v.get<std::string>());
        r.provenance.config = p.at("config").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("", std::string("report.json: ") + e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Files

enum class Format { csv, json, plotdata };

inline Format parse_format(const std::string& s) {
    if (s == "csv") return Format::csv;
    if (s == "json") return Format::json;
    if (s == "plotdata") return Format::plotdata;
    throw LoadError("--format", "must be csv, json or plotdata");
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string() + ": " + std::error_code(errno, std::generic_category()).message());
    out << text;
    out.close();
    if (!out) throw Error("cannot write " + path.string() + ": " + std::error_code(errno, std::generic_category()).message());
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace detail

inline std::string series_csv(const Series& s) {
    std::string out;
    for (std::size_t k = 0; k < s.columns.size(); ++k) out += (k ? "," : "") + detail::csv_field(s.columns[k]);
    out += '\n';
    for (const auto& row : s.rows) {
        for (std::size_t k = 0; k < row.size(); ++k) out += (k ? "," : "") + format_number(row[k]);
        out += '\n';
    }
    return out;
}

inline std::string checks_csv(const RunReport& r) {
    std::string out = "name,invariant,tolerance,worst,pass\n";
    for (const auto& c : r.checks)
        out += detail::csv_field(c.name) + "," + detail::csv_field(c.invariant) + "," + format_number(c.tolerance) + "," +
               format_number(c.worst) + "," + (c.pass ? "1" : "0") + "\n";
    return out;
}

inline std::string convergence_csv(const ConvergenceTable& t) {
    std::string out = "h,error,order\n";
    for (const auto& row : t.rows) out += format_number(row.h) + "," + format_number(row.error) + "," + format_number(row.order) + "\n";
    return out;
}

// Writes the report into dir (created if needed, existing files overwritten).
// Returns the written file names in order.
inline std::vector<std::string> emit(const RunReport& r, Format format, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
    std::vector<std::string> files;
    auto put = [&](const std::string& name, const std::string& text) {
        detail::write_file(dir / name, text);
        files.push_back(name);
    };
    switch (format) {
        case Format::csv:
            for (const auto& s : r.series) put(s.name + ".csv", series_csv(s));
            put("checks.csv", checks_csv(r));
            if (!r.table.rows.empty()) put("convergence.csv", convergence_csv(r.table));
            break;
        case Format::json: put("report.json", to_json(r).dump(2) + "\n"); break;
        case Format::plotdata:
            // One file per quantity: first column of the series against each other column.
            for (const auto& s : r.series) {
                for (std::size_t c = 1; c < s.columns.size(); ++c) {
                    std::string text = "# " + s.columns[0] + " " + s.columns[c] + "\n";
                    for (const auto& row : s.rows) text += format_number(row[0]) + " " + format_number(row[c]) + "\n";
                    put(r.scenario + "_" + s.name + "." + s.columns[c] + ".dat", text);
                }
            }
            if (!r.table.rows.empty()) {
                std::string text = "# h error\n";
                for (const auto& row : r.table.rows) text += format_number(row.h) + " " + format_number(row.error) + "\n";
                put(r.scenario + "_convergence.error.dat", text);
            }
            break;
    }
    return files;
}

inline RunReport load_report(const std::filesystem::path& dir) {
    std::ifstream in(dir / "report.json", std::ios::binary);
    if (!in) throw LoadError("", "cannot open " + (dir / "report.json").string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("", (dir / "report.json").string() + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace dynflow::harness
