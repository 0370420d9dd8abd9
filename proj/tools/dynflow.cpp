// Command line front end of the scenario harness.
//
//   dynflow validate|run|convergence|compare <config>... [--out DIR] [--seed N] [--jobs N] [--format csv|json|plotdata]
//   dynflow report <dir> [--format F] [--out DIR]
//
// Exit status: 0 if every check passed, 1 if a check failed, 2 for
// configuration or usage errors, 3 for solver errors.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dynflow/dynflow.hpp"

namespace fs = std::filesystem;
using namespace dynflow;
using namespace dynflow::harness;

namespace {

struct Flags {
    std::vector<std::string> inputs;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string format;
};

void print_checks(const RunReport& r, std::ostream& os) {
    for (const auto& c : r.checks)
        os << r.scenario << ": " << (c.pass ? "PASS " : "FAIL ") << c.name << " worst=" << format_number(c.worst)
           << " tol=" << format_number(c.tolerance) << "  [" << c.invariant << "]\n";
    if (!r.table.rows.empty()) {
        os << r.scenario << ": convergence h,error,order\n";
        for (const auto& row : r.table.rows)
            os << r.scenario << ":   " << format_number(row.h) << "," << format_number(row.error) << "," << format_number(row.order) << "\n";
        os << r.scenario << ":   fitted order " << format_number(r.table.fitted_order) << "\n";
    }
    os << r.scenario << ": " << (r.passed() ? "all checks passed" : "checks FAILED") << "\n";
}

std::vector<Format> formats(const std::string& f) {
    if (f.empty()) return {Format::csv, Format::json, Format::plotdata};
    return {parse_format(f)};
}

int load_all(const Flags& fl, std::vector<Scenario>& out) {
    for (const auto& path : fl.inputs) {
        try {
            Scenario s = parse_config(path);
            if (fl.seed) {
                if (*fl.seed > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
                    throw LoadError("--seed", "must be below 2^63");
                s.seed = *fl.seed;
            }
            out.push_back(std::move(s));
        } catch (const LoadError& e) {
            std::cerr << "error: " << path << ": " << e.what() << "\n";
            return 2;
        }
    }
    return 0;
}

int cmd_validate(const Flags& fl) {
    std::vector<Scenario> all;
    if (int rc = load_all(fl, all)) return rc;
    for (const auto& s : all) std::cout << echo(s);
    return 0;
}

int cmd_execute(const Flags& fl, Command cmd) {
    std::vector<Scenario> all;
    if (int rc = load_all(fl, all)) return rc;
    std::vector<Format> fmts;
    try {
        fmts = formats(fl.format);
    } catch (const LoadError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    struct Outcome {
        std::optional<RunReport> report;
        std::string error;
        int code = 0;
    };
    // Scenarios run concurrently; a single scenario uses the jobs for its own levels.
    RunOptions inner{all.size() > 1 ? 1 : fl.jobs};
    auto outcomes = parallel_map(all.size(), fl.jobs, [&](std::size_t k) {
        Outcome o;
        try {
            o.report = execute(all[k], cmd, inner);
        } catch (const LoadError& e) {
            o.error = e.what();
            o.code = 2;
        } catch (const std::exception& e) {
            o.error = e.what();
            o.code = 3;
        }
        return o;
    });
    int rc = 0;
    for (std::size_t k = 0; k < all.size(); ++k) {
        const auto& o = outcomes[k];
        if (!o.report) {
            std::cerr << "error: " << fl.inputs[k] << ": " << o.error << "\n";
            rc = std::max(rc, o.code);
            continue;
        }
        const RunReport& r = *o.report;
        fs::path dir = fl.out.empty() ? fs::path("out") / r.scenario : (all.size() > 1 ? fs::path(fl.out) / r.scenario : fs::path(fl.out));
        try {
            for (Format f : fmts) emit(r, f, dir);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            rc = std::max(rc, 3);
            continue;
        }
        print_checks(r, std::cout);
        std::cout << r.scenario << ": wrote " << dir.string() << "\n";
        if (!r.passed()) rc = std::max(rc, 1);
    }
    return rc;
}

int cmd_report(const Flags& fl) {
    int rc = 0;
    for (const auto& d : fl.inputs) {
        try {
            RunReport r = load_report(d);
            print_checks(r, std::cout);
            if (!fl.format.empty()) emit(r, parse_format(fl.format), fl.out.empty() ? fs::path(d) : fs::path(fl.out));
            if (!r.passed()) rc = std::max(rc, 1);
        } catch (const LoadError& e) {
            std::cerr << "error: " << e.what() << "\n";
            rc = std::max(rc, 2);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            rc = std::max(rc, 3);
        }
    }
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Minimizing-movement flows on time-dependent metric measure spaces"};
    app.require_subcommand(1);
    Flags fl;
    auto common = [&](CLI::App* sub, const char* what) {
        sub->add_option("inputs", fl.inputs, what)->required();
        sub->add_option("--out", fl.out, "output directory (default ./out/<scenario>)");
        sub->add_option("--format", fl.format, "csv, json or plotdata (default: all three)")
            ->check(CLI::IsMember({"csv", "json", "plotdata"}));
    };
    auto* validate = app.add_subcommand("validate", "parse configs and print the materialized echo");
    validate->add_option("inputs", fl.inputs, "scenario config files")->required();
    validate->add_option("--seed", fl.seed, "override the probe seed");
    std::vector<std::pair<CLI::App*, Command>> runners;
    for (auto [name, cmd, help] : {std::tuple{"run", Command::run, "run the flow and its check suite"},
                                   std::tuple{"convergence", Command::convergence, "refinement study over grid.h_list"},
                                   std::tuple{"compare", Command::compare, "identify the JKO flow with the adjoint heat flow"}}) {
        auto* sub = app.add_subcommand(name, help);
        common(sub, "scenario config files");
        sub->add_option("--seed", fl.seed, "override the probe seed");
        sub->add_option("--jobs", fl.jobs, "worker threads")->check(CLI::Range(std::size_t{1}, std::size_t{256}));
        runners.emplace_back(sub, cmd);
    }
    auto* report = app.add_subcommand("report", "summarize (and optionally re-emit) a report directory");
    common(report, "report directories");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    if (validate->parsed()) return cmd_validate(fl);
    if (report->parsed()) return cmd_report(fl);
    for (auto& [sub, cmd] : runners)
        if (sub->parsed()) return cmd_execute(fl, cmd);
    return 2;
}
