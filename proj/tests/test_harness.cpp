#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "dynflow/dynflow.hpp"

using namespace dynflow;
using namespace dynflow::harness;
namespace fs = std::filesystem;

namespace {

fs::path scenario(const std::string& name) { return fs::path(DYNFLOW_SCENARIO_DIR) / (name + ".toml"); }

fs::path fresh_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / ("dynflow_test_" + name);
    fs::remove_all(d);
    return d;
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[e.path().filename().string()] = ss.str();
    }
    return out;
}

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const LoadError& e) {
        return e.what();
    }
    return "";
}

int cli(const std::string& args) {
    const std::string cmd = std::string(DYNFLOW_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, MinimalConfigGetsDefaults) {
    Scenario s = parse_config_text("name = \"tiny\"\nflow = \"entropy-jko\"\n[initial]\nkind = \"values\"\nvalues = [0.5, 0.5]\n");
    EXPECT_EQ(s.space.kind, "two-point");
    EXPECT_EQ(s.space.n, 2);
    EXPECT_EQ(s.grid.T, 1.0);
    EXPECT_EQ(s.grid.h, 0.05);
    EXPECT_EQ(s.solver.backend, "exact-small");
    EXPECT_EQ(s.checks.quadrature_budget, 1e-4);
    EXPECT_EQ(s.seed, 1u);
}

TEST(Config, ErrorsNameTheOffendingKey) {
    const std::string head = "name = \"x\"\nflow = \"entropy-jko\"\n";
    EXPECT_NE(error_of(head + "[grid]\nh = -0.1\n").find("grid.h"), std::string::npos);
    EXPECT_NE(error_of(head + "[grid]\nstep = 0.1\n").find("grid.step: unknown key"), std::string::npos);
    EXPECT_NE(error_of(head + "[grid]\nh = \"big\"\n").find("grid.h"), std::string::npos);
    EXPECT_NE(error_of(head + "[grid]\nT = 1.0\nh = 0.3\n").find("grid.h"), std::string::npos);
    EXPECT_NE(error_of("name = \"x\"\nflow = \"teleport\"\n").find("flow"), std::string::npos);
    EXPECT_FALSE(error_of("name = [\n").empty());
}

TEST(Config, EchoRoundTrips) {
    for (const char* name : {"quadratic-scalar", "path3-entropy", "heat-eight-node", "adjoint-static", "identify-torus32"}) {
        Scenario s = parse_config(scenario(name));
        Scenario back = parse_config_text(echo(s), "echo");
        EXPECT_EQ(s, back) << name;
        EXPECT_EQ(echo(s), echo(back)) << name;
    }
}

TEST(Report, JsonRoundTripIsExact) {
    auto r = execute(parse_config(scenario("quadratic-scalar")), Command::run);
    r.series.push_back({"odd", {"t", "v"}, {{0.1, std::numeric_limits<double>::quiet_NaN()}}});
    RunReport back = from_json(to_json(r));
    EXPECT_EQ(back.scenario, r.scenario);
    EXPECT_EQ(back.checks, r.checks);
    EXPECT_EQ(back.provenance, r.provenance);
    ASSERT_EQ(back.series.size(), r.series.size());
    for (std::size_t k = 0; k + 1 < r.series.size(); ++k) EXPECT_EQ(back.series[k], r.series[k]);
    EXPECT_TRUE(std::isnan(back.series.back().rows[0][1]));
}

TEST(Report, EmptySeriesGivesHeaderOnlyCsv) {
    EXPECT_EQ(series_csv({"empty", {"t", "x"}, {}}), "t,x\n");
    EXPECT_EQ(format_number(0.1), "0.10000000000000001");
}

TEST(Report, EmissionIsDeterministic) {
    Scenario s = parse_config(scenario("heat-two-node"));
    auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
    for (Format f : {Format::csv, Format::json, Format::plotdata}) {
        emit(execute(s, Command::run), f, a);
        emit(execute(s, Command::run), f, b);
    }
    auto fa = read_dir(a), fb = read_dir(b);
    EXPECT_FALSE(fa.empty());
    EXPECT_EQ(fa, fb);
    EXPECT_TRUE(fa.count("report.json"));
    EXPECT_TRUE(fa.count("checks.csv"));
    EXPECT_EQ(load_report(a).checks, execute(s, Command::run).checks);
}

TEST(Runs, QuadraticEndpoint) {
    auto r = execute(parse_config(scenario("quadratic-scalar")), Command::run);
    const auto* tr = r.find_series("trajectory");
    ASSERT_NE(tr, nullptr);
    EXPECT_NEAR(tr->rows.back()[1], 0.5 * std::exp(-2.0) + 0.5, 5e-3);
    EXPECT_TRUE(r.passed());
}

TEST(Runs, ConstantInitialDataPassesEverything) {
    auto r = execute(parse_config(scenario("heat-constant")), Command::run);
    for (const auto& c : r.checks) EXPECT_TRUE(c.pass) << c.name << " worst " << c.worst;
}

TEST(Runs, SeedChangesProbesOnly) {
    Scenario s = parse_config(scenario("heat-two-node"));
    auto a = execute(s, Command::run);
    s.seed = 99;
    auto b = execute(s, Command::run);
    EXPECT_NE(a.provenance.config_hash, b.provenance.config_hash);
    EXPECT_EQ(b.provenance.seed, 99u);
    EXPECT_TRUE(b.passed());
}

TEST(Convergence, ParallelLevelsMatchSerial) {
    Scenario s = parse_config(scenario("heat-torus64"));
    auto serial = execute(s, Command::convergence, {1});
    auto parallel = execute(s, Command::convergence, {4});
    ASSERT_EQ(serial.table.rows.size(), parallel.table.rows.size());
    for (std::size_t k = 0; k < serial.table.rows.size(); ++k) EXPECT_EQ(serial.table.rows[k].error, parallel.table.rows[k].error);
    EXPECT_EQ(serial.checks, parallel.checks);
}

TEST(Convergence, QuadraticTableMatchesRefineStudy) {
    Scenario s = parse_config(scenario("quadratic-scalar"));
    auto r = execute(s, Command::convergence);
    auto q = scalar_example_problem(1.0);
    auto p = quadratic_step_problem(q);
    std::vector<double> eval;
    TimeGrid coarse(1.0, s.grid.h_list.front());
    for (std::size_t n = 1; n <= coarse.steps(); ++n) eval.push_back(coarse.node(n));
    auto ref = refine_study<Vector>(p, Vector::Zero(1), 1.0, s.grid.h_list, eval,
                                    [](double t) { return Vector::Constant(1, t - 0.5 + 0.5 * std::exp(-2.0 * t)); });
    ASSERT_EQ(r.table.rows.size(), ref.rows.size());
    for (std::size_t k = 0; k < ref.rows.size(); ++k) EXPECT_NEAR(r.table.rows[k].error, ref.rows[k].error, 1e-14);
    EXPECT_NEAR(r.table.fitted_order, 1.0, 0.2);
    EXPECT_TRUE(r.passed());
}

TEST(Cli, ExitCodes) {
    auto out = fresh_dir("cli");
    EXPECT_EQ(cli("validate " + scenario("heat-two-node").string()), 0);
    EXPECT_EQ(cli("run " + scenario("heat-two-node").string() + " --format json --out " + out.string()), 0);
    EXPECT_TRUE(fs::exists(out / "report.json"));
    EXPECT_EQ(cli("report " + out.string()), 0);
    EXPECT_EQ(cli("run /nonexistent.toml"), 2);
    EXPECT_EQ(cli("run " + scenario("heat-two-node").string() + " --jobs 0"), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    auto bad = out / "bad.toml";
    std::ofstream(bad) << "name = \"bad\"\nflow = \"graph-heat\"\n[grid]\nh = -1\n";
    EXPECT_EQ(cli("validate " + bad.string()), 2);
}
