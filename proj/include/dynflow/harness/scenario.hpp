#pragma once

// Scenario configuration: a flat TOML subset with dotted sections. Every key is
// validated eagerly, unknown keys are rejected, and all defaults are
// materialized so that echo() re-parses to an identical Scenario.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <toml.hpp>

#include "dynflow/error.hpp"

namespace dynflow::harness {

struct SpaceSpec {
    std::string kind = "two-point";  // two-point | path | complete | torus | rn-quadratic
    std::int64_t n = 0;              // 0 at parse time means "default for the kind"
    double spacing = 1.0;            // edge length of two-point, path and complete spaces
    std::string base = "uniform";    // uniform | random | values
    std::vector<double> weights;     // base measure when base = "values"
    std::int64_t seed = 7;           // structural seed for base = "random"
    bool operator==(const SpaceSpec&) const = default;
};

struct MetricSpec {
    std::string kind = "constant";  // constant | conformal-linear (d_t = e^{rate t} d_0)
    double rate = 0.0;
    bool operator==(const MetricSpec&) const = default;
};

struct MeasureSpec {
    std::string kind = "static";      // static | linear (f = a t V) | sinusoidal (f = a sin(w t) V)
    std::string potential = "cosine";  // cosine | sine-index | values
    std::vector<double> values;
    double amplitude = 1.0;
    double omega = 1.0;
    bool operator==(const MeasureSpec&) const = default;
};

struct FormSpec {
    std::string kind = "none";  // none | constant | random-dense | torus
    double weight = 1.0;        // constant: w = weight on every edge of the space
    double low = 0.2;           // random-dense: w_0 ~ U(low, high)
    double high = 1.0;
    double decay = 0.0;         // w_t = e^{-decay t} w_0
    std::int64_t seed = 7;
    bool operator==(const FormSpec&) const = default;
};

struct InitialSpec {
    std::string kind = "uniform";  // uniform | values | bump | random | constant
    std::vector<double> values;
    double sigma = 0.1;
    double floor = 0.0;
    double center = 0.5;
    double value = 1.0;
    bool operator==(const InitialSpec&) const = default;
};

struct GridSpec {
    double T = 1.0;
    double h = 0.05;
    std::vector<double> h_list;
    bool operator==(const GridSpec&) const = default;
};

struct SolverSpec {
    std::string backend = "exact-small";  // exact-small | scaling
    double tolerance = 1e-10;
    double scaling_tolerance = 1e-9;
    std::int64_t quadrature_nodes = 3;
    double adaptive_tol = 0.0;
    std::int64_t max_depth = 14;
    std::string heat_scheme = "implicit-euler";  // implicit-euler | crank-nicolson
    bool operator==(const SolverSpec&) const = default;
};

struct QuadraticSpec {
    std::string example = "scalar";  // E_t(x) = (x - t)^2 on R
    std::vector<double> x0{0.0};
    bool operator==(const QuadraticSpec&) const = default;
};

struct ChecksSpec {
    std::int64_t probes = 8;
    double algebra_tol = 1e-10;
    double quadrature_budget = 1e-4;
    double endpoint_tol = 5e-3;
    double kuwada_slack = 0.15;
    std::int64_t kuwada_times = 10;
    double kuwada_end = 0.0;  // 0 means T/2
    std::int64_t dissipation_times = 9;
    double dissipation_tol = 0.1;
    double halving_factor = 2.0;
    double halving_band = 0.25;
    bool operator==(const ChecksSpec&) const = default;
};

struct Scenario {
    std::string name;
    std::string flow;  // entropy-jko | graph-heat | adjoint-forward | quadratic-hilbert | identify
    std::uint64_t seed = 1;
    SpaceSpec space;
    MetricSpec metric;
    MeasureSpec measure;
    FormSpec form;
    InitialSpec initial;
    GridSpec grid;
    SolverSpec solver;
    QuadraticSpec quadratic;
    ChecksSpec checks;
    bool operator==(const Scenario&) const = default;
};

inline const std::vector<std::string>& flow_names() {
    static const std::vector<std::string> names{"entropy-jko", "graph-heat", "adjoint-forward", "quadratic-hilbert", "identify"};
    return names;
}

namespace detail {

inline bool one_of(const std::string& v, std::initializer_list<std::string_view> opts) {
    return std::any_of(opts.begin(), opts.end(), [&](std::string_view o) { return v == o; });
}

inline std::string join_path(std::string_view section, std::string_view key) {
    return section.empty() ? std::string(key) : std::string(section) + "." + std::string(key);
}

// Typed access to one table with key-path errors and unknown-key rejection.
class Section {
public:
    Section(const toml::table* t, std::string section, std::initializer_list<std::string_view> allowed)
        : t_(t), section_(std::move(section)) {
        if (!t_) return;
        for (auto&& [k, v] : *t_) {
            std::string key(k.str());
            if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
                throw LoadError(join_path(section_, key), "unknown key");
        }
    }

    void number(std::string_view key, double& out) const {
        const toml::node* n = find(key);
        if (!n) return;
        if (auto f = n->as_floating_point()) out = f->get();
        else if (auto i = n->as_integer()) out = static_cast<double>(i->get());
        else throw LoadError(path(key), "expected a number");
        if (!std::isfinite(out)) throw LoadError(path(key), "must be finite");
    }

    void integer(std::string_view key, std::int64_t& out) const {
        const toml::node* n = find(key);
        if (!n) return;
        if (auto i = n->as_integer()) out = i->get();
        else throw LoadError(path(key), "expected an integer");
    }

    void string(std::string_view key, std::string& out) const {
        const toml::node* n = find(key);
        if (!n) return;
        if (auto s = n->as_string()) out = s->get();
        else throw LoadError(path(key), "expected a string");
    }

    void numbers(std::string_view key, std::vector<double>& out) const {
        const toml::node* n = find(key);
        if (!n) return;
        auto arr = n->as_array();
        if (!arr) throw LoadError(path(key), "expected an array of numbers");
        out.clear();
        for (std::size_t k = 0; k < arr->size(); ++k) {
            const toml::node& e = *arr->get(k);
            if (auto f = e.as_floating_point()) out.push_back(f->get());
            else if (auto i = e.as_integer()) out.push_back(static_cast<double>(i->get()));
            else throw LoadError(path(key) + "[" + std::to_string(k) + "]", "expected a number");
            if (!std::isfinite(out.back())) throw LoadError(path(key) + "[" + std::to_string(k) + "]", "must be finite");
        }
    }

    std::string path(std::string_view key) const { return join_path(section_, key); }

private:
    const toml::node* find(std::string_view key) const { return t_ ? t_->get(key) : nullptr; }
    const toml::table* t_;
    std::string section_;
};

inline void require(bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw LoadError(key, what);
}

inline std::int64_t default_size(const std::string& kind) {
    if (kind == "two-point") return 2;
    if (kind == "path") return 3;
    if (kind == "complete") return 4;
    if (kind == "torus") return 32;
    return 1;
}

}  // namespace detail

// Checks every invariant that can be decided from the configuration alone and
// materializes size-dependent defaults. Families built from the scenario are
// checked again by the runner when they are constructed.
inline void validate(Scenario& s) {
    using detail::one_of;
    using detail::require;
    require(!s.name.empty(), "name", "must be a nonempty string");
    require(std::all_of(s.name.begin(), s.name.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'; }),
            "name", "may only contain letters, digits, '-', '_' and '.'");
    require(std::find(flow_names().begin(), flow_names().end(), s.flow) != flow_names().end(), "flow",
            "must be one of entropy-jko, graph-heat, adjoint-forward, quadratic-hilbert, identify");

    auto& sp = s.space;
    require(one_of(sp.kind, {"two-point", "path", "complete", "torus", "rn-quadratic"}), "space.kind",
            "must be one of two-point, path, complete, torus, rn-quadratic");
    if (sp.n == 0) sp.n = detail::default_size(sp.kind);
    if (sp.kind == "two-point") require(sp.n == 2, "space.n", "a two-point space has n = 2");
    if (sp.kind == "path" || sp.kind == "complete") require(sp.n >= 2 && sp.n <= 4096, "space.n", "must lie in [2, 4096]");
    if (sp.kind == "torus") require(sp.n >= 3 && sp.n <= 4096, "space.n", "must lie in [3, 4096]");
    if (sp.kind == "rn-quadratic") require(sp.n == 1, "space.n", "the quadratic testbed is one-dimensional");
    require(sp.spacing > 0.0, "space.spacing", "must be positive");
    require(one_of(sp.base, {"uniform", "random", "values"}), "space.base", "must be one of uniform, random, values");
    if (sp.base == "values") {
        require(static_cast<std::int64_t>(sp.weights.size()) == sp.n, "space.weights", "needs one weight per point");
        for (std::size_t k = 0; k < sp.weights.size(); ++k)
            require(sp.weights[k] > 0.0, "space.weights[" + std::to_string(k) + "]", "must be positive");
    } else {
        require(sp.weights.empty(), "space.weights", "only allowed with base = \"values\"");
    }
    if (sp.kind == "torus") require(sp.base == "uniform", "space.base", "the torus carries the uniform base measure");

    auto& me = s.metric;
    require(one_of(me.kind, {"constant", "conformal-linear"}), "metric.kind", "must be constant or conformal-linear");
    if (me.kind == "constant") require(me.rate == 0.0, "metric.rate", "must be 0 for a constant metric");

    auto& mu = s.measure;
    require(one_of(mu.kind, {"static", "linear", "sinusoidal"}), "measure.kind", "must be static, linear or sinusoidal");
    require(one_of(mu.potential, {"cosine", "sine-index", "values"}), "measure.potential", "must be cosine, sine-index or values");
    if (mu.potential == "values") require(static_cast<std::int64_t>(mu.values.size()) == sp.n, "measure.values", "needs one value per point");
    else require(mu.values.empty(), "measure.values", "only allowed with potential = \"values\"");
    require(mu.omega > 0.0, "measure.omega", "must be positive");
    if (sp.kind == "torus")
        require(mu.kind != "linear" && mu.potential == "cosine", "measure", "the torus supports static or sinusoidal cosine potentials");

    auto& fo = s.form;
    require(one_of(fo.kind, {"none", "constant", "random-dense", "torus"}), "form.kind", "must be none, constant, random-dense or torus");
    require(fo.weight > 0.0, "form.weight", "must be positive");
    require(fo.low > 0.0, "form.low", "must be positive");
    require(fo.high >= fo.low, "form.high", "must be at least form.low");
    require(fo.decay >= 0.0, "form.decay", "must be nonnegative");
    if (fo.kind == "torus") require(sp.kind == "torus", "form.kind", "the torus form needs a torus space");

    auto& in = s.initial;
    require(one_of(in.kind, {"uniform", "values", "bump", "random", "constant"}), "initial.kind",
            "must be uniform, values, bump, random or constant");
    if (in.kind == "values") require(static_cast<std::int64_t>(in.values.size()) == sp.n, "initial.values", "needs one value per point");
    else require(in.values.empty(), "initial.values", "only allowed with kind = \"values\"");
    require(in.sigma > 0.0, "initial.sigma", "must be positive");
    require(in.floor >= 0.0, "initial.floor", "must be nonnegative");
    require(in.center >= 0.0 && in.center < 1.0, "initial.center", "must lie in [0, 1)");
    if (in.kind == "bump") require(sp.kind == "torus", "initial.kind", "a bump needs a torus space");

    auto& g = s.grid;
    require(g.T > 0.0, "grid.T", "must be positive");
    require(g.h > 0.0, "grid.h", "must be positive");
    require(g.h <= g.T, "grid.h", "must not exceed grid.T");
    auto divides = [&](double h) {
        const double q = g.T / h;
        return std::abs(q - std::round(q)) <= 1e-9 * q;
    };
    require(divides(g.h), "grid.h", "must divide grid.T");
    for (std::size_t k = 0; k < g.h_list.size(); ++k) {
        const std::string key = "grid.h_list[" + std::to_string(k) + "]";
        require(g.h_list[k] > 0.0 && g.h_list[k] <= g.T, key, "must lie in (0, grid.T]");
        require(divides(g.h_list[k]), key, "must divide grid.T");
        if (k > 0) require(g.h_list[k] < g.h_list[k - 1], key, "step sizes must decrease");
    }

    auto& so = s.solver;
    require(one_of(so.backend, {"exact-small", "scaling"}), "solver.backend", "must be exact-small or scaling");
    require(so.tolerance > 0.0 && so.tolerance <= 1e-3, "solver.tolerance", "must lie in (0, 1e-3]");
    require(so.scaling_tolerance > 0.0 && so.scaling_tolerance <= 1e-3, "solver.scaling_tolerance", "must lie in (0, 1e-3]");
    require(so.quadrature_nodes >= 0 && so.quadrature_nodes <= 16, "solver.quadrature_nodes", "must lie in [0, 16]");
    require(so.adaptive_tol >= 0.0, "solver.adaptive_tol", "must be nonnegative");
    require(so.max_depth >= 0 && so.max_depth <= 30, "solver.max_depth", "must lie in [0, 30]");
    require(one_of(so.heat_scheme, {"implicit-euler", "crank-nicolson"}), "solver.heat_scheme", "must be implicit-euler or crank-nicolson");

    auto& q = s.quadratic;
    require(q.example == "scalar", "quadratic.example", "must be scalar");
    require(q.x0.size() == 1, "quadratic.x0", "needs exactly one entry");

    auto& c = s.checks;
    require(c.probes >= 1 && c.probes <= 1000, "checks.probes", "must lie in [1, 1000]");
    require(c.algebra_tol > 0.0, "checks.algebra_tol", "must be positive");
    require(c.quadrature_budget >= 0.0, "checks.quadrature_budget", "must be nonnegative");
    require(c.endpoint_tol > 0.0, "checks.endpoint_tol", "must be positive");
    require(c.kuwada_slack >= 0.0, "checks.kuwada_slack", "must be nonnegative");
    require(c.kuwada_times >= 1, "checks.kuwada_times", "must be at least 1");
    require(c.kuwada_end >= 0.0 && c.kuwada_end < g.T, "checks.kuwada_end", "must lie in [0, grid.T)");
    require(c.dissipation_times >= 1, "checks.dissipation_times", "must be at least 1");
    require(c.dissipation_tol > 0.0, "checks.dissipation_tol", "must be positive");
    require(c.halving_factor > 1.0, "checks.halving_factor", "must exceed 1");
    require(c.halving_band > 0.0 && c.halving_band < 1.0, "checks.halving_band", "must lie in (0, 1)");

    // Flow and space compatibility.
    const bool torus = sp.kind == "torus";
    if (s.flow == "quadratic-hilbert") require(sp.kind == "rn-quadratic", "space.kind", "quadratic-hilbert needs space rn-quadratic");
    else require(sp.kind != "rn-quadratic", "space.kind", "rn-quadratic is only used by quadratic-hilbert");
    if (s.flow == "adjoint-forward" || s.flow == "identify") require(torus, "space.kind", s.flow + " needs a torus space");
    if (s.flow == "graph-heat") require(fo.kind != "none", "form.kind", "graph-heat needs a Dirichlet form");
    if (s.flow == "entropy-jko" || s.flow == "adjoint-forward" || s.flow == "identify") {
        require(in.kind != "random" && in.kind != "constant", "initial.kind", "the initial datum of " + s.flow + " is a probability vector");
        if (in.kind == "values") {
            double sum = 0.0;
            for (std::size_t k = 0; k < in.values.size(); ++k) {
                require(in.values[k] >= 0.0, "initial.values[" + std::to_string(k) + "]", "must be nonnegative");
                sum += in.values[k];
            }
            require(std::abs(sum - 1.0) <= 1e-9, "initial.values", "must sum to 1");
        }
    }
    if (s.flow == "entropy-jko") require(so.quadrature_nodes >= 1, "solver.quadrature_nodes", "the EDE ledger needs at least one node");
    if (s.flow == "adjoint-forward" || s.flow == "identify")
        require(me.kind == "conformal-linear" || me.rate == 0.0, "metric.kind", "torus metrics are conformal-linear");
}

inline Scenario parse_config_text(std::string_view text, std::string_view origin = "config") {
    toml::table root;
    try {
        root = toml::parse(text, origin);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << origin << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
        throw LoadError("", os.str());
    }
    for (auto&& [k, v] : root) {
        std::string key(k.str());
        static const std::set<std::string> sections{"space", "metric", "measure", "form", "initial", "grid", "solver", "quadratic", "checks"};
        static const std::set<std::string> top{"name", "flow", "seed"};
        if (sections.count(key)) {
            if (!v.is_table()) throw LoadError(key, "expected a table");
            for (auto&& [k2, v2] : *v.as_table())
                if (v2.is_table()) throw LoadError(key + "." + std::string(k2.str()), "nested tables are not supported");
        } else if (!top.count(key)) {
            throw LoadError(key, "unknown key");
        }
    }
    auto table = [&](const char* name) { return root.get_as<toml::table>(name); };

    Scenario s;
    detail::Section top(&root, "", {"name", "flow", "seed", "space", "metric", "measure", "form", "initial", "grid", "solver", "quadratic", "checks"});
    top.string("name", s.name);
    top.string("flow", s.flow);
    std::int64_t seed = static_cast<std::int64_t>(s.seed);
    top.integer("seed", seed);
    detail::require(seed >= 0, "seed", "must be nonnegative");
    s.seed = static_cast<std::uint64_t>(seed);

    detail::Section sp(table("space"), "space", {"kind", "n", "spacing", "base", "weights", "seed"});
    sp.string("kind", s.space.kind);
    sp.integer("n", s.space.n);
    sp.number("spacing", s.space.spacing);
    sp.string("base", s.space.base);
    sp.numbers("weights", s.space.weights);
    sp.integer("seed", s.space.seed);

    detail::Section me(table("metric"), "metric", {"kind", "rate"});
    me.string("kind", s.metric.kind);
    me.number("rate", s.metric.rate);

    detail::Section mu(table("measure"), "measure", {"kind", "potential", "values", "amplitude", "omega"});
    mu.string("kind", s.measure.kind);
    mu.string("potential", s.measure.potential);
    mu.numbers("values", s.measure.values);
    mu.number("amplitude", s.measure.amplitude);
    mu.number("omega", s.measure.omega);

    detail::Section fo(table("form"), "form", {"kind", "weight", "low", "high", "decay", "seed"});
    fo.string("kind", s.form.kind);
    fo.number("weight", s.form.weight);
    fo.number("low", s.form.low);
    fo.number("high", s.form.high);
    fo.number("decay", s.form.decay);
    fo.integer("seed", s.form.seed);

    detail::Section in(table("initial"), "initial", {"kind", "values", "sigma", "floor", "center", "value"});
    in.string("kind", s.initial.kind);
    in.numbers("values", s.initial.values);
    in.number("sigma", s.initial.sigma);
    in.number("floor", s.initial.floor);
    in.number("center", s.initial.center);
    in.number("value", s.initial.value);

    detail::Section gr(table("grid"), "grid", {"T", "h", "h_list"});
    gr.number("T", s.grid.T);
    gr.number("h", s.grid.h);
    gr.numbers("h_list", s.grid.h_list);

    detail::Section so(table("solver"), "solver",
                       {"backend", "tolerance", "scaling_tolerance", "quadrature_nodes", "adaptive_tol", "max_depth", "heat_scheme"});
    so.string("backend", s.solver.backend);
    so.number("tolerance", s.solver.tolerance);
    so.number("scaling_tolerance", s.solver.scaling_tolerance);
    so.integer("quadrature_nodes", s.solver.quadrature_nodes);
    so.number("adaptive_tol", s.solver.adaptive_tol);
    so.integer("max_depth", s.solver.max_depth);
    so.string("heat_scheme", s.solver.heat_scheme);

    detail::Section qu(table("quadratic"), "quadratic", {"example", "x0"});
    qu.string("example", s.quadratic.example);
    qu.numbers("x0", s.quadratic.x0);

    detail::Section ch(table("checks"), "checks",
                       {"probes", "algebra_tol", "quadrature_budget", "endpoint_tol", "kuwada_slack", "kuwada_times", "kuwada_end",
                        "dissipation_times", "dissipation_tol", "halving_factor", "halving_band"});
    ch.integer("probes", s.checks.probes);
    ch.number("algebra_tol", s.checks.algebra_tol);
    ch.number("quadrature_budget", s.checks.quadrature_budget);
    ch.number("endpoint_tol", s.checks.endpoint_tol);
    ch.number("kuwada_slack", s.checks.kuwada_slack);
    ch.integer("kuwada_times", s.checks.kuwada_times);
    ch.number("kuwada_end", s.checks.kuwada_end);
    ch.integer("dissipation_times", s.checks.dissipation_times);
    ch.number("dissipation_tol", s.checks.dissipation_tol);
    ch.number("halving_factor", s.checks.halving_factor);
    ch.number("halving_band", s.checks.halving_band);

    validate(s);
    return s;
}

inline Scenario parse_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("", "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path.string());
}

// Fully materialized configuration text; parse_config_text(echo(s)) == s.
inline std::string echo(const Scenario& s) {
    auto arr = [](const std::vector<double>& v) {
        toml::array a;
        for (double x : v) a.push_back(x);
        return a;
    };
    toml::table root;
    root.insert("name", s.name);
    root.insert("flow", s.flow);
    root.insert("seed", static_cast<std::int64_t>(s.seed));
    root.insert("space", toml::table{{"kind", s.space.kind},
                                     {"n", s.space.n},
                                     {"spacing", s.space.spacing},
                                     {"base", s.space.base},
                                     {"weights", arr(s.space.weights)},
                                     {"seed", s.space.seed}});
    root.insert("metric", toml::table{{"kind", s.metric.kind}, {"rate", s.metric.rate}});
    root.insert("measure", toml::table{{"kind", s.measure.kind},
                                       {"potential", s.measure.potential},
                                       {"values", arr(s.measure.values)},
                                       {"amplitude", s.measure.amplitude},
                                       {"omega", s.measure.omega}});
    root.insert("form", toml::table{{"kind", s.form.kind},
                                    {"weight", s.form.weight},
                                    {"low", s.form.low},
                                    {"high", s.form.high},
                                    {"decay", s.form.decay},
                                    {"seed", s.form.seed}});
    root.insert("initial", toml::table{{"kind", s.initial.kind},
                                       {"values", arr(s.initial.values)},
                                       {"sigma", s.initial.sigma},
                                       {"floor", s.initial.floor},
                                       {"center", s.initial.center},
                                       {"value", s.initial.value}});
    root.insert("grid", toml::table{{"T", s.grid.T}, {"h", s.grid.h}, {"h_list", arr(s.grid.h_list)}});
    root.insert("solver", toml::table{{"backend", s.solver.backend},
                                      {"tolerance", s.solver.tolerance},
                                      {"scaling_tolerance", s.solver.scaling_tolerance},
                                      {"quadrature_nodes", s.solver.quadrature_nodes},
                                      {"adaptive_tol", s.solver.adaptive_tol},
                                      {"max_depth", s.solver.max_depth},
                                      {"heat_scheme", s.solver.heat_scheme}});
    root.insert("quadratic", toml::table{{"example", s.quadratic.example}, {"x0", arr(s.quadratic.x0)}});
    root.insert("checks", toml::table{{"probes", s.checks.probes},
                                      {"algebra_tol", s.checks.algebra_tol},
                                      {"quadrature_budget", s.checks.quadrature_budget},
                                      {"endpoint_tol", s.checks.endpoint_tol},
                                      {"kuwada_slack", s.checks.kuwada_slack},
                                      {"kuwada_times", s.checks.kuwada_times},
                                      {"kuwada_end", s.checks.kuwada_end},
                                      {"dissipation_times", s.checks.dissipation_times},
                                      {"dissipation_tol", s.checks.dissipation_tol},
                                      {"halving_factor", s.checks.halving_factor},
                                      {"halving_band", s.checks.halving_band}});
    std::ostringstream os;
    os << root << '\n';
    return os.str();
}

}  // namespace dynflow::harness
