#pragma once

// Scenario execution: builds the space, families and forms of a Scenario,
// runs the selected flow with its default check suite, and performs
// refinement and identification studies.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "dynflow/dirichlet.hpp"
#include "dynflow/entropy.hpp"
#include "dynflow/harness/report.hpp"
#include "dynflow/harness/scenario.hpp"
#include "dynflow/mms.hpp"
#include "dynflow/space.hpp"
#include "dynflow/torus.hpp"

namespace dynflow::harness {

enum class Command { run, convergence, compare };

inline const char* to_string(Command c) {
    switch (c) {
        case Command::run: return "run";
        case Command::convergence: return "convergence";
        case Command::compare: return "compare";
    }
    return "run";
}

struct RunOptions {
    std::size_t jobs = 1;
};

// Calls f(0..count-1) on up to `jobs` threads; results keep index order.
template <class F>
auto parallel_map(std::size_t count, std::size_t jobs, F f) -> std::vector<decltype(f(std::size_t{0}))> {
    using R = decltype(f(std::size_t{0}));
    std::vector<std::optional<R>> slots(count);
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t k; (k = next.fetch_add(1)) < count;) {
            try {
                slots[k].emplace(f(k));
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), count);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<R> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

// ---------------------------------------------------------------------------
// Model construction

struct Model {
    std::size_t n = 0;
    double T = 1.0;
    Matrix D0;
    std::optional<MetricFamily> metric;
    std::optional<MeasureFamily> measure;
    std::optional<GraphForm> form;
    std::optional<TorusSpace> torus;
};

// Probe generator for stream k of the scenario seed.
inline std::mt19937_64 probe_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

namespace detail {

inline Matrix base_distances(const SpaceSpec& sp) {
    const auto n = static_cast<Eigen::Index>(sp.n);
    if (sp.kind == "torus") return torus_distances(static_cast<std::size_t>(n));
    if (sp.kind == "path" || sp.kind == "two-point") return path_distances(static_cast<std::size_t>(n), sp.spacing);
    Matrix D = Matrix::Constant(n, n, sp.spacing);
    D.diagonal().setZero();
    return D;
}

inline Vector base_measure(const SpaceSpec& sp) {
    const auto n = static_cast<Eigen::Index>(sp.n);
    if (sp.base == "values") return Eigen::Map<const Vector>(sp.weights.data(), n);
    if (sp.base == "random") {
        std::mt19937_64 rng(static_cast<std::uint64_t>(sp.seed));
        std::uniform_real_distribution<double> U(0.2, 1.0);
        Vector m(n);
        for (Eigen::Index i = 0; i < n; ++i) m(i) = U(rng);
        return m;
    }
    return Vector::Constant(n, 1.0 / static_cast<double>(n));
}

inline Vector potential_shape(const MeasureSpec& me, std::size_t n) {
    const auto N = static_cast<Eigen::Index>(n);
    if (me.potential == "values") return Eigen::Map<const Vector>(me.values.data(), N);
    Vector V(N);
    for (Eigen::Index i = 0; i < N; ++i)
        V(i) = me.potential == "cosine" ? std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n))
                                        : std::sin(static_cast<double>(i));
    return V;
}

// Edges of the space carrying the constant form.
inline Matrix adjacency(const SpaceSpec& sp) {
    const auto n = static_cast<Eigen::Index>(sp.n);
    Matrix W = Matrix::Zero(n, n);
    if (sp.kind == "complete") {
        W.setOnes();
        W.diagonal().setZero();
        return W;
    }
    for (Eigen::Index i = 0; i + 1 < n; ++i) W(i, i + 1) = W(i + 1, i) = 1.0;
    if (sp.kind == "torus" && n > 2) W(0, n - 1) = W(n - 1, 0) = 1.0;
    return W;
}

template <class F>
auto keyed(const char* key, F f) -> decltype(f()) {
    try {
        return f();
    } catch (const LoadError&) {
        throw;
    } catch (const Error& e) {
        throw LoadError(key, e.what());
    }
}

}  // namespace detail

// n_override replaces the torus resolution (refinement studies).
inline Model build_model(const Scenario& s, std::size_t n_override = 0) {
    Model m;
    m.T = s.grid.T;
    m.n = n_override ? n_override : static_cast<std::size_t>(s.space.n);
    if (s.space.kind == "rn-quadratic") return m;
    if (s.space.kind == "torus") {
        const double amp = s.measure.kind == "static" ? 0.0 : s.measure.amplitude;
        m.torus = detail::keyed("space", [&] { return make_torus_space(m.n, m.T, s.metric.rate, amp, s.measure.omega); });
        m.D0 = m.torus->metric.base();
        m.metric = m.torus->metric;
        m.measure = m.torus->measure;
        if (s.form.kind == "torus") m.form = m.torus->form;
    } else {
        m.D0 = detail::base_distances(s.space);
        Vector base = detail::base_measure(s.space);
        Vector V = detail::potential_shape(s.measure, m.n);
        m.metric = detail::keyed("metric", [&] {
            return s.metric.kind == "constant" ? MetricFamily::constant(m.D0, m.T) : MetricFamily::conformal_linear(m.D0, s.metric.rate, m.T);
        });
        m.measure = detail::keyed("measure", [&] {
            if (s.measure.kind == "linear") return MeasureFamily::linear(base, s.measure.amplitude * V, m.T);
            if (s.measure.kind == "sinusoidal") return MeasureFamily::sinusoidal(base, V, s.measure.amplitude, s.measure.omega, m.T);
            return MeasureFamily::static_measure(base, m.T);
        });
    }
    if (s.form.kind == "constant") {
        Matrix W = s.form.weight * detail::adjacency(s.space);
        if (s.form.decay == 0.0) {
            m.form = GraphForm::constant(W, *m.measure);
        } else {
            const double k = s.form.decay;
            m.form = GraphForm([W, k](double t) { return Matrix(std::exp(-k * t) * W); }, *m.measure, k);
        }
    } else if (s.form.kind == "random-dense") {
        const auto n = static_cast<Eigen::Index>(m.n);
        std::mt19937_64 rng(static_cast<std::uint64_t>(s.form.seed));
        std::uniform_real_distribution<double> U(s.form.low, s.form.high);
        Matrix W0 = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i + 1; j < n; ++j) W0(i, j) = W0(j, i) = U(rng);
        const double k = s.form.decay;
        m.form = GraphForm([W0, k](double t) { return Matrix(std::exp(-k * t) * W0); }, *m.measure, k);
    }
    return m;
}

// Initial probability vector of the measure-valued flows.
inline Vector initial_measure(const Scenario& s, const Model& m) {
    const auto n = static_cast<Eigen::Index>(m.n);
    if (s.initial.kind == "values") return Eigen::Map<const Vector>(s.initial.values.data(), n);
    if (s.initial.kind == "bump") return torus_bump(m.n, s.initial.sigma, s.initial.floor, s.initial.center);
    return Vector::Constant(n, 1.0 / static_cast<double>(n));
}

// Initial function of the heat flow.
inline Vector initial_function(const Scenario& s, const Model& m) {
    const auto n = static_cast<Eigen::Index>(m.n);
    if (s.initial.kind == "values") return Eigen::Map<const Vector>(s.initial.values.data(), n);
    if (s.initial.kind == "bump") return torus_bump(m.n, s.initial.sigma, s.initial.floor, s.initial.center) * static_cast<double>(m.n);
    if (s.initial.kind == "constant") return Vector::Constant(n, s.initial.value);
    if (s.initial.kind == "random") {
        auto rng = probe_rng(s.seed, 0);
        std::normal_distribution<double> N(0.0, 1.0);
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = N(rng);
        return v;
    }
    return Vector::Ones(n);
}

inline JkoOptions jko_options(const SolverSpec& so) {
    JkoOptions opt;
    opt.backend = so.backend == "scaling" ? JkoBackend::scaling : JkoBackend::exact_small;
    opt.tolerance = so.tolerance;
    opt.scaling_tolerance = so.scaling_tolerance;
    return opt;
}

inline QuadratureOptions quadrature_options(const SolverSpec& so) {
    QuadratureOptions q;
    q.nodes = static_cast<std::size_t>(so.quadrature_nodes);
    q.adaptive_tol = so.adaptive_tol;
    q.max_depth = static_cast<std::size_t>(so.max_depth);
    return q;
}

inline HeatScheme heat_scheme(const SolverSpec& so) {
    return so.heat_scheme == "crank-nicolson" ? HeatScheme::crank_nicolson : HeatScheme::implicit_euler;
}

// ---------------------------------------------------------------------------
// Check helpers

inline void add_check(RunReport& r, std::string name, std::string invariant, double tolerance, double worst, bool pass) {
    r.checks.push_back({std::move(name), std::move(invariant), tolerance, worst, pass});
}

// "worst <= tolerance" checks.
inline void add_bound(RunReport& r, std::string name, std::string invariant, double tolerance, double worst) {
    const bool pass = worst <= tolerance;
    add_check(r, std::move(name), std::move(invariant), tolerance, worst, pass);
}

inline bool has_violation(const AprioriReport& a, const char* prefix) {
    return std::any_of(a.violations.begin(), a.violations.end(), [&](const std::string& v) { return v.rfind(prefix, 0) == 0; });
}

inline void add_apriori(RunReport& r, const AprioriReport& a) {
    add_check(r, "apriori-energy", "max E_t(x~_t) <= E_0 + L* T (tolerance is the bound)", a.energy_bound, a.energy_max,
              !has_violation(a, "energy bound"));
    add_check(r, "apriori-dissipation", "sum d^2/2h <= E_0 - inf E + L* T (tolerance is the bound)", a.dissipation_bound, a.dissipation,
              !has_violation(a, "dissipation bound"));
    add_check(r, "apriori-interpolant-gap", "max d^2(x~_t, x_n)/h <= 8 C2 + 8 h L* (tolerance is the bound)", a.c3_bound, a.c3_fit,
              !has_violation(a, "interpolant gap"));
    add_check(r, "apriori-monotone-proximity", "d^2(x~_r1, x_prev) - d^2(x~_r2, x_prev) - 4 r1 r2 L* <= 0", 0.0, a.proximity_excess,
              !has_violation(a, "monotone proximity"));
}

inline void add_ledger(RunReport& r, const EdeLedger& L) {
    add_check(r, "ede-ledger", "max_n |cumulative discrete EDE residual| <= inner tolerance * steps + quadrature budget", L.budget,
              L.max_cumulative, L.within_budget());
}

// ---------------------------------------------------------------------------
// Flows

inline RunReport run_entropy_jko(const Scenario& s, const Model& m) {
    RunReport r;
    EntropyJkoProblem p{EntropyFunctional(*m.measure), *m.metric, jko_options(s.solver)};
    const Vector mu0 = initial_measure(s, m);
    const TimeGrid grid(s.grid.T, s.grid.h);
    const double h = grid.step();
    auto sol = jko_run(p, mu0, grid, quadrature_options(s.solver));
    auto L = ede_ledger(sol, s.checks.quadrature_budget);
    const bool torus = m.torus.has_value();

    Series tr{"trajectory",
              {"t", "entropy", "speed_sq", "slope_sq", "energy_drop", "speed_term", "slope_term", "drift_term", "ledger_residual",
               "ledger_cumulative", "mass"},
              {}};
    if (torus) tr.columns.push_back("fisher");
    double mass_err = 0.0, below = -std::numeric_limits<double>::infinity(), two_forms = 0.0, optimality = -std::numeric_limits<double>::infinity();
    const double lb = p.entropy.uniform_lower_bound();
    for (std::size_t n = 0; n <= sol.completed; ++n) {
        const double t = grid.node(n);
        const Vector& mu = sol.states[n];
        const double S = sol.energies[n];
        std::vector<double> row{t, S};
        if (n == 0) {
            row.insert(row.end(), {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        } else {
            const double d = sol.distances[n];
            row.insert(row.end(), {d * d / (h * h), 2.0 * L.slope_term[n - 1] / h, L.energy_drop[n - 1], L.speed_term[n - 1],
                                   L.slope_term[n - 1], L.drift_term[n - 1], L.residual[n - 1], L.cumulative[n - 1]});
            // The minimizer beats the previous state in the step objective.
            const double lhs = S + d * d / (2.0 * h), rhs = p.entropy(sol.states[n - 1], t);
            optimality = std::max(optimality, (lhs - rhs) / std::max(1.0, std::abs(rhs)));
        }
        row.push_back(mu.sum());
        if (torus) {
            Vector mt = m.measure->at(t);
            row.push_back(fisher_information(density_of(mu, mt), t, m.torus->geometry, mt));
        }
        tr.add(std::move(row));
        mass_err = std::max(mass_err, std::abs(mu.sum() - 1.0));
        below = std::max(below, lb - S);
        two_forms = std::max(two_forms, std::abs(S - p.entropy.two_form(mu, t)));
    }
    r.series.push_back(std::move(tr));

    add_ledger(r, L);
    add_apriori(r, apriori_check(sol));
    add_bound(r, "mass", "max_n |sum mu_n - 1| <= tol", s.checks.algebra_tol, mass_err);
    add_bound(r, "entropy-lower-bound", "max_n (-sup|f| - S_t(mu_n)) <= 0", 0.0, below);
    add_bound(r, "entropy-two-forms", "max_n |S_t(mu) - Ent(mu|m) - <f_t, mu>| <= tol", s.checks.algebra_tol, two_forms);
    if (sol.completed > 0)
        add_bound(r, "step-optimality", "S_tn(mu_n) + d^2/2h <= S_tn(mu_{n-1}) + tol (relative)", 10.0 * s.solver.tolerance, optimality);
    auto mrep = check_measure_family(*m.measure, grid.nodes());
    add_check(r, "measure-family", "max |f_t - f_s|/|t - s| <= L*", m.measure->lipschitz(), mrep.max_time_quotient, mrep.ok);
    return r;
}

inline RunReport run_quadratic(const Scenario& s) {
    RunReport r;
    const TimeGrid grid(s.grid.T, s.grid.h);
    auto q = scalar_example_problem(grid.node(grid.steps()));
    const Vector x0 = Eigen::Map<const Vector>(s.quadratic.x0.data(), 1);
    auto rep = quadratic_testbed_run(q, x0, grid);
    auto p = quadratic_step_problem(q);
    auto sol = run_scheme(p, x0, grid, quadrature_options(s.solver));
    // x' = -2 (x - t): x_t = t - 1/2 + (x_0 + 1/2) e^{-2t}.
    auto exact = [&](double t) { return t - 0.5 + (x0(0) + 0.5) * std::exp(-2.0 * t); };
    Series tr{"trajectory", {"t", "x", "oracle", "closed_form", "error", "energy"}, {}};
    double oracle_gap = 0.0;
    for (std::size_t n = 0; n < rep.scheme.size(); ++n) {
        const double t = grid.node(n);
        tr.add({t, rep.scheme[n](0), rep.oracle[n](0), exact(t), std::abs(rep.scheme[n](0) - exact(t)), q.energy(t, rep.scheme[n])});
        oracle_gap = std::max(oracle_gap, std::abs(rep.oracle[n](0) - exact(t)));
    }
    const double tN = grid.node(grid.steps());
    r.series.push_back(std::move(tr));
    add_bound(r, "endpoint-closed-form", "|x_N - (t_N - 1/2 + (x_0 + 1/2) e^{-2 t_N})| <= tol", s.checks.endpoint_tol,
              std::abs(rep.scheme.back()(0) - exact(tN)));
    add_bound(r, "oracle-closed-form", "max_n |RK4 oracle - closed form| <= 1e-8", 1e-8, oracle_gap);
    add_bound(r, "euler-lagrange-residual", "max_n |A (x_n - x_{n-1})/h + Q x_n + b| (relative) <= tol", s.checks.algebra_tol,
              rep.max_residual);
    add_bound(r, "first-order", "|log2(err(h)/err(h/2)) - 1| <= 0.2", 0.2, std::abs(rep.observed_order - 1.0));
    add_ledger(r, ede_ledger(sol, s.checks.quadrature_budget));
    add_apriori(r, apriori_check(sol));
    return r;
}

inline std::vector<Vector> normal_probes(std::size_t n, std::size_t count, std::uint64_t seed, std::uint64_t stream) {
    auto rng = probe_rng(seed, stream);
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<Vector> out;
    for (std::size_t k = 0; k < count; ++k) {
        Vector v(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = N(rng);
        out.push_back(std::move(v));
    }
    return out;
}

inline RunReport run_graph_heat(const Scenario& s, const Model& m) {
    RunReport r;
    const GraphForm& form = *m.form;
    const TimeGrid grid(s.grid.T, s.grid.h);
    const HeatScheme scheme = heat_scheme(s.solver);
    const bool implicit = scheme == HeatScheme::implicit_euler;
    const std::size_t n = form.size(), P = static_cast<std::size_t>(s.checks.probes);
    const double tol = s.checks.algebra_tol;
    const Vector u0 = initial_function(s, m);
    auto flow = heat_flow(form, u0, grid, scheme);

    Series tr{"trajectory", {"t", "energy", "mass", "norm_sq", "min", "max"}, {}};
    for (std::size_t k = 0; k < flow.states.size(); ++k) {
        const double t = flow.times[k];
        const Vector& u = flow.states[k];
        Vector mt = form.measure(t);
        tr.add({t, dirichlet_energy(form, u, t), u.dot(mt), weighted_norm_sq(u, mt), u.minCoeff(), u.maxCoeff()});
    }

    auto frep = check_graph_form(form, grid.nodes());
    add_check(r, "graph-form", "symmetric, nonnegative, connected, |log w_t/w_s| <= Lw |t - s|", form.conductance_lipschitz(),
              frep.max_log_quotient, frep.ok);

    const auto& Pr = flow.propagator;
    const std::size_t K = Pr.steps();
    if (K >= 2) {
        Matrix whole = Pr.matrix();
        Matrix composed = Pr.slice(K / 2, K).after(Pr.slice(0, K / 2)).matrix();
        add_bound(r, "propagator-composition", "max |P_{T,0} - P_{T,r} P_{r,0}| <= tol", tol, (whole - composed).cwiseAbs().maxCoeff());
    }
    add_bound(r, "constants-preserved", "max |P 1 - 1| <= tol", tol,
              (Pr.apply(Vector::Ones(static_cast<Eigen::Index>(n))).array() - 1.0).abs().maxCoeff());
    auto us = normal_probes(n, P, s.seed, 1), vs = normal_probes(n, P, s.seed, 2);
    auto dual = duality_check(Pr, form, us, vs, tol);
    add_bound(r, "duality", "max |<P u, v>_{m_T} - <u, P* v>_{m_0}| / (|u| |v|) <= tol", tol, dual.max_gap);

    // Algebraic adjoint flow from a positive density of unit mass.
    Vector rho0 = normal_probes(n, 1, s.seed, 3).front().cwiseAbs().array() + 0.1;
    rho0 /= rho0.dot(form.measure(0.0));
    auto adj = forward_adjoint_flow(form, rho0, grid, AdjointMode::algebraic);
    double mass = 0.0, negative = 0.0;
    for (std::size_t k = 0; k < adj.measures.size(); ++k) {
        mass = std::max(mass, std::abs(adj.measures[k].sum() - 1.0));
        negative = std::max(negative, -adj.densities[k].minCoeff());
    }
    add_bound(r, "adjoint-mass", "max_n |sum rho_n m_n - 1| <= tol", tol, mass);
    add_bound(r, "adjoint-positivity", "max_n (-min rho_n) <= 0", 0.0, negative);

    if (implicit) {
        auto mp = maximum_principle_check(Pr, unit_interval_probes(n, P, probe_rng(s.seed, 4)()), tol);
        add_check(r, "maximum-principle", "P maps [0,1]-valued probes into [-tol, 1 + tol]", tol,
                  std::max({-mp.min_value, mp.max_value - 1.0, mp.constant_error}), mp.ok);
        auto res = subdifferential_residual(form, flow.states, grid, tol);
        add_check(r, "subdifferential-residual", "max_n |M_n (u_n - u_{n-1})/h + L_n u_n| (relative) <= tol", tol, res.max_residual, res.ok);
        auto probes = normal_probes(n, P, s.seed, 5);
        const std::size_t mid = std::max<std::size_t>(1, grid.steps() / 2);
        probes.push_back(flow.states[mid - 1]);
        auto evi = evi_residual(form, flow.states, grid, mid, probes, tol);
        add_check(r, "evi", "<(u_n - u_{n-1})/h, u_n - y>_{m_tn} + E(u_n) - E(y) <= tol max(1, E(u_n))", tol, evi.max_value, evi.ok);
        auto eq = jko_equivalence_check(form, u0, grid, tol);
        add_check(r, "jko-equivalence", "max_n |minimizing movement - implicit heat step| (relative) <= tol", tol, eq.max_gap, eq.ok);
    }

    Vector v0 = normal_probes(n, 1, s.seed, 6).front();
    auto con = contraction_check(form, u0, v0, grid, scheme);
    const double g0 = weighted_norm_sq(u0 - v0, form.measure(0.0));
    add_check(r, "contraction", "max_n |u_t - v_t|_t^2 - e^{2Lt} |u_0 - v_0|_0^2 - 10 h |u_0 - v_0|_0^2 <= 1e-14 max(1, |u_0 - v_0|^2)",
              1e-14 * std::max(1.0, g0), con.worst_excess, con.ok);
    Series cs{"contraction", {"t", "gap_sq", "envelope", "loose_envelope"}, {}};
    for (std::size_t k = 0; k < con.times.size(); ++k) cs.add({con.times[k], con.gap_sq[k], con.envelope[k], con.loose_envelope[k]});

    // The Dirichlet energy as a minimizing-movement run.
    auto dp = dirichlet_step_problem(form, dirichlet_energy(form, u0, 0.0));
    auto sol = run_scheme(dp, u0, grid, std::max<std::size_t>(1, static_cast<std::size_t>(s.solver.quadrature_nodes)));
    add_apriori(r, apriori_check(sol));

    r.series.push_back(std::move(tr));
    r.series.push_back(std::move(cs));
    return r;
}

inline std::vector<double> sample_times(double end, std::size_t count) {
    std::vector<double> ts;
    for (std::size_t k = 1; k <= count; ++k) ts.push_back(end * static_cast<double>(k) / static_cast<double>(count));
    return ts;
}

inline DissipationReport dissipation_on(const Scenario& s, const Model& m, const MeasureTrajectory& tr) {
    const auto cnt = static_cast<std::size_t>(s.checks.dissipation_times);
    std::vector<double> ts;
    for (std::size_t k = 1; k <= cnt; ++k) ts.push_back(s.grid.T * static_cast<double>(k) / static_cast<double>(cnt + 1));
    return entropy_dissipation_check(tr, *m.measure, m.torus->geometry, ts);
}

inline RunReport run_adjoint_forward(const Scenario& s, const Model& m) {
    RunReport r;
    const TimeGrid grid(s.grid.T, s.grid.h);
    const Vector mu0 = initial_measure(s, m);
    const Vector rho0 = density_of(mu0, m.measure->at(0.0));
    auto flow = forward_adjoint_flow(*m.torus->form, rho0, grid, AdjointMode::algebraic);
    auto tr = trajectory_of(flow);
    EntropyFunctional S(*m.measure);

    Series ts{"trajectory", {"t", "entropy", "fisher", "drift", "mass", "min_density"}, {}};
    double mass = 0.0, negative = 0.0;
    for (std::size_t k = 0; k < flow.times.size(); ++k) {
        const double t = flow.times[k];
        Vector mt = m.measure->at(t);
        ts.add({t, S(flow.measures[k], t), fisher_information(flow.densities[k], t, m.torus->geometry, mt), S.rate(flow.measures[k], t),
                flow.measures[k].sum(), flow.densities[k].minCoeff()});
        mass = std::max(mass, std::abs(flow.measures[k].sum() - 1.0));
        negative = std::max(negative, -flow.densities[k].minCoeff());
    }
    r.series.push_back(std::move(ts));
    add_bound(r, "adjoint-mass", "max_n |sum mu_n - 1| <= tol", s.checks.algebra_tol, mass);
    add_bound(r, "adjoint-positivity", "max_n (-min rho_n) <= 0", 0.0, negative);

    const double end = s.checks.kuwada_end > 0.0 ? s.checks.kuwada_end : 0.5 * s.grid.T;
    auto kw = kuwada_check(tr, *m.metric, *m.measure, m.torus->geometry, sample_times(end, static_cast<std::size_t>(s.checks.kuwada_times)),
                           grid.step(), s.checks.kuwada_slack);
    Series ks{"kuwada", {"t", "delta", "speed_sq", "fisher"}, {}};
    for (const auto& row : kw.rows) ks.add({row.t, row.delta, row.speed_sq, row.fisher});
    r.series.push_back(std::move(ks));
    add_check(r, "kuwada", "speed^2 <= (1 + slack) Fisher at every sampled time (worst is max speed^2/Fisher)", 1.0 + s.checks.kuwada_slack,
              kw.worst_ratio, kw.ok);
    add_bound(r, "kuwada-windows", "speed windows cut short by the end of the trajectory == 0", 0.0, static_cast<double>(kw.clipped));

    auto dis = dissipation_on(s, m, tr);
    Series dsr{"dissipation", {"t", "derivative", "fisher", "drift", "relative_error"}, {}};
    for (const auto& row : dis.rows) dsr.add({row.t, row.derivative, row.fisher, row.drift, row.relative_error});
    r.series.push_back(std::move(dsr));
    add_bound(r, "entropy-dissipation", "max |dS/dt + Fisher - drift| / |Fisher - drift| <= tol", s.checks.dissipation_tol,
              dis.max_relative_error);
    return r;
}

// Step sizes of an identification or refinement study.
inline std::vector<double> study_steps(const Scenario& s) { return s.grid.h_list.empty() ? std::vector<double>{s.grid.h} : s.grid.h_list; }

struct IdentifyLevel {
    FlowComparison cmp;
    AprioriReport apriori;
};

inline IdentifyLevel identify_level(const Scenario& s, const Model& m, double h) {
    // As identify_vs_adjoint_heat, keeping the JKO solution for its a-priori bounds.
    TimeGrid grid(s.grid.T, h);
    EntropyJkoProblem p{EntropyFunctional(*m.measure), *m.metric, jko_options(s.solver)};
    const Vector mu0 = initial_measure(s, m);
    auto sol = jko_run(p, mu0, grid, 0);
    auto heat = forward_adjoint_flow(*m.torus->form, density_of(mu0, m.measure->at(0.0)), grid, AdjointMode::algebraic);
    return {compare_trajectories(trajectory_of(sol), trajectory_of(heat), *m.metric, h, m.n), apriori_check(sol)};
}

// Consecutive gap ratios within factor (1 +- band).
inline void add_halving(RunReport& r, const Scenario& s, const std::vector<double>& hs, const std::vector<double>& gaps) {
    double worst = 0.0;
    for (std::size_t k = 1; k < gaps.size(); ++k) {
        const double expected = std::pow(s.checks.halving_factor, std::log2(hs[k - 1] / hs[k]));
        const double ratio = gaps[k] > 0.0 ? gaps[k - 1] / gaps[k] : std::numeric_limits<double>::infinity();
        worst = std::max(worst, std::abs(ratio / expected - 1.0));
    }
    if (gaps.size() >= 2)
        add_bound(r, "identification-refinement", "max_k |(gap(h_k)/gap(h_{k+1})) / expected - 1| <= band (terminal L1 gap)",
                  s.checks.halving_band, worst);
}

inline RunReport run_identify(const Scenario& s, const Model& m, const RunOptions& opt) {
    if (!m.torus || !m.torus->form) throw LoadError("space.kind", "identification needs a torus space");
    RunReport r;
    const auto hs = study_steps(s);
    auto levels = parallel_map(hs.size(), opt.jobs, [&](std::size_t k) { return identify_level(s, m, hs[k]); });
    Series gaps{"gaps", {"h", "terminal_l1", "terminal_w", "ratio"}, {}};
    std::vector<double> terminal;
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const auto& c = levels[k].cmp;
        terminal.push_back(c.terminal_l1());
        const double ratio = k > 0 && c.terminal_l1() > 0.0 ? terminal[k - 1] / c.terminal_l1() : std::numeric_limits<double>::quiet_NaN();
        gaps.add({c.h, c.terminal_l1(), c.w_gap.empty() ? 0.0 : c.w_gap.back(), ratio});
    }
    r.series.push_back(std::move(gaps));
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const auto& c = levels[k].cmp;
        Series g{"gap_h" + std::to_string(k), {"t", "l1_gap", "w_gap"}, {}};
        for (std::size_t i = 0; i < c.times.size(); ++i) g.add({c.times[i], c.l1_gap[i], c.w_gap[i]});
        r.series.push_back(std::move(g));
        AprioriReport a = levels[k].apriori;
        RunReport tmp;
        add_apriori(tmp, a);
        for (auto& ch : tmp.checks) {
            ch.name += "-h" + std::to_string(k);
            r.checks.push_back(std::move(ch));
        }
    }
    add_halving(r, s, hs, terminal);
    if (hs.size() >= 2) r.table = make_table(hs, terminal);
    return r;
}

// ---------------------------------------------------------------------------
// Refinement studies

// A zero error may only be followed by zero errors (identical trajectories).
inline bool strictly_decreasing(const ConvergenceTable& t) {
    for (std::size_t k = 1; k < t.rows.size(); ++k)
        if (!(t.rows[k].error < t.rows[k - 1].error) && !(t.rows[k].error == 0.0 && t.rows[k - 1].error == 0.0)) return false;
    return !t.rows.empty();
}

inline void add_decrease(RunReport& r, const ConvergenceTable& t) {
    double worst = 0.0;
    for (std::size_t k = 1; k < t.rows.size(); ++k)
        if (t.rows[k - 1].error > 0.0) worst = std::max(worst, t.rows[k].error / t.rows[k - 1].error);
    add_check(r, "errors-decrease", "error(h_{k+1}) / error(h_k) < 1 for every refinement (worst is the largest ratio)", 1.0, worst,
              strictly_decreasing(t));
}

inline void add_order(RunReport& r, const ConvergenceTable& t, double expected, double band) {
    add_bound(r, "fitted-order", "|fitted order - " + format_number(expected) + "| <= band", band, std::abs(t.fitted_order - expected));
}

// Self-convergence of piecewise constant trajectories (as refine_study without
// a reference): row k compares h_k with h_{k+1}; the last step size is dropped.
template <class Dist>
ConvergenceTable self_convergence(double T, const std::vector<double>& hs, const std::vector<std::vector<Vector>>& runs,
                                  const std::vector<double>& eval, Dist dist) {
    std::vector<double> rows_h, errs;
    for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
        TimeGrid a(T, hs[k]), b(T, hs[k + 1]);
        double e = 0.0;
        for (double t : eval) {
            const auto& x = runs[k].at(std::min(a.upper_index(t), runs[k].size() - 1));
            const auto& y = runs[k + 1].at(std::min(b.upper_index(t), runs[k + 1].size() - 1));
            e = std::max(e, dist(t, x, y));
        }
        rows_h.push_back(hs[k]);
        errs.push_back(e);
    }
    return make_table(rows_h, errs);
}

inline RunReport convergence_study(const Scenario& s, const RunOptions& opt) {
    const auto& hs = s.grid.h_list;
    if (hs.size() < 3) throw LoadError("grid.h_list", "a convergence study needs at least three step sizes");
    RunReport r;
    const TimeGrid coarse(s.grid.T, hs.front());
    std::vector<double> eval;
    for (std::size_t n = 1; n <= coarse.steps(); ++n) eval.push_back(std::min(coarse.node(n), s.grid.T));

    if (s.flow == "quadratic-hilbert") {
        auto q = scalar_example_problem(s.grid.T);
        auto p = quadratic_step_problem(q);
        const Vector x0 = Eigen::Map<const Vector>(s.quadratic.x0.data(), 1);
        auto runs = parallel_map(hs.size(), opt.jobs, [&](std::size_t k) { return run_scheme(p, x0, TimeGrid(s.grid.T, hs[k]), 0).states; });
        auto exact = [&](double t) { return Vector::Constant(1, t - 0.5 + (x0(0) + 0.5) * std::exp(-2.0 * t)); };
        std::vector<double> errs;
        for (std::size_t k = 0; k < runs.size(); ++k) {
            TimeGrid g(s.grid.T, hs[k]);
            double e = 0.0;
            for (double t : eval) e = std::max(e, p.metric(t, runs[k][std::min(g.upper_index(t), runs[k].size() - 1)], exact(t)));
            errs.push_back(e);
        }
        r.table = make_table(hs, errs);
        add_decrease(r, r.table);
        add_order(r, r.table, 1.0, 0.2);
    } else if (s.flow == "entropy-jko") {
        Model m = build_model(s);
        EntropyJkoProblem p{EntropyFunctional(*m.measure), *m.metric, jko_options(s.solver)};
        const Vector mu0 = initial_measure(s, m);
        auto runs = parallel_map(hs.size(), opt.jobs, [&](std::size_t k) { return jko_run(p, mu0, TimeGrid(s.grid.T, hs[k]), 0).states; });
        r.table = self_convergence(s.grid.T, hs, runs, eval, [&](double t, const Vector& x, const Vector& y) { return wasserstein(x, y, m.metric->at(t)); });
        add_decrease(r, r.table);
    } else if (s.flow == "graph-heat") {
        Model m = build_model(s);
        const Vector u0 = initial_function(s, m);
        const HeatScheme scheme = heat_scheme(s.solver);
        auto runs = parallel_map(hs.size(), opt.jobs, [&](std::size_t k) { return heat_flow(*m.form, u0, TimeGrid(s.grid.T, hs[k]), scheme).states; });
        r.table = self_convergence(s.grid.T, hs, runs, eval, [&](double t, const Vector& x, const Vector& y) {
            return std::sqrt(weighted_norm_sq(x - y, m.form->measure(t)));
        });
        add_decrease(r, r.table);
        add_order(r, r.table, scheme == HeatScheme::implicit_euler ? 1.0 : 2.0, 0.25);
    } else if (s.flow == "adjoint-forward") {
        // Simultaneous refinement of h and the torus spacing.
        std::vector<double> errs;
        std::vector<std::size_t> sizes;
        for (double h : hs) {
            const double n = static_cast<double>(s.space.n) * hs.front() / h;
            if (std::abs(n - std::round(n)) > 1e-9) throw LoadError("grid.h_list", "each step must divide the first so that n h stays fixed");
            sizes.push_back(static_cast<std::size_t>(std::round(n)));
        }
        auto reps = parallel_map(hs.size(), opt.jobs, [&](std::size_t k) {
            Model m = build_model(s, sizes[k]);
            Scenario sk = s;
            sk.space.n = static_cast<std::int64_t>(sizes[k]);
            const Vector mu0 = initial_measure(sk, m);
            auto flow = forward_adjoint_flow(*m.torus->form, density_of(mu0, m.measure->at(0.0)), TimeGrid(s.grid.T, hs[k]));
            return dissipation_on(s, m, trajectory_of(flow));
        });
        Series lv{"levels", {"h", "n", "max_relative_error", "mean_relative_error"}, {}};
        for (std::size_t k = 0; k < reps.size(); ++k) {
            errs.push_back(reps[k].max_relative_error);
            lv.add({hs[k], static_cast<double>(sizes[k]), reps[k].max_relative_error, reps[k].mean_relative_error});
        }
        r.series.push_back(std::move(lv));
        r.table = make_table(hs, errs);
        add_decrease(r, r.table);
    } else {
        if (s.space.kind != "torus") throw LoadError("space.kind", "an identification study needs a torus space");
        Scenario t = s;
        t.form.kind = "torus";
        r = run_identify(t, build_model(t), opt);
    }
    if (r.series.empty() || r.series.front().name != "levels") {
        Series tab{"convergence", {"h", "error", "order"}, {}};
        for (const auto& row : r.table.rows) tab.add({row.h, row.error, row.order});
        r.series.insert(r.series.begin(), std::move(tab));
    }
    return r;
}

// ---------------------------------------------------------------------------

inline RunReport execute(Scenario s, Command cmd, const RunOptions& opt = {}) {
    validate(s);
    RunReport r;
    if (cmd == Command::convergence) {
        r = convergence_study(s, opt);
    } else if (cmd == Command::compare || s.flow == "identify") {
        if (s.space.kind != "torus") throw LoadError("space.kind", "compare needs a torus space");
        Scenario t = s;
        t.form.kind = "torus";
        r = run_identify(t, build_model(t), opt);
    } else if (s.flow == "quadratic-hilbert") {
        r = run_quadratic(s);
    } else {
        Model m = build_model(s);
        if (s.flow == "entropy-jko") r = run_entropy_jko(s, m);
        else if (s.flow == "graph-heat") r = run_graph_heat(s, m);
        else r = run_adjoint_forward(s, m);
    }
    r.scenario = s.name;
    r.flow = s.flow;
    r.provenance.command = to_string(cmd);
    r.provenance.config = echo(s);
    r.provenance.config_hash = fnv1a_hex(r.provenance.config);
    r.provenance.seed = s.seed;
    r.provenance.libraries = library_versions();
    return r;
}

}  // namespace dynflow::harness
