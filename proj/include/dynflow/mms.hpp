#pragma once

// Minimizing-movement engine for time-dependent energies on time-dependent
// metric spaces. Generic in the state type; the problem supplies the metric,
// the energy, its time derivative and an inner solver for the step problem.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/error.hpp"
#include "dynflow/quadrature.hpp"
#include "dynflow/time_grid.hpp"

namespace dynflow {

template <class State>
struct StepProblem {
    // d_t(x, y)
    std::function<double(double, const State&, const State&)> metric;
    // E_t(x)
    std::function<double(double, const State&)> energy;
    // (d/dt) E_t(x) at fixed x
    std::function<double(double, const State&)> energy_rate;
    // argmin_x E_{t_energy}(x) + d_{t_metric}^2(x, anchor) / (2 tau)
    std::function<State(double t_energy, double tau, const State& anchor, double t_metric)> inner_solver;

    double lower_bound = 0.0;       // inf_t inf_x E_t(x)
    double lipschitz = 0.0;         // L*: |E_t(x) - E_s(x)| <= L* |t - s|
    double inner_tolerance = 0.0;   // per-step objective tolerance of the inner solver
    std::string space = "generic";
};

struct StepDiagnostics {
    double objective = 0.0;          // E_{t_n}(x_n) + d^2/(2h)
    double objective_at_anchor = 0.0;  // E_{t_n}(x_prev)
    double energy = 0.0;
    double distance = 0.0;           // d_{t_n}(x_n, x_prev)
    double slope_bound = 0.0;        // d_{t_n}(x_n, x_prev)/h
};

template <class State>
struct StepResult {
    State x;
    StepDiagnostics diagnostics;
};

namespace detail {

template <class State>
State solve_inner(const StepProblem<State>& p, double t_energy, double tau, const State& anchor, double t_metric, std::size_t step) {
    try {
        return p.inner_solver(t_energy, tau, anchor, t_metric);
    } catch (const ConvergenceError& e) {
        throw StepError(std::string("inner solver failed: ") + e.what(), e.residual(), step);
    }
}

}  // namespace detail

template <class State>
StepResult<State> mm_step(const StepProblem<State>& p, const State& x_prev, double t_prev, double t_n, std::size_t step = 0) {
    const double h = t_n - t_prev;
    if (!(h > 0.0)) throw OrderingError("mm_step: requires t_n > t_prev");
    StepResult<State> out{detail::solve_inner(p, t_n, h, x_prev, t_n, step), {}};
    auto& d = out.diagnostics;
    d.energy = p.energy(t_n, out.x);
    d.distance = p.metric(t_n, out.x, x_prev);
    d.objective = d.energy + d.distance * d.distance / (2.0 * h);
    d.objective_at_anchor = p.energy(t_n, x_prev);
    d.slope_bound = d.distance / h;
    return out;
}

// Minimizer of E_r(x) + d_{t_n}^2(x, x_prev)/(2 (r - t_prev)).
template <class State>
State variational_interpolant(const StepProblem<State>& p, const State& x_prev, double t_prev, double t_n, double r,
                              std::size_t step = 0) {
    if (!(r > t_prev) || r > t_n) throw OrderingError("variational_interpolant: requires t_prev < r <= t_n");
    return detail::solve_inner(p, r, r - t_prev, x_prev, t_n, step);
}

template <class State>
struct DiscreteSolution {
    TimeGrid grid{1.0, 1.0};
    QuadratureRule rule;               // interpolant nodes on [0, 1] per step
    std::vector<State> states;         // x_0 .. x_N
    std::vector<double> energies;      // E_{t_n}(x_n)
    std::vector<double> distances;     // d_{t_n}(x_n, x_{n-1}); entry 0 unused
    std::vector<StepDiagnostics> steps;  // entry 0 unused

    // Per step n >= 1 (index n - 1), per quadrature node q.
    std::vector<std::vector<double>> interp_times;
    std::vector<std::vector<double>> interp_weights;  // absolute quadrature weights, summing to h
    std::vector<std::vector<State>> interpolants;
    std::vector<std::vector<double>> dsl;             // d_{t_n}(x_{n-1}, x~_r)/(r - t_{n-1})
    std::vector<std::vector<double>> interp_energy;   // E_r(x~_r)
    std::vector<std::vector<double>> interp_rate;     // (d/dr E_r)(x~_r)
    std::vector<std::vector<double>> interp_to_node;  // d_{t_n}(x~_r, x_n)

    double lower_bound = 0.0;
    double lipschitz = 0.0;
    double inner_tolerance = 0.0;
    std::size_t completed = 0;  // number of finished steps

    double h() const noexcept { return grid.step(); }
    double dsp(std::size_t n) const { return distances.at(n) / grid.step(); }
    // x̄_t: x_n for t in (t_{n-1}, t_n], x_0 at t = 0; t beyond t_N maps to x_N.
    const State& piecewise_constant(double t) const { return states.at(std::min(grid.upper_index(t), completed)); }
};

// Aborted run: carries everything computed before the failing step.
template <class State>
class SchemeAborted : public StepError {
public:
    SchemeAborted(const StepError& cause, DiscreteSolution<State> partial)
        : StepError(cause.what(), cause.residual(), cause.step()), partial_(std::move(partial)) {}
    const DiscreteSolution<State>& partial() const noexcept { return partial_; }

private:
    DiscreteSolution<State> partial_;
};

// Interpolant quadrature per step: Gauss-Legendre with `nodes` points. With
// adaptive_tol > 0 the step is bisected until the panel estimate of
// int (d/dr E_r)(x~_r) - 1/2 Dsl^2 dr changes by at most adaptive_tol * width
// on refinement; only the accepted panels' nodes are cached. On finite spaces
// the interpolant stays at the anchor until a threshold in r and then moves,
// so the integrand has kinks that fixed rules resolve poorly.
struct QuadratureOptions {
    std::size_t nodes = 3;
    double adaptive_tol = 0.0;
    std::size_t max_depth = 14;
};

template <class State>
DiscreteSolution<State> run_scheme(const StepProblem<State>& p, const State& x0, const TimeGrid& grid, const QuadratureOptions& quad) {
    DiscreteSolution<State> sol;
    sol.grid = grid;
    if (quad.nodes > 0) sol.rule = gauss_legendre(quad.nodes);
    sol.lower_bound = p.lower_bound;
    sol.lipschitz = p.lipschitz;
    sol.inner_tolerance = p.inner_tolerance;
    const std::size_t N = grid.steps();
    sol.states.reserve(N + 1);
    sol.states.push_back(x0);
    sol.energies.push_back(p.energy(0.0, x0));
    sol.distances.push_back(0.0);
    sol.steps.push_back({});
    for (std::size_t n = 1; n <= N; ++n) {
        const double t_prev = grid.node(n - 1), t_n = grid.node(n);
        const State& x_prev = sol.states.back();
        try {
            auto res = mm_step(p, x_prev, t_prev, t_n, n);
            struct Node {
                double r, w, dsl, en, rate, to_node;
                State x;
            };
            auto eval = [&](double r, double w) {
                State xr = variational_interpolant(p, x_prev, t_prev, t_n, r, n);
                Node nd{r, w, p.metric(t_n, x_prev, xr) / (r - t_prev), p.energy(r, xr), p.energy_rate(r, xr),
                        p.metric(t_n, xr, res.x), std::move(xr)};
                return nd;
            };
            auto panel = [&](double a, double b) {
                std::vector<Node> nodes;
                for (std::size_t k = 0; k < sol.rule.nodes.size(); ++k)
                    nodes.push_back(eval(a + sol.rule.nodes[k] * (b - a), sol.rule.weights[k] * (b - a)));
                return nodes;
            };
            auto integral = [](const std::vector<Node>& nodes) {
                double s = 0.0;
                for (const auto& nd : nodes) s += nd.w * (nd.rate - 0.5 * nd.dsl * nd.dsl);
                return s;
            };
            std::vector<Node> accepted;
            if (!sol.rule.nodes.empty()) {
                if (quad.adaptive_tol > 0.0) {
                    auto g = [](const Node& nd) { return nd.rate - 0.5 * nd.dsl * nd.dsl; };
                    // Value at z of the polynomial through the panel's nodes.
                    auto extrapolate = [&](const std::vector<Node>& nodes, double z) {
                        double v = 0.0;
                        for (std::size_t i = 0; i < nodes.size(); ++i) {
                            double l = 1.0;
                            for (std::size_t j = 0; j < nodes.size(); ++j)
                                if (j != i) l *= (z - nodes[j].r) / (nodes[i].r - nodes[j].r);
                            v += l * g(nodes[i]);
                        }
                        return v;
                    };
                    // A kink between the outermost node and the panel end is
                    // invisible to the nodes, so endpoint values are checked
                    // against the panel polynomial. ga is NaN at t_prev, where
                    // the integrand is not evaluated.
                    auto edge_error = [&](const std::vector<Node>& nodes, double a, double b, double ga, double gb) {
                        double e = std::abs(gb - extrapolate(nodes, b));
                        if (std::isfinite(ga)) e = std::max(e, std::abs(ga - extrapolate(nodes, a)));
                        return e * (b - a) / static_cast<double>(2 * nodes.size());
                    };
                    std::function<void(double, double, std::vector<Node>, double, double, std::size_t)> refine =
                        [&](double a, double b, std::vector<Node> whole, double ga, double gb, std::size_t depth) {
                            const double mid = 0.5 * (a + b);
                            const double gm = g(eval(mid, 0.0));
                            auto left = panel(a, mid), right = panel(mid, b);
                            const double diff = std::abs(integral(left) + integral(right) - integral(whole)) +
                                                edge_error(left, a, mid, ga, gm) + edge_error(right, mid, b, gm, gb);
                            if (diff <= quad.adaptive_tol * (b - a) || depth >= quad.max_depth) {
                                for (auto& nd : left) accepted.push_back(std::move(nd));
                                for (auto& nd : right) accepted.push_back(std::move(nd));
                                return;
                            }
                            refine(a, mid, std::move(left), ga, gm, depth + 1);
                            refine(mid, b, std::move(right), gm, gb, depth + 1);
                        };
                    const double g_end = g(eval(t_n, 0.0));
                    refine(t_prev, t_n, panel(t_prev, t_n), std::numeric_limits<double>::quiet_NaN(), g_end, 0);
                } else {
                    accepted = panel(t_prev, t_n);
                }
            }
            std::vector<double> times, weights, dsl, en, rate, to_node;
            std::vector<State> interp;
            for (auto& nd : accepted) {
                times.push_back(nd.r);
                weights.push_back(nd.w);
                dsl.push_back(nd.dsl);
                en.push_back(nd.en);
                rate.push_back(nd.rate);
                to_node.push_back(nd.to_node);
                interp.push_back(std::move(nd.x));
            }
            sol.interp_times.push_back(std::move(times));
            sol.interp_weights.push_back(std::move(weights));
            sol.interpolants.push_back(std::move(interp));
            sol.dsl.push_back(std::move(dsl));
            sol.interp_energy.push_back(std::move(en));
            sol.interp_rate.push_back(std::move(rate));
            sol.interp_to_node.push_back(std::move(to_node));
            sol.energies.push_back(res.diagnostics.energy);
            sol.distances.push_back(res.diagnostics.distance);
            sol.steps.push_back(res.diagnostics);
            sol.states.push_back(std::move(res.x));
            sol.completed = n;
        } catch (const StepError& e) {
            throw SchemeAborted<State>(e, std::move(sol));
        }
    }
    return sol;
}

template <class State>
DiscreteSolution<State> run_scheme(const StepProblem<State>& p, const State& x0, const TimeGrid& grid,
                                   std::size_t interp_nodes_per_step = 3) {
    QuadratureOptions q;
    q.nodes = interp_nodes_per_step;
    return run_scheme(p, x0, grid, q);
}

// ---------------------------------------------------------------------------
// Discrete energy-dissipation ledger

struct EdeLedger {
    // Per interval (t_{n-1}, t_n], index n - 1.
    std::vector<double> energy_drop;  // E_{t_{n-1}}(x_{n-1}) - E_{t_n}(x_n)
    std::vector<double> speed_term;   // 1/2 int Dsp^2 = d^2/(2h)
    std::vector<double> slope_term;   // 1/2 int Dsl^2 (quadrature)
    std::vector<double> drift_term;   // int (d/dr E_r)(x~_r) dr (quadrature)
    std::vector<double> residual;     // LHS - RHS on the interval
    std::vector<double> cumulative;   // LHS - RHS on [0, t_n]
    double max_cumulative = 0.0;      // max_n |cumulative_n|
    double budget = 0.0;              // inner tolerance * steps + quadrature budget
    bool within_budget() const noexcept { return max_cumulative <= budget; }
};

template <class State>
EdeLedger ede_ledger(const DiscreteSolution<State>& sol, double quadrature_budget = 1e-4) {
    EdeLedger L;
    const double h = sol.h();
    double cum = 0.0;
    for (std::size_t n = 1; n <= sol.completed; ++n) {
        const auto& w = sol.interp_weights[n - 1];
        double slope = 0.0, drift = 0.0;
        for (std::size_t q = 0; q < w.size(); ++q) {
            slope += 0.5 * w[q] * sol.dsl[n - 1][q] * sol.dsl[n - 1][q];
            drift += w[q] * sol.interp_rate[n - 1][q];
        }
        const double d = sol.distances[n];
        const double speed = d * d / (2.0 * h);
        const double drop = sol.energies[n - 1] - sol.energies[n];
        const double r = speed + slope - drop - drift;
        cum += r;
        L.energy_drop.push_back(drop);
        L.speed_term.push_back(speed);
        L.slope_term.push_back(slope);
        L.drift_term.push_back(drift);
        L.residual.push_back(r);
        L.cumulative.push_back(cum);
        L.max_cumulative = std::max(L.max_cumulative, std::abs(cum));
    }
    L.budget = sol.inner_tolerance * static_cast<double>(sol.completed) + quadrature_budget;
    return L;
}

// ---------------------------------------------------------------------------
// A-priori bounds

struct AprioriReport {
    double energy_max = 0.0;       // max E_t(x~_t) over nodes and cached interpolants
    double energy_bound = 0.0;     // E_0(x_0) + L* T
    double dissipation = 0.0;      // sum d^2/(2h)
    double dissipation_bound = 0.0;  // E_0(x_0) - inf E + L* T
    double c3_fit = 0.0;           // max d_{t_n}^2(x~_t, x̄_t)/h
    double c3_bound = 0.0;         // 8 C2 + 8 h L*
    double proximity_excess = 0.0;   // max of d^2(x~_{r1}, x_prev) - d^2(x~_{r2}, x_prev) - 4 r1 r2 L*
    std::vector<std::string> violations;
    bool ok() const noexcept { return violations.empty(); }
};

template <class State>
AprioriReport apriori_check(const DiscreteSolution<State>& sol, double tol = 1e-9) {
    AprioriReport rep;
    const double h = sol.h();
    const double T = sol.grid.node(sol.completed);
    const double E0 = sol.energies.front();
    rep.energy_bound = E0 + sol.lipschitz * T;
    rep.dissipation_bound = E0 - sol.lower_bound + sol.lipschitz * T;
    rep.c3_bound = 8.0 * rep.dissipation_bound + 8.0 * h * sol.lipschitz;
    rep.energy_max = E0;
    rep.proximity_excess = -std::numeric_limits<double>::infinity();
    for (std::size_t n = 1; n <= sol.completed; ++n) {
        rep.energy_max = std::max(rep.energy_max, sol.energies[n]);
        rep.dissipation += sol.distances[n] * sol.distances[n] / (2.0 * h);
        const auto& times = sol.interp_times[n - 1];
        for (std::size_t q = 0; q < times.size(); ++q) {
            rep.energy_max = std::max(rep.energy_max, sol.interp_energy[n - 1][q]);
            double dn = sol.interp_to_node[n - 1][q];
            rep.c3_fit = std::max(rep.c3_fit, dn * dn / h);
            const double tprev = sol.grid.node(n - 1);
            for (std::size_t k = q + 1; k < times.size(); ++k) {
                double r1 = times[q] - tprev, r2 = times[k] - tprev;
                double d1 = sol.dsl[n - 1][q] * r1, d2 = sol.dsl[n - 1][k] * r2;
                rep.proximity_excess = std::max(rep.proximity_excess, d1 * d1 - d2 * d2 - 4.0 * r1 * r2 * sol.lipschitz);
            }
        }
    }
    const double slack = tol * std::max(1.0, std::abs(rep.energy_bound));
    if (rep.energy_max > rep.energy_bound + slack) rep.violations.push_back("energy bound E_t(x~_t) <= E_0 + L* T");
    if (rep.dissipation > rep.dissipation_bound + slack) rep.violations.push_back("dissipation bound sum d^2/2h <= E_0 - inf E + L* T");
    if (rep.c3_fit > rep.c3_bound + slack) rep.violations.push_back("interpolant gap d^2(x~, x̄) <= C3 h");
    if (rep.proximity_excess > slack) rep.violations.push_back("monotone proximity of interpolants");
    if (!std::isfinite(rep.proximity_excess)) rep.proximity_excess = 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Refinement studies

struct ConvergenceRow {
    double h = 0.0;
    double error = 0.0;
    double order = std::numeric_limits<double>::quiet_NaN();  // against the previous row
};

struct ConvergenceTable {
    std::vector<ConvergenceRow> rows;
    double fitted_order = std::numeric_limits<double>::quiet_NaN();  // least-squares slope of log error vs log h
};

inline ConvergenceTable make_table(const std::vector<double>& hs, const std::vector<double>& errors) {
    ConvergenceTable tab;
    for (std::size_t k = 0; k < hs.size(); ++k) {
        ConvergenceRow row{hs[k], errors[k]};
        if (k > 0 && errors[k] > 0.0 && errors[k - 1] > 0.0)
            row.order = std::log(errors[k - 1] / errors[k]) / std::log(hs[k - 1] / hs[k]);
        tab.rows.push_back(row);
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t cnt = 0;
    for (std::size_t k = 0; k < hs.size(); ++k) {
        if (!(errors[k] > 0.0)) continue;
        double x = std::log(hs[k]), y = std::log(errors[k]);
        sx += x, sy += y, sxx += x * x, sxy += x * y;
        ++cnt;
    }
    if (cnt >= 2) tab.fitted_order = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
    return tab;
}

// Runs the scheme for each h. With a reference curve the error is the largest
// d_t(x̄_t^h, ref(t)) over eval_times; otherwise successive trajectories are
// compared (the error of row k is the gap between h_k and h_{k+1}, and the
// last row is dropped).
template <class State>
ConvergenceTable refine_study(const StepProblem<State>& p, const State& x0, double T, const std::vector<double>& h_list,
                              const std::vector<double>& eval_times,
                              const std::function<State(double)>& reference = nullptr) {
    if (h_list.size() < 3) throw DomainError("refine_study: need at least three step sizes");
    for (std::size_t k = 1; k < h_list.size(); ++k)
        if (!(h_list[k] < h_list[k - 1])) throw DomainError("refine_study: step sizes must decrease");
    std::vector<DiscreteSolution<State>> runs;
    for (double h : h_list) runs.push_back(run_scheme(p, x0, TimeGrid(T, h), 0));
    std::vector<double> hs, errs;
    if (reference) {
        for (std::size_t k = 0; k < runs.size(); ++k) {
            double e = 0.0;
            for (double t : eval_times) e = std::max(e, p.metric(t, runs[k].piecewise_constant(t), reference(t)));
            hs.push_back(h_list[k]);
            errs.push_back(e);
        }
    } else {
        for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
            double e = 0.0;
            for (double t : eval_times)
                e = std::max(e, p.metric(t, runs[k].piecewise_constant(t), runs[k + 1].piecewise_constant(t)));
            hs.push_back(h_list[k]);
            errs.push_back(e);
        }
    }
    return make_table(hs, errs);
}

// ---------------------------------------------------------------------------

struct ProblemReport {
    double min_energy = 0.0;
    double max_time_quotient = 0.0;
    std::vector<std::string> violations;
    bool ok() const noexcept { return violations.empty(); }
};

// Probes assumptions: E_t >= lower_bound and |E_t - E_s| <= L* |t - s|.
template <class State>
ProblemReport check_problem(const StepProblem<State>& p, const std::vector<State>& probes, const std::vector<double>& times,
                            double tol = 1e-9) {
    ProblemReport rep;
    rep.min_energy = std::numeric_limits<double>::infinity();
    for (const State& x : probes) {
        std::vector<double> e;
        for (double t : times) {
            e.push_back(p.energy(t, x));
            rep.min_energy = std::min(rep.min_energy, e.back());
        }
        for (std::size_t a = 0; a < times.size(); ++a)
            for (std::size_t b = a + 1; b < times.size(); ++b) {
                double dt = std::abs(times[b] - times[a]);
                if (dt > 0.0) rep.max_time_quotient = std::max(rep.max_time_quotient, std::abs(e[b] - e[a]) / dt);
            }
    }
    if (rep.min_energy < p.lower_bound - tol) rep.violations.push_back("energy below declared lower bound");
    if (rep.max_time_quotient > p.lipschitz + tol) rep.violations.push_back("energy time-Lipschitz constant exceeded");
    return rep;
}

}  // namespace dynflow
