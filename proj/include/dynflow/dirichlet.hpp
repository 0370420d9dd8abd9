#pragma once

// Time-dependent Dirichlet forms on weighted graphs, heat propagators with
// their algebraic adjoints, and a finite-dimensional quadratic Hilbert testbed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/error.hpp"
#include "dynflow/mms.hpp"
#include "dynflow/space.hpp"
#include "dynflow/time_grid.hpp"

namespace dynflow {

// Conductances w_t (symmetric, nonnegative, zero diagonal) with vertex measure m_t.
// Energy convention: E_t(u) = 1/4 sum_{i,j} w_t(i,j) (u_i - u_j)^2 = 1/2 u^T L_t u.
class GraphForm {
public:
    using ConductanceFn = std::function<Matrix(double)>;

    GraphForm(ConductanceFn w, MeasureFamily measure, double conductance_lipschitz = 0.0)
        : w_(std::move(w)), measure_(std::move(measure)), Lw_(conductance_lipschitz) {
        if (!w_) throw DomainError("graph form: missing conductances");
        Matrix W0 = w_(0.0);
        if (W0.rows() != W0.cols() || static_cast<std::size_t>(W0.rows()) != measure_.size())
            throw DimensionError("graph form: conductance matrix does not match the vertex measure");
    }

    static GraphForm constant(Matrix W, MeasureFamily measure) {
        return GraphForm([W = std::move(W)](double) { return W; }, std::move(measure), 0.0);
    }

    std::size_t size() const noexcept { return measure_.size(); }
    double horizon() const noexcept { return measure_.horizon(); }
    double conductance_lipschitz() const noexcept { return Lw_; }
    const MeasureFamily& measure_family() const noexcept { return measure_; }

    Matrix conductance(double t) const {
        detail::check_time(t, horizon(), "graph form");
        return w_(t);
    }
    Vector measure(double t) const { return measure_.at(t); }

    // (L u)_i = sum_j w(i,j) (u_i - u_j)
    Matrix laplacian_matrix(double t) const {
        Matrix W = conductance(t);
        Matrix L = -W;
        L.diagonal() = W.rowwise().sum();
        return L;
    }

private:
    ConductanceFn w_;
    MeasureFamily measure_;
    double Lw_;
};

struct GraphFormReport {
    double asymmetry = 0.0;
    double min_offdiag = 0.0;
    double max_diag = 0.0;
    double max_log_quotient = 0.0;  // max |log w_t/w_s|/|t - s| on positive entries
    bool connected = true;
    bool ok = true;
};

inline bool is_connected(const Matrix& W) {
    const auto n = W.rows();
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::vector<Eigen::Index> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
        auto i = stack.back();
        stack.pop_back();
        for (Eigen::Index j = 0; j < n; ++j)
            if (W(i, j) > 0.0 && !seen[static_cast<std::size_t>(j)]) {
                seen[static_cast<std::size_t>(j)] = 1;
                stack.push_back(j);
            }
    }
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
}

inline GraphFormReport check_graph_form(const GraphForm& form, const std::vector<double>& times, double tol = 1e-12) {
    GraphFormReport rep;
    rep.min_offdiag = std::numeric_limits<double>::infinity();
    std::vector<Matrix> Ws;
    for (double t : times) {
        Matrix W = form.conductance(t);
        rep.asymmetry = std::max(rep.asymmetry, (W - W.transpose()).cwiseAbs().maxCoeff());
        rep.max_diag = std::max(rep.max_diag, W.diagonal().cwiseAbs().maxCoeff());
        Matrix off = W;
        off.diagonal().setConstant(std::numeric_limits<double>::infinity());
        rep.min_offdiag = std::min(rep.min_offdiag, off.minCoeff());
        rep.connected = rep.connected && is_connected(W);
        Ws.push_back(std::move(W));
    }
    for (std::size_t a = 0; a < Ws.size(); ++a)
        for (std::size_t b = a + 1; b < Ws.size(); ++b) {
            double dt = std::abs(times[b] - times[a]);
            if (dt == 0.0) continue;
            for (Eigen::Index i = 0; i < Ws[a].rows(); ++i)
                for (Eigen::Index j = 0; j < Ws[a].cols(); ++j)
                    if (i != j && Ws[a](i, j) > 0.0 && Ws[b](i, j) > 0.0)
                        rep.max_log_quotient = std::max(rep.max_log_quotient, std::abs(std::log(Ws[b](i, j) / Ws[a](i, j))) / dt);
        }
    rep.ok = rep.asymmetry <= tol && rep.max_diag <= tol && rep.min_offdiag >= 0.0 && rep.connected &&
             rep.max_log_quotient <= form.conductance_lipschitz() * (1.0 + 1e-9) + 1e-9;
    return rep;
}

inline double dirichlet_energy(const GraphForm& form, const Vector& u, double t) {
    Matrix W = form.conductance(t);
    if (u.size() != W.rows()) throw DimensionError("dirichlet_energy: dimension mismatch");
    double e = 0.0;
    for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) {
            double d = u(i) - u(j);
            e += W(i, j) * d * d;
        }
    return 0.25 * e;
}

// (Delta_t u)_i = (1/m_{t,i}) sum_j w_t(i,j) (u_j - u_i)
inline Vector laplacian(const GraphForm& form, const Vector& u, double t) {
    if (u.size() != static_cast<Eigen::Index>(form.size())) throw DimensionError("laplacian: dimension mismatch");
    Vector Lu = form.laplacian_matrix(t) * u;
    return -(Lu.array() / form.measure(t).array()).matrix();
}

// ---------------------------------------------------------------------------
// Propagators

enum class HeatScheme { implicit_euler, crank_nicolson };

inline const char* to_string(HeatScheme s) { return s == HeatScheme::implicit_euler ? "implicit-euler" : "crank-nicolson"; }

// One step u -> A^{-1} B u, mapping functions at time `from` to functions at `to`.
// A is symmetric positive definite; the adjoint under the pairings <.,.>_{m_to}
// and <.,.>_{m_from} is v -> M_from^{-1} B^T A^{-1} M_to v.
struct StepFactor {
    double from = 0.0;
    double to = 0.0;
    std::shared_ptr<const Eigen::LDLT<Matrix>> A;
    Matrix B;
    Vector m_from;
    Vector m_to;

    Vector apply(const Vector& u) const { return A->solve(B * u); }
    Vector apply_adjoint(const Vector& v) const {
        Vector w = A->solve((m_to.array() * v.array()).matrix());
        return ((B.transpose() * w).array() / m_from.array()).matrix();
    }
};

class Propagator {
public:
    Propagator() = default;
    Propagator(double s, double t, std::vector<std::shared_ptr<const StepFactor>> steps, bool adjoint = false)
        : s_(s), t_(t), steps_(std::move(steps)), adjoint_(adjoint) {}

    static Propagator identity(double s) { return Propagator(s, s, {}); }

    // Forward: maps functions at s to functions at t. Adjoint: maps functions at
    // t back to functions at s.
    double source_time() const noexcept { return s_; }
    double target_time() const noexcept { return t_; }
    bool is_adjoint() const noexcept { return adjoint_; }
    std::size_t steps() const noexcept { return steps_.size(); }
    const std::vector<std::shared_ptr<const StepFactor>>& factors() const noexcept { return steps_; }

    Vector apply(const Vector& u) const {
        Vector x = u;
        if (!adjoint_) {
            for (const auto& f : steps_) x = f->apply(x);
        } else {
            for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) x = (*it)->apply_adjoint(x);
        }
        return x;
    }

    // Factors [k0, k1) of a forward propagator.
    Propagator slice(std::size_t k0, std::size_t k1) const {
        if (adjoint_) throw DomainError("propagator: slice of an adjoint");
        if (k0 > k1 || k1 > steps_.size()) throw DomainError("propagator: slice out of range");
        if (k0 == k1) return identity(k0 == 0 ? s_ : steps_[k0 - 1]->to);
        std::vector<std::shared_ptr<const StepFactor>> sub(steps_.begin() + static_cast<std::ptrdiff_t>(k0),
                                                           steps_.begin() + static_cast<std::ptrdiff_t>(k1));
        const double s = sub.front()->from, t = sub.back()->to;
        return Propagator(s, t, std::move(sub));
    }

    // this after first: P_{t,r} o P_{r,s}.
    Propagator after(const Propagator& first) const {
        if (adjoint_ || first.adjoint_) throw DomainError("propagator: composition of adjoints");
        if (first.t_ != s_) throw OrderingError("propagator: composition times do not match");
        auto all = first.steps_;
        all.insert(all.end(), steps_.begin(), steps_.end());
        return Propagator(first.s_, t_, std::move(all));
    }

    Matrix matrix() const {
        const Eigen::Index n = dimension();
        Matrix P(n, n);
        for (Eigen::Index j = 0; j < n; ++j) P.col(j) = apply(Vector::Unit(n, j));
        return P;
    }

    Eigen::Index dimension() const {
        if (steps_.empty()) throw DomainError("propagator: identity has no recorded dimension");
        return steps_.front()->B.rows();
    }

private:
    double s_ = 0.0;
    double t_ = 0.0;
    std::vector<std::shared_ptr<const StepFactor>> steps_;
    bool adjoint_ = false;
};

inline Propagator adjoint_propagator(const Propagator& P) {
    if (P.is_adjoint()) throw DomainError("adjoint_propagator: already an adjoint");
    return Propagator(P.source_time(), P.target_time(), P.factors(), true);
}

namespace detail {

inline std::shared_ptr<const Eigen::LDLT<Matrix>> factorize(const Matrix& A) {
    auto ldlt = std::make_shared<Eigen::LDLT<Matrix>>(A);
    if (ldlt->info() != Eigen::Success || !ldlt->isPositive() || (ldlt->vectorD().array() <= 0.0).any())
        throw SolverError("heat step: system matrix is singular or indefinite");
    return ldlt;
}

}  // namespace detail

inline std::shared_ptr<const StepFactor> heat_factor(const GraphForm& form, double t_prev, double t_n, HeatScheme scheme) {
    const double h = t_n - t_prev;
    if (!(h > 0.0)) throw OrderingError("heat_step: requires t_n > t_prev");
    auto f = std::make_shared<StepFactor>();
    f->from = t_prev;
    f->to = t_n;
    f->m_from = form.measure(t_prev);
    f->m_to = form.measure(t_n);
    Matrix Mn = f->m_to.asDiagonal();
    Matrix Ln = form.laplacian_matrix(t_n);
    if (scheme == HeatScheme::implicit_euler) {
        f->A = detail::factorize(Mn + h * Ln);
        f->B = Mn;
    } else {
        f->A = detail::factorize(Mn + 0.5 * h * Ln);
        Matrix Lp = form.laplacian_matrix(t_prev);
        Vector ratio = f->m_to.array() / f->m_from.array();
        f->B = Mn - 0.5 * h * ratio.asDiagonal() * Lp;
    }
    return f;
}

inline Vector heat_step(const GraphForm& form, const Vector& u_prev, double t_prev, double t_n,
                        HeatScheme scheme = HeatScheme::implicit_euler) {
    if (u_prev.size() != static_cast<Eigen::Index>(form.size())) throw DimensionError("heat_step: dimension mismatch");
    return heat_factor(form, t_prev, t_n, scheme)->apply(u_prev);
}

struct HeatFlow {
    std::vector<double> times;
    std::vector<Vector> states;
    Propagator propagator;
};

// Propagates u0 from node n_from to node n_to of the grid (n_to = 0 means the last node).
inline HeatFlow heat_flow(const GraphForm& form, const Vector& u0, const TimeGrid& grid,
                          HeatScheme scheme = HeatScheme::implicit_euler, std::size_t n_from = 0, std::size_t n_to = 0) {
    if (n_to == 0) n_to = grid.steps();
    if (n_from >= n_to) throw OrderingError("heat_flow: requires s < t");
    if (u0.size() != static_cast<Eigen::Index>(form.size())) throw DimensionError("heat_flow: dimension mismatch");
    HeatFlow out;
    std::vector<std::shared_ptr<const StepFactor>> factors;
    out.times.push_back(grid.node(n_from));
    out.states.push_back(u0);
    for (std::size_t n = n_from + 1; n <= n_to; ++n) {
        factors.push_back(heat_factor(form, grid.node(n - 1), grid.node(n), scheme));
        out.states.push_back(factors.back()->apply(out.states.back()));
        out.times.push_back(grid.node(n));
    }
    out.propagator = Propagator(grid.node(n_from), grid.node(n_to), std::move(factors));
    return out;
}

// ---------------------------------------------------------------------------
// Forward adjoint flow (densities rho with mu_t = rho_t m_t)

enum class AdjointMode { algebraic, direct_pde };

struct AdjointFlow {
    std::vector<double> times;
    std::vector<Vector> densities;
    std::vector<Vector> measures;  // rho_n * m_{t_n}
};

// Algebraic mode: rho_n = R_n^* rho_{n-1}, where R_n is the implicit heat step
// with the matrix frozen at t_n, run backward from t_n to t_{n-1}. This gives
// (M_n + h L_n) rho_n = M_{n-1} rho_{n-1}; mass and positivity are exact.
// Direct mode: (I - h Delta_{t_n} - h diag(d_t f_{t_n})) rho_n = rho_{n-1}.
inline AdjointFlow forward_adjoint_flow(const GraphForm& form, const Vector& rho0, const TimeGrid& grid,
                                        AdjointMode mode = AdjointMode::algebraic) {
    if (rho0.size() != static_cast<Eigen::Index>(form.size())) throw DimensionError("forward_adjoint_flow: dimension mismatch");
    if ((rho0.array() < 0.0).any()) throw DomainError("forward_adjoint_flow: density must be nonnegative");
    AdjointFlow out;
    out.times.push_back(0.0);
    out.densities.push_back(rho0);
    out.measures.push_back((rho0.array() * form.measure(0.0).array()).matrix());
    for (std::size_t n = 1; n <= grid.steps(); ++n) {
        const double tp = grid.node(n - 1), tn = grid.node(n), h = tn - tp;
        Vector rho;
        if (mode == AdjointMode::algebraic) {
            StepFactor back;
            back.from = tn;
            back.to = tp;
            back.m_from = form.measure(tn);
            back.m_to = form.measure(tp);
            Matrix Mn = back.m_from.asDiagonal();
            back.A = detail::factorize(Mn + h * form.laplacian_matrix(tn));
            back.B = Mn;
            rho = back.apply_adjoint(out.densities.back());
        } else {
            Vector m = form.measure(tn);
            Vector df = form.measure_family().rate(tn);
            Matrix S = Matrix(m.asDiagonal()) + h * form.laplacian_matrix(tn);
            S.diagonal() -= h * (m.array() * df.array()).matrix();
            Eigen::PartialPivLU<Matrix> lu(S);
            rho = lu.solve((m.array() * out.densities.back().array()).matrix());
        }
        out.times.push_back(tn);
        out.measures.push_back((rho.array() * form.measure(tn).array()).matrix());
        out.densities.push_back(std::move(rho));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checks

struct MaximumPrincipleReport {
    double min_value = 0.0;
    double max_value = 0.0;
    double constant_error = 0.0;  // |P 1 - 1|_inf
    std::size_t probes = 0;
    bool ok = true;
};

inline MaximumPrincipleReport maximum_principle_check(const Propagator& P, const std::vector<Vector>& probes, double tol = 1e-12) {
    MaximumPrincipleReport rep;
    rep.min_value = std::numeric_limits<double>::infinity();
    rep.max_value = -std::numeric_limits<double>::infinity();
    for (const Vector& u : probes) {
        Vector v = P.apply(u);
        rep.min_value = std::min(rep.min_value, v.minCoeff());
        rep.max_value = std::max(rep.max_value, v.maxCoeff());
        ++rep.probes;
    }
    const Eigen::Index n = P.steps() > 0 ? P.dimension() : (probes.empty() ? 0 : probes.front().size());
    if (n > 0) rep.constant_error = (P.apply(Vector::Ones(n)).array() - 1.0).abs().maxCoeff();
    rep.ok = rep.min_value >= -tol && rep.max_value <= 1.0 + tol && rep.constant_error <= tol;
    return rep;
}

inline std::vector<Vector> unit_interval_probes(std::size_t n, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<Vector> probes;
    for (std::size_t k = 0; k < count; ++k) {
        Vector v(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = U(rng);
        probes.push_back(std::move(v));
    }
    return probes;
}

struct DualityReport {
    double max_gap = 0.0;  // |<P u, v>_{m_t} - <u, P^* v>_{m_s}| relative to |u| |v|
    bool ok = true;
};

inline DualityReport duality_check(const Propagator& P, const GraphForm& form, const std::vector<Vector>& us,
                                   const std::vector<Vector>& vs, double tol = 1e-12) {
    DualityReport rep;
    Propagator Pstar = adjoint_propagator(P);
    Vector ms = form.measure(P.source_time()), mt = form.measure(P.target_time());
    for (std::size_t k = 0; k < std::min(us.size(), vs.size()); ++k) {
        double lhs = (P.apply(us[k]).array() * vs[k].array() * mt.array()).sum();
        double rhs = (us[k].array() * Pstar.apply(vs[k]).array() * ms.array()).sum();
        double scale = std::max(1.0, us[k].norm() * vs[k].norm());
        rep.max_gap = std::max(rep.max_gap, std::abs(lhs - rhs) / scale);
    }
    rep.ok = rep.max_gap <= tol;
    return rep;
}

struct ContractionReport {
    std::vector<double> times;
    std::vector<double> gap_sq;        // |u_t - v_t|_t^2
    std::vector<double> envelope;      // e^{2 L t} |u_0 - v_0|_0^2
    std::vector<double> loose_envelope;  // e^{3 L t} |u_0 - v_0|_0^2 (K = 0)
    double L = 0.0;
    double slack = 0.0;                // 10 h |u_0 - v_0|_0^2
    double worst_excess = 0.0;         // max gap_sq - envelope - slack
    bool ok = true;
};

inline double weighted_norm_sq(const Vector& u, const Vector& m) { return (u.array().square() * m.array()).sum(); }

inline ContractionReport contraction_check(const GraphForm& form, const Vector& u0, const Vector& v0, const TimeGrid& grid,
                                           HeatScheme scheme = HeatScheme::implicit_euler) {
    auto fu = heat_flow(form, u0, grid, scheme);
    auto fv = heat_flow(form, v0, grid, scheme);
    ContractionReport rep;
    rep.L = 0.5 * form.measure_family().lipschitz();
    const double g0 = weighted_norm_sq(u0 - v0, form.measure(0.0));
    rep.slack = 10.0 * grid.step() * g0;
    rep.worst_excess = -std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < fu.states.size(); ++n) {
        double t = fu.times[n];
        double g = weighted_norm_sq(fu.states[n] - fv.states[n], form.measure(t));
        rep.times.push_back(t);
        rep.gap_sq.push_back(g);
        rep.envelope.push_back(std::exp(2.0 * rep.L * t) * g0);
        rep.loose_envelope.push_back(std::exp(3.0 * rep.L * t) * g0);
        rep.worst_excess = std::max(rep.worst_excess, g - rep.envelope.back() - rep.slack);
    }
    rep.ok = rep.worst_excess <= 1e-14 * std::max(1.0, g0);
    return rep;
}

struct ResidualReport {
    std::vector<double> per_step;
    double max_residual = 0.0;
    bool ok = true;
};

// |M_n (u_n - u_{n-1})/h + L_n u_n| relative to the size of its terms.
inline ResidualReport subdifferential_residual(const GraphForm& form, const std::vector<Vector>& states, const TimeGrid& grid,
                                               double tol = 1e-10) {
    ResidualReport rep;
    const double h = grid.step();
    for (std::size_t n = 1; n < states.size(); ++n) {
        const double t = grid.node(n);
        Vector m = form.measure(t);
        Vector a = (m.array() * (states[n] - states[n - 1]).array()).matrix() / h;
        Vector b = form.laplacian_matrix(t) * states[n];
        // Scale by the terms before cancellation in u_n - u_{n-1}.
        double scale = ((m.array() * states[n].array()).matrix().norm() + (m.array() * states[n - 1].array()).matrix().norm()) / h + b.norm();
        double r = scale > 0.0 ? (a + b).norm() / scale : 0.0;
        rep.per_step.push_back(r);
        rep.max_residual = std::max(rep.max_residual, r);
    }
    rep.ok = rep.max_residual <= tol;
    return rep;
}

// <(u_n - u_{n-1})/h, u_n - y>_{m_{t_n}} + E_{t_n}(u_n) - E_{t_n}(y) for each probe y.
struct EviReport {
    std::vector<double> values;
    double max_value = 0.0;
    bool ok = true;
};

inline EviReport evi_residual(const GraphForm& form, const std::vector<Vector>& states, const TimeGrid& grid, std::size_t n,
                              const std::vector<Vector>& probes, double tol = 1e-10) {
    if (n == 0 || n >= states.size()) throw DomainError("evi_residual: step index out of range");
    EviReport rep;
    rep.max_value = -std::numeric_limits<double>::infinity();
    const double t = grid.node(n), h = grid.step();
    Vector m = form.measure(t);
    Vector vel = (states[n] - states[n - 1]) / h;
    const double En = dirichlet_energy(form, states[n], t);
    for (const Vector& y : probes) {
        double v = (vel.array() * (states[n] - y).array() * m.array()).sum() + En - dirichlet_energy(form, y, t);
        rep.values.push_back(v);
        rep.max_value = std::max(rep.max_value, v);
    }
    double scale = std::max(1.0, std::abs(En));
    rep.ok = rep.max_value <= tol * scale;
    return rep;
}

// The Dirichlet energy as a minimizing-movement problem in L^2(m_t). The inner
// solver minimizes the quadratic step objective through a Cholesky factor of
// M_{t_metric}/tau + L_{t_energy}. Since |d/dt E_t(u)| <= Lw E_t(u), the declared
// L* = Lw E_0 e^{Lw T} covers states whose energy stays below E_0 e^{Lw T},
// where E_0 = energy_scale is the initial energy of the run.
inline StepProblem<Vector> dirichlet_step_problem(const GraphForm& form, double energy_scale = 0.0) {
    StepProblem<Vector> p;
    p.metric = [&form](double t, const Vector& x, const Vector& y) { return std::sqrt(weighted_norm_sq(x - y, form.measure(t))); };
    p.energy = [&form](double t, const Vector& u) { return dirichlet_energy(form, u, t); };
    p.energy_rate = [&form](double t, const Vector& u) {
        const double T = form.horizon(), d = 1e-6 * T;
        double a = std::max(0.0, t - d), b = std::min(T, t + d);
        return (dirichlet_energy(form, u, b) - dirichlet_energy(form, u, a)) / (b - a);
    };
    p.inner_solver = [&form](double t_energy, double tau, const Vector& anchor, double t_metric) {
        Vector m = form.measure(t_metric);
        Matrix S = form.laplacian_matrix(t_energy);
        S.diagonal() += m / tau;
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success) throw SolverError("dirichlet step: system not positive definite");
        return Vector(llt.solve((m.array() * anchor.array()).matrix() / tau));
    };
    p.lower_bound = 0.0;
    const double Lw = form.conductance_lipschitz();
    p.lipschitz = Lw * energy_scale * std::exp(Lw * form.horizon());
    p.space = "graph";
    return p;
}

struct EquivalenceReport {
    double max_gap = 0.0;
    bool ok = true;
};

inline EquivalenceReport jko_equivalence_check(const GraphForm& form, const Vector& u0, const TimeGrid& grid, double tol = 1e-10) {
    auto problem = dirichlet_step_problem(form);
    auto sol = run_scheme(problem, u0, grid, 0);
    auto heat = heat_flow(form, u0, grid, HeatScheme::implicit_euler);
    EquivalenceReport rep;
    for (std::size_t n = 0; n < heat.states.size(); ++n) {
        double scale = std::max(1.0, heat.states[n].cwiseAbs().maxCoeff());
        rep.max_gap = std::max(rep.max_gap, (sol.states[n] - heat.states[n]).cwiseAbs().maxCoeff() / scale);
    }
    rep.ok = rep.max_gap <= tol;
    return rep;
}

// ---------------------------------------------------------------------------
// Quadratic Hilbert testbed: <x, y>_t = x^T A_t y, E_t(x) = 1/2 x^T Q_t x + b_t^T x + c_t.

struct QuadraticHilbertProblem {
    std::size_t n = 1;
    std::function<Matrix(double)> A;
    std::function<Matrix(double)> Q;
    std::function<Vector(double)> b;
    std::function<double(double)> c;
    // Time derivatives, for the energy rate.
    std::function<Matrix(double)> Q_rate;
    std::function<Vector(double)> b_rate;
    std::function<double(double)> c_rate;
    double lower_bound = 0.0;
    double lipschitz = 0.0;  // L* on the region explored by the flow
    double T = 1.0;

    double energy(double t, const Vector& x) const { return 0.5 * x.dot(Q(t) * x) + b(t).dot(x) + c(t); }
    double energy_rate(double t, const Vector& x) const {
        double r = 0.0;
        if (Q_rate) r += 0.5 * x.dot(Q_rate(t) * x);
        if (b_rate) r += b_rate(t).dot(x);
        if (c_rate) r += c_rate(t);
        return r;
    }
    Matrix checked_A(double t) const {
        Matrix At = A(t);
        if (At.rows() != static_cast<Eigen::Index>(n) || At.cols() != static_cast<Eigen::Index>(n))
            throw DimensionError("quadratic problem: inner product has wrong size");
        if ((At - At.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, At.cwiseAbs().maxCoeff()))
            throw ProblemError("quadratic problem: inner product is not symmetric");
        Eigen::SelfAdjointEigenSolver<Matrix> es(At, Eigen::EigenvaluesOnly);
        if (!(es.eigenvalues().minCoeff() > 0.0)) throw ProblemError("quadratic problem: inner product is not positive definite");
        return At;
    }
    // Gradient w.r.t. <.,.>_t: A_t^{-1}(Q_t x + b_t).
    Vector velocity(double t, const Vector& x) const { return -A(t).ldlt().solve(Q(t) * x + b(t)); }
};

// E_t(x) = (x - t)^2 with the Euclidean inner product on R.
inline QuadraticHilbertProblem scalar_example_problem(double T = 1.0) {
    QuadraticHilbertProblem p;
    p.n = 1;
    p.T = T;
    p.A = [](double) { return Matrix::Identity(1, 1); };
    p.Q = [](double) { return Matrix::Constant(1, 1, 2.0); };
    p.b = [](double t) { return Vector::Constant(1, -2.0 * t); };
    p.c = [](double t) { return t * t; };
    p.Q_rate = [](double) { return Matrix::Zero(1, 1); };
    p.b_rate = [](double) { return Vector::Constant(1, -2.0); };
    p.c_rate = [](double t) { return 2.0 * t; };
    p.lower_bound = 0.0;
    // |d/dt (x - t)^2| = 2 |x - t| <= 2 for x, t in [0, 1].
    p.lipschitz = 2.0;
    return p;
}

inline StepProblem<Vector> quadratic_step_problem(const QuadraticHilbertProblem& q) {
    StepProblem<Vector> p;
    p.metric = [&q](double t, const Vector& x, const Vector& y) {
        Vector d = x - y;
        return std::sqrt(std::max(0.0, d.dot(q.A(t) * d)));
    };
    p.energy = [&q](double t, const Vector& x) { return q.energy(t, x); };
    p.energy_rate = [&q](double t, const Vector& x) { return q.energy_rate(t, x); };
    p.inner_solver = [&q](double t_energy, double tau, const Vector& anchor, double t_metric) {
        Matrix At = q.checked_A(t_metric);
        Matrix S = At / tau + q.Q(t_energy);
        return Vector(S.ldlt().solve(At * anchor / tau - q.b(t_energy)));
    };
    p.lower_bound = q.lower_bound;
    p.lipschitz = q.lipschitz;
    p.space = "rn-quadratic";
    return p;
}

// RK4 on x' = -A_t^{-1}(Q_t x + b_t) with step h/substeps, sampled at the grid nodes.
inline std::vector<Vector> quadratic_oracle(const QuadraticHilbertProblem& q, const Vector& x0, const TimeGrid& grid,
                                            std::size_t substeps = 100) {
    std::vector<Vector> out{x0};
    Vector x = x0;
    const double k = grid.step() / static_cast<double>(substeps);
    for (std::size_t n = 1; n <= grid.steps(); ++n) {
        double t = grid.node(n - 1);
        for (std::size_t s = 0; s < substeps; ++s) {
            Vector k1 = q.velocity(t, x);
            Vector k2 = q.velocity(t + 0.5 * k, x + 0.5 * k * k1);
            Vector k3 = q.velocity(t + 0.5 * k, x + 0.5 * k * k2);
            Vector k4 = q.velocity(t + k, x + k * k3);
            x += k / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += k;
        }
        out.push_back(x);
    }
    return out;
}

struct QuadraticTestbedReport {
    std::vector<Vector> scheme;
    std::vector<Vector> oracle;
    double sup_error = 0.0;       // max_n |x_n - x(t_n)|_{t_n}
    double endpoint_error = 0.0;
    double half_step_error = 0.0;  // sup error of the run with h/2
    double observed_order = 0.0;   // log2(sup_error / half_step_error)
    double max_residual = 0.0;     // Euler-Lagrange residual of the scheme
};

inline QuadraticTestbedReport quadratic_testbed_run(const QuadraticHilbertProblem& q, const Vector& x0, const TimeGrid& grid) {
    for (double t : grid.nodes()) q.checked_A(std::min(t, q.T));
    auto p = quadratic_step_problem(q);
    auto sup_err = [&](const TimeGrid& g, std::vector<Vector>* scheme, std::vector<Vector>* oracle, double* endpoint,
                       double* residual) {
        auto sol = run_scheme(p, x0, g, 0);
        auto ref = quadratic_oracle(q, x0, g);
        double e = 0.0;
        for (std::size_t n = 0; n < ref.size(); ++n) e = std::max(e, p.metric(g.node(n), sol.states[n], ref[n]));
        if (endpoint) *endpoint = p.metric(g.node(g.steps()), sol.states.back(), ref.back());
        if (residual) {
            double r = 0.0;
            for (std::size_t n = 1; n < sol.states.size(); ++n) {
                double t = g.node(n);
                Vector a = q.A(t) * (sol.states[n] - sol.states[n - 1]) / g.step();
                Vector b = q.Q(t) * sol.states[n] + q.b(t);
                double scale = a.norm() + b.norm();
                if (scale > 0.0) r = std::max(r, (a + b).norm() / scale);
            }
            *residual = r;
        }
        if (scheme) *scheme = sol.states;
        if (oracle) *oracle = std::move(ref);
        return e;
    };
    QuadraticTestbedReport rep;
    rep.sup_error = sup_err(grid, &rep.scheme, &rep.oracle, &rep.endpoint_error, &rep.max_residual);
    rep.half_step_error = sup_err(TimeGrid(grid.horizon(), 0.5 * grid.step()), nullptr, nullptr, nullptr, nullptr);
    rep.observed_order = (rep.sup_error > 0.0 && rep.half_step_error > 0.0) ? std::log2(rep.sup_error / rep.half_step_error) : 0.0;
    return rep;
}

}  // namespace dynflow
