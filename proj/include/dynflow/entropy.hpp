#pragma once

// Relative entropy S_t(mu) = sum mu log(mu/m_t) on finite spaces, its dynamic
// JKO flow (exact barrier and entropic scaling backends), and the grid
// diagnostics that compare it with the forward adjoint heat flow.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/dirichlet.hpp"
#include "dynflow/error.hpp"
#include "dynflow/mms.hpp"
#include "dynflow/space.hpp"
#include "dynflow/torus.hpp"
#include "dynflow/transport.hpp"

namespace dynflow {

namespace detail {

inline double xlogy_ratio(double x, double y) { return x > 0.0 ? x * std::log(x / y) : 0.0; }

}  // namespace detail

class EntropyFunctional {
public:
    explicit EntropyFunctional(MeasureFamily measure) : measure_(std::move(measure)) {}

    const MeasureFamily& measure() const noexcept { return measure_; }
    std::size_t size() const noexcept { return measure_.size(); }

    // sum mu log(mu / m_t), 0 log 0 = 0
    double operator()(const Vector& mu, double t) const {
        check(mu);
        Vector m = measure_.at(t);
        double s = 0.0;
        for (Eigen::Index i = 0; i < mu.size(); ++i) s += detail::xlogy_ratio(mu(i), m(i));
        return s;
    }

    // Ent(mu | m) + <f_t, mu>
    double two_form(const Vector& mu, double t) const {
        check(mu);
        const Vector& m = measure_.base();
        double s = 0.0;
        for (Eigen::Index i = 0; i < mu.size(); ++i) s += detail::xlogy_ratio(mu(i), m(i));
        return s + measure_.potential(t).dot(mu);
    }

    // sum (d/dt f_t) mu
    double rate(const Vector& mu, double t) const {
        check(mu);
        return measure_.rate(t).dot(mu);
    }

    double lower_bound(double t) const { return -measure_.potential(t).cwiseAbs().maxCoeff(); }
    double uniform_lower_bound() const { return -measure_.bound(); }

private:
    void check(const Vector& mu) const {
        if (static_cast<std::size_t>(mu.size()) != measure_.size()) throw DimensionError("relative_entropy: dimension mismatch");
    }
    MeasureFamily measure_;
};

inline double relative_entropy(const EntropyFunctional& S, const Vector& mu, double t) { return S(mu, t); }
inline double entropy_rate(const EntropyFunctional& S, const Vector& mu, double t) { return S.rate(mu, t); }

// ---------------------------------------------------------------------------
// JKO step

enum class JkoBackend { exact_small, scaling };

inline const char* to_string(JkoBackend b) { return b == JkoBackend::exact_small ? "exact-small" : "scaling"; }

struct JkoOptions {
    JkoBackend backend = JkoBackend::exact_small;
    // exact-small: barrier path following until the optimality gap bound is below tolerance.
    double tolerance = 1e-10;
    // scaling
    double scaling_tolerance = 1e-9;
    double eps_start = 1.0;
    double eps_factor = 1e-3;  // stop halving at eps <= eps_factor * median(c) / (2 tau)
    std::size_t max_scaling_iter = 200000;
    bool extrapolate = true;
};

struct JkoResult {
    Vector nu;
    double objective = 0.0;
    double lower_bound = -std::numeric_limits<double>::infinity();  // barrier gap bound at the final weight (exact-small only)
    std::size_t iterations = 0;
    double eps_final = 0.0;
};

// S_{t}(nu) + W^2(mu_prev, nu)/(2 tau) with W computed on the distance matrix D.
inline double jko_objective(const EntropyFunctional& S, double t, const Matrix& D, double tau, const Vector& mu_prev, const Vector& nu) {
    return S(nu, t) + kantorovich(mu_prev, nu, D).cost / (2.0 * tau);
}

namespace detail {

// Exact solution of the optimality conditions
//   Cr(r, j) + beta_j = alpha_r on the support,  Cr(r, j) + beta_j >= alpha_r off it,
//   beta_j = log(nu_j / m_j) + 1,
// when the support of P is a forest covering every column. Potentials follow
// the tree up to one shift per component, fixed by mass balance; flows follow
// by peeling leaves. Returns nothing if the support is not a forest or the
// result is infeasible.
inline std::optional<Vector> polish_on_support(const Matrix& P, const std::vector<Eigen::Index>& rows, const Vector& mu_prev,
                                               const Matrix& Cr, const Vector& logm) {
    const auto R = P.rows(), N = P.cols();
    // Nodes 0..R-1 are rows, R..R+N-1 are columns.
    std::vector<std::vector<Eigen::Index>> adj(static_cast<std::size_t>(R + N));
    std::size_t edges = 0;
    for (Eigen::Index r = 0; r < R; ++r)
        for (Eigen::Index j = 0; j < N; ++j)
            if (P(r, j) > 0.0) {
                adj[static_cast<std::size_t>(r)].push_back(R + j);
                adj[static_cast<std::size_t>(R + j)].push_back(r);
                ++edges;
            }
    for (Eigen::Index j = 0; j < N; ++j)
        if (adj[static_cast<std::size_t>(R + j)].empty()) return std::nullopt;

    Vector pot = Vector::Zero(R + N);  // alpha for rows, beta for columns
    std::vector<Eigen::Index> parent(static_cast<std::size_t>(R + N), -2), order;
    std::vector<std::vector<Eigen::Index>> members;
    for (Eigen::Index s = 0; s < R + N; ++s) {
        if (parent[static_cast<std::size_t>(s)] != -2) continue;
        members.emplace_back();
        parent[static_cast<std::size_t>(s)] = -1;
        std::vector<Eigen::Index> queue{s};
        for (std::size_t q = 0; q < queue.size(); ++q) {
            const Eigen::Index v = queue[q];
            members.back().push_back(v);
            order.push_back(v);
            for (Eigen::Index u : adj[static_cast<std::size_t>(v)]) {
                if (u == parent[static_cast<std::size_t>(v)]) continue;
                if (parent[static_cast<std::size_t>(u)] != -2) return std::nullopt;  // cycle
                parent[static_cast<std::size_t>(u)] = v;
                const bool u_row = u < R;
                pot(u) = u_row ? pot(v) + Cr(u, v - R) : pot(v) - Cr(v, u - R);
                queue.push_back(u);
            }
        }
    }
    if (edges + members.size() != static_cast<std::size_t>(R + N)) return std::nullopt;

    Vector nu(N);
    for (const auto& mem : members) {
        // A vertex keeping all of its own mass is returned exactly, since
        // rounding here would show up as a spurious O(1e-16) transport cost.
        if (mem.size() == 2) {
            const Eigen::Index r = std::min(mem[0], mem[1]), j = std::max(mem[0], mem[1]) - R;
            nu(j) = mu_prev(rows[static_cast<std::size_t>(r)]);
            continue;
        }
        double supply = 0.0, weight = 0.0, top = -std::numeric_limits<double>::infinity();
        for (Eigen::Index v : mem)
            if (v >= R) top = std::max(top, logm(v - R) + pot(v) - 1.0);
        for (Eigen::Index v : mem) {
            if (v < R) supply += mu_prev(rows[static_cast<std::size_t>(v)]);
            else weight += std::exp(logm(v - R) + pot(v) - 1.0 - top);
        }
        const double shift = std::log(supply / weight) - top;
        for (Eigen::Index v : mem) {
            pot(v) += shift;
            if (v >= R) nu(v - R) = std::exp(logm(v - R) + pot(v) - 1.0);
        }
    }

    // Dual feasibility off the support.
    for (Eigen::Index r = 0; r < R; ++r)
        for (Eigen::Index j = 0; j < N; ++j)
            if (!(P(r, j) > 0.0) && Cr(r, j) + pot(R + j) < pot(r) - 1e-9 * (1.0 + std::abs(pot(r)))) return std::nullopt;

    // Flows by leaf peeling in reverse breadth-first order.
    Vector pending = Vector::Zero(R + N);
    for (Eigen::Index r = 0; r < R; ++r) pending(r) = mu_prev(rows[static_cast<std::size_t>(r)]);
    for (Eigen::Index j = 0; j < N; ++j) pending(R + j) = nu(j);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Eigen::Index v = *it, u = parent[static_cast<std::size_t>(v)];
        if (u < 0) continue;
        const double flow = pending(v);
        if (flow < -1e-13) return std::nullopt;
        pending(u) -= flow;
    }
    return nu;
}

// Log-barrier path following on the coupling:
//   min <C, P>/(2 tau) + S_t(P^T 1)  s.t.  P 1 = mu_prev, P >= 0,
// with rows of zero mass removed. Each centering step is an equality
// constrained Newton step in the affine-scaled variables P = P o (1 + d), so
// the KKT matrix stays well conditioned as the barrier weight grows. After
// exact centering at weight t the objective exceeds the optimum by at most
// (number of variables)/t.
inline JkoResult jko_exact_small(const Vector& mu_prev, const EntropyFunctional& S, double t, const Matrix& D, double tau,
                                 const JkoOptions& opt) {
    const Vector m = S.measure().at(t);
    const Vector logm = m.array().log();
    const Matrix C = D.array().square() / (2.0 * tau);
    const Eigen::Index N = m.size();
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < N; ++i)
        if (mu_prev(i) > 0.0) rows.push_back(i);
    const auto R = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index nv = R * N;

    Matrix P(R, N);
    for (Eigen::Index r = 0; r < R; ++r) P.row(r).setConstant(mu_prev(rows[static_cast<std::size_t>(r)]) / static_cast<double>(N));
    Matrix Cr(R, N);
    for (Eigen::Index r = 0; r < R; ++r) Cr.row(r) = C.row(rows[static_cast<std::size_t>(r)]);

    auto objective = [&](const Matrix& X) {
        Vector nu = X.colwise().sum().transpose();
        double f = (Cr.array() * X.array()).sum();
        for (Eigen::Index j = 0; j < N; ++j) f += nu(j) * (std::log(nu(j)) - logm(j));
        return f;
    };
    auto barrier = [&](const Matrix& X, double w) { return w * objective(X) - X.array().log().sum(); };

    double w = 1.0;
    std::size_t newton = 0;
    const double gap_target = 0.5 * opt.tolerance;
    for (;;) {
        // Center at weight w. In scaled variables the Hessian is
        // I + sum_j (w/nu_j) p_j p_j^T with p_j the j-th column of P, so each
        // column block inverts by Sherman-Morrison and the row constraints
        // reduce to an R x R Schur complement.
        for (std::size_t it = 0; it < 200; ++it, ++newton) {
            const Vector nu = P.colwise().sum().transpose();
            Matrix G(R, N);  // scaled gradient p o grad - 1
            for (Eigen::Index j = 0; j < N; ++j) {
                const double lj = std::log(nu(j)) - logm(j) + 1.0;
                for (Eigen::Index r = 0; r < R; ++r) G(r, j) = P(r, j) * w * (Cr(r, j) + lj) - 1.0;
            }
            Vector c(N);
            for (Eigen::Index j = 0; j < N; ++j) {
                const double a = w / nu(j);
                c(j) = a / (1.0 + a * P.col(j).squaredNorm());
            }
            auto hinv = [&](const Matrix& V) {
                Matrix out = V;
                for (Eigen::Index j = 0; j < N; ++j) out.col(j) -= c(j) * P.col(j).dot(V.col(j)) * P.col(j);
                return out;
            };
            const Matrix Q = P.array().square();
            Matrix Sch = -Q * c.asDiagonal() * Q.transpose();
            Sch.diagonal() += Q.rowwise().sum();
            const Matrix B = -G;
            const Matrix HB = hinv(B);
            const Vector rhs = (P.array() * HB.array()).rowwise().sum();
            const Vector y = Sch.ldlt().solve(rhs);
            const Matrix d = hinv(B - (P.array().colwise() * y.array()).matrix());
            const double decrement = (B.array() * d.array()).sum();
            if (!(decrement > 1e-20)) break;
            double step = 1.0;
            const double minc = d.minCoeff();
            if (minc < 0.0) step = std::min(1.0, 0.99 / -minc);
            // Close to the center the full Newton step is taken without a line
            // search, since differences of w * objective are lost to rounding
            // once w is large.
            const bool local = decrement < 1e-2;
            const double phi0 = local ? 0.0 : barrier(P, w);
            Matrix trial(R, N);
            for (;;) {
                trial = (P.array() * (1.0 + step * d.array())).matrix();
                // Keep rows exactly on their marginals.
                for (Eigen::Index r = 0; r < R; ++r) trial.row(r) *= mu_prev(rows[static_cast<std::size_t>(r)]) / trial.row(r).sum();
                if (local) break;
                const double phi = barrier(trial, w);
                if (std::isfinite(phi) && phi <= phi0 - 0.25 * step * decrement) break;
                step *= 0.5;
                if (step < 1e-12) break;
            }
            if (step < 1e-12) break;
            P = trial;
            if (decrement <= 1e-20) break;
        }
        if (static_cast<double>(nv) / w <= gap_target) break;
        w *= 8.0;
    }

    JkoResult res;
    res.nu = P.colwise().sum().transpose();
    res.nu /= res.nu.sum();
    res.iterations = newton;
    res.objective = jko_objective(S, t, D, tau, mu_prev, res.nu);
    res.lower_bound = objective(P) - static_cast<double>(nv) / w;
    const double scale = std::max(1.0, std::abs(res.objective));
    // The barrier leaves O(1/w) mass on every edge. Since W is the square root
    // of a cost linear in the moved mass, that residue shows up as O(1/sqrt(w))
    // in distances, so it is returned to the source vertex when this does not
    // raise the objective beyond the tolerance.
    auto purify = [&](double rel) {
        Matrix clean = P;
        for (Eigen::Index r = 0; r < R; ++r) {
            const Eigen::Index i = rows[static_cast<std::size_t>(r)];
            const double cut = rel * mu_prev(i);
            double moved = 0.0;
            for (Eigen::Index j = 0; j < N; ++j)
                if (j != i && clean(r, j) < cut) moved += clean(r, j), clean(r, j) = 0.0;
            clean(r, i) += moved;
        }
        return clean;
    };
    const Matrix clean = purify(1e-7);
    Vector nu_clean = clean.colwise().sum().transpose();
    nu_clean /= nu_clean.sum();
    const double F_clean = jko_objective(S, t, D, tau, mu_prev, nu_clean);
    if (F_clean <= res.objective + opt.tolerance * scale) res.nu = std::move(nu_clean), res.objective = F_clean;
    // The objective is quadratic near the optimum, so nu itself is only
    // accurate to about sqrt(tolerance). Solving the optimality system on the
    // support of the cleaned coupling restores full precision. Near a change
    // of support the barrier keeps O(1/sqrt(w)) mass on edges that carry none
    // at the optimum, so coarser cuts are tried when the finest one fails.
    for (double rel : {1e-7, 1e-5, 1e-3}) {
        if (auto polished = polish_on_support(purify(rel), rows, mu_prev, Cr, logm)) {
            const double F = jko_objective(S, t, D, tau, mu_prev, *polished);
            if (F <= res.objective + opt.tolerance * scale) {
                res.nu = std::move(*polished), res.objective = F;
                break;
            }
        }
    }
    if (res.objective - res.lower_bound > opt.tolerance * scale)
        throw ConvergenceError("jko exact-small: barrier gap above tolerance", res.objective - res.lower_bound);
    return res;
}

// Log-domain generalized Sinkhorn for
//   min <c, P>/(2 tau) + eps sum P (log P - 1) + S_t(P^T 1),  P 1 = mu_prev,
// on the kernel exp(-c/(2 tau eps)). The nu-side KL proximal map of the
// weighted entropy is explicit: log nu = (log m - 1 + eps log s)/(1 + eps)
// with s = K^T a.
inline Vector entropic_jko(const Vector& mu_prev, const Vector& logm, const Matrix& C, double tau, double eps, Vector& logb,
                           double tol, std::size_t max_iter, std::size_t& iters) {
    const Eigen::Index N = logm.size();
    const Matrix logK = -C / (2.0 * tau * eps);
    const double ninf = -std::numeric_limits<double>::infinity();
    Vector loga(N), logs(N), lognu(N), z(N);
    Vector logmu = mu_prev.array().log();
    for (std::size_t it = 1; it <= max_iter; ++it) {
        for (Eigen::Index i = 0; i < N; ++i) {
            if (mu_prev(i) == 0.0) {
                loga(i) = ninf;
                continue;
            }
            z = logK.row(i).transpose() + logb;
            loga(i) = logmu(i) - logsumexp(z);
        }
        for (Eigen::Index j = 0; j < N; ++j) {
            z = logK.col(j) + loga;
            logs(j) = logsumexp(z);
            lognu(j) = (logm(j) - 1.0 + eps * logs(j)) / (1.0 + eps);
        }
        Vector newb = lognu - logs;
        // Row marginal residual after the column update.
        double res = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) {
            if (mu_prev(i) == 0.0) continue;
            z = logK.row(i).transpose() + newb;
            res += std::abs(std::exp(loga(i) + logsumexp(z)) - mu_prev(i));
        }
        logb = std::move(newb);
        iters = it;
        if (res <= tol) return lognu.array().exp();
        if (it == max_iter) throw ConvergenceError("jko scaling: no convergence within max_iter", res);
    }
    return lognu.array().exp();
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::size_t k = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    double hi = v[k];
    if (v.size() % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
    return 0.5 * (lo + hi);
}

inline JkoResult jko_scaling(const Vector& mu_prev, const EntropyFunctional& S, double t, const Matrix& D, double tau,
                             const JkoOptions& opt) {
    const Vector m = S.measure().at(t);
    const Vector logm = m.array().log();
    const Matrix C = D.array().square();
    std::vector<double> off;
    for (Eigen::Index i = 0; i < C.rows(); ++i)
        for (Eigen::Index j = 0; j < C.cols(); ++j)
            if (i != j) off.push_back(C(i, j));
    const double eps_min = opt.eps_factor * median(off) / (2.0 * tau);
    Vector logb = Vector::Zero(m.size());
    Vector prev, cur;
    double eps = opt.eps_start, eps_prev = 0.0;
    std::size_t total = 0;
    for (;;) {
        std::size_t iters = 0;
        prev = std::move(cur);
        cur = entropic_jko(mu_prev, logm, C, tau, eps, logb, opt.scaling_tolerance, opt.max_scaling_iter, iters);
        total += iters;
        if (eps <= eps_min) break;
        eps_prev = eps;
        eps *= 0.5;
    }
    JkoResult res;
    res.eps_final = eps;
    res.iterations = total;
    Vector last = cur / cur.sum();
    res.nu = last;
    res.objective = jko_objective(S, t, D, tau, mu_prev, last);
    if (opt.extrapolate && prev.size() > 0 && eps_prev == 2.0 * eps) {
        // nu(eps) is affine in eps to first order: nu(0) ~ 2 nu(eps) - nu(2 eps).
        Vector ext = (2.0 * cur - prev).cwiseMax(0.0);
        if (ext.sum() > 0.0) {
            ext /= ext.sum();
            double F = jko_objective(S, t, D, tau, mu_prev, ext);
            if (F < res.objective) res.objective = F, res.nu = std::move(ext);
        }
    }
    return res;
}

}  // namespace detail

// argmin_nu S_{t_energy}(nu) + W_D^2(mu_prev, nu)/(2 tau).
inline JkoResult jko_prox(const Vector& mu_prev, const EntropyFunctional& S, double t_energy, const Matrix& D, double tau,
                          const JkoOptions& opt = {}) {
    if (!(tau > 0.0)) throw DomainError("jko step: step must be positive");
    if (mu_prev.size() != static_cast<Eigen::Index>(S.size()) || D.rows() != mu_prev.size())
        throw DimensionError("jko step: dimension mismatch");
    if ((mu_prev.array() < 0.0).any() || std::abs(mu_prev.sum() - 1.0) > 1e-9) throw DomainError("jko step: mu_prev is not a probability vector");
    JkoResult r = opt.backend == JkoBackend::exact_small ? detail::jko_exact_small(mu_prev, S, t_energy, D, tau, opt)
                                                         : detail::jko_scaling(mu_prev, S, t_energy, D, tau, opt);
    r.nu = r.nu.cwiseMax(0.0);
    if (std::abs(r.nu.sum() - 1.0) > 1e-13) r.nu /= r.nu.sum();
    return r;
}

struct EntropyJkoProblem {
    EntropyFunctional entropy;
    MetricFamily metric;
    JkoOptions options;
};

// Minimizer of S_{t_n}(nu) + W_{t_n}^2(mu_prev, nu)/(2h).
inline Vector jko_step(const EntropyJkoProblem& p, const Vector& mu_prev, double t_n, double h) {
    return jko_prox(mu_prev, p.entropy, t_n, p.metric.at(t_n), h, p.options).nu;
}

inline double wasserstein(const Vector& mu, const Vector& nu, const Matrix& D) {
    return std::sqrt(std::max(0.0, kantorovich(mu, nu, D).cost));
}

// The JKO flow as a minimizing-movement problem. The returned problem refers to p.
inline StepProblem<Vector> entropy_step_problem(const EntropyJkoProblem& p) {
    StepProblem<Vector> sp;
    sp.metric = [&p](double t, const Vector& x, const Vector& y) { return wasserstein(x, y, p.metric.at(t)); };
    sp.energy = [&p](double t, const Vector& mu) { return p.entropy(mu, t); };
    sp.energy_rate = [&p](double t, const Vector& mu) { return p.entropy.rate(mu, t); };
    sp.inner_solver = [&p](double t_energy, double tau, const Vector& anchor, double t_metric) {
        return jko_prox(anchor, p.entropy, t_energy, p.metric.at(t_metric), tau, p.options).nu;
    };
    sp.lower_bound = p.entropy.uniform_lower_bound();
    sp.lipschitz = p.entropy.measure().lipschitz();
    sp.inner_tolerance = p.options.tolerance;
    sp.space = "probability";
    return sp;
}

inline DiscreteSolution<Vector> jko_run(const EntropyJkoProblem& p, const Vector& mu0, const TimeGrid& grid,
                                        std::size_t interp_nodes_per_step = 0) {
    return run_scheme(entropy_step_problem(p), mu0, grid, interp_nodes_per_step);
}

inline DiscreteSolution<Vector> jko_run(const EntropyJkoProblem& p, const Vector& mu0, const TimeGrid& grid, const QuadratureOptions& quad) {
    return run_scheme(entropy_step_problem(p), mu0, grid, quad);
}

// ---------------------------------------------------------------------------
// Trajectories of measures on a uniform time grid

struct MeasureTrajectory {
    std::vector<double> times;
    std::vector<Vector> measures;

    double step() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }

    // Linear interpolation between nodes.
    Vector at(double t) const {
        if (times.empty()) throw DomainError("trajectory: empty");
        const double h = step();
        if (t <= times.front() || h == 0.0) return measures.front();
        if (t >= times.back()) return measures.back();
        double pos = (t - times.front()) / h;
        auto k = static_cast<std::size_t>(std::floor(pos));
        double w = pos - static_cast<double>(k);
        if (w < 1e-9) return measures[k];
        if (w > 1.0 - 1e-9) return measures[k + 1];
        return (1.0 - w) * measures[k] + w * measures[k + 1];
    }
};

inline MeasureTrajectory trajectory_of(const AdjointFlow& flow) { return {flow.times, flow.measures}; }

inline MeasureTrajectory trajectory_of(const DiscreteSolution<Vector>& sol) {
    MeasureTrajectory tr;
    for (std::size_t n = 0; n <= sol.completed; ++n) tr.times.push_back(sol.grid.node(n));
    tr.measures.assign(sol.states.begin(), sol.states.begin() + static_cast<std::ptrdiff_t>(sol.completed + 1));
    return tr;
}

// W_t(mu_t, mu_{t + delta}) / delta.
inline double metric_speed_estimate(const MeasureTrajectory& tr, const MetricFamily& metric, double t, double delta) {
    if (!(delta > 0.0)) throw DomainError("metric_speed_estimate: delta must be positive");
    if (t < tr.times.front() - 1e-12 || t + delta > tr.times.back() + 1e-12)
        throw DomainError("metric_speed_estimate: t, t + delta outside the trajectory");
    return wasserstein(tr.at(t), tr.at(t + delta), metric.at(t)) / delta;
}

inline Vector density_of(const Vector& mu, const Vector& m_t) { return (mu.array() / m_t.array()).matrix(); }

// ---------------------------------------------------------------------------
// Kuwada inequality |mu'|_t^2 <= I_t(rho_t)

struct KuwadaRow {
    double t = 0.0;
    double delta = 0.0;
    double speed_sq = 0.0;
    double fisher = 0.0;
};

struct KuwadaReport {
    std::vector<KuwadaRow> rows;
    double slack = 0.15;
    double worst_ratio = 0.0;  // max speed^2 / fisher over rows with fisher > 0
    std::size_t clipped = 0;
    bool ok = true;
};

// The speed is measured over delta_t = max(delta, 2 dx_t / sqrt(I_t)), rounded up
// to a multiple of the trajectory step: on a grid, W between measures closer
// than about one cell in transport distance scales like sqrt(delta) and would
// overstate the speed.
// Windows cut short by the end of the trajectory are counted in `clipped`.
inline KuwadaReport kuwada_check(const MeasureTrajectory& tr, const MetricFamily& metric, const MeasureFamily& measure,
                                 const GridGeometry& geo, const std::vector<double>& times, double delta, double slack = 0.15) {
    KuwadaReport rep;
    rep.slack = slack;
    const double h = tr.step();
    for (double t : times) {
        Vector mu = tr.at(t);
        Vector m = measure.at(t);
        KuwadaRow row;
        row.t = t;
        row.fisher = fisher_information(density_of(mu, m), t, geo, m);
        double d = delta;
        if (row.fisher > 1e-12) d = std::max(d, 2.0 * geo.dx * geo.scale(t) / std::sqrt(row.fisher));
        if (h > 0.0) d = std::ceil(d / h - 1e-9) * h;
        if (d > tr.times.back() - t + 1e-12) {
            d = tr.times.back() - t;
            ++rep.clipped;
        }
        row.delta = d;
        if (d > 0.0) {
            double v = metric_speed_estimate(tr, metric, t, d);
            row.speed_sq = v * v;
        }
        // Ratios against a Fisher information at rounding level are meaningless.
        if (row.fisher > 1e-12) rep.worst_ratio = std::max(rep.worst_ratio, row.speed_sq / row.fisher);
        if (row.speed_sq > row.fisher * (1.0 + slack) + 1e-10) rep.ok = false;
        rep.rows.push_back(row);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Entropy dissipation along the forward adjoint flow:
// d/dt S_t(mu_t) = -I_t(rho_t) + sum (d/dt f_t) rho_t m_t.

struct DissipationRow {
    double t = 0.0;
    double derivative = 0.0;   // centered difference of S_t(mu_t)
    double fisher = 0.0;
    double drift = 0.0;        // sum (d/dt f_t) rho m_t
    double relative_error = 0.0;
};

struct DissipationReport {
    std::vector<DissipationRow> rows;
    double max_relative_error = 0.0;
    double mean_relative_error = 0.0;
};

// times must be interior grid nodes of the trajectory.
inline DissipationReport entropy_dissipation_check(const MeasureTrajectory& tr, const MeasureFamily& measure, const GridGeometry& geo,
                                                   const std::vector<double>& times) {
    EntropyFunctional S(measure);
    DissipationReport rep;
    const double h = tr.step();
    for (double t : times) {
        if (t - h < tr.times.front() - 1e-12 || t + h > tr.times.back() + 1e-12)
            throw DomainError("entropy_dissipation_check: time too close to the trajectory ends");
        DissipationRow row;
        row.t = t;
        row.derivative = (S(tr.at(t + h), t + h) - S(tr.at(t - h), t - h)) / (2.0 * h);
        Vector mu = tr.at(t), m = measure.at(t);
        row.fisher = fisher_information(density_of(mu, m), t, geo, m);
        row.drift = S.rate(mu, t);
        double rhs = -row.fisher + row.drift;
        row.relative_error = std::abs(row.derivative - rhs) / std::max(std::abs(rhs), 1e-300);
        rep.max_relative_error = std::max(rep.max_relative_error, row.relative_error);
        rep.mean_relative_error += row.relative_error;
        rep.rows.push_back(row);
    }
    if (!rep.rows.empty()) rep.mean_relative_error /= static_cast<double>(rep.rows.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Energy-dissipation report for a JKO solution

struct EdeReport {
    bool ledger_mode = false;
    std::vector<double> times;
    std::vector<double> entropy;       // S_{t_n}(mu_n)
    std::vector<double> speed_int;     // 1/2 int |mu'|^2 up to t_n
    std::vector<double> slope_int;     // 1/2 int I_t up to t_n (trapezoid)
    std::vector<double> drift_int;     // int d/dr S_r up to t_n (trapezoid)
    std::vector<double> residual;      // S_t + speed + slope - S_0 - drift
    double final_residual = 0.0;
    EdeLedger ledger;
};

// Grid mode (geo given): speed from consecutive nodes, slope^2 from the Fisher
// surrogate. Otherwise the discrete ledger of the scheme is reported.
inline EdeReport ede_report(const DiscreteSolution<Vector>& sol, const EntropyJkoProblem& p, const GridGeometry* geo = nullptr) {
    EdeReport rep;
    if (geo == nullptr || geo->kind == GridGeometry::Kind::none) {
        rep.ledger_mode = true;
        rep.ledger = ede_ledger(sol);
        rep.final_residual = rep.ledger.cumulative.empty() ? 0.0 : rep.ledger.cumulative.back();
        return rep;
    }
    const MeasureFamily& measure = p.entropy.measure();
    const double h = sol.h();
    double speed = 0.0, slope = 0.0, drift = 0.0;
    auto fisher_at = [&](std::size_t n) {
        double t = sol.grid.node(n);
        Vector m = measure.at(t);
        return fisher_information(density_of(sol.states[n], m), t, *geo, m);
    };
    double I_prev = fisher_at(0);
    double r_prev = p.entropy.rate(sol.states[0], 0.0);
    const double S0 = p.entropy(sol.states[0], 0.0);
    rep.times.push_back(0.0);
    rep.entropy.push_back(S0);
    rep.speed_int.push_back(0.0);
    rep.slope_int.push_back(0.0);
    rep.drift_int.push_back(0.0);
    rep.residual.push_back(0.0);
    for (std::size_t n = 1; n <= sol.completed; ++n) {
        const double t = sol.grid.node(n);
        const double v = sol.distances[n] / h;
        speed += 0.5 * h * v * v;
        double I = fisher_at(n);
        slope += 0.25 * h * (I_prev + I);
        double r = p.entropy.rate(sol.states[n], t);
        drift += 0.5 * h * (r_prev + r);
        I_prev = I;
        r_prev = r;
        double S = p.entropy(sol.states[n], t);
        rep.times.push_back(t);
        rep.entropy.push_back(S);
        rep.speed_int.push_back(speed);
        rep.slope_int.push_back(slope);
        rep.drift_int.push_back(drift);
        rep.residual.push_back(S + speed + slope - S0 - drift);
    }
    rep.final_residual = rep.residual.back();
    return rep;
}

// ---------------------------------------------------------------------------
// Identification of the JKO flow with the forward adjoint heat flow

struct FlowComparison {
    double h = 0.0;
    std::size_t grid_size = 0;
    std::vector<double> times;
    std::vector<double> l1_gap;  // sum |mu^jko - mu^heat|
    std::vector<double> w_gap;   // W_t(mu^jko, mu^heat)
    double terminal_l1() const { return l1_gap.empty() ? 0.0 : l1_gap.back(); }
};

inline FlowComparison compare_trajectories(const MeasureTrajectory& a, const MeasureTrajectory& b, const MetricFamily& metric,
                                           double h, std::size_t n) {
    FlowComparison cmp;
    cmp.h = h;
    cmp.grid_size = n;
    for (std::size_t k = 0; k < std::min(a.times.size(), b.times.size()); ++k) {
        const double t = a.times[k];
        cmp.times.push_back(t);
        cmp.l1_gap.push_back((a.measures[k] - b.measures[k]).cwiseAbs().sum());
        cmp.w_gap.push_back(wasserstein(a.measures[k], b.measures[k], metric.at(t)));
    }
    return cmp;
}

// JKO flow of S_t under W_t versus the algebraic forward adjoint heat flow of
// the consistent graph form, from the same initial measure.
inline FlowComparison identify_vs_adjoint_heat(const TorusSpace& space, const Vector& mu0, double h, const JkoOptions& opt) {
    TimeGrid grid(space.T, h);
    EntropyJkoProblem p{EntropyFunctional(space.measure), space.metric, opt};
    auto sol = jko_run(p, mu0, grid, 0);
    Vector rho0 = density_of(mu0, space.measure.at(0.0));
    auto heat = forward_adjoint_flow(*space.form, rho0, grid, AdjointMode::algebraic);
    return compare_trajectories(trajectory_of(sol), trajectory_of(heat), space.metric, h, space.n);
}

}  // namespace dynflow
