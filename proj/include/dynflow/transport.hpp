#pragma once

// L2-Kantorovich distances on finite spaces: exact transportation simplex with
// dual certificate, log-domain Sinkhorn, chain approximation of the dynamic
// distance d_{s,t} and the log-Lipschitz check for W_t.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dynflow/error.hpp"
#include "dynflow/space.hpp"

namespace dynflow {

class ProbabilityVector {
public:
    ProbabilityVector() = default;
    explicit ProbabilityVector(Vector w, double tol = 1e-12) : w_(std::move(w)) {
        if (w_.size() == 0) throw DimensionError("probability vector: empty");
        if ((w_.array() < 0.0).any() || !w_.allFinite()) throw DomainError("probability vector: negative or non-finite entry");
        if (std::abs(w_.sum() - 1.0) > tol) throw DomainError("probability vector: weights do not sum to 1");
    }
    // Renormalizes a nonnegative vector.
    static ProbabilityVector normalized(const Vector& w) {
        double s = w.sum();
        if (!(s > 0.0)) throw DomainError("probability vector: zero total mass");
        return ProbabilityVector(w / s, 1e-9);
    }

    const Vector& weights() const noexcept { return w_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(w_.size()); }
    double operator[](std::size_t i) const { return w_(static_cast<Eigen::Index>(i)); }
    operator const Vector&() const noexcept { return w_; }

private:
    Vector w_;
};

struct Coupling {
    Matrix plan;
    Vector first;   // row marginal
    Vector second;  // column marginal

    double marginal_residual() const {
        return std::max((plan.rowwise().sum() - first).cwiseAbs().maxCoeff(),
                        (plan.colwise().sum().transpose() - second).cwiseAbs().maxCoeff());
    }
};

struct DualPotentials {
    Vector phi;
    Vector psi;
    double gap = 0.0;  // primal - dual

    // max_ij (phi_i + psi_j - c_ij); nonpositive up to round-off when feasible.
    double max_violation(const Matrix& cost) const {
        double worst = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < cost.cols(); ++j)
            for (Eigen::Index i = 0; i < cost.rows(); ++i) worst = std::max(worst, phi(i) + psi(j) - cost(i, j));
        return worst;
    }
};

struct TransportResult {
    double cost = 0.0;  // W^2 for squared-distance costs
    Coupling coupling;
    DualPotentials duals;
    std::size_t pivots = 0;
};

namespace detail {

inline void check_marginals(const Vector& a, const Vector& b, const char* who) {
    if ((a.array() < 0.0).any() || (b.array() < 0.0).any() || !a.allFinite() || !b.allFinite())
        throw MarginalError(std::string(who) + ": marginals must be nonnegative and finite");
    const double sa = a.sum(), sb = b.sum();
    if (std::abs(sa - sb) > 1e-9 * std::max(1.0, std::max(sa, sb)))
        throw MarginalError(std::string(who) + ": marginal masses differ (" + std::to_string(sa) + " vs " + std::to_string(sb) + ")");
    if (!(sa > 0.0)) throw MarginalError(std::string(who) + ": zero total mass");
}

// Transportation simplex (MODI potentials on the basis tree). Rows are nodes
// 0..m-1, columns m..m+n-1. The basis always holds m+n-1 cells forming a
// spanning tree; degenerate cells carry zero flow.
class TransportationSimplex {
public:
    TransportationSimplex(const Vector& a, const Vector& b, const Matrix& c) : a_(a), b_(b), c_(c), m_(a.size()), n_(b.size()) {}

    TransportResult solve(std::size_t max_pivots) {
        north_west_corner();
        const double scale = std::max(1.0, c_.cwiseAbs().maxCoeff());
        const double rtol = 1e-12 * scale;
        std::size_t pivots = 0, degenerate_run = 0;
        bool bland = false;
        for (;;) {
            compute_tree();
            Eigen::Index ei = -1, ej = -1;
            double best = -rtol;
            for (Eigen::Index j = 0; j < n_ && !(bland && ei >= 0); ++j)
                for (Eigen::Index i = 0; i < m_; ++i) {
                    double r = c_(i, j) - u_(i) - v_(j);
                    if (r < best) {
                        best = r;
                        ei = i;
                        ej = j;
                        if (bland) break;
                    }
                }
            if (ei < 0) break;
            if (pivots >= max_pivots) throw ConvergenceError("kantorovich: pivot limit reached", -best);
            double theta = pivot(ei, ej, bland);
            ++pivots;
            degenerate_run = theta > 0.0 ? 0 : degenerate_run + 1;
            // Dantzig pricing may cycle on degenerate vertices; Bland's rule cannot.
            if (degenerate_run > static_cast<std::size_t>(4 * (m_ + n_))) bland = true;
            if (theta > 0.0 && bland && degenerate_run == 0) bland = false;
        }
        return finish(pivots);
    }

private:
    struct Cell {
        Eigen::Index i, j;
        double x;
    };

    void north_west_corner() {
        Vector ar = a_, bc = b_;
        basis_.clear();
        Eigen::Index i = 0, j = 0;
        for (;;) {
            double x = std::min(ar(i), bc(j));
            basis_.push_back({i, j, x});
            ar(i) -= x;
            bc(j) -= x;
            if (i == m_ - 1 && j == n_ - 1) break;
            if (i < m_ - 1 && (j == n_ - 1 || ar(i) <= bc(j))) ++i;
            else ++j;
        }
        // Absorb round-off of the total mass mismatch in the last cell.
        basis_.back().x = std::max(0.0, basis_.back().x);
    }

    // Potentials u_i + v_j = c_ij on basic cells via a BFS from row 0, plus
    // parent links used to find pivot cycles.
    void compute_tree() {
        const Eigen::Index nodes = m_ + n_;
        adj_.assign(static_cast<std::size_t>(nodes), {});
        for (std::size_t k = 0; k < basis_.size(); ++k) {
            adj_[static_cast<std::size_t>(basis_[k].i)].push_back(k);
            adj_[static_cast<std::size_t>(m_ + basis_[k].j)].push_back(k);
        }
        u_.setZero(m_);
        v_.setZero(n_);
        parent_edge_.assign(static_cast<std::size_t>(nodes), npos);
        depth_.assign(static_cast<std::size_t>(nodes), -1);
        std::vector<Eigen::Index> queue{0};
        depth_[0] = 0;
        for (std::size_t q = 0; q < queue.size(); ++q) {
            Eigen::Index node = queue[q];
            for (std::size_t k : adj_[static_cast<std::size_t>(node)]) {
                const Cell& cell = basis_[k];
                Eigen::Index other = node < m_ ? m_ + cell.j : cell.i;
                if (depth_[static_cast<std::size_t>(other)] >= 0) continue;
                depth_[static_cast<std::size_t>(other)] = depth_[static_cast<std::size_t>(node)] + 1;
                parent_edge_[static_cast<std::size_t>(other)] = k;
                if (other < m_) u_(other) = c_(cell.i, cell.j) - v_(cell.j);
                else v_(cell.j) = c_(cell.i, cell.j) - u_(cell.i);
                queue.push_back(other);
            }
        }
        if (queue.size() != static_cast<std::size_t>(nodes)) throw SolverError("kantorovich: basis is not a spanning tree");
    }

    Eigen::Index other_end(std::size_t k, Eigen::Index node) const {
        const Cell& cell = basis_[k];
        return node < m_ ? m_ + cell.j : cell.i;
    }

    double pivot(Eigen::Index ei, Eigen::Index ej, bool bland) {
        // Tree path from column node back to row node: edges alternate -,+,-,...
        std::vector<std::size_t> from_col, from_row;
        Eigen::Index p = m_ + ej, q = ei;
        while (p != q) {
            if (depth_[static_cast<std::size_t>(p)] >= depth_[static_cast<std::size_t>(q)]) {
                std::size_t k = parent_edge_[static_cast<std::size_t>(p)];
                from_col.push_back(k);
                p = other_end(k, p);
            } else {
                std::size_t k = parent_edge_[static_cast<std::size_t>(q)];
                from_row.push_back(k);
                q = other_end(k, q);
            }
        }
        std::vector<std::size_t> path = std::move(from_col);
        path.insert(path.end(), from_row.rbegin(), from_row.rend());
        double theta = std::numeric_limits<double>::infinity();
        std::size_t leave = npos;
        for (std::size_t s = 0; s < path.size(); s += 2) {
            const Cell& cell = basis_[path[s]];
            bool better = cell.x < theta;
            if (!better && bland && cell.x == theta) {
                const Cell& cur = basis_[leave];
                better = cell.j < cur.j || (cell.j == cur.j && cell.i < cur.i);
            }
            if (better) {
                theta = cell.x;
                leave = path[s];
            }
        }
        for (std::size_t s = 0; s < path.size(); ++s) {
            Cell& cell = basis_[path[s]];
            cell.x = s % 2 == 0 ? std::max(0.0, cell.x - theta) : cell.x + theta;
        }
        basis_[leave] = {ei, ej, theta};
        return theta;
    }

    TransportResult finish(std::size_t pivots) {
        TransportResult res;
        Matrix plan = Matrix::Zero(m_, n_);
        for (const Cell& cell : basis_) plan(cell.i, cell.j) += cell.x;
        // psi_0 = 0 normalization.
        const double shift = v_(0);
        Vector phi = u_.array() + shift;
        Vector psi = v_.array() - shift;
        const double primal = (plan.array() * c_.array()).sum();
        const double dual = a_.dot(phi) + b_.dot(psi);
        res.cost = primal;
        res.coupling = {std::move(plan), a_, b_};
        res.duals = {std::move(phi), std::move(psi), primal - dual};
        res.pivots = pivots;
        return res;
    }

    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    const Vector& a_;
    const Vector& b_;
    const Matrix& c_;
    Eigen::Index m_, n_;
    std::vector<Cell> basis_;
    std::vector<std::vector<std::size_t>> adj_;
    std::vector<std::size_t> parent_edge_;
    std::vector<int> depth_;
    Vector u_, v_;
};

inline double logsumexp(const Eigen::Ref<const Vector>& z) {
    double mx = z.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((z.array() - mx).exp().sum());
}

}  // namespace detail

// Exact optimal transport for an arbitrary cost matrix.
inline TransportResult optimal_transport(const Vector& mu, const Vector& nu, const Matrix& cost) {
    if (cost.rows() != mu.size() || cost.cols() != nu.size()) throw DimensionError("kantorovich: cost matrix does not match marginals");
    detail::check_marginals(mu, nu, "kantorovich");
    detail::TransportationSimplex simplex(mu, nu, cost);
    const std::size_t cap = 200 * static_cast<std::size_t>((mu.size() + 1) * (nu.size() + 1));
    return simplex.solve(cap);
}

// W_D^2(mu, nu) with cost D_ij^2.
inline TransportResult kantorovich(const Vector& mu, const Vector& nu, const Matrix& D) {
    if (D.rows() != D.cols()) throw DimensionError("kantorovich: distance matrix must be square");
    return optimal_transport(mu, nu, D.array().square().matrix());
}

// ---------------------------------------------------------------------------

struct SinkhornResult {
    double cost = 0.0;  // <c, P_eps>
    Coupling coupling;
    Vector f;  // log-domain potentials: P_ij = exp((f_i + g_j - c_ij)/eps)
    Vector g;
    std::size_t iterations = 0;
    double residual = 0.0;
};

// Log-domain Sinkhorn on the kernel exp(-c/eps), c = D^2. Zero-mass entries get
// potential -inf and empty plan rows/columns.
inline SinkhornResult sinkhorn(const Vector& mu, const Vector& nu, const Matrix& D, double eps, double tol = 1e-10,
                               std::size_t max_iter = 100000) {
    if (!(eps > 0.0)) throw DomainError("sinkhorn: eps must be positive");
    if (D.rows() != mu.size() || D.cols() != nu.size()) throw DimensionError("sinkhorn: distance matrix does not match marginals");
    detail::check_marginals(mu, nu, "sinkhorn");
    const Matrix c = D.array().square().matrix();
    const Eigen::Index m = mu.size(), n = nu.size();
    const double ninf = -std::numeric_limits<double>::infinity();
    Vector loga = mu.array().log(), logb = nu.array().log();
    Vector f = Vector::Zero(m), g = Vector::Zero(n);
    for (Eigen::Index i = 0; i < m; ++i)
        if (mu(i) == 0.0) f(i) = ninf;
    for (Eigen::Index j = 0; j < n; ++j)
        if (nu(j) == 0.0) g(j) = ninf;
    Vector z;
    auto plan = [&]() {
        Matrix P(m, n);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                P(i, j) = (std::isfinite(f(i)) && std::isfinite(g(j))) ? std::exp((f(i) + g(j) - c(i, j)) / eps) : 0.0;
        return P;
    };
    SinkhornResult res;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        for (Eigen::Index i = 0; i < m; ++i) {
            if (mu(i) == 0.0) continue;
            z = (g - c.row(i).transpose()) / eps;
            f(i) = eps * (loga(i) - detail::logsumexp(z));
        }
        for (Eigen::Index j = 0; j < n; ++j) {
            if (nu(j) == 0.0) continue;
            z = (f - c.col(j)) / eps;
            g(j) = eps * (logb(j) - detail::logsumexp(z));
        }
        if (it % 10 == 0 || it == max_iter) {
            Matrix P = plan();
            double r = (P.rowwise().sum() - mu).cwiseAbs().sum();
            if (r <= tol) {
                res.cost = (P.array() * c.array()).sum();
                res.coupling = {std::move(P), mu, nu};
                res.f = f;
                res.g = g;
                res.iterations = it;
                res.residual = r;
                return res;
            }
            res.residual = r;
        }
    }
    throw ConvergenceError("sinkhorn: no convergence within max_iter", res.residual);
}

// ---------------------------------------------------------------------------
// Dynamic distance

namespace detail {

// Chain action with segment i frozen at the midpoint time of [a_{i-1}, a_i],
// a_i = s + (t - s) i / n. Works for either time orientation; the reversed
// chain (t, s, y, x) visits the same segment times, so the value is symmetric.
inline double chain_action(std::size_t x, std::size_t y, double s, double t, const MetricFamily& family, std::size_t n) {
    const auto N = static_cast<Eigen::Index>(family.size());
    Vector cost = Vector::Constant(N, std::numeric_limits<double>::infinity());
    cost(static_cast<Eigen::Index>(x)) = 0.0;
    Vector next(N);
    for (std::size_t k = 1; k <= n; ++k) {
        double mid = s + (t - s) * (static_cast<double>(k) - 0.5) / static_cast<double>(n);
        Matrix c = family.at(mid).array().square().matrix() * static_cast<double>(n);
        for (Eigen::Index j = 0; j < N; ++j) next(j) = (cost + c.col(j)).minCoeff();
        std::swap(cost, next);
    }
    return cost(static_cast<Eigen::Index>(y));
}

}  // namespace detail

struct ChainResult {
    double value = 0.0;   // approximation of d_{s,t}^2(x, y)
    std::size_t slices = 0;
};

// n_slices = 0 selects auto mode: slices double until the relative change drops
// below 1e-4; if a refinement increases the value (the point grid can no longer
// resolve the chain), the previous minimum is returned. n_probe is reserved.
inline ChainResult dynamic_distance_chain_detailed(std::size_t x, std::size_t y, double s, double t, const MetricFamily& family,
                                                   std::size_t n_slices = 0, std::size_t n_probe = 0,
                                                   std::size_t max_slices = 4096) {
    (void)n_probe;
    if (x >= family.size() || y >= family.size()) throw DimensionError("dynamic_distance_chain: point index out of range");
    if (s > t) throw OrderingError("dynamic_distance_chain: requires s <= t");
    detail::check_time(s, family.horizon(), "dynamic_distance_chain");
    detail::check_time(t, family.horizon(), "dynamic_distance_chain");
    if (x == y) return {0.0, std::max<std::size_t>(n_slices, 1)};
    if (s == t) {
        double d = family.at(t)(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
        return {d * d, 1};
    }
    if (n_slices > 0) return {detail::chain_action(x, y, s, t, family, n_slices), n_slices};
    std::size_t n = 1;
    double prev = detail::chain_action(x, y, s, t, family, n);
    while (n < max_slices) {
        double cur = detail::chain_action(x, y, s, t, family, 2 * n);
        if (cur > prev) return {prev, n};
        n *= 2;
        if (std::abs(prev - cur) <= 1e-4 * std::abs(cur)) return {cur, n};
        prev = cur;
    }
    return {prev, n};
}

inline double dynamic_distance_chain(std::size_t x, std::size_t y, double s, double t, const MetricFamily& family,
                                     std::size_t n_slices = 0, std::size_t n_probe = 0) {
    return dynamic_distance_chain_detailed(x, y, s, t, family, n_slices, n_probe).value;
}

// Closed form for d_t = sqrt(lambda t) |x - y|: lambda (t - s)/(log t - log s) gap^2.
inline double dynamic_distance_scaled(double lambda, double s, double t, double gap) {
    if (!(s > 0.0)) throw DomainError("dynamic_distance_scaled: s must be positive");
    if (!(lambda > 0.0)) throw DomainError("dynamic_distance_scaled: lambda must be positive");
    if (s > t) throw OrderingError("dynamic_distance_scaled: requires s <= t");
    if (std::abs(t - s) < 1e-12 * s) return lambda * s * gap * gap;
    return lambda * (t - s) / (std::log(t) - std::log(s)) * gap * gap;
}

// ---------------------------------------------------------------------------

struct LogLipReport {
    double worst_ratio = 0.0;  // max |log W_t/W_s| / |t - s|
    double bound = 0.0;        // declared L of the family
    double worst_s = 0.0;
    double worst_t = 0.0;
    std::size_t pairs = 0;
    bool ok = true;
};

inline LogLipReport wasserstein_loglip_check(const MetricFamily& family, const Vector& mu, const Vector& nu,
                                             const std::vector<double>& sample_times, double tol = 1e-9) {
    std::vector<double> W;
    W.reserve(sample_times.size());
    for (double t : sample_times) W.push_back(std::sqrt(std::max(0.0, kantorovich(mu, nu, family.at(t)).cost)));
    LogLipReport rep;
    rep.bound = family.declared_lipschitz();
    for (std::size_t a = 0; a < W.size(); ++a)
        for (std::size_t b = a + 1; b < W.size(); ++b) {
            double dt = std::abs(sample_times[b] - sample_times[a]);
            if (dt == 0.0 || !(W[a] > 0.0) || !(W[b] > 0.0)) continue;
            ++rep.pairs;
            double r = std::abs(std::log(W[b] / W[a])) / dt;
            if (r > rep.worst_ratio) {
                rep.worst_ratio = r;
                rep.worst_s = sample_times[a];
                rep.worst_t = sample_times[b];
            }
        }
    rep.ok = rep.worst_ratio <= rep.bound * (1.0 + tol) + tol;
    return rep;
}

}  // namespace dynflow
