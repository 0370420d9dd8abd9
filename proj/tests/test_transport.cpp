#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dynflow/transport.hpp"

using namespace dynflow;

namespace {

Matrix path_distances(int n) {
    Matrix D(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) D(i, j) = std::abs(i - j);
    return D;
}

Vector vec(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index k = 0;
    for (double x : xs) v(k++) = x;
    return v;
}

Vector random_simplex(std::mt19937_64& rng, int n, double zero_prob = 0.0) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = U(rng) < zero_prob ? 0.0 : U(rng) + 0.01;
    if (v.sum() == 0.0) v(0) = 1.0;
    return v / v.sum();
}

Matrix random_points_metric(std::mt19937_64& rng, int n) {
    std::normal_distribution<double> N01(0.0, 1.0);
    Matrix X(n, 2);
    for (int i = 0; i < n; ++i) X(i, 0) = N01(rng), X(i, 1) = N01(rng);
    Matrix D(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) D(i, j) = (X.row(i) - X.row(j)).norm();
    return D;
}

// Minimum of <c, x> over all basic feasible solutions of the 3x3 transport
// polytope: every choice of five cells whose equality system has a unique
// nonnegative solution.
double vertex_enumeration(const Vector& a, const Vector& b, const Matrix& c) {
    double best = std::numeric_limits<double>::infinity();
    for (int mask = 0; mask < (1 << 9); ++mask) {
        if (__builtin_popcount(mask) != 5) continue;
        std::vector<int> cells;
        for (int k = 0; k < 9; ++k)
            if (mask & (1 << k)) cells.push_back(k);
        Matrix A = Matrix::Zero(6, 5);
        Vector rhs(6);
        rhs << a, b;
        for (int col = 0; col < 5; ++col) {
            A(cells[col] / 3, col) = 1.0;
            A(3 + cells[col] % 3, col) = 1.0;
        }
        Eigen::FullPivHouseholderQR<Matrix> qr(A);
        if (qr.rank() < 5) continue;
        Vector x = qr.solve(rhs);
        if ((A * x - rhs).norm() > 1e-12 || x.minCoeff() < -1e-14) continue;
        double cost = 0.0;
        for (int col = 0; col < 5; ++col) cost += c(cells[col] / 3, cells[col] % 3) * x(col);
        best = std::min(best, cost);
    }
    return best;
}

void expect_certificate(const TransportResult& r, const Matrix& cost) {
    EXPECT_LE(r.coupling.marginal_residual(), 1e-10);
    EXPECT_GE(r.coupling.plan.minCoeff(), 0.0);
    EXPECT_LE(r.duals.max_violation(cost), 1e-9);
    EXPECT_GE(r.duals.gap, -1e-9);
    EXPECT_LE(r.duals.gap, 1e-9 * (1.0 + std::abs(r.cost)));
    EXPECT_EQ(r.duals.psi(0), 0.0);
}

}  // namespace

TEST(Kantorovich, EqualMarginalsGiveZero) {
    Vector mu = vec({0.2, 0.5, 0.3});
    auto r = kantorovich(mu, mu, path_distances(3));
    EXPECT_NEAR(r.cost, 0.0, 1e-15);
    Matrix off = r.coupling.plan;
    off.diagonal().setZero();
    EXPECT_EQ(off.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Kantorovich, TwoPointsSingleFeasiblePlan) {
    auto r = kantorovich(vec({1.0, 0.0}), vec({0.0, 1.0}), path_distances(2));
    EXPECT_DOUBLE_EQ(r.cost, 1.0);
    EXPECT_DOUBLE_EQ(r.coupling.plan(0, 1), 1.0);
}

TEST(Kantorovich, MatchesVertexEnumerationAtN3) {
    Vector mu = vec({0.5, 0.3, 0.2}), nu = vec({0.2, 0.3, 0.5});
    Matrix D = path_distances(3);
    Matrix c = D.array().square();
    auto r = kantorovich(mu, nu, D);
    EXPECT_NEAR(r.cost, vertex_enumeration(mu, nu, c), 1e-14);
    EXPECT_NEAR(r.cost, 0.6, 1e-14);  // 0.3 moves one step twice
    expect_certificate(r, c);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Vector a = random_simplex(rng, 3, 0.2), b = random_simplex(rng, 3, 0.2);
        Matrix Dr = random_points_metric(rng, 3);
        Matrix cr = Dr.array().square();
        auto rr = kantorovich(a, b, Dr);
        EXPECT_NEAR(rr.cost, vertex_enumeration(a, b, cr), 1e-12);
        expect_certificate(rr, cr);
    }
}

TEST(Kantorovich, RejectsInfeasibleMarginals) {
    EXPECT_THROW(kantorovich(vec({0.5, 0.5}), vec({0.5, 0.6}), path_distances(2)), MarginalError);
    EXPECT_THROW(kantorovich(vec({1.5, -0.5}), vec({0.5, 0.5}), path_distances(2)), MarginalError);
    EXPECT_THROW(kantorovich(vec({0.5, 0.5}), vec({0.5, 0.5}), path_distances(3)), DimensionError);
}

TEST(Kantorovich, ZeroMassEntriesGiveEmptyRows) {
    Vector mu = vec({0.0, 0.6, 0.0, 0.4}), nu = vec({0.25, 0.0, 0.75, 0.0});
    Matrix D = path_distances(4);
    auto r = kantorovich(mu, nu, D);
    EXPECT_EQ(r.coupling.plan.row(0).sum(), 0.0);
    EXPECT_EQ(r.coupling.plan.col(3).sum(), 0.0);
    expect_certificate(r, D.array().square().matrix());
    // 0.25 from 1 to 0, 0.35 from 1 to 2, 0.4 from 3 to 2.
    EXPECT_NEAR(r.cost, 0.25 + 0.35 + 0.4, 1e-14);
}

TEST(Kantorovich, CertificatesOnLargerInstances) {
    std::mt19937_64 rng(17);
    for (int n : {8, 16, 40, 64}) {
        Vector a = random_simplex(rng, n, 0.1), b = random_simplex(rng, n, 0.1);
        Matrix D = random_points_metric(rng, n);
        auto r = kantorovich(a, b, D);
        expect_certificate(r, D.array().square().matrix());
    }
    // Highly degenerate: uniform marginals on a torus grid.
    const int n = 64;
    Matrix D(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) D(i, j) = std::min(std::abs(i - j), n - std::abs(i - j)) / double(n);
    Vector u = Vector::Constant(n, 1.0 / n);
    Vector shifted(n);
    for (int i = 0; i < n; ++i) shifted(i) = (i % 2 == 0) ? 2.0 / n : 0.0;
    auto r = kantorovich(u, shifted, D);
    expect_certificate(r, D.array().square().matrix());
    EXPECT_NEAR(r.cost, 0.5 / (n * double(n)), 1e-15);
}

TEST(KantorovichProperties, SymmetryAndTriangle) {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 40; ++trial) {
        int n = 2 + trial % 7;
        Matrix D = random_points_metric(rng, n);
        Vector a = random_simplex(rng, n, 0.15), b = random_simplex(rng, n, 0.15), s = random_simplex(rng, n, 0.15);
        auto ab = kantorovich(a, b, D);
        auto ba = kantorovich(b, a, D);
        EXPECT_NEAR(ab.cost, ba.cost, 1e-10);
        double Wab = std::sqrt(ab.cost), Wbs = std::sqrt(kantorovich(b, s, D).cost), Was = std::sqrt(kantorovich(a, s, D).cost);
        EXPECT_LE(Was, Wab + Wbs + 1e-8);
    }
}

TEST(Sinkhorn, SymmetricKernelScaling) {
    const int n = 4;
    Matrix D = Matrix::Constant(n, n, 1.3);
    D.diagonal().setZero();
    Vector u = Vector::Constant(n, 0.25);
    const double eps = 0.7;
    auto r = sinkhorn(u, u, D, eps, 1e-13);
    // The Gibbs kernel has constant row sums, so the scaled plan is a multiple of it.
    double off = std::exp(-1.69 / eps);
    double z = n * (1.0 + (n - 1) * off);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) EXPECT_NEAR(r.coupling.plan(i, j), (i == j ? 1.0 : off) / z, 1e-13);
    // With a cost that is constant everywhere the plan is the product plan.
    Matrix flat = Matrix::Constant(n, n, 1.0);
    auto p = sinkhorn(u, u, flat, eps, 1e-13);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) EXPECT_NEAR(p.coupling.plan(i, j), 1.0 / 16.0, 1e-14);
}

TEST(Sinkhorn, EpsilonSweepApproachesExactCost) {
    Vector mu = vec({0.5, 0.3, 0.2}), nu = vec({0.2, 0.3, 0.5});
    Matrix D = path_distances(3);
    double exact = kantorovich(mu, nu, D).cost;
    double prev = std::numeric_limits<double>::infinity();
    for (double eps : {1.0, 0.1, 0.01}) {
        // Near-vanishing kernel entries make the smallest eps converge sublinearly.
        const double tol = eps < 0.05 ? 1e-6 : 1e-10;
        auto r = sinkhorn(mu, nu, D, eps, tol, 2000000);
        EXPECT_GE(r.cost, exact - 4.0 * tol);
        EXPECT_LT(r.cost, prev);
        prev = r.cost;
    }
    EXPECT_NEAR(prev, exact, 1e-4);
}

TEST(Sinkhorn, TwoPointFixedPointMatchesBisection) {
    Vector mu = vec({0.6, 0.4}), nu = vec({0.3, 0.7});
    Matrix D = path_distances(2);
    const double eps = 0.1;
    // P = [[p, 0.6-p], [0.3-p, 0.1+p]] with cross ratio exp((c12 + c21 - c11 - c22)/eps).
    const double target = std::log(std::exp(2.0 / eps));
    auto g = [&](double p) { return std::log(p) + std::log(0.1 + p) - std::log(0.6 - p) - std::log(0.3 - p) - target; };
    double lo = 1e-300, hi = 0.3;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        (g(mid) < 0.0 ? lo : hi) = mid;
    }
    double p = 0.5 * (lo + hi);
    auto r = sinkhorn(mu, nu, D, eps, 1e-14);
    EXPECT_NEAR(r.coupling.plan(0, 0), p, 1e-12);
    EXPECT_NEAR(r.coupling.plan(1, 1), 0.1 + p, 1e-12);
    EXPECT_NEAR(r.coupling.plan(0, 1), 0.6 - p, 1e-12);
}

TEST(Sinkhorn, NonConvergenceCarriesResidual) {
    Vector mu = vec({0.5, 0.3, 0.2}), nu = vec({0.2, 0.3, 0.5});
    try {
        sinkhorn(mu, nu, path_distances(3), 1e-3, 1e-15, 10);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 0.0);
    }
    EXPECT_THROW(sinkhorn(mu, nu, path_distances(3), 0.0), DomainError);
}

namespace {

// d_t = sqrt(lambda t) |x - y| for t >= 1 on n equally spaced points of [0, len].
MetricFamily scaled_line(int n, double len, double lambda, double T) {
    Matrix D(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) D(i, j) = len * std::abs(i - j) / (n - 1);
    return MetricFamily::conformal(
        D, [lambda](double t) { return 0.5 * std::log(lambda * std::max(t, 1.0)); }, 0.5, T);
}

}  // namespace

TEST(DynamicDistance, TrivialCases) {
    auto fam = scaled_line(10, 1.0, 1.0, 3.0);
    Matrix D2 = fam.at(2.0);
    EXPECT_DOUBLE_EQ(dynamic_distance_chain(1, 7, 2.0, 2.0, fam), D2(1, 7) * D2(1, 7));
    EXPECT_EQ(dynamic_distance_chain(4, 4, 1.0, 2.0, fam, 8), 0.0);
    EXPECT_THROW(dynamic_distance_chain(1, 2, 2.0, 1.0, fam), OrderingError);
}

TEST(DynamicDistance, TimeReversalSymmetry) {
    std::mt19937_64 rng(31);
    std::vector<Matrix> tables;
    for (int k = 0; k < 3; ++k) tables.push_back(random_points_metric(rng, 6));
    auto fam = MetricFamily::tabulated({0.0, 0.5, 1.0}, tables);
    for (std::size_t n : {1u, 2u, 3u, 8u})
        for (std::size_t x = 0; x < 6; ++x)
            for (std::size_t y = 0; y < 6; ++y) {
                double fwd = detail::chain_action(x, y, 0.1, 0.9, fam, n);
                double bwd = detail::chain_action(y, x, 0.9, 0.1, fam, n);
                EXPECT_NEAR(fwd, bwd, 1e-10);
            }
}

TEST(DynamicDistance, NestedRefinementDoesNotIncreaseOnFineEmbedding) {
    auto fam = scaled_line(200, 1.0, 1.0, std::numbers::e);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t n : {1u, 2u, 4u, 8u, 16u}) {
        double v = dynamic_distance_chain(0, 199, 1.0, std::numbers::e, fam, n);
        EXPECT_LE(v, prev + 1e-12);
        prev = v;
    }
}

TEST(DynamicDistance, LogarithmicMean) {
    EXPECT_NEAR(dynamic_distance_scaled(1.0, 1.0, std::numbers::e, 1.0), std::numbers::e - 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(dynamic_distance_scaled(1.5, 2.0, 2.0, 3.0), 1.5 * 2.0 * 9.0);
    EXPECT_DOUBLE_EQ(dynamic_distance_scaled(1.5, 2.0, 2.0 + 1e-15, 3.0), 1.5 * 2.0 * 9.0);
    // lambda = 2, s = 1, t = 4, gap = 3: 2 * 3 / log 4 * 9.
    double v = dynamic_distance_scaled(2.0, 1.0, 4.0, 3.0);
    EXPECT_NEAR(v, 54.0 / std::log(4.0), 1e-12);
    EXPECT_NEAR(v, 38.95277, 1e-5);
    EXPECT_THROW(dynamic_distance_scaled(1.0, 0.0, 1.0, 1.0), DomainError);
    EXPECT_THROW(dynamic_distance_scaled(1.0, 2.0, 1.0, 1.0), OrderingError);

    auto fam = scaled_line(200, 3.0, 2.0, 4.0);
    double chain = dynamic_distance_chain(0, 199, 1.0, 4.0, fam);
    EXPECT_NEAR(chain / v, 1.0, 1e-2);

    auto line = scaled_line(200, 1.0, 1.0, std::numbers::e);
    auto auto_mode = dynamic_distance_chain_detailed(0, 199, 1.0, std::numbers::e, line);
    EXPECT_NEAR(auto_mode.value, std::numbers::e - 1.0, 1e-2);
}

TEST(WassersteinLogLip, Families) {
    Matrix D0 = path_distances(5);
    Vector mu = vec({0.4, 0.1, 0.1, 0.2, 0.2}), nu = vec({0.1, 0.1, 0.5, 0.1, 0.2});
    std::vector<double> ts{0.0, 0.25, 0.5, 1.0, 2.0};
    auto c = wasserstein_loglip_check(MetricFamily::constant(D0, 2.0), mu, nu, ts);
    EXPECT_NEAR(c.worst_ratio, 0.0, 1e-12);
    EXPECT_TRUE(c.ok);
    auto g = wasserstein_loglip_check(MetricFamily::conformal_linear(D0, 0.4, 2.0), mu, nu, ts);
    EXPECT_NEAR(g.worst_ratio, 0.4, 1e-12);
    EXPECT_TRUE(g.ok);

    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> U(0.6, 1.8);
    std::vector<Matrix> tables;
    for (int k = 0; k < 4; ++k) {
        Matrix D = D0;
        for (int i = 0; i < 5; ++i)
            for (int j = i + 1; j < 5; ++j) D(i, j) = D(j, i) = D0(i, j) * U(rng);
        tables.push_back(D);
    }
    auto tab = MetricFamily::tabulated({0.0, 0.5, 1.0, 2.0}, tables);
    std::vector<double> dense;
    for (int k = 0; k <= 40; ++k) dense.push_back(0.05 * k);
    double L = estimate_log_lipschitz(tab, dense);
    for (int trial = 0; trial < 10; ++trial) {
        Vector a = random_simplex(rng, 5), b = random_simplex(rng, 5);
        auto rep = wasserstein_loglip_check(tab, a, b, dense);
        EXPECT_LE(rep.worst_ratio, L + 1e-9);
        EXPECT_TRUE(rep.ok);
    }
}
