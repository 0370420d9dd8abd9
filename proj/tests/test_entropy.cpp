#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dynflow/entropy.hpp"

using namespace dynflow;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double a : v) x(i++) = a;
    return x;
}

// Exhaustive search over the simplex of dimension 3 at the given pitch.
double simplex_grid_min(const std::function<double(const Vector&)>& F, double pitch) {
    const int K = static_cast<int>(std::lround(1.0 / pitch));
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a <= K; ++a)
        for (int b = 0; a + b <= K; ++b) {
            Vector x = vec({a * pitch, b * pitch, (K - a - b) * pitch});
            best = std::min(best, F(x));
        }
    return best;
}

// Pairwise compass search started from x; returns the best objective found.
double compass(const std::function<double(const Vector&)>& F, Vector x) {
    double best = F(x), d = 0.05;
    while (d > 1e-9) {
        bool improved = false;
        for (Eigen::Index i = 0; i < x.size(); ++i)
            for (Eigen::Index j = 0; j < x.size(); ++j) {
                if (i == j) continue;
                double step = std::min(d, x(i));
                if (step <= 0.0) continue;
                Vector y = x;
                y(i) -= step;
                y(j) += step;
                double v = F(y);
                if (v < best - 1e-16) best = v, x = y, improved = true;
            }
        if (!improved) d *= 0.5;
    }
    return best;
}

EntropyJkoProblem path3_problem(double tol) {
    Vector m = Vector::Constant(3, 1.0 / 3.0);
    auto measure = MeasureFamily::sinusoidal(m, vec({1.0, 0.0, -1.0}), 1.0, 2.0, 1.0);
    auto metric = MetricFamily::conformal_linear(path_distances(3, 0.2), 0.3, 1.0);
    JkoOptions o;
    o.tolerance = tol;
    return {EntropyFunctional(measure), metric, o};
}

}  // namespace

TEST(RelativeEntropy, ReferenceValues) {
    EntropyFunctional S(MeasureFamily::static_measure(vec({1.0, 2.0, 1.0}), 1.0));
    EXPECT_NEAR(S(vec({0.25, 0.5, 0.25}), 0.3), 0.0, 1e-15);
    EntropyFunctional two(MeasureFamily::static_measure(vec({1.0, 1.0}), 1.0));
    EXPECT_NEAR(two(vec({1.0, 0.0}), 0.0), std::log(2.0), 1e-15);
    EXPECT_THROW(two(vec({0.2, 0.3, 0.5}), 0.0), DimensionError);
}

TEST(RelativeEntropy, TwoFormsAgree) {
    Vector V = vec({1.0, 2.0, 3.0});
    EntropyFunctional S(MeasureFamily::linear(Vector::Ones(3), V, 1.0));
    Vector mu = vec({0.2, 0.3, 0.5});
    double ent = 0.0;
    for (double p : {0.2, 0.3, 0.5}) ent += p * std::log(3.0 * p);
    const double expected = ent + 0.5 * (0.2 + 0.6 + 1.5);
    EXPECT_NEAR(S(mu, 0.5), expected, 1e-12);
    EXPECT_NEAR(S.two_form(mu, 0.5), expected, 1e-12);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int k = 0; k < 50; ++k) {
        Vector x = vec({U(rng), U(rng), U(rng)});
        if (k % 5 == 0) x(1) = 0.0;
        x /= x.sum();
        const double t = U(rng);
        EXPECT_NEAR(S(x, t), S.two_form(x, t), 1e-12);
        EXPECT_GE(S(x, t), S.lower_bound(t));
        EXPECT_GE(S(x, t), S.uniform_lower_bound());
    }
}

TEST(RelativeEntropy, RateMatchesTimeDerivative) {
    Vector mu = vec({0.6, 0.2, 0.2});
    EntropyFunctional still(MeasureFamily::static_measure(Vector::Ones(3), 1.0));
    EXPECT_EQ(entropy_rate(still, mu, 0.4), 0.0);
    Vector V = vec({1.0, -2.0, 0.5});
    EntropyFunctional lin(MeasureFamily::linear(Vector::Ones(3), V, 1.0));
    EXPECT_NEAR(entropy_rate(lin, mu, 0.4), V.dot(mu), 1e-15);
    EntropyFunctional sine(MeasureFamily::sinusoidal(Vector::Ones(3), V, 0.7, 3.0, 1.0));
    const double t = 0.4, exact = entropy_rate(sine, mu, t);
    double prev_err = 0.0;
    for (double d : {1e-2, 5e-3}) {
        double fd = (relative_entropy(sine, mu, t + d) - relative_entropy(sine, mu, t - d)) / (2.0 * d);
        double err = std::abs(fd - exact);
        if (prev_err > 0.0) EXPECT_NEAR(prev_err / err, 4.0, 0.1);  // second order
        prev_err = err;
    }
}

TEST(EntropyJko, TwoPointClosedForm) {
    // nu = (1 - a, a): log(a / (1 - a)) + 1/(2h) = 0 at the optimum.
    EntropyFunctional S(MeasureFamily::static_measure(vec({1.0, 1.0}), 1.0));
    Matrix D = path_distances(2);
    const double a = 1.0 / (1.0 + std::exp(1.0));
    for (auto backend : {JkoBackend::exact_small, JkoBackend::scaling}) {
        JkoOptions o;
        o.backend = backend;
        auto r = jko_prox(vec({1.0, 0.0}), S, 0.5, D, 0.5, o);
        EXPECT_NEAR(r.nu(1), a, backend == JkoBackend::exact_small ? 1e-12 : 1e-4) << to_string(backend);
        double grid_best = std::numeric_limits<double>::infinity(), arg = 0.0;
        for (int k = 0; k <= 100000; ++k) {
            double b = k * 1e-5;
            double v = jko_objective(S, 0.5, D, 0.5, vec({1.0, 0.0}), vec({1.0 - b, b}));
            if (v < grid_best) grid_best = v, arg = b;
        }
        EXPECT_NEAR(r.nu(1), arg, 1e-4);
        EXPECT_LE(r.objective, grid_best + 1e-12);
    }
}

TEST(EntropyJko, MinimizerIsFixedPoint) {
    Vector V = vec({0.3, -0.2, 0.8, 0.0});
    EntropyFunctional S(MeasureFamily::linear(vec({1.0, 2.0, 3.0, 4.0}), V, 1.0));
    Matrix D = path_distances(4, 0.5);
    Vector m = S.measure().at(0.6);
    Vector target = m / m.sum();
    for (auto backend : {JkoBackend::exact_small, JkoBackend::scaling}) {
        JkoOptions o;
        o.backend = backend;
        auto r = jko_prox(target, S, 0.6, D, 0.1, o);
        EXPECT_NEAR(r.objective, S(target, 0.6), 1e-9) << to_string(backend);
        EXPECT_LT((r.nu - target).cwiseAbs().maxCoeff(), 1e-5);
    }
    // The exact backend returns the anchor itself.
    auto exact = jko_prox(target, S, 0.6, D, 0.1);
    EXPECT_EQ(wasserstein(exact.nu, target, D), 0.0);
}

TEST(EntropyJko, BackendsMatchSimplexGridSearch) {
    Matrix D = path_distances(3);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> U(0.0, 1.0);
        Vector m = vec({0.5 + U(rng), 0.5 + U(rng), 0.5 + U(rng)});
        Vector V = vec({2 * U(rng) - 1, 2 * U(rng) - 1, 2 * U(rng) - 1});
        Vector mu = vec({U(rng) + 0.05, U(rng) + 0.05, U(rng) + 0.05});
        mu /= mu.sum();
        const double tau = 0.1 + 0.4 * U(rng);
        EntropyFunctional S(MeasureFamily::linear(m, V, 1.0));
        auto F = [&](const Vector& x) { return jko_objective(S, 0.5, D, tau, mu, x); };
        const double grid = simplex_grid_min(F, 1e-3);
        JkoOptions exact, scaling;
        scaling.backend = JkoBackend::scaling;
        auto r1 = jko_prox(mu, S, 0.5, D, tau, exact);
        auto r2 = jko_prox(mu, S, 0.5, D, tau, scaling);
        // W^2 is linear in the moved mass, so the objective has kinks and a
        // pitch-1e-3 grid is only accurate to O(1e-3); pairwise compass search
        // gives the tight comparison.
        EXPECT_NEAR(r1.objective, grid, 2e-3) << seed;
        EXPECT_NEAR(r2.objective, grid, 2e-3) << seed;
        EXPECT_LE(r1.objective, grid + 1e-12);
        const double fine = std::min(compass(F, mu), compass(F, Vector::Constant(3, 1.0 / 3.0)));
        EXPECT_NEAR(r1.objective, fine, 1e-9) << seed;
        EXPECT_NEAR(r2.objective, fine, 1e-5) << seed;
        EXPECT_NEAR(r1.objective, r2.objective, 1e-5) << seed;
    }
}

TEST(EntropyJko, RejectsBadInput) {
    EntropyFunctional S(MeasureFamily::static_measure(vec({1.0, 1.0}), 1.0));
    Matrix D = path_distances(2);
    EXPECT_THROW(jko_prox(vec({0.5, 0.5}), S, 0.5, D, 0.0), DomainError);
    EXPECT_THROW(jko_prox(vec({0.5, 0.6}), S, 0.5, D, 0.1), DomainError);
    EXPECT_THROW(jko_prox(vec({0.2, 0.3, 0.5}), S, 0.5, D, 0.1), DimensionError);
}

TEST(EntropyJko, StationaryStartStaysPut) {
    Vector m = Vector::Constant(5, 0.2);
    EntropyJkoProblem p{EntropyFunctional(MeasureFamily::static_measure(m, 1.0)),
                        MetricFamily::constant(torus_distances(5), 1.0), {}};
    auto sol = jko_run(p, m, TimeGrid(1.0, 0.25));
    for (const auto& x : sol.states) EXPECT_EQ((x - m).cwiseAbs().maxCoeff(), 0.0);
    auto rep = ede_report(sol, p, nullptr);
    EXPECT_TRUE(rep.ledger_mode);
    EXPECT_EQ(rep.final_residual, 0.0);
}

TEST(EntropyJko, StaticTorusEntropyDecreases) {
    auto space = make_torus_space(16, 0.5, 0.0, 0.0);
    EntropyJkoProblem p{EntropyFunctional(space.measure), space.metric, {}};
    auto sol = jko_run(p, torus_bump(16, 0.1, 0.01), TimeGrid(0.5, 0.05));
    for (std::size_t n = 1; n < sol.energies.size(); ++n) EXPECT_LE(sol.energies[n], sol.energies[n - 1] + 1e-12) << n;
    // Each step does not increase S + W^2/2h relative to staying put.
    for (std::size_t n = 1; n < sol.energies.size(); ++n)
        EXPECT_LE(sol.energies[n] + sol.distances[n] * sol.distances[n] / 0.1, sol.energies[n - 1] + 1e-12);
}

TEST(EntropyJko, LedgerShrinksUnderRefinement) {
    const Vector mu0 = vec({0.7, 0.2, 0.1});
    const TimeGrid grid(1.0, 0.05);
    auto base_p = path3_problem(1e-10);
    auto fine_p = path3_problem(1e-11);
    QuadratureOptions base{3, 1e-4, 14}, fine{6, 1e-5, 14};
    auto base_l = ede_ledger(jko_run(base_p, mu0, grid, base));
    auto fine_l = ede_ledger(jko_run(fine_p, mu0, grid, fine));
    EXPECT_TRUE(base_l.within_budget()) << base_l.max_cumulative;
    EXPECT_TRUE(fine_l.within_budget()) << fine_l.max_cumulative;
    EXPECT_LE(4.0 * fine_l.max_cumulative, base_l.max_cumulative) << base_l.max_cumulative << " " << fine_l.max_cumulative;
    EXPECT_NEAR(base_l.budget, 1e-10 * 20 + 1e-4, 1e-18);
}

TEST(EntropyJko, AprioriBoundsUseEntropyLowerBound) {
    auto p = path3_problem(1e-10);
    auto sol = jko_run(p, vec({0.7, 0.2, 0.1}), TimeGrid(1.0, 0.05));
    EXPECT_DOUBLE_EQ(sol.lower_bound, -1.0);  // -sup |f_t| for amplitude 1, |V| <= 1
    auto rep = apriori_check(sol);
    EXPECT_TRUE(rep.ok());
}

TEST(EntropyJko, DriftTermMatchesRateQuadrature) {
    auto space = make_torus_space(16, 0.5, 0.0, 0.5, 2.0);
    EntropyJkoProblem p{EntropyFunctional(space.measure), space.metric, {}};
    auto sol = jko_run(p, torus_bump(16, 0.15, 0.01), TimeGrid(0.5, 0.05));
    auto rep = ede_report(sol, p, &space.geometry);
    ASSERT_FALSE(rep.ledger_mode);
    double drift = 0.0;
    for (std::size_t n = 1; n <= sol.completed; ++n) {
        const double a = sol.grid.node(n - 1), b = sol.grid.node(n);
        drift += 0.5 * (b - a) * (space.measure.rate(a).dot(sol.states[n - 1]) + space.measure.rate(b).dot(sol.states[n]));
        EXPECT_NEAR(rep.drift_int[n], drift, 1e-14);
    }
}

TEST(Fisher, ConstantAndCosineDensities) {
    auto geo = torus_geometry(32);
    Vector m = Vector::Constant(32, 1.0 / 32);
    EXPECT_EQ(fisher_information(Vector::Ones(32), 0.0, geo, m), 0.0);
    auto fisher_cos = [](std::size_t n, double a) {
        Vector x = torus_points(n);
        Vector rho = (1.0 + a * (2.0 * std::numbers::pi * x.array()).cos()).matrix();
        return fisher_information(rho, 0.0, torus_geometry(n), Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / n));
    };
    // Continuum value: int (2 pi a sin)^2 / (1 + a cos) = 4 pi^2 (1 - sqrt(1 - a^2)).
    const double a = 0.5, exact = 4.0 * std::numbers::pi * std::numbers::pi * (1.0 - std::sqrt(1.0 - a * a));
    EXPECT_NEAR(fisher_cos(64, a) / fisher_cos(640, a), 1.0, 0.01);
    EXPECT_NEAR(fisher_cos(640, a) / exact, 1.0, 1e-3);
    auto fisher_bump = [](std::size_t n) {
        Vector b = torus_bump(n, 0.1, 0.0) * static_cast<double>(n);
        return fisher_information(b, 0.0, torus_geometry(n), Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / n));
    };
    EXPECT_NEAR(fisher_bump(128) / fisher_bump(1280), 1.0, 0.01);
    GridGeometry none;
    EXPECT_THROW(fisher_information(Vector::Ones(32), 0.0, none, m), UnsupportedGeometryError);
}

TEST(MetricSpeed, ConstantAndTranslation) {
    MeasureTrajectory still{{0.0, 0.1, 0.2}, {Vector::Constant(8, 0.125), Vector::Constant(8, 0.125), Vector::Constant(8, 0.125)}};
    auto metric = MetricFamily::constant(torus_distances(8), 1.0);
    EXPECT_EQ(metric_speed_estimate(still, metric, 0.0, 0.1), 0.0);
    // Bump translating at speed 0.5 on a 128-point torus.
    const std::size_t n = 128;
    MeasureTrajectory tr;
    for (int k = 0; k <= 40; ++k) {
        double t = 0.01 * k;
        tr.times.push_back(t);
        tr.measures.push_back(torus_bump(n, 0.05, 0.0, 0.3 + 0.5 * t));
    }
    auto tm = MetricFamily::constant(torus_distances(n), 1.0);
    double v1 = metric_speed_estimate(tr, tm, 0.1, 0.2), v2 = metric_speed_estimate(tr, tm, 0.1, 0.1);
    EXPECT_NEAR(v1, 0.5, 0.025);
    EXPECT_NEAR(v2 / v1, 1.0, 0.1);
    EXPECT_THROW(metric_speed_estimate(tr, tm, 0.35, 0.1), DomainError);
}

TEST(Kuwada, StationaryAndStaticBump) {
    auto space = make_torus_space(64, 0.1, 0.0, 0.0);
    TimeGrid grid(0.1, 0.001);
    std::vector<double> times;
    for (int k = 1; k <= 10; ++k) times.push_back(0.004 * k);
    auto flat = forward_adjoint_flow(*space.form, Vector::Ones(64), grid);
    auto rep0 = kuwada_check(trajectory_of(flat), space.metric, space.measure, space.geometry, times, 0.001);
    EXPECT_TRUE(rep0.ok);
    EXPECT_EQ(rep0.worst_ratio, 0.0);
    Vector rho0 = torus_bump(64, 0.08, 0.01) * 64.0;
    auto flow = forward_adjoint_flow(*space.form, rho0, grid);
    auto rep = kuwada_check(trajectory_of(flow), space.metric, space.measure, space.geometry, times, 0.001);
    EXPECT_TRUE(rep.ok) << rep.worst_ratio;
    EXPECT_EQ(rep.rows.size(), 10u);
    EXPECT_EQ(rep.clipped, 0u);
    EXPECT_GT(rep.worst_ratio, 0.5);  // the speed is not trivially small
}

TEST(Dissipation, ResidualSmallOnDynamicTorus) {
    auto space = make_torus_space(64, 0.2, 0.2, 0.5);
    TimeGrid grid(0.2, 0.002);
    Vector rho0 = torus_bump(64, 0.1, 0.02) * 64.0;
    auto flow = forward_adjoint_flow(*space.form, rho0, grid);
    auto rep = entropy_dissipation_check(trajectory_of(flow), space.measure, space.geometry, {0.05, 0.1, 0.15});
    ASSERT_EQ(rep.rows.size(), 3u);
    EXPECT_LT(rep.max_relative_error, 0.1);
    EXPECT_THROW(entropy_dissipation_check(trajectory_of(flow), space.measure, space.geometry, {0.0}), DomainError);
}

TEST(Identification, StationaryStartHasNoGap) {
    auto space = make_torus_space(16, 0.2, 0.0, 0.0);
    auto cmp = identify_vs_adjoint_heat(space, Vector::Constant(16, 1.0 / 16), 0.05, {});
    ASSERT_EQ(cmp.times.size(), 5u);
    for (std::size_t k = 0; k < cmp.times.size(); ++k) {
        EXPECT_LE(cmp.l1_gap[k], 1e-8);
        EXPECT_LE(cmp.w_gap[k], 1e-8);
    }
}

TEST(Identification, BumpStartReportsGaps) {
    auto space = make_torus_space(16, 0.2, 0.2, 0.5);
    auto cmp = identify_vs_adjoint_heat(space, torus_bump(16, 0.1, 0.0), 0.05, {});
    EXPECT_EQ(cmp.grid_size, 16u);
    EXPECT_EQ(cmp.l1_gap.front(), 0.0);
    for (double g : cmp.l1_gap) EXPECT_GE(g, 0.0);
    EXPECT_GT(cmp.terminal_l1(), 0.0);
}
