#include <gtest/gtest.h>

#include <cmath>

#include "dynflow/dirichlet.hpp"
#include "dynflow/mms.hpp"

using namespace dynflow;

namespace {

// Closed forms for E_t(x) = (x - t)^2 on R.
double step_closed_form(double x_prev, double tau, double t_energy) { return (x_prev + 2.0 * tau * t_energy) / (1.0 + 2.0 * tau); }

double exact_curve(double t) { return 0.5 * std::exp(-2.0 * t) + t - 0.5; }

Vector scalar(double x) { return Vector::Constant(1, x); }

}  // namespace

TEST(MinimizingMovement, StepMatchesClosedForm) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    auto r = mm_step(p, scalar(0.3), 0.2, 0.45);
    EXPECT_NEAR(r.x(0), step_closed_form(0.3, 0.25, 0.45), 1e-15);
    const double d = std::abs(r.x(0) - 0.3);
    EXPECT_NEAR(r.diagnostics.distance, d, 1e-15);
    EXPECT_NEAR(r.diagnostics.objective, std::pow(r.x(0) - 0.45, 2) + d * d / 0.5, 1e-15);
    EXPECT_NEAR(r.diagnostics.objective_at_anchor, std::pow(0.3 - 0.45, 2), 1e-15);
    EXPECT_THROW(mm_step(p, scalar(0.0), 0.5, 0.5), OrderingError);
}

TEST(MinimizingMovement, InterpolantUsesAbsoluteTimeForEnergy) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    const double tp = 0.4, tn = 0.5;
    for (double r : {0.41, 0.45, 0.5}) {
        auto x = variational_interpolant(p, scalar(0.1), tp, tn, r);
        EXPECT_NEAR(x(0), step_closed_form(0.1, r - tp, r), 1e-15) << r;
    }
    EXPECT_THROW(variational_interpolant(p, scalar(0.1), tp, tn, tp), OrderingError);
    EXPECT_THROW(variational_interpolant(p, scalar(0.1), tp, tn, 0.51), OrderingError);
    // At r = t_n the interpolant is the step itself.
    EXPECT_NEAR(variational_interpolant(p, scalar(0.1), tp, tn, tn)(0), mm_step(p, scalar(0.1), tp, tn).x(0), 1e-15);
}

TEST(MinimizingMovement, ScalarExampleReachesAnalyticEndpoint) {
    auto q = scalar_example_problem();
    auto rep = quadratic_testbed_run(q, scalar(0.0), TimeGrid(1.0, 1e-3));
    EXPECT_NEAR(rep.scheme.back()(0), 0.5 * std::exp(-2.0) + 0.5, 5e-3);
    EXPECT_NEAR(0.5 * std::exp(-2.0) + 0.5, 0.56767, 1e-5);
    // The scheme tracks the whole curve at first order.
    TimeGrid g(1.0, 1e-3);
    double e = 0.0;
    for (std::size_t n = 0; n <= g.steps(); ++n) e = std::max(e, std::abs(rep.scheme[n](0) - exact_curve(g.node(n))));
    EXPECT_LT(e, 1e-3);
    EXPECT_GT(rep.observed_order, 0.9);
    EXPECT_LT(rep.observed_order, 1.1);
    EXPECT_LT(rep.max_residual, 1e-12);
    EXPECT_NEAR(rep.oracle.back()(0), exact_curve(1.0), 1e-10);
}

TEST(MinimizingMovement, RecurrenceMatchesIndependentIteration) {
    auto q = scalar_example_problem();
    auto sol = run_scheme(quadratic_step_problem(q), scalar(0.0), TimeGrid(1.0, 0.1), 2);
    double x = 0.0;
    for (std::size_t n = 1; n <= 10; ++n) {
        x = (x + 0.2 * (0.1 * static_cast<double>(n))) / 1.2;
        EXPECT_NEAR(sol.states[n](0), x, 1e-14);
    }
    EXPECT_EQ(sol.completed, 10u);
    EXPECT_EQ(sol.interpolants.size(), 10u);
    EXPECT_EQ(sol.piecewise_constant(0.0)(0), 0.0);
    EXPECT_EQ(sol.piecewise_constant(0.15)(0), sol.states[2](0));
    EXPECT_EQ(sol.piecewise_constant(0.2)(0), sol.states[2](0));
}

TEST(MinimizingMovement, LedgerWithinBudgetAndShrinksWithQuadrature) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    TimeGrid g(1.0, 0.01);
    auto coarse = ede_ledger(run_scheme(p, scalar(0.0), g, 2));
    auto fine = ede_ledger(run_scheme(p, scalar(0.0), g, 4));
    EXPECT_TRUE(coarse.within_budget()) << coarse.max_cumulative;
    EXPECT_TRUE(fine.within_budget());
    EXPECT_LE(fine.max_cumulative * 4.0, coarse.max_cumulative);
    // Budget: inner tolerance (exact here) times steps plus quadrature budget.
    EXPECT_DOUBLE_EQ(fine.budget, 1e-4);
}

TEST(MinimizingMovement, LedgerTermsAreConsistent) {
    auto q = scalar_example_problem();
    auto sol = run_scheme(quadratic_step_problem(q), scalar(0.0), TimeGrid(0.5, 0.05), 3);
    auto L = ede_ledger(sol);
    double cum = 0.0;
    for (std::size_t k = 0; k < L.residual.size(); ++k) {
        EXPECT_NEAR(L.speed_term[k], sol.distances[k + 1] * sol.distances[k + 1] / 0.1, 1e-15);
        EXPECT_NEAR(L.energy_drop[k], sol.energies[k] - sol.energies[k + 1], 1e-15);
        cum += L.residual[k];
        EXPECT_NEAR(L.cumulative[k], cum, 1e-15);
    }
}

TEST(MinimizingMovement, AprioriBoundsHold) {
    auto q = scalar_example_problem();
    for (double h : {0.1, 0.01}) {
        auto sol = run_scheme(quadratic_step_problem(q), scalar(0.0), TimeGrid(1.0, h), 3);
        auto rep = apriori_check(sol);
        EXPECT_TRUE(rep.ok()) << h;
        EXPECT_DOUBLE_EQ(rep.energy_bound, 0.0 + 2.0 * 1.0);
        EXPECT_DOUBLE_EQ(rep.dissipation_bound, 2.0);
        EXPECT_LE(rep.dissipation, rep.dissipation_bound);
        EXPECT_LE(rep.c3_fit, rep.c3_bound);
    }
}

TEST(MinimizingMovement, AprioriFlagsUndeclaredGrowth) {
    auto q = scalar_example_problem();
    q.lipschitz = 0.0;  // E_t(x_0) grows in t, so the energy bound must fail
    auto sol = run_scheme(quadratic_step_problem(q), scalar(0.0), TimeGrid(1.0, 0.1), 2);
    EXPECT_FALSE(apriori_check(sol).ok());
}

TEST(MinimizingMovement, RefinementOrderAgainstOracle) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    std::vector<double> eval{0.2, 0.4, 0.6, 0.8, 1.0};
    auto tab = refine_study<Vector>(p, scalar(0.0), 1.0, {0.04, 0.02, 0.01, 0.005}, eval,
                                    [](double t) { return scalar(exact_curve(t)); });
    ASSERT_EQ(tab.rows.size(), 4u);
    EXPECT_GT(tab.fitted_order, 0.9);
    EXPECT_LT(tab.fitted_order, 1.1);
    auto self = refine_study<Vector>(p, scalar(0.0), 1.0, {0.04, 0.02, 0.01, 0.005}, eval);
    EXPECT_EQ(self.rows.size(), 3u);
    EXPECT_GT(self.fitted_order, 0.9);
    EXPECT_THROW(refine_study<Vector>(p, scalar(0.0), 1.0, {0.01, 0.02, 0.005}, eval), DomainError);
}

TEST(MinimizingMovement, MakeTableOrders) {
    auto tab = make_table({0.1, 0.05, 0.025}, {0.4, 0.1, 0.025});
    EXPECT_TRUE(std::isnan(tab.rows[0].order));
    EXPECT_NEAR(tab.rows[1].order, 2.0, 1e-12);
    EXPECT_NEAR(tab.fitted_order, 2.0, 1e-12);
}

TEST(MinimizingMovement, InnerFailureAbortsWithPartialSolution) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    auto inner = p.inner_solver;
    p.inner_solver = [inner](double te, double tau, const Vector& a, double tm) {
        if (te > 0.25) throw ConvergenceError("stalled", 0.5);
        return inner(te, tau, a, tm);
    };
    try {
        run_scheme(p, scalar(0.0), TimeGrid(1.0, 0.1), 0);
        FAIL() << "expected abort";
    } catch (const SchemeAborted<Vector>& e) {
        EXPECT_EQ(e.step(), 3u);
        EXPECT_DOUBLE_EQ(e.residual(), 0.5);
        EXPECT_EQ(e.partial().completed, 2u);
        EXPECT_EQ(e.partial().states.size(), 3u);
    }
}

TEST(MinimizingMovement, ProblemCheckDetectsLipschitzViolation) {
    auto q = scalar_example_problem();
    auto p = quadratic_step_problem(q);
    std::vector<Vector> probes{scalar(0.0), scalar(0.5), scalar(1.0)};
    std::vector<double> times{0.0, 0.3, 0.7, 1.0};
    EXPECT_TRUE(check_problem(p, probes, times).ok());
    p.lipschitz = 1.0;
    EXPECT_FALSE(check_problem(p, probes, times).ok());
}

TEST(MinimizingMovement, RotatingInnerProductTestbed) {
    // A_t = R_t diag(1, 3) R_t^T with a rotating frame, E = 1/2 |x - b|^2.
    QuadraticHilbertProblem q;
    q.n = 2;
    q.A = [](double t) {
        Matrix R(2, 2);
        R << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
        Matrix D = Matrix::Zero(2, 2);
        D(0, 0) = 1.0;
        D(1, 1) = 3.0;
        return Matrix(R * D * R.transpose());
    };
    q.Q = [](double) { return Matrix::Identity(2, 2); };
    q.b = [](double) { return Vector::Constant(2, -1.0); };
    q.c = [](double) { return 1.0; };
    q.lipschitz = 0.0;
    auto rep = quadratic_testbed_run(q, Vector::Zero(2), TimeGrid(1.0, 0.01));
    EXPECT_GT(rep.observed_order, 0.9);
    EXPECT_LT(rep.sup_error, 0.02);
    EXPECT_LT(rep.max_residual, 1e-12);
    q.A = [](double) { Matrix A(2, 2); A << 1, 2, 2, 1; return A; };
    EXPECT_THROW(quadratic_testbed_run(q, Vector::Zero(2), TimeGrid(1.0, 0.1)), ProblemError);
}
