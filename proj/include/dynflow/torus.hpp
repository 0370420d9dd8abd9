#pragma once

// Uniform grids on the unit torus: periodic distances, consistent graph forms
// and the discrete Fisher information.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <string>

#include "dynflow/dirichlet.hpp"
#include "dynflow/error.hpp"
#include "dynflow/space.hpp"

namespace dynflow {

inline Matrix torus_distances(std::size_t n) {
    const auto N = static_cast<Eigen::Index>(n);
    Matrix D(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
            Eigen::Index k = std::abs(i - j);
            D(i, j) = static_cast<double>(std::min(k, N - k)) / static_cast<double>(n);
        }
    return D;
}

inline Matrix path_distances(std::size_t n, double spacing = 1.0) {
    const auto N = static_cast<Eigen::Index>(n);
    Matrix D(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) D(i, j) = spacing * static_cast<double>(std::abs(i - j));
    return D;
}

// Cell centers x_i = i/n.
inline Vector torus_points(std::size_t n) {
    Vector x(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = static_cast<double>(i) / static_cast<double>(n);
    return x;
}

// Geometry needed by grid-only diagnostics. `scale(t)` is the conformal factor
// e^{g(t)} of the metric, so physical spacing is scale(t) * dx.
struct GridGeometry {
    enum class Kind { none, torus };
    Kind kind = Kind::none;
    std::size_t n = 0;
    double dx = 0.0;
    std::function<double(double)> scale;
};

inline GridGeometry torus_geometry(std::size_t n, std::function<double(double)> scale = nullptr) {
    if (!scale) scale = [](double) { return 1.0; };
    return {GridGeometry::Kind::torus, n, 1.0 / static_cast<double>(n), std::move(scale)};
}

// sum_i ((rho_{i+1} - rho_{i-1}) / (2 dx_t))^2 / ((rho_{i-1} + rho_{i+1})/2) m_{t,i}
// over vertices where the averaged density is positive.
inline double fisher_information(const Vector& rho, double t, const GridGeometry& geo, const Vector& m_t) {
    if (geo.kind != GridGeometry::Kind::torus) throw UnsupportedGeometryError("fisher_information: requires a grid geometry");
    const auto n = static_cast<Eigen::Index>(geo.n);
    if (rho.size() != n || m_t.size() != n) throw DimensionError("fisher_information: dimension mismatch");
    const double dx = geo.dx * geo.scale(t);
    double I = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double l = rho((i + n - 1) % n), r = rho((i + 1) % n);
        double avg = 0.5 * (l + r);
        if (!(avg > 0.0)) continue;
        double g = (r - l) / (2.0 * dx);
        I += g * g / avg * m_t(i);
    }
    return I;
}

// Torus space with d_t = e^{g t} d_grid, f_t = a sin(w t) V with V(x) = cos(2 pi x),
// uniform base measure and conductances e^{-2 g t} (m_i + m_j)/(2 dx^2) between neighbours.
struct TorusSpace {
    std::size_t n = 0;
    double T = 1.0;
    double g_rate = 0.0;
    double f_amplitude = 0.0;
    double f_omega = 1.0;
    Vector V;
    MetricFamily metric = MetricFamily::constant(Matrix::Zero(1, 1), 1.0);
    MeasureFamily measure = MeasureFamily::static_measure(Vector::Ones(1), 1.0);
    std::optional<GraphForm> form;
    GridGeometry geometry;

    bool is_static() const noexcept { return g_rate == 0.0 && f_amplitude == 0.0; }
};

inline GraphForm torus_graph_form(std::size_t n, double g_rate, const MeasureFamily& measure) {
    const double dx = 1.0 / static_cast<double>(n);
    const auto N = static_cast<Eigen::Index>(n);
    auto w = [N, dx, g_rate, measure](double t) {
        Vector m = measure.at(t);
        Matrix W = Matrix::Zero(N, N);
        const double s = std::exp(-2.0 * g_rate * t) / (dx * dx);
        for (Eigen::Index i = 0; i < N; ++i) {
            Eigen::Index j = (i + 1) % N;
            if (j == i) continue;
            double c = s * 0.5 * (m(i) + m(j));
            W(i, j) += c;
            W(j, i) += c;
        }
        return W;
    };
    // log of an average of e^{-f} is L*-Lipschitz in t.
    return GraphForm(w, measure, 2.0 * std::abs(g_rate) + measure.lipschitz());
}

inline TorusSpace make_torus_space(std::size_t n, double T, double g_rate, double f_amplitude, double f_omega = 1.0) {
    if (n < 3) throw DomainError("torus space: need at least three points");
    TorusSpace s;
    s.n = n;
    s.T = T;
    s.g_rate = g_rate;
    s.f_amplitude = f_amplitude;
    s.f_omega = f_omega;
    Vector x = torus_points(n);
    s.V = (2.0 * std::numbers::pi * x.array()).cos().matrix();
    Vector m = Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n));
    s.metric = MetricFamily::conformal_linear(torus_distances(n), g_rate, T);
    s.measure = f_amplitude == 0.0 ? MeasureFamily::static_measure(m, T) : MeasureFamily::sinusoidal(m, s.V, f_amplitude, f_omega, T);
    s.form.emplace(torus_graph_form(n, g_rate, s.measure));
    s.geometry = torus_geometry(n, [g_rate](double t) { return std::exp(g_rate * t); });
    return s;
}

// Probability vector proportional to exp(-d(x, center)^2 / (2 sigma^2)) + floor on the torus grid.
inline Vector torus_bump(std::size_t n, double sigma, double floor = 0.0, double center = 0.5) {
    Vector x = torus_points(n);
    Vector v(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        double d = std::abs(x(i) - center);
        d = std::min(d, 1.0 - d);
        v(i) = std::exp(-d * d / (2.0 * sigma * sigma)) + floor;
    }
    return v / v.sum();
}

}  // namespace dynflow
