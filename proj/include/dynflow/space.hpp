#pragma once

// Time-dependent finite metric measure spaces: distance families (d_t), measure
// families m_t = exp(-f_t) m, and checks of the standing regularity assumptions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/error.hpp"

namespace dynflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

namespace detail {

inline void check_time(double t, double T, const char* who) {
    // A relative slack of a few ulps keeps t = n*h with n*h ~ T inside the domain.
    const double slack = 1e-12 * std::max(1.0, T);
    if (!(t >= -slack && t <= T + slack))
        throw DomainError(std::string(who) + ": time " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
}

// Index a with times[a] <= t <= times[a+1] and the interpolation weight.
inline std::pair<std::size_t, double> locate(const std::vector<double>& times, double t) {
    if (t <= times.front()) return {0, 0.0};
    if (t >= times.back()) return {times.size() - 2, 1.0};
    auto it = std::upper_bound(times.begin(), times.end(), t);
    std::size_t b = static_cast<std::size_t>(it - times.begin());
    std::size_t a = b - 1;
    return {a, (t - times[a]) / (times[b] - times[a])};
}

inline void check_increasing(const std::vector<double>& times, const char* who) {
    if (times.size() < 2) throw DomainError(std::string(who) + ": need at least two tabulation times");
    for (std::size_t k = 1; k < times.size(); ++k)
        if (!(times[k] > times[k - 1])) throw DomainError(std::string(who) + ": tabulation times must increase");
    if (std::abs(times.front()) > 0.0) throw DomainError(std::string(who) + ": tabulation must start at t = 0");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metric validation

struct MetricIssue {
    enum class Kind { asymmetric, nonzero_diagonal, nonpositive, triangle };
    Kind kind;
    std::size_t i = 0;
    std::size_t j = 0;
    std::size_t k = 0;  // intermediate point for triangle violations
    double amount = 0.0;
};

inline const char* to_string(MetricIssue::Kind kind) {
    switch (kind) {
        case MetricIssue::Kind::asymmetric: return "asymmetric";
        case MetricIssue::Kind::nonzero_diagonal: return "nonzero-diagonal";
        case MetricIssue::Kind::nonpositive: return "nonpositive";
        case MetricIssue::Kind::triangle: return "triangle";
    }
    return "unknown";
}

struct MetricReport {
    std::vector<MetricIssue> issues;
    bool ok() const noexcept { return issues.empty(); }
};

// Lists every violation of the metric axioms beyond tol. Unordered pairs are
// reported once (i < j); a triangle violation D(i,j) > D(i,k) + D(k,j) once per
// (i < j, k).
inline MetricReport validate_metric(const Matrix& D, double tol = 1e-9) {
    if (D.rows() != D.cols()) throw DimensionError("validate_metric: matrix must be square");
    MetricReport report;
    const auto n = static_cast<std::size_t>(D.rows());
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(D(i, i)) > tol) report.issues.push_back({MetricIssue::Kind::nonzero_diagonal, i, i, 0, std::abs(D(i, i))});
        for (std::size_t j = i + 1; j < n; ++j) {
            double asym = std::abs(D(i, j) - D(j, i));
            if (asym > tol) report.issues.push_back({MetricIssue::Kind::asymmetric, i, j, 0, asym});
            if (D(i, j) <= tol || D(j, i) <= tol)
                report.issues.push_back({MetricIssue::Kind::nonpositive, i, j, 0, std::min(D(i, j), D(j, i))});
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            for (std::size_t k = 0; k < n; ++k) {
                if (k == i || k == j) continue;
                double excess = D(i, j) - D(i, k) - D(k, j);
                if (excess > tol) report.issues.push_back({MetricIssue::Kind::triangle, i, j, k, excess});
            }
    return report;
}

// ---------------------------------------------------------------------------
// MetricFamily

class MetricFamily {
public:
    enum class Kind { constant, conformal, tabulated };

    static MetricFamily constant(Matrix D0, double T) {
        MetricFamily fam(Kind::constant, T);
        fam.base_ = std::move(D0);
        fam.L_ = 0.0;
        fam.finish();
        return fam;
    }

    // d_t = exp(g(t)) * D0 with |g(t) - g(s)| <= L |t - s|.
    static MetricFamily conformal(Matrix D0, std::function<double(double)> g, double L, double T) {
        if (!g) throw DomainError("conformal metric family: missing scaling function");
        if (!(L >= 0.0)) throw DomainError("conformal metric family: L must be nonnegative");
        MetricFamily fam(Kind::conformal, T);
        fam.base_ = std::move(D0);
        fam.log_scale_ = std::move(g);
        fam.L_ = L;
        fam.finish();
        return fam;
    }

    // g(t) = rate * t.
    static MetricFamily conformal_linear(Matrix D0, double rate, double T) {
        MetricFamily fam = conformal(std::move(D0), [rate](double t) { return rate * t; }, std::abs(rate), T);
        fam.rate_ = rate;
        return fam;
    }

    // log d_t interpolated linearly between tabulated matrices; L < 0 means
    // "compute the exact constant from the tables".
    static MetricFamily tabulated(std::vector<double> times, std::vector<Matrix> tables, double L = -1.0) {
        detail::check_increasing(times, "tabulated metric family");
        if (tables.size() != times.size()) throw DimensionError("tabulated metric family: one table per time required");
        MetricFamily fam(Kind::tabulated, times.back());
        fam.base_ = tables.front();
        for (const auto& D : tables) {
            if (D.rows() != fam.base_.rows() || D.cols() != fam.base_.cols())
                throw DimensionError("tabulated metric family: tables differ in size");
        }
        const auto n = fam.base_.rows();
        fam.log_tables_.reserve(tables.size());
        for (const auto& D : tables) {
            Matrix logD = Matrix::Zero(n, n);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j) {
                    if (i == j) continue;
                    if (!(D(i, j) > 0.0)) throw DegenerateMetricError("tabulated metric family: zero off-diagonal distance");
                    logD(i, j) = std::log(D(i, j));
                }
            fam.log_tables_.push_back(std::move(logD));
        }
        double slope = 0.0;
        for (std::size_t k = 1; k < times.size(); ++k)
            slope = std::max(slope, (fam.log_tables_[k] - fam.log_tables_[k - 1]).cwiseAbs().maxCoeff() / (times[k] - times[k - 1]));
        fam.L_ = L < 0.0 ? slope : L;
        fam.times_ = std::move(times);
        fam.finish();
        return fam;
    }

    Kind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(base_.rows()); }
    double horizon() const noexcept { return T_; }
    double declared_lipschitz() const noexcept { return L_; }
    const Matrix& base() const noexcept { return base_; }
    // Linear rate of a conformal_linear family (0 otherwise).
    double linear_rate() const noexcept { return rate_; }
    const std::vector<double>& table_times() const noexcept { return times_; }

    // exp(g(t)) for conformal families, 1 otherwise.
    double scale(double t) const {
        detail::check_time(t, T_, "metric_at");
        return kind_ == Kind::conformal ? std::exp(log_scale_(t)) : 1.0;
    }

    Matrix at(double t) const {
        detail::check_time(t, T_, "metric_at");
        switch (kind_) {
            case Kind::constant: return base_;
            case Kind::conformal: return std::exp(log_scale_(t)) * base_;
            case Kind::tabulated: {
                auto [a, w] = detail::locate(times_, t);
                Matrix logD = (1.0 - w) * log_tables_[a] + w * log_tables_[a + 1];
                Matrix D = logD.array().exp().matrix();
                D.diagonal().setZero();
                return D;
            }
        }
        return base_;
    }

private:
    MetricFamily(Kind kind, double T) : kind_(kind), T_(T) {
        if (!(T > 0.0)) throw DomainError("metric family: horizon T must be positive");
    }

    void finish() const {
        if (base_.rows() != base_.cols() || base_.rows() == 0) throw DimensionError("metric family: base matrix must be square and nonempty");
    }

    Kind kind_;
    double T_;
    double L_ = 0.0;
    double rate_ = 0.0;
    Matrix base_;
    std::function<double(double)> log_scale_;
    std::vector<double> times_;
    std::vector<Matrix> log_tables_;
};

inline Matrix metric_at(const MetricFamily& family, double t) { return family.at(t); }

// max |log d_t(x,y) - log d_s(x,y)| / |t - s| over all sampled time pairs and
// all off-diagonal point pairs.
inline double estimate_log_lipschitz(const MetricFamily& family, const std::vector<double>& sample_times) {
    if (sample_times.size() < 2) throw DomainError("estimate_log_lipschitz: need at least two sample times");
    std::vector<Matrix> logs;
    logs.reserve(sample_times.size());
    const auto n = static_cast<Eigen::Index>(family.size());
    for (double t : sample_times) {
        Matrix D = family.at(t);
        Matrix L = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i == j) continue;
                if (!(D(i, j) > 0.0)) throw DegenerateMetricError("estimate_log_lipschitz: zero off-diagonal distance");
                L(i, j) = std::log(D(i, j));
            }
        logs.push_back(std::move(L));
    }
    double worst = 0.0;
    for (std::size_t a = 0; a < sample_times.size(); ++a)
        for (std::size_t b = a + 1; b < sample_times.size(); ++b) {
            double dt = std::abs(sample_times[b] - sample_times[a]);
            if (dt == 0.0) continue;
            worst = std::max(worst, (logs[b] - logs[a]).cwiseAbs().maxCoeff() / dt);
        }
    return worst;
}

// ---------------------------------------------------------------------------
// MeasureFamily

class MeasureFamily {
public:
    using VectorFn = std::function<Vector(double)>;

    // f == 0.
    static MeasureFamily static_measure(Vector m, double T) {
        const auto n = m.size();
        MeasureFamily fam(std::move(m), T);
        fam.potential_ = [n](double) { return Vector::Zero(n); };
        fam.rate_fn_ = [n](double) { return Vector::Zero(n); };
        fam.Lstar_ = 0.0;
        fam.C_ = 0.0;
        return fam;
    }

    // Potential given by a callable; rate may be empty (centered differences are used then).
    static MeasureFamily analytic(Vector m, VectorFn f, VectorFn rate, double Lstar, double C, double T) {
        if (!f) throw DomainError("measure family: missing potential");
        MeasureFamily fam(std::move(m), T);
        fam.potential_ = std::move(f);
        fam.rate_fn_ = std::move(rate);
        fam.Lstar_ = Lstar;
        fam.C_ = C;
        return fam;
    }

    // f_t = t * V.
    static MeasureFamily linear(Vector m, Vector V, double T) {
        double vmax = V.cwiseAbs().maxCoeff();
        return analytic(
            std::move(m), [V](double t) { return Vector(t * V); }, [V](double) { return V; }, vmax, vmax * T, T);
    }

    // f_t = amplitude * sin(omega t) * V.
    static MeasureFamily sinusoidal(Vector m, Vector V, double amplitude, double omega, double T) {
        double vmax = V.cwiseAbs().maxCoeff();
        return analytic(
            std::move(m), [V, amplitude, omega](double t) { return Vector(amplitude * std::sin(omega * t) * V); },
            [V, amplitude, omega](double t) { return Vector(amplitude * omega * std::cos(omega * t) * V); },
            std::abs(amplitude * omega) * vmax, std::abs(amplitude) * vmax, T);
    }

    // Piecewise linear potential through tabulated vectors; no analytic rate.
    static MeasureFamily tabulated(Vector m, std::vector<double> times, std::vector<Vector> tables) {
        detail::check_increasing(times, "tabulated measure family");
        if (tables.size() != times.size()) throw DimensionError("tabulated measure family: one vector per time required");
        for (const auto& f : tables)
            if (f.size() != m.size()) throw DimensionError("tabulated measure family: potential size mismatch");
        double Lstar = 0.0, C = 0.0;
        for (std::size_t k = 0; k < tables.size(); ++k) {
            C = std::max(C, tables[k].cwiseAbs().maxCoeff());
            if (k > 0) Lstar = std::max(Lstar, (tables[k] - tables[k - 1]).cwiseAbs().maxCoeff() / (times[k] - times[k - 1]));
        }
        double T = times.back();
        MeasureFamily fam(std::move(m), T);
        fam.table_times_ = times;
        fam.potential_ = [times = std::move(times), tables = std::move(tables)](double t) {
            auto [a, w] = detail::locate(times, t);
            return Vector((1.0 - w) * tables[a] + w * tables[a + 1]);
        };
        fam.Lstar_ = Lstar;
        fam.C_ = C;
        return fam;
    }

    std::size_t size() const noexcept { return static_cast<std::size_t>(base_.size()); }
    double horizon() const noexcept { return T_; }
    const Vector& base() const noexcept { return base_; }
    double lipschitz() const noexcept { return Lstar_; }
    double bound() const noexcept { return C_; }
    bool has_analytic_rate() const noexcept { return static_cast<bool>(rate_fn_); }
    bool is_tabulated() const noexcept { return !table_times_.empty(); }

    // Step of the centered difference used when no analytic rate exists.
    double rate_step() const noexcept { return rate_step_ > 0.0 ? rate_step_ : 1e-6 * T_; }
    void set_rate_step(double delta) {
        if (!(delta > 0.0)) throw DomainError("measure family: rate step must be positive");
        rate_step_ = delta;
    }

    Vector potential(double t) const {
        detail::check_time(t, T_, "measure_at");
        return potential_(t);
    }

    Vector at(double t) const {
        Vector f = potential(t);
        return (base_.array() * (-f.array()).exp()).matrix();
    }

    Vector rate(double t) const {
        detail::check_time(t, T_, "f_rate");
        if (rate_fn_) return rate_fn_(t);
        double delta = rate_step();
        if (is_tabulated()) {
            const double slack = 1e-12 * std::max(1.0, T_);
            if (t <= table_times_.front() + slack || t >= table_times_.back() - slack)
                throw BoundaryError("f_rate: tabulated potential has no rate at a tabulation boundary");
            delta = std::min({delta, t - table_times_.front(), table_times_.back() - t});
        }
        return (potential_(t + delta) - potential_(t - delta)) / (2.0 * delta);
    }

private:
    MeasureFamily(Vector m, double T) : T_(T) {
        if (!(T > 0.0)) throw DomainError("measure family: horizon T must be positive");
        if (m.size() == 0) throw DimensionError("measure family: empty base measure");
        if ((m.array() <= 0.0).any()) throw DomainError("measure family: base weights must be positive");
        base_ = m / m.sum();
    }

    double T_;
    Vector base_;
    VectorFn potential_;
    VectorFn rate_fn_;
    std::vector<double> table_times_;
    double Lstar_ = 0.0;
    double C_ = 0.0;
    double rate_step_ = 0.0;
};

inline Vector measure_at(const MeasureFamily& family, double t) { return family.at(t); }
inline Vector f_rate(const MeasureFamily& family, double t) { return family.rate(t); }

struct MeasureReport {
    double max_abs_potential = 0.0;   // compared against C
    double max_time_quotient = 0.0;   // compared against L*
    double min_weight = 0.0;
    bool ok = true;
};

// Checks |f_t| <= C, |f_t - f_s| <= L* |t - s| and positivity of m_t on the samples.
inline MeasureReport check_measure_family(const MeasureFamily& family, const std::vector<double>& sample_times, double tol = 1e-9) {
    MeasureReport report;
    report.min_weight = std::numeric_limits<double>::infinity();
    std::vector<Vector> f;
    for (double t : sample_times) {
        f.push_back(family.potential(t));
        report.max_abs_potential = std::max(report.max_abs_potential, f.back().cwiseAbs().maxCoeff());
        report.min_weight = std::min(report.min_weight, family.at(t).minCoeff());
    }
    for (std::size_t a = 0; a < f.size(); ++a)
        for (std::size_t b = a + 1; b < f.size(); ++b) {
            double dt = std::abs(sample_times[b] - sample_times[a]);
            if (dt > 0.0) report.max_time_quotient = std::max(report.max_time_quotient, (f[b] - f[a]).cwiseAbs().maxCoeff() / dt);
        }
    report.ok = report.max_abs_potential <= family.bound() + tol && report.max_time_quotient <= family.lipschitz() + tol &&
                report.min_weight > 0.0;
    return report;
}

// ---------------------------------------------------------------------------

struct SpaceSnapshot {
    double t = 0.0;
    Matrix distance;
    Vector measure;
    Vector f_rate;
};

inline SpaceSnapshot snapshot(const MetricFamily& metric, const MeasureFamily& measure, double t) {
    if (metric.size() != measure.size()) throw DimensionError("snapshot: metric and measure families differ in size");
    SpaceSnapshot s{t, metric.at(t), measure.at(t), measure.rate(t)};
    if (!s.distance.allFinite() || !s.measure.allFinite() || !s.f_rate.allFinite())
        throw DomainError("snapshot: non-finite entries");
    return s;
}

}  // namespace dynflow
