#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dynflow/error.hpp"

namespace dynflow {

// Uniform partition 0 = t_0 < t_1 < ... < t_N with t_n = n*h and t_{N-1} < T <= t_N.
class TimeGrid {
public:
    TimeGrid(double T, double h) : T_(T), h_(h) {
        if (!(h > 0.0) || !std::isfinite(h)) throw DomainError("time grid: step h must be positive");
        if (!(T > 0.0) || !std::isfinite(T)) throw DomainError("time grid: horizon T must be positive");
        // Guard against T/h landing a hair above an integer through round-off.
        steps_ = static_cast<std::size_t>(std::ceil(T / h - 1e-9));
        if (steps_ == 0) steps_ = 1;
    }

    double horizon() const noexcept { return T_; }
    double step() const noexcept { return h_; }
    std::size_t steps() const noexcept { return steps_; }
    std::size_t size() const noexcept { return steps_ + 1; }
    double node(std::size_t n) const noexcept { return static_cast<double>(n) * h_; }

    std::vector<double> nodes() const {
        std::vector<double> out(size());
        for (std::size_t n = 0; n < out.size(); ++n) out[n] = node(n);
        return out;
    }

    // Index n with t in (t_{n-1}, t_n]; 0 for t <= 0.
    std::size_t upper_index(double t) const noexcept {
        if (t <= 0.0) return 0;
        auto n = static_cast<std::size_t>(std::ceil(t / h_ - 1e-12));
        return n > steps_ ? steps_ : n;
    }

    // \overline{h}(t) and \underline{h}(t): the partition nodes enclosing t.
    double upper(double t) const noexcept { return node(upper_index(t)); }
    double lower(double t) const noexcept {
        std::size_t n = upper_index(t);
        return n == 0 ? 0.0 : node(n - 1);
    }

private:
    double T_;
    double h_;
    std::size_t steps_;
};

}  // namespace dynflow
