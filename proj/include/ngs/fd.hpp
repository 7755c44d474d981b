#pragma once

#include <cmath>
#include <functional>

#include "ngs/core.hpp"

namespace ngs::fd {

/// Central difference of a scalar function of a scalar.
template <typename Fn>
double derivative(Fn&& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Central second difference of a scalar function of a scalar.
template <typename Fn>
double second_derivative(Fn&& f, double x, double h) {
    return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

/// Richardson-extrapolated central difference: combines steps h and h/2.
template <typename Fn>
double derivative_richardson(Fn&& f, double x, double h) {
    const double d1 = derivative(f, x, h);
    const double d2 = derivative(f, x, 0.5 * h);
    return (4.0 * d2 - d1) / 3.0;
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_error(double a, double b, double floor = 1e-9) {
    const double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

/// Max relative entry error between two stacks of values via callbacks.
template <typename GetA, typename GetB>
double max_rel_error(int n, GetA&& a, GetB&& b, double floor = 1e-9) {
    double worst = 0.0;
    for (int i = 0; i < n; ++i) worst = std::max(worst, rel_error(a(i), b(i), floor));
    return worst;
}

}  // namespace ngs::fd
