#pragma once

#include <cmath>
#include <stdexcept>

namespace srpl {

struct ScalarMinimum {
    double x = 0.0;
    double value = 0.0;
    int iterations = 0;
};

/// Golden-section search for a minimum of `f` on [lo, hi]. Stops once the
/// bracket is narrower than `tolerance`; converges to a local minimum when f
/// is not unimodal on the interval.
template <class F>
ScalarMinimum golden_section_minimize(F&& f, double lo, double hi, double tolerance, int max_iterations = 200) {
    if (!(lo < hi) || !(tolerance > 0.0)) throw std::invalid_argument("golden_section_minimize: bad interval");
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo;
    double b = hi;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = f(c);
    double fd = f(d);
    int it = 0;
    for (; it < max_iterations && (b - a) > tolerance; ++it) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    const double x = 0.5 * (a + b);
    const double fx = f(x);
    // The midpoint can be worse than the best interior probe on a flat bracket.
    if (fc < fx && fc <= fd) return {c, fc, it};
    if (fd < fx) return {d, fd, it};
    return {x, fx, it};
}

}  // namespace srpl
