#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

namespace kgmpc {

using cplx = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;

/// Error raised by malformed or inconsistent configuration input.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Error raised when a simulation state leaves its guard band.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, double t) : std::runtime_error(what), time(t) {}
    double time = 0.0;
};

/// Error raised by a failed algebraic network solve.
struct NetworkError : std::runtime_error {
    NetworkError(const std::string& what, double res = 0.0) : std::runtime_error(what), residual(res) {}
    double residual = 0.0;
};

/// Error raised on corrupted or truncated persisted artifacts.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Mismatched vector/matrix dimensions in a public interface.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Smallest representable angle difference, wrapped into (-pi, pi].
inline double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * kPi);
    return w <= -kPi ? w + 2.0 * kPi : w;
}

}  // namespace kgmpc
