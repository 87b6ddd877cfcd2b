// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mf/core.hpp"

namespace mf {

/// Interpolation path between data (t = 0) and noise (t = 1).
/// Only the linear schedule a_t = 1 - t, b_t = t exists.
struct FlowPath {
    enum class Schedule { linear };
    Schedule schedule = Schedule::linear;

    double a(double t) const { return 1.0 - t; }
    double b(double t) const { return t; }
};

/// z_t = (1 - t) x + t e.
inline Vec interpolate(const FlowPath& path, const Vec& x, const Vec& e, double t) {
    if (x.size() != e.size()) throw ContractError("interpolate: length mismatch");
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("interpolate: t must lie in [0, 1]");
    // Boundaries are returned exactly rather than through a*x + b*e.
    if (t == 0.0) return x;
    if (t == 1.0) return e;
    return path.a(t) * x + path.b(t) * e;
}

/// dz_t/dt along the linear path, e - x (independent of t).
inline Vec cond_velocity(const FlowPath&, const Vec& x, const Vec& e) {
    if (x.size() != e.size()) throw ContractError("cond_velocity: length mismatch");
    return e - x;
}

}  // namespace mf
