#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "error.hpp"

namespace nfvmp {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline constexpr double kSpeedOfLight = 299792458.0;
inline constexpr double kPi = std::numbers::pi;

/// Transmit/receive XL-ULA layout. Indices m, n, i, j are zero-based.
struct ArrayConfig {
    int n_tx = 64;
    int n_rx = 64;
    int m_sub = 16;
    double d_spacing = 0.0;
    double d0 = 1.0;
    double lambda = 0.0;

    static ArrayConfig from_carrier(int n_tx, int n_rx, int m_sub, double fc, double d0 = 1.0) {
        ArrayConfig c;
        c.n_tx = n_tx;
        c.n_rx = n_rx;
        c.m_sub = m_sub;
        c.lambda = kSpeedOfLight / fc;
        c.d_spacing = c.lambda / 2.0;
        c.d0 = d0;
        return c;
    }

    int k_t() const { return n_tx / m_sub; }
    int k_r() const { return n_rx / m_sub; }
    int pairs() const { return k_t() * k_r(); }

    /// Electrical-angle scale 2*pi*d/lambda.
    double chi() const { return 2.0 * kPi * d_spacing / lambda; }

    void validate() const {
        if (m_sub <= 0 || n_tx <= 0 || n_rx <= 0) throw ConfigError("antenna counts must be positive");
        if (n_tx % m_sub != 0 || n_rx % m_sub != 0)
            throw ConfigError("antenna counts must be multiples of the subarray size");
        if (!(lambda > 0.0)) throw ConfigError("wavelength must be positive");
        if (!(d_spacing > 0.0)) throw ConfigError("element spacing must be positive");
        if (!(d0 >= 0.0)) throw ConfigError("array separation must be non-negative");
    }

    Vec2 tx_antenna(int i) const { return {d0 / 2.0 + i * d_spacing, 0.0}; }
    Vec2 rx_antenna(int j) const { return {-d0 / 2.0 - j * d_spacing, 0.0}; }
    Vec2 tx_ref(int m) const { return {d0 / 2.0 + m * m_sub * d_spacing, 0.0}; }
    Vec2 rx_ref(int n) const { return {-d0 / 2.0 - n * m_sub * d_spacing, 0.0}; }
};

struct PulseConfig {
    double pri = 10e-6;
    int n_pulses = 100;
    double fc = 28e9;
    double bandwidth = 200e6;

    void validate() const {
        if (!(pri > 0.0)) throw ConfigError("pri must be positive");
        if (n_pulses < 2) throw ConfigError("n_pulses must be at least 2");
        if (!(fc > 0.0)) throw ConfigError("fc must be positive");
        if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
    }
};

struct TargetState {
    Vec2 p0{15.0, 20.7};
    Vec2 v0{10.0, 10.2};
};

struct SubarrayAngles {
    std::vector<double> theta_tilde;  // physical DoD per transmit subarray
    std::vector<double> phi_tilde;    // physical DoA per receive subarray
    std::vector<double> theta;        // electrical, chi * sin(theta_tilde)
    std::vector<double> phi;
};

namespace detail {
inline double checked_range(const Vec2& a, const Vec2& b) {
    const double r = (a - b).norm();
    if (!(r > 0.0)) throw Error("zero range between target and antenna");
    return r;
}
}  // namespace detail

inline SubarrayAngles subarray_angles(const ArrayConfig& cfg, const Vec2& p0) {
    if (p0.y() == 0.0) throw Error("target in array plane");
    SubarrayAngles a;
    const double chi = cfg.chi();
    for (int m = 0; m < cfg.k_t(); ++m) {
        const Vec2 pm = cfg.tx_ref(m);
        const double t = std::atan((p0.x() - pm.x()) / (p0.y() - pm.y()));
        a.theta_tilde.push_back(t);
        a.theta.push_back(chi * std::sin(t));
    }
    for (int n = 0; n < cfg.k_r(); ++n) {
        const Vec2 pn = cfg.rx_ref(n);
        const double t = std::atan((p0.x() - pn.x()) / (p0.y() - pn.y()));
        a.phi_tilde.push_back(t);
        a.phi.push_back(chi * std::sin(t));
    }
    return a;
}

struct UnitVectors {
    Vec2 e_t;
    Vec2 e_r;
};

/// Line-of-sight unit vectors pointing from the target to the subarray references.
inline UnitVectors unit_vectors(const ArrayConfig& cfg, const Vec2& p0, int m, int n) {
    const Vec2 dt = cfg.tx_ref(m) - p0;
    const Vec2 dr = cfg.rx_ref(n) - p0;
    return {dt / detail::checked_range(cfg.tx_ref(m), p0), dr / detail::checked_range(cfg.rx_ref(n), p0)};
}

/// Bistatic Doppler in Hz for the (m, n) subarray pair: minus the range-sum rate over lambda,
/// so a closing target has positive Doppler.
inline double bistatic_doppler(const ArrayConfig& cfg, const TargetState& target, int m, int n) {
    const UnitVectors u = unit_vectors(cfg, target.p0, m, n);
    return (u.e_t.dot(target.v0) + u.e_r.dot(target.v0)) / cfg.lambda;
}

inline double bistatic_delay(const ArrayConfig& cfg, const Vec2& p0, int m, int n) {
    return (detail::checked_range(cfg.tx_ref(m), p0) + detail::checked_range(cfg.rx_ref(n), p0)) /
           kSpeedOfLight;
}

inline double rayleigh_distance(const ArrayConfig& cfg) {
    const double dd = cfg.d_spacing * cfg.d_spacing;
    const double rt = 2.0 * (cfg.n_tx - 1.0) * (cfg.n_tx - 1.0) * dd / cfg.lambda;
    const double rr = 2.0 * (cfg.n_rx - 1.0) * (cfg.n_rx - 1.0) * dd / cfg.lambda;
    return std::min(rt, rr);
}

inline double subarray_rayleigh(const ArrayConfig& cfg) {
    return 2.0 * (cfg.m_sub - 1.0) * (cfg.m_sub - 1.0) * cfg.d_spacing * cfg.d_spacing / cfg.lambda;
}

/// True when every bistatic range sum is below twice the full-array Rayleigh distance.
inline bool in_near_field(const ArrayConfig& cfg, const Vec2& p0) {
    const double r = rayleigh_distance(cfg);
    for (int m = 0; m < cfg.k_t(); ++m)
        for (int n = 0; n < cfg.k_r(); ++n)
            if ((cfg.tx_ref(m) - p0).norm() >= r || (cfg.rx_ref(n) - p0).norm() >= r) return false;
    return true;
}

inline void validate_target(const TargetState& t) {
    if (!(t.p0.y() > 0.0)) throw ConfigError("target must lie in front of the arrays (p0_y > 0)");
    if (!t.p0.allFinite() || !t.v0.allFinite()) throw ConfigError("target state must be finite");
}

}  // namespace nfvmp
