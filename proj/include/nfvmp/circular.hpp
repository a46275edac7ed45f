#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace nfvmp {

using cplx = std::complex<double>;

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double x) {
    double y = std::fmod(x + kPi, 2.0 * kPi);
    if (y < 0.0) y += 2.0 * kPi;
    return y - kPi;
}

/// Von Mises law in natural parameterization eta = kappa * exp(j mu).
struct VonMisesParam {
    cplx eta{0.0, 0.0};

    static VonMisesParam from_polar(double kappa, double mu) { return {std::polar(kappa, mu)}; }
    double kappa() const { return std::abs(eta); }
    double mu() const { return kappa() > 0.0 ? wrap_angle(std::arg(eta)) : 0.0; }
    bool uniform() const { return eta == cplx(0.0, 0.0); }
};

namespace detail {

// Large-argument expansion of I_nu(x) e^{-x} sqrt(2 pi x), returned termwise.
inline double hankel_scaled(int nu, double x) {
    const double mu4 = 4.0 * nu * nu;
    double term = 1.0, sum = 1.0;
    for (int j = 1; j <= 30; ++j) {
        const double odd = 2.0 * j - 1.0;
        term *= -(mu4 - odd * odd) / (8.0 * j * x);
        sum += term;
        if (std::abs(term) < 1e-18 * std::abs(sum)) break;
    }
    return sum;
}

// 1 - I_1(x)/I_0(x) by the large-argument expansion, without cancellation.
inline double hankel_one_minus_a1(double x) {
    double t0 = 1.0, t1 = 1.0, s0 = 1.0, diff = 0.0;
    for (int j = 1; j <= 30; ++j) {
        const double odd = 2.0 * j - 1.0;
        t0 *= -(0.0 - odd * odd) / (8.0 * j * x);
        t1 *= -(4.0 - odd * odd) / (8.0 * j * x);
        s0 += t0;
        diff += t0 - t1;
        if (std::abs(t0) + std::abs(t1) < 1e-19 * s0) break;
    }
    return diff / s0;
}

inline double hankel_threshold(int K) { return std::max(1000.0, 400.0 * double(K) * double(K)); }

}  // namespace detail

/// Ratios I_k(kappa)/I_0(kappa) for k = 0..K-1.
inline std::vector<double> bessel_ratios(double kappa, int K) {
    std::vector<double> out(std::max(K, 0), 0.0);
    if (K <= 0) return out;
    out[0] = 1.0;
    if (!(kappa > 0.0)) return out;
    if (!std::isfinite(kappa)) {
        std::fill(out.begin(), out.end(), 1.0);
        return out;
    }
    if (kappa >= detail::hankel_threshold(K)) {
        const double s0 = detail::hankel_scaled(0, kappa);
        for (int k = 1; k < K; ++k) out[k] = detail::hankel_scaled(k, kappa) / s0;
        return out;
    }
    // Miller backward recurrence I_{n-1} = (2n/x) I_n + I_{n+1}.
    const int N = int(std::ceil(std::sqrt(double(K) * K + 80.0 * kappa))) + 30;
    double ip1 = 0.0, i = 1e-30;
    for (int n = N; n >= 1; --n) {
        const double im1 = (2.0 * n / kappa) * i + ip1;
        ip1 = i;
        i = im1;
        if (n - 1 < K) out[n - 1] = i;
        if (i > 1e250) {
            i *= 1e-250;
            ip1 *= 1e-250;
            for (int k = n - 1; k < K; ++k) out[k] *= 1e-250;
        }
    }
    const double i0 = out[0];
    for (int k = 0; k < K; ++k) out[k] /= i0;
    out[0] = 1.0;
    return out;
}

inline double bessel_ratio(int k, double kappa) {
    k = std::abs(k);
    return bessel_ratios(kappa, k + 1)[k];
}

/// A(kappa) = I_1/I_0.
inline double a_func(double kappa) { return bessel_ratio(1, kappa); }

/// 1 - A(kappa), accurate for large kappa.
inline double one_minus_a(double kappa) {
    if (kappa >= 1000.0) return detail::hankel_one_minus_a1(kappa);
    return 1.0 - a_func(kappa);
}

/// log(I_0(kappa) e^{-kappa}).
inline double log_i0_scaled(double kappa) {
    if (kappa < 30.0) {
        const double q = kappa * kappa / 4.0;
        double term = 1.0, sum = 1.0;
        for (int j = 1; j < 200; ++j) {
            term *= q / (double(j) * j);
            sum += term;
            if (term < 1e-17 * sum) break;
        }
        return std::log(sum) - kappa;
    }
    return std::log(detail::hankel_scaled(0, kappa)) - 0.5 * std::log(2.0 * kPi * kappa);
}

/// Solves 1 - A(kappa) = s for kappa, s in (0, 1].
inline double a_inverse_complement(double s) {
    if (!(s > 0.0)) throw Error("degenerate concentration");
    if (s >= 1.0) return 0.0;
    const double r = 1.0 - s;
    double kappa = (r < 0.9) ? r * (2.0 - r * r) / (1.0 - r * r) : 1.0 / (2.0 * s);
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 100; ++it) {
        const double eps = one_minus_a(kappa);
        const double g = eps - s;  // decreasing in kappa
        if (g > 0.0) lo = kappa; else hi = kappa;
        if (std::abs(g) <= 1e-15 * s) break;
        // A'(kappa) = 1 - A/kappa - A^2, rewritten in eps to limit cancellation.
        const double dA = 2.0 * eps - eps * eps - (1.0 - eps) / kappa;
        double next = (dA > 0.0) ? kappa + g / dA : 0.5 * (lo + hi);
        if (!(next > lo) || !(next < hi) || !std::isfinite(next))
            next = std::isfinite(hi) ? 0.5 * (lo + hi) : 2.0 * kappa + 1.0;
        if (std::abs(next - kappa) <= 1e-15 * kappa) {
            kappa = next;
            break;
        }
        kappa = next;
    }
    return kappa;
}

/// Inverse of A on [0, 1).
inline double a_inverse(double r) {
    if (!(r >= 0.0) || r >= 1.0) throw Error("degenerate concentration");
    if (r == 0.0) return 0.0;
    return a_inverse_complement(1.0 - r);
}

inline VonMisesParam vm_product(const VonMisesParam& a, const VonMisesParam& b) { return {a.eta + b.eta}; }

inline VonMisesParam vm_divide(const VonMisesParam& a, const VonMisesParam& b) {
    const cplx d = a.eta - b.eta;
    if (std::abs(d) <= 1e-14 * (std::abs(a.eta) + std::abs(b.eta))) return {};
    return {d};
}

/// E[exp(j k x)] under the law p.
inline cplx vm_moment(const VonMisesParam& p, int k) {
    if (k == 0) return 1.0;
    const double a = bessel_ratio(std::abs(k), p.kappa());
    return std::polar(a, k * p.mu());
}

/// Moments for k = 0..K-1.
inline std::vector<cplx> vm_moments(const VonMisesParam& p, int K) {
    const std::vector<double> a = bessel_ratios(p.kappa(), K);
    const double mu = p.mu();
    std::vector<cplx> out(K);
    for (int k = 0; k < K; ++k) out[k] = std::polar(a[k], k * mu);
    return out;
}

inline double vm_pdf(const VonMisesParam& p, double x) {
    const double kappa = p.kappa();
    if (kappa == 0.0) return 1.0 / (2.0 * kPi);
    return std::exp(kappa * (std::cos(x - p.mu()) - 1.0) - log_i0_scaled(kappa)) / (2.0 * kPi);
}

/// Circular standard deviation sqrt(-2 log A(kappa)).
inline double vm_circular_std(const VonMisesParam& p) {
    const double s = one_minus_a(p.kappa());
    return std::sqrt(-2.0 * std::log1p(-s));
}

}  // namespace nfvmp
