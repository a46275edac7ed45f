#pragma once

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "circular.hpp"
#include "error.hpp"
#include "wavefield.hpp"

namespace nfvmp {

struct VmPriors {
    VonMisesParam theta;
    VonMisesParam phi;
    VonMisesParam f;
    double varsigma = 1e6;
};

/// Residual form is the positive-definite expected residual power; verbatim keeps the printed sign and prefactor.
enum class SigmaForm { residual, verbatim };

struct CaviOptions {
    int max_iters = 50;
    double eps = 1e-6;
    double kappa_init = 1.0;
    SigmaForm sigma_form = SigmaForm::residual;
    double sigma_floor = 1e-12;
    bool theta_first = false;  // angle update order within a sweep
};

struct SubarrayPosterior {
    int m = 0;
    int n = 0;
    VonMisesParam eta_theta;
    VonMisesParam eta_phi;
    VonMisesParam eta_f;  // over normalized Doppler 2 pi T f
    cplx beta_mean{0.0, 0.0};
    double beta_var = 0.0;
    double sigma_hat = 1.0;
    double varsigma_hat = 1e6;
    int n_iters = 0;
    bool converged = false;
    std::vector<double> elbo;
};

/// g(x) = Re sum_k coeffs[k] exp(j k x); coeffs[0] is ignored.
struct HarmonicObjective {
    std::vector<cplx> coeffs;

    int K() const { return int(coeffs.size()); }

    void eval(double x, double& g, double& g1, double& g2) const {
        g = g1 = g2 = 0.0;
        const cplx step = std::polar(1.0, x);
        cplx e = step;
        for (int k = 1; k < K(); ++k) {
            const cplx t = coeffs[k] * e;
            g += t.real();
            g1 -= k * t.imag();
            g2 -= double(k) * k * t.real();
            e *= step;
            if ((k & 31) == 0) e /= std::abs(e);
        }
    }
    double value(double x) const {
        double g, g1, g2;
        eval(x, g, g1, g2);
        return g;
    }

    /// g on the uniform grid 2 pi i / N.
    std::vector<double> on_grid(int N) const {
        std::vector<cplx> in(N, cplx(0.0, 0.0)), out;
        for (int k = 1; k < K(); ++k) in[k % N] += coeffs[k];
        Eigen::FFT<double> fft;
        fft.inv(out, in);
        std::vector<double> g(N);
        for (int i = 0; i < N; ++i) g[i] = out[i].real() * N;
        return g;
    }
};

enum class Axis { phi, theta, f };
enum class Permutation { P1, P2 };

/// P1: (i_t, i_r, l) order. P2: (l, i_r, i_t) order.
inline VecC rearrange(const SubarraySnapshot& s, Permutation which) {
    s.validate();
    const int M = s.M, L = s.L;
    VecC out(s.data.size());
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t)
            for (int l = 0; l < L; ++l) {
                const Eigen::Index src = (Eigen::Index(r) * M + t) * L + l;
                const Eigen::Index dst = which == Permutation::P1 ? (Eigen::Index(t) * M + r) * L + l
                                                                  : (Eigen::Index(l) * M + r) * M + t;
                out[dst] = s.data[src];
            }
    return out;
}

/// Snapshot with transmit and receive roles exchanged (P1 applied).
inline SubarraySnapshot swap_roles(const SubarraySnapshot& s) {
    SubarraySnapshot o = s;
    o.data = rearrange(s, Permutation::P1);
    std::swap(o.m, o.n);
    return o;
}

namespace detail {

inline int grid_size(int K) {
    int n = 64;
    while (n < 8 * K) n *= 2;
    return n;
}

struct Moments {
    std::vector<cplx> ar, at, dd;  // E a_r, E a_t, E d (d entries exp(-j l f))
};

inline Moments moments_of(const SubarrayPosterior& p, int M, int L) {
    Moments mo;
    mo.ar = vm_moments(p.eta_phi, M);
    mo.at = vm_moments(p.eta_theta, M);
    mo.dd = vm_moments(p.eta_f, L);
    for (cplx& c : mo.dd) c = std::conj(c);
    return mo;
}

inline double norm2(const std::vector<cplx>& v) {
    double s = 0.0;
    for (const cplx& c : v) s += std::norm(c);
    return s;
}

// Y[r*M+t] = sum_l conj(z) dd[l]
inline std::vector<cplx> contract_l(const SubarraySnapshot& s, const std::vector<cplx>& dd) {
    const int M = s.M, L = s.L;
    std::vector<cplx> Y(std::size_t(M) * M);
    const cplx* z = s.data.data();
    for (int rt = 0; rt < M * M; ++rt) {
        cplx acc = 0.0;
        const cplx* zz = z + std::size_t(rt) * L;
        for (int l = 0; l < L; ++l) acc += std::conj(zz[l]) * dd[l];
        Y[rt] = acc;
    }
    return Y;
}

// X[l] = sum_{r,t} conj(z) ar[r] at[t]
inline std::vector<cplx> contract_rt(const SubarraySnapshot& s, const std::vector<cplx>& ar,
                                     const std::vector<cplx>& at) {
    const int M = s.M, L = s.L;
    std::vector<cplx> X(L, cplx(0.0, 0.0));
    const cplx* z = s.data.data();
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t) {
            const cplx w = ar[r] * at[t];
            const cplx* zz = z + (std::size_t(r) * M + t) * L;
            for (int l = 0; l < L; ++l) X[l] += std::conj(zz[l]) * w;
        }
    return X;
}

inline HarmonicObjective phi_objective(const std::vector<cplx>& Y, const std::vector<cplx>& at, int M, cplx scale,
                                       const VonMisesParam& prior) {
    HarmonicObjective h;
    h.coeffs.assign(std::max(M, 2), cplx(0.0, 0.0));
    for (int r = 1; r < M; ++r) {
        cplx acc = 0.0;
        for (int t = 0; t < M; ++t) acc += Y[std::size_t(r) * M + t] * at[t];
        h.coeffs[r] = scale * acc;
    }
    h.coeffs[1] += std::conj(prior.eta);
    return h;
}

inline HarmonicObjective theta_objective(const std::vector<cplx>& Y, const std::vector<cplx>& ar, int M, cplx scale,
                                         const VonMisesParam& prior) {
    HarmonicObjective h;
    h.coeffs.assign(std::max(M, 2), cplx(0.0, 0.0));
    for (int t = 1; t < M; ++t) {
        cplx acc = 0.0;
        for (int r = 0; r < M; ++r) acc += Y[std::size_t(r) * M + t] * ar[r];
        h.coeffs[t] = scale * acc;
    }
    h.coeffs[1] += std::conj(prior.eta);
    return h;
}

inline HarmonicObjective f_objective(const std::vector<cplx>& X, int L, cplx scale, const VonMisesParam& prior) {
    HarmonicObjective h;
    h.coeffs.assign(std::max(L, 2), cplx(0.0, 0.0));
    for (int l = 1; l < L; ++l) h.coeffs[l] = std::conj(scale * X[l]);
    h.coeffs[1] += std::conj(prior.eta);
    return h;
}

// Periodogram P(x) = sum over fibers |sum_k z_k w_k(x)|^2 and its first two derivatives.
inline void periodogram_eval(const SubarraySnapshot& s, Axis axis, double x, double& P, double& P1, double& P2) {
    const int M = s.M, L = s.L;
    const int K = axis == Axis::f ? L : M;
    const double sgn = axis == Axis::f ? 1.0 : -1.0;  // matched-filter exponent sign
    std::vector<cplx> w(K);
    for (int k = 0; k < K; ++k) w[k] = std::polar(1.0, sgn * k * x);
    P = P1 = P2 = 0.0;
    const int fibers = int(s.data.size()) / K;
    for (int fi = 0; fi < fibers; ++fi) {
        cplx a = 0.0, a1 = 0.0, a2 = 0.0;
        for (int k = 0; k < K; ++k) {
            Eigen::Index idx;
            if (axis == Axis::f) {
                idx = Eigen::Index(fi) * L + k;
            } else if (axis == Axis::phi) {
                idx = (Eigen::Index(k) * M + fi / L) * L + fi % L;
            } else {
                idx = (Eigen::Index(fi / L) * M + k) * L + fi % L;
            }
            const cplx t = s.data[idx] * w[k];
            const cplx jk(0.0, sgn * k);
            a += t;
            a1 += jk * t;
            a2 += jk * jk * t;
        }
        P += std::norm(a);
        P1 += 2.0 * std::real(std::conj(a) * a1);
        P2 += 2.0 * (std::norm(a1) + std::real(std::conj(a) * a2));
    }
}

// Newton refinement of a grid peak, kept inside the neighbouring cells.
inline double refine_periodogram_peak(const SubarraySnapshot& s, Axis axis, double x0, double h) {
    double x = x0, P, P1, P2;
    periodogram_eval(s, axis, x, P, P1, P2);
    for (int it = 0; it < 8 && P2 < 0.0; ++it) {
        double step = std::clamp(-P1 / P2, -h, h);
        double Pn, P1n, P2n;
        periodogram_eval(s, axis, x + step, Pn, P1n, P2n);
        if (Pn < P || std::abs(x + step - x0) > h) break;
        x += step;
        P = Pn;
        P1 = P1n;
        P2 = P2n;
        if (std::abs(step) < 1e-12) break;
    }
    return wrap_angle(x);
}

// Peak of the beamforming periodogram along one Kronecker axis (grid of 4K points).
inline double periodogram_peak(const SubarraySnapshot& s, Axis axis) {
    const int M = s.M, L = s.L;
    const int K = axis == Axis::f ? L : M;
    const int N = std::max(4 * K, 8);
    const int fibers = int(s.data.size()) / K;
    std::vector<double> power(N, 0.0);
    std::vector<cplx> in(N), out;
    Eigen::FFT<double> fft;
    for (int fi = 0; fi < fibers; ++fi) {
        std::fill(in.begin(), in.end(), cplx(0.0, 0.0));
        for (int k = 0; k < K; ++k) {
            Eigen::Index idx;
            if (axis == Axis::f) {
                idx = Eigen::Index(fi) * L + k;
            } else if (axis == Axis::phi) {
                const int t = fi / L, l = fi % L;
                idx = (Eigen::Index(k) * M + t) * L + l;
            } else {
                const int r = fi / L, l = fi % L;
                idx = (Eigen::Index(r) * M + k) * L + l;
            }
            in[k] = s.data[idx];
        }
        // Angles use exp(+j k x) steering, Doppler uses exp(-j l x); matched filters are the conjugates.
        if (axis == Axis::f) fft.inv(out, in); else fft.fwd(out, in);
        for (int i = 0; i < N; ++i) power[i] += std::norm(out[i]);
    }
    const int best = int(std::max_element(power.begin(), power.end()) - power.begin());
    return refine_periodogram_peak(s, axis, 2.0 * kPi * best / N, 2.0 * kPi / N);
}

}  // namespace detail

/// Conjugate parameters of the chosen axis given the other factors of `current`.
inline HarmonicObjective conjugate_params(const SubarraySnapshot& s, Axis which, const SubarrayPosterior& current,
                                          double sigma, const VmPriors& priors = {}) {
    s.validate();
    const detail::Moments mo = detail::moments_of(current, s.M, s.L);
    const cplx scale = (2.0 / sigma) * current.beta_mean;
    if (which == Axis::f) {
        return detail::f_objective(detail::contract_rt(s, mo.ar, mo.at), s.L, scale, priors.f);
    }
    const std::vector<cplx> Y = detail::contract_l(s, mo.dd);
    if (which == Axis::phi) return detail::phi_objective(Y, mo.at, s.M, scale, priors.phi);
    return detail::theta_objective(Y, mo.ar, s.M, scale, priors.theta);
}

/// Global grid maximum, Newton refinement, and the concentration from the curvature.
inline VonMisesParam vm_update(const HarmonicObjective& obj) {
    if (obj.K() < 2) throw Error("empty harmonic objective");
    const int N = detail::grid_size(obj.K());
    const std::vector<double> grid = obj.on_grid(N);
    const int best = int(std::max_element(grid.begin(), grid.end()) - grid.begin());
    const double h = 2.0 * kPi / N;
    double x = 2.0 * kPi * best / N;
    double g, g1, g2;
    obj.eval(x, g, g1, g2);
    const double x0 = x;
    for (int it = 0; it < 20; ++it) {
        double step = (g2 < 0.0) ? -g1 / g2 : (g1 > 0.0 ? h / 4.0 : -h / 4.0);
        step = std::clamp(step, -h, h);
        double gn, g1n, g2n;
        double xn = x + step;
        obj.eval(xn, gn, g1n, g2n);
        int halvings = 0;
        while (gn < g && halvings < 40) {
            step *= 0.5;
            xn = x + step;
            obj.eval(xn, gn, g1n, g2n);
            ++halvings;
        }
        if (gn < g || std::abs(xn - x0) > h) break;
        x = xn;
        g = gn;
        g1 = g1n;
        g2 = g2n;
        if (std::abs(step) < 1e-15) break;
    }
    if (!(g2 < 0.0)) throw Error("saddle or flat objective");
    const double xhat = x - g1 / g2;
    const double kappa = a_inverse_complement(-std::expm1(1.0 / (2.0 * g2)));
    return VonMisesParam::from_polar(kappa, wrap_angle(xhat));
}

struct BetaUpdate {
    cplx mean;
    double var;
    double mu_norm2;
    cplx mu_h_z;
};

inline BetaUpdate beta_update(const SubarraySnapshot& s, const SubarrayPosterior& current, double sigma,
                              double varsigma) {
    s.validate();
    const detail::Moments mo = detail::moments_of(current, s.M, s.L);
    const std::vector<cplx> X = detail::contract_rt(s, mo.ar, mo.at);
    cplx acc = 0.0;
    for (int l = 0; l < s.L; ++l) acc += X[l] * mo.dd[l];
    const cplx muhz = std::conj(acc);
    const double mu2 = detail::norm2(mo.ar) * detail::norm2(mo.at) * detail::norm2(mo.dd);
    const double den = sigma + varsigma * mu2;
    return {varsigma * muhz / den, varsigma * sigma / (2.0 * den), mu2, muhz};
}

struct HyperUpdate {
    double sigma_hat;
    double varsigma_hat;
};

inline HyperUpdate hyper_update_from(double z2, cplx muhz, double mu2, const SubarrayPosterior& cur, double N,
                                     SigmaForm form, double floor) {
    double sig;
    if (form == SigmaForm::residual) {
        sig = (z2 - 2.0 * std::real(std::conj(cur.beta_mean) * muhz) + N * (cur.beta_var + std::norm(cur.beta_mean))) / N;
    } else {
        sig = 2.0 / N *
              (z2 + 2.0 * std::real(cur.beta_mean * std::conj(muhz)) +
               mu2 * (cur.beta_var + std::norm(cur.beta_mean)));
    }
    return {std::max(sig, floor), cur.beta_var + std::norm(cur.beta_mean)};
}

inline HyperUpdate hyper_update(const SubarraySnapshot& s, const SubarrayPosterior& current,
                                SigmaForm form = SigmaForm::residual, double floor = 1e-12) {
    const BetaUpdate b = beta_update(s, current, 1.0, 1.0);
    return hyper_update_from(s.data.squaredNorm(), b.mu_h_z, b.mu_norm2, current, double(s.data.size()), form, floor);
}

namespace detail {

inline double vm_kl(const VonMisesParam& q, const VonMisesParam& p) {
    // kappa A - log I0(kappa) = -kappa (1 - A) - log(I0 e^{-kappa})
    const double kq = q.kappa(), kp = p.kappa();
    const double a = one_minus_a(kq);
    const cplx mq = std::polar(1.0 - a, q.mu());
    return -kq * a - log_i0_scaled(kq) - std::real(std::conj(p.eta) * mq) + kp + log_i0_scaled(kp);
}

}  // namespace detail

/// Evidence lower bound of the mean-field posterior with the current hyperparameters.
inline double elbo(double z2, cplx muhz, double N, const SubarrayPosterior& p, const VmPriors& priors,
                   double varsigma_prior) {
    const double e_b2 = p.beta_var + std::norm(p.beta_mean);
    const double resid = z2 - 2.0 * std::real(std::conj(p.beta_mean) * muhz) + N * e_b2;
    double v = -N * std::log(kPi * p.sigma_hat) - resid / p.sigma_hat;
    v += -std::log(kPi * varsigma_prior) - e_b2 / varsigma_prior + std::log(kPi * std::exp(1.0) * p.beta_var);
    v -= detail::vm_kl(p.eta_theta, priors.theta) + detail::vm_kl(p.eta_phi, priors.phi) +
         detail::vm_kl(p.eta_f, priors.f);
    return v;
}

namespace detail {

inline std::vector<double> xi_of(const SubarrayPosterior& p) {
    return {p.eta_theta.eta.real(), p.eta_theta.eta.imag(), p.eta_phi.eta.real(), p.eta_phi.eta.imag(),
            p.eta_f.eta.real(),     p.eta_f.eta.imag(),     p.beta_mean.real(),   p.beta_mean.imag(),
            p.beta_var,             p.sigma_hat};
}

inline void check_finite(const SubarrayPosterior& p, int iter) {
    for (double v : xi_of(p))
        if (!std::isfinite(v)) throw Error("non-finite CAVI update at iteration " + std::to_string(iter));
}

}  // namespace detail

/// Coordinate-ascent VI for one subarray pair; update order phi, theta, f, beta, hyperparameters
/// (theta before phi with `theta_first`).
inline SubarrayPosterior run_cavi(const SubarraySnapshot& s, const VmPriors& priors = {},
                                  const CaviOptions& opts = {}) {
    s.validate();
    const int M = s.M, L = s.L;
    const double N = double(s.data.size());
    const double z2 = s.data.squaredNorm();

    SubarrayPosterior p;
    p.m = s.m;
    p.n = s.n;
    const double phi0 = detail::periodogram_peak(s, Axis::phi);
    const double th0 = detail::periodogram_peak(s, Axis::theta);
    const double f0 = detail::periodogram_peak(s, Axis::f);
    {
        const VecC mu0 = kron_steering(phi0, th0, f0, M, L);
        const cplx proj = mu0.dot(s.data);  // mu0^H z
        p.beta_mean = proj / N;
        p.sigma_hat = std::max((z2 - std::norm(proj) / N) / N, opts.sigma_floor);
    }
    p.eta_phi = VonMisesParam::from_polar(opts.kappa_init, phi0);
    p.eta_theta = VonMisesParam::from_polar(opts.kappa_init, th0);
    p.eta_f = VonMisesParam::from_polar(opts.kappa_init, f0);
    p.varsigma_hat = priors.varsigma;
    double varsigma = priors.varsigma;

    std::vector<double> xi_prev = detail::xi_of(p);
    for (int it = 1; it <= opts.max_iters; ++it) {
        const cplx scale = (2.0 / p.sigma_hat) * p.beta_mean;
        std::vector<cplx> dd = vm_moments(p.eta_f, L);
        for (cplx& c : dd) c = std::conj(c);
        const std::vector<cplx> Y = detail::contract_l(s, dd);

        std::vector<cplx> at, ar;
        if (opts.theta_first) {
            ar = vm_moments(p.eta_phi, M);
            p.eta_theta = vm_update(detail::theta_objective(Y, ar, M, scale, priors.theta));
            at = vm_moments(p.eta_theta, M);
            p.eta_phi = vm_update(detail::phi_objective(Y, at, M, scale, priors.phi));
            ar = vm_moments(p.eta_phi, M);
        } else {
            at = vm_moments(p.eta_theta, M);
            p.eta_phi = vm_update(detail::phi_objective(Y, at, M, scale, priors.phi));
            ar = vm_moments(p.eta_phi, M);
            p.eta_theta = vm_update(detail::theta_objective(Y, ar, M, scale, priors.theta));
            at = vm_moments(p.eta_theta, M);
        }

        const std::vector<cplx> X = detail::contract_rt(s, ar, at);
        p.eta_f = vm_update(detail::f_objective(X, L, scale, priors.f));
        dd = vm_moments(p.eta_f, L);
        for (cplx& c : dd) c = std::conj(c);

        cplx acc = 0.0;
        for (int l = 0; l < L; ++l) acc += X[l] * dd[l];
        const cplx muhz = std::conj(acc);
        const double mu2 = detail::norm2(ar) * detail::norm2(at) * detail::norm2(dd);
        const double den = p.sigma_hat + varsigma * mu2;
        p.beta_mean = varsigma * muhz / den;
        p.beta_var = varsigma * p.sigma_hat / (2.0 * den);

        const HyperUpdate hu = hyper_update_from(z2, muhz, mu2, p, N, opts.sigma_form, opts.sigma_floor);
        p.sigma_hat = hu.sigma_hat;
        p.elbo.push_back(elbo(z2, muhz, N, p, priors, varsigma));
        varsigma = hu.varsigma_hat;
        p.varsigma_hat = varsigma;
        p.n_iters = it;
        detail::check_finite(p, it);

        const std::vector<double> xi = detail::xi_of(p);
        double d2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < xi.size(); ++i) {
            d2 += (xi[i] - xi_prev[i]) * (xi[i] - xi_prev[i]);
            n2 += xi_prev[i] * xi_prev[i];
        }
        xi_prev = xi;
        if (std::sqrt(d2) < opts.eps * std::max(1.0, std::sqrt(n2))) {
            p.converged = true;
            break;
        }
    }
    return p;
}

}  // namespace nfvmp
