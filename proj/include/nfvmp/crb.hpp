#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"
#include "wavefield.hpp"

namespace nfvmp {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

/// independent: theta, phi, f treated as free coordinates of the mean signal.
/// verbatim_coupled: the printed derivative expressions with velocity-coupled tan terms and the printed Jacobian.
enum class DerivativeForm { independent, verbatim_coupled };

/// Index layout of rho = [theta (K_t), phi (K_r), f (K_t K_r), Re beta (K_t K_r), Im beta (K_t K_r)]
/// and eta = [x0, y0, vx, vy, Re beta, Im beta].
struct RhoLayout {
    int kt, kr;
    int P() const { return kt * kr; }
    int theta(int m) const { return m; }
    int phi(int n) const { return kt + n; }
    int f(int m, int n) const { return kt + kr + m * kr + n; }
    int re(int m, int n) const { return kt + kr + P() + m * kr + n; }
    int im(int m, int n) const { return kt + kr + 2 * P() + m * kr + n; }
    int dim() const { return kt + kr + 3 * P(); }
    int eta_dim() const { return 4 + 2 * P(); }
};

namespace detail {

// Derivative columns [theta, phi, f, Re beta, Im beta] of beta * a_r kron a_t kron d for one pair.
inline Eigen::MatrixXcd pair_derivatives(const ArrayConfig& cfg, const PulseConfig& pulse, const TargetState& tgt,
                                         cplx beta, int m, int n, DerivativeForm form) {
    const int M = cfg.m_sub, L = pulse.n_pulses;
    const SubarrayAngles ang = subarray_angles(cfg, tgt.p0);
    const double th = ang.theta[m], ph = ang.phi[n];
    const double f = bistatic_doppler(cfg, tgt, m, n);
    const double T = pulse.pri, lam = cfg.lambda;
    const double vx = tgt.v0.x(), vy = tgt.v0.y();
    const double tt = std::tan(ang.theta_tilde[m]), tp = std::tan(ang.phi_tilde[n]);
    const cplx j(0.0, 1.0);
    Eigen::MatrixXcd D(Eigen::Index(M) * M * L, 5);
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t) {
            const cplx sp = std::polar(1.0, r * ph + t * th);
            for (int l = 0; l < L; ++l) {
                const Eigen::Index k = (Eigen::Index(r) * M + t) * L + l;
                const double tl = l * T;
                const cplx a = sp * std::polar(1.0, -2.0 * kPi * f * tl);
                if (form == DerivativeForm::independent) {
                    D(k, 0) = j * double(t) * beta * a;
                    D(k, 1) = j * double(r) * beta * a;
                    D(k, 2) = -j * 2.0 * kPi * tl * beta * a;
                } else {
                    const double cpl = 2.0 * kPi * tl / lam;
                    D(k, 0) = j * beta * (double(t) * a + cpl * (tt * vx - vy) * a);
                    D(k, 1) = j * beta * (double(r) * a + cpl * (tp * vx - vy) * a);
                    D(k, 2) = j * beta *
                              (lam * double(r) / (vy - tp * vx) * a - 2.0 * kPi * tl * a +
                               lam * double(t) / (vy - tt * vx) * a);
                }
                D(k, 3) = a;
                D(k, 4) = j * a;
            }
        }
    return D;
}

}  // namespace detail

/// Fisher information of the intermediate parameters.
inline MatX fim_rho(const ArrayConfig& cfg, const PulseConfig& pulse, const TargetState& tgt, const ChannelGain& gains,
                    double sigma, DerivativeForm form = DerivativeForm::independent) {
    if (!(sigma > 0.0)) throw Error("noise variance must be positive");
    const RhoLayout lay{cfg.k_t(), cfg.k_r()};
    MatX F = MatX::Zero(lay.dim(), lay.dim());
    for (int m = 0; m < lay.kt; ++m)
        for (int n = 0; n < lay.kr; ++n) {
            const Eigen::MatrixXcd D = detail::pair_derivatives(cfg, pulse, tgt, gains.at(m, n), m, n, form);
            const MatX local = (2.0 / sigma) * (D.adjoint() * D).real();
            const int idx[5] = {lay.theta(m), lay.phi(n), lay.f(m, n), lay.re(m, n), lay.im(m, n)};
            for (int a = 0; a < 5; ++a)
                for (int b = 0; b < 5; ++b) F(idx[a], idx[b]) += local(a, b);
        }
    return 0.5 * (F + F.transpose());
}

/// Jacobian d rho / d eta.
inline MatX jacobian_psi(const ArrayConfig& cfg, const TargetState& tgt,
                         DerivativeForm form = DerivativeForm::independent) {
    const RhoLayout lay{cfg.k_t(), cfg.k_r()};
    MatX J = MatX::Zero(lay.dim(), lay.eta_dim());
    const Vec2 ex(1.0, 0.0);
    const Vec2& p0 = tgt.p0;
    const Vec2& v = tgt.v0;
    const double chi = cfg.chi(), lam = cfg.lambda;
    auto angle_row = [&](const Vec2& ref) -> Vec2 {
        const double r = (ref - p0).norm();
        const Vec2 e = (ref - p0) / r;  // target-to-array
        const Vec2 printed = (-ex + e.x() * e) / r;
        return form == DerivativeForm::independent ? Vec2(-chi * printed) : printed;
    };
    for (int m = 0; m < lay.kt; ++m) J.block(lay.theta(m), 0, 1, 2) = angle_row(cfg.tx_ref(m)).transpose();
    for (int n = 0; n < lay.kr; ++n) J.block(lay.phi(n), 0, 1, 2) = angle_row(cfg.rx_ref(n)).transpose();
    for (int m = 0; m < lay.kt; ++m)
        for (int n = 0; n < lay.kr; ++n) {
            const double rt = (cfg.tx_ref(m) - p0).norm(), rr = (cfg.rx_ref(n) - p0).norm();
            const Vec2 et = (cfg.tx_ref(m) - p0) / rt, er = (cfg.rx_ref(n) - p0) / rr;
            const Vec2 printed_p = (-v + et.dot(v) * et) / rt + (-v + er.dot(v) * er) / rr;
            const Vec2 printed_v = et + er;
            const double s = form == DerivativeForm::independent ? 1.0 / lam : 1.0;
            J.block(lay.f(m, n), 0, 1, 2) = (s * printed_p).transpose();
            J.block(lay.f(m, n), 2, 1, 2) = (s * printed_v).transpose();
        }
    for (int p = 0; p < lay.P(); ++p) {
        J(lay.kt + lay.kr + lay.P() + p, 4 + p) = 1.0;
        J(lay.kt + lay.kr + 2 * lay.P() + p, 4 + lay.P() + p) = 1.0;
    }
    return J;
}

struct FisherReport {
    MatX f_rho;
    MatX psi;
    MatX f_eta;
    MatX f_eta_inv;
    double crb_p = 0.0;  // m^2
    double crb_v = 0.0;  // (m/s)^2
    bool rank_deficient = false;

    double sqrt_crb_p() const { return std::sqrt(crb_p); }
    double sqrt_crb_v() const { return std::sqrt(crb_v); }
    double crb_p_db() const { return 10.0 * std::log10(sqrt_crb_p()); }
    double crb_v_db() const { return 10.0 * std::log10(sqrt_crb_v()); }
};

/// Symmetric (pseudo-)inverse after Jacobi scaling; `deficient` reports dropped directions.
inline MatX symmetric_pinv(const MatX& F, bool& deficient, double rel_tol = 1e-12) {
    const Eigen::Index n = F.rows();
    VecX s(n);
    for (Eigen::Index i = 0; i < n; ++i) s[i] = F(i, i) > 0.0 ? 1.0 / std::sqrt(F(i, i)) : 1.0;
    const MatX G = s.asDiagonal() * F * s.asDiagonal();
    Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (G + G.transpose()));
    const VecX ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    VecX inv(n);
    deficient = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ev[i] > rel_tol * top) {
            inv[i] = 1.0 / ev[i];
        } else {
            inv[i] = 0.0;
            deficient = true;
        }
    }
    const MatX Gi = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    return s.asDiagonal() * Gi * s.asDiagonal();
}

inline FisherReport crb_eta(const MatX& f_rho, const MatX& psi) {
    if (f_rho.rows() != psi.rows()) throw Error("F_rho and Psi dimensions disagree");
    FisherReport r;
    r.f_rho = f_rho;
    r.psi = psi;
    r.f_eta = psi.transpose() * f_rho * psi;
    r.f_eta = 0.5 * (r.f_eta + r.f_eta.transpose());
    r.f_eta_inv = symmetric_pinv(r.f_eta, r.rank_deficient);
    r.crb_p = r.f_eta_inv(0, 0) + r.f_eta_inv(1, 1);
    r.crb_v = r.f_eta_inv(2, 2) + r.f_eta_inv(3, 3);
    return r;
}

inline FisherReport compute_crb(const Scenario& sc, DerivativeForm form = DerivativeForm::independent) {
    return crb_eta(fim_rho(sc.array, sc.pulse, sc.target, sc.gain, sc.noise.sigma, form),
                   jacobian_psi(sc.array, sc.target, form));
}

}  // namespace nfvmp
