#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "circular.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "subvbi.hpp"

namespace nfvmp {

struct GaussianEstimate2D {
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
};

/// Messages from the per-pair posteriors to the location and velocity factors.
struct AngularMessageSet {
    int k_t = 0;
    int k_r = 0;
    std::vector<VonMisesParam> theta;    // per transmit subarray
    std::vector<VonMisesParam> phi;      // per receive subarray
    std::vector<VonMisesParam> doppler;  // row-major (m, n), over normalized Doppler
    std::vector<bool> used;              // row-major (m, n)
    std::vector<std::string> warnings;

    const VonMisesParam& doppler_at(int m, int n) const { return doppler[m * k_r + n]; }
    bool used_at(int m, int n) const { return used[m * k_r + n]; }
};

/// Sums the converged per-pair posteriors into theta/phi messages, dividing out each pair's prior copy.
inline AngularMessageSet build_messages(const std::vector<SubarrayPosterior>& posts, int k_t, int k_r,
                                        const VmPriors& priors = {}) {
    AngularMessageSet s;
    s.k_t = k_t;
    s.k_r = k_r;
    s.theta.assign(k_t, {});
    s.phi.assign(k_r, {});
    s.doppler.assign(std::size_t(k_t) * k_r, {});
    s.used.assign(std::size_t(k_t) * k_r, false);
    for (const SubarrayPosterior& p : posts) {
        if (p.m < 0 || p.m >= k_t || p.n < 0 || p.n >= k_r) throw Error("posterior index out of range");
        if (!p.converged) {
            s.warnings.push_back("pair (" + std::to_string(p.m + 1) + "," + std::to_string(p.n + 1) +
                                 ") not converged; skipped");
            continue;
        }
        s.theta[p.m] = vm_product(s.theta[p.m], vm_divide(p.eta_theta, priors.theta));
        s.phi[p.n] = vm_product(s.phi[p.n], vm_divide(p.eta_phi, priors.phi));
        s.doppler[p.m * k_r + p.n] = vm_divide(p.eta_f, priors.f);
        s.used[p.m * k_r + p.n] = true;
    }
    return s;
}

namespace detail {

inline Mat2 symmetrize(const Mat2& a) { return 0.5 * (a + a.transpose()); }

/// -H^{-1}, symmetrized, eigenvalues clamped from below.
inline Mat2 neg_inverse_clamped(const Mat2& H, double floor = 1e-12) {
    Eigen::SelfAdjointEigenSolver<Mat2> es(symmetrize(-H));
    Eigen::Vector2d ev = es.eigenvalues();
    Eigen::Vector2d inv;
    for (int i = 0; i < 2; ++i) inv[i] = std::max(1.0 / std::max(ev[i], 1e-300), floor);
    return symmetrize(es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose());
}

inline double condition(const Mat2& A) {
    Eigen::JacobiSVD<Mat2> svd(A);
    const auto s = svd.singularValues();
    return s[1] > 0.0 ? s[0] / s[1] : std::numeric_limits<double>::infinity();
}

// One bearing term kappa cos(chi * gamma(p) - mu), gamma = sin of the angle seen from `ref`.
struct BearingTerm {
    Vec2 ref;
    double kappa;
    double mu;
};

inline void bearing_eval(const BearingTerm& b, double chi, const Vec2& p, double& f, Vec2& g, Mat2& H) {
    const Vec2 dp = p - b.ref;
    const double r = dp.norm();
    const Vec2 e = dp / r;
    const double gamma = e.x();
    const Vec2 ex(1.0, 0.0);
    const Vec2 w = (ex - gamma * e) / r;
    const Mat2 dw = (-e * ex.transpose() - ex * e.transpose() + 3.0 * gamma * e * e.transpose() -
                     gamma * Mat2::Identity()) /
                    (r * r);
    const double arg = chi * gamma - b.mu;
    const double c = std::cos(arg), s = std::sin(arg);
    f += b.kappa * c;
    g += -b.kappa * s * chi * w;
    H += -b.kappa * c * chi * chi * w * w.transpose() - b.kappa * s * chi * dw;
}

inline std::vector<BearingTerm> bearing_terms(const AngularMessageSet& msgs, const ArrayConfig& cfg) {
    std::vector<BearingTerm> t;
    for (int m = 0; m < msgs.k_t; ++m)
        if (msgs.theta[m].kappa() > 0.0) t.push_back({cfg.tx_ref(m), msgs.theta[m].kappa(), msgs.theta[m].mu()});
    for (int n = 0; n < msgs.k_r; ++n)
        if (msgs.phi[n].kappa() > 0.0) t.push_back({cfg.rx_ref(n), msgs.phi[n].kappa(), msgs.phi[n].mu()});
    return t;
}

}  // namespace detail

/// Location objective sum kappa cos(chi sin(angle) - mu) over every theta and phi message, each used once.
inline void location_objective(const AngularMessageSet& msgs, const ArrayConfig& cfg, const Vec2& p, double& f,
                               Vec2& g, Mat2& H) {
    f = 0.0;
    g.setZero();
    H.setZero();
    for (const auto& t : detail::bearing_terms(msgs, cfg)) detail::bearing_eval(t, cfg.chi(), p, f, g, H);
}

enum class AscentDirection { gradient, newton };

struct AscentOptions {
    int max_iters = 200000;
    double tol = 1e-10;
    AscentDirection direction = AscentDirection::gradient;
};

struct FitResult {
    GaussianEstimate2D est;
    int iters = 0;
    double hessian_condition = 0.0;
};

namespace detail {

// Ascent with backtracking; the initial step is 1/|largest Hessian eigenvalue|.
template <class Objective>
Vec2 ascend(const Objective& obj, Vec2 x, const AscentOptions& opts, int& iters) {
    double f;
    Vec2 g;
    Mat2 H;
    obj(x, f, g, H);
    for (iters = 0; iters < opts.max_iters; ++iters) {
        Vec2 dir = g;
        double step;
        Eigen::SelfAdjointEigenSolver<Mat2> es(symmetrize(H));
        const double lam = std::max(std::abs(es.eigenvalues()[0]), std::abs(es.eigenvalues()[1]));
        if (opts.direction == AscentDirection::newton && es.eigenvalues()[1] < 0.0) {
            dir = -symmetrize(H).ldlt().solve(g);
            step = 1.0;
        } else {
            step = lam > 0.0 ? 1.0 / lam : 1.0;
        }
        double fn;
        Vec2 gn;
        Mat2 Hn;
        Vec2 xn = x + step * dir;
        obj(xn, fn, gn, Hn);
        int halvings = 0;
        while (!(fn >= f) && halvings < 60) {
            step *= 0.5;
            xn = x + step * dir;
            obj(xn, fn, gn, Hn);
            ++halvings;
        }
        if (!(fn >= f)) return x;  // no ascent possible along the direction: stationary to precision
        const double moved = (xn - x).norm();
        x = xn;
        f = fn;
        g = gn;
        H = Hn;
        if (moved < opts.tol) return x;
    }
    throw Error("ascent did not converge; last iterate (" + std::to_string(x.x()) + ", " + std::to_string(x.y()) +
                ")");
}

}  // namespace detail

inline FitResult centralized_location(const AngularMessageSet& msgs, const ArrayConfig& cfg, const Vec2& init,
                                      const AscentOptions& opts = {}) {
    const auto terms = detail::bearing_terms(msgs, cfg);
    if (terms.size() < 2) throw Error("need at least two angular messages with positive concentration");
    const double chi = cfg.chi();
    auto obj = [&](const Vec2& p, double& f, Vec2& g, Mat2& H) {
        f = 0.0;
        g.setZero();
        H.setZero();
        for (const auto& t : terms) detail::bearing_eval(t, chi, p, f, g, H);
    };
    FitResult r;
    const Vec2 p = detail::ascend(obj, init, opts, r.iters);
    double f;
    Vec2 g;
    Mat2 H;
    obj(p, f, g, H);
    Eigen::SelfAdjointEigenSolver<Mat2> es(detail::symmetrize(H));
    if (!(es.eigenvalues()[1] < 0.0)) throw Error("not a local maximum");
    r.hessian_condition = es.eigenvalues()[0] / es.eigenvalues()[1];
    r.est.mean = p;
    r.est.cov = detail::neg_inverse_clamped(H);
    return r;
}

/// Gaussian product: precision-weighted mean, summed precisions.
inline GaussianEstimate2D fuse_gaussians(const std::vector<GaussianEstimate2D>& parts) {
    if (parts.empty()) throw Error("no estimates to fuse");
    Mat2 P = Mat2::Zero();
    Vec2 h = Vec2::Zero();
    for (const auto& e : parts) {
        const Mat2 Pi = detail::symmetrize(e.cov.inverse());
        P += Pi;
        h += Pi * e.mean;
    }
    GaussianEstimate2D out;
    out.cov = detail::symmetrize(P.inverse());
    out.mean = out.cov * h;
    return out;
}

struct DistributedLocation {
    std::vector<GaussianEstimate2D> per_pair;  // row-major (m, n); entries of unused pairs are left default
    std::vector<bool> valid;
    GaussianEstimate2D fused;
    int mismatch_warnings = 0;
};

namespace detail {

// Unit vector from a subarray toward the target recovered from an electrical angle.
inline Vec2 direction_from_electrical(double mu, double chi) {
    const double s = mu / chi;
    if (std::abs(s) > 1.0) throw Error("electrical angle outside grating-free range");
    return {s, std::sqrt(std::max(0.0, 1.0 - s * s))};
}

}  // namespace detail

/// Per-pair closed forms and their Gaussian-product fusion. With tau_hat empty the per-pair point is the
/// intersection of the two bearings; otherwise the bistatic range c*tau is split between the two legs.
inline DistributedLocation distributed_location(const AngularMessageSet& msgs, const ArrayConfig& cfg,
                                                const std::vector<double>& tau_hat = {}) {
    if (!tau_hat.empty() && tau_hat.size() != std::size_t(msgs.k_t) * msgs.k_r)
        throw Error("tau_hat must have one entry per subarray pair");
    const double chi = cfg.chi();
    DistributedLocation out;
    out.per_pair.resize(std::size_t(msgs.k_t) * msgs.k_r);
    out.valid.assign(out.per_pair.size(), false);
    std::vector<GaussianEstimate2D> parts;
    for (int m = 0; m < msgs.k_t; ++m)
        for (int n = 0; n < msgs.k_r; ++n) {
            if (!msgs.used_at(m, n)) continue;
            const VonMisesParam& th = msgs.theta[m];
            const VonMisesParam& ph = msgs.phi[n];
            if (th.kappa() <= 0.0 || ph.kappa() <= 0.0) continue;
            const Vec2 et = detail::direction_from_electrical(th.mu(), chi);
            const Vec2 er = detail::direction_from_electrical(ph.mu(), chi);
            const Vec2 pt = cfg.tx_ref(m), pr = cfg.rx_ref(n);
            Vec2 mp;
            if (tau_hat.empty()) {
                Mat2 A;
                A.col(0) = er;
                A.col(1) = -et;
                const Vec2 d = A.colPivHouseholderQr().solve(pt - pr);
                mp = pr + d[0] * er;
            } else {
                const double range = kSpeedOfLight * tau_hat[m * msgs.k_r + n];
                const double ct = et.y(), cr = er.y();
                const double dr = range * ct / (ct + cr);
                const double dt = range * cr / (ct + cr);
                mp = pr + dr * er;
                const Vec2 other = pt + dt * et;
                if ((mp - other).norm() > 1e-6 * range) ++out.mismatch_warnings;
            }
            // Curvature at the per-pair maximum, where the sine-weighted terms vanish.
            auto w_of = [&](const Vec2& ref) {
                const Vec2 dp = mp - ref;
                const double r = dp.norm();
                const Vec2 e = dp / r;
                return Vec2((Vec2(1.0, 0.0) - e.x() * e) / r);
            };
            const Vec2 wt = w_of(pt), wr = w_of(pr);
            const Mat2 H = -chi * chi * (th.kappa() * wt * wt.transpose() + ph.kappa() * wr * wr.transpose());
            GaussianEstimate2D est;
            est.mean = mp;
            est.cov = detail::neg_inverse_clamped(H);
            out.per_pair[m * msgs.k_r + n] = est;
            out.valid[m * msgs.k_r + n] = true;
            parts.push_back(est);
        }
    if (parts.empty()) throw Error("no usable subarray pairs for distributed location");
    out.fused = fuse_gaussians(parts);
    return out;
}

struct VelocityOptions {
    AscentOptions ascent{200000, 1e-10, AscentDirection::newton};
    double doppler_sign = 1.0;  // normalized Doppler = doppler_sign * zeta * v^T u with u in target-to-array form
    Vec2 init = Vec2::Zero();
};

/// u_mn = e_t + e_r (target-to-array unit vectors at the location estimate).
inline Vec2 u_vector(const ArrayConfig& cfg, const Vec2& p0_hat, int m, int n) {
    const UnitVectors uv = unit_vectors(cfg, p0_hat, m, n);
    return uv.e_t + uv.e_r;
}

inline double zeta_of(const ArrayConfig& cfg, const PulseConfig& pulse) { return 2.0 * kPi * pulse.pri / cfg.lambda; }

inline FitResult centralized_velocity(const AngularMessageSet& msgs, const ArrayConfig& cfg, const PulseConfig& pulse,
                                      const Vec2& p0_hat, const VelocityOptions& opts = {}) {
    struct Term {
        Vec2 u;
        double kappa, mu;
    };
    std::vector<Term> terms;
    Mat2 info = Mat2::Zero();
    for (int m = 0; m < msgs.k_t; ++m)
        for (int n = 0; n < msgs.k_r; ++n) {
            if (!msgs.used_at(m, n)) continue;
            const VonMisesParam& d = msgs.doppler_at(m, n);
            if (d.kappa() <= 0.0) continue;
            const Vec2 u = opts.doppler_sign * u_vector(cfg, p0_hat, m, n);
            terms.push_back({u, d.kappa(), d.mu()});
            info += d.kappa() * u * u.transpose();
        }
    if (terms.size() < 2 || !(detail::condition(info) < 1e14)) throw Error("velocity unobservable");
    const double zeta = zeta_of(cfg, pulse);
    auto obj = [&](const Vec2& v, double& f, Vec2& g, Mat2& H) {
        f = 0.0;
        g.setZero();
        H.setZero();
        for (const Term& t : terms) {
            const double arg = zeta * v.dot(t.u) - t.mu;
            f += t.kappa * std::cos(arg);
            g += -t.kappa * std::sin(arg) * zeta * t.u;
            H += -t.kappa * std::cos(arg) * zeta * zeta * t.u * t.u.transpose();
        }
    };
    FitResult r;
    const Vec2 v = detail::ascend(obj, opts.init, opts.ascent, r.iters);
    double f;
    Vec2 g;
    Mat2 H;
    obj(v, f, g, H);
    Eigen::SelfAdjointEigenSolver<Mat2> es(detail::symmetrize(H));
    if (!(es.eigenvalues()[1] < 0.0)) throw Error("not a local maximum");
    r.hessian_condition = es.eigenvalues()[0] / es.eigenvalues()[1];
    r.est.mean = v;
    r.est.cov = detail::neg_inverse_clamped(H);
    return r;
}

struct PairConfigSet {
    std::vector<std::pair<std::pair<int, int>, std::pair<int, int>>> omega;
    double max_condition = 1e6;
};

/// Adjacent-index configurations; `full` enumerates every unordered pair of pairs.
inline PairConfigSet default_pair_configs(int k_t, int k_r, bool full = false) {
    PairConfigSet s;
    if (full) {
        for (int a = 0; a < k_t * k_r; ++a)
            for (int b = a + 1; b < k_t * k_r; ++b)
                s.omega.push_back({{a / k_r, a % k_r}, {b / k_r, b % k_r}});
        return s;
    }
    for (int m = 0; m < k_t; ++m)
        for (int n = 0; n < k_r; ++n) {
            if (n + 1 < k_r) s.omega.push_back({{m, n}, {m, n + 1}});
            if (m + 1 < k_t) s.omega.push_back({{m, n}, {m + 1, n}});
        }
    return s;
}

struct DistributedVelocity {
    std::vector<GaussianEstimate2D> per_config;
    std::vector<double> condition;
    GaussianEstimate2D fused;
    int skipped = 0;
};

inline DistributedVelocity distributed_velocity(const AngularMessageSet& msgs, const ArrayConfig& cfg,
                                                const PulseConfig& pulse, const Vec2& p0_hat,
                                                const PairConfigSet& pairs, double doppler_sign = 1.0) {
    const double zeta = zeta_of(cfg, pulse);
    DistributedVelocity out;
    for (const auto& [a, b] : pairs.omega) {
        if (a == b) throw Error("configuration repeats a pair");
        if (!msgs.used_at(a.first, a.second) || !msgs.used_at(b.first, b.second)) {
            ++out.skipped;
            continue;
        }
        const VonMisesParam& da = msgs.doppler_at(a.first, a.second);
        const VonMisesParam& db = msgs.doppler_at(b.first, b.second);
        const Vec2 ua = doppler_sign * u_vector(cfg, p0_hat, a.first, a.second);
        const Vec2 ub = doppler_sign * u_vector(cfg, p0_hat, b.first, b.second);
        Mat2 E;
        E.col(0) = ua;
        E.col(1) = ub;
        const double cond = detail::condition(E);
        if (!(cond < pairs.max_condition) || da.kappa() <= 0.0 || db.kappa() <= 0.0) {
            ++out.skipped;
            continue;
        }
        GaussianEstimate2D est;
        est.mean = E.transpose().fullPivLu().solve(Vec2(da.mu(), db.mu())) / zeta;
        const Mat2 info = da.kappa() * ua * ua.transpose() + db.kappa() * ub * ub.transpose();
        est.cov = detail::symmetrize(info.inverse()) / (zeta * zeta);
        out.per_config.push_back(est);
        out.condition.push_back(cond);
    }
    if (out.per_config.empty()) throw Error("no usable velocity configurations");
    out.fused = fuse_gaussians(out.per_config);
    return out;
}

}  // namespace nfvmp
