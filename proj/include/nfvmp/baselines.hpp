#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "error.hpp"
#include "fusion.hpp"
#include "geometry.hpp"
#include "wavefield.hpp"

namespace nfvmp {

struct BaselineResult {
    Vec2 p_hat = Vec2::Zero();
    Vec2 v_hat = Vec2::Zero();
    double objective = 0.0;
    int iters = 0;      // ML iterations
    long grid_size = 0;  // grid points evaluated
    double runtime_s = 0.0;
    bool converged = true;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Snapshot as an (M*M) x L matrix, row = i_r * M + i_t.
inline Eigen::MatrixXcd as_matrix(const SubarraySnapshot& s) {
    Eigen::MatrixXcd Z(Eigen::Index(s.M) * s.M, s.L);
    for (Eigen::Index k = 0; k < Z.rows(); ++k)
        for (int l = 0; l < s.L; ++l) Z(k, l) = s.data[k * s.L + l];
    return Z;
}

inline VecC spatial_steering(double phi, double theta, int M) {
    VecC w(Eigen::Index(M) * M);
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t) w[Eigen::Index(r) * M + t] = std::polar(1.0, r * phi + t * theta);
    return w;
}

inline void check_snapshots(const std::vector<SubarraySnapshot>& snaps, const ArrayConfig& cfg,
                            const PulseConfig& pulse) {
    if (snaps.size() != std::size_t(cfg.pairs())) throw Error("expected one snapshot per subarray pair");
    for (const auto& s : snaps) {
        s.validate();
        if (s.M != cfg.m_sub || s.L != pulse.n_pulses) throw Error("snapshot shape disagrees with configuration");
    }
}

}  // namespace detail

/// Concentrated least-squares cost sum ||z||^2 - |mu^H z|^2 / ||mu||^2 under the subarray model.
class MlObjective {
public:
    MlObjective(const std::vector<SubarraySnapshot>& snaps, const ArrayConfig& cfg, const PulseConfig& pulse)
        : cfg_(cfg), pulse_(pulse) {
        detail::check_snapshots(snaps, cfg, pulse);
        for (const auto& s : snaps) {
            z2_ += s.data.squaredNorm();
            mats_.push_back(detail::as_matrix(s));
            idx_.push_back({s.m, s.n});
        }
    }

    double operator()(const Vec2& p, const Vec2& v) const {
        if (!(p.y() > 0.0)) return std::numeric_limits<double>::infinity();
        const TargetState t{p, v};
        const SubarrayAngles ang = subarray_angles(cfg_, p);
        const int M = cfg_.m_sub, L = pulse_.n_pulses;
        const double mu2 = double(M) * M * L;
        double acc = 0.0;
        VecC dc(L);
        for (std::size_t k = 0; k < mats_.size(); ++k) {
            const auto [m, n] = idx_[k];
            const double fn = normalized_doppler(cfg_, pulse_, t, m, n);
            for (int l = 0; l < L; ++l) dc[l] = std::polar(1.0, fn * l);
            const VecC w = detail::spatial_steering(ang.phi[n], ang.theta[m], M);
            const cplx proj = w.dot(mats_[k] * dc);
            acc += std::norm(proj) / mu2;
        }
        return z2_ - acc;
    }

private:
    ArrayConfig cfg_;
    PulseConfig pulse_;
    std::vector<Eigen::MatrixXcd> mats_;
    std::vector<std::pair<int, int>> idx_;
    double z2_ = 0.0;
};

enum class MlPreconditioner { hessian, diagonal };

struct MlOptions {
    int max_iters = 200;
    MlPreconditioner preconditioner = MlPreconditioner::hessian;
    double h_p = 1e-3;  // central-difference steps
    double h_v = 1e-2;
    double tol = 1e-12;  // relative cost decrease
};

/// Gradient descent on (p0, v0) preconditioned by the central-difference Hessian (eigenvalues clamped positive),
/// or by its diagonal only, with Armijo backtracking.
inline BaselineResult ml_estimate(const std::vector<SubarraySnapshot>& snaps, const ArrayConfig& cfg,
                                  const PulseConfig& pulse, const Vec2& p_init, const Vec2& v_init,
                                  const MlOptions& opts = {}) {
    const auto t0 = detail::Clock::now();
    const MlObjective J(snaps, cfg, pulse);
    using Vec4 = Eigen::Vector4d;
    using Mat4 = Eigen::Matrix4d;
    Vec4 x(p_init.x(), p_init.y(), v_init.x(), v_init.y());
    const Vec4 h(opts.h_p, opts.h_p, opts.h_v, opts.h_v);
    auto eval = [&](const Vec4& y) { return J(y.head<2>(), y.tail<2>()); };
    auto shifted = [&](int i, double si, int j, double sj) {
        Vec4 y = x;
        y[i] += si * h[i];
        if (j >= 0) y[j] += sj * h[j];
        return eval(y);
    };
    double f = eval(x);
    if (!std::isfinite(f)) throw Error("ML cost is not finite at the initial point");
    BaselineResult res;
    res.converged = false;
    for (int it = 1; it <= opts.max_iters; ++it) {
        res.iters = it;
        Vec4 g;
        Mat4 H;
        for (int i = 0; i < 4; ++i) {
            const double fp = shifted(i, 1.0, -1, 0.0), fm = shifted(i, -1.0, -1, 0.0);
            g[i] = (fp - fm) / (2.0 * h[i]);
            H(i, i) = (fp - 2.0 * f + fm) / (h[i] * h[i]);
            for (int j = 0; j < i; ++j) {
                if (opts.preconditioner == MlPreconditioner::diagonal) {
                    H(i, j) = H(j, i) = 0.0;
                    continue;
                }
                H(i, j) = H(j, i) = (shifted(i, 1, j, 1) - shifted(i, 1, j, -1) - shifted(i, -1, j, 1) +
                                     shifted(i, -1, j, -1)) /
                                    (4.0 * h[i] * h[j]);
            }
        }
        if (!g.allFinite() || !H.allFinite())
            throw Error("ML gradient diverged at iteration " + std::to_string(it) + " near p = (" +
                        std::to_string(x[0]) + ", " + std::to_string(x[1]) + ")");
        Vec4 d;
        for (int i = 0; i < 4; ++i) d[i] = 1.0 / std::sqrt(std::max(std::abs(H(i, i)), 1e-300));
        Eigen::SelfAdjointEigenSolver<Mat4> es(d.asDiagonal() * H * d.asDiagonal());
        Vec4 ev = es.eigenvalues().cwiseAbs();
        ev = ev.cwiseMax(1e-8 * ev.maxCoeff());
        const Vec4 dir = -(d.asDiagonal() * es.eigenvectors() * ev.cwiseInverse().asDiagonal() *
                           es.eigenvectors().transpose() * d.asDiagonal() * g);
        double step = 1.0, fn = f;
        Vec4 xn = x;
        bool accepted = false;
        for (int k = 0; k < 40; ++k, step *= 0.5) {
            xn = x + step * dir;
            fn = eval(xn);
            if (std::isfinite(fn) && fn <= f + 1e-4 * step * g.dot(dir)) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            res.converged = true;
            break;
        }
        const double drop = f - fn;
        x = xn;
        f = fn;
        if (drop <= opts.tol * std::max(1.0, std::abs(f))) {
            res.converged = true;
            break;
        }
    }
    res.p_hat = x.head<2>();
    res.v_hat = x.tail<2>();
    res.objective = f;
    res.runtime_s = detail::seconds_since(t0);
    return res;
}

/// Regular grid of (2 * half_cells + 1)^2 nodes spaced `step` around `center`.
struct GridSpec {
    Vec2 center = Vec2::Zero();
    double step = 0.1;
    int half_cells = 10;

    void validate() const {
        if (!(step > 0.0) || half_cells < 0) throw Error("empty grid");
    }
    Vec2 node(int i, int j) const { return center + step * Vec2(i, j); }
};

struct MusicGrids {
    GridSpec location{Vec2(15.0, 20.7), 0.1, 10};
    GridSpec velocity{Vec2(10.0, 10.2), 0.1, 20};
    int smoothing_len = 0;  // slow-time subwindow; 0 means L/2
};

/// Noncoherent beamforming power with Doppler marginalized by an FFT peak per pair.
class GridPower {
public:
    GridPower(const std::vector<SubarraySnapshot>& snaps, const ArrayConfig& cfg, const PulseConfig& pulse)
        : cfg_(cfg) {
        detail::check_snapshots(snaps, cfg, pulse);
        for (const auto& s : snaps) {
            mats_.push_back(detail::as_matrix(s));
            idx_.push_back({s.m, s.n});
        }
        const int L = pulse.n_pulses;
        nfft_ = 1;
        while (nfft_ < 8 * L) nfft_ *= 2;
        mu2_ = double(cfg.m_sub) * cfg.m_sub * L;
    }

    /// Beamformed slow-time sequence of pair k at p.
    VecC slow_time(std::size_t k, const Vec2& p) const {
        const SubarrayAngles ang = subarray_angles(cfg_, p);
        const VecC w = detail::spatial_steering(ang.phi[idx_[k].second], ang.theta[idx_[k].first], cfg_.m_sub);
        return (w.adjoint() * mats_[k]).transpose();
    }

    double operator()(const Vec2& p) const {
        if (!(p.y() > 0.0)) return 0.0;
        Eigen::FFT<double> fft;
        double total = 0.0;
        std::vector<cplx> buf(nfft_), spec;
        for (std::size_t k = 0; k < mats_.size(); ++k) {
            const VecC y = slow_time(k, p);
            std::fill(buf.begin(), buf.end(), cplx(0.0));
            for (Eigen::Index l = 0; l < y.size(); ++l) buf[l] = y[l];
            fft.fwd(spec, buf);
            double best = 0.0;
            for (const cplx& c : spec) best = std::max(best, std::norm(c));
            total += best / mu2_;
        }
        return total;
    }

    std::size_t pairs() const { return mats_.size(); }
    std::pair<int, int> pair_index(std::size_t k) const { return idx_[k]; }

private:
    ArrayConfig cfg_;
    std::vector<Eigen::MatrixXcd> mats_;
    std::vector<std::pair<int, int>> idx_;
    int nfft_ = 0;
    double mu2_ = 1.0;
};

/// Exhaustive scan of `grid`; returns the best node and its value.
template <class F>
std::pair<Vec2, double> grid_argmax(const GridSpec& grid, const F& f) {
    grid.validate();
    Vec2 best = grid.center;
    double bv = -std::numeric_limits<double>::infinity();
    for (int i = -grid.half_cells; i <= grid.half_cells; ++i)
        for (int j = -grid.half_cells; j <= grid.half_cells; ++j) {
            const Vec2 p = grid.node(i, j);
            const double v = f(p);
            if (v > bv) {
                bv = v;
                best = p;
            }
        }
    return {best, bv};
}

/// Location grid search followed by a rank-1 MUSIC scan over the velocity grid.
inline BaselineResult grid_music(const std::vector<SubarraySnapshot>& snaps, const ArrayConfig& cfg,
                                 const PulseConfig& pulse, const MusicGrids& grids) {
    const auto t0 = detail::Clock::now();
    grids.location.validate();
    grids.velocity.validate();
    const GridPower power(snaps, cfg, pulse);
    BaselineResult res;
    const auto [p_hat, pw] = grid_argmax(grids.location, power);
    res.p_hat = p_hat;

    const int L = pulse.n_pulses;
    const int Ls = grids.smoothing_len > 0 ? grids.smoothing_len : std::max(2, L / 2);
    if (Ls > L) throw Error("smoothing length exceeds pulse count");
    std::vector<VecC> signal;
    for (std::size_t k = 0; k < power.pairs(); ++k) {
        const VecC y = power.slow_time(k, p_hat);
        Eigen::MatrixXcd R = Eigen::MatrixXcd::Zero(Ls, Ls);
        for (int s = 0; s + Ls <= L; ++s) {
            const VecC seg = y.segment(s, Ls);
            R += seg * seg.adjoint();
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(R);
        signal.push_back(es.eigenvectors().col(Ls - 1));
    }
    auto pseudo = [&](const Vec2& v) {
        const TargetState t{p_hat, v};
        double resid = 0.0;
        for (std::size_t k = 0; k < power.pairs(); ++k) {
            const auto [m, n] = power.pair_index(k);
            const double fn = normalized_doppler(cfg, pulse, t, m, n);
            cplx c = 0.0;
            for (int l = 0; l < Ls; ++l) c += std::conj(signal[k][l]) * std::polar(1.0, -fn * l);
            resid += 1.0 - std::norm(c) / Ls;
        }
        return 1.0 / std::max(resid, 1e-300);
    };
    const auto [v_hat, ps] = grid_argmax(grids.velocity, pseudo);
    res.v_hat = v_hat;
    res.objective = ps;
    const long side_p = 2 * grids.location.half_cells + 1, side_v = 2 * grids.velocity.half_cells + 1;
    res.grid_size = side_p * side_p + side_v * side_v;
    res.runtime_s = detail::seconds_since(t0);
    return res;
}

/// Equal-weight mean of the valid per-pair location closed forms.
inline Vec2 average_location(const DistributedLocation& loc) {
    Vec2 p = Vec2::Zero();
    int c = 0;
    for (std::size_t i = 0; i < loc.per_pair.size(); ++i)
        if (loc.valid[i]) {
            p += loc.per_pair[i].mean;
            ++c;
        }
    if (c == 0) throw Error("no per-pair location estimates to average");
    return p / c;
}

inline Vec2 average_velocity(const DistributedVelocity& vel) {
    if (vel.per_config.empty()) throw Error("no per-configuration velocity estimates to average");
    Vec2 v = Vec2::Zero();
    for (const auto& e : vel.per_config) v += e.mean;
    return v / double(vel.per_config.size());
}

/// Equal-weight means of per-pair location and per-configuration velocity closed forms.
inline BaselineResult subarray_average(const DistributedLocation& loc, const DistributedVelocity& vel) {
    BaselineResult res;
    res.p_hat = average_location(loc);
    res.v_hat = average_velocity(vel);
    return res;
}

}  // namespace nfvmp
