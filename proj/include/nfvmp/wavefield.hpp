#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "circular.hpp"
#include "error.hpp"
#include "geometry.hpp"

namespace nfvmp {

using VecC = Eigen::VectorXcd;

/// Per-pair complex amplitudes, stored row-major in (m, n).
struct ChannelGain {
    int k_t = 0;
    int k_r = 0;
    std::vector<cplx> beta;
    std::vector<double> varsigma;

    ChannelGain() = default;
    ChannelGain(int kt, int kr) : k_t(kt), k_r(kr), beta(kt * kr), varsigma(kt * kr, 1e6) {}

    cplx& at(int m, int n) { return beta[m * k_r + n]; }
    const cplx& at(int m, int n) const { return beta[m * k_r + n]; }
    double mean_power() const {
        double s = 0.0;
        for (const cplx& b : beta) s += std::norm(b);
        return beta.empty() ? 0.0 : s / double(beta.size());
    }
};

struct RadarEquation {
    double pt_w = 1.0;       // transmit power (W)
    double gt = 31.6227766;  // linear antenna gains
    double gr = 31.6227766;
    double rcs_var = 1.0;    // sigma_s^2 of the Swerling-I amplitude
};

inline double dbm_to_watt(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }
inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

/// beta_mn = sqrt(Pt Gt Gr) alpha / (r_t r_r); varsigma from the same equation with E|alpha|^2.
inline ChannelGain radar_gains(const ArrayConfig& cfg, const Vec2& p0, const RadarEquation& eq, cplx alpha) {
    ChannelGain g(cfg.k_t(), cfg.k_r());
    const double amp = std::sqrt(eq.pt_w * eq.gt * eq.gr);
    for (int m = 0; m < cfg.k_t(); ++m)
        for (int n = 0; n < cfg.k_r(); ++n) {
            const double rr = (cfg.tx_ref(m) - p0).norm() * (cfg.rx_ref(n) - p0).norm();
            g.at(m, n) = amp * alpha / rr;
            g.varsigma[m * g.k_r + n] = amp * amp * eq.rcs_var / (rr * rr);
        }
    return g;
}

struct NoiseModel {
    double sigma = 1.0;  // per-sample complex variance
    std::uint64_t rng_seed = 0;
};

enum class SynthMode { subarray_exact, antenna_exact };

struct SubarraySnapshot {
    int m = 0;
    int n = 0;
    int M = 0;
    int L = 0;
    VecC data;  // flat index ((i_r * M) + i_t) * L + l

    Eigen::Index expected_size() const { return Eigen::Index(M) * M * L; }
    void validate() const {
        if (data.size() != expected_size()) throw Error("snapshot length does not match M*M*L");
        if (!data.allFinite()) throw Error("snapshot contains non-finite samples");
    }
};

/// Everything needed to synthesize one CPI.
struct Scenario {
    ArrayConfig array;
    PulseConfig pulse;
    TargetState target;
    ChannelGain gain;
    NoiseModel noise;
    SynthMode mode = SynthMode::subarray_exact;
};

inline VecC steering_tx(double theta, int M) {
    VecC a(M);
    for (int k = 0; k < M; ++k) a[k] = std::polar(1.0, k * theta);
    return a;
}

inline VecC steering_rx(double phi, int M) { return steering_tx(phi, M); }

/// Slow-time vector [exp(-j 2 pi f T l)], l = 0..L-1.
inline VecC doppler_vec(double f_hz, double pri, int L) {
    VecC d(L);
    const double w = 2.0 * kPi * f_hz * pri;
    for (int l = 0; l < L; ++l) d[l] = std::polar(1.0, -w * l);
    return d;
}

/// a_r(phi) kron a_t(theta) kron d, with d given by its normalized Doppler.
inline VecC kron_steering(double phi, double theta, double f_norm, int M, int L) {
    VecC out(Eigen::Index(M) * M * L);
    const VecC ar = steering_rx(phi, M), at = steering_tx(theta, M);
    VecC d(L);
    for (int l = 0; l < L; ++l) d[l] = std::polar(1.0, -f_norm * l);
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t) {
            const cplx c = ar[r] * at[t];
            const Eigen::Index base = (Eigen::Index(r) * M + t) * L;
            for (int l = 0; l < L; ++l) out[base + l] = c * d[l];
        }
    return out;
}

/// Normalized Doppler 2 pi T f of the (m, n) pair.
inline double normalized_doppler(const ArrayConfig& cfg, const PulseConfig& pulse, const TargetState& t, int m,
                                 int n) {
    return 2.0 * kPi * pulse.pri * bistatic_doppler(cfg, t, m, n);
}

/// SplitMix64 finalizer used to derive independent per-stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = mix_seed(seed);
    s = mix_seed(s ^ (a + 0x100000001b3ULL));
    s = mix_seed(s ^ (b + 0x2545f4914f6cdd1dULL));
    return mix_seed(s ^ (c + 0x5851f42d4c957f2dULL));
}

/// Adds CN(0, sigma) noise drawn from the stream of pair (m, n).
inline void add_noise(VecC& data, double sigma, std::uint64_t seed, int m, int n) {
    std::mt19937_64 rng(derive_seed(seed, std::uint64_t(m), std::uint64_t(n), 0x6e6f697365ULL));
    std::normal_distribution<double> nd(0.0, std::sqrt(sigma / 2.0));
    for (Eigen::Index k = 0; k < data.size(); ++k) {
        const double re = nd(rng);
        const double im = nd(rng);
        data[k] += cplx(re, im);
    }
}

inline SubarraySnapshot synthesize_snapshot(const Scenario& sc, int m, int n) {
    const ArrayConfig& cfg = sc.array;
    const int M = cfg.m_sub, L = sc.pulse.n_pulses;
    const double fn = normalized_doppler(cfg, sc.pulse, sc.target, m, n);
    if (std::abs(fn) >= kPi) throw Error("normalized Doppler outside principal interval");
    SubarraySnapshot s{m, n, M, L, VecC()};
    const cplx beta = sc.gain.at(m, n);
    if (sc.mode == SynthMode::subarray_exact) {
        const SubarrayAngles ang = subarray_angles(cfg, sc.target.p0);
        s.data = beta * kron_steering(ang.phi[n], ang.theta[m], fn, M, L);
    } else {
        // Exact per-element ranges and Doppler; receive elements run toward +x from their reference.
        s.data.resize(Eigen::Index(M) * M * L);
        const Vec2& p0 = sc.target.p0;
        const double k0 = 2.0 * kPi / cfg.lambda;
        const double rt0 = (cfg.tx_ref(m) - p0).norm();
        const double rr0 = (cfg.rx_ref(n) - p0).norm();
        for (int ir = 0; ir < M; ++ir) {
            const Vec2 pr = cfg.rx_ref(n) + Vec2(ir * cfg.d_spacing, 0.0);
            const double rr = (pr - p0).norm();
            const Vec2 er = (pr - p0) / rr;
            for (int it = 0; it < M; ++it) {
                const Vec2 pt = cfg.tx_antenna(m * M + it);
                const double rt = (pt - p0).norm();
                const Vec2 et = (pt - p0) / rt;
                const double fij = -(et + er).dot(sc.target.v0) / cfg.lambda;
                const Eigen::Index base = (Eigen::Index(ir) * M + it) * L;
                for (int l = 0; l < L; ++l) {
                    const double tl = l * sc.pulse.pri;
                    const double phase = (rt - rt0) + (rr - rr0) + cfg.lambda * tl * fij;
                    s.data[base + l] = beta * std::polar(1.0, -k0 * phase);
                }
            }
        }
    }
    if (sc.noise.sigma > 0.0) add_noise(s.data, sc.noise.sigma, sc.noise.rng_seed, m, n);
    return s;
}

inline std::vector<SubarraySnapshot> synthesize_all(const Scenario& sc) {
    std::vector<SubarraySnapshot> out;
    for (int m = 0; m < sc.array.k_t(); ++m)
        for (int n = 0; n < sc.array.k_r(); ++n) out.push_back(synthesize_snapshot(sc, m, n));
    return out;
}

inline double snr_of(const ChannelGain& gain, const NoiseModel& noise) {
    if (gain.beta.empty()) throw Error("no subarray pairs");
    const double p = gain.mean_power();
    if (!(p > 0.0)) throw Error("zero channel gains");
    return 10.0 * std::log10(p / noise.sigma);
}

/// Noise variance that yields the requested per-sample SNR.
inline double sigma_for_snr(const ChannelGain& gain, double snr_db) {
    if (gain.beta.empty()) throw Error("no subarray pairs");
    const double p = gain.mean_power();
    if (!(p > 0.0)) throw Error("zero channel gains");
    return p / std::pow(10.0, snr_db / 10.0);
}

inline NoiseModel set_snr(const Scenario& sc, double snr_db) {
    return {sigma_for_snr(sc.gain, snr_db), sc.noise.rng_seed};
}

// ---- NFZ1 snapshot files ----

struct SnapshotFile {
    int M = 0, L = 0, k_t = 0, k_r = 0;
    double sigma = 0.0;
    std::vector<SubarraySnapshot> snapshots;
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "NFZ1 I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error("truncated NFZ1 file");
    return v;
}
}  // namespace detail

/// Record indices are stored one-based.
inline void write_nfz(const std::string& path, const SnapshotFile& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("NFZ1", 4);
    detail::put<std::uint32_t>(os, f.M);
    detail::put<std::uint32_t>(os, f.L);
    detail::put<std::uint32_t>(os, f.k_t);
    detail::put<std::uint32_t>(os, f.k_r);
    detail::put<double>(os, f.sigma);
    if (f.snapshots.size() != std::size_t(f.k_t) * f.k_r) throw Error("snapshot count mismatch");
    for (const SubarraySnapshot& s : f.snapshots) {
        s.validate();
        detail::put<std::uint16_t>(os, std::uint16_t(s.m + 1));
        detail::put<std::uint16_t>(os, std::uint16_t(s.n + 1));
        for (Eigen::Index k = 0; k < s.data.size(); ++k) {
            detail::put<double>(os, s.data[k].real());
            detail::put<double>(os, s.data[k].imag());
        }
    }
    if (!os) throw Error("write failed: " + path);
}

inline SnapshotFile read_nfz(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NFZ1", 4) != 0) throw Error("not an NFZ1 file: " + path);
    SnapshotFile f;
    f.M = int(detail::get<std::uint32_t>(is));
    f.L = int(detail::get<std::uint32_t>(is));
    f.k_t = int(detail::get<std::uint32_t>(is));
    f.k_r = int(detail::get<std::uint32_t>(is));
    f.sigma = detail::get<double>(is);
    const Eigen::Index len = Eigen::Index(f.M) * f.M * f.L;
    for (int r = 0; r < f.k_t * f.k_r; ++r) {
        SubarraySnapshot s;
        s.m = int(detail::get<std::uint16_t>(is)) - 1;
        s.n = int(detail::get<std::uint16_t>(is)) - 1;
        if (s.m < 0 || s.m >= f.k_t || s.n < 0 || s.n >= f.k_r) throw Error("record index out of range");
        s.M = f.M;
        s.L = f.L;
        s.data.resize(len);
        for (Eigen::Index k = 0; k < len; ++k) {
            const double re = detail::get<double>(is);
            const double im = detail::get<double>(is);
            s.data[k] = {re, im};
        }
        f.snapshots.push_back(std::move(s));
    }
    return f;
}

}  // namespace nfvmp
