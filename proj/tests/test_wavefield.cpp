#include <gtest/gtest.h>

#include <cstdio>
#include <random>

#include <nfvmp/wavefield.hpp>

using namespace nfvmp;

namespace {
Scenario desk(double sigma = 0.0) {
    Scenario sc;
    sc.array = ArrayConfig::from_carrier(64, 64, 16, 28e9);
    sc.pulse.n_pulses = 100;
    sc.gain = radar_gains(sc.array, sc.target.p0, RadarEquation{}, cplx(0.8, 0.6));
    sc.noise = {sigma, 7};
    return sc;
}
}  // namespace

TEST(Wavefield, SteeringVectors) {
    const VecC a = steering_tx(0.0, 5);
    for (int k = 0; k < 5; ++k) EXPECT_EQ(a[k], cplx(1.0, 0.0));
    const VecC b = steering_tx(kPi, 2);
    EXPECT_NEAR(std::abs(b[1] - cplx(-1.0, 0.0)), 0.0, 1e-15);
    const VecC d = doppler_vec(0.0, 1e-5, 7);
    for (int l = 0; l < 7; ++l) EXPECT_EQ(d[l], cplx(1.0, 0.0));
    const VecC e = doppler_vec(1234.0, 1e-5, 9);
    EXPECT_EQ(e[0], cplx(1.0, 0.0));
    for (int l = 0; l < 9; ++l) EXPECT_NEAR(std::abs(e[l]), 1.0, 1e-15);
}

TEST(Wavefield, KroneckerOrder) {
    const int M = 3, L = 4;
    const VecC s = kron_steering(0.3, -0.7, 0.2, M, L);
    for (int r = 0; r < M; ++r)
        for (int t = 0; t < M; ++t)
            for (int l = 0; l < L; ++l)
                EXPECT_NEAR(std::abs(s[(r * M + t) * L + l] - std::polar(1.0, 0.3 * r - 0.7 * t - 0.2 * l)), 0.0,
                            1e-14);
}

TEST(Wavefield, NoiselessSnapshotIsExactModel) {
    const Scenario sc = desk();
    const SubarraySnapshot s = synthesize_snapshot(sc, 1, 2);
    const SubarrayAngles ang = subarray_angles(sc.array, sc.target.p0);
    const VecC want = sc.gain.at(1, 2) * kron_steering(ang.phi[2], ang.theta[1],
                                                        normalized_doppler(sc.array, sc.pulse, sc.target, 1, 2), 16,
                                                        100);
    EXPECT_NEAR((s.data - want).norm(), 0.0, 1e-12 * want.norm());
}

TEST(Wavefield, RadarEquationGains) {
    const Scenario sc = desk();
    const double r = (sc.array.tx_ref(1) - sc.target.p0).norm() * (sc.array.rx_ref(3) - sc.target.p0).norm();
    EXPECT_NEAR(std::abs(sc.gain.at(1, 3)), std::sqrt(1.0 * 31.6227766 * 31.6227766) / r, 1e-15);
}

TEST(Wavefield, AliasedDopplerIsRejected) {
    Scenario sc = desk();
    sc.target.v0 = Vec2(300.0, 300.0);
    EXPECT_THROW(synthesize_snapshot(sc, 0, 0), Error);
}

TEST(Wavefield, NoiseIsDeterministicPerPair) {
    const Scenario sc = desk(1e-6);
    const SubarraySnapshot a = synthesize_snapshot(sc, 2, 1), b = synthesize_snapshot(sc, 2, 1);
    EXPECT_EQ(a.data, b.data);
    const SubarraySnapshot c = synthesize_snapshot(sc, 1, 2);
    EXPECT_NE((a.data - b.data).norm(), (a.data - c.data).norm());
}

TEST(Wavefield, NoiseVarianceMatchesSigma) {
    VecC z = VecC::Zero(20000);
    add_noise(z, 2.5, 11, 0, 0);
    double re2 = 0.0, im2 = 0.0;
    for (Eigen::Index k = 0; k < z.size(); ++k) {
        re2 += z[k].real() * z[k].real();
        im2 += z[k].imag() * z[k].imag();
    }
    const double var = (re2 + im2) / z.size();
    EXPECT_NEAR(var, 2.5, 0.05 * 2.5);
    EXPECT_NEAR(re2 / z.size(), 1.25, 0.05 * 1.25);
}

TEST(Wavefield, SnapshotEnergyMoment) {
    Scenario sc;
    sc.array = ArrayConfig::from_carrier(8, 8, 4, 28e9);
    sc.pulse.n_pulses = 600;
    sc.gain = radar_gains(sc.array, sc.target.p0, RadarEquation{}, cplx(1.0, 0.0));
    sc.noise.sigma = sigma_for_snr(sc.gain, 0.0);
    const double N = 16.0 * 600.0;
    const double b2 = std::norm(sc.gain.at(0, 0));
    double acc = 0.0;
    const int draws = 120;
    for (int k = 0; k < draws; ++k) {
        sc.noise.rng_seed = 100 + k;
        acc += synthesize_snapshot(sc, 0, 0).data.squaredNorm();
    }
    EXPECT_NEAR(acc / draws, b2 * N + sc.noise.sigma * N, 0.01 * (b2 * N + sc.noise.sigma * N));
}

TEST(Wavefield, ResidualPowerApproachesSigma) {
    Scenario sc = desk();
    sc.pulse.n_pulses = 600;
    sc.noise = {sigma_for_snr(sc.gain, 0.0), 3};
    Scenario clean = sc;
    clean.noise.sigma = 0.0;
    const VecC r = synthesize_snapshot(sc, 0, 0).data - synthesize_snapshot(clean, 0, 0).data;
    EXPECT_NEAR(r.squaredNorm() / r.size(), sc.noise.sigma, 0.1 * sc.noise.sigma);
}

TEST(Wavefield, AntennaExactCloseToSubarrayModelFarAway) {
    Scenario sc;
    sc.array = ArrayConfig::from_carrier(16, 16, 4, 28e9);
    sc.pulse.n_pulses = 8;
    sc.target = TargetState{Vec2(2.0, 60.0), Vec2(3.0, -2.0)};
    ASSERT_GT(sc.target.p0.norm(), 10.0 * subarray_rayleigh(sc.array));
    sc.gain = radar_gains(sc.array, sc.target.p0, RadarEquation{}, cplx(1.0, 0.0));
    Scenario ant = sc;
    ant.mode = SynthMode::antenna_exact;
    for (int m = 0; m < sc.array.k_t(); ++m)
        for (int n = 0; n < sc.array.k_r(); ++n) {
            const VecC a = synthesize_snapshot(sc, m, n).data, b = synthesize_snapshot(ant, m, n).data;
            for (Eigen::Index k = 0; k < a.size(); ++k) EXPECT_LT(std::abs(std::arg(a[k] / b[k])), 0.1);
        }
}

TEST(Wavefield, SnrHelpers) {
    ChannelGain g;
    g.k_t = g.k_r = 1;
    g.beta = {cplx(1.0, 0.0)};
    g.varsigma = {1.0};
    EXPECT_NEAR(snr_of(g, {1.0, 0}), 0.0, 1e-12);
    EXPECT_NEAR(snr_of(g, {0.5, 0}), 10.0 * std::log10(2.0), 1e-12);
    EXPECT_NEAR(snr_of(g, {sigma_for_snr(g, 7.3), 0}), 7.3, 1e-9);
    ChannelGain z = g;
    z.beta = {cplx(0.0, 0.0)};
    EXPECT_THROW(snr_of(z, {1.0, 0}), Error);
}

TEST(Wavefield, NfzRoundTripAndLayout) {
    Scenario sc;
    sc.array = ArrayConfig::from_carrier(4, 4, 2, 28e9);
    sc.pulse.n_pulses = 3;
    sc.gain = radar_gains(sc.array, sc.target.p0, RadarEquation{}, cplx(1.0, 0.0));
    sc.noise = {1e-3, 5};
    SnapshotFile f{2, 3, 2, 2, 1e-3, synthesize_all(sc)};
    const std::string path = ::testing::TempDir() + "nfz_roundtrip.nfz";
    write_nfz(path, f);
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    ASSERT_NE(fp, nullptr);
    unsigned char head[32];
    ASSERT_EQ(std::fread(head, 1, 32, fp), 32u);
    std::fseek(fp, 0, SEEK_END);
    const long size = std::ftell(fp);
    std::fclose(fp);
    EXPECT_EQ(std::string(reinterpret_cast<char*>(head), 4), "NFZ1");
    EXPECT_EQ(head[4], 2);   // M
    EXPECT_EQ(head[8], 3);   // L
    EXPECT_EQ(head[28], 1);  // first record m, one-based
    EXPECT_EQ(head[30], 1);  // first record n
    EXPECT_EQ(size, 4 + 16 + 8 + 4 * (4 + 2 * 2 * 3 * 16));
    const SnapshotFile g = read_nfz(path);
    ASSERT_EQ(g.snapshots.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(g.snapshots[k].m, f.snapshots[k].m);
        EXPECT_EQ(g.snapshots[k].n, f.snapshots[k].n);
        EXPECT_EQ(g.snapshots[k].data, f.snapshots[k].data);
    }
}
