#include <gtest/gtest.h>

#include <nfvmp/harness.hpp>

using namespace nfvmp;

namespace {
Scenario compact(double snr_db, std::uint64_t seed = 0) {
    ExperimentConfig c = preset("desk");
    c.array = ArrayConfig::from_carrier(16, 16, 8, 28e9);
    c.pulse.n_pulses = 32;
    Scenario sc = scenario_for(c, snr_db);
    sc.noise.rng_seed = seed;
    return sc;
}

Scenario noiseless(Scenario sc) {
    sc.noise.sigma = 0.0;
    return sc;
}

GaussianEstimate2D gauss(Vec2 m, double s = 1.0) { return {m, s * Mat2::Identity()}; }
}  // namespace

TEST(Baselines, MlCostVanishesAtTruthWithoutNoise) {
    const Scenario sc = noiseless(compact(20.0));
    const auto snaps = synthesize_all(sc);
    const MlObjective J(snaps, sc.array, sc.pulse);
    double z2 = 0.0;
    for (const auto& s : snaps) z2 += s.data.squaredNorm();
    EXPECT_LT(J(sc.target.p0, sc.target.v0), 1e-12 * z2);
    EXPECT_GT(J(sc.target.p0 + Vec2(0.3, 0.0), sc.target.v0), 1e-6 * z2);
    EXPECT_TRUE(std::isinf(J(Vec2(1.0, -1.0), sc.target.v0)));
    const BaselineResult r = ml_estimate(snaps, sc.array, sc.pulse, sc.target.p0, sc.target.v0);
    EXPECT_LT(r.objective, 1e-12 * z2);
    EXPECT_LT((r.p_hat - sc.target.p0).norm(), 1e-5);
    EXPECT_LT((r.v_hat - sc.target.v0).norm(), 1e-4);
    EXPECT_TRUE(r.converged);
}

TEST(Baselines, MlConvergesFromDisplacedStart) {
    const Scenario base = compact(20.0);
    const FisherReport crb = compute_crb(base);
    int ok = 0;
    for (int k = 0; k < 50; ++k) {
        Scenario sc = base;
        sc.noise.rng_seed = derive_seed(40, std::uint64_t(k));
        const auto snaps = synthesize_all(sc);
        const BaselineResult r = ml_estimate(snaps, sc.array, sc.pulse, sc.target.p0 + Vec2(0.3, 0.4),
                                             sc.target.v0 + Vec2(1.2, 1.6));
        ok += (r.p_hat - sc.target.p0).norm() < 3.0 * crb.sqrt_crb_p() &&
              (r.v_hat - sc.target.v0).norm() < 3.0 * crb.sqrt_crb_v();
    }
    EXPECT_GE(ok, 40);
}

TEST(Baselines, MlRejectsMismatchedSnapshots) {
    const Scenario sc = compact(20.0);
    auto snaps = synthesize_all(sc);
    snaps.pop_back();
    EXPECT_THROW(ml_estimate(snaps, sc.array, sc.pulse, sc.target.p0, sc.target.v0), Error);
}

TEST(Baselines, GridRecoversNodeWithoutNoise) {
    const Scenario sc = noiseless(compact(20.0));
    const auto snaps = synthesize_all(sc);
    MusicGrids g;
    g.location = {sc.target.p0 + Vec2(0.2, -0.1), 0.1, 4};
    g.velocity = {sc.target.v0 + Vec2(-0.3, 0.2), 0.1, 5};
    const BaselineResult r = grid_music(snaps, sc.array, sc.pulse, g);
    EXPECT_LT((r.p_hat - sc.target.p0).norm(), 1e-9);
    EXPECT_LT((r.v_hat - sc.target.v0).norm(), 1e-9);
    EXPECT_EQ(r.grid_size, 81 + 121);
}

TEST(Baselines, EmptyGridIsRejected) {
    const Scenario sc = compact(20.0);
    const auto snaps = synthesize_all(sc);
    MusicGrids g;
    g.location.step = 0.0;
    EXPECT_THROW(grid_music(snaps, sc.array, sc.pulse, g), Error);
    g = MusicGrids{};
    g.velocity.half_cells = -1;
    EXPECT_THROW(grid_music(snaps, sc.array, sc.pulse, g), Error);
}

TEST(Baselines, GridFloorAndResolution) {
    // Noiseless truth at a random sub-cell offset: the error is pure quantization.
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    const Scenario sc = noiseless(compact(20.0));
    const auto snaps = synthesize_all(sc);
    const GridPower power(snaps, sc.array, sc.pulse);
    auto floor_for = [&](double step) {
        double se = 0.0;
        std::mt19937_64 r2(99);
        for (int k = 0; k < 30; ++k) {
            const GridSpec g{sc.target.p0 + step * Vec2(u(r2), u(r2)), step, 3};
            const Vec2 p = grid_argmax(g, power).first;
            se += (p - sc.target.p0).squaredNorm();
        }
        return std::sqrt(se / 30.0);
    };
    const double coarse = floor_for(0.1), fine = floor_for(0.05);
    EXPECT_GE(coarse, 0.1 / std::sqrt(12.0));
    EXPECT_NEAR(fine / coarse, 0.5, 0.15);
}

TEST(Baselines, CoarseStageMatchesFineSearch) {
    const Scenario sc = compact(10.0, 3);
    const auto snaps = synthesize_all(sc);
    const GridPower power(snaps, sc.array, sc.pulse);
    const GridSpec coarse{sc.target.p0, 0.1, 5};
    const GridSpec fine{sc.target.p0, 0.01, 50};
    const Vec2 a = grid_argmax(coarse, power).first, b = grid_argmax(fine, power).first;
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 0.1 + 1e-12);
}

TEST(Baselines, SubarrayAverageIdenticalEstimates) {
    DistributedLocation loc;
    loc.per_pair = {gauss(Vec2(1.0, 2.0)), gauss(Vec2(1.0, 2.0)), gauss(Vec2(1.0, 2.0))};
    loc.valid = {true, true, true};
    DistributedVelocity vel;
    vel.per_config = {gauss(Vec2(3.0, 4.0)), gauss(Vec2(3.0, 4.0))};
    const BaselineResult r = subarray_average(loc, vel);
    EXPECT_EQ(r.p_hat, Vec2(1.0, 2.0));
    EXPECT_EQ(r.v_hat, Vec2(3.0, 4.0));
}

TEST(Baselines, SubarrayAverageOutlierShift) {
    const int K = 16;
    DistributedLocation loc;
    for (int k = 0; k < K; ++k) loc.per_pair.push_back(gauss(Vec2(5.0, 5.0), 1e-4));
    loc.valid.assign(K, true);
    const Vec2 shift(2.0, -3.2);
    loc.per_pair[7].mean += shift;
    loc.per_pair[7].cov = 100.0 * Mat2::Identity();
    const Vec2 avg = average_location(loc);
    EXPECT_LT((avg - (Vec2(5.0, 5.0) + shift / K)).norm(), 1e-12);
    // Covariance weighting suppresses the same outlier.
    const GaussianEstimate2D fused = fuse_gaussians(loc.per_pair);
    EXPECT_LT((fused.mean - Vec2(5.0, 5.0)).norm(), 1e-5 * shift.norm());
    loc.valid[7] = false;
    EXPECT_LT((average_location(loc) - Vec2(5.0, 5.0)).norm(), 1e-12);
}

TEST(Baselines, EqualCovarianceAverageMatchesFusion) {
    Mat2 C;
    C << 0.4, 0.1, 0.1, 0.2;
    DistributedLocation loc;
    for (Vec2 m : {Vec2(1.0, 2.0), Vec2(1.3, 1.7), Vec2(0.8, 2.4)}) loc.per_pair.push_back({m, C});
    loc.valid.assign(3, true);
    EXPECT_LT((average_location(loc) - fuse_gaussians(loc.per_pair).mean).norm(), 1e-12);
    DistributedVelocity vel;
    EXPECT_THROW(average_velocity(vel), Error);
    loc.valid.assign(3, false);
    EXPECT_THROW(average_location(loc), Error);
}
