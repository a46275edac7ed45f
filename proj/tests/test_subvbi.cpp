#include <gtest/gtest.h>

#include <random>

#include <nfvmp/subvbi.hpp>
#include <nfvmp/testing/selftest.hpp>

using namespace nfvmp;

namespace {
SubarraySnapshot make(double th, double ph, double f, int M, int L, double sigma, std::uint64_t seed,
                      cplx beta = 1.0) {
    SubarraySnapshot s{0, 0, M, L, beta * kron_steering(ph, th, f, M, L)};
    if (sigma > 0.0) add_noise(s.data, sigma, seed, 0, 0);
    return s;
}

SubarrayPosterior point_mass(double th, double ph, double f, cplx beta) {
    SubarrayPosterior p;
    p.eta_theta = VonMisesParam::from_polar(1e12, th);
    p.eta_phi = VonMisesParam::from_polar(1e12, ph);
    p.eta_f = VonMisesParam::from_polar(1e12, f);
    p.beta_mean = beta;
    return p;
}
}  // namespace

TEST(Subvbi, RearrangeExamples) {
    SubarraySnapshot s{0, 0, 2, 2, VecC(8)};
    for (int k = 0; k < 8; ++k) s.data[k] = double(k);
    const VecC p1 = rearrange(s, Permutation::P1);
    const double want[8] = {0, 1, 4, 5, 2, 3, 6, 7};
    for (int k = 0; k < 8; ++k) EXPECT_EQ(p1[k].real(), want[k]);
    SubarraySnapshot one{0, 0, 1, 5, VecC::LinSpaced(5, 0.0, 4.0).cast<cplx>()};
    EXPECT_EQ(rearrange(one, Permutation::P1), one.data);
    SubarraySnapshot flat{0, 0, 3, 1, VecC::LinSpaced(9, 0.0, 8.0).cast<cplx>()};
    EXPECT_EQ(rearrange(flat, Permutation::P2), flat.data);
    const SubarraySnapshot r = make(0.2, 0.3, 0.4, 3, 4, 0.1, 1);
    EXPECT_NEAR(rearrange(r, Permutation::P2).norm(), r.data.norm(), 1e-12);
    SubarraySnapshot bad{0, 0, 2, 2, VecC(7)};
    EXPECT_THROW(rearrange(bad, Permutation::P1), Error);
}

TEST(Subvbi, ConjugateParamsPeakAtTruth) {
    const double th = 0.7, ph = -1.1, f = 0.4;
    const SubarraySnapshot s = make(th, ph, f, 8, 16, 0.0, 0);
    const SubarrayPosterior cur = point_mass(th, ph, f, 1.0);
    const int G = 8192;
    struct Case {
        Axis axis;
        double truth;
    } cases[] = {{Axis::phi, ph}, {Axis::theta, th}, {Axis::f, f}};
    for (const Case& c : cases) {
        const HarmonicObjective g = conjugate_params(s, c.axis, cur, 1.0);
        double best = -1e300, arg = 0.0;
        for (int i = 0; i < G; ++i) {
            const double x = -kPi + 2.0 * kPi * i / G;
            const double v = g.value(x);
            if (v > best) {
                best = v;
                arg = x;
            }
        }
        EXPECT_LT(oracles::circular_distance(arg, c.truth), 2.0 * kPi / G);
    }
}

TEST(Subvbi, ZeroDataLeavesPrior) {
    SubarraySnapshot s{0, 0, 4, 8, VecC::Zero(128)};
    VmPriors pri;
    pri.theta = VonMisesParam::from_polar(2.0, 0.5);
    const HarmonicObjective g = conjugate_params(s, Axis::theta, point_mass(0.1, 0.2, 0.3, 1.0), 1.0, pri);
    for (double x : {-2.0, 0.0, 1.3}) EXPECT_NEAR(g.value(x), 2.0 * std::cos(x - 0.5), 1e-12);
    const VonMisesParam post = vm_update(g);
    EXPECT_NEAR(post.mu(), 0.5, 1e-9);
}

TEST(Subvbi, ConjugateParamsLinearInData) {
    const SubarraySnapshot s = make(0.3, 0.1, -0.6, 4, 8, 0.05, 3);
    SubarraySnapshot neg = s;
    neg.data = -s.data;
    const SubarrayPosterior cur = point_mass(0.3, 0.1, -0.6, cplx(0.5, 0.2));
    const HarmonicObjective a = conjugate_params(s, Axis::phi, cur, 1.0), b = conjugate_params(neg, Axis::phi, cur, 1.0);
    for (double x : {-1.0, 0.2, 2.5}) EXPECT_NEAR(a.value(x), -b.value(x), 1e-12);
}

TEST(Subvbi, VmUpdateSingleHarmonic) {
    HarmonicObjective g{{0.0, std::polar(4.0, -1.2)}};
    const VonMisesParam p = vm_update(g);
    EXPECT_NEAR(p.mu(), 1.2, 1e-10);
    EXPECT_NEAR(p.kappa(), a_inverse(std::exp(-1.0 / 8.0)), 1e-8);
}

TEST(Subvbi, VmUpdateTwoHarmonics) {
    HarmonicObjective g{{0.0, 1.0, 1.0}};
    double v, g1, g2;
    g.eval(0.0, v, g1, g2);
    EXPECT_NEAR(g2, -5.0, 1e-14);
    const VonMisesParam p = vm_update(g);
    EXPECT_NEAR(p.mu(), 0.0, 1e-12);
    EXPECT_NEAR(p.kappa(), a_inverse(std::exp(-0.1)), 1e-8);
}

TEST(Subvbi, VmUpdateNoiselessAngle) {
    const double th = -0.913;
    const SubarraySnapshot s = make(th, 0.4, 0.2, 16, 16, 0.0, 0);
    const VonMisesParam p = vm_update(conjugate_params(s, Axis::theta, point_mass(0.0, 0.4, 0.2, 1.0), 1.0));
    EXPECT_LT(oracles::circular_distance(p.mu(), th), 1e-4);
}

TEST(Subvbi, FlatObjectiveIsRejected) {
    HarmonicObjective g{{0.0, 0.0, 0.0}};
    EXPECT_THROW(vm_update(g), Error);
}

TEST(Subvbi, BetaUpdateExamples) {
    // sigma = 1, varsigma = 1, ||mu||^2 = 4, z = mu: beta = 4/5.
    SubarraySnapshot s{0, 0, 2, 1, kron_steering(0.0, 0.0, 0.0, 2, 1)};
    SubarrayPosterior cur = point_mass(0.0, 0.0, 0.0, 0.0);
    cur.eta_theta = VonMisesParam::from_polar(1e300, 0.0);
    cur.eta_phi = VonMisesParam::from_polar(1e300, 0.0);
    cur.eta_f = VonMisesParam::from_polar(1e300, 0.0);
    BetaUpdate b = beta_update(s, cur, 1.0, 1.0);
    EXPECT_NEAR(b.mu_norm2, 4.0, 1e-12);
    EXPECT_NEAR(std::abs(b.mean - cplx(0.8, 0.0)), 0.0, 1e-12);
    EXPECT_NEAR(b.var, 1.0 / (2.0 * 5.0), 1e-12);
    SubarraySnapshot zero = s;
    zero.data.setZero();
    b = beta_update(zero, cur, 2.0, 3.0);
    EXPECT_EQ(b.mean, cplx(0.0, 0.0));
    EXPECT_NEAR(b.var, 3.0 * 2.0 / (2.0 * (2.0 + 3.0 * 4.0)), 1e-12);
    const cplx beta0(0.3, -1.4);
    SubarraySnapshot big{0, 0, 4, 8, beta0 * kron_steering(0.2, 0.5, 0.9, 4, 8)};
    b = beta_update(big, point_mass(0.5, 0.2, 0.9, 1.0), 1e-3, 1e12);
    EXPECT_NEAR(std::abs(b.mean - beta0), 0.0, 1e-9);
}

TEST(Subvbi, MomentShrinkage) {
    const SubarraySnapshot s = make(0.1, 0.2, 0.3, 4, 8, 0.5, 5);
    for (double k : {0.1, 3.0, 300.0}) {
        SubarrayPosterior p;
        p.eta_theta = VonMisesParam::from_polar(k, 0.1);
        p.eta_phi = VonMisesParam::from_polar(k, 0.2);
        p.eta_f = VonMisesParam::from_polar(k, 0.3);
        EXPECT_LT(beta_update(s, p, 1.0, 1.0).mu_norm2, 4.0 * 4.0 * 8.0);
    }
}

TEST(Subvbi, HyperUpdateExamples) {
    const SubarraySnapshot s = make(0.1, 0.2, 0.3, 4, 8, 0.0, 0, cplx(2.0, 0.0));
    SubarrayPosterior exact = point_mass(0.1, 0.2, 0.3, cplx(2.0, 0.0));
    exact.eta_theta = VonMisesParam::from_polar(1e300, 0.1);
    exact.eta_phi = VonMisesParam::from_polar(1e300, 0.2);
    exact.eta_f = VonMisesParam::from_polar(1e300, 0.3);
    exact.beta_var = 0.0;
    EXPECT_NEAR(hyper_update(s, exact).sigma_hat, 1e-12, 1e-13);
    SubarrayPosterior none = exact;
    none.beta_mean = 0.0;
    const HyperUpdate h = hyper_update(s, none);
    EXPECT_NEAR(h.sigma_hat, s.data.squaredNorm() / 128.0, 1e-12);
    EXPECT_EQ(h.varsigma_hat, 0.0);
}

TEST(Subvbi, NoiselessRecovery) {
    const double th = 1.234, ph = -0.321, f = 2.0;
    const SubarrayPosterior p = run_cavi(make(th, ph, f, 16, 32, 1e-14, 9));
    EXPECT_LT(oracles::circular_distance(p.eta_theta.mu(), th), 1e-3);
    EXPECT_LT(oracles::circular_distance(p.eta_phi.mu(), ph), 1e-3);
    EXPECT_LT(oracles::circular_distance(p.eta_f.mu(), f), 1e-3);
}

TEST(Subvbi, ElboIsNonDecreasing) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const SubarrayPosterior p = run_cavi(make(0.4, -0.9, 1.7, 8, 16, 0.5, seed));
        for (std::size_t i = 1; i < p.elbo.size(); ++i)
            EXPECT_GE(p.elbo[i], p.elbo[i - 1] - 1e-8 * std::max(1.0, std::abs(p.elbo[i - 1])))
                << "seed " << seed << " sweep " << i;
    }
}

TEST(Subvbi, PermutationConsistency) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-2.5, 2.5);
    for (int k = 0; k < 10; ++k) {
        const SubarraySnapshot s = make(u(rng), u(rng), u(rng), 8, 12, 0.2, 100 + k, cplx(0.7, 0.4));
        CaviOptions swapped;
        swapped.theta_first = true;
        const SubarrayPosterior a = run_cavi(s), b = run_cavi(swap_roles(s), {}, swapped);
        EXPECT_NEAR(std::abs(a.eta_theta.eta - b.eta_phi.eta), 0.0, 1e-10 * std::max(1.0, a.eta_theta.kappa()));
        EXPECT_NEAR(std::abs(a.eta_phi.eta - b.eta_theta.eta), 0.0, 1e-10 * std::max(1.0, a.eta_phi.kappa()));
        EXPECT_NEAR(std::abs(a.eta_f.eta - b.eta_f.eta), 0.0, 1e-10 * std::max(1.0, a.eta_f.kappa()));
    }
}

TEST(Subvbi, ConcentrationGrowsWithSnr) {
    std::vector<double> k0, k10;
    for (std::uint64_t s = 0; s < 50; ++s) {
        k0.push_back(run_cavi(make(0.5, 0.1, 0.9, 8, 16, 1.0, s)).eta_theta.kappa());
        k10.push_back(run_cavi(make(0.5, 0.1, 0.9, 8, 16, 0.1, s)).eta_theta.kappa());
    }
    std::nth_element(k0.begin(), k0.begin() + 25, k0.end());
    std::nth_element(k10.begin(), k10.begin() + 25, k10.end());
    EXPECT_GT(k10[25], k0[25]);
}

TEST(Subvbi, DopplerNearBranchCut) {
    for (double f : {kPi - 0.01, -kPi + 0.01}) {
        const SubarrayPosterior p = run_cavi(make(0.3, -0.2, f, 8, 32, 0.1, 4));
        EXPECT_LT(oracles::circular_distance(p.eta_f.mu(), f), 0.02);
    }
}

TEST(Subvbi, SigmaCalibratedAtZeroDb) {
    std::vector<double> s;
    for (std::uint64_t k = 0; k < 100; ++k) s.push_back(run_cavi(make(0.5, -0.4, 1.1, 8, 16, 1.0, 300 + k)).sigma_hat);
    std::nth_element(s.begin(), s.begin() + 50, s.end());
    EXPECT_GE(s[50], 0.8);
    EXPECT_LE(s[50], 1.2);
}

TEST(Subvbi, PureNoiseDoesNotCrash) {
    SubarraySnapshot s{0, 0, 8, 16, VecC::Zero(1024)};
    add_noise(s.data, 1.0, 77, 0, 0);
    const SubarrayPosterior p = run_cavi(s);
    EXPECT_TRUE(std::isfinite(p.eta_theta.kappa()));
    EXPECT_TRUE(std::isfinite(p.eta_f.kappa()));
    EXPECT_GT(p.sigma_hat, 0.0);
    EXPECT_GE(p.beta_var, 0.0);
}

TEST(Subvbi, MatchesBruteForceMap) { EXPECT_GE(oracles::cavi_vs_map_rate(30, 5), 0.95); }
