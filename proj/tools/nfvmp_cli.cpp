#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <nfvmp/harness.hpp>
#include <nfvmp/testing/selftest.hpp>

using namespace nfvmp;

namespace {

struct Common {
    std::string config, preset_name;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out;
};

ExperimentConfig load(const Common& c) {
    if (!c.config.empty() && !c.preset_name.empty()) throw ConfigError("use either --config or --preset");
    ExperimentConfig cfg;
    if (!c.config.empty()) cfg = load_config(c.config);
    else if (!c.preset_name.empty()) cfg = preset(c.preset_name);
    else throw ConfigError("a scenario is required (--config PATH or --preset desk|table2)");
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    return cfg;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "flat key = value scenario file");
    sub->add_option("--preset", c.preset_name, "built-in scenario: desk or table2");
    sub->add_option("--seed", c.seed, "64-bit seed");
    sub->add_option("--threads", c.threads, "worker threads (0: all cores)");
}

void print_kv(const std::string& k, const std::string& v) { std::cout << k << ": " << v << "\n"; }

std::string vec(const Vec2& v) { return detail::num(v.x()) + ", " + detail::num(v.y()); }

int cmd_simulate(const Common& c, std::optional<double> snr) {
    ExperimentConfig cfg = load(c);
    if (c.out.empty()) throw ConfigError("--out is required");
    Scenario sc = scenario_for(cfg, cfg.sweep_param == "snr_db" ? (snr ? *snr : cfg.snr_db) : cfg.sweep_values[0]);
    if (snr) sc.noise.sigma = sigma_for_snr(sc.gain, *snr);
    sc.noise.rng_seed = cfg.seed;
    SnapshotFile f;
    f.M = sc.array.m_sub;
    f.L = sc.pulse.n_pulses;
    f.k_t = sc.array.k_t();
    f.k_r = sc.array.k_r();
    f.sigma = sc.noise.sigma;
    f.snapshots = synthesize_all(sc);
    write_nfz(c.out, f);
    print_kv("file", c.out);
    print_kv("pairs", std::to_string(f.snapshots.size()));
    print_kv("sigma", detail::num(f.sigma));
    print_kv("snr_db", detail::num(snr_of(sc.gain, sc.noise)));
    return 0;
}

int cmd_estimate(const Common& c, const std::string& file, const std::string& method) {
    ExperimentConfig cfg = load(c);
    const SnapshotFile f = read_nfz(file);
    if (f.M != cfg.array.m_sub || f.L != cfg.pulse.n_pulses || f.k_t != cfg.array.k_t() || f.k_r != cfg.array.k_r())
        throw ConfigError("snapshot file shape disagrees with the configuration");
    if (cfg.subarray_location == SubarrayLocationMode::delay)
        throw ConfigError("delay-based location needs delay estimates, which snapshot files do not carry");
    MethodContext ctx;
    ctx.vel_pairs = velocity_pairs(cfg, cfg.array);
    ctx.snapshots = &f.snapshots;
    // Grid windows are centred on the configured target state.
    ctx.grids = cfg.grids;
    ctx.grids.location.center = cfg.target.p0;
    ctx.grids.velocity.center = cfg.target.v0;
    AngularMessageSet msgs;
    if (method == "vmp-system" || method == "vmp-subarray" || method == "subarray-avg") {
        std::vector<SubarrayPosterior> posts(f.snapshots.size());
        std::vector<double> secs(posts.size());
        parallel_for(int(posts.size()), cfg.threads, [&](int k) {
            const auto t0 = detail::Clock::now();
            posts[k] = run_cavi(f.snapshots[k], VmPriors{}, cfg.cavi);
            secs[k] = detail::seconds_since(t0);
        });
        for (double s : secs) ctx.cavi_seconds += s;
        msgs = build_messages(posts, f.k_t, f.k_r);
        for (const auto& w : msgs.warnings) std::cerr << "warning: " << w << "\n";
        ctx.msgs = &msgs;
    }
    const PointEstimate e = run_method(method, cfg, cfg.array, cfg.pulse, ctx);
    print_kv("method", method);
    print_kv("p_hat", vec(e.p));
    print_kv("v_hat", vec(e.v));
    print_kv("runtime_s", detail::num(e.seconds));
    return 0;
}

int cmd_crb(const Common& c, std::optional<double> snr) {
    ExperimentConfig cfg = load(c);
    const double value = cfg.sweep_param == "snr_db" ? (snr ? *snr : cfg.snr_db) : cfg.sweep_values[0];
    Scenario sc = scenario_for(cfg, value);
    if (snr) sc.noise.sigma = sigma_for_snr(sc.gain, *snr);
    const FisherReport r = compute_crb(sc);
    print_kv("snr_db", detail::num(snr_of(sc.gain, sc.noise)));
    print_kv("sqrt_crb_p_m", detail::num(r.sqrt_crb_p()));
    print_kv("sqrt_crb_v_mps", detail::num(r.sqrt_crb_v()));
    print_kv("crb_p_db", detail::num(r.crb_p_db()));
    print_kv("crb_v_db", detail::num(r.crb_v_db()));
    print_kv("rank_deficient", r.rank_deficient ? "true" : "false");
    return 0;
}

int cmd_sweep(const Common& c, const std::string& param, const std::string& values, std::optional<int> trials,
              const std::string& methods, const std::string& trial_out, bool quiet) {
    ExperimentConfig cfg = load(c);
    if (!param.empty()) cfg.sweep_param = param;
    if (!values.empty()) cfg.sweep_values = parse_values("--values", values);
    if (trials) cfg.trials = *trials;
    if (!methods.empty()) cfg.methods = detail::split_list(methods);
    if (!c.out.empty()) cfg.output = c.out;
    if (!trial_out.empty()) cfg.trial_output = trial_out;
    if (cfg.output.empty()) throw ConfigError("--out is required");
    cfg.validate();
    ProgressFn progress;
    if (!quiet)
        progress = [&](double v, int t) {
            std::fprintf(stderr, "\r%s = %g: trial %d/%d", cfg.sweep_param.c_str(), v, t + 1, cfg.trials);
            if (t + 1 == cfg.trials) std::fprintf(stderr, "\n");
        };
    const ExperimentResult res = run_experiment(cfg, progress);
    emit_csv(res.rows, cfg.output);
    if (!cfg.trial_output.empty()) write_text(cfg.trial_output, trials_csv_text(res.trials));
    for (const auto& r : res.rows)
        if (r.flagged())
            std::cerr << "warning: " << r.method << " at " << r.sweep_param << " = " << r.sweep_value
                      << " failed in more than half of the trials\n";
    std::cout << csv_text(res.rows);
    return 0;
}

int cmd_selftest() {
    bool all = true;
    for (const auto& r : oracles::run_selftest()) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
        all = all && r.pass;
    }
    return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Near-field MIMO radar location and velocity estimation toolkit"};
    app.require_subcommand(1);
    Common c;
    std::optional<double> snr;
    std::string file, method = "vmp-system", param, values, methods, trial_out;
    std::optional<int> trials;
    bool quiet = false;

    auto* sim = app.add_subcommand("simulate", "synthesize snapshots to an NFZ1 file");
    add_common(sim, c);
    sim->add_option("--out", c.out, "output file")->required();
    sim->add_option("--snr", snr, "receive SNR in dB (default: snr_db key)");

    auto* est = app.add_subcommand("estimate", "run one method on an NFZ1 file");
    add_common(est, c);
    est->add_option("snapshots", file, "NFZ1 snapshot file")->required();
    est->add_option("--method", method, "vmp-system, vmp-subarray, subarray-avg, ml or grid-music");

    auto* crb = app.add_subcommand("crb", "print the Cramer-Rao bounds of a scenario");
    add_common(crb, c);
    crb->add_option("--snr", snr, "receive SNR in dB (default: snr_db key)");

    auto* sweep = app.add_subcommand("sweep", "Monte Carlo sweep to CSV");
    add_common(sweep, c);
    sweep->add_option("--out", c.out, "aggregate CSV path");
    sweep->add_option("--param", param, "snr_db, speed, distance, m_sub or L");
    sweep->add_option("--values", values, "comma-separated sweep values");
    sweep->add_option("--trials", trials, "trials per sweep value");
    sweep->add_option("--method", methods, "comma-separated method list");
    sweep->add_option("--trials-out", trial_out, "per-trial long-format CSV path");
    sweep->add_flag("--quiet", quiet, "no progress output");

    auto* self = app.add_subcommand("selftest", "run the oracle checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        if (*sim) return cmd_simulate(c, snr);
        if (*est) return cmd_estimate(c, file, method);
        if (*crb) return cmd_crb(c, snr);
        if (*sweep) return cmd_sweep(c, param, values, trials, methods, trial_out, quiet);
        if (*self) return cmd_selftest();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 3;
}
