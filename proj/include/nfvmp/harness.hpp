#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "baselines.hpp"
#include "crb.hpp"
#include "error.hpp"
#include "fusion.hpp"
#include "geometry.hpp"
#include "subvbi.hpp"
#include "wavefield.hpp"

namespace nfvmp {

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"vmp-system", "vmp-subarray", "ml", "grid-music", "subarray-avg"};
    return m;
}

inline const std::vector<std::string>& known_sweep_params() {
    static const std::vector<std::string> p{"snr_db", "speed", "distance", "m_sub", "L"};
    return p;
}

enum class SubarrayLocationMode { bearing, delay };

struct ExperimentConfig {
    ArrayConfig array;
    PulseConfig pulse;
    TargetState target;
    RadarEquation radar;
    SynthMode synth = SynthMode::subarray_exact;
    double snr_db = 10.0;
    std::string sweep_param = "snr_db";
    std::vector<double> sweep_values{10.0};
    std::vector<std::string> methods{"vmp-system"};
    int trials = 50;
    std::uint64_t seed = 1;
    int threads = 0;  // 0: hardware concurrency
    std::string output;
    std::string trial_output;

    CaviOptions cavi;
    SubarrayLocationMode subarray_location = SubarrayLocationMode::bearing;
    double delay_std = -1.0;  // seconds; negative means 1 / (2 B)
    bool full_velocity_configs = false;
    double velocity_max_condition = 1e6;
    MlOptions ml;
    MusicGrids grids;  // centers are placed per trial

    void validate() const {
        array.validate();
        pulse.validate();
        validate_target(target);
        if (trials < 1) throw ConfigError("trials must be at least 1");
        if (sweep_values.empty()) throw ConfigError("sweep values must be nonempty");
        if (methods.empty()) throw ConfigError("method set must be nonempty");
        for (const auto& m : methods)
            if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
                throw ConfigError("unknown method '" + m + "'");
        if (std::find(known_sweep_params().begin(), known_sweep_params().end(), sweep_param) ==
            known_sweep_params().end())
            throw ConfigError("unknown sweep parameter '" + sweep_param + "'");
        grids.location.validate();
        grids.velocity.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    double x = 0.0;
    const char* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': not a number: '" + v + "'");
    return x;
}

inline long long parse_int(const std::string& key, const std::string& v) {
    long long x = 0;
    const char* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': not an integer: '" + v + "'");
    return x;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t x = 0;
    const char* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': not an unsigned integer");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': not a boolean: '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace detail

inline std::vector<double> parse_values(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& s : detail::split_list(v)) out.push_back(detail::parse_double(key, s));
    if (out.empty()) throw ConfigError("key '" + key + "': empty list");
    return out;
}

/// Flat `key = value` lines; `#` starts a comment. Unknown keys and missing required keys are errors.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError("duplicate key '" + key + "'");
        kv[key] = val;
    }
    return kv;
}

inline ExperimentConfig config_from_map(const std::map<std::string, std::string>& kv) {
    for (const char* req : {"n_tx", "n_rx", "m_sub", "fc"})
        if (!kv.count(req)) throw ConfigError(std::string("missing required key '") + req + "'");
    using detail::parse_double;
    using detail::parse_int;
    ExperimentConfig c;
    const double fc = parse_double("fc", kv.at("fc"));
    const double d0 = kv.count("d0") ? parse_double("d0", kv.at("d0")) : 1.0;
    c.array = ArrayConfig::from_carrier(int(parse_int("n_tx", kv.at("n_tx"))), int(parse_int("n_rx", kv.at("n_rx"))),
                                        int(parse_int("m_sub", kv.at("m_sub"))), fc, d0);
    c.pulse.fc = fc;
    double grid_step = c.grids.location.step, vgrid_step = c.grids.velocity.step;
    int grid_half = c.grids.location.half_cells, vgrid_half = c.grids.velocity.half_cells;
    std::string loc_mode;
    for (const auto& [k, v] : kv) {
        if (k == "n_tx" || k == "n_rx" || k == "m_sub" || k == "fc" || k == "d0") continue;
        if (k == "d_spacing") c.array.d_spacing = parse_double(k, v);
        else if (k == "pri") c.pulse.pri = parse_double(k, v);
        else if (k == "n_pulses") c.pulse.n_pulses = int(parse_int(k, v));
        else if (k == "bandwidth") c.pulse.bandwidth = parse_double(k, v);
        else if (k == "x0") c.target.p0.x() = parse_double(k, v);
        else if (k == "y0") c.target.p0.y() = parse_double(k, v);
        else if (k == "vx") c.target.v0.x() = parse_double(k, v);
        else if (k == "vy") c.target.v0.y() = parse_double(k, v);
        else if (k == "pt_dbm") c.radar.pt_w = dbm_to_watt(parse_double(k, v));
        else if (k == "gain_db") c.radar.gt = c.radar.gr = db_to_linear(parse_double(k, v));
        else if (k == "rcs_var") c.radar.rcs_var = parse_double(k, v);
        else if (k == "synth_mode") {
            if (v == "subarray") c.synth = SynthMode::subarray_exact;
            else if (v == "antenna") c.synth = SynthMode::antenna_exact;
            else throw ConfigError("key 'synth_mode': expected subarray or antenna");
        } else if (k == "snr_db") c.snr_db = parse_double(k, v);
        else if (k == "sweep_param") c.sweep_param = v;
        else if (k == "sweep_values") c.sweep_values = parse_values(k, v);
        else if (k == "methods") c.methods = detail::split_list(v);
        else if (k == "trials") c.trials = int(parse_int(k, v));
        else if (k == "seed") c.seed = detail::parse_u64(k, v);
        else if (k == "threads") c.threads = int(parse_int(k, v));
        else if (k == "output") c.output = v;
        else if (k == "trial_output") c.trial_output = v;
        else if (k == "cavi_max_iters") c.cavi.max_iters = int(parse_int(k, v));
        else if (k == "cavi_eps") c.cavi.eps = parse_double(k, v);
        else if (k == "cavi_kappa_init") c.cavi.kappa_init = parse_double(k, v);
        else if (k == "sigma_form") {
            if (v == "residual") c.cavi.sigma_form = SigmaForm::residual;
            else if (v == "verbatim") c.cavi.sigma_form = SigmaForm::verbatim;
            else throw ConfigError("key 'sigma_form': expected residual or verbatim");
        } else if (k == "subarray_location") loc_mode = v;
        else if (k == "delay_std") c.delay_std = parse_double(k, v);
        else if (k == "full_velocity_configs") c.full_velocity_configs = detail::parse_bool(k, v);
        else if (k == "velocity_max_condition") c.velocity_max_condition = parse_double(k, v);
        else if (k == "ml_max_iters") c.ml.max_iters = int(parse_int(k, v));
        else if (k == "ml_preconditioner") {
            if (v == "hessian") c.ml.preconditioner = MlPreconditioner::hessian;
            else if (v == "diagonal") c.ml.preconditioner = MlPreconditioner::diagonal;
            else throw ConfigError("key 'ml_preconditioner': expected hessian or diagonal");
        } else if (k == "grid_step") grid_step = parse_double(k, v);
        else if (k == "grid_half_cells") grid_half = int(parse_int(k, v));
        else if (k == "vgrid_step") vgrid_step = parse_double(k, v);
        else if (k == "vgrid_half_cells") vgrid_half = int(parse_int(k, v));
        else if (k == "music_smoothing") c.grids.smoothing_len = int(parse_int(k, v));
        else throw ConfigError("unknown key '" + k + "'");
    }
    if (loc_mode == "delay") c.subarray_location = SubarrayLocationMode::delay;
    else if (loc_mode.empty() || loc_mode == "bearing") c.subarray_location = SubarrayLocationMode::bearing;
    else throw ConfigError("key 'subarray_location': expected bearing or delay");
    c.grids.location.step = grid_step;
    c.grids.location.half_cells = grid_half;
    c.grids.velocity.step = vgrid_step;
    c.grids.velocity.half_cells = vgrid_half;
    try {
        c.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline ExperimentConfig parse_config(const std::string& text) { return config_from_map(parse_key_values(text)); }

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

inline const char* desk_preset_text() {
    return "n_tx = 64\nn_rx = 64\nm_sub = 16\nfc = 28e9\nd0 = 1.0\n"
           "pri = 10e-6\nn_pulses = 100\nbandwidth = 200e6\n"
           "x0 = 15\ny0 = 20.7\nvx = 10\nvy = 10.2\n"
           "pt_dbm = 30\ngain_db = 15\n"
           "trials = 50\nseed = 1\n"
           "methods = vmp-system,vmp-subarray,subarray-avg,ml,grid-music\n"
           "sweep_param = snr_db\nsweep_values = 0,5,10,15,20\n";
}

inline const char* table2_preset_text() {
    return "n_tx = 256\nn_rx = 256\nm_sub = 32\nfc = 28e9\nd0 = 1.0\n"
           "pri = 10e-6\nn_pulses = 600\nbandwidth = 200e6\n"
           "x0 = 15\ny0 = 20.7\nvx = 10\nvy = 10.2\n"
           "pt_dbm = 30\ngain_db = 15\n"
           "trials = 200\nseed = 1\n"
           "methods = vmp-system,vmp-subarray\n"
           "sweep_param = snr_db\nsweep_values = 10\n";
}

inline ExperimentConfig preset(const std::string& name) {
    if (name == "desk") return parse_config(desk_preset_text());
    if (name == "table2") return parse_config(table2_preset_text());
    throw ConfigError("unknown preset '" + name + "'");
}

/// Scenario for one sweep value; gains use unit RCS amplitude and sigma follows from snr_db.
inline Scenario scenario_for(const ExperimentConfig& base, double sweep_value, double* snr_out = nullptr) {
    ExperimentConfig c = base;
    double snr = c.snr_db;
    const std::string& p = c.sweep_param;
    if (p == "snr_db") {
        snr = sweep_value;
    } else if (p == "speed") {
        const double s = c.target.v0.norm();
        c.target.v0 = s > 0.0 ? Vec2(c.target.v0 * (sweep_value / s)) : Vec2(0.0, sweep_value);
    } else if (p == "distance") {
        c.target.p0 = c.target.p0.normalized() * sweep_value;
    } else if (p == "m_sub") {
        c.array.m_sub = int(std::lround(sweep_value));
    } else if (p == "L") {
        c.pulse.n_pulses = int(std::lround(sweep_value));
    }
    c.array.validate();
    c.pulse.validate();
    validate_target(c.target);
    Scenario sc;
    sc.array = c.array;
    sc.pulse = c.pulse;
    sc.target = c.target;
    sc.mode = c.synth;
    sc.gain = radar_gains(c.array, c.target.p0, c.radar, cplx(1.0, 0.0));
    sc.noise = NoiseModel{sigma_for_snr(sc.gain, snr), 0};
    if (snr_out) *snr_out = snr;
    return sc;
}

/// Runs `fn(k)` for k in [0, count) on a pool of `threads` workers.
inline void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
    if (threads <= 0) threads = int(std::max(1u, std::thread::hardware_concurrency()));
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (int k = 0; k < count; ++k) fn(k);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errs(threads);
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int k = next++; k < count; k = next++) fn(k);
            } catch (...) {
                errs[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

struct PairRun {
    std::vector<SubarrayPosterior> posteriors;
    std::vector<SubarraySnapshot> snapshots;  // empty unless kept
    double seconds = 0.0;
};

/// Synthesizes and runs CAVI pair by pair; snapshots are dropped unless `keep` is set.
inline PairRun run_pairs(const Scenario& sc, const VmPriors& priors, const CaviOptions& opts, int threads, bool keep,
                         bool infer = true) {
    const int P = sc.array.pairs(), kr = sc.array.k_r();
    PairRun out;
    out.posteriors.resize(P);
    if (keep) out.snapshots.resize(P);
    std::vector<double> secs(P, 0.0);
    parallel_for(P, threads, [&](int k) {
        SubarraySnapshot s = synthesize_snapshot(sc, k / kr, k % kr);
        const auto t0 = detail::Clock::now();
        if (infer) out.posteriors[k] = run_cavi(s, priors, opts);
        secs[k] = detail::seconds_since(t0);
        if (keep) out.snapshots[k] = std::move(s);
    });
    for (double s : secs) out.seconds += s;
    return out;
}

struct PointEstimate {
    Vec2 p = Vec2::Zero();
    Vec2 v = Vec2::Zero();
    double seconds = 0.0;
};

inline PointEstimate vmp_system(const AngularMessageSet& msgs, const ArrayConfig& cfg, const PulseConfig& pulse,
                                const PairConfigSet& vel_pairs) {
    const auto t0 = detail::Clock::now();
    const DistributedLocation init = distributed_location(msgs, cfg);
    const FitResult loc = centralized_location(msgs, cfg, init.fused.mean);
    VelocityOptions vo;
    try {
        vo.init = distributed_velocity(msgs, cfg, pulse, loc.est.mean, vel_pairs).fused.mean;
    } catch (const Error&) {
        vo.init = Vec2::Zero();
    }
    const FitResult vel = centralized_velocity(msgs, cfg, pulse, loc.est.mean, vo);
    return {loc.est.mean, vel.est.mean, detail::seconds_since(t0)};
}

struct SubarrayOutputs {
    DistributedLocation loc;
    DistributedVelocity vel;
    double seconds = 0.0;
};

inline SubarrayOutputs vmp_subarray(const AngularMessageSet& msgs, const ArrayConfig& cfg, const PulseConfig& pulse,
                                    const PairConfigSet& vel_pairs, const std::vector<double>& tau_hat = {}) {
    const auto t0 = detail::Clock::now();
    SubarrayOutputs o;
    o.loc = distributed_location(msgs, cfg, tau_hat);
    o.vel = distributed_velocity(msgs, cfg, pulse, o.loc.fused.mean, vel_pairs);
    o.seconds = detail::seconds_since(t0);
    return o;
}

struct TrialRecord {
    std::string method;
    double sweep_value = 0.0;
    int trial = 0;
    Vec2 p_hat = Vec2::Constant(std::nan(""));
    Vec2 v_hat = Vec2::Constant(std::nan(""));
    double err_p = std::nan("");
    double err_v = std::nan("");
    double runtime_s = 0.0;
    bool converged = false;
};

struct AggregateRow {
    std::string method;
    std::string sweep_param;
    double sweep_value = 0.0;
    int trials = 0;
    double rmse_p_m = 0.0;
    double rmse_v_mps = 0.0;
    double crb_p_m = 0.0;
    double crb_v_mps = 0.0;
    double median_runtime_s = 0.0;
    double fail_rate = 0.0;
    bool flagged() const { return fail_rate > 0.5; }
};

struct ExperimentResult {
    std::vector<TrialRecord> trials;
    std::vector<AggregateRow> rows;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// RMSE over trials that produced an estimate.
inline double rmse(const std::vector<double>& errs) {
    double s = 0.0;
    int c = 0;
    for (double e : errs)
        if (std::isfinite(e)) {
            s += e * e;
            ++c;
        }
    return c ? std::sqrt(s / c) : std::nan("");
}

inline bool uses(const ExperimentConfig& c, const std::string& m) {
    return std::find(c.methods.begin(), c.methods.end(), m) != c.methods.end();
}

/// Inputs shared by the methods of one trial.
struct MethodContext {
    const AngularMessageSet* msgs = nullptr;  // null when CAVI failed or was not run
    double cavi_seconds = 0.0;
    const std::vector<SubarraySnapshot>* snapshots = nullptr;
    std::vector<double> tau_hat;  // empty: bearing intersection
    MusicGrids grids;
    PairConfigSet vel_pairs;
};

inline PointEstimate run_method(const std::string& method, const ExperimentConfig& cfg, const ArrayConfig& array,
                                const PulseConfig& pulse, const MethodContext& ctx) {
    auto msgs = [&]() -> const AngularMessageSet& {
        if (!ctx.msgs) throw Error("no usable subarray posteriors");
        return *ctx.msgs;
    };
    auto snaps = [&]() -> const std::vector<SubarraySnapshot>& {
        if (!ctx.snapshots || ctx.snapshots->empty()) throw Error("method needs the raw snapshots");
        return *ctx.snapshots;
    };
    if (method == "vmp-system") {
        PointEstimate e = vmp_system(msgs(), array, pulse, ctx.vel_pairs);
        e.seconds += ctx.cavi_seconds;
        return e;
    }
    if (method == "vmp-subarray") {
        const SubarrayOutputs o = vmp_subarray(msgs(), array, pulse, ctx.vel_pairs, ctx.tau_hat);
        return {o.loc.fused.mean, o.vel.fused.mean, ctx.cavi_seconds + o.seconds};
    }
    if (method == "subarray-avg") {
        const auto t0 = detail::Clock::now();
        const DistributedLocation loc = distributed_location(msgs(), array, ctx.tau_hat);
        const Vec2 p = average_location(loc);
        const DistributedVelocity vel = distributed_velocity(msgs(), array, pulse, p, ctx.vel_pairs);
        return {p, average_velocity(vel), ctx.cavi_seconds + detail::seconds_since(t0)};
    }
    if (method == "grid-music") {
        const BaselineResult b = grid_music(snaps(), array, pulse, ctx.grids);
        return {b.p_hat, b.v_hat, b.runtime_s};
    }
    if (method == "ml") {
        // Initialized from the grid stage; its time is charged to ML.
        const BaselineResult g = grid_music(snaps(), array, pulse, ctx.grids);
        const BaselineResult b = ml_estimate(snaps(), array, pulse, g.p_hat, g.v_hat, cfg.ml);
        return {b.p_hat, b.v_hat, g.runtime_s + b.runtime_s};
    }
    throw ConfigError("unknown method '" + method + "'");
}

inline PairConfigSet velocity_pairs(const ExperimentConfig& cfg, const ArrayConfig& array) {
    PairConfigSet vp = default_pair_configs(array.k_t(), array.k_r(), cfg.full_velocity_configs);
    vp.max_condition = cfg.velocity_max_condition;
    return vp;
}

/// One Monte Carlo trial of every configured method.
inline std::vector<TrialRecord> run_trial(const ExperimentConfig& cfg, const Scenario& base, double sweep_value,
                                          int value_index, int trial) {
    Scenario sc = base;
    std::mt19937_64 rng(derive_seed(cfg.seed, std::uint64_t(value_index), std::uint64_t(trial), 0x747269616cULL));
    std::normal_distribution<double> nd(0.0, 1.0);
    // Swerling I amplitude; sigma tracks the realized gains so the SNR stays fixed.
    const cplx alpha = std::sqrt(cfg.radar.rcs_var / 2.0) * cplx(nd(rng), nd(rng));
    sc.gain = radar_gains(sc.array, sc.target.p0, cfg.radar, alpha);
    sc.noise.sigma = base.noise.sigma * sc.gain.mean_power() / base.gain.mean_power();
    sc.noise.rng_seed = derive_seed(cfg.seed, std::uint64_t(value_index), std::uint64_t(trial), 0x6e6fULL);

    const bool need_snaps = uses(cfg, "ml") || uses(cfg, "grid-music");
    const bool need_vmp = uses(cfg, "vmp-system") || uses(cfg, "vmp-subarray") || uses(cfg, "subarray-avg");

    MethodContext ctx;
    ctx.vel_pairs = velocity_pairs(cfg, sc.array);
    PairRun pr;
    AngularMessageSet msgs;
    if (need_vmp || need_snaps) {
        pr = run_pairs(sc, VmPriors{}, cfg.cavi, cfg.threads, need_snaps, need_vmp);
        ctx.cavi_seconds = pr.seconds;
        ctx.snapshots = &pr.snapshots;
        if (need_vmp) {
            try {
                msgs = build_messages(pr.posteriors, sc.array.k_t(), sc.array.k_r());
                ctx.msgs = &msgs;
            } catch (const Error&) {
                ctx.msgs = nullptr;
            }
        }
    }
    if (cfg.subarray_location == SubarrayLocationMode::delay) {
        const double sd = cfg.delay_std >= 0.0 ? cfg.delay_std : 1.0 / (2.0 * sc.pulse.bandwidth);
        for (int m = 0; m < sc.array.k_t(); ++m)
            for (int n = 0; n < sc.array.k_r(); ++n)
                ctx.tau_hat.push_back(bistatic_delay(sc.array, sc.target.p0, m, n) + sd * nd(rng));
    }
    // Grid windows sit around the truth with a random sub-cell offset.
    ctx.grids = cfg.grids;
    std::uniform_real_distribution<double> ud(-0.5, 0.5);
    ctx.grids.location.center = sc.target.p0 + ctx.grids.location.step * Vec2(ud(rng), ud(rng));
    ctx.grids.velocity.center = sc.target.v0 + ctx.grids.velocity.step * Vec2(ud(rng), ud(rng));

    std::vector<TrialRecord> out;
    for (const std::string& method : cfg.methods) {
        TrialRecord r;
        r.method = method;
        r.sweep_value = sweep_value;
        r.trial = trial;
        try {
            const PointEstimate e = run_method(method, cfg, sc.array, sc.pulse, ctx);
            r.runtime_s = e.seconds;
            if (e.p.allFinite() && e.v.allFinite()) {
                r.p_hat = e.p;
                r.v_hat = e.v;
                r.err_p = (e.p - sc.target.p0).norm();
                r.err_v = (e.v - sc.target.v0).norm();
                r.converged = true;
            }
        } catch (const Error&) {
            r.converged = false;
        }
        out.push_back(r);
    }
    return out;
}

inline std::vector<AggregateRow> aggregate(const std::vector<TrialRecord>& recs, const ExperimentConfig& cfg,
                                           const std::vector<FisherReport>& crbs) {
    std::vector<AggregateRow> rows;
    for (std::size_t vi = 0; vi < cfg.sweep_values.size(); ++vi)
        for (const std::string& method : cfg.methods) {
            AggregateRow row;
            row.method = method;
            row.sweep_param = cfg.sweep_param;
            row.sweep_value = cfg.sweep_values[vi];
            std::vector<double> ep, ev, rt;
            int fails = 0;
            for (const TrialRecord& r : recs) {
                if (r.method != method || r.sweep_value != row.sweep_value) continue;
                ++row.trials;
                if (!r.converged) {
                    ++fails;
                    continue;
                }
                ep.push_back(r.err_p);
                ev.push_back(r.err_v);
                rt.push_back(r.runtime_s);
            }
            row.rmse_p_m = rmse(ep);
            row.rmse_v_mps = rmse(ev);
            if (vi < crbs.size()) {
                row.crb_p_m = crbs[vi].sqrt_crb_p();
                row.crb_v_mps = crbs[vi].sqrt_crb_v();
            }
            row.median_runtime_s = median(rt);
            row.fail_rate = row.trials ? double(fails) / row.trials : 1.0;
            rows.push_back(row);
        }
    return rows;
}

/// Optional progress sink, called after each finished trial.
using ProgressFn = std::function<void(double sweep_value, int trial)>;

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
    cfg.validate();
    ExperimentResult res;
    std::vector<FisherReport> crbs;
    for (std::size_t vi = 0; vi < cfg.sweep_values.size(); ++vi) {
        const Scenario sc = scenario_for(cfg, cfg.sweep_values[vi]);
        crbs.push_back(compute_crb(sc));
        for (int t = 0; t < cfg.trials; ++t) {
            auto recs = run_trial(cfg, sc, cfg.sweep_values[vi], int(vi), t);
            res.trials.insert(res.trials.end(), recs.begin(), recs.end());
            if (progress) progress(cfg.sweep_values[vi], t);
        }
    }
    res.rows = aggregate(res.trials, cfg, crbs);
    return res;
}

inline const char* csv_header() {
    return "method,sweep_param,sweep_value,trials,rmse_p_m,rmse_v_mps,crb_p_m,crb_v_mps,median_runtime_s,fail_rate";
}

namespace detail {
inline std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}
}  // namespace detail

inline std::string csv_text(const std::vector<AggregateRow>& rows) {
    if (rows.empty()) throw Error("no results to write");
    std::string out = std::string(csv_header()) + "\n";
    using detail::num;
    for (const auto& r : rows)
        out += r.method + "," + r.sweep_param + "," + num(r.sweep_value) + "," + std::to_string(r.trials) + "," +
               num(r.rmse_p_m) + "," + num(r.rmse_v_mps) + "," + num(r.crb_p_m) + "," + num(r.crb_v_mps) + "," +
               num(r.median_runtime_s) + "," + num(r.fail_rate) + "\n";
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    os << text;
    if (!os) throw Error("write to '" + path + "' failed");
}

inline void emit_csv(const std::vector<AggregateRow>& rows, const std::string& path) {
    write_text(path, csv_text(rows));
}

inline std::string trials_csv_text(const std::vector<TrialRecord>& recs) {
    using detail::num;
    std::string out = "method,sweep_value,trial,p_x,p_y,v_x,v_y,err_p,err_v,runtime_s,converged\n";
    for (const auto& r : recs)
        out += r.method + "," + num(r.sweep_value) + "," + std::to_string(r.trial) + "," + num(r.p_hat.x()) + "," +
               num(r.p_hat.y()) + "," + num(r.v_hat.x()) + "," + num(r.v_hat.y()) + "," + num(r.err_p) + "," +
               num(r.err_v) + "," + num(r.runtime_s) + "," + (r.converged ? "1" : "0") + "\n";
    return out;
}

inline std::vector<AggregateRow> parse_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || detail::trim(line) != csv_header()) throw Error("unexpected CSV header");
    std::vector<AggregateRow> rows;
    while (std::getline(is, line)) {
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(item);
        if (f.size() != 10) throw Error("CSV row has " + std::to_string(f.size()) + " fields");
        auto d = [&](int i) { return std::strtod(f[i].c_str(), nullptr); };
        AggregateRow r;
        r.method = f[0];
        r.sweep_param = f[1];
        r.sweep_value = d(2);
        r.trials = std::stoi(f[3]);
        r.rmse_p_m = d(4);
        r.rmse_v_mps = d(5);
        r.crb_p_m = d(6);
        r.crb_v_mps = d(7);
        r.median_runtime_s = d(8);
        r.fail_rate = d(9);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace nfvmp
