#include "moesim/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "moesim/cost_model.hpp"
#include "moesim/trace_io.hpp"
#include "moesim/tracegen.hpp"

namespace moesim {

namespace {

class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(x))
        throw ContractError(key + ": '" + v + "' is not a number");
    return x;
}

uint32_t to_uint(const std::string& key, const std::string& v) {
    const double x = to_double(key, v);
    if (x < 0 || x != std::floor(x) || x > 4294967295.0)
        throw ContractError(key + ": '" + v + "' is not a nonnegative integer");
    return static_cast<uint32_t>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ContractError(key + ": '" + v + "' is not a boolean");
}

// User-supplied text that fails a contract check is a usage problem, not an
// internal one.
template <class F>
auto as_usage(F&& f) {
    try {
        return f();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
}

std::vector<double> parse_doubles(const std::string& flag, const std::string& list) {
    std::vector<double> out;
    for (const auto& item : split(list, ',')) out.push_back(as_usage([&] { return to_double(flag, item); }));
    if (out.empty()) throw UsageError(flag + " needs at least one value");
    return out;
}

struct TraceSource {
    std::string model = "qwen2";
    std::string trace_path;
    std::optional<double> skew;
    std::optional<double> rho;
    std::optional<double> layer_sim;
    uint64_t seed = 1;
    uint32_t prefill_tokens = 64;
    uint32_t decode_steps = 100;
};

void add_trace_flags(CLI::App* cmd, TraceSource& src, bool allow_file) {
    cmd->add_option("--model", src.model, "mixtral, qwen2, deepseek, or a trace file whose config is reused")
        ->capture_default_str();
    if (allow_file) cmd->add_option("--trace", src.trace_path, "read this trace instead of generating one");
    cmd->add_option("--skew", src.skew, "bias scale of the routing logits (default: calibrated)");
    cmd->add_option("--rho", src.rho, "pass-to-pass logit correlation in [0, 1) (default: calibrated)");
    cmd->add_option("--layer-sim", src.layer_sim, "adjacent-layer correlation in [0, 1) (default: calibrated)");
    cmd->add_option("--seed", src.seed)->capture_default_str();
    cmd->add_option("--prefill-tokens", src.prefill_tokens, "0 for a decode-only trace")->capture_default_str();
    cmd->add_option("--decode-steps", src.decode_steps)->capture_default_str();
}

ModelConfig resolve_model(const std::string& model) {
    if (auto cfg = preset_config(model)) return *cfg;
    std::ifstream probe(model);
    if (!probe) throw UsageError("unknown model '" + model + "' (not a preset and not a readable trace file)");
    return load_trace(model).config;
}

GenParams gen_params(const TraceSource& src, uint64_t seed) {
    // Custom models borrow the many-expert calibration.
    GenParams p = calibrated_params(preset_config(src.model) ? src.model : "qwen2", seed);
    if (src.skew) p.skew = *src.skew;
    if (src.rho) p.temporal_rho = *src.rho;
    if (src.layer_sim) p.layer_sim = *src.layer_sim;
    if (auto problems = gen_problems(p); !problems.empty()) throw UsageError(problems.front());
    return p;
}

Trace make_trace(const TraceSource& src, uint64_t seed) {
    if (!src.trace_path.empty()) return load_trace(src.trace_path);
    const ModelConfig cfg = resolve_model(src.model);
    return generate_trace(cfg, gen_params(src, seed), src.prefill_tokens, src.decode_steps);
}

HardwareProfile resolve_profile(const std::string& arg, const ModelConfig& cfg) {
    if (arg == "default") return default_profile(cfg);
    if (arg == "unit") return unit_profile();
    std::ifstream in(arg);
    if (!in) throw DataError("cannot read profile " + arg);
    return read_profile(in);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    return f;
}

void finish(std::ofstream& f, const std::string& path) {
    f.flush();
    if (!f) throw DataError("write failed: " + path);
}

void check_ratio(double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw UsageError("cache ratio must lie in (0, 1]");
}

void print_summary(std::ostream& out, const Trace& trace, const TraceStats& st) {
    const auto& cfg = trace.config;
    out << "model " << cfg.name << " layers " << cfg.num_layers << " routed " << cfg.num_routed << " activated "
        << cfg.num_activated << "\n";
    out << "passes " << trace.passes.size() << "\n";
    out << "activation_share_top20 " << fmt(interpolate(st.activation_cdf, 0.2)) << "\n";
    if (st.reuse_by_decile) {
        const auto& r = *st.reuse_by_decile;
        out << "reuse_by_decile";
        for (double v : r) out << ' ' << fmt(v);
        out << "\n";
        if (r.front() > 0) out << "reuse_top_over_bottom " << fmt(r.back() / r.front()) << "\n";
    }
    if (st.temporal_jaccard) out << "temporal_jaccard " << fmt(*st.temporal_jaccard) << "\n";
    if (st.layer_jaccard) out << "layer_jaccard " << fmt(*st.layer_jaccard) << "\n";
    if (!st.prefill_imbalance.empty()) {
        double sum = 0.0;
        for (double v : st.prefill_imbalance) sum += v;
        out << "prefill_imbalance_mean " << fmt(sum / static_cast<double>(st.prefill_imbalance.size())) << "\n";
    }
}

// ---- run ------------------------------------------------------------------

struct RunArgs {
    TraceSource src;
    std::string policy = "full";
    std::string compare_to;
    std::string profile = "default";
    std::string out;
    double ratio = 0.25;
};

int cmd_run(const RunArgs& a, std::ostream& out) {
    check_ratio(a.ratio);
    const EnginePolicy policy = as_usage([&] { return parse_policy_spec(a.policy); });
    std::optional<EnginePolicy> other;
    if (!a.compare_to.empty()) other = as_usage([&] { return parse_policy_spec(a.compare_to); });

    const Trace trace = make_trace(a.src, a.src.seed);
    const HardwareProfile profile = resolve_profile(a.profile, trace.config);
    as_usage([&] {
        require_valid(policy, trace.config);
        if (other) require_valid(*other, trace.config);
    });
    const RunMetrics m = run_trace(trace, policy, a.ratio, profile, a.src.seed);

    auto j = nlohmann::ordered_json::parse(metrics_json(m));
    const double unit = CostModel(profile, trace.config).transfer();
    j["time_unit"] = "one expert transfer";
    j["transfer_time"] = unit;
    j["mean_tbt_normalized"] = unit > 0 ? nlohmann::ordered_json(m.mean_tbt() / unit) : nlohmann::ordered_json();
    j["ttft_normalized"] = unit > 0 && m.ttft ? nlohmann::ordered_json(*m.ttft / unit) : nlohmann::ordered_json();
    if (other) {
        const RunMetrics b = run_trace(trace, *other, a.ratio, profile, a.src.seed);
        j["compare_to"] = a.compare_to;
        j["compare_mean_tbt"] = b.mean_tbt();
        j["speedup"] = m.mean_tbt() > 0 ? nlohmann::ordered_json(b.mean_tbt() / m.mean_tbt()) : nlohmann::ordered_json();
        j["ttft_speedup"] =
            m.ttft && b.ttft && *m.ttft > 0 ? nlohmann::ordered_json(*b.ttft / *m.ttft) : nlohmann::ordered_json();
    }
    const std::string line = j.dump() + "\n";
    out << line;
    if (!a.out.empty()) {
        auto f = open_out(a.out);
        f << line;
        finish(f, a.out);
    }
    return kExitOk;
}

// ---- sweep ----------------------------------------------------------------

struct SweepArgs {
    std::string models = "qwen2";
    std::string policies = "full,scheduling,ktransformers,llamacpp,adapmoe";
    std::string ratios = "0.25,0.5,0.75";
    std::string seeds = "1,2,3,4,5";
    std::string baseline = "ktransformers";
    std::string profile = "default";
    std::string out;
    std::string summary;
    uint32_t prefill_tokens = 64;
    uint32_t decode_steps = 100;
    unsigned jobs = 0;
};

struct SweepRow {
    size_t model_index = 0;
    size_t policy_index = 0;
    std::string model;
    std::string policy;
    double ratio = 0.0;
    uint64_t seed = 0;
    std::string error;
    int error_code = kExitOk;
    std::optional<RunMetrics> metrics;
    std::optional<double> speedup;
};

double sample_sd(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string mean_sd(const std::vector<double>& v) {
    if (v.empty()) return "-";
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    return fmt(mean) + " ± " + fmt(sample_sd(v, mean));
}

std::string opt_num(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "model,policy,ratio,seed,status,mean_tbt,median_tbt,ttft,hit_rate,decode_hit_rate,steady_hit_rate,"
           "prefetch_issued,prefetch_hit,gpu_util,cpu_util,pcie_util,speedup\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.policy << ',' << fmt(r.ratio) << ',' << r.seed << ',';
        if (!r.metrics) {
            std::string msg = r.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            out << "error: " << msg << ",,,,,,,,,,,,\n";
            continue;
        }
        const auto& m = *r.metrics;
        out << "ok," << fmt(m.mean_tbt()) << ',' << fmt(m.median_tbt()) << ',' << opt_num(m.ttft) << ','
            << opt_num(m.hit_rate()) << ',' << opt_num(m.decode_hit_rate()) << ',' << opt_num(m.steady_hit_rate())
            << ',' << m.prefetch_issued << ',' << m.prefetch_hit << ',' << fmt(m.utilization(Device::kGpu)) << ','
            << fmt(m.utilization(Device::kCpu)) << ',' << fmt(m.utilization(Device::kPcie)) << ','
            << opt_num(r.speedup) << '\n';
    }
}

void write_sweep_summary(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "| model | policy | ratio | runs | mean TBT | decode hit rate | speedup |\n";
    out << "|---|---|---|---|---|---|---|\n";
    for (size_t i = 0; i < rows.size();) {
        size_t j = i;
        std::vector<double> tbt, hit, speed;
        while (j < rows.size() && rows[j].model == rows[i].model && rows[j].policy == rows[i].policy &&
               rows[j].ratio == rows[i].ratio) {
            if (const auto& m = rows[j].metrics) {
                tbt.push_back(m->mean_tbt());
                if (auto h = m->decode_hit_rate()) hit.push_back(*h);
                if (rows[j].speedup) speed.push_back(*rows[j].speedup);
            }
            ++j;
        }
        out << "| " << rows[i].model << " | " << rows[i].policy << " | " << fmt(rows[i].ratio) << " | "
            << tbt.size() << '/' << j - i << " | " << mean_sd(tbt) << " | " << mean_sd(hit) << " | "
            << mean_sd(speed) << " |\n";
        i = j;
    }
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
    const auto models = split(a.models, ',');
    const auto policy_specs = split(a.policies, ',');
    const auto ratios = parse_doubles("--ratios", a.ratios);
    std::vector<uint64_t> seeds;
    for (const auto& s : split(a.seeds, ',')) seeds.push_back(as_usage([&] { return to_uint("--seeds", s); }));
    if (models.empty() || policy_specs.empty() || seeds.empty())
        throw UsageError("--models, --policies and --seeds need at least one value each");
    for (double r : ratios) check_ratio(r);
    std::vector<EnginePolicy> policies;
    for (const auto& spec : policy_specs) policies.push_back(as_usage([&] { return parse_policy_spec(spec); }));

    std::map<std::pair<size_t, uint64_t>, Trace> traces;
    std::vector<HardwareProfile> profiles;
    for (size_t mi = 0; mi < models.size(); ++mi) {
        TraceSource src;
        src.model = models[mi];
        src.prefill_tokens = a.prefill_tokens;
        src.decode_steps = a.decode_steps;
        const ModelConfig cfg = resolve_model(models[mi]);
        profiles.push_back(resolve_profile(a.profile, cfg));
        for (uint64_t seed : seeds) traces.emplace(std::make_pair(mi, seed), make_trace(src, seed));
    }

    std::vector<SweepRow> tasks;
    for (size_t mi = 0; mi < models.size(); ++mi)
        for (size_t pi = 0; pi < policies.size(); ++pi)
            for (double ratio : ratios)
                for (uint64_t seed : seeds) {
                    SweepRow r;
                    r.model_index = mi;
                    r.policy_index = pi;
                    r.model = traces.at({mi, seed}).config.name;
                    r.policy = policy_specs[pi];
                    r.ratio = ratio;
                    r.seed = seed;
                    tasks.push_back(std::move(r));
                }

    std::vector<SweepRow> done;
    std::mutex done_mutex;
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i = next++; i < tasks.size(); i = next++) {
            SweepRow row = tasks[i];
            try {
                row.metrics = run_trace(traces.at({row.model_index, row.seed}), policies[row.policy_index],
                                        row.ratio, profiles[row.model_index], row.seed);
            } catch (const DataError& e) {
                row.error = e.what();
                row.error_code = kExitData;
            } catch (const ContractError& e) {
                row.error = e.what();
                row.error_code = kExitUsage;
            } catch (const std::exception& e) {
                row.error = e.what();
                row.error_code = kExitInternal;
            }
            std::lock_guard lock(done_mutex);
            done.push_back(std::move(row));
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const size_t jobs = std::min<size_t>(a.jobs == 0 ? hw : a.jobs, tasks.size());
    std::vector<std::thread> pool;
    for (size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::sort(done.begin(), done.end(), [](const SweepRow& x, const SweepRow& y) {
        return std::tie(x.model_index, x.policy_index, x.ratio, x.seed) <
               std::tie(y.model_index, y.policy_index, y.ratio, y.seed);
    });

    if (!a.baseline.empty()) {
        std::map<std::tuple<size_t, double, uint64_t>, double> base;
        for (const auto& r : done)
            if (r.policy == a.baseline && r.metrics) base[{r.model_index, r.ratio, r.seed}] = r.metrics->mean_tbt();
        for (auto& r : done) {
            auto it = base.find({r.model_index, r.ratio, r.seed});
            if (r.metrics && it != base.end() && r.metrics->mean_tbt() > 0)
                r.speedup = it->second / r.metrics->mean_tbt();
        }
    }

    if (a.out.empty()) {
        write_sweep_csv(out, done);
    } else {
        auto f = open_out(a.out);
        write_sweep_csv(f, done);
        finish(f, a.out);
    }
    if (!a.summary.empty()) {
        auto f = open_out(a.summary);
        write_sweep_summary(f, done);
        finish(f, a.summary);
    } else if (!a.out.empty()) {
        write_sweep_summary(out, done);
    }

    int code = kExitOk;
    size_t failed = 0;
    for (const auto& r : done)
        if (!r.metrics) {
            ++failed;
            code = std::max(code, r.error_code);
        }
    if (failed) err << "sweep: " << failed << " of " << done.size() << " runs failed\n";
    return code;
}

// ---- calibrate ------------------------------------------------------------

struct CalibrateArgs {
    std::string samples;
    std::string base;
    std::string out;
    std::string emit_samples;
};

int cmd_calibrate(const CalibrateArgs& a, std::ostream& out) {
    if (!a.emit_samples.empty()) {
        const ModelConfig cfg = resolve_model(a.emit_samples);
        const auto samples = synthesize_samples(default_profile(cfg), expert_bytes(cfg));
        auto f = open_out(a.out);
        write_samples(f, samples);
        finish(f, a.out);
        out << "wrote " << samples.size() << " samples\n";
        return kExitOk;
    }
    if (a.samples.empty()) throw UsageError("calibrate needs --samples (or --emit-samples MODEL)");
    std::ifstream in(a.samples);
    if (!in) throw DataError("cannot read " + a.samples);
    const auto samples = read_samples(in);
    HardwareProfile base;
    if (!a.base.empty()) {
        std::ifstream b(a.base);
        if (!b) throw DataError("cannot read " + a.base);
        base = read_profile(b);
    }
    const CalibrationReport report = calibrate(samples, base);
    auto f = open_out(a.out);
    write_profile(f, report.profile);
    finish(f, a.out);
    out << "cpu_samples " << report.cpu_samples << " rms " << fmt(report.cpu_rms) << "\n";
    out << "gpu_samples " << report.gpu_samples << " rms " << fmt(report.gpu_rms) << "\n";
    out << "pcie_samples " << report.pcie_samples << " rms " << fmt(report.pcie_rms) << "\n";
    return kExitOk;
}

// ---- generate / analyze ---------------------------------------------------

int cmd_generate(const TraceSource& src, const std::string& path, std::ostream& out) {
    const Trace trace = make_trace(src, src.seed);
    save_trace(trace, path);
    print_summary(out, trace, analyze_trace(trace));
    return kExitOk;
}

int cmd_analyze(const TraceSource& src, const std::string& stats_path, const std::string& reference,
                std::ostream& out) {
    const Trace trace = make_trace(src, src.seed);
    const TraceStats st = analyze_trace(trace);
    print_summary(out, trace, st);
    if (!reference.empty()) {
        std::ifstream in(reference);
        if (!in) throw DataError("cannot read " + reference);
        const auto ref = read_curve(in);
        const double ours = gini(st.activation_cdf), theirs = gini(ref);
        out << "gini " << fmt(ours) << " reference_gini " << fmt(theirs) << "\n";
        out << "reference_share_top20 " << fmt(interpolate(ref, 0.2)) << "\n";
        out << "flatter_than_reference " << (ours < theirs ? "yes" : "no") << "\n";
    }
    if (!stats_path.empty()) {
        auto f = open_out(stats_path);
        write_stats(f, st);
        finish(f, stats_path);
    }
    return kExitOk;
}

// Turns the key=value lines of every --config file into leading flags of the
// subcommand, so that flags given later on the command line win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::vector<std::string> injected;
    for (size_t i = 0; i < args.size(); ++i) {
        std::string path;
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
        else continue;
        std::ifstream in(path);
        if (!in) throw DataError("cannot read config " + path);
        for (const auto& item : CLI::ConfigINI().from_config(in)) {
            if (item.name == "config") throw UsageError("config files cannot include other config files");
            std::string value;
            for (size_t k = 0; k < item.inputs.size(); ++k) value += (k ? "," : "") + item.inputs[k];
            injected.push_back("--" + item.name + "=" + value);
        }
    }
    if (injected.empty()) return args;
    auto sub = std::find_if(args.begin(), args.end(), [](const std::string& s) { return s.rfind("-", 0) != 0; });
    if (sub == args.end()) return args;
    std::vector<std::string> out(args.begin(), sub + 1);
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), sub + 1, args.end());
    return out;
}

}  // namespace

EnginePolicy parse_policy_spec(const std::string& spec) {
    const auto colon = spec.find(':');
    const std::string base = trim(spec.substr(0, colon));
    auto preset = preset_policy(base);
    if (!preset) throw ContractError("unknown policy '" + base + "'");
    EnginePolicy p = *preset;
    p.name = spec;
    if (colon == std::string::npos) return p;
    for (const auto& item : split(spec.substr(colon + 1), '+')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ContractError("policy override '" + item + "' needs key=value");
        const std::string key = trim(item.substr(0, eq)), value = trim(item.substr(eq + 1));
        if (key == "scheduling") {
            auto s = parse_scheduling(value);
            if (!s) throw ContractError("unknown scheduling '" + value + "'");
            p.scheduling = *s;
        } else if (key == "cache") {
            auto c = parse_policy(value);
            if (!c) throw ContractError("unknown cache policy '" + value + "'");
            p.cache_policy = *c;
        } else if (key == "prefetch") {
            p.prefetch = to_bool(key, value);
        } else if (key == "accuracy") {
            p.prediction.accuracy = to_double(key, value);
        } else if (key == "horizon") {
            p.prediction.horizon = to_uint(key, value);
        } else if (key == "alpha") {
            p.mrs_alpha = to_double(key, value);
        } else if (key == "decay") {
            p.mrs_decay = to_bool(key, value);
        } else if (key == "fill") {
            p.background_fill = to_bool(key, value);
        } else if (key == "frozen") {
            p.frozen_cache = to_bool(key, value);
        } else if (key == "split") {
            p.static_split_point = to_uint(key, value);
        } else if (key == "pin") {
            p.pin_top_fraction = to_double(key, value);
        } else {
            throw ContractError("unknown policy key '" + key + "'");
        }
    }
    return p;
}

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Trace-driven simulator of hybrid CPU-GPU mixture-of-experts inference", "moesim"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);

    std::string config_path;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "flat key=value file; keys are long flag names, flags win");
    };

    TraceSource gen_src;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate", "write a synthetic routing trace and print its statistics");
    add_trace_flags(gen, gen_src, false);
    gen->add_option("--out", gen_out, "trace file (JSON lines)")->required();
    add_config(gen);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "simulate one policy on one trace and print a metrics record");
    add_trace_flags(run, run_args.src, true);
    run->add_option("--policy", run_args.policy, "policy spec")->capture_default_str();
    run->add_option("--ratio", run_args.ratio, "GPU cache size as a fraction of all routed experts")
        ->capture_default_str();
    run->add_option("--profile", run_args.profile, "default, unit, or a profile file")->capture_default_str();
    run->add_option("--compare-to", run_args.compare_to, "second policy spec; adds a speedup field");
    run->add_option("--out", run_args.out, "also write the record here");
    add_config(run);

    SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "run every (model, policy, ratio, seed) combination");
    sweep->add_option("--models", sweep_args.models)->capture_default_str();
    sweep->add_option("--policies", sweep_args.policies)->capture_default_str();
    sweep->add_option("--ratios", sweep_args.ratios)->capture_default_str();
    sweep->add_option("--seeds", sweep_args.seeds)->capture_default_str();
    sweep->add_option("--baseline", sweep_args.baseline, "policy spec the speedup column is relative to")
        ->capture_default_str();
    sweep->add_option("--profile", sweep_args.profile, "default, unit, or a profile file")->capture_default_str();
    sweep->add_option("--prefill-tokens", sweep_args.prefill_tokens)->capture_default_str();
    sweep->add_option("--decode-steps", sweep_args.decode_steps)->capture_default_str();
    sweep->add_option("--jobs", sweep_args.jobs, "concurrent runs (0: one per hardware thread)")
        ->capture_default_str();
    sweep->add_option("--out", sweep_args.out, "CSV rows (default: standard output)");
    sweep->add_option("--summary", sweep_args.summary, "markdown table of per-cell means ± sample sd");
    add_config(sweep);

    CalibrateArgs cal_args;
    auto* cal = app.add_subcommand("calibrate", "fit a hardware profile to warm-up samples");
    cal->add_option("--samples", cal_args.samples, "device,load,position,duration lines");
    cal->add_option("--base", cal_args.base, "profile supplying fields the samples cannot determine");
    cal->add_option("--emit-samples", cal_args.emit_samples,
                    "instead of fitting, write noiseless samples of this model's default profile");
    cal->add_option("--out", cal_args.out, "profile (or sample) file")->required();
    add_config(cal);

    TraceSource an_src;
    std::string an_out, an_reference;
    auto* an = app.add_subcommand("analyze", "print routing statistics of a trace");
    add_trace_flags(an, an_src, true);
    an->add_option("--out", an_out, "plot-ready statistics file");
    an->add_option("--reference", an_reference, "activation CDF (x,y) the trace should be flatter than");
    add_config(an);

    try {
        std::vector<std::string> args = expand_config(raw_args);
        std::reverse(args.begin(), args.end());
        try {
            app.parse(args);
        } catch (const CLI::ParseError& e) {
            return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
        }
        if (gen->parsed()) return cmd_generate(gen_src, gen_out, out);
        if (run->parsed()) return cmd_run(run_args, out);
        if (sweep->parsed()) return cmd_sweep(sweep_args, out, err);
        if (cal->parsed()) return cmd_calibrate(cal_args, out);
        if (an->parsed()) return cmd_analyze(an_src, an_out, an_reference, out);
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace moesim
