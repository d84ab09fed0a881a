#include "moesim/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include "json.hpp"

namespace moesim {

const char* scheduling_name(Scheduling s) {
    switch (s) {
        case Scheduling::kHybrid: return "hybrid";
        case Scheduling::kStaticLayerSplit: return "static_layer_split";
        case Scheduling::kFixedFrequencyMap: return "fixed_frequency_map";
        case Scheduling::kGpuOnDemand: return "gpu_ondemand";
    }
    return "?";
}

std::optional<Scheduling> parse_scheduling(const std::string& s) {
    for (auto k : {Scheduling::kHybrid, Scheduling::kStaticLayerSplit, Scheduling::kFixedFrequencyMap,
                   Scheduling::kGpuOnDemand})
        if (s == scheduling_name(k)) return k;
    return std::nullopt;
}

void require_valid(const EnginePolicy& policy, const ModelConfig& config) {
    if (policy.static_split_point && *policy.static_split_point > config.num_layers)
        throw ContractError("static split point exceeds the layer count");
    if (policy.pin_top_fraction && !(*policy.pin_top_fraction >= 0.0 && *policy.pin_top_fraction <= 1.0))
        throw ContractError("pin fraction must lie in [0, 1]");
    if (!(policy.calibration_fraction > 0.0 && policy.calibration_fraction <= 1.0))
        throw ContractError("calibration fraction must lie in (0, 1]");
    if (!(policy.mrs_alpha > 0.0 && policy.mrs_alpha <= 1.0)) throw ContractError("MRS alpha must lie in (0, 1]");
    if (policy.prefetch) require_valid(policy.prediction, config);
    if (policy.frozen_cache && policy.prefetch) throw ContractError("a frozen cache cannot take prefetches");
    if (policy.frozen_cache && policy.scheduling != Scheduling::kHybrid)
        throw ContractError("a frozen cache needs hybrid scheduling");
}

std::optional<EnginePolicy> preset_policy(const std::string& name) {
    EnginePolicy p;
    p.name = name;
    if (name == "full") {
        p.scheduling = Scheduling::kHybrid;
        p.cache_policy = PolicyKind::kMrs;
        p.prefetch = true;
    } else if (name == "scheduling") {
        p.scheduling = Scheduling::kHybrid;
        p.cache_policy = PolicyKind::kLru;
        p.frozen_cache = true;
        p.background_fill = false;
    } else if (name == "ktransformers") {
        p.scheduling = Scheduling::kFixedFrequencyMap;
        p.cache_policy = PolicyKind::kLru;
        p.background_fill = false;
    } else if (name == "llamacpp") {
        p.scheduling = Scheduling::kStaticLayerSplit;
        p.cache_policy = PolicyKind::kLru;
        p.background_fill = false;
    } else if (name == "adapmoe") {
        p.scheduling = Scheduling::kGpuOnDemand;
        p.cache_policy = PolicyKind::kLru;
        p.prefetch = true;
    } else {
        return std::nullopt;
    }
    return p;
}

std::vector<std::string> preset_policy_names() { return {"full", "scheduling", "ktransformers", "llamacpp", "adapmoe"}; }

double RunMetrics::mean_tbt() const {
    if (tbt.empty()) return 0.0;
    double sum = 0.0;
    for (double t : tbt) sum += t;
    return sum / static_cast<double>(tbt.size());
}

double RunMetrics::median_tbt() const {
    if (tbt.empty()) return 0.0;
    std::vector<double> v = tbt;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::optional<double> RunMetrics::hit_rate() const { return moesim::hit_rate(cache_stats); }

std::optional<double> RunMetrics::decode_hit_rate() const { return moesim::hit_rate(decode_cache_stats); }

std::optional<double> RunMetrics::steady_hit_rate() const {
    const uint64_t warm = decode_cache_stats.lookups - decode_compulsory_misses;
    if (warm == 0) return std::nullopt;
    return static_cast<double>(decode_cache_stats.hits) / static_cast<double>(warm);
}

double RunMetrics::utilization(Device d) const {
    if (elapsed <= 0.0) return 0.0;
    auto it = device_busy.find(d);
    return it == device_busy.end() ? 0.0 : it->second / elapsed;
}

std::vector<ExpertRef> frequency_pinned_set(const Trace& trace, double calibration_fraction, size_t count) {
    const auto& cfg = trace.config;
    const size_t passes = std::max<size_t>(
        1, static_cast<size_t>(std::floor(calibration_fraction * static_cast<double>(trace.passes.size()) + 1e-9)));
    std::vector<uint64_t> counts(size_t{cfg.num_layers} * cfg.num_routed, 0);
    for (size_t p = 0; p < std::min(passes, trace.passes.size()); ++p)
        for (const auto& req : trace.passes[p].layers)
            for (uint32_t e : req.activated) ++counts[size_t{req.layer} * cfg.num_routed + e];

    std::vector<ExpertRef> all;
    all.reserve(counts.size());
    for (uint32_t l = 0; l < cfg.num_layers; ++l)
        for (uint32_t e = 0; e < cfg.num_routed; ++e) all.push_back({l, e});
    std::stable_sort(all.begin(), all.end(), [&](ExpertRef a, ExpertRef b) {
        return counts[size_t{a.layer} * cfg.num_routed + a.expert] > counts[size_t{b.layer} * cfg.num_routed + b.expert];
    });
    all.resize(std::min(count, all.size()));
    return all;
}

SchedulePlan static_layer_split_plan(const LayerRequest& request, const CostModel& cost, uint32_t split_point) {
    const bool on_gpu = request.layer < split_point;
    const LayerWork work = make_layer_work(request, [&](ExpertRef) { return on_gpu; });
    return on_gpu ? all_gpu_plan(work, cost) : all_cpu_plan(work, cost);
}

SchedulePlan fixed_frequency_map_plan(const LayerRequest& request, const std::set<ExpertRef>& pinned,
                                      const CostModel& cost) {
    const LayerWork work = make_layer_work(request, [&](ExpertRef r) { return pinned.count(r) != 0; });
    return allocation_plan(work, cost, 0, 0);
}

namespace {

size_t pinned_count(const ModelConfig& cfg, const EnginePolicy& policy, double ratio) {
    const double fraction = policy.pin_top_fraction.value_or(ratio);
    return static_cast<size_t>(std::floor(fraction * cfg.num_layers * cfg.num_routed + 1e-9));
}

ExpertCache make_cache(const Trace& trace, const EnginePolicy& policy, double ratio) {
    const auto& cfg = trace.config;
    switch (policy.scheduling) {
        case Scheduling::kStaticLayerSplit: return ExpertCache(0, PolicyKind::kLru);
        case Scheduling::kFixedFrequencyMap: return ExpertCache(pinned_count(cfg, policy, ratio), PolicyKind::kLru);
        default: break;
    }
    if (policy.frozen_cache) return ExpertCache(pinned_count(cfg, policy, ratio), PolicyKind::kLru);
    MrsState mrs;
    if (policy.cache_policy == PolicyKind::kMrs) {
        mrs = MrsState::uniform(cfg, policy.mrs_alpha);
        mrs.decay = policy.mrs_decay;
    }
    return ExpertCache(cache_capacity(cfg, ratio), policy.cache_policy, std::move(mrs));
}

// Re-times the plan after extra PCIe windows were booked: transfers are
// serialized in start order, and a GPU compute moves by as much as its
// transfer moved. Returns the resulting latest compute end, relative to the
// layer start.
double retime_with_windows(const SchedulePlan& plan, double layer_start,
                           const std::vector<std::pair<double, double>>& windows) {
    struct Slot {
        double start, end;
        std::optional<ExpertRef> expert;
    };
    std::vector<Slot> slots;
    for (const auto& e : plan.events)
        if (e.device == Device::kPcie) slots.push_back({layer_start + e.start, layer_start + e.end, e.expert});
    for (const auto& [s, t] : windows) slots.push_back({s, t, std::nullopt});
    std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.start < b.start; });

    std::map<ExpertRef, double> shift;
    double link = -std::numeric_limits<double>::infinity();
    for (const auto& slot : slots) {
        const double delay = link > slot.start ? link - slot.start : 0.0;
        if (slot.expert) shift[*slot.expert] = delay;
        link = delay > 0.0 ? slot.end + delay : slot.end;
    }

    double latest = 0.0, gpu_clock = 0.0;
    for (const auto& e : plan.events) {
        if (e.kind != EventKind::kCompute) continue;
        double end = e.end;
        if (e.device == Device::kGpu) {
            auto it = shift.find(e.expert);
            const double moved = e.start + (it == shift.end() ? 0.0 : it->second);
            const double start = std::max(gpu_clock, moved);
            if (start != e.start) end = start + (e.end - e.start);
            gpu_clock = end;
        }
        latest = std::max(latest, end);
    }
    return latest;
}

}  // namespace

Engine::Engine(const Trace& trace, EnginePolicy policy, double ratio, const HardwareProfile& profile, uint64_t seed,
               bool keep_log)
    : trace_(trace),
      policy_(std::move(policy)),
      ratio_(ratio),
      seed_(seed),
      cost_(profile, trace.config),
      cache_(make_cache(trace, policy_, ratio)),
      keep_log_(keep_log) {
    const auto& cfg = trace.config;
    require_valid(cfg);
    require_valid(policy_, cfg);
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("cache ratio must lie in (0, 1]");

    metrics_.policy = policy_.name;
    metrics_.model = cfg.name;
    metrics_.ratio = ratio;
    metrics_.seed = seed;
    metrics_.capacity = cache_.capacity();

    if (policy_.scheduling == Scheduling::kStaticLayerSplit) {
        split_point_ = policy_.static_split_point.value_or(
            static_cast<uint32_t>(std::floor(ratio * cfg.num_layers + 1e-9)));
        metrics_.capacity = size_t{split_point_} * cfg.num_routed;
    }
    if (policy_.scheduling == Scheduling::kFixedFrequencyMap || policy_.frozen_cache) {
        for (auto ref : frequency_pinned_set(trace, policy_.calibration_fraction, cache_.capacity())) {
            pinned_map_.insert(ref);
            cache_.insert(ref);
        }
        cache_.reset_stats();
    } else if (cache_.capacity() >= size_t{cfg.num_layers} * cfg.num_routed) {
        // A model that fits on the GPU is loaded there before serving.
        for (uint32_t l = 0; l < cfg.num_layers; ++l)
            for (uint32_t e = 0; e < cfg.num_routed; ++e) cache_.insert({l, e});
        cache_.reset_stats();
    }
}

void Engine::record_pcie(double start, double end) {
    if (end > start) pcie_intervals_.push_back({start, end});
}

SchedulePlan Engine::plan_layer(const LayerRequest& request, double start) {
    const LayerWork work = make_layer_work(
        request, [&](ExpertRef r) { return cache_.contains(r); },
        [&](ExpertRef r) {
            auto it = arrival_.find(r);
            return it == arrival_.end() ? 0.0 : it->second - start;
        },
        std::max(0.0, pcie_free_ - start));
    SchedulePlan plan = policy_.scheduling == Scheduling::kGpuOnDemand ? all_gpu_plan(work, cost_)
                                                                       : select_plan(work, cost_);
    if (auto problems = check_plan(plan, work); !problems.empty())
        throw InvariantError("layer " + std::to_string(request.layer) + " plan: " + problems.front());
    if (observer_) observer_(plan, work);
    return plan;
}

void Engine::expire_prefetches(uint32_t layer, const LayerRequest& request) {
    for (auto it = prefetch_target_.begin(); it != prefetch_target_.end();) {
        if (it->second != layer) {
            ++it;
            continue;
        }
        const bool used = std::binary_search(request.activated.begin(), request.activated.end(), it->first.expert);
        ++(used ? metrics_.prefetch_hit : metrics_.prefetch_wasted);
        cache_.unpin(it->first);
        it = prefetch_target_.erase(it);
    }
}

void Engine::issue_prefetches(size_t pass, uint32_t layer, double layer_start, double layer_end,
                              LayerLog& entry) {
    const auto predicted = predict_activations(trace_, pass, layer, policy_.prediction, seed_);
    if (predicted.empty()) return;
    const Planner& planner = policy_.scheduling == Scheduling::kGpuOnDemand ? kGpuOnlyPlanner : kHybridPlanner;
    const double link_free = std::max(pcie_free_, layer_start);
    const double budget = std::max(0.0, layer_end - link_free);
    if (budget <= 0.0) return;
    const auto candidates =
        gather_candidates(predicted, [&](ExpertRef r) { return cache_.contains(r); }, cost_, planner);
    for (ExpertRef ref : select_prefetches(candidates, budget)) {
        if (!cache_.can_insert()) break;
        cache_.insert(ref);
        cache_.pin(ref);
        const double start = std::max(pcie_free_, layer_start);
        const double end = start + cost_.transfer();
        arrival_[ref] = end;
        pcie_free_ = end;
        record_pcie(start, end);
        prefetch_target_[ref] = ref.layer;
        ++metrics_.prefetch_issued;
        entry.prefetched.push_back(ref);
        entry.prefetch_windows.push_back({start, end});
    }
}

void Engine::background_fill(const SchedulePlan& plan, const LayerRequest& request, double layer_start,
                             double layer_end, LayerLog& entry) {
    std::vector<std::pair<uint32_t, ExpertRef>> misses;
    for (const auto& [ref, where] : plan.assignment)
        if (where == Placement::kCpu && !cache_.contains(ref)) misses.push_back({request.loads[ref.expert], ref});
    std::sort(misses.begin(), misses.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    // This layer's misses go first; older ones wait in the backlog for PCIe
    // time that a later layer leaves unused.
    std::vector<ExpertRef> order;
    for (const auto& [load, ref] : misses) order.push_back(ref);
    order.insert(order.end(), fill_backlog_.begin(), fill_backlog_.end());

    std::vector<ExpertRef> left;
    std::set<ExpertRef> queued;
    for (ExpertRef ref : order) {
        if (cache_.contains(ref) || !queued.insert(ref).second) continue;
        const double start = std::max(pcie_free_, layer_start);
        if (cache_.size() >= cache_.capacity() || !(start < layer_end)) {
            left.push_back(ref);
            continue;
        }
        cache_.insert(ref);
        const double end = start + cost_.transfer();
        arrival_[ref] = end;
        pcie_free_ = end;
        record_pcie(start, end);
        ++metrics_.fill_transfers;
        entry.prefetch_windows.push_back({start, end});
    }
    if (cache_.size() >= cache_.capacity()) left.clear();
    fill_backlog_ = std::move(left);
}

double Engine::run_layer(size_t pass, const LayerRequest& request, Stage stage) {
    const double t0 = clock_;
    const bool decode = stage == Stage::kDecode;
    const bool dynamic =
        policy_.scheduling == Scheduling::kHybrid || policy_.scheduling == Scheduling::kGpuOnDemand;
    const CacheStats before = cache_.stats();

    LayerLog entry;
    entry.pass = pass;
    entry.layer = request.layer;
    entry.start = t0;
    entry.demand_pcie_end = t0;

    for (auto it = arrival_.begin(); it != arrival_.end();) {
        if (it->second <= t0 || !cache_.contains(it->first)) it = arrival_.erase(it);
        else ++it;
    }

    std::vector<ExpertRef> pins;
    SchedulePlan plan;
    if (policy_.scheduling == Scheduling::kStaticLayerSplit) {
        plan = static_layer_split_plan(request, cost_, split_point_);
        if (observer_)
            observer_(plan, make_layer_work(request, [&](ExpertRef) { return request.layer < split_point_; }));
    } else {
        for (uint32_t e : request.activated) {
            const ExpertRef ref{request.layer, e};
            const bool hit = cache_.lookup(ref);
            ++entry.lookups;
            if (hit) {
                ++entry.hits;
                if (dynamic) {
                    cache_.pin(ref);
                    pins.push_back(ref);
                }
            } else if (!seen_.count(ref)) {
                ++metrics_.compulsory_misses;
                if (decode) ++metrics_.decode_compulsory_misses;
            }
        }
        if (dynamic) {
            plan = plan_layer(request, t0);
        } else {
            plan = fixed_frequency_map_plan(request, pinned_map_, cost_);
            if (observer_)
                observer_(plan, make_layer_work(request, [&](ExpertRef r) { return pinned_map_.count(r) != 0; }));
        }
    }
    for (uint32_t e : request.activated) seen_.insert({request.layer, e});

    for (const auto& e : plan.events) {
        if (e.device != Device::kPcie) continue;
        ++entry.transfers;
        ++metrics_.demand_transfers;
        if (decode) ++metrics_.decode_demand_transfers;
        record_pcie(t0 + e.start, t0 + e.end);
        entry.demand_pcie_end = std::max(entry.demand_pcie_end, t0 + e.end);
        pcie_free_ = std::max(pcie_free_, t0 + e.end);
        if (!policy_.frozen_cache && !cache_.contains(e.expert) && cache_.can_insert()) {
            cache_.insert(e.expert);
            cache_.pin(e.expert);
            pins.push_back(e.expert);
        }
    }

    const auto& prof = cost_.profile();
    const double duration = plan.makespan + prof.shared_expert_time + prof.non_expert_time;
    metrics_.device_busy[Device::kGpu] += plan.busy(Device::kGpu) + prof.shared_expert_time;
    metrics_.device_busy[Device::kCpu] += plan.busy(Device::kCpu);
    clock_ = t0 + duration;

    if (dynamic && policy_.cache_policy == PolicyKind::kMrs) cache_.update_scores(request.layer, request.scores);

    if (dynamic) {
        expire_prefetches(request.layer, request);
        if (policy_.prefetch) issue_prefetches(pass, request.layer, t0, clock_, entry);
        if (policy_.background_fill && policy_.scheduling == Scheduling::kHybrid)
            background_fill(plan, request, t0, clock_, entry);
    }
    for (auto ref : pins) cache_.unpin(ref);

    entry.makespan = plan.makespan;
    entry.duration = duration;
    entry.makespan_after_prefetch = retime_with_windows(plan, t0, entry.prefetch_windows);
    if (entry.makespan_after_prefetch != plan.makespan)
        throw InvariantError("layer " + std::to_string(request.layer) + ": prefetch traffic delayed the layer");

    if (decode) {
        const CacheStats& after = cache_.stats();
        metrics_.decode_cache_stats.lookups += after.lookups - before.lookups;
        metrics_.decode_cache_stats.hits += after.hits - before.hits;
        metrics_.decode_cache_stats.inserts += after.inserts - before.inserts;
        metrics_.decode_cache_stats.evictions += after.evictions - before.evictions;
    }
    if (keep_log_) log_.push_back(std::move(entry));
    return duration;
}

double Engine::run_pass(size_t pass) {
    if (pass != next_pass_) throw ContractError("run_pass: passes must run in order");
    if (pass >= trace_.passes.size()) throw ContractError("run_pass: pass out of range");
    const auto& fp = trace_.passes[pass];
    double latency = 0.0;
    for (const auto& request : fp.layers) latency += run_layer(pass, request, fp.stage);

    // Anything still waiting for a layer of this pass has expired.
    for (const auto& [ref, target] : prefetch_target_) {
        cache_.unpin(ref);
        ++metrics_.prefetch_wasted;
    }
    prefetch_target_.clear();

    metrics_.pass_latency.push_back(latency);
    if (fp.stage == Stage::kPrefill && !metrics_.ttft) metrics_.ttft = latency;
    if (fp.stage == Stage::kDecode) metrics_.tbt.push_back(latency);
    ++next_pass_;
    return latency;
}

void Engine::run_all() {
    while (next_pass_ < trace_.passes.size()) run_pass(next_pass_);
}

RunMetrics Engine::metrics() const {
    RunMetrics m = metrics_;
    m.cache_stats = cache_.stats();
    m.elapsed = clock_;

    // PCIe busy time is the union of transfer intervals inside the run.
    auto intervals = pcie_intervals_;
    std::sort(intervals.begin(), intervals.end());
    double busy = 0.0, reach = 0.0;
    for (auto [s, e] : intervals) {
        s = std::max(s, reach);
        e = std::min(e, clock_);
        if (e > s) {
            busy += e - s;
            reach = e;
        }
    }
    m.device_busy[Device::kPcie] = busy;
    for (auto d : {Device::kCpu, Device::kGpu, Device::kPcie}) {
        m.device_busy[d] = std::min(m.device_busy[d], clock_);
        m.device_idle[d] = clock_ - m.device_busy[d];
    }
    return m;
}

RunMetrics run_trace(const Trace& trace, const EnginePolicy& policy, double ratio, const HardwareProfile& profile,
                     uint64_t seed) {
    Engine engine(trace, policy, ratio, profile, seed);
    engine.run_all();
    return engine.metrics();
}

std::string metrics_json(const RunMetrics& m) {
    nlohmann::ordered_json j;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    j["policy"] = m.policy;
    j["model"] = m.model;
    j["ratio"] = m.ratio;
    j["seed"] = m.seed;
    j["capacity"] = m.capacity;
    j["passes"] = m.pass_latency.size();
    j["decode_steps"] = m.tbt.size();
    j["ttft"] = opt(m.ttft);
    j["mean_tbt"] = m.mean_tbt();
    j["median_tbt"] = m.median_tbt();
    j["elapsed"] = m.elapsed;
    j["lookups"] = m.cache_stats.lookups;
    j["hits"] = m.cache_stats.hits;
    j["inserts"] = m.cache_stats.inserts;
    j["evictions"] = m.cache_stats.evictions;
    j["hit_rate"] = opt(m.hit_rate());
    j["decode_hit_rate"] = opt(m.decode_hit_rate());
    j["steady_hit_rate"] = opt(m.steady_hit_rate());
    j["compulsory_misses"] = m.compulsory_misses;
    j["demand_transfers"] = m.demand_transfers;
    j["decode_demand_transfers"] = m.decode_demand_transfers;
    j["fill_transfers"] = m.fill_transfers;
    j["prefetch_issued"] = m.prefetch_issued;
    j["prefetch_hit"] = m.prefetch_hit;
    j["prefetch_wasted"] = m.prefetch_wasted;
    for (auto d : {Device::kGpu, Device::kCpu, Device::kPcie}) {
        const std::string name = device_name(d);
        j[name + "_busy"] = m.device_busy.count(d) ? m.device_busy.at(d) : 0.0;
        j[name + "_util"] = m.utilization(d);
    }
    return j.dump();
}

}  // namespace moesim
