// engine.hpp - trace replay on a virtual clock
//
// Each layer of each pass goes through: cache lookups, pinning of the hits,
// plan construction under the run's scheduling policy, cache inserts for
// whatever the plan moved to the GPU, score update, prefetching for the next
// layers, and unpinning. The clock advances by the plan makespan plus the
// fixed per-layer shared-expert and non-expert time.
//
// PCIe traffic that outlives a layer (prefetches, background fills) carries
// over: the next layer's demand transfers queue behind it, and experts still
// in flight are usable on the GPU only once they land.
//
// A cache with room for every routed expert starts with the whole model on
// the GPU.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moesim/cache.hpp"
#include "moesim/cost_model.hpp"
#include "moesim/model.hpp"
#include "moesim/prefetcher.hpp"
#include "moesim/scheduler.hpp"

namespace moesim {

enum class Scheduling {
    kHybrid,             // select_plan over the live cache
    kStaticLayerSplit,   // whole layers on GPU or CPU, no cache
    kFixedFrequencyMap,  // frequently used experts pinned on GPU, the rest on CPU
    kGpuOnDemand,        // every miss is transferred before GPU compute
};

const char* scheduling_name(Scheduling s);
std::optional<Scheduling> parse_scheduling(const std::string& s);

struct EnginePolicy {
    std::string name = "custom";
    Scheduling scheduling = Scheduling::kHybrid;
    PolicyKind cache_policy = PolicyKind::kMrs;
    bool prefetch = false;
    PredictionModel prediction;
    // Layers below the split run on the GPU. Defaults to floor(ratio * layers).
    std::optional<uint32_t> static_split_point;
    // Share of all routed experts pinned on the GPU. Defaults to the cache ratio.
    std::optional<double> pin_top_fraction;
    // Leading share of passes used to count activation frequencies.
    double calibration_fraction = 0.1;
    double mrs_alpha = 0.5;
    bool mrs_decay = true;
    // Copy CPU-computed misses to the GPU over idle PCIe while the cache has
    // free slots; misses that find the link busy wait for a later layer.
    bool background_fill = true;
    // Keep the calibration frequency map on the GPU for the whole run:
    // transfers are used once and dropped, nothing is ever evicted.
    bool frozen_cache = false;
};

void require_valid(const EnginePolicy& policy, const ModelConfig& config);

// full, scheduling, ktransformers, llamacpp, adapmoe
std::optional<EnginePolicy> preset_policy(const std::string& name);
std::vector<std::string> preset_policy_names();

struct RunMetrics {
    std::string policy;
    std::string model;
    double ratio = 0.0;
    uint64_t seed = 0;
    size_t capacity = 0;

    // Latency of the first prefill pass; absent without prefill.
    std::optional<double> ttft;
    std::vector<double> tbt;
    std::vector<double> pass_latency;
    double elapsed = 0.0;

    CacheStats cache_stats;
    CacheStats decode_cache_stats;
    // Misses on experts that had never been activated before.
    uint64_t compulsory_misses = 0;
    uint64_t decode_compulsory_misses = 0;

    std::map<Device, double> device_busy;
    std::map<Device, double> device_idle;

    uint64_t demand_transfers = 0;
    uint64_t decode_demand_transfers = 0;
    uint64_t fill_transfers = 0;
    uint64_t prefetch_issued = 0;
    uint64_t prefetch_hit = 0;
    uint64_t prefetch_wasted = 0;

    double mean_tbt() const;
    double median_tbt() const;
    std::optional<double> hit_rate() const;
    std::optional<double> decode_hit_rate() const;
    // Decode hits over decode lookups that were not compulsory misses.
    std::optional<double> steady_hit_rate() const;
    double utilization(Device d) const;
};

// What happened in one layer; kept when the engine is asked to log.
struct LayerLog {
    size_t pass = 0;
    uint32_t layer = 0;
    double start = 0.0;
    double makespan = 0.0;
    double duration = 0.0;
    uint32_t lookups = 0;
    uint32_t hits = 0;
    uint32_t transfers = 0;
    // Absolute end of this layer's demand transfers (start when none).
    double demand_pcie_end = 0.0;
    // Plan makespan re-evaluated after the layer's prefetches and fills were
    // placed on the PCIe timeline.
    double makespan_after_prefetch = 0.0;
    std::vector<ExpertRef> prefetched;
    std::vector<std::pair<double, double>> prefetch_windows;
};

// Every routed expert ordered by activation count over the first
// `calibration_fraction` of passes (at least one pass), most frequent first,
// ties by expert order; the first `count` are returned.
std::vector<ExpertRef> frequency_pinned_set(const Trace& trace, double calibration_fraction, size_t count);

// Layers below `split_point` compute everything on the GPU, the rest
// everything on the CPU in ascending load; nothing is transferred.
SchedulePlan static_layer_split_plan(const LayerRequest& request, const CostModel& cost, uint32_t split_point);

// Pinned activated experts on the GPU (descending load), the others on the
// CPU (ascending load); nothing is transferred.
SchedulePlan fixed_frequency_map_plan(const LayerRequest& request, const std::set<ExpertRef>& pinned,
                                      const CostModel& cost);

class Engine {
public:
    Engine(const Trace& trace, EnginePolicy policy, double ratio, const HardwareProfile& profile, uint64_t seed,
           bool keep_log = false);

    // Runs the next pass and returns its latency. Passes run in order.
    double run_pass(size_t pass);
    void run_all();

    size_t next_pass() const { return next_pass_; }
    const ExpertCache& cache() const { return cache_; }
    const CostModel& cost() const { return cost_; }
    const std::vector<LayerLog>& log() const { return log_; }
    RunMetrics metrics() const;

    // Sees every layer plan together with the work it was built for.
    using PlanObserver = std::function<void(const SchedulePlan&, const LayerWork&)>;
    void observe_plans(PlanObserver observer) { observer_ = std::move(observer); }

private:
    double run_layer(size_t pass, const LayerRequest& request, Stage stage);
    SchedulePlan plan_layer(const LayerRequest& request, double start);
    void issue_prefetches(size_t pass, uint32_t layer, double layer_start, double layer_end, LayerLog& entry);
    void background_fill(const SchedulePlan& plan, const LayerRequest& request, double layer_start,
                         double layer_end, LayerLog& entry);
    void record_pcie(double start, double end);
    void expire_prefetches(uint32_t layer, const LayerRequest& request);

    const Trace& trace_;
    EnginePolicy policy_;
    double ratio_;
    uint64_t seed_;
    CostModel cost_;
    ExpertCache cache_;
    bool keep_log_;
    PlanObserver observer_;

    std::set<ExpertRef> pinned_map_;
    uint32_t split_point_ = 0;

    double clock_ = 0.0;
    double pcie_free_ = 0.0;
    std::map<ExpertRef, double> arrival_;
    // Prefetched expert -> the layer it was fetched for (same pass).
    std::map<ExpertRef, uint32_t> prefetch_target_;
    std::set<ExpertRef> seen_;
    std::vector<ExpertRef> fill_backlog_;
    size_t next_pass_ = 0;

    RunMetrics metrics_;
    std::vector<std::pair<double, double>> pcie_intervals_;
    std::vector<LayerLog> log_;
};

RunMetrics run_trace(const Trace& trace, const EnginePolicy& policy, double ratio, const HardwareProfile& profile,
                     uint64_t seed);

// One self-describing JSON object on a single line.
std::string metrics_json(const RunMetrics& m);

}  // namespace moesim
