// scheduler.hpp - intra-layer hybrid CPU/GPU/PCIe scheduling
//
// Priority rules:
//   GPU   takes cached experts, highest load first.
//   CPU   takes uncached experts, lowest load first; once those run out it
//         steals cached experts from the low-load tail of the GPU queue.
//   PCIe  moves uncached experts to the GPU, highest load first. A moved
//         expert joins the GPU queue in load order.
//
// The planner fills the three timelines greedily: at every step it executes
// the pending action that would complete earliest. A transfer counts as
// complete when the expert it delivers could finish on the GPU.
//
// Under these rules a plan is determined by two numbers: how many of the
// heaviest uncached experts are transferred and how many of the lightest
// cached experts the CPU steals. select_plan() tries every such split next to
// the greedy fill and keeps the shortest.
// oracle_optimal() enumerates every CPU/GPU split for small layers.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "moesim/cache.hpp"
#include "moesim/cost_model.hpp"
#include "moesim/model.hpp"

namespace moesim {

enum class EventKind { kCompute, kTransfer };

struct TimelineEvent {
    Device device = Device::kCpu;
    ExpertRef expert;
    EventKind kind = EventKind::kCompute;
    double start = 0.0;
    double end = 0.0;

    bool operator==(const TimelineEvent&) const = default;
};

enum class Placement { kCpu, kGpuCached, kGpuAfterTransfer };

const char* placement_name(Placement p);

struct SchedulePlan {
    // Sorted by device, then start time.
    std::vector<TimelineEvent> events;
    std::map<ExpertRef, Placement> assignment;
    // Latest compute end. A transfer never outlives the compute it feeds.
    double makespan = 0.0;

    bool operator==(const SchedulePlan&) const = default;

    double busy(Device d) const;
    // End of the last transfer, or 0 without transfers.
    double pcie_end() const;
    std::vector<ExpertRef> transferred() const;
    std::vector<ExpertRef> on_device(Device d) const;
};

// One activated expert as the planner sees it.
struct ExpertTask {
    ExpertRef ref;
    uint32_t load = 1;
    bool cached = false;
    // Cached experts still in flight (prefetch) become usable at this offset.
    double ready_at = 0.0;

    bool operator==(const ExpertTask&) const = default;
};

struct LayerWork {
    std::vector<ExpertTask> tasks;
    // PCIe is busy with earlier traffic until this offset.
    double pcie_start = 0.0;
};

// Builds the planner input for one layer request. `arrival` gives the ready
// offset of cached experts that are still being transferred.
LayerWork make_layer_work(const LayerRequest& request, const std::function<bool(ExpertRef)>& is_cached,
                          const std::function<double(ExpertRef)>& arrival = {}, double pcie_start = 0.0);
LayerWork make_layer_work(const LayerRequest& request, const ExpertCache& cache);

struct Queues {
    std::vector<ExpertTask> gpu;  // cached, load descending
    std::vector<ExpertTask> cpu;  // uncached, load ascending
    double pcie_start = 0.0;
};

Queues build_queues(const LayerWork& work);
Queues build_queues(const LayerRequest& request, const ExpertCache& cache);

// Greedy three-timeline fill. Throws ContractError when the queues overlap or
// contain a zero-load expert.
SchedulePlan simulate_schedule(const Queues& queues, const CostModel& cost);

// Every activated expert on the CPU, ascending load.
SchedulePlan all_cpu_plan(const LayerWork& work, const CostModel& cost);

// Every activated expert on the GPU; uncached ones are transferred first,
// highest load first.
SchedulePlan all_gpu_plan(const LayerWork& work, const CostModel& cost);

// Transfers the `transfers` heaviest uncached experts and lets the CPU steal
// the `steals` lightest cached experts. The CPU runs
// its share in ascending load. Throws ContractError when either count exceeds
// what is available.
SchedulePlan allocation_plan(const LayerWork& work, const CostModel& cost, size_t transfers, size_t steals);

// Shortest allocation_plan() over all splits.
SchedulePlan best_allocation_plan(const LayerWork& work, const CostModel& cost);

// Minimum-makespan plan among the greedy fill, all-CPU, all-GPU and the best
// split. Ties keep the greedy plan.
SchedulePlan select_plan(const LayerWork& work, const CostModel& cost);
SchedulePlan select_plan(const LayerRequest& request, const ExpertCache& cache, const CostModel& cost);

inline constexpr size_t kOracleMaxExperts = 12;

// Exhaustive minimum over all 2^n CPU/GPU assignments. Throws ContractError
// for more than kOracleMaxExperts experts.
double oracle_optimal(const LayerWork& work, const CostModel& cost);
double oracle_optimal(const LayerRequest& request, const ExpertCache& cache, const CostModel& cost);

// Structural checks: per-device ordering and non-overlap, transfer before
// compute, exactly one compute per task, makespan = latest event end.
// Returns one line per violation.
std::vector<std::string> check_plan(const SchedulePlan& plan, const LayerWork& work);

// Debug dump, one event per line: device,layer,expert,kind,start,end
void write_plan(std::ostream& out, const SchedulePlan& plan);

using Planner = std::function<SchedulePlan(const LayerWork&, const CostModel&)>;

inline const Planner kHybridPlanner = [](const LayerWork& w, const CostModel& c) { return select_plan(w, c); };
inline const Planner kGpuOnlyPlanner = [](const LayerWork& w, const CostModel& c) { return all_gpu_plan(w, c); };

}  // namespace moesim
