#include "moesim/scheduler.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <set>

namespace moesim {

const char* placement_name(Placement p) {
    switch (p) {
        case Placement::kCpu: return "cpu";
        case Placement::kGpuCached: return "gpu_cached";
        case Placement::kGpuAfterTransfer: return "gpu_after_transfer";
    }
    return "?";
}

double SchedulePlan::busy(Device d) const {
    double total = 0.0;
    for (const auto& e : events)
        if (e.device == d) total += e.end - e.start;
    return total;
}

double SchedulePlan::pcie_end() const {
    double end = 0.0;
    for (const auto& e : events)
        if (e.device == Device::kPcie) end = std::max(end, e.end);
    return end;
}

std::vector<ExpertRef> SchedulePlan::transferred() const {
    std::vector<ExpertRef> out;
    for (const auto& e : events)
        if (e.device == Device::kPcie) out.push_back(e.expert);
    return out;
}

std::vector<ExpertRef> SchedulePlan::on_device(Device d) const {
    std::vector<ExpertRef> out;
    for (const auto& e : events)
        if (e.device == d && e.kind == EventKind::kCompute) out.push_back(e.expert);
    return out;
}

LayerWork make_layer_work(const LayerRequest& request, const std::function<bool(ExpertRef)>& is_cached,
                          const std::function<double(ExpertRef)>& arrival, double pcie_start) {
    LayerWork work;
    work.pcie_start = pcie_start;
    work.tasks.reserve(request.activated.size());
    for (uint32_t e : request.activated) {
        ExpertTask t;
        t.ref = {request.layer, e};
        t.load = request.loads.at(e);
        t.cached = is_cached(t.ref);
        if (t.cached && arrival) t.ready_at = std::max(0.0, arrival(t.ref));
        work.tasks.push_back(t);
    }
    return work;
}

LayerWork make_layer_work(const LayerRequest& request, const ExpertCache& cache) {
    return make_layer_work(request, [&](ExpertRef r) { return cache.contains(r); });
}

namespace {

bool heavier_first(const ExpertTask& a, const ExpertTask& b) {
    if (a.load != b.load) return a.load > b.load;
    return a.ref < b.ref;
}

bool lighter_first(const ExpertTask& a, const ExpertTask& b) {
    if (a.load != b.load) return a.load < b.load;
    return a.ref < b.ref;
}

void sort_events(SchedulePlan& plan) {
    std::stable_sort(plan.events.begin(), plan.events.end(), [](const TimelineEvent& a, const TimelineEvent& b) {
        if (a.device != b.device) return a.device < b.device;
        if (a.start != b.start) return a.start < b.start;
        return a.expert < b.expert;
    });
}

void finish(SchedulePlan& plan) {
    sort_events(plan);
    plan.makespan = 0.0;
    for (const auto& e : plan.events)
        if (e.kind == EventKind::kCompute) plan.makespan = std::max(plan.makespan, e.end);
}

// A GPU-side entry: either a cached expert or one whose transfer is scheduled.
struct GpuItem {
    ExpertTask task;
    double ready = 0.0;
    bool transferred = false;
};

// Keeps `items` in load-descending order.
void insert_gpu_item(std::vector<GpuItem>& items, GpuItem item) {
    auto pos = std::upper_bound(items.begin(), items.end(), item, [](const GpuItem& a, const GpuItem& b) {
        return heavier_first(a.task, b.task);
    });
    items.insert(pos, item);
}

// Index of the item the GPU runs next: the heaviest one already available at
// `clock`, otherwise the one that becomes available first.
size_t next_gpu_item(const std::vector<GpuItem>& items, double clock) {
    for (size_t i = 0; i < items.size(); ++i)
        if (items[i].ready <= clock) return i;
    size_t best = 0;
    for (size_t i = 1; i < items.size(); ++i)
        if (items[i].ready < items[best].ready) best = i;
    return best;
}

void check_queues(const Queues& q) {
    std::set<ExpertRef> seen;
    for (const auto* list : {&q.gpu, &q.cpu}) {
        for (const auto& t : *list) {
            if (t.load == 0) throw ContractError("scheduler: zero-load expert " + to_string(t.ref));
            if (!seen.insert(t.ref).second)
                throw ContractError("scheduler: expert " + to_string(t.ref) + " appears in both queues");
        }
    }
}

}  // namespace

Queues build_queues(const LayerWork& work) {
    Queues q;
    q.pcie_start = work.pcie_start;
    for (const auto& t : work.tasks) (t.cached ? q.gpu : q.cpu).push_back(t);
    std::sort(q.gpu.begin(), q.gpu.end(), heavier_first);
    std::sort(q.cpu.begin(), q.cpu.end(), lighter_first);
    return q;
}

Queues build_queues(const LayerRequest& request, const ExpertCache& cache) {
    return build_queues(make_layer_work(request, cache));
}

SchedulePlan simulate_schedule(const Queues& queues, const CostModel& cost) {
    check_queues(queues);

    std::vector<GpuItem> gpu;
    for (const auto& t : queues.gpu) insert_gpu_item(gpu, {t, t.ready_at, false});

    std::vector<ExpertTask> cpu = queues.cpu;
    std::sort(cpu.begin(), cpu.end(), lighter_first);
    std::vector<char> claimed(cpu.size(), 0);

    std::vector<size_t> transfer_order(cpu.size());
    for (size_t i = 0; i < cpu.size(); ++i) transfer_order[i] = i;
    std::sort(transfer_order.begin(), transfer_order.end(),
              [&](size_t a, size_t b) { return heavier_first(cpu[a], cpu[b]); });
    size_t next_transfer = 0;

    double cpu_clock = 0.0, gpu_clock = 0.0, pcie_clock = queues.pcie_start;
    size_t burst = 0;
    size_t remaining = gpu.size() + cpu.size();
    const double transfer = cost.transfer();
    constexpr double kNever = std::numeric_limits<double>::infinity();

    SchedulePlan plan;
    while (remaining > 0) {
        while (next_transfer < transfer_order.size() && claimed[transfer_order[next_transfer]]) ++next_transfer;
        const double pcie_done = next_transfer < transfer_order.size() ? pcie_clock + transfer : kNever;

        size_t gi = 0;
        double gpu_start = 0.0, gpu_done = kNever;
        if (!gpu.empty()) {
            gi = next_gpu_item(gpu, gpu_clock);
            gpu_start = std::max(gpu_clock, gpu[gi].ready);
            gpu_done = gpu_start + cost.gpu(gpu[gi].task.load);
        }

        // CPU: lowest-load unclaimed uncached expert, else steal the lightest
        // cached expert that is already on the GPU.
        enum class CpuSource { kNone, kOwn, kSteal } source = CpuSource::kNone;
        size_t ci = 0;
        for (size_t i = 0; i < cpu.size(); ++i) {
            if (!claimed[i]) {
                ci = i;
                source = CpuSource::kOwn;
                break;
            }
        }
        if (source == CpuSource::kNone) {
            for (size_t i = gpu.size(); i-- > 0;) {
                if (!gpu[i].transferred) {
                    ci = i;
                    source = CpuSource::kSteal;
                    break;
                }
            }
        }
        double cpu_done = kNever;
        uint32_t cpu_load = 0;
        if (source != CpuSource::kNone) {
            cpu_load = source == CpuSource::kOwn ? cpu[ci].load : gpu[ci].task.load;
            cpu_done = cpu_clock + cost.cpu(cpu_load, burst);
        }

        // Earliest completion wins; a transfer completes when the expert it
        // delivers could finish on the GPU. Ties go PCIe, then GPU, then CPU.
        Device pick = Device::kPcie;
        double best = pcie_done;
        if (next_transfer < transfer_order.size()) best += cost.gpu(cpu[transfer_order[next_transfer]].load);
        if (gpu_done < best) {
            pick = Device::kGpu;
            best = gpu_done;
        }
        if (cpu_done < best) {
            pick = Device::kCpu;
            best = cpu_done;
        }

        switch (pick) {
            case Device::kPcie: {
                const size_t idx = transfer_order[next_transfer];
                claimed[idx] = 1;
                plan.events.push_back({Device::kPcie, cpu[idx].ref, EventKind::kTransfer, pcie_clock, pcie_done});
                pcie_clock = pcie_done;
                insert_gpu_item(gpu, {cpu[idx], pcie_done, true});
                break;
            }
            case Device::kGpu: {
                const GpuItem item = gpu[gi];
                gpu.erase(gpu.begin() + static_cast<std::ptrdiff_t>(gi));
                plan.events.push_back({Device::kGpu, item.task.ref, EventKind::kCompute, gpu_start, gpu_done});
                plan.assignment[item.task.ref] = item.transferred ? Placement::kGpuAfterTransfer : Placement::kGpuCached;
                gpu_clock = gpu_done;
                --remaining;
                break;
            }
            case Device::kCpu: {
                ExpertRef ref;
                if (source == CpuSource::kOwn) {
                    claimed[ci] = 1;
                    ref = cpu[ci].ref;
                } else {
                    ref = gpu[ci].task.ref;
                    gpu.erase(gpu.begin() + static_cast<std::ptrdiff_t>(ci));
                }
                plan.events.push_back({Device::kCpu, ref, EventKind::kCompute, cpu_clock, cpu_done});
                plan.assignment[ref] = Placement::kCpu;
                cpu_clock = cpu_done;
                ++burst;
                --remaining;
                break;
            }
        }
    }
    finish(plan);
    return plan;
}

namespace {

// Runs `gpu` items on the GPU timeline, heaviest available first.
void run_gpu_items(std::vector<GpuItem> gpu, const CostModel& cost, SchedulePlan& plan) {
    double clock = 0.0;
    while (!gpu.empty()) {
        const size_t i = next_gpu_item(gpu, clock);
        const GpuItem item = gpu[i];
        gpu.erase(gpu.begin() + static_cast<std::ptrdiff_t>(i));
        const double start = std::max(clock, item.ready);
        const double end = start + cost.gpu(item.task.load);
        plan.events.push_back({Device::kGpu, item.task.ref, EventKind::kCompute, start, end});
        plan.assignment[item.task.ref] = item.transferred ? Placement::kGpuAfterTransfer : Placement::kGpuCached;
        clock = end;
    }
}

void run_cpu_tasks(std::vector<ExpertTask> tasks, const CostModel& cost, SchedulePlan& plan) {
    std::sort(tasks.begin(), tasks.end(), lighter_first);
    double clock = 0.0;
    for (size_t i = 0; i < tasks.size(); ++i) {
        const double end = clock + cost.cpu(tasks[i].load, i);
        plan.events.push_back({Device::kCpu, tasks[i].ref, EventKind::kCompute, clock, end});
        plan.assignment[tasks[i].ref] = Placement::kCpu;
        clock = end;
    }
}

// Transfers `moved` back to back from `pcie_start`, heaviest first, and
// returns the GPU items they become.
std::vector<GpuItem> schedule_transfers(std::vector<ExpertTask> moved, double pcie_start, const CostModel& cost,
                                        SchedulePlan& plan) {
    std::sort(moved.begin(), moved.end(), heavier_first);
    std::vector<GpuItem> out;
    double clock = pcie_start;
    for (const auto& t : moved) {
        const double end = clock + cost.transfer();
        plan.events.push_back({Device::kPcie, t.ref, EventKind::kTransfer, clock, end});
        out.push_back({t, end, true});
        clock = end;
    }
    return out;
}

void require_positive_loads(const LayerWork& work) {
    for (const auto& t : work.tasks)
        if (t.load == 0) throw ContractError("scheduler: zero-load expert " + to_string(t.ref));
}

}  // namespace

SchedulePlan all_gpu_plan(const LayerWork& work, const CostModel& cost) {
    require_positive_loads(work);
    SchedulePlan plan;
    std::vector<GpuItem> gpu;
    std::vector<ExpertTask> uncached;
    for (const auto& t : work.tasks) {
        if (t.cached) insert_gpu_item(gpu, {t, t.ready_at, false});
        else uncached.push_back(t);
    }
    for (auto& item : schedule_transfers(uncached, work.pcie_start, cost, plan)) insert_gpu_item(gpu, item);
    run_gpu_items(std::move(gpu), cost, plan);
    finish(plan);
    return plan;
}

SchedulePlan allocation_plan(const LayerWork& work, const CostModel& cost, size_t transfers, size_t steals) {
    require_positive_loads(work);
    const Queues q = build_queues(work);
    std::vector<ExpertTask> uncached_heavy = q.cpu;
    std::sort(uncached_heavy.begin(), uncached_heavy.end(), heavier_first);
    const std::vector<ExpertTask> stealable(q.gpu.rbegin(), q.gpu.rend());
    if (transfers > uncached_heavy.size() || steals > stealable.size())
        throw ContractError("allocation_plan: split out of range");

    SchedulePlan plan;
    std::vector<ExpertTask> moved(uncached_heavy.begin(), uncached_heavy.begin() + static_cast<std::ptrdiff_t>(transfers));
    std::vector<ExpertTask> on_cpu(uncached_heavy.begin() + static_cast<std::ptrdiff_t>(transfers), uncached_heavy.end());
    on_cpu.insert(on_cpu.end(), stealable.begin(), stealable.begin() + static_cast<std::ptrdiff_t>(steals));

    std::set<ExpertRef> stolen;
    for (size_t i = 0; i < steals; ++i) stolen.insert(stealable[i].ref);
    std::vector<GpuItem> gpu;
    for (const auto& t : q.gpu)
        if (!stolen.count(t.ref)) insert_gpu_item(gpu, {t, t.ready_at, false});
    for (auto& item : schedule_transfers(moved, work.pcie_start, cost, plan)) insert_gpu_item(gpu, item);

    run_gpu_items(std::move(gpu), cost, plan);
    run_cpu_tasks(std::move(on_cpu), cost, plan);
    finish(plan);
    return plan;
}

namespace {

// Makespan of allocation_plan(k, j) without building the plan. The GPU never
// idles while something is ready, so its finish time depends only on release
// times, not on the order it picks ready experts in.
class SplitEvaluator {
public:
    SplitEvaluator(const Queues& q, const CostModel& cost) : q_(q), cost_(cost) {
        for (size_t i = 0; i < q.gpu.size(); ++i) by_release_.push_back(i);
        std::stable_sort(by_release_.begin(), by_release_.end(),
                         [&](size_t a, size_t b) { return q.gpu[a].ready_at < q.gpu[b].ready_at; });
    }

    double makespan(size_t transfers, size_t steals) const {
        const size_t u = q_.cpu.size(), c = q_.gpu.size();
        const size_t kept_cached = c - steals;

        // CPU: the u - transfers lightest uncached merged with the stolen
        // tail of the GPU queue, ascending.
        double cpu_end = 0.0;
        size_t a = 0, b = 0, pos = 0;
        const size_t a_end = u - transfers;
        while (a < a_end || b < steals) {
            const uint32_t la = a < a_end ? q_.cpu[a].load : UINT32_MAX;
            const uint32_t lb = b < steals ? q_.gpu[c - 1 - b].load : UINT32_MAX;
            if (la <= lb) {
                cpu_end += cost_.cpu(la, pos++);
                ++a;
            } else {
                cpu_end += cost_.cpu(lb, pos++);
                ++b;
            }
        }

        // GPU: remaining cached experts at their release times merged with
        // transfers that land one per transfer time, heaviest first.
        double clock = 0.0;
        size_t i = 0, t = 0;
        const double step = cost_.transfer();
        while (true) {
            while (i < by_release_.size() && by_release_[i] >= kept_cached) ++i;
            const bool has_cached = i < by_release_.size();
            const bool has_moved = t < transfers;
            if (!has_cached && !has_moved) break;
            const double moved_at = q_.pcie_start + static_cast<double>(t + 1) * step;
            if (has_cached && (!has_moved || q_.gpu[by_release_[i]].ready_at <= moved_at)) {
                const ExpertTask& task = q_.gpu[by_release_[i++]];
                clock = std::max(clock, task.ready_at) + cost_.gpu(task.load);
            } else {
                clock = std::max(clock, moved_at) + cost_.gpu(q_.cpu[u - 1 - t].load);
                ++t;
            }
        }
        return std::max(cpu_end, clock);
    }

private:
    const Queues& q_;
    const CostModel& cost_;
    std::vector<size_t> by_release_;
};

}  // namespace

SchedulePlan best_allocation_plan(const LayerWork& work, const CostModel& cost) {
    require_positive_loads(work);
    const Queues q = build_queues(work);
    const SplitEvaluator eval(q, cost);
    size_t best_k = 0, best_j = 0;
    double best = eval.makespan(0, 0);
    for (size_t k = 0; k <= q.cpu.size(); ++k) {
        for (size_t j = 0; j <= q.gpu.size(); ++j) {
            const double m = eval.makespan(k, j);
            if (m < best) {
                best = m;
                best_k = k;
                best_j = j;
            }
        }
    }
    return allocation_plan(work, cost, best_k, best_j);
}

SchedulePlan all_cpu_plan(const LayerWork& work, const CostModel& cost) {
    require_positive_loads(work);
    SchedulePlan plan;
    run_cpu_tasks(work.tasks, cost, plan);
    finish(plan);
    return plan;
}

SchedulePlan select_plan(const LayerWork& work, const CostModel& cost) {
    SchedulePlan best = simulate_schedule(build_queues(work), cost);
    for (auto* make : {&all_cpu_plan, &all_gpu_plan, &best_allocation_plan}) {
        SchedulePlan candidate = make(work, cost);
        if (candidate.makespan < best.makespan) best = std::move(candidate);
    }
    return best;
}

SchedulePlan select_plan(const LayerRequest& request, const ExpertCache& cache, const CostModel& cost) {
    return select_plan(make_layer_work(request, cache), cost);
}

double oracle_optimal(const LayerWork& work, const CostModel& cost) {
    const size_t n = work.tasks.size();
    if (n > kOracleMaxExperts)
        throw ContractError("oracle_optimal: " + std::to_string(n) + " experts exceeds the enumeration limit of " +
                            std::to_string(kOracleMaxExperts));
    if (n == 0) return 0.0;

    struct Job {
        uint32_t load;
        ExpertRef ref;
        double release;
    };

    double best = std::numeric_limits<double>::infinity();
    for (uint32_t mask = 0; mask < (1u << n); ++mask) {
        // bit set -> CPU
        std::vector<std::pair<uint32_t, ExpertRef>> on_cpu;
        std::vector<Job> cached, moved;
        for (size_t i = 0; i < n; ++i) {
            const auto& t = work.tasks[i];
            if (mask & (1u << i)) on_cpu.emplace_back(t.load, t.ref);
            else if (t.cached) cached.push_back({t.load, t.ref, t.ready_at});
            else moved.push_back({t.load, t.ref, 0.0});
        }

        std::sort(on_cpu.begin(), on_cpu.end());
        double cpu_end = 0.0;
        for (size_t k = 0; k < on_cpu.size(); ++k) cpu_end += cost.cpu(on_cpu[k].first, k);
        if (cpu_end >= best) continue;

        std::sort(moved.begin(), moved.end(), [](const Job& a, const Job& b) {
            return a.load != b.load ? a.load > b.load : a.ref < b.ref;
        });
        double link = work.pcie_start;
        for (auto& j : moved) {
            link += cost.transfer();
            j.release = link;
        }
        std::vector<Job> pending = cached;
        pending.insert(pending.end(), moved.begin(), moved.end());

        double clock = 0.0;
        while (!pending.empty()) {
            // heaviest released job; otherwise the earliest release
            size_t pick = pending.size();
            for (size_t i = 0; i < pending.size(); ++i) {
                if (pending[i].release > clock) continue;
                if (pick == pending.size() || pending[i].load > pending[pick].load ||
                    (pending[i].load == pending[pick].load && pending[i].ref < pending[pick].ref))
                    pick = i;
            }
            if (pick == pending.size()) {
                pick = 0;
                for (size_t i = 1; i < pending.size(); ++i) {
                    const auto& a = pending[i];
                    const auto& b = pending[pick];
                    if (a.release < b.release ||
                        (a.release == b.release && (a.load > b.load || (a.load == b.load && a.ref < b.ref))))
                        pick = i;
                }
            }
            clock = std::max(clock, pending[pick].release) + cost.gpu(pending[pick].load);
            pending.erase(pending.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        best = std::min(best, std::max(cpu_end, clock));
    }
    return best;
}

double oracle_optimal(const LayerRequest& request, const ExpertCache& cache, const CostModel& cost) {
    return oracle_optimal(make_layer_work(request, cache), cost);
}

std::vector<std::string> check_plan(const SchedulePlan& plan, const LayerWork& work) {
    std::vector<std::string> out;
    std::map<ExpertRef, const ExpertTask*> tasks;
    for (const auto& t : work.tasks) tasks[t.ref] = &t;

    std::map<ExpertRef, int> computes;
    std::map<ExpertRef, double> transfer_end;
    std::map<Device, const TimelineEvent*> last;
    double latest = 0.0;
    for (const auto& e : plan.events) {
        const std::string who = to_string(e.expert);
        if (e.end < e.start) out.push_back(who + ": event ends before it starts");
        if ((e.device == Device::kPcie) != (e.kind == EventKind::kTransfer))
            out.push_back(who + ": transfers must run on pcie and only there");
        if (auto it = last.find(e.device); it != last.end()) {
            if (e.start < it->second->start)
                out.push_back(std::string(device_name(e.device)) + ": events not sorted by start");
            if (e.start < it->second->end)
                out.push_back(std::string(device_name(e.device)) + ": " + who + " overlaps the previous event");
        }
        last[e.device] = &e;
        latest = std::max(latest, e.end);
        if (!tasks.count(e.expert)) {
            out.push_back(who + ": event for an expert that is not activated");
            continue;
        }
        if (e.kind == EventKind::kCompute) {
            ++computes[e.expert];
        } else {
            if (tasks[e.expert]->cached) out.push_back(who + ": transfer of an already cached expert");
            if (e.start < work.pcie_start) out.push_back(who + ": transfer starts before the link is free");
            transfer_end[e.expert] = e.end;
        }
    }

    for (const auto& t : work.tasks) {
        const std::string who = to_string(t.ref);
        const int c = computes[t.ref];
        if (c != 1) out.push_back(who + ": computed " + std::to_string(c) + " times");
        auto a = plan.assignment.find(t.ref);
        if (a == plan.assignment.end()) {
            out.push_back(who + ": missing from the assignment");
            continue;
        }
        const TimelineEvent* compute = nullptr;
        for (const auto& e : plan.events)
            if (e.expert == t.ref && e.kind == EventKind::kCompute) compute = &e;
        if (!compute) continue;
        switch (a->second) {
            case Placement::kCpu:
                if (compute->device != Device::kCpu) out.push_back(who + ": assigned to cpu but computed elsewhere");
                break;
            case Placement::kGpuCached:
                if (compute->device != Device::kGpu) out.push_back(who + ": assigned to gpu but computed elsewhere");
                if (!t.cached) out.push_back(who + ": uncached expert marked gpu_cached");
                if (compute->start < t.ready_at) out.push_back(who + ": computed before its weights arrived");
                break;
            case Placement::kGpuAfterTransfer: {
                if (compute->device != Device::kGpu) out.push_back(who + ": assigned to gpu but computed elsewhere");
                auto te = transfer_end.find(t.ref);
                if (te == transfer_end.end()) out.push_back(who + ": gpu_after_transfer without a transfer");
                else if (compute->start < te->second) out.push_back(who + ": computed before its transfer finished");
                break;
            }
        }
    }
    if (plan.assignment.size() != work.tasks.size()) out.push_back("assignment size differs from the task count");
    if (plan.makespan != latest) out.push_back("makespan differs from the latest event end");
    return out;
}

void write_plan(std::ostream& out, const SchedulePlan& plan) {
    char buf[160];
    for (const auto& e : plan.events) {
        std::snprintf(buf, sizeof buf, "%s,%u,%u,%s,%.9g,%.9g\n", device_name(e.device), e.expert.layer,
                      e.expert.expert, e.kind == EventKind::kCompute ? "compute" : "transfer", e.start, e.end);
        out << buf;
    }
}

}  // namespace moesim
