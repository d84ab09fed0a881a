// Reference implementations the library is checked against. Written from the
// problem statements, not from the library code.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <list>
#include <optional>
#include <random>
#include <vector>

#include "moesim/cost_model.hpp"
#include "moesim/model.hpp"
#include "moesim/scheduler.hpp"

namespace oracle {

using moesim::CostModel;
using moesim::ExpertRef;
using moesim::LayerWork;

// Makespan of one CPU/GPU assignment: bit i of `cpu_mask` puts task i on
// the CPU.
//
// CPU side: one machine, the first expert pays the penalty, so the lightest
// expert goes first and the rest in any order.
// GPU side: transfers leave back to back from pcie_start, heaviest first; a
// single machine with release dates finishes earliest when it never idles
// while something is released, so we just run jobs in release order.
inline double assignment_makespan(const LayerWork& work, const CostModel& cost, uint64_t cpu_mask) {
    std::vector<uint32_t> cpu;
    std::vector<std::pair<uint32_t, ExpertRef>> moved;
    std::vector<std::pair<double, uint32_t>> gpu;  // release, load
    for (size_t i = 0; i < work.tasks.size(); ++i) {
        const auto& t = work.tasks[i];
        if (cpu_mask >> i & 1) cpu.push_back(t.load);
        else if (t.cached) gpu.push_back({t.ready_at, t.load});
        else moved.push_back({t.load, t.ref});
    }
    double cpu_end = 0.0;
    std::sort(cpu.begin(), cpu.end());
    for (size_t k = 0; k < cpu.size(); ++k) cpu_end += cost.cpu(cpu[k], k);

    std::sort(moved.begin(), moved.end(), [](auto& a, auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    double link = work.pcie_start;
    for (auto& [load, ref] : moved) {
        link += cost.transfer();
        gpu.push_back({link, load});
    }
    std::sort(gpu.begin(), gpu.end());
    double gpu_end = 0.0;
    for (auto& [release, load] : gpu) gpu_end = std::max(gpu_end, release) + cost.gpu(load);
    return std::max(cpu_end, gpu_end);
}

inline double all_cpu_makespan(const LayerWork& work, const CostModel& cost) {
    return assignment_makespan(work, cost, ~uint64_t{0});
}

inline double all_gpu_makespan(const LayerWork& work, const CostModel& cost) {
    return assignment_makespan(work, cost, 0);
}

// Best makespan over the CPU masks accepted by `keep`.
template <class Keep>
double best_makespan_where(const LayerWork& work, const CostModel& cost, Keep keep) {
    const size_t n = work.tasks.size();
    double best = std::numeric_limits<double>::infinity();
    for (uint64_t mask = 0; mask < (uint64_t{1} << n); ++mask)
        if (keep(mask)) best = std::min(best, assignment_makespan(work, cost, mask));
    return best;
}

// Best makespan over every CPU/GPU assignment.
inline double best_makespan(const LayerWork& work, const CostModel& cost) {
    if (work.tasks.empty()) return 0.0;
    return best_makespan_where(work, cost, [](uint64_t) { return true; });
}

// Counts broken plan invariants: per-device overlap, compute before the
// expert's transfer ends, activated experts not computed exactly once, and a
// makespan different from the latest event end.
inline int plan_violations(const moesim::SchedulePlan& plan, const LayerWork& work) {
    using moesim::Device;
    using moesim::EventKind;
    int bad = 0;
    double latest = 0.0;
    for (const auto& a : plan.events) {
        latest = std::max(latest, a.end);
        if (a.end < a.start) ++bad;
        for (const auto& b : plan.events)
            if (&a < &b && a.device == b.device && a.start < b.end && b.start < a.end) ++bad;
    }
    for (const auto& t : work.tasks) {
        int computes = 0;
        double compute_start = 0.0, transfer_end = -1.0;
        for (const auto& e : plan.events) {
            if (!(e.expert == t.ref)) continue;
            if (e.kind == EventKind::kCompute) {
                ++computes;
                compute_start = e.start;
            } else {
                transfer_end = e.end;
            }
        }
        if (computes != 1) ++bad;
        if (transfer_end >= 0.0 && compute_start < transfer_end) {
            // Only a GPU compute has to wait for the transfer.
            for (const auto& e : plan.events)
                if (e.expert == t.ref && e.kind == EventKind::kCompute && e.device == Device::kGpu) ++bad;
        }
        if (!t.cached && transfer_end < 0.0)
            for (const auto& e : plan.events)
                if (e.expert == t.ref && e.kind == EventKind::kCompute && e.device == Device::kGpu) ++bad;
    }
    if (plan.makespan != latest) ++bad;
    return bad;
}

// Textbook LRU over a linked list, most recent at the front.
class Lru {
public:
    explicit Lru(size_t capacity) : capacity_(capacity) {}

    bool access(ExpertRef r) {
        auto it = std::find(items_.begin(), items_.end(), r);
        if (it != items_.end()) {
            items_.splice(items_.begin(), items_, it);
            return true;
        }
        return false;
    }

    std::optional<ExpertRef> insert(ExpertRef r) {
        std::optional<ExpertRef> victim;
        if (items_.size() == capacity_) {
            victim = items_.back();
            items_.pop_back();
        }
        items_.push_front(r);
        return victim;
    }

private:
    size_t capacity_;
    std::list<ExpertRef> items_;
};

// Textbook LFU: counts restart when an expert re-enters; ties go to the
// least recently used.
class Lfu {
public:
    explicit Lfu(size_t capacity) : capacity_(capacity) {}

    bool access(ExpertRef r) {
        for (auto& e : items_)
            if (e.ref == r) {
                ++e.count;
                e.last = ++clock_;
                return true;
            }
        return false;
    }

    std::optional<ExpertRef> insert(ExpertRef r) {
        std::optional<ExpertRef> victim;
        if (items_.size() == capacity_) {
            auto worst = std::min_element(items_.begin(), items_.end(), [](const Entry& a, const Entry& b) {
                return a.count != b.count ? a.count < b.count : a.last < b.last;
            });
            victim = worst->ref;
            items_.erase(worst);
        }
        items_.push_back({r, 1, ++clock_});
        return victim;
    }

private:
    struct Entry {
        ExpertRef ref;
        uint64_t count;
        uint64_t last;
    };
    size_t capacity_;
    uint64_t clock_ = 0;
    std::vector<Entry> items_;
};

// Random layer instance: n experts, loads in [1, max_load], each cached with
// probability one half.
inline LayerWork random_work(std::mt19937_64& rng, size_t n, uint32_t max_load) {
    std::uniform_int_distribution<uint32_t> load(1, max_load);
    std::bernoulli_distribution cached(0.5);
    LayerWork w;
    for (size_t i = 0; i < n; ++i) {
        moesim::ExpertTask t;
        t.ref = {0, static_cast<uint32_t>(i)};
        t.load = load(rng);
        t.cached = cached(rng);
        w.tasks.push_back(t);
    }
    return w;
}

// Profile where moving a one-byte expert costs `transfer` units, GPU compute
// 1, CPU `cpu_slope` per token with the given first-expert penalty. Use with
// CostModel(profile, 1).
inline moesim::HardwareProfile toy_profile(double transfer, double cpu_slope = 1.0, double penalty = 1.0) {
    moesim::HardwareProfile p;
    p.gpu_time_per_expert = 1.0;
    p.cpu_slope = cpu_slope;
    p.cpu_first_expert_penalty = penalty;
    p.transfer_bandwidth = transfer > 0 ? 1.0 / transfer : 1e300;
    p.transfer_latency = 0.0;
    return p;
}

}  // namespace oracle
