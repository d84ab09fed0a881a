// prefetcher.hpp - impact-driven inter-layer prefetching
//
// While layer L runs, the prefetcher looks at predicted routing for the next
// few layers, asks the scheduler how much each uncached expert would shorten
// its layer if it were already on the GPU, and spends idle PCIe time on the
// experts with the largest gain.
//
// Predictions are noisy ground truth: there are no hidden states to run real
// gates on, so the true future request is perturbed at a given accuracy.

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "moesim/cache.hpp"
#include "moesim/cost_model.hpp"
#include "moesim/model.hpp"
#include "moesim/scheduler.hpp"

namespace moesim {

struct PredictionModel {
    uint32_t horizon = 3;
    // Probability that each predicted activated expert is the true one.
    double accuracy = 0.85;
};

void require_valid(const PredictionModel& model, const ModelConfig& config);

struct PrefetchCandidate {
    ExpertRef expert;
    uint32_t predicted_load = 0;
    double gain = 0.0;
    double cost = 0.0;

    bool operator==(const PrefetchCandidate&) const = default;
};

// Replaces each activated expert with probability (1 - accuracy): the dropped
// slots are refilled uniformly from the experts that were not kept, and the
// newcomers take over the loads and scores of the experts they displace.
LayerRequest perturb_request(const LayerRequest& truth, double accuracy, std::mt19937_64& rng);

// Predicted requests for layers current_layer+1 .. current_layer+horizon,
// truncated at the last layer. Deterministic in (seed, pass, layer).
std::vector<LayerRequest> predict_activations(const Trace& trace, size_t pass, uint32_t current_layer,
                                              const PredictionModel& model, uint64_t seed);

// Makespan of the predicted layer without the candidate minus the makespan
// with the candidate cached.
double evaluate_gain(ExpertRef candidate, const LayerRequest& predicted,
                     const std::function<bool(ExpertRef)>& is_cached, const CostModel& cost,
                     const Planner& planner = kHybridPlanner);
double evaluate_gain(ExpertRef candidate, const LayerRequest& predicted, const ExpertCache& cache,
                     const CostModel& cost);

// One candidate per uncached predicted-activated expert, gains included.
// Experts for which `skip` is true are left out (already in flight, say).
std::vector<PrefetchCandidate> gather_candidates(const std::vector<LayerRequest>& predicted,
                                                 const std::function<bool(ExpertRef)>& is_cached,
                                                 const CostModel& cost, const Planner& planner = kHybridPlanner,
                                                 const std::function<bool(ExpertRef)>& skip = {});

// Ranks by gain (ties: nearer layer, then expert order), drops gain <= 0, and
// admits candidates while the transfer can still start inside the budget,
// i.e. while the summed cost of earlier picks is below idle_budget.
std::vector<ExpertRef> select_prefetches(std::vector<PrefetchCandidate> candidates, double idle_budget);

}  // namespace moesim
