#include "moesim/prefetcher.hpp"

#include <algorithm>
#include <optional>
#include <set>

namespace moesim {

void require_valid(const PredictionModel& model, const ModelConfig& config) {
    if (model.horizon < 1 || model.horizon > config.num_layers)
        throw ContractError("prediction horizon must lie in [1, num_layers]");
    if (!(model.accuracy >= 0.0 && model.accuracy <= 1.0))
        throw ContractError("prediction accuracy must lie in [0, 1]");
}

LayerRequest perturb_request(const LayerRequest& truth, double accuracy, std::mt19937_64& rng) {
    if (accuracy >= 1.0) return truth;
    const auto n = static_cast<uint32_t>(truth.loads.size());

    std::bernoulli_distribution drop(1.0 - accuracy);
    std::vector<char> kept(n, 0);
    size_t dropped = 0;
    for (uint32_t e : truth.activated) {
        if (drop(rng)) ++dropped;
        else kept[e] = 1;
    }
    if (dropped == 0) return truth;

    std::vector<uint32_t> pool;
    for (uint32_t e = 0; e < n; ++e)
        if (!kept[e]) pool.push_back(e);
    std::vector<uint32_t> drawn;
    std::sample(pool.begin(), pool.end(), std::back_inserter(drawn), dropped, rng);

    const std::set<uint32_t> before(truth.activated.begin(), truth.activated.end());
    std::set<uint32_t> after;
    for (uint32_t e = 0; e < n; ++e)
        if (kept[e]) after.insert(e);
    after.insert(drawn.begin(), drawn.end());

    std::vector<uint32_t> gone, came;
    std::set_difference(before.begin(), before.end(), after.begin(), after.end(), std::back_inserter(gone));
    std::set_difference(after.begin(), after.end(), before.begin(), before.end(), std::back_inserter(came));

    LayerRequest out = truth;
    for (size_t i = 0; i < gone.size(); ++i) {
        std::swap(out.loads[gone[i]], out.loads[came[i]]);
        std::swap(out.scores[gone[i]], out.scores[came[i]]);
    }
    out.activated.assign(after.begin(), after.end());
    return out;
}

std::vector<LayerRequest> predict_activations(const Trace& trace, size_t pass, uint32_t current_layer,
                                              const PredictionModel& model, uint64_t seed) {
    if (pass >= trace.passes.size()) throw ContractError("predict_activations: pass out of range");
    const auto& layers = trace.passes[pass].layers;
    if (current_layer >= layers.size()) throw ContractError("predict_activations: layer out of range");

    std::vector<LayerRequest> out;
    const size_t last = std::min<size_t>(layers.size() - 1, size_t{current_layer} + model.horizon);
    for (size_t target = size_t{current_layer} + 1; target <= last; ++target) {
        std::seed_seq seq{seed, static_cast<uint64_t>(pass), static_cast<uint64_t>(current_layer),
                          static_cast<uint64_t>(target)};
        std::mt19937_64 rng(seq);
        out.push_back(perturb_request(layers[target], model.accuracy, rng));
    }
    return out;
}

double evaluate_gain(ExpertRef candidate, const LayerRequest& predicted,
                     const std::function<bool(ExpertRef)>& is_cached, const CostModel& cost,
                     const Planner& planner) {
    if (is_cached(candidate)) throw ContractError("evaluate_gain: " + to_string(candidate) + " is already cached");
    const LayerWork without = make_layer_work(predicted, is_cached);
    const LayerWork with =
        make_layer_work(predicted, [&](ExpertRef r) { return r == candidate || is_cached(r); });
    return planner(without, cost).makespan - planner(with, cost).makespan;
}

double evaluate_gain(ExpertRef candidate, const LayerRequest& predicted, const ExpertCache& cache,
                     const CostModel& cost) {
    return evaluate_gain(candidate, predicted, [&](ExpertRef r) { return cache.contains(r); }, cost, kHybridPlanner);
}

std::vector<PrefetchCandidate> gather_candidates(const std::vector<LayerRequest>& predicted,
                                                 const std::function<bool(ExpertRef)>& is_cached,
                                                 const CostModel& cost, const Planner& planner,
                                                 const std::function<bool(ExpertRef)>& skip) {
    std::vector<PrefetchCandidate> out;
    for (const auto& request : predicted) {
        std::optional<double> base;
        for (uint32_t e : request.activated) {
            const ExpertRef ref{request.layer, e};
            if (is_cached(ref) || (skip && skip(ref))) continue;
            if (!base) base = planner(make_layer_work(request, is_cached), cost).makespan;
            const LayerWork with =
                make_layer_work(request, [&](ExpertRef r) { return r == ref || is_cached(r); });
            out.push_back({ref, request.loads[e], *base - planner(with, cost).makespan, cost.transfer()});
        }
    }
    return out;
}

std::vector<ExpertRef> select_prefetches(std::vector<PrefetchCandidate> candidates, double idle_budget) {
    std::erase_if(candidates, [](const PrefetchCandidate& c) { return !(c.gain > 0.0); });
    std::sort(candidates.begin(), candidates.end(), [](const PrefetchCandidate& a, const PrefetchCandidate& b) {
        if (a.gain != b.gain) return a.gain > b.gain;
        return a.expert < b.expert;
    });
    std::vector<ExpertRef> out;
    double spent = 0.0;
    for (const auto& c : candidates) {
        if (!(spent < idle_budget)) break;
        out.push_back(c.expert);
        spent += c.cost;
    }
    return out;
}

}  // namespace moesim
