#include "moesim/cache.hpp"

#include <algorithm>
#include <cmath>

namespace moesim {

const char* policy_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::kMrs: return "mrs";
        case PolicyKind::kLru: return "lru";
        case PolicyKind::kLfu: return "lfu";
    }
    return "?";
}

std::optional<PolicyKind> parse_policy(const std::string& s) {
    if (s == "mrs" || s == "MRS") return PolicyKind::kMrs;
    if (s == "lru" || s == "LRU") return PolicyKind::kLru;
    if (s == "lfu" || s == "LFU") return PolicyKind::kLfu;
    return std::nullopt;
}

MrsState MrsState::uniform(const ModelConfig& config, double alpha, std::optional<uint32_t> p) {
    require_valid(config);
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("MRS alpha must lie in (0, 1]");
    MrsState s;
    s.num_layers = config.num_layers;
    s.num_routed = config.num_routed;
    s.alpha = alpha;
    s.p = p.value_or(std::min(2 * config.num_activated, config.num_routed));
    s.S.assign(size_t{config.num_layers} * config.num_routed, 1.0 / config.num_routed);
    return s;
}

std::vector<double> top_p(std::span<const double> scores, size_t p) {
    std::vector<double> values(scores.begin(), scores.end());
    std::vector<double> out(values.size(), 0.0);
    for (uint32_t i : top_indices(values, p)) out[i] = values[i];
    return out;
}

void mrs_update(MrsState& state, uint32_t layer, std::span<const double> scores) {
    if (layer >= state.num_layers) throw ContractError("mrs_update: layer out of range");
    if (scores.size() != state.num_routed) throw ContractError("mrs_update: scores length != num_routed");
    for (double s : scores)
        if (!(s >= 0.0)) throw ContractError("mrs_update: negative score");
    std::vector<double> values(scores.begin(), scores.end());
    std::vector<char> in_top(values.size(), 0);
    for (uint32_t i : top_indices(values, state.p)) in_top[i] = 1;
    double* S = state.S.data() + size_t{layer} * state.num_routed;
    for (size_t i = 0; i < values.size(); ++i) {
        if (!in_top[i] && !state.decay) continue;
        const double kept = in_top[i] ? values[i] : 0.0;
        S[i] = state.alpha * kept + (1.0 - state.alpha) * S[i];
    }
}

CacheStats& CacheStats::operator+=(const CacheStats& o) {
    lookups += o.lookups;
    hits += o.hits;
    inserts += o.inserts;
    evictions += o.evictions;
    return *this;
}

std::optional<double> hit_rate(const CacheStats& stats) {
    if (stats.lookups == 0) return std::nullopt;
    return static_cast<double>(stats.hits) / static_cast<double>(stats.lookups);
}

size_t cache_capacity(const ModelConfig& config, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("cache ratio must lie in (0, 1]");
    const double slots = ratio * config.num_layers * config.num_routed;
    return static_cast<size_t>(std::floor(slots + 1e-9));
}

ExpertCache::ExpertCache(size_t capacity, PolicyKind policy, MrsState mrs)
    : capacity_(capacity), policy_(policy), mrs_(std::move(mrs)) {
    if (policy_ == PolicyKind::kMrs && mrs_.S.empty())
        throw ContractError("MRS cache needs an initialised MrsState");
}

std::vector<ExpertRef> ExpertCache::resident() const {
    std::vector<ExpertRef> out;
    out.reserve(resident_.size());
    for (const auto& [ref, e] : resident_) out.push_back(ref);
    return out;
}

ExpertCache::Key ExpertCache::key_for(ExpertRef ref, uint64_t tick, uint64_t freq) const {
    switch (policy_) {
        case PolicyKind::kMrs: return {mrs_.score(ref), 0, ref};
        case PolicyKind::kLru: return {static_cast<double>(tick), 0, ref};
        case PolicyKind::kLfu: return {static_cast<double>(freq), tick, ref};
    }
    return {};
}

void ExpertCache::reindex(ExpertRef ref) {
    auto& e = resident_.at(ref);
    order_.erase(e.key);
    e.key = key_for(ref, e.last_access, e.frequency);
    order_.insert(e.key);
}

bool ExpertCache::lookup(ExpertRef ref) {
    ++stats_.lookups;
    auto it = resident_.find(ref);
    if (it == resident_.end()) return false;
    ++stats_.hits;
    if (policy_ != PolicyKind::kMrs) {
        it->second.last_access = ++tick_;
        ++it->second.frequency;
        reindex(ref);
    }
    return true;
}

std::optional<ExpertRef> ExpertCache::victim() const {
    if (resident_.size() < capacity_) return std::nullopt;
    for (const auto& key : order_) {
        const ExpertRef ref = std::get<2>(key);
        if (!pinned(ref)) return ref;
    }
    return std::nullopt;
}

bool ExpertCache::can_insert() const {
    if (resident_.size() < capacity_) return true;
    return victim().has_value();
}

std::optional<ExpertRef> ExpertCache::insert(ExpertRef ref) {
    if (contains(ref)) throw ContractError("insert: " + to_string(ref) + " is already resident");
    if (capacity_ == 0) throw EvictionFailure("insert: cache has zero capacity");
    std::optional<ExpertRef> evicted;
    if (resident_.size() >= capacity_) {
        evicted = victim();
        if (!evicted) throw EvictionFailure("insert: every resident expert is pinned");
        order_.erase(resident_.at(*evicted).key);
        resident_.erase(*evicted);
        ++stats_.evictions;
    }
    Entry e;
    e.last_access = ++tick_;
    e.frequency = 1;
    e.key = key_for(ref, e.last_access, e.frequency);
    order_.insert(e.key);
    resident_.emplace(ref, e);
    ++stats_.inserts;
    return evicted;
}

void ExpertCache::pin(ExpertRef ref) {
    if (!contains(ref)) throw ContractError("pin: " + to_string(ref) + " is not resident");
    ++pins_[ref];
}

void ExpertCache::unpin(ExpertRef ref) {
    auto it = pins_.find(ref);
    if (it == pins_.end()) return;
    if (--it->second <= 0) pins_.erase(it);
}

void ExpertCache::update_scores(uint32_t layer, std::span<const double> scores) {
    if (mrs_.S.empty()) return;
    mrs_update(mrs_, layer, scores);
    if (policy_ != PolicyKind::kMrs) return;
    auto first = resident_.lower_bound(ExpertRef{layer, 0});
    auto last = resident_.lower_bound(ExpertRef{layer + 1, 0});
    std::vector<ExpertRef> refs;
    for (auto it = first; it != last; ++it) refs.push_back(it->first);
    for (auto ref : refs) reindex(ref);
}

CacheStats replay_on_demand(const Trace& trace, PolicyKind policy, double ratio, double alpha) {
    const auto& cfg = trace.config;
    ExpertCache cache(cache_capacity(cfg, ratio), policy, MrsState::uniform(cfg, alpha));
    for (const auto& pass : trace.passes) {
        for (const auto& req : pass.layers) {
            std::vector<ExpertRef> pinned;
            std::vector<ExpertRef> misses;
            for (uint32_t e : req.activated) {
                const ExpertRef ref{req.layer, e};
                if (cache.lookup(ref)) {
                    cache.pin(ref);
                    pinned.push_back(ref);
                } else {
                    misses.push_back(ref);
                }
            }
            for (auto ref : misses) {
                if (!cache.can_insert()) continue;
                cache.insert(ref);
                cache.pin(ref);
                pinned.push_back(ref);
            }
            cache.update_scores(req.layer, req.scores);
            for (auto ref : pinned) cache.unpin(ref);
        }
    }
    return cache.stats();
}

}  // namespace moesim
