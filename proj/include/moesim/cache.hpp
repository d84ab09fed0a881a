// cache.hpp - GPU expert cache with score-aware (MRS), LRU and LFU replacement
//
// MRS keeps, for every routed expert of every layer, an exponentially
// averaged priority S built from the top-p routing scores of each pass:
//
//     S <- alpha * TopP(s) + (1 - alpha) * S
//
// where TopP zeroes everything except the p largest scores. On eviction the
// resident expert with the smallest S goes first. The pool is global across
// layers; per-layer scores are probability vectors, so S values compare.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "moesim/model.hpp"

namespace moesim {

enum class PolicyKind { kMrs, kLru, kLfu };

const char* policy_name(PolicyKind k);
std::optional<PolicyKind> parse_policy(const std::string& s);

struct MrsState {
    uint32_t num_layers = 0;
    uint32_t num_routed = 0;
    double alpha = 0.5;
    uint32_t p = 0;
    // When false, experts outside the top p keep their S instead of decaying.
    bool decay = true;
    std::vector<double> S;

    // S = 1/N everywhere, p defaults to 2K.
    static MrsState uniform(const ModelConfig& config, double alpha = 0.5,
                            std::optional<uint32_t> p = std::nullopt);

    double score(ExpertRef ref) const { return S[size_t{ref.layer} * num_routed + ref.expert]; }
    double& score(ExpertRef ref) { return S[size_t{ref.layer} * num_routed + ref.expert]; }
};

// Keeps the p largest entries (ties by lower index) and zeroes the rest.
std::vector<double> top_p(std::span<const double> scores, size_t p);

void mrs_update(MrsState& state, uint32_t layer, std::span<const double> scores);

struct CacheStats {
    uint64_t lookups = 0;
    uint64_t hits = 0;
    uint64_t inserts = 0;
    uint64_t evictions = 0;

    CacheStats& operator+=(const CacheStats& o);
    bool operator==(const CacheStats&) const = default;
};

// Absent when nothing was looked up.
std::optional<double> hit_rate(const CacheStats& stats);

// floor(ratio * layers * routed)
size_t cache_capacity(const ModelConfig& config, double ratio);

class EvictionFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ExpertCache {
public:
    ExpertCache(size_t capacity, PolicyKind policy, MrsState mrs = {});

    size_t capacity() const { return capacity_; }
    size_t size() const { return resident_.size(); }
    PolicyKind policy() const { return policy_; }

    bool contains(ExpertRef ref) const { return resident_.count(ref) != 0; }
    std::vector<ExpertRef> resident() const;

    // Counts a lookup; on a hit LRU refreshes recency and LFU bumps frequency.
    bool lookup(ExpertRef ref);

    // Inserts a non-resident expert, evicting a non-pinned victim when full.
    // Returns the victim. Throws EvictionFailure when every resident is pinned.
    std::optional<ExpertRef> insert(ExpertRef ref);

    // True when insert() would succeed.
    bool can_insert() const;

    // The expert insert() would evict right now, if the cache is full.
    std::optional<ExpertRef> victim() const;

    // Pins are counted; an expert is pinned while its count is positive.
    void pin(ExpertRef ref);
    void unpin(ExpertRef ref);
    bool pinned(ExpertRef ref) const { return pins_.count(ref) != 0; }
    size_t pinned_count() const { return pins_.size(); }

    // Feeds one layer's routing scores into the MRS priorities.
    void update_scores(uint32_t layer, std::span<const double> scores);

    const MrsState& mrs() const { return mrs_; }
    const CacheStats& stats() const { return stats_; }
    void reset_stats() { stats_ = {}; }

private:
    using Key = std::tuple<double, uint64_t, ExpertRef>;

    Key key_for(ExpertRef ref, uint64_t tick, uint64_t freq) const;
    void reindex(ExpertRef ref);

    struct Entry {
        uint64_t last_access = 0;
        uint64_t frequency = 0;
        Key key;
    };

    size_t capacity_;
    PolicyKind policy_;
    MrsState mrs_;
    std::map<ExpertRef, Entry> resident_;
    std::set<Key> order_;
    std::map<ExpertRef, int> pins_;
    uint64_t tick_ = 0;
    CacheStats stats_;
};

// Classic demand caching: every miss is fetched and inserted, MRS scores are
// fed after each layer. Equivalent to the engine's GPU-on-demand policy
// without prefetch, minus the timing.
CacheStats replay_on_demand(const Trace& trace, PolicyKind policy, double ratio, double alpha = 0.5);

}  // namespace moesim
