// model.hpp - shared domain types for the MoE offloading simulator
//
// Model shapes, expert identities, per-layer routing requests and traces.
// Everything here is plain value data; the only mutable state in the
// simulator lives in the cache and the engine.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace moesim {

// Raised when a caller breaks a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Raised when the simulator catches itself producing an inconsistent state.
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Raised for bad input data (files, samples, flags that parse but make no sense).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Device { kCpu, kGpu, kPcie };

const char* device_name(Device d);
std::optional<Device> parse_device(const std::string& tag);

struct ExpertDims {
    uint64_t hidden = 0;
    uint64_t intermediate = 0;

    bool operator==(const ExpertDims&) const = default;
};

struct ModelConfig {
    std::string name = "custom";
    uint32_t num_layers = 1;
    uint32_t num_routed = 1;
    uint32_t num_shared = 0;
    uint32_t num_activated = 1;
    ExpertDims routed_dims{1, 1};
    std::optional<ExpertDims> shared_dims;
    double bytes_per_weight = 1.0;

    bool operator==(const ModelConfig&) const = default;
};

// Returns a list of human readable problems; empty when the config is usable.
std::vector<std::string> config_problems(const ModelConfig& config);
void require_valid(const ModelConfig& config);

// Bytes of one routed expert: gate, up and down projections.
uint64_t expert_bytes(const ModelConfig& config);
uint64_t shared_expert_bytes(const ModelConfig& config);

// Model presets. Layer / routed / activated counts and expert shapes are the
// published ones; bytes_per_weight = 0.5 models 4-bit weights.
ModelConfig mixtral_config();
ModelConfig qwen2_config();
ModelConfig deepseek_config();
std::optional<ModelConfig> preset_config(const std::string& name);
std::vector<std::string> preset_names();

struct ExpertRef {
    uint32_t layer = 0;
    uint32_t expert = 0;

    auto operator<=>(const ExpertRef&) const = default;
};

std::string to_string(const ExpertRef& ref);

struct LayerRequest {
    uint32_t layer = 0;
    std::vector<uint32_t> loads;
    std::vector<double> scores;
    // Ascending expert indices with a nonzero load.
    std::vector<uint32_t> activated;

    bool operator==(const LayerRequest&) const = default;

    uint32_t load_of(uint32_t expert) const { return loads.at(expert); }
    uint64_t total_load() const;

    // Builds a request and derives `activated` from the loads.
    static LayerRequest from_loads(uint32_t layer, std::vector<uint32_t> loads,
                                   std::vector<double> scores);
};

enum class Stage { kPrefill, kDecode };

const char* stage_name(Stage s);
std::optional<Stage> parse_stage(const std::string& s);

struct ForwardPass {
    Stage stage = Stage::kDecode;
    uint32_t token_count = 1;
    std::vector<LayerRequest> layers;

    bool operator==(const ForwardPass&) const = default;
};

struct Trace {
    ModelConfig config;
    std::vector<ForwardPass> passes;
    std::map<std::string, std::string> metadata;

    bool operator==(const Trace&) const = default;
};

struct Violation {
    std::optional<size_t> pass;
    std::optional<uint32_t> layer;
    std::string rule;
    std::string detail;
};

std::string to_string(const Violation& v);

inline constexpr double kScoreSumTolerance = 1e-9;

// Checks one layer request against the config. `token_count` is the pass size.
std::vector<Violation> validate_layer(const ModelConfig& config, const LayerRequest& request,
                                      Stage stage, uint32_t token_count);

// Empty iff every trace invariant holds.
std::vector<Violation> validate_trace(const Trace& trace);

// Indices of the `count` largest values, ties broken by lower index. The
// result is ordered by descending value.
std::vector<uint32_t> top_indices(const std::vector<double>& values, size_t count);

}  // namespace moesim
