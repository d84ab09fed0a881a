#include "moesim/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace moesim {

const char* device_name(Device d) {
    switch (d) {
        case Device::kCpu: return "cpu";
        case Device::kGpu: return "gpu";
        case Device::kPcie: return "pcie";
    }
    return "?";
}

std::optional<Device> parse_device(const std::string& tag) {
    if (tag == "cpu") return Device::kCpu;
    if (tag == "gpu") return Device::kGpu;
    if (tag == "pcie") return Device::kPcie;
    return std::nullopt;
}

std::vector<std::string> config_problems(const ModelConfig& c) {
    std::vector<std::string> out;
    if (c.num_layers < 1) out.emplace_back("num_layers must be >= 1");
    if (c.num_routed < 1) out.emplace_back("num_routed must be >= 1");
    if (c.num_activated < 1 || c.num_activated > c.num_routed)
        out.emplace_back("num_activated must lie in [1, num_routed]");
    if (c.routed_dims.hidden < 1 || c.routed_dims.intermediate < 1)
        out.emplace_back("routed expert dims must be >= 1");
    if (c.shared_dims && (c.shared_dims->hidden < 1 || c.shared_dims->intermediate < 1))
        out.emplace_back("shared expert dims must be >= 1");
    if (c.num_shared > 0 && !c.shared_dims)
        out.emplace_back("num_shared > 0 requires shared expert dims");
    if (!(c.bytes_per_weight > 0.0) || !std::isfinite(c.bytes_per_weight))
        out.emplace_back("bytes_per_weight must be positive");
    return out;
}

void require_valid(const ModelConfig& config) {
    auto problems = config_problems(config);
    if (!problems.empty()) throw ContractError("invalid model config: " + problems.front());
}

namespace {
uint64_t projection_bytes(const ExpertDims& dims, double bytes_per_weight) {
    const double weights = 3.0 * static_cast<double>(dims.hidden) * static_cast<double>(dims.intermediate);
    return static_cast<uint64_t>(std::ceil(weights * bytes_per_weight));
}
}  // namespace

uint64_t expert_bytes(const ModelConfig& config) {
    require_valid(config);
    return projection_bytes(config.routed_dims, config.bytes_per_weight);
}

uint64_t shared_expert_bytes(const ModelConfig& config) {
    if (!config.shared_dims) return 0;
    return projection_bytes(*config.shared_dims, config.bytes_per_weight);
}

ModelConfig mixtral_config() {
    ModelConfig c;
    c.name = "mixtral";
    c.num_layers = 32;
    c.num_routed = 8;
    c.num_shared = 0;
    c.num_activated = 2;
    c.routed_dims = {4096, 14336};
    c.bytes_per_weight = 0.5;
    return c;
}

ModelConfig qwen2_config() {
    ModelConfig c;
    c.name = "qwen2";
    c.num_layers = 28;
    c.num_routed = 64;
    c.num_shared = 1;
    c.num_activated = 8;
    c.routed_dims = {3584, 18944};
    c.shared_dims = ExpertDims{3584, 20480};
    c.bytes_per_weight = 0.5;
    return c;
}

ModelConfig deepseek_config() {
    ModelConfig c;
    c.name = "deepseek";
    c.num_layers = 26;
    c.num_routed = 64;
    c.num_shared = 2;
    c.num_activated = 6;
    c.routed_dims = {2048, 1408};
    c.shared_dims = ExpertDims{2048, 1408};
    c.bytes_per_weight = 0.5;
    return c;
}

std::optional<ModelConfig> preset_config(const std::string& name) {
    if (name == "mixtral") return mixtral_config();
    if (name == "qwen2") return qwen2_config();
    if (name == "deepseek") return deepseek_config();
    return std::nullopt;
}

std::vector<std::string> preset_names() { return {"mixtral", "qwen2", "deepseek"}; }

std::string to_string(const ExpertRef& ref) {
    return "L" + std::to_string(ref.layer) + "E" + std::to_string(ref.expert);
}

uint64_t LayerRequest::total_load() const {
    return std::accumulate(loads.begin(), loads.end(), uint64_t{0});
}

LayerRequest LayerRequest::from_loads(uint32_t layer, std::vector<uint32_t> loads,
                                      std::vector<double> scores) {
    LayerRequest r;
    r.layer = layer;
    r.loads = std::move(loads);
    r.scores = std::move(scores);
    for (uint32_t i = 0; i < r.loads.size(); ++i)
        if (r.loads[i] > 0) r.activated.push_back(i);
    return r;
}

const char* stage_name(Stage s) { return s == Stage::kPrefill ? "prefill" : "decode"; }

std::optional<Stage> parse_stage(const std::string& s) {
    if (s == "prefill") return Stage::kPrefill;
    if (s == "decode") return Stage::kDecode;
    return std::nullopt;
}

std::string to_string(const Violation& v) {
    std::ostringstream os;
    if (v.pass) os << "pass " << *v.pass << ' ';
    if (v.layer) os << "layer " << *v.layer << ' ';
    os << '[' << v.rule << "] " << v.detail;
    return os.str();
}

std::vector<uint32_t> top_indices(const std::vector<double>& values, size_t count) {
    std::vector<uint32_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0u);
    count = std::min(count, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                      [&](uint32_t a, uint32_t b) {
                          if (values[a] != values[b]) return values[a] > values[b];
                          return a < b;
                      });
    idx.resize(count);
    return idx;
}

std::vector<Violation> validate_layer(const ModelConfig& config, const LayerRequest& r,
                                      Stage stage, uint32_t token_count) {
    std::vector<Violation> out;
    auto add = [&](std::string rule, std::string detail) {
        out.push_back({std::nullopt, r.layer, std::move(rule), std::move(detail)});
    };
    const size_t n = config.num_routed;
    if (r.layer >= config.num_layers) add("layer-range", "layer index out of range");
    if (r.loads.size() != n) {
        add("loads-length", "expected " + std::to_string(n) + " loads, got " + std::to_string(r.loads.size()));
        return out;
    }
    if (r.scores.size() != n) {
        add("scores-length", "expected " + std::to_string(n) + " scores, got " + std::to_string(r.scores.size()));
        return out;
    }

    std::vector<uint32_t> expected_active;
    for (uint32_t i = 0; i < n; ++i)
        if (r.loads[i] > 0) expected_active.push_back(i);
    if (expected_active != r.activated) {
        for (uint32_t i : expected_active)
            if (!std::binary_search(r.activated.begin(), r.activated.end(), i))
                add("activated-set", "expert " + std::to_string(i) + " has load but is not activated");
        for (uint32_t i : r.activated)
            if (i >= n || r.loads[i] == 0)
                add("activated-set", "expert " + std::to_string(i) + " is activated without load");
        if (!std::is_sorted(r.activated.begin(), r.activated.end()))
            add("activated-set", "activated indices not ascending");
    }

    const uint64_t total = r.total_load();
    const uint64_t want = uint64_t{token_count} * config.num_activated;
    if (total != want)
        add("load-sum", "sum of loads " + std::to_string(total) + " != token_count x K = " + std::to_string(want));

    if (stage == Stage::kDecode && token_count == 1) {
        if (expected_active.size() != config.num_activated)
            add("decode-k", "single-token pass activates " + std::to_string(expected_active.size()) + " experts");
        for (uint32_t i : expected_active)
            if (r.loads[i] != 1) add("decode-load", "expert " + std::to_string(i) + " load != 1");
    }

    double sum = 0.0;
    bool negative = false;
    for (double s : r.scores) {
        if (!(s >= 0.0)) negative = true;
        sum += s;
    }
    if (negative) add("score-sign", "scores must be nonnegative");
    if (std::abs(sum - 1.0) > kScoreSumTolerance)
        add("score-normalization", "scores sum to " + std::to_string(sum));

    // Token-averaged prefill scores need not rank the union of per-token
    // selections first, so the top-k consistency rule is checked on
    // single-token passes only.
    if (token_count == 1 && !expected_active.empty()) {
        auto top = top_indices(r.scores, expected_active.size());
        std::sort(top.begin(), top.end());
        if (top != expected_active) add("topk-consistency", "activated set is not the top scores");
    }
    return out;
}

std::vector<Violation> validate_trace(const Trace& trace) {
    std::vector<Violation> out;
    for (const auto& p : config_problems(trace.config)) out.push_back({std::nullopt, std::nullopt, "config", p});
    if (!out.empty()) return out;

    for (size_t pi = 0; pi < trace.passes.size(); ++pi) {
        const auto& pass = trace.passes[pi];
        if (pass.token_count < 1)
            out.push_back({pi, std::nullopt, "token-count", "token_count must be >= 1"});
        if (pass.layers.size() != trace.config.num_layers)
            out.push_back({pi, std::nullopt, "layer-count",
                           "expected " + std::to_string(trace.config.num_layers) + " layers, got " +
                               std::to_string(pass.layers.size())});
        for (size_t li = 0; li < pass.layers.size(); ++li) {
            const auto& layer = pass.layers[li];
            if (layer.layer != li)
                out.push_back({pi, layer.layer, "layer-order", "layer at position " + std::to_string(li)});
            for (auto v : validate_layer(trace.config, layer, pass.stage, pass.token_count)) {
                v.pass = pi;
                out.push_back(std::move(v));
            }
        }
    }
    return out;
}

}  // namespace moesim
