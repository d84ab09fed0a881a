#include "moesim/trace_io.hpp"

#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "json.hpp"

namespace moesim {

using Json = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(size_t line, const std::string& field, const std::string& what) {
    std::string msg = "trace line " + std::to_string(line);
    if (!field.empty()) msg += ", field '" + field + "'";
    throw DataError(msg + ": " + what);
}

const Json& field(const Json& rec, const char* name, size_t line) {
    auto it = rec.find(name);
    if (it == rec.end()) fail(line, name, "missing");
    return *it;
}

template <typename T>
T get_unsigned(const Json& rec, const char* name, size_t line) {
    const Json& v = field(rec, name, line);
    if (!v.is_number_unsigned()) fail(line, name, "expected a nonnegative integer");
    const auto raw = v.get<uint64_t>();
    if (raw > std::numeric_limits<T>::max()) fail(line, name, "out of range");
    return static_cast<T>(raw);
}

double get_number(const Json& rec, const char* name, size_t line) {
    const Json& v = field(rec, name, line);
    if (!v.is_number()) fail(line, name, "expected a number");
    return v.get<double>();
}

Json config_record(const Trace& trace) {
    const auto& c = trace.config;
    Json j;
    j["record"] = "config";
    j["name"] = c.name;
    j["num_layers"] = c.num_layers;
    j["num_routed"] = c.num_routed;
    j["num_shared"] = c.num_shared;
    j["num_activated"] = c.num_activated;
    j["routed_hidden"] = c.routed_dims.hidden;
    j["routed_intermediate"] = c.routed_dims.intermediate;
    j["shared_hidden"] = c.shared_dims ? Json(c.shared_dims->hidden) : Json();
    j["shared_intermediate"] = c.shared_dims ? Json(c.shared_dims->intermediate) : Json();
    j["bytes_per_weight"] = c.bytes_per_weight;
    Json meta = Json::object();
    for (const auto& [k, v] : trace.metadata) meta[k] = v;
    j["metadata"] = meta;
    return j;
}

ModelConfig parse_config(const Json& j, std::map<std::string, std::string>& metadata) {
    const size_t line = 1;
    if (!j.is_object()) fail(line, "", "expected a JSON object");
    const Json& tag = field(j, "record", line);
    if (tag != "config") fail(line, "record", "first line must be the config record");
    ModelConfig c;
    const Json& name = field(j, "name", line);
    if (!name.is_string()) fail(line, "name", "expected a string");
    c.name = name.get<std::string>();
    c.num_layers = get_unsigned<uint32_t>(j, "num_layers", line);
    c.num_routed = get_unsigned<uint32_t>(j, "num_routed", line);
    c.num_shared = get_unsigned<uint32_t>(j, "num_shared", line);
    c.num_activated = get_unsigned<uint32_t>(j, "num_activated", line);
    c.routed_dims = {get_unsigned<uint64_t>(j, "routed_hidden", line),
                     get_unsigned<uint64_t>(j, "routed_intermediate", line)};
    const Json& sh = field(j, "shared_hidden", line);
    const Json& si = field(j, "shared_intermediate", line);
    if (sh.is_null() != si.is_null()) fail(line, "shared_intermediate", "shared dims must both be set or both null");
    if (!sh.is_null())
        c.shared_dims = ExpertDims{get_unsigned<uint64_t>(j, "shared_hidden", line),
                                   get_unsigned<uint64_t>(j, "shared_intermediate", line)};
    c.bytes_per_weight = get_number(j, "bytes_per_weight", line);
    if (auto it = j.find("metadata"); it != j.end()) {
        if (!it->is_object()) fail(line, "metadata", "expected an object");
        for (const auto& [k, v] : it->items()) {
            if (!v.is_string()) fail(line, "metadata", "values must be strings");
            metadata[k] = v.get<std::string>();
        }
    }
    if (auto problems = config_problems(c); !problems.empty()) fail(line, "", "bad config: " + problems.front());
    return c;
}

}  // namespace

void write_trace(std::ostream& out, const Trace& trace) {
    out << config_record(trace).dump() << '\n';
    for (size_t p = 0; p < trace.passes.size(); ++p) {
        const auto& fp = trace.passes[p];
        for (const auto& req : fp.layers) {
            Json j;
            j["pass"] = p;
            j["stage"] = stage_name(fp.stage);
            j["token_count"] = fp.token_count;
            j["layer"] = req.layer;
            j["loads"] = req.loads;
            j["scores"] = req.scores;
            out << j.dump() << '\n';
        }
    }
}

Trace read_trace(std::istream& in) {
    Trace trace;
    std::string text;
    size_t line = 0;
    bool have_config = false;
    while (std::getline(in, text)) {
        ++line;
        if (text.empty()) continue;
        Json j;
        try {
            j = Json::parse(text);
        } catch (const Json::parse_error& e) {
            fail(line, "", std::string("malformed JSON (") + e.what() + ")");
        }
        if (!have_config) {
            trace.config = parse_config(j, trace.metadata);
            have_config = true;
            continue;
        }
        if (!j.is_object()) fail(line, "", "expected a JSON object");
        const auto& cfg = trace.config;
        const auto pass = get_unsigned<size_t>(j, "pass", line);
        const Json& stage_field = field(j, "stage", line);
        if (!stage_field.is_string()) fail(line, "stage", "expected a string");
        const auto stage = parse_stage(stage_field.get<std::string>());
        if (!stage) fail(line, "stage", "unknown stage '" + stage_field.get<std::string>() + "'");
        const auto tokens = get_unsigned<uint32_t>(j, "token_count", line);
        const auto layer = get_unsigned<uint32_t>(j, "layer", line);

        if (pass == trace.passes.size()) {
            if (!trace.passes.empty() && trace.passes.back().layers.size() != cfg.num_layers)
                fail(line, "pass", "previous pass has " + std::to_string(trace.passes.back().layers.size()) +
                                       " of " + std::to_string(cfg.num_layers) + " layers");
            ForwardPass fp;
            fp.stage = *stage;
            fp.token_count = tokens;
            trace.passes.push_back(std::move(fp));
        } else if (pass + 1 != trace.passes.size()) {
            fail(line, "pass", "records out of order: got pass " + std::to_string(pass) + " after pass " +
                                   (trace.passes.empty() ? std::string("none") : std::to_string(trace.passes.size() - 1)));
        }
        auto& fp = trace.passes.back();
        if (fp.stage != *stage) fail(line, "stage", "stage changes within a pass");
        if (fp.token_count != tokens) fail(line, "token_count", "token count changes within a pass");
        if (layer != fp.layers.size())
            fail(line, "layer", "expected layer " + std::to_string(fp.layers.size()) + ", got " + std::to_string(layer));
        if (layer >= cfg.num_layers) fail(line, "layer", "beyond num_layers");

        const Json& loads = field(j, "loads", line);
        const Json& scores = field(j, "scores", line);
        if (!loads.is_array()) fail(line, "loads", "expected an array");
        if (!scores.is_array()) fail(line, "scores", "expected an array");
        if (loads.size() != cfg.num_routed)
            fail(line, "loads", "length " + std::to_string(loads.size()) + " != num_routed " +
                                    std::to_string(cfg.num_routed));
        if (scores.size() != cfg.num_routed)
            fail(line, "scores", "length " + std::to_string(scores.size()) + " != num_routed " +
                                     std::to_string(cfg.num_routed));
        std::vector<uint32_t> l;
        std::vector<double> s;
        l.reserve(loads.size());
        s.reserve(scores.size());
        for (const auto& v : loads) {
            if (!v.is_number_unsigned()) fail(line, "loads", "entries must be nonnegative integers");
            l.push_back(v.get<uint32_t>());
        }
        for (const auto& v : scores) {
            if (!v.is_number()) fail(line, "scores", "entries must be numbers");
            s.push_back(v.get<double>());
        }
        fp.layers.push_back(LayerRequest::from_loads(layer, std::move(l), std::move(s)));
    }
    if (!have_config) fail(line + 1, "", "empty trace file");
    if (!trace.passes.empty() && trace.passes.back().layers.size() != trace.config.num_layers)
        fail(line, "layer", "file ends inside pass " + std::to_string(trace.passes.size() - 1) + " after " +
                                std::to_string(trace.passes.back().layers.size()) + " of " +
                                std::to_string(trace.config.num_layers) + " layers");
    return trace;
}

void save_trace(const Trace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    write_trace(out, trace);
    if (!out) throw DataError("write failed: " + path);
}

Trace load_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    return read_trace(in);
}

}  // namespace moesim
