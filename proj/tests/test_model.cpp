#include <gtest/gtest.h>

#include "moesim/model.hpp"
#include "moesim/tracegen.hpp"

using namespace moesim;

namespace {

ModelConfig dims(uint64_t hidden, uint64_t inter, double bpw) {
    ModelConfig c;
    c.routed_dims = {hidden, inter};
    c.bytes_per_weight = bpw;
    return c;
}

ModelConfig tiny() {
    ModelConfig c;
    c.name = "tiny";
    c.num_layers = 2;
    c.num_routed = 4;
    c.num_activated = 2;
    return c;
}

Trace tiny_trace() {
    Trace t;
    t.config = tiny();
    ForwardPass fp;
    fp.layers.push_back(LayerRequest::from_loads(0, {1, 0, 1, 0}, {0.4, 0.1, 0.3, 0.2}));
    fp.layers.push_back(LayerRequest::from_loads(1, {0, 1, 1, 0}, {0.1, 0.5, 0.3, 0.1}));
    t.passes.push_back(fp);
    return t;
}

}  // namespace

TEST(ExpertBytes, MixtralShapeAtFourBits) { EXPECT_EQ(expert_bytes(dims(4096, 14336, 0.5)), 88080384u); }

TEST(ExpertBytes, UnitDims) { EXPECT_EQ(expert_bytes(dims(1, 1, 1.0)), 3u); }

TEST(ExpertBytes, DeepSeekShapeAtFourBits) { EXPECT_EQ(expert_bytes(dims(2048, 1408, 0.5)), 4325376u); }

TEST(ExpertBytes, StrictlyMonotoneInEachDimension) {
    EXPECT_LT(expert_bytes(dims(100, 50, 0.5)), expert_bytes(dims(101, 50, 0.5)));
    EXPECT_LT(expert_bytes(dims(100, 50, 0.5)), expert_bytes(dims(100, 51, 0.5)));
    EXPECT_LT(expert_bytes(dims(100, 50, 0.5)), expert_bytes(dims(100, 50, 1.0)));
}

TEST(ExpertBytes, FractionalBytesRoundUp) { EXPECT_EQ(expert_bytes(dims(1, 1, 0.5)), 2u); }

TEST(Presets, TableRows) {
    auto m = mixtral_config(), q = qwen2_config(), d = deepseek_config();
    EXPECT_EQ(std::tie(m.num_layers, m.num_routed, m.num_activated), std::make_tuple(32u, 8u, 2u));
    EXPECT_EQ(std::tie(q.num_layers, q.num_routed, q.num_activated), std::make_tuple(28u, 64u, 8u));
    EXPECT_EQ(std::tie(d.num_layers, d.num_routed, d.num_activated), std::make_tuple(26u, 64u, 6u));
    EXPECT_EQ(m.routed_dims, (ExpertDims{4096, 14336}));
    EXPECT_EQ(d.routed_dims, (ExpertDims{2048, 1408}));
    for (const auto& name : preset_names()) EXPECT_TRUE(config_problems(*preset_config(name)).empty()) << name;
    EXPECT_FALSE(preset_config("gpt"));
}

TEST(ModelConfig, RejectsBadShapes) {
    ModelConfig c = tiny();
    c.num_activated = 5;
    EXPECT_FALSE(config_problems(c).empty());
    EXPECT_THROW(require_valid(c), ContractError);
    c = tiny();
    c.num_layers = 0;
    EXPECT_FALSE(config_problems(c).empty());
    c = tiny();
    c.routed_dims.hidden = 0;
    EXPECT_FALSE(config_problems(c).empty());
}

TEST(ExpertRef, OrderingIsLexicographicAndTotal) {
    std::vector<ExpertRef> refs;
    for (uint32_t l = 0; l < 3; ++l)
        for (uint32_t e = 0; e < 3; ++e) refs.push_back({l, e});
    for (auto a : refs)
        for (auto b : refs) {
            const int count = (a < b) + (b < a) + (a == b);
            EXPECT_EQ(count, 1);
            EXPECT_EQ(a < b, std::tie(a.layer, a.expert) < std::tie(b.layer, b.expert));
        }
}

TEST(LayerRequest, ActivatedFollowsLoads) {
    auto r = LayerRequest::from_loads(3, {0, 2, 0, 1}, {0.1, 0.5, 0.1, 0.3});
    EXPECT_EQ(r.activated, (std::vector<uint32_t>{1, 3}));
    EXPECT_EQ(r.total_load(), 3u);
}

TEST(TopIndices, TiesGoToLowerIndex) {
    EXPECT_EQ(top_indices({0.25, 0.25, 0.25, 0.25}, 2), (std::vector<uint32_t>{0, 1}));
    EXPECT_EQ(top_indices({0.1, 0.4, 0.4, 0.1}, 3), (std::vector<uint32_t>{1, 2, 0}));
}

TEST(ValidateTrace, WellFormedIsClean) {
    EXPECT_TRUE(validate_trace(tiny_trace()).empty());
    GenParams p{0.6, 0.3, 0.5, 4};
    EXPECT_TRUE(validate_trace(generate_trace(tiny(), p, 16, 20)).empty());
}

TEST(ValidateTrace, LoadOutsideActivatedSet) {
    Trace t = tiny_trace();
    t.passes[0].layers[1].loads[3] = 1;  // activated left as {1, 2}
    const auto v = validate_trace(t);
    ASSERT_FALSE(v.empty());
    EXPECT_EQ(v.front().layer, 1u);
    EXPECT_EQ(v.front().pass, 0u);
    bool named = false;
    for (const auto& x : v) named |= to_string(x).find("layer 1") != std::string::npos;
    EXPECT_TRUE(named);
}

TEST(ValidateTrace, ScoresNotNormalized) {
    Trace t = tiny_trace();
    t.passes[0].layers[0].scores = {0.4, 0.1, 0.2, 0.1};  // sums to 0.8
    const auto v = validate_trace(t);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v.front().layer, 0u);
    EXPECT_EQ(v.front().rule, "score-normalization");
}

TEST(ValidateTrace, DecodeNeedsExactlyKUnitLoads) {
    Trace t = tiny_trace();
    t.passes[0].layers[0] = LayerRequest::from_loads(0, {2, 0, 0, 0}, {0.7, 0.1, 0.1, 0.1});
    EXPECT_FALSE(validate_trace(t).empty());
}

TEST(ValidateTrace, ActivatedMustBeTopScores) {
    Trace t = tiny_trace();
    t.passes[0].layers[0].scores = {0.1, 0.4, 0.3, 0.2};
    EXPECT_FALSE(validate_trace(t).empty());
}

TEST(ValidateTrace, LayerOrder) {
    Trace t = tiny_trace();
    std::swap(t.passes[0].layers[0], t.passes[0].layers[1]);
    EXPECT_FALSE(validate_trace(t).empty());
}
