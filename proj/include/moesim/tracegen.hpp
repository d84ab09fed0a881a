// tracegen.hpp - synthetic routing traces and trace statistics
//
// Routing logits for expert i of layer L in pass t are
//
//     z[t][L][i] = skew * b[L][i] + x[t][L][i]
//
// b is a fixed per-expert bias drawn once from N(0, 1); it decides how uneven
// the long-run activation frequencies are. x is a unit-variance latent that
// evolves across passes as an AR(1) process with coefficient rho. Its
// innovation in layer L shares a component with layer L-1's innovation:
//
//     e[t][L] = layer_sim * e[t][L-1] + sqrt(1 - layer_sim^2) * noise
//     x[t][L] = rho * x[t-1][L] + sqrt(1 - rho^2) * e[t][L]
//
// so every x stays at unit variance and adjacent layers correlate by
// exactly layer_sim.
//
// Scores are softmax(z). A decode pass routes its single token to the top K
// scores. A prefill pass of T tokens adds unit Gaussian noise per token,
// routes each token to its own top K, and records the token-averaged scores.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moesim/model.hpp"

namespace moesim {

struct GenParams {
    double skew = 0.0;
    double temporal_rho = 0.0;
    double layer_sim = 0.0;
    uint64_t seed = 0;
};

std::vector<std::string> gen_problems(const GenParams& params);

// One prefill pass when prefill_tokens > 0, followed by decode_steps
// single-token passes.
Trace generate_trace(const ModelConfig& config, const GenParams& params, uint32_t prefill_tokens,
                     uint32_t decode_steps);

// Parameters tuned per model preset so that reuse probability rises with the
// routing score and activations stay far more even than hot-neuron sparsity.
GenParams calibrated_params(const std::string& preset, uint64_t seed);

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
};

struct TraceStats {
    // Share of activations covered by the most frequently activated fraction
    // x of a layer's experts, averaged over layers. x = k / num_routed.
    std::vector<CurvePoint> activation_cdf;
    // Ten entries: probability that an expert whose score falls in that
    // decile (of all pooled per-pass scores) is activated in the next pass.
    // Absent with fewer than two passes.
    std::optional<std::vector<double>> reuse_by_decile;
    // max / mean expert load of the first prefill pass, per layer.
    std::vector<double> prefill_imbalance;
    // Mean Jaccard overlap of a layer's activated set between consecutive
    // passes, and between adjacent layers of the same pass.
    std::optional<double> temporal_jaccard;
    std::optional<double> layer_jaccard;
};

TraceStats analyze_trace(const Trace& trace);

// Linear interpolation; x outside the curve clamps to its ends.
double interpolate(const std::vector<CurvePoint>& curve, double x);

// Gini coefficient of a concentration curve: twice the area under it minus
// one (trapezoids). 0 for perfectly even activations, towards 1 for a few hot
// units.
double gini(const std::vector<CurvePoint>& curve);

// Two-column "x,y" text, '#' comments allowed.
std::vector<CurvePoint> read_curve(std::istream& in);
void write_curve(std::ostream& out, const std::vector<CurvePoint>& curve);

// Plot-ready sections: activation_cdf, reuse_by_decile, prefill_imbalance.
void write_stats(std::ostream& out, const TraceStats& stats);

}  // namespace moesim
