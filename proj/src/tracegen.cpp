#include "moesim/tracegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <utility>

namespace moesim {

std::vector<std::string> gen_problems(const GenParams& p) {
    std::vector<std::string> out;
    if (!(p.skew >= 0.0) || !std::isfinite(p.skew)) out.push_back("skew must be a nonnegative number");
    if (!(p.temporal_rho >= 0.0 && p.temporal_rho < 1.0)) out.push_back("rho must lie in [0, 1)");
    if (!(p.layer_sim >= 0.0 && p.layer_sim < 1.0)) out.push_back("layer_sim must lie in [0, 1)");
    return out;
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void softmax_into(const std::vector<double>& z, std::vector<double>& out) {
    const double top = *std::max_element(z.begin(), z.end());
    out.resize(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) sum += out[i] = std::exp(z[i] - top);
    for (auto& v : out) v /= sum;
}

// Renormalizes so the stored vector sums to 1 as closely as doubles allow.
void normalize(std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) sum += x;
    for (auto& x : v) x /= sum;
}

}  // namespace

Trace generate_trace(const ModelConfig& config, const GenParams& params, uint32_t prefill_tokens,
                     uint32_t decode_steps) {
    require_valid(config);
    if (auto problems = gen_problems(params); !problems.empty()) throw ContractError(problems.front());

    const uint32_t L = config.num_layers, N = config.num_routed, K = config.num_activated;
    std::mt19937_64 rng(params.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<std::vector<double>> bias(L, std::vector<double>(N));
    for (auto& row : bias)
        for (auto& v : row) v = normal(rng);

    const double rho = params.temporal_rho, ls = params.layer_sim;
    const double rho_c = std::sqrt(1.0 - rho * rho), ls_c = std::sqrt(1.0 - ls * ls);
    std::vector<std::vector<double>> x(L, std::vector<double>(N, 0.0));
    std::vector<double> prev_e(N, 0.0);

    Trace trace;
    trace.config = config;
    trace.metadata = {{"generator", "latent-gaussian-softmax"},
                      {"seed", std::to_string(params.seed)},
                      {"skew", num(params.skew)},
                      {"temporal_rho", num(rho)},
                      {"layer_sim", num(ls)},
                      {"prefill_tokens", std::to_string(prefill_tokens)},
                      {"decode_steps", std::to_string(decode_steps)}};

    const uint32_t passes = (prefill_tokens > 0 ? 1 : 0) + decode_steps;
    std::vector<double> e(N), z(N), scores(N), tok(N), tok_scores(N);
    for (uint32_t t = 0; t < passes; ++t) {
        ForwardPass fp;
        const bool prefill = prefill_tokens > 0 && t == 0;
        fp.stage = prefill ? Stage::kPrefill : Stage::kDecode;
        fp.token_count = prefill ? prefill_tokens : 1;
        for (uint32_t l = 0; l < L; ++l) {
            for (uint32_t i = 0; i < N; ++i) {
                const double fresh = normal(rng);
                e[i] = l == 0 ? fresh : ls * prev_e[i] + ls_c * fresh;
            }
            prev_e = e;
            for (uint32_t i = 0; i < N; ++i) {
                x[l][i] = t == 0 ? e[i] : rho * x[l][i] + rho_c * e[i];
                z[i] = params.skew * bias[l][i] + x[l][i];
            }

            std::vector<uint32_t> loads(N, 0);
            if (!prefill) {
                softmax_into(z, scores);
                normalize(scores);
                for (uint32_t i : top_indices(scores, K)) loads[i] = 1;
            } else {
                std::fill(scores.begin(), scores.end(), 0.0);
                for (uint32_t k = 0; k < prefill_tokens; ++k) {
                    for (uint32_t i = 0; i < N; ++i) tok[i] = z[i] + normal(rng);
                    softmax_into(tok, tok_scores);
                    for (uint32_t i = 0; i < N; ++i) scores[i] += tok_scores[i];
                    for (uint32_t i : top_indices(tok_scores, K)) ++loads[i];
                }
                normalize(scores);
            }
            fp.layers.push_back(LayerRequest::from_loads(l, std::move(loads), scores));
        }
        trace.passes.push_back(std::move(fp));
    }
    return trace;
}

GenParams calibrated_params(const std::string& preset, uint64_t seed) {
    GenParams p;
    p.seed = seed;
    // Mixtral has only eight experts per layer; with pass-to-pass persistence
    // on top of a fixed preference, recency alone already tracks the active
    // set and a score-based cache has nothing left to add.
    if (preset == "mixtral") {
        p.skew = 1.1;
        p.temporal_rho = 0.0;
        p.layer_sim = 0.5;
    } else if (preset == "qwen2" || preset == "deepseek") {
        p.skew = 0.6;
        p.temporal_rho = 0.3;
        p.layer_sim = 0.5;
    } else {
        throw ContractError("no calibrated generator parameters for '" + preset + "'");
    }
    return p;
}

namespace {

double jaccard(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
    std::vector<uint32_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    const size_t uni = a.size() + b.size() - common.size();
    return uni == 0 ? 1.0 : static_cast<double>(common.size()) / static_cast<double>(uni);
}

}  // namespace

TraceStats analyze_trace(const Trace& trace) {
    if (trace.passes.empty()) throw ContractError("analyze_trace: empty trace");
    const auto& cfg = trace.config;
    const uint32_t L = cfg.num_layers, N = cfg.num_routed;
    TraceStats st;

    // Activation CDF per layer, averaged.
    std::vector<double> cdf(N + 1, 0.0);
    uint32_t layers_used = 0;
    for (uint32_t l = 0; l < L; ++l) {
        std::vector<uint64_t> counts(N, 0);
        uint64_t total = 0;
        for (const auto& fp : trace.passes)
            for (uint32_t e : fp.layers[l].activated) {
                ++counts[e];
                ++total;
            }
        if (total == 0) continue;
        ++layers_used;
        std::sort(counts.begin(), counts.end(), std::greater<>());
        uint64_t run = 0;
        for (uint32_t k = 1; k <= N; ++k) {
            run += counts[k - 1];
            cdf[k] += static_cast<double>(run) / static_cast<double>(total);
        }
    }
    for (uint32_t k = 0; k <= N; ++k)
        st.activation_cdf.push_back({static_cast<double>(k) / N, layers_used ? cdf[k] / layers_used : 0.0});

    // Reuse probability by score decile over consecutive passes.
    if (trace.passes.size() >= 2) {
        struct Obs {
            double score;
            bool reused;
        };
        std::vector<Obs> pool;
        pool.reserve((trace.passes.size() - 1) * L * N);
        for (size_t p = 0; p + 1 < trace.passes.size(); ++p) {
            for (uint32_t l = 0; l < L; ++l) {
                const auto& now = trace.passes[p].layers[l];
                const auto& next = trace.passes[p + 1].layers[l];
                for (uint32_t e = 0; e < N; ++e) pool.push_back({now.scores[e], next.loads[e] > 0});
            }
        }
        std::stable_sort(pool.begin(), pool.end(), [](const Obs& a, const Obs& b) { return a.score < b.score; });
        std::vector<double> hits(10, 0.0), seen(10, 0.0);
        for (size_t r = 0; r < pool.size(); ++r) {
            const size_t d = std::min<size_t>(9, r * 10 / pool.size());
            seen[d] += 1.0;
            if (pool[r].reused) hits[d] += 1.0;
        }
        std::vector<double> curve(10, 0.0);
        for (size_t d = 0; d < 10; ++d) curve[d] = seen[d] > 0 ? hits[d] / seen[d] : 0.0;
        st.reuse_by_decile = curve;

        double sum = 0.0;
        size_t n = 0;
        for (size_t p = 0; p + 1 < trace.passes.size(); ++p)
            for (uint32_t l = 0; l < L; ++l) {
                sum += jaccard(trace.passes[p].layers[l].activated, trace.passes[p + 1].layers[l].activated);
                ++n;
            }
        st.temporal_jaccard = sum / static_cast<double>(n);
    }

    if (L >= 2) {
        double sum = 0.0;
        size_t n = 0;
        for (const auto& fp : trace.passes)
            for (uint32_t l = 0; l + 1 < L; ++l) {
                sum += jaccard(fp.layers[l].activated, fp.layers[l + 1].activated);
                ++n;
            }
        st.layer_jaccard = sum / static_cast<double>(n);
    }

    for (const auto& fp : trace.passes) {
        if (fp.stage != Stage::kPrefill) continue;
        for (const auto& req : fp.layers) {
            const double mean = static_cast<double>(req.total_load()) / N;
            const uint32_t peak = *std::max_element(req.loads.begin(), req.loads.end());
            st.prefill_imbalance.push_back(mean > 0 ? peak / mean : 0.0);
        }
        break;
    }
    return st;
}

double interpolate(const std::vector<CurvePoint>& curve, double x) {
    if (curve.empty()) throw ContractError("interpolate: empty curve");
    if (x <= curve.front().x) return curve.front().y;
    if (x >= curve.back().x) return curve.back().y;
    auto hi = std::lower_bound(curve.begin(), curve.end(), x, [](const CurvePoint& p, double v) { return p.x < v; });
    auto lo = hi - 1;
    if (hi->x == lo->x) return hi->y;
    return lo->y + (hi->y - lo->y) * (x - lo->x) / (hi->x - lo->x);
}

double gini(const std::vector<CurvePoint>& curve) {
    if (curve.size() < 2) throw ContractError("gini: need at least two points");
    double area = 0.0;
    for (size_t i = 1; i < curve.size(); ++i)
        area += 0.5 * (curve[i].y + curve[i - 1].y) * (curve[i].x - curve[i - 1].x);
    return 2.0 * area - 1.0;
}

std::vector<CurvePoint> read_curve(std::istream& in) {
    std::vector<CurvePoint> out;
    std::string line;
    size_t n = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++n;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        CurvePoint p;
        const bool header_allowed = std::exchange(first, false);
        if (!(row >> p.x >> p.y)) {
            if (header_allowed) continue;
            throw DataError("curve line " + std::to_string(n) + ": expected two numbers");
        }
        if (!out.empty() && p.x < out.back().x)
            throw DataError("curve line " + std::to_string(n) + ": x must not decrease");
        out.push_back(p);
    }
    if (out.empty()) throw DataError("curve has no points");
    return out;
}

void write_curve(std::ostream& out, const std::vector<CurvePoint>& curve) {
    out << "x,y\n";
    for (const auto& p : curve) out << num(p.x) << ',' << num(p.y) << '\n';
}

void write_stats(std::ostream& out, const TraceStats& stats) {
    out << "# activation_cdf\nexpert_fraction,activation_share\n";
    for (const auto& p : stats.activation_cdf) out << num(p.x) << ',' << num(p.y) << '\n';
    out << "# reuse_by_decile\ndecile,reuse_probability\n";
    if (stats.reuse_by_decile)
        for (size_t d = 0; d < stats.reuse_by_decile->size(); ++d)
            out << d + 1 << ',' << num((*stats.reuse_by_decile)[d]) << '\n';
    out << "# prefill_imbalance\nlayer,max_over_mean\n";
    for (size_t l = 0; l < stats.prefill_imbalance.size(); ++l)
        out << l << ',' << num(stats.prefill_imbalance[l]) << '\n';
}

}  // namespace moesim
