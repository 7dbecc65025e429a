#pragma once

#include <algorithm>
#include <map>
#include <optional>

#include "specsim/errors.hpp"
#include "specsim/spec_decode.hpp"

namespace specsim {

/// Roofline latency parameters in abstract time-units. A decode step pays a
/// fixed launch cost plus the larger of the weight-streaming time and the
/// compute time for all verified tokens; drafting adds one drafter pass per
/// tree level.
struct CostModelParams {
    double t_launch = 0.05;
    double model_bytes = 1.0;
    double mem_bw = 1.0;
    double flops_per_token = 1.0;
    double peak_flops = 377.0;
    double drafter_step_cost = 0.046;

    void validate() const {
        if (!(t_launch > 0.0)) throw ConfigError("cost_model.t_launch", "must be > 0");
        if (!(model_bytes > 0.0)) throw ConfigError("cost_model.model_bytes", "must be > 0");
        if (!(mem_bw > 0.0)) throw ConfigError("cost_model.mem_bw", "must be > 0");
        if (!(flops_per_token > 0.0)) throw ConfigError("cost_model.flops_per_token", "must be > 0");
        if (!(peak_flops > 0.0)) throw ConfigError("cost_model.peak_flops", "must be > 0");
        if (!(drafter_step_cost > 0.0))
            throw ConfigError("cost_model.drafter_step_cost", "must be > 0");
    }
};

/// Simulated latency of one engine step. Without a strategy each request
/// verifies one token; with one, tokens_per_request is the strategy's
/// tokens_to_verify and draft_depth drafter passes are added.
inline double step_latency(const CostModelParams& cost, int batch, int tokens_per_request,
                           const std::optional<SpecStrategy>& sd) {
    if (batch < 1) throw ConfigError("batch", "must be >= 1");
    int tokens = sd.has_value() ? sd->tokens_to_verify : tokens_per_request;
    double memory_time = cost.model_bytes / cost.mem_bw;
    double compute_time = static_cast<double>(batch) * static_cast<double>(tokens) *
                          cost.flops_per_token / cost.peak_flops;
    double t = cost.t_launch + std::max(memory_time, compute_time);
    if (sd.has_value()) t += static_cast<double>(sd->draft_depth) * cost.drafter_step_cost;
    return t;
}

/// Cost parameters bundled with an expected-emission curve: mean tokens
/// emitted per request per verification step (bonus included) as a
/// function of tokens_to_verify. The defaults are calibrated so that the
/// analytic speedup lands near 3.6x at (batch 1, verify 64) and 2.5x at
/// (batch 32, verify 16) with depth-10 drafting.
struct CalibrationProfile {
    CostModelParams cost;
    std::map<int, double> mean_emitted; // tokens_to_verify -> a_bar

    static CalibrationProfile defaults() {
        CalibrationProfile p;
        p.mean_emitted = {{16, 4.45}, {32, 4.85}, {48, 5.05}, {64, 5.18}};
        return p;
    }

    double emitted_for(int tokens_to_verify) const {
        auto it = mean_emitted.find(tokens_to_verify);
        if (it != mean_emitted.end()) return it->second;
        // interpolate between known points, clamp at the edges
        if (mean_emitted.empty()) return 1.0;
        auto hi = mean_emitted.lower_bound(tokens_to_verify);
        if (hi == mean_emitted.begin()) return hi->second;
        if (hi == mean_emitted.end()) return std::prev(hi)->second;
        auto lo = std::prev(hi);
        double t = static_cast<double>(tokens_to_verify - lo->first) /
                   static_cast<double>(hi->first - lo->first);
        return lo->second + t * (hi->second - lo->second);
    }
};

/// Analytic tokens/time ratio of speculative decoding over plain decoding
/// at the given batch size, using the profile's emission curve.
inline double sd_speedup(const CalibrationProfile& profile, int batch,
                         const SpecStrategy& strategy) {
    double baseline = step_latency(profile.cost, batch, 1, std::nullopt);
    double sd = step_latency(profile.cost, batch, strategy.tokens_to_verify, strategy);
    return profile.emitted_for(strategy.tokens_to_verify) * baseline / sd;
}

} // namespace specsim
