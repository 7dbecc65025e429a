#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "specsim/beg_mab.hpp"
#include "specsim/errors.hpp"
#include "specsim/spec_decode.hpp"

#include <json.hpp>

namespace specsim {

enum class CaptureSide { Target, Draft };

inline const char* capture_side_name(CaptureSide s) {
    return s == CaptureSide::Target ? "TARGET" : "DRAFT";
}

/// One pre-captured execution graph: a model side, a batch-size bucket and
/// the strategy fields that side actually depends on (tokens_to_verify for
/// the target, top_k and draft_depth for the drafter).
struct CaptureEntry {
    CaptureSide side = CaptureSide::Target;
    int bucket_lo = 1;
    int bucket_hi = 1; // inclusive max batch the graph is sized for
    int tokens_to_verify = 0; // target side only
    int top_k = 0;            // draft side only
    int draft_depth = 0;      // draft side only
    double memory_units = 0.0;
};

struct CapturePlan {
    std::vector<CaptureEntry> entries;
    double total_memory_units = 0.0;
};

/// Buckets derived from ascending thresholds; the last bucket is capped at
/// max_batch for memory sizing.
struct BucketSpec {
    std::vector<int> thresholds;
    int max_batch = 32;
};

/// memory_units for (side, bucket, params). The default is proportional to
/// the bucket's max batch times the per-request token width of that side.
using CaptureMemoryModel = std::function<double(const CaptureEntry&)>;

inline double unit_capture_memory(const CaptureEntry& e) {
    int width = e.side == CaptureSide::Target ? e.tokens_to_verify : e.top_k;
    return static_cast<double>(e.bucket_hi) * static_cast<double>(width);
}

namespace detail {

inline std::vector<std::pair<int, int>> bucket_ranges(const BucketSpec& spec) {
    if (spec.thresholds.empty()) throw ConfigError("thresholds", "must not be empty");
    for (std::size_t i = 0; i + 1 < spec.thresholds.size(); ++i) {
        if (spec.thresholds[i] >= spec.thresholds[i + 1])
            throw ConfigError("thresholds", "must be strictly ascending");
    }
    if (spec.max_batch < spec.thresholds.back())
        throw ConfigError("max_batch", "must cover the last threshold");
    std::vector<std::pair<int, int>> out;
    for (std::size_t i = 0; i < spec.thresholds.size(); ++i) {
        int lo = spec.thresholds[i];
        int hi = i + 1 < spec.thresholds.size() ? spec.thresholds[i + 1] - 1 : spec.max_batch;
        out.emplace_back(lo, hi);
    }
    return out;
}

inline void add_entry(CapturePlan& plan, CaptureEntry e, const CaptureMemoryModel& mem) {
    e.memory_units = mem ? mem(e) : unit_capture_memory(e);
    plan.total_memory_units += e.memory_units;
    plan.entries.push_back(std::move(e));
}

} // namespace detail

/// Bucketed plan: each tokens_to_verify group (descending) is routed to its
/// bucket (ascending, as in the bandit), capturing one target graph per
/// distinct (bucket, tokens_to_verify) and one draft graph per distinct
/// (bucket, top_k, draft_depth). Requires one threshold per group.
inline CapturePlan plan_captures(const std::vector<SpecStrategy>& strategies,
                                 const BucketSpec& spec,
                                 const CaptureMemoryModel& memory_model = {}) {
    auto ranges = detail::bucket_ranges(spec);
    std::map<int, std::vector<SpecStrategy>, std::greater<int>> groups;
    for (const auto& s : strategies) {
        s.validate();
        groups[s.tokens_to_verify].push_back(s);
    }
    if (groups.size() != ranges.size())
        throw ConfigError("thresholds", "count must equal the number of tokens_to_verify groups");

    CapturePlan plan;
    std::size_t bucket = 0;
    for (const auto& [verify, members] : groups) {
        auto [lo, hi] = ranges[bucket];
        CaptureEntry target;
        target.side = CaptureSide::Target;
        target.bucket_lo = lo;
        target.bucket_hi = hi;
        target.tokens_to_verify = verify;
        detail::add_entry(plan, target, memory_model);

        std::map<std::pair<int, int>, bool> seen; // (top_k, draft_depth)
        for (const auto& s : members) {
            auto key = std::make_pair(s.top_k, s.draft_depth);
            if (seen.count(key)) continue;
            seen[key] = true;
            CaptureEntry draft;
            draft.side = CaptureSide::Draft;
            draft.bucket_lo = lo;
            draft.bucket_hi = hi;
            draft.top_k = s.top_k;
            draft.draft_depth = s.draft_depth;
            detail::add_entry(plan, draft, memory_model);
        }
        ++bucket;
    }
    return plan;
}

/// Reference plan with no bucketing insight: every strategy is captured for
/// every bucket on both sides, duplicates and all.
inline CapturePlan plan_captures_vanilla(const std::vector<SpecStrategy>& strategies,
                                         const BucketSpec& spec,
                                         const CaptureMemoryModel& memory_model = {}) {
    auto ranges = detail::bucket_ranges(spec);
    CapturePlan plan;
    for (const auto& s : strategies) {
        s.validate();
        for (auto [lo, hi] : ranges) {
            CaptureEntry target;
            target.side = CaptureSide::Target;
            target.bucket_lo = lo;
            target.bucket_hi = hi;
            target.tokens_to_verify = s.tokens_to_verify;
            detail::add_entry(plan, target, memory_model);

            CaptureEntry draft;
            draft.side = CaptureSide::Draft;
            draft.bucket_lo = lo;
            draft.bucket_hi = hi;
            draft.top_k = s.top_k;
            draft.draft_depth = s.draft_depth;
            detail::add_entry(plan, draft, memory_model);
        }
    }
    return plan;
}

inline nlohmann::json capture_plan_to_json(const CapturePlan& plan) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : plan.entries) {
        entries.push_back({{"side", capture_side_name(e.side)},
                           {"bucket_lo", e.bucket_lo},
                           {"bucket_hi", e.bucket_hi},
                           {"tokens_to_verify", e.tokens_to_verify},
                           {"top_k", e.top_k},
                           {"draft_depth", e.draft_depth},
                           {"memory_units", e.memory_units}});
    }
    return {{"entries", std::move(entries)}, {"total_memory_units", plan.total_memory_units}};
}

} // namespace specsim
