#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "specsim/beg_mab.hpp"
#include "specsim/cost_model.hpp"
#include "specsim/drafter.hpp"
#include "specsim/errors.hpp"
#include "specsim/ngram.hpp"
#include "specsim/rng.hpp"
#include "specsim/spec_decode.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

struct RolloutRequest {
    enum class Status { Running, Finished };

    int request_id = 0;
    TokenSeq prompt;
    TokenSeq generated;
    int max_len = 1;
    Status status = Status::Running;
    double finish_time = 0.0; // simulated clock at completion
};

struct StepMetrics {
    int step_index = 0;
    double elapsed = 0.0;
    int batch_size = 0;
    std::vector<int> accept_lens; // empty on plain decode steps
    std::optional<SpecStrategy> strategy;
    bool sd_active = false;
};

/// Truncated log-normal response length in [1, max_len]; the probability
/// mass beyond max_len lands exactly on max_len.
inline int sample_response_length(double mu, double sigma, int max_len, RngStream& rng) {
    if (max_len < 1) throw ConfigError("max_len", "must be >= 1");
    if (sigma < 0.0) throw ConfigError("sigma", "must be >= 0");
    double raw = std::exp(mu + sigma * rng.normal());
    double rounded = std::round(raw);
    if (rounded < 1.0) return 1;
    if (rounded > static_cast<double>(max_len)) return max_len;
    return static_cast<int>(rounded);
}

/// Elastic activation gate: speculative decoding turns on only once the
/// remaining request count drops below the threshold.
inline bool should_enable_sd(int active_requests, int threshold) {
    if (threshold < 1) throw ConfigError("threshold", "must be >= 1");
    return active_requests < threshold;
}

/// Published drafter state: an immutable trained copy plus the RL step of
/// the target model it was trained against.
struct DrafterSnapshot {
    AdaptiveDrafter drafter;
    std::int64_t target_step_id = 0;
};

struct RolloutConfig {
    bool enable_sd = true;
    int elastic_threshold = 32;
    DecodeMode mode = DecodeMode::GreedyTree;
    /// Adaptive snapshots lagging the target by more than this many RL
    /// steps are ignored in favor of the model-free n-gram drafter.
    std::int64_t drafter_staleness_bound = 1;
    int ngram_n = 2;
    int ngram_continuation_len = 8;
    /// Used when no bandit state is supplied (single-strategy runs).
    std::optional<SpecStrategy> fixed_strategy;
};

struct RolloutResult {
    std::vector<RolloutRequest> requests;
    std::vector<StepMetrics> trace;
    double total_time = 0.0;
    std::int64_t sd_steps = 0;            // engine steps with SD active
    std::int64_t plain_steps = 0;
    std::int64_t verify_events = 0;       // per-request draft/verify calls
    std::int64_t ngram_verify_events = 0; // of those, via the model-free drafter
    std::vector<std::int64_t> accept_at_least; // [i] = events with accept_len > i

    double mean_accept_len() const {
        if (verify_events == 0) return 0.0;
        double total = 0.0;
        for (const auto& m : trace) {
            for (int a : m.accept_lens) total += a;
        }
        return total / static_cast<double>(verify_events);
    }
};

namespace detail {

/// Per-request retrieval state for the model-free drafter: the index grows
/// over the request's own stream (prompt + generated) as windows complete.
struct NgramTracker {
    NgramIndex index;
    std::size_t next_key_start = 0;

    void extend(const TokenSeq& stream, std::int64_t step_id) {
        const auto n = static_cast<std::size_t>(index.n());
        const auto cont = static_cast<std::size_t>(index.continuation_len());
        while (next_key_start + n + cont <= stream.size()) {
            TokenSeq key(stream.begin() + static_cast<std::ptrdiff_t>(next_key_start),
                         stream.begin() + static_cast<std::ptrdiff_t>(next_key_start + n));
            TokenSeq continuation(
                stream.begin() + static_cast<std::ptrdiff_t>(next_key_start + n),
                stream.begin() + static_cast<std::ptrdiff_t>(next_key_start + n + cont));
            index.record(std::move(key), std::move(continuation), step_id);
            ++next_key_start;
        }
    }
};

} // namespace detail

/// Simulates one rollout of the given requests to completion. Each engine
/// step serves every running request; speculative decoding activates
/// elastically, strategies come from the bandit (recorded back with the
/// simulated latency), and the adaptive drafter falls back to per-request
/// n-gram retrieval when the snapshot is absent or stale. The simulated
/// clock is the sum of per-step roofline latencies.
inline RolloutResult run_rollout(std::vector<RolloutRequest> requests,
                                 const MarkovTargetModel& target,
                                 const std::optional<DrafterSnapshot>& adaptive,
                                 BegMabState* mab, const CostModelParams& cost,
                                 const RolloutConfig& config, RngStream& rng) {
    cost.validate();
    for (const auto& r : requests) {
        if (r.status != RolloutRequest::Status::Running)
            throw ConfigError("requests", "all requests must be RUNNING");
        if (r.max_len < 1) throw ConfigError("requests", "max_len must be >= 1");
    }

    bool adaptive_fresh =
        adaptive.has_value() &&
        target.step_id() - adaptive->target_step_id <= config.drafter_staleness_bound;

    std::vector<detail::NgramTracker> trackers(requests.size());
    for (auto& t : trackers) t.index = NgramIndex(config.ngram_n, config.ngram_continuation_len);
    std::vector<RngStream> request_rngs;
    request_rngs.reserve(requests.size());
    for (const auto& r : requests) {
        request_rngs.push_back(rng.fork(0x52515254ULL + static_cast<std::uint64_t>(r.request_id)));
    }
    RngStream select_rng = rng.fork(0x53454CULL);

    RolloutResult out;
    out.trace.reserve(64);
    int max_depth = 1;
    if (mab != nullptr) {
        for (const auto& arm : mab->arms()) max_depth = std::max(max_depth, arm.strategy.draft_depth);
    } else if (config.fixed_strategy) {
        max_depth = config.fixed_strategy->draft_depth;
    }
    out.accept_at_least.assign(static_cast<std::size_t>(max_depth), 0);

    int step_index = 0;
    for (;;) {
        std::vector<std::size_t> active;
        for (std::size_t i = 0; i < requests.size(); ++i) {
            if (requests[i].status == RolloutRequest::Status::Running) active.push_back(i);
        }
        if (active.empty()) break;
        int batch = static_cast<int>(active.size());

        bool sd = config.enable_sd && should_enable_sd(batch, config.elastic_threshold);
        StepMetrics metrics;
        metrics.step_index = step_index;
        metrics.batch_size = batch;
        metrics.sd_active = sd;

        if (sd) {
            SpecStrategy strategy;
            if (mab != nullptr) {
                strategy = beg_select(*mab, batch, select_rng);
            } else if (config.fixed_strategy) {
                strategy = *config.fixed_strategy;
            } else {
                throw ConfigError("fixed_strategy", "SD requires a bandit or a fixed strategy");
            }
            metrics.strategy = strategy;

            for (std::size_t i : active) {
                RolloutRequest& req = requests[i];
                TokenSeq ctx = req.prompt;
                ctx.insert(ctx.end(), req.generated.begin(), req.generated.end());

                DraftTree tree;
                bool via_ngram = !adaptive_fresh;
                if (adaptive_fresh) {
                    if (config.mode == DecodeMode::GreedyTree) {
                        tree = build_draft_tree(
                            [&](const TokenSeq& c) {
                                return drafter_next_dist(adaptive->drafter, c);
                            },
                            ctx, strategy);
                    } else {
                        tree = build_sampled_chain(
                            [&](const TokenSeq& c) {
                                return drafter_next_dist(adaptive->drafter, c);
                            },
                            ctx, strategy.draft_depth, request_rngs[i]);
                    }
                } else {
                    trackers[i].extend(ctx, target.step_id());
                    tree = chain_from_tokens(
                        ngram_draft(trackers[i].index, ctx, strategy.draft_depth));
                }

                AcceptResult res;
                if (config.mode == DecodeMode::GreedyTree) {
                    res = verify_greedy(target, ctx, tree);
                } else {
                    res = verify_stochastic(target, ctx, tree, request_rngs[i]);
                }
                metrics.accept_lens.push_back(res.accept_length);
                out.verify_events += 1;
                out.ngram_verify_events += via_ngram;
                for (int d = 0; d < res.accept_length && d < max_depth; ++d) {
                    out.accept_at_least[static_cast<std::size_t>(d)] += 1;
                }

                TokenSeq emitted = res.accepted;
                emitted.push_back(res.bonus);
                for (TokenId t : emitted) {
                    req.generated.push_back(t);
                    if (t == kEosToken ||
                        static_cast<int>(req.generated.size()) >= req.max_len) {
                        req.status = RolloutRequest::Status::Finished;
                        break;
                    }
                }
            }
            metrics.elapsed = step_latency(cost, batch, strategy.tokens_to_verify, strategy);
            if (mab != nullptr) {
                beg_record(*mab, strategy, metrics.elapsed, metrics.accept_lens, batch);
            }
            out.sd_steps += 1;
        } else {
            for (std::size_t i : active) {
                RolloutRequest& req = requests[i];
                TokenSeq ctx = req.prompt;
                ctx.insert(ctx.end(), req.generated.begin(), req.generated.end());
                Distribution d = target_next_dist(target, ctx);
                TokenId t = sample_token(d, request_rngs[i]);
                req.generated.push_back(t);
                if (t == kEosToken || static_cast<int>(req.generated.size()) >= req.max_len) {
                    req.status = RolloutRequest::Status::Finished;
                }
            }
            metrics.elapsed = step_latency(cost, batch, 1, std::nullopt);
            out.plain_steps += 1;
        }

        out.total_time += metrics.elapsed;
        for (std::size_t i : active) {
            if (requests[i].status == RolloutRequest::Status::Finished &&
                requests[i].finish_time == 0.0) {
                requests[i].finish_time = out.total_time;
            }
        }
        out.trace.push_back(std::move(metrics));
        ++step_index;
    }

    out.requests = std::move(requests);
    return out;
}

} // namespace specsim
