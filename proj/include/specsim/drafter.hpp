#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "specsim/packing.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

/// Count-based order-m drafter: the trainable stand-in for a single-layer
/// draft model. Prediction is the Laplace-smoothed count distribution; one
/// train_on_batch call is one training iteration and bumps `version`.
///
/// Training is single-owner; the rollout side receives immutable copies
/// (snapshots), so version-stamped value semantics are the whole
/// concurrency story.
class AdaptiveDrafter {
public:
    using Counts = std::map<TokenSeq, std::vector<std::uint64_t>>;

    AdaptiveDrafter() = default;
    AdaptiveDrafter(int vocab_size, int order_m, double smoothing_alpha)
        : vocab_(vocab_size), order_(order_m), alpha_(smoothing_alpha) {
        if (vocab_ < 2) throw ConfigError("vocab_size", "must be >= 2");
        if (order_ < 0) throw ConfigError("order_m", "must be >= 0");
        if (alpha_ < 0.0) throw ConfigError("smoothing_alpha", "must be >= 0");
    }

    int vocab_size() const { return vocab_; }
    int order() const { return order_; }
    double smoothing_alpha() const { return alpha_; }
    std::int64_t version() const { return version_; }
    const Counts& counts() const { return counts_; }

    TokenSeq context_key(std::span<const TokenId> ctx) const {
        TokenSeq key(static_cast<std::size_t>(order_), kBeginToken);
        std::size_t take = std::min(ctx.size(), key.size());
        std::copy(ctx.end() - static_cast<std::ptrdiff_t>(take), ctx.end(),
                  key.end() - static_cast<std::ptrdiff_t>(take));
        return key;
    }

    /// Drops learned counts but keeps the version counter, so a re-fit
    /// drafter still reads as "newer" than every snapshot it replaces.
    void reset_counts() { counts_.clear(); }

    // test/engine access used when assembling drafters from known rows
    void set_version(std::int64_t v) { version_ = v; }
    void add_count(const TokenSeq& ctx, TokenId next, std::uint64_t n) {
        auto& row = counts_[ctx];
        if (row.empty()) row.assign(static_cast<std::size_t>(vocab_), 0);
        row[static_cast<std::size_t>(next)] += n;
    }

private:
    friend AdaptiveDrafter train_on_batch(const AdaptiveDrafter&, const PackedBatch&);
    friend class DrafterCheckpoint;

    int vocab_ = 2;
    int order_ = 0;
    double alpha_ = 1.0;
    std::int64_t version_ = 0;
    Counts counts_;
};

/// Smoothed count distribution (count + alpha) / (total + alpha * V) for the
/// last m tokens of ctx. All-zero rows with alpha = 0 read as uniform.
inline Distribution drafter_next_dist(const AdaptiveDrafter& d, std::span<const TokenId> ctx) {
    const std::size_t v = static_cast<std::size_t>(d.vocab_size());
    auto it = d.counts().find(d.context_key(ctx));
    if (it == d.counts().end()) {
        if (d.smoothing_alpha() == 0.0) return Distribution::uniform(v);
        Distribution out{std::vector<double>(v, 1.0 / static_cast<double>(v))};
        return out;
    }
    const auto& row = it->second;
    double total = 0.0;
    for (std::uint64_t c : row) total += static_cast<double>(c);
    double denom = total + d.smoothing_alpha() * static_cast<double>(v);
    if (denom <= 0.0) return Distribution::uniform(v);
    Distribution out{std::vector<double>(v)};
    for (std::size_t i = 0; i < v; ++i) {
        out.probs[i] = (static_cast<double>(row[i]) + d.smoothing_alpha()) / denom;
    }
    return out;
}

/// One training iteration: accumulates (context -> next token) counts over
/// every position with a full m-token context inside each member sequence.
/// Pack boundaries are respected; no window spans two sequences.
inline AdaptiveDrafter train_on_batch(const AdaptiveDrafter& d, const PackedBatch& packed) {
    AdaptiveDrafter out = d;
    const std::size_t m = static_cast<std::size_t>(out.order_);
    for (std::size_t p = 0; p < packed.packs.size(); ++p) {
        const TokenSeq& pack = packed.packs[p];
        std::size_t offset = 0;
        for (std::size_t len : packed.boundaries[p]) {
            for (std::size_t pos = m; pos < len; ++pos) {
                TokenSeq ctx(pack.begin() + static_cast<std::ptrdiff_t>(offset + pos - m),
                             pack.begin() + static_cast<std::ptrdiff_t>(offset + pos));
                auto& row = out.counts_[ctx];
                if (row.empty()) row.assign(static_cast<std::size_t>(out.vocab_), 0);
                row[static_cast<std::size_t>(pack[offset + pos])] += 1;
            }
            offset += len;
        }
    }
    out.version_ += 1;
    return out;
}

/// Fraction of positions across the probe streams where the drafter's
/// argmax equals the target's argmax for the same context. Context resets
/// at stream boundaries.
inline double greedy_match_rate(const AdaptiveDrafter& d, const MarkovTargetModel& target,
                                const std::vector<TokenSeq>& streams) {
    std::size_t hits = 0, positions = 0;
    for (const auto& stream : streams) {
        TokenSeq ctx;
        for (TokenId t : stream) {
            Distribution dd = drafter_next_dist(d, ctx);
            const Distribution& tr = target.raw_row(ctx);
            hits += (dd.argmax() == tr.argmax());
            ++positions;
            ctx.push_back(t);
        }
    }
    return positions > 0 ? static_cast<double>(hits) / static_cast<double>(positions) : 0.0;
}

} // namespace specsim
