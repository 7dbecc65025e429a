#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "specsim/token_model.hpp"

namespace specsim {

/// Retrieval database for the model-free drafter: n-token keys mapping to
/// observed continuations with frequency and recency. Query is a pure
/// function of (index, ctx, depth).
class NgramIndex {
public:
    struct Entry {
        TokenSeq continuation;
        std::uint64_t frequency = 0;
        std::int64_t last_step_id = 0;
    };
    using Map = std::map<TokenSeq, std::vector<Entry>>;

    NgramIndex() = default;
    NgramIndex(int n, int continuation_len) : n_(n), cont_len_(continuation_len) {
        if (n_ < 1) throw ConfigError("n", "must be >= 1");
        if (cont_len_ < 1) throw ConfigError("continuation_len", "must be >= 1");
    }

    int n() const { return n_; }
    int continuation_len() const { return cont_len_; }
    const Map& entries() const { return entries_; }
    std::size_t size() const {
        std::size_t total = 0;
        for (const auto& [k, v] : entries_) total += v.size();
        return total;
    }

    /// Adds one (key, continuation) observation; duplicates bump frequency
    /// and refresh recency.
    void record(TokenSeq key, TokenSeq continuation, std::int64_t step_id) {
        auto& list = entries_[std::move(key)];
        for (auto& e : list) {
            if (e.continuation == continuation) {
                e.frequency += 1;
                e.last_step_id = std::max(e.last_step_id, step_id);
                return;
            }
        }
        list.push_back(Entry{std::move(continuation), 1, step_id});
    }

private:
    int n_ = 2;
    int cont_len_ = 8;
    Map entries_;
};

/// Inserts every n-gram of `response` together with its following
/// continuation (truncated to the configured length and to the response
/// end). Duplicate (key, continuation) pairs bump frequency and refresh
/// recency. Responses shorter than n+1 are no-ops.
inline NgramIndex ngram_insert(const NgramIndex& idx, std::span<const TokenId> response,
                               std::int64_t step_id) {
    NgramIndex out = idx;
    const std::size_t n = static_cast<std::size_t>(out.n());
    if (response.size() < n + 1) return out;
    for (std::size_t start = 0; start + n < response.size(); ++start) {
        TokenSeq key(response.begin() + static_cast<std::ptrdiff_t>(start),
                     response.begin() + static_cast<std::ptrdiff_t>(start + n));
        std::size_t cont_end = std::min(response.size(),
                                        start + n + static_cast<std::size_t>(out.continuation_len()));
        TokenSeq cont(response.begin() + static_cast<std::ptrdiff_t>(start + n),
                      response.begin() + static_cast<std::ptrdiff_t>(cont_end));
        out.record(std::move(key), std::move(cont), step_id);
    }
    return out;
}

/// Highest-frequency continuation stored for the last n tokens of ctx,
/// truncated to `depth`. Ties break toward the most recent step, then the
/// lexicographically smallest continuation. Empty when no key matches.
inline TokenSeq ngram_draft(const NgramIndex& idx, std::span<const TokenId> ctx, int depth) {
    if (depth < 1) throw ConfigError("depth", "must be >= 1");
    const std::size_t n = static_cast<std::size_t>(idx.n());
    if (ctx.size() < n) return {};
    TokenSeq key(ctx.end() - static_cast<std::ptrdiff_t>(n), ctx.end());
    auto it = idx.entries().find(key);
    if (it == idx.entries().end()) return {};
    const NgramIndex::Entry* best = nullptr;
    for (const auto& e : it->second) {
        if (best == nullptr ||
            e.frequency > best->frequency ||
            (e.frequency == best->frequency && e.last_step_id > best->last_step_id) ||
            (e.frequency == best->frequency && e.last_step_id == best->last_step_id &&
             e.continuation < best->continuation)) {
            best = &e;
        }
    }
    TokenSeq out = best->continuation;
    if (out.size() > static_cast<std::size_t>(depth)) out.resize(static_cast<std::size_t>(depth));
    return out;
}

} // namespace specsim
