#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "specsim/errors.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

/// Variable-length sequences concatenated into fixed-capacity packs with no
/// padding. boundaries[i] lists the member lengths of packs[i], so consumers
/// can recover sequence edges and never read across them.
struct PackedBatch {
    std::vector<TokenSeq> packs;
    std::vector<std::vector<std::size_t>> boundaries;
    std::size_t capacity = 0;

    std::size_t total_tokens() const {
        std::size_t n = 0;
        for (const auto& p : packs) n += p.size();
        return n;
    }
};

/// First-fit-decreasing bin packing. Sequences longer than capacity are
/// truncated to capacity (suffix dropped); empty sequences are skipped.
inline PackedBatch pack_sequences(const std::vector<TokenSeq>& sequences, std::size_t capacity) {
    if (capacity == 0) throw ConfigError("capacity", "must be >= 1");

    std::vector<std::size_t> idx(sequences.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto len = [&](std::size_t i) { return std::min(sequences[i].size(), capacity); };
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return len(a) > len(b); });

    PackedBatch out;
    out.capacity = capacity;
    std::vector<std::size_t> free_space;
    for (std::size_t i : idx) {
        std::size_t n = len(i);
        if (n == 0) continue;
        std::size_t slot = out.packs.size();
        for (std::size_t s = 0; s < free_space.size(); ++s) {
            if (free_space[s] >= n) { slot = s; break; }
        }
        if (slot == out.packs.size()) {
            out.packs.emplace_back();
            out.boundaries.emplace_back();
            free_space.push_back(capacity);
        }
        const TokenSeq& seq = sequences[i];
        out.packs[slot].insert(out.packs[slot].end(), seq.begin(),
                               seq.begin() + static_cast<std::ptrdiff_t>(n));
        out.boundaries[slot].push_back(n);
        free_space[slot] -= n;
    }
    return out;
}

} // namespace specsim
