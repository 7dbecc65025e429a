#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "specsim/errors.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

struct DataBufferEntry {
    std::int64_t step_id = 0;
    TokenSeq sequence;

    std::size_t length() const { return sequence.size(); }
};

/// Cache of rollout token sequences persisted across RL steps. Entries
/// older than current_step - retention are evicted on insert; sampling
/// prioritizes the previous step's longest sequences (one-step offset) to
/// make up for the scarcity of long-tail data in the current partial set.
class DataBuffer {
public:
    explicit DataBuffer(std::int64_t retention = 1) : retention_(retention) {
        if (retention_ < 0) throw ConfigError("retention", "must be >= 0");
    }

    std::int64_t retention() const { return retention_; }
    std::int64_t current_step() const { return current_step_; }
    const std::vector<DataBufferEntry>& entries() const { return entries_; }

    void insert(std::int64_t step_id, const std::vector<TokenSeq>& sequences) {
        current_step_ = std::max(current_step_, step_id);
        for (const auto& s : sequences) {
            entries_.push_back(DataBufferEntry{step_id, s});
        }
        std::erase_if(entries_, [this](const DataBufferEntry& e) {
            return e.step_id < current_step_ - retention_;
        });
    }

    /// Greedy budgeted sample: previous-step entries in descending length
    /// first, then current-step entries in descending length; each pass
    /// stops at the first entry that would overflow the budget, so every
    /// selected previous-step entry is at least as long as any skipped one.
    std::vector<TokenSeq> sample(std::int64_t current_step, std::size_t token_budget) const {
        if (token_budget < 1) throw ConfigError("token_budget", "must be >= 1");
        std::vector<TokenSeq> out;
        std::size_t used = 0;
        for (std::int64_t step : {current_step - 1, current_step}) {
            std::vector<const DataBufferEntry*> pool;
            for (const auto& e : entries_) {
                if (e.step_id == step) pool.push_back(&e);
            }
            std::stable_sort(pool.begin(), pool.end(),
                             [](const DataBufferEntry* a, const DataBufferEntry* b) {
                                 return a->length() > b->length();
                             });
            for (const auto* e : pool) {
                if (used + e->length() > token_budget) break;
                out.push_back(e->sequence);
                used += e->length();
            }
        }
        return out;
    }

private:
    std::int64_t retention_ = 1;
    std::int64_t current_step_ = 0;
    std::vector<DataBufferEntry> entries_;
};

} // namespace specsim
