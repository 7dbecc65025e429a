#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "specsim/checkpoint.hpp"
#include "specsim/data_buffer.hpp"
#include "specsim/drafter.hpp"
#include "specsim/packing.hpp"

namespace specsim {

/// Polled between iterations; true means preemption was requested. The
/// in-flight iteration always completes before the loop exits.
using PreemptSignal = std::function<bool()>;

struct SpotTrainConfig {
    std::int64_t current_step = 0;
    std::size_t token_budget = 8192;
    std::size_t pack_capacity = 8192;
    int checkpoint_every = 50;
};

struct SpotTrainLog {
    int iterations = 0;
    std::vector<std::int64_t> versions; // drafter version after each iteration
    bool preempted = false;
    int checkpoints = 0;
};

struct SpotTrainResult {
    AdaptiveDrafter drafter;
    DrafterCheckpoint final_checkpoint;
    SpotTrainLog log;
};

/// Preemptible training slot: sample from the buffer, pack, train, repeat,
/// checking the preempt signal between iterations. Checkpoints are taken
/// every checkpoint_every iterations and always on exit, so restoring the
/// final checkpoint reproduces the returned drafter exactly.
inline SpotTrainResult spot_train_loop(AdaptiveDrafter drafter, const DataBuffer& buffer,
                                       const SpotTrainConfig& cfg, int iterations_per_slot,
                                       const PreemptSignal& preempt) {
    SpotTrainResult out;
    for (int i = 0; i < iterations_per_slot; ++i) {
        if (preempt && preempt()) {
            out.log.preempted = true;
            break;
        }
        auto sample = buffer.sample(cfg.current_step, cfg.token_budget);
        PackedBatch packed = pack_sequences(sample, cfg.pack_capacity);
        drafter = train_on_batch(drafter, packed);
        out.log.iterations += 1;
        out.log.versions.push_back(drafter.version());
        if (cfg.checkpoint_every > 0 && out.log.iterations % cfg.checkpoint_every == 0) {
            out.log.checkpoints += 1;
        }
    }
    out.final_checkpoint = save_checkpoint(drafter);
    out.log.checkpoints += 1;
    out.drafter = std::move(drafter);
    return out;
}

} // namespace specsim
