#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <numeric>
#include <thread>

#include "specsim/coordinator.hpp"
#include "specsim/data_buffer.hpp"
#include "specsim/packing.hpp"
#include "specsim/spot_trainer.hpp"

#include "test_support.hpp"

using namespace specsim;

namespace {

Coordinator make_coord(int workers, int threshold, std::vector<int> dp_groups = {}) {
    std::vector<WorkerRecord> records;
    for (int w = 0; w < workers; ++w) {
        int dp = w < static_cast<int>(dp_groups.size()) ? dp_groups[static_cast<std::size_t>(w)] : 0;
        records.push_back(WorkerRecord{w, WorkerState::Busy, dp});
    }
    return Coordinator(records, threshold);
}

TokenSeq seq_of(std::size_t len, TokenId fill = 2) { return TokenSeq(len, fill); }

// exact minimum bin count by branch and bound, for small instances
int optimal_bins(const std::vector<std::size_t>& lens, std::size_t capacity) {
    int best = static_cast<int>(lens.size());
    std::vector<std::size_t> bins;
    std::function<void(std::size_t)> rec = [&](std::size_t i) {
        if (static_cast<int>(bins.size()) >= best) return;
        if (i == lens.size()) {
            best = static_cast<int>(bins.size());
            return;
        }
        for (std::size_t bi = 0; bi < bins.size(); ++bi) {
            if (bins[bi] + lens[i] <= capacity) {
                bins[bi] += lens[i];
                rec(i + 1);
                bins[bi] -= lens[i];
            }
        }
        bins.push_back(lens[i]);
        rec(i + 1);
        bins.pop_back();
    };
    rec(0);
    return best;
}

} // namespace

TEST(Coordinator, PromotionAtThresholdElectsLowestIdleLeader) {
    auto coord = make_coord(6, 2);
    auto a1 = coord.transition(3, WorkerState::Idle);
    EXPECT_TRUE(a1.empty()); // idle count 1 < threshold
    auto a2 = coord.transition(5, WorkerState::Idle);
    ASSERT_EQ(a2.size(), 2u);
    EXPECT_EQ(a2[0].type, CoordActionType::StartTraining);
    EXPECT_EQ(a2[0].worker_id, 3); // lowest idle id leads
    EXPECT_EQ(a2[1].type, CoordActionType::JoinTraining);
    EXPECT_EQ(a2[1].worker_id, 5);
}

TEST(Coordinator, IdleToTrainingWithoutSessionIsProtocolError) {
    auto coord = make_coord(4, 3);
    coord.transition(0, WorkerState::Idle);
    EXPECT_THROW(coord.transition(0, WorkerState::Training), ProtocolError);
}

TEST(Coordinator, DifferentDpGroupGetsNoJoin) {
    auto coord = make_coord(4, 2, {0, 0, 1, 1});
    coord.transition(0, WorkerState::Idle);
    auto promote = coord.transition(1, WorkerState::Idle);
    ASSERT_FALSE(promote.empty());
    EXPECT_EQ(promote[0].worker_id, 0);
    // worker 2 is in dp group 1; it goes idle but is not invited
    auto a = coord.transition(2, WorkerState::Idle);
    EXPECT_TRUE(a.empty());
    // and an explicit join attempt from the wrong group is rejected
    EXPECT_THROW(coord.transition(2, WorkerState::Training), ProtocolError);
}

TEST(Coordinator, RolloutCompletePreemptsMembersAndRequestsOneCheckpoint) {
    auto coord = make_coord(5, 2);
    coord.transition(1, WorkerState::Idle);
    coord.transition(2, WorkerState::Idle);
    coord.transition(1, WorkerState::Training);
    coord.transition(2, WorkerState::Training);
    coord.transition(4, WorkerState::Idle);
    coord.transition(4, WorkerState::Training);
    auto actions = coord.rollout_complete();
    ASSERT_EQ(actions.size(), 4u); // 3 preempts + 1 checkpoint request
    int preempts = 0, checkpoints = 0;
    for (const auto& a : actions) {
        if (a.type == CoordActionType::Preempt) ++preempts;
        if (a.type == CoordActionType::CheckpointRequest) {
            ++checkpoints;
            EXPECT_EQ(a.worker_id, 1); // the leader
        }
    }
    EXPECT_EQ(preempts, 3);
    EXPECT_EQ(checkpoints, 1);
    EXPECT_FALSE(coord.session().has_value());
    for (const auto& [id, w] : coord.workers()) {
        EXPECT_NE(w.state, WorkerState::Training);
    }
}

TEST(Coordinator, RolloutCompleteWithoutSessionEmitsNothing) {
    auto coord = make_coord(3, 2);
    auto actions = coord.rollout_complete();
    EXPECT_TRUE(actions.empty());
    EXPECT_TRUE(coord.rollout_done());
}

TEST(Coordinator, LateJoinAfterPreemptIsRejected) {
    auto coord = make_coord(4, 2);
    coord.transition(0, WorkerState::Idle);
    coord.transition(1, WorkerState::Idle);
    coord.transition(0, WorkerState::Training);
    coord.rollout_complete();
    // session is gone; a straggler cannot join
    auto a = coord.transition(2, WorkerState::Idle);
    EXPECT_TRUE(a.empty());
    EXPECT_THROW(coord.transition(2, WorkerState::Training), ProtocolError);
}

TEST(Coordinator, NoPromotionAfterRolloutDone) {
    auto coord = make_coord(4, 2);
    coord.rollout_complete();
    coord.transition(0, WorkerState::Idle);
    auto a = coord.transition(1, WorkerState::Idle);
    EXPECT_TRUE(a.empty()); // threshold reached but the rollout is over
}

TEST(Coordinator, IllegalTransitionsNameBothStates) {
    auto coord = make_coord(3, 2);
    try {
        coord.transition(0, WorkerState::Training);
        FAIL() << "BUSY -> TRAINING must be illegal";
    } catch (const ProtocolError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("BUSY"), std::string::npos);
        EXPECT_NE(msg.find("TRAINING"), std::string::npos);
    }
    EXPECT_THROW(coord.transition(0, WorkerState::Busy), ProtocolError);   // BUSY -> BUSY
    EXPECT_THROW(coord.transition(9, WorkerState::Idle), ProtocolError);   // unknown worker
}

TEST(Coordinator, BeginRolloutResetsWorkersAndFlag) {
    auto coord = make_coord(3, 2);
    coord.transition(0, WorkerState::Idle);
    coord.rollout_complete();
    coord.begin_rollout();
    EXPECT_FALSE(coord.rollout_done());
    for (const auto& [id, w] : coord.workers()) EXPECT_EQ(w.state, WorkerState::Busy);
}

TEST(Coordinator, RandomizedTracesNeverTargetBusyWorkers) {
    // property: no START_TRAINING or JOIN_TRAINING ever addresses a worker
    // that is BUSY at emission time, across randomized legal traces
    RngStream rng(424242, 0);
    for (int trace = 0; trace < 10000; ++trace) {
        int workers = 2 + static_cast<int>(rng.uniform_int(5));
        int threshold = 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<int> groups;
        for (int w = 0; w < workers; ++w) {
            groups.push_back(static_cast<int>(rng.uniform_int(2)));
        }
        auto coord = make_coord(workers, threshold, groups);
        int events = 3 + static_cast<int>(rng.uniform_int(12));
        for (int e = 0; e < events; ++e) {
            int w = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(workers)));
            WorkerState to = static_cast<WorkerState>(rng.uniform_int(3));
            std::vector<CoordMessage> actions;
            if (rng.uniform_int(20) == 0) {
                actions = coord.rollout_complete();
            } else {
                try {
                    actions = coord.transition(w, to);
                } catch (const ProtocolError&) {
                    continue; // illegal transitions are rejected, state unchanged
                }
            }
            for (const auto& a : actions) {
                if (a.type == CoordActionType::StartTraining ||
                    a.type == CoordActionType::JoinTraining) {
                    EXPECT_NE(coord.workers().at(a.worker_id).state, WorkerState::Busy)
                        << "trace " << trace;
                }
            }
            if (coord.session().has_value()) {
                const auto& s = *coord.session();
                for (int id : s.members) {
                    EXPECT_EQ(coord.workers().at(id).dp_group, s.dp_group);
                }
            }
        }
    }
}

TEST(DataBuffer, EvictionFollowsRetention) {
    DataBuffer buffer(1);
    buffer.insert(5, {seq_of(10)});
    EXPECT_EQ(buffer.entries().size(), 1u);
    buffer.insert(7, {seq_of(20)});
    ASSERT_EQ(buffer.entries().size(), 1u); // step-5 entry evicted (7 - 1 > 5)
    EXPECT_EQ(buffer.entries()[0].step_id, 7);
}

TEST(DataBuffer, DuplicatesAreKeptSeparately) {
    DataBuffer buffer(1);
    buffer.insert(1, {seq_of(5), seq_of(5)});
    EXPECT_EQ(buffer.entries().size(), 2u);
    buffer.insert(1, {});
    EXPECT_EQ(buffer.entries().size(), 2u); // empty insert is a no-op
}

TEST(DataBuffer, SamplePrioritizesPreviousStepLongestFirst) {
    DataBuffer buffer(1);
    buffer.insert(4, {seq_of(9000), seq_of(500)});
    buffer.insert(5, {seq_of(700)});
    auto sample = buffer.sample(5, 9600);
    ASSERT_EQ(sample.size(), 2u);
    EXPECT_EQ(sample[0].size(), 9000u);
    EXPECT_EQ(sample[1].size(), 500u); // current-step 700 would overflow
}

TEST(DataBuffer, EmptyPreviousStepFallsToCurrent) {
    DataBuffer buffer(1);
    buffer.insert(3, {seq_of(100), seq_of(200)});
    auto sample = buffer.sample(3, 1000);
    ASSERT_EQ(sample.size(), 2u);
    EXPECT_EQ(sample[0].size(), 200u);
}

TEST(DataBuffer, BudgetSmallerThanEveryEntryIsEmpty) {
    DataBuffer buffer(1);
    buffer.insert(2, {seq_of(500), seq_of(200)});
    EXPECT_TRUE(buffer.sample(3, 100).empty());
}

TEST(DataBuffer, SelectedPreviousEntriesDominateSkippedOnes) {
    // previous-step sequences are all-2s, current-step all-3s, so the
    // sample can be attributed unambiguously
    RngStream rng(31, 0);
    for (int trial = 0; trial < 200; ++trial) {
        DataBuffer buffer(1);
        std::vector<TokenSeq> prev, cur;
        for (int i = 0; i < 8; ++i) prev.push_back(seq_of(1 + rng.uniform_int(400), 2));
        for (int i = 0; i < 8; ++i) cur.push_back(seq_of(1 + rng.uniform_int(400), 3));
        buffer.insert(9, prev);
        buffer.insert(10, cur);
        std::size_t budget = 1 + rng.uniform_int(1200);
        auto sample = buffer.sample(10, budget);
        std::size_t total = 0;
        for (const auto& s : sample) total += s.size();
        EXPECT_LE(total, budget);

        std::size_t min_selected_prev = SIZE_MAX;
        std::vector<std::size_t> selected_prev_lens;
        for (const auto& s : sample) {
            if (!s.empty() && s[0] == 2) {
                selected_prev_lens.push_back(s.size());
                min_selected_prev = std::min(min_selected_prev, s.size());
            }
        }
        std::size_t max_skipped_prev = 0;
        for (const auto& p : prev) {
            std::size_t count_in_sample = 0;
            for (auto len : selected_prev_lens) count_in_sample += (len == p.size());
            std::size_t count_in_prev = 0;
            for (const auto& q : prev) count_in_prev += (q.size() == p.size());
            if (count_in_sample < count_in_prev) {
                max_skipped_prev = std::max(max_skipped_prev, p.size());
            }
        }
        if (!selected_prev_lens.empty() && max_skipped_prev > 0) {
            EXPECT_GE(min_selected_prev, max_skipped_prev) << "trial " << trial;
        }
    }
}

TEST(Packing, FirstFitDecreasingByHand) {
    auto packed = pack_sequences({seq_of(5), seq_of(3), seq_of(2)}, 8);
    ASSERT_EQ(packed.packs.size(), 2u);
    EXPECT_EQ(packed.boundaries[0], (std::vector<std::size_t>{5, 3}));
    EXPECT_EQ(packed.boundaries[1], (std::vector<std::size_t>{2}));
}

TEST(Packing, FullLengthSequencesGetOwnPacks) {
    auto packed = pack_sequences({seq_of(8), seq_of(8), seq_of(8)}, 8);
    EXPECT_EQ(packed.packs.size(), 3u);
}

TEST(Packing, EqualSplit) {
    auto packed = pack_sequences({seq_of(4), seq_of(4), seq_of(4)}, 8);
    ASSERT_EQ(packed.packs.size(), 2u);
    EXPECT_EQ(packed.boundaries[0], (std::vector<std::size_t>{4, 4}));
    EXPECT_EQ(packed.boundaries[1], (std::vector<std::size_t>{4}));
}

TEST(Packing, OverlongSequencesAreTruncatedToCapacity) {
    auto packed = pack_sequences({seq_of(20)}, 8);
    ASSERT_EQ(packed.packs.size(), 1u);
    EXPECT_EQ(packed.packs[0].size(), 8u);
}

TEST(Packing, ZeroPaddingByConstruction) {
    RngStream rng(41, 0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<TokenSeq> seqs;
        std::size_t total = 0;
        for (int i = 0; i < 12; ++i) {
            std::size_t len = 1 + rng.uniform_int(64);
            total += len;
            seqs.push_back(seq_of(len));
        }
        auto packed = pack_sequences(seqs, 64);
        EXPECT_EQ(packed.total_tokens(), total);
        for (std::size_t p = 0; p < packed.packs.size(); ++p) {
            std::size_t boundary_sum = std::accumulate(packed.boundaries[p].begin(),
                                                       packed.boundaries[p].end(), std::size_t{0});
            EXPECT_EQ(boundary_sum, packed.packs[p].size()); // no filler tokens
            EXPECT_LE(packed.packs[p].size(), 64u);
        }
    }
}

TEST(Packing, FfdWithinClassicBoundOfOptimal) {
    RngStream rng(51, 0);
    for (int trial = 0; trial < 500; ++trial) {
        std::size_t capacity = 20 + rng.uniform_int(40);
        int n = 2 + static_cast<int>(rng.uniform_int(9)); // <= 10 sequences
        std::vector<TokenSeq> seqs;
        std::vector<std::size_t> lens;
        for (int i = 0; i < n; ++i) {
            std::size_t len = 1 + rng.uniform_int(capacity);
            lens.push_back(len);
            seqs.push_back(seq_of(len));
        }
        auto packed = pack_sequences(seqs, capacity);
        int opt = optimal_bins(lens, capacity);
        EXPECT_LE(static_cast<double>(packed.packs.size()), (11.0 / 9.0) * opt + 1.0 + 1e-9)
            << "trial " << trial;
        EXPECT_GE(static_cast<int>(packed.packs.size()), opt > 0 ? 1 : 0);
    }
}

TEST(SpotTrainLoop, PreemptBeforeFirstIterationKeepsEnteringVersion) {
    auto target = specsim::testing::make_hub_model();
    RngStream rng(61, 0);
    DataBuffer buffer(1);
    buffer.insert(0, specsim::testing::sample_streams(target, 1000, rng));
    AdaptiveDrafter drafter(6, 1, 1.0);
    drafter.set_version(7);
    SpotTrainConfig cfg;
    cfg.current_step = 0;
    auto result = spot_train_loop(drafter, buffer, cfg, 10, [] { return true; });
    EXPECT_EQ(result.log.iterations, 0);
    EXPECT_TRUE(result.log.preempted);
    EXPECT_EQ(result.final_checkpoint.version(), 7);
    EXPECT_EQ(result.drafter.version(), 7);
}

TEST(SpotTrainLoop, TenIterationsBumpVersionTen) {
    auto target = specsim::testing::make_hub_model();
    RngStream rng(62, 0);
    DataBuffer buffer(1);
    buffer.insert(0, specsim::testing::sample_streams(target, 1000, rng));
    AdaptiveDrafter drafter(6, 1, 1.0);
    auto result = spot_train_loop(drafter, buffer, SpotTrainConfig{}, 10, {});
    EXPECT_EQ(result.log.iterations, 10);
    EXPECT_FALSE(result.log.preempted);
    EXPECT_EQ(result.drafter.version(), 10);
    ASSERT_EQ(result.log.versions.size(), 10u);
    EXPECT_EQ(result.log.versions.back(), 10);
}

TEST(SpotTrainLoop, MidRunPreemptionCheckpointReplaysExactly) {
    auto target = specsim::testing::make_hub_model();
    RngStream rng(63, 0);
    DataBuffer buffer(1);
    buffer.insert(0, specsim::testing::sample_streams(target, 2000, rng));

    int counter = 0;
    auto preempt_after_3 = [&counter] { return ++counter > 3; };
    AdaptiveDrafter drafter(6, 1, 1.0);
    auto result = spot_train_loop(drafter, buffer, SpotTrainConfig{}, 100, preempt_after_3);
    EXPECT_TRUE(result.log.preempted);
    EXPECT_EQ(result.log.iterations, 3);

    auto restored = restore_checkpoint(result.final_checkpoint);
    EXPECT_EQ(restored.version(), result.drafter.version());
    for (const auto& [ctx, counts] : result.drafter.counts()) {
        Distribution a = drafter_next_dist(result.drafter, ctx);
        Distribution b = drafter_next_dist(restored, ctx);
        for (std::size_t i = 0; i < a.probs.size(); ++i) EXPECT_EQ(a.probs[i], b.probs[i]);
    }
}

TEST(SpotTrainLoop, PreemptSignalWorksAcrossThreads) {
    auto target = specsim::testing::make_hub_model();
    RngStream rng(64, 0);
    DataBuffer buffer(1);
    buffer.insert(0, specsim::testing::sample_streams(target, 500, rng));

    std::atomic<bool> preempt{false};
    AdaptiveDrafter drafter(6, 1, 1.0);
    SpotTrainResult result;
    std::thread trainer([&] {
        result = spot_train_loop(drafter, buffer, SpotTrainConfig{}, 1000000,
                                 [&preempt] { return preempt.load(); });
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    preempt.store(true);
    trainer.join();
    EXPECT_TRUE(result.log.preempted);
    EXPECT_GT(result.log.iterations, 0);
    EXPECT_LT(result.log.iterations, 1000000);
}
