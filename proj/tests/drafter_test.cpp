#include <gtest/gtest.h>

#include <cmath>

#include "specsim/checkpoint.hpp"
#include "specsim/drafter.hpp"
#include "specsim/model_gen.hpp"
#include "specsim/ngram.hpp"
#include "specsim/packing.hpp"

#include "test_support.hpp"

using namespace specsim;

namespace {

PackedBatch single_pack(std::vector<TokenSeq> seqs, std::size_t capacity = 1024) {
    return pack_sequences(seqs, capacity);
}

double tv_distance(const Distribution& a, const Distribution& b) {
    double tv = 0.0;
    for (std::size_t i = 0; i < a.probs.size(); ++i) tv += std::abs(a.probs[i] - b.probs[i]);
    return 0.5 * tv;
}

// training stream drawn from the (tempered) target, chopped into sequences
std::vector<TokenSeq> sample_streams(const MarkovTargetModel& model, int total_tokens,
                                     RngStream& rng) {
    std::vector<TokenSeq> out;
    MarkovTargetModel sampler = model.with_temperature(1.0);
    int produced = 0;
    while (produced < total_tokens) {
        TokenSeq prompt{static_cast<TokenId>(
            2 + rng.uniform_int(static_cast<std::uint64_t>(model.vocab_size() - 2)))};
        TokenSeq gen = generate_autoregressive(sampler, prompt, 128, rng);
        TokenSeq stream = prompt;
        stream.insert(stream.end(), gen.begin(), gen.end());
        produced += static_cast<int>(stream.size());
        out.push_back(std::move(stream));
    }
    return out;
}

} // namespace

TEST(DrafterNextDist, PureSmoothingIsUniform) {
    AdaptiveDrafter d(4, 1, 1.0);
    TokenSeq ctx{2};
    Distribution out = drafter_next_dist(d, ctx);
    for (double p : out.probs) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(DrafterNextDist, UnsmoothedNormalization) {
    AdaptiveDrafter d(2, 1, 0.0);
    d.add_count({0}, 0, 3);
    d.add_count({0}, 1, 1);
    TokenSeq ctx{0};
    Distribution out = drafter_next_dist(d, ctx);
    EXPECT_DOUBLE_EQ(out.probs[0], 0.75);
    EXPECT_DOUBLE_EQ(out.probs[1], 0.25);
}

TEST(DrafterNextDist, LaplaceFormula) {
    AdaptiveDrafter d(2, 1, 1.0);
    d.add_count({0}, 0, 3);
    d.add_count({0}, 1, 1);
    TokenSeq ctx{0};
    Distribution out = drafter_next_dist(d, ctx);
    EXPECT_DOUBLE_EQ(out.probs[0], 4.0 / 6.0);
    EXPECT_DOUBLE_EQ(out.probs[1], 2.0 / 6.0);
}

TEST(TrainOnBatch, EmptyBatchBumpsVersionOnly) {
    AdaptiveDrafter d(4, 1, 1.0);
    auto d2 = train_on_batch(d, PackedBatch{});
    EXPECT_EQ(d2.version(), d.version() + 1);
    EXPECT_TRUE(d2.counts().empty());
}

TEST(TrainOnBatch, CountsTransitionsWithFullContexts) {
    // "a b a b" with m = 1: counts[a][b] = 2, counts[b][a] = 1
    AdaptiveDrafter d(4, 1, 1.0);
    auto d2 = train_on_batch(d, single_pack({{2, 3, 2, 3}}));
    ASSERT_EQ(d2.counts().size(), 2u);
    EXPECT_EQ(d2.counts().at({2})[3], 2u);
    EXPECT_EQ(d2.counts().at({3})[2], 1u);
}

TEST(TrainOnBatch, NeverReadsAcrossSequenceBoundaries) {
    // ["a b"], ["c d"] packed together: no context b -> c
    AdaptiveDrafter d(8, 1, 1.0);
    PackedBatch packed = single_pack({{2, 3}, {4, 5}}, 4);
    ASSERT_EQ(packed.packs.size(), 1u); // both fit one pack; boundary must hold
    auto d2 = train_on_batch(d, packed);
    EXPECT_EQ(d2.counts().at({2})[3], 1u);
    EXPECT_EQ(d2.counts().at({4})[5], 1u);
    EXPECT_EQ(d2.counts().count({3}), 0u);
}

TEST(TrainOnBatch, ConvergesToTargetRows) {
    RngStream rng(101, 0);
    auto target = make_random_model(8, 1, 1.0, 1.0, 0.0, rng);
    AdaptiveDrafter d(8, 1, 1.0);
    RngStream data_rng(102, 0);

    auto mean_tv_over_visited = [&](const AdaptiveDrafter& drafter) {
        double total = 0.0;
        int visited = 0;
        for (const auto& [ctx, counts] : drafter.counts()) {
            std::uint64_t n = 0;
            for (auto c : counts) n += c;
            if (n == 0) continue;
            total += tv_distance(drafter_next_dist(drafter, ctx), target.raw_row(ctx));
            ++visited;
        }
        return visited > 0 ? total / visited : 1.0;
    };

    auto early = train_on_batch(d, single_pack(sample_streams(target, 200, data_rng), 8192));
    double tv_early = mean_tv_over_visited(early);

    auto trained = early;
    int seen = 200;
    while (seen < 10000) {
        auto streams = sample_streams(target, 2000, data_rng);
        trained = train_on_batch(trained, single_pack(streams, 8192));
        seen += 2000;
    }
    double tv_late = mean_tv_over_visited(trained);
    EXPECT_LE(tv_late, tv_early);
    EXPECT_LT(tv_late, 0.05);

    // per visited context, not just on average
    for (const auto& [ctx, counts] : trained.counts()) {
        std::uint64_t n = 0;
        for (auto c : counts) n += c;
        if (n < 100) continue;
        EXPECT_LT(tv_distance(drafter_next_dist(trained, ctx), target.raw_row(ctx)), 0.05)
            << "context " << ctx[0];
    }
}

TEST(TrainOnBatch, StalenessDropAndRecovery) {
    auto target = specsim::testing::make_hub_model();

    RngStream data_rng(11, 0);
    AdaptiveDrafter pretrained(6, 1, 1.0);
    pretrained = specsim::testing::fit_on_streams(
        pretrained, specsim::testing::sample_streams(target, 4000, data_rng));

    RngStream probe_rng(12, 0);
    double match_before =
        greedy_match_rate(pretrained, target, specsim::testing::sample_streams(target, 3000, probe_rng));

    RngStream drift_rng = specsim::testing::hub_drift_stream();
    auto drifted = apply_drift(target, 0.3, drift_rng);
    // the scenario is live only if the drift actually flipped the hub row
    ASSERT_EQ(target.table().at(TokenSeq{2}).argmax(), 3);
    ASSERT_EQ(drifted.table().at(TokenSeq{2}).argmax(), 4);

    RngStream probe_rng2(13, 0);
    auto probe1 = specsim::testing::sample_streams(drifted, 3000, probe_rng2);
    double match_stale = greedy_match_rate(pretrained, drifted, probe1);
    EXPECT_LT(match_stale, match_before - 0.03) << "drift must hurt the stale drafter";

    // re-fit on <= 1e3 fresh transitions from the drifted target
    RngStream fresh_rng(14, 0);
    AdaptiveDrafter refit(6, 1, 1.0);
    refit.set_version(pretrained.version());
    refit = specsim::testing::fit_on_streams(
        refit, specsim::testing::sample_streams(drifted, 1000, fresh_rng));
    double match_recovered = greedy_match_rate(refit, drifted, probe1);
    EXPECT_GE(match_recovered, match_before - 0.02);
}

TEST(Ngram, InsertEnumeratesKeysWithTruncatedContinuations) {
    NgramIndex idx(2, 2);
    TokenSeq response{2, 3, 4, 5}; // "a b c d"
    auto out = ngram_insert(idx, response, 1);
    ASSERT_EQ(out.entries().size(), 2u);
    EXPECT_EQ(out.entries().at({2, 3})[0].continuation, (TokenSeq{4, 5}));
    EXPECT_EQ(out.entries().at({3, 4})[0].continuation, (TokenSeq{5}));
}

TEST(Ngram, DuplicateInsertDoublesFrequencies) {
    NgramIndex idx(2, 2);
    TokenSeq response{2, 3, 4, 5};
    auto once = ngram_insert(idx, response, 1);
    auto twice = ngram_insert(once, response, 2);
    EXPECT_EQ(twice.size(), once.size());
    for (const auto& [key, entries] : twice.entries()) {
        ASSERT_EQ(entries.size(), 1u);
        EXPECT_EQ(entries[0].frequency, 2u);
        EXPECT_EQ(entries[0].last_step_id, 2);
    }
}

TEST(Ngram, ResponseOfLengthNIsNoOp) {
    NgramIndex idx(3, 2);
    auto out = ngram_insert(idx, TokenSeq{2, 3, 4}, 1);
    EXPECT_EQ(out.size(), 0u);
}

TEST(Ngram, DraftPicksHighestFrequency) {
    NgramIndex idx(2, 4);
    idx.record({2, 3}, {4, 5}, 1);
    idx.record({2, 3}, {4, 5}, 2);
    idx.record({2, 3}, {4, 5}, 3);
    idx.record({2, 3}, {4, 6}, 4);
    TokenSeq ctx{7, 2, 3};
    EXPECT_EQ(ngram_draft(idx, ctx, 2), (TokenSeq{4, 5}));
}

TEST(Ngram, TiesBreakByRecencyThenLexicographic) {
    NgramIndex idx(1, 4);
    idx.record({2}, {5, 5}, 1);
    idx.record({2}, {4, 4}, 3);
    TokenSeq ctx{2};
    EXPECT_EQ(ngram_draft(idx, ctx, 4), (TokenSeq{4, 4})); // same freq, newer wins

    NgramIndex idx2(1, 4);
    idx2.record({2}, {5, 5}, 1);
    idx2.record({2}, {4, 4}, 1);
    EXPECT_EQ(ngram_draft(idx2, ctx, 4), (TokenSeq{4, 4})); // lexicographic
}

TEST(Ngram, UnseenContextGivesEmptyDraft) {
    NgramIndex idx(2, 4);
    TokenSeq ctx{9, 9};
    EXPECT_TRUE(ngram_draft(idx, ctx, 3).empty());
    TokenSeq too_short{9};
    EXPECT_TRUE(ngram_draft(idx, too_short, 3).empty());
}

TEST(Ngram, DraftTruncatesToDepth) {
    NgramIndex idx(1, 4);
    idx.record({2}, {4, 5}, 1);
    TokenSeq ctx{2};
    EXPECT_EQ(ngram_draft(idx, ctx, 1), (TokenSeq{4}));
}

TEST(Ngram, DraftIsPure) {
    NgramIndex idx(2, 4);
    RngStream rng(55, 0);
    for (int i = 0; i < 200; ++i) {
        TokenSeq resp;
        for (int j = 0; j < 12; ++j) {
            resp.push_back(static_cast<TokenId>(rng.uniform_int(6)));
        }
        idx = ngram_insert(idx, resp, i % 5);
    }
    TokenSeq ctx{1, 2};
    auto first = ngram_draft(idx, ctx, 6);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(ngram_draft(idx, ctx, 6), first);
}

TEST(Checkpoint, RoundTripReproducesPredictions) {
    RngStream rng(61, 0);
    auto target = make_random_model(8, 2, 1.0, 0.5, 0.0, rng);
    AdaptiveDrafter d(8, 2, 0.5);
    RngStream data_rng(62, 0);
    d = train_on_batch(d, single_pack(sample_streams(target, 3000, data_rng), 8192));

    auto restored = restore_checkpoint(DrafterCheckpoint::from_bytes(save_checkpoint(d).to_bytes()));
    EXPECT_EQ(restored.version(), d.version());
    EXPECT_EQ(restored.order(), d.order());
    EXPECT_DOUBLE_EQ(restored.smoothing_alpha(), d.smoothing_alpha());
    ASSERT_EQ(restored.counts().size(), d.counts().size());
    for (const auto& [ctx, row] : d.counts()) {
        Distribution a = drafter_next_dist(d, ctx);
        Distribution b = drafter_next_dist(restored, ctx);
        for (std::size_t i = 0; i < a.probs.size(); ++i) {
            EXPECT_EQ(a.probs[i], b.probs[i]); // bit-identical
        }
    }
}

TEST(Checkpoint, SaveRestoreSaveIsByteIdentical) {
    AdaptiveDrafter d(6, 1, 1.0);
    d.add_count({2}, 3, 7);
    d.add_count({3}, 4, 2);
    d.set_version(9);
    auto bytes1 = save_checkpoint(d).to_bytes();
    auto restored = restore_checkpoint(DrafterCheckpoint::from_bytes(bytes1));
    auto bytes2 = save_checkpoint(restored).to_bytes();
    EXPECT_EQ(bytes1, bytes2);
}

TEST(Checkpoint, TruncationIsRejected) {
    AdaptiveDrafter d(6, 1, 1.0);
    d.add_count({2}, 3, 7);
    auto bytes = save_checkpoint(d).to_bytes();
    for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{4}}) {
        std::vector<std::uint8_t> truncated(bytes.begin(),
                                            bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(DrafterCheckpoint::from_bytes(truncated), CheckpointError);
    }
}

TEST(Checkpoint, CorruptionIsRejected) {
    AdaptiveDrafter d(6, 1, 1.0);
    d.add_count({2}, 3, 7);
    auto bytes = save_checkpoint(d).to_bytes();
    bytes[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(DrafterCheckpoint::from_bytes(bytes), CheckpointError);
}

TEST(Checkpoint, FormatVersionMismatchIsRejected) {
    AdaptiveDrafter d(6, 1, 1.0);
    auto bytes = save_checkpoint(d).to_bytes();
    // format version lives right after magic and byte-order marker
    std::size_t off = sizeof(kCheckpointMagic) + 4;
    bytes[off] = 0x7f;
    // refresh the trailer so only the version check can fire
    std::uint64_t sum = detail::fnv1a64(bytes.data(), bytes.size() - 8);
    for (int i = 0; i < 8; ++i) {
        bytes[bytes.size() - 8 + static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(sum >> (8 * i));
    }
    EXPECT_THROW(DrafterCheckpoint::from_bytes(bytes), CheckpointError);
}

TEST(Checkpoint, PayloadScalesWithDrafterStateOnly) {
    AdaptiveDrafter small(16, 1, 1.0);
    small.add_count({2}, 3, 1);
    auto small_bytes = save_checkpoint(small).to_bytes();

    // a big target model exists alongside; the checkpoint must not grow
    RngStream rng(71, 0);
    auto big_target = make_random_model(16, 3, 1.0, 1.0, 0.0, rng);
    EXPECT_GT(big_target.table().size(), 1000u);
    auto small_bytes_again = save_checkpoint(small).to_bytes();
    EXPECT_EQ(small_bytes, small_bytes_again);

    AdaptiveDrafter bigger(16, 1, 1.0);
    for (int c = 0; c < 16; ++c) {
        for (int t = 0; t < 16; ++t) {
            bigger.add_count({static_cast<TokenId>(c)}, static_cast<TokenId>(t), 1);
        }
    }
    EXPECT_GT(save_checkpoint(bigger).to_bytes().size(), small_bytes.size());
}

TEST(Checkpoint, FileRoundTripAndAsyncSave) {
    AdaptiveDrafter d(6, 1, 1.0);
    d.add_count({2}, 3, 7);
    d.set_version(4);
    std::string path = ::testing::TempDir() + "specsim_ckpt.bin";
    auto fut = save_checkpoint_async(d, path);
    d.add_count({2}, 4, 1); // training continues on the live drafter
    fut.get();
    auto restored = restore_checkpoint(read_checkpoint_file(path));
    EXPECT_EQ(restored.version(), 4);
    EXPECT_EQ(restored.counts().at({2})[3], 7u);
    EXPECT_EQ(restored.counts().at({2})[4], 0u); // snapshot taken at call time
}
