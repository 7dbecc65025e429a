#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "specsim/drafter.hpp"
#include "specsim/errors.hpp"
#include "specsim/ngram.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

/// One speculative decoding configuration: tree depth in draft steps,
/// branching factor, and the number of tree nodes submitted to the target
/// for parallel verification.
struct SpecStrategy {
    int draft_depth = 4;
    int top_k = 2;
    int tokens_to_verify = 8;

    /// Largest node count a (top_k, draft_depth) tree can hold, saturated.
    std::int64_t max_tree_nodes() const {
        std::int64_t total = 0, level = 1;
        for (int d = 0; d < draft_depth; ++d) {
            if (level > (1LL << 40) / std::max(top_k, 1)) return 1LL << 40;
            level *= top_k;
            total += level;
            if (total > (1LL << 40)) return 1LL << 40;
        }
        return total;
    }

    void validate() const {
        if (draft_depth < 1) throw ConfigError("draft_depth", "must be >= 1");
        if (top_k < 1) throw ConfigError("top_k", "must be >= 1");
        if (tokens_to_verify < 1) throw ConfigError("tokens_to_verify", "must be >= 1");
        if (tokens_to_verify > max_tree_nodes())
            throw ConfigError("tokens_to_verify", "exceeds tree capacity for (top_k, draft_depth)");
    }

    bool operator==(const SpecStrategy&) const = default;
};

/// Candidate token tree. Nodes are stored so that every parent precedes its
/// children; parent -1 attaches to the root context. path_prob is the
/// product of drafter probabilities along the path from the root.
struct DraftNode {
    TokenId token = 0;
    int parent = -1;
    int depth = 1;
    double prob = 1.0;
    double path_prob = 1.0;
    /// Proposal distribution the token was drawn from (linear stochastic
    /// chains only). Empty means a deterministic one-hot proposal.
    std::vector<double> draft_dist;
};

struct DraftTree {
    std::vector<DraftNode> nodes;

    bool linear() const {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].parent != static_cast<int>(i) - 1) return false;
        }
        return true;
    }
};

/// Verification outcome: the accepted root-to-node path, its length in
/// drafted tokens, and the single target-supplied token at the divergence.
struct AcceptResult {
    TokenSeq accepted;
    int accept_length = 0;
    TokenId bonus = 0;

    int total_emitted() const { return accept_length + 1; }
};

namespace detail {

struct Candidate {
    TokenId token;
    int parent; // index into the candidate arena, -1 for root
    int depth;
    double prob;
    double path_prob;
    std::size_t birth; // creation order, last-resort tiebreak
};

/// Selection rank: higher path_prob first, then shallower, then lower
/// token id, then creation order. A parent always outranks its children
/// under this order, so any rank prefix is closed under ancestors.
inline bool rank_before(const Candidate& a, const Candidate& b) {
    if (a.path_prob != b.path_prob) return a.path_prob > b.path_prob;
    if (a.depth != b.depth) return a.depth < b.depth;
    if (a.token != b.token) return a.token < b.token;
    return a.birth < b.birth;
}

} // namespace detail

/// Builds the confidence-ranked candidate tree: level-by-level expansion to
/// draft_depth taking the top_k most probable children per expanded node
/// (the drafter self-feeds on its own drafted tokens), then keeps the
/// tokens_to_verify nodes of highest path_prob. Only the tokens_to_verify
/// best nodes of each level are expanded further; no deeper node can enter
/// the final selection past them, so the kept set matches full expansion.
template <typename NextDist>
DraftTree build_draft_tree(NextDist&& next_dist, std::span<const TokenId> ctx,
                           const SpecStrategy& strategy) {
    strategy.validate();
    std::vector<detail::Candidate> arena;
    std::vector<int> frontier; // arena indices of the current level, rank order

    auto expand = [&](int parent_idx, const TokenSeq& parent_ctx, int depth, double parent_prob) {
        Distribution d = next_dist(parent_ctx);
        const std::size_t v = d.probs.size();
        std::vector<TokenId> order(v);
        for (std::size_t i = 0; i < v; ++i) order[i] = static_cast<TokenId>(i);
        std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
            return d.probs[static_cast<std::size_t>(a)] > d.probs[static_cast<std::size_t>(b)];
        });
        int taken = 0;
        std::vector<int> created;
        for (TokenId t : order) {
            if (taken >= strategy.top_k) break;
            double p = d.probs[static_cast<std::size_t>(t)];
            if (p <= 0.0) break;
            arena.push_back(detail::Candidate{t, parent_idx, depth, p, parent_prob * p,
                                              arena.size()});
            created.push_back(static_cast<int>(arena.size()) - 1);
            ++taken;
        }
        return created;
    };

    TokenSeq root_ctx(ctx.begin(), ctx.end());
    frontier = expand(-1, root_ctx, 1, 1.0);

    auto path_ctx = [&](int idx) {
        TokenSeq path;
        for (int i = idx; i != -1; i = arena[static_cast<std::size_t>(i)].parent) {
            path.push_back(arena[static_cast<std::size_t>(i)].token);
        }
        TokenSeq full = root_ctx;
        full.insert(full.end(), path.rbegin(), path.rend());
        return full;
    };

    for (int depth = 2; depth <= strategy.draft_depth; ++depth) {
        std::sort(frontier.begin(), frontier.end(), [&](int a, int b) {
            return detail::rank_before(arena[static_cast<std::size_t>(a)],
                                       arena[static_cast<std::size_t>(b)]);
        });
        if (frontier.size() > static_cast<std::size_t>(strategy.tokens_to_verify)) {
            frontier.resize(static_cast<std::size_t>(strategy.tokens_to_verify));
        }
        std::vector<int> next;
        for (int idx : frontier) {
            auto created = expand(idx, path_ctx(idx), depth,
                                  arena[static_cast<std::size_t>(idx)].path_prob);
            next.insert(next.end(), created.begin(), created.end());
        }
        if (next.empty()) break;
        frontier = std::move(next);
    }

    std::vector<int> keep(arena.size());
    for (std::size_t i = 0; i < arena.size(); ++i) keep[i] = static_cast<int>(i);
    std::sort(keep.begin(), keep.end(), [&](int a, int b) {
        return detail::rank_before(arena[static_cast<std::size_t>(a)],
                                   arena[static_cast<std::size_t>(b)]);
    });
    if (keep.size() > static_cast<std::size_t>(strategy.tokens_to_verify)) {
        keep.resize(static_cast<std::size_t>(strategy.tokens_to_verify));
    }

    // Remap into tree order. Kept ancestors always rank inside the prefix,
    // so every parent is present and precedes its children.
    std::vector<int> to_tree(arena.size(), -1);
    DraftTree tree;
    for (int idx : keep) {
        const auto& c = arena[static_cast<std::size_t>(idx)];
        DraftNode n;
        n.token = c.token;
        n.parent = c.parent == -1 ? -1 : to_tree[static_cast<std::size_t>(c.parent)];
        n.depth = c.depth;
        n.prob = c.prob;
        n.path_prob = c.path_prob;
        to_tree[static_cast<std::size_t>(idx)] = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back(std::move(n));
    }
    return tree;
}

/// Linear chain sampled from the drafter's own distribution, self-feeding,
/// with the full proposal distribution recorded per position. This is the
/// draft used by stochastic verification.
template <typename NextDist>
DraftTree build_sampled_chain(NextDist&& next_dist, std::span<const TokenId> ctx,
                              int depth, RngStream& rng) {
    DraftTree tree;
    TokenSeq cur(ctx.begin(), ctx.end());
    double path = 1.0;
    for (int i = 0; i < depth; ++i) {
        Distribution d = next_dist(cur);
        TokenId t = sample_token(d, rng);
        DraftNode n;
        n.token = t;
        n.parent = static_cast<int>(tree.nodes.size()) - 1;
        n.depth = i + 1;
        n.prob = d.probs[static_cast<std::size_t>(t)];
        path *= n.prob;
        n.path_prob = path;
        n.draft_dist = std::move(d.probs);
        tree.nodes.push_back(std::move(n));
        cur.push_back(t);
    }
    return tree;
}

/// Linear chain of externally proposed tokens (e.g. an n-gram retrieval
/// draft). Proposals are deterministic one-hots, which keeps stochastic
/// verification lossless: accept probability is exactly p_target(token).
inline DraftTree chain_from_tokens(std::span<const TokenId> tokens) {
    DraftTree tree;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        DraftNode n;
        n.token = tokens[i];
        n.parent = static_cast<int>(i) - 1;
        n.depth = static_cast<int>(i) + 1;
        n.prob = 1.0;
        n.path_prob = 1.0;
        tree.nodes.push_back(std::move(n));
    }
    return tree;
}

/// Greedy verification: walk from the root accepting the child that matches
/// the target's argmax at each accepted prefix; the first mismatching
/// argmax token is emitted as the bonus.
inline AcceptResult verify_greedy(const MarkovTargetModel& target, std::span<const TokenId> ctx,
                                  const DraftTree& tree) {
    AcceptResult r;
    TokenSeq cur(ctx.begin(), ctx.end());
    int node = -1;
    for (;;) {
        TokenId want = target.raw_row(cur).argmax();
        int next = -1;
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            if (tree.nodes[i].parent == node && tree.nodes[i].token == want) {
                next = static_cast<int>(i);
                break;
            }
        }
        if (next == -1) {
            r.bonus = want;
            return r;
        }
        r.accepted.push_back(want);
        r.accept_length += 1;
        cur.push_back(want);
        node = next;
    }
}

/// Speculative-sampling verification over a linear chain: drafted token x
/// is accepted with probability min(1, p(x)/q(x)); on rejection the bonus
/// is drawn from the normalized positive residual (p - q)^+, and after a
/// fully accepted chain from the target itself. The marginal distribution
/// of every emitted token equals the target's.
inline AcceptResult verify_stochastic(const MarkovTargetModel& target,
                                      std::span<const TokenId> ctx, const DraftTree& chain,
                                      RngStream& rng) {
    AcceptResult r;
    TokenSeq cur(ctx.begin(), ctx.end());
    for (const DraftNode& n : chain.nodes) {
        Distribution p = target_next_dist(target, cur);
        double q = n.draft_dist.empty() ? 1.0 : n.draft_dist[static_cast<std::size_t>(n.token)];
        double px = p.probs[static_cast<std::size_t>(n.token)];
        double accept_prob = q > 0.0 ? std::min(1.0, px / q) : 0.0;
        if (rng.uniform01() < accept_prob) {
            r.accepted.push_back(n.token);
            r.accept_length += 1;
            cur.push_back(n.token);
            continue;
        }
        Distribution residual{std::vector<double>(p.probs.size(), 0.0)};
        double sum = 0.0;
        for (std::size_t i = 0; i < p.probs.size(); ++i) {
            double qi = n.draft_dist.empty()
                            ? (static_cast<TokenId>(i) == n.token ? 1.0 : 0.0)
                            : n.draft_dist[i];
            double diff = p.probs[i] - qi;
            if (diff > 0.0) {
                residual.probs[i] = diff;
                sum += diff;
            }
        }
        if (sum <= 0.0) {
            residual = p; // p == q pointwise; rejection has probability 0
        } else {
            for (double& v : residual.probs) v /= sum;
        }
        r.bonus = sample_token(residual, rng);
        return r;
    }
    r.bonus = sample_token(target_next_dist(target, cur), rng);
    return r;
}

enum class DecodeMode { GreedyTree, StochasticLinear };

/// Draft source: maps (context, strategy) to a candidate tree. Stochastic
/// planners consume the provided stream for their own draws.
using DraftPlanner =
    std::function<DraftTree(const TokenSeq& ctx, const SpecStrategy&, RngStream&)>;

inline DraftPlanner make_adaptive_tree_planner(const AdaptiveDrafter& drafter) {
    return [&drafter](const TokenSeq& ctx, const SpecStrategy& s, RngStream&) {
        return build_draft_tree(
            [&drafter](const TokenSeq& c) { return drafter_next_dist(drafter, c); }, ctx, s);
    };
}

inline DraftPlanner make_adaptive_chain_planner(const AdaptiveDrafter& drafter) {
    return [&drafter](const TokenSeq& ctx, const SpecStrategy& s, RngStream& rng) {
        return build_sampled_chain(
            [&drafter](const TokenSeq& c) { return drafter_next_dist(drafter, c); }, ctx,
            s.draft_depth, rng);
    };
}

inline DraftPlanner make_ngram_planner(const NgramIndex& index) {
    return [&index](const TokenSeq& ctx, const SpecStrategy& s, RngStream&) {
        return chain_from_tokens(ngram_draft(index, ctx, s.draft_depth));
    };
}

struct SpecResult {
    TokenSeq tokens;
    std::vector<int> accept_lens; // one entry per draft/verify step
};

/// Full speculative decoding loop: draft, verify, append, until EOS or
/// max_len generated tokens. Greedy mode is token-identical to greedy
/// autoregressive decoding; stochastic mode is distribution-identical.
inline SpecResult spec_generate(const MarkovTargetModel& target, const DraftPlanner& planner,
                                std::span<const TokenId> prompt, int max_len,
                                const SpecStrategy& strategy, DecodeMode mode, RngStream& rng) {
    strategy.validate();
    SpecResult out;
    TokenSeq ctx(prompt.begin(), prompt.end());
    while (static_cast<int>(out.tokens.size()) < max_len) {
        DraftTree tree = planner(ctx, strategy, rng);
        AcceptResult res;
        if (mode == DecodeMode::GreedyTree) {
            res = verify_greedy(target, ctx, tree);
        } else {
            res = verify_stochastic(target, ctx, tree, rng);
        }
        out.accept_lens.push_back(res.accept_length);
        TokenSeq emitted = res.accepted;
        emitted.push_back(res.bonus);
        bool done = false;
        for (TokenId t : emitted) {
            out.tokens.push_back(t);
            ctx.push_back(t);
            if (t == kEosToken || static_cast<int>(out.tokens.size()) >= max_len) {
                done = true;
                break;
            }
        }
        if (done) break;
    }
    return out;
}

} // namespace specsim
