#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <vector>

#include "specsim/errors.hpp"
#include "specsim/rng.hpp"
#include "specsim/spec_decode.hpp"

#include <json.hpp>

namespace specsim {

/// Reward observation for one verification step of one strategy.
struct RewardSample {
    double reward = 0.0;    // accepted tokens per time-unit
    double mean_accept = 0.0; // tokens per request, bonus included
};

/// Bucketed-epsilon-greedy bandit state. Strategies are grouped by
/// tokens_to_verify (descending) and the groups map one-to-one onto
/// ascending batch-size buckets [t_i, t_{i+1}-1], the last one unbounded.
/// Single-owner mutable state; one instance per rollout engine.
class BegMabState {
public:
    struct Arm {
        SpecStrategy strategy;
        std::deque<double> rewards;      // R_s, bounded at w
        std::deque<double> accept_lens;  // A_s, bounded at w
        std::int64_t selections = 0;
    };

    BegMabState() = default;

    const std::vector<Arm>& arms() const { return arms_; }
    const std::vector<int>& thresholds() const { return thresholds_; }
    const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
    double epsilon() const { return epsilon_; }
    int window() const { return window_; }

    /// Median of a deque; empty deques rank above every median so that
    /// unexplored strategies are tried first.
    static double median(const std::deque<double>& d) {
        if (d.empty()) return std::numeric_limits<double>::infinity();
        std::vector<double> v(d.begin(), d.end());
        std::sort(v.begin(), v.end());
        std::size_t mid = v.size() / 2;
        if (v.size() % 2 == 1) return v[mid];
        return 0.5 * (v[mid - 1] + v[mid]);
    }

private:
    friend BegMabState beg_initialize(const std::vector<SpecStrategy>&, const std::vector<int>&,
                                      double, int);
    friend void beg_record(BegMabState&, const SpecStrategy&, double, const std::vector<int>&,
                           int);
    friend const SpecStrategy& beg_select(BegMabState&, int, RngStream&);
    friend nlohmann::json beg_state_to_json(const BegMabState&);

    std::vector<Arm> arms_;                       // declaration order
    std::vector<int> thresholds_;                 // ascending t_1..t_m
    std::vector<std::vector<std::size_t>> groups_; // bucket i -> arm indices
    double epsilon_ = 0.1;
    int window_ = 20;
};

/// GroupByVerifyTokens + bucket construction. The group with the largest
/// tokens_to_verify maps to the smallest-batch bucket. Group count must
/// equal threshold count.
inline BegMabState beg_initialize(const std::vector<SpecStrategy>& strategies,
                                  const std::vector<int>& thresholds, double epsilon,
                                  int window_w) {
    if (strategies.empty()) throw ConfigError("strategies", "must not be empty");
    if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("epsilon", "must be in [0, 1]");
    if (window_w < 1) throw ConfigError("window", "must be >= 1");
    if (thresholds.empty()) throw ConfigError("thresholds", "must not be empty");
    for (std::size_t i = 0; i + 1 < thresholds.size(); ++i) {
        if (thresholds[i] >= thresholds[i + 1])
            throw ConfigError("thresholds", "must be strictly ascending");
    }

    BegMabState st;
    st.epsilon_ = epsilon;
    st.window_ = window_w;
    st.thresholds_ = thresholds;
    for (const auto& s : strategies) {
        s.validate();
        st.arms_.push_back(BegMabState::Arm{s, {}, {}, 0});
    }

    std::map<int, std::vector<std::size_t>, std::greater<int>> by_verify;
    for (std::size_t i = 0; i < st.arms_.size(); ++i) {
        by_verify[st.arms_[i].strategy.tokens_to_verify].push_back(i);
    }
    if (by_verify.size() != thresholds.size()) {
        throw ConfigError("thresholds", "count must equal the number of tokens_to_verify groups");
    }
    for (auto& [verify, members] : by_verify) {
        st.groups_.push_back(std::move(members));
    }
    return st;
}

/// Record step: a_bar = (sum accept_lens) / batch_size + 1 and
/// r = a_bar * batch_size / elapsed_time, appended to the strategy's
/// bounded deques.
inline void beg_record(BegMabState& state, const SpecStrategy& strategy, double elapsed_time,
                       const std::vector<int>& accept_lens, int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (!(elapsed_time > 0.0)) throw ConfigError("elapsed_time", "must be > 0");
    if (accept_lens.size() != static_cast<std::size_t>(batch_size))
        throw ConfigError("accept_lens", "length must equal batch_size");

    for (auto& arm : state.arms_) {
        if (arm.strategy == strategy) {
            double sum = 0.0;
            for (int a : accept_lens) sum += a;
            double a_bar = sum / static_cast<double>(batch_size) + 1.0;
            double reward = a_bar * static_cast<double>(batch_size) / elapsed_time;
            arm.rewards.push_back(reward);
            arm.accept_lens.push_back(a_bar);
            while (arm.rewards.size() > static_cast<std::size_t>(state.window_))
                arm.rewards.pop_front();
            while (arm.accept_lens.size() > static_cast<std::size_t>(state.window_))
                arm.accept_lens.pop_front();
            return;
        }
    }
    throw ConfigError("strategy", "not a configured strategy");
}

/// SelectStrategy: route batch_size to its bucket's candidate set V.
/// |V| = 1 returns the unique strategy without consuming randomness;
/// otherwise explore uniformly with probability epsilon, else exploit the
/// best median reward (ties and cold arms resolve by declaration order).
inline const SpecStrategy& beg_select(BegMabState& state, int batch_size, RngStream& rng) {
    if (state.thresholds_.empty() || batch_size < state.thresholds_.front()) {
        throw RoutingError("batch size below the smallest bucket threshold");
    }
    std::size_t bucket = state.thresholds_.size() - 1;
    for (std::size_t i = 0; i + 1 < state.thresholds_.size(); ++i) {
        if (batch_size >= state.thresholds_[i] && batch_size < state.thresholds_[i + 1]) {
            bucket = i;
            break;
        }
    }
    const auto& candidates = state.groups_[bucket];
    std::size_t pick;
    if (candidates.size() == 1) {
        pick = candidates[0];
    } else if (rng.uniform01() < state.epsilon_) {
        pick = candidates[rng.uniform_int(candidates.size())];
    } else {
        pick = candidates[0];
        double best = BegMabState::median(state.arms_[pick].rewards);
        for (std::size_t i = 1; i < candidates.size(); ++i) {
            double m = BegMabState::median(state.arms_[candidates[i]].rewards);
            if (m > best) {
                best = m;
                pick = candidates[i];
            }
        }
    }
    state.arms_[pick].selections += 1;
    return state.arms_[pick].strategy;
}

/// Tuner-trace dump: per-strategy reward/accept windows and selection
/// counts, plus the bucket layout.
inline nlohmann::json beg_state_to_json(const BegMabState& state) {
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& arm : state.arms_) {
        arms.push_back({{"strategy",
                         {{"draft_depth", arm.strategy.draft_depth},
                          {"top_k", arm.strategy.top_k},
                          {"tokens_to_verify", arm.strategy.tokens_to_verify}}},
                        {"rewards", std::vector<double>(arm.rewards.begin(), arm.rewards.end())},
                        {"accept_lens",
                         std::vector<double>(arm.accept_lens.begin(), arm.accept_lens.end())},
                        {"selections", arm.selections}});
    }
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : state.groups_) groups.push_back(g);
    return {{"epsilon", state.epsilon_},
            {"window", state.window_},
            {"thresholds", state.thresholds_},
            {"groups", std::move(groups)},
            {"arms", std::move(arms)}};
}

} // namespace specsim
