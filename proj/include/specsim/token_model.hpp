#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "specsim/errors.hpp"
#include "specsim/rng.hpp"

#include <json.hpp>

namespace specsim {

using TokenId = std::int32_t;

/// Reserved token ids. EOS terminates a response; BEGIN pads contexts
/// shorter than the model order.
inline constexpr TokenId kEosToken = 0;
inline constexpr TokenId kBeginToken = 1;

using TokenSeq = std::vector<TokenId>;

/// Probability mass over a vocabulary of size probs.size(). Valid when all
/// entries are non-negative and the total is 1 within 1e-9.
struct Distribution {
    std::vector<double> probs;

    std::size_t vocab() const { return probs.size(); }

    bool valid(double tol = 1e-9) const {
        double sum = 0.0;
        for (double p : probs) {
            if (!(p >= 0.0)) return false;
            sum += p;
        }
        return std::abs(sum - 1.0) <= tol;
    }

    /// Argmax token, ties broken toward the lowest TokenId.
    TokenId argmax() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < probs.size(); ++i) {
            if (probs[i] > probs[best]) best = i;
        }
        return static_cast<TokenId>(best);
    }

    static Distribution uniform(std::size_t vocab) {
        return Distribution{std::vector<double>(vocab, 1.0 / static_cast<double>(vocab))};
    }

    static Distribution one_hot(std::size_t vocab, TokenId t) {
        Distribution d{std::vector<double>(vocab, 0.0)};
        d.probs[static_cast<std::size_t>(t)] = 1.0;
        return d;
    }

    void normalize() {
        double sum = 0.0;
        for (double p : probs) sum += p;
        if (sum <= 0.0) {
            *this = uniform(probs.size());
            return;
        }
        for (double& p : probs) p /= sum;
    }
};

/// Convex blend (1-lambda)*a + lambda*b of two rows of equal size.
inline Distribution blend_rows(const Distribution& a, const Distribution& b, double lambda) {
    Distribution out{std::vector<double>(a.probs.size())};
    for (std::size_t i = 0; i < a.probs.size(); ++i) {
        out.probs[i] = (1.0 - lambda) * a.probs[i] + lambda * b.probs[i];
    }
    return out;
}

/// Inverse CDF over ascending TokenId: min{t : u < CDF(t)}.
inline TokenId inverse_cdf_pick(const Distribution& dist, double u) {
    double cum = 0.0;
    std::size_t last = dist.probs.size() - 1;
    for (std::size_t t = 0; t < last; ++t) {
        cum += dist.probs[t];
        if (u < cum) return static_cast<TokenId>(t);
    }
    return static_cast<TokenId>(last);
}

inline TokenId sample_token(const Distribution& dist, RngStream& rng) {
    return inverse_cdf_pick(dist, rng.uniform01());
}

/// Order-k conditional token table standing in for the policy being trained.
/// Rows are immutable after construction; drift returns a new model.
/// Contexts absent from the table read as the uniform row.
class MarkovTargetModel {
public:
    using Table = std::map<TokenSeq, Distribution>;

    MarkovTargetModel() = default;
    MarkovTargetModel(int vocab_size, int order_k, double temperature, Table table,
                      std::int64_t step_id = 0)
        : vocab_(vocab_size), order_(order_k), temperature_(temperature),
          table_(std::move(table)), step_(step_id) {
        if (vocab_ < 2) throw ConfigError("vocab_size", "must be >= 2");
        if (order_ < 0) throw ConfigError("order_k", "must be >= 0");
        if (temperature_ < 0.0) throw ConfigError("temperature", "must be >= 0");
        for (const auto& [ctx, row] : table_) {
            if (static_cast<int>(ctx.size()) != order_)
                throw ConfigError("table", "context length does not match order_k");
            if (row.probs.size() != static_cast<std::size_t>(vocab_) || !row.valid())
                throw ConfigError("table", "row is not a valid distribution");
        }
    }

    int vocab_size() const { return vocab_; }
    int order() const { return order_; }
    double temperature() const { return temperature_; }
    std::int64_t step_id() const { return step_; }
    const Table& table() const { return table_; }

    MarkovTargetModel with_temperature(double t) const {
        MarkovTargetModel m = *this;
        m.temperature_ = t;
        return m;
    }

    /// Last `order` tokens of ctx, left-padded with BEGIN when shorter.
    TokenSeq context_key(std::span<const TokenId> ctx) const {
        TokenSeq key(static_cast<std::size_t>(order_), kBeginToken);
        std::size_t take = std::min(ctx.size(), key.size());
        std::copy(ctx.end() - static_cast<std::ptrdiff_t>(take), ctx.end(),
                  key.end() - static_cast<std::ptrdiff_t>(take));
        return key;
    }

    /// Raw (untempered) row for the context; uniform for unseen contexts.
    const Distribution& raw_row(std::span<const TokenId> ctx) const {
        auto it = table_.find(context_key(ctx));
        if (it != table_.end()) return it->second;
        if (uniform_.probs.empty()) uniform_ = Distribution::uniform(static_cast<std::size_t>(vocab_));
        return uniform_;
    }

private:
    int vocab_ = 2;
    int order_ = 0;
    double temperature_ = 1.0;
    Table table_;
    std::int64_t step_ = 0;
    mutable Distribution uniform_;
};

/// Tempered next-token distribution for the last k tokens of ctx.
/// temperature 1 returns the raw row unchanged; temperature 0 returns a
/// one-hot argmax row (ties toward the lowest TokenId).
inline Distribution target_next_dist(const MarkovTargetModel& model, std::span<const TokenId> ctx) {
    const Distribution& raw = model.raw_row(ctx);
    double t = model.temperature();
    if (t == 1.0) return raw;
    if (t == 0.0) return Distribution::one_hot(raw.probs.size(), raw.argmax());
    Distribution out{std::vector<double>(raw.probs.size(), 0.0)};
    double inv = 1.0 / t;
    for (std::size_t i = 0; i < raw.probs.size(); ++i) {
        if (raw.probs[i] > 0.0) out.probs[i] = std::pow(raw.probs[i], inv);
    }
    out.normalize();
    return out;
}

/// New model whose every row is (1-lambda)*old + lambda*Dirichlet(1) with a
/// fresh perturbation per row (rows visited in table order); step_id + 1.
inline MarkovTargetModel apply_drift(const MarkovTargetModel& model, double lambda, RngStream& rng) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda", "must be in [0, 1]");
    MarkovTargetModel::Table table;
    for (const auto& [ctx, row] : model.table()) {
        Distribution pert{rng.dirichlet_flat(row.probs.size())};
        table.emplace(ctx, blend_rows(row, pert, lambda));
    }
    return MarkovTargetModel(model.vocab_size(), model.order(), model.temperature(),
                             std::move(table), model.step_id() + 1);
}

/// Samples up to max_len tokens autoregressively; stops after emitting EOS.
/// Returns only the generated suffix (EOS included when sampled).
inline TokenSeq generate_autoregressive(const MarkovTargetModel& model,
                                        std::span<const TokenId> prompt,
                                        int max_len, RngStream& rng) {
    TokenSeq ctx(prompt.begin(), prompt.end());
    TokenSeq out;
    for (int i = 0; i < max_len; ++i) {
        Distribution d = target_next_dist(model, ctx);
        TokenId t = sample_token(d, rng);
        out.push_back(t);
        ctx.push_back(t);
        if (t == kEosToken) break;
    }
    return out;
}

// --- serialization -----------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json model_to_json(const MarkovTargetModel& model) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [ctx, row] : model.table()) {
        rows.push_back({{"ctx", ctx}, {"probs", row.probs}});
    }
    return {{"format_version", kModelFormatVersion},
            {"vocab_size", model.vocab_size()},
            {"order", model.order()},
            {"temperature", model.temperature()},
            {"step_id", model.step_id()},
            {"rows", std::move(rows)}};
}

inline MarkovTargetModel model_from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("format_version", -1) != kModelFormatVersion)
        throw ConfigError("format_version", "unsupported model document");
    MarkovTargetModel::Table table;
    for (const auto& r : j.at("rows")) {
        table.emplace(r.at("ctx").get<TokenSeq>(),
                      Distribution{r.at("probs").get<std::vector<double>>()});
    }
    return MarkovTargetModel(j.at("vocab_size").get<int>(), j.at("order").get<int>(),
                             j.at("temperature").get<double>(), std::move(table),
                             j.at("step_id").get<std::int64_t>());
}

} // namespace specsim
