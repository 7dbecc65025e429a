#pragma once

#include <cmath>
#include <vector>

#include "specsim/rng.hpp"
#include "specsim/token_model.hpp"

namespace specsim {

/// Symmetric Dirichlet(alpha,...,alpha) draw (Marsaglia-Tsang gamma).
/// Small alpha gives sharp rows, alpha = 1 is flat over the simplex.
inline std::vector<double> dirichlet_symmetric(std::size_t dim, double alpha, RngStream& rng) {
    auto gamma_ge1 = [&rng](double a) {
        double d = a - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = rng.normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = rng.uniform01();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    };
    std::vector<double> out(dim);
    double sum = 0.0;
    for (auto& v : out) {
        if (alpha >= 1.0) {
            v = gamma_ge1(alpha);
        } else {
            double g = gamma_ge1(alpha + 1.0);
            double u = rng.uniform01();
            v = g * std::pow(u > 0.0 ? u : 1e-300, 1.0 / alpha);
        }
        if (v < 1e-300) v = 1e-300;
        sum += v;
    }
    for (auto& v : out) v /= sum;
    return out;
}

struct ModelGenParams {
    int vocab_size = 32;
    int order = 2;
    double temperature = 0.0;
    /// Dirichlet concentration of the order-`base_order` backbone rows.
    double base_concentration = 0.05;
    /// Backbone context length; rows of the full model mostly depend on it.
    int base_order = 1;
    /// Weight of the backbone inside each full-order row; the remainder is
    /// an independent per-row deviation.
    double structure_mix = 0.85;
    double dev_concentration = 0.5;
    /// Probability mass reserved for EOS in every row (0 = never emitted).
    double eos_weight = 0.0;
};

/// Order-k table whose rows blend a sharp low-order backbone with per-row
/// deviations. A drafter of the backbone order can explain most of the
/// argmax structure, which is what gives speculative drafting its bite.
inline MarkovTargetModel make_structured_model(const ModelGenParams& p, RngStream& rng) {
    auto strip_reserved = [](std::vector<double> probs) {
        probs[static_cast<std::size_t>(kEosToken)] = 0.0;
        Distribution d{std::move(probs)};
        d.normalize();
        return d;
    };

    const std::size_t v = static_cast<std::size_t>(p.vocab_size);
    std::map<TokenSeq, Distribution> base;
    std::vector<TokenSeq> base_ctxs = [&] {
        std::vector<TokenSeq> out{{}};
        for (int i = 0; i < p.base_order; ++i) {
            std::vector<TokenSeq> next;
            for (const auto& c : out) {
                for (int t = 0; t < p.vocab_size; ++t) {
                    TokenSeq e = c;
                    e.push_back(static_cast<TokenId>(t));
                    next.push_back(std::move(e));
                }
            }
            out = std::move(next);
        }
        return out;
    }();
    for (const auto& c : base_ctxs) {
        base.emplace(c, strip_reserved(dirichlet_symmetric(v, p.base_concentration, rng)));
    }

    MarkovTargetModel::Table table;
    std::vector<TokenSeq> ctxs{{}};
    for (int i = 0; i < p.order; ++i) {
        std::vector<TokenSeq> next;
        for (const auto& c : ctxs) {
            for (int t = 0; t < p.vocab_size; ++t) {
                TokenSeq e = c;
                e.push_back(static_cast<TokenId>(t));
                next.push_back(std::move(e));
            }
        }
        ctxs = std::move(next);
    }
    for (const auto& c : ctxs) {
        TokenSeq tail(c.end() - std::min<std::size_t>(c.size(), static_cast<std::size_t>(p.base_order)), c.end());
        while (static_cast<int>(tail.size()) < p.base_order) tail.insert(tail.begin(), kBeginToken);
        const Distribution& b = base.count(tail) ? base.at(tail) : base.begin()->second;
        Distribution dev = strip_reserved(dirichlet_symmetric(v, p.dev_concentration, rng));
        Distribution row = blend_rows(dev, b, p.structure_mix);
        if (p.eos_weight > 0.0) {
            row = blend_rows(row, Distribution::one_hot(v, kEosToken), p.eos_weight);
        }
        table.emplace(c, std::move(row));
    }
    return MarkovTargetModel(p.vocab_size, p.order, p.temperature, std::move(table));
}

/// Fully random order-k model: every row an independent Dirichlet draw.
inline MarkovTargetModel make_random_model(int vocab_size, int order, double temperature,
                                           double concentration, double eos_weight,
                                           RngStream& rng) {
    ModelGenParams p;
    p.vocab_size = vocab_size;
    p.order = order;
    p.temperature = temperature;
    p.structure_mix = 0.0;
    p.dev_concentration = concentration;
    p.eos_weight = eos_weight;
    p.base_order = 0;
    return make_structured_model(p, rng);
}

/// Deterministic cycle t_i -> t_{i+1} over the given tokens (order 1).
inline MarkovTargetModel make_cyclic_model(int vocab_size, const TokenSeq& cycle) {
    MarkovTargetModel::Table table;
    for (std::size_t i = 0; i < cycle.size(); ++i) {
        TokenId next = cycle[(i + 1) % cycle.size()];
        table.emplace(TokenSeq{cycle[i]},
                      Distribution::one_hot(static_cast<std::size_t>(vocab_size), next));
    }
    return MarkovTargetModel(vocab_size, 1, 0.0, std::move(table));
}

} // namespace specsim
